//! Cluster assignment, budgeted annotation and label propagation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{cluster_distribution, ClusterHead};
use crate::tensor::Tensor;

/// Hard partition of a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub ids: Vec<usize>,
    /// Soft assignments, when produced by a cluster head.
    pub distributions: Option<Tensor>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn from_ids(ids: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("cluster id {bad} outside K = {k}")));
        }
        Ok(ClusterAssignment {
            ids,
            distributions: None,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of distinct clusters with at least one member.
    pub fn active(&self) -> usize {
        self.ids.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.ids {
            s[c] += 1;
        }
        s
    }

    /// Member positions of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &c) in self.ids.iter().enumerate() {
            m[c].push(i);
        }
        m
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax cluster per embedding row; ties go to the lowest index.
pub fn assign_clusters(head: &ClusterHead, embeddings: &Tensor) -> Result<ClusterAssignment> {
    let dist = cluster_distribution(head, embeddings)?;
    let ids = (0..dist.rows()).map(|r| argmax(dist.row(r))).collect();
    Ok(ClusterAssignment {
        ids,
        distributions: Some(dist),
        k: head.clusters(),
    })
}

/// How clusters are chosen when the budget is below the active count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSelection {
    #[default]
    LargestFirst,
    UniformRandom,
}

/// All active clusters if they fit the budget, otherwise the `budget`
/// largest ones (ties toward the lower id). Returned ids are ascending.
pub fn select_clusters_for_budget(assignment: &ClusterAssignment, budget: usize) -> Result<Vec<usize>> {
    check_budget(budget)?;
    let sizes = assignment.sizes();
    let mut active: Vec<usize> = (0..assignment.k).filter(|&c| sizes[c] > 0).collect();
    if budget < active.len() {
        active.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        active.truncate(budget);
        active.sort_unstable();
    }
    Ok(active)
}

/// Uniformly random subset of the active clusters of size `min(budget, active)`.
pub fn select_clusters_uniform(
    assignment: &ClusterAssignment,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    check_budget(budget)?;
    let sizes = assignment.sizes();
    let active: Vec<usize> = (0..assignment.k).filter(|&c| sizes[c] > 0).collect();
    if budget >= active.len() {
        return Ok(active);
    }
    let mut out: Vec<usize> = sample(rng, active.len(), budget)
        .into_iter()
        .map(|i| active[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn select_clusters(
    assignment: &ClusterAssignment,
    budget: usize,
    strategy: ClusterSelection,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match strategy {
        ClusterSelection::LargestFirst => select_clusters_for_budget(assignment, budget),
        ClusterSelection::UniformRandom => select_clusters_uniform(assignment, budget, rng),
    }
}

fn check_budget(budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    Ok(())
}

/// Where a label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// The oracle was asked about this example directly.
    Annotated { cluster: Option<usize> },
    /// Copied from the annotated member `source` of `cluster`.
    Propagated { cluster: usize, source: usize },
}

/// Per-example optional labels with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedLabelSet {
    /// External id of each position (defaults to the position itself).
    pub example_ids: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub provenance: Vec<Option<Provenance>>,
    /// Oracle queries spent.
    pub annotations: usize,
}

impl PropagatedLabelSet {
    fn empty(n: usize) -> Self {
        PropagatedLabelSet {
            example_ids: (0..n).collect(),
            labels: vec![None; n],
            provenance: vec![None; n],
            annotations: 0,
        }
    }

    /// Re-keys positions to external example ids.
    pub fn with_example_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.labels.len() {
            return Err(Error::Contract(format!(
                "{} example ids for {} labels",
                ids.len(),
                self.labels.len()
            )));
        }
        self.example_ids = ids;
        Ok(self)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Distinct labels present.
    pub fn covered_labels(&self) -> BTreeSet<usize> {
        self.labels.iter().flatten().copied().collect()
    }

    /// `(example_id, label)` pairs with `label < classes`, for classifier training.
    pub fn training_pairs(&self, classes: usize) -> Vec<(usize, usize)> {
        self.example_ids
            .iter()
            .zip(&self.labels)
            .filter_map(|(&id, l)| l.filter(|&c| c < classes).map(|c| (id, c)))
            .collect()
    }

    /// Writes labeled rows as `example_id,label_id,provenance,source_cluster`.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example_id", "label_id", "provenance", "source_cluster"])
            .map_err(csv_io)?;
        for i in 0..self.labels.len() {
            let (Some(label), Some(prov)) = (self.labels[i], self.provenance[i]) else {
                continue;
            };
            let (kind, cluster) = match prov {
                Provenance::Annotated { cluster } => ("annotated", cluster),
                Provenance::Propagated { cluster, .. } => ("propagated", Some(cluster)),
            };
            w.write_record([
                self.example_ids[i].to_string(),
                label.to_string(),
                kind.to_string(),
                cluster.map(|c| c.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Corrupt {
            what: "label csv",
            detail: format!("{other:?}"),
        },
    }
}

/// One row of a label CSV.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct LabelRow {
    pub example_id: usize,
    pub label_id: usize,
    pub provenance: String,
    pub source_cluster: Option<usize>,
}

/// Reads the rows of a label CSV, validating the header and provenance values.
pub fn read_label_csv(input: impl std::io::Read) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_io)?.clone();
    if header.iter().collect::<Vec<_>>() != ["example_id", "label_id", "provenance", "source_cluster"] {
        return Err(Error::Corrupt {
            what: "label csv",
            detail: format!("unexpected header {:?}", header),
        });
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: LabelRow = rec.map_err(csv_io)?;
        if row.provenance != "annotated" && row.provenance != "propagated" {
            return Err(Error::Corrupt {
                what: "label csv",
                detail: format!("unknown provenance '{}'", row.provenance),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reveals one uniformly drawn member's oracle label per selected cluster and
/// copies it to every member of that cluster.
pub fn annotate_and_propagate(
    assignment: &ClusterAssignment,
    selected: &[usize],
    oracle: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<PropagatedLabelSet> {
    if oracle.len() != assignment.len() {
        return Err(Error::Contract(format!(
            "oracle has {} labels for {} examples",
            oracle.len(),
            assignment.len()
        )));
    }
    let members = assignment.members();
    let mut set = PropagatedLabelSet::empty(assignment.len());
    let mut seen = BTreeSet::new();
    for &c in selected {
        if c >= assignment.k {
            return Err(Error::Contract(format!("cluster {c} outside K = {}", assignment.k)));
        }
        if !seen.insert(c) {
            return Err(Error::Contract(format!("cluster {c} selected twice")));
        }
        let m = &members[c];
        if m.is_empty() {
            return Err(Error::Contract(format!("selected cluster {c} is empty")));
        }
        let source = m[rng.gen_range(0..m.len())];
        let label = oracle[source];
        set.annotations += 1;
        for &i in m {
            set.labels[i] = Some(label);
            set.provenance[i] = Some(if i == source {
                Provenance::Annotated { cluster: Some(c) }
            } else {
                Provenance::Propagated { cluster: c, source }
            });
        }
    }
    Ok(set)
}

/// Quality of a label set against the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelQuality {
    pub precision: f64,
    pub recall: f64,
    /// Oracle queries spent.
    pub n_labeled: usize,
    /// Examples carrying a label.
    pub n_examples_labeled: usize,
    /// True when nothing was labeled (precision reported as 0).
    pub empty: bool,
}

/// Precision over all labeled examples; recall over oracle examples whose
/// label is in `eval_classes`.
pub fn label_precision_recall(
    set: &PropagatedLabelSet,
    oracle: &[usize],
    eval_classes: &[usize],
) -> Result<LabelQuality> {
    if oracle.len() != set.labels.len() {
        return Err(Error::Contract(format!(
            "oracle has {} labels for {} examples",
            oracle.len(),
            set.labels.len()
        )));
    }
    let eval: BTreeSet<usize> = eval_classes.iter().copied().collect();
    let mut labeled = 0usize;
    let mut correct = 0usize;
    let mut correct_eval = 0usize;
    let mut total_eval = 0usize;
    for (l, &o) in set.labels.iter().zip(oracle) {
        let in_eval = eval.contains(&o);
        total_eval += in_eval as usize;
        if let Some(l) = l {
            labeled += 1;
            if *l == o {
                correct += 1;
                correct_eval += in_eval as usize;
            }
        }
    }
    Ok(LabelQuality {
        precision: if labeled == 0 {
            0.0
        } else {
            correct as f64 / labeled as f64
        },
        recall: if total_eval == 0 {
            0.0
        } else {
            correct_eval as f64 / total_eval as f64
        },
        n_labeled: set.annotations,
        n_examples_labeled: labeled,
        empty: labeled == 0,
    })
}

/// `budget` examples drawn without replacement, each labeled by the oracle.
pub fn random_label_baseline(oracle: &[usize], budget: usize, rng: &mut ChaCha8Rng) -> Result<PropagatedLabelSet> {
    check_budget(budget)?;
    if budget > oracle.len() {
        return Err(Error::Config(format!(
            "budget {budget} exceeds the {} available examples",
            oracle.len()
        )));
    }
    let mut set = PropagatedLabelSet::empty(oracle.len());
    let mut picks = sample(rng, oracle.len(), budget).into_vec();
    picks.sort_unstable();
    for i in picks {
        set.labels[i] = Some(oracle[i]);
        set.provenance[i] = Some(Provenance::Annotated { cluster: None });
    }
    set.annotations = budget;
    Ok(set)
}
