//! Objective functions: audio-audio and audio-visual coincidence
//! (balanced cross-entropy over a batch of positives with in-batch
//! negatives), entropy-based clustering, classification cross-entropy, and
//! the two curriculum interpolations built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, PROB_CEIL, PROB_FLOOR};
use crate::models::ModelVars;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// audio paired with audio
    Aa,
    /// audio paired with an image frame
    Av,
}

/// How the non-coinciding pairs of a batch are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Every cross pairing `(i, j)`, `i != j`: `B(B-1)` negatives.
    #[default]
    AllPairs,
    /// One random `j != i` per `i`: `B` negatives.
    RandomSingle,
}

/// `B` coinciding pairs. Negatives index `(first row, second row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub modality: Modality,
    /// `B × audio_dim`
    pub first: Tensor,
    /// `B × audio_dim` (AA) or `B × image_dim` (AV)
    pub second: Tensor,
    pub negatives: Vec<(usize, usize)>,
    /// Oracle labels of both members, for diagnostics only.
    pub first_labels: Vec<usize>,
    pub second_labels: Vec<usize>,
}

impl PairBatch {
    pub fn new(modality: Modality, first: Tensor, second: Tensor, negatives: Vec<(usize, usize)>) -> Result<Self> {
        let b = first.rows();
        if first.rank() != 2 || second.rank() != 2 || second.rows() != b {
            return Err(Error::shape(
                "pair_batch",
                format!("{:?} vs {:?}", first.shape(), second.shape()),
            ));
        }
        if b < 2 {
            return Err(Error::Contract("a pair batch needs B >= 2".into()));
        }
        if negatives.iter().any(|&(i, j)| i == j || i >= b || j >= b) {
            return Err(Error::Contract("negative pairs must index distinct rows".into()));
        }
        Ok(PairBatch {
            modality,
            first,
            second,
            negatives,
            first_labels: Vec::new(),
            second_labels: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.first.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All ordered pairs `(i, j)` with `i != j`, row-major.
    pub fn all_pairs(b: usize) -> Vec<(usize, usize)> {
        (0..b)
            .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect()
    }
}

/// Examples with one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `B × audio_dim`
    pub inputs: Tensor,
    /// `B × C`
    pub targets: Tensor,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(Error::shape(
                "labeled_batch",
                format!("{:?} vs {:?}", inputs.shape(), targets.shape()),
            ));
        }
        for r in 0..targets.rows() {
            if targets.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::Contract(format!("label row {r} is all zero")));
            }
        }
        Ok(LabeledBatch { inputs, targets })
    }

    pub fn from_indices(inputs: Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let mut t = vec![0.0; labels.len() * classes];
        for (r, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::Contract(format!("label {c} outside {classes} classes")));
            }
            t[r * classes + c] = 1.0;
        }
        LabeledBatch::new(inputs, Tensor::matrix(labels.len(), classes, t)?)
    }
}

/// Interpolation weights and diversity for the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CurriculumWeights {
    fn default() -> Self {
        CurriculumWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl CurriculumWeights {
    pub fn validate(&self) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        check_unit("beta", self.beta)?;
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Contract(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

// ----- building blocks ----------------------------------------------------

/// `-mean(ln p_pos) - mean(ln(1 - p_neg))`.
pub fn balanced_coincidence_loss(g: &mut Graph, positives: Var, negatives: Var) -> Result<Var> {
    let lp = g.log_prob(positives)?;
    let pos = g.mean(lp)?;
    let q = g.one_minus(negatives)?;
    let lq = g.log_prob(q)?;
    let neg = g.mean(lq)?;
    let total = g.add(pos, neg)?;
    g.neg(total)
}

/// Row entropies `-Σ_k p ln p` of a `B × K` distribution matrix, in nats.
pub fn row_entropies(g: &mut Graph, probs: Var) -> Result<Var> {
    let lp = g.log_prob(probs)?;
    let plp = g.mul(probs, lp)?;
    let s = g.sum_axis(plp, 1)?;
    g.neg(s)
}

/// `mean_i H[p_i] - γ · H[mean_i p_i]` for a `B × K` matrix of
/// distributions.
pub fn clustering_objective(g: &mut Graph, probs: Var, gamma: f64) -> Result<Var> {
    let probs = if g.shape(probs).len() == 1 {
        let k = g.shape(probs)[0];
        g.reshape(probs, vec![1, k])?
    } else {
        probs
    };
    let h = row_entropies(g, probs)?;
    let mean_h = g.mean(h)?;
    let marginal = g.mean_axis(probs, 0)?;
    let k = g.shape(marginal)[0];
    let marginal = g.reshape(marginal, vec![1, k])?;
    let h_marg = row_entropies(g, marginal)?;
    let h_marg = g.sum(h_marg)?;
    let div = g.scale(h_marg, gamma)?;
    g.sub(mean_h, div)
}

/// `-(1/B) Σ_i Σ_c y_ic ln p_ic`.
pub fn cross_entropy(g: &mut Graph, targets: Var, probs: Var) -> Result<Var> {
    let lp = g.log_prob(probs)?;
    let ylp = g.mul(targets, lp)?;
    let per_row = g.sum_axis(ylp, 1)?;
    let m = g.mean(per_row)?;
    g.neg(m)
}

/// `(1 - w)·a + w·b`, skipping a side whose weight is exactly zero.
fn interpolate(
    g: &mut Graph,
    w: f64,
    a: impl FnOnce(&mut Graph) -> Result<Var>,
    b: impl FnOnce(&mut Graph) -> Result<Var>,
) -> Result<Var> {
    if w == 0.0 {
        return a(g);
    }
    if w == 1.0 {
        return b(g);
    }
    let va = a(g)?;
    let vb = b(g)?;
    let sa = g.scale(va, 1.0 - w)?;
    let sb = g.scale(vb, w)?;
    g.add(sa, sb)
}

// ----- model losses -------------------------------------------------------

fn coincidence_loss(g: &mut Graph, vars: &ModelVars, batch: &PairBatch, expected: Modality) -> Result<Var> {
    if batch.modality != expected {
        return Err(Error::Contract(format!(
            "expected a {expected:?} batch, got {:?}",
            batch.modality
        )));
    }
    if batch.len() < 2 {
        return Err(Error::Contract("coincidence loss needs B >= 2".into()));
    }
    if batch.negatives.is_empty() {
        return Err(Error::Contract("coincidence loss needs at least one negative".into()));
    }
    let x1 = g.constant(batch.first.clone());
    let x2 = g.constant(batch.second.clone());
    let e1 = vars.audio.forward(g, x1)?;
    let (e2, head) = match expected {
        Modality::Aa => (vars.audio.forward(g, x2)?, vars.aa),
        Modality::Av => (vars.image.forward(g, x2)?, vars.av),
    };
    let pos = head.forward(g, e1, e2)?;
    let (ni, nj): (Vec<usize>, Vec<usize>) = batch.negatives.iter().copied().unzip();
    let n1 = g.gather_rows(e1, &ni)?;
    let n2 = g.gather_rows(e2, &nj)?;
    let neg = head.forward(g, n1, n2)?;
    balanced_coincidence_loss(g, pos, neg)
}

/// Audio-audio coincidence loss over `batch`.
pub fn loss_aa(g: &mut Graph, vars: &ModelVars, batch: &PairBatch) -> Result<Var> {
    coincidence_loss(g, vars, batch, Modality::Aa)
}

/// Audio-visual coincidence loss over `batch`.
pub fn loss_av(g: &mut Graph, vars: &ModelVars, batch: &PairBatch) -> Result<Var> {
    coincidence_loss(g, vars, batch, Modality::Av)
}

/// Entropy clustering loss on a `B × audio_dim` batch of audio examples.
pub fn loss_clust(g: &mut Graph, vars: &ModelVars, audio: &Tensor, gamma: f64) -> Result<Var> {
    let x = g.constant(audio.clone());
    let e = vars.audio.forward(g, x)?;
    let p = vars.cluster.forward(g, e)?;
    clustering_objective(g, p, gamma)
}

/// Classification cross-entropy on a labeled audio batch.
pub fn loss_class(g: &mut Graph, vars: &ModelVars, batch: &LabeledBatch) -> Result<Var> {
    let x = g.constant(batch.inputs.clone());
    let e = vars.audio.forward(g, x)?;
    let p = vars.classifier.forward(g, e)?;
    if g.shape(p) != batch.targets.shape() {
        return Err(Error::shape(
            "loss_class",
            format!("predictions {:?} vs targets {:?}", g.shape(p), batch.targets.shape()),
        ));
    }
    let y = g.constant(batch.targets.clone());
    cross_entropy(g, y, p)
}

/// `(1 - α)·L_AV + α·L_AA`.
pub fn loss_coin(g: &mut Graph, vars: &ModelVars, aa: &PairBatch, av: &PairBatch, alpha: f64) -> Result<Var> {
    check_unit("alpha", alpha)?;
    interpolate(g, alpha, |g| loss_av(g, vars, av), |g| loss_aa(g, vars, aa))
}

/// `(1 - β)·L_coin + β·L_clust`.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint(
    g: &mut Graph,
    vars: &ModelVars,
    aa: &PairBatch,
    av: &PairBatch,
    clust_audio: &Tensor,
    weights: &CurriculumWeights,
) -> Result<Var> {
    check_unit("beta", weights.beta)?;
    check_unit("alpha", weights.alpha)?;
    interpolate(
        g,
        weights.beta,
        |g| loss_coin(g, vars, aa, av, weights.alpha),
        |g| loss_clust(g, vars, clust_audio, weights.gamma),
    )
}

// ----- plain-value diagnostics --------------------------------------------

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.clamp(PROB_FLOOR, PROB_CEIL).ln()).sum::<f64>()
}

/// `H[mean row] - mean_i H[row_i]` for a `B × K` matrix of distributions,
/// with the same log clamp as the losses.
pub fn mutual_information_estimate(dists: &Tensor) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Contract("empty distribution matrix".into()));
    }
    let (b, k) = (dists.rows(), dists.cols());
    let mut marginal = vec![0.0; k];
    let mut mean_h = 0.0;
    for r in 0..b {
        let row = dists.row(r);
        for (m, v) in marginal.iter_mut().zip(row) {
            *m += v;
        }
        mean_h += entropy(row);
    }
    marginal.iter_mut().for_each(|m| *m /= b as f64);
    Ok(entropy(&marginal) - mean_h / b as f64)
}
