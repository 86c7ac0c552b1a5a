//! Retrieval, clustering and detection metrics plus the report container.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthWorld;
use crate::tensor::Tensor;

/// Lower and upper AUC clamp applied before the normal quantile.
pub const AUC_CLAMP: f64 = 1e-6;

/// Mean of precision-at-k over the ranks `k` holding a relevant item.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    Ok(sum / hits as f64)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Per-class set sizes for query-by-example retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QbeConfig {
    pub positives: usize,
    pub negatives: usize,
}

impl Default for QbeConfig {
    fn default() -> Self {
        QbeConfig {
            positives: 25,
            negatives: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QbeResult {
    pub map: f64,
    /// `(class, AP)` for every evaluated class.
    pub per_class: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
}

fn sorted_sample(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = if n >= pool.len() {
        pool.to_vec()
    } else {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    };
    s.sort_unstable();
    s
}

/// Query-by-example mAP: per class, within-class pairs of sampled positives
/// are relevant and positive-negative pairs are not; pairs are ranked by
/// ascending cosine distance with ties broken by `(min id, max id)`.
pub fn qbe_map(
    embeddings: &Tensor,
    labels: &[usize],
    classes: &[usize],
    config: &QbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<QbeResult> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(
            "qbe_map",
            format!("{} embeddings for {} labels", embeddings.rows(), labels.len()),
        ));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for &c in classes {
        let pos_pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let neg_pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != c).collect();
        let pos = sorted_sample(rng, &pos_pool, config.positives);
        let neg = sorted_sample(rng, &neg_pool, config.negatives);
        if pos.len() < 2 {
            log::warn!("class {c} has fewer than 2 positives; skipped");
            skipped.push(c);
            continue;
        }
        let mut pairs: Vec<(f64, usize, usize, bool)> = Vec::new();
        for (a, &i) in pos.iter().enumerate() {
            for &j in &pos[a + 1..] {
                pairs.push((cosine_distance(embeddings.row(i), embeddings.row(j)), i, j, true));
            }
            for &j in &neg {
                let d = cosine_distance(embeddings.row(i), embeddings.row(j));
                pairs.push((d, i.min(j), i.max(j), false));
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let rel: Vec<bool> = pairs.iter().map(|p| p.3).collect();
        per_class.push((c, average_precision(&rel)?));
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric("no class has two positives".into()));
    }
    let map = per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64;
    Ok(QbeResult {
        map,
        per_class,
        skipped,
    })
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean, in nats.
pub fn homogeneity_completeness_v(clusters: &[usize], labels: &[usize]) -> Result<(f64, f64, f64)> {
    if clusters.is_empty() || clusters.len() != labels.len() {
        return Err(Error::Contract(format!(
            "v-measure needs equal nonempty inputs, got {} and {}",
            clusters.len(),
            labels.len()
        )));
    }
    let n = clusters.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&k, &c) in clusters.iter().zip(labels) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy_of_counts(by_class.values(), n);
    let h_k = entropy_of_counts(by_cluster.values(), n);
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_c_given_k -= p * (nck as f64 / by_cluster[&k] as f64).ln();
        h_k_given_c -= p * (nck as f64 / by_class[&c] as f64).ln();
    }
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    Ok((h, c, v))
}

pub fn v_measure(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    homogeneity_completeness_v(clusters, labels).map(|t| t.2)
}

/// Area under the ROC curve by the rank statistic; ties count one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs positive and negative scores".into()));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Standard normal quantile (Wichura's AS241, relative accuracy about 1e-16).
pub fn normal_quantile(p: f64) -> f64 {
    fn poly(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        133.141_667_891_784_38,
        1_971.590_950_306_551_4,
        13_731.693_765_509_46,
        45_921.953_931_549_87,
        67_265.770_927_008_7,
        33_430.575_583_588_13,
        2_509.080_928_730_122_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_91,
        687.187_007_492_057_9,
        5_394.196_021_424_751,
        21_213.794_301_586_597,
        39_307.895_800_092_71,
        28_729.085_735_721_943,
        5_226.495_278_852_854,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_6,
        4.630_337_846_156_545,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        0.241_780_725_177_450_6,
        0.022_723_844_989_269_184,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        0.689_767_334_985_1,
        0.148_103_976_427_480_08,
        0.015_198_666_563_616_457,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        0.296_560_571_828_504_9,
        0.026_532_189_526_576_124,
        0.001_242_660_947_388_078_4,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_9,
        0.136_929_880_922_735_8,
        0.014_875_361_290_850_615,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_8e-15,
    ];

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// `√2 · Φ⁻¹(AUC)` with AUC clamped to `[1e-6, 1 - 1e-6]`.
pub fn d_prime(auc: f64) -> f64 {
    std::f64::consts::SQRT_2 * normal_quantile(auc.clamp(AUC_CLAMP, 1.0 - AUC_CLAMP))
}

/// A run of consecutive frames sharing one label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub frames: Vec<usize>,
    pub label: usize,
}

/// Cuts each sequence into runs of equal-label frames of at most `max_len`
/// frames. Background runs are dropped.
pub fn segment_clips(world: &SynthWorld, sequences: &[usize], max_len: usize) -> Vec<Clip> {
    let max_len = max_len.max(1);
    let bg = world.background_label();
    let mut clips = Vec::new();
    for &s in sequences {
        let mut current: Option<Clip> = None;
        for f in world.sequence_frames(s) {
            let label = world.labels[f];
            match current.as_mut() {
                Some(c) if c.label == label && c.frames.len() < max_len => c.frames.push(f),
                _ => {
                    if let Some(c) = current.take() {
                        clips.push(c);
                    }
                    current = Some(Clip { frames: vec![f], label });
                }
            }
        }
        clips.extend(current);
    }
    clips.retain(|c| Some(c.label) != bg);
    clips
}

/// Mean of frame score rows per clip; `clips` index rows of `frame_scores`.
pub fn clip_level_scores(frame_scores: &Tensor, clips: &[Vec<usize>]) -> Result<Tensor> {
    let k = frame_scores.cols();
    let mut out = Vec::with_capacity(clips.len() * k);
    for (ci, clip) in clips.iter().enumerate() {
        if clip.is_empty() {
            return Err(Error::Contract(format!("clip {ci} has no frames")));
        }
        let mut acc = vec![0.0; k];
        for &f in clip {
            if f >= frame_scores.rows() {
                return Err(Error::Contract(format!("frame {f} outside score matrix")));
            }
            for (a, v) in acc.iter_mut().zip(frame_scores.row(f)) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a / clip.len() as f64));
    }
    if clips.is_empty() {
        return Err(Error::Contract("no clips".into()));
    }
    Tensor::matrix(clips.len(), k, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierScores {
    pub map: f64,
    pub mean_d_prime: f64,
    /// `(class, AP, d′)` for every evaluated class.
    pub per_class: Vec<(usize, f64, f64)>,
    pub skipped: Vec<usize>,
}

/// Per-class AP over clips ranked by descending score (ties by clip index)
/// and per-class d′ from positive versus negative clip scores, averaged.
pub fn classifier_map(clip_scores: &Tensor, clip_labels: &[usize], classes: &[usize]) -> Result<ClassifierScores> {
    if clip_scores.rows() != clip_labels.len() {
        return Err(Error::shape(
            "classifier_map",
            format!("{} score rows for {} labels", clip_scores.rows(), clip_labels.len()),
        ));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for &c in classes {
        if c >= clip_scores.cols() {
            return Err(Error::Contract(format!("class {c} has no score column")));
        }
        let score = |i: usize| clip_scores.row(i)[c];
        let n = clip_labels.len();
        let npos = clip_labels.iter().filter(|&&l| l == c).count();
        if npos == 0 || npos == n {
            log::warn!("class {c} lacks positive or negative clips; skipped");
            skipped.push(c);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        let rel: Vec<bool> = order.iter().map(|&i| clip_labels[i] == c).collect();
        let ap = average_precision(&rel)?;
        let pos: Vec<f64> = (0..n).filter(|&i| clip_labels[i] == c).map(score).collect();
        let neg: Vec<f64> = (0..n).filter(|&i| clip_labels[i] != c).map(score).collect();
        per_class.push((c, ap, d_prime(auc(&pos, &neg)?)));
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric("no class has positive clips".into()));
    }
    let m = per_class.len() as f64;
    Ok(ClassifierScores {
        map: per_class.iter().map(|p| p.1).sum::<f64>() / m,
        mean_d_prime: per_class.iter().map(|p| p.2).sum::<f64>() / m,
        per_class,
        skipped,
    })
}

/// `(value - baseline) / (topline - baseline)`.
pub fn recovery(value: f64, baseline: f64, topline: f64) -> Result<f64> {
    let range = topline - baseline;
    if range == 0.0 || !range.is_finite() || !value.is_finite() {
        return Err(Error::Degenerate(format!(
            "recovery needs a finite nonzero range, got baseline {baseline} and topline {topline}"
        )));
    }
    Ok((value - baseline) / range)
}

/// Named scalar metrics with run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub suite: String,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Corrupt {
            what: "report",
            detail: e.to_string(),
        })
    }

    /// Header and value lines for a flat CSV row.
    pub fn csv_lines(&self) -> (String, String) {
        let mut header = vec!["suite", "split", "seed", "config_hash", "checkpoint_hash", "timestamp"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut row = vec![
            self.suite.clone(),
            self.split.clone(),
            self.seed.to_string(),
            self.config_hash.clone(),
            self.checkpoint_hash.clone(),
            self.timestamp.clone().unwrap_or_default(),
        ];
        for (k, v) in &self.metrics {
            header.push(k.clone());
            row.push(v.to_string());
        }
        (header.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
        let v = average_precision(&[true, false, true]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((average_precision(&[false, false, false, true]).unwrap() - 0.25).abs() < 1e-15);
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn v_measure_examples() {
        assert!((v_measure(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!(v_measure(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        let (h, c, v) = homogeneity_completeness_v(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert!((h - 0.311).abs() < 1e-3, "{h}");
        assert!((c - 0.384).abs() < 1e-3, "{c}");
        assert!((v - 0.344).abs() < 1e-3, "{v}");
        assert!(v_measure(&[], &[]).is_err());
    }

    #[test]
    fn auc_and_d_prime_examples() {
        let a = auc(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(a, 0.5);
        assert!(d_prime(a).abs() < 1e-12);
        let a = auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!(a, 1.0);
        assert!((d_prime(a) - 6.7224).abs() < 1e-3, "{}", d_prime(a));
        assert!((d_prime(0.9) - 1.812).abs() < 1e-3);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn quantile_against_known_values() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.025) + 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn recovery_examples() {
        let r = recovery(0.669, 0.421, 0.784).unwrap();
        assert_eq!((r * 100.0).round(), 68.0);
        assert_eq!((recovery(0.549, 0.421, 0.784).unwrap() * 100.0).round(), 35.0);
        assert_eq!(recovery(0.421, 0.421, 0.784).unwrap(), 0.0);
        assert_eq!(recovery(0.784, 0.421, 0.784).unwrap(), 1.0);
        assert!(recovery(0.5, 0.4, 0.4).is_err());
    }

    #[test]
    fn qbe_perfect_and_duplicated() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..3).map(move |k| (k == l) as u8 as f64))
            .collect();
        let e = Tensor::matrix(9, 3, data).unwrap();
        let cfg = QbeConfig::default();
        let r = qbe_map(&e, &labels, &[0, 1, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.map, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = Tensor::matrix(9, 3, (0..27).map(|_| rand::Rng::gen::<f64>(&mut rng) - 0.5).collect()).unwrap();
        let doubled = Tensor::matrix(
            9,
            6,
            (0..9)
                .flat_map(|r| noisy.row(r).iter().chain(noisy.row(r)).copied().collect::<Vec<_>>())
                .collect(),
        )
        .unwrap();
        let a = qbe_map(&noisy, &labels, &[0, 1, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = qbe_map(&doubled, &labels, &[0, 1, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((a.map - b.map).abs() < 1e-12);
    }

    #[test]
    fn qbe_skips_thin_classes() {
        let e = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.1, 0.0, 1.0]).unwrap();
        let r = qbe_map(
            &e,
            &[0, 0, 1],
            &[0, 1],
            &QbeConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert!(qbe_map(
            &e,
            &[0, 1, 2],
            &[0, 1, 2],
            &QbeConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn clip_scores() {
        let s = Tensor::matrix(3, 2, vec![0.2, 0.8, 0.4, 0.6, 1.0, 0.0]).unwrap();
        let c = clip_level_scores(&s, &[vec![0, 1], vec![2]]).unwrap();
        assert!((c.row(0)[0] - 0.3).abs() < 1e-15);
        assert_eq!(c.row(1), &[1.0, 0.0]);
        assert!(clip_level_scores(&s, &[vec![]]).is_err());
    }

    #[test]
    fn perfect_classifier() {
        let labels = [0, 1, 2, 1];
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..3).map(move |k| (k == l) as u8 as f64))
            .collect();
        let r = classifier_map(&Tensor::matrix(4, 3, data).unwrap(), &labels, &[0, 1, 2]).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.mean_d_prime > 6.7);
    }

    #[test]
    fn report_is_stable() {
        let mut metrics = BTreeMap::new();
        metrics.insert("qbe_map".to_string(), 0.5);
        metrics.insert("a_metric".to_string(), 0.25);
        let r = EvalReport {
            suite: "qbe".into(),
            split: "evaluation".into(),
            seed: 3,
            config_hash: "x".into(),
            checkpoint_hash: "y".into(),
            timestamp: None,
            metrics,
        };
        let j = r.to_json();
        assert!(j.find("a_metric").unwrap() < j.find("qbe_map").unwrap());
        assert_eq!(EvalReport::from_json(&j).unwrap(), r);
        let (h, v) = r.csv_lines();
        assert_eq!(
            h,
            "suite,split,seed,config_hash,checkpoint_hash,timestamp,a_metric,qbe_map"
        );
        assert_eq!(v, "qbe,evaluation,3,x,y,,0.25,0.5");
    }
}
