//! Seeded two-modality world with slowly changing latent classes.
//!
//! Each sequence is a run of frames at a 1 Hz convention. A latent class
//! holds for a geometrically distributed dwell time and then switches. An
//! audio frame is its class's audio prototype plus a per-sequence nuisance
//! offset plus white noise; image frames are built the same way from
//! independent prototypes of a different width.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{bytes_hash, config_hash};
use crate::losses::{Modality, NegativeMode, PairBatch};
use crate::tensor::Tensor;

pub const WORLD_MAGIC: &[u8; 8] = b"COCNWRLD";
pub const WORLD_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Number of latent classes that make up the evaluation label set.
    pub classes: usize,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub audio_dim: usize,
    pub image_dim: usize,
    /// Mean number of frames between class changes.
    pub class_dwell_mean: f64,
    pub noise_std: f64,
    /// Std of the per-sequence additive offsets.
    pub nuisance_std: f64,
    /// Class priors are proportional to `(k + 1)^-exponent`; 0 is uniform.
    #[serde(default)]
    pub class_prior_exponent: f64,
    /// Prior mass of an extra out-of-set background class; 0 disables it.
    #[serde(default)]
    pub background_prior: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("world needs at least 2 classes".into()));
        }
        if self.audio_dim < 2 || self.image_dim < 2 {
            return Err(Error::Config("audio_dim and image_dim must be >= 2".into()));
        }
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config("world must contain frames".into()));
        }
        if !(self.class_dwell_mean >= 1.0) {
            return Err(Error::Config("class_dwell_mean must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.nuisance_std >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.class_prior_exponent >= 0.0) {
            return Err(Error::Config("class_prior_exponent must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.background_prior) {
            return Err(Error::Config("background_prior must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn has_background(&self) -> bool {
        self.background_prior > 0.0
    }

    /// Number of distinct oracle labels, background included.
    pub fn label_count(&self) -> usize {
        self.classes + usize::from(self.has_background())
    }

    /// Stationary label priors, background last when present.
    pub fn priors(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.classes)
            .map(|k| ((k + 1) as f64).powf(-self.class_prior_exponent))
            .collect();
        let z: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|r| r / z * (1.0 - self.background_prior)).collect();
        if self.has_background() {
            p.push(self.background_prior);
        }
        p
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// A generated world. Frames are stored sequence-major: sequence `s`
/// occupies rows `s·L .. (s+1)·L`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub config: WorldConfig,
    /// `N × audio_dim`
    pub audio: Tensor,
    /// `N × image_dim`
    pub image: Tensor,
    pub sequence: Vec<usize>,
    pub time: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SynthWorld {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn frame_index(&self, sequence: usize, t: usize) -> usize {
        sequence * self.config.frames_per_sequence + t
    }

    /// Frame indices of one sequence.
    pub fn sequence_frames(&self, sequence: usize) -> std::ops::Range<usize> {
        let l = self.config.frames_per_sequence;
        sequence * l..(sequence + 1) * l
    }

    /// Labels evaluated by metrics (the background class is excluded).
    pub fn eval_classes(&self) -> Vec<usize> {
        (0..self.config.classes).collect()
    }

    pub fn background_label(&self) -> Option<usize> {
        self.config.has_background().then_some(self.config.classes)
    }

    pub fn audio_rows(&self, idx: &[usize]) -> Result<Tensor> {
        self.audio.select_rows(idx)
    }

    pub fn image_rows(&self, idx: &[usize]) -> Result<Tensor> {
        self.image.select_rows(idx)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws a class from `priors`, excluding `current` when given.
fn draw_label(rng: &mut ChaCha8Rng, priors: &[f64], current: Option<usize>) -> usize {
    let weights: Vec<f64> = priors
        .iter()
        .enumerate()
        .map(|(k, &p)| if Some(k) == current { 0.0 } else { p })
        .collect();
    WeightedIndex::new(&weights).expect("positive prior mass").sample(rng)
}

pub fn generate_world(config: &WorldConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels_n = config.label_count();
    let (a_dim, i_dim) = (config.audio_dim, config.image_dim);
    let audio_protos = normal_matrix(&mut rng, labels_n, a_dim, 1.0);
    let image_protos = normal_matrix(&mut rng, labels_n, i_dim, 1.0);
    let priors = config.priors();
    let switch_p = 1.0 / config.class_dwell_mean;

    let l = config.frames_per_sequence;
    let n = config.sequences * l;
    let mut audio = Vec::with_capacity(n * a_dim);
    let mut image = Vec::with_capacity(n * i_dim);
    let mut sequence = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    for s in 0..config.sequences {
        let a_off = normal_matrix(&mut rng, 1, a_dim, config.nuisance_std);
        let i_off = normal_matrix(&mut rng, 1, i_dim, config.nuisance_std);
        let mut label = draw_label(&mut rng, &priors, None);
        for t in 0..l {
            if t > 0 && rng.gen::<f64>() < switch_p {
                label = draw_label(&mut rng, &priors, Some(label));
            }
            let ap = &audio_protos[label * a_dim..(label + 1) * a_dim];
            audio.extend(ap.iter().zip(&a_off).map(|(p, o)| p + o + noise.sample(&mut rng)));
            let ip = &image_protos[label * i_dim..(label + 1) * i_dim];
            image.extend(ip.iter().zip(&i_off).map(|(p, o)| p + o + noise.sample(&mut rng)));
            sequence.push(s);
            time.push(t);
            labels.push(label);
        }
    }

    Ok(SynthWorld {
        config: config.clone(),
        audio: Tensor::matrix(n, a_dim, audio)?,
        image: Tensor::matrix(n, i_dim, image)?,
        sequence,
        time,
        labels,
    })
}

// ----- splits -------------------------------------------------------------

/// Sequence-granular partition of a world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub evaluation: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Evaluation,
}

impl Split {
    pub fn sequences(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Evaluation => &self.evaluation,
        }
    }

    /// Frame indices belonging to `part`, in ascending order.
    pub fn frames(&self, world: &SynthWorld, part: SplitPart) -> Vec<usize> {
        let mut seqs = self.sequences(part).to_vec();
        seqs.sort_unstable();
        seqs.into_iter().flat_map(|s| world.sequence_frames(s)).collect()
    }
}

/// Splits sequences (never individual frames) into train, validation and
/// evaluation parts according to `fractions`.
pub fn split(world: &SynthWorld, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be >= 0 and sum to 1"
        )));
    }
    let s = world.config.sequences;
    let mut order: Vec<usize> = (0..s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = (fractions[0] * s as f64).round() as usize;
    let n_val = ((fractions[1] * s as f64).round() as usize).min(s - n_train.min(s));
    let n_train = n_train.min(s);
    let counts = [n_train, n_val, s - n_train - n_val];
    for (f, c) in fractions.iter().zip(counts) {
        if *f > 0.0 && c == 0 {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} leave a requested part empty with {s} sequences"
            )));
        }
    }
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut it = order.into_iter();
    for (part, c) in parts.iter_mut().zip(counts) {
        part.extend(it.by_ref().take(c));
        part.sort_unstable();
    }
    let [train, validation, evaluation] = parts;
    Ok(Split {
        train,
        validation,
        evaluation,
    })
}

// ----- pair sampling ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Coincidence window in frames.
    pub delta_t: usize,
    pub batch_size: usize,
    pub modality: Modality,
    #[serde(default)]
    pub negatives: NegativeMode,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.delta_t == 0 && self.modality == Modality::Aa {
            return Err(Error::Config(
                "delta_t = 0 only makes sense for audio-visual pairs".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `B` coinciding pairs from the given sequences. Pairs come from
/// distinct sequences whenever there are at least `B` of them.
pub fn sample_pair_batch(
    world: &SynthWorld,
    sequences: &[usize],
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    config.validate()?;
    let b = config.batch_size;
    let l = world.config.frames_per_sequence;
    if sequences.is_empty() {
        return Err(Error::InsufficientData("no sequences to sample from".into()));
    }
    if config.modality == Modality::Aa && l < 2 {
        return Err(Error::InsufficientData(
            "audio-audio pairs need at least 2 frames per sequence".into(),
        ));
    }
    let chosen: Vec<usize> = if sequences.len() >= b {
        sample_indices(rng, sequences.len(), b)
            .into_iter()
            .map(|i| sequences[i])
            .collect()
    } else {
        (0..b).map(|_| sequences[rng.gen_range(0..sequences.len())]).collect()
    };

    let mut first_idx = Vec::with_capacity(b);
    let mut second_idx = Vec::with_capacity(b);
    for &s in &chosen {
        let t1 = rng.gen_range(0..l);
        let lo = t1.saturating_sub(config.delta_t);
        let hi = (t1 + config.delta_t).min(l - 1);
        let t2 = match config.modality {
            Modality::Av => rng.gen_range(lo..=hi),
            Modality::Aa => {
                // Uniform over the window without t1 itself.
                let t = rng.gen_range(lo..hi);
                if t >= t1 {
                    t + 1
                } else {
                    t
                }
            }
        };
        first_idx.push(world.frame_index(s, t1));
        second_idx.push(world.frame_index(s, t2));
    }

    let negatives = match config.negatives {
        NegativeMode::AllPairs => PairBatch::all_pairs(b),
        NegativeMode::RandomSingle => (0..b)
            .map(|i| {
                let j = rng.gen_range(0..b - 1);
                (i, if j >= i { j + 1 } else { j })
            })
            .collect(),
    };
    let second = match config.modality {
        Modality::Aa => world.audio_rows(&second_idx)?,
        Modality::Av => world.image_rows(&second_idx)?,
    };
    let mut batch = PairBatch::new(config.modality, world.audio_rows(&first_idx)?, second, negatives)?;
    batch.first_labels = first_idx.iter().map(|&i| world.labels[i]).collect();
    batch.second_labels = second_idx.iter().map(|&i| world.labels[i]).collect();
    Ok(batch)
}

/// Frame indices of the pairs last drawn are not kept; this draws `n`
/// frames uniformly (with replacement) from the given sequences.
pub fn sample_frames(world: &SynthWorld, sequences: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if sequences.is_empty() {
        return Err(Error::InsufficientData("no sequences to sample from".into()));
    }
    let l = world.config.frames_per_sequence;
    Ok((0..n)
        .map(|_| {
            let s = sequences[rng.gen_range(0..sequences.len())];
            world.frame_index(s, rng.gen_range(0..l))
        })
        .collect())
}

// ----- serialization ------------------------------------------------------

/// Human-readable sidecar written next to a world container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldManifest {
    pub format_version: u64,
    pub config_hash: String,
    pub frames: usize,
    /// SHA-256 of the container bytes.
    pub container_sha256: String,
    pub world: WorldConfig,
}

/// Path of the manifest belonging to a world container.
pub fn manifest_path(container: &Path) -> PathBuf {
    container.with_extension("toml")
}

/// Writes the binary container and its manifest.
///
/// Container layout, all integers little-endian `u64`:
/// magic `COCNWRLD`, version, frame count, sequence count, frames per
/// sequence, audio width, image width, label count; then audio and image
/// rows as little-endian `f64`, sequence ids, timestamps, and finally the
/// oracle labels.
pub fn write_world(world: &SynthWorld, path: &Path) -> Result<()> {
    let mut w = Vec::with_capacity(8 * (8 + world.audio.len() + world.image.len() + 3 * world.frames()));
    w.write_all(WORLD_MAGIC)?;
    let c = &world.config;
    for v in [
        WORLD_VERSION,
        world.frames() as u64,
        c.sequences as u64,
        c.frames_per_sequence as u64,
        c.audio_dim as u64,
        c.image_dim as u64,
        c.label_count() as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in world.audio.data().iter().chain(world.image.data()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in world.sequence.iter().chain(&world.time).chain(&world.labels) {
        w.write_all(&(*v as u64).to_le_bytes())?;
    }
    std::fs::write(path, &w)?;

    let manifest = WorldManifest {
        format_version: WORLD_VERSION,
        config_hash: c.hash(),
        frames: world.frames(),
        container_sha256: bytes_hash(&w),
        world: c.clone(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(manifest_path(path), text)?;
    Ok(())
}

pub fn read_manifest(container: &Path) -> Result<WorldManifest> {
    let text = std::fs::read_to_string(manifest_path(container))?;
    toml::from_str(&text).map_err(|e| Error::Corrupt {
        what: "world manifest",
        detail: e.to_string(),
    })
}

pub fn read_world(path: &Path) -> Result<SynthWorld> {
    let manifest = read_manifest(path)?;
    if manifest.config_hash != manifest.world.hash() {
        return Err(Error::HashMismatch {
            expected: manifest.world.hash(),
            found: manifest.config_hash,
        });
    }
    let corrupt = |detail: String| Error::Corrupt {
        what: "world container",
        detail,
    };
    let bytes = std::fs::read(path)?;
    if bytes_hash(&bytes) != manifest.container_sha256 {
        return Err(corrupt("checksum differs from the manifest".into()));
    }
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WORLD_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let mut header = [0u64; 7];
    for h in header.iter_mut() {
        *h = read_u64(&mut r)?;
    }
    let c = manifest.world;
    let expected = [
        WORLD_VERSION,
        (c.sequences * c.frames_per_sequence) as u64,
        c.sequences as u64,
        c.frames_per_sequence as u64,
        c.audio_dim as u64,
        c.image_dim as u64,
        c.label_count() as u64,
    ];
    if header != expected {
        return Err(corrupt(format!(
            "header {header:?} does not match manifest {expected:?}"
        )));
    }
    let n = expected[1] as usize;
    let audio = read_f64s(&mut r, n * c.audio_dim)?;
    let image = read_f64s(&mut r, n * c.image_dim)?;
    let mut ints = || -> Result<Vec<usize>> { (0..n).map(|_| read_u64(&mut r).map(|v| v as usize)).collect() };
    let sequence = ints()?;
    let time = ints()?;
    let labels = ints()?;
    if labels.iter().any(|&l| l >= c.label_count()) {
        return Err(corrupt("label out of range".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(SynthWorld {
        audio: Tensor::matrix(n, c.audio_dim, audio)?,
        image: Tensor::matrix(n, c.image_dim, image)?,
        config: c,
        sequence,
        time,
        labels,
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt {
            what: "world container",
            detail: "truncated".into(),
        },
        _ => Error::Io(e),
    })?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_world(seed: u64) -> WorldConfig {
        WorldConfig {
            classes: 4,
            sequences: 20,
            frames_per_sequence: 50,
            audio_dim: 6,
            image_dim: 7,
            class_dwell_mean: 20.0,
            noise_std: 0.3,
            nuisance_std: 0.5,
            class_prior_exponent: 0.0,
            background_prior: 0.0,
            seed,
        }
    }

    #[test]
    fn noiseless_frames_equal_per_class() {
        let mut c = small_world(1);
        c.noise_std = 0.0;
        c.nuisance_std = 0.0;
        let w = generate_world(&c).unwrap();
        for k in 0..c.classes {
            let rows: Vec<usize> = (0..w.frames()).filter(|&i| w.labels[i] == k).collect();
            for &r in &rows[1..] {
                assert_eq!(w.audio.row(r), w.audio.row(rows[0]));
                assert_eq!(w.image.row(r), w.image.row(rows[0]));
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small_world(3)).unwrap();
        let b = generate_world(&small_world(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_world(&small_world(4)).unwrap());
    }

    #[test]
    fn dwell_lengths_have_configured_mean() {
        let mut c = small_world(5);
        c.sequences = 20;
        c.frames_per_sequence = 1000;
        c.class_dwell_mean = 8.0;
        let w = generate_world(&c).unwrap();
        // Complete segments only: the last one of each sequence is cut short.
        let mut lengths = Vec::new();
        for s in 0..c.sequences {
            let labels = &w.labels[w.sequence_frames(s)];
            let mut run = 1;
            for t in 1..labels.len() {
                if labels[t] == labels[t - 1] {
                    run += 1;
                } else {
                    lengths.push(run as f64);
                    run = 1;
                }
            }
        }
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!((mean - 8.0).abs() <= 0.2 * 8.0, "mean dwell {mean}");
    }

    #[test]
    fn co_timed_frames_share_labels() {
        let w = generate_world(&small_world(6)).unwrap();
        for i in 0..w.frames() {
            assert_eq!(w.frame_index(w.sequence[i], w.time[i]), i);
        }
    }

    #[test]
    fn pairs_respect_window() {
        let w = generate_world(&small_world(7)).unwrap();
        let seqs: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for modality in [Modality::Aa, Modality::Av] {
            let cfg = SamplerConfig {
                delta_t: 10,
                batch_size: 16,
                modality,
                negatives: NegativeMode::AllPairs,
            };
            for _ in 0..20 {
                let b = sample_pair_batch(&w, &seqs, &cfg, &mut rng).unwrap();
                assert_eq!(b.len(), 16);
                assert_eq!(b.negatives.len(), 16 * 15);
            }
        }
    }

    #[test]
    fn zero_window_av_is_co_timed_and_aa_rejected() {
        let mut c = small_world(8);
        c.noise_std = 0.0;
        c.nuisance_std = 0.0;
        let w = generate_world(&c).unwrap();
        let seqs: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = SamplerConfig {
            delta_t: 0,
            batch_size: 8,
            modality: Modality::Av,
            negatives: NegativeMode::RandomSingle,
        };
        let b = sample_pair_batch(&w, &seqs, &cfg, &mut rng).unwrap();
        assert_eq!(b.first_labels, b.second_labels);
        assert_eq!(b.negatives.len(), 8);
        assert!(b.negatives.iter().all(|(i, j)| i != j));
        cfg.modality = Modality::Aa;
        assert!(sample_pair_batch(&w, &seqs, &cfg, &mut rng).is_err());
    }

    #[test]
    fn split_is_sequence_granular() {
        let w = generate_world(&small_world(9)).unwrap();
        let s = split(&w, [0.6, 0.2, 0.2], 4).unwrap();
        assert_eq!(s, split(&w, [0.6, 0.2, 0.2], 4).unwrap());
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.evaluation)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let tf = s.frames(&w, SplitPart::Train);
        let ef = s.frames(&w, SplitPart::Evaluation);
        assert!(tf.iter().all(|f| !ef.contains(f)));
        assert_eq!(
            tf.len() + ef.len() + s.frames(&w, SplitPart::Validation).len(),
            w.frames()
        );

        assert!(split(&w, [0.5, 0.2, 0.2], 4).is_err());
        assert!(split(&w, [1.2, -0.1, -0.1], 4).is_err());
        assert!(split(&w, [0.99, 0.01, 0.0], 4).is_err());
    }

    #[test]
    fn container_round_trip() {
        let mut c = small_world(10);
        c.background_prior = 0.2;
        let w = generate_world(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.bin");
        write_world(&w, &path).unwrap();
        assert_eq!(read_world(&path).unwrap(), w);
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.config_hash, c.hash());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_world(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn priors_with_background() {
        let mut c = small_world(1);
        c.class_prior_exponent = 1.0;
        c.background_prior = 0.25;
        let p = c.priors();
        assert_eq!(p.len(), 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[3]);
        assert_eq!(p[4], 0.25);
    }
}
