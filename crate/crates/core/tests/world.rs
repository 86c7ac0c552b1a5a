use std::collections::{BTreeSet, HashMap};

use cocoon::synth::{read_world, sample_pair_batch, write_world, SamplerConfig};
use cocoon::{generate_world, split, Modality, NegativeMode, SplitPart, SynthWorld, WorldConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> WorldConfig {
    WorldConfig {
        classes: 6,
        sequences: 100,
        frames_per_sequence: 120,
        audio_dim: 6,
        image_dim: 5,
        class_dwell_mean: 40.0,
        noise_std: 0.3,
        nuisance_std: 0.2,
        class_prior_exponent: 0.0,
        background_prior: 0.0,
        seed,
    }
}

/// Frame index of every audio row, keyed by its bit pattern.
fn audio_index(w: &SynthWorld) -> HashMap<Vec<u64>, usize> {
    (0..w.frames())
        .map(|i| (w.audio.row(i).iter().map(|v| v.to_bits()).collect(), i))
        .collect()
}

fn image_index(w: &SynthWorld) -> HashMap<Vec<u64>, usize> {
    (0..w.frames())
        .map(|i| (w.image.row(i).iter().map(|v| v.to_bits()).collect(), i))
        .collect()
}

fn dwell_lengths(w: &SynthWorld) -> Vec<usize> {
    let mut runs = Vec::new();
    for s in 0..w.config.sequences {
        let labels: Vec<usize> = w.sequence_frames(s).map(|f| w.labels[f]).collect();
        let mut len = 1;
        for t in 1..labels.len() {
            if labels[t] == labels[t - 1] {
                len += 1;
            } else {
                runs.push(len);
                len = 1;
            }
        }
        // Runs cut by the sequence end are censored; keep only completed ones.
    }
    runs
}

#[test]
fn dwell_mean_within_tolerance() {
    let w = generate_world(&WorldConfig {
        sequences: 200,
        frames_per_sequence: 100,
        class_dwell_mean: 10.0,
        ..config(8)
    })
    .unwrap();
    assert!(w.frames() >= 10_000);
    let runs = dwell_lengths(&w);
    let mean = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
    assert!((mean - 10.0).abs() <= 2.0, "mean dwell {mean}");
}

#[test]
fn positive_pairs_mostly_share_labels() {
    let w = generate_world(&config(2)).unwrap();
    let seqs: Vec<usize> = (0..w.config.sequences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for modality in [Modality::Aa, Modality::Av] {
        let cfg = SamplerConfig {
            delta_t: 3,
            batch_size: 32,
            modality,
            negatives: NegativeMode::AllPairs,
        };
        let mut same = 0;
        let mut total = 0;
        for _ in 0..100 {
            let b = sample_pair_batch(&w, &seqs, &cfg, &mut rng).unwrap();
            same += b
                .first_labels
                .iter()
                .zip(&b.second_labels)
                .filter(|(a, b)| a == b)
                .count();
            total += b.len();
        }
        let frac = same as f64 / total as f64;
        assert!(frac >= 0.9, "{modality:?}: {frac}");
    }
}

#[test]
fn container_rejects_truncation_and_bit_flips() {
    let w = generate_world(&WorldConfig {
        sequences: 4,
        frames_per_sequence: 10,
        ..config(1)
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    write_world(&w, &path).unwrap();
    assert_eq!(read_world(&path).unwrap(), w);
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_world(&path).is_err());
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    std::fs::write(&path, &flipped).unwrap();
    assert!(read_world(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairs_stay_within_window(delta in 1usize..15, seed in 0u64..1000, aa in any::<bool>()) {
        let w = generate_world(&WorldConfig { sequences: 12, frames_per_sequence: 30, ..config(seed) }).unwrap();
        let audio = audio_index(&w);
        let image = image_index(&w);
        let modality = if aa { Modality::Aa } else { Modality::Av };
        let cfg = SamplerConfig { delta_t: delta, batch_size: 8, modality, negatives: NegativeMode::RandomSingle };
        let seqs: Vec<usize> = (0..12).collect();
        let b = sample_pair_batch(&w, &seqs, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen_seqs = BTreeSet::new();
        for i in 0..b.len() {
            let key = |t: &cocoon::Tensor| t.row(i).iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
            let f1 = audio[&key(&b.first)];
            let f2 = if aa { audio[&key(&b.second)] } else { image[&key(&b.second)] };
            prop_assert_eq!(w.sequence[f1], w.sequence[f2]);
            prop_assert!(w.time[f1].abs_diff(w.time[f2]) <= delta);
            if aa {
                prop_assert_ne!(f1, f2);
            }
            seen_seqs.insert(w.sequence[f1]);
        }
        prop_assert_eq!(seen_seqs.len(), b.len());
        prop_assert!(b.negatives.iter().all(|(i, j)| i != j));
    }

    #[test]
    fn splits_partition_sequences(seed in 0u64..1000, a in 0.1f64..0.8, bfrac in 0.05f64..0.15) {
        let w = generate_world(&WorldConfig { sequences: 40, frames_per_sequence: 5, ..config(1) }).unwrap();
        let fr = [a, bfrac, 1.0 - a - bfrac];
        let sp = split(&w, fr, seed).unwrap();
        prop_assert_eq!(&sp, &split(&w, fr, seed).unwrap());
        let parts = [SplitPart::Train, SplitPart::Validation, SplitPart::Evaluation];
        let mut all = BTreeSet::new();
        let mut total = 0;
        for p in parts {
            let frames = sp.frames(&w, p);
            total += frames.len();
            all.extend(frames.iter().copied());
            let seqs: BTreeSet<usize> = frames.iter().map(|&f| w.sequence[f]).collect();
            prop_assert_eq!(seqs.len(), sp.sequences(p).len());
        }
        prop_assert_eq!(total, w.frames());
        prop_assert_eq!(all.len(), w.frames());
    }

    #[test]
    fn generation_is_a_function_of_config(seed in 0u64..1000) {
        let cfg = WorldConfig { sequences: 5, frames_per_sequence: 8, ..config(seed) };
        let a = generate_world(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_world(&cfg).unwrap());
        for f in 0..a.frames() {
            let s = w_seq(&a, f);
            prop_assert_eq!(a.frame_index(s, a.time[f]), f);
        }
    }
}

fn w_seq(w: &SynthWorld, f: usize) -> usize {
    w.sequence[f]
}
