use cocoon::trainer::{run_curriculum, run_stage};
use cocoon::{
    generate_world, split, Checkpoint, CurriculumConfig, EncoderConfig, ModelConfig, ModelParams, Session, Split,
    StageConfig, StageLoss, SynthWorld, TrainingData, WorldConfig,
};

fn world(seed: u64) -> (SynthWorld, Split) {
    let w = generate_world(&WorldConfig {
        classes: 4,
        sequences: 40,
        frames_per_sequence: 60,
        audio_dim: 10,
        image_dim: 8,
        class_dwell_mean: 20.0,
        noise_std: 0.0,
        nuisance_std: 0.0,
        class_prior_exponent: 0.0,
        background_prior: 0.0,
        seed,
    })
    .unwrap();
    let sp = split(&w, [0.7, 0.15, 0.15], seed).unwrap();
    (w, sp)
}

fn model() -> ModelConfig {
    ModelConfig {
        audio: EncoderConfig {
            input_dim: 10,
            hidden: vec![16],
            embed_dim: 8,
        },
        image: EncoderConfig {
            input_dim: 8,
            hidden: vec![16],
            embed_dim: 8,
        },
        coincidence_hidden: 16,
        clusters: 6,
        logit_scale: 60.0,
        classes: 4,
        classifier_hidden: 8,
    }
}

fn stage(loss: StageLoss, steps: usize) -> StageConfig {
    let mut s = StageConfig::new(loss, steps);
    s.batch_size = 8;
    s.delta_t = 3;
    s.eval_every = 10;
    s.patience = 0;
    s
}

fn curriculum() -> CurriculumConfig {
    let mut c = CurriculumConfig::standard([12, 12, 12, 12]);
    for s in &mut c.stages {
        *s = stage(s.loss, 12);
        s.checkpoint_every = 5;
    }
    c
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn coincidence_stage_reduces_training_loss_across_seeds() {
    let mut decreased = 0;
    for seed in 0..10 {
        let (w, sp) = world(seed);
        let data = TrainingData {
            world: &w,
            split: &sp,
            labels: None,
        };
        let p = ModelParams::init(&model(), seed).unwrap();
        let (p, _) = run_stage(&stage(StageLoss::Av, 50), p, data, seed).unwrap();
        let (_, hist) = run_stage(&stage(StageLoss::Coin, 200), p, data, seed).unwrap();
        let losses: Vec<f64> = hist.iter().map(|r| r.train_loss).collect();
        assert_eq!(losses.len(), 200);
        if mean(&losses[180..]) < mean(&losses[..20]) {
            decreased += 1;
        }
    }
    assert!(decreased * 100 >= 95 * 10, "{decreased}/10 seeds decreased");
}

#[test]
fn stages_compose() {
    let (w, sp) = world(1);
    let labels: Vec<(usize, usize)> = (0..w.frames()).step_by(5).map(|i| (i, w.labels[i])).collect();
    let data = TrainingData {
        world: &w,
        split: &sp,
        labels: Some(&labels),
    };
    let cur = curriculum();
    let (full, _) = run_curriculum(&cur, &model(), data, "h", 4, &mut |_| Ok(())).unwrap();

    let mut ends = Vec::new();
    let mut sink = |c: &Checkpoint| {
        if c.progress.finished {
            ends.push(c.clone());
        }
        Ok(())
    };
    let mut s = Session::new(&cur, &model(), data, "h", 4).unwrap();
    s.run_all(&mut sink).unwrap();
    assert_eq!(ends.len(), 4);
    assert_eq!(ends[3].params, full.params);
    // Each stage starts from the previous stage's final parameters.
    for i in 1..4 {
        let mut resumed = Session::resume(&cur, data, &ends[i - 1]).unwrap();
        assert_eq!(resumed.stage_index(), i);
        assert_eq!(resumed.params, ends[i - 1].params);
        resumed.run_through(i, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.params, ends[i].params);
    }
}

#[test]
fn resume_from_files_matches_unbroken_run() {
    let (w, sp) = world(2);
    let data = TrainingData {
        world: &w,
        split: &sp,
        labels: None,
    };
    let mut cur = curriculum();
    cur.stages.truncate(3);
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    let (full, hist) = run_curriculum(&cur, &model(), data, "cfg", 9, &mut |c: &Checkpoint| {
        let p = dir.path().join(format!("{}-{}.ckpt", c.stage_index, c.progress.step));
        c.save(&p)?;
        paths.push(p);
        Ok(())
    })
    .unwrap();
    assert!(paths.len() >= 6);
    for p in &paths {
        let ck = Checkpoint::load(p).unwrap();
        ck.verify_hash("cfg", false).unwrap();
        assert!(ck.verify_hash("other", false).is_err());
        let mut s = Session::resume(&cur, data, &ck).unwrap();
        if s.is_complete() {
            assert_eq!(ck.params, full.params);
            continue;
        }
        s.run_all(&mut |_| Ok(())).unwrap();
        assert_eq!(s.params, full.params, "{}", p.display());
        let tail: Vec<f64> = hist[hist.len() - s.history.len()..]
            .iter()
            .map(|r| r.train_loss)
            .collect();
        let mine: Vec<f64> = s.history.iter().map(|r| r.train_loss).collect();
        assert_eq!(mine, tail);
    }
}

#[test]
fn identical_inputs_give_identical_checkpoint_bytes() {
    let (w, sp) = world(3);
    let data = TrainingData {
        world: &w,
        split: &sp,
        labels: None,
    };
    let mut cur = curriculum();
    cur.stages.truncate(2);
    let a = run_curriculum(&cur, &model(), data, "x", 5, &mut |_| Ok(())).unwrap().0;
    let b = run_curriculum(&cur, &model(), data, "x", 5, &mut |_| Ok(())).unwrap().0;
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = run_curriculum(&cur, &model(), data, "x", 6, &mut |_| Ok(())).unwrap().0;
    assert_ne!(a.params, c.params);
}
