use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cocoon::EvalReport;
use cocoon_cli::ExperimentConfig;

fn tiny(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::standard(seed);
    cfg.world.sequences = 24;
    cfg.world.frames_per_sequence = 40;
    cfg.world.audio_dim = 12;
    cfg.world.image_dim = 10;
    cfg.world.classes = 4;
    cfg.world.class_dwell_mean = 8.0;
    cfg.world.noise_std = 0.5;
    cfg.model.audio.input_dim = 12;
    cfg.model.image.input_dim = 10;
    cfg.model.audio.hidden = vec![8];
    cfg.model.image.hidden = vec![8];
    cfg.model.audio.embed_dim = 4;
    cfg.model.image.embed_dim = 4;
    cfg.model.coincidence_hidden = 8;
    cfg.model.clusters = 6;
    cfg.model.classes = 4;
    cfg.model.classifier_hidden = 6;
    for s in &mut cfg.curriculum.stages {
        s.steps_max = 6;
        s.batch_size = 6;
        s.eval_every = 3;
        s.val_batches = 1;
        s.delta_t = 3;
    }
    cfg.eval.qbe.positives = 5;
    cfg.eval.qbe.negatives = 5;
    cfg.eval.qbe_repeats = 2;
    cfg.annotation.budgets = vec![4];
    cfg
}

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(cfg: &ExperimentConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("experiment.toml");
        fs::write(&config, cfg.to_toml()).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cocoon(&self, args: &[&str]) -> Output {
        let mut full: Vec<&str> = vec![args[0], "-c", self.config.to_str().unwrap()];
        full.extend(&args[1..]);
        self.raw(&full)
    }

    fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cocoon"))
            .args(args)
            .env("COCOON_OUT", self.out())
            .env_remove("SOURCE_DATE_EPOCH")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cocoon(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> String {
        self.out().join(rel).to_str().unwrap().to_string()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_data_honours_output_override_and_force() {
    let r = Run::new(&tiny(1));
    r.ok(&["gen-data"]);
    let world = r.out().join("world.bin");
    assert!(world.exists() && r.out().join("world.toml").exists());
    let first = read(&world);
    assert_eq!(code(&r.cocoon(&["gen-data"])), 2);
    r.ok(&["gen-data", "--force"]);
    assert_eq!(read(&world), first);
}

#[test]
fn validation_errors_exit_with_two() {
    let r = Run::new(&tiny(1));
    let text = fs::read_to_string(&r.config)
        .unwrap()
        .replacen("[world]", "[world]\ncolour = 1", 1);
    fs::write(&r.config, text).unwrap();
    let o = r.cocoon(&["gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let mut cfg = tiny(1);
    cfg.model.audio.input_dim = 99;
    let r = Run::new(&cfg);
    assert_eq!(code(&r.cocoon(&["gen-data"])), 2);

    let r = Run::new(&tiny(1));
    r.ok(&["gen-data"]);
    assert_eq!(
        code(&r.cocoon(&["annotate-sim", "--strategy", "random", "--budget", "0"])),
        2
    );
    assert_eq!(code(&r.cocoon(&["annotate-sim", "--strategy", "cluster"])), 2);
    assert_eq!(code(&r.cocoon(&["train", "--stage", "coin"])), 2);
    assert_eq!(code(&r.cocoon(&["evaluate", "--suite", "cluster", "--raw"])), 2);
}

#[test]
fn io_errors_exit_with_four() {
    let r = Run::new(&tiny(1));
    let missing = r.dir.path().join("missing.toml");
    assert_eq!(code(&r.raw(&["gen-data", "-c", missing.to_str().unwrap()])), 4);
    r.ok(&["gen-data"]);
    let bogus = r.dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"COCNCKPT but not really").unwrap();
    assert_eq!(
        code(&r.cocoon(&["evaluate", "--suite", "qbe", "--checkpoint", bogus.to_str().unwrap()])),
        4
    );
}

#[test]
fn divergence_exits_with_three() {
    let mut cfg = tiny(1);
    cfg.curriculum.stages[0].learning_rate = 1e300;
    let r = Run::new(&cfg);
    r.ok(&["gen-data"]);
    let o = r.cocoon(&["train", "--stage", "av"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_writes_expected_artifacts() {
    let r = Run::new(&tiny(2));
    r.ok(&["gen-data"]);
    r.ok(&["train", "--stage", "av"]);
    r.ok(&["train", "--stage", "coin"]);
    r.ok(&["train", "--stage", "joint"]);
    let history = fs::read_to_string(r.out().join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("stage,step,train_loss,val_loss,wall_ms"));
    assert_eq!(lines.count(), 18);

    let joint = r.path("checkpoints/2-joint.ckpt");
    let table = r.ok(&["annotate-sim", "--checkpoint", &joint]);
    assert!(table.starts_with("budget,strategy,precision,recall,active"));
    let labels = fs::read_to_string(r.out().join("labels/cluster-b4.csv")).unwrap();
    assert!(labels.starts_with("example_id,label_id,provenance,source_cluster"));
    assert_eq!(labels.lines().filter(|l| l.contains(",annotated,")).count(), 4);
    assert_eq!(code(&r.cocoon(&["annotate-sim", "--checkpoint", &joint])), 2);
    r.ok(&["annotate-sim", "--checkpoint", &joint, "--force"]);

    let lab = r.path("labels/cluster-b4.csv");
    r.ok(&["train", "--stage", "class", "--labels", &lab, "--tag", "cl"]);
    let class = r.path("checkpoints/3-class-cl.ckpt");
    let json = r.ok(&["evaluate", "--checkpoint", &class, "--suite", "classifier"]);
    let report = EvalReport::from_json(&json).unwrap();
    assert!(report.metrics.contains_key("classifier_map"));
    assert!(report.metrics.contains_key("classifier_d_prime"));
    assert!(report.timestamp.is_none());

    let json = r.ok(&["evaluate", "--checkpoint", &joint, "--suite", "cluster"]);
    let report = EvalReport::from_json(&json).unwrap();
    assert!((0.0..=1.0).contains(&report.metrics["v_measure"]));

    r.ok(&["cluster", "--checkpoint", &joint]);
    assert!(r.out().join("clusters-2-joint-evaluation.csv").exists());

    // A classifier report needs a class-stage checkpoint.
    assert_eq!(
        code(&r.cocoon(&["evaluate", "--checkpoint", &joint, "--suite", "classifier"])),
        2
    );
}

#[test]
fn foreign_checkpoints_are_refused_unless_forced() {
    let a = Run::new(&tiny(3));
    a.ok(&["gen-data"]);
    a.ok(&["train", "--stage", "av"]);
    let ck = a.path("checkpoints/0-av.ckpt");

    let mut other = tiny(3);
    other.curriculum.stages[0].learning_rate = 5e-3;
    let b = Run::new(&other);
    b.ok(&["gen-data"]);
    let o = b.cocoon(&["evaluate", "--checkpoint", &ck, "--suite", "qbe"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
    b.ok(&["evaluate", "--checkpoint", &ck, "--suite", "qbe", "--force"]);
}

#[test]
fn resumed_stage_matches_unbroken_stage() {
    let mut cfg = tiny(4);
    cfg.curriculum.stages[0].checkpoint_every = 2;
    let r = Run::new(&cfg);
    r.ok(&["gen-data"]);
    r.ok(&["train", "--stage", "av"]);
    let whole = read(&r.out().join("checkpoints/0-av.ckpt"));
    let mid = r.path("checkpoints/0-av-step4.ckpt");
    r.ok(&["train", "--resume", &mid, "--stage", "av", "--tag", "again"]);
    assert_eq!(read(&r.out().join("checkpoints/0-av-again.ckpt")), whole);
}

#[test]
fn report_sorts_runs_and_rejects_mixed_suites() {
    let runs: Vec<Run> = [6, 5].iter().map(|&s| Run::new(&tiny(s))).collect();
    for r in &runs {
        r.ok(&["gen-data"]);
        r.ok(&["evaluate", "--suite", "qbe", "--raw"]);
    }
    let a = runs[0].out();
    let b = runs[1].out();
    let args = |x: &Path, y: &Path| {
        vec![
            "report".to_string(),
            x.display().to_string(),
            y.display().to_string(),
            "--format".into(),
            "csv".into(),
        ]
    };
    let one: Vec<String> = args(&a, &b);
    let two: Vec<String> = args(&b, &a);
    let t1 = runs[0].raw(&one.iter().map(String::as_str).collect::<Vec<_>>());
    let t2 = runs[0].raw(&two.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(t1.status.success());
    assert_eq!(t1.stdout, t2.stdout);
    let text = String::from_utf8(t1.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("config_hash,seed,split,checkpoint_hash,qbe_map"));

    runs[0].ok(&["gen-data", "--force"]);
    runs[0].ok(&["train", "--stage", "av"]);
    runs[0].ok(&["train", "--stage", "coin"]);
    runs[0].ok(&["train", "--stage", "joint"]);
    let joint = runs[0].path("checkpoints/2-joint.ckpt");
    runs[0].ok(&["evaluate", "--checkpoint", &joint, "--suite", "cluster"]);
    let o = runs[0].raw(&["report", a.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_standard_config_matches_builder() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/standard.toml");
    let mut shipped = ExperimentConfig::load(&path).unwrap();
    assert_eq!(shipped.output_dir, PathBuf::from("out/standard"));
    shipped.output_dir = ExperimentConfig::standard(1).output_dir;
    assert_eq!(shipped, ExperimentConfig::standard(1));
}
