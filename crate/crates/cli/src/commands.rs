use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cocoon::active::{
    annotate_and_propagate, assign_clusters, label_precision_recall, random_label_baseline, read_label_csv,
    select_clusters, ClusterAssignment, ClusterSelection,
};
use cocoon::hashing::bytes_hash;
use cocoon::metrics::{
    classifier_map, clip_level_scores, homogeneity_completeness_v, qbe_map, recovery, segment_clips, EvalReport,
};
use cocoon::models::{class_distribution, embed_audio_batch};
use cocoon::synth::{generate_world, read_manifest, read_world, split, write_world, Split, SplitPart, SynthWorld};
use cocoon::trainer::{write_history_csv, Checkpoint, Session, StageLoss, TrainingData};
use cocoon::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "cocoon",
    version,
    about = "Coincidence learning experiments on synthetic worlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world described by the config.
    GenData(GenDataArgs),
    /// Run curriculum stages and write checkpoints plus a history CSV.
    Train(TrainArgs),
    /// Assign frames to clusters with a trained cluster head.
    Cluster(ClusterArgs),
    /// Simulate budgeted annotation and write label sets.
    AnnotateSim(AnnotateArgs),
    /// Evaluate a checkpoint and write a report.
    Evaluate(EvaluateArgs),
    /// Combine reports from several runs into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overwrite an existing world.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Run only this stage (av, coin, joint or class).
    #[arg(long)]
    pub stage: Option<String>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Label CSV for the class stage.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Suffix for checkpoint and history file names.
    #[arg(long)]
    pub tag: Option<String>,
    /// Accept checkpoints or labels produced under another config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Evaluation,
}

impl SplitArg {
    fn part(self) -> SplitPart {
        match self {
            SplitArg::Train => SplitPart::Train,
            SplitArg::Validation => SplitPart::Validation,
            SplitArg::Evaluation => SplitPart::Evaluation,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Validation => "validation",
            SplitArg::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "evaluation")]
    pub split: SplitArg,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cluster,
    Random,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Cluster => "cluster",
            Strategy::Random => "random",
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Trained checkpoint; required for the cluster strategy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Annotation budgets; defaults to the config list.
    #[arg(long = "budget")]
    pub budgets: Vec<i64>,
    #[arg(long, value_enum, default_value = "cluster")]
    pub strategy: Strategy,
    /// Cluster choice when the budget is below the active count.
    #[arg(long, value_enum)]
    pub selection: Option<SelectionArg>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectionArg {
    LargestFirst,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Qbe,
    Classifier,
    Cluster,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Qbe => "qbe",
            Suite::Classifier => "classifier",
            Suite::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Checkpoint to evaluate; omit together with --raw for the feature baseline.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Score raw audio features instead of embeddings (qbe only).
    #[arg(long)]
    pub raw: bool,
    #[arg(long, value_enum, default_value = "evaluation")]
    pub split: SplitArg,
    /// Baseline value for the recovery metric.
    #[arg(long, requires = "topline")]
    pub baseline: Option<f64>,
    /// Topline value for the recovery metric.
    #[arg(long, requires = "baseline")]
    pub topline: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or report JSON files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Cluster(a) => cluster(&a),
        Command::AnnotateSim(a) => annotate_sim(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => report(&a),
    }
}

// ----- shared plumbing ----------------------------------------------------

pub fn world_path(root: &Path) -> PathBuf {
    root.join("world.bin")
}

fn checkpoint_dir(root: &Path) -> PathBuf {
    root.join("checkpoints")
}

fn suffix(tag: &Option<String>) -> String {
    tag.as_ref().map(|t| format!("-{t}")).unwrap_or_default()
}

/// File name of the checkpoint written at the end of stage `index`.
pub fn stage_checkpoint_name(index: usize, stage: StageLoss, tag: &Option<String>) -> String {
    format!("{index}-{}{}.ckpt", stage.name(), suffix(tag))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::Core(Error::Io(e)))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| CliError::Core(Error::Io(e)))
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).map_err(|e| CliError::Core(Error::Io(e)))
}

fn load_world(cfg: &ExperimentConfig, root: &Path) -> Result<(SynthWorld, Split)> {
    let path = world_path(root);
    let manifest = read_manifest(&path)?;
    if manifest.world != cfg.world {
        return Err(Error::HashMismatch {
            expected: cfg.world.hash(),
            found: manifest.config_hash,
        }
        .into());
    }
    let world = read_world(&path)?;
    let sp = split(&world, cfg.split.fractions, cfg.split.seed)?;
    Ok((world, sp))
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<(Checkpoint, String)> {
    let bytes = read_file(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    ck.verify_hash(&cfg.hash(), force)?;
    if ck.model != cfg.model && !force {
        return Err(Error::Config("checkpoint model differs from the config model".into()).into());
    }
    Ok((ck, bytes_hash(&bytes)))
}

fn frames_without_background(world: &SynthWorld, sp: &Split, part: SplitPart) -> Vec<usize> {
    let bg = world.background_label();
    sp.frames(world, part)
        .into_iter()
        .filter(|&f| Some(world.labels[f]) != bg)
        .collect()
}

// ----- gen-data -----------------------------------------------------------

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root();
    let path = world_path(&root);
    if path.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    create_dir(&root)?;
    let world = generate_world(&cfg.world)?;
    write_world(&world, &path)?;
    println!(
        "wrote {} frames to {} (world hash {})",
        world.frames(),
        path.display(),
        cfg.world.hash()
    );
    Ok(())
}

// ----- train --------------------------------------------------------------

/// Provenance of a label CSV, stored next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMeta {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub strategy: Strategy,
    pub budget: usize,
}

fn label_meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("toml")
}

fn load_labels(path: &Path, cfg: &ExperimentConfig, world: &SynthWorld, force: bool) -> Result<Vec<(usize, usize)>> {
    let meta_path = label_meta_path(path);
    if meta_path.exists() {
        let text = String::from_utf8_lossy(&read_file(&meta_path)?).into_owned();
        let meta: LabelMeta = toml::from_str(&text).map_err(|e| Error::Corrupt {
            what: "label metadata",
            detail: e.to_string(),
        })?;
        if meta.config_hash != cfg.hash() {
            let err = Error::HashMismatch {
                expected: cfg.hash(),
                found: meta.config_hash,
            };
            if !force {
                return Err(err.into());
            }
            log::warn!("{err}; continuing because forced");
        }
    }
    let rows = read_label_csv(fs::File::open(path).map_err(|e| CliError::Core(Error::Io(e)))?)?;
    let mut out = Vec::new();
    for r in rows {
        if r.example_id >= world.frames() {
            return Err(Error::Corrupt {
                what: "label csv",
                detail: format!("example {} outside the world", r.example_id),
            }
            .into());
        }
        if r.label_id < world.config.classes {
            out.push((r.example_id, r.label_id));
        }
    }
    Ok(out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root();
    let (world, sp) = load_world(&cfg, &root)?;
    let labels = match &a.labels {
        Some(p) => Some(load_labels(p, &cfg, &world, a.force)?),
        None => None,
    };
    let data = TrainingData {
        world: &world,
        split: &sp,
        labels: labels.as_deref(),
    };
    let cur = &cfg.curriculum;
    let target = match &a.stage {
        None => None,
        Some(s) if s == "all" => None,
        Some(s) => {
            let loss = StageLoss::parse(s)?;
            Some(
                cur.index_of(loss)
                    .ok_or_else(|| Error::Config(format!("stage {s} is not part of the curriculum")))?,
            )
        }
    };

    let ckdir = checkpoint_dir(&root);
    create_dir(&ckdir)?;

    let mut session = match (&a.resume, target) {
        (Some(path), _) => {
            let (ck, _) = load_checkpoint(path, &cfg, a.force)?;
            Session::resume(cur, data, &ck)?
        }
        (None, Some(t)) if t > 0 => {
            let prev = ckdir.join(stage_checkpoint_name(t - 1, cur.stages[t - 1].loss, &None));
            if !prev.exists() {
                return Err(CliError::Usage(format!(
                    "stage {} needs {} from the previous stage; run it first or pass --resume",
                    cur.stages[t].loss.name(),
                    prev.display()
                )));
            }
            let (ck, _) = load_checkpoint(&prev, &cfg, a.force)?;
            Session::resume(cur, data, &ck)?
        }
        (None, _) => Session::new(cur, &cfg.model, data, &cfg.hash(), cfg.seed)?,
    };
    if session.is_complete() {
        return Err(CliError::Usage("the checkpoint already completed every stage".into()));
    }
    let last = match target {
        Some(t) => {
            if session.stage_index() != t {
                return Err(CliError::Usage(format!(
                    "the checkpoint continues with stage {}, not {}",
                    cur.stages[session.stage_index()].loss.name(),
                    cur.stages[t].loss.name()
                )));
            }
            t
        }
        None => cur.stages.len() - 1,
    };

    let tag = a.tag.clone();
    let mut written = Vec::new();
    let mut sink = |ck: &Checkpoint| -> cocoon::Result<()> {
        let name = if ck.progress.finished {
            stage_checkpoint_name(ck.stage_index, ck.stage, &tag)
        } else {
            format!(
                "{}-{}-step{}{}.ckpt",
                ck.stage_index,
                ck.stage.name(),
                ck.progress.step,
                suffix(&tag)
            )
        };
        let path = ckdir.join(name);
        ck.save(&path)?;
        written.push(path);
        Ok(())
    };
    let outcome = session.run_through(last, &mut sink);

    let history_path = root.join(format!("history{}.csv", suffix(&a.tag)));
    let append = a.resume.is_some() || target.is_some_and(|t| t > 0);
    write_history(&history_path, &session.history, append && history_path.exists())?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    outcome?;
    Ok(())
}

fn write_history(path: &Path, rows: &[cocoon::trainer::HistoryRow], append: bool) -> Result<()> {
    let mut buf = Vec::new();
    write_history_csv(rows, &mut buf)?;
    if append {
        let text = String::from_utf8(buf).expect("utf-8 history");
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut existing = read_file(path)?;
        existing.extend_from_slice(body.as_bytes());
        write_file(path, existing)
    } else {
        write_file(path, buf)
    }
}

// ----- cluster ------------------------------------------------------------

fn embed(ck: &Checkpoint, world: &SynthWorld, frames: &[usize]) -> Result<Tensor> {
    Ok(embed_audio_batch(&ck.params, &world.audio_rows(frames)?)?)
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root();
    let (world, sp) = load_world(&cfg, &root)?;
    let (ck, ck_hash) = load_checkpoint(&a.checkpoint, &cfg, a.force)?;
    let frames = sp.frames(&world, a.split.part());
    let assignment = assign_clusters(&ck.params.cluster, &embed(&ck, &world, &frames)?)?;
    let oracle: Vec<usize> = frames.iter().map(|&f| world.labels[f]).collect();
    let (h, c, v) = homogeneity_completeness_v(&assignment.ids, &oracle)?;

    let mut csv = String::from("example_id,cluster_id\n");
    for (f, k) in frames.iter().zip(&assignment.ids) {
        writeln!(csv, "{f},{k}").expect("string write");
    }
    let path = root.join(format!("clusters-{}-{}.csv", stem(&a.checkpoint), a.split.name()));
    write_file(&path, csv)?;
    println!("checkpoint {ck_hash} split {}", a.split.name());
    println!("K = {}, active = {}", assignment.k, assignment.active());
    println!("homogeneity = {h:.4}, completeness = {c:.4}, v_measure = {v:.4}");
    println!("wrote {}", path.display());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

// ----- annotate-sim -------------------------------------------------------

/// One row of the annotation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub budget: usize,
    pub strategy: Strategy,
    pub precision: f64,
    pub recall: f64,
    pub active: Option<usize>,
    pub n_labeled: usize,
    pub n_examples_labeled: usize,
    pub v_measure: Option<f64>,
    pub classes_covered: usize,
}

const ANNOTATION_HEADER: &str =
    "budget,strategy,precision,recall,active,n_labeled,n_examples_labeled,v_measure,classes_covered";

impl AnnotationRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.budget,
            self.strategy.name(),
            self.precision,
            self.recall,
            self.active.map(|a| a.to_string()).unwrap_or_default(),
            self.n_labeled,
            self.n_examples_labeled,
            self.v_measure.map(|v| v.to_string()).unwrap_or_default(),
            self.classes_covered
        )
    }
}

fn annotate_sim(a: &AnnotateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root();
    let (world, sp) = load_world(&cfg, &root)?;
    let budgets: Vec<usize> = if a.budgets.is_empty() {
        cfg.annotation.budgets.clone()
    } else {
        a.budgets
            .iter()
            .map(|&b| {
                usize::try_from(b)
                    .ok()
                    .filter(|&b| b > 0)
                    .ok_or_else(|| CliError::Core(Error::Config(format!("budget must be >= 1, got {b}"))))
            })
            .collect::<Result<_>>()?
    };
    let selection = match a.selection {
        Some(SelectionArg::LargestFirst) => ClusterSelection::LargestFirst,
        Some(SelectionArg::UniformRandom) => ClusterSelection::UniformRandom,
        None => cfg.annotation.selection,
    };

    let pool = sp.frames(&world, SplitPart::Train);
    let oracle: Vec<usize> = pool.iter().map(|&f| world.labels[f]).collect();
    let eval_classes = world.eval_classes();

    let (assignment, ck_hash): (Option<ClusterAssignment>, String) = match (a.strategy, &a.checkpoint) {
        (Strategy::Cluster, None) => {
            return Err(CliError::Usage("the cluster strategy needs --checkpoint".into()));
        }
        (Strategy::Cluster, Some(p)) => {
            let (ck, h) = load_checkpoint(p, &cfg, a.force)?;
            if ck.stage < StageLoss::Joint {
                return Err(Error::Config(format!(
                    "checkpoint from stage {} has no trained cluster head",
                    ck.stage.name()
                ))
                .into());
            }
            (
                Some(assign_clusters(&ck.params.cluster, &embed(&ck, &world, &pool)?)?),
                h,
            )
        }
        (Strategy::Random, Some(p)) => (None, load_checkpoint(p, &cfg, a.force)?.1),
        (Strategy::Random, None) => (None, String::new()),
    };
    let vm = match &assignment {
        Some(asg) => Some(homogeneity_completeness_v(&asg.ids, &oracle)?.2),
        None => None,
    };

    let dir = root.join("labels");
    create_dir(&dir)?;
    let mut rows = Vec::new();
    for &budget in &budgets {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.annotation.seed);
        rng.set_stream(budget as u64);
        let set = match &assignment {
            Some(asg) => {
                let chosen = select_clusters(asg, budget, selection, &mut rng)?;
                annotate_and_propagate(asg, &chosen, &oracle, &mut rng)?
            }
            None => random_label_baseline(&oracle, budget, &mut rng)?,
        };
        let quality = label_precision_recall(&set, &oracle, &eval_classes)?;
        let covered = set
            .covered_labels()
            .into_iter()
            .filter(|&c| c < world.config.classes)
            .count();
        let set = set.with_example_ids(pool.clone())?;
        let path = dir.join(format!("{}-b{budget}.csv", a.strategy.name()));
        if path.exists() && !a.force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        set.save_csv(&path)?;
        let meta = LabelMeta {
            config_hash: cfg.hash(),
            checkpoint_hash: ck_hash.clone(),
            strategy: a.strategy,
            budget,
        };
        write_file(
            &label_meta_path(&path),
            toml::to_string_pretty(&meta).expect("metadata serializes"),
        )?;
        rows.push(AnnotationRow {
            budget,
            strategy: a.strategy,
            precision: quality.precision,
            recall: quality.recall,
            active: assignment.as_ref().map(|x| x.active()),
            n_labeled: quality.n_labeled,
            n_examples_labeled: quality.n_examples_labeled,
            v_measure: vm,
            classes_covered: covered,
        });
    }
    let mut table = format!("{ANNOTATION_HEADER}\n");
    for r in &rows {
        table.push_str(&r.csv());
        table.push('\n');
    }
    write_file(&root.join(format!("annotation-{}.csv", a.strategy.name())), &table)?;
    print!("{table}");
    Ok(())
}

// ----- evaluate -----------------------------------------------------------

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = cfg.output_root();
    let (world, sp) = load_world(&cfg, &root)?;
    if a.raw && a.suite != Suite::Qbe {
        return Err(CliError::Usage("--raw applies to the qbe suite only".into()));
    }
    let ck = match (&a.checkpoint, a.raw) {
        (Some(p), false) => Some(load_checkpoint(p, &cfg, a.force)?),
        (None, true) => None,
        (Some(_), true) => return Err(CliError::Usage("--raw ignores checkpoints; drop --checkpoint".into())),
        (None, false) => return Err(CliError::Usage("--checkpoint is required unless --raw".into())),
    };
    let part = a.split.part();
    let mut metrics = BTreeMap::new();
    let headline = match a.suite {
        Suite::Qbe => {
            let frames = frames_without_background(&world, &sp, part);
            let features = match &ck {
                Some((c, _)) => embed(c, &world, &frames)?,
                None => world.audio_rows(&frames)?,
            };
            let labels: Vec<usize> = frames.iter().map(|&f| world.labels[f]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            let mut total = 0.0;
            for _ in 0..cfg.eval.qbe_repeats {
                total += qbe_map(&features, &labels, &world.eval_classes(), &cfg.eval.qbe, &mut rng)?.map;
            }
            let m = total / cfg.eval.qbe_repeats as f64;
            metrics.insert("qbe_map".to_string(), m);
            m
        }
        Suite::Classifier => {
            let (c, _) = ck.as_ref().expect("checked above");
            if c.stage != StageLoss::Class {
                return Err(Error::Config(format!(
                    "checkpoint from stage {} has no trained classifier",
                    c.stage.name()
                ))
                .into());
            }
            let seqs = sp.sequences(part);
            let clips = segment_clips(&world, seqs, cfg.eval.clip_frames);
            let frames: Vec<usize> = clips.iter().flat_map(|cl| cl.frames.iter().copied()).collect();
            let row_of: HashMap<usize, usize> = frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
            let scores = class_distribution(&c.params.classifier, &embed(c, &world, &frames)?)?;
            let grouped: Vec<Vec<usize>> = clips
                .iter()
                .map(|cl| cl.frames.iter().map(|f| row_of[f]).collect())
                .collect();
            let clip_scores = clip_level_scores(&scores, &grouped)?;
            let labels: Vec<usize> = clips.iter().map(|cl| cl.label).collect();
            let r = classifier_map(&clip_scores, &labels, &world.eval_classes())?;
            metrics.insert("classifier_map".to_string(), r.map);
            metrics.insert("classifier_d_prime".to_string(), r.mean_d_prime);
            r.map
        }
        Suite::Cluster => {
            let (c, _) = ck.as_ref().expect("checked above");
            let frames = sp.frames(&world, part);
            let asg = assign_clusters(&c.params.cluster, &embed(c, &world, &frames)?)?;
            let oracle: Vec<usize> = frames.iter().map(|&f| world.labels[f]).collect();
            let (h, comp, v) = homogeneity_completeness_v(&asg.ids, &oracle)?;
            metrics.insert("homogeneity".to_string(), h);
            metrics.insert("completeness".to_string(), comp);
            metrics.insert("v_measure".to_string(), v);
            metrics.insert("active_fraction".to_string(), asg.active() as f64 / asg.k as f64);
            v
        }
    };
    if let (Some(b), Some(t)) = (a.baseline, a.topline) {
        metrics.insert("recovery".to_string(), recovery(headline, b, t)?);
    }

    let (ck_name, ck_hash) = match &ck {
        Some(_) => (
            stem(a.checkpoint.as_ref().expect("present")),
            ck.as_ref().map(|c| c.1.clone()).expect("present"),
        ),
        None => ("raw".to_string(), "raw-features".to_string()),
    };
    let report = EvalReport {
        suite: a.suite.name().to_string(),
        split: a.split.name().to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        checkpoint_hash: ck_hash,
        timestamp: std::env::var("SOURCE_DATE_EPOCH").ok(),
        metrics,
    };
    let dir = root.join("reports");
    create_dir(&dir)?;
    let base = dir.join(format!("{}-{}-{}", a.suite.name(), ck_name, a.split.name()));
    let json = report.to_json();
    write_file(&base.with_extension("json"), &json)?;
    let (h, r) = report.csv_lines();
    write_file(&base.with_extension("csv"), format!("{h}\n{r}\n"))?;
    print!("{json}");
    Ok(())
}

// ----- report -------------------------------------------------------------

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let dir = p.join("reports");
            let dir = if dir.is_dir() { dir } else { p.clone() };
            let mut found: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| CliError::Core(Error::Io(e)))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CliError::Usage(format!("no reports under {}", dir.display())));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let text = String::from_utf8(read_file(f)?).map_err(|_| Error::Corrupt {
                what: "report",
                detail: format!("{} is not utf-8", f.display()),
            })?;
            Ok(EvalReport::from_json(&text)?)
        })
        .collect()
}

/// Sorted comparison table of reports sharing one suite.
pub fn comparison_table(mut reports: Vec<EvalReport>, format: Format) -> Result<String> {
    let suites: BTreeSet<&str> = reports.iter().map(|r| r.suite.as_str()).collect();
    if suites.len() > 1 {
        return Err(CliError::Usage(format!("reports mix suites {suites:?}")));
    }
    reports.sort_by(|a, b| {
        (&a.config_hash, a.seed, &a.split, &a.checkpoint_hash).cmp(&(
            &b.config_hash,
            b.seed,
            &b.split,
            &b.checkpoint_hash,
        ))
    });
    let names: BTreeSet<&String> = reports.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut header = vec!["config_hash", "seed", "split", "checkpoint_hash"];
    header.extend(names.iter().map(|s| s.as_str()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.config_hash.clone(),
                r.seed.to_string(),
                r.split.clone(),
                r.checkpoint_hash.clone(),
            ];
            row.extend(
                names
                    .iter()
                    .map(|n| r.metrics.get(*n).map(|v| format!("{v:.4}")).unwrap_or_default()),
            );
            row
        })
        .collect();
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        Format::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).expect("string write");
            writeln!(out, "|{}", "---|".repeat(header.len())).expect("string write");
            for r in rows {
                writeln!(out, "| {} |", r.join(" | ")).expect("string write");
            }
        }
    }
    Ok(out)
}

fn report(a: &ReportArgs) -> Result<()> {
    let reports = collect_reports(&a.runs)?;
    let table = comparison_table(reports, a.format)?;
    match &a.output {
        Some(p) => write_file(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
