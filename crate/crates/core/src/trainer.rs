//! Staged curriculum training with checkpointing and exact resume.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    self, CurriculumWeights, LabeledBatch, Modality, NegativeMode, PairBatch, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_GAMMA,
};
use crate::models::{ModelConfig, ModelParams, ModelVars, ParamGroup};
use crate::optim::Adam;
use crate::synth::{sample_frames, sample_pair_batch, SamplerConfig, Split, SplitPart, SynthWorld};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COCNCKPT";
pub const CHECKPOINT_VERSION: u64 = 1;

/// Stream used for batch sampling, distinct from the initialization stream.
const DATA_STREAM: u64 = 1;
/// Stream used for fixed validation batches.
const VALIDATION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageLoss {
    Av,
    Coin,
    Joint,
    Class,
}

impl StageLoss {
    pub fn name(self) -> &'static str {
        match self {
            StageLoss::Av => "av",
            StageLoss::Coin => "coin",
            StageLoss::Joint => "joint",
            StageLoss::Class => "class",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "av" => Ok(StageLoss::Av),
            "coin" => Ok(StageLoss::Coin),
            "joint" => Ok(StageLoss::Joint),
            "class" => Ok(StageLoss::Class),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }

    /// Parameter groups receiving gradients in this stage.
    pub fn trainable(self, train_image_encoder_in_joint: bool) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            StageLoss::Av => vec![AudioEncoder, ImageEncoder, AvHead],
            StageLoss::Coin => vec![AudioEncoder, ImageEncoder, AaHead, AvHead],
            StageLoss::Joint => {
                let mut g = vec![AudioEncoder, AaHead, AvHead, ClusterHead];
                if train_image_encoder_in_joint {
                    g.push(ImageEncoder);
                }
                g.sort();
                g
            }
            StageLoss::Class => vec![AudioEncoder, ClassifierHead],
        }
    }
}

fn default_patience() -> usize {
    5
}
fn default_eval_every() -> usize {
    25
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_delta_t() -> usize {
    10
}
fn default_val_batches() -> usize {
    4
}
fn default_true() -> bool {
    true
}

/// One curriculum stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub loss: StageLoss,
    pub steps_max: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Steps between held-out evaluations; 0 disables them.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta_t")]
    pub delta_t: usize,
    #[serde(default)]
    pub negatives: NegativeMode,
    /// Fixed held-out batches averaged per evaluation.
    #[serde(default = "default_val_batches")]
    pub val_batches: usize,
    /// Mid-stage checkpoint period in steps; 0 means stage ends only.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl StageConfig {
    pub fn new(loss: StageLoss, steps_max: usize) -> Self {
        StageConfig {
            loss,
            steps_max,
            patience: if loss == StageLoss::Class {
                0
            } else {
                default_patience()
            },
            eval_every: default_eval_every(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            delta_t: default_delta_t(),
            negatives: NegativeMode::AllPairs,
            val_batches: default_val_batches(),
            checkpoint_every: 0,
        }
    }

    pub fn weights(&self) -> CurriculumWeights {
        CurriculumWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    fn sampler(&self, modality: Modality) -> SamplerConfig {
        SamplerConfig {
            delta_t: self.delta_t,
            batch_size: self.batch_size,
            modality,
            negatives: self.negatives,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("{}: batch_size must be >= 2", self.loss.name())));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "{}: learning_rate must be positive",
                self.loss.name()
            )));
        }
        if self.patience > 0 && self.eval_every == 0 {
            return Err(Error::Config(format!(
                "{}: patience requires eval_every > 0",
                self.loss.name()
            )));
        }
        if self.patience > 0 && self.val_batches == 0 {
            return Err(Error::Config(format!(
                "{}: patience requires val_batches > 0",
                self.loss.name()
            )));
        }
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if matches!(self.loss, StageLoss::Coin | StageLoss::Joint) && self.delta_t == 0 {
            return Err(Error::Config(format!(
                "{}: audio-audio pairs need delta_t >= 1",
                self.loss.name()
            )));
        }
        Ok(())
    }
}

/// Ordered list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_true")]
    pub train_image_encoder_in_joint: bool,
}

impl CurriculumConfig {
    /// AV, COIN, JOINT and CLASS with the given step budgets.
    pub fn standard(steps: [usize; 4]) -> Self {
        CurriculumConfig {
            stages: [StageLoss::Av, StageLoss::Coin, StageLoss::Joint, StageLoss::Class]
                .into_iter()
                .zip(steps)
                .map(|(l, s)| StageConfig::new(l, s))
                .collect(),
            train_image_encoder_in_joint: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].loss <= w[0].loss {
                return Err(Error::Config(format!(
                    "stage order must follow av -> coin -> joint -> class, got {} before {}",
                    w[0].loss.name(),
                    w[1].loss.name()
                )));
            }
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn index_of(&self, loss: StageLoss) -> Option<usize> {
        self.stages.iter().position(|s| s.loss == loss)
    }
}

/// Everything a stage samples from.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub world: &'a SynthWorld,
    pub split: &'a Split,
    /// `(frame, class)` pairs for the classifier stage.
    pub labels: Option<&'a [(usize, usize)]>,
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub stage: StageLoss,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

pub fn write_history_csv(rows: &[HistoryRow], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "stage,step,train_loss,val_loss,wall_ms")?;
    for r in rows {
        let val = r.val_loss.map(|v| format!("{v:.17e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.17e},{},{}",
            r.stage.name(),
            r.step,
            r.train_loss,
            val,
            r.wall_ms
        )?;
    }
    Ok(())
}

/// Optimizer and early-stopping state inside a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageProgress {
    pub step: usize,
    pub optimizer: Adam,
    pub best_val: f64,
    pub bad_evals: usize,
    pub finished: bool,
}

impl StageProgress {
    pub fn fresh(stage: &StageConfig) -> Self {
        StageProgress {
            step: 0,
            optimizer: Adam::new(stage.learning_rate),
            best_val: f64::INFINITY,
            bad_evals: 0,
            finished: false,
        }
    }
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Batch-sampling generator for a run seed.
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    rng
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub stage_index: usize,
    pub stage: StageLoss,
    pub progress: StageProgress,
    pub rng: RngState,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Refuses a checkpoint produced under a different configuration unless `force`.
    pub fn verify_hash(&self, expected: &str, force: bool) -> Result<()> {
        if self.config_hash != expected {
            if force {
                log::warn!(
                    "checkpoint hash {} differs from {expected}; continuing because forced",
                    self.config_hash
                );
            } else {
                return Err(Error::HashMismatch {
                    expected: expected.to_string(),
                    found: self.config_hash.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u64(CHECKPOINT_VERSION);
        w.str(&self.config_hash);
        w.str(&serde_json::to_string(&self.model).expect("model config serializes"));
        w.u64(self.seed);
        w.u64(self.stage_index as u64);
        w.str(self.stage.name());
        w.u64(self.progress.step as u64);
        w.u64(self.progress.finished as u64);
        w.f64(self.progress.best_val);
        w.u64(self.progress.bad_evals as u64);

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let opt = &self.progress.optimizer;
        for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.eps] {
            w.f64(v);
        }
        w.u64(opt.t);
        w.u64(opt.moments.len() as u64);
        for (name, (m, v)) in &opt.moments {
            w.str(name);
            w.tensor(m);
            w.tensor(v);
        }

        let named = self.params.named_tensors();
        w.u64(named.len() as u64);
        for (name, _, t) in named {
            w.str(&name);
            w.tensor(t);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u64()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let config_hash = r.str()?;
        let model: ModelConfig = serde_json::from_str(&r.str()?).map_err(|e| corrupt(&format!("model config: {e}")))?;
        model.validate()?;
        let seed = r.u64()?;
        let stage_index = r.u64()? as usize;
        let stage = StageLoss::parse(&r.str()?).map_err(|e| corrupt(&e.to_string()))?;
        let step = r.u64()? as usize;
        let finished = r.u64()? != 0;
        let best_val = r.f64()?;
        let bad_evals = r.u64()? as usize;

        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

        let mut optimizer = Adam::new(r.f64()?);
        optimizer.beta1 = r.f64()?;
        optimizer.beta2 = r.f64()?;
        optimizer.eps = r.f64()?;
        optimizer.t = r.u64()?;
        let n_moments = r.u64()?;
        for _ in 0..n_moments {
            let name = r.str()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            optimizer.moments.insert(name, (m, v));
        }

        let mut params = ModelParams::init(&model, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u64()? as usize;
        if count != expected.len() {
            return Err(corrupt(&format!("expected {} tensors, found {count}", expected.len())));
        }
        for (slot, (name, shape)) in expected.iter().enumerate() {
            let found = r.str()?;
            if &found != name {
                return Err(corrupt(&format!("expected tensor '{name}', found '{found}'")));
            }
            let t = r.tensor()?;
            if t.shape() != shape.as_slice() {
                return Err(corrupt(&format!(
                    "tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *params.tensor_mut(slot) = t;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            model,
            seed,
            stage_index,
            stage,
            progress: StageProgress {
                step,
                optimizer,
                best_val,
                bad_evals,
                finished,
            },
            rng: RngState {
                seed: rng_seed,
                stream,
                word_pos,
            },
            params,
        })
    }
}

fn corrupt(detail: &str) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        detail: detail.to_string(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt("unexpected end of file")),
        }
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(corrupt("tensor rank too large"));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("tensor too large"))?;
        if len.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("tensor data truncated"));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
    }
}

// ----- batches and stage losses -------------------------------------------

enum StageBatch {
    Av(PairBatch),
    Coin {
        aa: PairBatch,
        av: PairBatch,
    },
    Joint {
        aa: PairBatch,
        av: PairBatch,
        audio: Tensor,
    },
    Class(LabeledBatch),
}

fn sample_stage_batch(
    stage: &StageConfig,
    data: &TrainingData,
    part: SplitPart,
    rng: &mut ChaCha8Rng,
) -> Result<StageBatch> {
    let seqs = data.split.sequences(part);
    let world = data.world;
    Ok(match stage.loss {
        StageLoss::Av => StageBatch::Av(sample_pair_batch(world, seqs, &stage.sampler(Modality::Av), rng)?),
        StageLoss::Coin => {
            let av = sample_pair_batch(world, seqs, &stage.sampler(Modality::Av), rng)?;
            let aa = sample_pair_batch(world, seqs, &stage.sampler(Modality::Aa), rng)?;
            StageBatch::Coin { aa, av }
        }
        StageLoss::Joint => {
            let av = sample_pair_batch(world, seqs, &stage.sampler(Modality::Av), rng)?;
            let aa = sample_pair_batch(world, seqs, &stage.sampler(Modality::Aa), rng)?;
            let frames = sample_frames(world, seqs, stage.batch_size, rng)?;
            StageBatch::Joint {
                aa,
                av,
                audio: world.audio_rows(&frames)?,
            }
        }
        StageLoss::Class => {
            let labels = data
                .labels
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Contract("the class stage requires a non-empty propagated label set".into()))?;
            let picks: Vec<(usize, usize)> = (0..stage.batch_size)
                .map(|_| labels[rng.gen_range(0..labels.len())])
                .collect();
            let frames: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let classes: Vec<usize> = picks.iter().map(|p| p.1).collect();
            StageBatch::Class(LabeledBatch::from_indices(
                world.audio_rows(&frames)?,
                &classes,
                world.config.classes,
            )?)
        }
    })
}

fn stage_loss(g: &mut Graph, vars: &ModelVars, stage: &StageConfig, batch: &StageBatch) -> Result<Var> {
    match batch {
        StageBatch::Av(av) => losses::loss_av(g, vars, av),
        StageBatch::Coin { aa, av } => losses::loss_coin(g, vars, aa, av, stage.alpha),
        StageBatch::Joint { aa, av, audio } => losses::loss_joint(g, vars, aa, av, audio, &stage.weights()),
        StageBatch::Class(b) => losses::loss_class(g, vars, b),
    }
}

fn batch_loss(params: &ModelParams, stage: &StageConfig, batch: &StageBatch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &[]);
    let y = stage_loss(&mut g, &vars, stage, batch)?;
    Ok(g.item(y))
}

fn validation_batches(
    stage: &StageConfig,
    data: &TrainingData,
    seed: u64,
    stage_index: usize,
) -> Result<Vec<StageBatch>> {
    if stage.val_batches == 0 || stage.eval_every == 0 {
        return Ok(Vec::new());
    }
    let part = if stage.loss == StageLoss::Class || data.split.validation.is_empty() {
        SplitPart::Train
    } else {
        SplitPart::Validation
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(VALIDATION_STREAM);
    (0..stage.val_batches)
        .map(|_| sample_stage_batch(stage, data, part, &mut rng))
        .collect()
}

// ----- training session ---------------------------------------------------

/// A resumable pass through the curriculum.
pub struct Session<'a> {
    curriculum: &'a CurriculumConfig,
    data: TrainingData<'a>,
    config_hash: String,
    model: ModelConfig,
    seed: u64,
    stage_index: usize,
    progress: StageProgress,
    rng: ChaCha8Rng,
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
}

impl<'a> Session<'a> {
    pub fn new(
        curriculum: &'a CurriculumConfig,
        model: &ModelConfig,
        data: TrainingData<'a>,
        config_hash: &str,
        seed: u64,
    ) -> Result<Self> {
        curriculum.validate()?;
        let params = ModelParams::init(model, seed)?;
        Ok(Session {
            curriculum,
            data,
            config_hash: config_hash.to_string(),
            model: model.clone(),
            seed,
            stage_index: 0,
            progress: StageProgress::fresh(&curriculum.stages[0]),
            rng: data_rng(seed),
            params,
            history: Vec::new(),
        })
    }

    /// Continues from `ckpt`; a finished stage advances to the next one.
    pub fn resume(curriculum: &'a CurriculumConfig, data: TrainingData<'a>, ckpt: &Checkpoint) -> Result<Self> {
        curriculum.validate()?;
        let stage = curriculum.stages.get(ckpt.stage_index).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint stage index {} outside curriculum",
                ckpt.stage_index
            ))
        })?;
        if stage.loss != ckpt.stage {
            return Err(Error::Config(format!(
                "checkpoint stage {} does not match curriculum stage {}",
                ckpt.stage.name(),
                stage.loss.name()
            )));
        }
        let mut s = Session {
            curriculum,
            data,
            config_hash: ckpt.config_hash.clone(),
            model: ckpt.model.clone(),
            seed: ckpt.seed,
            stage_index: ckpt.stage_index,
            progress: ckpt.progress.clone(),
            rng: ckpt.rng.restore(),
            params: ckpt.params.clone(),
            history: Vec::new(),
        };
        if s.progress.finished {
            s.advance();
        }
        Ok(s)
    }

    /// Replaces the parameters, e.g. to start from another run's weights.
    pub fn with_params(mut self, params: ModelParams) -> Self {
        self.params = params;
        self
    }

    /// Moves to a later stage without running the ones in between.
    pub fn skip_to(&mut self, stage_index: usize) {
        if stage_index > self.stage_index && stage_index <= self.curriculum.stages.len() {
            self.stage_index = stage_index;
            if let Some(st) = self.curriculum.stages.get(stage_index) {
                self.progress = StageProgress::fresh(st);
            }
        }
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn is_complete(&self) -> bool {
        self.stage_index >= self.curriculum.stages.len()
    }

    fn advance(&mut self) {
        self.stage_index += 1;
        if let Some(st) = self.curriculum.stages.get(self.stage_index) {
            self.progress = StageProgress::fresh(st);
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let idx = self.stage_index.min(self.curriculum.stages.len() - 1);
        let progress = if self.stage_index >= self.curriculum.stages.len() {
            // Past the end: report the last stage as finished.
            StageProgress {
                finished: true,
                ..StageProgress::fresh(&self.curriculum.stages[idx])
            }
        } else {
            self.progress.clone()
        };
        Checkpoint {
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
            seed: self.seed,
            stage_index: idx,
            stage: self.curriculum.stages[idx].loss,
            progress,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
        }
    }

    /// Runs stages up to and including `last` (an index into the curriculum),
    /// handing every emitted checkpoint to `sink`.
    pub fn run_through(&mut self, last: usize, sink: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        let last = last.min(self.curriculum.stages.len() - 1);
        if self.stage_index <= last
            && self.curriculum.stages[self.stage_index..=last]
                .iter()
                .any(|s| s.loss == StageLoss::Class)
            && self.data.labels.is_none_or(|l| l.is_empty())
        {
            return Err(Error::Contract(
                "missing propagated label set before the class stage".into(),
            ));
        }
        while self.stage_index <= last {
            self.run_current_stage(sink)?;
            sink(&self.checkpoint())?;
            self.advance();
        }
        Ok(())
    }

    pub fn run_all(&mut self, sink: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        self.run_through(self.curriculum.stages.len() - 1, sink)
    }

    fn run_current_stage(&mut self, sink: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<()> {
        let stage = self.curriculum.stages[self.stage_index].clone();
        let groups = stage.loss.trainable(self.curriculum.train_image_encoder_in_joint);
        let names: Vec<(String, bool)> = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, g, _)| (n, groups.contains(&g)))
            .collect();
        let val = validation_batches(&stage, &self.data, self.seed, self.stage_index)?;
        let started = Instant::now();
        let diverged = |step: usize, source: Error| Error::Diverged {
            stage: stage.loss.name().to_string(),
            step,
            source: Box::new(source),
        };

        while !self.progress.finished && self.progress.step < stage.steps_max {
            let step = self.progress.step;
            let batch = sample_stage_batch(&stage, &self.data, SplitPart::Train, &mut self.rng)?;
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, &groups);
            let loss = match stage_loss(&mut g, &vars, &stage, &batch) {
                Ok(l) => l,
                Err(e) if e.is_numeric() || matches!(e, Error::Degenerate(_)) => return Err(diverged(step, e)),
                Err(e) => return Err(e),
            };
            let train_loss = g.item(loss);
            let grads = g.backward(loss).map_err(|e| diverged(step, e))?;

            let mut next = self.params.clone();
            let opt = &mut self.progress.optimizer;
            opt.begin_step();
            for (slot, tensor) in next.tensors_mut().into_iter().enumerate() {
                let (name, on) = &names[slot];
                if *on {
                    opt.update(name, tensor, &grads.wrt(vars.flat()[slot]));
                }
            }
            if groups.contains(&ParamGroup::ClusterHead) {
                next.cluster.renormalize();
            }
            if !next.all_finite() {
                return Err(diverged(step, Error::NonFinite { op: "optimizer update" }));
            }
            self.params = next;
            self.progress.step += 1;

            let mut val_loss = None;
            if stage.eval_every > 0 && self.progress.step.is_multiple_of(stage.eval_every) && !val.is_empty() {
                let mut total = 0.0;
                for b in &val {
                    total += batch_loss(&self.params, &stage, b).map_err(|e| diverged(step, e))?;
                }
                let v = total / val.len() as f64;
                val_loss = Some(v);
                if v < self.progress.best_val {
                    self.progress.best_val = v;
                    self.progress.bad_evals = 0;
                } else {
                    self.progress.bad_evals += 1;
                    if stage.patience > 0 && self.progress.bad_evals >= stage.patience {
                        self.progress.finished = true;
                    }
                }
            }
            self.history.push(HistoryRow {
                stage: stage.loss,
                step: self.progress.step,
                train_loss,
                val_loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            if stage.checkpoint_every > 0
                && self.progress.step.is_multiple_of(stage.checkpoint_every)
                && !self.progress.finished
                && self.progress.step < stage.steps_max
            {
                sink(&self.checkpoint())?;
            }
        }
        self.progress.finished = true;
        log::info!(
            "stage {} finished after {} steps",
            stage.loss.name(),
            self.progress.step
        );
        Ok(())
    }
}

/// Runs one stage from `params`, returning the updated parameters and history.
pub fn run_stage(
    stage: &StageConfig,
    params: ModelParams,
    data: TrainingData,
    seed: u64,
) -> Result<(ModelParams, Vec<HistoryRow>)> {
    let curriculum = CurriculumConfig {
        stages: vec![stage.clone()],
        train_image_encoder_in_joint: true,
    };
    let model = model_config_of(&params);
    let mut session = Session::new(&curriculum, &model, data, "", seed)?.with_params(params);
    session.run_all(&mut |_| Ok(()))?;
    Ok((session.params, session.history))
}

/// Runs every stage from a fresh seeded initialization and returns the final checkpoint.
pub fn run_curriculum(
    curriculum: &CurriculumConfig,
    model: &ModelConfig,
    data: TrainingData,
    config_hash: &str,
    seed: u64,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    let mut session = Session::new(curriculum, model, data, config_hash, seed)?;
    session.run_all(sink)?;
    Ok((session.checkpoint(), session.history))
}

/// Recovers the architecture from parameter shapes.
fn model_config_of(p: &ModelParams) -> ModelConfig {
    use crate::models::EncoderConfig;
    let enc = |m: &crate::models::Mlp| {
        let input_dim = m.layers[0].weight.rows();
        let outs: Vec<usize> = m.layers.iter().map(|l| l.weight.cols()).collect();
        EncoderConfig {
            input_dim,
            hidden: outs[..outs.len() - 1].to_vec(),
            embed_dim: *outs.last().expect("at least one layer"),
        }
    };
    ModelConfig {
        audio: enc(&p.audio),
        image: enc(&p.image),
        coincidence_hidden: p.aa.hidden.weight.cols(),
        clusters: p.cluster.clusters(),
        logit_scale: p.cluster.scale,
        classes: p.classifier.output.weight.cols(),
        classifier_hidden: p.classifier.hidden.weight.cols(),
    }
}
