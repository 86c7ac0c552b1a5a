//! Encoders and heads: the audio encoder `f`, image encoder `g`, the two
//! coincidence heads, the cosine cluster head and the classifier head.
//!
//! Parameters live in plain [`Tensor`]s inside [`ModelParams`]. A forward
//! pass first binds them onto a [`Graph`] with [`ModelParams::bind`], which
//! returns a [`ModelVars`] mirror holding the graph handles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, PROB_CEIL, PROB_FLOOR};
use crate::tensor::Tensor;

/// Log-mel patch size used for the full-scale audio encoder (F mel bins by T frames).
pub const REFERENCE_AUDIO_SHAPE: (usize, usize) = (64, 96);
/// Image size used for the full-scale image encoder (W, H, D).
pub const REFERENCE_IMAGE_SHAPE: (usize, usize, usize) = (128, 128, 3);
pub const REFERENCE_EMBED_DIM: usize = 128;
/// Hidden width of the coincidence and classifier heads at full scale.
pub const REFERENCE_HEAD_HIDDEN: usize = 512;
pub const REFERENCE_LOGIT_SCALE: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Flattened input width (F·T for audio, W·H·D for images).
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    fn validate(&self, which: &str) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("{which} embed_dim must be >= 2")));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("{which} widths must be positive")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio: EncoderConfig,
    pub image: EncoderConfig,
    pub coincidence_hidden: usize,
    /// Number of clusters K.
    pub clusters: usize,
    pub logit_scale: f64,
    /// Number of classes C seen by the classifier head.
    pub classes: usize,
    pub classifier_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.audio.validate("audio")?;
        self.image.validate("image")?;
        if self.audio.embed_dim != self.image.embed_dim {
            return Err(Error::Config("audio and image embed_dim differ".into()));
        }
        if self.clusters < 2 {
            return Err(Error::Config("clusters must be >= 2".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.coincidence_hidden == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.audio.embed_dim
    }
}

/// Which sub-network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    AudioEncoder,
    ImageEncoder,
    AaHead,
    AvHead,
    ClusterHead,
    ClassifierHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::AudioEncoder,
        ParamGroup::ImageEncoder,
        ParamGroup::AaHead,
        ParamGroup::AvHead,
        ParamGroup::ClusterHead,
        ParamGroup::ClassifierHead,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("shape"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeroed(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.data_mut().fill(0.0);
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            weight: g.leaf(self.weight.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
        }
    }
}

/// ReLU multilayer perceptron with a linear final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoincidenceHead {
    /// `2d × hidden`, applied to the concatenation `[e1, e2]`.
    pub hidden: Linear,
    /// `hidden × 1`, logistic output.
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterHead {
    /// `K × d`, rows kept at unit norm.
    pub weight: Tensor,
    pub scale: f64,
}

impl ClusterHead {
    pub fn clusters(&self) -> usize {
        self.weight.rows()
    }

    /// Rescales every weight row to unit length.
    pub fn renormalize(&mut self) {
        let d = self.weight.cols();
        for row in self.weight.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub output: Linear,
}

/// Every trainable tensor of the framework.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub audio: Mlp,
    pub image: Mlp,
    pub aa: CoincidenceHead,
    pub av: CoincidenceHead,
    pub cluster: ClusterHead,
    pub classifier: ClassifierHead,
}

// ----- graph handles ------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add(h, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    /// Maps a `B × input_dim` batch to `B × d` embeddings.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoincidenceVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl CoincidenceVars {
    /// Coincidence probability for each row pair `(e1[n], e2[n])`, clamped to
    /// `[PROB_FLOOR, PROB_CEIL]`. Returns a length-N vector.
    pub fn forward(&self, g: &mut Graph, e1: Var, e2: Var) -> Result<Var> {
        let z = g.concat_cols(e1, e2)?;
        let h = self.hidden.forward(g, z)?;
        let h = g.relu(h)?;
        let logit = self.output.forward(g, h)?;
        let p = g.sigmoid(logit)?;
        let n = g.shape(p)[0];
        let p = g.reshape(p, vec![n])?;
        g.clamp(p, PROB_FLOOR, PROB_CEIL)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClusterVars {
    pub weight: Var,
    pub scale: f64,
}

impl ClusterVars {
    /// `softmax(scale · cos(e, w_k))` per row of `e`.
    pub fn forward(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let unit = g.l2_normalize(e)?;
        let unit = if g.shape(unit).len() == 1 {
            let d = g.shape(unit)[0];
            g.reshape(unit, vec![1, d])?
        } else {
            unit
        };
        let wt = g.transpose(self.weight)?;
        let cos = g.matmul(unit, wt)?;
        g.softmax_scaled(cos, self.scale)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl ClassifierVars {
    pub fn forward(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let h = self.hidden.forward(g, e)?;
        let h = g.relu(h)?;
        let logits = self.output.forward(g, h)?;
        g.softmax_scaled(logits, 1.0)
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub audio: MlpVars,
    pub image: MlpVars,
    pub aa: CoincidenceVars,
    pub av: CoincidenceVars,
    pub cluster: ClusterVars,
    pub classifier: ClassifierVars,
    flat: Vec<Var>,
}

impl ModelVars {
    /// Handles in the same order as [`ModelParams::named_tensors`].
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }
}

// ----- init, binding, naming ---------------------------------------------

impl ModelParams {
    /// Seeded initialization: fan-in scaled uniform weights, zero biases and
    /// unit-norm cluster rows.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = |rng: &mut ChaCha8Rng, c: &EncoderConfig| Mlp {
            layers: c.widths().windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect(),
        };
        let d = config.embed_dim();
        let audio = mlp(&mut rng, &config.audio);
        let image = mlp(&mut rng, &config.image);
        let coincidence = |rng: &mut ChaCha8Rng| CoincidenceHead {
            hidden: Linear::init(rng, 2 * d, config.coincidence_hidden),
            output: Linear::init(rng, config.coincidence_hidden, 1),
        };
        let aa = coincidence(&mut rng);
        let av = coincidence(&mut rng);
        let k = config.clusters;
        let data = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut cluster = ClusterHead {
            weight: Tensor::matrix(k, d, data)?,
            scale: config.logit_scale,
        };
        cluster.renormalize();
        let classifier = ClassifierHead {
            hidden: Linear::init(&mut rng, d, config.classifier_hidden),
            output: Linear::init(&mut rng, config.classifier_hidden, config.classes),
        };
        Ok(ModelParams {
            audio,
            image,
            aa,
            av,
            cluster,
            classifier,
        })
    }

    /// Every tensor with its canonical name and group, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        fn linear<'a>(out: &mut Vec<(String, ParamGroup, &'a Tensor)>, prefix: &str, group: ParamGroup, l: &'a Linear) {
            out.push((format!("{prefix}.weight"), group, &l.weight));
            out.push((format!("{prefix}.bias"), group, &l.bias));
        }
        let mut out = Vec::new();
        for (i, l) in self.audio.layers.iter().enumerate() {
            linear(&mut out, &format!("f.{i}"), ParamGroup::AudioEncoder, l);
        }
        for (i, l) in self.image.layers.iter().enumerate() {
            linear(&mut out, &format!("g.{i}"), ParamGroup::ImageEncoder, l);
        }
        linear(&mut out, "p_aa.hidden", ParamGroup::AaHead, &self.aa.hidden);
        linear(&mut out, "p_aa.output", ParamGroup::AaHead, &self.aa.output);
        linear(&mut out, "p_av.hidden", ParamGroup::AvHead, &self.av.hidden);
        linear(&mut out, "p_av.output", ParamGroup::AvHead, &self.av.output);
        out.push(("p_clust.weight".into(), ParamGroup::ClusterHead, &self.cluster.weight));
        linear(
            &mut out,
            "p_class.hidden",
            ParamGroup::ClassifierHead,
            &self.classifier.hidden,
        );
        linear(
            &mut out,
            "p_class.output",
            ParamGroup::ClassifierHead,
            &self.classifier.output,
        );
        out
    }

    /// Mutable access to the tensor at position `slot` of [`Self::named_tensors`].
    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        let mut all = self.tensors_mut();
        all.swap_remove(slot)
    }

    /// Mutable references in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in self.audio.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in self.image.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [
            &mut self.aa.hidden,
            &mut self.aa.output,
            &mut self.av.hidden,
            &mut self.av.output,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.cluster.weight);
        for l in [&mut self.classifier.hidden, &mut self.classifier.output] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Binds every tensor onto `g`; only tensors in `trainable` receive
    /// gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> ModelVars {
        let on = |grp: ParamGroup| trainable.contains(&grp);
        let mlp = |g: &mut Graph, m: &Mlp, t: bool| MlpVars {
            layers: m.layers.iter().map(|l| l.bind(g, t)).collect(),
        };
        let audio = mlp(g, &self.audio, on(ParamGroup::AudioEncoder));
        let image = mlp(g, &self.image, on(ParamGroup::ImageEncoder));
        let head = |g: &mut Graph, h: &CoincidenceHead, t: bool| CoincidenceVars {
            hidden: h.hidden.bind(g, t),
            output: h.output.bind(g, t),
        };
        let aa = head(g, &self.aa, on(ParamGroup::AaHead));
        let av = head(g, &self.av, on(ParamGroup::AvHead));
        let cluster = ClusterVars {
            weight: g.leaf(self.cluster.weight.clone(), on(ParamGroup::ClusterHead)),
            scale: self.cluster.scale,
        };
        let t = on(ParamGroup::ClassifierHead);
        let classifier = ClassifierVars {
            hidden: self.classifier.hidden.bind(g, t),
            output: self.classifier.output.bind(g, t),
        };

        let mut flat = Vec::new();
        let push_lin = |flat: &mut Vec<Var>, l: &LinearVars| {
            flat.push(l.weight);
            flat.push(l.bias);
        };
        for l in audio.layers.iter().chain(&image.layers) {
            push_lin(&mut flat, l);
        }
        for l in [&aa.hidden, &aa.output, &av.hidden, &av.output] {
            push_lin(&mut flat, l);
        }
        flat.push(cluster.weight);
        push_lin(&mut flat, &classifier.hidden);
        push_lin(&mut flat, &classifier.output);

        ModelVars {
            audio,
            image,
            aa,
            av,
            cluster,
            classifier,
            flat,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, _, t)| t.all_finite())
    }
}

// ----- inference helpers --------------------------------------------------

fn as_batch(x: &Tensor, input_dim: usize, single: bool) -> Result<Tensor> {
    if x.len() == input_dim && (single || x.rank() != 2) {
        return x.clone().reshape(vec![1, input_dim]);
    }
    if x.rank() == 2 && x.cols() == input_dim {
        return Ok(x.clone());
    }
    Err(Error::shape(
        "embed",
        format!("input {:?} does not match encoder width {input_dim}", x.shape()),
    ))
}

fn embed_with(mlp: &Mlp, x: &Tensor, single: bool) -> Result<Tensor> {
    let input_dim = mlp.layers[0].weight.rows();
    let batch = as_batch(x, input_dim, single)?;
    let mut g = Graph::new();
    let vars = MlpVars {
        layers: mlp.layers.iter().map(|l| l.bind(&mut g, false)).collect(),
    };
    let xv = g.constant(batch);
    let e = vars.forward(&mut g, xv)?;
    let out = g.value(e).clone();
    if single {
        let d = out.cols();
        out.reshape(vec![d])
    } else {
        Ok(out)
    }
}

/// Embeds one audio example (any shape with F·T values, e.g. `[F, T]`).
pub fn embed_audio(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    embed_with(&params.audio, x, true)
}

/// Embeds one image example (any shape with W·H·D values).
pub fn embed_image(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    embed_with(&params.image, x, true)
}

/// Embeds a `B × input_dim` batch of audio examples.
pub fn embed_audio_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    embed_with(&params.audio, x, false)
}

pub fn embed_image_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    embed_with(&params.image, x, false)
}

fn row_input(e: &Tensor, d: usize) -> Result<Tensor> {
    if e.len() != d {
        return Err(Error::shape(
            "head",
            format!("embedding {:?} does not have width {d}", e.shape()),
        ));
    }
    e.clone().reshape(vec![1, d])
}

/// Probability that `(e1, e2)` coincide under `head`.
pub fn coincidence_prob(head: &CoincidenceHead, e1: &Tensor, e2: &Tensor) -> Result<f64> {
    let d = head.hidden.weight.rows() / 2;
    let mut g = Graph::new();
    let vars = CoincidenceVars {
        hidden: head.hidden.bind(&mut g, false),
        output: head.output.bind(&mut g, false),
    };
    let a = g.constant(row_input(e1, d)?);
    let b = g.constant(row_input(e2, d)?);
    let p = vars.forward(&mut g, a, b)?;
    Ok(g.value(p).data()[0])
}

/// Cluster distribution for one embedding (`[d]`) or a batch (`[B, d]`).
pub fn cluster_distribution(head: &ClusterHead, e: &Tensor) -> Result<Tensor> {
    let d = head.weight.cols();
    if e.cols() != d {
        return Err(Error::shape(
            "cluster_distribution",
            format!("{:?} vs width {d}", e.shape()),
        ));
    }
    let mut g = Graph::new();
    let vars = ClusterVars {
        weight: g.constant(head.weight.clone()),
        scale: head.scale,
    };
    let x = g.constant(e.clone());
    let p = vars.forward(&mut g, x)?;
    let out = g.value(p).clone();
    if e.rank() == 1 {
        out.reshape(vec![head.clusters()])
    } else {
        Ok(out)
    }
}

/// Class distribution for one embedding (`[d]`) or a batch (`[B, d]`).
pub fn class_distribution(head: &ClassifierHead, e: &Tensor) -> Result<Tensor> {
    let d = head.hidden.weight.rows();
    let batch = if e.rank() == 2 && e.cols() == d {
        e.clone()
    } else {
        row_input(e, d)?
    };
    let mut g = Graph::new();
    let vars = ClassifierVars {
        hidden: head.hidden.bind(&mut g, false),
        output: head.output.bind(&mut g, false),
    };
    let x = g.constant(batch);
    let p = vars.forward(&mut g, x)?;
    let out = g.value(p).clone();
    if e.rank() == 2 {
        Ok(out)
    } else {
        let c = out.cols();
        out.reshape(vec![c])
    }
}
