//! Encoders, projection and predictor MLPs, and the temporal task heads.
//!
//! The architecture ([`Model`]) is a pure function of its config; weights
//! and batch-norm running statistics live in a separate [`ModelState`].
//! Forward passes run on a [`Graph`] through a [`Forward`] context that
//! binds parameter variables and collects batch statistics.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::{BatchStats, ConvGeom, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_channels: Vec<usize>,
    pub audio_channels: Vec<usize>,
    /// Encoder output width for both modalities.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_channels: vec![8, 16],
            audio_channels: vec![8, 16],
            feature_dim: 64,
            hidden_dim: 128,
            embed_dim: 32,
        }
    }
}

/// Shapes of the encoder inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side of the square spectrogram.
    pub spec_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Modality::Video => "v",
            Modality::Audio => "a",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Temporal task classifier heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Speed(Modality),
    Direction(Modality),
    /// Ordering of a first clip in one modality against a second clip in
    /// another; input is the two features concatenated.
    Order(Modality, Modality),
}

impl Head {
    pub const ALL: [Head; 8] = [
        Head::Speed(Modality::Video),
        Head::Speed(Modality::Audio),
        Head::Direction(Modality::Video),
        Head::Direction(Modality::Audio),
        Head::Order(Modality::Video, Modality::Video),
        Head::Order(Modality::Audio, Modality::Audio),
        Head::Order(Modality::Video, Modality::Audio),
        Head::Order(Modality::Audio, Modality::Video),
    ];

    pub fn classes(self) -> usize {
        match self {
            Head::Speed(_) => 4,
            Head::Direction(_) => 2,
            Head::Order(..) => 3,
        }
    }

    pub fn name(self) -> String {
        match self {
            Head::Speed(m) => format!("speed_{}", m.short()),
            Head::Direction(m) => format!("direction_{}", m.short()),
            Head::Order(a, b) => format!("order_{}{}", a.short(), b.short()),
        }
    }

    fn index(self) -> usize {
        Head::ALL.iter().position(|&h| h == self).expect("listed head")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
    out: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    stat: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    geom: ConvGeom,
}

/// One `Linear -> [BN] -> [ReLU]` stage.
#[derive(Clone, Copy, Debug)]
struct Stage {
    linear: Linear,
    norm: Option<Norm>,
    relu: bool,
}

#[derive(Clone, Debug)]
struct Mlp {
    input: usize,
    stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
struct ConvEncoder {
    convs: Vec<(Conv, Norm)>,
    /// Spatial dims after the last convolution.
    out_dims: [usize; 3],
    fc: Stage,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
    norm_widths: Vec<usize>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, input: usize, out: usize, bias: bool) -> Linear {
        let w = self.param(format!("{name}.weight"), vec![input, out], Init::Uniform { fan_in: input });
        let b = bias.then(|| self.param(format!("{name}.bias"), vec![out], Init::Uniform { fan_in: input }));
        Linear { w, b, out }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        let gamma = self.param(format!("{name}.gamma"), vec![width], Init::Ones);
        let beta = self.param(format!("{name}.beta"), vec![width], Init::Zeros);
        self.norm_widths.push(width);
        Norm {
            gamma,
            beta,
            stat: self.norm_widths.len() - 1,
        }
    }

    /// Linear layers feeding a batch norm carry no bias: the normalization
    /// cancels it.
    fn stage(&mut self, name: &str, input: usize, out: usize, norm: bool, relu: bool) -> Stage {
        Stage {
            linear: self.linear(&format!("{name}.fc"), input, out, !norm),
            norm: norm.then(|| self.norm(&format!("{name}.bn"), out)),
            relu,
        }
    }

    /// Two hidden `Linear-BN-ReLU` layers then an output layer, normalized
    /// or not.
    fn mlp3(&mut self, name: &str, input: usize, hidden: usize, out: usize, out_norm: bool) -> Mlp {
        Mlp {
            input,
            stages: vec![
                self.stage(&format!("{name}.0"), input, hidden, true, true),
                self.stage(&format!("{name}.1"), hidden, hidden, true, true),
                self.stage(&format!("{name}.2"), hidden, out, out_norm, false),
            ],
        }
    }

    fn predictor(&mut self, name: &str, width: usize, hidden: usize) -> Mlp {
        Mlp {
            input: width,
            stages: vec![
                self.stage(&format!("{name}.0"), width, hidden, true, true),
                self.stage(&format!("{name}.1"), hidden, width, false, false),
            ],
        }
    }

    fn conv_encoder(
        &mut self,
        name: &str,
        channels_in: usize,
        channels: &[usize],
        geom: ConvGeom,
        mut dims: [usize; 3],
        pooled_width: impl Fn([usize; 3], usize) -> usize,
        feature_dim: usize,
    ) -> Result<ConvEncoder> {
        let mut convs = Vec::new();
        let mut cin = channels_in;
        for (i, &cout) in channels.iter().enumerate() {
            let k = geom.kernel;
            let fan_in = k[0] * k[1] * k[2] * cin;
            let w = self.param(
                format!("{name}.conv{i}.weight"),
                vec![k[0], k[1], k[2], cin, cout],
                Init::Uniform { fan_in },
            );
            let norm = self.norm(&format!("{name}.conv{i}.bn"), cout);
            convs.push((Conv { w, geom }, norm));
            dims = geom.output_dims(dims)?;
            cin = cout;
        }
        let fc = self.stage(&format!("{name}.fc"), pooled_width(dims, cin), feature_dim, true, true);
        Ok(ConvEncoder {
            convs,
            out_dims: dims,
            fc,
        })
    }
}

/// Network architecture and parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub input: InputDims,
    specs: Vec<ParamSpec>,
    norm_widths: Vec<usize>,
    video: ConvEncoder,
    audio: ConvEncoder,
    project: [Mlp; 2],
    predict: [Mlp; 2],
    heads: Vec<Mlp>,
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::Video => 0,
        Modality::Audio => 1,
    }
}

impl Model {
    pub fn new(config: &ModelConfig, input: InputDims) -> Result<Self> {
        if config.video_channels.is_empty() || config.audio_channels.is_empty() {
            return Err(Error::Config("encoders need at least one convolution".into()));
        }
        if [config.feature_dim, config.hidden_dim, config.embed_dim].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        let mut b = Builder::default();
        let video = b.conv_encoder(
            "video",
            input.channels,
            &config.video_channels,
            ConvGeom::cube(3, 2, 1),
            [input.frames, input.height, input.width],
            |_, c| c,
            config.feature_dim,
        )?;
        // Audio pools over time only; the frequency axis is kept.
        let audio = b.conv_encoder(
            "audio",
            1,
            &config.audio_channels,
            ConvGeom::square(3, 2, 1),
            [1, input.spec_size, input.spec_size],
            |d, c| d[1] * c,
            config.feature_dim,
        )?;
        let (f, h, e) = (config.feature_dim, config.hidden_dim, config.embed_dim);
        let project = [b.mlp3("project_v", f, h, e, true), b.mlp3("project_a", f, h, e, true)];
        let predict = [b.predictor("predict_v", e, h), b.predictor("predict_a", e, h)];
        let heads = Head::ALL
            .iter()
            .map(|&hd| {
                let input = match hd {
                    Head::Order(..) => 2 * f,
                    _ => f,
                };
                b.mlp3(&format!("head_{}", hd.name()), input, h, hd.classes(), false)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input,
            specs: b.specs,
            norm_widths: b.norm_widths,
            video,
            audio,
            project,
            predict,
            heads,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Fresh weights, uniform in `±sqrt(1 / fan_in)`; batch norms start at
    /// identity with zero-mean unit-variance running statistics.
    pub fn init(&self, seed: u64) -> ModelState {
        let params = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                    Init::Uniform { fan_in } => {
                        let bound = (1.0 / fan_in as f64).sqrt();
                        let mut rng = rng_for(seed, &[tag::INIT, i as u64]);
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            })
            .collect();
        let running = self.norm_widths.iter().map(|&w| RunningStats::new(w)).collect();
        ModelState { params, running }
    }

    /// Checks that a state has this model's layout.
    pub fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.params.len() != self.specs.len()
            || state.params.iter().zip(&self.specs).any(|(p, s)| p.shape() != s.shape.as_slice())
        {
            return Err(Error::Corrupt("parameters do not match the model layout".into()));
        }
        if state.running.len() != self.norm_widths.len()
            || state
                .running
                .iter()
                .zip(&self.norm_widths)
                .any(|(r, &w)| r.mean.len() != w || r.var.len() != w)
        {
            return Err(Error::Corrupt("running statistics do not match the model layout".into()));
        }
        Ok(())
    }

    /// Video features `[N, feature_dim]` of clips `[N, T, H, W, C]`.
    pub fn encode_video(&self, f: &mut Forward, clips: Var) -> Result<Var> {
        let i = self.input;
        let shape = f.graph.shape(clips);
        if shape.len() != 5 || shape[1..] != [i.frames, i.height, i.width, i.channels] {
            return Err(Error::shape("encode_video", format!("clip batch {shape:?}")));
        }
        let n = shape[0];
        let mut x = clips;
        for (conv, norm) in &self.video.convs {
            x = f.graph.conv(x, f.var(conv.w), conv.geom)?;
            x = f.norm(x, norm)?;
            x = f.graph.relu(x)?;
        }
        let c = *f.graph.shape(x).last().unwrap();
        let d = self.video.out_dims;
        x = f.graph.reshape(x, &[n, d[0] * d[1] * d[2], c])?;
        x = f.graph.mean_axis(x, 1)?;
        x = f.graph.reshape(x, &[n, c])?;
        f.stage(x, &self.video.fc)
    }

    /// Audio features `[N, feature_dim]` of spectrograms `[N, F, T]`.
    pub fn encode_audio(&self, f: &mut Forward, specs: Var) -> Result<Var> {
        let s = self.input.spec_size;
        let shape = f.graph.shape(specs);
        if shape.len() != 3 || shape[1..] != [s, s] {
            return Err(Error::shape("encode_audio", format!("spectrogram batch {shape:?}")));
        }
        let n = shape[0];
        let mut x = f.graph.reshape(specs, &[n, 1, s, s, 1])?;
        for (conv, norm) in &self.audio.convs {
            x = f.graph.conv(x, f.var(conv.w), conv.geom)?;
            x = f.norm(x, norm)?;
            x = f.graph.relu(x)?;
        }
        let c = *f.graph.shape(x).last().unwrap();
        let d = self.audio.out_dims;
        x = f.graph.mean_axis(x, 3)?;
        x = f.graph.reshape(x, &[n, d[1] * c])?;
        f.stage(x, &self.audio.fc)
    }

    pub fn encode(&self, f: &mut Forward, m: Modality, x: Var) -> Result<Var> {
        match m {
            Modality::Video => self.encode_video(f, x),
            Modality::Audio => self.encode_audio(f, x),
        }
    }

    /// Embedding `[N, embed_dim]` of encoder features.
    pub fn project(&self, f: &mut Forward, m: Modality, features: Var) -> Result<Var> {
        f.mlp(features, &self.project[slot(m)])
    }

    pub fn predict(&self, f: &mut Forward, m: Modality, embedding: Var) -> Result<Var> {
        f.mlp(embedding, &self.predict[slot(m)])
    }

    /// Logits `[N, classes]`; order heads take two concatenated features.
    pub fn head(&self, f: &mut Forward, head: Head, input: Var) -> Result<Var> {
        f.mlp(input, &self.heads[head.index()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Trainable weights and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<Tensor>,
    pub running: Vec<RunningStats>,
}

impl ModelState {
    /// Adds every parameter to `graph`, as trainable leaves or constants.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| graph.leaf(p.clone(), trainable)).collect()
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_stats(&mut self, updates: &[(usize, BatchStats)]) {
        for (i, s) in updates {
            self.running[*i].update(s, BN_MOMENTUM);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; collected for the caller to apply.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-graph forward context.
pub struct Forward<'a> {
    pub graph: &'a Graph,
    params: &'a [Var],
    running: &'a [RunningStats],
    mode: Mode,
    stats: Vec<(usize, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(graph: &'a Graph, params: &'a [Var], running: &'a [RunningStats], mode: Mode) -> Self {
        Self {
            graph,
            params,
            running,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics of every train-mode batch norm evaluated so far.
    pub fn take_stats(&mut self) -> Vec<(usize, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    fn var(&self, i: usize) -> Var {
        self.params[i]
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let (gamma, beta) = (self.var(n.gamma), self.var(n.beta));
        match self.mode {
            Mode::Train => {
                let (y, s) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((n.stat, s));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[n.stat];
                self.graph.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn stage(&mut self, x: Var, s: &Stage) -> Result<Var> {
        let mut y = self.graph.matmul(x, self.var(s.linear.w))?;
        if let Some(b) = s.linear.b {
            y = self.graph.add(y, self.var(b))?;
        }
        if let Some(n) = &s.norm {
            y = self.norm(y, n)?;
        }
        if s.relu {
            y = self.graph.relu(y)?;
        }
        debug_assert_eq!(self.graph.shape(y).last(), Some(&s.linear.out));
        Ok(y)
    }

    fn mlp(&mut self, x: Var, m: &Mlp) -> Result<Var> {
        let shape = self.graph.shape(x);
        if shape.len() != 2 || shape[1] != m.input {
            return Err(Error::shape("mlp", format!("expected [N, {}], got {shape:?}", m.input)));
        }
        m.stages.iter().try_fold(x, |y, s| self.stage(y, s))
    }
}
