//! Attention encoder, learned latent tensor and mirrored decoder.
//!
//! The encoder lifts each observed frame `N → C`, adds a learned embedding
//! of its absolute timestep and runs a pre-norm transformer stack over the
//! observed timesteps. The decoder adds its own timestep embedding to the
//! merged latent sequence, runs a second stack and projects `C → N`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::occlusion::OcclusionSpec;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Window length `T`.
    pub window: usize,
    /// Coordinates per frame `N`.
    pub input_width: usize,
    /// Latent width `C`.
    pub latent_width: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_width: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 18,
            input_width: 42,
            latent_width: 256,
            encoder_layers: 4,
            attention_heads: 4,
            feedforward_width: 512,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.window,
            self.input_width,
            self.latent_width,
            self.encoder_layers,
            self.attention_heads,
            self.feedforward_width,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !self.latent_width.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "latent width {} not divisible by {} heads",
                self.latent_width, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.latent_width / self.attention_heads
    }
}

/// Per-timestep latents with their absolute (0-based) timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub values: Mat,
    pub time_index: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Stack {
    pos: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Dropout seed; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    lift: (ParamId, ParamId),
    encoder: Stack,
    decoder: Stack,
    out: (ParamId, ParamId),
    u: ParamId,
}

enum Init {
    Seeded(ChaCha8Rng),
    Zeros,
}

impl Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        match self {
            Init::Seeded(rng) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
            }
            Init::Zeros => Mat::zeros(fan_in, fan_out),
        }
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        match self {
            Init::Seeded(rng) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Mat::from_fn(rows, cols, |_, _| dist.sample(rng))
            }
            Init::Zeros => Mat::zeros(rows, cols),
        }
    }
}

const EMBED_STD: f64 = 0.02;

fn build_stack(prefix: &str, cfg: &ModelConfig, params: &mut ParamSet, init: &mut Init) -> Stack {
    let c = cfg.latent_width;
    let f = cfg.feedforward_width;
    let pos = params.add(format!("{prefix}.pos"), init.normal(cfg.window, c, EMBED_STD));
    let mut blocks = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let mut add = |name: &str, m: Mat| params.add(format!("{prefix}.{l}.{name}"), m);
        blocks.push(Block {
            ln1: (add("ln1.gain", Mat::filled(1, c, 1.0)), add("ln1.bias", Mat::zeros(1, c))),
            qkv: (add("qkv.weight", init.linear(c, 3 * c)), add("qkv.bias", Mat::zeros(1, 3 * c))),
            proj: (add("proj.weight", init.linear(c, c)), add("proj.bias", Mat::zeros(1, c))),
            ln2: (add("ln2.gain", Mat::filled(1, c, 1.0)), add("ln2.bias", Mat::zeros(1, c))),
            ff1: (add("ff1.weight", init.linear(c, f)), add("ff1.bias", Mat::zeros(1, f))),
            ff2: (add("ff2.weight", init.linear(f, c)), add("ff2.bias", Mat::zeros(1, c))),
        });
    }
    let norm = (
        params.add(format!("{prefix}.norm.gain"), Mat::filled(1, c, 1.0)),
        params.add(format!("{prefix}.norm.bias"), Mat::zeros(1, c)),
    );
    Stack { pos, blocks, norm }
}

impl Model {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, &mut Init::Seeded(ChaCha8Rng::seed_from_u64(seed))))
    }

    /// Model whose parameters are taken by name from `params`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut model = Self::build(config, &mut Init::Zeros);
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in params.iter() {
            let own = model
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if own != id || model.params.get(own).shape() != value.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has wrong position or shape")));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn build(config: ModelConfig, init: &mut Init) -> Self {
        let (n, c) = (config.input_width, config.latent_width);
        let mut params = ParamSet::new();
        let lift = (
            params.add("enc.lift.weight", init.linear(n, c)),
            params.add("enc.lift.bias", Mat::zeros(1, c)),
        );
        let encoder = build_stack("enc", &config, &mut params, init);
        let decoder = build_stack("dec", &config, &mut params, init);
        let out = (
            params.add("dec.out.weight", init.linear(c, n)),
            params.add("dec.out.bias", Mat::zeros(1, n)),
        );
        let u = params.add("u", init.normal(config.window, c, EMBED_STD));
        Self {
            config,
            params,
            lift,
            encoder,
            decoder,
            out,
            u,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Handle of the learned latent tensor `u` (`T × C`).
    pub fn u_id(&self) -> ParamId {
        self.u
    }

    pub fn learned_tensor(&self) -> &Mat {
        self.params.get(self.u)
    }

    fn check_time_index(&self, rows: usize, time_index: &[usize]) -> Result<()> {
        if rows == 0 || rows != time_index.len() {
            return Err(Error::Shape(format!(
                "{} rows with {} time indices",
                rows,
                time_index.len()
            )));
        }
        if time_index.iter().any(|&t| t >= self.config.window) {
            return Err(Error::Shape(format!("time index beyond window {}", self.config.window)));
        }
        Ok(())
    }

    /// Encoder on a tape. `x` is `T' × N`.
    pub fn encode_on(&self, tape: &mut Tape, x: Var, time_index: &[usize], opts: ForwardOptions) -> Var {
        let w = tape.param(self.lift.0);
        let b = tape.param(self.lift.1);
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        self.run_stack(tape, &self.encoder, h, time_index, opts, 0)
    }

    /// Decoder on a tape. `a` is `T × C` in temporal order.
    pub fn decode_on(&self, tape: &mut Tape, a: Var, opts: ForwardOptions) -> Var {
        let time: Vec<usize> = (0..self.config.window).collect();
        let h = self.run_stack(tape, &self.decoder, a, &time, opts, 1);
        let w = tape.param(self.out.0);
        let b = tape.param(self.out.1);
        let y = tape.matmul(h, w);
        tape.add_row(y, b)
    }

    /// Rows of `u` standing in for the occluded run of `spec`.
    pub fn u_slice_on(&self, tape: &mut Tape, spec: &OcclusionSpec) -> Var {
        let u = tape.param(self.u);
        tape.gather_rows(u, &spec.occluded_indices())
    }

    /// Rows `0..len` of `u`, used when one task owns the whole tensor.
    pub fn u_prefix_on(&self, tape: &mut Tape, len: usize) -> Var {
        let u = tape.param(self.u);
        let idx: Vec<usize> = (0..len).collect();
        tape.gather_rows(u, &idx)
    }

    /// `Φ`: observed latents and the learned run, in temporal order.
    pub fn merge_on(&self, tape: &mut Tape, observed: Var, learned: Var, spec: &OcclusionSpec) -> Var {
        let stacked = if spec.occluded_len() == 0 {
            observed
        } else {
            tape.concat_rows(&[observed, learned])
        };
        tape.gather_rows(stacked, &spec.merge_order())
    }

    fn run_stack(
        &self,
        tape: &mut Tape,
        stack: &Stack,
        h: Var,
        time_index: &[usize],
        opts: ForwardOptions,
        stream: u64,
    ) -> Var {
        let pos = tape.param(stack.pos);
        let pos = tape.gather_rows(pos, time_index);
        let mut h = tape.add(h, pos);
        for (l, block) in stack.blocks.iter().enumerate() {
            let salt = opts
                .dropout_seed
                .map(|s| s ^ (stream << 32) ^ ((l as u64) << 8));
            let n1 = self.layer_norm(tape, h, block.ln1);
            let att = self.attention(tape, n1, block);
            let att = self.dropout(tape, att, salt.map(|s| s ^ 1));
            h = tape.add(h, att);
            let n2 = self.layer_norm(tape, h, block.ln2);
            let ff = self.linear(tape, n2, block.ff1);
            let ff = tape.gelu(ff);
            let ff = self.linear(tape, ff, block.ff2);
            let ff = self.dropout(tape, ff, salt.map(|s| s ^ 2));
            h = tape.add(h, ff);
        }
        self.layer_norm(tape, h, stack.norm)
    }

    fn linear(&self, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let g = tape.param(g);
        let b = tape.param(b);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, x: Var, block: &Block) -> Var {
        let c = self.config.latent_width;
        let dh = self.config.head_width();
        let qkv = self.linear(tape, x, block.qkv);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.attention_heads)
            .map(|h| {
                let q = tape.slice_cols(qkv, h * dh, dh);
                let k = tape.slice_cols(qkv, c + h * dh, dh);
                let v = tape.slice_cols(qkv, 2 * c + h * dh, dh);
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores);
                tape.matmul(weights, v)
            })
            .collect();
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        self.linear(tape, merged, block.proj)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, seed: Option<u64>) -> Var {
        let p = self.config.dropout;
        let Some(seed) = seed.filter(|_| p > 0.0) else {
            return x;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Mat::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep });
        tape.mul_const(x, mask)
    }

    /// `B`: latents of the observed frames.
    pub fn encode(&self, observed: &Mat, time_index: &[usize]) -> Result<LatentSequence> {
        self.check_time_index(observed.rows(), time_index)?;
        if observed.cols() != self.config.input_width {
            return Err(Error::Shape(format!(
                "input width {} != {}",
                observed.cols(),
                self.config.input_width
            )));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(observed.clone());
        let z = self.encode_on(&mut tape, x, time_index, ForwardOptions::default());
        Ok(LatentSequence {
            values: tape.value(z).clone(),
            time_index: time_index.to_vec(),
        })
    }

    /// `D`: coordinates from a full-length latent sequence.
    pub fn decode(&self, a: &LatentSequence) -> Result<Mat> {
        if a.values.rows() != self.config.window || a.values.cols() != self.config.latent_width {
            return Err(Error::Shape(format!(
                "decoder expects {}x{}, got {}x{}",
                self.config.window,
                self.config.latent_width,
                a.values.rows(),
                a.values.cols()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(a.values.clone());
        let y = self.decode_on(&mut tape, x, ForwardOptions::default());
        Ok(tape.value(y).clone())
    }

    /// Rows of `u` at the occluded timesteps of `spec`.
    pub fn select_u_slice(&self, spec: &OcclusionSpec) -> Mat {
        self.learned_tensor().select_rows(&spec.occluded_indices())
    }

    /// Occlude, encode, merge with the learned run and decode.
    ///
    /// With `full_u` the learned run is read from the leading rows of `u`.
    pub fn reconstruct(&self, points: &Mat, spec: &OcclusionSpec, full_u: bool) -> Result<Mat> {
        if points.shape() != (self.config.window, self.config.input_width) {
            return Err(Error::Shape(format!(
                "window is {}x{}, model expects {}x{}",
                points.rows(),
                points.cols(),
                self.config.window,
                self.config.input_width
            )));
        }
        let mut tape = Tape::new(&self.params);
        let out = self.reconstruct_on(&mut tape, points, spec, full_u, ForwardOptions::default());
        Ok(tape.value(out).clone())
    }

    pub(crate) fn reconstruct_on(
        &self,
        tape: &mut Tape,
        points: &Mat,
        spec: &OcclusionSpec,
        full_u: bool,
        opts: ForwardOptions,
    ) -> Var {
        let observed = spec.observed_indices();
        let x = tape.constant(points.select_rows(&observed));
        let z_obs = self.encode_on(tape, x, &observed, opts);
        let learned = if full_u {
            self.u_prefix_on(tape, spec.occluded_len())
        } else {
            self.u_slice_on(tape, spec)
        };
        let a = self.merge_on(tape, z_obs, learned, spec);
        self.decode_on(tape, a, opts)
    }
}
