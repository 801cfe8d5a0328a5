//! The conditional velocity network `V(x_t, c, t)`.
//!
//! A 3D encoder–decoder over `[C, D, H, W]` feature maps with
//! `ch(l) = base · 2^l` channels at resolution level `l`. Every block is
//!
//! ```text
//! conv 3³ → + time bias → layer_norm → relu → conv 3³ → layer_norm → relu [→ cross-attention]
//! ```
//!
//! Encoder level `l > 0` is preceded by a stride-2 `2³` convolution; decoder
//! level `l` starts with a stride-2 `2³` transposed convolution from level
//! `l + 1`, concatenated with the encoder skip (and, at level 0, with the
//! input itself). Two `1³` heads read the level-0 features: `head_f` and
//! `head_a`.
//!
//! The time embedding is `relu(W · φ(t) + b)` with
//! `φ(t) = [sin(ω_0 t) … sin(ω_{T/2-1} t), cos(ω_0 t) … cos(ω_{T/2-1} t)]`,
//! `ω_k = π (k + 1)`. Each block adds its own linear map of the embedding
//! to every site after the first convolution.
//!
//! Cross-attention at a site with features `F [C × S]` and context tokens
//! `X [2 × D]` is single-head with `d_k = C` and no biases:
//! `F + (X' W_v)ᵀ · softmax_tokens((X' W_k) (W_q F) / √C)` with
//! `X' = X + P` and `P [2 × D]` a learned per-site token position
//! embedding. Without `P` the output would be invariant to token order.
//! Attention level `l` means the decoder block at `l` (or the bottleneck
//! when `l = levels - 1`); the remaining encoder blocks never attend.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use thiserror::Error;

use crate::adapters::ConditionContext;
use crate::diffcore::{BoundParams, DiffError, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;
use crate::synthdata::Tracer;
use crate::volume::{Dims, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("time {0} outside [0, 1]")]
    OutOfRangeT(f64),
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("parameter store lacks {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub attn_levels: BTreeSet<usize>,
    pub context_dim: usize,
    pub time_embed_dim: usize,
    /// Attention heads; only 1 is supported.
    pub heads: usize,
}

impl NetConfig {
    /// Default desk-scale network for a given context dimension.
    pub fn new(context_dim: usize) -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            attn_levels: (0..3).collect(),
            context_dim,
            time_embed_dim: 16,
            heads: 1,
        }
    }

    /// Two levels, two base channels, four time features.
    pub fn tiny(context_dim: usize) -> Self {
        Self {
            levels: 2,
            base_channels: 2,
            attn_levels: (0..2).collect(),
            context_dim,
            time_embed_dim: 4,
            heads: 1,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::BadConfig(m.to_owned()));
        if self.levels == 0 {
            return bad("levels must be >= 1");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1");
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and >= 2");
        }
        if self.context_dim == 0 {
            return bad("context_dim must be >= 1");
        }
        if self.heads != 1 {
            return bad("only single-head attention is supported");
        }
        if self.attn_levels.iter().any(|&l| l >= self.levels) {
            return bad("attention level beyond the bottleneck");
        }
        Ok(())
    }

    /// Checks that every spatial extent is divisible by `2^(levels-1)`.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if dims.as_array().iter().any(|&n| n == 0 || n % f != 0) {
            return Err(NetError::DimMismatch(format!(
                "spatial dims {:?} not divisible by {f}",
                dims.as_array()
            )));
        }
        Ok(())
    }

    fn attends(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }
}

/// Exact learnable-scalar count, layer by layer:
///
/// - time projection: `T² + T`
/// - conv `k³`, `i → o` channels: `i·o·k³ + o`
/// - per block: conv1 + conv2 (`3³`), time map `o·T + o`, two layer norms `2o` each
/// - attention: `C²` (query) + `D·C` (key) + `D·C` (value) + `2D` (token positions)
/// - heads: `2 (ch(0) + 1)`
pub fn param_count(cfg: &NetConfig) -> usize {
    let t = cfg.time_embed_dim;
    let d = cfg.context_dim;
    let conv = |i: usize, o: usize, k: usize| i * o * k * k * k + o;
    let block = |i: usize, o: usize| conv(i, o, 3) + (o * t + o) + 2 * o + conv(o, o, 3) + 2 * o;
    let attn = |c: usize| c * c + 2 * d * c + 2 * d;
    let last = cfg.levels - 1;

    let mut n = t * t + t;
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        if l > 0 {
            n += conv(cfg.channels(l - 1), c, 2);
        }
        n += block(if l == 0 { 1 } else { c }, c);
        if l == last && cfg.attends(l) {
            n += attn(c);
        }
    }
    for l in (0..last).rev() {
        let c = cfg.channels(l);
        n += conv(cfg.channels(l + 1), c, 2);
        n += block(2 * c + usize::from(l == 0), c);
        if cfg.attends(l) {
            n += attn(c);
        }
    }
    n + 2 * (cfg.channels(0) + 1)
}

enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Ones,
    Zeros,
}

fn layer_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let t = cfg.time_embed_dim;
    let d = cfg.context_dim;
    let mut specs = Vec::new();
    let mut conv = |specs: &mut Vec<_>, name: String, i: usize, o: usize, k: usize| {
        let fan_in = (i * k * k * k) as f64;
        specs.push((format!("{name}.w"), vec![o, i, k, k, k], Init::Normal((2.0 / fan_in).sqrt())));
        specs.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let block = |specs: &mut Vec<_>, conv: &mut dyn FnMut(&mut Vec<_>, String, usize, usize, usize), p: &str, i: usize, o: usize| {
        conv(specs, format!("{p}.conv1"), i, o, 3);
        specs.push((format!("{p}.time.w"), vec![o, t], Init::Normal((1.0 / t as f64).sqrt())));
        specs.push((format!("{p}.time.b"), vec![o], Init::Zeros));
        specs.push((format!("{p}.ln1.g"), vec![o], Init::Ones));
        specs.push((format!("{p}.ln1.b"), vec![o], Init::Zeros));
        conv(specs, format!("{p}.conv2"), o, o, 3);
        specs.push((format!("{p}.ln2.g"), vec![o], Init::Ones));
        specs.push((format!("{p}.ln2.b"), vec![o], Init::Zeros));
    };
    let attn = |specs: &mut Vec<_>, p: &str, c: usize| {
        specs.push((format!("{p}.attn.q"), vec![c, c], Init::Normal((1.0 / c as f64).sqrt())));
        specs.push((format!("{p}.attn.k"), vec![d, c], Init::Normal((1.0 / d as f64).sqrt())));
        specs.push((format!("{p}.attn.v"), vec![d, c], Init::Normal((1.0 / d as f64).sqrt())));
        specs.push((format!("{p}.attn.pos"), vec![2, d], Init::Normal(1.0)));
    };

    specs.push(("time.proj.w".into(), vec![t, t], Init::Normal((1.0 / t as f64).sqrt())));
    specs.push(("time.proj.b".into(), vec![t], Init::Zeros));
    let last = cfg.levels - 1;
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        let p = format!("enc{l}");
        if l > 0 {
            conv(&mut specs, format!("{p}.down"), cfg.channels(l - 1), c, 2);
        }
        block(&mut specs, &mut conv, &p, if l == 0 { 1 } else { c }, c);
        if l == last && cfg.attends(l) {
            attn(&mut specs, &p, c);
        }
    }
    for l in (0..last).rev() {
        let c = cfg.channels(l);
        let p = format!("dec{l}");
        // Transposed conv weights are [in, out, k, k, k].
        let (i, fan_in) = (cfg.channels(l + 1), cfg.channels(l + 1) as f64);
        specs.push((format!("{p}.up.w"), vec![i, c, 2, 2, 2], Init::Normal((2.0 / fan_in).sqrt())));
        specs.push((format!("{p}.up.b"), vec![c], Init::Zeros));
        block(&mut specs, &mut conv, &p, 2 * c + usize::from(l == 0), c);
        if cfg.attends(l) {
            attn(&mut specs, &p, c);
        }
    }
    let c0 = cfg.channels(0);
    for head in ["head_f", "head_a"] {
        specs.push((format!("{head}.w"), vec![1, c0, 1, 1, 1], Init::Normal(0.1 / (c0 as f64).sqrt())));
        specs.push((format!("{head}.b"), vec![1], Init::Zeros));
    }
    specs
}

/// Freshly initialized parameters (He-normal convolutions, unit norm gains,
/// zero biases), deterministic in `seed`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layer_specs(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(sd) => (0..n).map(|_| sd * rng.normal()).collect(),
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        store.insert(name, &Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checks that `params` holds exactly the layers of `cfg` with the right shapes.
pub fn check_params(cfg: &NetConfig, params: &ParamStore) -> Result<()> {
    let specs = layer_specs(cfg);
    for (name, shape, _) in &specs {
        match params.get(name) {
            None => return Err(NetError::MissingParam(name.clone())),
            Some(p) if &p.shape != shape => {
                return Err(NetError::DimMismatch(format!("{name}: {:?} vs {:?}", p.shape, shape)))
            }
            Some(_) => {}
        }
    }
    if params.len() != specs.len() {
        return Err(NetError::BadConfig(format!(
            "store has {} arrays, config expects {}",
            params.len(),
            specs.len()
        )));
    }
    Ok(())
}

/// Sinusoidal features of `t` before the learned projection.
pub fn time_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NetError::OutOfRangeT(t));
    }
    let half = dim / 2;
    let omegas = (0..half).map(|k| PI * (k + 1) as f64);
    let sin = omegas.clone().map(|w| (w * t).sin());
    let cos = omegas.map(|w| (w * t).cos());
    Ok(sin.chain(cos).collect())
}

/// `relu(W φ(t) + b)` as a `[T, 1]` column.
pub fn time_embed_tape(tape: &mut Tape, p: &BoundParams, t: f64, dim: usize) -> Result<Var> {
    let phi = tape.constant(Tensor::new(vec![dim, 1], time_features(t, dim)?)?);
    let proj = tape.matmul(p.get("time.proj.w"), phi)?;
    let bias = tape.reshape(p.get("time.proj.b"), &[dim, 1])?;
    let pre = tape.add(proj, bias)?;
    Ok(tape.relu(pre)?)
}

/// The learned time embedding for fixed parameters.
pub fn time_embed(params: &ParamStore, cfg: &NetConfig, t: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let v = time_embed_tape(&mut tape, &p, t, cfg.time_embed_dim)?;
    Ok(tape.value(v).data().to_vec())
}

/// Residual single-head cross-attention of `features [C, S]` over
/// `tokens [2, D]`, with `wq [C, C]`, `wk [D, C]`, `wv [D, C]`.
pub fn cross_attention_tape(tape: &mut Tape, features: Var, tokens: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ts = tape.shape(tokens).to_vec();
    if fs.len() != 2 || ts.len() != 2 || ts[0] != 2 {
        return Err(NetError::DimMismatch(format!("features {fs:?} must be [C, S], tokens {ts:?} must be [2, D]")));
    }
    let (c, s, d) = (fs[0], fs[1], ts[1]);
    let (sq, sk, sv) = (tape.shape(wq).to_vec(), tape.shape(wk).to_vec(), tape.shape(wv).to_vec());
    if sq != [c, c] || sk != [d, c] || sv != [d, c] {
        return Err(NetError::DimMismatch(format!(
            "attention projections {sq:?}, {sk:?}, {sv:?} for C = {c}, D = {d}"
        )));
    }
    let q = tape.matmul(wq, features)?;
    let k_t = tape.matmul(tokens, wk)?;
    let raw = tape.matmul(k_t, q)?;
    let scores = tape.scale(raw, 1.0 / (c as f64).sqrt())?;
    let weights = tape.softmax(scores, 0)?;
    // Rows of X W_v are the per-token values; (X W_v)ᵀ A = Σ_j v_j a_jᵀ.
    let values = tape.matmul(tokens, wv)?;
    let mut out = features;
    for j in 0..2 {
        let row = tape.slice(values, 0, j, 1)?;
        let col = tape.reshape(row, &[c, 1])?;
        let a = tape.slice(weights, 0, j, 1)?;
        debug_assert_eq!(tape.shape(a), [1, s]);
        let term = tape.matmul(col, a)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// Value-level [`cross_attention_tape`] on the raw context tokens (no
/// position embedding).
pub fn cross_attention(features: &Tensor, ctx: &ConditionContext, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let tokens = tape.constant(Tensor::new(vec![2, ctx.dim()], ctx.tokens().to_vec())?);
    let (q, k, v) = (tape.constant(wq.clone()), tape.constant(wk.clone()), tape.constant(wv.clone()));
    let out = cross_attention_tape(&mut tape, f, tokens, q, k, v)?;
    Ok(tape.value(out).clone())
}

struct Builder<'a> {
    tape: &'a mut Tape,
    p: &'a BoundParams,
    cfg: &'a NetConfig,
    ctx: &'a ConditionContext,
    temb: Var,
}

impl Builder<'_> {
    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.p.get(&format!("{name}.w")), self.p.get(&format!("{name}.b")));
        Ok(self.tape.conv3d(x, w, Some(b), stride, pad)?)
    }

    fn block(&mut self, x: Var, prefix: &str, level: usize, attend: bool) -> Result<Var> {
        let h = self.conv(x, &format!("{prefix}.conv1"), 1, 1)?;
        let shape = self.tape.shape(h).to_vec();
        let (c, s) = (shape[0], shape[1] * shape[2] * shape[3]);
        debug_assert_eq!(c, self.cfg.channels(level));

        let tw = self.p.get(&format!("{prefix}.time.w"));
        let tb = self.p.get(&format!("{prefix}.time.b"));
        let tcol = self.tape.matmul(tw, self.temb)?;
        let tb_col = self.tape.reshape(tb, &[c, 1])?;
        let tcol = self.tape.add(tcol, tb_col)?;
        let ones = self.tape.constant(Tensor::full(&[1, s], 1.0));
        let tmap = self.tape.matmul(tcol, ones)?;
        let flat = self.tape.reshape(h, &[c, s])?;
        let h = self.tape.add(flat, tmap)?;

        let h = self.norm_relu(h, &format!("{prefix}.ln1"))?;
        let h = self.tape.reshape(h, &shape)?;
        let h = self.conv(h, &format!("{prefix}.conv2"), 1, 1)?;
        let h = self.norm_relu(h, &format!("{prefix}.ln2"))?;
        if !attend {
            return Ok(h);
        }
        let flat = self.tape.reshape(h, &[c, s])?;
        let (wq, wk, wv) = (
            self.p.get(&format!("{prefix}.attn.q")),
            self.p.get(&format!("{prefix}.attn.k")),
            self.p.get(&format!("{prefix}.attn.v")),
        );
        let raw = self.tape.constant(Tensor::new(vec![2, self.ctx.dim()], self.ctx.tokens().to_vec())?);
        let tokens = self.tape.add(raw, self.p.get(&format!("{prefix}.attn.pos")))?;
        let out = cross_attention_tape(self.tape, flat, tokens, wq, wk, wv)?;
        Ok(self.tape.reshape(out, &shape)?)
    }

    fn norm_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.p.get(&format!("{name}.g")), self.p.get(&format!("{name}.b")));
        let n = self.tape.layer_norm(x, g, b)?;
        Ok(self.tape.relu(n)?)
    }
}

/// Records the network on `tape`. `x` is `[1, D, H, W]`; returns the two
/// head outputs `(v_f, v_a)`, each `[1, D, H, W]`.
pub fn forward_tape(tape: &mut Tape, p: &BoundParams, cfg: &NetConfig, x: Var, ctx: &ConditionContext, t: f64) -> Result<(Var, Var)> {
    cfg.validate()?;
    if ctx.dim() != cfg.context_dim {
        return Err(NetError::DimMismatch(format!(
            "context dim {} vs configured {}",
            ctx.dim(),
            cfg.context_dim
        )));
    }
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[0] != 1 {
        return Err(NetError::DimMismatch(format!("input must be [1, D, H, W], got {xs:?}")));
    }
    cfg.check_dims(Dims::new(xs[3], xs[2], xs[1]))?;

    let temb = time_embed_tape(tape, p, t, cfg.time_embed_dim)?;
    let mut b = Builder { tape, p, cfg, ctx, temb };
    let last = cfg.levels - 1;

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for l in 0..cfg.levels {
        let prefix = format!("enc{l}");
        if l > 0 {
            h = b.conv(h, &format!("{prefix}.down"), 2, 0)?;
        }
        h = b.block(h, &prefix, l, l == last && cfg.attends(l))?;
        skips.push(h);
    }
    for l in (0..last).rev() {
        let prefix = format!("dec{l}");
        let (w, bias) = (p.get(&format!("{prefix}.up.w")), p.get(&format!("{prefix}.up.b")));
        let up = b.tape.conv3d_transpose(h, w, Some(bias), 2, 0)?;
        let parts: Vec<Var> = if l == 0 { vec![up, skips[0], x] } else { vec![up, skips[l]] };
        let cat = b.tape.concat(&parts, 0)?;
        h = b.block(cat, &prefix, l, cfg.attends(l))?;
    }
    let vf = b.conv(h, "head_f", 1, 0)?;
    let va = b.conv(h, "head_a", 1, 0)?;
    Ok((vf, va))
}

/// Puts a volume on the tape as a `[1, D, H, W]` constant.
pub fn volume_tensor(v: &Volume3D) -> Tensor {
    let d = v.dims();
    Tensor::new(vec![1, d.nz, d.ny, d.nx], v.to_f64()).expect("volume dims are non-zero")
}

fn values_to_volume(dims: Dims, values: &[f64]) -> Result<Volume3D> {
    Ok(Volume3D::raw(dims, values.iter().map(|&v| v as f32).collect())?)
}

/// Velocity fields `(v_f, v_a)` for fixed parameters, in `f64`.
pub fn forward_values(params: &ParamStore, cfg: &NetConfig, x: &[f64], dims: Dims, ctx: &ConditionContext, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != dims.len() {
        return Err(NetError::DimMismatch(format!("{} values for dims {:?}", x.len(), dims.as_array())));
    }
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let xv = tape.constant(Tensor::new(vec![1, dims.nz, dims.ny, dims.nx], x.to_vec())?);
    let (vf, va) = forward_tape(&mut tape, &p, cfg, xv, ctx, t)?;
    Ok((tape.value(vf).data().to_vec(), tape.value(va).data().to_vec()))
}

/// Velocity volumes `(v_f, v_a)` (raw domain).
pub fn forward(params: &ParamStore, cfg: &NetConfig, x_t: &Volume3D, ctx: &ConditionContext, t: f64) -> Result<(Volume3D, Volume3D)> {
    let dims = x_t.dims();
    let (vf, va) = forward_values(params, cfg, &x_t.to_f64(), dims, ctx, t)?;
    Ok((values_to_volume(dims, &vf)?, values_to_volume(dims, &va)?))
}

/// The head output matching `tracer`.
pub fn select_head(outputs: (Var, Var), tracer: Tracer) -> Var {
    match tracer {
        Tracer::Fdg => outputs.0,
        Tracer::Av45 => outputs.1,
    }
}
