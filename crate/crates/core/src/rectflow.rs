//! Rectified-flow training, Euler sampling, and one-step distillation.
//!
//! Training regresses the displacement `y_m - x0` from the interpolant
//! `x_t = t·y_m + (1 - t)·x0`, `t ~ U(0, 1)`, with per-sample loss
//! `λ_F·δ_F·mse_F + λ_A·δ_A·mse_A`. One `t` is drawn per sample and shared by
//! both tracer terms. Once `distill_start_epoch` epochs have completed, the
//! parameters are frozen as a teacher and the student (initialized from it)
//! is trained so that `x0 + V(x0, c, 0)` matches the teacher's `N`-step
//! Euler endpoint, for every sample and every tracer with `λ_m > 0`.
//!
//! Every epoch draws from its own stream `derive_seed(seed, EPOCH_STREAM + e)`,
//! so a state restored from a checkpoint continues exactly. The loss history
//! is evaluated after each epoch on a fixed set of monitor times (one per
//! sample), making it a deterministic function of the parameters.

use rayon::prelude::*;
use thiserror::Error;

use crate::adapters::{AdapterError, ConditionContext, Conditioner, EmbeddingProvider};
use crate::diffcore::{AdamConfig, Checkpoint, DiffError, ParamStore, Tape, Tensor};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthdata::{SamplePair, Tracer};
use crate::velocitynet::{self, forward_tape, select_head, NetConfig, NetError};
use crate::volume::{Dims, Volume3D, VolumeError};

const INIT_STREAM: u64 = 0x1717;
const MONITOR_STREAM: u64 = 0x2929;
const EPOCH_STREAM: u64 = 0x10_0000;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0} has no available target")]
    NoTargets(usize),
    #[error("invalid flow config: {0}")]
    BadConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("time {0} outside [0, 1]")]
    OutOfRangeT(f64),
    #[error("distillation requires {need} completed epochs, state has {have}")]
    NotInDistillPhase { need: usize, have: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub distill_start_epoch: usize,
    pub teacher_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Adapter alignment threshold, forwarded to the alignment stage.
    pub tau: f64,
    /// Adapter alignment penalty weight, forwarded to the alignment stage.
    pub mu: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda_f: 1.0,
            lambda_a: 1.0,
            adam: AdamConfig::default(),
            epochs: 300,
            distill_start_epoch: 250,
            teacher_steps: 50,
            batch_size: 4,
            seed: 0,
            tau: 0.5,
            mu: 10.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::BadConfig(m.to_owned()));
        if !(self.lambda_f >= 0.0 && self.lambda_a >= 0.0) || self.lambda_f + self.lambda_a == 0.0 {
            return bad("loss weights must be >= 0 and not both 0");
        }
        if self.distill_start_epoch > self.epochs {
            return bad("distill_start_epoch exceeds epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.teacher_steps == 0 {
            return bad("teacher_steps must be >= 1");
        }
        if !(self.adam.lr >= 0.0) {
            return bad("learning rate must be >= 0");
        }
        Ok(())
    }

    pub fn lambda(&self, tracer: Tracer) -> f64 {
        match tracer {
            Tracer::Fdg => self.lambda_f,
            Tracer::Av45 => self.lambda_a,
        }
    }
}

/// Voxelwise `t·x1 + (1 - t)·x0` (raw domain).
pub fn interpolate(x0: &Volume3D, x1: &Volume3D, t: f64) -> Result<Volume3D> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::OutOfRangeT(t));
    }
    x0.ensure_same_dims(x1)?;
    let values = interpolate_values(&x0.to_f64(), &x1.to_f64(), t);
    Ok(Volume3D::from_f64(x0.dims(), &values, crate::volume::ValueDomain::Raw)?)
}

fn interpolate_values(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    // Written so that t = 0 and t = 1 reproduce the endpoints exactly.
    x0.iter().zip(x1).map(|(&a, &b)| t * b + (1.0 - t) * a).collect()
}

/// One training subject: source, available targets, and a frozen context
/// per tracer.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source: Vec<f64>,
    pub targets: [Option<Vec<f64>>; 2],
    pub contexts: [ConditionContext; 2],
}

impl TrainSample {
    pub fn target(&self, tracer: Tracer) -> Option<&[f64]> {
        self.targets[tracer.index()].as_deref()
    }

    pub fn context(&self, tracer: Tracer) -> &ConditionContext {
        &self.contexts[tracer.index()]
    }
}

#[derive(Debug, Clone)]
pub struct FlowDataset {
    pub dims: Dims,
    pub samples: Vec<TrainSample>,
}

impl FlowDataset {
    pub fn new(dims: Dims, samples: Vec<TrainSample>) -> Result<Self> {
        let n = dims.len();
        for (i, s) in samples.iter().enumerate() {
            let sizes_ok = s.source.len() == n && s.targets.iter().flatten().all(|t| t.len() == n);
            if !sizes_ok {
                return Err(FlowError::DimMismatch(format!("sample {i} does not match dims {:?}", dims.as_array())));
            }
        }
        Ok(Self { dims, samples })
    }

    /// Contexts from the aligned adapters and each pair's demographics;
    /// targets are taken as available per the pair's mask.
    pub fn from_pairs<P: EmbeddingProvider>(pairs: &[SamplePair], cond: &Conditioner<P>) -> Result<Self> {
        let dims = pairs.first().ok_or(FlowError::EmptyDataset)?.source.dims();
        let samples = pairs
            .iter()
            .map(|p| {
                p.source.ensure_same_dims(&p.source)?;
                let target = |tr: Tracer| p.target(tr).filter(|_| p.mask.has(tr)).map(|v| v.to_f64());
                Ok(TrainSample {
                    source: p.source.to_f64(),
                    targets: [target(Tracer::Fdg), target(Tracer::Av45)],
                    contexts: [
                        cond.context(Tracer::Fdg, &p.demographics)?,
                        cond.context(Tracer::Av45, &p.demographics)?,
                    ],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check_trainable(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(FlowError::EmptyDataset);
        }
        if let Some(i) = self.samples.iter().position(|s| s.targets.iter().all(Option::is_none)) {
            return Err(FlowError::NoTargets(i));
        }
        Ok(())
    }
}

/// Weighted loss terms of one sample or a batch mean:
/// `f = λ_F·δ_F·mse_F`, `a = λ_A·δ_A·mse_A`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub f: f64,
    pub a: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.f + self.a
    }

    fn set(&mut self, tracer: Tracer, v: f64) {
        match tracer {
            Tracer::Fdg => self.f = v,
            Tracer::Av45 => self.a = v,
        }
    }
}

/// Batch loss and the gradient (store order) of its `total()`.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub terms: LossTerms,
    pub grads: Vec<Vec<f64>>,
}

/// What a tracer term regresses onto at time `t`.
struct Regression<'a> {
    /// Network input.
    input: Vec<f64>,
    /// Desired head output.
    target: Vec<f64>,
    ctx: &'a ConditionContext,
    t: f64,
}

fn values_tensor(dims: Dims, values: Vec<f64>) -> Result<Tensor> {
    Ok(Tensor::new(vec![1, dims.nz, dims.ny, dims.nx], values)?)
}

/// Loss terms for one sample and, when `with_grad`, their gradient.
fn regression_loss(
    params: &ParamStore,
    net: &NetConfig,
    dims: Dims,
    terms: &[(Tracer, f64, Regression<'_>)],
    with_grad: bool,
) -> Result<(LossTerms, Option<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let bound = if with_grad { params.bind(&mut tape) } else { params.bind_frozen(&mut tape) };
    let mut out = LossTerms::default();
    let mut total = None;
    for (tracer, lambda, r) in terms {
        let x = tape.constant(values_tensor(dims, r.input.clone())?);
        let heads = forward_tape(&mut tape, &bound, net, x, r.ctx, r.t)?;
        let v = select_head(heads, *tracer);
        let target = tape.constant(values_tensor(dims, r.target.clone())?);
        let diff = tape.sub(target, v)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq)?;
        let weighted = tape.scale(mse, *lambda)?;
        out.set(*tracer, tape.value(weighted).item());
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    if !with_grad {
        return Ok((out, None));
    }
    let grads = match total {
        Some(loss) => {
            tape.backward(loss)?;
            params.collect_grads(&tape, &bound)
        }
        None => params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
    };
    Ok((out, Some(grads)))
}

fn flow_terms<'a>(sample: &'a TrainSample, t: f64, cfg: &FlowConfig) -> Vec<(Tracer, f64, Regression<'a>)> {
    Tracer::ALL
        .into_iter()
        .filter_map(|tr| {
            let y = sample.target(tr)?;
            let lambda = cfg.lambda(tr);
            (lambda > 0.0).then(|| {
                let reg = Regression {
                    input: interpolate_values(&sample.source, y, t),
                    target: y.iter().zip(&sample.source).map(|(b, a)| b - a).collect(),
                    ctx: sample.context(tr),
                    t,
                };
                (tr, lambda, reg)
            })
        })
        .collect()
}

fn distill_terms<'a>(sample: &'a TrainSample, endpoints: &[Option<Vec<f64>>; 2], cfg: &FlowConfig) -> Vec<(Tracer, f64, Regression<'a>)> {
    Tracer::ALL
        .into_iter()
        .filter_map(|tr| {
            let end = endpoints[tr.index()].as_ref()?;
            let reg = Regression {
                input: sample.source.clone(),
                target: end.iter().zip(&sample.source).map(|(b, a)| b - a).collect(),
                ctx: sample.context(tr),
                t: 0.0,
            };
            Some((tr, cfg.lambda(tr), reg))
        })
        .collect()
}

/// Per-sample results reduced in batch order, so the outcome does not
/// depend on how work was scheduled.
fn reduce(results: Vec<(LossTerms, Option<Vec<Vec<f64>>>)>) -> BatchLoss {
    let n = results.len() as f64;
    let mut terms = LossTerms::default();
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for (t, g) in results {
        terms.f += t.f;
        terms.a += t.a;
        if let Some(g) = g {
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
            }
        }
    }
    terms.f /= n;
    terms.a /= n;
    let mut grads = grads.unwrap_or_default();
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x /= n));
    BatchLoss { terms, grads }
}

/// Flow-matching loss of a batch at the given per-sample times, and its
/// gradient. Missing tracers contribute exactly zero and no gradient.
pub fn flow_loss_at(batch: &[&TrainSample], ts: &[f64], params: &ParamStore, net: &NetConfig, dims: Dims, cfg: &FlowConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    if ts.len() != batch.len() {
        return Err(FlowError::DimMismatch(format!("{} times for {} samples", ts.len(), batch.len())));
    }
    if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(FlowError::OutOfRangeT(t));
    }
    let results = batch
        .par_iter()
        .zip(ts)
        .map(|(s, &t)| regression_loss(params, net, dims, &flow_terms(s, t, cfg), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(results))
}

/// [`flow_loss_at`] with one `t ~ U(0, 1)` per sample drawn from `rng`.
pub fn flow_loss(batch: &[&TrainSample], rng: &mut SplitMix64, params: &ParamStore, net: &NetConfig, dims: Dims, cfg: &FlowConfig) -> Result<BatchLoss> {
    let ts: Vec<f64> = batch.iter().map(|_| rng.next_f64()).collect();
    flow_loss_at(batch, &ts, params, net, dims, cfg)
}

/// Mean distillation loss `‖x0 + V(x0, c, 0) - endpoint‖²` and its gradient.
pub fn distill_loss(
    batch: &[(&TrainSample, &[Option<Vec<f64>>; 2])],
    params: &ParamStore,
    net: &NetConfig,
    dims: Dims,
    cfg: &FlowConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    let results = batch
        .par_iter()
        .map(|(s, ends)| regression_loss(params, net, dims, &distill_terms(s, ends, cfg), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(results))
}

/// Explicit Euler: `x ← x + V(x, c, k/n) / n` for `k = 0..n`, reading the
/// head selected by the context's tracer.
pub fn sample_euler_values(params: &ParamStore, net: &NetConfig, x0: &[f64], dims: Dims, ctx: &ConditionContext, n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(FlowError::BadConfig("n_steps must be >= 1".into()));
    }
    let h = 1.0 / n_steps as f64;
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let (vf, va) = velocitynet::forward_values(params, net, &x, dims, ctx, k as f64 * h)?;
        let v = match ctx.tracer() {
            Tracer::Fdg => vf,
            Tracer::Av45 => va,
        };
        x.iter_mut().zip(&v).for_each(|(xi, vi)| *xi += h * vi);
    }
    Ok(x)
}

pub fn sample_euler(x0: &Volume3D, ctx: &ConditionContext, params: &ParamStore, net: &NetConfig, n_steps: usize) -> Result<Volume3D> {
    let dims = x0.dims();
    let x = sample_euler_values(params, net, &x0.to_f64(), dims, ctx, n_steps)?;
    Ok(Volume3D::from_f64(dims, &x, crate::volume::ValueDomain::Raw)?)
}

/// `x0 + V(x0, c, 0)`; identical to `sample_euler(…, 1)`.
pub fn sample_onestep(x0: &Volume3D, ctx: &ConditionContext, params: &ParamStore, net: &NetConfig) -> Result<Volume3D> {
    sample_euler(x0, ctx, params, net, 1)
}

/// Both tracers from one source: `(ctx_f, ctx_a)` must select FDG and AV45.
pub fn sample_both(x0: &Volume3D, ctx_f: &ConditionContext, ctx_a: &ConditionContext, params: &ParamStore, net: &NetConfig, n_steps: usize) -> Result<(Volume3D, Volume3D)> {
    if ctx_f.tracer() != Tracer::Fdg || ctx_a.tracer() != Tracer::Av45 {
        return Err(FlowError::BadConfig("contexts must be (FDG, AV45)".into()));
    }
    let (f, a) = rayon::join(
        || sample_euler(x0, ctx_f, params, net, n_steps),
        || sample_euler(x0, ctx_a, params, net, n_steps),
    );
    Ok((f?, a?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Flow,
    Distill,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Flow => "flow",
            Phase::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub total: f64,
    pub loss_f: f64,
    pub loss_a: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: NetConfig,
    pub params: ParamStore,
    /// Frozen copy taken when distillation starts.
    pub teacher: Option<ParamStore>,
    /// Completed epochs.
    pub epoch: usize,
    pub distill_start: usize,
    /// Root of every per-epoch random stream.
    pub seed: u64,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(net: NetConfig, cfg: &FlowConfig) -> Result<Self> {
        let params = velocitynet::init_params(&net, derive_seed(cfg.seed, INIT_STREAM))?;
        Ok(Self {
            net,
            params,
            teacher: None,
            epoch: 0,
            distill_start: cfg.distill_start_epoch,
            seed: cfg.seed,
            history: Vec::new(),
        })
    }

    /// Phase of the next epoch to run.
    pub fn phase(&self) -> Phase {
        if self.epoch >= self.distill_start {
            Phase::Distill
        } else {
            Phase::Flow
        }
    }

    /// `CKPT1` entries: `net/…` values with Adam state, `teacher/…` values,
    /// and exact `meta.*` integers and history.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.merge_prefixed("net/", &self.params.to_checkpoint_with_optimizer());
        if let Some(t) = &self.teacher {
            c.merge_prefixed("teacher/", &t.to_checkpoint());
        }
        c.insert_u64s(
            "meta.state",
            &[self.epoch as u64, self.distill_start as u64, self.seed, u64::from(self.teacher.is_some())],
        );
        let attn_mask = self.net.attn_levels.iter().fold(0u64, |m, &l| m | (1 << l));
        c.insert_u64s(
            "meta.net",
            &[
                self.net.levels as u64,
                self.net.base_channels as u64,
                self.net.time_embed_dim as u64,
                self.net.context_dim as u64,
                self.net.heads as u64,
                attn_mask,
            ],
        );
        let flat: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.total, r.loss_f, r.loss_a])
            .collect();
        c.insert_f64s("meta.history", &flat);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let st = c.get_u64s("meta.state")?;
        let nt = c.get_u64s("meta.net")?;
        if st.len() != 4 || nt.len() != 6 {
            return Err(FlowError::Checkpoint("malformed meta entries".into()));
        }
        let net = NetConfig {
            levels: nt[0] as usize,
            base_channels: nt[1] as usize,
            time_embed_dim: nt[2] as usize,
            context_dim: nt[3] as usize,
            heads: nt[4] as usize,
            attn_levels: (0..64).filter(|l| nt[5] >> l & 1 == 1).collect(),
        };
        net.validate()?;
        let params = ParamStore::from_checkpoint(&c.extract_prefixed("net/"), "");
        velocitynet::check_params(&net, &params)?;
        let teacher = if st[3] == 1 {
            let t = ParamStore::from_checkpoint(&c.extract_prefixed("teacher/"), "");
            velocitynet::check_params(&net, &t)?;
            Some(t)
        } else {
            None
        };
        let distill_start = st[1] as usize;
        let flat = c.get_f64s("meta.history")?;
        if flat.len() % 4 != 0 {
            return Err(FlowError::Checkpoint("history length is not a multiple of 4".into()));
        }
        let history = flat
            .chunks(4)
            .map(|r| {
                let epoch = r[0] as usize;
                HistoryRow {
                    epoch,
                    total: r[1],
                    loss_f: r[2],
                    loss_a: r[3],
                    phase: if epoch >= distill_start { Phase::Distill } else { Phase::Flow },
                }
            })
            .collect();
        Ok(Self {
            net,
            params,
            teacher,
            epoch: st[0] as usize,
            distill_start,
            seed: st[2],
            history,
        })
    }
}

/// Loss-history TSV: header then `epoch loss_total loss_f loss_a phase`.
pub fn history_tsv(history: &[HistoryRow]) -> String {
    let mut s = String::from("epoch\tloss_total\tloss_f\tloss_a\tphase\n");
    for r in history {
        s.push_str(&format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\n",
            r.epoch,
            r.total,
            r.loss_f,
            r.loss_a,
            r.phase.name()
        ));
    }
    s
}

fn epoch_rng(seed: u64, epoch: usize) -> SplitMix64 {
    SplitMix64::new(derive_seed(seed, EPOCH_STREAM + epoch as u64))
}

/// Fixed per-sample evaluation times for the loss history.
fn monitor_times(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(derive_seed(seed, MONITOR_STREAM));
    (0..n).map(|_| rng.next_f64()).collect()
}

/// Teacher endpoints for every sample and every tracer with `λ_m > 0`.
pub fn teacher_endpoints(teacher: &ParamStore, net: &NetConfig, data: &FlowDataset, cfg: &FlowConfig) -> Result<Vec<[Option<Vec<f64>>; 2]>> {
    data.samples
        .par_iter()
        .map(|s| {
            let end = |tr: Tracer| -> Result<Option<Vec<f64>>> {
                if cfg.lambda(tr) == 0.0 {
                    return Ok(None);
                }
                sample_euler_values(teacher, net, &s.source, data.dims, s.context(tr), cfg.teacher_steps).map(Some)
            };
            Ok([end(Tracer::Fdg)?, end(Tracer::Av45)?])
        })
        .collect()
}

fn mean_terms(results: Vec<LossTerms>) -> LossTerms {
    let n = results.len() as f64;
    let (f, a) = results.iter().fold((0.0, 0.0), |(f, a), t| (f + t.f, a + t.a));
    LossTerms { f: f / n, a: a / n }
}

/// Flow loss over the whole dataset at the monitor times (no gradient).
pub fn monitor_flow_loss(params: &ParamStore, net: &NetConfig, data: &FlowDataset, cfg: &FlowConfig, seed: u64) -> Result<LossTerms> {
    let ts = monitor_times(seed, data.len());
    let results = data
        .samples
        .par_iter()
        .zip(&ts)
        .map(|(s, &t)| Ok(regression_loss(params, net, data.dims, &flow_terms(s, t, cfg), false)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_terms(results))
}

/// Distillation loss over the whole dataset (no gradient).
pub fn monitor_distill_loss(params: &ParamStore, net: &NetConfig, data: &FlowDataset, endpoints: &[[Option<Vec<f64>>; 2]], cfg: &FlowConfig) -> Result<LossTerms> {
    let results = data
        .samples
        .par_iter()
        .zip(endpoints)
        .map(|(s, e)| Ok(regression_loss(params, net, data.dims, &distill_terms(s, e, cfg), false)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_terms(results))
}

fn apply(params: &mut ParamStore, loss: BatchLoss, adam: &AdamConfig) -> Result<()> {
    params.zero_grad();
    params.accumulate_grads(&loss.grads);
    params.adam_step(adam)?;
    params.clear_grads();
    Ok(())
}

fn flow_epoch(state: &mut TrainState, data: &FlowDataset, cfg: &FlowConfig) -> Result<()> {
    let mut rng = epoch_rng(state.seed, state.epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let loss = flow_loss(&batch, &mut rng, &state.params, &state.net, data.dims, cfg)?;
        apply(&mut state.params, loss, &cfg.adam)?;
    }
    let terms = monitor_flow_loss(&state.params, &state.net, data, cfg, state.seed)?;
    state.history.push(HistoryRow {
        epoch: state.epoch,
        total: terms.total(),
        loss_f: terms.f,
        loss_a: terms.a,
        phase: Phase::Flow,
    });
    state.epoch += 1;
    Ok(())
}

fn distill_epoch(state: &mut TrainState, data: &FlowDataset, endpoints: &[[Option<Vec<f64>>; 2]], cfg: &FlowConfig) -> Result<()> {
    let mut rng = epoch_rng(state.seed, state.epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<_> = chunk.iter().map(|&i| (&data.samples[i], &endpoints[i])).collect();
        let loss = distill_loss(&batch, &state.params, &state.net, data.dims, cfg)?;
        apply(&mut state.params, loss, &cfg.adam)?;
    }
    let terms = monitor_distill_loss(&state.params, &state.net, data, endpoints, cfg)?;
    state.history.push(HistoryRow {
        epoch: state.epoch,
        total: terms.total(),
        loss_f: terms.f,
        loss_a: terms.a,
        phase: Phase::Distill,
    });
    state.epoch += 1;
    Ok(())
}

/// Runs flow epochs up to `min(until, distill_start)`.
fn run_flow(state: &mut TrainState, data: &FlowDataset, cfg: &FlowConfig, until: usize) -> Result<()> {
    while state.epoch < until.min(state.distill_start) {
        flow_epoch(state, data, cfg)?;
    }
    Ok(())
}

/// Runs distillation epochs up to `until`, freezing the teacher first if
/// this is the transition epoch.
fn run_distill(state: &mut TrainState, data: &FlowDataset, cfg: &FlowConfig, until: usize) -> Result<()> {
    if state.epoch >= until {
        return Ok(());
    }
    let teacher = match &state.teacher {
        Some(t) => t.clone(),
        None => {
            // Values only: the teacher carries no optimizer state.
            let t = ParamStore::from_checkpoint(&state.params.to_checkpoint(), "");
            state.teacher = Some(t.clone());
            t
        }
    };
    let endpoints = teacher_endpoints(&teacher, &state.net, data, cfg)?;
    while state.epoch < until {
        distill_epoch(state, data, &endpoints, cfg)?;
    }
    Ok(())
}

/// Continues `state` until `until` completed epochs (flow, then
/// distillation once `distill_start` epochs are done).
pub fn train_until(mut state: TrainState, data: &FlowDataset, cfg: &FlowConfig, until: usize) -> Result<TrainState> {
    cfg.validate()?;
    data.check_trainable()?;
    if state.distill_start != cfg.distill_start_epoch {
        return Err(FlowError::BadConfig(format!(
            "state was started with distill_start_epoch {}, config says {}",
            state.distill_start, cfg.distill_start_epoch
        )));
    }
    run_flow(&mut state, data, cfg, until)?;
    if state.epoch >= state.distill_start {
        run_distill(&mut state, data, cfg, until)?;
    }
    Ok(state)
}

/// Fresh parameters trained for `cfg.epochs` epochs.
pub fn train(data: &FlowDataset, net: &NetConfig, cfg: &FlowConfig) -> Result<TrainState> {
    cfg.validate()?;
    let state = TrainState::new(net.clone(), cfg)?;
    train_until(state, data, cfg, cfg.epochs)
}

/// Distillation phase on an already flow-trained state: freezes the
/// teacher (student starts equal to it) and runs until `cfg.epochs`.
pub fn distill(state: TrainState, data: &FlowDataset, cfg: &FlowConfig) -> Result<TrainState> {
    if state.epoch < cfg.distill_start_epoch {
        return Err(FlowError::NotInDistillPhase {
            need: cfg.distill_start_epoch,
            have: state.epoch,
        });
    }
    train_until(state, data, cfg, cfg.epochs)
}
