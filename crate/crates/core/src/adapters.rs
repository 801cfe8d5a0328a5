//! Modality guidance vectors: embedding providers, the constrained affine
//! adapter alignment, and construction of the two-token conditioning context.
//!
//! Alignment minimizes
//!
//! ```text
//! L = (1 - sim(Aᶠ(c_f), ē_f)) + (1 - sim(Aᵃ(c_a), ē_a))
//!     + μ · max(0, τ - sim(Aᶠ(c_f), Aᵃ(c_a)))²
//! ```
//!
//! with `A(c) = scale · c + bias`, by block gradient descent (one block per
//! adapter) with Armijo backtracking, so the loss history never increases.
//! Each block's sufficient-decrease test only looks at the terms that block
//! can change; with `μ = 0` the two fits are therefore exactly independent.

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use crate::diffcore::{Checkpoint, DiffError, Tape, Tensor, Var};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthdata::{Demographics, Tracer};
use crate::volume::Volume3D;

/// Residual constraint violation tolerated before a warning is raised.
pub const CONSTRAINT_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("threshold tau = {0} outside [0, 1]")]
    BadTau(f64),
    #[error("no volumes supplied for the mean image embedding")]
    EmptySampleSet,
    #[error("checkpoint is missing adapter entry {0:?}")]
    MissingEntry(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| k * v).collect())
    }

    fn quantized(&self) -> Self {
        Self(self.0.iter().map(|&v| v as f32 as f64).collect())
    }
}

fn ensure_same_dim(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(AdapterError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

pub fn cosine_sim(u: &Embedding, v: &Embedding) -> Result<f64> {
    ensure_same_dim(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(AdapterError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `x ↦ scale · x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAdapter {
    pub scale: f64,
    pub bias: Embedding,
}

impl AffineAdapter {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: 1.0,
            bias: Embedding::zeros(dim),
        }
    }

    pub fn apply(&self, c: &Embedding) -> Result<Embedding> {
        ensure_same_dim(c, &self.bias)?;
        Embedding::new(c.0.iter().zip(&self.bias.0).map(|(x, b)| self.scale * x + b).collect())
    }

    fn quantized(&self) -> Self {
        Self {
            scale: self.scale as f32 as f64,
            bias: self.bias.quantized(),
        }
    }
}

/// Source of text and image embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    /// Text embedding of the tracer description (`c_f`, `c_a`).
    fn text_embedding(&self, tracer: Tracer) -> Embedding;
    /// Text embedding of a subject's demographic/clinical profile.
    fn demographic_embedding(&self, demo: &Demographics) -> Embedding;
    /// Image-encoder features of one volume of the given tracer.
    fn image_features(&self, tracer: Tracer, volume: &Volume3D) -> Embedding;
}

/// Deterministic stand-in for a pretrained vision-language encoder.
///
/// Text embeddings are fixed random unit directions per tracer. The
/// demographic embedding is `cos(πσ/2)·u + sin(πσ/2)·w + 0.05·((age-72.5)/12.5)·z`
/// for orthonormal `u, w, z`, an injective smooth function of severity `σ`.
/// Image features are a tracer-specific unit direction plus a small seeded
/// projection of four intensity statistics (mean, std, 90th percentile,
/// fraction above 0.5).
#[derive(Debug, Clone)]
pub struct SyntheticEmbeddingProvider {
    seed: u64,
    dim: usize,
    text: [Vec<f64>; 2],
    image_base: [Vec<f64>; 2],
    image_proj: Vec<f64>,
    demo_basis: [Vec<f64>; 3],
}

fn unit_normal(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Gram–Schmidt on three random directions.
fn orthonormal_triple(rng: &mut SplitMix64, dim: usize) -> [Vec<f64>; 3] {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 3 {
        let mut v = unit_normal(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    [basis[0].clone(), basis[1].clone(), basis[2].clone()]
}

impl SyntheticEmbeddingProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 3, "synthetic provider needs dim >= 3 for its demographic basis");
        let mut rng = SplitMix64::new(derive_seed(seed, 0xE1B));
        let text = [unit_normal(&mut rng, dim), unit_normal(&mut rng, dim)];
        let image_base = [unit_normal(&mut rng, dim), unit_normal(&mut rng, dim)];
        let image_proj = (0..dim * 4).map(|_| rng.normal() / (dim as f64).sqrt()).collect();
        let demo_basis = orthonormal_triple(&mut rng, dim);
        Self {
            seed,
            dim,
            text,
            image_base,
            image_proj,
            demo_basis,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn intensity_stats(volume: &Volume3D) -> [f64; 4] {
    let mut v: Vec<f64> = volume.to_f64();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let above = v.iter().filter(|&&x| x > 0.5).count() as f64 / n;
    v.sort_by(f64::total_cmp);
    let p90 = v[((v.len() - 1) as f64 * 0.9).round() as usize];
    [mean, std, p90, above]
}

impl EmbeddingProvider for SyntheticEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embedding(&self, tracer: Tracer) -> Embedding {
        Embedding(self.text[tracer.index()].clone())
    }

    fn demographic_embedding(&self, demo: &Demographics) -> Embedding {
        let angle = FRAC_PI_2 * demo.severity;
        let (c, s) = (angle.cos(), angle.sin());
        let age = 0.05 * (demo.age - 72.5) / 12.5;
        let [u, w, z] = &self.demo_basis;
        Embedding((0..self.dim).map(|i| c * u[i] + s * w[i] + age * z[i]).collect())
    }

    fn image_features(&self, tracer: Tracer, volume: &Volume3D) -> Embedding {
        let stats = intensity_stats(volume);
        let base = &self.image_base[tracer.index()];
        Embedding(
            (0..self.dim)
                .map(|i| base[i] + 0.1 * (0..4).map(|k| self.image_proj[i * 4 + k] * stats[k]).sum::<f64>())
                .collect(),
        )
    }
}

/// Mean image-feature vector of one tracer over a declared sample set.
pub fn mean_image_embedding<'a>(
    provider: &dyn EmbeddingProvider,
    tracer: Tracer,
    volumes: impl IntoIterator<Item = &'a Volume3D>,
) -> Result<Embedding> {
    let mut acc = vec![0.0; provider.dim()];
    let mut n = 0usize;
    for v in volumes {
        for (a, f) in acc.iter_mut().zip(provider.image_features(tracer, v).values()) {
            *a += f;
        }
        n += 1;
    }
    if n == 0 {
        return Err(AdapterError::EmptySampleSet);
    }
    Embedding::new(acc.into_iter().map(|a| a / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub tau: f64,
    pub mu: f64,
    pub steps: usize,
    /// Initial trial step of the backtracking line search.
    pub lr: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            mu: 10.0,
            steps: 500,
            lr: 0.1,
        }
    }
}

/// Frozen inputs of one alignment problem.
#[derive(Debug, Clone)]
pub struct AlignProblem {
    pub c_f: Embedding,
    pub c_a: Embedding,
    pub mean_f: Embedding,
    pub mean_a: Embedding,
}

/// Loss decomposition at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTerms {
    /// `1 - sim(Aᶠ(c_f), ē_f)`.
    pub align_f: f64,
    /// `1 - sim(Aᵃ(c_a), ē_a)`.
    pub align_a: f64,
    /// `sim(Aᶠ(c_f), Aᵃ(c_a))`.
    pub cross_sim: f64,
    /// `μ · max(0, τ - cross_sim)²`.
    pub penalty: f64,
}

impl AlignTerms {
    pub fn total(&self) -> f64 {
        self.align_f + self.align_a + self.penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintInfeasibleWarning {
    pub tau: f64,
    pub cross_sim: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub adapter_f: AffineAdapter,
    pub adapter_a: AffineAdapter,
    /// Total loss after every step (entry 0 is the initial point).
    pub history: Vec<f64>,
    pub terms: AlignTerms,
    /// `max(0, τ - sim)` at the returned point.
    pub constraint_residual: f64,
    pub warning: Option<ConstraintInfeasibleWarning>,
}

pub fn alignment_terms(problem: &AlignProblem, f: &AffineAdapter, a: &AffineAdapter, cfg: &AlignConfig) -> Result<AlignTerms> {
    let gf = f.apply(&problem.c_f)?;
    let ga = a.apply(&problem.c_a)?;
    let cross_sim = cosine_sim(&gf, &ga)?;
    let hinge = (cfg.tau - cross_sim).max(0.0);
    Ok(AlignTerms {
        align_f: 1.0 - cosine_sim(&gf, &problem.mean_f)?,
        align_a: 1.0 - cosine_sim(&ga, &problem.mean_a)?,
        cross_sim,
        penalty: cfg.mu * hinge * hinge,
    })
}

fn tape_cosine(t: &mut Tape, u: Var, v: Var) -> crate::diffcore::Result<Var> {
    let uv = t.mul(u, v)?;
    let dot = t.sum(uv)?;
    let uu = t.mul(u, u)?;
    let nu = t.sum(uu)?;
    let vv = t.mul(v, v)?;
    let nv = t.sum(vv)?;
    let prod = t.mul(nu, nv)?;
    let denom = t.sqrt(prod)?;
    t.div(dot, denom)
}

/// Gradients `(d scale_f, d bias_f, d scale_a, d bias_a)` of the full loss.
fn loss_gradients(
    problem: &AlignProblem,
    f: &AffineAdapter,
    a: &AffineAdapter,
    cfg: &AlignConfig,
) -> Result<(f64, Vec<f64>, f64, Vec<f64>)> {
    let mut t = Tape::new();
    let sf = t.leaf(Tensor::scalar(f.scale), true);
    let bf = t.leaf(Tensor::vector(f.bias.0.clone()), true);
    let sa = t.leaf(Tensor::scalar(a.scale), true);
    let ba = t.leaf(Tensor::vector(a.bias.0.clone()), true);
    let cf = t.constant(Tensor::vector(problem.c_f.0.clone()));
    let ca = t.constant(Tensor::vector(problem.c_a.0.clone()));
    let mf = t.constant(Tensor::vector(problem.mean_f.0.clone()));
    let ma = t.constant(Tensor::vector(problem.mean_a.0.clone()));
    let one = t.constant(Tensor::scalar(1.0));
    let tau = t.constant(Tensor::scalar(cfg.tau));

    let scaled_f = t.mul(sf, cf)?;
    let gf = t.add(scaled_f, bf)?;
    let scaled_a = t.mul(sa, ca)?;
    let ga = t.add(scaled_a, ba)?;
    let sim_f = tape_cosine(&mut t, gf, mf)?;
    let sim_a = tape_cosine(&mut t, ga, ma)?;
    let cross = tape_cosine(&mut t, gf, ga)?;
    let term_f = t.sub(one, sim_f)?;
    let term_a = t.sub(one, sim_a)?;
    let gap = t.sub(tau, cross)?;
    let hinge = t.relu(gap)?;
    let sq = t.mul(hinge, hinge)?;
    let penalty = t.scale(sq, cfg.mu)?;
    let partial = t.add(term_f, term_a)?;
    let loss = t.add(partial, penalty)?;
    t.backward(loss)?;
    Ok((
        t.grad_or_zero(sf)[0],
        t.grad_or_zero(bf),
        t.grad_or_zero(sa)[0],
        t.grad_or_zero(ba),
    ))
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// One Armijo-backtracked gradient step on a single adapter. `relevant`
/// evaluates the loss terms this adapter influences. Returns the new
/// adapter and the accepted step (0 when no decrease was found).
fn block_step(
    adapter: &AffineAdapter,
    g_scale: f64,
    g_bias: &[f64],
    trial: f64,
    relevant: impl Fn(&AffineAdapter) -> Result<f64>,
) -> Result<(AffineAdapter, f64)> {
    let g2 = g_scale * g_scale + g_bias.iter().map(|g| g * g).sum::<f64>();
    if g2 == 0.0 {
        return Ok((adapter.clone(), 0.0));
    }
    let current = relevant(adapter)?;
    let mut step = trial;
    for _ in 0..MAX_HALVINGS {
        let candidate = AffineAdapter {
            scale: adapter.scale - step * g_scale,
            bias: Embedding(adapter.bias.0.iter().zip(g_bias).map(|(b, g)| b - step * g).collect()),
        };
        // Degenerate candidates (zero vectors) are treated as non-decreasing.
        if let Ok(value) = relevant(&candidate) {
            if value <= current - ARMIJO_C * step * g2 {
                return Ok((candidate, step));
            }
        }
        step *= 0.5;
    }
    Ok((adapter.clone(), 0.0))
}

pub fn align_adapters(problem: &AlignProblem, cfg: &AlignConfig) -> Result<AlignmentOutcome> {
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(AdapterError::BadTau(cfg.tau));
    }
    let dim = problem.c_f.dim();
    for e in [&problem.c_a, &problem.mean_f, &problem.mean_a] {
        ensure_same_dim(&problem.c_f, e)?;
    }
    for e in [&problem.c_f, &problem.c_a, &problem.mean_f, &problem.mean_a] {
        if e.norm() == 0.0 {
            return Err(AdapterError::ZeroVector);
        }
    }

    let mut f = AffineAdapter::identity(dim);
    let mut a = AffineAdapter::identity(dim);
    let mut history = vec![alignment_terms(problem, &f, &a, cfg)?.total()];
    let (mut trial_f, mut trial_a) = (cfg.lr, cfg.lr);
    for _ in 0..cfg.steps {
        let (gsf, gbf, _, _) = loss_gradients(problem, &f, &a, cfg)?;
        let (next_f, step_f) = block_step(&f, gsf, &gbf, trial_f, |cand| {
            let t = alignment_terms(problem, cand, &a, cfg)?;
            Ok(t.align_f + t.penalty)
        })?;
        f = next_f;
        trial_f = if step_f > 0.0 { 2.0 * step_f } else { trial_f };

        let (_, _, gsa, gba) = loss_gradients(problem, &f, &a, cfg)?;
        let (next_a, step_a) = block_step(&a, gsa, &gba, trial_a, |cand| {
            let t = alignment_terms(problem, &f, cand, cfg)?;
            Ok(t.align_a + t.penalty)
        })?;
        a = next_a;
        trial_a = if step_a > 0.0 { 2.0 * step_a } else { trial_a };

        history.push(alignment_terms(problem, &f, &a, cfg)?.total());
    }

    let adapter_f = f.quantized();
    let adapter_a = a.quantized();
    let terms = alignment_terms(problem, &adapter_f, &adapter_a, cfg)?;
    let constraint_residual = (cfg.tau - terms.cross_sim).max(0.0);
    let warning = (constraint_residual > CONSTRAINT_TOL).then(|| ConstraintInfeasibleWarning {
        tau: cfg.tau,
        cross_sim: terms.cross_sim,
        residual: constraint_residual,
    });
    Ok(AlignmentOutcome {
        adapter_f,
        adapter_a,
        history,
        terms,
        constraint_residual,
        warning,
    })
}

/// The aligned problem for a provider: tracer text embeddings against the
/// mean image features of the supplied target volumes.
pub fn problem_from_provider<'a>(
    provider: &dyn EmbeddingProvider,
    targets_f: impl IntoIterator<Item = &'a Volume3D>,
    targets_a: impl IntoIterator<Item = &'a Volume3D>,
) -> Result<AlignProblem> {
    Ok(AlignProblem {
        c_f: provider.text_embedding(Tracer::Fdg),
        c_a: provider.text_embedding(Tracer::Av45),
        mean_f: mean_image_embedding(provider, Tracer::Fdg, targets_f)?,
        mean_a: mean_image_embedding(provider, Tracer::Av45, targets_a)?,
    })
}

/// Two conditioning tokens: row 0 the adapted modality embedding, row 1 the
/// subject embedding. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionContext {
    tokens: Vec<f64>,
    dim: usize,
    tracer: Tracer,
}

impl ConditionContext {
    pub fn from_rows(modality: &Embedding, demographic: &Embedding, tracer: Tracer) -> Result<Self> {
        ensure_same_dim(modality, demographic)?;
        let mut tokens = modality.0.clone();
        tokens.extend_from_slice(&demographic.0);
        Ok(Self {
            tokens,
            dim: modality.dim(),
            tracer,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The tracer whose adapter produced row 0; selects the output head.
    pub fn tracer(&self) -> Tracer {
        self.tracer
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `2 × dim` token matrix.
    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    /// Same context with the two rows exchanged.
    pub fn swapped(&self) -> Self {
        let mut tokens = self.row(1).to_vec();
        tokens.extend_from_slice(self.row(0));
        Self { tokens, ..self.clone() }
    }
}

pub fn build_context(adapter: &AffineAdapter, tracer: Tracer, c_m: &Embedding, c_demo: &Embedding) -> Result<ConditionContext> {
    let guidance = adapter.apply(c_m)?;
    ConditionContext::from_rows(&guidance, c_demo, tracer)
}

/// Aligned adapters plus the provider, ready to condition any subject.
#[derive(Debug, Clone)]
pub struct Conditioner<P> {
    pub provider: P,
    pub adapter_f: AffineAdapter,
    pub adapter_a: AffineAdapter,
}

impl<P: EmbeddingProvider> Conditioner<P> {
    pub fn adapter(&self, tracer: Tracer) -> &AffineAdapter {
        match tracer {
            Tracer::Fdg => &self.adapter_f,
            Tracer::Av45 => &self.adapter_a,
        }
    }

    pub fn context(&self, tracer: Tracer, demo: &Demographics) -> Result<ConditionContext> {
        build_context(
            self.adapter(tracer),
            tracer,
            &self.provider.text_embedding(tracer),
            &self.provider.demographic_embedding(demo),
        )
    }
}

pub fn adapters_to_checkpoint(f: &AffineAdapter, a: &AffineAdapter) -> Checkpoint {
    let mut c = Checkpoint::default();
    for (tag, ad) in [("f", f), ("a", a)] {
        c.insert(format!("adapter.{tag}.scale"), vec![1], vec![ad.scale as f32]);
        c.insert(
            format!("adapter.{tag}.bias"),
            vec![ad.bias.dim()],
            ad.bias.0.iter().map(|&v| v as f32).collect(),
        );
    }
    c
}

pub fn adapters_from_checkpoint(c: &Checkpoint) -> Result<(AffineAdapter, AffineAdapter)> {
    let read = |tag: &str| -> Result<AffineAdapter> {
        let key = |part: &str| format!("adapter.{tag}.{part}");
        let (_, scale) = c.get(&key("scale")).ok_or_else(|| AdapterError::MissingEntry(key("scale")))?;
        let (_, bias) = c.get(&key("bias")).ok_or_else(|| AdapterError::MissingEntry(key("bias")))?;
        Ok(AffineAdapter {
            scale: scale[0] as f64,
            bias: Embedding::new(bias.iter().map(|&v| v as f64).collect())?,
        })
    };
    Ok((read("f")?, read("a")?))
}
