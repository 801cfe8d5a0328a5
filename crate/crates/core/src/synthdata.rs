//! Procedural paired phantoms with known, severity-dependent transfer
//! functions. The generator stands in for real paired acquisitions: the
//! source volume is a sum of Gaussian blobs, and the two targets are
//! deterministic functions of `(source, severity)` exported here so tests
//! can evaluate them directly.
//!
//! Transfer pair (`s` is the unit-normalized source, `σ` the severity):
//!
//! ```text
//! oracle_f(s, σ) = minmax((1 - 0.5σ)·s + 0.2σ·box3(s))
//! oracle_a(s, σ) = minmax(s^(1+σ))
//! ```
//!
//! `box3` is the 3×3×3 mean over the in-bounds neighbours of each voxel.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{minmax_normalize_values, Dims, LabelMap3D, ValueDomain, Volume3D, VolumeError};

/// Minimum edge length accepted by the generator.
pub const MIN_EDGE: usize = 8;
/// Source intensity below which voxels are background in label maps.
pub const BACKGROUND_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("phantom dims {0} too small: every axis must be at least {MIN_EDGE}")]
    BadDims(Dims),
    #[error("need at least one blob")]
    NoBlobs,
    #[error("label maps need at least 2 regions, got {0}")]
    TooFewRegions(usize),
    #[error("severity {0} outside [0, 1]")]
    BadSeverity(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// The two target modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tracer {
    /// Metabolic tracer ("f" in tags and file names).
    Fdg,
    /// Amyloid tracer ("a").
    Av45,
}

impl Tracer {
    pub const ALL: [Tracer; 2] = [Tracer::Fdg, Tracer::Av45];

    pub fn tag(self) -> &'static str {
        match self {
            Tracer::Fdg => "f",
            Tracer::Av45 => "a",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "f" | "fdg" | "F" => Some(Tracer::Fdg),
            "a" | "av45" | "A" => Some(Tracer::Av45),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Tracer::Fdg => 0,
            Tracer::Av45 => 1,
        }
    }
}

/// Availability gate `(δ_F, δ_A)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub f: bool,
    pub a: bool,
}

impl ModalityMask {
    pub const BOTH: ModalityMask = ModalityMask { f: true, a: true };
    pub const F_ONLY: ModalityMask = ModalityMask { f: true, a: false };
    pub const A_ONLY: ModalityMask = ModalityMask { f: false, a: true };
    pub const NONE: ModalityMask = ModalityMask { f: false, a: false };

    pub fn has(self, tracer: Tracer) -> bool {
        match tracer {
            Tracer::Fdg => self.f,
            Tracer::Av45 => self.a,
        }
    }

    pub fn any(self) -> bool {
        self.f || self.a
    }
}

/// How blob parameters are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anatomy {
    /// Blob layout drawn from the sample seed alone.
    Independent,
    /// Blob layout drawn from `template_seed`, then perturbed per sample by
    /// relative jitter of size `jitter` (cohorts sharing one anatomy).
    Template { template_seed: u64, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: Dims,
    pub n_blobs: usize,
    pub severity: f64,
    pub mask: ModalityMask,
    pub anatomy: Anatomy,
}

impl PhantomSpec {
    pub fn new(seed: u64, dims: Dims) -> Self {
        Self {
            seed,
            dims,
            n_blobs: 4,
            severity: 0.0,
            mask: ModalityMask::BOTH,
            anatomy: Anatomy::Independent,
        }
    }

    pub fn with_severity(mut self, severity: f64) -> Self {
        self.severity = severity;
        self
    }

    pub fn with_mask(mut self, mask: ModalityMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_blobs(mut self, n_blobs: usize) -> Self {
        self.n_blobs = n_blobs;
        self
    }

    pub fn with_anatomy(mut self, anatomy: Anatomy) -> Self {
        self.anatomy = anatomy;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dims.as_array().iter().any(|&d| d < MIN_EDGE) {
            return Err(SynthError::BadDims(self.dims));
        }
        if self.n_blobs == 0 {
            return Err(SynthError::NoBlobs);
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(SynthError::BadSeverity(self.severity));
        }
        Ok(())
    }
}

/// Subject descriptors behind the demographic conditioning token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demographics {
    pub severity: f64,
    /// Years; drawn from the sample seed in `[60, 85)`.
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub seed: u64,
    pub source: Volume3D,
    pub target_f: Option<Volume3D>,
    pub target_a: Option<Volume3D>,
    pub demographics: Demographics,
    pub mask: ModalityMask,
}

impl SamplePair {
    pub fn target(&self, tracer: Tracer) -> Option<&Volume3D> {
        match tracer {
            Tracer::Fdg => self.target_f.as_ref(),
            Tracer::Av45 => self.target_a.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    width: f64,
    amplitude: f64,
}

fn draw_blobs(rng: &mut SplitMix64, dims: Dims, n: usize) -> Vec<Blob> {
    let extent = dims.as_array();
    let min_edge = *extent.iter().min().unwrap() as f64;
    (0..n)
        .map(|_| {
            let center = [0, 1, 2].map(|a| rng.uniform(0.2, 0.8) * (extent[a] - 1) as f64);
            Blob {
                center,
                width: rng.uniform(0.12, 0.3) * min_edge,
                amplitude: rng.uniform(0.4, 1.0),
            }
        })
        .collect()
}

fn blobs_for(spec: &PhantomSpec) -> Vec<Blob> {
    match spec.anatomy {
        Anatomy::Independent => {
            let mut rng = SplitMix64::new(derive_seed(spec.seed, 1));
            draw_blobs(&mut rng, spec.dims, spec.n_blobs)
        }
        Anatomy::Template { template_seed, jitter } => {
            let mut base = SplitMix64::new(derive_seed(template_seed, 1));
            let blobs = draw_blobs(&mut base, spec.dims, spec.n_blobs);
            let mut rng = SplitMix64::new(derive_seed(spec.seed, 2));
            let min_edge = *spec.dims.as_array().iter().min().unwrap() as f64;
            blobs
                .into_iter()
                .map(|b| Blob {
                    center: b.center.map(|c| c + jitter * min_edge * rng.normal()),
                    width: b.width * (1.0 + 0.5 * jitter * rng.normal()).max(0.5),
                    amplitude: b.amplitude * (1.0 + jitter * rng.normal()).max(0.2),
                })
                .collect()
        }
    }
}

fn render(dims: Dims, blobs: &[Blob]) -> Vec<f64> {
    let mut out = vec![0.0; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let p = [x as f64, y as f64, z as f64];
                let mut acc = 0.0;
                for b in blobs {
                    let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                    acc += b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp();
                }
                out[dims.index(x, y, z)] = acc;
            }
        }
    }
    out
}

/// The unit-normalized blob source for `spec` (ignores severity and mask).
pub fn generate_source(spec: &PhantomSpec) -> Result<Volume3D> {
    spec.validate()?;
    let values = minmax_normalize_values(&render(spec.dims, &blobs_for(spec)))?;
    Ok(Volume3D::from_f64(spec.dims, &values, ValueDomain::UnitNormalized)?)
}

/// Mean over the in-bounds 3×3×3 neighbourhood of each voxel.
pub fn box_smooth(dims: Dims, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let range = |c: usize, n: usize| c.saturating_sub(1)..(c + 2).min(n);
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let mut sum = 0.0;
                let mut count = 0usize;
                for zz in range(z, dims.nz) {
                    for yy in range(y, dims.ny) {
                        for xx in range(x, dims.nx) {
                            sum += values[dims.index(xx, yy, zz)];
                            count += 1;
                        }
                    }
                }
                out[dims.index(x, y, z)] = sum / count as f64;
            }
        }
    }
    out
}

/// FDG-like transfer: severity blends in a smoothed copy and dims contrast.
pub fn oracle_f(source: &Volume3D, severity: f64) -> Result<Volume3D> {
    let s = source.to_f64();
    let smooth = box_smooth(source.dims(), &s);
    let mixed: Vec<f64> = s
        .iter()
        .zip(&smooth)
        .map(|(&v, &m)| (1.0 - 0.5 * severity) * v + 0.2 * severity * m)
        .collect();
    let values = minmax_normalize_values(&mixed)?;
    Ok(Volume3D::from_f64(source.dims(), &values, ValueDomain::UnitNormalized)?)
}

/// AV45-like transfer: a severity-dependent power law.
pub fn oracle_a(source: &Volume3D, severity: f64) -> Result<Volume3D> {
    let powered: Vec<f64> = source.to_f64().iter().map(|&v| v.powf(1.0 + severity)).collect();
    let values = minmax_normalize_values(&powered)?;
    Ok(Volume3D::from_f64(source.dims(), &values, ValueDomain::UnitNormalized)?)
}

pub fn oracle(tracer: Tracer, source: &Volume3D, severity: f64) -> Result<Volume3D> {
    match tracer {
        Tracer::Fdg => oracle_f(source, severity),
        Tracer::Av45 => oracle_a(source, severity),
    }
}

pub fn generate_sample(spec: &PhantomSpec) -> Result<SamplePair> {
    let source = generate_source(spec)?;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, 3));
    let demographics = Demographics {
        severity: spec.severity,
        age: rng.uniform(60.0, 85.0),
    };
    let target_f = spec.mask.f.then(|| oracle_f(&source, spec.severity)).transpose()?;
    let target_a = spec.mask.a.then(|| oracle_a(&source, spec.severity)).transpose()?;
    Ok(SamplePair {
        seed: spec.seed,
        source,
        target_f,
        target_a,
        demographics,
        mask: spec.mask,
    })
}

/// `n` samples; sample `i` uses seed `base_seed + i` and the severity and
/// mask returned by the samplers for index `i`.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    template: &PhantomSpec,
    mut severity: impl FnMut(usize) -> f64,
    mut mask: impl FnMut(usize) -> ModalityMask,
) -> Result<Vec<SamplePair>> {
    (0..n)
        .map(|i| {
            let spec = PhantomSpec {
                seed: base_seed.wrapping_add(i as u64),
                severity: severity(i),
                mask: mask(i),
                ..template.clone()
            };
            generate_sample(&spec)
        })
        .collect()
}

/// Seeded uniform severity sampler on `[lo, hi]`.
pub fn uniform_severity(seed: u64, lo: f64, hi: f64) -> impl FnMut(usize) -> f64 {
    let mut rng = SplitMix64::new(seed);
    move |_| rng.uniform(lo, hi)
}

/// Seeded availability sampler: each tracer present independently with
/// probability `p_f`/`p_a`, redrawn until at least one is present.
pub fn bernoulli_masks(seed: u64, p_f: f64, p_a: f64) -> impl FnMut(usize) -> ModalityMask {
    let mut rng = SplitMix64::new(seed);
    move |_| loop {
        let m = ModalityMask {
            f: rng.next_f64() < p_f,
            a: rng.next_f64() < p_a,
        };
        if m.any() {
            break m;
        }
    }
}

/// Voronoi sites in voxel coordinates used by [`generate_labelmap`].
pub fn voronoi_sites(spec: &PhantomSpec, n_regions: usize) -> Vec<[f64; 3]> {
    let site_seed = match spec.anatomy {
        Anatomy::Independent => spec.seed,
        Anatomy::Template { template_seed, .. } => template_seed,
    };
    let mut rng = SplitMix64::new(derive_seed(site_seed, 4));
    let extent = spec.dims.as_array();
    (0..n_regions)
        .map(|_| [0, 1, 2].map(|a| rng.uniform(0.0, (extent[a] - 1) as f64)))
        .collect()
}

/// Voronoi parcellation of the foreground (`source >= 0.05`) into labels
/// `1..=n_regions`; ties go to the lower label. For template anatomies the
/// parcellation uses the unjittered template so every subject shares it.
pub fn generate_labelmap(spec: &PhantomSpec, n_regions: usize) -> Result<LabelMap3D> {
    if n_regions < 2 {
        return Err(SynthError::TooFewRegions(n_regions));
    }
    let template = match spec.anatomy {
        Anatomy::Template { template_seed, .. } => PhantomSpec {
            anatomy: Anatomy::Template {
                template_seed,
                jitter: 0.0,
            },
            ..spec.clone()
        },
        Anatomy::Independent => spec.clone(),
    };
    let source = generate_source(&template)?;
    let sites = voronoi_sites(spec, n_regions);
    let dims = spec.dims;
    let mut labels = vec![0u16; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let idx = dims.index(x, y, z);
                if (source.voxels()[idx] as f64) < BACKGROUND_THRESHOLD {
                    continue;
                }
                let p = [x as f64, y as f64, z as f64];
                let mut best = (f64::INFINITY, 0usize);
                for (k, s) in sites.iter().enumerate() {
                    let d: f64 = (0..3).map(|a| (p[a] - s[a]).powi(2)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                labels[idx] = best.1 as u16 + 1;
            }
        }
    }
    let names: BTreeMap<u16, String> = (1..=n_regions as u16).map(|k| (k, format!("region_{k}"))).collect();
    Ok(LabelMap3D::new(dims, labels, names)?)
}
