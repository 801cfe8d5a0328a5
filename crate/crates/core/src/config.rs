//! Flat `key = value` run configuration with a strict schema.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! duplicate keys are errors. Every key except `out_dir` has a default;
//! [`RunConfig::to_text`] writes the fully resolved form, which parses back
//! to an identical value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffcore::AdamConfig;
use crate::evalstat::{IndependentTest, ReportConfig};
use crate::rectflow::FlowConfig;
use crate::rng::derive_seed;
use crate::velocitynet::NetConfig;
use crate::volume::Dims;

/// File name of the resolved copy written into every output directory.
pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// One schema entry; `default: None` marks a required key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn spec(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: Some(default),
        help,
    }
}

pub const SCHEMA: &[KeySpec] = &[
    KeySpec {
        key: "out_dir",
        default: None,
        help: "output root; each stage writes a subdirectory",
    },
    spec("seed", "0", "root seed; every stage derives its own stream"),
    spec("dims", "8,8,8", "volume extents nx,ny,nz (or one value for a cube)"),
    spec("n_train", "16", "training subjects"),
    spec("n_test", "8", "held-out subjects for sampling, eval and stats"),
    spec("severity_min", "0", "lower bound of the uniform severity draw"),
    spec("severity_max", "1", "upper bound of the uniform severity draw"),
    spec("p_f", "1", "probability that the f target is available"),
    spec("p_a", "1", "probability that the a target is available"),
    spec("n_blobs", "4", "blobs per phantom"),
    spec("anatomy", "template", "template (shared layout) or independent"),
    spec("jitter", "0.05", "relative per-subject jitter of the template layout"),
    spec("n_regions", "8", "labels in the parcellation"),
    spec("embed_dim", "64", "embedding and context dimension"),
    spec("tau", "0.5", "adapter cross-similarity threshold"),
    spec("mu", "10", "adapter penalty weight"),
    spec("align_steps", "500", "adapter gradient steps"),
    spec("align_lr", "0.1", "adapter initial step size"),
    spec("levels", "3", "network resolution levels"),
    spec("base_channels", "8", "channels at level 0; doubles per level"),
    spec("attn_levels", "0,1,2", "levels with cross-attention, or `none`"),
    spec("time_embed_dim", "16", "time feature width (even)"),
    spec("heads", "1", "attention heads"),
    spec("lambda_f", "1", "loss weight of the f head"),
    spec("lambda_a", "1", "loss weight of the a head"),
    spec("lr", "0.001", "Adam learning rate"),
    spec("beta1", "0.9", "Adam first-moment decay"),
    spec("beta2", "0.999", "Adam second-moment decay"),
    spec("eps", "1e-8", "Adam epsilon"),
    spec("epochs", "300", "total epochs including distillation"),
    spec("distill_start_epoch", "250", "first distillation epoch; equal to epochs disables it"),
    spec("teacher_steps", "50", "Euler steps of the distillation teacher"),
    spec("batch_size", "4", "samples per optimizer step"),
    spec("sample_steps", "50", "Euler steps of the multi-step sampler"),
    spec("alpha", "0.05", "FDR level"),
    spec("ref_region", "1", "label used to normalize regional uptake"),
    spec("independent_test", "welch", "welch or student"),
];

/// Stream ids split from the root seed.
pub mod streams {
    pub const DATA: u64 = 0x5101;
    pub const SEVERITY: u64 = 0x5102;
    pub const MASK: u64 = 0x5103;
    pub const TEMPLATE: u64 = 0x5104;
    pub const PROVIDER: u64 = 0x5201;
    pub const TRAIN: u64 = 0x5301;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnatomyKind {
    Template,
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub dims: Dims,
    pub n_train: usize,
    pub n_test: usize,
    pub severity_min: f64,
    pub severity_max: f64,
    pub p_f: f64,
    pub p_a: f64,
    pub n_blobs: usize,
    pub anatomy: AnatomyKind,
    pub jitter: f64,
    pub n_regions: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub mu: f64,
    pub align_steps: usize,
    pub align_lr: f64,
    pub levels: usize,
    pub base_channels: usize,
    pub attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub heads: usize,
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub distill_start_epoch: usize,
    pub teacher_steps: usize,
    pub batch_size: usize,
    pub sample_steps: usize,
    pub alpha: f64,
    pub ref_region: u16,
    pub independent_test: IndependentTest,
}

struct Fields<'a> {
    map: BTreeMap<&'static str, &'a str>,
}

impl<'a> Fields<'a> {
    fn raw(&self, key: &'static str) -> Result<&'a str> {
        self.map.get(key).copied().ok_or_else(|| ConfigError::Missing(key.to_owned()))
    }

    fn get<T: FromStr>(&self, key: &'static str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key)?;
        v.parse().map_err(|e: T::Err| bad(key, v, e))
    }

    fn finite(&self, key: &'static str) -> Result<f64> {
        let x: f64 = self.get(key)?;
        if !x.is_finite() {
            return Err(bad(key, self.raw(key)?, "not finite"));
        }
        Ok(x)
    }
}

fn bad(key: &str, value: &str, reason: impl Display) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: reason.to_string(),
    }
}

fn parse_dims(v: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok(Dims::cube(n)),
        [x, y, z] => Ok(Dims::new(x, y, z)),
        _ => Err("expected one or three extents".into()),
    }
}

fn parse_levels(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v == "none" {
        return Ok(Vec::new());
    }
    let mut out: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl RunConfig {
    /// Parses config text. `out_dir` is taken verbatim.
    pub fn parse(text: &str) -> Result<Self> {
        let mut given: BTreeMap<&'static str, &str> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: line_no })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: line_no });
            }
            let spec = SCHEMA.iter().find(|s| s.key == k).ok_or_else(|| ConfigError::UnknownKey {
                key: k.to_owned(),
                line: line_no,
            })?;
            if given.insert(spec.key, v).is_some() {
                return Err(ConfigError::Duplicate {
                    key: k.to_owned(),
                    line: line_no,
                });
            }
        }
        let mut map = BTreeMap::new();
        for s in SCHEMA {
            match (given.get(s.key), s.default) {
                (Some(v), _) => map.insert(s.key, *v),
                (None, Some(d)) => map.insert(s.key, d),
                (None, None) => return Err(ConfigError::Missing(s.key.to_owned())),
            };
        }
        Self::from_fields(&Fields { map })
    }

    /// Reads and parses a file; a relative `out_dir` is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if cfg.out_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.out_dir = parent.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    /// Defaults for every optional key.
    pub fn with_out_dir(out_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::parse("out_dir = .").expect("schema defaults parse");
        cfg.out_dir = out_dir.into();
        cfg
    }

    fn from_fields(f: &Fields) -> Result<Self> {
        let dims_raw = f.raw("dims")?;
        let levels_raw = f.raw("attn_levels")?;
        let anatomy = match f.raw("anatomy")? {
            "template" => AnatomyKind::Template,
            "independent" => AnatomyKind::Independent,
            v => return Err(bad("anatomy", v, "expected template or independent")),
        };
        let test_raw = f.raw("independent_test")?;
        let cfg = Self {
            out_dir: PathBuf::from(f.raw("out_dir")?),
            seed: f.get("seed")?,
            dims: parse_dims(dims_raw).map_err(|e| bad("dims", dims_raw, e))?,
            n_train: f.get("n_train")?,
            n_test: f.get("n_test")?,
            severity_min: f.finite("severity_min")?,
            severity_max: f.finite("severity_max")?,
            p_f: f.finite("p_f")?,
            p_a: f.finite("p_a")?,
            n_blobs: f.get("n_blobs")?,
            anatomy,
            jitter: f.finite("jitter")?,
            n_regions: f.get("n_regions")?,
            embed_dim: f.get("embed_dim")?,
            tau: f.finite("tau")?,
            mu: f.finite("mu")?,
            align_steps: f.get("align_steps")?,
            align_lr: f.finite("align_lr")?,
            levels: f.get("levels")?,
            base_channels: f.get("base_channels")?,
            attn_levels: parse_levels(levels_raw).map_err(|e| bad("attn_levels", levels_raw, e))?,
            time_embed_dim: f.get("time_embed_dim")?,
            heads: f.get("heads")?,
            lambda_f: f.finite("lambda_f")?,
            lambda_a: f.finite("lambda_a")?,
            lr: f.finite("lr")?,
            beta1: f.finite("beta1")?,
            beta2: f.finite("beta2")?,
            eps: f.finite("eps")?,
            epochs: f.get("epochs")?,
            distill_start_epoch: f.get("distill_start_epoch")?,
            teacher_steps: f.get("teacher_steps")?,
            batch_size: f.get("batch_size")?,
            sample_steps: f.get("sample_steps")?,
            alpha: f.finite("alpha")?,
            ref_region: f.get("ref_region")?,
            independent_test: IndependentTest::parse(test_raw)
                .ok_or_else(|| bad("independent_test", test_raw, "expected welch or student"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks; per-module validation runs again at each stage.
    pub fn validate(&self) -> Result<()> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.severity_min)
            || !(0.0..=1.0).contains(&self.severity_max)
            || self.severity_min > self.severity_max
        {
            return inv("severity range must satisfy 0 <= severity_min <= severity_max <= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_f) || !(0.0..=1.0).contains(&self.p_a) || self.p_f + self.p_a == 0.0 {
            return inv("p_f and p_a must lie in [0, 1] and not both be 0".into());
        }
        if self.n_train == 0 {
            return inv("n_train must be >= 1".into());
        }
        if self.embed_dim < 3 {
            return inv("embed_dim must be >= 3".into());
        }
        if self.sample_steps == 0 {
            return inv("sample_steps must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return inv("alpha must lie in (0, 1)".into());
        }
        if self.jitter < 0.0 {
            return inv("jitter must be >= 0".into());
        }
        self.net_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.net_config()
            .check_dims(self.dims)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.flow_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            attn_levels: self.attn_levels.iter().copied().collect(),
            context_dim: self.embed_dim,
            time_embed_dim: self.time_embed_dim,
            heads: self.heads,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            lambda_f: self.lambda_f,
            lambda_a: self.lambda_a,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            epochs: self.epochs,
            distill_start_epoch: self.distill_start_epoch,
            teacher_steps: self.teacher_steps,
            batch_size: self.batch_size,
            seed: self.stream(streams::TRAIN),
            tau: self.tau,
            mu: self.mu,
        }
    }

    pub fn align_config(&self) -> crate::adapters::AlignConfig {
        crate::adapters::AlignConfig {
            tau: self.tau,
            mu: self.mu,
            steps: self.align_steps,
            lr: self.align_lr,
        }
    }

    pub fn report_config(&self) -> ReportConfig {
        ReportConfig {
            alpha: self.alpha,
            ref_region: self.ref_region,
            independent: self.independent_test,
        }
    }

    pub fn stream(&self, id: u64) -> u64 {
        derive_seed(self.seed, id)
    }

    /// Resolved text in schema order.
    pub fn to_text(&self) -> String {
        let d = self.dims;
        let levels = if self.attn_levels.is_empty() {
            "none".to_owned()
        } else {
            self.attn_levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        };
        let values: Vec<(&str, String)> = vec![
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("dims", format!("{},{},{}", d.nx, d.ny, d.nz)),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("severity_min", f(self.severity_min)),
            ("severity_max", f(self.severity_max)),
            ("p_f", f(self.p_f)),
            ("p_a", f(self.p_a)),
            ("n_blobs", self.n_blobs.to_string()),
            (
                "anatomy",
                match self.anatomy {
                    AnatomyKind::Template => "template",
                    AnatomyKind::Independent => "independent",
                }
                .to_owned(),
            ),
            ("jitter", f(self.jitter)),
            ("n_regions", self.n_regions.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("tau", f(self.tau)),
            ("mu", f(self.mu)),
            ("align_steps", self.align_steps.to_string()),
            ("align_lr", f(self.align_lr)),
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("attn_levels", levels),
            ("time_embed_dim", self.time_embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("lambda_f", f(self.lambda_f)),
            ("lambda_a", f(self.lambda_a)),
            ("lr", f(self.lr)),
            ("beta1", f(self.beta1)),
            ("beta2", f(self.beta2)),
            ("eps", f(self.eps)),
            ("epochs", self.epochs.to_string()),
            ("distill_start_epoch", self.distill_start_epoch.to_string()),
            ("teacher_steps", self.teacher_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("alpha", f(self.alpha)),
            ("ref_region", self.ref_region.to_string()),
            ("independent_test", self.independent_test.name().to_owned()),
        ];
        debug_assert_eq!(values.len(), SCHEMA.len());
        let mut s = String::new();
        for (k, v) in values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Writes [`RESOLVED_NAME`] into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(RESOLVED_NAME);
        std::fs::write(&path, self.to_text()).map_err(|source| ConfigError::Io { path, source })
    }
}

/// Shortest text that parses back to the same `f64`.
fn f(x: f64) -> String {
    format!("{x:?}")
}

/// Schema listing: one `key<TAB>default<TAB>help` line per key, with
/// `required` in the default column for keys without one.
pub fn schema_text() -> String {
    let mut s = String::from("key\tdefault\thelp\n");
    for k in SCHEMA {
        s.push_str(&format!("{}\t{}\t{}\n", k.key, k.default.unwrap_or("required"), k.help));
    }
    s
}
