//! End-to-end stages over a [`RunConfig`].
//!
//! Layout under `out_dir`, one subdirectory per stage:
//!
//! - `gen-data/`: `manifest.tsv`, `labels.lbl1`, `vol/*.vol1`
//! - `align/`: `adapters.ckpt`, `history.tsv`, `terms.tsv`
//! - `train/`: `model.ckpt` (flow, distillation, adapters), `history.tsv`
//! - `sample/`: `steps1/` and `steps{N}/` synthesized test volumes
//! - `eval/`: `metrics.tsv`, `summary.tsv`
//! - `stats/`: per tracer `manifest_{t}.tsv`, `report_{t}.tsv`,
//!   `summary_{t}.tsv`, `violin_{t}.tsv`
//!
//! Each stage reads only the previous stages' outputs and writes the
//! resolved config next to its own.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapters::{
    adapters_from_checkpoint, adapters_to_checkpoint, align_adapters, problem_from_provider, AdapterError,
    AlignmentOutcome, Conditioner, EmbeddingProvider, SyntheticEmbeddingProvider,
};
use crate::config::{streams, AnatomyKind, ConfigError, RunConfig};
use crate::diffcore::{Checkpoint, DiffError};
use crate::evalstat::{group_report, metric_set, violin_tsv, CohortSubject, GroupReport, ReportConfig, StatError};
use crate::rectflow::{self, history_tsv, FlowDataset, FlowError, TrainState};
use crate::synthdata::{
    bernoulli_masks, generate_dataset, generate_labelmap, uniform_severity, Anatomy, Demographics, ModalityMask,
    PhantomSpec, SamplePair, SynthError, Tracer,
};
use crate::volume::{read_labelmap, read_volume, write_labelmap, write_volume, LabelMap3D, Volume3D, VolumeError};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const LABELS_NAME: &str = "labels.lbl1";
pub const ADAPTERS_NAME: &str = "adapters.ckpt";
pub const MODEL_NAME: &str = "model.ckpt";

/// Data manifest columns.
pub const MANIFEST_COLUMNS: [&str; 10] =
    ["id", "split", "seed", "severity", "age", "delta_f", "delta_a", "source", "target_f", "target_a"];
/// Cohort manifest columns read by the statistics stage.
pub const COHORT_COLUMNS: [&str; 4] = ["id", "group", "real", "synth"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Align,
    Train,
    Sample,
    Eval,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::GenData, Stage::Align, Stage::Train, Stage::Sample, Stage::Eval, Stage::Stats];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Align => "align",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Stats => "stats",
        }
    }

    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join(self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A failed stage of [`run_pipeline`].
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub cause: PipelineError,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Prepares a stage directory and writes the resolved config into it.
fn stage_dir(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let dir = stage.dir(cfg);
    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

fn subject_id(i: usize) -> String {
    format!("s{i:04}")
}

// ---------------------------------------------------------------- data

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub train: bool,
    pub seed: u64,
    pub demographics: Demographics,
    pub mask: ModalityMask,
    /// Paths relative to the manifest's directory.
    pub source: String,
    pub targets: [Option<String>; 2],
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let opt = |p: &Option<String>| p.clone().unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{:?}\t{:?}\t{}\t{}\t{}\t{}\t{}\n",
            self.id,
            if self.train { "train" } else { "test" },
            self.seed,
            self.demographics.severity,
            self.demographics.age,
            u8::from(self.mask.f),
            u8::from(self.mask.a),
            self.source,
            opt(&self.targets[0]),
            opt(&self.targets[1]),
        )
    }
}

fn table_rows<'a>(path: &Path, text: &'a str, columns: &[&str]) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = lines.next().map(|(_, l)| l.split('\t').collect::<Vec<_>>());
    if header.as_deref() != Some(columns) {
        return Err(PipelineError::Manifest {
            path: path.to_owned(),
            line: 1,
            msg: format!("expected header `{}`", columns.join("\\t")),
        });
    }
    lines
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != columns.len() {
                return Err(PipelineError::Manifest {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: format!("expected {} columns, found {}", columns.len(), cols.len()),
                });
            }
            Ok((i + 1, cols))
        })
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    table_rows(path, &text, &MANIFEST_COLUMNS)?
        .into_iter()
        .map(|(line, c)| {
            let bad = |msg: String| PipelineError::Manifest {
                path: path.to_owned(),
                line,
                msg,
            };
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|e| bad(format!("{what}: {e}")));
            let flag = |s: &str, what: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(format!("{what}: expected 0 or 1"))),
            };
            let opt = |s: &str| (s != "-").then(|| s.to_owned());
            Ok(ManifestEntry {
                id: c[0].to_owned(),
                train: match c[1] {
                    "train" => true,
                    "test" => false,
                    s => return Err(bad(format!("split `{s}` is neither train nor test"))),
                },
                seed: c[2].parse().map_err(|e| bad(format!("seed: {e}")))?,
                demographics: Demographics {
                    severity: num(c[3], "severity")?,
                    age: num(c[4], "age")?,
                },
                mask: ModalityMask {
                    f: flag(c[5], "delta_f")?,
                    a: flag(c[6], "delta_a")?,
                },
                source: c[7].to_owned(),
                targets: [opt(c[8]), opt(c[9])],
            })
        })
        .collect()
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DataSet {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        let entries = read_manifest(dir.join(MANIFEST_NAME))?;
        Ok(Self { dir, entries })
    }

    pub fn labels(&self) -> Result<LabelMap3D> {
        Ok(read_labelmap(self.dir.join(LABELS_NAME))?)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        resolve(&self.dir, rel)
    }

    pub fn load(&self, e: &ManifestEntry) -> Result<SamplePair> {
        let target = |i: usize| -> Result<Option<Volume3D>> {
            e.targets[i].as_deref().map(|p| read_volume(self.path(p))).transpose().map_err(Into::into)
        };
        Ok(SamplePair {
            seed: e.seed,
            source: read_volume(self.path(&e.source))?,
            target_f: target(0)?,
            target_a: target(1)?,
            demographics: e.demographics,
            mask: e.mask,
        })
    }

    pub fn pairs(&self, train: bool) -> Result<Vec<SamplePair>> {
        self.entries.iter().filter(|e| e.train == train).map(|e| self.load(e)).collect()
    }
}

fn phantom_template(cfg: &RunConfig) -> PhantomSpec {
    let anatomy = match cfg.anatomy {
        AnatomyKind::Template => Anatomy::Template {
            template_seed: cfg.stream(streams::TEMPLATE),
            jitter: cfg.jitter,
        },
        AnatomyKind::Independent => Anatomy::Independent,
    };
    PhantomSpec::new(cfg.stream(streams::TEMPLATE), cfg.dims)
        .with_blobs(cfg.n_blobs)
        .with_anatomy(anatomy)
}

/// Writes `n_train + n_test` subjects, the label map and the manifest.
/// Targets are written only where available.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<DataSet> {
    create_dir(&dir.join("vol"))?;
    let template = phantom_template(cfg);
    let n = cfg.n_train + cfg.n_test;
    let pairs = generate_dataset(
        n,
        cfg.stream(streams::DATA),
        &template,
        uniform_severity(cfg.stream(streams::SEVERITY), cfg.severity_min, cfg.severity_max),
        bernoulli_masks(cfg.stream(streams::MASK), cfg.p_f, cfg.p_a),
    )?;
    let mut entries = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        let id = subject_id(i);
        let source = format!("vol/{id}_src.vol1");
        write_volume(dir.join(&source), &p.source)?;
        let mut targets = [None, None];
        for tr in Tracer::ALL {
            if let Some(v) = p.target(tr).filter(|_| p.mask.has(tr)) {
                let rel = format!("vol/{id}_{}.vol1", tr.tag());
                write_volume(dir.join(&rel), v)?;
                targets[tr.index()] = Some(rel);
            }
        }
        entries.push(ManifestEntry {
            id,
            train: i < cfg.n_train,
            seed: p.seed,
            demographics: p.demographics,
            mask: p.mask,
            source,
            targets,
        });
    }
    write_labelmap(dir.join(LABELS_NAME), &generate_labelmap(&template, cfg.n_regions)?)?;
    let mut text = MANIFEST_COLUMNS.join("\t") + "\n";
    for e in &entries {
        text.push_str(&e.to_line());
    }
    write_text(&dir.join(MANIFEST_NAME), &text)?;
    Ok(DataSet {
        dir: dir.to_owned(),
        entries,
    })
}

// ---------------------------------------------------------------- align

pub fn provider(cfg: &RunConfig) -> SyntheticEmbeddingProvider {
    SyntheticEmbeddingProvider::new(cfg.stream(streams::PROVIDER), cfg.embed_dim)
}

const PROVIDER_META: &str = "provider.meta";

fn conditioner_checkpoint(cfg: &RunConfig, out: &AlignmentOutcome) -> Checkpoint {
    let mut c = adapters_to_checkpoint(&out.adapter_f, &out.adapter_a);
    c.insert_u64s(PROVIDER_META, &[cfg.stream(streams::PROVIDER), cfg.embed_dim as u64]);
    c
}

/// Adapters plus the provider they were aligned against.
pub fn conditioner_from_checkpoint(c: &Checkpoint) -> Result<Conditioner<SyntheticEmbeddingProvider>> {
    let meta = c.get_u64s(PROVIDER_META)?;
    let [seed, dim] = meta[..] else {
        return Err(PipelineError::Input(format!("{PROVIDER_META} must hold two integers")));
    };
    if dim < 3 {
        return Err(PipelineError::Input(format!("embedding dim {dim} below 3")));
    }
    let (adapter_f, adapter_a) = adapters_from_checkpoint(c)?;
    Ok(Conditioner {
        provider: SyntheticEmbeddingProvider::new(seed, dim as usize),
        adapter_f,
        adapter_a,
    })
}

/// Aligns adapters against the training targets and writes `ckpt` plus
/// `history.tsv` and `terms.tsv` beside it.
pub fn align(cfg: &RunConfig, data: &DataSet, ckpt: &Path) -> Result<AlignmentOutcome> {
    let pairs = data.pairs(true)?;
    let prov = provider(cfg);
    let targets = |tr: Tracer| pairs.iter().filter(move |p| p.mask.has(tr)).filter_map(move |p| p.target(tr));
    let problem = problem_from_provider(&prov, targets(Tracer::Fdg), targets(Tracer::Av45))?;
    let out = align_adapters(&problem, &cfg.align_config())?;
    conditioner_checkpoint(cfg, &out).write(ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let mut hist = String::from("step\tobjective\n");
    for (i, v) in out.history.iter().enumerate() {
        let _ = writeln!(hist, "{i}\t{v:.12e}");
    }
    write_text(&dir.join("history.tsv"), &hist)?;
    let t = &out.terms;
    let mut terms = String::from("key\tvalue\n");
    for (k, v) in [
        ("align_f", t.align_f),
        ("align_a", t.align_a),
        ("cross_sim", t.cross_sim),
        ("penalty", t.penalty),
        ("constraint_residual", out.constraint_residual),
    ] {
        let _ = writeln!(terms, "{k}\t{v:.12e}");
    }
    let _ = writeln!(terms, "constraint_warning\t{}", u8::from(out.warning.is_some()));
    write_text(&dir.join("terms.tsv"), &terms)?;
    Ok(out)
}

// ---------------------------------------------------------------- train

/// Trained state plus the conditioner it was trained with.
#[derive(Debug, Clone)]
pub struct Model {
    pub state: TrainState,
    pub cond: Conditioner<SyntheticEmbeddingProvider>,
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.state.to_checkpoint();
        let mut cond = adapters_to_checkpoint(&self.cond.adapter_f, &self.cond.adapter_a);
        cond.insert_u64s(PROVIDER_META, &[self.cond.provider.seed(), self.cond.provider.dim() as u64]);
        c.merge_prefixed("cond/", &cond);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(Self {
            state: TrainState::from_checkpoint(c)?,
            cond: conditioner_from_checkpoint(&c.extract_prefixed("cond/"))?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().write(path)?)
    }

    /// Euler sample of `tracer` from `source` with `steps` steps.
    pub fn synthesize(&self, source: &Volume3D, tracer: Tracer, demo: &Demographics, steps: usize) -> Result<Volume3D> {
        let ctx = self.cond.context(tracer, demo)?;
        Ok(rectflow::sample_euler(source, &ctx, &self.state.params, &self.state.net, steps)?)
    }
}

fn flow_dataset(data: &DataSet, cond: &Conditioner<SyntheticEmbeddingProvider>) -> Result<FlowDataset> {
    Ok(FlowDataset::from_pairs(&data.pairs(true)?, cond)?)
}

/// Fresh model trained until `until` completed epochs; `history.tsv` is
/// written beside `ckpt`.
pub fn train(cfg: &RunConfig, data: &DataSet, adapters: &Path, ckpt: &Path, until: usize) -> Result<Model> {
    let cond = conditioner_from_checkpoint(&Checkpoint::read(adapters)?)?;
    if cond.provider.dim() != cfg.embed_dim {
        return Err(PipelineError::Input(format!(
            "adapters have embedding dim {}, config says {}",
            cond.provider.dim(),
            cfg.embed_dim
        )));
    }
    let flow = flow_dataset(data, &cond)?;
    let state = TrainState::new(cfg.net_config(), &cfg.flow_config())?;
    let state = rectflow::train_until(state, &flow, &cfg.flow_config(), until)?;
    finish(Model { state, cond }, ckpt)
}

/// Continues a saved model through the distillation phase to `epochs`.
pub fn distill(cfg: &RunConfig, data: &DataSet, ckpt_in: &Path, ckpt_out: &Path) -> Result<Model> {
    let model = Model::load(ckpt_in)?;
    if model.state.net != cfg.net_config() {
        return Err(PipelineError::Input("checkpoint network differs from the config".into()));
    }
    let flow = flow_dataset(data, &model.cond)?;
    let state = rectflow::distill(model.state, &flow, &cfg.flow_config())?;
    finish(Model { state, ..model }, ckpt_out)
}

fn finish(model: Model, ckpt: &Path) -> Result<Model> {
    model.save(ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_text(&dir.join("history.tsv"), &history_tsv(&model.state.history))?;
    Ok(model)
}

// ---------------------------------------------------------------- sample / eval

fn synth_rel(steps: usize, id: &str, tracer: Tracer) -> String {
    format!("steps{steps}/{id}_{}.vol1", tracer.tag())
}

/// Step counts of the sampling stage: one-step and `sample_steps`.
pub fn sample_step_counts(cfg: &RunConfig) -> Vec<usize> {
    let mut v = vec![1, cfg.sample_steps];
    v.dedup();
    v
}

/// Synthesizes both tracers for every test subject at each step count.
pub fn sample_test_set(cfg: &RunConfig, data: &DataSet, model: &Model, dir: &Path) -> Result<()> {
    for steps in sample_step_counts(cfg) {
        create_dir(&dir.join(format!("steps{steps}")))?;
    }
    for e in data.entries.iter().filter(|e| !e.train) {
        let source = read_volume(data.path(&e.source))?;
        for steps in sample_step_counts(cfg) {
            for tr in Tracer::ALL {
                let v = model.synthesize(&source, tr, &e.demographics, steps)?;
                write_volume(dir.join(synth_rel(steps, &e.id, tr)), &v)?;
            }
        }
    }
    Ok(())
}

/// Image metrics of every synthesized test volume with a real target.
pub fn eval_test_set(cfg: &RunConfig, data: &DataSet, sample_dir: &Path, dir: &Path) -> Result<()> {
    let mut rows = String::from("id\ttracer\tsteps\tssim\tpsnr\tmse\tmae\n");
    let mut summary = String::from("tracer\tsteps\tn\tssim\tpsnr\tmse\tmae\n");
    for tr in Tracer::ALL {
        for steps in sample_step_counts(cfg) {
            let mut acc = [0.0; 4];
            let mut n = 0usize;
            for e in data.entries.iter().filter(|e| !e.train) {
                let Some(real) = &e.targets[tr.index()] else { continue };
                let real = read_volume(data.path(real))?;
                let synth = read_volume(sample_dir.join(synth_rel(steps, &e.id, tr)))?;
                let m = metric_set(&synth, &real)?;
                let _ = writeln!(
                    rows,
                    "{}\t{}\t{steps}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
                    e.id,
                    tr.tag(),
                    m.ssim,
                    m.psnr,
                    m.mse,
                    m.mae
                );
                for (a, v) in acc.iter_mut().zip([m.ssim, m.psnr, m.mse, m.mae]) {
                    *a += v;
                }
                n += 1;
            }
            if n > 0 {
                let k = n as f64;
                let _ = writeln!(
                    summary,
                    "{}\t{steps}\t{n}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
                    tr.tag(),
                    acc[0] / k,
                    acc[1] / k,
                    acc[2] / k,
                    acc[3] / k
                );
            }
        }
    }
    write_text(&dir.join("metrics.tsv"), &rows)?;
    write_text(&dir.join("summary.tsv"), &summary)?;
    Ok(())
}

// ---------------------------------------------------------------- stats

/// One cohort manifest row; paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortEntry {
    pub id: String,
    pub group: String,
    pub real: String,
    pub synth: String,
}

pub fn read_cohort_manifest(path: impl AsRef<Path>) -> Result<Vec<CohortEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(table_rows(path, &text, &COHORT_COLUMNS)?
        .into_iter()
        .map(|(_, c)| CohortEntry {
            id: c[0].to_owned(),
            group: c[1].to_owned(),
            real: c[2].to_owned(),
            synth: c[3].to_owned(),
        })
        .collect())
}

pub fn cohort_manifest_text(entries: &[CohortEntry]) -> String {
    let mut s = COHORT_COLUMNS.join("\t") + "\n";
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.group, e.real, e.synth);
    }
    s
}

/// Loads a cohort manifest's volumes.
pub fn load_cohort(manifest: &Path) -> Result<Vec<CohortSubject>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_cohort_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(CohortSubject {
                real: read_volume(resolve(base, &e.real))?,
                synth: read_volume(resolve(base, &e.synth))?,
                id: e.id,
                group: e.group,
            })
        })
        .collect()
}

/// Group report and long-format violin data for one cohort manifest.
pub fn cohort_stats(manifest: &Path, labels: &LabelMap3D, cfg: &ReportConfig) -> Result<(GroupReport, String)> {
    let subjects = load_cohort(manifest)?;
    let report = group_report(&subjects, labels, cfg)?;
    let violin = violin_tsv(&subjects, labels, cfg.ref_region)?;
    Ok((report, violin))
}

/// Test subjects with a real `tracer` target, split at the median
/// severity into `low` and `high` (ties by id order).
pub fn cohort_entries(data: &DataSet, tracer: Tracer, sample_dir: &Path, steps: usize, stats_dir: &Path) -> Vec<CohortEntry> {
    let mut subjects: Vec<&ManifestEntry> = data
        .entries
        .iter()
        .filter(|e| !e.train && e.targets[tracer.index()].is_some())
        .collect();
    subjects.sort_by(|a, b| a.demographics.severity.total_cmp(&b.demographics.severity));
    let half = subjects.len() / 2;
    let out_root = stats_dir.parent().unwrap_or(stats_dir);
    let up = |p: &Path| match p.strip_prefix(out_root) {
        Ok(rel) => Path::new("..").join(rel).display().to_string(),
        Err(_) => p.display().to_string(),
    };
    let mut entries: Vec<CohortEntry> = subjects
        .iter()
        .enumerate()
        .map(|(rank, e)| CohortEntry {
            id: e.id.clone(),
            group: if rank < half { "low" } else { "high" }.to_owned(),
            real: up(&data.path(e.targets[tracer.index()].as_deref().unwrap_or_default())),
            synth: up(&sample_dir.join(synth_rel(steps, &e.id, tracer))),
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    entries
}

/// Per-tracer cohort manifests, reports, summaries and violin data of the
/// one-step samples.
pub fn stats_test_set(cfg: &RunConfig, data: &DataSet, sample_dir: &Path, dir: &Path) -> Result<()> {
    let labels = data.labels()?;
    for tr in Tracer::ALL {
        let entries = cohort_entries(data, tr, sample_dir, 1, dir);
        if entries.len() < 4 {
            return Err(PipelineError::Input(format!(
                "tracer {} has {} test subjects with a target; need at least 4",
                tr.tag(),
                entries.len()
            )));
        }
        let manifest = dir.join(format!("manifest_{}.tsv", tr.tag()));
        write_text(&manifest, &cohort_manifest_text(&entries))?;
        let (report, violin) = cohort_stats(&manifest, &labels, &cfg.report_config())?;
        write_text(&dir.join(format!("report_{}.tsv", tr.tag())), &report.to_tsv())?;
        write_text(&dir.join(format!("summary_{}.tsv", tr.tag())), &report.summary_tsv())?;
        write_text(&dir.join(format!("violin_{}.tsv", tr.tag())), &violin)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- run

fn run_stage<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> std::result::Result<T, StageError> {
    f().map_err(|cause| StageError { stage, cause })
}

/// Runs every stage in order; stops at the first failure, leaving earlier
/// outputs in place.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<(), StageError> {
    let data = run_stage(Stage::GenData, || {
        let dir = stage_dir(cfg, Stage::GenData)?;
        gen_data(cfg, &dir)
    })?;
    let adapters = run_stage(Stage::Align, || {
        let dir = stage_dir(cfg, Stage::Align)?;
        let path = dir.join(ADAPTERS_NAME);
        align(cfg, &data, &path)?;
        Ok(path)
    })?;
    let model = run_stage(Stage::Train, || {
        let dir = stage_dir(cfg, Stage::Train)?;
        let path = dir.join(MODEL_NAME);
        train(cfg, &data, &adapters, &path, cfg.distill_start_epoch)?;
        if cfg.distill_start_epoch < cfg.epochs {
            distill(cfg, &data, &path, &path)
        } else {
            Model::load(&path)
        }
    })?;
    let sample_dir = run_stage(Stage::Sample, || {
        let dir = stage_dir(cfg, Stage::Sample)?;
        sample_test_set(cfg, &data, &model, &dir)?;
        Ok(dir)
    })?;
    run_stage(Stage::Eval, || {
        let dir = stage_dir(cfg, Stage::Eval)?;
        eval_test_set(cfg, &data, &sample_dir, &dir)
    })?;
    run_stage(Stage::Stats, || {
        let dir = stage_dir(cfg, Stage::Stats)?;
        stats_test_set(cfg, &data, &sample_dir, &dir)
    })
}
