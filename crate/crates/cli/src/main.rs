use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flowsynth::config::{schema_text, RunConfig};
use flowsynth::evalstat::metric_set;
use flowsynth::pipeline::{self, DataSet, Model, Stage, ADAPTERS_NAME};
use flowsynth::synthdata::Demographics;
use flowsynth::volume::{read_labelmap, read_volume, write_volume};
use flowsynth::{Dims, Tracer};

/// Age used when a context id gives none; the centre of the synthetic age range.
const DEFAULT_AGE: f64 = 72.5;

#[derive(Parser)]
#[command(name = "flowsynth", version, about = "Conditional rectified-flow volume translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom subjects, a label map and a manifest.
    GenData {
        /// Training subjects; without --n-test no test subjects are written.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// One extent or nx,ny,nz.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Align the tracer adapters against a dataset's training targets.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow training up to distill_start_epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to <out_dir>/gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to <out_dir>/align/adapters.ckpt.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Continue a trained checkpoint through distillation to `epochs`.
    Distill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to overwriting --ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize one tracer volume from a source volume.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `tracer:severity[:age]`, tracer `f` or `a`.
        #[arg(long)]
        context_id: String,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for symmetry with other stages; the checkpoint is self-contained.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Image metrics of a synthesized volume against a reference.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
    },
    /// Regional group statistics from a cohort manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        violin: Option<PathBuf>,
    },
    /// Run every stage from one config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Static build and format information.
    Info {
        #[command(subcommand)]
        what: InfoCommand,
    },
}

#[derive(Subcommand)]
enum InfoCommand {
    /// File formats and their version ids.
    Formats,
    /// Every config key with its default.
    Schema,
    /// Build metadata.
    Version,
}

fn load_or_default(config: Option<&Path>, out_dir: &Path) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::with_out_dir(out_dir)),
    }
}

fn load(config: &Path) -> Result<RunConfig> {
    RunConfig::load(config).with_context(|| format!("loading config {}", config.display()))
}

fn parse_dims(s: &str) -> Result<Dims> {
    let cfg = RunConfig::parse(&format!("out_dir = .\ndims = {s}\n"))?;
    Ok(cfg.dims)
}

/// `tracer:severity[:age]`.
fn parse_context_id(s: &str) -> Result<(Tracer, Demographics)> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        bail!("context id `{s}` is not tracer:severity[:age]");
    }
    let tracer = Tracer::from_tag(parts[0]).with_context(|| format!("unknown tracer `{}`", parts[0]))?;
    let severity: f64 = parts[1].parse().with_context(|| format!("severity `{}`", parts[1]))?;
    if !(0.0..=1.0).contains(&severity) {
        bail!("severity {severity} outside [0, 1]");
    }
    let age = match parts.get(2) {
        Some(a) => a.parse().with_context(|| format!("age `{a}`"))?,
        None => DEFAULT_AGE,
    };
    Ok((tracer, Demographics { severity, age }))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLOWSYNTH_THREADS") {
        let n: usize = v.parse().with_context(|| format!("FLOWSYNTH_THREADS=`{v}`"))?;
        if n == 0 {
            bail!("FLOWSYNTH_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            n,
            n_test,
            dims,
            seed,
            out_dir,
            config,
        } => {
            let mut cfg = load_or_default(config.as_deref(), &out_dir)?;
            if let Some(n) = n {
                cfg.n_train = n;
                cfg.n_test = n_test.unwrap_or(0);
            } else if let Some(t) = n_test {
                cfg.n_test = t;
            }
            if let Some(d) = dims {
                cfg.dims = parse_dims(&d)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out_dir)?;
            let data = pipeline::gen_data(&cfg, &out_dir)?;
            cfg.write_resolved(&out_dir)?;
            println!("wrote {} subjects to {}", data.entries.len(), out_dir.display());
        }
        Command::Align {
            data,
            tau,
            mu,
            steps,
            lr,
            seed,
            embed_dim,
            config,
            out,
        } => {
            let out_dir = out.parent().map(Path::to_owned).unwrap_or_default();
            let mut cfg = load_or_default(config.as_deref(), &out_dir)?;
            cfg.tau = tau.unwrap_or(cfg.tau);
            cfg.mu = mu.unwrap_or(cfg.mu);
            cfg.align_steps = steps.unwrap_or(cfg.align_steps);
            cfg.align_lr = lr.unwrap_or(cfg.align_lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.embed_dim = embed_dim.unwrap_or(cfg.embed_dim);
            cfg.validate()?;
            create_parent(&out)?;
            let outcome = pipeline::align(&cfg, &DataSet::open(&data)?, &out)?;
            if let Some(w) = &outcome.warning {
                eprintln!(
                    "warning: cross-similarity constraint infeasible (tau {}, achieved {:.6}, residual {:.3e})",
                    w.tau, w.cross_sim, w.residual
                );
            }
            println!("objective\t{:.9e}", outcome.terms.total());
        }
        Command::Train {
            config,
            out,
            data,
            adapters,
        } => {
            let cfg = load(&config)?;
            let data = data.unwrap_or_else(|| Stage::GenData.dir(&cfg));
            let adapters = adapters.unwrap_or_else(|| Stage::Align.dir(&cfg).join(ADAPTERS_NAME));
            create_parent(&out)?;
            let model = pipeline::train(&cfg, &DataSet::open(&data)?, &adapters, &out, cfg.distill_start_epoch)?;
            println!("trained {} epochs", model.state.epoch);
        }
        Command::Distill {
            ckpt,
            config,
            data,
            out,
        } => {
            let cfg = load(&config)?;
            let data = data.unwrap_or_else(|| Stage::GenData.dir(&cfg));
            let out = out.unwrap_or_else(|| ckpt.clone());
            create_parent(&out)?;
            let model = pipeline::distill(&cfg, &DataSet::open(&data)?, &ckpt, &out)?;
            println!("distilled to epoch {}", model.state.epoch);
        }
        Command::Sample {
            ckpt,
            input,
            context_id,
            steps,
            out,
            config,
        } => {
            if let Some(c) = config {
                load(&c)?;
            }
            if steps == 0 {
                bail!("--steps must be >= 1");
            }
            let (tracer, demo) = parse_context_id(&context_id)?;
            let model = Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let source = read_volume(&input).with_context(|| format!("reading {}", input.display()))?;
            let v = model.synthesize(&source, tracer, &demo, steps)?;
            create_parent(&out)?;
            write_volume(&out, &v)?;
        }
        Command::Eval { real, synth } => {
            let m = metric_set(&read_volume(&synth)?, &read_volume(&real)?)?;
            println!("ssim\tpsnr\tmse\tmae");
            println!("{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}", m.ssim, m.psnr, m.mse, m.mae);
        }
        Command::Stats {
            manifest,
            labels,
            config,
            out,
            violin,
        } => {
            let cfg = load_or_default(config.as_deref(), Path::new("."))?;
            let labels = read_labelmap(&labels).with_context(|| format!("reading {}", labels.display()))?;
            let (report, violin_text) = pipeline::cohort_stats(&manifest, &labels, &cfg.report_config())?;
            create_parent(&out)?;
            std::fs::write(&out, report.to_tsv())?;
            if let Some(v) = violin {
                create_parent(&v)?;
                std::fs::write(&v, violin_text)?;
            }
            print!("{}", report.summary_tsv());
        }
        Command::Run { config } => {
            let cfg = load(&config)?;
            pipeline::run_pipeline(&cfg)?;
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Info { what } => match what {
            InfoCommand::Formats => {
                println!("format\tversion\tcontent");
                println!("VOL1\t1\tlittle-endian f32 volume with dims and value-domain flag");
                println!("LBL1\t1\tlittle-endian u16 label grid with region names");
                println!("CKPT1\t1\tnamed f32 tensors (parameters, optimizer state, metadata)");
            }
            InfoCommand::Schema => print!("{}", schema_text()),
            InfoCommand::Version => {
                println!("flowsynth {}", env!("CARGO_PKG_VERSION"));
                println!("target {}-{}", std::env::consts::ARCH, std::env::consts::OS);
                println!("debug_assertions {}", cfg!(debug_assertions));
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
