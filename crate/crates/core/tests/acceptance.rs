//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line. Tests take a shared lock so that runtime budgets are
//! measured without competing for the CPU.
//!
//! `cargo test -p flowsynth --test acceptance -- --nocapture`

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use common::*;
use flowsynth::adapters::{
    align_adapters, alignment_terms, AffineAdapter, AlignConfig, AlignProblem, Conditioner, Embedding,
    SyntheticEmbeddingProvider,
};
use flowsynth::config::RunConfig;
use flowsynth::diffcore::{grad_check, grad_check_coords, relative_error, AdamConfig, Checkpoint, DiffError, Tape, Tensor, Var};
use flowsynth::evalstat::{
    bh_fdr, group_report, paired_ttest, roi_uptake, student_ttest, welch_ttest, CohortSubject, ReportConfig,
};
use flowsynth::pipeline;
use flowsynth::rectflow::{
    distill, flow_loss_at, sample_euler_values, train, train_until, FlowConfig, FlowDataset, TrainSample, TrainState,
};
use flowsynth::rng::SplitMix64;
use flowsynth::synthdata::{
    generate_labelmap, generate_sample, generate_source, oracle, Anatomy, Demographics, PhantomSpec, SamplePair,
};
use flowsynth::velocitynet::{forward_tape, init_params, volume_tensor, NetConfig, NetError};
use flowsynth::volume::{decode_labelmap, decode_volume, encode_labelmap, encode_volume, ValueDomain};
use flowsynth::{Dims, Tracer, Volume3D};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn within(start: Instant, budget: Duration) -> (bool, String) {
    let e = start.elapsed();
    (e <= budget, format!("{:.1} s of {} s", e.as_secs_f64(), budget.as_secs()))
}

fn signed(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn identity_conditioner(seed: u64, dim: usize) -> Conditioner<SyntheticEmbeddingProvider> {
    Conditioner {
        provider: SyntheticEmbeddingProvider::new(seed, dim),
        adapter_f: AffineAdapter::identity(dim),
        adapter_a: AffineAdapter::identity(dim),
    }
}

fn sample(seed: u64, dims: Dims, severity: f64) -> SamplePair {
    generate_sample(&PhantomSpec::new(seed, dims).with_severity(severity)).unwrap()
}

// ------------------------------------------------------------------ 1

type Loss = Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>;

/// `shape`-shaped view of `len(shape)` packed scalars starting at `start`.
fn seg(tape: &mut Tape, v: Var, start: usize, shape: &[usize]) -> Result<Var, DiffError> {
    let s = tape.slice(v, 0, start, shape.iter().product())?;
    tape.reshape(s, shape)
}

/// `Σ w ⊙ out` with fixed random weights, so no output coordinate cancels.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = tape.shape(out).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, signed(seed, n))?);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Packed input segments: `(shape, lo, hi)`.
fn packed(rng: &mut SplitMix64, parts: &[(&[usize], f64, f64)]) -> (Tensor, Vec<usize>) {
    let mut data = Vec::new();
    let mut offsets = Vec::new();
    for (shape, lo, hi) in parts {
        offsets.push(data.len());
        let n: usize = shape.iter().product();
        data.extend((0..n).map(|_| rng.uniform(*lo, *hi)));
    }
    let n = data.len();
    (Tensor::new(vec![n], data).unwrap(), offsets)
}

fn unary(name: &'static str, rng: &mut SplitMix64, ws: u64, lo: f64, hi: f64) -> (&'static str, Tensor, Loss) {
    let n = 2 + rng.below(6);
    let c = rng.uniform(-2.0, 2.0);
    let (x, _) = packed(rng, &[(&[n], lo, hi)]);
    let f: Loss = Box::new(move |t, v| {
        let out = match name {
            "relu" => t.relu(v)?,
            "sigmoid" => t.sigmoid(v)?,
            "sqrt" => t.sqrt(v)?,
            "scale" => t.scale(v, c)?,
            "sum" => t.sum(v)?,
            "mean" => t.mean(v)?,
            _ => unreachable!(),
        };
        weighted(t, out, ws)
    });
    (name, x, f)
}

fn binary(name: &'static str, rng: &mut SplitMix64, ws: u64, scalar_rhs: bool) -> (&'static str, Tensor, Loss) {
    let n = 2 + rng.below(6);
    let m = if scalar_rhs { 1 } else { n };
    let (lo, hi) = if name == "div" { (0.5, 1.5) } else { (-1.0, 1.0) };
    let (x, off) = packed(rng, &[(&[n], -1.0, 1.0), (&[m], lo, hi)]);
    let f: Loss = Box::new(move |t, v| {
        let a = seg(t, v, off[0], &[n])?;
        let b = seg(t, v, off[1], &[m])?;
        let out = match name {
            "add" => t.add(a, b)?,
            "sub" => t.sub(a, b)?,
            "mul" => t.mul(a, b)?,
            "div" => t.div(a, b)?,
            _ => unreachable!(),
        };
        weighted(t, out, ws)
    });
    (name, x, f)
}

fn primitive_cases(seed: u64) -> Vec<(&'static str, Tensor, Loss)> {
    let mut rng = SplitMix64::new(seed);
    let ws = seed.wrapping_mul(31).wrapping_add(7);
    let mut cases = vec![
        unary("relu", &mut rng, ws, -1.0, 1.0),
        unary("sigmoid", &mut rng, ws, -3.0, 3.0),
        unary("sqrt", &mut rng, ws, 0.5, 2.0),
        unary("scale", &mut rng, ws, -1.0, 1.0),
        unary("sum", &mut rng, ws, -1.0, 1.0),
        unary("mean", &mut rng, ws, -1.0, 1.0),
    ];
    for name in ["add", "sub", "mul", "div"] {
        cases.push(binary(name, &mut rng, ws, false));
        cases.push(binary(name, &mut rng, ws, true));
    }

    let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
    let (x, off) = packed(&mut rng, &[(&[m, k], -1.0, 1.0), (&[k, n], -1.0, 1.0)]);
    cases.push((
        "matmul",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, off[0], &[m, k])?;
            let b = seg(t, v, off[1], &[k, n])?;
            let out = t.matmul(a, b)?;
            weighted(t, out, ws)
        }),
    ));

    let (ci, co, e) = (1 + rng.below(2), 1 + rng.below(2), 2 + rng.below(3));
    let (x, off) = packed(&mut rng, &[(&[ci, e, e, e], -1.0, 1.0), (&[co, ci, 3, 3, 3], -1.0, 1.0), (&[co], -1.0, 1.0)]);
    cases.push((
        "conv3d",
        x,
        Box::new(move |t, v| {
            let input = seg(t, v, off[0], &[ci, e, e, e])?;
            let w = seg(t, v, off[1], &[co, ci, 3, 3, 3])?;
            let b = seg(t, v, off[2], &[co])?;
            let out = t.conv3d(input, w, Some(b), 1, 1)?;
            weighted(t, out, ws)
        }),
    ));

    let e2 = 2 * (1 + rng.below(2));
    let (x, off) = packed(&mut rng, &[(&[ci, e2, e2, e2], -1.0, 1.0), (&[co, ci, 2, 2, 2], -1.0, 1.0)]);
    cases.push((
        "conv3d_stride2",
        x,
        Box::new(move |t, v| {
            let input = seg(t, v, off[0], &[ci, e2, e2, e2])?;
            let w = seg(t, v, off[1], &[co, ci, 2, 2, 2])?;
            let out = t.conv3d(input, w, None, 2, 0)?;
            weighted(t, out, ws)
        }),
    ));

    let e3 = 1 + rng.below(3);
    let (x, off) = packed(&mut rng, &[(&[ci, e3, e3, e3], -1.0, 1.0), (&[ci, co, 2, 2, 2], -1.0, 1.0), (&[co], -1.0, 1.0)]);
    cases.push((
        "conv3d_transpose",
        x,
        Box::new(move |t, v| {
            let input = seg(t, v, off[0], &[ci, e3, e3, e3])?;
            let w = seg(t, v, off[1], &[ci, co, 2, 2, 2])?;
            let b = seg(t, v, off[2], &[co])?;
            let out = t.conv3d_transpose(input, w, Some(b), 2, 0)?;
            weighted(t, out, ws)
        }),
    ));

    let (r, c, axis) = (2 + rng.below(3), 2 + rng.below(3), rng.below(2));
    let (x, _) = packed(&mut rng, &[(&[r, c], -2.0, 2.0)]);
    cases.push((
        "softmax",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, 0, &[r, c])?;
            let out = t.softmax(a, axis)?;
            weighted(t, out, ws)
        }),
    ));

    let (ch, s) = (3 + rng.below(3), 1 + rng.below(4));
    let (x, off) = packed(&mut rng, &[(&[ch, s], -1.0, 1.0), (&[ch], 0.5, 1.5), (&[ch], -1.0, 1.0)]);
    cases.push((
        "layer_norm",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, off[0], &[ch, s])?;
            let g = seg(t, v, off[1], &[ch])?;
            let b = seg(t, v, off[2], &[ch])?;
            let out = t.layer_norm(a, g, b)?;
            weighted(t, out, ws)
        }),
    ));

    let (p, q, w) = (1 + rng.below(3), 1 + rng.below(3), 2 + rng.below(3));
    let (x, off) = packed(&mut rng, &[(&[p, w], -1.0, 1.0), (&[q, w], -1.0, 1.0)]);
    cases.push((
        "concat_axis0",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, off[0], &[p, w])?;
            let b = seg(t, v, off[1], &[q, w])?;
            let out = t.concat(&[a, b], 0)?;
            weighted(t, out, ws)
        }),
    ));
    let (x, off) = packed(&mut rng, &[(&[w, p], -1.0, 1.0), (&[w, q], -1.0, 1.0)]);
    cases.push((
        "concat_axis1",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, off[0], &[w, p])?;
            let b = seg(t, v, off[1], &[w, q])?;
            let out = t.concat(&[a, b], 1)?;
            weighted(t, out, ws)
        }),
    ));

    let (r, c) = (2 + rng.below(3), 3 + rng.below(3));
    let start = rng.below(c - 1);
    let len = 1 + rng.below(c - start);
    let (x, _) = packed(&mut rng, &[(&[r, c], -1.0, 1.0)]);
    cases.push((
        "slice",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, 0, &[r, c])?;
            let out = t.slice(a, 1, start, len)?;
            weighted(t, out, ws)
        }),
    ));
    let (x, _) = packed(&mut rng, &[(&[r, c], -1.0, 1.0)]);
    cases.push((
        "reshape",
        x,
        Box::new(move |t, v| {
            let a = seg(t, v, 0, &[r, c])?;
            let out = t.reshape(a, &[c, r])?;
            let sq = t.mul(out, out)?;
            weighted(t, sq, ws)
        }),
    ));
    cases
}

fn net_err(e: NetError) -> DiffError {
    match e {
        NetError::Diff(d) => d,
        other => panic!("{other}"),
    }
}

fn random_ctx(seed: u64, dim: usize, tracer: Tracer) -> flowsynth::adapters::ConditionContext {
    let mut rng = SplitMix64::new(seed);
    let a = Embedding::new((0..dim).map(|_| rng.normal()).collect()).unwrap();
    let b = Embedding::new((0..dim).map(|_| rng.normal()).collect()).unwrap();
    flowsynth::adapters::ConditionContext::from_rows(&a, &b, tracer).unwrap()
}

/// Central-difference steps tried per full-net coordinate; the best
/// non-kink agreement counts. The loss sums ~10³ outputs, so small steps
/// carry ~1e-9 roundoff, while large steps on biases shift hundreds of
/// voxels and straddle relu hinges.
const NET_EPS: [f64; 3] = [1e-6, 1e-5, 1e-4];

#[test]
fn criterion_1_gradient_integrity() {
    let _g = serial();
    let start = Instant::now();
    const SEEDS: u64 = 100;

    let mut prim_worst = (0.0f64, String::new());
    let mut prim_checked = 0usize;
    let mut prim_names = BTreeSet::new();
    for seed in 0..SEEDS {
        for (name, x, f) in primitive_cases(seed) {
            let r = grad_check(&f, &x, 1e-6, 1e-4).unwrap();
            prim_checked += r.coords.len() - r.kinks.len();
            prim_names.insert(name);
            if r.max_rel_err >= prim_worst.0 {
                prim_worst = (r.max_rel_err, format!("{name} seed {seed}"));
            }
        }
    }

    let dims = Dims::cube(8);
    // Two channels would make every layer norm output ±1 and starve the
    // trunk of gradient; four keeps the check well conditioned.
    let cfg = NetConfig {
        base_channels: 4,
        ..NetConfig::tiny(4)
    };
    let names: Vec<String> = init_params(&cfg, 0).unwrap().names().map(str::to_owned).collect();
    let mut net_worst = (0.0f64, String::new());
    let mut net_checked = 0usize;
    let mut groups = BTreeSet::new();
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(1000 + seed);
        let store = init_params(&cfg, seed).unwrap();
        let tracer = if seed % 2 == 0 { Tracer::Fdg } else { Tracer::Av45 };
        let ctx = random_ctx(2000 + seed, 4, tracer);
        let x = volume_tensor(&random_volume(3000 + seed, dims));
        let t = rng.next_f64();
        let ws = 4000 + seed;
        // Every parameter group in turn; every tenth seed also the input volume.
        let mut targets = vec![names[seed as usize % names.len()].clone()];
        if seed % 10 == 0 {
            targets.push("input".into());
        }
        for name in targets {
            let theta = if name == "input" { x.clone() } else { store.get(&name).unwrap().tensor() };
            let n = theta.numel();
            let mut coords: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut coords);
            coords.truncate(6);
            let mut best = vec![f64::INFINITY; coords.len()];
            for eps in NET_EPS {
                let r = grad_check_coords(
                    |tape, v| {
                        let mut bound = store.bind_frozen(tape);
                        let xv = if name == "input" {
                            v
                        } else {
                            bound.insert(&name, v);
                            tape.constant(x.clone())
                        };
                        let (vf, va) = forward_tape(tape, &bound, &cfg, xv, &ctx, t).map_err(net_err)?;
                        let both = tape.concat(&[vf, va], 0)?;
                        weighted(tape, both, ws)
                    },
                    &theta,
                    &coords,
                    eps,
                    1e-3,
                )
                .unwrap();
                for (i, c) in r.coords.iter().enumerate() {
                    if !r.kinks.contains(c) {
                        best[i] = best[i].min(relative_error(r.analytic[i], r.numeric[i]));
                    }
                }
            }
            groups.insert(name.clone());
            for err in best.into_iter().filter(|e| e.is_finite()) {
                net_checked += 1;
                if err >= net_worst.0 {
                    net_worst = (err, format!("{name} seed {seed}"));
                }
            }
        }
    }

    let (in_time, time) = within(start, Duration::from_secs(300));
    let pass = prim_worst.0 <= 1e-4 && net_worst.0 <= 1e-3 && groups.len() == names.len() + 1 && in_time;
    let detail = format!(
        "{} primitives x {SEEDS} seeds, {prim_checked} coords, max rel {:.2e} ({}); net {} groups x {SEEDS} seeds, {net_checked} coords, max rel {:.2e} ({}); {time}",
        prim_names.len(),
        prim_worst.0,
        prim_worst.1,
        groups.len(),
        net_worst.0,
        net_worst.1,
    );
    report("1", "gradient integrity", pass, &detail);
    assert!(pass, "{detail}");
}

// ------------------------------------------------------------------ 2

#[test]
fn criterion_2_constant_coupling_recovery() {
    let _g = serial();
    let start = Instant::now();
    let dims = Dims::cube(8);
    let x0 = generate_source(&PhantomSpec::new(5, dims)).unwrap().to_f64();
    let y: Vec<f64> = x0.iter().map(|v| v + 0.2).collect();
    let cond = identity_conditioner(1, 64);
    let demo = Demographics { severity: 0.0, age: 72.5 };
    let ctx_f = cond.context(Tracer::Fdg, &demo).unwrap();
    let s = TrainSample {
        source: x0.clone(),
        targets: [Some(y.clone()), None],
        contexts: [ctx_f.clone(), cond.context(Tracer::Av45, &demo).unwrap()],
    };
    let data = FlowDataset::new(dims, vec![s]).unwrap();
    let net = NetConfig {
        base_channels: 4,
        ..NetConfig::new(64)
    };
    // One sample, batch 1: one optimizer step per epoch.
    let cfg = FlowConfig {
        epochs: 500,
        distill_start_epoch: 500,
        batch_size: 1,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        seed: 7,
        ..FlowConfig::default()
    };
    let state = train(&data, &net, &cfg).unwrap();
    let first = state.history.iter().position(|r| r.total < 1e-4);
    let last = state.history.last().unwrap().total;
    let one = sample_euler_values(&state.params, &net, &x0, dims, &ctx_f, 1).unwrap();
    let psnr = -10.0 * mse(&one, &y).log10();

    let (in_time, time) = within(start, Duration::from_secs(120));
    let pass = first.is_some() && psnr >= 40.0 && in_time;
    let detail = format!(
        "loss < 1e-4 first after step {}, final loss {last:.2e}; one-step PSNR {psnr:.2} dB; {time}",
        first.map_or("never".into(), |e| (e + 1).to_string()),
    );
    report("2", "flow-optimum recovery", pass, &detail);
    assert!(pass, "{detail}");
}

// ------------------------------------------------------------------ 3, 5

const DESK_LR: f64 = 2e-3;

fn desk_net() -> NetConfig {
    NetConfig {
        base_channels: 4,
        ..NetConfig::new(64)
    }
}

/// Every seed at severity 0 and severity 1: identical sources, two targets.
fn two_severity_pairs(seeds: std::ops::Range<u64>, dims: Dims) -> Vec<SamplePair> {
    seeds.flat_map(|s| [sample(s, dims, 0.0), sample(s, dims, 1.0)]).collect()
}

/// Mean over pairs and tracers of the Euler-sample MSE against the targets.
fn sample_error(
    params: &flowsynth::diffcore::ParamStore,
    net: &NetConfig,
    pairs: &[SamplePair],
    cond: &Conditioner<SyntheticEmbeddingProvider>,
    steps: usize,
) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        for tr in Tracer::ALL {
            let ctx = cond.context(tr, &p.demographics).unwrap();
            let out = sample_euler_values(params, net, &p.source.to_f64(), p.source.dims(), &ctx, steps).unwrap();
            total += mse(&out, &p.target(tr).unwrap().to_f64());
        }
    }
    total / (2 * pairs.len()) as f64
}

#[test]
fn criterion_3_conditioning_beats_unconditional_floor() {
    let _g = serial();
    let start = Instant::now();
    let dims = Dims::cube(8);
    let train_pairs = two_severity_pairs(1000..1016, dims);
    let test_pairs = two_severity_pairs(2000..2008, dims);
    let cond = identity_conditioner(1, 64);
    let data = FlowDataset::from_pairs(&train_pairs, &cond).unwrap();
    let net = desk_net();
    let cfg = FlowConfig {
        epochs: 200,
        distill_start_epoch: 200,
        batch_size: 4,
        adam: AdamConfig { lr: DESK_LR, ..AdamConfig::default() },
        seed: 3,
        ..FlowConfig::default()
    };
    let state = train(&data, &net, &cfg).unwrap();
    let model_mse = sample_error(&state.params, &net, &test_pairs, &cond, 50);

    // Best severity-blind predictor: the midpoint of the two oracle targets.
    let mut floor = 0.0;
    for pair in test_pairs.chunks(2) {
        for tr in Tracer::ALL {
            let y0 = oracle(tr, &pair[0].source, 0.0).unwrap().to_f64();
            let y1 = oracle(tr, &pair[0].source, 1.0).unwrap().to_f64();
            floor += y0.iter().zip(&y1).map(|(a, b)| (b - a) * (b - a) / 4.0).sum::<f64>() / y0.len() as f64;
        }
    }
    floor /= test_pairs.len() as f64;

    let ratio = model_mse / floor;
    let (in_time, time) = within(start, Duration::from_secs(900));
    let pass = ratio <= 0.5 && in_time;
    let detail = format!("test MSE {model_mse:.3e}, unconditional floor {floor:.3e}, ratio {ratio:.3} (<= 0.5); {time}");
    report("3", "conditioning resolves ill-posedness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_5_distillation_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let dims = Dims::cube(8);
    let pairs = two_severity_pairs(1000..1016, dims);
    let cond = identity_conditioner(1, 64);
    let data = FlowDataset::from_pairs(&pairs, &cond).unwrap();
    let net = desk_net();
    let cfg = FlowConfig {
        epochs: 300,
        distill_start_epoch: 250,
        teacher_steps: 50,
        batch_size: 4,
        adam: AdamConfig { lr: DESK_LR, ..AdamConfig::default() },
        seed: 5,
        ..FlowConfig::default()
    };
    let teacher = train_until(TrainState::new(net.clone(), &cfg).unwrap(), &data, &cfg, cfg.distill_start_epoch).unwrap();
    let teacher50 = sample_error(&teacher.params, &net, &pairs, &cond, 50);
    let pre1 = sample_error(&teacher.params, &net, &pairs, &cond, 1);
    let student = distill(teacher, &data, &cfg).unwrap();
    let post1 = sample_error(&student.params, &net, &pairs, &cond, 1);

    let (in_time, time) = within(start, Duration::from_secs(1200));
    let pass_a = post1 <= 1.5 * teacher50 && in_time;
    let pass_b = post1 <= 0.5 * pre1 && in_time;
    let a = format!(
        "one-step after distillation {post1:.3e} vs teacher 50-step {teacher50:.3e}, ratio {:.3} (<= 1.5); {time}",
        post1 / teacher50
    );
    let b = format!(
        "one-step after distillation {post1:.3e} vs one-step before {pre1:.3e}, ratio {:.3} (<= 0.5); {time}",
        post1 / pre1
    );
    report("5a", "distillation matches the teacher", pass_a, &a);
    report("5b", "distillation improves one-step sampling", pass_b, &b);
    assert!(pass_a && pass_b, "5a: {a}\n5b: {b}");
}

// ------------------------------------------------------------------ 4

#[test]
fn criterion_4_gated_multitask_gradients() {
    let _g = serial();
    let start = Instant::now();
    let dims = Dims::cube(8);
    let net = NetConfig::tiny(16);
    let cond = identity_conditioner(2, 16);
    let cfg = FlowConfig::default();
    const BATCHES: u64 = 24;

    let mut per_sample_checks = 0usize;
    let mut absent_batches = 0usize;
    let mut failures = Vec::new();
    for b in 0..BATCHES {
        let mut rng = SplitMix64::new(500 + b);
        let params = init_params(&net, 600 + b).unwrap();
        let n = 2 + rng.below(3);
        let samples: Vec<TrainSample> = (0..n)
            .map(|i| {
                let severity = rng.next_f64();
                let p = sample(700 + 10 * b + i as u64, dims, severity);
                // Each tracer present with probability 1/2, at least one present.
                let (f, a) = loop {
                    let m = (rng.next_f64() < 0.5, rng.next_f64() < 0.5);
                    if m.0 || m.1 {
                        break m;
                    }
                };
                TrainSample {
                    source: p.source.to_f64(),
                    targets: [
                        f.then(|| p.target_f.as_ref().unwrap().to_f64()),
                        a.then(|| p.target_a.as_ref().unwrap().to_f64()),
                    ],
                    contexts: [
                        cond.context(Tracer::Fdg, &p.demographics).unwrap(),
                        cond.context(Tracer::Av45, &p.demographics).unwrap(),
                    ],
                }
            })
            .collect();
        let ts: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let head_grads = |grads: &[Vec<f64>], tr: Tracer| -> Vec<f64> {
            let prefix = format!("head_{}.", tr.tag());
            params
                .iter()
                .zip(grads)
                .filter(|((name, _), _)| name.starts_with(&prefix))
                .flat_map(|(_, g)| g.iter().copied())
                .collect()
        };

        for (i, s) in samples.iter().enumerate() {
            let l = flow_loss_at(&[s], &ts[i..=i], &params, &net, dims, &cfg).unwrap();
            for tr in Tracer::ALL {
                let g = head_grads(&l.grads, tr);
                let present = s.target(tr).is_some();
                let zero = g.iter().all(|&v| v == 0.0);
                if present == zero {
                    failures.push(format!("batch {b} sample {i} head {} present {present}", tr.tag()));
                }
                per_sample_checks += 1;
            }
        }
        let refs: Vec<&TrainSample> = samples.iter().collect();
        let l = flow_loss_at(&refs, &ts, &params, &net, dims, &cfg).unwrap();
        for tr in Tracer::ALL {
            if samples.iter().all(|s| s.target(tr).is_none()) {
                absent_batches += 1;
                if head_grads(&l.grads, tr).iter().any(|&v| v != 0.0) {
                    failures.push(format!("batch {b}: head {} absent from batch but has gradient", tr.tag()));
                }
            }
        }
    }

    let (in_time, time) = within(start, Duration::from_secs(60));
    let pass = failures.is_empty() && absent_batches > 0 && in_time;
    let detail = format!(
        "{BATCHES} batches, {per_sample_checks} per-sample head checks, {absent_batches} batch-level absent heads, {} violations; {time}",
        failures.len()
    );
    report("4", "gated multi-task gradients", pass, &detail);
    assert!(pass, "{detail}: {failures:?}");
}

// ------------------------------------------------------------------ 6

fn e(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec()).unwrap()
}

/// Smallest `1 - cos(s·c + b, target)` over a regular grid of
/// `(s, b₁, b₂) ∈ [-2, 2]³`, with the minimizing adapter.
fn grid_oracle(c: [f64; 2], target: [f64; 2]) -> (f64, [f64; 3]) {
    const N: i32 = 100;
    let at = |k: i32| -2.0 + 4.0 * k as f64 / N as f64;
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in 0..=N {
        for j in 0..=N {
            for k in 0..=N {
                let (s, b1, b2) = (at(i), at(j), at(k));
                let g = [s * c[0] + b1, s * c[1] + b2];
                let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let tn = (target[0] * target[0] + target[1] * target[1]).sqrt();
                let term = 1.0 - (g[0] * target[0] + g[1] * target[1]) / (norm * tn);
                if term < best.0 {
                    best = (term, [s, b1, b2]);
                }
            }
        }
    }
    best
}

#[test]
fn criterion_6_adapter_alignment() {
    let _g = serial();
    let start = Instant::now();
    let (c_f, mean_f, c_a, mean_a) = ([1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0]);
    let problem = AlignProblem {
        c_f: e(&c_f),
        c_a: e(&c_a),
        mean_f: e(&mean_f),
        mean_a: e(&mean_a),
    };
    let cfg = AlignConfig {
        tau: 0.5,
        ..AlignConfig::default()
    };
    let out = align_adapters(&problem, &cfg).unwrap();

    let (grid_f, arg_f) = grid_oracle(c_f, mean_f);
    let (grid_a, arg_a) = grid_oracle(c_a, mean_a);
    let adapter = |a: [f64; 3]| AffineAdapter {
        scale: a[0],
        bias: e(&a[1..]),
    };
    // Penalty is non-negative, so the per-adapter grid minima bound the
    // joint objective from below; the grid minimizers also meet the constraint.
    let grid_terms = alignment_terms(&problem, &adapter(arg_f), &adapter(arg_a), &cfg).unwrap();
    let bound = grid_f + grid_a;

    let t = out.terms;
    let (in_time, time) = within(start, Duration::from_secs(60));
    let pass = t.align_f < 1e-3
        && t.align_a < 1e-3
        && out.constraint_residual < 1e-3
        && out.warning.is_none()
        && t.total() <= bound + 1e-3
        && grid_terms.penalty == 0.0
        && in_time;
    let detail = format!(
        "align_f {:.2e}, align_a {:.2e}, cross sim {:.4}, residual {:.2e}; grid minima {grid_f:.2e} / {grid_a:.2e} (grid cross sim {:.4}); {time}",
        t.align_f, t.align_a, t.cross_sim, out.constraint_residual, grid_terms.cross_sim
    );
    report("6", "adapter alignment", pass, &detail);
    assert!(pass, "{detail}");
}

// ------------------------------------------------------------------ 7, 8

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn template_cohort(
    dims: Dims,
    seeds: std::ops::Range<u64>,
    severity: impl Fn(&mut SplitMix64) -> f64,
    rng: &mut SplitMix64,
) -> Vec<(u64, f64, Volume3D)> {
    seeds
        .map(|s| {
            let sev = severity(rng);
            let spec = PhantomSpec::new(s, dims).with_severity(sev).with_anatomy(TEMPLATE);
            (s, sev, generate_source(&spec).unwrap())
        })
        .collect()
}

const TEMPLATE: Anatomy = Anatomy::Template {
    template_seed: 77,
    jitter: 0.05,
};

fn template_labels(dims: Dims) -> flowsynth::volume::LabelMap3D {
    generate_labelmap(&PhantomSpec::new(0, dims).with_anatomy(TEMPLATE), 8).unwrap()
}

#[test]
fn criterion_7_statistics_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = SplitMix64::new(77);

    let mut worst_t = 0.0f64;
    let mut worst_p = 0.0f64;
    for _ in 0..1000 {
        let (n1, n2) = (3 + rng.below(38), 3 + rng.below(38));
        let (loc, sc) = (rng.uniform(-5.0, 5.0), rng.uniform(0.1, 3.0));
        let x: Vec<f64> = (0..n1).map(|_| loc + sc * rng.normal()).collect();
        let shift = rng.uniform(-1.0, 1.0) * sc;
        let noise = rng.uniform(0.05, 2.0) * sc;
        let paired: Vec<f64> = x.iter().map(|v| v + shift + noise * rng.normal()).collect();
        let y: Vec<f64> = (0..n2).map(|_| loc + shift + rng.uniform(0.2, 3.0) * sc * rng.normal()).collect();
        let cases = [
            (paired_ttest(&x, &paired).unwrap(), paired_oracle(&x, &paired)),
            (welch_ttest(&x, &y).unwrap(), welch_oracle(&x, &y)),
            (student_ttest(&x, &y).unwrap(), student_oracle(&x, &y)),
        ];
        for (lib, (t, df, p)) in cases {
            worst_t = worst_t.max(rel(lib.t, t)).max(rel(lib.df, df));
            worst_p = worst_p.max((lib.p - p).abs());
        }
    }

    let mut bh_mismatch = 0usize;
    for _ in 0..1000 {
        let m = 1 + rng.below(60);
        let alpha = rng.uniform(0.01, 0.2);
        let mut p: Vec<f64> = (0..m)
            .map(|_| match rng.below(3) {
                0 => rng.next_f64() * 0.01,
                1 => rng.next_f64() * 0.2,
                _ => rng.next_f64(),
            })
            .collect();
        // Some exact ties.
        if m > 2 {
            let (i, j) = (rng.below(m), rng.below(m));
            p[i] = p[j];
        }
        let lib = bh_fdr(&p, alpha).unwrap();
        let (reject, adjusted) = bh_oracle(&p, alpha);
        if lib.reject != reject || lib.adjusted != adjusted {
            bh_mismatch += 1;
        }
    }

    // Permuted group labels on one cohort: every null is true.
    let dims = Dims::cube(16);
    let labels = template_labels(dims);
    let cohort = template_cohort(dims, 5000..5048, |r| r.next_f64(), &mut rng);
    let vols: Vec<Volume3D> = cohort.iter().map(|(_, sev, src)| oracle(Tracer::Fdg, src, *sev).unwrap()).collect();
    let report_cfg = ReportConfig::default();
    const PERMS: usize = 200;
    let mut false_pos = 0usize;
    let mut tests = 0usize;
    for k in 0..PERMS {
        let mut order: Vec<usize> = (0..vols.len()).collect();
        SplitMix64::new(9000 + k as u64).shuffle(&mut order);
        let subjects: Vec<CohortSubject> = order
            .iter()
            .enumerate()
            .map(|(rank, &i)| CohortSubject {
                id: format!("s{i}"),
                group: if rank < vols.len() / 2 { "g0".into() } else { "g1".into() },
                real: vols[i].clone(),
                synth: vols[i].clone(),
            })
            .collect();
        let r = group_report(&subjects, &labels, &report_cfg).unwrap();
        false_pos += r.inter_real.iter().filter(|row| row.significant).count();
        tests += r.inter_real.len();
    }
    let alpha = report_cfg.alpha;
    let fpr = false_pos as f64 / tests as f64;
    let limit = alpha + 2.0 * (alpha * (1.0 - alpha) / tests as f64).sqrt();

    let (in_time, time) = within(start, Duration::from_secs(300));
    let pass = worst_t <= 1e-9 && worst_p <= 1e-9 && bh_mismatch == 0 && fpr <= limit && in_time;
    let detail = format!(
        "t-tests: max rel err t/df {worst_t:.1e}, max abs err p {worst_p:.1e} over 3000 tests; BH mismatches {bh_mismatch}/1000; permutation FPR {fpr:.4} ({false_pos}/{tests}) <= {limit:.4}; {time}"
    );
    report("7", "statistics oracle equivalence", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_8_group_report_concordance() {
    let _g = serial();
    let start = Instant::now();
    let dims = Dims::cube(16);
    let labels = template_labels(dims);
    let mut rng = SplitMix64::new(88);
    let low = template_cohort(dims, 6000..6024, |r| r.uniform(0.0, 0.2), &mut rng);
    let high = template_cohort(dims, 7000..7024, |r| r.uniform(0.8, 1.0), &mut rng);
    let report_cfg = ReportConfig::default();

    // Severity-sensitive regions from the noise-free, unjittered template.
    let template = generate_source(&PhantomSpec::new(0, dims).with_anatomy(Anatomy::Template {
        template_seed: 77,
        jitter: 0.0,
    }))
    .unwrap();

    let mut lines = Vec::new();
    let mut pass = true;
    let mut any_sensitive = false;
    for tr in Tracer::ALL {
        let u_lo = roi_uptake(&oracle(tr, &template, 0.1).unwrap(), &labels, report_cfg.ref_region).unwrap();
        let u_hi = roi_uptake(&oracle(tr, &template, 0.9).unwrap(), &labels, report_cfg.ref_region).unwrap();
        let sensitive: Vec<u16> = u_lo.keys().copied().filter(|r| (u_hi[r] - u_lo[r]).abs() / u_lo[r] > 0.05).collect();

        let mut subjects = Vec::new();
        for (group, members) in [("low", &low), ("high", &high)] {
            for (seed, sev, src) in members.iter() {
                let real = oracle(tr, src, *sev).unwrap();
                let values = real.to_f64();
                let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
                let sigma = rms * 10f64.powf(-30.0 / 20.0);
                let mut noise = SplitMix64::new(seed ^ 0xA5A5);
                let noisy: Vec<f64> = values.iter().map(|v| v + sigma * noise.normal()).collect();
                subjects.push(CohortSubject {
                    id: format!("s{seed}"),
                    group: group.into(),
                    real,
                    synth: Volume3D::from_f64(dims, &noisy, ValueDomain::Raw).unwrap(),
                });
            }
        }
        let r = group_report(&subjects, &labels, &report_cfg).unwrap();
        let intra_sig = r.intra.iter().filter(|row| row.significant).count();
        let missed_real: Vec<u16> = r.inter_real.iter().filter(|row| sensitive.contains(&row.region) && !row.significant).map(|row| row.region).collect();
        let missed_synth: Vec<u16> = r.inter_synth.iter().filter(|row| sensitive.contains(&row.region) && !row.significant).map(|row| row.region).collect();
        any_sensitive |= !sensitive.is_empty();
        let inter_sig = |rows: &[flowsynth::evalstat::RegionRow]| rows.iter().filter(|row| row.significant).count();
        let ok = intra_sig == 0 && missed_real.is_empty() && missed_synth.is_empty() && r.concordance == 1.0;
        pass &= ok;
        lines.push(format!(
            "{}: intra significant {intra_sig}, inter significant real {} synth {}, sensitive regions {sensitive:?}, missed real {missed_real:?} synth {missed_synth:?}, concordance {}",
            tr.tag(),
            inter_sig(&r.inter_real),
            inter_sig(&r.inter_synth),
            r.concordance
        ));
    }
    let (in_time, time) = within(start, Duration::from_secs(600));
    pass &= in_time && any_sensitive;
    let detail = format!("{}; {time}", lines.join("; "));
    report("8", "group-report concordance", pass, &detail);
    assert!(pass, "{detail}");
}

// ------------------------------------------------------------------ 9

const TINY: &str = "\
dims = 8
n_train = 16
n_test = 8
embed_dim = 16
levels = 2
base_channels = 2
attn_levels = 0,1
time_embed_dim = 4
epochs = 50
distill_start_epoch = 40
teacher_steps = 10
sample_steps = 10
lr = 0.003
align_steps = 100
";

fn outputs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![
        "gen-data/manifest.tsv".to_owned(),
        "gen-data/labels.lbl1".into(),
        "align/adapters.ckpt".into(),
        "train/model.ckpt".into(),
        "eval/metrics.tsv".into(),
    ];
    for tag in ["f", "a"] {
        files.push(format!("stats/report_{tag}.tsv"));
        files.push(format!("stats/summary_{tag}.tsv"));
    }
    files.into_iter().map(|f| (f.clone(), fs::read(root.join(&f)).unwrap())).collect()
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let _g = serial();
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = RunConfig::parse(&format!("out_dir = {}\n{TINY}", d.path().display())).unwrap();
        pipeline::run_pipeline(&cfg).unwrap();
    }
    let (a, b) = (outputs(dirs[0].path()), outputs(dirs[1].path()));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();

    // VOL1: random finite bit patterns, signed zeros, subnormals, extremes.
    let mut rng = SplitMix64::new(99);
    let mut vol_failures = 0;
    for k in 0..50 {
        let dims = Dims::new(1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9));
        let mut voxels: Vec<f32> = (0..dims.len())
            .map(|_| loop {
                let v = f32::from_bits(rng.next_u64() as u32);
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let specials = [0.0, -0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, f32::MIN];
        for (v, s) in voxels.iter_mut().zip(specials) {
            *v = s;
        }
        let vol = Volume3D::raw(dims, voxels).unwrap();
        let unit = random_volume(k, dims);
        let unit = Volume3D::new(dims, unit.voxels().to_vec(), ValueDomain::UnitNormalized).unwrap();
        for v in [vol, unit] {
            let bytes = encode_volume(&v);
            let back = decode_volume(&bytes).unwrap();
            let same_bits = back.voxels().iter().zip(v.voxels()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same_bits || back.domain() != v.domain() || back.dims() != v.dims() || encode_volume(&back) != bytes {
                vol_failures += 1;
            }
        }
    }

    // LBL1: generated parcellations with names.
    let mut lbl_failures = 0;
    for k in 0..10 {
        let dims = Dims::new(8 + rng.below(5), 8 + rng.below(5), 8 + rng.below(5));
        let m = generate_labelmap(&PhantomSpec::new(k, dims), 2 + rng.below(10)).unwrap();
        let bytes = encode_labelmap(&m);
        let back = decode_labelmap(&bytes).unwrap();
        if back != m || encode_labelmap(&back) != bytes {
            lbl_failures += 1;
        }
    }

    // CKPT1: the trained model file and random entries with awkward values.
    let model_bytes = &a.iter().find(|(n, _)| n == "train/model.ckpt").unwrap().1;
    let decoded = Checkpoint::decode(model_bytes).unwrap();
    let mut ckpt_ok = decoded.encode() == *model_bytes;
    let mut c = Checkpoint::default();
    for k in 0..20 {
        let shape = vec![1 + rng.below(4), 1 + rng.below(4)];
        let n = shape.iter().product();
        let values = (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).map(|v| if v.is_finite() { v } else { -0.0 }).collect();
        c.insert(format!("entry.{k}"), shape, values);
    }
    c.insert_u64s("meta", &[u64::MAX, 0, 12_345_678_901_234]);
    let bytes = c.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    let bitwise = |x: &Checkpoint, y: &Checkpoint| {
        x.entries.len() == y.entries.len()
            && x.entries.iter().zip(&y.entries).all(|((n1, (s1, v1)), (n2, (s2, v2)))| {
                n1 == n2 && s1 == s2 && v1.iter().map(|v| v.to_bits()).eq(v2.iter().map(|v| v.to_bits()))
            })
    };
    ckpt_ok &= bitwise(&c, &back) && back.encode() == bytes && back.get_u64s("meta").unwrap() == [u64::MAX, 0, 12_345_678_901_234];

    let (in_time, time) = within(start, Duration::from_secs(120));
    let pass = differing.is_empty() && vol_failures == 0 && lbl_failures == 0 && ckpt_ok && in_time;
    let detail = format!(
        "{} pipeline outputs compared, differing {differing:?}; VOL1 failures {vol_failures}/100, LBL1 failures {lbl_failures}/10, CKPT1 ok {ckpt_ok}; {time}",
        a.len()
    );
    report("9", "determinism and round-trips", pass, &detail);
    assert!(pass, "{detail}");
}
