//! Reference implementations shared by the integration tests. Each one
//! is written independently of the library code it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write;

use flowsynth::rng::SplitMix64;
use flowsynth::volume::{LabelMap3D, ValueDomain};
use flowsynth::{Dims, Volume3D};
use statrs::function::beta::ln_beta;

/// One line per criterion, written past the test harness's output capture.
pub fn report(id: &str, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id} [{verdict}] {name}: {detail}");
    let _ = out.flush();
}

pub fn random_values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_f64()).collect()
}

pub fn random_volume(seed: u64, dims: Dims) -> Volume3D {
    Volume3D::from_f64(dims, &random_values(seed, dims.len()), ValueDomain::Raw).unwrap()
}

// ------------------------------------------------------------ t distribution

/// `∫_0^x u^(p-1) (1-u)^(q-1) du / B(p, q)` for `x ≤ 1/2` by tanh-sinh
/// quadrature with `u = x / (1 + e^{-π sinh s})`. The lower endpoint is the
/// only possible singularity and is reached in log space.
fn inc_beta_lower(p: f64, q: f64, x: f64) -> f64 {
    assert!((0.0..=0.5).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    let lnb = ln_beta(p, q);
    let ln_x = x.ln();
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let term = |s: f64| -> f64 {
        let y = std::f64::consts::PI * s.sinh();
        let ln_u = ln_x - softplus(-y);
        let u = ln_u.exp();
        if u == 0.0 {
            return 0.0;
        }
        let ln_w = ln_x + std::f64::consts::PI.ln() + s.cosh().ln() - y - 2.0 * softplus(-y);
        ((p - 1.0) * ln_u + (q - 1.0) * (-u).ln_1p() + ln_w - lnb).exp()
    };
    let limit = 4.5f64;
    let mut h = 0.5;
    let mut prev = f64::NAN;
    loop {
        let n = (limit / h).ceil() as i64;
        let sum: f64 = (-n..=n).map(|k| term(k as f64 * h)).sum();
        let value = sum * h;
        if (value - prev).abs() <= 1e-15 * value.abs() || h < 1.0 / 512.0 {
            return value;
        }
        prev = value;
        h /= 2.0;
    }
}

/// Regularized incomplete beta `I_x(p, q)`; the complement form is
/// integrated when `x > 1/2`.
pub fn inc_beta_oracle(p: f64, q: f64, x: f64) -> f64 {
    if x <= 0.5 {
        inc_beta_lower(p, q, x)
    } else {
        1.0 - inc_beta_lower(q, p, 1.0 - x)
    }
}

/// Two-sided p-value `P(|T| ≥ |t|)` for `df` degrees of freedom, integrated
/// on whichever side keeps the upper limit at most 1/2.
pub fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let y = t * t / (df + t * t);
    if x <= 0.5 {
        inc_beta_lower(df / 2.0, 0.5, x)
    } else {
        1.0 - inc_beta_lower(0.5, df / 2.0, y)
    }
}

/// Compensated (Neumaier) sum.
pub fn ksum(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in v {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = ksum(x.iter().copied()) / n;
    let v = ksum(x.iter().map(|a| (a - m) * (a - m))) / (n - 1.0);
    (m, v)
}

/// `(t, df, p)`.
pub fn paired_oracle(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let (m, v) = mean_var(&d);
    let t = m / (v / n).sqrt();
    (t, n - 1.0, t_two_sided_oracle(t, n - 1.0))
}

pub fn welch_oracle(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let (a, b) = (v1 / n1, v2 / n2);
    let t = (m1 - m2) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a.powi(2) / (n1 - 1.0) + b.powi(2) / (n2 - 1.0));
    (t, df, t_two_sided_oracle(t, df))
}

pub fn student_oracle(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let df = n1 + n2 - 2.0;
    let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
    let t = (m1 - m2) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
    (t, df, t_two_sided_oracle(t, df))
}

// ------------------------------------------------------------ BH

/// Brute-force step-up: the largest `k` with `p_(k) ≤ kα/m` over every
/// candidate `k`, and adjusted values as a min over all later ranks.
pub fn bh_oracle(p: &[f64], alpha: f64) -> (Vec<bool>, Vec<f64>) {
    let m = p.len();
    let mut sorted: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut k_max = 0;
    for k in 1..=m {
        if sorted[k - 1].0 <= k as f64 * alpha / m as f64 {
            k_max = k;
        }
    }
    let mut reject = vec![false; m];
    for &(_, i) in &sorted[..k_max] {
        reject[i] = true;
    }
    let mut adjusted = vec![0.0; m];
    for (r, &(_, i)) in sorted.iter().enumerate() {
        let mut best = 1.0f64;
        for (j, &(pj, _)) in sorted.iter().enumerate().skip(r) {
            best = best.min(m as f64 / (j + 1) as f64 * pj);
        }
        adjusted[i] = best;
    }
    (reject, adjusted)
}

// ------------------------------------------------------------ SSIM / ROI

/// Mean local SSIM over every valid `w³` window, each window's population
/// moments accumulated directly from its voxels.
pub fn ssim_oracle(a: &Volume3D, b: &Volume3D, w: usize, k1: f64, k2: f64, range: f64) -> f64 {
    let d = a.dims();
    let (x, y) = (a.to_f64(), b.to_f64());
    let (c1, c2) = ((k1 * range).powi(2), (k2 * range).powi(2));
    let n = (w * w * w) as f64;
    let mut total = Vec::new();
    for z0 in 0..=d.nz - w {
        for y0 in 0..=d.ny - w {
            for x0 in 0..=d.nx - w {
                let mut idx = Vec::with_capacity(w * w * w);
                for z in z0..z0 + w {
                    for yy in y0..y0 + w {
                        for xx in x0..x0 + w {
                            idx.push(d.index(xx, yy, z));
                        }
                    }
                }
                let ma = ksum(idx.iter().map(|&i| x[i])) / n;
                let mb = ksum(idx.iter().map(|&i| y[i])) / n;
                let va = ksum(idx.iter().map(|&i| (x[i] - ma).powi(2))) / n;
                let vb = ksum(idx.iter().map(|&i| (y[i] - mb).powi(2))) / n;
                let cov = ksum(idx.iter().map(|&i| (x[i] - ma) * (y[i] - mb))) / n;
                total.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
    }
    ksum(total.iter().copied()) / total.len() as f64
}

/// Region means by a per-label scan of the whole grid, divided by the
/// reference region's mean.
pub fn roi_oracle(v: &Volume3D, labels: &LabelMap3D, ref_region: u16) -> BTreeMap<u16, f64> {
    let d = v.dims();
    let mut present: Vec<u16> = labels.labels().iter().copied().filter(|&l| l != 0).collect();
    present.sort_unstable();
    present.dedup();
    let mean_of = |label: u16| {
        let mut vals = Vec::new();
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let i = d.index(x, y, z);
                    if labels.labels()[i] == label {
                        vals.push(v.get(x, y, z) as f64);
                    }
                }
            }
        }
        ksum(vals.iter().copied()) / vals.len() as f64
    };
    let r = mean_of(ref_region);
    present.into_iter().map(|l| (l, mean_of(l) / r)).collect()
}
