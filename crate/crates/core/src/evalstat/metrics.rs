//! Voxelwise image-quality metrics.
//!
//! SSIM uses a uniform `w³` window at every fully contained position, with
//! population (divide-by-`N`) moments; local sums come from 3D summed-volume
//! tables.

use super::{Result, StatError};
use crate::volume::{Dims, Volume3D};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub ssim: f64,
    /// dB; `f64::INFINITY` when `mse = 0`.
    pub psnr: f64,
    pub mse: f64,
    pub mae: f64,
}

fn pair(a: &Volume3D, b: &Volume3D) -> Result<(Vec<f64>, Vec<f64>)> {
    a.ensure_same_dims(b).map_err(|_| StatError::DimMismatch)?;
    Ok((a.to_f64(), b.to_f64()))
}

pub fn mse(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    let (x, y) = pair(a, b)?;
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
}

pub fn mae(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    let (x, y) = pair(a, b)?;
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

/// `10 log10(max_val² / mse)`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &Volume3D, b: &Volume3D, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Inclusive prefix sums with a zero border: `(nx+1)(ny+1)(nz+1)` entries.
struct SummedVolume {
    sx: usize,
    sy: usize,
    table: Vec<f64>,
}

impl SummedVolume {
    fn new(dims: Dims, values: impl Fn(usize) -> f64) -> Self {
        let (sx, sy, sz) = (dims.nx + 1, dims.ny + 1, dims.nz + 1);
        let mut table = vec![0.0; sx * sy * sz];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let at = |dx: usize, dy: usize, dz: usize| (x + dx) + sx * ((y + dy) + sy * (z + dz));
                    let v = values(dims.index(x, y, z));
                    table[at(1, 1, 1)] = v + table[at(0, 1, 1)] + table[at(1, 0, 1)] + table[at(1, 1, 0)]
                        - table[at(0, 0, 1)]
                        - table[at(0, 1, 0)]
                        - table[at(1, 0, 0)]
                        + table[at(0, 0, 0)];
                }
            }
        }
        Self { sx, sy, table }
    }

    /// Sum over the `w³` box with low corner `(x, y, z)`.
    fn box_sum(&self, x: usize, y: usize, z: usize, w: usize) -> f64 {
        let at = |a: usize, b: usize, c: usize| self.table[a + self.sx * (b + self.sy * c)];
        let (x1, y1, z1) = (x + w, y + w, z + w);
        at(x1, y1, z1) - at(x, y1, z1) - at(x1, y, z1) - at(x1, y1, z) + at(x, y, z1) + at(x, y1, z) + at(x1, y, z)
            - at(x, y, z)
    }
}

/// Mean local SSIM over all valid `window³` positions.
pub fn ssim_with(a: &Volume3D, b: &Volume3D, window: usize, k1: f64, k2: f64, range: f64) -> Result<f64> {
    let (x, y) = pair(a, b)?;
    let dims = a.dims();
    if window == 0 || dims.as_array().iter().any(|&n| n < window) {
        return Err(StatError::TooSmall {
            dims: dims.as_array(),
            window,
        });
    }
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let sa = SummedVolume::new(dims, |i| x[i]);
    let sb = SummedVolume::new(dims, |i| y[i]);
    let saa = SummedVolume::new(dims, |i| x[i] * x[i]);
    let sbb = SummedVolume::new(dims, |i| y[i] * y[i]);
    let sab = SummedVolume::new(dims, |i| x[i] * y[i]);
    let n = (window * window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims.nz - window {
        for yy in 0..=dims.ny - window {
            for xx in 0..=dims.nx - window {
                let mu_a = sa.box_sum(xx, yy, z, window) / n;
                let mu_b = sb.box_sum(xx, yy, z, window) / n;
                // Clamped: the table differences can dip just below zero.
                let var_a = (saa.box_sum(xx, yy, z, window) / n - mu_a * mu_a).max(0.0);
                let var_b = (sbb.box_sum(xx, yy, z, window) / n - mu_b * mu_b).max(0.0);
                let cov = sab.box_sum(xx, yy, z, window) / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// SSIM with a 7³ window, `K1 = 0.01`, `K2 = 0.03`, `L = 1`.
pub fn ssim(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0)
}

pub fn metric_set(a: &Volume3D, b: &Volume3D) -> Result<MetricSet> {
    let m = mse(a, b)?;
    Ok(MetricSet {
        ssim: ssim(a, b)?,
        psnr: psnr_from_mse(m, 1.0),
        mse: m,
        mae: mae(a, b)?,
    })
}
