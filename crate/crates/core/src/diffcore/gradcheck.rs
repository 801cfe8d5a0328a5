use super::{Result, Tape, Tensor, Var};

/// Denominator floor for relative errors, so that gradients which are zero
/// on both sides compare as equal instead of dividing noise by noise.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates that were checked.
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`
    /// over coordinates not flagged as kinks.
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    /// Coordinates where the central difference at `eps` and `eps / 2`
    /// disagree by more than `tol`: the step straddles a non-differentiable
    /// point (e.g. a relu hinge) and the comparison is skipped.
    pub kinks: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

fn central(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, i: usize, eps: f64) -> Result<f64> {
    let mut plus = x.clone();
    plus.data_mut()[i] += eps;
    let mut minus = x.clone();
    minus.data_mut()[i] -= eps;
    Ok((eval(f, &plus)? - eval(f, &minus)?) / (2.0 * eps))
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// finite differences on every coordinate.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, eps, tol)
}

/// As [`grad_check`], restricted to `coords`.
pub fn grad_check_coords(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let full = tape.grad_or_zero(v);

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut kinks = Vec::new();
    let mut max_rel_err = 0.0;
    let mut worst_coord = None;
    for &i in coords {
        let a = full[i];
        let n = central(&f, x, i, eps)?;
        analytic.push(a);
        numeric.push(n);
        let err = relative_error(a, n);
        if err > tol {
            let n_half = central(&f, x, i, eps / 2.0)?;
            if relative_error(n, n_half) > tol {
                kinks.push(i);
                continue;
            }
        }
        if err > max_rel_err {
            max_rel_err = err;
            worst_coord = Some(i);
        }
    }
    Ok(GradCheckReport {
        coords: coords.to_vec(),
        analytic,
        numeric,
        max_rel_err,
        worst_coord,
        kinks,
        tol,
    })
}
