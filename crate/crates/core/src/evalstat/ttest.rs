use super::special::student_t_two_sided;
use super::{Result, StatError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(StatError::TooFewSamples(n));
    }
    Ok(())
}

/// Paired test on `x - y`, `df = n - 1`.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(StatError::LengthMismatch(x.len(), y.len()));
    }
    check_len(x.len())?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == d[0]) {
        return Err(StatError::DegenerateVariance);
    }
    let n = d.len() as f64;
    let (m, v) = mean_var(&d);
    let t = m / (v / n).sqrt();
    let df = n - 1.0;
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

fn degenerate(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Welch's unequal-variance test with Welch–Satterthwaite `df`.
pub fn welch_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    check_len(x.len())?;
    check_len(y.len())?;
    if degenerate(x) && degenerate(y) {
        return Err(StatError::DegenerateVariance);
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let (s1, s2) = (v1 / n1, v2 / n2);
    let se2 = s1 + s2;
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

/// Student's pooled-variance test, `df = n1 + n2 - 2`.
pub fn student_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    check_len(x.len())?;
    check_len(y.len())?;
    if degenerate(x) && degenerate(y) {
        return Err(StatError::DegenerateVariance);
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (m1, v1) = mean_var(x);
    let (m2, v2) = mean_var(y);
    let df = n1 + n2 - 2.0;
    let pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
    let t = (m1 - m2) / (pooled * (1.0 / n1 + 1.0 / n2)).sqrt();
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            paired_ttest(&x, &[1.5, 2.5, 3.5, 4.5]),
            Err(StatError::DegenerateVariance)
        ));
        assert!(matches!(paired_ttest(&x, &x), Err(StatError::DegenerateVariance)));
        let y = [1.1, 2.1, 2.9, 4.2];
        let a = paired_ttest(&x, &y).unwrap();
        let b = paired_ttest(&y, &x).unwrap();
        assert_eq!(a.t, -b.t);
        assert_eq!(a.p, b.p);
        assert_eq!(a.df, 3.0);
        assert!(matches!(paired_ttest(&[1.0], &[2.0]), Err(StatError::TooFewSamples(1))));
    }

    #[test]
    fn welch_examples() {
        let x = [0.3, 1.2, 2.5, 0.7];
        let r = welch_ttest(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        // Equal variances and sizes collapse to the pooled df.
        let y = [1.3, 2.2, 3.5, 1.7];
        let w = welch_ttest(&x, &y).unwrap();
        assert!((w.df - 6.0).abs() < 1e-12);
        let s = student_ttest(&x, &y).unwrap();
        assert!((w.t - s.t).abs() < 1e-12);
        assert!(matches!(
            welch_ttest(&[1.0, 1.0], &[2.0, 2.0]),
            Err(StatError::DegenerateVariance)
        ));
    }
}
