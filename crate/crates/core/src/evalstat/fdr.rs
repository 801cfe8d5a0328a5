use super::{Result, StatError};

#[derive(Debug, Clone, PartialEq)]
pub struct FdrResult {
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini–Hochberg step-up: with `p` sorted ascending,
/// `adj_(i) = min_{j ≥ i} (m / j) · p_(j)` clipped to 1, returned in input
/// order; `reject_k ⇔ adj_k ≤ α`.
pub fn bh_fdr(p: &[f64], alpha: f64) -> Result<FdrResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatError::BadAlpha(alpha));
    }
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StatError::BadP(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &k) in order.iter().enumerate().rev() {
        let scaled = m as f64 / (rank0 + 1) as f64 * p[k];
        running = running.min(scaled);
        adjusted[k] = running;
    }
    let reject = adjusted.iter().map(|&a| a <= alpha).collect();
    Ok(FdrResult { adjusted, reject })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = bh_fdr(&[0.01, 0.02, 0.03, 0.04], 0.05).unwrap();
        assert!(r.reject.iter().all(|&b| b));
        let r = bh_fdr(&[1.0; 5], 0.05).unwrap();
        assert!(r.reject.iter().all(|&b| !b));
        assert!(r.adjusted.iter().all(|&a| a == 1.0));
        let r = bh_fdr(&[0.03], 0.05).unwrap();
        assert_eq!(r.adjusted, vec![0.03]);
        assert_eq!(r.reject, vec![true]);
        assert!(!bh_fdr(&[0.07], 0.05).unwrap().reject[0]);
        assert!(matches!(bh_fdr(&[1.2], 0.05), Err(StatError::BadP(_))));
        assert!(matches!(bh_fdr(&[0.2], 1.0), Err(StatError::BadAlpha(_))));
        assert!(bh_fdr(&[], 0.05).unwrap().adjusted.is_empty());
    }
}
