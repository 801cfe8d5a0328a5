use std::collections::BTreeMap;

use super::{Result, StatError};
use crate::volume::{LabelMap3D, Volume3D};

pub const BACKGROUND: u16 = 0;

/// Per-region `(voxel sum, voxel count)` over non-background labels.
pub fn region_sums(v: &Volume3D, labels: &LabelMap3D) -> Result<BTreeMap<u16, (f64, usize)>> {
    if v.dims() != labels.dims() {
        return Err(StatError::DimMismatch);
    }
    let mut acc: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for (&l, &x) in labels.labels().iter().zip(v.voxels()) {
        if l != BACKGROUND {
            let e = acc.entry(l).or_default();
            e.0 += x as f64;
            e.1 += 1;
        }
    }
    Ok(acc)
}

/// `mean(v | r) / mean(v | ref_region)` for every non-background region
/// present in `labels` (the reference itself maps to 1).
pub fn roi_uptake(v: &Volume3D, labels: &LabelMap3D, ref_region: u16) -> Result<BTreeMap<u16, f64>> {
    let sums = region_sums(v, labels)?;
    let &(ref_sum, ref_n) = sums.get(&ref_region).ok_or(StatError::EmptyRegion(ref_region))?;
    let ref_mean = ref_sum / ref_n as f64;
    if ref_mean == 0.0 {
        return Err(StatError::ZeroReference(ref_region));
    }
    Ok(sums
        .into_iter()
        .map(|(l, (s, n))| (l, s / n as f64 / ref_mean))
        .collect())
}
