//! Image metrics, regional uptake, t-tests, BH-FDR, and group reports.

mod fdr;
mod metrics;
mod report;
mod roi;
pub mod special;
mod ttest;

use thiserror::Error;

pub use fdr::{bh_fdr, FdrResult};
pub use metrics::{mae, metric_set, mse, psnr, psnr_from_mse, ssim, ssim_with, MetricSet, SSIM_K1, SSIM_K2, SSIM_WINDOW};
pub use report::{
    group_report, violin_tsv, CohortSubject, GroupReport, IndependentTest, RegionRow, ReportConfig, TestKind, REPORT_COLUMNS,
};
pub use roi::{region_sums, roi_uptake, BACKGROUND};
pub use ttest::{paired_ttest, student_ttest, welch_ttest, TTest};

#[derive(Debug, Error)]
pub enum StatError {
    #[error("volume dimensions differ")]
    DimMismatch,
    #[error("dims {dims:?} smaller than the {window}³ window")]
    TooSmall { dims: [usize; 3], window: usize },
    #[error("region {0} has no voxels")]
    EmptyRegion(u16),
    #[error("reference region {0} has zero mean")]
    ZeroReference(u16),
    #[error("zero variance: the test statistic is undefined")]
    DegenerateVariance,
    #[error("need at least 2 observations, got {0}")]
    TooFewSamples(usize),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("p-value {0} outside [0, 1]")]
    BadP(f64),
    #[error("alpha {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("{0}")]
    BadGroups(String),
}

pub type Result<T> = std::result::Result<T, StatError>;
