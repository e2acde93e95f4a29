//! Coverage and sharpness metrics, method reports, the comparison table and
//! SVG plots.

pub mod metrics;
pub mod plot;
pub mod report;

pub use metrics::{
    band_coverage, band_membership, coverage_metrics, mean_interval_score, mean_volume,
    mean_widths, volume_estimate, CoverageMetrics, Region, VolumeEstimate,
};
pub use plot::{band_polygon, band_svg, topdown_svg, write_svgs, BandSeries, Outline};
pub use report::{
    compare_methods, timed_median, ComparisonTable, MethodReport, Timings, REPORT_SCHEMA,
};
