//! Margins, logit lens, per-layer influence, Brier scores, and the
//! statistics behind the comparison tables.

mod brier;
mod influence;
mod lens;
mod margins;
pub mod report;
pub mod stats;

pub use brier::{brier_score, brier_scores, BrierScores};
pub use influence::{influence_per_layer, InfluenceProfile};
pub use lens::{logit_lens_curve, LayerAccuracyCurve};
pub use margins::{confidence_margin, margin_summary, Histogram, MarginSummary, HISTOGRAM_BINS, MARGIN_CLAMP};
pub use report::{load_results_dir, report_table, MethodResult, ReportCell, ReportTable, ResultsFile};
pub use stats::{
    bootstrap_ci, bootstrap_mean_ci, wilcoxon_one_sided, wilcoxon_signed_rank, BootstrapCi, WilcoxonMethod,
    WilcoxonOptions, WilcoxonResult, ZeroMethod,
};
