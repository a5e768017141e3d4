//! Downstream evaluation: held-out MLM metrics, a linear probe, synonym
//! robustness, the ablation grid and curve export.

mod ablation;
mod curves;
mod mlm;
mod probe;
mod robustness;
mod synonyms;

pub use ablation::{ablation_grid, summarize, write_ablation_csv, AblationRow, AblationSetup, Variant, ABLATION_HEADER};
pub use curves::{curve_export, read_metrics, write_curves, CurveExport, CurveRow, MetricsTable, CURVES_HEADER};
pub use mlm::{mlm_eval, MlmMetrics};
pub use probe::{features, fit_probe, majority_accuracy, probe_train_eval, Example, LinearHead, Probe, ProbeConfig, ProbeMode, ProbeTask};
pub use robustness::{
    robustness_eval, robustness_of, write_robustness_csv, RobustnessConfig, RobustnessReport, ROBUSTNESS_HEADER,
};
pub use synonyms::{is_sound_substitution, synonym_swap, SynonymTable};
