//! Evaluation harness: BLEU, task forget-quality metrics, model utility,
//! Pareto dominance, the prefix-injection attack, and report CSV schemas.
//!
//! All metrics are pure functions of (model, records); reported means reduce
//! per-sample scores in record order.

mod attack;
mod bleu;
mod metrics;
mod pareto;
mod report;

pub use attack::{prefix_attack, AttackOutcome, AttackSpec, FractionScore};
pub use bleu::{bleu, BleuConfig};
pub use metrics::{
    forget_quality_api, forget_quality_copyright, forget_quality_insecure, model_utility,
    pass_rate, scan_hits, EvalRecord, FqReport, GENERATION_SLACK,
};
pub use pareto::{dominates, pdr, EvalPoint, PdrMode};
pub use report::{
    read_report_rows, write_pdr_rows, write_report_rows, PdrRow, ReportRow, REPORT_COLUMNS,
};
