//! Routing-trace ingestion and aggregate routing analyses.

pub mod counts;
pub mod difficult;
pub mod fixtures;
pub mod heatmap;
pub mod trace;

pub use counts::{count_routing, CountKey, CountRow, CountTable};
pub use difficult::{
    difficult_token_expert_distribution, difficult_token_table, DifficultTokenReport, SizeClasses,
    ThresholdRow,
};
pub use heatmap::Heatmap;
pub use trace::{RoutingTrace, TraceHeader, TraceRecord};
