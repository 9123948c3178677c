//! Metrics, evaluation protocols, result matrices and reports.

mod matrix;
mod metrics;
mod protocol;
pub mod report;

pub use matrix::{parse_matrix_csv, EvalCell, EvalMatrix, Metric};
pub use metrics::{accuracy, average_precision};
pub use protocol::{run_protocol, sweep_timestep, ProtocolData, ProtocolRun, SweepPoint, TrainedRow, ALL_GENERATORS};
