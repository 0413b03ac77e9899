//! Batch evaluation of question-answering records.
//!
//! Records come from JSONL, embeddings from a JSON sidecar or the seeded
//! hash embedder. The harness scores supplied candidates and never
//! generates answers; the sim and mmr settings only order the records'
//! context passages and record that order in the report.

pub mod error;
pub mod metric;
pub mod rank;
pub mod record;
pub mod report;
pub mod run;

pub use error::{EvalError, Result};
pub use metric::{parse_metric_list, Metric};
pub use rank::{rank_mmr, rank_sim};
pub use record::{load_records, parse_records, EvalRecord};
pub use report::{parse_csv, render_csv, render_markdown, write_output};
pub use run::{run_eval, threads_from_env, EvalConfig, Embeddings, MetricReport, Setting};
