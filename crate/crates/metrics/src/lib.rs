//! Reference-based text metrics.
//!
//! ROUGE works on token sequences of any hashable type. The embedding
//! metrics (BERTScore, MoverScore, WMD/SMD) read vectors from
//! [`EmbeddedText`] and never run an encoder themselves.

pub mod bertscore;
pub mod bleurt;
pub mod embedding;
pub mod error;
pub mod idf;
pub mod moverscore;
pub mod rouge;
pub mod tokenize;
pub mod transport;

pub use bertscore::{bertscore, Baseline};
pub use bleurt::{bleurt_pretrain_loss, LossKind, PretrainLossSpec, PretrainTask};
pub use embedding::{EmbeddedText, HashEmbedder, Sidecar, SidecarEntry};
pub use error::{MetricError, Result};
pub use idf::{build_idf, IdfTable};
pub use moverscore::{moverscore, ngram_embed, power_mean, wmd_variant, MoverScore, WmdVariant};
pub use rouge::{rouge_l, rouge_n, rouge_s, rouge_su, rouge_w, Score, SuVariant};
pub use tokenize::{tokenize, TokenizedText};
pub use transport::{certify, emd_exact, emd_sinkhorn, DualCertificate, SinkhornPlan, TransportPlan, TransportProblem};
