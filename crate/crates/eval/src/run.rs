//! Per-item scoring.
//!
//! Items are scored in parallel and sorted by id before anything is
//! aggregated, so reports do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;

use emagate_metrics::moverscore::sentence_embedding;
use emagate_metrics::rouge::{rouge_l, rouge_n, rouge_s, rouge_su, rouge_w, SuVariant};
use emagate_metrics::{
    bertscore, build_idf, moverscore, tokenize, wmd_variant, EmbeddedText, HashEmbedder, IdfTable, MetricError,
    Sidecar, SidecarEntry, WmdVariant,
};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{EvalError, Result};
use crate::metric::Metric;
use crate::rank::{rank_mmr, rank_sim};
use crate::record::EvalRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// No context ranking.
    Zs,
    Sim,
    Mmr,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Zs => "zs",
            Setting::Sim => "sim",
            Setting::Mmr => "mmr",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub enum Embeddings {
    None,
    Sidecar(Sidecar),
    Hash(HashEmbedder),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// F-measure β for ROUGE-L/W/S/SU.
    pub beta: f64,
    pub alpha_w: f64,
    /// n-gram order for MoverScore.
    pub ngram: usize,
    /// Layer power-mean exponent for MoverScore, WMD and SMD.
    pub power: f64,
    /// 1-based BERTScore layer; the default depends on the layer count.
    pub bert_layer: Option<usize>,
    /// Weight embedding metrics by idf over the references of the run.
    pub idf: bool,
    pub mmr_lambda: f64,
    /// Contexts kept by MMR; all of them when unset.
    pub mmr_k: Option<usize>,
    pub seed: u64,
    pub hash_layers: usize,
    pub hash_width: usize,
    /// Worker threads; the rayon default when unset.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha_w: 1.2,
            ngram: 1,
            power: 1.0,
            bert_layer: None,
            idf: false,
            mmr_lambda: 0.5,
            mmr_k: None,
            seed: 17,
            hash_layers: 4,
            hash_width: 32,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemScores {
    pub id: String,
    /// Aligned with [`MetricReport::metrics`].
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub setting: Setting,
    pub seed: u64,
    /// First 16 hex digits of the SHA-256 of the canonical configuration.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Row label in comparison tables, the setting name by default.
    pub label: String,
    pub metrics: Vec<Metric>,
    /// Sorted by id.
    pub rows: Vec<ItemScores>,
    /// Context order per item for the sim and mmr settings, sorted by id.
    pub rankings: Vec<(String, Vec<usize>)>,
    pub meta: RunMetadata,
}

/// Per-item scores are printed with this many decimals.
pub const SCORE_DECIMALS: usize = 6;

pub fn format_score(x: f64) -> String {
    format!("{x:.SCORE_DECIMALS$}")
}

impl MetricReport {
    /// `round(100·mean, 2)` over the printed per-item scores, so the cell
    /// can be recomputed from the emitted rows.
    pub fn aggregate(&self, metric: usize) -> f64 {
        let printed: Vec<f64> = self
            .rows
            .iter()
            .map(|r| format_score(r.scores[metric]).parse().expect("formatted float"))
            .collect();
        aggregate_of(&printed)
    }

    pub fn aggregate_cell(&self, metric: usize) -> String {
        format!("{:.2}", self.aggregate(metric))
    }
}

/// Mean ×100 rounded to two decimals; NaN for no items.
pub fn aggregate_of(scores: &[f64]) -> f64 {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    format!("{:.2}", 100.0 * mean).parse().expect("formatted float")
}

fn config_hash(metrics: &[Metric], setting: Setting, cfg: &EvalConfig, embeddings: &Embeddings) -> String {
    let names: Vec<&str> = metrics.iter().map(|m| m.name()).collect();
    let embed = match embeddings {
        Embeddings::None => "none".to_owned(),
        Embeddings::Sidecar(_) => "sidecar".to_owned(),
        Embeddings::Hash(h) => format!("hash({},{},{})", h.seed, h.layers, h.width),
    };
    let canonical = format!(
        "metrics={};setting={};beta={:?};alpha_w={:?};ngram={};power={:?};layer={:?};idf={};lambda={:?};k={:?};seed={};embed={embed}",
        names.join(","),
        setting,
        cfg.beta,
        cfg.alpha_w,
        cfg.ngram,
        cfg.power,
        cfg.bert_layer,
        cfg.idf,
        cfg.mmr_lambda,
        cfg.mmr_k,
        cfg.seed,
    );
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Embedded sides of one record.
fn item_embeddings(rec: &EvalRecord, embeddings: &Embeddings, tokens: &[Vec<String>; 2]) -> Option<SidecarEntry> {
    match embeddings {
        Embeddings::None => None,
        Embeddings::Sidecar(s) => s.get(&rec.id).cloned(),
        Embeddings::Hash(h) => Some(SidecarEntry {
            candidate: h.embed(&tokens[0]),
            reference: h.embed(&tokens[1]),
            question: Some(h.embed(&tokenize(&rec.question).tokens)),
            contexts: rec.contexts.iter().map(|c| h.embed(&tokenize(c).tokens)).collect(),
        }),
    }
}

/// Mean layer-averaged token vector, the text vector used for ranking.
fn text_vector(t: &EmbeddedText) -> std::result::Result<Vec<f64>, MetricError> {
    let mut v = sentence_embedding(t, None, 1.0)?;
    let n = t.len() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

struct Item {
    id: String,
    scores: Vec<f64>,
    ranking: Option<Vec<usize>>,
}

fn score_item(
    rec: &EvalRecord,
    metrics: &[Metric],
    embeddings: &Embeddings,
    setting: Setting,
    cfg: &EvalConfig,
    idf: Option<&IdfTable>,
) -> Result<Item> {
    let tokens = [tokenize(&rec.candidate).tokens, tokenize(&rec.reference).tokens];
    let (c, r) = (&tokens[0], &tokens[1]);
    let emb = item_embeddings(rec, embeddings, &tokens);
    let mut scores = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let wrap = |source: MetricError| EvalError::Metric {
            id: rec.id.clone(),
            metric: m.name(),
            source,
        };
        let need = || emb.as_ref().expect("embeddings checked before scoring");
        let s = match m {
            Metric::Rouge1 => rouge_n(c, &[r], 1).map(|s| s.f),
            Metric::Rouge2 => rouge_n(c, &[r], 2).map(|s| s.f),
            Metric::RougeL => rouge_l(c, r, cfg.beta).map(|s| s.f),
            Metric::RougeW => rouge_w(c, r, cfg.alpha_w, cfg.beta).map(|s| s.f),
            Metric::RougeS => rouge_s(c, r, cfg.beta, None).map(|s| s.f),
            Metric::RougeSu => rouge_su(c, r, cfg.beta, SuVariant::Sum),
            Metric::BertScore => bertscore(&need().candidate, &need().reference, cfg.bert_layer, idf, None).map(|s| s.f),
            Metric::MoverScore => {
                moverscore(&need().candidate, &need().reference, idf, idf, cfg.ngram, cfg.power).map(|s| s.score)
            }
            Metric::Wmd => wmd_variant(&need().candidate, &need().reference, WmdVariant::Word, idf, idf, cfg.power),
            Metric::Smd => wmd_variant(&need().candidate, &need().reference, WmdVariant::Sentence, idf, idf, cfg.power),
        }
        .map_err(wrap)?;
        scores.push(s);
    }
    let ranking = match (setting, &emb) {
        (Setting::Zs, _) => None,
        (_, None) => unreachable!("ranking settings require embeddings"),
        (_, Some(e)) if e.contexts.is_empty() => Some(Vec::new()),
        (_, Some(e)) => {
            let wrap = |source| EvalError::Metric {
                id: rec.id.clone(),
                metric: "ranking",
                source,
            };
            let q = e
                .question
                .as_ref()
                .ok_or_else(|| EvalError::Config(format!("no question embedding for {}", rec.id)))?;
            let q = text_vector(q).map_err(wrap)?;
            let ctx = e.contexts.iter().map(text_vector).collect::<std::result::Result<Vec<_>, _>>().map_err(wrap)?;
            Some(match setting {
                Setting::Sim => rank_sim(&q, &ctx)?,
                _ => rank_mmr(&q, &ctx, cfg.mmr_lambda, cfg.mmr_k.unwrap_or(ctx.len()).min(ctx.len()))?,
            })
        }
    };
    Ok(Item {
        id: rec.id.clone(),
        scores,
        ranking,
    })
}

fn check_config(
    records: &[EvalRecord],
    metrics: &[Metric],
    embeddings: &Embeddings,
    setting: Setting,
    cfg: &EvalConfig,
) -> Result<()> {
    if metrics.is_empty() {
        return Err(EvalError::Config("no metrics selected".into()));
    }
    if !(cfg.beta >= 0.0) {
        return Err(EvalError::Config(format!("beta must be ≥ 0, got {}", cfg.beta)));
    }
    if !(0.0..=1.0).contains(&cfg.mmr_lambda) {
        return Err(EvalError::Config(format!("mmr lambda must lie in [0, 1], got {}", cfg.mmr_lambda)));
    }
    if cfg.ngram == 0 {
        return Err(EvalError::Config("ngram must be ≥ 1".into()));
    }
    if cfg.threads == Some(0) {
        return Err(EvalError::Config("thread count must be ≥ 1".into()));
    }
    let needs = metrics.iter().any(|m| m.needs_embeddings()) || setting != Setting::Zs;
    if !needs {
        return Ok(());
    }
    let mut missing: Vec<&str> = match embeddings {
        Embeddings::Hash(_) => Vec::new(),
        Embeddings::None => records.iter().map(|r| r.id.as_str()).collect(),
        Embeddings::Sidecar(s) => records
            .iter()
            .filter(|r| match s.get(&r.id) {
                None => true,
                Some(e) => setting != Setting::Zs && !r.contexts.is_empty() && e.question.is_none(),
            })
            .map(|r| r.id.as_str())
            .collect(),
    };
    missing.sort_unstable();
    if !missing.is_empty() {
        let why = if setting == Setting::Zs {
            "embedding metrics"
        } else {
            "embedding metrics or context ranking"
        };
        return Err(EvalError::Config(format!(
            "missing embeddings for {why}: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

pub fn run_eval(
    records: &[EvalRecord],
    metrics: &[Metric],
    embeddings: &Embeddings,
    setting: Setting,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    check_config(records, metrics, embeddings, setting, cfg)?;
    let idf = cfg.idf.then(|| {
        let refs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.reference).tokens).collect();
        build_idf(&refs)
    });
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| EvalError::Config(format!("thread pool: {e}")))?;
    let items: Vec<Item> = pool.install(|| {
        records
            .par_iter()
            .map(|r| score_item(r, metrics, embeddings, setting, cfg, idf.as_ref()))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut by_id: BTreeMap<String, Item> = items.into_iter().map(|i| (i.id.clone(), i)).collect();
    let rankings = by_id
        .iter_mut()
        .filter_map(|(id, i)| i.ranking.take().map(|r| (id.clone(), r)))
        .collect();
    let rows = by_id
        .into_values()
        .map(|i| ItemScores {
            id: i.id,
            scores: i.scores,
        })
        .collect();
    Ok(MetricReport {
        label: setting.name().to_owned(),
        metrics: metrics.to_vec(),
        rows,
        rankings,
        meta: RunMetadata {
            setting,
            seed: cfg.seed,
            config_hash: config_hash(metrics, setting, cfg, embeddings),
        },
    })
}

/// `BIOPARS_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("BIOPARS_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(EvalError::Config(format!("BIOPARS_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
