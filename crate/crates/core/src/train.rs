//! Next-token training with Adam on small token streams.
//!
//! The corpus is cut into consecutive windows of `window + 1` tokens that
//! overlap by one (inputs `s..s+window`, targets shifted by one). Each step
//! draws `batch` windows with the seeded generator; a corpus with at most
//! `batch` windows is used whole at every step, so its loss history is that
//! of full-batch descent. Every window starts from the initial recurrent
//! state, and evaluation uses the same windows.

use crate::attention::AttentionStats;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{LmModel, ModelState};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Predicted tokens per window.
    pub window: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            window: 16,
            batch: 4,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport<T> {
    /// Batch loss before each update.
    pub losses: Vec<T>,
    /// Mean loss over all windows after the last update.
    pub final_eval_loss: T,
}

/// Start offsets of the evaluation windows.
pub fn window_starts(len: usize, window: usize) -> Vec<usize> {
    (0..len.saturating_sub(1)).step_by(window.max(1)).collect()
}

fn window_at(corpus: &[usize], start: usize, window: usize) -> &[usize] {
    &corpus[start..(start + window + 1).min(corpus.len())]
}

struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(cfg: AdamConfig, shapes: &[&Tensor<T>]) -> Self {
        let zeros = || shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::lit(self.cfg.lr), T::lit(self.cfg.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in iter {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Token-weighted mean cross-entropy over the given windows, plus gradients
/// when `with_grad` is set.
fn batch_loss<T: Scalar>(
    model: &LmModel<T>,
    corpus: &[usize],
    starts: &[usize],
    window: usize,
    with_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>)> {
    let mut g = Graph::new();
    let nodes = if with_grad {
        model.register(&mut g)
    } else {
        model.register_constant(&mut g)
    };
    let windows: Vec<&[usize]> = starts.iter().map(|&s| window_at(corpus, s, window)).collect();
    let total: usize = windows.iter().map(|w| w.len() - 1).sum();
    let mut acc = None;
    for w in windows {
        let n = w.len() - 1;
        let (logits, _) = model.forward_graph(
            &mut g,
            &nodes,
            &w[..n],
            &ModelState::initial(&model.config),
            &mut AttentionStats::default(),
        )?;
        let ce = g.cross_entropy(logits, &w[1..])?;
        let part = g.scale(ce, T::from_count(n) / T::from_count(total));
        acc = Some(match acc {
            None => part,
            Some(a) => g.add(a, part)?,
        });
    }
    let loss = acc.ok_or_else(|| Error::Input("no windows to evaluate".into()))?;
    let value = g.value(loss).data()[0];
    if !with_grad {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let tensors = model.tensors();
    let out = nodes
        .ids()
        .iter()
        .zip(&tensors)
        .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
        .collect();
    Ok((value, Some(out)))
}

pub fn train<T: Scalar>(model: &mut LmModel<T>, corpus: &[usize], cfg: &TrainConfig) -> Result<TrainReport<T>> {
    if cfg.steps == 0 {
        return Err(Error::Parameter("steps must be ≥ 1".into()));
    }
    if cfg.window == 0 || cfg.batch == 0 {
        return Err(Error::Parameter("window and batch must be ≥ 1".into()));
    }
    if corpus.len() < cfg.window + 1 {
        return Err(Error::Input(format!(
            "corpus of {} tokens is shorter than one window of {}",
            corpus.len(),
            cfg.window + 1
        )));
    }
    let all = window_starts(corpus.len(), cfg.window);
    let mut rng = Rng::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam, &model.tensors());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if all.len() <= cfg.batch {
            all.clone()
        } else {
            (0..cfg.batch).map(|_| all[rng.below(all.len())]).collect()
        };
        let (loss, grads) = batch_loss(model, corpus, &batch, cfg.window, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        losses.push(loss);
        adam.step(model.tensors_mut(), &grads.expect("requested gradients"));
    }
    let final_eval_loss = evaluate_loss(model, corpus, cfg.window)?;
    Ok(TrainReport {
        losses,
        final_eval_loss,
    })
}

/// Mean next-token cross-entropy over every window of the corpus.
pub fn evaluate_loss<T: Scalar>(model: &LmModel<T>, corpus: &[usize], window: usize) -> Result<T> {
    if corpus.len() < 2 {
        return Err(Error::Input("corpus needs at least two tokens".into()));
    }
    if window == 0 {
        return Err(Error::Parameter("window must be ≥ 1".into()));
    }
    let starts = window_starts(corpus.len(), window);
    Ok(batch_loss(model, corpus, &starts, window, false)?.0)
}

pub fn perplexity<T: Scalar>(model: &LmModel<T>, corpus: &[usize], window: usize) -> Result<T> {
    Ok(evaluate_loss(model, corpus, window)?.exp())
}

/// Byte-level vocabulary: the sorted distinct bytes of a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteVocab {
    bytes: Vec<u8>,
}

impl ByteVocab {
    pub fn from_text(text: &[u8]) -> Self {
        let mut bytes = text.to_vec();
        bytes.sort_unstable();
        bytes.dedup();
        Self { bytes }
    }

    pub fn from_labels(labels: &[u64]) -> Result<Self> {
        let bytes = labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::Checkpoint(format!("label {l} is not a byte"))))
            .collect::<Result<Vec<u8>>>()?;
        if bytes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Checkpoint("byte labels must be strictly increasing".into()));
        }
        Ok(Self { bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn labels(&self) -> Vec<u64> {
        self.bytes.iter().map(|&b| b as u64).collect()
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<usize>> {
        text.iter()
            .map(|b| {
                self.bytes
                    .binary_search(b)
                    .map_err(|_| Error::Input(format!("byte 0x{b:02x} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.bytes[i]).collect()
    }
}
