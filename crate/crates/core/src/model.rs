//! A stack of encoder blocks as an autoregressive language model.
//!
//! The embedding table doubles as the output projection, and a stateless
//! layer norm sits between the last block and the logits.
//!
//! # Checkpoint layout
//!
//! ```text
//! b"BPARS1"
//! u64 LE        number of config integers that follow
//! u64 LE × k    vocab, blocks, d, h, z, v, chunk, groups, norm (0 = timestep,
//!               1 = layer), causal (0/1), norm_eps bits, label count, labels…
//! f64 LE × …    embedding, then each block's tensors in declaration order,
//!               then final gain and final bias
//! ```
//!
//! Labels are an optional token table (the trainer stores byte values).

use std::io::{Read, Write};
use std::path::Path;

use crate::attention::AttentionStats;
use crate::autodiff::{Graph, NodeId};
use crate::block::{encoder_block_graph, BlockConfig, BlockNodes, BlockParams, BlockState, NormKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BPARS1";

/// Final-norm epsilon.
const FINAL_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub blocks: usize,
    pub block: BlockConfig,
    /// Std of the embedding initialization.
    pub embed_std: f64,
}

impl ModelConfig {
    pub fn new(vocab: usize, d: usize, blocks: usize) -> Self {
        Self {
            vocab,
            blocks,
            block: BlockConfig::new(d),
            embed_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Parameter(format!("vocab must be ≥ 2, got {}", self.vocab)));
        }
        if self.blocks == 0 {
            return Err(Error::Parameter("need at least one block".into()));
        }
        self.block.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel<T> {
    pub config: ModelConfig,
    /// `[vocab × d]`, tied with the output projection.
    pub embedding: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

/// Recurrent state of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub blocks: Vec<BlockState<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn initial(cfg: &ModelConfig) -> Self {
        Self {
            blocks: (0..cfg.blocks).map(|_| BlockState::initial(&cfg.block)).collect(),
        }
    }

    /// Doubles (counts included) carried by this state.
    pub fn payload_len(&self) -> usize {
        self.blocks.iter().map(BlockState::payload_len).sum()
    }
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub embedding: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
}

impl ModelNodes {
    /// Same order as [`LmModel::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for b in &self.blocks {
            out.extend(b.ids());
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }
}

impl<T: Scalar> LmModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.block.d;
        let embedding = Tensor::random_normal(&[config.vocab, d], config.embed_std, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams::init(&config.block, &mut rng.fork()))
            .collect();
        Ok(Self {
            embedding,
            blocks,
            final_gain: Tensor::full(&[d], T::one()),
            final_bias: Tensor::zeros(&[d]),
            config,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, g: &mut Graph<T>) -> ModelNodes {
        ModelNodes {
            embedding: g.param(self.embedding.clone()),
            blocks: self.blocks.iter().map(|b| b.register(g)).collect(),
            final_gain: g.param(self.final_gain.clone()),
            final_bias: g.param(self.final_bias.clone()),
        }
    }

    pub fn register_constant(&self, g: &mut Graph<T>) -> ModelNodes {
        ModelNodes {
            embedding: g.constant(self.embedding.clone()),
            blocks: self.blocks.iter().map(|b| b.register_constant(g)).collect(),
            final_gain: g.constant(self.final_gain.clone()),
            final_bias: g.constant(self.final_bias.clone()),
        }
    }

    /// Logits node `[n × vocab]` for `tokens`, starting from `state`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        tokens: &[usize],
        state: &ModelState<T>,
        stats: &mut AttentionStats,
    ) -> Result<(NodeId, ModelState<T>)> {
        if state.blocks.len() != self.blocks.len() {
            return Err(Error::State(format!(
                "state has {} blocks, model has {}",
                state.blocks.len(),
                self.blocks.len()
            )));
        }
        let mut x = g.gather(nodes.embedding, tokens)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (bn, s) in nodes.blocks.iter().zip(&state.blocks) {
            let (y, s_out) = encoder_block_graph(g, x, bn, &self.config.block, s, stats)?;
            x = y;
            out.push(s_out);
        }
        let h = g.layer_norm(x, Some(nodes.final_gain), Some(nodes.final_bias), T::lit(FINAL_EPS))?;
        let et = g.transpose(nodes.embedding)?;
        let logits = g.matmul(h, et)?;
        Ok((logits, ModelState { blocks: out }))
    }

    /// Logits from the initial state.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        Ok(self.logits_with_state(tokens, &ModelState::initial(&self.config))?.0)
    }

    pub fn logits_with_state(&self, tokens: &[usize], state: &ModelState<T>) -> Result<(Tensor<T>, ModelState<T>)> {
        let mut g = Graph::new();
        let nodes = self.register_constant(&mut g);
        let (l, s) = self.forward_graph(&mut g, &nodes, tokens, state, &mut AttentionStats::default())?;
        Ok((g.value(l).clone(), s))
    }

    /// Mean next-token cross-entropy of `tokens[1..]` given `tokens[..n-1]`.
    pub fn window_loss(&self, tokens: &[usize]) -> Result<T> {
        if tokens.len() < 2 {
            return Err(Error::Input("a window needs at least two tokens".into()));
        }
        let mut g = Graph::new();
        let nodes = self.register_constant(&mut g);
        let n = tokens.len() - 1;
        let (l, _) = self.forward_graph(
            &mut g,
            &nodes,
            &tokens[..n],
            &ModelState::initial(&self.config),
            &mut AttentionStats::default(),
        )?;
        let loss = g.cross_entropy(l, &tokens[1..])?;
        Ok(g.value(loss).data()[0])
    }
}

fn config_ints(cfg: &ModelConfig, labels: &[u64]) -> Vec<u64> {
    let b = &cfg.block;
    let mut v = vec![
        cfg.vocab as u64,
        cfg.blocks as u64,
        b.d as u64,
        b.h as u64,
        b.z as u64,
        b.v as u64,
        b.chunk as u64,
        b.groups as u64,
        match b.norm {
            NormKind::Timestep => 0,
            NormKind::Layer => 1,
        },
        b.causal as u64,
        b.norm_eps.to_bits(),
        labels.len() as u64,
    ];
    v.extend_from_slice(labels);
    v
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

impl LmModel<f64> {
    pub fn write_checkpoint(&self, w: &mut impl Write, labels: &[u64]) -> Result<()> {
        let ints = config_ints(&self.config, labels);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(ints.len() as u64).to_le_bytes())?;
        for i in ints {
            w.write_all(&i.to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Returns the model and its label table.
    pub fn read_checkpoint(r: &mut impl Read) -> Result<(Self, Vec<u64>)> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let k = read_u64(r)? as usize;
        if !(12..=12 + (1 << 20)).contains(&k) {
            return Err(Error::Checkpoint(format!("implausible config length {k}")));
        }
        let ints: Vec<u64> = (0..k).map(|_| read_u64(r)).collect::<Result<_>>()?;
        let us = |i: usize| ints[i] as usize;
        let norm = match ints[8] {
            0 => NormKind::Timestep,
            1 => NormKind::Layer,
            other => return Err(Error::Checkpoint(format!("unknown norm kind {other}"))),
        };
        let labels_len = us(11);
        if k != 12 + labels_len {
            return Err(Error::Checkpoint(format!("label count {labels_len} disagrees with header length {k}")));
        }
        let config = ModelConfig {
            vocab: us(0),
            blocks: us(1),
            block: BlockConfig {
                d: us(2),
                h: us(3),
                z: us(4),
                v: us(5),
                chunk: us(6),
                groups: us(7),
                norm,
                causal: ints[9] != 0,
                norm_eps: f64::from_bits(ints[10]),
            },
            embed_std: 0.0,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        let mut model = LmModel::<f64>::init(config, 0)?;
        for t in model.tensors_mut() {
            let mut buf = vec![0u8; 8 * t.len()];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
            for (slot, c) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *slot = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok((model, ints[12..].to_vec()))
    }

    pub fn save(&self, path: &Path, labels: &[u64]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f, labels)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u64>)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}
