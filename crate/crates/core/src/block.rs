//! The gated-attention encoder block.
//!
//! ```text
//! X' = CEMA(Norm(X))
//! Z' = l2norm(X' W_z + b_z)           Q = κ_q ⊙ Z' + μ_q,  K = κ_k ⊙ Z' + μ_k
//! V  = swish(X' W_v + b_v)            O = chunked softmax(QKᵀ) V
//! r  = σ(X' W_r + b_r)                u = σ(X' W_u + b_u)
//! Ĥ  = swish(X' W_h + (r ⊙ O) W_o + b_h)
//! A  = u ⊙ Ĥ + (1 − u) ⊙ X'
//! Ŷ  = A + X,    Y = FFN(Norm(Ŷ)) + Ŷ
//! ```
//!
//! `W_o` maps the value width back to the model width, so the gated output
//! enters the first residual hop already projected.

use crate::attention::AttentionStats;
use crate::autodiff::{CemaNodes, Graph, NodeId};
use crate::ema::{CemaParams, EmaState};
use crate::error::{Error, Result};
use crate::norm::{GroupSpec, NormState, DEFAULT_EPS};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor for the row norm in the shared-representation normalization.
pub const L2_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Causal cumulative statistics; carries state across chunks and workers.
    Timestep,
    /// Per-token statistics over the feature axis.
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub h: usize,
    pub z: usize,
    pub v: usize,
    pub chunk: usize,
    /// TimestepNorm groups (ignored for [`NormKind::Layer`]).
    pub groups: usize,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub causal: bool,
}

impl BlockConfig {
    /// Defaults: `h = 4`, `z = d/2`, `v = d`, chunk 8, groups of width `d/8`.
    pub fn new(d: usize) -> Self {
        Self {
            d,
            h: 4,
            z: (d / 2).max(1),
            v: d,
            chunk: 8,
            groups: GroupSpec::<f64>::default_for(d).groups,
            norm: NormKind::Timestep,
            norm_eps: DEFAULT_EPS,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.z == 0 || self.v == 0 || self.chunk == 0 {
            return Err(Error::Parameter(format!("all widths and the chunk must be ≥ 1: {self:?}")));
        }
        if self.norm == NormKind::Timestep && (self.groups == 0 || self.d % self.groups != 0) {
            return Err(Error::Parameter(format!(
                "{} norm groups do not divide d = {}",
                self.groups, self.d
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Parameter("norm epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Groups per norm state (0 when the norm carries no state).
    pub fn norm_groups(&self) -> usize {
        match self.norm {
            NormKind::Timestep => self.groups,
            NormKind::Layer => 0,
        }
    }
}

macro_rules! block_params {
    (|$c:ident| $($name:ident : [$($dim:expr),+]),+ $(,)?) => {
        /// Parameters of one block, in checkpoint declaration order. The
        /// CEMA decay rates are stored as logits (`α = σ(alpha_logit)`).
        #[derive(Debug, Clone, PartialEq)]
        pub struct BlockParams<T> {
            $(pub $name: Tensor<T>,)+
        }

        /// Graph leaves for a [`BlockParams`].
        #[derive(Debug, Clone, Copy)]
        pub struct BlockNodes {
            $(pub $name: NodeId,)+
        }

        impl<T: Scalar> BlockParams<T> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),+];

            pub fn zeros($c: &BlockConfig) -> Self {
                Self { $($name: Tensor::zeros(&[$($dim),+]),)+ }
            }

            pub fn tensors(&self) -> Vec<&Tensor<T>> {
                vec![$(&self.$name),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
                vec![$(&mut self.$name),+]
            }

            /// Registers every tensor as a differentiable leaf.
            pub fn register(&self, g: &mut Graph<T>) -> BlockNodes {
                BlockNodes { $($name: g.param(self.$name.clone()),)+ }
            }

            /// Registers every tensor as a constant leaf.
            pub fn register_constant(&self, g: &mut Graph<T>) -> BlockNodes {
                BlockNodes { $($name: g.constant(self.$name.clone()),)+ }
            }
        }

        impl BlockNodes {
            pub fn ids(&self) -> Vec<NodeId> {
                vec![$(self.$name),+]
            }

            /// Inverse of [`BlockNodes::ids`]; `None` on a length mismatch.
            pub fn from_ids(ids: &[NodeId]) -> Option<Self> {
                let mut it = ids.iter().copied();
                let out = Self { $($name: it.next()?,)+ };
                it.next().is_none().then_some(out)
            }
        }
    };
}

block_params! {
    |c|
    beta: [c.d, c.h],
    alpha_logit: [c.d, c.h],
    delta_logit: [c.d, c.h],
    theta: [c.d, c.h],
    eta_re: [c.d, c.h],
    eta_im: [c.d, c.h],
    wz: [c.d, c.z],
    bz: [c.z],
    kq: [c.z],
    mq: [c.z],
    kk: [c.z],
    mk: [c.z],
    wv: [c.d, c.v],
    bv: [c.v],
    wr: [c.d, c.v],
    br: [c.v],
    wu: [c.d, c.d],
    bu: [c.d],
    wh: [c.d, c.d],
    wo: [c.v, c.d],
    bh: [c.d],
    norm1_gain: [c.d],
    norm1_bias: [c.d],
    norm2_gain: [c.d],
    norm2_bias: [c.d],
    ffn_w1: [c.d, 2 * c.d],
    ffn_b1: [2 * c.d],
    ffn_w2: [2 * c.d, c.d],
    ffn_b2: [c.d],
}

impl<T: Scalar> BlockParams<T> {
    /// Seeded initialization. β, η ~ N(0, 1/√h); θ equally spaced around
    /// the circle (`2πk/h` for lane `k`); decay logits uniform in (−1, 1);
    /// dense weights N(0, 1/√fan_in); norm gains 1; every bias 0.
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let BlockConfig { d, h, z, v, .. } = *cfg;
        let lane_std = 1.0 / (h as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = Self::zeros(cfg);
        p.beta = Tensor::random_normal(&[d, h], lane_std, rng);
        p.alpha_logit = Tensor::random_uniform(&[d, h], -1.0, 1.0, rng);
        p.delta_logit = Tensor::random_uniform(&[d, h], -1.0, 1.0, rng);
        let theta: Vec<T> = (0..d * h)
            .map(|l| T::lit(std::f64::consts::TAU * (l % h) as f64 / h as f64))
            .collect();
        p.theta = Tensor::new(&[d, h], theta).expect("shape");
        p.eta_re = Tensor::random_normal(&[d, h], lane_std, rng);
        p.eta_im = Tensor::random_normal(&[d, h], lane_std, rng);
        p.wz = Tensor::random_normal(&[d, z], fan(d), rng);
        p.kq = Tensor::random_normal(&[z], 0.1, rng).map(|x| x + T::one());
        p.kk = Tensor::random_normal(&[z], 0.1, rng).map(|x| x + T::one());
        p.wv = Tensor::random_normal(&[d, v], fan(d), rng);
        p.wr = Tensor::random_normal(&[d, v], fan(d), rng);
        p.wu = Tensor::random_normal(&[d, d], fan(d), rng);
        p.wh = Tensor::random_normal(&[d, d], fan(d), rng);
        p.wo = Tensor::random_normal(&[v, d], fan(v), rng);
        p.norm1_gain = Tensor::full(&[d], T::one());
        p.norm2_gain = Tensor::full(&[d], T::one());
        p.ffn_w1 = Tensor::random_normal(&[d, 2 * d], fan(d), rng);
        p.ffn_w2 = Tensor::random_normal(&[2 * d, d], fan(2 * d), rng);
        p
    }

    /// Decoded CEMA parameters (`α`, `δ` passed through the sigmoid).
    pub fn cema_params(&self) -> CemaParams<T> {
        CemaParams {
            beta: self.beta.clone(),
            alpha: self.alpha_logit.map(crate::scalar::sigmoid),
            delta: self.delta_logit.map(crate::scalar::sigmoid),
            theta: self.theta.clone(),
            eta: crate::tensor::ComplexTensor {
                re: self.eta_re.clone(),
                im: self.eta_im.clone(),
            },
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Recurrent state of one block: the CEMA hidden state and the statistics
/// of both pre-norms. This is everything that crosses a shard boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<T> {
    pub ema: EmaState<T>,
    pub norm1: NormState<T>,
    pub norm2: NormState<T>,
}

impl<T: Scalar> BlockState<T> {
    pub fn initial(cfg: &BlockConfig) -> Self {
        Self {
            ema: EmaState::zeros(cfg.d, cfg.h),
            norm1: NormState::empty(cfg.norm_groups()),
            norm2: NormState::empty(cfg.norm_groups()),
        }
    }

    pub fn payload_len(&self) -> usize {
        self.ema.payload_len() + self.norm1.payload_len() + self.norm2.payload_len()
    }
}

/// `X' = CEMA(x)` and `Z' = l2norm(X' W_z + b_z)`. `cema` must hold the
/// decoded (sigmoid-applied) decay rates.
pub fn shared_representation_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    cema: CemaNodes,
    wz: NodeId,
    bz: NodeId,
    s0: &EmaState<T>,
) -> Result<(NodeId, NodeId, EmaState<T>)> {
    let (xp, s_out) = g.cema(x, cema, s0)?;
    let z = g.affine(xp, wz, bz)?;
    let zp = g.l2_normalize_rows(z, T::lit(L2_EPS));
    Ok((xp, zp, s_out))
}

pub fn qk_affine_graph<T: Scalar>(
    g: &mut Graph<T>,
    zp: NodeId,
    kq: NodeId,
    mq: NodeId,
    kk: NodeId,
    mk: NodeId,
) -> Result<(NodeId, NodeId)> {
    let q = g.mul_row(zp, kq)?;
    let q = g.add_bias(q, mq)?;
    let k = g.mul_row(zp, kk)?;
    let k = g.add_bias(k, mk)?;
    Ok((q, k))
}

/// Reset/update gating of the attention output against the CEMA stream.
pub fn gated_merge_graph<T: Scalar>(g: &mut Graph<T>, xp: NodeId, o: NodeId, p: &BlockNodes) -> Result<NodeId> {
    let r = g.affine(xp, p.wr, p.br)?;
    let r = g.sigmoid(r);
    let u = g.affine(xp, p.wu, p.bu)?;
    let u = g.sigmoid(u);
    let ro = g.mul(r, o)?;
    let mix = g.matmul(ro, p.wo)?;
    let xh = g.matmul(xp, p.wh)?;
    let pre = g.add(xh, mix)?;
    let pre = g.add_bias(pre, p.bh)?;
    let cand = g.swish(pre);
    let ones = g.constant(Tensor::full(g.value(u).shape(), T::one()));
    let keep = g.sub(ones, u)?;
    let gated = g.mul(u, cand)?;
    let carried = g.mul(keep, xp)?;
    g.add(gated, carried)
}

/// The attention sublayer `A(·)` applied to an already-normalized input.
pub fn attention_sublayer_graph<T: Scalar>(
    g: &mut Graph<T>,
    xn: NodeId,
    p: &BlockNodes,
    cfg: &BlockConfig,
    ema_in: &EmaState<T>,
    stats: &mut AttentionStats,
) -> Result<(NodeId, EmaState<T>)> {
    let alpha = g.sigmoid(p.alpha_logit);
    let delta = g.sigmoid(p.delta_logit);
    let cema = CemaNodes {
        beta: p.beta,
        alpha,
        delta,
        theta: p.theta,
        eta_re: p.eta_re,
        eta_im: p.eta_im,
    };
    let (xp, zp, ema_out) = shared_representation_graph(g, xn, cema, p.wz, p.bz, ema_in)?;
    let (q, k) = qk_affine_graph(g, zp, p.kq, p.mq, p.kk, p.mk)?;
    let v = g.affine(xp, p.wv, p.bv)?;
    let v = g.swish(v);
    let o = g.chunked_attention(q, k, v, cfg.chunk, cfg.causal, stats)?;
    Ok((gated_merge_graph(g, xp, o, p)?, ema_out))
}

pub fn ffn_graph<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &BlockNodes) -> Result<NodeId> {
    let h = g.affine(x, p.ffn_w1, p.ffn_b1)?;
    let h = g.swish(h);
    g.affine(h, p.ffn_w2, p.ffn_b2)
}

/// `Ŷ = A(x) + x`, `Y = F(Ŷ) + Ŷ`. `attn` and `ffn` include their pre-norms.
pub fn two_hop_residual<T, A, F>(g: &mut Graph<T>, x: NodeId, attn: A, ffn: F) -> Result<NodeId>
where
    T: Scalar,
    A: FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>,
    F: FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let a = attn(g, x)?;
    let y_hat = g.add(a, x)?;
    let f = ffn(g, y_hat)?;
    g.add(f, y_hat)
}

fn pre_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    cfg: &BlockConfig,
    s0: &NormState<T>,
) -> Result<(NodeId, NormState<T>)> {
    let eps = T::lit(cfg.norm_eps);
    match cfg.norm {
        NormKind::Timestep => g.timestep_norm(x, Some(gain), Some(bias), cfg.groups, eps, s0),
        NormKind::Layer => Ok((g.layer_norm(x, Some(gain), Some(bias), eps)?, s0.clone())),
    }
}

/// One encoder block on the graph, threading the recurrent state.
pub fn encoder_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BlockNodes,
    cfg: &BlockConfig,
    state: &BlockState<T>,
    stats: &mut AttentionStats,
) -> Result<(NodeId, BlockState<T>)> {
    let mut out = state.clone();
    let y = two_hop_residual(
        g,
        x,
        |g, x| {
            let (xn, s1) = pre_norm(g, x, p.norm1_gain, p.norm1_bias, cfg, &state.norm1)?;
            out.norm1 = s1;
            let (a, ema) = attention_sublayer_graph(g, xn, p, cfg, &state.ema, stats)?;
            out.ema = ema;
            Ok(a)
        },
        |g, y_hat| {
            let (yn, s2) = pre_norm(g, y_hat, p.norm2_gain, p.norm2_bias, cfg, &state.norm2)?;
            out.norm2 = s2;
            ffn_graph(g, yn, p)
        },
    )?;
    Ok((y, out))
}

// Tensor-level entry points. Each builds a throwaway graph of constants so
// the arithmetic is exactly the training path.

pub fn shared_representation<T: Scalar>(
    x: &Tensor<T>,
    cema: &CemaParams<T>,
    wz: &Tensor<T>,
    bz: &Tensor<T>,
    s0: &EmaState<T>,
) -> Result<(Tensor<T>, Tensor<T>, EmaState<T>)> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let nodes = CemaNodes {
        beta: g.constant(cema.beta.clone()),
        alpha: g.constant(cema.alpha.clone()),
        delta: g.constant(cema.delta.clone()),
        theta: g.constant(cema.theta.clone()),
        eta_re: g.constant(cema.eta.re.clone()),
        eta_im: g.constant(cema.eta.im.clone()),
    };
    let (wz, bz) = (g.constant(wz.clone()), g.constant(bz.clone()));
    let (xp, zp, s) = shared_representation_graph(&mut g, xn, nodes, wz, bz, s0)?;
    Ok((g.value(xp).clone(), g.value(zp).clone(), s))
}

pub fn qk_affine<T: Scalar>(
    zp: &Tensor<T>,
    kq: &Tensor<T>,
    mq: &Tensor<T>,
    kk: &Tensor<T>,
    mk: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = [zp, kq, mq, kk, mk].iter().map(|t| g.constant((*t).clone())).collect();
    let (q, k) = qk_affine_graph(&mut g, ids[0], ids[1], ids[2], ids[3], ids[4])?;
    Ok((g.value(q).clone(), g.value(k).clone()))
}

pub fn gated_merge<T: Scalar>(xp: &Tensor<T>, o: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let nodes = p.register_constant(&mut g);
    let (x, o) = (g.constant(xp.clone()), g.constant(o.clone()));
    let y = gated_merge_graph(&mut g, x, o, &nodes)?;
    Ok(g.value(y).clone())
}

pub fn encoder_block<T: Scalar>(
    x: &Tensor<T>,
    p: &BlockParams<T>,
    cfg: &BlockConfig,
    state: &BlockState<T>,
) -> Result<(Tensor<T>, BlockState<T>)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let nodes = p.register_constant(&mut g);
    let xn = g.constant(x.clone());
    let (y, s) = encoder_block_graph(&mut g, xn, &nodes, cfg, state, &mut AttentionStats::default())?;
    Ok((g.value(y).clone(), s))
}
