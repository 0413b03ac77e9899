//! Tape-based reverse-mode differentiation over the encoder's op set.
//!
//! A [`Graph`] records every node in creation order, which is also a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep. The
//! forward value of each node is computed eagerly by the same kernels the
//! tensor-level API uses, so a graph forward pass and a direct call agree bit
//! for bit.

use crate::attention::{attention_forward, AttentionProbs, AttentionStats};
use crate::ema::{cema_scan, lane_coeffs, CemaParams, EmaState, ScanTrace};
use crate::error::{shape_err, Error, Result};
use crate::norm::{row_moments, timestep_norm_traced, GroupSpec, NormState, NormTrace};
use crate::scalar::{sigmoid, swish, Scalar};
use crate::tensor::{dot, l2_norm, ComplexTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Node handles for the six CEMA parameter tensors, each `[d×h]`.
#[derive(Debug, Clone, Copy)]
pub struct CemaNodes {
    pub beta: NodeId,
    pub alpha: NodeId,
    pub delta: NodeId,
    pub theta: NodeId,
    pub eta_re: NodeId,
    pub eta_im: NodeId,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Swish(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    SoftmaxRows(NodeId),
    L2Normalize {
        x: NodeId,
        eps: T,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: AttentionProbs<T>,
    },
    Cema {
        x: NodeId,
        p: CemaNodes,
        trace: ScanTrace<T>,
    },
    TimestepNorm {
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        trace: NormTrace<T>,
    },
    LayerNorm {
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: T,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_row(self.value(gain))?;
        Ok(self.push(v, Op::MulRow(a, gain), &[a, gain]))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(swish);
        self.push(v, Op::Swish(a), &[a])
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::sin);
        self.push(v, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::cos);
        self.push(v, Op::Cos(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: T) -> NodeId {
        let v = self.value(x).l2_normalize_rows(eps);
        self.push(v, Op::L2Normalize { x, eps }, &[x])
    }

    pub fn chunked_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        chunk: usize,
        causal: bool,
        stats: &mut AttentionStats,
    ) -> Result<NodeId> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), chunk, causal, stats)?;
        Ok(self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    /// Complex EMA scan; `s0` is a constant carry-in. Returns the output
    /// node and the carry-out state.
    pub fn cema(&mut self, x: NodeId, p: CemaNodes, s0: &EmaState<T>) -> Result<(NodeId, EmaState<T>)> {
        let params = self.cema_params(&p)?;
        let mut trace = ScanTrace {
            d: 0,
            h: 0,
            re: Vec::new(),
            im: Vec::new(),
        };
        let (y, s_out) = cema_scan(self.value(x), &params, s0, Some(&mut trace))?;
        let inputs = [x, p.beta, p.alpha, p.delta, p.theta, p.eta_re, p.eta_im];
        Ok((self.push(y, Op::Cema { x, p, trace }, &inputs), s_out))
    }

    fn cema_params(&self, p: &CemaNodes) -> Result<CemaParams<T>> {
        Ok(CemaParams {
            beta: self.value(p.beta).clone(),
            alpha: self.value(p.alpha).clone(),
            delta: self.value(p.delta).clone(),
            theta: self.value(p.theta).clone(),
            eta: ComplexTensor::new(self.value(p.eta_re).clone(), self.value(p.eta_im).clone())?,
        })
    }

    pub fn timestep_norm(
        &mut self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        groups: usize,
        eps: T,
        s0: &NormState<T>,
    ) -> Result<(NodeId, NormState<T>)> {
        let spec = GroupSpec {
            groups,
            eps,
            gain: gain.map(|g| self.value(g).clone()),
            bias: bias.map(|b| self.value(b).clone()),
        };
        let mut trace = NormTrace {
            groups,
            mean: Vec::new(),
            inv_std: Vec::new(),
            count: Vec::new(),
        };
        let (y, s_out) = timestep_norm_traced(self.value(x), &spec, s0, Some(&mut trace))?;
        let inputs: Vec<NodeId> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok((
            self.push(y, Op::TimestepNorm { x, gain, bias, trace }, &inputs),
            s_out,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: Option<NodeId>, bias: Option<NodeId>, eps: T) -> Result<NodeId> {
        let y = crate::norm::layer_norm(
            self.value(x),
            eps,
            gain.map(|g| self.value(g)),
            bias.map(|b| self.value(b)),
        )?;
        let inputs: Vec<NodeId> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, eps }, &inputs))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::Input("gather needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean next-token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        let (n, vocab) = (l.rows(), l.cols());
        if targets.len() != n {
            return Err(shape_err("cross_entropy", l.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let probs = l.softmax_rows();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[t]);
        }
        let loss = Tensor::scalar(total / T::from_count(n));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        let slot = &mut grads[id.0];
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(&self.value(*b).transpose()?)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, column_sums(g).reshape(&shape)?)?;
                }
            }
            Op::MulRow(a, r) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul_row(self.value(*r))?)?;
                }
                if self.wants(*r) {
                    let shape = self.value(*r).shape().to_vec();
                    let ga = g.mul(self.value(*a))?;
                    self.accumulate(grads, *r, column_sums(&ga).reshape(&shape)?)?;
                }
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, "sigmoid'", |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Swish(a) => {
                let d = g.zip_map(self.value(*a), "swish'", |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Sin(a) => {
                let d = g.zip_map(self.value(*a), "sin'", |gv, x| gv * x.cos())?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Cos(a) => {
                let d = g.zip_map(self.value(*a), "cos'", |gv, x| -gv * x.sin())?;
                self.accumulate(grads, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let inner = dot(gr, y);
                    data.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), data)?)?;
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut data = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.data().chunks(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let norm = l2_norm(xr);
                    if norm > *eps {
                        let inner = dot(gr, yr);
                        data.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * inner) / norm));
                    } else {
                        data.extend(gr.iter().map(|&gv| gv / *eps));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?)?;
            }
            Op::Attention { q, k, v, probs } => self.attention_backward(*q, *k, *v, probs, g, grads)?,
            Op::Cema { x, p, trace } => self.cema_backward(*x, p, trace, g, grads)?,
            Op::TimestepNorm { x, gain, bias, trace } => {
                self.timestep_norm_backward(*x, *gain, *bias, trace, g, grads)?
            }
            Op::LayerNorm { x, gain, bias, eps } => self.layer_norm_backward(*x, *gain, *bias, *eps, g, grads)?,
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut data = vec![T::zero(); t.len()];
                for (row, &i) in ids.iter().enumerate() {
                    for f in 0..d {
                        data[i * d + f] = data[i * d + f] + g.data()[row * d + f];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape(), data)?)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / T::from_count(targets.len());
                let vocab = probs.cols();
                let mut data = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    data[i * vocab + t] = data[i * vocab + t] - T::one();
                }
                for v in &mut data {
                    *v = *v * scale;
                }
                self.accumulate(grads, *logits, Tensor::new(probs.shape(), data)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]))?;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: &AttentionProbs<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, z, w) = (qv.rows(), qv.cols(), vv.cols());
        let mut gq = vec![T::zero(); n * z];
        let mut gk = vec![T::zero(); n * z];
        let mut gv = vec![T::zero(); n * w];
        let mut dp = Vec::new();
        for i in 0..n {
            let (start, _) = probs.span(i);
            let p = probs.row(i);
            let go = g.row(i);
            dp.clear();
            for (off, &pj) in p.iter().enumerate() {
                let j = start + off;
                dp.push(dot(go, vv.row(j)));
                for f in 0..w {
                    gv[j * w + f] = gv[j * w + f] + pj * go[f];
                }
            }
            let inner = dot(p, &dp);
            for (off, &pj) in p.iter().enumerate() {
                let j = start + off;
                let ds = pj * (dp[off] - inner);
                for f in 0..z {
                    gq[i * z + f] = gq[i * z + f] + ds * kv.at(j, f);
                    gk[j * z + f] = gk[j * z + f] + ds * qv.at(i, f);
                }
            }
        }
        self.accumulate(grads, q, Tensor::new(qv.shape(), gq)?)?;
        self.accumulate(grads, k, Tensor::new(kv.shape(), gk)?)?;
        self.accumulate(grads, v, Tensor::new(vv.shape(), gv)?)
    }

    fn cema_backward(
        &self,
        x: NodeId,
        p: &CemaNodes,
        trace: &ScanTrace<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let params = self.cema_params(p)?;
        let c = lane_coeffs(&params);
        let (d, h) = (trace.d, trace.h);
        let lanes = d * h;
        let xv = self.value(x);
        let n = xv.rows();
        let (beta, alpha, delta, theta) = (
            params.beta.data(),
            params.alpha.data(),
            params.delta.data(),
            params.theta.data(),
        );
        let (eta_re, eta_im) = (params.eta.re.data(), params.eta.im.data());

        let mut gx = vec![T::zero(); n * d];
        let mut g_beta = vec![T::zero(); lanes];
        let mut g_eta_re = vec![T::zero(); lanes];
        let mut g_eta_im = vec![T::zero(); lanes];
        let (mut g_pr, mut g_pi, mut g_qr, mut g_qi) = (
            vec![T::zero(); lanes],
            vec![T::zero(); lanes],
            vec![T::zero(); lanes],
            vec![T::zero(); lanes],
        );
        // Adjoints of (Re h_t, Im h_t) flowing back from step t+1.
        let mut carry_r = vec![T::zero(); lanes];
        let mut carry_i = vec![T::zero(); lanes];

        for t in (1..=n).rev() {
            let cur = t * lanes;
            let prev = (t - 1) * lanes;
            for j in 0..d {
                let gy = g.at(t - 1, j);
                let xt = xv.at(t - 1, j);
                for k in 0..h {
                    let l = j * h + k;
                    let (hr, hi) = (trace.re[cur + l], trace.im[cur + l]);
                    let (hr0, hi0) = (trace.re[prev + l], trace.im[prev + l]);
                    let ar = carry_r[l] + gy * eta_re[l];
                    let ai = carry_i[l] - gy * eta_im[l];
                    g_eta_re[l] = g_eta_re[l] + gy * hr;
                    g_eta_im[l] = g_eta_im[l] - gy * hi;
                    let u = beta[l] * xt;
                    g_pr[l] = g_pr[l] + ar * u;
                    g_pi[l] = g_pi[l] + ai * u;
                    let du = ar * c.pr[l] + ai * c.pi[l];
                    g_beta[l] = g_beta[l] + du * xt;
                    gx[(t - 1) * d + j] = gx[(t - 1) * d + j] + du * beta[l];
                    g_qr[l] = g_qr[l] + ar * hr0 + ai * hi0;
                    g_qi[l] = g_qi[l] + ai * hr0 - ar * hi0;
                    carry_r[l] = c.qr[l] * ar + c.qi[l] * ai;
                    carry_i[l] = c.qr[l] * ai - c.qi[l] * ar;
                }
            }
        }

        let mut g_alpha = vec![T::zero(); lanes];
        let mut g_delta = vec![T::zero(); lanes];
        let mut g_theta = vec![T::zero(); lanes];
        for l in 0..lanes {
            let (s, cs) = theta[l].sin_cos();
            let rho = T::one() - alpha[l] * delta[l];
            let decay_proj = g_qr[l] * cs + g_qi[l] * s;
            g_alpha[l] = g_pr[l] * cs + g_pi[l] * s - delta[l] * decay_proj;
            g_delta[l] = -alpha[l] * decay_proj;
            g_theta[l] = alpha[l] * (g_pi[l] * cs - g_pr[l] * s) + rho * (g_qi[l] * cs - g_qr[l] * s);
        }
        let shape = [d, h];
        self.accumulate(grads, x, Tensor::new(xv.shape(), gx)?)?;
        self.accumulate(grads, p.beta, Tensor::new(&shape, g_beta)?)?;
        self.accumulate(grads, p.alpha, Tensor::new(&shape, g_alpha)?)?;
        self.accumulate(grads, p.delta, Tensor::new(&shape, g_delta)?)?;
        self.accumulate(grads, p.theta, Tensor::new(&shape, g_theta)?)?;
        self.accumulate(grads, p.eta_re, Tensor::new(&shape, g_eta_re)?)?;
        self.accumulate(grads, p.eta_im, Tensor::new(&shape, g_eta_im)?)
    }

    fn affine_backward(
        &self,
        x_hat: &[T],
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<Vec<T>> {
        let d = g.cols();
        if let Some(b) = bias {
            if self.wants(b) {
                self.accumulate(grads, b, column_sums(g))?;
            }
        }
        match gain {
            Some(gn) => {
                if self.wants(gn) {
                    let mut gg = vec![T::zero(); d];
                    for (i, (&gv, &xh)) in g.data().iter().zip(x_hat).enumerate() {
                        gg[i % d] = gg[i % d] + gv * xh;
                    }
                    self.accumulate(grads, gn, Tensor::vector(gg))?;
                }
                let gain = self.value(gn).data();
                Ok(g.data().iter().enumerate().map(|(i, &gv)| gv * gain[i % d]).collect())
            }
            None => Ok(g.data().to_vec()),
        }
    }

    fn timestep_norm_backward(
        &self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        trace: &NormTrace<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let groups = trace.groups;
        let width = d / groups;
        let x_hat: Vec<T> = (0..n * d)
            .map(|i| {
                let s = (i / d) * groups + (i % d) / width;
                (xv.data()[i] - trace.mean[s]) * trace.inv_std[s]
            })
            .collect();
        let gxh = self.affine_backward(&x_hat, gain, bias, g, grads)?;
        if !self.wants(x) {
            return Ok(());
        }
        // Every statistic at step t depends on all values of its group up to t,
        // so the input gradient collects suffix sums over later steps.
        let mut gx = vec![T::zero(); n * d];
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        for grp in 0..groups {
            let feats = grp * width..(grp + 1) * width;
            let (mut s_const, mut s_lin) = (T::zero(), T::zero());
            for t in (0..n).rev() {
                let s = t * groups + grp;
                let (mean, inv, count) = (trace.mean[s], trace.inv_std[s], T::lit(trace.count[s] as f64));
                let (mut a, mut b) = (T::zero(), T::zero());
                for f in feats.clone() {
                    a = a + gxh[t * d + f];
                    b = b + gxh[t * d + f] * x_hat[t * d + f];
                }
                let g_mean = -a * inv;
                let g_var = -half * b * inv * inv;
                let c2 = two * g_var / count;
                s_const = s_const + g_mean / count - c2 * mean;
                s_lin = s_lin + c2;
                for f in feats.clone() {
                    let i = t * d + f;
                    gx[i] = gxh[i] * inv + s_const + s_lin * xv.data()[i];
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(xv.shape(), gx)?)
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: T,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut x_hat = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let (mean, is) = row_moments(row, eps);
            inv.push(is);
            x_hat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let gxh = self.affine_backward(&x_hat, gain, bias, g, grads)?;
        if !self.wants(x) {
            return Ok(());
        }
        let fd = T::from_count(d);
        let mut gx = Vec::with_capacity(xv.len());
        for (t, (gr, xr)) in gxh.chunks(d).zip(x_hat.chunks(d)).enumerate() {
            let mean_g = gr.iter().fold(T::zero(), |a, &v| a + v) / fd;
            let mean_gx = dot(gr, xr) / fd;
            gx.extend(gr.iter().zip(xr).map(|(&gv, &xh)| inv[t] * (gv - mean_g - xh * mean_gx)));
        }
        self.accumulate(grads, x, Tensor::new(xv.shape(), gx)?)
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::vector(out)
}

/// Analytic vs central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradientReport<T> {
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
    /// Largest `|a − n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

impl<T: Scalar> GradientReport<T> {
    /// Largest relative error restricted to one parameter tensor.
    pub fn max_rel_error_of(&self, param: usize) -> f64 {
        self.analytic[param]
            .data()
            .iter()
            .zip(self.numeric[param].data())
            .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> GradientReport<T> {
    /// Norm-wise error of one parameter tensor:
    /// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
    pub fn group_rel_error(&self, param: usize) -> f64 {
        let (a, n) = (&self.analytic[param], &self.numeric[param]);
        let diff = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max);
        diff / a.max_abs().as_f64().max(n.max_abs().as_f64()).max(1e-8)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central differences `(f(p + s·e) − f(p − s·e)) / 2s` for every coordinate
/// of every parameter tensor.
pub fn numeric_gradient<T, F>(f: F, params: &[Tensor<T>], step: T) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<T>,
{
    if !(step > T::zero()) {
        return Err(Error::Parameter("finite-difference step must be positive".into()));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let mut coordinate = 0;
    for pi in 0..params.len() {
        let mut grad = vec![T::zero(); params[pi].len()];
        for (ci, gslot) in grad.iter_mut().enumerate() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = f(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            for v in [plus, minus] {
                if !v.is_finite() {
                    return Err(Error::Evaluation {
                        coordinate,
                        value: v.as_f64(),
                    });
                }
            }
            *gslot = (plus - minus) / (step + step);
            coordinate += 1;
        }
        out.push(Tensor::new(params[pi].shape(), grad)?);
    }
    Ok(out)
}

/// Builds the graph with `params` as leaves, differentiates the scalar
/// returned by `build`, and compares against central differences.
pub fn finite_diff_check<T, F>(build: F, params: &[Tensor<T>], step: T) -> Result<GradientReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<(Graph<T>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };
    let (g, ids, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();
    let numeric = numeric_gradient(
        |ps| {
            let (g, _, loss) = eval(ps)?;
            Ok(g.value(loss).data()[0])
        },
        params,
        step,
    )?;
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (ci, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av.as_f64(), nv.as_f64());
            if e > max_rel_error {
                max_rel_error = e;
                worst = Some((pi, ci));
            }
        }
    }
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
    })
}
