//! Causal cumulative normalization (TimestepNorm) and layer normalization.
//!
//! TimestepNorm splits the feature axis into `groups` contiguous groups and,
//! for every token, standardizes each group with the population mean and
//! variance of all values of that group seen so far (including the current
//! token and any carried-in statistics). The running statistics are updated
//! one value at a time with Welford's recurrence, so feeding a sequence in
//! pieces with the state carried across is bit-identical to feeding it whole.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec<T> {
    /// Number of contiguous feature groups; must divide the width.
    pub groups: usize,
    pub eps: T,
    pub gain: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> GroupSpec<T> {
    pub fn new(groups: usize) -> Self {
        Self {
            groups,
            eps: T::lit(DEFAULT_EPS),
            gain: None,
            bias: None,
        }
    }

    /// Groups of width `d / 8` (at least 1), shrunk to the nearest divisor of `d`.
    pub fn default_for(d: usize) -> Self {
        Self::new(d / default_group_width(d))
    }

    pub fn with_affine(mut self, gain: Tensor<T>, bias: Tensor<T>) -> Self {
        self.gain = Some(gain);
        self.bias = Some(bias);
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.groups == 0 || d % self.groups != 0 {
            return Err(Error::Parameter(format!(
                "{} groups do not divide width {d}",
                self.groups
            )));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        for (name, t) in [("gain", &self.gain), ("bias", &self.bias)] {
            if let Some(t) = t {
                if t.len() != d {
                    return Err(shape_err(name, t.shape(), &[d]));
                }
            }
        }
        Ok(())
    }
}

pub fn default_group_width(d: usize) -> usize {
    let mut w = (d / 8).max(1);
    while d % w != 0 {
        w -= 1;
    }
    w
}

/// Running per-group statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub count: Vec<u64>,
    pub mean: Vec<T>,
    pub m2: Vec<T>,
}

impl<T: Scalar> NormState<T> {
    pub fn empty(groups: usize) -> Self {
        Self {
            count: vec![0; groups],
            mean: vec![T::zero(); groups],
            m2: vec![T::zero(); groups],
        }
    }

    pub fn groups(&self) -> usize {
        self.count.len()
    }

    /// Doubles-equivalent message size: `(count, mean, m2)` per group.
    pub fn payload_len(&self) -> usize {
        3 * self.groups()
    }

    /// Adds one observation to group `g`.
    #[inline]
    pub fn push(&mut self, g: usize, x: T) {
        self.count[g] += 1;
        let n = T::lit(self.count[g] as f64);
        let delta = x - self.mean[g];
        self.mean[g] = self.mean[g] + delta / n;
        self.m2[g] = self.m2[g] + delta * (x - self.mean[g]);
    }

    pub fn variance(&self, g: usize) -> T {
        if self.count[g] == 0 {
            T::zero()
        } else {
            self.m2[g] / T::lit(self.count[g] as f64)
        }
    }

    /// Statistics of the concatenation of the two underlying samples (Chan et al.).
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.groups() != other.groups() {
            return Err(Error::State(format!(
                "cannot merge {} groups with {}",
                self.groups(),
                other.groups()
            )));
        }
        let mut out = Self::empty(self.groups());
        for g in 0..self.groups() {
            let (na, nb) = (self.count[g], other.count[g]);
            let n = na + nb;
            out.count[g] = n;
            if n == 0 {
                continue;
            }
            let (fa, fb, fnn) = (T::lit(na as f64), T::lit(nb as f64), T::lit(n as f64));
            let delta = other.mean[g] - self.mean[g];
            out.mean[g] = self.mean[g] + delta * fb / fnn;
            out.m2[g] = self.m2[g] + other.m2[g] + delta * delta * fa * fb / fnn;
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for g in 0..self.groups() {
            if self.m2[g] < T::zero() || !self.mean[g].is_finite() || !self.m2[g].is_finite() {
                return Err(Error::State(format!("group {g} statistics invalid")));
            }
            if self.count[g] == 0 && (self.mean[g] != T::zero() || self.m2[g] != T::zero()) {
                return Err(Error::State(format!("group {g} empty but has moments")));
            }
        }
        Ok(())
    }
}

impl NormState<f64> {
    /// Per group: count (u64), mean (f64), m2 (f64), little-endian.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 * self.groups());
        for g in 0..self.groups() {
            out.extend_from_slice(&self.count[g].to_le_bytes());
            out.extend_from_slice(&self.mean[g].to_le_bytes());
            out.extend_from_slice(&self.m2[g].to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 24 != 0 {
            return Err(Error::State(format!(
                "norm state payload of {} bytes is not a multiple of 24",
                bytes.len()
            )));
        }
        let mut s = Self::empty(bytes.len() / 24);
        for (g, rec) in bytes.chunks_exact(24).enumerate() {
            s.count[g] = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
            s.mean[g] = f64::from_le_bytes(rec[8..16].try_into().expect("8 bytes"));
            s.m2[g] = f64::from_le_bytes(rec[16..24].try_into().expect("8 bytes"));
        }
        s.validate()?;
        Ok(s)
    }
}

/// Per-token, per-group statistics used to standardize each output.
#[derive(Debug, Clone)]
pub(crate) struct NormTrace<T> {
    pub groups: usize,
    /// `[n × groups]` row-major.
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: Vec<u64>,
}

pub(crate) fn timestep_norm_traced<T: Scalar>(
    x: &Tensor<T>,
    spec: &GroupSpec<T>,
    s0: &NormState<T>,
    mut trace: Option<&mut NormTrace<T>>,
) -> Result<(Tensor<T>, NormState<T>)> {
    let (n, d) = (x.rows(), x.cols());
    spec.validate(d)?;
    if s0.groups() != spec.groups {
        return Err(Error::State(format!(
            "carry-in state has {} groups, the norm has {}",
            s0.groups(),
            spec.groups
        )));
    }
    s0.validate()?;
    let width = d / spec.groups;
    let mut state = s0.clone();
    let mut y = vec![T::zero(); n * d];
    if let Some(tr) = trace.as_deref_mut() {
        tr.groups = spec.groups;
        tr.mean.clear();
        tr.inv_std.clear();
        tr.count.clear();
    }
    for t in 0..n {
        let row = x.row(t);
        for g in 0..spec.groups {
            let feats = g * width..(g + 1) * width;
            for f in feats.clone() {
                state.push(g, row[f]);
            }
            let mean = state.mean[g];
            let inv_std = T::one() / (state.variance(g) + spec.eps).sqrt();
            for f in feats {
                let mut v = (row[f] - mean) * inv_std;
                if let Some(gain) = &spec.gain {
                    v = v * gain.data()[f];
                }
                if let Some(bias) = &spec.bias {
                    v = v + bias.data()[f];
                }
                y[t * d + f] = v;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.mean.push(mean);
                tr.inv_std.push(inv_std);
                tr.count.push(state.count[g]);
            }
        }
    }
    Ok((Tensor::new(&[n, d], y)?, state))
}

/// Causal cumulative normalization with carry-in/carry-out statistics.
pub fn timestep_norm<T: Scalar>(
    x: &Tensor<T>,
    spec: &GroupSpec<T>,
    s0: &NormState<T>,
) -> Result<(Tensor<T>, NormState<T>)> {
    timestep_norm_traced(x, spec, s0, None)
}

/// Per-token standardization across the feature axis (population variance).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    eps: T,
    gain: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = x.cols();
    for t in [gain, bias].into_iter().flatten() {
        if t.len() != d {
            return Err(shape_err("layer_norm", x.shape(), t.shape()));
        }
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (mean, inv_std) = row_moments(row, eps);
        for (f, v) in row.iter_mut().enumerate() {
            let mut z = (*v - mean) * inv_std;
            if let Some(g) = gain {
                z = z * g.data()[f];
            }
            if let Some(b) = bias {
                z = z + b.data()[f];
            }
            *v = z;
        }
    }
    Ok(out)
}

pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_count(row.len());
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
    (mean, T::one() / (var + eps).sqrt())
}
