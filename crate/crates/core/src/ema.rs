//! Damped EMA and complex (rotating) EMA over a `[n×d]` sequence.
//!
//! Each feature `j` is lifted into `h` latent lanes by `beta[j, :]`, every
//! lane runs a first-order recurrence, and the lanes are projected back by
//! `eta[j, :]`. The complex variant multiplies both the input term and the
//! carried state by `e^{iθ}`:
//!
//! ```text
//! h_t = α e^{iθ} u_t + (1 − αδ) e^{iθ} h_{t−1},    y_t = Re(ηᵀ h_t)
//! ```
//!
//! The recurrence is available as a scan with explicit carry-in/carry-out
//! state, and as an impulse-response kernel plus causal convolution.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams<T> {
    pub beta: Tensor<T>,
    pub alpha: Tensor<T>,
    pub delta: Tensor<T>,
    pub eta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemaParams<T> {
    pub beta: Tensor<T>,
    pub alpha: Tensor<T>,
    pub delta: Tensor<T>,
    /// Rotation angle per lane, radians.
    pub theta: Tensor<T>,
    pub eta: ComplexTensor<T>,
}

/// Recurrent hidden state, `[d×h]` complex. The real EMA keeps `im == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub h: ComplexTensor<T>,
}

fn check_lane_shape<T: Scalar>(name: &str, t: &Tensor<T>, d: usize, h: usize) -> Result<()> {
    if t.shape() != [d, h] {
        return Err(Error::Parameter(format!(
            "{name} has shape {:?}, expected [{d}, {h}]",
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Parameter(format!("{name} is not finite")));
    }
    Ok(())
}

fn check_unit_interval<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| !(v > T::zero() && v <= T::one())) {
        return Err(Error::Parameter(format!("{name} = {v} outside (0, 1]")));
    }
    Ok(())
}

impl<T: Scalar> EmaParams<T> {
    pub fn dims(&self) -> (usize, usize) {
        (self.beta.shape()[0], self.beta.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.beta.rows(), self.beta.cols());
        for (name, t) in [
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("delta", &self.delta),
            ("eta", &self.eta),
        ] {
            check_lane_shape(name, t, d, h)?;
        }
        check_unit_interval("alpha", &self.alpha)?;
        check_unit_interval("delta", &self.delta)
    }

    /// The equivalent complex parameters with `θ = 0` and `Im(η) = 0`.
    pub fn to_complex(&self) -> CemaParams<T> {
        CemaParams {
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
            delta: self.delta.clone(),
            theta: Tensor::zeros(self.beta.shape()),
            eta: ComplexTensor::from_real(self.eta.clone()),
        }
    }
}

impl<T: Scalar> CemaParams<T> {
    pub fn dims(&self) -> (usize, usize) {
        (self.beta.shape()[0], self.beta.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.beta.rows(), self.beta.cols());
        for (name, t) in [
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("delta", &self.delta),
            ("theta", &self.theta),
            ("eta.re", &self.eta.re),
            ("eta.im", &self.eta.im),
        ] {
            check_lane_shape(name, t, d, h)?;
        }
        check_unit_interval("alpha", &self.alpha)?;
        check_unit_interval("delta", &self.delta)
    }

    /// Random valid parameters: β, η ~ N(0, 1/√h), α, δ uniform in (0.05, 1],
    /// θ uniform on the circle.
    pub fn sample(d: usize, h: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (h as f64).sqrt();
        Self {
            beta: Tensor::random_normal(&[d, h], std, rng),
            alpha: Tensor::random_uniform(&[d, h], 0.05, 1.0, rng),
            delta: Tensor::random_uniform(&[d, h], 0.05, 1.0, rng),
            theta: Tensor::random_uniform(&[d, h], -std::f64::consts::PI, std::f64::consts::PI, rng),
            eta: ComplexTensor {
                re: Tensor::random_normal(&[d, h], std, rng),
                im: Tensor::random_normal(&[d, h], std, rng),
            },
        }
    }
}

impl<T: Scalar> EmaState<T> {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            h: ComplexTensor::zeros(&[d, h]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h.re.shape()[0], self.h.re.cols())
    }

    /// Number of doubles in the serialized message.
    pub fn payload_len(&self) -> usize {
        2 * self.h.re.len()
    }

    fn check(&self, d: usize, h: usize) -> Result<()> {
        if self.h.shape() != [d, h] {
            return Err(Error::State(format!(
                "EMA state shape {:?}, expected [{d}, {h}]",
                self.h.shape()
            )));
        }
        Ok(())
    }
}

impl EmaState<f64> {
    /// Flat little-endian doubles: all real parts, then all imaginary parts.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.h
            .re
            .data()
            .iter()
            .chain(self.h.im.data())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn from_le_bytes(bytes: &[u8], d: usize, h: usize) -> Result<Self> {
        let n = d * h;
        if bytes.len() != 16 * n {
            return Err(Error::State(format!(
                "EMA state payload is {} bytes, expected {}",
                bytes.len(),
                16 * n
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            h: ComplexTensor::new(
                Tensor::new(&[d, h], vals[..n].to_vec())?,
                Tensor::new(&[d, h], vals[n..].to_vec())?,
            )?,
        })
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != d {
        return Err(shape_err("ema input", x.shape(), &[x.rows(), d]));
    }
    Ok(())
}

/// Real damped EMA.
pub fn ema_apply<T: Scalar>(
    x: &Tensor<T>,
    p: &EmaParams<T>,
    s0: &EmaState<T>,
) -> Result<(Tensor<T>, EmaState<T>)> {
    p.validate()?;
    let (d, h) = p.dims();
    check_input(x, d)?;
    s0.check(d, h)?;
    if s0.h.im.data().iter().any(|&v| v != T::zero()) {
        return Err(Error::State("real EMA needs a real carry-in state".into()));
    }
    let n = x.rows();
    let (beta, alpha, delta, eta) = (p.beta.data(), p.alpha.data(), p.delta.data(), p.eta.data());
    let mut state = s0.h.re.data().to_vec();
    let mut y = vec![T::zero(); n * d];
    for t in 0..n {
        for j in 0..d {
            let xv = x.at(t, j);
            let mut acc = T::zero();
            for k in 0..h {
                let l = j * h + k;
                let u = beta[l] * xv;
                state[l] = alpha[l] * u + (T::one() - alpha[l] * delta[l]) * state[l];
                acc = acc + eta[l] * state[l];
            }
            y[t * d + j] = acc;
        }
    }
    let out = EmaState {
        h: ComplexTensor::from_real(Tensor::new(&[d, h], state)?),
    };
    Ok((Tensor::new(&[n, d], y)?, out))
}

/// Every hidden state of a complex scan, `h_0` (the carry-in) through `h_n`.
#[derive(Debug, Clone)]
pub struct ScanTrace<T> {
    pub(crate) d: usize,
    pub(crate) h: usize,
    pub(crate) re: Vec<T>,
    pub(crate) im: Vec<T>,
}

impl<T: Scalar> ScanTrace<T> {
    pub fn steps(&self) -> usize {
        self.re.len() / (self.d * self.h) - 1
    }

    /// State after `t` inputs (`t = 0` is the carry-in).
    pub fn state(&self, t: usize) -> EmaState<T> {
        let w = self.d * self.h;
        let shape = [self.d, self.h];
        EmaState {
            h: ComplexTensor {
                re: Tensor::new(&shape, self.re[t * w..(t + 1) * w].to_vec()).expect("shape"),
                im: Tensor::new(&shape, self.im[t * w..(t + 1) * w].to_vec()).expect("shape"),
            },
        }
    }
}

/// Per-lane complex coefficients: input gain `α e^{iθ}` and decay `(1 − αδ) e^{iθ}`.
pub(crate) struct LaneCoeffs<T> {
    pub pr: Vec<T>,
    pub pi: Vec<T>,
    pub qr: Vec<T>,
    pub qi: Vec<T>,
}

pub(crate) fn lane_coeffs<T: Scalar>(p: &CemaParams<T>) -> LaneCoeffs<T> {
    let (alpha, delta, theta) = (p.alpha.data(), p.delta.data(), p.theta.data());
    let n = alpha.len();
    let mut c = LaneCoeffs {
        pr: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
        qr: Vec::with_capacity(n),
        qi: Vec::with_capacity(n),
    };
    for l in 0..n {
        let (sin, cos) = theta[l].sin_cos();
        let decay = T::one() - alpha[l] * delta[l];
        c.pr.push(alpha[l] * cos);
        c.pi.push(alpha[l] * sin);
        c.qr.push(decay * cos);
        c.qi.push(decay * sin);
    }
    c
}

pub(crate) fn cema_scan<T: Scalar>(
    x: &Tensor<T>,
    p: &CemaParams<T>,
    s0: &EmaState<T>,
    mut trace: Option<&mut ScanTrace<T>>,
) -> Result<(Tensor<T>, EmaState<T>)> {
    p.validate()?;
    let (d, h) = p.dims();
    check_input(x, d)?;
    s0.check(d, h)?;
    let n = x.rows();
    let c = lane_coeffs(p);
    let (beta, eta_re, eta_im) = (p.beta.data(), p.eta.re.data(), p.eta.im.data());
    let mut hr = s0.h.re.data().to_vec();
    let mut hi = s0.h.im.data().to_vec();
    if let Some(tr) = trace.as_deref_mut() {
        tr.d = d;
        tr.h = h;
        tr.re.clear();
        tr.im.clear();
        tr.re.extend_from_slice(&hr);
        tr.im.extend_from_slice(&hi);
    }
    let mut y = vec![T::zero(); n * d];
    for t in 0..n {
        for j in 0..d {
            let xv = x.at(t, j);
            let mut acc = T::zero();
            for k in 0..h {
                let l = j * h + k;
                let u = beta[l] * xv;
                let r = c.pr[l] * u + (c.qr[l] * hr[l] - c.qi[l] * hi[l]);
                let i = c.pi[l] * u + (c.qr[l] * hi[l] + c.qi[l] * hr[l]);
                hr[l] = r;
                hi[l] = i;
                acc = acc + (eta_re[l] * r - eta_im[l] * i);
            }
            y[t * d + j] = acc;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.re.extend_from_slice(&hr);
            tr.im.extend_from_slice(&hi);
        }
    }
    let out = EmaState {
        h: ComplexTensor::new(Tensor::new(&[d, h], hr)?, Tensor::new(&[d, h], hi)?)?,
    };
    Ok((Tensor::new(&[n, d], y)?, out))
}

/// Complex EMA scan from carry-in state `s0`.
pub fn cema_apply<T: Scalar>(
    x: &Tensor<T>,
    p: &CemaParams<T>,
    s0: &EmaState<T>,
) -> Result<(Tensor<T>, EmaState<T>)> {
    cema_scan(x, p, s0, None)
}

/// Like [`cema_apply`] but also returns every intermediate state.
pub fn cema_apply_traced<T: Scalar>(
    x: &Tensor<T>,
    p: &CemaParams<T>,
    s0: &EmaState<T>,
) -> Result<(Tensor<T>, EmaState<T>, ScanTrace<T>)> {
    let mut trace = ScanTrace {
        d: 0,
        h: 0,
        re: Vec::new(),
        im: Vec::new(),
    };
    let (y, s) = cema_scan(x, p, s0, Some(&mut trace))?;
    Ok((y, s, trace))
}

/// Impulse response `K[j, τ]`, `τ = 0..length`, evaluated in closed polar
/// form rather than by iterating the recurrence.
pub fn cema_kernel<T: Scalar>(p: &CemaParams<T>, length: usize) -> Result<Tensor<T>> {
    p.validate()?;
    if length == 0 {
        return Err(Error::Parameter("kernel length must be at least 1".into()));
    }
    let (d, h) = p.dims();
    let (beta, alpha, delta, theta) = (p.beta.data(), p.alpha.data(), p.delta.data(), p.theta.data());
    let (eta_re, eta_im) = (p.eta.re.data(), p.eta.im.data());
    let mut k = vec![T::zero(); d * length];
    for j in 0..d {
        for tau in 0..length {
            let mut acc = T::zero();
            for lane in 0..h {
                let l = j * h + lane;
                let rho = T::one() - alpha[l] * delta[l];
                let mag = alpha[l] * beta[l] * rho.powi(tau as i32);
                let angle = theta[l] * T::from_count(tau + 1);
                acc = acc + mag * (eta_re[l] * angle.cos() - eta_im[l] * angle.sin());
            }
            k[j * length + tau] = acc;
        }
    }
    Tensor::new(&[d, length], k)
}

/// Per-feature causal convolution `y[t, j] = Σ_τ K[j, τ] x[t − τ, j]`.
pub fn causal_convolve<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = (x.rows(), x.cols());
    if kernel.rows() != d || kernel.cols() < n {
        return Err(shape_err("causal_convolve", x.shape(), kernel.shape()));
    }
    let len = kernel.cols();
    let mut y = vec![T::zero(); n * d];
    for t in 0..n {
        for j in 0..d {
            let mut acc = T::zero();
            for tau in 0..=t {
                acc = acc + kernel.data()[j * len + tau] * x.at(t - tau, j);
            }
            y[t * d + j] = acc;
        }
    }
    Tensor::new(&[n, d], y)
}

/// Complex scan over consecutive chunks of length `chunk`, threading the
/// state between chunks.
pub fn ema_chunked<T: Scalar>(
    x: &Tensor<T>,
    p: &CemaParams<T>,
    s0: &EmaState<T>,
    chunk: usize,
) -> Result<(Tensor<T>, EmaState<T>)> {
    if chunk == 0 {
        return Err(Error::Parameter("chunk length must be at least 1".into()));
    }
    let n = x.rows();
    let mut state = s0.clone();
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let (y, s) = cema_apply(&x.slice_rows(start, end)?, p, &state)?;
        parts.push(y);
        state = s;
        start = end;
    }
    Ok((Tensor::concat_rows(&parts)?, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(alpha: f64, delta: f64) -> EmaParams<f64> {
        let one = Tensor::full(&[1, 1], 1.0);
        EmaParams {
            beta: one.clone(),
            alpha: Tensor::full(&[1, 1], alpha),
            delta: Tensor::full(&[1, 1], delta),
            eta: one,
        }
    }

    fn column(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn memoryless_ema_is_identity() {
        let x = column(&[0.3, -1.2, 4.0]);
        let (y, _) = ema_apply(&x, &scalar_params(1.0, 1.0), &EmaState::zeros(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn three_step_unrolled() {
        let x = column(&[1.0, 1.0, 1.0]);
        let (y, s) = ema_apply(&x, &scalar_params(0.5, 1.0), &EmaState::zeros(1, 1)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.75, 0.875]);
        assert_eq!(s.h.re.data(), &[0.875]);
    }

    #[test]
    fn zero_input_decays_state() {
        let mut rng = Rng::new(11);
        let p = CemaParams::<f64>::sample(3, 2, &mut rng);
        let s0 = EmaState {
            h: ComplexTensor {
                re: Tensor::random_normal(&[3, 2], 1.0, &mut rng),
                im: Tensor::random_normal(&[3, 2], 1.0, &mut rng),
            },
        };
        let x = Tensor::zeros(&[4, 3]);
        let (_, s) = cema_apply(&x, &p, &s0).unwrap();
        let norm = |s: &EmaState<f64>| {
            s.h.re.data().iter().chain(s.h.im.data()).map(|v| v * v).sum::<f64>()
        };
        assert!(norm(&s) < norm(&s0));

        let (y, s) = cema_apply(&x, &p, &EmaState::zeros(3, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(s.h.re.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_turn_rotation() {
        let p = CemaParams {
            beta: Tensor::full(&[1, 1], 1.0),
            alpha: Tensor::full(&[1, 1], 1.0),
            delta: Tensor::full(&[1, 1], 1.0),
            theta: Tensor::full(&[1, 1], std::f64::consts::FRAC_PI_2),
            eta: ComplexTensor::from_real(Tensor::full(&[1, 1], 1.0)),
        };
        let (y, trace_s) = cema_apply(&column(&[1.0, 2.0]), &p, &EmaState::zeros(1, 1)).unwrap();
        // cos(π/2) is ~6e-17 in floating point, not exactly zero.
        assert!(y.data().iter().all(|v| v.abs() < 1e-15));
        assert!((trace_s.h.im.data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_first_tap_and_memoryless() {
        let mut rng = Rng::new(5);
        let mut p = CemaParams::<f64>::sample(2, 3, &mut rng);
        let k = cema_kernel(&p, 4).unwrap();
        for j in 0..2 {
            let mut first = 0.0;
            for lane in 0..3 {
                let l = j * 3 + lane;
                let (s, c) = p.theta.data()[l].sin_cos();
                let g = p.alpha.data()[l] * p.beta.data()[l];
                first += g * (p.eta.re.data()[l] * c - p.eta.im.data()[l] * s);
            }
            assert!((k.at(j, 0) - first).abs() < 1e-14);
        }
        p.alpha = Tensor::full(&[2, 3], 1.0);
        p.delta = Tensor::full(&[2, 3], 1.0);
        let k = cema_kernel(&p, 4).unwrap();
        for j in 0..2 {
            for tau in 1..4 {
                assert_eq!(k.at(j, tau), 0.0);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_decay() {
        let x = column(&[1.0]);
        for (a, dl) in [(0.0, 0.5), (1.5, 0.5), (0.5, 0.0), (0.5, 1.0001)] {
            let err = ema_apply(&x, &scalar_params(a, dl), &EmaState::zeros(1, 1)).unwrap_err();
            assert!(matches!(err, Error::Parameter(_)));
        }
    }

    #[test]
    fn state_bytes_roundtrip() {
        let mut rng = Rng::new(2);
        let s = EmaState {
            h: ComplexTensor {
                re: Tensor::random_normal(&[2, 3], 1.0, &mut rng),
                im: Tensor::random_normal(&[2, 3], 1.0, &mut rng),
            },
        };
        let bytes = s.to_le_bytes();
        assert_eq!(bytes.len(), 8 * s.payload_len());
        assert_eq!(&bytes[..8], &s.h.re.data()[0].to_le_bytes());
        assert_eq!(EmaState::from_le_bytes(&bytes, 2, 3).unwrap(), s);
    }

    #[test]
    fn runs_at_single_precision() {
        let mut rng = Rng::new(9);
        let p64 = CemaParams::<f64>::sample(2, 2, &mut rng);
        let x64 = Tensor::<f64>::random_normal(&[6, 2], 1.0, &mut rng);
        let p32 = CemaParams {
            beta: p64.beta.cast(),
            alpha: p64.alpha.cast(),
            delta: p64.delta.cast(),
            theta: p64.theta.cast(),
            eta: ComplexTensor {
                re: p64.eta.re.cast(),
                im: p64.eta.im.cast(),
            },
        };
        let (y64, _) = cema_apply(&x64, &p64, &EmaState::zeros(2, 2)).unwrap();
        let (y32, _) = cema_apply(&x64.cast::<f32>(), &p32, &EmaState::zeros(2, 2)).unwrap();
        for (a, b) in y64.data().iter().zip(y32.data()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
