//! Reference model of the speech modality adapter.
//!
//! Encoder frames `N × d_enc` are stacked `k` at a time into `ceil(N/k)` rows
//! of width `k·d_enc` (last group zero-padded, or dropped under
//! [`PadPolicy::Truncate`]), then projected by a two-layer MLP:
//!
//! ```text
//! out = act(x·W1 + b1)·W2 + b2
//! ```
//!
//! With `k = 4` over an encoder that already halves the frame rate, each
//! output frame covers eight input frames.
//!
//! Arithmetic is 64-bit; [`mlp_forward_f32`] reruns the forward pass in
//! 32-bit for parity checks.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("input has no frames")]
    EmptyInput,
    #[error("{frames} frame(s) cannot fill one group of {stack_factor} when truncating")]
    DegenerateOutput { frames: usize, stack_factor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdapterError> {
        if data.len() != rows * cols {
            return Err(AdapterError::ShapeMismatch(format!(
                "{rows}×{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AdapterError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AdapterError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols)
            .map(|_| (2.0 * rng.next_f64() - 1.0) * scale)
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    ZeroPad,
    Truncate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact GELU, `x·Φ(x)`.
    #[default]
    Gelu,
    Tanh,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

/// Minimal float abstraction so the forward pass runs in either width.
trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    const ZERO: Self;
    fn of(v: f64) -> Self;
    fn erf(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    fn of(v: f64) -> Self {
        v
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => T::of(0.5) * x * (T::of(1.0) + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Linear => 1.0,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        self.apply(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_enc: usize,
    pub stack_factor: usize,
    pub d_hidden: usize,
    pub d_llm: usize,
    pub pad_policy: PadPolicy,
    pub activation: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d_enc: 512,
            stack_factor: 4,
            d_hidden: 2048,
            d_llm: 2048,
            pad_policy: PadPolicy::ZeroPad,
            activation: Activation::Gelu,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        for (name, v) in [
            ("d_enc", self.d_enc),
            ("stack_factor", self.stack_factor),
            ("d_hidden", self.d_hidden),
            ("d_llm", self.d_llm),
        ] {
            if v == 0 {
                return Err(AdapterError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn stacked_width(&self) -> usize {
        self.stack_factor * self.d_enc
    }

    /// Output frame count for `n` encoder frames.
    pub fn output_frames(&self, n: usize) -> usize {
        match self.pad_policy {
            PadPolicy::ZeroPad => n.div_ceil(self.stack_factor),
            PadPolicy::Truncate => n / self.stack_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w1: FrameMatrix,
    pub b1: Vec<f64>,
    pub w2: FrameMatrix,
    pub b2: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(config: &AdapterConfig) -> Self {
        Self {
            w1: FrameMatrix::zeros(config.stacked_width(), config.d_hidden),
            b1: vec![0.0; config.d_hidden],
            w2: FrameMatrix::zeros(config.d_hidden, config.d_llm),
            b2: vec![0.0; config.d_llm],
        }
    }

    /// Uniform initialization scaled by `1/sqrt(fan_in)`.
    pub fn seeded(config: &AdapterConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let s1 = 1.0 / (config.stacked_width() as f64).sqrt();
        let s2 = 1.0 / (config.d_hidden as f64).sqrt();
        let w1 = FrameMatrix::random(config.stacked_width(), config.d_hidden, s1, &mut rng);
        let b1 = FrameMatrix::random(1, config.d_hidden, s1, &mut rng).data;
        let w2 = FrameMatrix::random(config.d_hidden, config.d_llm, s2, &mut rng);
        let b2 = FrameMatrix::random(1, config.d_llm, s2, &mut rng).data;
        Self { w1, b1, w2, b2 }
    }

    pub fn check_shapes(&self) -> Result<(), AdapterError> {
        let mismatch = |msg: String| Err(AdapterError::ShapeMismatch(msg));
        if self.b1.len() != self.w1.cols {
            return mismatch(format!("b1 has {} entries, W1 has {} columns", self.b1.len(), self.w1.cols));
        }
        if self.w2.rows != self.w1.cols {
            return mismatch(format!("W2 has {} rows, W1 has {} columns", self.w2.rows, self.w1.cols));
        }
        if self.b2.len() != self.w2.cols {
            return mismatch(format!("b2 has {} entries, W2 has {} columns", self.b2.len(), self.w2.cols));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", self.b1.as_mut_slice()),
            ("w2", self.w2.as_mut_slice()),
            ("b2", self.b2.as_mut_slice()),
        ]
    }
}

/// Concatenates groups of `k` consecutive frames.
pub fn stack_frames(
    x: &FrameMatrix,
    stack_factor: usize,
    pad_policy: PadPolicy,
) -> Result<FrameMatrix, AdapterError> {
    if stack_factor == 0 {
        return Err(AdapterError::InvalidConfig("stack_factor must be at least 1".into()));
    }
    if x.rows == 0 {
        return Err(AdapterError::EmptyInput);
    }
    let out_rows = match pad_policy {
        PadPolicy::ZeroPad => x.rows.div_ceil(stack_factor),
        PadPolicy::Truncate => x.rows / stack_factor,
    };
    if out_rows == 0 {
        return Err(AdapterError::DegenerateOutput {
            frames: x.rows,
            stack_factor,
        });
    }
    let width = stack_factor * x.cols;
    let mut data = vec![0.0; out_rows * width];
    let used = (out_rows * stack_factor).min(x.rows);
    data[..used * x.cols].copy_from_slice(&x.data[..used * x.cols]);
    FrameMatrix::new(out_rows, width, data)
}

fn forward_generic<T: Real>(
    x: &FrameMatrix,
    params: &AdapterParams,
    activation: Activation,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), AdapterError> {
    params.check_shapes()?;
    if x.cols != params.w1.rows {
        return Err(AdapterError::ShapeMismatch(format!(
            "input width {} does not match W1 rows {}",
            x.cols, params.w1.rows
        )));
    }
    let (m, d_in, d_hid, d_out) = (x.rows, x.cols, params.w1.cols, params.w2.cols);
    let mut pre = vec![T::ZERO; m * d_hid];
    for i in 0..m {
        let acc = &mut pre[i * d_hid..(i + 1) * d_hid];
        for (a, b) in acc.iter_mut().zip(&params.b1) {
            *a = T::of(*b);
        }
        for k in 0..d_in {
            let xik = T::of(x.data[i * d_in + k]);
            for (a, w) in acc.iter_mut().zip(params.w1.row(k)) {
                *a = *a + xik * T::of(*w);
            }
        }
    }
    let hidden: Vec<T> = pre.iter().map(|&z| activation.apply(z)).collect();
    let mut out = vec![T::ZERO; m * d_out];
    for i in 0..m {
        let acc = &mut out[i * d_out..(i + 1) * d_out];
        for (a, b) in acc.iter_mut().zip(&params.b2) {
            *a = T::of(*b);
        }
        for k in 0..d_hid {
            let hik = hidden[i * d_hid + k];
            for (a, w) in acc.iter_mut().zip(params.w2.row(k)) {
                *a = *a + hik * T::of(*w);
            }
        }
    }
    Ok((pre, hidden, out))
}

/// `act(x·W1 + b1)·W2 + b2`, row by row.
pub fn mlp_forward(
    x: &FrameMatrix,
    params: &AdapterParams,
    activation: Activation,
) -> Result<FrameMatrix, AdapterError> {
    let (_, _, out) = forward_generic::<f64>(x, params, activation)?;
    FrameMatrix::new(x.rows, params.w2.cols, out)
}

/// The same forward pass carried out in 32-bit arithmetic.
pub fn mlp_forward_f32(
    x: &FrameMatrix,
    params: &AdapterParams,
    activation: Activation,
) -> Result<FrameMatrix, AdapterError> {
    let (_, _, out) = forward_generic::<f32>(x, params, activation)?;
    FrameMatrix::new(x.rows, params.w2.cols, out.into_iter().map(f64::from).collect())
}

/// Stacks encoder frames and projects them into the LLM embedding space.
pub fn adapter_forward(
    x: &FrameMatrix,
    config: &AdapterConfig,
    params: &AdapterParams,
) -> Result<FrameMatrix, AdapterError> {
    config.validate()?;
    if x.cols != config.d_enc {
        return Err(AdapterError::ShapeMismatch(format!(
            "encoder frames have width {}, config expects {}",
            x.cols, config.d_enc
        )));
    }
    if !x.is_finite() {
        return Err(AdapterError::NonFinite("encoder frames".into()));
    }
    let stacked = stack_frames(x, config.stack_factor, config.pad_policy)?;
    mlp_forward(&stacked, params, config.activation)
}

/// Gradients of a scalar loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Sum of squared outputs.
pub fn squared_output_loss(
    x: &FrameMatrix,
    params: &AdapterParams,
    activation: Activation,
) -> Result<f64, AdapterError> {
    Ok(mlp_forward(x, params, activation)?
        .as_slice()
        .iter()
        .map(|v| v * v)
        .sum())
}

/// Backpropagates [`squared_output_loss`] through the MLP.
pub fn loss_gradients(
    x: &FrameMatrix,
    params: &AdapterParams,
    activation: Activation,
) -> Result<(f64, AdapterGrads), AdapterError> {
    let (pre, hidden, out) = forward_generic::<f64>(x, params, activation)?;
    let (m, d_in, d_hid, d_out) = (x.rows, x.cols, params.w1.cols, params.w2.cols);
    let loss = out.iter().map(|v| v * v).sum();
    let d_out_v: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();

    let mut g_w2 = vec![0.0; d_hid * d_out];
    let mut g_b2 = vec![0.0; d_out];
    let mut d_pre = vec![0.0; m * d_hid];
    for i in 0..m {
        let g = &d_out_v[i * d_out..(i + 1) * d_out];
        for (acc, gj) in g_b2.iter_mut().zip(g) {
            *acc += gj;
        }
        for k in 0..d_hid {
            let h = hidden[i * d_hid + k];
            let row = &mut g_w2[k * d_out..(k + 1) * d_out];
            let mut back = 0.0;
            for ((acc, gj), w) in row.iter_mut().zip(g).zip(params.w2.row(k)) {
                *acc += h * gj;
                back += gj * w;
            }
            d_pre[i * d_hid + k] = back * activation.derivative(pre[i * d_hid + k]);
        }
    }

    let mut g_w1 = vec![0.0; d_in * d_hid];
    let mut g_b1 = vec![0.0; d_hid];
    for i in 0..m {
        let dz = &d_pre[i * d_hid..(i + 1) * d_hid];
        for (acc, d) in g_b1.iter_mut().zip(dz) {
            *acc += d;
        }
        for k in 0..d_in {
            let xik = x.data[i * d_in + k];
            for (acc, d) in g_w1[k * d_hid..(k + 1) * d_hid].iter_mut().zip(dz) {
                *acc += xik * d;
            }
        }
    }
    Ok((
        loss,
        AdapterGrads {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter with the largest error, as `tensor[index]`.
    pub worst: String,
    pub n_checked: usize,
}

/// Compares analytic gradients of the squared-output loss with central
/// differences over every parameter. The per-parameter error is
/// `|analytic - numeric| / max(|analytic|, |numeric|)`, taken as zero when
/// both are exactly zero.
pub fn grad_check(
    params: &AdapterParams,
    x: &FrameMatrix,
    activation: Activation,
    eps: f64,
) -> Result<GradCheckReport, AdapterError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AdapterError::InvalidEpsilon(eps));
    }
    let (_, grads) = loss_gradients(x, params, activation)?;
    let analytic = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        n_checked: 0,
    };
    for t in 0..4 {
        let len = probe.tensors_mut()[t].1.len();
        for idx in 0..len {
            let (name, original) = {
                let mut tensors = probe.tensors_mut();
                let (name, slot) = &mut tensors[t];
                (*name, slot[idx])
            };
            probe.tensors_mut()[t].1[idx] = original + eps;
            let plus = squared_output_loss(x, &probe, activation)?;
            probe.tensors_mut()[t].1[idx] = original - eps;
            let minus = squared_output_loss(x, &probe, activation)?;
            probe.tensors_mut()[t].1[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[t][idx];
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(AdapterError::NonFiniteGradient(format!("{name}[{idx}]")));
            }
            let scale = exact.abs().max(numeric.abs());
            let err = if scale == 0.0 {
                0.0
            } else {
                (exact - numeric).abs() / scale
            };
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err;
                report.worst = format!("{name}[{idx}]");
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

/// JSON parameter bundle: named row-major tensors with explicit shapes.
///
/// ```text
/// {"format": "slotcot-adapter-params", "version": 1,
///  "tensors": {"w1": {"shape": [k*d_enc, d_hidden], "data": [...]},
///              "b1": {"shape": [d_hidden], "data": [...]},
///              "w2": {"shape": [d_hidden, d_llm], "data": [...]},
///              "b2": {"shape": [d_llm], "data": [...]}}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub format: String,
    pub version: u32,
    pub tensors: ParamTensors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamTensors {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const BUNDLE_FORMAT: &str = "slotcot-adapter-params";

impl ParamBundle {
    pub fn from_params(params: &AdapterParams) -> Self {
        let mat = |m: &FrameMatrix| Tensor {
            shape: vec![m.rows, m.cols],
            data: m.data.clone(),
        };
        let vec1 = |v: &[f64]| Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        };
        Self {
            format: BUNDLE_FORMAT.into(),
            version: 1,
            tensors: ParamTensors {
                w1: mat(&params.w1),
                b1: vec1(&params.b1),
                w2: mat(&params.w2),
                b2: vec1(&params.b2),
            },
        }
    }

    pub fn into_params(self) -> Result<AdapterParams, AdapterError> {
        if self.format != BUNDLE_FORMAT || self.version != 1 {
            return Err(AdapterError::InvalidConfig(format!(
                "unsupported parameter bundle {} v{}",
                self.format, self.version
            )));
        }
        let mat = |name: &str, t: Tensor| -> Result<FrameMatrix, AdapterError> {
            match t.shape[..] {
                [r, c] => FrameMatrix::new(r, c, t.data),
                _ => Err(AdapterError::ShapeMismatch(format!("{name} must be 2-D"))),
            }
        };
        let vec1 = |name: &str, t: Tensor| -> Result<Vec<f64>, AdapterError> {
            match t.shape[..] {
                [n] if n == t.data.len() => Ok(t.data),
                _ => Err(AdapterError::ShapeMismatch(format!("{name} must be 1-D with matching data"))),
            }
        };
        let t = self.tensors;
        let params = AdapterParams {
            w1: mat("w1", t.w1)?,
            b1: vec1("b1", t.b1)?,
            w2: mat("w2", t.w2)?,
            b2: vec1("b2", t.b2)?,
        };
        params.check_shapes()?;
        let all_finite = params.w1.is_finite()
            && params.w2.is_finite()
            && params.b1.iter().chain(&params.b2).all(|v| v.is_finite());
        if !all_finite {
            return Err(AdapterError::NonFinite("parameter bundle".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> AdapterConfig {
        AdapterConfig {
            d_enc: 2,
            stack_factor: 4,
            d_hidden: 5,
            d_llm: 4,
            ..AdapterConfig::default()
        }
    }

    fn frames(n: usize, d: usize) -> FrameMatrix {
        let data = (0..n * d).map(|i| i as f64 + 1.0).collect();
        FrameMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn exact_multiple_stacks_into_one_row() {
        let x = frames(4, 2);
        let s = stack_frames(&x, 4, PadPolicy::ZeroPad).unwrap();
        assert_eq!(s.shape(), (1, 8));
        assert_eq!(s.row(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn ragged_tail_is_zero_padded() {
        let x = frames(5, 2);
        let s = stack_frames(&x, 4, PadPolicy::ZeroPad).unwrap();
        assert_eq!(s.shape(), (2, 8));
        assert_eq!(s.row(1), &[9.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn truncation() {
        let x = frames(6, 2);
        let s = stack_frames(&x, 4, PadPolicy::Truncate).unwrap();
        assert_eq!(s.shape(), (1, 8));
        assert_eq!(
            stack_frames(&frames(3, 2), 4, PadPolicy::Truncate),
            Err(AdapterError::DegenerateOutput {
                frames: 3,
                stack_factor: 4
            })
        );
        assert_eq!(
            stack_frames(&FrameMatrix::zeros(0, 2), 4, PadPolicy::ZeroPad),
            Err(AdapterError::EmptyInput)
        );
    }

    #[test]
    fn zero_params_give_zero_output() {
        let c = small_config();
        let stacked = stack_frames(&frames(7, 2), 4, PadPolicy::ZeroPad).unwrap();
        let out = mlp_forward(&stacked, &AdapterParams::zeros(&c), c.activation).unwrap();
        assert_eq!(out.shape(), (2, 4));
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_bias_passes_through() {
        let c = small_config();
        let mut p = AdapterParams::zeros(&c);
        p.b2 = vec![0.5, -1.0, 2.0, 3.25];
        let stacked = stack_frames(&frames(9, 2), 4, PadPolicy::ZeroPad).unwrap();
        let out = mlp_forward(&stacked, &p, c.activation).unwrap();
        for i in 0..out.rows() {
            assert_eq!(out.row(i), p.b2.as_slice());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let c = small_config();
        let p = AdapterParams::zeros(&c);
        let wrong = FrameMatrix::zeros(2, 7);
        assert!(matches!(
            mlp_forward(&wrong, &p, c.activation),
            Err(AdapterError::ShapeMismatch(_))
        ));
        let mut bad = p.clone();
        bad.b1.pop();
        assert!(bad.check_shapes().is_err());
        assert!(adapter_forward(&frames(4, 3), &c, &p).is_err());
    }

    #[test]
    fn default_frame_counts() {
        let c = AdapterConfig::default();
        assert_eq!(c.output_frames(100), 25);
        assert_eq!(c.output_frames(1), 1);
        assert_eq!(c.output_frames(101), 26);
    }

    #[test]
    fn gelu_values() {
        // Reference values of x·Φ(x).
        assert!((Activation::Gelu.eval(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert!((Activation::Gelu.eval(-1.0) + 0.15865525393145707).abs() < 1e-15);
        assert_eq!(Activation::Gelu.eval(0.0), 0.0);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Linear] {
            for x in [-2.5, -0.3, 0.0, 0.7, 3.0] {
                let h = 1e-6;
                let numeric = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
                assert!((act.derivative(x) - numeric).abs() < 1e-8, "{act} at {x}");
            }
        }
    }

    #[test]
    fn gradients_pass_the_check() {
        let c = AdapterConfig {
            d_enc: 2,
            stack_factor: 4,
            d_hidden: 5,
            d_llm: 4,
            ..AdapterConfig::default()
        };
        let p = AdapterParams::seeded(&c, 3);
        let mut rng = SplitMix64::new(4);
        let x = FrameMatrix::random(3, 8, 1.0, &mut rng);
        let report = grad_check(&p, &x, Activation::Gelu, 1e-5).unwrap();
        assert_eq!(report.n_checked, p.n_params());
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_activation_is_near_exact() {
        let c = small_config();
        let p = AdapterParams::seeded(&c, 8);
        let mut rng = SplitMix64::new(9);
        let x = FrameMatrix::random(3, 8, 1.0, &mut rng);
        let report = grad_check(&p, &x, Activation::Linear, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn bad_epsilon() {
        let c = small_config();
        let p = AdapterParams::seeded(&c, 1);
        let x = FrameMatrix::zeros(1, 8);
        for eps in [0.0, -1e-5, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                grad_check(&p, &x, Activation::Gelu, eps),
                Err(AdapterError::InvalidEpsilon(_))
            ));
        }
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let c = small_config();
        let p = AdapterParams::seeded(&c, 5);
        let mut rng = SplitMix64::new(6);
        let x = FrameMatrix::random(4, 8, 1.0, &mut rng);
        let a = mlp_forward(&x, &p, c.activation).unwrap();
        let b = mlp_forward_f32(&x, &p, c.activation).unwrap();
        let max_diff = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5 && max_diff > 0.0, "{max_diff}");
    }

    #[test]
    fn bundle_round_trip() {
        let c = small_config();
        let p = AdapterParams::seeded(&c, 2);
        let json = serde_json::to_string(&ParamBundle::from_params(&p)).unwrap();
        let back: ParamBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_params().unwrap(), p);

        let mut broken = ParamBundle::from_params(&p);
        broken.tensors.b2.data.pop();
        assert!(broken.into_params().is_err());
        let mut wrong_format = ParamBundle::from_params(&p);
        wrong_format.format = "npz".into();
        assert!(wrong_format.into_params().is_err());
    }

    #[test]
    fn zero_dims_are_invalid() {
        let c = AdapterConfig {
            stack_factor: 0,
            ..AdapterConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
