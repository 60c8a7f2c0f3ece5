//! Scalar and array primitives shared by every layer: the scaled tanh
//! activation, valid strided convolution (cross-correlation), leaky
//! integration, per-group softmax, the KL loss and the Gaussian population
//! code used to turn analog motor values into softmax teaching signals.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmdnnError};

/// Output amplitude of the activation.
pub const TANH_SCALE: f64 = 1.7159;
/// Input slope of the activation.
pub const TANH_SLOPE: f64 = 2.0 / 3.0;
/// Lower clamp applied to output probabilities inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-10;

/// Softmax outputs that are `OutputVector`s: per group, values in (0, 1)
/// summing to one.
pub type OutputVector = Vec<f64>;

#[inline]
pub(crate) fn act(u: f64) -> f64 {
    TANH_SCALE * (TANH_SLOPE * u).tanh()
}

/// Derivative of [`act`] expressed through its output `v = act(u)`.
#[inline]
pub(crate) fn act_prime_from_output(v: f64) -> f64 {
    let t = v / TANH_SCALE;
    TANH_SCALE * TANH_SLOPE * (1.0 - t * t)
}

#[inline]
pub(crate) fn leak(u_prev: f64, drive: f64, tau: f64) -> f64 {
    (1.0 - 1.0 / tau) * u_prev + drive / tau
}

/// `1.7159 * tanh(2u/3)`.
pub fn scaled_tanh(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(VmdnnError::Domain(format!("scaled_tanh of {u}")));
    }
    Ok(act(u))
}

pub fn scaled_tanh_prime(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(VmdnnError::Domain(format!("scaled_tanh_prime of {u}")));
    }
    let sech = 1.0 / (TANH_SLOPE * u).cosh();
    Ok(TANH_SCALE * TANH_SLOPE * sech * sech)
}

/// `(1 - 1/tau) * u_prev + drive / tau`.
pub fn leaky_update(u_prev: f64, drive: f64, tau: f64) -> Result<f64> {
    if !(tau >= 1.0) || !tau.is_finite() {
        return Err(VmdnnError::config(format!(
            "time constant must be >= 1, got {tau}"
        )));
    }
    if !u_prev.is_finite() || !drive.is_finite() {
        return Err(VmdnnError::Domain(format!(
            "leaky_update of non-finite input ({u_prev}, {drive})"
        )));
    }
    Ok(leak(u_prev, drive, tau))
}

/// Three-dimensional activation array laid out `[map][row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapStack {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMapStack {
    pub fn zeros(maps: usize, height: usize, width: usize) -> Self {
        Self {
            maps,
            height,
            width,
            values: vec![0.0; maps * height * width],
        }
    }

    pub fn from_values(maps: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if maps == 0 || height == 0 || width == 0 {
            return Err(VmdnnError::config(format!(
                "feature map stack dimensions must be positive, got {maps}x{height}x{width}"
            )));
        }
        if values.len() != maps * height * width {
            return Err(VmdnnError::config(format!(
                "feature map stack {maps}x{height}x{width} needs {} values, got {}",
                maps * height * width,
                values.len()
            )));
        }
        Ok(Self {
            maps,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn index(&self, map: usize, row: usize, col: usize) -> usize {
        (map * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, map: usize, row: usize, col: usize) -> f64 {
        self.values[self.index(map, row, col)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Output extent of a valid strided convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Shape bookkeeping for one convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_maps: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_maps: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_maps: usize,
        in_h: usize,
        in_w: usize,
        out_maps: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<Self> {
        let out_h = conv_output_len(in_h, kh, stride);
        let out_w = conv_output_len(in_w, kw, stride);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if in_maps > 0 && out_maps > 0 => Ok(Self {
                in_maps,
                in_h,
                in_w,
                out_maps,
                kh,
                kw,
                stride,
                out_h,
                out_w,
            }),
            _ => Err(VmdnnError::config(format!(
                "kernel {kh}x{kw} stride {stride} does not fit input {in_maps}@{in_h}x{in_w} -> {out_maps} maps"
            ))),
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_maps * self.in_maps * self.kh * self.kw
    }

    pub fn input_len(&self) -> usize {
        self.in_maps * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_maps * self.out_h * self.out_w
    }

    /// `out = weights (*) input (+ biases)`; `out` is overwritten.
    pub(crate) fn forward(&self, input: &[f64], weights: &[f64], biases: Option<&[f64]>, out: &mut [f64]) {
        let kk = self.kh * self.kw;
        for m in 0..self.out_maps {
            let bias = biases.map_or(0.0, |b| b[m]);
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut acc = bias;
                    for j in 0..self.in_maps {
                        let wbase = (m * self.in_maps + j) * kk;
                        let ibase = j * self.in_h * self.in_w;
                        for a in 0..self.kh {
                            let row = ibase + (oy * self.stride + a) * self.in_w + ox * self.stride;
                            let wrow = wbase + a * self.kw;
                            for b in 0..self.kw {
                                acc += weights[wrow + b] * input[row + b];
                            }
                        }
                    }
                    out[(m * self.out_h + oy) * self.out_w + ox] = acc;
                }
            }
        }
    }

    /// Accumulates `d loss / d input` into `grad_in`.
    pub(crate) fn backward_input(&self, grad_out: &[f64], weights: &[f64], grad_in: &mut [f64]) {
        let kk = self.kh * self.kw;
        for m in 0..self.out_maps {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let g = grad_out[(m * self.out_h + oy) * self.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..self.in_maps {
                        let wbase = (m * self.in_maps + j) * kk;
                        let ibase = j * self.in_h * self.in_w;
                        for a in 0..self.kh {
                            let row = ibase + (oy * self.stride + a) * self.in_w + ox * self.stride;
                            let wrow = wbase + a * self.kw;
                            for b in 0..self.kw {
                                grad_in[row + b] += g * weights[wrow + b];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates kernel (and optionally bias) gradients.
    pub(crate) fn backward_params(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        mut grad_b: Option<&mut [f64]>,
    ) {
        let kk = self.kh * self.kw;
        for m in 0..self.out_maps {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let g = grad_out[(m * self.out_h + oy) * self.out_w + ox];
                    if let Some(gb) = grad_b.as_deref_mut() {
                        gb[m] += g;
                    }
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..self.in_maps {
                        let wbase = (m * self.in_maps + j) * kk;
                        let ibase = j * self.in_h * self.in_w;
                        for a in 0..self.kh {
                            let row = ibase + (oy * self.stride + a) * self.in_w + ox * self.stride;
                            let wrow = wbase + a * self.kw;
                            for b in 0..self.kw {
                                grad_w[wrow + b] += g * input[row + b];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution kernels `[out][in][kh][kw]` with one bias per output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub out_maps: usize,
    pub in_maps: usize,
    pub kh: usize,
    pub kw: usize,
    /// Sampling factor: shift of the kernel between adjacent outputs.
    pub stride: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_maps: usize, in_maps: usize, kh: usize, kw: usize, stride: usize) -> Self {
        Self {
            out_maps,
            in_maps,
            kh,
            kw,
            stride,
            weights: vec![0.0; out_maps * in_maps * kh * kw],
            biases: vec![0.0; out_maps],
        }
    }

    #[inline]
    pub fn weight_index(&self, out: usize, inp: usize, a: usize, b: usize) -> usize {
        ((out * self.in_maps + inp) * self.kh + a) * self.kw + b
    }
}

/// Valid (unpadded) strided cross-correlation plus per-map bias.
pub fn conv_valid(input: &FeatureMapStack, bank: &KernelBank) -> Result<FeatureMapStack> {
    if input.maps != bank.in_maps {
        return Err(VmdnnError::config(format!(
            "input has {} maps but kernel bank expects {}",
            input.maps, bank.in_maps
        )));
    }
    if bank.weights.len() != bank.out_maps * bank.in_maps * bank.kh * bank.kw
        || bank.biases.len() != bank.out_maps
    {
        return Err(VmdnnError::config("kernel bank array lengths disagree with its shape"));
    }
    let geom = ConvGeometry::new(
        input.maps,
        input.height,
        input.width,
        bank.out_maps,
        bank.kh,
        bank.kw,
        bank.stride,
    )?;
    let mut out = FeatureMapStack::zeros(geom.out_maps, geom.out_h, geom.out_w);
    geom.forward(&input.values, &bank.weights, Some(&bank.biases), &mut out.values);
    Ok(out)
}

/// Analog range covered by one softmax group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRange {
    pub lo: f64,
    pub hi: f64,
}

/// Layout of the softmax output layer and its population codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxGroupSpec {
    pub group_count: usize,
    pub group_size: usize,
    /// One range per group.
    pub ranges: Vec<GroupRange>,
    /// Gaussian encoding width as a fraction of each group's range.
    pub sigma: f64,
}

impl SoftmaxGroupSpec {
    /// `group_count` groups sharing one range.
    pub fn uniform(group_count: usize, group_size: usize, lo: f64, hi: f64, sigma: f64) -> Self {
        Self {
            group_count,
            group_size,
            ranges: vec![GroupRange { lo, hi }; group_count],
            sigma,
        }
    }

    pub fn total(&self) -> usize {
        self.group_count * self.group_size
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.group_count == 0 {
            v.push("softmax group count must be positive".to_string());
        }
        if self.group_size < 2 {
            v.push(format!("softmax group size must be >= 2, got {}", self.group_size));
        }
        if self.ranges.len() != self.group_count {
            v.push(format!(
                "softmax spec has {} ranges for {} groups",
                self.ranges.len(),
                self.group_count
            ));
        }
        for (g, r) in self.ranges.iter().enumerate() {
            if !(r.lo < r.hi) {
                v.push(format!("softmax group {g} range [{}, {}] is empty", r.lo, r.hi));
            }
        }
        if !(self.sigma > 0.0) {
            v.push(format!("encoding width must be positive, got {}", self.sigma));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(VmdnnError::config(v.join("; ")))
        }
    }

    /// Reference value of neuron `i` in group `g`.
    #[inline]
    pub fn reference_point(&self, g: usize, i: usize) -> f64 {
        let r = self.ranges[g];
        r.lo + (r.hi - r.lo) * i as f64 / (self.group_size - 1) as f64
    }
}

/// Softmax normalised independently inside each consecutive group of
/// `group_size` entries. `out` is overwritten.
pub(crate) fn softmax_groups_into(u: &[f64], group_size: usize, out: &mut [f64]) {
    for (ug, yg) in u.chunks(group_size).zip(out.chunks_mut(group_size)) {
        let max = ug.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (y, &x) in yg.iter_mut().zip(ug) {
            *y = (x - max).exp();
            sum += *y;
        }
        for y in yg.iter_mut() {
            *y /= sum;
        }
    }
}

pub fn grouped_softmax(u: &[f64], spec: &SoftmaxGroupSpec) -> Result<OutputVector> {
    if u.len() != spec.total() {
        return Err(VmdnnError::config(format!(
            "softmax input has {} entries, spec expects {}",
            u.len(),
            spec.total()
        )));
    }
    let mut out = vec![0.0; u.len()];
    softmax_groups_into(u, spec.group_size, &mut out);
    Ok(out)
}

/// `sum_i target_i * ln(target_i / max(output_i, KL_FLOOR))`, with zero
/// target entries contributing nothing.
pub fn kl_loss(target: &[f64], output: &[f64]) -> f64 {
    target
        .iter()
        .zip(output)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &y)| t * (t.ln() - y.max(KL_FLOOR).ln()))
        .sum()
}

/// Gradient of [`kl_loss`] with respect to the pre-softmax states, written
/// into `grad_u`.
pub(crate) fn kl_softmax_grad(target: &[f64], output: &[f64], group_size: usize, grad_u: &mut [f64]) {
    for ((tg, yg), gg) in target
        .chunks(group_size)
        .zip(output.chunks(group_size))
        .zip(grad_u.chunks_mut(group_size))
    {
        // dL/dy_i = -t_i / y_i, zero where the floor is active.
        let mut dot = 0.0;
        for (g, (&t, &y)) in gg.iter_mut().zip(tg.iter().zip(yg)) {
            *g = if t > 0.0 && y > KL_FLOOR { -t / y } else { 0.0 };
            dot += y * *g;
        }
        for (g, &y) in gg.iter_mut().zip(yg) {
            *g = y * (*g - dot);
        }
    }
}

/// Gaussian population code of one analog value per group. The flag reports
/// whether any value had to be clamped into its range.
pub fn encode_analog(values: &[f64], spec: &SoftmaxGroupSpec) -> Result<(OutputVector, bool)> {
    if values.len() != spec.group_count {
        return Err(VmdnnError::config(format!(
            "encode_analog got {} values for {} groups",
            values.len(),
            spec.group_count
        )));
    }
    let mut clamped = false;
    let mut out = vec![0.0; spec.total()];
    for (g, (&v, code)) in values.iter().zip(out.chunks_mut(spec.group_size)).enumerate() {
        let r = spec.ranges[g];
        let v = if v < r.lo || v > r.hi || v.is_nan() {
            clamped = true;
            if v.is_nan() {
                0.5 * (r.lo + r.hi)
            } else {
                v.clamp(r.lo, r.hi)
            }
        } else {
            v
        };
        let width = spec.sigma * (r.hi - r.lo);
        let denom = 2.0 * width * width;
        for (i, c) in code.iter_mut().enumerate() {
            let d = v - spec.reference_point(g, i);
            *c = -d * d / denom;
        }
        // log-sum-exp keeps narrow codes from underflowing to all zeros
        let max = code.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in code.iter_mut() {
            *c = (*c - max).exp();
            sum += *c;
        }
        for c in code.iter_mut() {
            *c /= sum;
        }
    }
    Ok((out, clamped))
}

/// Expectation of the reference points under each group's distribution.
pub fn decode_analog(y: &[f64], spec: &SoftmaxGroupSpec) -> Result<Vec<f64>> {
    if y.len() != spec.total() {
        return Err(VmdnnError::config(format!(
            "decode_analog got {} values, spec expects {}",
            y.len(),
            spec.total()
        )));
    }
    Ok(y.chunks(spec.group_size)
        .enumerate()
        .map(|(g, code)| {
            let r = spec.ranges[g];
            let v: f64 = code
                .iter()
                .enumerate()
                .map(|(i, &p)| p * spec.reference_point(g, i))
                .sum();
            v.clamp(r.lo, r.hi)
        })
        .collect())
}
