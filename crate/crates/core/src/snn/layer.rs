//! Layer definitions and their forward kernels.
//!
//! All layers work on (C, H, W) activations except `Linear`, which takes a
//! rank-1 input (use `Flatten` first). Convolutions are direct loops; the
//! accumulation order per output element is fixed (bias, then input channel,
//! kernel row, kernel column) so sequential and parallel runs agree bit for bit.

use crate::par::{self, Execution};
use crate::tensor::{DenseTensor, Shape, SpikeTensor};

use super::lif::LifParams;
use super::SnnError;

/// Activation flowing between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    Dense(DenseTensor),
    Spike(SpikeTensor),
}

impl Activation {
    pub fn shape(&self) -> &Shape {
        match self {
            Activation::Dense(d) => d.shape(),
            Activation::Spike(s) => s.shape(),
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        match self {
            Activation::Dense(d) => d.clone(),
            Activation::Spike(s) => s.to_dense(),
        }
    }

    pub fn into_dense(self) -> DenseTensor {
        match self {
            Activation::Dense(d) => d,
            Activation::Spike(s) => s.to_dense(),
        }
    }

    pub fn as_spikes(&self) -> Option<&SpikeTensor> {
        match self {
            Activation::Spike(s) => Some(s),
            Activation::Dense(_) => None,
        }
    }

    /// Fraction of nonzero elements. Equals the firing rate for spikes.
    pub fn activity(&self) -> f64 {
        match self {
            Activation::Spike(s) => s.count_ones() as f64 / s.numel() as f64,
            Activation::Dense(d) => {
                let nz = d.data().iter().filter(|&&v| v != 0.0).count();
                nz as f64 / d.data().len() as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        conv_out(h, self.kernel, self.stride, self.padding)
            .zip(conv_out(w, self.kernel, self.stride, self.padding))
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || n + 2 * p < k {
        return None;
    }
    Some((n + 2 * p - k) / s + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[in, out, k, k]`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; in_channels * out_channels * kernel * kernel],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| {
            let full = (n - 1) * self.stride + self.kernel;
            (self.stride > 0 && full > 2 * self.padding).then(|| full - 2 * self.padding)
        };
        f(h).zip(f(w))
    }

    /// Inputs contributing to one output: C_in * (k / s)^2 on average.
    pub fn fan_in(&self) -> usize {
        let per_axis = self.kernel.div_ceil(self.stride.max(1));
        self.in_channels * per_axis * per_axis
    }
}

/// Inference-mode batch normalization with loaded running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    /// Strictly positive; no epsilon is added.
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<(), SnnError> {
        let c = self.channels;
        if [&self.gamma, &self.beta, &self.mean, &self.var]
            .iter()
            .any(|v| v.len() != c)
        {
            return Err(SnnError::Weights(format!(
                "batchnorm vectors must have {c} entries"
            )));
        }
        if let Some(v) = self.var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(SnnError::Weights(format!(
                "batchnorm variance must be positive, got {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: bias.then(|| vec![0.0; out_features]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    BatchNorm(BatchNorm),
    Linear(Linear),
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Lif(LifParams),
    /// Adds the output of layer `from` to this layer's input.
    ResidualAdd { from: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv",
            LayerSpec::ConvTranspose2d(_) => "convt",
            LayerSpec::BatchNorm(_) => "bn",
            LayerSpec::Linear(_) => "linear",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Lif(_) => "lif",
            LayerSpec::ResidualAdd { .. } => "add",
        }
    }

    pub fn is_lif(&self) -> bool {
        matches!(self, LayerSpec::Lif(_))
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape, SnnError> {
        let bad = |msg: String| SnnError::Topology(format!("{}: {msg}", self.kind()));
        let chw = || input.chw().filter(|_| input.rank() == 3);
        match self {
            LayerSpec::Conv2d(c) => {
                let (ci, h, w) = chw().ok_or_else(|| bad(format!("needs (C,H,W), got {input}")))?;
                if ci != c.in_channels {
                    return Err(bad(format!("expects {} channels, got {ci}", c.in_channels)));
                }
                let (ho, wo) = c
                    .out_hw(h, w)
                    .ok_or_else(|| bad(format!("kernel does not fit {input}")))?;
                Ok(Shape::new(vec![c.out_channels, ho, wo])?)
            }
            LayerSpec::ConvTranspose2d(c) => {
                let (ci, h, w) = chw().ok_or_else(|| bad(format!("needs (C,H,W), got {input}")))?;
                if ci != c.in_channels {
                    return Err(bad(format!("expects {} channels, got {ci}", c.in_channels)));
                }
                let (ho, wo) = c
                    .out_hw(h, w)
                    .ok_or_else(|| bad("padding exceeds output".into()))?;
                Ok(Shape::new(vec![c.out_channels, ho, wo])?)
            }
            LayerSpec::BatchNorm(b) => {
                let (ci, _, _) = input.chw().ok_or_else(|| bad(format!("bad input {input}")))?;
                if ci != b.channels {
                    return Err(bad(format!("expects {} channels, got {ci}", b.channels)));
                }
                Ok(input.clone())
            }
            LayerSpec::Linear(l) => {
                if input.rank() != 1 || input.numel() != l.in_features {
                    return Err(bad(format!(
                        "expects ({}) input, got {input}",
                        l.in_features
                    )));
                }
                Ok(Shape::new(vec![l.out_features])?)
            }
            LayerSpec::AvgPool { kernel, stride } => {
                let (c, h, w) = chw().ok_or_else(|| bad(format!("needs (C,H,W), got {input}")))?;
                let ho = conv_out(h, *kernel, *stride, 0);
                let wo = conv_out(w, *kernel, *stride, 0);
                match (ho, wo) {
                    (Some(ho), Some(wo)) if *kernel > 0 => Ok(Shape::new(vec![c, ho, wo])?),
                    _ => Err(bad(format!("window does not fit {input}"))),
                }
            }
            LayerSpec::Flatten => Ok(Shape::new(vec![input.numel()])?),
            LayerSpec::Lif(p) => {
                p.validate()?;
                Ok(input.clone())
            }
            LayerSpec::ResidualAdd { .. } => Ok(input.clone()),
        }
    }

    /// Arithmetic cost of one forward pass on `input`.
    ///
    /// Convolution and linear layers count a multiply and an add per weight
    /// use. Normalization, pooling and residual addition count one op per
    /// input element. Neuron updates and reshapes count zero.
    pub fn flops(&self, input: &Shape) -> u64 {
        let Ok(out) = self.output_shape(input) else {
            return 0;
        };
        match self {
            LayerSpec::Conv2d(c) => {
                let (_, ho, wo) = out.chw().unwrap();
                2 * (c.kernel * c.kernel * c.in_channels * c.out_channels * ho * wo) as u64
            }
            LayerSpec::ConvTranspose2d(c) => {
                let (_, h, w) = input.chw().unwrap();
                2 * (c.kernel * c.kernel * c.in_channels * c.out_channels * h * w) as u64
            }
            LayerSpec::Linear(l) => 2 * (l.in_features * l.out_features) as u64,
            LayerSpec::BatchNorm(_) | LayerSpec::AvgPool { .. } | LayerSpec::ResidualAdd { .. } => {
                input.numel() as u64
            }
            LayerSpec::Flatten | LayerSpec::Lif(_) => 0,
        }
    }

    /// Learnable tensors as `(suffix, extents)`, in a fixed order.
    pub fn param_slots(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d(c) => {
                let mut v = vec![(
                    "weight",
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                )];
                if c.bias.is_some() {
                    v.push(("bias", vec![c.out_channels]));
                }
                v
            }
            LayerSpec::ConvTranspose2d(c) => {
                let mut v = vec![(
                    "weight",
                    vec![c.in_channels, c.out_channels, c.kernel, c.kernel],
                )];
                if c.bias.is_some() {
                    v.push(("bias", vec![c.out_channels]));
                }
                v
            }
            LayerSpec::BatchNorm(b) => ["gamma", "beta", "mean", "var"]
                .into_iter()
                .map(|n| (n, vec![b.channels]))
                .collect(),
            LayerSpec::Linear(l) => {
                let mut v = vec![("weight", vec![l.out_features, l.in_features])];
                if l.bias.is_some() {
                    v.push(("bias", vec![l.out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param(&self, slot: &str) -> Option<&[f32]> {
        match (self, slot) {
            (LayerSpec::Conv2d(c), "weight") => Some(&c.weight),
            (LayerSpec::Conv2d(c), "bias") => c.bias.as_deref(),
            (LayerSpec::ConvTranspose2d(c), "weight") => Some(&c.weight),
            (LayerSpec::ConvTranspose2d(c), "bias") => c.bias.as_deref(),
            (LayerSpec::Linear(l), "weight") => Some(&l.weight),
            (LayerSpec::Linear(l), "bias") => l.bias.as_deref(),
            (LayerSpec::BatchNorm(b), "gamma") => Some(&b.gamma),
            (LayerSpec::BatchNorm(b), "beta") => Some(&b.beta),
            (LayerSpec::BatchNorm(b), "mean") => Some(&b.mean),
            (LayerSpec::BatchNorm(b), "var") => Some(&b.var),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, slot: &str) -> Option<&mut Vec<f32>> {
        match (self, slot) {
            (LayerSpec::Conv2d(c), "weight") => Some(&mut c.weight),
            (LayerSpec::Conv2d(c), "bias") => c.bias.as_mut(),
            (LayerSpec::ConvTranspose2d(c), "weight") => Some(&mut c.weight),
            (LayerSpec::ConvTranspose2d(c), "bias") => c.bias.as_mut(),
            (LayerSpec::Linear(l), "weight") => Some(&mut l.weight),
            (LayerSpec::Linear(l), "bias") => l.bias.as_mut(),
            (LayerSpec::BatchNorm(b), "gamma") => Some(&mut b.gamma),
            (LayerSpec::BatchNorm(b), "beta") => Some(&mut b.beta),
            (LayerSpec::BatchNorm(b), "mean") => Some(&mut b.mean),
            (LayerSpec::BatchNorm(b), "var") => Some(&mut b.var),
            _ => None,
        }
    }

    /// Number of weights feeding one output unit, for fan-in scaled init.
    pub fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv2d(c) => c.fan_in(),
            LayerSpec::ConvTranspose2d(c) => c.fan_in(),
            LayerSpec::Linear(l) => l.in_features,
            _ => 0,
        }
    }
}

/// Forward pass of a stateless layer. `Lif` and `ResidualAdd` are handled
/// by the graph, which owns neuron state and saved activations.
pub fn layer_forward(
    layer: &LayerSpec,
    x: &Activation,
    exec: Execution,
) -> Result<Activation, SnnError> {
    let out_shape = layer.output_shape(x.shape())?;
    let dense = match layer {
        LayerSpec::Conv2d(c) => {
            let input = x.to_dense();
            let data = conv2d(c, input.shape(), input.data(), &out_shape, exec);
            DenseTensor::from_parts(out_shape, data)
        }
        LayerSpec::ConvTranspose2d(c) => {
            let input = x.to_dense();
            let data = conv_transpose2d(c, input.shape(), input.data(), &out_shape, exec);
            DenseTensor::from_parts(out_shape, data)
        }
        LayerSpec::BatchNorm(b) => {
            let mut d = x.to_dense();
            batch_norm(b, &mut d);
            d
        }
        LayerSpec::Linear(l) => {
            let input = x.to_dense();
            DenseTensor::from_parts(out_shape, linear(l, input.data()))
        }
        LayerSpec::AvgPool { kernel, stride } => {
            let input = x.to_dense();
            let data = avg_pool(*kernel, *stride, input.shape(), input.data(), &out_shape);
            DenseTensor::from_parts(out_shape, data)
        }
        LayerSpec::Flatten => {
            return Ok(match x.clone() {
                Activation::Dense(d) => Activation::Dense(d.reshape(out_shape)?),
                Activation::Spike(s) => Activation::Spike(s.reshape(out_shape)?),
            })
        }
        LayerSpec::Lif(_) => return Err(SnnError::MissingState(usize::MAX)),
        LayerSpec::ResidualAdd { from } => {
            return Err(SnnError::Topology(format!(
                "residual add from layer {from} needs graph context"
            )))
        }
    };
    if !dense.is_finite() {
        return Err(SnnError::NonFinite(0));
    }
    Ok(Activation::Dense(dense))
}

/// Valid output range `lo..hi` along one axis for kernel offset `k`:
/// those `o` with `0 <= o*s + k - p < n`.
fn valid_range(n_in: usize, n_out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n_in + p > k {
        ((n_in - 1 + p - k) / s + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Inputs sparser than this take the scatter path in [`conv2d`].
const SCATTER_DENSITY: f32 = 0.35;

pub(crate) fn conv2d(
    c: &Conv2d,
    in_shape: &Shape,
    input: &[f32],
    out_shape: &Shape,
    exec: Execution,
) -> Vec<f32> {
    let nnz = input.iter().filter(|&&v| v != 0.0).count();
    if (nnz as f32) < SCATTER_DENSITY * input.len() as f32 {
        conv2d_scatter(c, in_shape, input, out_shape, exec)
    } else {
        conv2d_dense(c, in_shape, input, out_shape, exec)
    }
}

fn conv2d_dense(
    c: &Conv2d,
    in_shape: &Shape,
    input: &[f32],
    out_shape: &Shape,
    exec: Execution,
) -> Vec<f32> {
    let (ci, h, w) = in_shape.chw().unwrap();
    let (co, ho, wo) = out_shape.chw().unwrap();
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let plane = ho * wo;
    let mut out = vec![0f32; co * plane];
    par::for_each_chunk(exec, &mut out, plane, |oc, dst| {
        let b = c.bias.as_ref().map_or(0.0, |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for ic in 0..ci {
            let src = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, ho, ky, s, p);
                for kx in 0..k {
                    let wv = c.weight[((oc * ci + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(w, wo, kx, s, p);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let row = &src[iy * w..(iy + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let n = ox1 - ox0;
                            for (d, &xv) in drow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *d += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output offsets `(o, kernel index)` reached from input coordinate `i`.
fn taps(i: usize, n_out: usize, k: usize, s: usize, p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).filter_map(move |kk| {
        let d = (i + p).checked_sub(kk)?;
        (d % s == 0 && d / s < n_out).then_some((d / s, kk))
    })
}

/// Event-driven variant: each nonzero input is pushed to the outputs it
/// reaches. Per output the terms arrive in the same (ic, ky, kx) order as in
/// the dense loop, so both paths give identical sums.
fn conv2d_scatter(
    c: &Conv2d,
    in_shape: &Shape,
    input: &[f32],
    out_shape: &Shape,
    exec: Execution,
) -> Vec<f32> {
    let (ci, h, w) = in_shape.chw().unwrap();
    let (co, ho, wo) = out_shape.chw().unwrap();
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let rows: Vec<Vec<(usize, usize)>> = (0..h).map(|iy| taps(iy, ho, k, s, p).collect()).collect();
    let cols: Vec<Vec<(usize, usize)>> = (0..w).map(|ix| taps(ix, wo, k, s, p).collect()).collect();
    let events: Vec<(usize, usize, usize, f32)> = input
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i / (h * w), i / w % h, i % w, v))
        .collect();
    let plane = ho * wo;
    let mut out = vec![0f32; co * plane];
    par::for_each_chunk(exec, &mut out, plane, |oc, dst| {
        let b = c.bias.as_ref().map_or(0.0, |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for &(ic, iy, ix, xv) in &events {
            let wk = &c.weight[(oc * ci + ic) * k * k..(oc * ci + ic + 1) * k * k];
            for &(oy, ky) in &rows[iy] {
                for &(ox, kx) in &cols[ix] {
                    dst[oy * wo + ox] += wk[ky * k + kx] * xv;
                }
            }
        }
    });
    out
}

pub(crate) fn conv_transpose2d(
    c: &ConvTranspose2d,
    in_shape: &Shape,
    input: &[f32],
    out_shape: &Shape,
    exec: Execution,
) -> Vec<f32> {
    let (ci, h, w) = in_shape.chw().unwrap();
    let (co, ho, wo) = out_shape.chw().unwrap();
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let plane = ho * wo;
    let mut out = vec![0f32; co * plane];
    par::for_each_chunk(exec, &mut out, plane, |oc, dst| {
        let b = c.bias.as_ref().map_or(0.0, |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for ic in 0..ci {
            let src = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = c.weight[((ic * co + oc) * k + ky) * k + kx];
                    for iy in 0..h {
                        let oy = iy * s + ky;
                        if oy < p || oy - p >= ho {
                            continue;
                        }
                        let oy = oy - p;
                        for ix in 0..w {
                            let ox = ix * s + kx;
                            if ox < p || ox - p >= wo {
                                continue;
                            }
                            dst[oy * wo + ox - p] += wv * src[iy * w + ix];
                        }
                    }
                }
            }
        }
    });
    out
}

fn batch_norm(b: &BatchNorm, x: &mut DenseTensor) {
    let (c, h, w) = x.shape().chw().unwrap();
    let plane = h * w;
    let data = x.data_mut();
    for ch in 0..c {
        let scale = b.gamma[ch] / b.var[ch].sqrt();
        let (mean, beta) = (b.mean[ch], b.beta[ch]);
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = (*v - mean) * scale + beta;
        }
    }
}

fn linear(l: &Linear, x: &[f32]) -> Vec<f32> {
    (0..l.out_features)
        .map(|o| {
            let row = &l.weight[o * l.in_features..(o + 1) * l.in_features];
            let mut acc = l.bias.as_ref().map_or(0.0, |b| b[o]);
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            acc
        })
        .collect()
}

fn avg_pool(k: usize, s: usize, in_shape: &Shape, x: &[f32], out_shape: &Shape) -> Vec<f32> {
    let (c, h, w) = in_shape.chw().unwrap();
    let (_, ho, wo) = out_shape.chw().unwrap();
    let norm = (k * k) as f32;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += src[(oy * s + ky) * w + ox * s + kx];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::shape;

    /// Six-loop gather convolution used as the reference.
    fn naive_conv(c: &Conv2d, x: &[f32], (ci, h, w): (usize, usize, usize)) -> Vec<f32> {
        let (k, s, p) = (c.kernel, c.stride, c.padding);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0f32; c.out_channels * ho * wo];
        for oc in 0..c.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias.as_ref().map_or(0.0, |b| b[oc]);
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += c.weight[((oc * ci + ic) * k + ky) * k + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    /// Gather form of the transposed convolution.
    fn naive_convt(c: &ConvTranspose2d, x: &[f32], (ci, h, w): (usize, usize, usize)) -> Vec<f32> {
        let (k, s, p) = (c.kernel, c.stride, c.padding);
        let ho = (h - 1) * s + k - 2 * p;
        let wo = (w - 1) * s + k - 2 * p;
        let co = c.out_channels;
        let mut out = vec![0f32; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias.as_ref().map_or(0.0, |b| b[oc]);
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ny = oy + p;
                                let nx = ox + p;
                                if ny < ky || nx < kx || (ny - ky) % s != 0 || (nx - kx) % s != 0 {
                                    continue;
                                }
                                let (iy, ix) = ((ny - ky) / s, (nx - kx) / s);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += c.weight[((ic * co + oc) * k + ky) * k + kx]
                                    * x[(ic * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn random(rng: &mut SeededRng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.next_f32() * 2.0 - 1.0).collect()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut c = Conv2d::new(2, 2, 1, 1, 0, true);
        c.weight = vec![1.0, 0.0, 0.0, 1.0];
        let x = DenseTensor::new(shape(&[2, 3, 3]), (0..18).map(|i| i as f32).collect()).unwrap();
        let y = layer_forward(&LayerSpec::Conv2d(c), &Activation::Dense(x.clone()), Execution::Sequential)
            .unwrap();
        assert_eq!(y, Activation::Dense(x));
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut c = Conv2d::new(1, 1, 3, 1, 1, false);
        c.weight = vec![1.0; 9];
        let x: Vec<f32> = (0..25).map(|i| i as f32).collect();
        let y = layer_forward(
            &LayerSpec::Conv2d(c),
            &Activation::Dense(DenseTensor::new(shape(&[1, 5, 5]), x.clone()).unwrap()),
            Execution::Sequential,
        )
        .unwrap()
        .into_dense();
        let mut expected = 0.0;
        for y in 1..4 {
            for xx in 1..4 {
                expected += x[y * 5 + xx];
            }
        }
        assert_eq!(y.data()[12], expected);
        // corner sees a 2x2 window because of zero padding
        assert_eq!(y.data()[0], x[0] + x[1] + x[5] + x[6]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = SeededRng::new(11);
        for &(ci, co, h, w, k, s, p) in &[
            (3, 4, 7, 6, 3, 1, 1),
            (2, 3, 8, 8, 3, 2, 1),
            (4, 2, 8, 8, 4, 4, 0),
            (1, 5, 5, 9, 1, 1, 0),
            (3, 2, 9, 7, 5, 2, 2),
        ] {
            let mut c = Conv2d::new(ci, co, k, s, p, true);
            c.weight = random(&mut rng, c.weight.len());
            c.bias = Some(random(&mut rng, co));
            let x = random(&mut rng, ci * h * w);
            let expected = naive_conv(&c, &x, (ci, h, w));
            let in_shape = shape(&[ci, h, w]);
            let out_shape = LayerSpec::Conv2d(c.clone()).output_shape(&in_shape).unwrap();
            for exec in [Execution::Sequential, Execution::Parallel] {
                let got = conv2d_dense(&c, &in_shape, &x, &out_shape, exec);
                assert_eq!(got, expected, "conv {ci}x{h}x{w} k{k} s{s} p{p}");
                let got = conv2d_scatter(&c, &in_shape, &x, &out_shape, exec);
                assert_eq!(got, expected, "scatter conv {ci}x{h}x{w} k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn conv_transpose_matches_naive_reference() {
        let mut rng = SeededRng::new(12);
        for &(ci, co, h, w, k, s, p) in &[
            (4, 8, 1, 1, 4, 4, 0),
            (2, 3, 3, 4, 3, 2, 1),
            (3, 2, 4, 4, 2, 2, 0),
            (1, 1, 5, 5, 3, 1, 1),
        ] {
            let mut c = ConvTranspose2d::new(ci, co, k, s, p, true);
            c.weight = random(&mut rng, c.weight.len());
            c.bias = Some(random(&mut rng, co));
            let x = random(&mut rng, ci * h * w);
            let expected = naive_convt(&c, &x, (ci, h, w));
            let in_shape = shape(&[ci, h, w]);
            let out_shape = LayerSpec::ConvTranspose2d(c.clone())
                .output_shape(&in_shape)
                .unwrap();
            assert_eq!(out_shape.numel(), expected.len());
            for exec in [Execution::Sequential, Execution::Parallel] {
                let got = conv_transpose2d(&c, &in_shape, &x, &out_shape, exec);
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn identity_batch_norm() {
        let x = DenseTensor::new(shape(&[2, 2, 2]), (0..8).map(|i| i as f32 - 3.5).collect()).unwrap();
        let y = layer_forward(
            &LayerSpec::BatchNorm(BatchNorm::identity(2)),
            &Activation::Dense(x.clone()),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(y, Activation::Dense(x));
    }

    #[test]
    fn batch_norm_affine() {
        let bn = BatchNorm {
            channels: 1,
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![3.0],
            var: vec![4.0],
        };
        let x = DenseTensor::new(shape(&[1, 1, 2]), vec![3.0, 5.0]).unwrap();
        let y = layer_forward(&LayerSpec::BatchNorm(bn), &Activation::Dense(x), Execution::Sequential)
            .unwrap()
            .into_dense();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn spikes_feed_arithmetic_layers_as_reals() {
        let mut c = Conv2d::new(1, 1, 1, 1, 0, false);
        c.weight = vec![3.0];
        let s = SpikeTensor::from_flags(shape(&[1, 1, 4]), &[1, 0, 1, 1]).unwrap();
        let y = layer_forward(&LayerSpec::Conv2d(c), &Activation::Spike(s), Execution::Sequential)
            .unwrap()
            .into_dense();
        assert_eq!(y.data(), &[3.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn avg_pool_and_linear() {
        let x = DenseTensor::new(shape(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = layer_forward(
            &LayerSpec::AvgPool { kernel: 2, stride: 2 },
            &Activation::Dense(x),
            Execution::Sequential,
        )
        .unwrap()
        .into_dense();
        assert_eq!(y.data(), &[3.0]);

        let mut l = Linear::new(2, 2, true);
        l.weight = vec![1.0, 2.0, 3.0, 4.0];
        l.bias = Some(vec![0.5, -0.5]);
        let out = linear(&l, &[1.0, 1.0]);
        assert_eq!(out, vec![3.5, 6.5]);
    }

    #[test]
    fn shape_errors() {
        let c = LayerSpec::Conv2d(Conv2d::new(3, 4, 3, 1, 1, false));
        assert!(c.output_shape(&shape(&[2, 8, 8])).is_err());
        assert!(LayerSpec::Linear(Linear::new(10, 2, false))
            .output_shape(&shape(&[11]))
            .is_err());
    }

    #[test]
    fn flop_counts() {
        let conv = LayerSpec::Conv2d(Conv2d::new(1, 1, 1, 1, 0, false));
        let flops = conv.flops(&shape(&[1, 4, 4]));
        // enumerate the multiply-adds: one per (output element, weight)
        let mut macs = 0u64;
        for _oy in 0..4 {
            for _ox in 0..4 {
                macs += 1;
            }
        }
        assert_eq!(flops, 2 * macs);
        assert_eq!(flops, 32);
        assert_eq!(LayerSpec::Linear(Linear::new(10, 10, false)).flops(&shape(&[10])), 200);
        assert_eq!(LayerSpec::Flatten.flops(&shape(&[2, 2, 2])), 0);
    }
}
