//! Layers with forward and exact backward passes.
//!
//! Every backward is layer-local: it takes the cached forward input (or
//! output) and the upstream gradient and returns a [`LayerGrads`]. The model
//! module chains these by hand; there is no tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Gradient of a scalar loss with respect to a layer's input and parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub input: Tensor<T>,
    /// Keyed by parameter name (`"weight"`, `"bias"`, `"lora_a"`, ...).
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }
}

/// 3D cross-correlation with zero padding. Weight layout is
/// `[d_out, d_in, k, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    stride: [usize; 3],
    padding: [usize; 3],
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    input: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Output extent along one axis, or `None` when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
            return Err(Error::shape(format!(
                "conv weight must be [d_out, d_in, k, k, k], got {s:?}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape(format!(
                    "conv bias must be [{}], got {:?}",
                    s[0],
                    b.shape()
                )));
            }
        }
        if stride.contains(&0) {
            return Err(Error::argument("conv stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn stride(&self) -> [usize; 3] {
        self.stride
    }

    pub fn padding(&self) -> [usize; 3] {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Replace the weight; the new tensor must have the same shape.
    pub fn set_weight(&mut self, weight: Tensor<T>) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::shape(format!(
                "conv weight shape {:?} does not match {:?}",
                weight.shape(),
                self.weight.shape()
            )));
        }
        self.weight = weight;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Option<Tensor<T>>) -> Result<()> {
        if let Some(b) = &bias {
            if b.shape() != [self.out_channels()] {
                return Err(Error::shape(format!("conv bias shape {:?}", b.shape())));
            }
        }
        self.bias = bias;
        Ok(())
    }

    /// Spatial output extents for the given input extents.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.kernel();
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = conv_output_extent(input[axis], k, self.stride[axis], self.padding[axis])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "input extents {input:?} too small for kernel {k} with padding {:?}",
                        self.padding
                    ))
                })?;
        }
        Ok(out)
    }

    fn geometry(&self, x_shape: &[usize]) -> Result<ConvGeometry> {
        if x_shape.len() != 5 {
            return Err(Error::shape(format!(
                "conv input must be [n, c, D, H, W], got {x_shape:?}"
            )));
        }
        if x_shape[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x_shape[1]
            )));
        }
        let input = [x_shape[2], x_shape[3], x_shape[4]];
        Ok(ConvGeometry {
            batch: x_shape[0],
            c_in: x_shape[1],
            c_out: self.out_channels(),
            k: self.kernel(),
            input,
            output: self.output_extents(input)?,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.shape())?;
        let (iv, ov, kl) = (g.in_volume(), g.out_volume(), g.patch_len());
        let mut out = vec![T::zero(); g.batch * g.c_out * ov];
        let mut col = Vec::new();
        for s in 0..g.batch {
            let xs = &x.data()[s * g.c_in * iv..(s + 1) * g.c_in * iv];
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            let os = &mut out[s * g.c_out * ov..(s + 1) * g.c_out * ov];
            if let Some(b) = &self.bias {
                for (o, row) in os.chunks_mut(ov).enumerate() {
                    row.fill(b.data()[o]);
                }
            }
            gemm_nn(g.c_out, kl, ov, self.weight.data(), patches, os);
        }
        let [d, h, w] = g.output;
        Tensor::from_vec([g.batch, g.c_out, d, h, w], out)
    }

    /// Gradients with respect to input, `"weight"` and (when present) `"bias"`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
        let g = self.geometry(x.shape())?;
        let [d, h, w] = g.output;
        if grad_out.shape() != [g.batch, g.c_out, d, h, w] {
            return Err(Error::shape(format!(
                "conv grad_out must be {:?}, got {:?}",
                [g.batch, g.c_out, d, h, w],
                grad_out.shape()
            )));
        }
        let (iv, ov, kl) = (g.in_volume(), g.out_volume(), g.patch_len());
        let mut grad_w = vec![T::zero(); g.c_out * kl];
        let mut grad_b = vec![T::zero(); g.c_out];
        let mut grad_x = vec![T::zero(); x.len()];
        let mut col = Vec::new();
        let mut grad_col = vec![T::zero(); kl * ov];
        for s in 0..g.batch {
            let xs = &x.data()[s * g.c_in * iv..(s + 1) * g.c_in * iv];
            let gs = &grad_out.data()[s * g.c_out * ov..(s + 1) * g.c_out * ov];
            let gxs = &mut grad_x[s * g.c_in * iv..(s + 1) * g.c_in * iv];
            for (o, row) in gs.chunks(ov).enumerate() {
                grad_b[o] += row.iter().copied().sum::<T>();
            }
            if g.is_pointwise() {
                gemm_nt(g.c_out, ov, kl, gs, xs, &mut grad_w);
                gemm_tn(kl, g.c_out, ov, self.weight.data(), gs, gxs);
            } else {
                im2col(xs, &g, &mut col);
                gemm_nt(g.c_out, ov, kl, gs, &col, &mut grad_w);
                grad_col.fill(T::zero());
                gemm_tn(kl, g.c_out, ov, self.weight.data(), gs, &mut grad_col);
                col2im(&grad_col, &g, gxs);
            }
        }
        let mut params = BTreeMap::new();
        params.insert(
            "weight".to_string(),
            Tensor::from_vec(self.weight.shape().to_vec(), grad_w)?,
        );
        if self.bias.is_some() {
            params.insert("bias".to_string(), Tensor::from_vec([g.c_out], grad_b)?);
        }
        Ok(LayerGrads {
            input: Tensor::from_vec(x.shape().to_vec(), grad_x)?,
            params,
        })
    }
}

/// Unfold one sample `[c, D, H, W]` into patch columns `[c·k³, D'·H'·W']`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut Vec<T>) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let ov = od * oh * ow;
    let k = g.k;
    col.clear();
    col.resize(g.patch_len() * ov, T::zero());
    for c in 0..g.c_in {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    let dst = &mut col[row * ov..(row + 1) * ov];
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.padding[0] as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.padding[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let src = (c * id + iz as usize) * ih * iw + iy as usize * iw;
                            let out_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + e) as isize - g.padding[2] as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dst[out_row + xo] = x[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back into `[c, D, H, W]`.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let ov = od * oh * ow;
    let k = g.k;
    for c in 0..g.c_in {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    let src_row = &col[row * ov..(row + 1) * ov];
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.padding[0] as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.padding[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst = (c * id + iz as usize) * ih * iw + iy as usize * iw;
                            let out_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + e) as isize - g.padding[2] as isize;
                                if ix >= 0 && ix < iw as isize {
                                    x[dst + ix as usize] += src_row[out_row + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Channelwise affine normalization with fixed statistics:
/// `scale · (x − mean) / sqrt(var + eps) + shift`. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> FrozenNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(
        scale: Tensor<T>,
        shift: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: f64,
    ) -> Result<Self> {
        let c = scale.len();
        for (name, t) in [
            ("scale", &scale),
            ("shift", &shift),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(format!(
                    "norm {name} must be [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        if !(eps > 0.0) || running_var.data().iter().any(|&v| v.to_f64() + eps <= 0.0) {
            return Err(Error::argument("norm variance + eps must be positive"));
        }
        Ok(Self {
            scale,
            shift,
            running_mean,
            running_var,
            eps,
        })
    }

    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(
            Tensor::ones([channels])?,
            Tensor::zeros([channels])?,
            Tensor::zeros([channels])?,
            Tensor::ones([channels])?,
            Self::DEFAULT_EPS,
        )
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Per-channel `(multiplier, offset)` so that `y = multiplier·x + offset`.
    fn affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64(self.eps);
        (0..self.channels())
            .map(|c| {
                let m = self.scale.data()[c] / (self.running_var.data()[c] + eps).sqrt();
                (m, self.shift.data()[c] - self.running_mean.data()[c] * m)
            })
            .unzip()
    }

    fn check(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(format!(
                "norm over {} channels cannot take input {shape:?}",
                self.channels()
            )));
        }
        Ok(shape[2..].iter().product())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let vol = self.check(x.shape())?;
        let (mul, add) = self.affine();
        let c = self.channels();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(vol).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * mul[ch] + add[ch];
            }
        }
        Ok(out)
    }

    /// Input gradient only; the statistics are not parameters.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let vol = self.check(grad_out.shape())?;
        let (mul, _) = self.affine();
        let c = self.channels();
        let mut out = grad_out.clone();
        for (i, chunk) in out.data_mut().chunks_mut(vol).enumerate() {
            let m = mul[i % c];
            for v in chunk {
                *v = *v * m;
            }
        }
        Ok(out)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output (positive exactly where the input was).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("relu backward: shape mismatch"));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape().to_vec(), data)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x · Φ(x)` with Φ from `erf`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.to_f64();
        T::from_f64(v * std_normal_cdf(v))
    })
}

/// `dGELU/dx = Φ(x) + x·φ(x)`, evaluated at the forward input.
pub fn gelu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("gelu backward: shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let x = x.to_f64();
            T::from_f64(g.to_f64() * (std_normal_cdf(x) + x * std_normal_pdf(x)))
        })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data)
}

/// Inverted dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    rate: f64,
    pub training: bool,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::argument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self {
            rate,
            training: true,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Returns the output and, in training mode, the scaled keep-mask
    /// (`0` or `1/(1−rate)` per element). Evaluation mode returns `x` as is.
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        rng: &mut RandomSource,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        if !self.training {
            return (x.clone(), None);
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask = x.map(|_| {
            if rng.bernoulli(self.rate) {
                T::zero()
            } else {
                keep
            }
        });
        let out = x.mul(&mask).expect("mask shaped like input");
        (out, Some(mask))
    }

    pub fn backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match mask {
            Some(m) => grad_out.mul(m),
            None => Ok(grad_out.clone()),
        }
    }
}

/// 3D max pooling over `[n, c, D, H, W]`; padded positions never win.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool3d {
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = conv_output_extent(input[axis], self.kernel, self.stride, self.padding)
                .ok_or_else(|| Error::shape(format!("max pool cannot take extents {input:?}")))?;
        }
        Ok(out)
    }

    /// Returns the pooled tensor and the flat input index of each maximum.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::shape(format!("max pool input must be rank 5, got {s:?}")));
        }
        let (planes, input) = (s[0] * s[1], [s[2], s[3], s[4]]);
        let [od, oh, ow] = self.output_extents(input)?;
        let [id, ih, iw] = input;
        let iv = id * ih * iw;
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let span = |o: usize, extent: usize| {
            let start = (o * self.stride) as isize - self.padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + self.kernel as isize).min(extent as isize)) as usize;
            lo..hi
        };
        for p in 0..planes {
            let base = p * iv;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for iz in span(z, id) {
                            for iy in span(y, ih) {
                                for ix in span(xo, iw) {
                                    let idx = base + (iz * ih + iy) * iw + ix;
                                    let v = x.data()[idx];
                                    if best_idx == usize::MAX || v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        Ok((Tensor::from_vec([s[0], s[1], od, oh, ow], out)?, argmax))
    }

    pub fn backward<T: Scalar>(
        grad_out: &Tensor<T>,
        argmax: &[usize],
        input_shape: &[usize],
    ) -> Result<Tensor<T>> {
        if grad_out.len() != argmax.len() {
            return Err(Error::shape("max pool backward: gradient/argmax length mismatch"));
        }
        let mut grad = Tensor::zeros(input_shape.to_vec())?;
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            grad.data_mut()[idx] += g;
        }
        Ok(grad)
    }
}

/// Mean over all spatial positions: `[n, c, ...] → [n, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::shape(format!("global pool needs [n, c, spatial..], got {s:?}")));
    }
    let vol: usize = s[2..].iter().product();
    let inv = T::from_f64(1.0 / vol as f64);
    let data = x
        .data()
        .chunks(vol)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([s[0], s[1]], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if input_shape.len() < 3 || grad_out.shape() != &input_shape[..2] {
        return Err(Error::shape(format!(
            "global pool backward: grad {:?} vs input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let vol: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / vol as f64);
    let mut data = Vec::with_capacity(grad_out.len() * vol);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(vol));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(format!(
                "linear weight {:?} / bias {:?} inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// He-style initialization: `W ~ N(0, 2/in)`, zero bias.
    pub fn he_init(inputs: usize, outputs: usize, rng: &mut RandomSource) -> Result<Self> {
        let std = (2.0 / inputs as f64).sqrt();
        Self::new(
            Tensor::randn([outputs, inputs], rng, 0.0, std)?,
            Tensor::zeros([outputs])?,
        )
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects [n, {}], got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(x)?;
        let (i, o) = (self.in_features(), self.out_features());
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm_nt(n, i, o, x.data(), self.weight.data(), &mut out);
        Tensor::from_vec([n, o], out)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
        let n = self.check(x)?;
        let (i, o) = (self.in_features(), self.out_features());
        if grad_out.shape() != [n, o] {
            return Err(Error::shape(format!(
                "linear grad_out must be [{n}, {o}], got {:?}",
                grad_out.shape()
            )));
        }
        let mut gw = vec![T::zero(); o * i];
        gemm_tn(o, n, i, grad_out.data(), x.data(), &mut gw);
        let mut gb = vec![T::zero(); o];
        for row in grad_out.data().chunks(o) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut gx = vec![T::zero(); n * i];
        gemm_nn(n, o, i, grad_out.data(), self.weight.data(), &mut gx);
        let mut params = BTreeMap::new();
        params.insert("weight".to_string(), Tensor::from_vec([o, i], gw)?);
        params.insert("bias".to_string(), Tensor::from_vec([o], gb)?);
        Ok(LayerGrads {
            input: Tensor::from_vec([n, i], gx)?,
            params,
        })
    }
}
