//! Low-rank adapters for 3D convolution kernels.
//!
//! A convolution weight `W: [d_out, d_in, k, k, k]` is viewed row-major as a
//! `d_out × d_in·k³` matrix. The adapter learns `B: [d_out, r]` and
//! `A: [r, d_in·k³]` and the adapted kernel is
//!
//! ```text
//! W' = W + scale · reshape(B·A, [d_out, d_in, k, k, k])
//! ```
//!
//! `B` starts at zero and `A ~ N(0, 0.01²)`, so a fresh adapter leaves the
//! frozen convolution's output untouched. Only `A` and `B` are trainable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Conv3d, LayerGrads};
use crate::rng::RandomSource;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

pub const DEFAULT_RANK: usize = 4;
pub const A_INIT_STD: f64 = 0.01;

/// Trainable parameter count of one adapter: `r · (d_out + d_in·k³)`.
pub fn lora_param_count(d_out: usize, d_in: usize, k: usize, r: usize) -> usize {
    r * (d_out + d_in * k * k * k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[r, d_in·k³]`
    pub a: Tensor<T>,
    /// `[d_out, r]`
    pub b: Tensor<T>,
    pub scale: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Zero `B`, Gaussian `A` with std [`A_INIT_STD`], unit scale.
    pub fn init(d_out: usize, d_in: usize, k: usize, r: usize, rng: &mut RandomSource) -> Result<Self> {
        if d_out == 0 || d_in == 0 || k == 0 || r == 0 {
            return Err(Error::argument("adapter dimensions and rank must be positive"));
        }
        let cols = d_in * k * k * k;
        if r > d_out.min(cols) {
            return Err(Error::argument(format!(
                "rank {r} exceeds min(d_out = {d_out}, d_in·k³ = {cols})"
            )));
        }
        Ok(Self {
            a: Tensor::randn([r, cols], rng, 0.0, A_INIT_STD)?,
            b: Tensor::zeros([d_out, r])?,
            scale: 1.0,
        })
    }

    pub fn from_factors(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::shape(format!(
                "adapter factors A {:?} and B {:?} do not share a rank",
                a.shape(),
                b.shape()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::argument(format!("adapter scale must be positive, got {scale}")));
        }
        Ok(Self { a, b, scale })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::argument(format!("adapter scale must be positive, got {scale}")));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// `d_in·k³`
    pub fn d_cols(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale · B·A` as a `[d_out, d_in·k³]` matrix.
    pub fn delta_matrix(&self) -> Tensor<T> {
        let (o, r, c) = (self.d_out(), self.rank(), self.d_cols());
        let mut out = vec![T::zero(); o * c];
        gemm_nn(o, r, c, self.b.data(), self.a.data(), &mut out);
        let s = T::from_f64(self.scale);
        if self.scale != 1.0 {
            for v in &mut out {
                *v = *v * s;
            }
        }
        Tensor::from_vec([o, c], out).expect("adapter factor shapes are consistent")
    }

    /// `ΔW` reshaped to the given kernel shape.
    pub fn delta_weight(&self, kernel_shape: &[usize]) -> Result<Tensor<T>> {
        self.delta_matrix().reshape(kernel_shape.to_vec())
    }

    /// Check that the adapter fits a kernel `[d_out, d_in, k, k, k]`.
    pub fn check_fits(&self, kernel_shape: &[usize]) -> Result<()> {
        let cols: usize = kernel_shape[1..].iter().product();
        if self.d_out() != kernel_shape[0] || self.d_cols() != cols {
            return Err(Error::shape(format!(
                "adapter B {:?} / A {:?} does not fit kernel {kernel_shape:?}",
                self.b.shape(),
                self.a.shape()
            )));
        }
        Ok(())
    }
}

/// A frozen convolution with an optional low-rank update in parallel.
/// Without an adapter it behaves exactly like the frozen convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedConv3d<T> {
    pub frozen: Conv3d<T>,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Scalar> AdaptedConv3d<T> {
    pub fn new(frozen: Conv3d<T>, adapter: Option<LoraAdapter<T>>) -> Result<Self> {
        if let Some(ad) = &adapter {
            ad.check_fits(frozen.weight().shape())?;
        }
        Ok(Self { frozen, adapter })
    }

    /// Attach a freshly initialized adapter of rank `r`.
    pub fn with_new_adapter(frozen: Conv3d<T>, r: usize, rng: &mut RandomSource) -> Result<Self> {
        let adapter = LoraAdapter::init(frozen.out_channels(), frozen.in_channels(), frozen.kernel(), r, rng)?;
        Self::new(frozen, Some(adapter))
    }

    /// `W + ΔW`, or `W` itself when no adapter is attached.
    pub fn merged_weight(&self) -> Tensor<T> {
        let w = self.frozen.weight();
        match &self.adapter {
            None => w.clone(),
            Some(ad) => {
                let delta = ad.delta_matrix();
                let data = w.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
                Tensor::from_vec(w.shape().to_vec(), data).expect("same element count")
            }
        }
    }

    /// Plain convolution with weight `W + ΔW`; the adapter is discarded.
    pub fn merge(&self) -> Conv3d<T> {
        Conv3d::new(
            self.merged_weight(),
            self.frozen.bias().cloned(),
            self.frozen.stride(),
            self.frozen.padding(),
        )
        .expect("merged weight keeps the frozen shape")
    }

    /// Forward with the adapter folded into the kernel on the fly.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.adapter {
            None => self.frozen.forward(x),
            Some(_) => self.merge().forward(x),
        }
    }

    /// Forward as the sum of the frozen path and a separate `ΔW` path.
    pub fn forward_parallel(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let base = self.frozen.forward(x)?;
        let Some(ad) = &self.adapter else {
            return Ok(base);
        };
        let delta = Conv3d::new(
            ad.delta_weight(self.frozen.weight().shape())?,
            None,
            self.frozen.stride(),
            self.frozen.padding(),
        )?;
        base.add(&delta.forward(x)?)
    }

    /// Input gradient through both paths plus `"lora_a"` / `"lora_b"`
    /// gradients. The frozen weight and bias receive none.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
        let merged = self.merge();
        let mut full = merged.backward(x, grad_out)?;
        let mut params = BTreeMap::new();
        if let Some(ad) = &self.adapter {
            let grad_w = full.params.remove("weight").expect("conv backward yields weight grad");
            let (a_grad, b_grad) = factor_grads(ad, grad_w.data());
            params.insert("lora_a".to_string(), a_grad);
            params.insert("lora_b".to_string(), b_grad);
        }
        Ok(LayerGrads {
            input: full.input,
            params,
        })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapter.as_ref().map_or(0, LoraAdapter::param_count)
    }
}

/// `∂L/∂A = scale·Bᵀ·G`, `∂L/∂B = scale·G·Aᵀ` for `G = ∂L/∂ΔW` flattened.
fn factor_grads<T: Scalar>(ad: &LoraAdapter<T>, g: &[T]) -> (Tensor<T>, Tensor<T>) {
    let (o, r, c) = (ad.d_out(), ad.rank(), ad.d_cols());
    let s = T::from_f64(ad.scale);
    let mut ga = vec![T::zero(); r * c];
    gemm_tn(r, o, c, ad.b.data(), g, &mut ga);
    let mut gb = vec![T::zero(); o * r];
    gemm_nt(o, c, r, g, ad.a.data(), &mut gb);
    if ad.scale != 1.0 {
        ga.iter_mut().chain(gb.iter_mut()).for_each(|v| *v = *v * s);
    }
    (
        Tensor::from_vec([r, c], ga).expect("A grad shape"),
        Tensor::from_vec([o, r], gb).expect("B grad shape"),
    )
}
