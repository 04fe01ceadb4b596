//! Dense row-major tensors over `f32` / `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Element precision tag, also the on-disk dtype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable inside a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("extents must be >= 1, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// Zeros shaped like `other`.
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    /// Tensor of i.i.d. `N(mean, std^2)` draws.
    pub fn randn(
        shape: impl Into<Vec<usize>>,
        rng: &mut RandomSource,
        mean: f64,
        std: f64,
    ) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.gaussian_fill(rng, mean, std)?;
        Ok(t)
    }

    /// Overwrite every element with an i.i.d. `N(mean, std^2)` draw, in
    /// buffer order, using [`RandomSource::normal`].
    pub fn gaussian_fill(&mut self, rng: &mut RandomSource, mean: f64, std: f64) -> Result<()> {
        if !(std >= 0.0) {
            return Err(Error::argument(format!("standard deviation must be >= 0, got {std}")));
        }
        for v in &mut self.data {
            *v = T::from_f64(rng.normal(mean, std));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(self, new_shape: impl Into<Vec<usize>>) -> Result<Self> {
        let new_shape = new_shape.into();
        let n = check_shape(&new_shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?} ({n} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Self {
            shape: new_shape,
            data: self.data,
        })
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let d = self.zip_with(other, "max_abs_diff", |a, b| (a - b).abs())?;
        Ok(d.data.iter().fold(0.0, |m, &v| m.max(v.to_f64())))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Element-type conversion, e.g. `f32` training weights to an `f64` copy.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.5, -1.0, 2.0, 7.0]);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = RandomSource::new(17);
        let a = Tensor::<f64>::randn([5, 7], &mut rng, 0.0, 1.0).unwrap();
        let b = Tensor::<f64>::randn([7, 3], &mut rng, 0.0, 1.0).unwrap();
        let c = a.matmul(&b).unwrap();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let a = Tensor::<f32>::zeros([2, 3]).unwrap();
        let b = Tensor::<f32>::zeros([4, 2]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_gemm_variants_agree() {
        let mut rng = RandomSource::new(3);
        let a = Tensor::<f64>::randn([4, 6], &mut rng, 0.0, 1.0).unwrap();
        let b = Tensor::<f64>::randn([5, 6], &mut rng, 0.0, 1.0).unwrap();
        let mut c = vec![0.0; 20];
        gemm_nt(4, 6, 5, a.data(), b.data(), &mut c);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose().unwrap();
        let mut c2 = vec![0.0; 24];
        let d = Tensor::<f64>::randn([4, 4], &mut rng, 0.0, 1.0).unwrap();
        gemm_tn(6, 4, 4, a.data(), d.data(), &mut c2);
        let expect = at.matmul(&d).unwrap();
        for (x, y) in c2.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let mut rng = RandomSource::new(0);
        let x = Tensor::<f32>::randn([10], &mut rng, 2.5, 0.0).unwrap();
        assert!(x.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gaussian_negative_std_rejected() {
        let mut rng = RandomSource::new(0);
        let mut x = Tensor::<f32>::zeros([3]).unwrap();
        assert!(matches!(x.gaussian_fill(&mut rng, 0.0, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn gaussian_deterministic_per_seed() {
        let a = Tensor::<f32>::randn([64], &mut RandomSource::new(8), 0.0, 1.0).unwrap();
        let b = Tensor::<f32>::randn([64], &mut RandomSource::new(8), 0.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_moments_at_1e5() {
        let x = Tensor::<f64>::randn([100_000], &mut RandomSource::new(1), 0.0, 1.0).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn reshape_round_trip_and_errors() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = x.clone().reshape([3, 2]).unwrap().reshape([2, 3]).unwrap();
        assert_eq!(x, y);
        assert!(matches!(x.reshape([4, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_flattening_follows_row_major_law() {
        let (o, i, k) = (3, 2, 3);
        let n = o * i * k * k * k;
        let w = Tensor::<f64>::from_vec([o, i, k, k, k], (0..n).map(|v| v as f64).collect()).unwrap();
        let flat = w.clone().reshape([o, i * k * k * k]).unwrap();
        for oo in 0..o {
            for ii in 0..i {
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            let five = (((oo * i + ii) * k + a) * k + b) * k + c;
                            let col = ii * k * k * k + a * k * k + b * k + c;
                            assert_eq!(w.data()[five], flat.data()[oo * i * k * k * k + col]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::zeros([2, 0]).is_err());
        assert!(Tensor::<f32>::from_vec([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = t(&[3], &[1., 2., 3.]);
        let b = t(&[3], &[4., 5., 6.]);
        assert_eq!(a.add(&b).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(b.sub(&a).unwrap().data(), &[3., 3., 3.]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4., 10., 18.]);
        assert_eq!(a.scale(2.0).data(), &[2., 4., 6.]);
        assert_eq!(a.sum(), 6.0);
        assert_eq!(a.mean(), 2.0);
        assert!(a.add(&t(&[1, 3], &[0., 0., 0.])).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = RandomSource::new(seed);
            let a = Tensor::<f64>::randn([m, k], &mut rng, 0.0, 1.0).unwrap();
            let b = Tensor::<f64>::randn([k, n], &mut rng, 0.0, 1.0).unwrap();
            let c = Tensor::<f64>::randn([n, p], &mut rng, 0.0, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs().max(y.abs())));
            }
        }

        #[test]
        fn reshape_inverse_is_identity(dims in proptest::collection::vec(1usize..5, 1..5)) {
            let n: usize = dims.iter().product();
            let x = Tensor::<f32>::from_vec(dims.clone(), (0..n).map(|v| v as f32).collect()).unwrap();
            let y = x.clone().reshape([n]).unwrap().reshape(dims).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
