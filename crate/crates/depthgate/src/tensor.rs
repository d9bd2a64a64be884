//! Dense row-major tensors over a run-selectable scalar type, plus the raw
//! matmul kernels everything else is built on.
//!
//! Training runs default to f32; tests and gradient checks run the same code
//! at f64. All randomness is drawn in f64 and converted, so both precisions
//! consume identical RNG streams.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::iter::Sum;

/// Scalar type a whole run is instantiated at.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Dtype tag written into checkpoint headers.
    const DTYPE: &'static str;

    #[inline]
    fn from64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    #[inline]
    fn f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

// ── tensor ──────────────────────────────────────────────────────────────────

/// Row-major dense tensor. Rank 1 and 2 cover everything in this crate.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64s(shape: Vec<usize>, vals: &[f64]) -> Self {
        Tensor::new(shape, vals.iter().map(|&v| S::from64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a matrix; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{} tensor", r),
        }
    }

    /// Columns of a matrix; a rank-1 tensor is one row of its full length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{} tensor", r),
        }
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

// ── matmul kernels ──────────────────────────────────────────────────────────
//
// Three layouts cover forward and both backward products without ever
// materialising a transpose. All inner loops run over contiguous slices.

const LANES: usize = 16;

/// Dot product with a widened accumulator bank so FMA chains pipeline.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = xa[i].mul_add(xb[i], acc[i]);
        }
    }
    let mut s = S::zero();
    for &v in &acc {
        s = s + v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = x.mul_add(y, s);
    }
    s
}

/// y += a * x
#[inline]
pub fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

/// out[m,n] = a[m,k] @ b[k,n]
pub fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(S::zero());
        for (l, &al) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(al, &b[l * n..(l + 1) * n], row);
        }
    }
}

/// out[m,n] = a[m,k] @ b[n,k]^T   (the natural layout for `x @ W^T` linears)
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (j, o) in or.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] = a[m,k]^T @ b[m,n]   (weight-gradient layout)
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(S::zero());
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &ap) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(ap, br, &mut out[p * n..(p + 1) * n]);
        }
    }
}

// ── seeded randomness ───────────────────────────────────────────────────────

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent deterministic stream keyed by (seed, purpose tag). Keeping
/// subsystems on separate streams means no draw order coupling between them.
pub fn substream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(tag.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// N(0, std^2) fill, sampled in f64 regardless of the run scalar.
pub fn gaussian<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from64(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}

/// Uniform [lo, hi) fill, sampled in f64.
pub fn uniform<S: Scalar>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from64(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data)
}
