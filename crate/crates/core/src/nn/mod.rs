//! Minimal CPU neural-network substrate with hand-written backward passes.
//!
//! Everything operates on a single sample in channel-major (`C x H x W`)
//! layout; batching happens one level up so that per-sample gradients can be
//! computed independently and summed in a fixed order. All layers are generic
//! over [`Scalar`] so the same code runs in `f32` for training and `f64` for
//! finite-difference gradient checks.

mod layers;
mod optim;

pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, sinusoidal_embedding, silu,
    silu_backward, split_channels, upsample2x, upsample2x_backward, Conv2d, ConvCache, GroupNorm,
    GroupNormCache, Linear,
};
pub use optim::Adam;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;

/// Floating-point element type with a matching GEMM kernel.
pub trait Scalar: Float + Default + Debug + AddAssign + Sum + Send + Sync + 'static {
    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Operand orientation for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c (m x n) = op(a) @ op(b) + (accumulate ? c : 0)`, all row-major.
///
/// `a` is stored as `m x k` for [`Op::N`] or `k x m` for [`Op::T`]; likewise
/// `b` is `k x n` or `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    op_a: Op,
    op_b: Op,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths checked above match the strides chosen for each
    // orientation; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A single-sample feature map in `C x H x W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Feat<F> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map size");
        Self { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(c, h, w, vec![F::zero(); c * h * w])
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param size");
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-bound, bound) with `bound = gain / sqrt(fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
    ) -> ParamId {
        let bound = gain / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::from_f64(value); n])
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e
                        .data
                        .iter()
                        .map(|v| G::from_f64(v.to_f64().expect("finite")))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads(self.entries.iter().map(|e| vec![F::zero(); e.data.len()]).collect())
    }
}

/// Gradient buffers with the same layout as a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F>(pub Vec<Vec<F>>);

impl<F: Scalar> Grads<F> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.0.iter_mut().flatten() {
            *v = *v * s;
        }
    }

    pub fn global_norm(&self) -> F {
        self.0.iter().flatten().map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
