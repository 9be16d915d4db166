use rand::Rng;

use super::{gemm, Feat, Grads, Op, ParamId, ParamSet, Scalar};

/// 2-D convolution with square kernel, zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

pub struct ConvCache<F> {
    cols: Vec<F>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = if zero_init {
            params.add_const(format!("{name}.weight"), vec![cout, cin, k, k], 0.0)
        } else {
            params.add_uniform(rng, format!("{name}.weight"), vec![cout, cin, k, k], fan_in, 3f64.sqrt())
        };
        let b = params.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Self {
            w,
            b,
            cin,
            cout,
            k,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }

    fn im2col<F: Scalar>(&self, x: &Feat<F>) -> Vec<F> {
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let n = ho * wo;
        let mut cols = vec![F::zero(); self.cin * k * k * n];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Scalar>(&self, cols: &[F], (c, h, w): (usize, usize, usize)) -> Feat<F> {
        let (k, s, p) = (self.k, self.stride, self.pad() as isize);
        let (ho, wo) = self.out_hw(h, w);
        let n = ho * wo;
        let mut out = Feat::zeros(c, h, w);
        for ci in 0..c {
            let dst = &mut out.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                        let base = iy as usize * w;
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &Feat<F>) -> (Feat<F>, ConvCache<F>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let n = ho * wo;
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x)
        };
        let bias = params.get(self.b);
        let mut y = Vec::with_capacity(self.cout * n);
        for &b in bias {
            y.extend(std::iter::repeat_n(b, n));
        }
        gemm(Op::N, Op::N, self.cout, kk, n, params.get(self.w), &cols, &mut y, true);
        (
            Feat::new(self.cout, ho, wo, y),
            ConvCache {
                cols,
                in_shape: (x.c, x.h, x.w),
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        cache: &ConvCache<F>,
        dy: &Feat<F>,
        grads: &mut Grads<F>,
    ) -> Feat<F> {
        let n = dy.hw();
        let kk = self.cin * self.k * self.k;
        gemm(Op::N, Op::T, self.cout, n, kk, &dy.data, &cache.cols, grads.get_mut(self.w), true);
        let db = grads.get_mut(self.b);
        for (c, g) in db.iter_mut().enumerate() {
            *g += dy.channel(c).iter().copied().sum::<F>();
        }
        let mut dcols = vec![F::zero(); kk * n];
        gemm(Op::T, Op::N, kk, self.cout, n, params.get(self.w), &dy.data, &mut dcols, false);
        if self.k == 1 && self.stride == 1 {
            let (c, h, w) = cache.in_shape;
            Feat::new(c, h, w, dcols)
        } else {
            self.col2im(&dcols, cache.in_shape)
        }
    }
}

/// Group normalization with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    /// Uses the largest group count `<= max_groups` that divides `channels`.
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        let gamma = params.add_const(format!("{name}.gamma"), vec![channels], 1.0);
        let beta = params.add_const(format!("{name}.beta"), vec![channels], 0.0);
        Self {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &Feat<F>) -> (Feat<F>, GroupNormCache<F>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let hw = x.hw();
        let per = self.channels / self.groups * hw;
        let count = F::from_f64(per as f64);
        let eps = F::from_f64(GN_EPS);
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let mut xhat = vec![F::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        let mut y = vec![F::zero(); x.data.len()];
        for g in 0..self.groups {
            let range = g * per..(g + 1) * per;
            let xs = &x.data[range.clone()];
            let mean = xs.iter().copied().sum::<F>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, &v) in xs.iter().enumerate() {
                xhat[range.start + i] = (v - mean) * inv;
            }
        }
        for c in 0..self.channels {
            for i in c * hw..(c + 1) * hw {
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
        (Feat::new(x.c, x.h, x.w, y), GroupNormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        cache: &GroupNormCache<F>,
        dy: &Feat<F>,
        grads: &mut Grads<F>,
    ) -> Feat<F> {
        let hw = dy.hw();
        let cpg = self.channels / self.groups;
        let per = cpg * hw;
        let count = F::from_f64(per as f64);
        let gamma = params.get(self.gamma);
        {
            let dgamma = grads.get_mut(self.gamma);
            for (c, dg) in dgamma.iter_mut().enumerate().take(self.channels) {
                let mut s = F::zero();
                for i in c * hw..(c + 1) * hw {
                    s += dy.data[i] * cache.xhat[i];
                }
                *dg += s;
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for (c, g) in dbeta.iter_mut().enumerate() {
                *g += dy.channel(c).iter().copied().sum::<F>();
            }
        }
        let mut dx = vec![F::zero(); dy.data.len()];
        for g in 0..self.groups {
            let start = g * per;
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for i in start..start + per {
                let d = dy.data[i] * gamma[i / hw];
                sum_d += d;
                sum_dx += d * cache.xhat[i];
            }
            let inv = cache.inv_std[g];
            for i in start..start + per {
                let d = dy.data[i] * gamma[i / hw];
                dx[i] = inv / count * (count * d - sum_d - cache.xhat[i] * sum_dx);
            }
        }
        Feat::new(dy.c, dy.h, dy.w, dx)
    }
}

/// Fully connected layer, weight stored `out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        params: &mut ParamSet<F>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let w = params.add_uniform(rng, format!("{name}.weight"), vec![fan_out, fan_in], fan_in, gain);
        let b = params.add_const(format!("{name}.bias"), vec![fan_out], 0.0);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Scalar>(&self, params: &ParamSet<F>, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.fan_in, "linear input size");
        let w = params.get(self.w);
        params
            .get(self.b)
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                let row = &w[o * self.fan_in..(o + 1) * self.fan_in];
                b + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<F>()
            })
            .collect()
    }

    pub fn backward<F: Scalar>(&self, params: &ParamSet<F>, x: &[F], dy: &[F], grads: &mut Grads<F>) -> Vec<F> {
        {
            let dw = grads.get_mut(self.w);
            for (o, &d) in dy.iter().enumerate() {
                for (g, &v) in dw[o * self.fan_in..(o + 1) * self.fan_in].iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        for (g, &d) in grads.get_mut(self.b).iter_mut().zip(dy) {
            *g += d;
        }
        let w = params.get(self.w);
        let mut dx = vec![F::zero(); self.fan_in];
        for (o, &d) in dy.iter().enumerate() {
            for (g, &a) in dx.iter_mut().zip(&w[o * self.fan_in..(o + 1) * self.fan_in]) {
                *g += d * a;
            }
        }
        dx
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input `x` and upstream `dy`.
pub fn silu_backward<F: Scalar>(x: &[F], dy: &[F]) -> Vec<F> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (F::one() + v * (F::one() - s))
        })
        .collect()
}

pub fn upsample2x<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Vec::with_capacity(x.c * h2 * w2);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h2 {
            let row = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for xx in 0..w2 {
                out.push(row[xx / 2]);
            }
        }
    }
    Feat::new(x.c, h2, w2, out)
}

pub fn upsample2x_backward<F: Scalar>(dy: &Feat<F>) -> Feat<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Feat::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}

pub fn concat_channels<F: Scalar>(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat::new(a.c + b.c, a.h, a.w, data)
}

/// Inverse of [`concat_channels`]: first `c_first` channels, then the rest.
pub fn split_channels<F: Scalar>(x: &Feat<F>, c_first: usize) -> (Feat<F>, Feat<F>) {
    let cut = c_first * x.hw();
    (
        Feat::new(c_first, x.h, x.w, x.data[..cut].to_vec()),
        Feat::new(x.c - c_first, x.h, x.w, x.data[cut..].to_vec()),
    )
}

pub fn global_avg_pool<F: Scalar>(x: &Feat<F>) -> Vec<F> {
    let n = F::from_f64(x.hw() as f64);
    (0..x.c).map(|c| x.channel(c).iter().copied().sum::<F>() / n).collect()
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &[F], c: usize, h: usize, w: usize) -> Feat<F> {
    let n = F::from_f64((h * w) as f64);
    let mut data = Vec::with_capacity(c * h * w);
    for &d in dy {
        data.extend(std::iter::repeat_n(d / n, h * w));
    }
    Feat::new(c, h, w, data)
}

/// `[sin(t f_0) .. sin(t f_{d/2-1}), cos(t f_0) ..]` with geometric
/// frequencies from 1 down to 1/10000.
pub fn sinusoidal_embedding<F: Scalar>(t: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = F::from_f64((t * freq).sin());
        out[half + i] = F::from_f64((t * freq).cos());
    }
    out
}
