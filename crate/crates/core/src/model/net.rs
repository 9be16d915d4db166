//! Semantic encoder and conditional U-Net denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DaeConfig;
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, sinusoidal_embedding, silu,
    silu_backward, split_channels, upsample2x, upsample2x_backward, Conv2d, ConvCache, Feat,
    GroupNorm, GroupNormCache, Grads, Linear, ParamSet, Scalar,
};

/// Residual block whose second normalization is modulated by the time
/// embedding and the semantic latent:
/// `(1 + z_scale) * ((1 + t_scale) * GN(h) + t_shift)`.
#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    t_proj: Linear,
    z_proj: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

struct ResCache<F> {
    gn1: GroupNormCache<F>,
    a1: Vec<F>,
    conv1: ConvCache<F>,
    gn2: GroupNormCache<F>,
    g: Vec<F>,
    t_mod: Vec<F>,
    z_scale: Vec<F>,
    m: Vec<F>,
    o: Vec<F>,
    conv2: ConvCache<F>,
    skip: Option<ConvCache<F>>,
    in_shape: (usize, usize, usize),
}

impl ResBlock {
    fn new<F: Scalar>(
        params: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &DaeConfig,
    ) -> Self {
        let g = cfg.max_groups;
        Self {
            gn1: GroupNorm::new(params, &format!("{name}.gn1"), cin, g),
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), cin, cout, 3, 1, false),
            gn2: GroupNorm::new(params, &format!("{name}.gn2"), cout, g),
            t_proj: Linear::new(params, rng, &format!("{name}.t_proj"), cfg.time_embed_dim, 2 * cout, 1.0),
            z_proj: Linear::new(params, rng, &format!("{name}.z_proj"), cfg.latent_dim, cout, 1.0),
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), cout, cout, 3, 1, cfg.zero_init_residual),
            skip: (cin != cout)
                .then(|| Conv2d::new(params, rng, &format!("{name}.skip"), cin, cout, 1, 1, false)),
            cout,
        }
    }

    fn forward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        x: &Feat<F>,
        temb_act: &[F],
        z: &[F],
    ) -> (Feat<F>, ResCache<F>) {
        let hw = x.hw();
        let (a1, gn1) = self.gn1.forward(p, x);
        let s1 = Feat::new(a1.c, a1.h, a1.w, silu(&a1.data));
        let (h1, conv1) = self.conv1.forward(p, &s1);
        let (g, gn2) = self.gn2.forward(p, &h1);
        let t_mod = self.t_proj.forward(p, temb_act);
        let z_scale = self.z_proj.forward(p, z);
        let (t_scale, t_shift) = t_mod.split_at(self.cout);
        let mut m = vec![F::zero(); g.data.len()];
        let mut o = vec![F::zero(); g.data.len()];
        for c in 0..self.cout {
            let (a, b, zs) = (F::one() + t_scale[c], t_shift[c], F::one() + z_scale[c]);
            for i in c * hw..(c + 1) * hw {
                m[i] = a * g.data[i] + b;
                o[i] = zs * m[i];
            }
        }
        let s2 = Feat::new(self.cout, x.h, x.w, silu(&o));
        let (mut out, conv2) = self.conv2.forward(p, &s2);
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(p, x);
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let cache = ResCache {
            gn1,
            a1: a1.data,
            conv1,
            gn2,
            g: g.data,
            t_mod,
            z_scale,
            m,
            o,
            conv2,
            skip,
            in_shape: (x.c, x.h, x.w),
        };
        (out, cache)
    }

    /// Returns `(dx, d temb_act, dz)`.
    #[allow(clippy::too_many_arguments)]
    fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &ResCache<F>,
        dout: &Feat<F>,
        temb_act: &[F],
        z: &[F],
        grads: &mut Grads<F>,
    ) -> (Feat<F>, Vec<F>, Vec<F>) {
        let (cin, h, w) = cache.in_shape;
        let hw = h * w;
        let mut dx = match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => conv.backward(p, sc, dout, grads),
            _ => dout.clone(),
        };
        let ds2 = self.conv2.backward(p, &cache.conv2, dout, grads);
        let d_o = silu_backward(&cache.o, &ds2.data);
        let (t_scale, _) = cache.t_mod.split_at(self.cout);
        let mut dg = vec![F::zero(); d_o.len()];
        let mut dt_mod = vec![F::zero(); 2 * self.cout];
        let mut dz_scale = vec![F::zero(); self.cout];
        for c in 0..self.cout {
            let zs = F::one() + cache.z_scale[c];
            let a = F::one() + t_scale[c];
            let (mut dzs, mut dts, mut dtb) = (F::zero(), F::zero(), F::zero());
            for i in c * hw..(c + 1) * hw {
                dzs += d_o[i] * cache.m[i];
                let dm = d_o[i] * zs;
                dts += dm * cache.g[i];
                dtb += dm;
                dg[i] = dm * a;
            }
            dz_scale[c] = dzs;
            dt_mod[c] = dts;
            dt_mod[self.cout + c] = dtb;
        }
        let dtemb = self.t_proj.backward(p, temb_act, &dt_mod, grads);
        let dz = self.z_proj.backward(p, z, &dz_scale, grads);
        let dh1 = self
            .gn2
            .backward(p, &cache.gn2, &Feat::new(self.cout, h, w, dg), grads);
        let ds1 = self.conv1.backward(p, &cache.conv1, &dh1, grads);
        let da1 = Feat::new(cin, h, w, silu_backward(&cache.a1, &ds1.data));
        dx.add_assign(&self.gn1.backward(p, &cache.gn1, &da1, grads));
        (dx, dtemb, dz)
    }
}

/// Convolutional semantic encoder: strided conv stack, global average pool,
/// linear head to the latent dimension.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

pub(crate) struct EncoderCache<F> {
    convs: Vec<(ConvCache<F>, Feat<F>)>,
    pooled: Vec<F>,
}

impl Encoder {
    fn new<F: Scalar>(p: &mut ParamSet<F>, rng: &mut ChaCha8Rng, cfg: &DaeConfig) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, (&mult, &stride)) in cfg.encoder_mult.iter().zip(&cfg.encoder_strides).enumerate() {
            let cout = cfg.base_width * mult;
            convs.push(Conv2d::new(p, rng, &format!("enc.conv{i}"), cin, cout, 3, stride, false));
            cin = cout;
        }
        let head = Linear::new(p, rng, "enc.head", cin, cfg.latent_dim, 3f64.sqrt());
        Self { convs, head }
    }

    pub(crate) fn forward<F: Scalar>(&self, p: &ParamSet<F>, x: &Feat<F>) -> (Vec<F>, EncoderCache<F>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(p, &h);
            h = Feat::new(pre.c, pre.h, pre.w, silu(&pre.data));
            caches.push((cache, pre));
        }
        let pooled = global_avg_pool(&h);
        let z = self.head.forward(p, &pooled);
        (
            z,
            EncoderCache {
                convs: caches,
                pooled,
            },
        )
    }

    pub(crate) fn backward<F: Scalar>(&self, p: &ParamSet<F>, cache: &EncoderCache<F>, dz: &[F], grads: &mut Grads<F>) {
        let dpool = self.head.backward(p, &cache.pooled, dz, grads);
        let last = &cache.convs.last().expect("encoder has convs").1;
        let mut dh = global_avg_pool_backward(&dpool, last.c, last.h, last.w);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let (cc, pre) = &cache.convs[i];
            let dpre = Feat::new(pre.c, pre.h, pre.w, silu_backward(&pre.data, &dh.data));
            dh = conv.backward(p, cc, &dpre, grads);
        }
    }
}

/// U-Net over `channel_mult.len()` resolutions with one residual block per
/// level on each path and a middle block at the lowest resolution.
#[derive(Clone, Debug)]
pub(crate) struct Unet {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv2d>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    gn_out: GroupNorm,
    conv_out: Conv2d,
    temb_dim: usize,
}

pub(crate) struct UnetCache<F> {
    temb_in: Vec<F>,
    t1: Vec<F>,
    temb: Vec<F>,
    temb_act: Vec<F>,
    conv_in: ConvCache<F>,
    down: Vec<ResCache<F>>,
    downsample: Vec<ConvCache<F>>,
    mid: ResCache<F>,
    up: Vec<(ResCache<F>, usize)>,
    gn_out: GroupNormCache<F>,
    pre_out: Feat<F>,
    conv_out: ConvCache<F>,
}

impl Unet {
    fn new<F: Scalar>(p: &mut ParamSet<F>, rng: &mut ChaCha8Rng, cfg: &DaeConfig) -> Self {
        let e = cfg.time_embed_dim;
        let widths: Vec<usize> = cfg.channel_mult.iter().map(|m| m * cfg.base_width).collect();
        let time1 = Linear::new(p, rng, "time.lin1", e, e, 3f64.sqrt());
        let time2 = Linear::new(p, rng, "time.lin2", e, e, 3f64.sqrt());
        let conv_in = Conv2d::new(p, rng, "unet.conv_in", 1, widths[0], 3, 1, false);
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        let mut cur = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(p, rng, &format!("unet.down{l}"), cur, w, cfg));
            cur = w;
            if l + 1 < widths.len() {
                downsamples.push(Conv2d::new(p, rng, &format!("unet.downsample{l}"), w, w, 3, 2, false));
            }
        }
        let mid = ResBlock::new(p, rng, "unet.mid", cur, cur, cfg);
        let mut up_blocks = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            up_blocks.push(ResBlock::new(p, rng, &format!("unet.up{l}"), cur + w, w, cfg));
            cur = w;
        }
        let gn_out = GroupNorm::new(p, "unet.gn_out", cur, cfg.max_groups);
        let conv_out = Conv2d::new(p, rng, "unet.conv_out", cur, 1, 3, 1, cfg.zero_init_residual);
        Self {
            time1,
            time2,
            conv_in,
            down_blocks,
            downsamples,
            mid,
            up_blocks,
            gn_out,
            conv_out,
            temb_dim: e,
        }
    }

    pub(crate) fn forward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        x: &Feat<F>,
        t: f64,
        z: &[F],
    ) -> (Feat<F>, UnetCache<F>) {
        let temb_in = sinusoidal_embedding::<F>(t, self.temb_dim);
        let t1 = self.time1.forward(p, &temb_in);
        let temb = self.time2.forward(p, &silu(&t1));
        let temb_act = silu(&temb);

        let (mut h, conv_in) = self.conv_in.forward(p, x);
        let mut skips = Vec::new();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for (l, block) in self.down_blocks.iter().enumerate() {
            let (out, c) = block.forward(p, &h, &temb_act, z);
            down.push(c);
            skips.push(out.clone());
            h = out;
            if let Some(ds) = self.downsamples.get(l) {
                let (out, c) = ds.forward(p, &h);
                downsample.push(c);
                h = out;
            }
        }
        let (out, mid) = self.mid.forward(p, &h, &temb_act, z);
        h = out;
        let levels = self.down_blocks.len();
        let mut up = Vec::new();
        for (i, block) in self.up_blocks.iter().enumerate() {
            let l = levels - 1 - i;
            let cur_c = h.c;
            let cat = concat_channels(&h, &skips[l]);
            let (out, c) = block.forward(p, &cat, &temb_act, z);
            up.push((c, cur_c));
            h = if l > 0 { upsample2x(&out) } else { out };
        }
        let (a, gn_out) = self.gn_out.forward(p, &h);
        let s = Feat::new(a.c, a.h, a.w, silu(&a.data));
        let (eps, conv_out) = self.conv_out.forward(p, &s);
        let cache = UnetCache {
            temb_in,
            t1,
            temb,
            temb_act,
            conv_in,
            down,
            downsample,
            mid,
            up,
            gn_out,
            pre_out: a,
            conv_out,
        };
        (eps, cache)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `z`.
    pub(crate) fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        cache: &UnetCache<F>,
        deps: &Feat<F>,
        z: &[F],
        grads: &mut Grads<F>,
    ) -> Vec<F> {
        let ta = &cache.temb_act;
        let mut dz = vec![F::zero(); z.len()];
        let mut dtemb_act = vec![F::zero(); ta.len()];
        let acc = |dst: &mut Vec<F>, src: &[F]| {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };

        let ds = self.conv_out.backward(p, &cache.conv_out, deps, grads);
        let pre = &cache.pre_out;
        let da = Feat::new(pre.c, pre.h, pre.w, silu_backward(&pre.data, &ds.data));
        let mut dh = self.gn_out.backward(p, &cache.gn_out, &da, grads);

        let levels = self.down_blocks.len();
        let mut dskips: Vec<Option<Feat<F>>> = vec![None; levels];
        for (i, block) in self.up_blocks.iter().enumerate().rev() {
            let l = levels - 1 - i;
            let (rc, cur_c) = &cache.up[i];
            let (dcat, dt, dzz) = block.backward(p, rc, &dh, ta, z, grads);
            acc(&mut dtemb_act, &dt);
            acc(&mut dz, &dzz);
            let (dprev, dskip) = split_channels(&dcat, *cur_c);
            dskips[l] = Some(dskip);
            // Every up block except the lowest consumed an upsampled input.
            dh = if i > 0 { upsample2x_backward(&dprev) } else { dprev };
        }
        // `dh` now holds the gradient at the middle block output.
        let (mut dh, dt, dzz) = self.mid.backward(p, &cache.mid, &dh, ta, z, grads);
        acc(&mut dtemb_act, &dt);
        acc(&mut dz, &dzz);
        for l in (0..levels).rev() {
            if let Some(ds) = self.downsamples.get(l) {
                dh = ds.backward(p, &cache.downsample[l], &dh, grads);
            }
            dh.add_assign(dskips[l].as_ref().expect("skip gradient"));
            let (dx, dt, dzz) = self.down_blocks[l].backward(p, &cache.down[l], &dh, ta, z, grads);
            acc(&mut dtemb_act, &dt);
            acc(&mut dz, &dzz);
            dh = dx;
        }
        self.conv_in.backward(p, &cache.conv_in, &dh, grads);

        let dtemb = silu_backward(&cache.temb, &dtemb_act);
        let ds1 = self.time2.backward(p, &silu(&cache.t1), &dtemb, grads);
        let dt1 = silu_backward(&cache.t1, &ds1);
        self.time1.backward(p, &cache.temb_in, &dt1, grads);
        dz
    }
}

/// A diffusion autoencoder: parameters plus the layer graph that reads them.
#[derive(Clone, Debug)]
pub struct Dae<F> {
    pub(crate) config: DaeConfig,
    pub(crate) params: ParamSet<F>,
    pub(crate) encoder: Encoder,
    pub(crate) unet: Unet,
}

impl<F: Scalar> Dae<F> {
    /// Builds the layer graph and deterministically initializes parameters.
    pub(crate) fn init(config: DaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let unet = Unet::new(&mut params, &mut rng, &config);
        Self {
            config,
            params,
            encoder,
            unet,
        }
    }

    pub fn config(&self) -> &DaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> Dae<G> {
        Dae {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            unet: self.unet.clone(),
        }
    }

    fn image(&self, data: Vec<F>) -> Feat<F> {
        let s = self.config.image_size;
        Feat::new(1, s, s, data)
    }

    /// Semantic latent of a model-space image (values in [-1, 1]).
    pub(crate) fn encode_raw(&self, x: &[F]) -> Vec<F> {
        self.encoder.forward(&self.params, &self.image(x.to_vec())).0
    }

    /// Noise prediction for a model-space noisy image.
    pub(crate) fn eps_raw(&self, x_t: &[F], t: usize, z: &[F]) -> Vec<F> {
        self.unet
            .forward(&self.params, &self.image(x_t.to_vec()), t as f64, z)
            .0
            .data
    }

    /// Per-sample training loss and its parameter gradient.
    ///
    /// `x0` is in model space, `x_t` must equal `q_sample(x0, t, eps)`.
    pub fn loss_and_grad(&self, x0: &[F], x_t: &[F], t: usize, eps: &[F]) -> (f64, Grads<F>) {
        let p = &self.params;
        let (z, enc_cache) = self.encoder.forward(p, &self.image(x0.to_vec()));
        let (pred, unet_cache) = self.unet.forward(p, &self.image(x_t.to_vec()), t as f64, &z);
        let n = F::from_f64(pred.data.len() as f64);
        let (loss, dpred) = self.config.loss.value_and_grad(&pred.data, eps, n);
        let mut grads = p.zeros_like();
        let dz = self.unet.backward(p, &unet_cache, &self.image(dpred), &z, &mut grads);
        self.encoder.backward(p, &enc_cache, &dz, &mut grads);
        (loss, grads)
    }

    /// Loss only; used for finite-difference checks.
    pub fn loss(&self, x0: &[F], x_t: &[F], t: usize, eps: &[F]) -> f64 {
        let z = self.encode_raw(x0);
        let pred = self.eps_raw(x_t, t, &z);
        let n = F::from_f64(pred.len() as f64);
        self.config.loss.value_and_grad(&pred, eps, n).0
    }
}
