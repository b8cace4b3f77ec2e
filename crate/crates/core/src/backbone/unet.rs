//! The toy U-Net noise predictor.
//!
//! Layout (with `c = channels`, input pixel-unshuffled by `patch`, `R` the
//! unshuffled working resolution):
//!
//! ```text
//! level 0 (R)  :  stem, E1 res, E2 res, E3 down
//! level 1 (R/2):  E4 res+attn, E5 res+attn, E6 down
//! level 2 (R/4):  E7 res+attn, E8 res+attn, mid res+attn+res
//!                 D1 res+attn, D2 res+attn, D3 res+attn, up
//! level 1 (R/2):  D4 res+attn, D5 res+attn, D6 res+attn, D7 res+attn, up
//! level 0 (R)  :  D8 res, D9 res, D10 res, D11 res, out
//! ```
//!
//! Decoder layers are numbered 1..=11 from the coarsest level outwards, so
//! layer 4 is the first block of the intermediate level and layers 1..=7 carry
//! self-attention. Every attention block also cross-attends to the prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::attention::self_attention;
use crate::backbone::hooks::{HookContext, HookKind, HookSiteId, Stage};
use crate::backbone::nn::{
    add, add_into, concat_channels, dims4, gemm, pixel_shuffle, pixel_unshuffle, silu,
    silu_backward, silu_backward_slice, silu_slice, softmax_rows_backward, split_channels,
    upsample2, upsample2_backward, Conv2d, Grads, GroupNorm, GroupNormCache, Linear, ParamStore,
};
use crate::backbone::prompt::PromptEmbedding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ENCODER_LAYERS: usize = 8;
pub const DECODER_LAYERS: usize = 11;

/// Architecture descriptor; everything needed to rebuild the network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub resolution: usize,
    pub image_channels: usize,
    pub patch: usize,
    pub channels: [usize; 3],
    pub heads: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub prompt_seed: u64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            resolution: 64,
            image_channels: 3,
            patch: 4,
            channels: [32, 64, 64],
            heads: 2,
            groups: 8,
            time_dim: 64,
            text_dim: 32,
            prompt_seed: 0x5eed_7e47,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let base = self.resolution / self.patch.max(1);
        if self.patch == 0 || self.resolution % self.patch != 0 || base % 4 != 0 || base < 4 {
            return Err(Error::invalid(format!(
                "resolution {} with patch {} does not give three levels",
                self.resolution, self.patch
            )));
        }
        let [c0, c1, c2] = self.channels;
        for c in [c0, c1, c2, c0 + c1, c1 + c2, 2 * c0, 2 * c1, 2 * c2] {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "channel count {c} is not divisible into {} groups",
                    self.groups
                )));
            }
        }
        for c in [c1, c2] {
            if self.heads == 0 || c % self.heads != 0 {
                return Err(Error::invalid(format!("{c} channels do not split into {} heads", self.heads)));
            }
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 || self.text_dim == 0 {
            return Err(Error::invalid("time_dim must be even and text_dim positive"));
        }
        Ok(())
    }

    pub fn level_size(&self, level: usize) -> usize {
        (self.resolution / self.patch) >> level
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.resolution, self.resolution]
    }

    fn time_hidden(&self) -> usize {
        self.time_dim * 2
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerMeta {
    channels: usize,
    level: usize,
    attention: bool,
}

pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub(crate) struct ResCache {
    x: Tensor,
    gn1: GroupNormCache,
    n1: Tensor,
    a1: Tensor,
    gn2: GroupNormCache,
    n2: Tensor,
    a2: Tensor,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        arch: &Architecture,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = arch.groups;
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, g),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, false, rng),
            temb: Linear::new(ps, &format!("{name}.temb"), arch.time_hidden(), cout, true, false, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, g),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, true, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, false, rng)),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor, temb: &[f32]) -> (Tensor, ResCache) {
        let [b, _, hh, ww] = dims4(x);
        let (n1, gn1) = self.norm1.forward(ps, x);
        let a1 = silu(&n1);
        let mut h = self.conv1.forward(ps, &a1);
        let tp = self.temb.forward(ps, temb, b);
        let cout = self.conv1.cout;
        for (i, plane) in h.data_mut().chunks_mut(hh * ww).enumerate() {
            let shift = tp[i];
            debug_assert_eq!(tp.len(), b * cout);
            plane.iter_mut().for_each(|v| *v += shift);
        }
        let (n2, gn2) = self.norm2.forward(ps, &h);
        let a2 = silu(&n2);
        let h2 = self.conv2.forward(ps, &a2);
        let out = match &self.skip {
            Some(s) => add(&s.forward(ps, x), &h2),
            None => add(x, &h2),
        };
        (out, ResCache { x: x.clone(), gn1, n1, a1, gn2, n2, a2 })
    }

    fn backward(
        &self,
        ps: &ParamStore,
        c: &ResCache,
        dy: &Tensor,
        temb: &[f32],
        dtemb: &mut [f32],
        g: &mut Grads,
    ) -> Tensor {
        let [b, _, hh, ww] = dims4(dy);
        let da2 = self.conv2.backward(ps, &c.a2, dy, g);
        let dn2 = silu_backward(&c.n2, &da2);
        let dh = self.norm2.backward(ps, &c.gn2, &dn2, g);
        let dtp: Vec<f32> = dh.data().chunks(hh * ww).map(|p| p.iter().sum()).collect();
        let dta = self.temb.backward(ps, temb, &dtp, b, g);
        add_into(dtemb, &dta);
        let da1 = self.conv1.backward(ps, &c.a1, &dh, g);
        let dn1 = silu_backward(&c.n1, &da1);
        let dx = self.norm1.backward(ps, &c.gn1, &dn1, g);
        let dskip = match &self.skip {
            Some(s) => s.backward(ps, &c.x, dy, g),
            None => dy.clone(),
        };
        add(&dx, &dskip)
    }
}

/// `[C, N]` plane block to `[N, C]` tokens.
fn to_tokens(x: &[f32], c: usize, n: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; c * n];
    for ci in 0..c {
        for j in 0..n {
            t[j * c + ci] = x[ci * n + j];
        }
    }
    t
}

fn from_tokens(t: &[f32], c: usize, n: usize) -> Vec<f32> {
    let mut x = vec![0.0f32; c * n];
    for j in 0..n {
        for ci in 0..c {
            x[ci * n + j] = t[j * c + ci];
        }
    }
    x
}

/// `[N, heads·d]` to `[heads, N, d]`.
fn split_heads(x: &[f32], n: usize, heads: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for j in 0..n {
        for h in 0..heads {
            out[(h * n + j) * d..(h * n + j + 1) * d]
                .copy_from_slice(&x[j * heads * d + h * d..j * heads * d + (h + 1) * d]);
        }
    }
    out
}

fn merge_heads(x: &[f32], n: usize, heads: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for h in 0..heads {
        for j in 0..n {
            out[j * heads * d + h * d..j * heads * d + (h + 1) * d]
                .copy_from_slice(&x[(h * n + j) * d..(h * n + j + 1) * d]);
        }
    }
    out
}

pub(crate) struct AttnBlock {
    channels: usize,
    heads: usize,
    norm1: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: GroupNorm,
    q2: Linear,
    k2: Linear,
    v2: Linear,
    out2: Linear,
}

struct AttnSample {
    t: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    a: Vec<f32>,
    om: Vec<f32>,
    t2: Vec<f32>,
    q2: Vec<f32>,
    k2: Vec<f32>,
    v2: Vec<f32>,
    a2: Vec<f32>,
    o2m: Vec<f32>,
    e: Vec<f32>,
    m: usize,
}

pub(crate) struct AttnCache {
    gn1: GroupNormCache,
    gn2: GroupNormCache,
    samples: Vec<AttnSample>,
}

/// Per-head backward of `o = softmax(q·kᵀ)·v`; returns `(dq, dk, dv)` in head layout.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    a: &[f32],
    d_o: &[f32],
    heads: usize,
    n: usize,
    m: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dq = vec![0.0f32; heads * n * d];
    let mut dk = vec![0.0f32; heads * m * d];
    let mut dv = vec![0.0f32; heads * m * d];
    let mut da = vec![0.0f32; n * m];
    for h in 0..heads {
        let (qh, kh, vh) = (&q[h * n * d..], &k[h * m * d..], &v[h * m * d..]);
        let ah = &a[h * n * m..(h + 1) * n * m];
        let doh = &d_o[h * n * d..];
        gemm(n, d, m, doh, false, vh, true, &mut da, 0.0);
        gemm(m, n, d, ah, true, doh, false, &mut dv[h * m * d..], 0.0);
        let ds = softmax_rows_backward(ah, &da, m);
        gemm(n, m, d, &ds, false, kh, false, &mut dq[h * n * d..], 0.0);
        gemm(m, n, d, &ds, true, qh, false, &mut dk[h * m * d..], 0.0);
    }
    (dq, dk, dv)
}

impl AttnBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let e = arch.text_dim;
        Self {
            channels: c,
            heads: arch.heads,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c, arch.groups),
            q: Linear::new(ps, &format!("{name}.to_q"), c, c, false, false, rng),
            k: Linear::new(ps, &format!("{name}.to_k"), c, c, false, false, rng),
            v: Linear::new(ps, &format!("{name}.to_v"), c, c, false, false, rng),
            out: Linear::new(ps, &format!("{name}.to_out"), c, c, true, true, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c, arch.groups),
            q2: Linear::new(ps, &format!("{name}.cross_q"), c, c, false, false, rng),
            k2: Linear::new(ps, &format!("{name}.cross_k"), e, c, false, false, rng),
            v2: Linear::new(ps, &format!("{name}.cross_v"), e, c, false, false, rng),
            out2: Linear::new(ps, &format!("{name}.cross_out"), c, c, true, true, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        embs: &[&PromptEmbedding],
        hooks: &mut HookContext,
        site: Option<(Stage, usize)>,
        keep: bool,
    ) -> Result<(Tensor, Option<AttnCache>)> {
        let [b, c, hh, ww] = dims4(x);
        let n = hh * ww;
        let (heads, d) = (self.heads, self.head_dim());
        let scale = 1.0 / (d as f32).sqrt();
        let site_id = |kind| site.map(|(stage, l)| HookSiteId::new(stage, l, kind));

        let (n1, gn1) = self.norm1.forward(ps, x);
        let mut x1 = x.clone();
        let mut samples = Vec::with_capacity(if keep { b } else { 0 });
        let mut partial = Vec::with_capacity(b);
        for bi in 0..b {
            let t = to_tokens(&n1.data()[bi * c * n..(bi + 1) * c * n], c, n);
            let mut qp = self.q.forward(ps, &t, n);
            qp.iter_mut().for_each(|v| *v *= scale);
            let mut q = Tensor::new(vec![heads, n, d], split_heads(&qp, n, heads, d))?;
            let mut k = Tensor::new(vec![heads, n, d], split_heads(&self.k.forward(ps, &t, n), n, heads, d))?;
            let v = Tensor::new(vec![heads, n, d], split_heads(&self.v.forward(ps, &t, n), n, heads, d))?;
            let mut override_a = None;
            if !hooks.is_empty() {
                if let Some(s) = site_id(HookKind::AttentionQueries) {
                    q = hooks.apply(s, q)?;
                }
                if let Some(s) = site_id(HookKind::AttentionKeys) {
                    k = hooks.apply(s, k)?;
                }
                if let Some(s) = site_id(HookKind::AttentionMatrix) {
                    override_a = hooks.override_for(&s).cloned();
                }
            }
            let (o, mut a) = self_attention(&q, &k, &v, override_a.as_ref())?;
            if override_a.is_none() {
                hooks.observe_attention(a.data(), n);
            }
            if let Some(s) = site_id(HookKind::AttentionMatrix) {
                if hooks.wants(&s) {
                    a = hooks.apply(s, a)?;
                }
            }
            let om = merge_heads(o.data(), n, heads, d);
            let proj = self.out.forward(ps, &om, n);
            let back = from_tokens(&proj, c, n);
            add_into(&mut x1.data_mut()[bi * c * n..(bi + 1) * c * n], &back);
            if keep {
                partial.push((t, q.into_data(), k.into_data(), v.into_data(), a.into_data(), om));
            }
        }

        let (n2, gn2) = self.norm2.forward(ps, &x1);
        let mut x2 = x1;
        let mut partial = partial.into_iter();
        for (bi, emb) in embs.iter().enumerate().take(b) {
            let t2 = to_tokens(&n2.data()[bi * c * n..(bi + 1) * c * n], c, n);
            let mut q2 = self.q2.forward(ps, &t2, n);
            q2.iter_mut().for_each(|v| *v *= scale);
            let q2 = split_heads(&q2, n, heads, d);
            let m = emb.num_tokens();
            let e = emb.tokens.data();
            let k2 = split_heads(&self.k2.forward(ps, e, m), m, heads, d);
            let v2 = split_heads(&self.v2.forward(ps, e, m), m, heads, d);
            let (o2, a2) = self_attention(
                &Tensor::new(vec![heads, n, d], q2.clone())?,
                &Tensor::new(vec![heads, m, d], k2.clone())?,
                &Tensor::new(vec![heads, m, d], v2.clone())?,
                None,
            )?;
            hooks.observe_attention(a2.data(), m);
            let o2m = merge_heads(o2.data(), n, heads, d);
            let proj = self.out2.forward(ps, &o2m, n);
            let back = from_tokens(&proj, c, n);
            add_into(&mut x2.data_mut()[bi * c * n..(bi + 1) * c * n], &back);
            if keep {
                let (t, q, k, v, a, om) = partial.next().expect("one cache per sample");
                samples.push(AttnSample {
                    t,
                    q,
                    k,
                    v,
                    a,
                    om,
                    t2,
                    q2,
                    k2,
                    v2,
                    a2: a2.into_data(),
                    o2m,
                    e: e.to_vec(),
                    m,
                });
            }
        }
        let cache = keep.then_some(AttnCache { gn1, gn2, samples });
        Ok((x2, cache))
    }

    fn backward(&self, ps: &ParamStore, cache: &AttnCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let [b, c, hh, ww] = dims4(dy);
        let n = hh * ww;
        let (heads, d) = (self.heads, self.head_dim());
        let scale = 1.0 / (d as f32).sqrt();

        let mut dn2 = vec![0.0f32; dy.len()];
        for bi in 0..b {
            let s = &cache.samples[bi];
            let dout = to_tokens(&dy.data()[bi * c * n..(bi + 1) * c * n], c, n);
            let dom = self.out2.backward(ps, &s.o2m, &dout, n, g);
            let d_o = split_heads(&dom, n, heads, d);
            let (dq, dk, dv) = attention_backward(&s.q2, &s.k2, &s.v2, &s.a2, &d_o, heads, n, s.m, d);
            let mut dqm = merge_heads(&dq, n, heads, d);
            dqm.iter_mut().for_each(|v| *v *= scale);
            let dt2 = self.q2.backward(ps, &s.t2, &dqm, n, g);
            self.k2.backward(ps, &s.e, &merge_heads(&dk, s.m, heads, d), s.m, g);
            self.v2.backward(ps, &s.e, &merge_heads(&dv, s.m, heads, d), s.m, g);
            dn2[bi * c * n..(bi + 1) * c * n].copy_from_slice(&from_tokens(&dt2, c, n));
        }
        let dn2 = Tensor::new(dy.shape().to_vec(), dn2).expect("shape");
        let dx1 = add(dy, &self.norm2.backward(ps, &cache.gn2, &dn2, g));

        let mut dn1 = vec![0.0f32; dy.len()];
        for bi in 0..b {
            let s = &cache.samples[bi];
            let dout = to_tokens(&dx1.data()[bi * c * n..(bi + 1) * c * n], c, n);
            let dom = self.out.backward(ps, &s.om, &dout, n, g);
            let d_o = split_heads(&dom, n, heads, d);
            let (dq, dk, dv) = attention_backward(&s.q, &s.k, &s.v, &s.a, &d_o, heads, n, n, d);
            let mut dqm = merge_heads(&dq, n, heads, d);
            dqm.iter_mut().for_each(|v| *v *= scale);
            let mut dt = self.q.backward(ps, &s.t, &dqm, n, g);
            add_into(&mut dt, &self.k.backward(ps, &s.t, &merge_heads(&dk, n, heads, d), n, g));
            add_into(&mut dt, &self.v.backward(ps, &s.t, &merge_heads(&dv, n, heads, d), n, g));
            dn1[bi * c * n..(bi + 1) * c * n].copy_from_slice(&from_tokens(&dt, c, n));
        }
        let dn1 = Tensor::new(dy.shape().to_vec(), dn1).expect("shape");
        add(&dx1, &self.norm1.backward(ps, &cache.gn1, &dn1, g))
    }
}

enum EncLayer {
    Res { res: ResBlock, attn: Option<AttnBlock> },
    Down(Conv2d),
}

struct DecLayer {
    res: ResBlock,
    attn: Option<AttnBlock>,
    /// Index into the skip stack (0 is the stem output, `i` is encoder layer `i`).
    skip: Option<usize>,
    up: Option<Conv2d>,
}

enum EncCache {
    Res(ResCache, Option<AttnCache>),
    Down(Tensor),
}

struct DecCache {
    skip_split: Option<usize>,
    res: ResCache,
    attn: Option<AttnCache>,
    up_in: Option<Tensor>,
}

pub(crate) struct UnetCache {
    temb0: Vec<f32>,
    t1: Vec<f32>,
    t1a: Vec<f32>,
    t2: Vec<f32>,
    ta: Vec<f32>,
    stem_in: Tensor,
    enc: Vec<EncCache>,
    mid: (ResCache, AttnCache, ResCache),
    dec: Vec<DecCache>,
    out_gn: GroupNormCache,
    out_n: Tensor,
    out_a: Tensor,
}

/// The network structure; parameters live in a separate [`ParamStore`].
pub struct Unet {
    arch: Architecture,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    enc: Vec<EncLayer>,
    enc_meta: Vec<LayerMeta>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    dec: Vec<DecLayer>,
    dec_meta: Vec<LayerMeta>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    /// Time-dependent per-channel gain on the unshuffled input, added to the
    /// output; carries the per-pixel part of the noise past the stem.
    input_gain: Linear,
}

/// `o[b, c, ..] += gain[b, c] * x[b, c, ..]`.
fn add_gained(o: &mut Tensor, gain: &[f32], x: &Tensor) {
    let [_, _, h, w] = dims4(x);
    for ((dst, src), &g) in o.data_mut().chunks_mut(h * w).zip(x.data().chunks(h * w)).zip(gain) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += g * s;
        }
    }
}

pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut e = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin() as f32;
        e[i + half] = arg.cos() as f32;
    }
    e
}

impl Unet {
    /// Build the network and its seeded initial parameters.
    pub fn new(arch: &Architecture, init_seed: u64) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut ps = ParamStore::default();
        let [c0, c1, c2] = arch.channels;
        let rng = &mut rng;
        let ps_ = &mut ps;
        let in_c = arch.image_channels * arch.patch * arch.patch;
        let th = arch.time_hidden();
        let time1 = Linear::new(ps_, "time.lin1", arch.time_dim, th, true, false, rng);
        let time2 = Linear::new(ps_, "time.lin2", th, th, true, false, rng);
        let stem = Conv2d::new(ps_, "stem", in_c, c0, 3, 1, false, rng);

        let mut enc = Vec::new();
        let mut enc_meta = Vec::new();
        let res = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, cin, cout, attn: bool| {
            let r = ResBlock::new(ps, &name, cin, cout, arch, rng);
            let a = attn.then(|| AttnBlock::new(ps, &format!("{name}.attn"), cout, arch, rng));
            (r, a)
        };
        let enc_plan: [(usize, usize, usize, bool, bool); ENCODER_LAYERS] = [
            // (cin, cout, level, attention, downsample)
            (c0, c0, 0, false, false),
            (c0, c0, 0, false, false),
            (c0, c0, 1, false, true),
            (c0, c1, 1, true, false),
            (c1, c1, 1, true, false),
            (c1, c1, 2, false, true),
            (c1, c2, 2, true, false),
            (c2, c2, 2, true, false),
        ];
        for (i, &(cin, cout, level, attn, down)) in enc_plan.iter().enumerate() {
            let name = format!("encoder.{}", i + 1);
            if down {
                enc.push(EncLayer::Down(Conv2d::new(ps_, &name, cin, cout, 3, 2, false, rng)));
            } else {
                let (r, a) = res(ps_, rng, name, cin, cout, attn);
                enc.push(EncLayer::Res { res: r, attn: a });
            }
            enc_meta.push(LayerMeta { channels: cout, level, attention: attn });
        }
        let mid1 = ResBlock::new(ps_, "mid.res1", c2, c2, arch, rng);
        let mid_attn = AttnBlock::new(ps_, "mid.attn", c2, arch, rng);
        let mid2 = ResBlock::new(ps_, "mid.res2", c2, c2, arch, rng);

        // (input channels before skip, skip index, cout, level, attention, upsample after)
        let skip_ch = |s: usize| if s == 0 { c0 } else { enc_meta[s - 1].channels };
        let dec_plan: [(usize, Option<usize>, usize, usize, bool, bool); DECODER_LAYERS] = [
            (c2, Some(8), c2, 2, true, false),
            (c2, Some(7), c2, 2, true, false),
            (c2, Some(6), c2, 2, true, true),
            (c2, Some(5), c1, 1, true, false),
            (c1, Some(4), c1, 1, true, false),
            (c1, Some(3), c1, 1, true, false),
            (c1, None, c1, 1, true, true),
            (c1, Some(2), c0, 0, false, false),
            (c0, Some(1), c0, 0, false, false),
            (c0, Some(0), c0, 0, false, false),
            (c0, None, c0, 0, false, false),
        ];
        let mut dec = Vec::new();
        let mut dec_meta = Vec::new();
        for (j, &(cin, skip, cout, level, attn, up)) in dec_plan.iter().enumerate() {
            let name = format!("decoder.{}", j + 1);
            let total_in = cin + skip.map(skip_ch).unwrap_or(0);
            let (r, a) = res(ps_, rng, name.clone(), total_in, cout, attn);
            let up = up.then(|| Conv2d::new(ps_, &format!("{name}.up"), cout, cout, 3, 1, false, rng));
            dec.push(DecLayer { res: r, attn: a, skip, up });
            dec_meta.push(LayerMeta { channels: cout, level, attention: attn });
        }
        let out_norm = GroupNorm::new(ps_, "out.norm", c0, arch.groups);
        let out_conv = Conv2d::new(ps_, "out.conv", c0, in_c, 3, 1, true, rng);
        let input_gain = Linear::new(ps_, "out.input_gain", th, in_c, true, true, rng);
        let unet = Self {
            arch: arch.clone(),
            time1,
            time2,
            stem,
            enc,
            enc_meta,
            mid1,
            mid_attn,
            mid2,
            dec,
            dec_meta,
            out_norm,
            out_conv,
            input_gain,
        };
        Ok((unet, ps))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn meta(&self, stage: Stage, layer: usize) -> Option<LayerMeta> {
        let list = match stage {
            Stage::Encoder => &self.enc_meta,
            Stage::Decoder => &self.dec_meta,
        };
        layer.checked_sub(1).and_then(|i| list.get(i)).copied()
    }

    /// Per-sample shape of the value produced at `site`, if the site exists.
    pub fn site_shape(&self, site: &HookSiteId) -> Option<Vec<usize>> {
        let m = self.meta(site.stage, site.layer_index)?;
        let s = self.arch.level_size(m.level);
        let n = s * s;
        let heads = self.arch.heads;
        match site.kind {
            HookKind::ResblockFeatures => Some(vec![m.channels, s, s]),
            HookKind::AttentionQueries | HookKind::AttentionKeys if m.attention => {
                Some(vec![heads, n, m.channels / heads])
            }
            HookKind::AttentionMatrix if m.attention => Some(vec![heads, n, n]),
            _ => None,
        }
    }

    pub fn hook_sites(&self) -> Vec<HookSiteId> {
        let kinds = [
            HookKind::ResblockFeatures,
            HookKind::AttentionQueries,
            HookKind::AttentionKeys,
            HookKind::AttentionMatrix,
        ];
        let mut sites = Vec::new();
        for stage in [Stage::Encoder, Stage::Decoder] {
            for layer in 1..=self.num_layers(stage) {
                for kind in kinds {
                    let site = HookSiteId::new(stage, layer, kind);
                    if self.site_shape(&site).is_some() {
                        sites.push(site);
                    }
                }
            }
        }
        sites.sort();
        sites
    }

    pub fn attention_layers(&self, stage: Stage) -> Vec<usize> {
        let list = match stage {
            Stage::Encoder => &self.enc_meta,
            Stage::Decoder => &self.dec_meta,
        };
        list.iter().enumerate().filter(|(_, m)| m.attention).map(|(i, _)| i + 1).collect()
    }

    pub fn num_layers(&self, stage: Stage) -> usize {
        match stage {
            Stage::Encoder => self.enc_meta.len(),
            Stage::Decoder => self.dec_meta.len(),
        }
    }

    fn hook_features(
        &self,
        hooks: &mut HookContext,
        site: HookSiteId,
        h: Tensor,
    ) -> Result<Tensor> {
        if !hooks.wants(&site) {
            return Ok(h);
        }
        let shape = h.shape().to_vec();
        if shape[0] != 1 {
            return Err(Error::invalid("hooks require a batch of one"));
        }
        let v = hooks.apply(site, h.reshape(shape[1..].to_vec())?)?;
        v.reshape(shape)
    }

    /// Predict the noise for a batch `[B, C, R, R]`.
    ///
    /// With `keep` set, returns the activations needed by [`Unet::backward`].
    pub(crate) fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        ts: &[usize],
        embs: &[&PromptEmbedding],
        hooks: &mut HookContext,
        keep: bool,
    ) -> Result<(Tensor, Option<UnetCache>)> {
        let [b, c, hh, ww] = dims4(x);
        let [ic, r, _] = self.arch.image_shape();
        if c != ic || hh != r || ww != r {
            return Err(Error::ShapeMismatch { expected: vec![b, ic, r, r], got: x.shape().to_vec() });
        }
        if ts.len() != b || embs.len() != b {
            return Err(Error::invalid("one timestep and one prompt per batch element"));
        }
        if let Some(e) = embs.iter().find(|e| e.dim() != self.arch.text_dim) {
            return Err(Error::ShapeMismatch {
                expected: vec![e.num_tokens(), self.arch.text_dim],
                got: e.tokens.shape().to_vec(),
            });
        }
        if !hooks.is_empty() {
            if b != 1 {
                return Err(Error::invalid("hooks require a batch of one"));
            }
            for site in hooks.registered_sites() {
                if self.site_shape(site).is_none() {
                    return Err(Error::UnknownHookSite(site.to_string()));
                }
            }
        }

        let temb0: Vec<f32> = ts.iter().flat_map(|&t| sinusoidal_embedding(t, self.arch.time_dim)).collect();
        let t1 = self.time1.forward(ps, &temb0, b);
        let t1a = silu_slice(&t1);
        let t2 = self.time2.forward(ps, &t1a, b);
        let ta = silu_slice(&t2);

        let stem_in = pixel_unshuffle(x, self.arch.patch);
        let mut h = self.stem.forward(ps, &stem_in);
        let mut skips = vec![h.clone()];
        let mut enc_c = Vec::new();
        for (i, layer) in self.enc.iter().enumerate() {
            let idx = i + 1;
            match layer {
                EncLayer::Res { res, attn } => {
                    let (o, rc) = res.forward(ps, &h, &ta);
                    h = self.hook_features(hooks, HookSiteId::encoder_features(idx), o)?;
                    let mut ac = None;
                    if let Some(a) = attn {
                        let (o, c) = a.forward(ps, &h, embs, hooks, Some((Stage::Encoder, idx)), keep)?;
                        h = o;
                        ac = c;
                    }
                    if keep {
                        enc_c.push(EncCache::Res(rc, ac));
                    }
                }
                EncLayer::Down(conv) => {
                    let input = h;
                    let o = conv.forward(ps, &input);
                    h = self.hook_features(hooks, HookSiteId::encoder_features(idx), o)?;
                    if keep {
                        enc_c.push(EncCache::Down(input));
                    }
                }
            }
            skips.push(h.clone());
        }

        let (o, m1) = self.mid1.forward(ps, &h, &ta);
        let (o, ma) = self.mid_attn.forward(ps, &o, embs, hooks, None, keep)?;
        let (o, m2) = self.mid2.forward(ps, &o, &ta);
        h = o;

        let mut dec_c = Vec::new();
        for (j, layer) in self.dec.iter().enumerate() {
            let idx = j + 1;
            let mut skip_split = None;
            if let Some(si) = layer.skip {
                skip_split = Some(dims4(&h)[1]);
                h = concat_channels(&h, &skips[si]);
            }
            let (o, rc) = layer.res.forward(ps, &h, &ta);
            h = self.hook_features(hooks, HookSiteId::decoder_features(idx), o)?;
            let mut ac = None;
            if let Some(a) = &layer.attn {
                let (o, c) = a.forward(ps, &h, embs, hooks, Some((Stage::Decoder, idx)), keep)?;
                h = o;
                ac = c;
            }
            let mut up_in = None;
            if let Some(up) = &layer.up {
                let o = upsample2(&up.forward(ps, &h));
                if keep {
                    up_in = Some(h);
                }
                h = o;
            }
            if keep {
                dec_c.push(DecCache { skip_split, res: rc, attn: ac, up_in });
            }
        }

        let (out_n, out_gn) = self.out_norm.forward(ps, &h);
        let out_a = silu(&out_n);
        let mut o = self.out_conv.forward(ps, &out_a);
        add_gained(&mut o, &self.input_gain.forward(ps, &ta, b), &stem_in);
        let eps = pixel_shuffle(&o, self.arch.patch);

        let cache = if keep {
            Some(UnetCache {
                temb0,
                t1,
                t1a,
                t2,
                ta,
                stem_in,
                enc: enc_c,
                mid: (m1, ma.expect("kept"), m2),
                dec: dec_c,
                out_gn,
                out_n,
                out_a,
            })
        } else {
            None
        };
        Ok((eps, cache))
    }

    /// Accumulate parameter gradients for upstream gradient `dy` on the output.
    pub(crate) fn backward(&self, ps: &ParamStore, c: &UnetCache, dy: &Tensor, g: &mut Grads) {
        let b = dims4(dy)[0];
        let mut dta = vec![0.0f32; c.ta.len()];
        let d_o = pixel_unshuffle(dy, self.arch.patch);
        let hw = d_o.len() / (b * self.input_gain.dout);
        let dgain: Vec<f32> = d_o
            .data()
            .chunks(hw)
            .zip(c.stem_in.data().chunks(hw))
            .map(|(d, x)| d.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let dta_gain = self.input_gain.backward(ps, &c.ta, &dgain, b, g);
        add_into(&mut dta, &dta_gain);
        let da = self.out_conv.backward(ps, &c.out_a, &d_o, g);
        let dn = silu_backward(&c.out_n, &da);
        let mut dh = self.out_norm.backward(ps, &c.out_gn, &dn, g);

        let mut dskips: Vec<Option<Tensor>> = (0..=self.enc.len()).map(|_| None).collect();
        for (layer, lc) in self.dec.iter().zip(&c.dec).rev() {
            if let (Some(up), Some(up_in)) = (&layer.up, &lc.up_in) {
                dh = up.backward(ps, up_in, &upsample2_backward(&dh), g);
            }
            if let (Some(a), Some(ac)) = (&layer.attn, &lc.attn) {
                dh = a.backward(ps, ac, &dh, g);
            }
            dh = layer.res.backward(ps, &lc.res, &dh, &c.ta, &mut dta, g);
            if let (Some(si), Some(split)) = (layer.skip, lc.skip_split) {
                let (dmain, dskip) = split_channels(&dh, split);
                dskips[si] = Some(match dskips[si].take() {
                    Some(prev) => add(&prev, &dskip),
                    None => dskip,
                });
                dh = dmain;
            }
        }
        let (m1, ma, m2) = &c.mid;
        dh = self.mid2.backward(ps, m2, &dh, &c.ta, &mut dta, g);
        dh = self.mid_attn.backward(ps, ma, &dh, g);
        dh = self.mid1.backward(ps, m1, &dh, &c.ta, &mut dta, g);

        for (i, (layer, lc)) in self.enc.iter().zip(&c.enc).enumerate().rev() {
            if let Some(ds) = dskips[i + 1].take() {
                dh = add(&dh, &ds);
            }
            dh = match (layer, lc) {
                (EncLayer::Res { res, attn }, EncCache::Res(rc, ac)) => {
                    if let (Some(a), Some(ac)) = (attn, ac) {
                        dh = a.backward(ps, ac, &dh, g);
                    }
                    res.backward(ps, rc, &dh, &c.ta, &mut dta, g)
                }
                (EncLayer::Down(conv), EncCache::Down(input)) => conv.backward(ps, input, &dh, g),
                _ => unreachable!("cache matches layer"),
            };
        }
        if let Some(ds) = dskips[0].take() {
            dh = add(&dh, &ds);
        }
        self.stem.backward(ps, &c.stem_in, &dh, g);

        let dt2 = silu_backward_slice(&c.t2, &dta);
        let dt1a = self.time2.backward(ps, &c.t1a, &dt2, b, g);
        let dt1 = silu_backward_slice(&c.t1, &dt1a);
        self.time1.backward(ps, &c.temb0, &dt1, b, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::prompt::ToyPromptEncoder;

    fn tiny() -> Architecture {
        Architecture {
            resolution: 16,
            patch: 2,
            channels: [8, 8, 16],
            groups: 4,
            time_dim: 8,
            text_dim: 4,
            ..Architecture::default()
        }
    }

    fn randomize(ps: &mut ParamStore, seed: u64) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 0.05).unwrap();
        for v in ps.data_mut() {
            *v += n.sample(&mut rng);
        }
    }

    #[test]
    fn output_shape_and_site_shapes() {
        let arch = tiny();
        let (net, ps) = Unet::new(&arch, 1).unwrap();
        let enc = ToyPromptEncoder::new(arch.text_dim, 3);
        let e = enc.encode("a red circle").unwrap();
        let x = Tensor::zeros(vec![1, 3, 16, 16]);
        let (y, _) = net.forward(&ps, &x, &[10], &[&e], &mut HookContext::new(), false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
        assert_eq!(net.site_shape(&HookSiteId::decoder_features(4)), Some(vec![8, 4, 4]));
        assert_eq!(net.site_shape(&HookSiteId::decoder_attention(4)), Some(vec![2, 16, 16]));
        assert_eq!(net.site_shape(&HookSiteId::decoder_attention(8)), None);
        assert_eq!(net.site_shape(&HookSiteId::decoder_features(12)), None);
        assert_eq!(net.attention_layers(Stage::Decoder), (1..=7).collect::<Vec<_>>());
        assert_eq!(net.attention_layers(Stage::Encoder), vec![4, 5, 7, 8]);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let arch = tiny();
        let (net, mut ps) = Unet::new(&arch, 2).unwrap();
        randomize(&mut ps, 3);
        let enc = ToyPromptEncoder::new(arch.text_dim, 3);
        let e1 = enc.encode("a red circle").unwrap();
        let e2 = enc.encode("").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(vec![2, 3, 16, 16], &mut rng);
        let r = Tensor::<f32>::randn(vec![2, 3, 16, 16], &mut rng);
        let embs = [&e1, &e2];
        let ts = [5, 700];
        let loss = |ps: &ParamStore| -> f64 {
            let (y, _) = net.forward(ps, &x, &ts, &embs, &mut HookContext::new(), false).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (_, cache) = net.forward(&ps, &x, &ts, &embs, &mut HookContext::new(), true).unwrap();
        let mut g = Grads::zeros_like(&ps);
        net.backward(&ps, &cache.unwrap(), &r, &mut g);

        let entries: Vec<_> = ps.entries().to_vec();
        let mut checked = 0;
        let mut offset = 0;
        for e in &entries {
            let len: usize = e.shape.iter().product();
            // A few coordinates of every parameter tensor.
            for j in [0, len / 2, len - 1] {
                let i = offset + j;
                let h = 1e-2f32;
                let mut p = ps.clone();
                p.data_mut()[i] += h;
                let lp = loss(&p);
                p.data_mut()[i] -= 2.0 * h;
                let lm = loss(&p);
                let fd = (lp - lm) / (2.0 * h as f64);
                let an = g.data[i] as f64;
                assert!(
                    (fd - an).abs() < 3e-2 * (1.0 + fd.abs().max(an.abs())),
                    "{} [{j}]: fd={fd} analytic={an}",
                    e.name
                );
                checked += 1;
            }
            offset += len;
        }
        assert!(checked > 100);
    }
}
