//! Minimal NCHW layers with hand-written backward passes.
//!
//! Convolutions run as im2col followed by a single-threaded sgemm, which keeps
//! every forward pass bit-reproducible on a given platform.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// All trainable parameters, stored as named flat arrays in one buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f32>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Vec<f32>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(len, init.len());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.into(), shape, offset: self.data.len(), len });
        self.data.extend(init);
        id
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_data(&self, entry: &ParamEntry) -> &[f32] {
        &self.data[entry.offset..entry.offset + entry.len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }
}

/// Gradient buffer laid out like a [`ParamStore`].
pub struct Grads {
    pub data: Vec<f32>,
    offsets: Vec<(usize, usize)>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: vec![0.0; store.data.len()],
            offsets: store.entries.iter().map(|e| (e.offset, e.len)).collect(),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        let (o, l) = self.offsets[id.0];
        &mut self.data[o..o + l]
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }
}

/// `C = A·B + beta·C` for row-major operands, optionally reading A or B transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

fn normal_init<R: Rng>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

thread_local! {
    /// Reused im2col scratch; every entry read is written first.
    static COLS: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = if zero_init {
            vec![0.0; cout * fan_in]
        } else {
            normal_init(rng, cout * fan_in, (1.0 / fan_in as f32).sqrt())
        };
        let weight = ps.add(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bias = ps.add(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout, k, stride, pad: k / 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (ho, wo) = self.out_hw(h, w);
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let hw = ho * wo;
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    // Output columns whose input column lies inside the image.
                    let off = kx as isize - p;
                    let lo = ((-off).max(0) as usize).div_ceil(self.stride).min(wo);
                    let hi = ((w as isize - off + s - 1) / s).clamp(0, wo as isize) as usize;
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if s == 1 {
                            let start = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[((ox + lo) as isize * s + off) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (ho, wo) = self.out_hw(h, w);
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let hw = ho * wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let [b, c, h, w] = dims4(x);
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.cin * self.k * self.k;
        let weight = ps.get(self.weight);
        let bias = ps.get(self.bias);
        let mut out = Vec::with_capacity(b * self.cout * ho * wo);
        for _ in 0..b {
            for &bv in bias {
                out.extend(std::iter::repeat_n(bv, ho * wo));
            }
        }
        COLS.with_borrow_mut(|cols| {
            if !self.is_pointwise() && cols.len() < kk * ho * wo {
                cols.resize(kk * ho * wo, 0.0);
            }
            for bi in 0..b {
                let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
                let ob = &mut out[bi * self.cout * ho * wo..(bi + 1) * self.cout * ho * wo];
                let src = if self.is_pointwise() {
                    xb
                } else {
                    self.im2col(xb, h, w, cols);
                    &cols[..kk * ho * wo]
                };
                gemm(self.cout, kk, ho * wo, weight, false, src, false, ob, 1.0);
            }
        });
        Tensor::new(vec![b, self.cout, ho, wo], out).expect("conv output shape")
    }

    pub fn backward(&self, ps: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Grads) -> Tensor {
        let [b, c, h, w] = dims4(x);
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.cin * self.k * self.k;
        let hw = ho * wo;
        let weight = ps.get(self.weight);
        let mut dx = vec![0.0f32; x.len()];
        let mut cols = vec![0.0f32; kk * hw];
        let mut dcols = vec![0.0f32; kk * hw];
        for bi in 0..b {
            let xb = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let dyb = &dy.data()[bi * self.cout * hw..(bi + 1) * self.cout * hw];
            {
                let db = g.get_mut(self.bias);
                for (co, plane) in dyb.chunks(hw).enumerate() {
                    db[co] += plane.iter().sum::<f32>();
                }
            }
            let src: &[f32] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, h, w, &mut cols);
                &cols
            };
            gemm(self.cout, hw, kk, dyb, false, src, true, g.get_mut(self.weight), 1.0);
            let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
            if self.is_pointwise() {
                gemm(kk, self.cout, hw, weight, true, dyb, false, dxb, 1.0);
            } else {
                gemm(kk, self.cout, hw, weight, true, dyb, false, &mut dcols, 0.0);
                self.col2im(&dcols, h, w, dxb);
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("conv grad shape")
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    channels: usize,
    groups: usize,
}

pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
}

const GN_EPS: f64 = 1e-5;

/// Sum of `f(x)` with eight f32 lanes (vectorisable) combined in f64.
fn lane_sum(xs: &[f32], f: impl Fn(f32) -> f32) -> f64 {
    let mut lanes = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let rest: f64 = chunks.remainder().iter().map(|&v| f(v) as f64).sum();
    for ch in chunks {
        for (l, &v) in lanes.iter_mut().zip(ch) {
            *l += f(v);
        }
    }
    lanes.iter().map(|&l| l as f64).sum::<f64>() + rest
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        let gamma = ps.add(format!("{name}.weight"), vec![channels], vec![1.0; channels]);
        let beta = ps.add(format!("{name}.bias"), vec![channels], vec![0.0; channels]);
        Self { gamma, beta, channels, groups }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, GroupNormCache) {
        let [b, c, h, w] = dims4(x);
        assert_eq!(c, self.channels, "group norm channels");
        let cg = c / self.groups;
        let span = cg * h * w;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let hw = h * w;
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        let mut inv_std = Vec::with_capacity(b * self.groups);
        for bi in 0..b {
            for gi in 0..self.groups {
                let start = (bi * c + gi * cg) * hw;
                let xs = &x.data()[start..start + span];
                let mean = lane_sum(xs, |v| v) / span as f64;
                let m32 = mean as f32;
                let var = lane_sum(xs, |v| (v - m32) * (v - m32)) / span as f64;
                let istd = (1.0 / (var + GN_EPS).sqrt()) as f32;
                inv_std.push(istd);
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (gm, bt) = (gamma[ch], beta[ch]);
                    let range = start + ci * hw..start + (ci + 1) * hw;
                    let src = &x.data()[range.clone()];
                    for ((xh, o), &v) in xhat[range.clone()].iter_mut().zip(&mut out[range]).zip(src) {
                        let n = (v - m32) * istd;
                        *xh = n;
                        *o = n * gm + bt;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        (
            Tensor::new(shape.clone(), out).expect("gn shape"),
            GroupNormCache { xhat, inv_std, shape },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &GroupNormCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Tensor {
        let (b, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let cg = c / self.groups;
        let span = cg * hw;
        let gamma = ps.get(self.gamma).to_vec();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = vec![0.0f32; dy.len()];
        let mut dxhat = vec![0.0f32; span];
        for bi in 0..b {
            for gi in 0..self.groups {
                let start = (bi * c + gi * cg) * hw;
                let dys = &dy.data()[start..start + span];
                let xh = &cache.xhat[start..start + span];
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for j in 0..span {
                    let ch = gi * cg + j / hw;
                    dgamma[ch] += dys[j] * xh[j];
                    dbeta[ch] += dys[j];
                    let d = dys[j] * gamma[ch];
                    dxhat[j] = d;
                    sum_d += d as f64;
                    sum_dx += (d * xh[j]) as f64;
                }
                let istd = cache.inv_std[bi * self.groups + gi] as f64;
                let n = span as f64;
                for j in 0..span {
                    let v = istd / n * (n * dxhat[j] as f64 - sum_d - xh[j] as f64 * sum_dx);
                    dx[start + j] = v as f32;
                }
            }
        }
        add_into(g.get_mut(self.gamma), &dgamma);
        add_into(g.get_mut(self.beta), &dbeta);
        Tensor::new(cache.shape.clone(), dx).expect("gn grad shape")
    }
}

/// Dense layer on row vectors: `y = x·Wᵀ + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero_init {
            vec![0.0; din * dout]
        } else {
            normal_init(rng, din * dout, (1.0 / din as f32).sqrt())
        };
        let weight = ps.add(format!("{name}.weight"), vec![dout, din], w);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), vec![dout], vec![0.0; dout]));
        Self { weight, bias, din, dout }
    }

    /// `x` is `[rows, din]` flattened; returns `[rows, dout]` flattened.
    pub fn forward(&self, ps: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; rows * self.dout];
        if let Some(b) = self.bias {
            let b = ps.get(b);
            for r in out.chunks_mut(self.dout) {
                r.copy_from_slice(b);
            }
        }
        gemm(rows, self.din, self.dout, x, false, ps.get(self.weight), true, &mut out, 1.0);
        out
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &[f32],
        dy: &[f32],
        rows: usize,
        g: &mut Grads,
    ) -> Vec<f32> {
        if let Some(b) = self.bias {
            let db = g.get_mut(b);
            for r in dy.chunks(self.dout) {
                add_into(db, r);
            }
        }
        gemm(self.dout, rows, self.din, dy, true, x, false, g.get_mut(self.weight), 1.0);
        let mut dx = vec![0.0f32; rows * self.din];
        gemm(rows, self.dout, self.din, dy, false, ps.get(self.weight), false, &mut dx, 0.0);
        dx
    }
}

pub fn sigmoid(x: f32) -> f32 {
    let e = exp_nonpositive(-x.abs());
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_slice(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward_slice(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), silu_backward_slice(x.data(), dy.data())).expect("silu shape")
}

/// `e^x` for `x <= 0`, accurate to about 2 ulp and branch-free so rows vectorise.
#[inline]
fn exp_nonpositive(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0);
    // Round to nearest via the 1.5 * 2^23 trick; `f32::round` is a libm call
    // on baseline x86-64.
    const SHIFT: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + SHIFT) - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// Row-wise softmax in place over rows of length `cols`.
///
/// The normaliser is accumulated in `f64` and applied as a single division per
/// entry, so every row sums to one within a few `f32` ulps regardless of length.
pub fn softmax_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.iter_mut().for_each(|v| *v = exp_nonpositive(*v - max));
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Gradient of a row-wise softmax given its output `a` and upstream `da`.
pub fn softmax_rows_backward(a: &[f32], da: &[f32], cols: usize) -> Vec<f32> {
    let mut ds = vec![0.0f32; a.len()];
    for ((ar, dr), sr) in a.chunks(cols).zip(da.chunks(cols)).zip(ds.chunks_mut(cols)) {
        let dot: f32 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
        for j in 0..cols {
            sr[j] = ar[j] * (dr[j] - dot);
        }
    }
    ds
}

pub fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.axpby(1.0, b, 1.0).expect("add shapes")
}

pub fn dims4(x: &Tensor) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Concatenate two `[B, C, H, W]` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = dims4(a);
    let [_, cb, _, _] = dims4(b);
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for bi in 0..n {
        out.extend_from_slice(&a.data()[bi * ca * h * w..(bi + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[bi * cb * h * w..(bi + 1) * cb * h * w]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out).expect("concat shape")
}

pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = dims4(x);
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for bi in 0..n {
        let base = bi * c * h * w;
        a.extend_from_slice(&x.data()[base..base + ca * h * w]);
        b.extend_from_slice(&x.data()[base + ca * h * w..base + c * h * w]);
    }
    (
        Tensor::new(vec![n, ca, h, w], a).expect("split shape"),
        Tensor::new(vec![n, cb, h, w], b).expect("split shape"),
    )
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let mut out = vec![0.0f32; n * c * h * w * 4];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out).expect("upsample shape")
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = dims4(dy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0f32; n * c * h * w];
    for (p, plane) in dy.data().chunks(h2 * w2).enumerate() {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += plane[y * w2 + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx).expect("upsample grad shape")
}

/// Space-to-depth with factor `r`: `[B, C, H, W] -> [B, C·r·r, H/r, W/r]`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = (ci * r + dy) * r + dx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[((bi * c * r * r + oc) * ho + oy) * wo + ox] =
                                x.data()[((bi * c + ci) * h + oy * r + dy) * w + ox * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c * r * r, ho, wo], out).expect("unshuffle shape")
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let [n, crr, ho, wo] = dims4(x);
    let c = crr / (r * r);
    let (h, w) = (ho * r, wo * r);
    let mut out = vec![0.0f32; x.len()];
    for bi in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = (ci * r + dy) * r + dx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[((bi * c + ci) * h + oy * r + dy) * w + ox * r + dx] =
                                x.data()[((bi * crr + oc) * ho + oy) * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("shuffle shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar loss `sum(y * r)` for a fixed random `r`, so `dy = r`.
    fn check_grad(
        x: &Tensor,
        forward: &dyn Fn(&Tensor) -> Tensor,
        backward: &dyn Fn(&Tensor, &Tensor) -> Tensor,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = forward(x);
        let r = Tensor::<f32>::randn(y.shape().to_vec(), &mut rng);
        let dx = backward(x, &r);
        let loss = |x: &Tensor| -> f64 {
            forward(x).data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for i in (0..x.len()).step_by((x.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = dx.data()[i] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + fd.abs()), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut ps = ParamStore::default();
            let conv = Conv2d::new(&mut ps, "c", 3, 4, k, stride, false, &mut rng);
            let x = Tensor::<f32>::randn(vec![2, 3, 6, 6], &mut rng);
            check_grad(
                &x,
                &|x| conv.forward(&ps, x),
                &|x, dy| {
                    let mut g = Grads::zeros_like(&ps);
                    conv.backward(&ps, x, dy, &mut g)
                },
                k as u64 * 10 + stride as u64,
            );
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::default();
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1, false, &mut rng);
        let x = Tensor::<f32>::randn(vec![1, 2, 5, 5], &mut rng);
        let y = conv.forward(&ps, &x);
        let w = ps.get(conv.weight);
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut acc = 0.0f64;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] as f64
                                        * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize] as f64;
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 5 + oy) * 5 + ox] as f64;
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::default();
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2);
        ps.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f32);
        let x = Tensor::<f32>::randn(vec![2, 4, 3, 3], &mut rng);
        check_grad(
            &x,
            &|x| gn.forward(&ps, x).0,
            &|x, dy| {
                let mut g = Grads::zeros_like(&ps);
                let (_, cache) = gn.forward(&ps, x);
                gn.backward(&ps, &cache, dy, &mut g)
            },
            3,
        );
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -(i as f32) * 87.0 / 200_000.0;
            let exact = (x as f64).exp();
            worst = worst.max(((exp_nonpositive(x) as f64) - exact).abs() / exact);
        }
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-1e4), exp_nonpositive(-87.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(vec![1, 1, 3, 5], &mut rng);
        let fwd = |x: &Tensor| {
            let mut d = x.data().to_vec();
            softmax_rows(&mut d, 5);
            Tensor::new(x.shape().to_vec(), d).unwrap()
        };
        for row in fwd(&x).data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        check_grad(
            &x,
            &fwd,
            &|x, dy| {
                let a = fwd(x);
                Tensor::new(x.shape().to_vec(), softmax_rows_backward(a.data(), dy.data(), 5))
                    .unwrap()
            },
            5,
        );
    }

    #[test]
    fn shuffle_round_trips_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::randn(vec![2, 3, 4, 4], &mut rng);
        assert_eq!(pixel_shuffle(&pixel_unshuffle(&x, 2), 2), x);
        check_grad(&x, &upsample2, &|_, dy| upsample2_backward(dy), 7);
        let y = Tensor::<f32>::randn(vec![2, 2, 4, 4], &mut rng);
        let (a, b) = split_channels(&concat_channels(&x, &y), 3);
        assert_eq!((a, b), (x, y));
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::default();
        let lin = Linear::new(&mut ps, "l", 5, 3, true, false, &mut rng);
        let x = Tensor::<f32>::randn(vec![4, 5], &mut rng);
        check_grad(
            &x,
            &|x| Tensor::new(vec![4, 3], lin.forward(&ps, x.data(), 4)).unwrap(),
            &|x, dy| {
                let mut g = Grads::zeros_like(&ps);
                Tensor::new(vec![4, 5], lin.backward(&ps, x.data(), dy.data(), 4, &mut g)).unwrap()
            },
            9,
        );
    }
}
