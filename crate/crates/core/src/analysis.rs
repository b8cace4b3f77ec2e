//! Cross-image PCA of recorded activations and the seed-versus-prompt
//! variance study.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::backbone::{DenoiserBackbone, HookContext, HookKind, HookSiteId, Stage};
use crate::diffmath::{ddim_step, make_plan, TimestepPlan};
use crate::error::{Error, Result};
use crate::pipeline::{invert_latent, GuidanceSource};
use crate::tensor::Tensor;

/// Activations flattened to one row per spatial location per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub site: HookSiteId,
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub data: Vec<f64>,
    /// `(image, y, x)` of every row.
    pub index: Vec<(usize, usize, usize)>,
    /// Spatial grid of one image.
    pub spatial: (usize, usize),
}

impl FeatureMatrix {
    pub fn from_rows(site: HookSiteId, t: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("feature rows must be non-empty and of equal length"));
        }
        let n = rows.len();
        Ok(Self {
            site,
            t,
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
            index: (0..n).map(|i| (0, i, 0)).collect(),
            spatial: (n, 1),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn push_image(&mut self, image: usize, value: &Tensor) -> Result<()> {
        let (rows, cols, spatial) = site_rows(self.site.kind, value)?;
        if self.cols != 0 && cols != self.cols {
            return Err(Error::ShapeMismatch { expected: vec![self.cols], got: vec![cols] });
        }
        self.cols = cols;
        self.spatial = spatial;
        self.data.extend(rows);
        for p in 0..spatial.0 * spatial.1 {
            self.index.push((image, p / spatial.1, p % spatial.1));
        }
        self.rows = self.index.len();
        Ok(())
    }
}

/// Flatten one recorded value into rows. Features `[C, H, W]` give `H·W × C`;
/// attention `[heads, N, N]` gives `N × N` averaged over heads; queries and
/// keys `[heads, N, d]` give `N × heads·d`.
fn site_rows(kind: HookKind, v: &Tensor) -> Result<(Vec<f64>, usize, (usize, usize))> {
    let s = v.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected a rank-3 site value, got shape {s:?}")));
    }
    let d = v.data();
    let side = |n: usize| {
        let r = (n as f64).sqrt().round() as usize;
        if r * r == n {
            Ok((r, r))
        } else {
            Err(Error::invalid(format!("{n} tokens do not form a square grid")))
        }
    };
    match kind {
        HookKind::ResblockFeatures => {
            let (c, hw) = (s[0], s[1] * s[2]);
            let mut out = vec![0.0; hw * c];
            for ch in 0..c {
                for p in 0..hw {
                    out[p * c + ch] = d[ch * hw + p] as f64;
                }
            }
            Ok((out, c, (s[1], s[2])))
        }
        HookKind::AttentionMatrix => {
            let (heads, n) = (s[0], s[1]);
            let mut out = vec![0.0; n * n];
            for h in 0..heads {
                for (o, &x) in out.iter_mut().zip(&d[h * n * n..(h + 1) * n * n]) {
                    *o += x as f64 / heads as f64;
                }
            }
            Ok((out, n, side(n)?))
        }
        HookKind::AttentionQueries | HookKind::AttentionKeys => {
            let (heads, n, hd) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; n * heads * hd];
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..hd {
                        out[i * heads * hd + h * hd + j] = d[(h * n + i) * hd + j] as f64;
                    }
                }
            }
            Ok((out, heads * hd, side(n)?))
        }
    }
}

/// Denoising settings shared by the collection routines.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub n_steps: usize,
    /// Inversion steps for real images.
    pub n_inv_steps: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { n_steps: 50, n_inv_steps: 50 }
    }
}

/// Sampling timestep closest to half-way through an `n_steps` run.
pub fn mid_timestep(backbone: &dyn DenoiserBackbone, n_steps: usize) -> Result<usize> {
    let plan = make_plan(backbone.schedule(), n_steps)?;
    Ok(plan.sampling_timesteps()[plan.count() / 2])
}

/// Denoise from the start of `source` until timestep `t` and return the
/// values recorded at `sites` there.
fn record_at(
    source: &GuidanceSource,
    sites: &[HookSiteId],
    t: usize,
    backbone: &dyn DenoiserBackbone,
    plan: &TimestepPlan,
    cfg: &CollectConfig,
) -> Result<Vec<Tensor>> {
    let (mut x, prompt) = match source {
        GuidanceSource::Image(img) => (invert_latent(img, backbone, cfg.n_inv_steps)?, String::new()),
        GuidanceSource::Generated { prompt, seed } => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            (Tensor::randn(backbone.latent_shape(), &mut rng), prompt.clone())
        }
    };
    let emb = backbone.encode_prompt(&prompt)?;
    for (ti, t_prev) in plan.transitions() {
        if ti == t {
            let mut hooks = HookContext::recording(sites.iter().copied());
            backbone.denoise(&x, ti, &emb, &mut hooks)?;
            let mut rec = hooks.take_recorded();
            return sites
                .iter()
                .map(|s| rec.remove(s).ok_or_else(|| Error::UnknownHookSite(s.to_string())))
                .collect();
        }
        let eps = backbone.denoise(&x, ti, &emb, &mut HookContext::new())?;
        x = ddim_step(&x, &eps, ti, t_prev, backbone.schedule())?;
    }
    Err(Error::invalid(format!("timestep {t} is not on the {}-step plan", plan.count())))
}

/// Record `site` at timestep `t` for every image and stack the rows.
///
/// Real images are inverted with the empty prompt first; generated ones start
/// from their seeded noise. `t` must lie on the `cfg.n_steps` plan.
pub fn collect(
    images: &[GuidanceSource],
    site: HookSiteId,
    t: usize,
    backbone: &dyn DenoiserBackbone,
    cfg: &CollectConfig,
) -> Result<FeatureMatrix> {
    if backbone.site_shape(&site).is_none() {
        return Err(Error::UnknownHookSite(site.to_string()));
    }
    let plan = make_plan(backbone.schedule(), cfg.n_steps)?;
    if plan.step_of(t).is_none() {
        return Err(Error::invalid(format!("timestep {t} is not on the {}-step plan", plan.count())));
    }
    let values = images
        .par_iter()
        .map(|src| record_at(src, &[site], t, backbone, &plan, cfg).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let mut m = FeatureMatrix {
        site,
        t,
        rows: 0,
        cols: 0,
        data: Vec::new(),
        index: Vec::new(),
        spatial: (0, 0),
    };
    for (i, v) in values.iter().enumerate() {
        m.push_image(i, v)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// `k` orthonormal unit vectors, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the covariance for the kept components.
    pub variances: Vec<f64>,
    /// Share of the total variance per kept component.
    pub explained: Vec<f64>,
    /// `rows × k` projections of the centred rows.
    pub projections: Vec<Vec<f64>>,
    pub index: Vec<(usize, usize, usize)>,
}

/// Mean-centred PCA through the eigendecomposition of the population
/// covariance. Each component's largest-magnitude entry is made positive.
pub fn pca(m: &FeatureMatrix, k: usize) -> Result<PcaResult> {
    if k == 0 || k > m.rows.min(m.cols) {
        return Err(Error::invalid(format!(
            "k must be in 1..={} for a {}×{} matrix, got {k}",
            m.rows.min(m.cols),
            m.rows,
            m.cols
        )));
    }
    let (n, c) = (m.rows, m.cols);
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (mu, x) in mean.iter_mut().zip(m.row(r)) {
            *mu += x / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, c, |r, j| m.data[r * c + j] - mean[j]);
    let cov = centred.tr_mul(&centred) / n as f64;
    let total: f64 = cov.trace();
    let scale = m.data.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    if !(total > 1e-20 * scale * scale * c as f64) {
        return Err(Error::Degenerate("all rows are (numerically) equal".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / norm);
        components.push(v);
        variances.push(eig.eigenvalues[j].max(0.0));
    }
    let explained = variances.iter().map(|v| (v / total).clamp(0.0, 1.0)).collect();
    let projections = (0..n)
        .map(|r| {
            components
                .iter()
                .map(|comp| comp.iter().enumerate().map(|(j, w)| w * centred[(r, j)]).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult { mean, components, variances, explained, projections, index: m.index.clone() })
}

/// Colour image `[3, h, w]` in `[-1, 1]` from the first three projections of
/// `image`'s rows. Each component is min-max scaled over the whole collection,
/// so colours are comparable across images; a constant component maps to
/// mid-grey.
pub fn render_rgb(p: &PcaResult, image: usize, spatial: (usize, usize)) -> Result<Tensor<f64>> {
    if p.components.len() < 3 {
        return Err(Error::invalid("rendering needs at least three components"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for row in &p.projections {
        for ch in 0..3 {
            lo[ch] = lo[ch].min(row[ch]);
            hi[ch] = hi[ch].max(row[ch]);
        }
    }
    let (h, w) = spatial;
    let mut out = Tensor::<f64>::zeros(vec![3, h, w]);
    let mut seen = 0;
    for (row, &(img, y, x)) in p.projections.iter().zip(&p.index) {
        if img != image {
            continue;
        }
        if y >= h || x >= w {
            return Err(Error::invalid(format!("row at ({y}, {x}) is outside a {h}×{w} grid")));
        }
        seen += 1;
        for ch in 0..3 {
            let span = hi[ch] - lo[ch];
            let u = if span > 1e-12 * (hi[ch].abs() + lo[ch].abs()).max(1e-300) {
                (row[ch] - lo[ch]) / span
            } else {
                0.5
            };
            out.data_mut()[(ch * h + y) * w + x] = 2.0 * u - 1.0;
        }
    }
    if seen != h * w {
        return Err(Error::invalid(format!("image {image} has {seen} rows, expected {}", h * w)));
    }
    Ok(out)
}

/// PCA of one image's self-attention rows at each decoder `layer`, rendered
/// with the three leading components.
pub fn attention_pca(
    image: &GuidanceSource,
    layers: &[usize],
    t: usize,
    backbone: &dyn DenoiserBackbone,
    cfg: &CollectConfig,
) -> Result<Vec<(usize, Tensor<f64>)>> {
    let sites: Vec<HookSiteId> = layers.iter().map(|&l| HookSiteId::decoder_attention(l)).collect();
    if let Some(s) = sites.iter().find(|s| backbone.site_shape(s).is_none()) {
        return Err(Error::UnknownHookSite(s.to_string()));
    }
    let plan = make_plan(backbone.schedule(), cfg.n_steps)?;
    let values = record_at(image, &sites, t, backbone, &plan, cfg)?;
    layers
        .iter()
        .zip(sites.iter().zip(values))
        .map(|(&l, (&site, v))| {
            let mut m = FeatureMatrix {
                site,
                t,
                rows: 0,
                cols: 0,
                data: Vec::new(),
                index: Vec::new(),
                spatial: (0, 0),
            };
            m.push_image(0, &v)?;
            let p = pca(&m, 3)?;
            Ok((l, render_rgb(&p, 0, m.spatial)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerVariance {
    pub layer: usize,
    /// Mean over prompts of the variance across seeds.
    pub same_prompt: f64,
    /// Mean over seeds of the variance across prompts.
    pub same_seed: f64,
    /// Variance over every run.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub t: usize,
    pub runs: usize,
    /// Same-prompt sets plus same-seed sets.
    pub sets: usize,
    pub set_size_seeds: usize,
    pub set_size_prompts: usize,
    pub layers: Vec<LayerVariance>,
}

impl VarianceReport {
    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tsame_prompt_variance\tsame_seed_variance\ttotal_variance\n");
        for l in &self.layers {
            let _ = writeln!(s, "{}\t{:.6e}\t{:.6e}\t{:.6e}", l.layer, l.same_prompt, l.same_seed, l.total);
        }
        s
    }
}

/// Population variance per element across `runs`, averaged over elements.
fn mean_variance(runs: &[&[f32]]) -> f64 {
    let m = runs.len() as f64;
    let len = runs[0].len();
    let mut acc = 0.0;
    for e in 0..len {
        let mu = runs.iter().map(|r| r[e] as f64).sum::<f64>() / m;
        acc += runs.iter().map(|r| (r[e] as f64 - mu).powi(2)).sum::<f64>() / m;
    }
    acc / len as f64
}

/// Encoder features at the noisiest timestep for every (seed, prompt) pair,
/// compared within same-prompt and same-seed sets.
pub fn variance_study(
    seeds: &[u64],
    prompts: &[String],
    backbone: &dyn DenoiserBackbone,
) -> Result<VarianceReport> {
    if seeds.len() < 2 || prompts.len() < 2 {
        return Err(Error::invalid("the variance study needs at least two seeds and two prompts"));
    }
    let t = backbone.schedule().num_train_steps();
    let sites: Vec<HookSiteId> = backbone
        .hook_sites()
        .into_iter()
        .filter(|s| s.stage == Stage::Encoder && s.kind == HookKind::ResblockFeatures)
        .collect();
    let embs = prompts.iter().map(|p| backbone.encode_prompt(p)).collect::<Result<Vec<_>>>()?;
    let grid: Vec<(usize, usize)> =
        (0..seeds.len()).flat_map(|s| (0..prompts.len()).map(move |p| (s, p))).collect();
    // runs[s * n_p + p][site]
    let runs = grid
        .par_iter()
        .map(|&(s, p)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeds[s]);
            let x = Tensor::randn(backbone.latent_shape(), &mut rng);
            let mut hooks = HookContext::recording(sites.iter().copied());
            backbone.denoise(&x, t, &embs[p], &mut hooks)?;
            let mut rec = hooks.take_recorded();
            Ok(sites.iter().map(|s| rec.remove(s).expect("recorded site")).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    let (n_s, n_p) = (seeds.len(), prompts.len());
    let layers = sites
        .iter()
        .enumerate()
        .map(|(k, site)| {
            let at = |s: usize, p: usize| runs[s * n_p + p][k].data();
            let same_prompt = (0..n_p)
                .map(|p| mean_variance(&(0..n_s).map(|s| at(s, p)).collect::<Vec<_>>()))
                .sum::<f64>()
                / n_p as f64;
            let same_seed = (0..n_s)
                .map(|s| mean_variance(&(0..n_p).map(|p| at(s, p)).collect::<Vec<_>>()))
                .sum::<f64>()
                / n_s as f64;
            let all: Vec<&[f32]> = runs.iter().map(|r| r[k].data()).collect();
            LayerVariance { layer: site.layer_index, same_prompt, same_seed, total: mean_variance(&all) }
        })
        .collect();
    Ok(VarianceReport {
        t,
        runs: n_s * n_p,
        sets: n_s + n_p,
        set_size_seeds: n_s,
        set_size_prompts: n_p,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> HookSiteId {
        HookSiteId::decoder_features(4)
    }

    #[test]
    fn feature_rows_are_channels_per_location() {
        let v = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        let (rows, cols, sp) = site_rows(HookKind::ResblockFeatures, &v).unwrap();
        assert_eq!((cols, sp), (2, (1, 3)));
        assert_eq!(rows, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    }

    #[test]
    fn attention_rows_average_heads() {
        let v = Tensor::new(vec![2, 4, 4], (0..32).map(|i| i as f32).collect()).unwrap();
        let (rows, cols, sp) = site_rows(HookKind::AttentionMatrix, &v).unwrap();
        assert_eq!((cols, sp), (4, (2, 2)));
        assert_eq!(rows[0], 8.0);
    }

    #[test]
    fn rank_one_data_is_fully_explained() {
        let rows = (0..7).map(|i| {
            let s = i as f64 - 2.5;
            vec![1.0 + 2.0 * s, -3.0 + 0.5 * s, 0.25 - s]
        });
        let m = FeatureMatrix::from_rows(site(), 0, rows.collect()).unwrap();
        let p = pca(&m, 2).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-6);
        assert!(p.explained[1] < 1e-6);
    }

    #[test]
    fn sign_convention_and_errors() {
        let m = FeatureMatrix::from_rows(site(), 0, vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![0.1, 0.0]]).unwrap();
        let p = pca(&m, 2).unwrap();
        for c in &p.components {
            let pivot = c.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(pivot > 0.0);
        }
        assert!(pca(&m, 3).is_err());
        assert!(pca(&m, 0).is_err());
        let flat = FeatureMatrix::from_rows(site(), 0, vec![vec![2.0, 1.0]; 4]).unwrap();
        assert!(matches!(pca(&flat, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn constant_projections_render_grey() {
        let p = PcaResult {
            mean: vec![0.0; 3],
            components: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            variances: vec![0.0; 3],
            explained: vec![0.0; 3],
            projections: vec![vec![0.7, -0.2, 3.0]; 4],
            index: (0..4).map(|i| (0, i / 2, i % 2)).collect(),
        };
        let img = render_rgb(&p, 0, (2, 2)).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(render_rgb(&p, 1, (2, 2)).is_err());
    }
}
