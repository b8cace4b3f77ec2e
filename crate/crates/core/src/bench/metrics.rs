//! Metric providers: toy stand-ins plus declared adapters for external
//! networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::prompt::{prompt_color, COLORS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

/// Which report column a metric fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricRole {
    Structure,
    TextFidelity,
    Deviation,
}

impl MetricRole {
    pub fn header(&self) -> &'static str {
        match self {
            MetricRole::Structure => "structure ↓",
            MetricRole::TextFidelity => "text-fidelity ↑",
            MetricRole::Deviation => "deviation ↑",
        }
    }
}

/// Scores an output image against its guidance image and target prompt.
pub trait MetricProvider: Send + Sync {
    fn id(&self) -> &str;
    fn role(&self) -> MetricRole;
    fn direction(&self) -> Direction;

    fn available(&self) -> bool {
        true
    }

    /// Images are `[3, H, W]` in `[-1, 1]`.
    fn score(&self, guidance: &Tensor<f64>, output: &Tensor<f64>, prompt: &str) -> Result<f64>;
}

/// A fixed random patch embedding: `tanh(W · patch + b)` on non-overlapping
/// `patch × patch` tiles.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    patch: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PatchFeatures {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Self {
        let fan_in = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
        };
        let weights = draw(dim * fan_in, scale);
        let bias = draw(dim, 0.1);
        Self { patch, dim, weights, bias }
    }

    /// `tokens × dim` features, tokens in raster order.
    pub fn extract(&self, image: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % self.patch != 0 || s[2] % self.patch != 0 {
            return Err(Error::invalid(format!(
                "expected [3, H, W] with sides divisible by {}, got {s:?}",
                self.patch
            )));
        }
        let (h, w, p) = (s[1], s[2], self.patch);
        let d = image.data();
        let mut tokens = Vec::with_capacity((h / p) * (w / p));
        let mut v = Vec::with_capacity(3 * p * p);
        for ty in 0..h / p {
            for tx in 0..w / p {
                v.clear();
                for c in 0..3 {
                    for y in 0..p {
                        let row = (c * h + ty * p + y) * w + tx * p;
                        v.extend_from_slice(&d[row..row + p]);
                    }
                }
                let f = (0..self.dim)
                    .map(|o| {
                        let wrow = &self.weights[o * v.len()..(o + 1) * v.len()];
                        (self.bias[o] + wrow.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).tanh()
                    })
                    .collect();
                tokens.push(f);
            }
        }
        Ok(tokens)
    }

    /// Cosine self-similarity of token features centred over the image.
    pub fn self_similarity(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        let mut f = self.extract(image)?;
        let n = f.len();
        let mut mean = vec![0.0; self.dim];
        for t in &f {
            for (m, x) in mean.iter_mut().zip(t) {
                *m += x / n as f64;
            }
        }
        for t in &mut f {
            for (x, m) in t.iter_mut().zip(&mean) {
                *x -= m;
            }
            let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                t.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let c: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum();
                s[i * n + j] = c;
                s[j * n + i] = c;
            }
        }
        Ok(s)
    }
}

/// Mean squared difference between the self-similarity matrices of the
/// guidance and the output.
#[derive(Debug, Clone)]
pub struct ToyStructure {
    features: PatchFeatures,
}

impl ToyStructure {
    pub const ID: &'static str = "toy-structure";
}

impl Default for ToyStructure {
    fn default() -> Self {
        Self { features: PatchFeatures::new(4, 64, 0x5e1f_5131) }
    }
}

impl MetricProvider for ToyStructure {
    fn id(&self) -> &str {
        Self::ID
    }
    fn role(&self) -> MetricRole {
        MetricRole::Structure
    }
    fn direction(&self) -> Direction {
        Direction::LowerIsBetter
    }
    fn score(&self, guidance: &Tensor<f64>, output: &Tensor<f64>, _prompt: &str) -> Result<f64> {
        guidance.ensure_same_shape(output)?;
        let a = self.features.self_similarity(guidance)?;
        let b = self.features.self_similarity(output)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
    }
}

/// Probability that the output's foreground colour is the prompt's colour
/// word, under a softmax over the toy palette.
///
/// The background colour is the median of the border pixels; foreground
/// pixels are those far from it.
#[derive(Debug, Clone)]
pub struct ToyText {
    /// Softmax temperature on squared RGB distance in `[0, 1]` units.
    pub temperature: f64,
}

impl ToyText {
    pub const ID: &'static str = "toy-text";
}

impl Default for ToyText {
    fn default() -> Self {
        Self { temperature: 0.02 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Mean colour in `[0, 1]` of the pixels that stand out from the border.
pub fn foreground_color(image: &Tensor<f64>) -> Result<[f64; 3]> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let px = |c: usize, y: usize, x: usize| (image.data()[(c * h + y) * w + x] + 1.0) / 2.0;
    let border: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| y == 0 || x == 0 || y == h - 1 || x == w - 1)
        .collect();
    let bg = [0, 1, 2].map(|c| median(border.iter().map(|&(y, x)| px(c, y, x)).collect()));
    let dist = |y: usize, x: usize| (0..3).map(|c| (px(c, y, x) - bg[c]).powi(2)).sum::<f64>();
    let all: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    let far = all.iter().map(|&(y, x)| dist(y, x)).fold(0.0f64, f64::max);
    let fg: Vec<_> = all.iter().filter(|&&(y, x)| dist(y, x) >= 0.25 * far && far > 1e-6).collect();
    if fg.is_empty() {
        return Ok(bg);
    }
    Ok([0, 1, 2].map(|c| fg.iter().map(|&&(y, x)| px(c, y, x)).sum::<f64>() / fg.len() as f64))
}

impl MetricProvider for ToyText {
    fn id(&self) -> &str {
        Self::ID
    }
    fn role(&self) -> MetricRole {
        MetricRole::TextFidelity
    }
    fn direction(&self) -> Direction {
        Direction::HigherIsBetter
    }
    fn score(&self, _guidance: &Tensor<f64>, output: &Tensor<f64>, prompt: &str) -> Result<f64> {
        let want = prompt_color(prompt)
            .ok_or_else(|| Error::invalid(format!("prompt {prompt:?} names no toy colour")))?;
        let fg = foreground_color(output)?;
        let logits: Vec<(&str, f64)> = COLORS
            .iter()
            .map(|(name, rgb)| {
                let d: f64 = (0..3).map(|c| (fg[c] - rgb[c] as f64).powi(2)).sum();
                (*name, -d / self.temperature)
            })
            .collect();
        let top = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l.1 - top).exp()).sum();
        let mine = logits.iter().find(|l| l.0 == want).map(|l| l.1).unwrap_or(f64::NEG_INFINITY);
        Ok((mine - top).exp() / z)
    }
}

/// Mean per-patch feature distance between guidance and output; a pixel-space
/// stand-in for a learned perceptual distance.
#[derive(Debug, Clone)]
pub struct ToyLpips {
    features: PatchFeatures,
}

impl ToyLpips {
    pub const ID: &'static str = "toy-lpips";
}

impl Default for ToyLpips {
    fn default() -> Self {
        Self { features: PatchFeatures::new(4, 64, 0x1b1b_5eed) }
    }
}

impl MetricProvider for ToyLpips {
    fn id(&self) -> &str {
        Self::ID
    }
    fn role(&self) -> MetricRole {
        MetricRole::Deviation
    }
    fn direction(&self) -> Direction {
        Direction::HigherIsBetter
    }
    fn score(&self, guidance: &Tensor<f64>, output: &Tensor<f64>, _prompt: &str) -> Result<f64> {
        guidance.ensure_same_shape(output)?;
        let a = self.features.extract(guidance)?;
        let b = self.features.extract(output)?;
        let total: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
            .sum();
        Ok(total / a.len() as f64)
    }
}

/// Interface slot for a pretrained network (CLIP, DINO self-similarity,
/// LPIPS). No backend ships; the provider reports itself unavailable.
#[derive(Debug, Clone)]
pub struct ExternalMetric {
    id: String,
    role: MetricRole,
    direction: Direction,
}

impl ExternalMetric {
    pub fn clip() -> Self {
        Self { id: "clip".into(), role: MetricRole::TextFidelity, direction: Direction::HigherIsBetter }
    }

    pub fn dino_self_similarity() -> Self {
        Self { id: "dino-selfsim".into(), role: MetricRole::Structure, direction: Direction::LowerIsBetter }
    }

    pub fn lpips() -> Self {
        Self { id: "lpips".into(), role: MetricRole::Deviation, direction: Direction::HigherIsBetter }
    }
}

impl MetricProvider for ExternalMetric {
    fn id(&self) -> &str {
        &self.id
    }
    fn role(&self) -> MetricRole {
        self.role
    }
    fn direction(&self) -> Direction {
        self.direction
    }
    fn available(&self) -> bool {
        false
    }
    fn score(&self, _: &Tensor<f64>, _: &Tensor<f64>, _: &str) -> Result<f64> {
        Err(Error::Unavailable(self.id.clone()))
    }
}

/// Provider by id: `toy-structure`, `toy-text`, `toy-lpips`, `clip`,
/// `dino-selfsim`, `lpips`.
pub fn provider(id: &str) -> Result<Box<dyn MetricProvider>> {
    Ok(match id {
        ToyStructure::ID => Box::new(ToyStructure::default()),
        ToyText::ID => Box::new(ToyText::default()),
        ToyLpips::ID => Box::new(ToyLpips::default()),
        "clip" => Box::new(ExternalMetric::clip()),
        "dino-selfsim" => Box::new(ExternalMetric::dino_self_similarity()),
        "lpips" => Box::new(ExternalMetric::lpips()),
        _ => return Err(Error::invalid(format!("unknown metric provider {id:?}"))),
    })
}

/// The three toy providers, one per report column.
pub fn toy_providers() -> Vec<Box<dyn MetricProvider>> {
    vec![
        Box::new(ToyStructure::default()),
        Box::new(ToyText::default()),
        Box::new(ToyLpips::default()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::ShapeSpec;

    fn shape(color: &str, shape: &str, cx: f64) -> Tensor<f64> {
        ShapeSpec {
            color: color.into(),
            shape: shape.into(),
            cx,
            cy: 32.0,
            radius: 14.0,
            background: [0.15, 0.15, 0.15],
        }
        .render(64)
        .unwrap()
    }

    #[test]
    fn distances_vanish_on_identical_images() {
        let x = shape("red", "circle", 30.0);
        assert_eq!(ToyStructure::default().score(&x, &x, "a red circle").unwrap(), 0.0);
        assert_eq!(ToyLpips::default().score(&x, &x, "a red circle").unwrap(), 0.0);
    }

    #[test]
    fn structure_prefers_recolouring_over_moving() {
        let m = ToyStructure::default();
        let g = shape("red", "circle", 30.0);
        let recolour = m.score(&g, &shape("blue", "circle", 30.0), "").unwrap();
        let moved = m.score(&g, &shape("red", "square", 40.0), "").unwrap();
        assert!(recolour < moved, "{recolour} vs {moved}");
    }

    #[test]
    fn text_reads_foreground_colour() {
        let m = ToyText::default();
        let x = shape("green", "diamond", 30.0);
        assert!(m.score(&x, &x, "a green diamond").unwrap() > 0.9);
        assert!(m.score(&x, &x, "a red diamond").unwrap() < 0.1);
        assert!(m.score(&x, &x, "a diamond").is_err());
    }

    #[test]
    fn registry() {
        for id in ["toy-structure", "toy-text", "toy-lpips", "clip", "dino-selfsim", "lpips"] {
            assert_eq!(provider(id).unwrap().id(), id);
        }
        assert!(!provider("clip").unwrap().available());
        assert!(provider("fid").is_err());
    }
}
