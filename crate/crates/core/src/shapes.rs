//! Procedural coloured-primitive images with template captions.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::prompt::{caption, color_rgb, COLORS, SHAPES};
use crate::error::{Error, Result};
use crate::imageio::{load_png, save_png};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
pub const CAPTIONS_FILE: &str = "captions.tsv";

/// One primitive on a flat background. Geometry is in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub color: String,
    pub shape: String,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub background: [f64; 3],
}

impl ShapeSpec {
    /// Random spec scaled to a `size`×`size` canvas.
    pub fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let (color, _) = COLORS[rng.random_range(0..COLORS.len())];
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let radius = rng.random_range(0.16..0.3) * s;
        let cx = rng.random_range(radius + 1.0..s - radius - 1.0);
        let cy = rng.random_range(radius + 1.0..s - radius - 1.0);
        let base = rng.random_range(0.05..0.3);
        let background = [0, 1, 2].map(|_| (base + rng.random_range(-0.04..0.04f64)).clamp(0.0, 1.0));
        Self { color: color.to_string(), shape: shape.to_string(), cx, cy, radius, background }
    }

    pub fn caption(&self) -> String {
        caption(&self.color, &self.shape)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match self.shape.as_str() {
            "circle" => dx * dx + dy * dy <= r * r,
            "ring" => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            "diamond" => dx.abs() + dy.abs() <= r,
            "triangle" => {
                // Upward equilateral triangle inscribed in the circle of radius r.
                let top = -r;
                let bottom = 0.5 * r;
                if dy < top || dy > bottom {
                    return false;
                }
                let half_width = (dy - top) / (bottom - top) * r * 3f64.sqrt() / 2.0;
                dx.abs() <= half_width
            }
            _ => false,
        }
    }

    /// Fraction of each pixel covered by the primitive.
    pub fn coverage(&self, size: usize) -> Vec<f64> {
        let mut cov = vec![0.0; size * size];
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += self.contains(px, py) as usize;
                    }
                }
                cov[y * size + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        cov
    }

    /// Render to a `[3, size, size]` image in `[-1, 1]`.
    pub fn render(&self, size: usize) -> Result<Tensor<f64>> {
        let fg = color_rgb(&self.color).ok_or_else(|| Error::UnknownWord(self.color.clone()))?;
        if !SHAPES.contains(&self.shape.as_str()) {
            return Err(Error::UnknownWord(self.shape.clone()));
        }
        let cov = self.coverage(size);
        let n = size * size;
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for (i, &a) in cov.iter().enumerate() {
                let v = a * fg[c] as f64 + (1.0 - a) * self.background[c];
                data[c * n + i] = 2.0 * v - 1.0;
            }
        }
        Tensor::new(vec![3, size, size], data)
    }
}

/// Images with captions, stored as f32 `[3, R, R]` tensors in `[-1, 1]`.
#[derive(Debug, Clone, Default)]
pub struct ToyDataset {
    pub images: Vec<Tensor>,
    pub captions: Vec<String>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Tensor, caption: String) {
        self.images.push(image);
        self.captions.push(caption);
    }

    /// `count` random primitives, deterministic in `seed`.
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Self::default();
        for _ in 0..count {
            let spec = ShapeSpec::random(&mut rng, size);
            ds.push(spec.render(size)?.to_f32(), spec.caption());
        }
        Ok(ds)
    }

    /// Write `NNNNN.png` files plus a `captions.tsv` index.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (i, (img, cap)) in self.images.iter().zip(&self.captions).enumerate() {
            let name = format!("{i:05}.png");
            save_png(&dir.join(&name), &img.to_f64())?;
            index.push_str(&format!("{name}\t{cap}\n"));
        }
        let path = dir.join(CAPTIONS_FILE);
        fs::write(&path, index).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CAPTIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut ds = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (file, cap) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected <file>\\t<caption>".into(),
            })?;
            ds.push(load_png(&dir.join(file))?.to_f32(), cap.to_string());
        }
        Ok(ds)
    }
}
