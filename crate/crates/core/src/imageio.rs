//! PNG I/O for `[3, H, W]` tensors with values in `[-1, 1]`, and raw f64
//! latent files.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantise a `[-1, 1]` image to 8-bit RGB.
pub fn to_rgb8(img: &Tensor<f64>) -> Result<RgbImage> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::ShapeMismatch { expected: vec![3, 0, 0], got: img.shape().to_vec() })
        }
    };
    let d = img.data();
    let q = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb shape")
}

pub fn save_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img)?.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_png(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

const LATENT_MAGIC: &str = "latent-f64";

/// Write a latent losslessly: a `latent-f64 <dims>` line, then little-endian f64s.
pub fn save_latent(path: &Path, x: &Tensor<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let dims: Vec<String> = x.shape().iter().map(|d| d.to_string()).collect();
    let mut bytes = format!("{LATENT_MAGIC} {}\n", dims.join(" ")).into_bytes();
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_latent(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { path: path.display().to_string(), line: 1, msg: msg.to_string() };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(LATENT_MAGIC) {
        return Err(bad("not a latent file"));
    }
    let shape: Vec<usize> = parts.map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad shape"))?;
    let blob = &bytes[nl + 1..];
    if blob.len() != 8 * shape.iter().product::<usize>() {
        return Err(bad("payload size does not match the shape"));
    }
    let data = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantised_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 / 30.0) - 1.0).collect();
        let img = Tensor::new(vec![3, 4, 5], data).unwrap();
        let path = dir.path().join("x.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 1.0 / 127.5 + 1e-12);
        save_png(&path, &back).unwrap();
        assert_eq!(load_png(&path).unwrap(), back);
    }

    #[test]
    fn latent_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, -1e-300, 7.5, f64::MAX, 0.0, -2.25]).unwrap();
        let path = dir.path().join("x.latent");
        save_latent(&path, &x).unwrap();
        assert_eq!(load_latent(&path).unwrap(), x);
        std::fs::write(&path, b"latent-f64 2 3\nshort").unwrap();
        assert!(load_latent(&path).is_err());
    }
}
