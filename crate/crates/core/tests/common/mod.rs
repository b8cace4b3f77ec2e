#![allow(dead_code)]

use std::fs::{self, File};
use std::path::PathBuf;
use std::sync::OnceLock;

use injectdiff::backbone::checkpoint;
use injectdiff::backbone::train::{train_toy, TrainConfig};
use injectdiff::backbone::{Architecture, ToyBackbone};
use injectdiff::diffmath::ScheduleKind;
use injectdiff::shapes::{ShapeSpec, ToyDataset};
use injectdiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small backbone on 16×16 images, briefly trained so that no layer is
/// still at its zero initialisation; fast enough for plumbing tests.
pub fn tiny_backbone(seed: u64) -> ToyBackbone {
    let arch = Architecture {
        resolution: 16,
        patch: 2,
        channels: [8, 16, 16],
        groups: 8,
        time_dim: 16,
        ..Architecture::default()
    };
    let mut b = ToyBackbone::new(&arch, ScheduleKind::Linear, 1000, seed).expect("valid architecture");
    let ds = ToyDataset::generate(16, 16, seed).expect("dataset");
    let cfg = TrainConfig {
        steps: 8,
        batch_size: 4,
        learning_rate: 1e-2,
        warmup_steps: 0,
        validation_size: 1,
        seed,
        ..TrainConfig::default()
    };
    train_toy(&mut b, &ds, &cfg).expect("training");
    b
}

pub fn shape_image(seed: u64, size: usize) -> (Tensor<f64>, String) {
    let spec = ShapeSpec::random(&mut ChaCha8Rng::seed_from_u64(seed), size);
    (spec.render(size).expect("render"), spec.caption())
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub const FIXTURE_IMAGES: usize = 1024;
pub const FIXTURE_DATA_SEED: u64 = 1;

/// The default toy backbone trained with the default recipe. Trained once and
/// cached under the target directory; a file lock serialises concurrent
/// test binaries.
pub fn trained_backbone() -> &'static ToyBackbone {
    static MODEL: OnceLock<ToyBackbone> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        fs::create_dir_all(&dir).expect("target tmpdir");
        let cfg = TrainConfig::default();
        let recipe = format!("{FIXTURE_IMAGES} {FIXTURE_DATA_SEED} {cfg:?} {:?}", Architecture::default());
        let tag = checkpoint::content_id(recipe.as_bytes());
        let path = dir.join(format!("toy-fixture-{tag}.ckpt"));
        let lock = File::create(dir.join(format!("toy-fixture-{tag}.lock"))).expect("lock file");
        lock.lock().expect("lock fixture");
        if let Ok(b) = checkpoint::load(&path) {
            return b;
        }
        eprintln!("training the toy fixture once; cached at {}", path.display());
        let ds = ToyDataset::generate(FIXTURE_IMAGES, 64, FIXTURE_DATA_SEED).expect("dataset");
        let mut model =
            ToyBackbone::new(&Architecture::default(), ScheduleKind::Linear, 1000, cfg.seed).expect("backbone");
        train_toy(&mut model, &ds, &cfg).expect("training");
        let tmp = path.with_extension("partial");
        checkpoint::save(&model, &tmp).expect("save fixture");
        fs::rename(&tmp, &path).expect("publish fixture");
        model
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvectors are
/// the columns of the returned matrix.
pub fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, c) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..c)
        .map(|i| (0..c).map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n as f64).collect())
        .collect()
}
