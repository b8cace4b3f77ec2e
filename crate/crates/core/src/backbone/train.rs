//! Noise-prediction training for the toy backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::hooks::HookContext;
use crate::backbone::nn::{Grads, ParamStore};
use crate::backbone::prompt::PromptEmbedding;
use crate::backbone::ToyBackbone;
use crate::error::{Error, Result};
use crate::shapes::ToyDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    /// Probability of replacing a caption with the empty prompt.
    pub caption_dropout: f64,
    /// Images held out (from the front of the dataset) for validation.
    pub validation_size: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Min-SNR loss weighting `min(snr, gamma) / snr` per sample; `0` trains
    /// on the plain noise-prediction loss.
    pub snr_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            caption_dropout: 0.15,
            validation_size: 64,
            seed: 0,
            log_every: 50,
            snr_gamma: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub log: Vec<TrainLogEntry>,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// One noised example: `(x_t, t, target noise)`.
fn noised(
    model: &ToyBackbone,
    x0: &Tensor,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let ab = model.schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let z: Vec<f32> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let xt = x0.data().iter().zip(&z).map(|(&x, &e)| sa * x + sn * e).collect();
    Ok((xt, z))
}

struct Batch {
    x: Tensor,
    ts: Vec<usize>,
    target: Vec<f32>,
    prompts: Vec<PromptEmbedding>,
}

fn assemble(
    model: &ToyBackbone,
    ds: &ToyDataset,
    items: &[(usize, usize, bool)],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let shape = ds.images[items[0].0].shape().to_vec();
    let mut x = Vec::new();
    let mut target = Vec::new();
    let mut prompts = Vec::new();
    for &(i, t, drop) in items {
        let (xt, z) = noised(model, &ds.images[i], t, rng)?;
        x.extend(xt);
        target.extend(z);
        prompts.push(if drop { model.encoder.empty() } else { model.encoder.encode(&ds.captions[i])? });
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(Batch {
        x: Tensor::new(full, x)?,
        ts: items.iter().map(|it| it.1).collect(),
        target,
        prompts,
    })
}

fn batch_loss(model: &ToyBackbone, ps: &ParamStore, b: &Batch) -> Result<f64> {
    let refs: Vec<&PromptEmbedding> = b.prompts.iter().collect();
    let (eps, _) = model.unet.forward(ps, &b.x, &b.ts, &refs, &mut HookContext::new(), false)?;
    Ok(mse(eps.data(), &b.target))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean noise-prediction loss on a fixed set of noised validation images.
struct Validation {
    batches: Vec<Batch>,
}

impl Validation {
    fn new(model: &ToyBackbone, ds: &ToyDataset, n: usize, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e);
        let max_t = model.schedule.num_train_steps();
        let items: Vec<(usize, usize, bool)> = (0..n).map(|i| (i, rng.random_range(1..=max_t), false)).collect();
        let batches = items
            .chunks(batch.max(1))
            .map(|c| assemble(model, ds, c, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { batches })
    }

    fn loss(&self, model: &ToyBackbone, ps: &ParamStore) -> Result<f64> {
        if self.batches.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut count = 0;
        for b in &self.batches {
            total += batch_loss(model, ps, b)? * b.ts.len() as f64;
            count += b.ts.len();
        }
        Ok(total / count as f64)
    }
}

/// `min(snr, gamma) / snr`: damps near-clean timesteps, whose noise is
/// essentially unpredictable, so they do not swamp the gradient.
fn snr_weight(model: &ToyBackbone, t: usize, gamma: f64) -> f32 {
    if gamma <= 0.0 {
        return 1.0;
    }
    let a = model.schedule.alpha_bars()[t];
    let snr = a / (1.0 - a);
    (snr.min(gamma) / snr) as f32
}

/// Train `model` in place on `ds`; deterministic in `cfg.seed`.
pub fn train_toy(model: &mut ToyBackbone, ds: &ToyDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if ds.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let expected = model.architecture().image_shape();
    if let Some(bad) = ds.images.iter().find(|im| im.shape() != expected) {
        return Err(Error::ShapeMismatch { expected: expected.to_vec(), got: bad.shape().to_vec() });
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let held_out = cfg.validation_size.min(ds.len().saturating_sub(1));
    let validation = Validation::new(model, ds, held_out, 16, cfg.seed)?;
    let initial = validation.loss(model, &model.params)?;
    log::info!("initial validation loss {initial:.5}");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_t = model.schedule.num_train_steps();
    let mut adam = Adam::new(model.params.num_params());
    let mut grads = Grads::zeros_like(&model.params);
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0;
    for step in 1..=cfg.steps {
        let items: Vec<(usize, usize, bool)> = (0..cfg.batch_size)
            .map(|_| {
                (
                    rng.random_range(held_out..ds.len()),
                    rng.random_range(1..=max_t),
                    rng.random_bool(cfg.caption_dropout),
                )
            })
            .collect();
        let batch = assemble(model, ds, &items, &mut rng)?;
        let refs: Vec<&PromptEmbedding> = batch.prompts.iter().collect();
        let (eps, cache) =
            model.unet.forward(&model.params, &batch.x, &batch.ts, &refs, &mut HookContext::new(), true)?;
        let loss = mse(eps.data(), &batch.target);
        let per_item = eps.len() / cfg.batch_size;
        let weights: Vec<f32> = batch.ts.iter().map(|&t| snr_weight(model, t, cfg.snr_gamma)).collect();
        let scale = 2.0 / eps.len() as f32;
        let dy: Vec<f32> = eps
            .data()
            .iter()
            .zip(&batch.target)
            .enumerate()
            .map(|(k, (&e, &z))| scale * weights[k / per_item] * (e - z))
            .collect();
        let dy = Tensor::new(eps.shape().to_vec(), dy)?;
        grads.clear();
        model.unet.backward(&model.params, &cache.expect("kept"), &dy, &mut grads);

        let norm = grads.data.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt() as f32;
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads.data.iter_mut().for_each(|g| *g *= s);
        }
        let warm = if cfg.warmup_steps > 0 { (step as f32 / cfg.warmup_steps as f32).min(1.0) } else { 1.0 };
        adam.step(model.params.data_mut(), &grads.data, cfg.learning_rate * warm);

        running += loss;
        running_n += 1;
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let mean = running / running_n as f64;
            log::info!("step {step}: loss {mean:.5}");
            log.push(TrainLogEntry { step, loss: mean });
            running = 0.0;
            running_n = 0;
        }
    }
    model.refresh_id();
    let final_loss = validation.loss(model, &model.params)?;
    log::info!("final validation loss {final_loss:.5}");
    Ok(TrainReport { initial_validation_loss: initial, final_validation_loss: final_loss, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::unet::Architecture;
    use crate::backbone::DenoiserBackbone;
    use crate::diffmath::ScheduleKind;

    fn tiny() -> (ToyBackbone, ToyDataset) {
        let arch = Architecture {
            resolution: 16,
            patch: 2,
            channels: [8, 8, 16],
            groups: 4,
            time_dim: 8,
            text_dim: 4,
            ..Architecture::default()
        };
        let model = ToyBackbone::new(&arch, ScheduleKind::Linear, 100, 3).unwrap();
        (model, ToyDataset::generate(24, 16, 5).unwrap())
    }

    #[test]
    fn zero_steps_keeps_initialisation() {
        let (mut m, ds) = tiny();
        let before = m.params.clone();
        let id = m.checkpoint_id().to_string();
        let cfg = TrainConfig { steps: 0, validation_size: 4, ..TrainConfig::default() };
        train_toy(&mut m, &ds, &cfg).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(m.checkpoint_id().to_string(), id);
    }

    #[test]
    fn deterministic_and_decreasing() {
        let cfg = TrainConfig { steps: 40, batch_size: 4, validation_size: 8, warmup_steps: 5, ..TrainConfig::default() };
        let (mut a, ds) = tiny();
        let ra = train_toy(&mut a, &ds, &cfg).unwrap();
        let (mut b, _) = tiny();
        let rb = train_toy(&mut b, &ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert!(ra.final_validation_loss < ra.initial_validation_loss, "{ra:?}");
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let (mut m, _) = tiny();
        let cfg = TrainConfig::default();
        assert!(train_toy(&mut m, &ToyDataset::default(), &cfg).is_err());
        let wrong = ToyDataset::generate(2, 32, 1).unwrap();
        assert!(matches!(train_toy(&mut m, &wrong, &cfg), Err(Error::ShapeMismatch { .. })));
    }
}
