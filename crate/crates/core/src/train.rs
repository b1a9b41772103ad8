//! Maximum-likelihood training of the flow on target-domain images.

use std::f64::consts::{LN_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{batch_nll_and_gradient, FlowArchitecture, FlowModel};
use crate::numeric::{mean_image, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub dequant_noise_scale: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Global L2 norm above which gradients are rescaled.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            total_steps: 2000,
            batch_size: 32,
            dequant_noise_scale: 1.0 / 256.0,
            seed: 0,
            checkpoint_every: 500,
            grad_clip: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.dequant_noise_scale >= 0.0) {
            return Err(Error::Config("dequant_noise_scale must be non-negative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Target-domain training images and their pixelwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDataset {
    images: Vec<ImageGrid>,
    mean_image: ImageGrid,
}

impl TargetDataset {
    pub fn new(images: Vec<ImageGrid>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        for (k, img) in images.iter().enumerate() {
            img.ensure_finite("dataset image")?;
            if img.min() < 0.0 || img.max() > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "dataset image {k} is outside [0, 1]"
                )));
            }
        }
        let mean_image = mean_image(&images)?;
        Ok(Self { images, mean_image })
    }

    pub fn images(&self) -> &[ImageGrid] {
        &self.images
    }

    pub fn mean_image(&self) -> &ImageGrid {
        &self.mean_image
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `lr0 * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps_taken: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            steps_taken: 0,
        }
    }

    /// One bias-corrected update of `params` against `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update just applied.
    pub step: usize,
    /// Mean NLL of the (dequantized) batch before the update, bits per dim.
    pub nll_bpd: f64,
    pub lr: f64,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} nll_bpd={:.6} lr={:.8}", self.step, self.nll_bpd, self.lr)
    }
}

/// Mutable state of a training run.
pub struct TrainState {
    pub step: usize,
    pub model: FlowModel,
    pub optimizer: Adam,
    pub running_nll_bpd: f64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl TrainState {
    fn next_batch(&mut self, dataset: &TargetDataset, cfg: &TrainConfig) -> Vec<ImageGrid> {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let img = &dataset.images[self.order[self.cursor]];
            self.cursor += 1;
            let noisy = if cfg.dequant_noise_scale > 0.0 {
                img.map(|v| v + self.rng.gen::<f64>() * cfg.dequant_noise_scale)
            } else {
                img.clone()
            };
            batch.push(noisy);
        }
        batch
    }
}

pub fn bits_per_dim(nll: f64, dimension: usize) -> f64 {
    nll / (dimension as f64 * LN_2)
}

/// Mean of `-log p(x) / (D ln 2)` over `images`.
pub fn nll_bits_per_dim(model: &FlowModel, images: &[ImageGrid]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("bits per dim of an empty list".into()));
    }
    let d = model.dimension();
    let mut total = 0.0;
    for x in images {
        total += bits_per_dim(-model.log_prob(x)?, d);
    }
    Ok(total / images.len() as f64)
}

pub fn train(dataset: &TargetDataset, arch: FlowArchitecture, cfg: &TrainConfig) -> Result<FlowModel> {
    train_with(dataset, arch, cfg, |_, _| Ok(()))
}

/// Runs the training loop, calling `observer` after every update.
pub fn train_with(
    dataset: &TargetDataset,
    arch: FlowArchitecture,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepRecord, &FlowModel) -> Result<()>,
) -> Result<FlowModel> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.dims() != (arch.input_height, arch.input_width) {
        let (h, w) = dataset.dims();
        return Err(Error::Dimension(format!(
            "dataset images are {h}x{w}, architecture expects {}x{}",
            arch.input_height, arch.input_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = FlowModel::new(arch, rng.gen())?;
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(model.parameter_count()),
        model,
        running_nll_bpd: f64::NAN,
        order: (0..dataset.len()).collect(),
        cursor: dataset.len(),
        rng,
    };

    let d = arch.dimension();
    let mut batch = state.next_batch(dataset, cfg);
    if batch.len() >= 2 {
        state.model.actnorm_initialize(&batch)?;
    } else {
        let mut init = batch.clone();
        init.extend(state.next_batch(dataset, cfg));
        state.model.actnorm_initialize(&init)?;
    }

    while state.step < cfg.total_steps {
        let step = state.step + 1;
        let (nll, mut grad) = batch_nll_and_gradient(&state.model, &batch).map_err(|e| match e {
            Error::NumericalAbort { location, .. } => Error::NumericalAbort { step, location },
            other => other,
        })?;
        if !nll.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                location: "batch negative log-likelihood".into(),
            });
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort {
                step,
                location: format!("gradient of {}", arch.describe_parameter(k)),
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = cosine_lr(cfg.learning_rate, state.step, cfg.total_steps);
        state.optimizer.step(state.model.params_mut(), &grad, lr);
        if let Some(k) = state.model.params().iter().position(|p| !p.is_finite()) {
            return Err(Error::NumericalAbort {
                step,
                location: format!("update of {}", arch.describe_parameter(k)),
            });
        }
        state.step = step;
        let record = StepRecord {
            step,
            nll_bpd: bits_per_dim(nll, d),
            lr,
        };
        state.running_nll_bpd = if state.running_nll_bpd.is_nan() {
            record.nll_bpd
        } else {
            0.98 * state.running_nll_bpd + 0.02 * record.nll_bpd
        };
        observer(&record, &state.model)?;
        if state.step < cfg.total_steps {
            batch = state.next_batch(dataset, cfg);
        }
    }
    Ok(state.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{phantom_corpus, PhantomConfig};

    fn toy_arch() -> FlowArchitecture {
        FlowArchitecture {
            levels: 2,
            steps_per_level: 2,
            coupling_hidden_width: 8,
            coupling_hidden_layers: 1,
            input_height: 8,
            input_width: 8,
        }
    }

    fn toy_dataset(n: usize) -> TargetDataset {
        let cfg = PhantomConfig {
            size: 8,
            ..Default::default()
        };
        TargetDataset::new(phantom_corpus(&cfg, n, 5)).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(5e-4, 0, 100) - 5e-4).abs() <= 1e-12);
        assert!(cosine_lr(5e-4, 100, 100).abs() <= 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![1.0; 3];
        adam.step(&mut p, &g, 0.01);
        // bias-corrected m = 1, v = 1, so every parameter moves by lr / (1 + eps)
        let expected = 0.01 / (1.0 + 1e-8);
        for (a, b) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert!(((b - a) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn dataset_mean_is_exact() {
        let a = ImageGrid::from_rows(&[&[0.0, 1.0]]).unwrap();
        let b = ImageGrid::from_rows(&[&[1.0, 0.5]]).unwrap();
        let ds = TargetDataset::new(vec![a, b]).unwrap();
        assert!(ds.mean_image().max_abs_diff(&ImageGrid::from_rows(&[&[0.5, 0.75]]).unwrap()) <= 1e-12);
        assert!(TargetDataset::new(vec![]).is_err());
        assert!(TargetDataset::new(vec![ImageGrid::filled(2, 2, 1.5)]).is_err());
    }

    #[test]
    fn identity_flow_bits_per_dim_at_origin() {
        let arch = FlowArchitecture {
            levels: 1,
            steps_per_level: 1,
            coupling_hidden_width: 2,
            coupling_hidden_layers: 1,
            input_height: 2,
            input_width: 2,
        };
        let model = FlowModel::identity(arch).unwrap();
        let bpd = nll_bits_per_dim(&model, &[ImageGrid::zeros(2, 2)]).unwrap();
        // (4/2 ln 2pi) / (4 ln 2)
        let expected = (2.0 * (2.0 * PI).ln()) / (4.0 * LN_2);
        assert!((bpd - expected).abs() < 1e-12);
        assert!((bpd - 1.3257).abs() < 1e-4);
        assert!(nll_bits_per_dim(&model, &[]).is_err());
    }

    #[test]
    fn bits_per_dim_is_a_plain_mean() {
        let model = FlowModel::random(toy_arch(), 1).unwrap();
        let ds = toy_dataset(4);
        let all = nll_bits_per_dim(&model, ds.images()).unwrap();
        let singles: f64 = ds
            .images()
            .iter()
            .map(|x| nll_bits_per_dim(&model, std::slice::from_ref(x)).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((all - singles).abs() <= 1e-12);
        // appending a worse-than-average image raises the mean
        let worse = ImageGrid::filled(8, 8, 40.0);
        let mut more = ds.images().to_vec();
        more.push(worse);
        assert!(nll_bits_per_dim(&model, &more).unwrap() > all);
    }

    #[test]
    fn single_step_makes_exactly_one_update() {
        let ds = toy_dataset(8);
        let cfg = TrainConfig {
            total_steps: 1,
            batch_size: 4,
            ..Default::default()
        };
        let mut records = Vec::new();
        train_with(&ds, toy_arch(), &cfg, |r, _| {
            records.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].step, 1);
        assert!((records[0].lr - 5e-4).abs() < 1e-15);
        let zero = TrainConfig {
            total_steps: 0,
            ..cfg
        };
        assert!(matches!(train(&ds, toy_arch(), &zero), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(8);
        let cfg = TrainConfig {
            total_steps: 5,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        };
        let a = train(&ds, toy_arch(), &cfg).unwrap();
        let b = train(&ds, toy_arch(), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ds = toy_dataset(4);
        let arch = FlowArchitecture {
            input_height: 16,
            input_width: 16,
            ..toy_arch()
        };
        assert!(matches!(
            train(&ds, arch, &TrainConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_location() {
        let ds = toy_dataset(8);
        let cfg = TrainConfig {
            total_steps: 200,
            batch_size: 4,
            learning_rate: 1e6,
            grad_clip: 1e300,
            ..Default::default()
        };
        match train(&ds, toy_arch(), &cfg) {
            Err(Error::NumericalAbort { step, location }) => {
                assert!(step >= 1);
                assert!(!location.is_empty());
            }
            Ok(m) => assert!(m.params().iter().all(|p| p.is_finite())),
            Err(other) => panic!("unexpected error {other}"),
        }
    }
}
