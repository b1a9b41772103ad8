//! Blind harmonization: alternate decoding, an image-domain step on the
//! correlation/edge distance, and latent shrinkage toward the origin.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentState};
use crate::numeric::{
    edge_mask, masked_tv, masked_tv_subgradient, ncc, ncc_gradient, EdgeMask, ImageGrid,
};

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitMode {
    #[default]
    MeanImage,
    SourceImage,
    Custom(ImageGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizeConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub mask_quantile: f64,
    pub init_mode: InitMode,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 1000.0,
            beta2: 0.001,
            iterations: 10,
            mask_quantile: 0.8,
            init_mode: InitMode::MeanImage,
        }
    }
}

impl HarmonizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            return Err(Error::Config(format!("beta1 must be >= 0, got {}", self.beta1)));
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return Err(Error::Config(format!("beta2 must be >= 0, got {}", self.beta2)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.mask_quantile > 0.0 && self.mask_quantile < 1.0) {
            return Err(Error::Config(format!(
                "mask_quantile must lie in (0, 1), got {}",
                self.mask_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub ncc_to_source: f64,
    pub masked_tv: f64,
    /// Norm of the shrunken latent produced at the end of this iteration.
    pub latent_norm: f64,
    pub distance: f64,
}

/// Per-iteration diagnostics. `iterates[n]` is the image produced by the
/// image-domain update of iteration `n`, the point the record was measured at.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizeTrace {
    pub records: Vec<IterationRecord>,
    pub iterates: Vec<ImageGrid>,
    pub initial_latent_norm: f64,
    pub mask: EdgeMask,
}

impl HarmonizeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Tab-separated records with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iteration\tncc\tmasked_tv\tlatent_norm\tdistance\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\n",
                r.iteration, r.ncc_to_source, r.masked_tv, r.latent_norm, r.distance
            ));
        }
        out
    }
}

/// `beta1 * (1 - ncc(x, x_s)) + beta2 * masked_tv(x, mask)`.
pub fn distance(x: &ImageGrid, x_s: &ImageGrid, mask: &EdgeMask, beta1: f64, beta2: f64) -> Result<f64> {
    Ok(beta1 * (1.0 - ncc(x, x_s)?) + beta2 * masked_tv(x, mask)?)
}

fn at_iteration(n: usize, err: Error) -> Error {
    match err {
        Error::NumericalAbort { location, .. } => Error::NumericalAbort { step: n, location },
        Error::Degenerate(msg) => Error::Degenerate(format!("iteration {n}: {msg}")),
        Error::InvalidInput(msg) => Error::NumericalAbort {
            step: n,
            location: msg,
        },
        other => other,
    }
}

/// Harmonizes `x_s` toward the domain the flow was trained on.
pub fn harmonize(
    model: &FlowModel,
    x_s: &ImageGrid,
    dataset_mean: &ImageGrid,
    cfg: &HarmonizeConfig,
) -> Result<(ImageGrid, HarmonizeTrace)> {
    cfg.validate()?;
    if !model.is_actnorm_initialized() {
        return Err(Error::InvalidInput(
            "model actnorm layers are not initialized".into(),
        ));
    }
    x_s.ensure_finite("source image")?;
    if x_s.min() == x_s.max() {
        return Err(Error::Degenerate("source image is constant".into()));
    }
    let x0 = match &cfg.init_mode {
        InitMode::MeanImage => dataset_mean,
        InitMode::SourceImage => x_s,
        InitMode::Custom(img) => img,
    };
    x0.ensure_same_dims(x_s, "initial image vs source")?;
    let mask = edge_mask(x_s, cfg.mask_quantile)?;

    let mut z: LatentState = model.forward(x0)?.value;
    let initial_latent_norm = z.norm();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for n in 0..cfg.iterations {
        let step = |n: usize| -> Result<(ImageGrid, LatentState)> {
            let decoded = model.inverse(&z)?.value;
            let mut next = decoded.clone();
            if cfg.beta1 != 0.0 {
                next = next.add_scaled(&ncc_gradient(&decoded, x_s)?, cfg.beta1);
            }
            if cfg.beta2 != 0.0 {
                next = next.add_scaled(&masked_tv_subgradient(&decoded, &mask)?, -cfg.beta2);
            }
            if !next.is_finite() {
                return Err(Error::NumericalAbort {
                    step: n,
                    location: "image update".into(),
                });
            }
            let shrunk = model.forward(&next)?.value.scaled(1.0 - cfg.alpha);
            Ok((next, shrunk))
        };
        let (next, shrunk) = step(n).map_err(|e| at_iteration(n, e))?;
        let corr = ncc(&next, x_s).map_err(|e| at_iteration(n, e))?;
        let tv = masked_tv(&next, &mask)?;
        records.push(IterationRecord {
            iteration: n,
            ncc_to_source: corr,
            masked_tv: tv,
            latent_norm: shrunk.norm(),
            distance: cfg.beta1 * (1.0 - corr) + cfg.beta2 * tv,
        });
        iterates.push(next);
        z = shrunk;
    }
    let output = iterates.last().expect("iterations >= 1").clamp(0.0, 1.0);
    Ok((
        output,
        HarmonizeTrace {
            records,
            iterates,
            initial_latent_norm,
            mask,
        },
    ))
}

/// Applies [`harmonize`] to every image; failures stay in their slot.
pub fn harmonize_batch(
    model: &FlowModel,
    images: &[ImageGrid],
    dataset_mean: &ImageGrid,
    cfg: &HarmonizeConfig,
) -> Vec<Result<(ImageGrid, HarmonizeTrace)>> {
    images
        .par_iter()
        .map(|x| harmonize(model, x, dataset_mean, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArchitecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> FlowArchitecture {
        FlowArchitecture {
            levels: 2,
            steps_per_level: 2,
            coupling_hidden_width: 8,
            coupling_hidden_layers: 1,
            input_height: 8,
            input_width: 8,
        }
    }

    fn random_image(seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(8, 8, |_, _| rng.gen::<f64>())
    }

    fn inert() -> HarmonizeConfig {
        HarmonizeConfig {
            alpha: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            iterations: 4,
            ..Default::default()
        }
    }

    #[test]
    fn distance_at_source_is_edge_term_only() {
        let x = random_image(1);
        let mask = edge_mask(&x, 0.8).unwrap();
        let d = distance(&x, &x, &mask, 1000.0, 0.5).unwrap();
        assert!((d - 0.5 * masked_tv(&x, &mask).unwrap()).abs() < 1e-9);
        let y = random_image(2);
        assert_eq!(distance(&y, &x, &mask, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn distance_recomposes_from_kernels() {
        let x = random_image(3);
        let s = random_image(4);
        let mask = edge_mask(&s, 0.8).unwrap();
        let expected = 1000.0 * (1.0 - ncc(&x, &s).unwrap()) + 0.001 * masked_tv(&x, &mask).unwrap();
        assert!((distance(&x, &s, &mask, 1000.0, 0.001).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn inert_updates_return_the_initial_image() {
        let model = FlowModel::random(arch(), 5).unwrap();
        let mean = random_image(6).map(|v| 0.2 + 0.6 * v);
        let (out, trace) = harmonize(&model, &random_image(7), &mean, &inert()).unwrap();
        assert!(out.max_abs_diff(&mean) <= 1e-6);
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn shrinkage_law_without_image_steps() {
        let model = FlowModel::random(arch(), 8).unwrap();
        let cfg = HarmonizeConfig {
            alpha: 0.05,
            ..inert()
        };
        let (_, trace) = harmonize(&model, &random_image(9), &random_image(10), &cfg).unwrap();
        let mut prev = trace.initial_latent_norm;
        for r in &trace.records {
            assert!((r.latent_norm - 0.95 * prev).abs() <= 1e-10 * prev);
            prev = r.latent_norm;
        }
    }

    #[test]
    fn ncc_ascent_from_the_source_stays_at_one() {
        let model = FlowModel::identity(arch()).unwrap();
        let x_s = random_image(11);
        let cfg = HarmonizeConfig {
            alpha: 0.0,
            beta2: 0.0,
            init_mode: InitMode::SourceImage,
            ..Default::default()
        };
        let (_, trace) = harmonize(&model, &x_s, &x_s, &cfg).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for r in &trace.records {
            assert!(r.ncc_to_source >= prev - 1e-12);
            assert!((r.ncc_to_source - 1.0).abs() < 1e-12);
            prev = r.ncc_to_source;
        }
    }

    #[test]
    fn trace_distances_match_stored_iterates() {
        let model = FlowModel::random(arch(), 12).unwrap();
        let x_s = random_image(13);
        let cfg = HarmonizeConfig {
            beta1: 2.0,
            beta2: 0.01,
            ..Default::default()
        };
        let (out, trace) = harmonize(&model, &x_s, &random_image(14), &cfg).unwrap();
        assert_eq!(trace.len(), 10);
        for (r, x) in trace.records.iter().zip(&trace.iterates) {
            let d = distance(x, &x_s, &trace.mask, cfg.beta1, cfg.beta2).unwrap();
            assert!((r.distance - d).abs() <= 1e-8);
        }
        assert!(out.min() >= 0.0 && out.max() <= 1.0);
        let (again, _) = harmonize(&model, &x_s, &random_image(14), &cfg).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn mask_depends_on_source_only() {
        let model = FlowModel::random(arch(), 15).unwrap();
        let x_s = random_image(16);
        let cfg = HarmonizeConfig {
            beta1: 1.0,
            ..Default::default()
        };
        let (_, a) = harmonize(&model, &x_s, &random_image(17), &cfg).unwrap();
        let (_, b) = harmonize(&model, &x_s, &random_image(18), &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = FlowModel::random(arch(), 19).unwrap();
        let mean = random_image(20);
        assert!(matches!(
            harmonize(&model, &ImageGrid::filled(8, 8, 0.5), &mean, &HarmonizeConfig::default()),
            Err(Error::Degenerate(_))
        ));
        let untrained = FlowModel::new(arch(), 0).unwrap();
        assert!(harmonize(&untrained, &random_image(21), &mean, &HarmonizeConfig::default()).is_err());
        let bad = HarmonizeConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            harmonize(&model, &random_image(21), &mean, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_isolates_failures_and_preserves_order() {
        let model = FlowModel::random(arch(), 22).unwrap();
        let mean = random_image(23);
        let cfg = HarmonizeConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(harmonize_batch(&model, &[], &mean, &cfg).is_empty());
        let imgs = vec![random_image(24), ImageGrid::filled(8, 8, 0.1), random_image(25)];
        let out = harmonize_batch(&model, &imgs, &mean, &cfg);
        assert_eq!(out.len(), 3);
        assert!(out[1].is_err());
        let single = harmonize(&model, &imgs[2], &mean, &cfg).unwrap();
        assert_eq!(out[2].as_ref().unwrap(), &single);
        assert!(out[0].is_ok());
    }
}
