//! Reverse-mode gradient of the negative log-likelihood with respect to the
//! flow parameters, using the hand-derived layer adjoints in `layers`.

use rayon::prelude::*;

use super::arch::LayerKind;
use super::layers::{self, CouplingNet};
use super::model::{gaussian_log_density, FlowModel, LayerCache};
use crate::error::{Error, Result};
use crate::numeric::ImageGrid;

/// Negative log-likelihood of one image and its parameter gradient.
pub fn nll_and_gradient(model: &FlowModel, x: &ImageGrid) -> Result<(f64, Vec<f64>)> {
    let arch = *model.arch();
    let specs = arch.layers();
    let mut cache: Vec<LayerCache> = Vec::with_capacity(specs.len());
    let out = model.forward_pass(x, Some(&mut cache))?;
    let z = &out.value.z;
    let nll = -(gaussian_log_density(z) + out.log_det);

    let params = model.params();
    let mut grad = vec![0.0; params.len()];
    // dNLL/dz = z for the standard Gaussian term
    let mut end = z.len();
    let tail = *out.value.segments.last().expect("final segment");
    let mut dcur = z[end - tail..].to_vec();
    end -= tail;

    for (spec, entry) in specs.iter().zip(&cache).rev() {
        let p = &params[spec.offset..spec.offset + spec.len];
        let dp = &mut grad[spec.offset..spec.offset + spec.len];
        dcur = match spec.kind {
            LayerKind::Squeeze => layers::unsqueeze(&dcur, spec.channels, spec.height, spec.width),
            LayerKind::ActNorm => layers::actnorm_backward(spec, p, &entry.input, &dcur, dp),
            LayerKind::Mix => layers::mix_backward(spec, p, &entry.input, &dcur, dp),
            LayerKind::Coupling { flip } => {
                let net = CouplingNet::new(&arch, spec);
                let trace = entry.net.as_ref().expect("coupling trace cached");
                layers::coupling_backward(&net, spec, flip, p, &entry.input, trace, &dcur, dp)
            }
            LayerKind::Split => {
                let factored = spec.channels / 2 * spec.pixels();
                dcur.extend_from_slice(&z[end - factored..end]);
                end -= factored;
                dcur
            }
        };
    }
    Ok((nll, grad))
}

/// Gradient of the mean negative log-likelihood over `batch`.
pub fn parameter_gradient(model: &FlowModel, batch: &[ImageGrid]) -> Result<Vec<f64>> {
    batch_nll_and_gradient(model, batch).map(|(_, g)| g)
}

/// Mean NLL and its gradient. Per-image terms may be computed in parallel;
/// they are always summed in batch order.
pub fn batch_nll_and_gradient(model: &FlowModel, batch: &[ImageGrid]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("gradient of an empty batch".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|x| nll_and_gradient(model, x))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; model.parameter_count()];
    for (nll, g) in &parts {
        total += nll;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArchitecture;
    use crate::numeric::fd::{central_partial_fourth_order, rel_err_with_floor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> FlowArchitecture {
        FlowArchitecture {
            levels: 2,
            steps_per_level: 2,
            coupling_hidden_width: 4,
            coupling_hidden_layers: 2,
            input_height: 4,
            input_width: 4,
        }
    }

    fn image(seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(4, 4, |_, _| rng.gen::<f64>())
    }

    fn nll(model: &FlowModel, x: &ImageGrid) -> f64 {
        -model.log_prob(x).unwrap()
    }

    #[test]
    fn matches_finite_differences_on_two_levels() {
        let arch = small_arch();
        let mut model = FlowModel::random(arch, 7).unwrap();
        let x = image(1);
        let (value, grad) = nll_and_gradient(&model, &x).unwrap();
        assert!((value - nll(&model, &x)).abs() < 1e-10);
        let mut worst: f64 = 0.0;
        for k in 0..model.parameter_count() {
            let mut params = model.params().to_vec();
            let num = central_partial_fourth_order(&mut params, k, 1e-4, |p| {
                model.params_mut().copy_from_slice(p);
                nll(&model, &x)
            });
            model.params_mut().copy_from_slice(&params);
            // dead ReLU units give exact zeros; the floor absorbs stencil roundoff
            worst = worst.max(rel_err_with_floor(grad[k], num, 1e-6));
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let model = FlowModel::random(small_arch(), 3).unwrap();
        let (a, b) = (image(4), image(5));
        let ga = parameter_gradient(&model, std::slice::from_ref(&a)).unwrap();
        let gb = parameter_gradient(&model, std::slice::from_ref(&b)).unwrap();
        let gab = parameter_gradient(&model, &[a, b]).unwrap();
        for k in 0..gab.len() {
            assert!((gab[k] - 0.5 * (ga[k] + gb[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let model = FlowModel::identity(small_arch()).unwrap();
        assert!(matches!(parameter_gradient(&model, &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stationary_at_one_parameter_optimum() {
        // NLL as a function of a single actnorm log-scale l with everything
        // else fixed at the identity: sum over that channel of x^2 e^{2l}/2 - hw*l,
        // minimized at e^{2l} = hw / sum(x^2).
        let arch = FlowArchitecture {
            levels: 1,
            steps_per_level: 1,
            coupling_hidden_width: 2,
            coupling_hidden_layers: 1,
            input_height: 4,
            input_width: 4,
        };
        let mut model = FlowModel::identity(arch).unwrap();
        let x = image(8);
        let squeezed = layers::squeeze(x.data(), 1, 4, 4);
        let sumsq: f64 = squeezed[..4].iter().map(|v| v * v).sum();
        let opt = 0.5 * (4.0 / sumsq).ln();
        model.actnorm_params_mut(0, 0).unwrap().0[0] = opt;
        let grad = parameter_gradient(&model, &[x]).unwrap();
        assert!(grad[0].abs() < 1e-12, "{}", grad[0]);
    }
}
