use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::arch::{FlowArchitecture, LayerKind, LayerSpec};
use super::layers::{self, CouplingNet, NetTrace};
use crate::error::{Error, Result};
use crate::numeric::ImageGrid;

/// Flattened latent vector. `segments` lists the lengths of the parts
/// factored out at each level, in level order, ending with the final level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub segments: Vec<usize>,
}

impl LatentState {
    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            z: self.z.iter().map(|v| v * factor).collect(),
            segments: self.segments.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Result of pushing a point through the flow in either direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput<T> {
    pub value: T,
    pub log_det: f64,
}

pub(crate) struct LayerCache {
    pub input: Vec<f64>,
    pub net: Option<NetTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    arch: FlowArchitecture,
    params: Vec<f64>,
    actnorm_initialized: bool,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, scale: f64) -> f64 {
    let std = scale * (2.0 / fan_in as f64).sqrt();
    Normal::new(0.0, std).expect("positive std").sample(rng)
}

impl FlowModel {
    /// Every layer is the identity: zero actnorm log-scale and bias,
    /// identity mixing, zero coupling outputs.
    pub fn identity(arch: FlowArchitecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: vec![0.0; arch.parameter_count()],
            actnorm_initialized: true,
        })
    }

    /// Training initialization: random mixing factors, He-initialized hidden
    /// convolutions and a zero final convolution, so each coupling starts as
    /// the identity. Actnorm is left for [`FlowModel::actnorm_initialize`].
    pub fn new(arch: FlowArchitecture, seed: u64) -> Result<Self> {
        let mut model = Self::identity(arch)?;
        model.actnorm_initialized = false;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.fill_random(&mut rng, false);
        Ok(model)
    }

    /// Fully random, well-conditioned model for tests and demos; actnorm
    /// and final coupling layers are randomized too.
    pub fn random(arch: FlowArchitecture, seed: u64) -> Result<Self> {
        let mut model = Self::identity(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.fill_random(&mut rng, true);
        Ok(model)
    }

    fn fill_random(&mut self, rng: &mut ChaCha8Rng, everything: bool) {
        let arch = self.arch;
        for spec in arch.layers() {
            let p = &mut self.params[spec.offset..spec.offset + spec.len];
            match spec.kind {
                LayerKind::ActNorm if everything => {
                    p.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
                }
                LayerKind::Mix => {
                    let c = spec.channels;
                    for i in 0..c {
                        for j in 0..c {
                            p[i * c + j] = if i == j {
                                if everything {
                                    rng.gen_range(-0.3..0.3)
                                } else {
                                    0.0
                                }
                            } else {
                                rng.gen_range(-0.3..0.3) / (c as f64).sqrt()
                            };
                        }
                    }
                }
                LayerKind::Coupling { .. } => {
                    let net = CouplingNet::new(&arch, &spec);
                    let mut off = 0;
                    let last = net.convs().len() - 1;
                    for (k, conv) in net.convs().iter().enumerate() {
                        let (w, rest) = p[off..off + conv.param_len()].split_at_mut(conv.weight_len());
                        if k < last {
                            w.iter_mut().for_each(|v| *v = he_normal(rng, conv.cin * 9, 1.0));
                        } else if everything {
                            w.iter_mut().for_each(|v| *v = he_normal(rng, conv.cin * 9, 0.05));
                            rest.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
                        }
                        off += conv.param_len();
                    }
                }
                _ => {}
            }
        }
    }

    /// Rebuilds a model from a stored parameter vector.
    pub fn from_parameters(arch: FlowArchitecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.parameter_count();
        if params.len() != expected {
            return Err(Error::InvalidInput(format!(
                "architecture needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            arch,
            params,
            actnorm_initialized: true,
        })
    }

    pub fn arch(&self) -> &FlowArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn dimension(&self) -> usize {
        self.arch.dimension()
    }

    /// Mutable `(log_scale, bias)` of the actnorm in `(level, step)`.
    pub fn actnorm_params_mut(&mut self, level: usize, step: usize) -> Option<(&mut [f64], &mut [f64])> {
        let spec = self
            .arch
            .layers()
            .into_iter()
            .find(|l| l.kind == LayerKind::ActNorm && l.level == level && l.step == step)?;
        let p = &mut self.params[spec.offset..spec.offset + spec.len];
        Some(p.split_at_mut(spec.channels))
    }

    fn layer_params(&self, spec: &LayerSpec) -> &[f64] {
        &self.params[spec.offset..spec.offset + spec.len]
    }

    fn check_image(&self, x: &ImageGrid) -> Result<()> {
        if x.dims() != (self.arch.input_height, self.arch.input_width) {
            return Err(Error::Dimension(format!(
                "model expects {}x{}, got {}x{}",
                self.arch.input_height,
                self.arch.input_width,
                x.height(),
                x.width()
            )));
        }
        x.ensure_finite("flow input")
    }

    pub(crate) fn forward_pass(
        &self,
        x: &ImageGrid,
        mut cache: Option<&mut Vec<LayerCache>>,
    ) -> Result<FlowOutput<LatentState>> {
        self.check_image(x)?;
        let mut cur = x.data().to_vec();
        let mut z = Vec::with_capacity(x.len());
        let mut segments = Vec::new();
        let mut log_det = 0.0;
        for spec in self.arch.layers() {
            let p = self.layer_params(&spec);
            let (next, ld, net) = match spec.kind {
                LayerKind::Squeeze => (
                    layers::squeeze(&cur, spec.channels, spec.height, spec.width),
                    0.0,
                    None,
                ),
                LayerKind::ActNorm => {
                    let (y, ld) = layers::actnorm_forward(&spec, p, &cur);
                    (y, ld, None)
                }
                LayerKind::Mix => {
                    let (y, ld) = layers::mix_forward(&spec, p, &cur);
                    (y, ld, None)
                }
                LayerKind::Coupling { flip } => {
                    let net = CouplingNet::new(&self.arch, &spec);
                    let (y, ld, trace) = layers::coupling_forward(&net, &spec, flip, p, &cur);
                    (y, ld, Some(trace))
                }
                LayerKind::Split => {
                    let keep = spec.channels / 2 * spec.pixels();
                    z.extend_from_slice(&cur[keep..]);
                    segments.push(cur.len() - keep);
                    let mut kept = std::mem::take(&mut cur);
                    kept.truncate(keep);
                    (kept, 0.0, None)
                }
            };
            if !ld.is_finite() || next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalAbort {
                    step: 0,
                    location: spec.describe(),
                });
            }
            if let Some(cache) = cache.as_deref_mut() {
                cache.push(LayerCache {
                    input: std::mem::replace(&mut cur, next),
                    net,
                });
            } else {
                cur = next;
            }
            log_det += ld;
        }
        segments.push(cur.len());
        z.extend_from_slice(&cur);
        Ok(FlowOutput {
            value: LatentState { z, segments },
            log_det,
        })
    }

    /// `z = f(x)` with the accumulated `log|det df/dx|`.
    pub fn forward(&self, x: &ImageGrid) -> Result<FlowOutput<LatentState>> {
        self.forward_pass(x, None)
    }

    /// `x = f^-1(z)`; the returned log-determinant is that of the inverse map.
    pub fn inverse(&self, latent: &LatentState) -> Result<FlowOutput<ImageGrid>> {
        self.inverse_flat(&latent.z)
    }

    pub fn inverse_flat(&self, z: &[f64]) -> Result<FlowOutput<ImageGrid>> {
        let d = self.dimension();
        if z.len() != d {
            return Err(Error::Dimension(format!(
                "latent has {} values, model dimension is {d}",
                z.len()
            )));
        }
        if let Some(k) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite latent entry {k}")));
        }
        let layers = self.arch.layers();
        // the final level's tensor sits at the tail of z
        let last = layers.last().expect("at least one layer");
        let tail = last.channels * last.pixels();
        let mut end = d - tail;
        let mut cur = z[end..].to_vec();
        let mut log_det = 0.0;
        for spec in layers.iter().rev() {
            let p = self.layer_params(spec);
            cur = match spec.kind {
                LayerKind::Squeeze => layers::unsqueeze(&cur, spec.channels, spec.height, spec.width),
                LayerKind::ActNorm => {
                    let (x, ld) = layers::actnorm_inverse(spec, p, &cur);
                    log_det += ld;
                    x
                }
                LayerKind::Mix => {
                    let (x, ld) = layers::mix_inverse(spec, p, &cur);
                    log_det += ld;
                    x
                }
                LayerKind::Coupling { flip } => {
                    let net = CouplingNet::new(&self.arch, spec);
                    let (x, ld) = layers::coupling_inverse(&net, spec, flip, p, &cur);
                    log_det += ld;
                    x
                }
                LayerKind::Split => {
                    let factored = spec.channels / 2 * spec.pixels();
                    let start = end - factored;
                    cur.extend_from_slice(&z[start..end]);
                    end = start;
                    cur
                }
            };
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalAbort {
                    step: 0,
                    location: format!("inverse of {}", spec.describe()),
                });
            }
        }
        Ok(FlowOutput {
            value: ImageGrid::new(self.arch.input_height, self.arch.input_width, cur)?,
            log_det,
        })
    }

    /// `log p_Z(f(x)) + log|det df/dx|` under a standard Gaussian latent.
    pub fn log_prob(&self, x: &ImageGrid) -> Result<f64> {
        let out = self.forward(x)?;
        Ok(gaussian_log_density(&out.value.z) + out.log_det)
    }

    /// Draws `z ~ N(0, temperature^2 I)` and decodes it.
    pub fn sample(&self, rng_seed: u64, temperature: f64) -> Result<ImageGrid> {
        Ok(self.inverse_flat(&self.draw_latent(rng_seed, temperature)?)?.value)
    }

    pub fn draw_latent(&self, rng_seed: u64, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampling temperature must be positive, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Ok((0..self.dimension())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                temperature * e
            })
            .collect())
    }

    /// Data-dependent actnorm initialization: every actnorm layer, in order,
    /// is set so its output has zero mean and unit variance per channel on
    /// `batch`.
    pub fn actnorm_initialize(&mut self, batch: &[ImageGrid]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::Degenerate(format!(
                "actnorm initialization needs at least 2 images, got {}",
                batch.len()
            )));
        }
        for x in batch {
            self.check_image(x)?;
        }
        if batch.iter().all(|x| x == &batch[0]) {
            return Err(Error::Degenerate(
                "actnorm initialization batch has no variation between images".into(),
            ));
        }
        let arch = self.arch;
        let mut acts: Vec<Vec<f64>> = batch.iter().map(|x| x.data().to_vec()).collect();
        for spec in arch.layers() {
            if spec.kind == LayerKind::ActNorm {
                let (c, hw) = (spec.channels, spec.pixels());
                let n = (acts.len() * hw) as f64;
                let mut log_scale = vec![0.0; c];
                let mut bias = vec![0.0; c];
                for ch in 0..c {
                    let vals = || acts.iter().flat_map(|a| a[ch * hw..(ch + 1) * hw].iter());
                    let mean = vals().sum::<f64>() / n;
                    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    if !(var > 1e-20) {
                        return Err(Error::Degenerate(format!(
                            "zero variance in channel {ch} at {}",
                            spec.describe()
                        )));
                    }
                    log_scale[ch] = -0.5 * var.ln();
                    bias[ch] = -mean * log_scale[ch].exp();
                }
                let p = &mut self.params[spec.offset..spec.offset + spec.len];
                p[..c].copy_from_slice(&log_scale);
                p[c..].copy_from_slice(&bias);
            }
            let p = &self.params[spec.offset..spec.offset + spec.len];
            for a in acts.iter_mut() {
                *a = match spec.kind {
                    LayerKind::Squeeze => layers::squeeze(a, spec.channels, spec.height, spec.width),
                    LayerKind::ActNorm => layers::actnorm_forward(&spec, p, a).0,
                    LayerKind::Mix => layers::mix_forward(&spec, p, a).0,
                    LayerKind::Coupling { flip } => {
                        let net = CouplingNet::new(&arch, &spec);
                        layers::coupling_forward(&net, &spec, flip, p, a).0
                    }
                    LayerKind::Split => a[..spec.channels / 2 * spec.pixels()].to_vec(),
                };
            }
        }
        self.actnorm_initialized = true;
        Ok(())
    }
}

/// Standard-normal log density of a flat vector.
pub fn gaussian_log_density(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}
