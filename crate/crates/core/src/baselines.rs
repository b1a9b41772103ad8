//! Simulated source domains and the two classical comparison methods:
//! histogram matching against a pooled reference and low-frequency
//! spectrum replacement against the reference mean image.

use crate::error::{Error, Result};
use crate::numeric::{dft2, idft2, mean_image, minmax_normalize, ImageGrid, Spectrum};

pub const HISTOGRAM_BINS: usize = 256;
pub const DEFAULT_LOG_EPSILON: f64 = 0.01;
pub const DEFAULT_CUTOFF_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainTransform {
    Exp,
    Log { epsilon: f64 },
    Gamma { power: f64 },
}

impl DomainTransform {
    pub fn log() -> Self {
        DomainTransform::Log {
            epsilon: DEFAULT_LOG_EPSILON,
        }
    }

    pub fn gamma(power: f64) -> Self {
        DomainTransform::Gamma { power }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DomainTransform::Exp => Ok(()),
            DomainTransform::Log { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            DomainTransform::Log { epsilon } => Err(Error::Config(format!(
                "log epsilon must be positive, got {epsilon}"
            ))),
            DomainTransform::Gamma { power } if power > 0.0 && power.is_finite() => Ok(()),
            DomainTransform::Gamma { power } => Err(Error::Config(format!(
                "gamma power must be positive, got {power}"
            ))),
        }
    }

    /// Short name used in reports and manifests, e.g. `gamma0.7`.
    pub fn label(&self) -> String {
        match *self {
            DomainTransform::Exp => "exp".into(),
            DomainTransform::Log { .. } => "log".into(),
            DomainTransform::Gamma { power } => format!("gamma{power}"),
        }
    }

    fn apply(&self, v: f64) -> f64 {
        match *self {
            DomainTransform::Exp => v.exp(),
            DomainTransform::Log { epsilon } => (v + epsilon).ln(),
            DomainTransform::Gamma { power } => v.powf(power),
        }
    }
}

fn ensure_unit_range(x: &ImageGrid, what: &str) -> Result<()> {
    x.ensure_finite(what)?;
    if x.min() < 0.0 || x.max() > 1.0 {
        return Err(Error::InvalidInput(format!(
            "{what}: values must lie in [0, 1], got [{}, {}]",
            x.min(),
            x.max()
        )));
    }
    Ok(())
}

/// `minmax_normalize(T(x))`.
pub fn simulate_domain(x: &ImageGrid, t: DomainTransform) -> Result<ImageGrid> {
    t.validate()?;
    ensure_unit_range(x, "simulate_domain")?;
    minmax_normalize(&x.map(|v| t.apply(v)))
}

/// Target-side statistics the classical baselines match against.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub histogram: Vec<u64>,
    pub mean_image: ImageGrid,
    pub low_freq_reference: Spectrum,
}

fn bin_of(v: f64) -> usize {
    ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

impl ReferenceStats {
    pub fn from_images(images: &[ImageGrid]) -> Result<Self> {
        let mean = mean_image(images)?;
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        for img in images {
            ensure_unit_range(img, "reference image")?;
            for &v in img.data() {
                histogram[bin_of(v)] += 1;
            }
        }
        Ok(Self {
            low_freq_reference: dft2(&mean),
            mean_image: mean,
            histogram,
        })
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().sum()
    }

    /// Reference CDF evaluated at `v`, linear inside each bin.
    pub fn cdf(&self, v: f64) -> f64 {
        let total = self.total() as f64;
        if v <= 0.0 {
            return 0.0;
        }
        if v >= 1.0 {
            return 1.0;
        }
        let scaled = v * HISTOGRAM_BINS as f64;
        let b = (scaled.floor() as usize).min(HISTOGRAM_BINS - 1);
        let below: u64 = self.histogram[..b].iter().sum();
        (below as f64 + (scaled - b as f64) * self.histogram[b] as f64) / total
    }

    /// Inverse of [`ReferenceStats::cdf`] for `q` in (0, 1].
    pub fn quantile(&self, q: f64) -> f64 {
        let target = q * self.total() as f64;
        let mut below = 0.0;
        for (b, &count) in self.histogram.iter().enumerate() {
            let count = count as f64;
            if count > 0.0 && below + count >= target {
                let frac = ((target - below) / count).clamp(0.0, 1.0);
                return (b as f64 + frac) / HISTOGRAM_BINS as f64;
            }
            below += count;
        }
        1.0
    }
}

/// Maps each pixel through its own empirical CDF, then through the inverse
/// of the reference CDF.
pub fn histogram_match(x: &ImageGrid, reference: &ReferenceStats) -> Result<ImageGrid> {
    if reference.total() == 0 {
        return Err(Error::InvalidInput("reference histogram is empty".into()));
    }
    ensure_unit_range(x, "histogram_match")?;
    let mut sorted = x.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(x.map(|v| {
        let at_or_below = sorted.partition_point(|&s| s <= v) as f64;
        reference.quantile(at_or_below / n).clamp(0.0, 1.0)
    }))
}

/// Radial frequency index of DFT bin `(k, l)` on an `h x w` grid.
pub fn radial_frequency(k: usize, l: usize, h: usize, w: usize) -> f64 {
    let fk = k.min(h - k) as f64;
    let fl = l.min(w - l) as f64;
    fk.hypot(fl)
}

/// Largest radial index on the grid; a cutoff at or above it replaces every coefficient.
pub fn nyquist_radius(h: usize, w: usize) -> f64 {
    (h as f64 / 2.0).hypot(w as f64 / 2.0)
}

/// Low-frequency replacement without the final clamp.
pub fn low_freq_replace_raw(x: &ImageGrid, reference: &ReferenceStats, cutoff_radius: f64) -> Result<ImageGrid> {
    if !(cutoff_radius > 0.0) {
        return Err(Error::Config(format!(
            "cutoff radius must be positive, got {cutoff_radius}"
        )));
    }
    x.ensure_same_dims(&reference.mean_image, "low_freq_replace")?;
    x.ensure_finite("low_freq_replace")?;
    let (h, w) = x.dims();
    let everything = cutoff_radius >= nyquist_radius(h, w);
    let mut spec = dft2(x);
    for k in 0..h {
        for l in 0..w {
            if everything || radial_frequency(k, l, h, w) < cutoff_radius {
                spec.data[k * w + l] = reference.low_freq_reference.get(k, l);
            }
        }
    }
    Ok(idft2(&spec))
}

pub fn low_freq_replace(x: &ImageGrid, reference: &ReferenceStats, cutoff_radius: f64) -> Result<ImageGrid> {
    Ok(low_freq_replace_raw(x, reference, cutoff_radius)?.clamp(0.0, 1.0))
}
