//! Forward-difference gradient operator, edge masks, and the masked
//! anisotropic total-variation penalty with its subgradient.

use super::grid::ImageGrid;
use crate::error::{Error, Result};

/// Forward differences. `dx` has a zero last column, `dy` a zero last row.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub dx: ImageGrid,
    pub dy: ImageGrid,
}

impl GradientField {
    /// Anisotropic magnitude `|dx| + |dy|` per pixel.
    pub fn magnitude(&self) -> ImageGrid {
        let mut out = self.dx.map(f64::abs);
        for (m, v) in out.data_mut().iter_mut().zip(self.dy.data()) {
            *m += v.abs();
        }
        out
    }
}

/// Binary mask, 1 on non-edge pixels and 0 on edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    values: ImageGrid,
    threshold: f64,
}

impl EdgeMask {
    pub fn all_ones(height: usize, width: usize) -> Self {
        Self {
            values: ImageGrid::filled(height, width, 1.0),
            threshold: f64::INFINITY,
        }
    }

    pub fn all_zeros(height: usize, width: usize) -> Self {
        Self {
            values: ImageGrid::zeros(height, width),
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn values(&self) -> &ImageGrid {
        &self.values
    }

    /// The gradient-magnitude cutoff that produced this mask.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// Number of pixels marked as edges.
    pub fn masked_out(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }
}

pub fn spatial_gradient(img: &ImageGrid) -> Result<GradientField> {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "spatial gradient needs at least 2x2, got {h}x{w}"
        )));
    }
    let mut dx = ImageGrid::zeros(h, w);
    let mut dy = ImageGrid::zeros(h, w);
    let src = img.data();
    {
        let out = dx.data_mut();
        for i in 0..h {
            let row = &src[i * w..(i + 1) * w];
            for j in 0..w - 1 {
                out[i * w + j] = row[j + 1] - row[j];
            }
        }
    }
    {
        let out = dy.data_mut();
        for i in 0..h - 1 {
            for j in 0..w {
                out[i * w + j] = src[(i + 1) * w + j] - src[i * w + j];
            }
        }
    }
    Ok(GradientField { dx, dy })
}

/// Inverse empirical CDF of `values` at probability `q`: the smallest sample
/// `v` with at least `ceil(q * n)` samples `<= v`.
fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Marks edges of `img`: pixels whose gradient magnitude exceeds the
/// `quantile`-th empirical quantile are set to 0, all others to 1.
pub fn edge_mask(img: &ImageGrid, quantile: f64) -> Result<EdgeMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Config(format!(
            "mask quantile must lie in (0, 1), got {quantile}"
        )));
    }
    img.ensure_finite("edge_mask")?;
    let magnitude = spatial_gradient(img)?.magnitude();
    let threshold = empirical_quantile(magnitude.data(), quantile);
    let values = magnitude.map(|m| if m <= threshold { 1.0 } else { 0.0 });
    Ok(EdgeMask { values, threshold })
}

fn ensure_mask_dims(x: &ImageGrid, mask: &EdgeMask) -> Result<()> {
    if x.dims() != mask.dims() {
        let (mh, mw) = mask.dims();
        return Err(Error::Dimension(format!(
            "image {}x{} vs mask {mh}x{mw}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// `sum(mask * (|dx| + |dy|))`.
pub fn masked_tv(x: &ImageGrid, mask: &EdgeMask) -> Result<f64> {
    ensure_mask_dims(x, mask)?;
    let g = spatial_gradient(x)?;
    Ok(mask
        .values
        .data()
        .iter()
        .zip(g.dx.data().iter().zip(g.dy.data()))
        .map(|(m, (a, b))| m * (a.abs() + b.abs()))
        .sum())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`masked_tv`], i.e. `G^T (mask * sign(G x))` with `sign(0) = 0`.
pub fn masked_tv_subgradient(x: &ImageGrid, mask: &EdgeMask) -> Result<ImageGrid> {
    ensure_mask_dims(x, mask)?;
    let (h, w) = x.dims();
    let g = spatial_gradient(x)?;
    let m = mask.values.data();
    let mut out = ImageGrid::zeros(h, w);
    let o = out.data_mut();
    for i in 0..h {
        for j in 0..w - 1 {
            let k = i * w + j;
            let p = m[k] * sign(g.dx.data()[k]);
            o[k + 1] += p;
            o[k] -= p;
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            let k = i * w + j;
            let p = m[k] * sign(g.dy.data()[k]);
            o[k + w] += p;
            o[k] -= p;
        }
    }
    Ok(out)
}
