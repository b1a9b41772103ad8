use super::grid::ImageGrid;
use crate::error::{Error, Result};

fn centered(img: &ImageGrid) -> ImageGrid {
    let m = img.mean();
    img.map(|v| v - m)
}

/// Normalized cross-correlation over the whole grid.
pub fn ncc(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_dims(b, "ncc")?;
    let u = centered(a);
    let v = centered(b);
    let uu = u.dot(&u);
    let vv = v.dot(&v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Degenerate("ncc of a constant image".into()));
    }
    Ok((u.dot(&v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Gradient of `ncc(x, reference)` with respect to `x`.
///
/// With `u = x - mean(x)` and `v = reference - mean(reference)` this is
/// `(v - (<u,v>/<u,u>) u) / (|u| |v|)`. Both `u` and `v` are zero-mean, so
/// projecting through the centering step leaves it unchanged up to
/// rounding; the explicit re-centering keeps the sum at zero.
pub fn ncc_gradient(x: &ImageGrid, reference: &ImageGrid) -> Result<ImageGrid> {
    x.ensure_same_dims(reference, "ncc_gradient")?;
    let u = centered(x);
    let v = centered(reference);
    let uu = u.dot(&u);
    let vv = v.dot(&v);
    if uu == 0.0 {
        return Err(Error::Degenerate("ncc gradient at a constant image".into()));
    }
    if vv == 0.0 {
        return Err(Error::Degenerate("ncc gradient against a constant reference".into()));
    }
    let scale = 1.0 / (uu.sqrt() * vv.sqrt());
    let proj = u.dot(&v) / uu;
    let grad = ImageGrid::new(
        x.height(),
        x.width(),
        v.data()
            .iter()
            .zip(u.data())
            .map(|(vi, ui)| (vi - proj * ui) * scale)
            .collect(),
    )?;
    Ok(centered(&grad))
}
