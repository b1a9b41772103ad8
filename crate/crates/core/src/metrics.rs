//! PSNR, SSIM and the method-by-domain evaluation report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::{minmax_normalize, ImageGrid};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio at peak 1; identical inputs give `+inf`.
pub fn psnr(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    x.ensure_same_dims(reference, "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(data: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * data[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 windows.
pub fn ssim(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    x.ensure_same_dims(reference, "ssim")?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let a = x.data();
    let b = reference.data();
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &g);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &g);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &g);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Anything that maps a source image to a harmonized one.
pub trait Harmonizer: Sync {
    fn name(&self) -> &str;
    fn apply(&self, source: &ImageGrid) -> Result<ImageGrid>;
}

/// Wraps a closure as a named [`Harmonizer`].
pub struct FnHarmonizer<F> {
    name: String,
    f: F,
}

impl<F> FnHarmonizer<F>
where
    F: Fn(&ImageGrid) -> Result<ImageGrid> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Harmonizer for FnHarmonizer<F>
where
    F: Fn(&ImageGrid) -> Result<ImageGrid> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn apply(&self, source: &ImageGrid) -> Result<ImageGrid> {
        (self.f)(source)
    }
}

/// One named set of source images with matched targets.
pub struct Domain<'a> {
    pub name: String,
    pub sources: &'a [ImageGrid],
    pub targets: &'a [ImageGrid],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub domain: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "method\tdomain\tpsnr_mean\tpsnr_std\tssim_mean\tssim_std\tn";

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Mean and population standard deviation. When every value is `+inf` the
/// result is `(inf, 0)`; a mix of finite and infinite values has mean `inf`
/// and undefined spread, reported as `inf`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|v| *v == f64::INFINITY) {
        return (f64::INFINITY, 0.0);
    }
    if values.iter().any(|v| v.is_infinite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ReportRow {
    pub fn from_scores(method: &str, domain: &str, psnrs: &[f64], ssims: &[f64]) -> Self {
        let (psnr_mean, psnr_std) = mean_std(psnrs);
        let (ssim_mean, ssim_std) = mean_std(ssims);
        Self {
            method: method.into(),
            domain: domain.into(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            n_images: psnrs.len(),
        }
    }

    pub fn tsv_fields(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.method,
            self.domain,
            fmt_value(self.psnr_mean),
            fmt_value(self.psnr_std),
            fmt_value(self.ssim_mean),
            fmt_value(self.ssim_std),
            self.n_images
        )
    }
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.tsv_fields());
        }
        out
    }

    pub fn row(&self, method: &str, domain: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.domain == domain)
    }
}

/// PSNR and SSIM after min-max normalizing both images.
pub fn score_pair(x: &ImageGrid, target: &ImageGrid) -> Result<(f64, f64)> {
    let a = minmax_normalize(x)?;
    let b = minmax_normalize(target)?;
    Ok((psnr(&a, &b)?, ssim(&a, &b)?))
}

fn score_all(outputs: &[ImageGrid], targets: &[ImageGrid]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::with_capacity(outputs.len());
    let mut s = Vec::with_capacity(outputs.len());
    for (x, t) in outputs.iter().zip(targets) {
        let (a, b) = score_pair(x, t)?;
        p.push(a);
        s.push(b);
    }
    Ok((p, s))
}

/// Scores every method on every domain. For each domain the untouched
/// `Source` row comes first, then the methods in the order given.
pub fn evaluate(methods: &[&dyn Harmonizer], domains: &[Domain<'_>]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for d in domains {
        if d.sources.len() != d.targets.len() {
            return Err(Error::InvalidInput(format!(
                "domain {}: {} sources vs {} targets",
                d.name,
                d.sources.len(),
                d.targets.len()
            )));
        }
        if d.sources.is_empty() {
            return Err(Error::InvalidInput(format!("domain {} is empty", d.name)));
        }
        let (p, s) = score_all(d.sources, d.targets)?;
        rows.push(ReportRow::from_scores("Source", &d.name, &p, &s));
        for m in methods {
            let outputs = d
                .sources
                .iter()
                .map(|x| m.apply(x))
                .collect::<Result<Vec<_>>>()?;
            let (p, s) = score_all(&outputs, d.targets)?;
            rows.push(ReportRow::from_scores(m.name(), &d.name, &p, &s));
        }
    }
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(n, n, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let x = ImageGrid::filled(8, 8, 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = ImageGrid::filled(8, 8, 0.6);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let z = ImageGrid::filled(8, 8, 0.51);
        assert!((psnr(&x, &z).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let x = random(1, 16);
        let noise = random(2, 16).map(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let p = psnr(&x, &x.add_scaled(&noise, amp)).unwrap();
            assert!(p < last);
            assert_eq!(p, psnr(&x.add_scaled(&noise, amp), &x).unwrap());
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = random(3, 24);
        let b = random(4, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        let half = ImageGrid::from_fn(16, 16, |_, j| if j < 8 { 0.0 } else { 1.0 });
        let inv = half.map(|v| 1.0 - v);
        assert!(ssim(&half, &inv).unwrap() < 0.0);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = random(5, 12);
        let b = random(6, 12);
        let g = gaussian_window();
        let mut total = 0.0;
        for oi in 0..2 {
            for oj in 0..2 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let wt = g[u] * g[v];
                        let (x, y) = (a.get(oi + u, oj + v), b.get(oi + u, oj + v));
                        ma += wt * x;
                        mb += wt * y;
                        aa += wt * x * x;
                        bb += wt * y * y;
                        ab += wt * x * y;
                    }
                }
                let (va, vb, c) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * c + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim(&random(7, 8), &random(8, 8)).is_err());
    }

    #[test]
    fn evaluate_identity_on_targets() {
        let targets = vec![random(9, 16), random(10, 16)];
        let id = FnHarmonizer::new("Identity", |x: &ImageGrid| Ok(x.clone()));
        let report = evaluate(
            &[&id],
            &[Domain {
                name: "target".into(),
                sources: &targets,
                targets: &targets,
            }],
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].method, "Source");
        let row = report.row("Identity", "target").unwrap();
        assert_eq!(row.psnr_mean, f64::INFINITY);
        assert_eq!(row.psnr_std, 0.0);
        assert!((row.ssim_mean - 1.0).abs() < 1e-9);
        let tsv = report.to_tsv();
        assert!(tsv.starts_with(REPORT_HEADER));
        assert!(tsv.contains("Identity\ttarget\tinf\t0.0000\t1.0000\t0.0000\t2"));
    }

    #[test]
    fn single_image_has_zero_spread() {
        let s = vec![random(11, 16)];
        let t = vec![random(12, 16)];
        let id = FnHarmonizer::new("Identity", |x: &ImageGrid| Ok(x.clone()));
        let report = evaluate(
            &[&id],
            &[Domain {
                name: "d".into(),
                sources: &s,
                targets: &t,
            }],
        )
        .unwrap();
        assert_eq!(report.rows[1].psnr_std, 0.0);
        assert_eq!(report.rows[1].n_images, 1);
    }

    #[test]
    fn evaluate_rejects_length_mismatch() {
        let s = vec![random(13, 16)];
        let t = vec![random(14, 16), random(15, 16)];
        assert!(evaluate(
            &[],
            &[Domain {
                name: "d".into(),
                sources: &s,
                targets: &t,
            }]
        )
        .is_err());
    }
}
