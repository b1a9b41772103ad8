//! Procedural head-like phantoms: nested smoothed ellipses with tissue-like
//! intensity classes plus a few random blobs, min-max normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numeric::{minmax_normalize, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    /// Gaussian blur in pixels applied before normalization.
    pub blur_sigma: f64,
    pub max_blobs: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 32,
            blur_sigma: 0.7,
            max_blobs: 3,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = img.dims();
    let pass = |src: &ImageGrid, horizontal: bool| {
        ImageGrid::from_fn(h, w, |i, j| {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let off = t as isize - radius;
                let (si, sj) = if horizontal {
                    (i as isize, j as isize + off)
                } else {
                    (i as isize + off, j as isize)
                };
                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                    acc += kv * src.get(si as usize, sj as usize);
                }
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// One phantom drawn from `rng`.
pub fn phantom_image(cfg: &PhantomConfig, rng: &mut impl Rng) -> ImageGrid {
    let n = cfg.size;
    let jitter = |rng: &mut dyn rand::RngCore, v: f64, d: f64| v + (rng.gen::<f64>() * 2.0 - 1.0) * d;
    let cx = jitter(rng, 0.0, 0.05);
    let cy = jitter(rng, 0.0, 0.05);
    let angle = jitter(rng, 0.0, 0.15);
    let head = Ellipse {
        cx,
        cy,
        a: jitter(rng, 0.8, 0.06),
        b: jitter(rng, 0.9, 0.06),
        angle,
    };
    let brain = Ellipse {
        a: head.a * 0.86,
        b: head.b * 0.86,
        ..head
    };
    let white = Ellipse {
        a: head.a * jitter(rng, 0.6, 0.05),
        b: head.b * jitter(rng, 0.62, 0.05),
        ..head
    };
    let ventricles = [-1.0, 1.0].map(|side| Ellipse {
        cx: cx + side * jitter(rng, 0.12, 0.03),
        cy: cy + jitter(rng, -0.05, 0.05),
        a: jitter(rng, 0.07, 0.02),
        b: jitter(rng, 0.22, 0.05),
        angle: angle + side * jitter(rng, 0.25, 0.1),
    });
    let scalp_level = jitter(rng, 0.5, 0.04);
    let grey_level = jitter(rng, 0.55, 0.03);
    let white_level = jitter(rng, 0.85, 0.03);
    let csf_level = jitter(rng, 0.15, 0.03);
    let blobs: Vec<(Ellipse, f64)> = (0..rng.gen_range(0..=cfg.max_blobs))
        .map(|_| {
            let r = rng.gen_range(0.05..0.14);
            let e = Ellipse {
                cx: cx + rng.gen_range(-0.4..0.4),
                cy: cy + rng.gen_range(-0.45..0.45),
                a: r,
                b: r * rng.gen_range(0.6..1.4),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            };
            let level = [csf_level, grey_level, white_level, 1.0][rng.gen_range(0..4)];
            (e, level)
        })
        .collect();

    let img = ImageGrid::from_fn(n, n, |i, j| {
        let y = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        let x = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        if !head.contains(x, y) {
            return 0.0;
        }
        if !brain.contains(x, y) {
            return scalp_level;
        }
        if ventricles.iter().any(|v| v.contains(x, y)) {
            return csf_level;
        }
        if let Some((_, level)) = blobs.iter().find(|(e, _)| e.contains(x, y)) {
            return *level;
        }
        if white.contains(x, y) {
            white_level
        } else {
            grey_level
        }
    });
    minmax_normalize(&gaussian_blur(&img, cfg.blur_sigma)).expect("phantom is finite")
}

/// `count` phantoms from a fixed seed.
pub fn phantom_corpus(cfg: &PhantomConfig, count: usize, seed: u64) -> Vec<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| phantom_image(cfg, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_normalized_and_varied() {
        let imgs = phantom_corpus(&PhantomConfig::default(), 4, 1);
        for img in &imgs {
            assert_eq!(img.dims(), (32, 32));
            assert_eq!(img.min(), 0.0);
            assert_eq!(img.max(), 1.0);
        }
        assert_ne!(imgs[0], imgs[1]);
        assert_eq!(imgs, phantom_corpus(&PhantomConfig::default(), 4, 1));
    }

    #[test]
    fn blur_preserves_mass_in_the_interior() {
        let mut img = ImageGrid::zeros(15, 15);
        img.set(7, 7, 1.0);
        let blurred = gaussian_blur(&img, 1.0);
        assert!((blurred.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
