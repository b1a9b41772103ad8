use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::grid::ImageGrid;

/// Row-major complex grid holding a 2D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn transform(data: &mut [Complex64], height: usize, width: usize, direction: FftDirection) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(width, direction);
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for j in 0..width {
        for i in 0..height {
            column[i] = data[i * width + j];
        }
        col_fft.process(&mut column);
        for i in 0..height {
            data[i * width + j] = column[i];
        }
    }
}

/// Unnormalized forward 2D DFT.
pub fn dft2(img: &ImageGrid) -> Spectrum {
    let (height, width) = img.dims();
    let mut data: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, height, width, FftDirection::Forward);
    Spectrum {
        height,
        width,
        data,
    }
}

/// Inverse 2D DFT scaled by `1/(HW)`; the imaginary residue is dropped.
pub fn idft2(spec: &Spectrum) -> ImageGrid {
    let mut data = spec.data.clone();
    transform(&mut data, spec.height, spec.width, FftDirection::Inverse);
    let scale = 1.0 / (spec.height * spec.width) as f64;
    ImageGrid::new(
        spec.height,
        spec.width,
        data.iter().map(|c| c.re * scale).collect(),
    )
    .expect("spectrum dimensions are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn constant_has_only_dc() {
        let spec = dft2(&ImageGrid::filled(6, 4, 0.75));
        assert!((spec.get(0, 0).re - 0.75 * 24.0).abs() < 1e-12);
        for (k, c) in spec.data.iter().enumerate().skip(1) {
            assert!(c.norm() < 1e-12, "bin {k} = {c}");
        }
    }

    #[test]
    fn roundtrip() {
        let x = random_grid(16, 16);
        assert!(idft2(&dft2(&x)).max_abs_diff(&x) <= 1e-9);
        let y = random_grid(6, 10);
        assert!(idft2(&dft2(&y)).max_abs_diff(&y) <= 1e-9);
    }

    #[test]
    fn parseval() {
        let x = random_grid(16, 12);
        let lhs = x.dot(&x);
        let rhs = dft2(&x).energy() / (16.0 * 12.0);
        assert!((lhs - rhs).abs() <= 1e-9);
    }
}
