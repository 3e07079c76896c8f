//! Periodic grids and the discrete Fourier transforms shared by the solvers
//! and the neural operator.
//!
//! Convention: the forward transform is the unnormalized sum
//! `c(k) = Σ_j v_j e^{-2πi jk/n}` and the inverse divides by the total point
//! count. Spectral coefficients are laid out in FFT order
//! `0, 1, …, n/2, -n/2+1, …, -1` along every axis.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Grid(format!(
            "transform length {n} is not a power of two"
        )));
    }
    Ok(())
}

/// One-dimensional periodic grid on `[0, length)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid1D {
    n: usize,
    length: f64,
}

impl Grid1D {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::Grid(format!(
                "point count {n} must be a power of two and at least 8"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Grid(format!("domain length {length} must be positive")));
        }
        Ok(Grid1D { n, length })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Grid spacing. Exact for power-of-two point counts.
    pub fn dx(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|j| j as f64 * self.dx()).collect()
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        axis_wavenumbers(self.n, self.length)
    }
}

/// Two-dimensional periodic grid on the unit torus `[0,1)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        for n in [nx, ny] {
            if n < 8 || !n.is_power_of_two() {
                return Err(Error::Grid(format!(
                    "point count {n} must be a power of two and at least 8"
                )));
            }
        }
        Ok(Grid2D { nx, ny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis wavenumbers `(kx, ky)`; the domain length is 1 on both axes.
    pub fn wavenumbers(&self) -> (Vec<f64>, Vec<f64>) {
        (
            axis_wavenumbers(self.nx, 1.0),
            axis_wavenumbers(self.ny, 1.0),
        )
    }
}

/// Signed integer index of FFT bin `j` on an axis of `n` points.
pub fn signed_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// `k_j = 2π j / L` in FFT order.
pub fn axis_wavenumbers(n: usize, length: f64) -> Vec<f64> {
    (0..n)
        .map(|j| 2.0 * PI * signed_index(j, n) as f64 / length)
        .collect()
}

/// Keep-mask for the 2/3 dealiasing rule on an axis of `n` points.
pub fn dealias_mask(n: usize) -> Vec<bool> {
    (0..n)
        .map(|j| 3 * signed_index(j, n).unsigned_abs() < n as u64)
        .collect()
}

/// Complex spectrum of a field sampled on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    pub shape: Vec<usize>,
    pub coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn get(&self, index: &[usize]) -> Complex64 {
        let mut flat = 0;
        for (i, n) in index.iter().zip(&self.shape) {
            flat = flat * n + i;
        }
        self.coeffs[flat]
    }

    /// Largest violation of `c(-k) = conj(c(k))`, relative to the largest
    /// coefficient magnitude.
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let scale = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let total = self.coeffs.len();
        let mut worst: f64 = 0.0;
        for flat in 0..total {
            let mut rem = flat;
            let mut mirror = 0;
            let mut stride = 1;
            for &n in self.shape.iter().rev() {
                let i = rem % n;
                rem /= n;
                mirror += ((n - i) % n) * stride;
                stride *= n;
            }
            let d = self.coeffs[flat] - self.coeffs[mirror].conj();
            worst = worst.max(d.norm());
        }
        worst / scale
    }
}

/// In-place unnormalized transform of `data` (row-major, `shape`) along `axis`.
pub fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, inverse: bool) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let fft = plan(n, inverse);
    if inner == 1 {
        fft.process(data);
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            for (j, v) in line.iter_mut().enumerate() {
                *v = data[base + j * inner + i];
            }
            fft.process(&mut line);
            for (j, v) in line.iter().enumerate() {
                data[base + j * inner + i] = *v;
            }
        }
    }
}

/// Unnormalized forward transform over every axis of `shape`.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize]) {
    for axis in 0..shape.len() {
        fft_axis(data, shape, axis, false);
    }
}

/// Inverse transform over every axis, divided by the point count.
pub fn ifft_nd(data: &mut [Complex64], shape: &[usize]) {
    for axis in 0..shape.len() {
        fft_axis(data, shape, axis, true);
    }
    let scale = 1.0 / data.len() as f64;
    for v in data.iter_mut() {
        *v *= scale;
    }
}

pub fn dft_forward(shape: &[usize], field: &[f64]) -> Result<SpectralField> {
    for &n in shape {
        check_len(n)?;
    }
    let total: usize = shape.iter().product();
    if total != field.len() {
        return Err(Error::shape(
            "dft_forward",
            format!("field of {} values on grid {:?}", field.len(), shape),
        ));
    }
    let mut coeffs: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut coeffs, shape);
    Ok(SpectralField {
        shape: shape.to_vec(),
        coeffs,
    })
}

/// Inverse transform returning the real part.
pub fn dft_inverse(spec: &SpectralField) -> Result<Vec<f64>> {
    for &n in &spec.shape {
        check_len(n)?;
    }
    let mut data = spec.coeffs.clone();
    ifft_nd(&mut data, &spec.shape);
    Ok(data.into_iter().map(|c| c.re).collect())
}

/// `F⁻¹((ik)^order F(v))`. The Nyquist mode is zeroed for odd orders.
pub fn spectral_derivative(grid: &Grid1D, field: &[f64], order: u32) -> Result<Vec<f64>> {
    if order < 1 {
        return Err(Error::InvalidArgument(
            "derivative order must be at least 1".into(),
        ));
    }
    let n = grid.n();
    let mut spec = dft_forward(&[n], field)?;
    let k = grid.wavenumbers();
    let factor = Complex64::new(0.0, 1.0).powu(order);
    for (j, c) in spec.coeffs.iter_mut().enumerate() {
        if order % 2 == 1 && j == n / 2 {
            *c = Complex64::new(0.0, 0.0);
        } else {
            *c *= factor * k[j].powi(order as i32);
        }
    }
    dft_inverse(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn wavenumbers_integer_on_two_pi() {
        let g = Grid1D::new(8, 2.0 * PI).unwrap();
        let k = g.wavenumbers();
        let expect = [0.0, 1.0, 2.0, 3.0, 4.0, -3.0, -2.0, -1.0];
        assert!(max_abs_diff(&k, &expect) < 1e-14);
    }

    #[test]
    fn wavenumbers_scale_with_length() {
        let g = Grid1D::new(8, 4.0 * PI).unwrap();
        let k = g.wavenumbers();
        assert!((k[1] - 0.5).abs() < 1e-15);
        assert!((k[2] - 1.0).abs() < 1e-15);
        let g = Grid1D::new(512, 64.0 * PI).unwrap();
        assert!((g.wavenumbers()[1] - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn dx_times_n_is_length() {
        for (n, l) in [(512, 64.0 * PI), (128, 128.0), (8, 2.0 * PI), (128, 64.0 * PI)] {
            let g = Grid1D::new(n, l).unwrap();
            assert_eq!(g.dx() * n as f64, l);
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(Grid1D::new(12, 1.0).is_err());
        assert!(Grid1D::new(4, 1.0).is_err());
        assert!(Grid1D::new(16, 0.0).is_err());
        assert!(Grid2D::new(64, 48).is_err());
        assert!(dft_forward(&[12], &[0.0; 12]).is_err());
    }

    #[test]
    fn constant_field_is_dc_only() {
        let spec = dft_forward(&[16], &[3.0; 16]).unwrap();
        assert!((spec.coeffs[0] - Complex64::new(48.0, 0.0)).norm() < 1e-12);
        for c in &spec.coeffs[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn pure_tone_has_unit_modes_only() {
        let g = Grid1D::new(64, 2.0 * PI).unwrap();
        let v: Vec<f64> = g.points().iter().map(|x| x.sin()).collect();
        let spec = dft_forward(&[64], &v).unwrap();
        for (j, c) in spec.coeffs.iter().enumerate() {
            let k = signed_index(j, 64).abs();
            if k == 1 {
                assert!((c.norm() - 32.0).abs() < 1e-10);
            } else {
                assert!(c.norm() < 1e-10, "mode {j}: {c}");
            }
        }
    }

    #[test]
    fn round_trip_and_parseval_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [8usize, 64, 128, 512] {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = dft_forward(&[n], &v).unwrap();
            // direct O(n²) summation as the oracle for the spectrum
            for k in [0, 1, n / 2, n - 1] {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, x) in v.iter().enumerate() {
                    let th = -2.0 * PI * (j * k) as f64 / n as f64;
                    acc += Complex64::new(th.cos(), th.sin()) * x;
                }
                assert!((acc - spec.coeffs[k]).norm() < 1e-10 * n as f64);
            }
            let e_space: f64 = v.iter().map(|x| x * x).sum();
            let e_spec: f64 = spec.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
            assert!((e_space - e_spec).abs() <= 1e-10 * e_space);
            let back = dft_inverse(&spec).unwrap();
            let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(max_abs_diff(&back, &v) <= 1e-12 * scale);
            assert!(spec.conjugate_symmetry_error() < 1e-12);
        }
    }

    #[test]
    fn two_dimensional_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = dft_forward(&[64, 64], &v).unwrap();
        assert!(spec.conjugate_symmetry_error() < 1e-12);
        let back = dft_inverse(&spec).unwrap();
        assert!(max_abs_diff(&back, &v) < 1e-12);
    }

    #[test]
    fn derivative_of_sine() {
        let g = Grid1D::new(64, 2.0 * PI).unwrap();
        let x = g.points();
        let v: Vec<f64> = x.iter().map(|x| x.sin()).collect();
        let d1 = spectral_derivative(&g, &v, 1).unwrap();
        let d2 = spectral_derivative(&g, &v, 2).unwrap();
        let cos: Vec<f64> = x.iter().map(|x| x.cos()).collect();
        let msin: Vec<f64> = x.iter().map(|x| -x.sin()).collect();
        assert!(max_abs_diff(&d1, &cos) < 1e-10);
        assert!(max_abs_diff(&d2, &msin) < 1e-10);
    }

    #[test]
    fn derivative_of_exp_sine() {
        let g = Grid1D::new(64, 2.0 * PI).unwrap();
        let x = g.points();
        let v: Vec<f64> = x.iter().map(|x| x.sin().exp()).collect();
        let d = spectral_derivative(&g, &v, 1).unwrap();
        let exact: Vec<f64> = x.iter().map(|x| x.cos() * x.sin().exp()).collect();
        assert!(max_abs_diff(&d, &exact) < 1e-8);
        assert!(spectral_derivative(&g, &v, 0).is_err());
    }

    #[test]
    fn dealias_mask_keeps_lower_two_thirds() {
        let m = dealias_mask(12 * 8);
        let kept = m.iter().filter(|&&b| b).count();
        // |k| < 32 on 96 points: 0 plus ±1..±31
        assert_eq!(kept, 63);
        assert!(!m[48]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn forward_is_linear(
                u in proptest::collection::vec(-10.0f64..10.0, 32),
                v in proptest::collection::vec(-10.0f64..10.0, 32),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
                let fu = dft_forward(&[32], &u).unwrap();
                let fv = dft_forward(&[32], &v).unwrap();
                let fw = dft_forward(&[32], &w).unwrap();
                let scale = fw.coeffs.iter().map(|c| c.norm()).fold(1.0, f64::max);
                for i in 0..32 {
                    let lin = fu.coeffs[i] * a + fv.coeffs[i] * b;
                    prop_assert!((lin - fw.coeffs[i]).norm() <= 1e-12 * scale);
                }
            }

            #[test]
            fn round_trip_identity(v in proptest::collection::vec(-100.0f64..100.0, 16)) {
                let back = dft_inverse(&dft_forward(&[16], &v).unwrap()).unwrap();
                let scale = v.iter().map(|x| x.abs()).fold(1e-300, f64::max);
                for (a, b) in back.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }
        }
    }
}
