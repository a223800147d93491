//! Fixed bank of real Gabor filters, one per orientation, shared by every
//! deformable Gabor layer of a network.

use std::f64::consts::PI;

use crate::archive::TensorArchive;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Real Gabor kernel value at grid offset `(x, y)` (column, row) for
/// orientation `theta`: Gaussian envelope times cosine carrier, unit aspect.
pub fn gabor_value(x: f64, y: f64, theta: f64, sigma: f64, lambda: f64) -> f64 {
    let xr = x * theta.cos() + y * theta.sin();
    let yr = -x * theta.sin() + y * theta.cos();
    (-(xr * xr + yr * yr) / (2.0 * sigma * sigma)).exp() * (2.0 * PI * xr / lambda).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaborBank {
    orientations: usize,
    kernel: usize,
    sigma: f64,
    lambda: f64,
    /// `[U, H, H]`, each slice unit L2 norm.
    filters: Tensor,
}

impl GaborBank {
    /// Default envelope and wavelength for kernel side `h`: `sigma = h/3`, `lambda = h/2`.
    pub fn default_params(h: usize) -> (f64, f64) {
        (h as f64 / 3.0, h as f64 / 2.0)
    }

    pub fn new(orientations: usize, kernel: usize, sigma: f64, lambda: f64) -> Result<Self> {
        if orientations == 0 {
            return Err(arg_err!("orientation count must be at least 1"));
        }
        if kernel < 3 || kernel.is_multiple_of(2) {
            return Err(arg_err!(
                "Gabor kernel side must be odd and >= 3, got {kernel}"
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(arg_err!("sigma must be positive, got {sigma}"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(arg_err!("lambda must be positive, got {lambda}"));
        }
        let mut data = Vec::with_capacity(orientations * kernel * kernel);
        for u in 0..orientations {
            let raw = raw_filter(u, orientations, kernel, sigma, lambda);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(raw.iter().map(|v| v / norm));
        }
        Ok(Self {
            orientations,
            kernel,
            sigma,
            lambda,
            filters: Tensor::from_vec(&[orientations, kernel, kernel], data)?,
        })
    }

    /// Bank with hand-supplied filters `[U, H, H]`, used as-is (no normalization).
    pub fn from_filters(filters: Tensor) -> Result<Self> {
        let s = filters.shape();
        if s.len() != 3 || s[1] != s[2] || s[1].is_multiple_of(2) {
            return Err(shape_err!("filters must be [U,H,H] with odd H, got {s:?}"));
        }
        Ok(Self {
            orientations: s[0],
            kernel: s[1],
            sigma: f64::NAN,
            lambda: f64::NAN,
            filters,
        })
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    pub fn filter(&self, u: usize) -> &[f64] {
        self.filters.slice_data(u)
    }

    /// Orientation angle of filter `u` (zero-based): `u * pi / U`.
    pub fn angle(&self, u: usize) -> f64 {
        u as f64 * PI / self.orientations as f64
    }

    /// Archive sections: generated banks store their config, custom banks their filters.
    pub fn write_sections(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        if self.sigma.is_nan() {
            archive.insert(format!("{prefix}filters"), self.filters.clone())
        } else {
            archive.insert(
                format!("{prefix}config"),
                Tensor::from_vec(
                    &[4],
                    vec![
                        self.orientations as f64,
                        self.kernel as f64,
                        self.sigma,
                        self.lambda,
                    ],
                )?,
            )
        }
    }

    pub fn read_sections(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        if let Some(cfg) = archive.get(&format!("{prefix}config")) {
            let c = cfg.data();
            if c.len() != 4 {
                return Err(Error::Format("Gabor config must hold 4 values".into()));
            }
            Self::new(c[0] as usize, c[1] as usize, c[2], c[3])
        } else {
            Self::from_filters(archive.require(&format!("{prefix}filters"))?.clone())
        }
    }
}

fn raw_filter(u: usize, orientations: usize, kernel: usize, sigma: f64, lambda: f64) -> Vec<f64> {
    let theta = u as f64 * PI / orientations as f64;
    let c = (kernel / 2) as f64;
    let mut out = Vec::with_capacity(kernel * kernel);
    for i in 0..kernel {
        for j in 0..kernel {
            out.push(gabor_value(
                j as f64 - c,
                i as f64 - c,
                theta,
                sigma,
                lambda,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_value_is_one() {
        for &(theta, sigma, lambda) in &[(0.0, 1.0, 1.5), (1.1, 2.0, 3.0), (PI, 0.3, 0.7)] {
            assert_eq!(gabor_value(0.0, 0.0, theta, sigma, lambda), 1.0);
        }
    }

    #[test]
    fn filters_have_unit_norm() {
        let bank = GaborBank::new(6, 7, 2.0, 3.5).unwrap();
        for u in 0..6 {
            let n: f64 = bank.filter(u).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_filter_is_rotated_zero_filter() {
        let bank = GaborBank::new(4, 5, 5.0 / 3.0, 2.5).unwrap();
        let f0 = bank.filter(0);
        let f2 = bank.filter(2);
        assert!((bank.angle(2) - PI / 2.0).abs() < 1e-15);
        for i in 0..5 {
            for j in 0..5 {
                // 90 degree grid rotation: (i, j) <- (j, H-1-i)
                assert!((f2[i * 5 + j] - f0[j * 5 + (4 - i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_values_match_direct_formula() {
        // Independent evaluation of the kernel formula, written out per pixel.
        let (sigma, lambda) = (1.0f64, 1.5f64);
        let bank = GaborBank::new(2, 3, sigma, lambda).unwrap();
        for u in 0..2 {
            let theta = u as f64 * PI / 2.0;
            let mut raw = [[0.0f64; 3]; 3];
            for (i, row) in raw.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let (x, y) = (j as f64 - 1.0, i as f64 - 1.0);
                    let xp = x * theta.cos() + y * theta.sin();
                    let yp = -x * theta.sin() + y * theta.cos();
                    *v = (-(xp.powi(2) + yp.powi(2)) / 2.0).exp() * (2.0 * PI * xp / 1.5).cos();
                }
            }
            let norm: f64 = raw.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((bank.filter(u)[i * 3 + j] - raw[i][j] / norm).abs() < 1e-14);
                }
            }
        }
        // theta = 0 row: cos(2 pi x / 1.5) at x = +-1 is cos(4 pi / 3) = -0.5.
        let raw01 = gabor_value(1.0, 0.0, 0.0, 1.0, 1.5);
        assert!((raw01 - (-0.5f64) * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn half_turn_orientation_gives_same_filter() {
        let (s, l) = (1.3, 2.1);
        for &(x, y) in &[(1.0, 2.0), (-2.0, 1.0), (0.0, -1.0)] {
            for &theta in &[0.0, 0.4, 1.9] {
                let a = gabor_value(x, y, theta, s, l);
                let b = gabor_value(x, y, theta + PI, s, l);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = GaborBank::new(4, 5, 1.7, 2.5).unwrap();
        let b = GaborBank::new(4, 5, 1.7, 2.5).unwrap();
        assert_eq!(a.filters().to_bytes(), b.filters().to_bytes());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GaborBank::new(4, 4, 1.0, 1.0).is_err());
        assert!(GaborBank::new(4, 1, 1.0, 1.0).is_err());
        assert!(GaborBank::new(4, 3, 0.0, 1.0).is_err());
        assert!(GaborBank::new(4, 3, 1.0, -1.0).is_err());
        assert!(GaborBank::new(0, 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let bank = GaborBank::new(4, 3, 1.0, 1.5).unwrap();
        let mut a = TensorArchive::new();
        bank.write_sections(&mut a, "gabor.").unwrap();
        assert_eq!(GaborBank::read_sections(&a, "gabor.").unwrap(), bank);
    }
}
