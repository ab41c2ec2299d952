//! Deterministic test images.

use crate::error::{Error, Result};
use crate::types::{ComplexImage, ImageGrid};

/// 1 inside the centred axis-aligned square of side `round(fraction * n)`
/// per axis, 0 elsewhere.
pub fn phantom_square(grid: &ImageGrid, side_fraction: f64) -> Result<ComplexImage> {
    if !(side_fraction > 0.0 && side_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("side fraction must be in (0, 1], got {side_fraction}")));
    }
    let ranges: Vec<(usize, usize)> = grid
        .dims()
        .iter()
        .map(|&n| {
            let side = (side_fraction * n as f64).round() as usize;
            let start = (n - side) / 2;
            (start, start + side)
        })
        .collect();
    let values: Vec<f64> = (0..grid.len())
        .map(|k| {
            let mut rest = k;
            let mut inside = true;
            for j in (0..grid.ndim()).rev() {
                let idx = rest % grid.dims()[j];
                rest /= grid.dims()[j];
                inside &= (ranges[j].0..ranges[j].1).contains(&idx);
            }
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ComplexImage::from_real(grid.clone(), &values)
}

/// One ellipse: intensity, semi-axes, centre and rotation in degrees, in
/// the `[-1, 1]^2` frame with y pointing up.
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi_deg: f64,
}

const fn ellipse(intensity: f64, a: f64, b: f64, x0: f64, y0: f64, phi_deg: f64) -> Ellipse {
    Ellipse { intensity, a, b, x0, y0, phi_deg }
}

/// The ten-ellipse Shepp-Logan geometry with the higher-contrast
/// intensities, so values already lie in `[0, 1]`.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    ellipse(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    ellipse(-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    ellipse(-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    ellipse(-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    ellipse(0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    ellipse(0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    ellipse(0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    ellipse(0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    ellipse(0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    ellipse(0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

/// Pixel-centre coordinates of `(row, col)` in the `[-1, 1]^2` frame.
pub fn pixel_centre(rows: usize, cols: usize, r: usize, c: usize) -> (f64, f64) {
    let x = (2.0 * c as f64 + 1.0) / cols as f64 - 1.0;
    let y = 1.0 - (2.0 * r as f64 + 1.0) / rows as f64;
    (x, y)
}

/// Shepp-Logan phantom rasterized by pixel-centre membership, clipped to
/// `[0, 1]`.
pub fn phantom_shepp_logan(grid: &ImageGrid) -> Result<ComplexImage> {
    let [rows, cols] = grid.dims() else {
        return Err(Error::InvalidArgument("Shepp-Logan phantom is defined for 2-D grids".into()));
    };
    let (rows, cols) = (*rows, *cols);
    let mut values = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = pixel_centre(rows, cols, r, c);
            let mut v = 0.0;
            for e in &SHEPP_LOGAN {
                let (s, co) = e.phi_deg.to_radians().sin_cos();
                let (dx, dy) = (x - e.x0, y - e.y0);
                let u = (dx * co + dy * s) / e.a;
                let w = (-dx * s + dy * co) / e.b;
                if u * u + w * w <= 1.0 {
                    v += e.intensity;
                }
            }
            values[r * cols + c] = v.clamp(0.0, 1.0);
        }
    }
    ComplexImage::from_real(grid.clone(), &values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_counts_and_symmetry() {
        let g = ImageGrid::square(64).unwrap();
        let img = phantom_square(&g, 0.5).unwrap();
        let ones = img.data().iter().filter(|z| z.re == 1.0).count();
        assert_eq!(ones, 1024);
        assert!(img.data().iter().all(|z| z.im == 0.0 && (z.re == 0.0 || z.re == 1.0)));
        let n = img.data().len();
        assert!((0..n).all(|k| img.data()[k] == img.data()[n - 1 - k]));
        assert!(phantom_square(&g, 1.0).unwrap().data().iter().all(|z| z.re == 1.0));
        assert!(phantom_square(&g, 0.0).is_err());
    }

    #[test]
    fn square_is_resolution_consistent() {
        let fine = phantom_square(&ImageGrid::square(128).unwrap(), 0.5).unwrap();
        let coarse = phantom_square(&ImageGrid::square(64).unwrap(), 0.5).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let f = |rr: usize, cc: usize| fine.data()[rr * 128 + cc].re;
                let avg = (f(2 * r, 2 * c) + f(2 * r + 1, 2 * c) + f(2 * r, 2 * c + 1) + f(2 * r + 1, 2 * c + 1)) / 4.0;
                assert_eq!(avg, coarse.data()[r * 64 + c].re);
            }
        }
    }

    #[test]
    fn shepp_logan_range_and_centre() {
        let g = ImageGrid::square(64).unwrap();
        let img = phantom_shepp_logan(&g).unwrap();
        assert!(img.data().iter().all(|z| (0.0..=1.0).contains(&z.re) && z.im == 0.0));
        assert!(img.data()[32 * 64 + 32].re > 0.0);
        assert!(phantom_shepp_logan(&ImageGrid::new(&[64]).unwrap()).is_err());
    }
}
