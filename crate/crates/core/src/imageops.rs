//! Small grayscale raster utilities shared by ingestion, augmentation, and
//! report rendering.

use ndarray::{Array2, ArrayView2};

/// Bilinear resampling with half-pixel-center source coordinates.
///
/// Output values are convex combinations of inputs, so a [0, 1] image stays
/// in [0, 1].
pub fn resize_bilinear(src: &ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

/// 3x3 box blur with clamped borders; used by the rule-based label oracle to
/// suppress pixel noise before edge measurements.
pub fn box_blur3(src: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                acc += src[[yy, xx]];
            }
        }
        acc / 9.0
    })
}

/// Isotropic Gaussian blur via two separable passes; sigma in pixels.
pub fn gaussian_blur(src: &ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();

    let (h, w) = src.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += src[[y, xx]] * k;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += tmp[[yy, x]] * k;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn resize_identity_when_same_size() {
        let a = array![[0.0, 1.0], [0.5, 0.25]];
        let b = resize_bilinear(&a.view(), 2, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let a = Array2::from_elem((10, 7), 0.4);
        let b = resize_bilinear(&a.view(), 64, 64);
        for &p in b.iter() {
            assert!((p - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_range() {
        let a = Array2::from_shape_fn((9, 9), |(y, x)| ((y * 31 + x * 17) % 10) as f64 / 9.0);
        let b = resize_bilinear(&a.view(), 5, 13);
        for &p in b.iter() {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn downsample_2x_averages_neighbors() {
        // 2x downsampling with half-pixel centers lands exactly between the
        // four source pixels of each block.
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = resize_bilinear(&a.view(), 1, 1);
        assert!((b[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_blur_preserves_mass_roughly() {
        let mut a = Array2::zeros((21, 21));
        a[[10, 10]] = 1.0;
        let b = gaussian_blur(&a.view(), 2.0);
        let total: f64 = b.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(b[[10, 10]] < 0.1);
    }
}
