//! Volume quality metrics: 3D PSNR and axial-slice-averaged SSIM, both with
//! a data range of 1.

use crate::error::{invalid_arg, Result};
use crate::volume::VolumeGrid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(invalid_arg!(
            "volume shapes differ: {}³ vs {}³",
            a.resolution(),
            b.resolution()
        ));
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// `10 log10(1 / MSE)`; `+inf` for identical inputs.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr_3d(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(psnr_from_mse(mse(pred.values(), gt.values())))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
fn gaussian_taps(len: usize) -> Vec<f64> {
    let mid = (len as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..len)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Mean SSIM of two `n x n` images over all fully contained windows.
///
/// Images smaller than the window use a single window covering the image.
pub fn ssim_2d(a: &[f32], b: &[f32], n: usize) -> f64 {
    let w = SSIM_WINDOW.min(n);
    let taps = gaussian_taps(w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let out = n - w + 1;
    let mut total = 0.0;
    for oy in 0..out {
        for ox in 0..out {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, &ty) in taps.iter().enumerate() {
                let row = (oy + ky) * n + ox;
                for (kx, &tx) in taps.iter().enumerate() {
                    let k = ty * tx;
                    let x = a[row + kx] as f64;
                    let y = b[row + kx] as f64;
                    ma += k * x;
                    mb += k * y;
                    aa += k * x * x;
                    bb += k * y * y;
                    ab += k * x * y;
                }
            }
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
    }
    total / (out * out) as f64
}

/// 2D SSIM of every axial (constant z) slice, averaged.
pub fn ssim_slices(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    check_shapes(pred, gt)?;
    let r = pred.resolution();
    let s: f64 = (0..r)
        .map(|z| ssim_2d(pred.axial_slice(z), gt.axial_slice(z), r))
        .sum();
    Ok(s / r as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn vol(r: usize, f: impl Fn(usize) -> f32) -> VolumeGrid {
        VolumeGrid::from_values(r, (0..r * r * r).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = vol(4, |i| (i % 5) as f32 / 10.0);
        assert_eq!(psnr_3d(&a, &a).unwrap(), f64::INFINITY);
        let z = vol(4, |_| 0.0);
        let e = vol(4, |_| 0.1);
        assert!((psnr_3d(&z, &e).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr_3d(&z, &vol(3, |_| 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = vol(16, |i| ((i * 7919) % 13) as f32 / 12.0);
        assert_eq!(ssim_slices(&a, &a).unwrap(), 1.0);
        let bin = vol(16, |i| ((i / 3 + i / 16) % 2) as f32);
        let inv = vol(16, |i| 1.0 - bin.values()[i]);
        assert!(ssim_slices(&bin, &inv).unwrap() < 0.5);
    }

    #[test]
    fn tiny_volumes_use_one_window() {
        let a = vol(3, |i| i as f32 / 27.0);
        assert_eq!(ssim_slices(&a, &a).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            let a = vol(5, |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32 / 96.0);
            let b = vol(5, |i| ((i as u64 + 3).wrapping_mul(seed | 3) % 89) as f32 / 88.0);
            prop_assert_eq!(psnr_3d(&a, &b).unwrap(), psnr_3d(&b, &a).unwrap());
        }

        #[test]
        fn ssim_of_self_is_exactly_one(vals in proptest::collection::vec(0.0f32..=1.0, 12 * 12 * 12)) {
            let a = VolumeGrid::from_values(12, vals).unwrap();
            prop_assert_eq!(ssim_slices(&a, &a).unwrap(), 1.0);
        }
    }
}
