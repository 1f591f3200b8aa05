//! Image quality metrics, computed on the luminance channel.
//!
//! Luma follows BT.601 full-range (`Y = 0.299 R + 0.587 G + 0.114 B` on the
//! [0, 1] scale). PSNR is `10 log10(peak^2 / MSE)`; identical inputs yield
//! `f64::INFINITY`, which tabular output caps at [`PSNR_CAP_DB`]. SSIM uses
//! the standard 11x11 Gaussian window with sigma 1.5 and constants
//! `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`, averaged over valid window
//! positions.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Image;
use crate::tensor::Plane;

/// Reported PSNR for identical images in CSV output; the mathematical value
/// is infinite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// BT.601 full-range luma of an RGB image.
pub fn rgb_to_y(img: &Image) -> Plane {
    let (h, w) = img.shape();
    let r = img.plane(0).data();
    let g = img.plane(1).data();
    let b = img.plane(2).data();
    let data = (0..h * w)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    Plane::from_vec(h, w, data).expect("consistent shape")
}

/// Peak signal-to-noise ratio in dB. Identical inputs give infinity.
pub fn psnr(reference: &Plane, estimate: &Plane, peak: f64) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr needs equal shapes, got {:?} vs {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    let n = reference.data().len() as f64;
    let mse = reference.sub(estimate).norm_sq() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Y-channel PSNR of two images, at peak 1.
pub fn psnr_images(reference: &Image, estimate: &Image) -> Result<f64> {
    psnr(&rgb_to_y(reference), &rgb_to_y(estimate), 1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut win = vec![0.0; size * size];
    let mut sum = 0.0;
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            win[i * size + j] = v;
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }
    win
}

/// Mean local structural similarity over valid 11x11 window positions.
/// Inputs must be at least 11x11.
pub fn ssim(reference: &Plane, estimate: &Plane) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs equal shapes, got {:?} vs {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let peak = 1.0;
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);

    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - SSIM_WINDOW) {
        for left in 0..=(w - SSIM_WINDOW) {
            // weighted raw moments over the window
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wi in 0..SSIM_WINDOW {
                let xrow = &reference.row(top + wi)[left..left + SSIM_WINDOW];
                let yrow = &estimate.row(top + wi)[left..left + SSIM_WINDOW];
                let wrow = &win[wi * SSIM_WINDOW..(wi + 1) * SSIM_WINDOW];
                for k in 0..SSIM_WINDOW {
                    let (x, y, wt) = (xrow[k], yrow[k], wrow[k]);
                    mx += wt * x;
                    my += wt * y;
                    mxx += wt * x * x;
                    myy += wt * y * y;
                    mxy += wt * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Y-channel SSIM of two images.
pub fn ssim_images(reference: &Image, estimate: &Image) -> Result<f64> {
    ssim(&rgb_to_y(reference), &rgb_to_y(estimate))
}

/// One row of a metrics table.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Write `id,psnr_db,ssim` rows with 4 decimal places, PSNR capped at
/// [`PSNR_CAP_DB`], optionally followed by a mean row.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], mean_row: bool) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "id,psnr_db,ssim")?;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for row in rows {
        let p = row.psnr_db.min(PSNR_CAP_DB);
        writeln!(f, "{},{:.4},{:.4}", row.id, p, row.ssim)?;
        psnr_sum += p;
        ssim_sum += row.ssim;
    }
    if mean_row && !rows.is_empty() {
        let n = rows.len() as f64;
        writeln!(f, "mean,{:.4},{:.4}", psnr_sum / n, ssim_sum / n)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn luma_basics() {
        let white = Image::constant(4, 4, 1.0);
        let y = rgb_to_y(&white);
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let mut green = Image::zeros(4, 4);
        green.planes_mut()[1] = Plane::constant(4, 4, 1.0);
        let yg = rgb_to_y(&green);
        for v in yg.data() {
            assert!((v - 0.587).abs() < 1e-12);
        }

        let gray = Image::constant(4, 4, 0.37);
        let ygray = rgb_to_y(&gray);
        for v in ygray.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = rng_plane(8, 8, 1);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        // constant offset 0.1 -> MSE 0.01 -> exactly 20 dB
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "got {p}");

        // symmetry
        let c = rng_plane(8, 8, 2);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), psnr(&c, &a, 1.0).unwrap());

        // scalar-loop oracle
        let mut mse = 0.0;
        for (x, y) in a.data().iter().zip(c.data()) {
            mse += (x - y) * (x - y);
        }
        mse /= 64.0;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &c, 1.0).unwrap() - want).abs() < 1e-9);

        assert!(psnr(&a, &rng_plane(4, 4, 3), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_and_constant_offset() {
        let a = rng_plane(16, 16, 4);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // zero-variance closed form: ref constant c, est constant c + d
        let (c, d) = (0.4, 0.2);
        let ca = Plane::constant(16, 16, c);
        let cb = Plane::constant(16, 16, c + d);
        let c1 = 0.01_f64.powi(2);
        let c2 = 0.03_f64.powi(2);
        let want = ((2.0 * c * (c + d) + c1) * c2) / ((c * c + (c + d) * (c + d) + c1) * c2);
        let got = ssim(&ca, &cb).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = rng_plane(10, 16, 5);
        let b = rng_plane(10, 16, 6);
        assert!(matches!(ssim(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_symmetric() {
        let a = rng_plane(14, 14, 7);
        let b = rng_plane(14, 14, 8);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn csv_formatting_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow { id: "000".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
            MetricsRow { id: "001".into(), psnr_db: 20.0, ssim: 0.5 },
        ];
        write_metrics_csv(&path, &rows, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,psnr_db,ssim");
        assert_eq!(lines[1], "000,99.0000,1.0000");
        assert_eq!(lines[2], "001,20.0000,0.5000");
        assert_eq!(lines[3], "mean,59.5000,0.7500");
    }
}
