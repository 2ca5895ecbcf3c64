use serde::{Deserialize, Serialize};

use super::{GeometryError, Image};

pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub delta1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// AbsRel and δ1 over pixels where `mask` is nonzero.
pub fn depth_metrics(pred: &Image, gt: &Image, mask: &Image) -> Result<DepthMetrics, GeometryError> {
    if !pred.same_layout(gt) || !pred.same_layout(mask) || pred.channels != 1 {
        return Err(GeometryError::Resolution(format!(
            "depth pred {}x{}x{}, gt {}x{}x{}, mask {}x{}x{}",
            pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels, mask.width, mask.height, mask.channels
        )));
    }
    let (mut absrel, mut good, mut n) = (0.0, 0usize, 0usize);
    for ((&p, &g), &m) in pred.data.iter().zip(&gt.data).zip(&mask.data) {
        if m == 0.0 {
            continue;
        }
        if !(g > 0.0) {
            return Err(GeometryError::InvalidDepth(g));
        }
        absrel += (p - g).abs() / g;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            good += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok(DepthMetrics { absrel: absrel / n as f64, delta1: good as f64 / n as f64 })
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64, GeometryError> {
    check_rgb_pair(pred, gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Valid-region separable Gaussian filter of one channel.
fn filter(src: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width + 1 - SSIM_WINDOW, height + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            horiz[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * src[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 7x7 Gaussian windows and channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64, GeometryError> {
    check_rgb_pair(pred, gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(GeometryError::Resolution(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let w = gaussian_window();
    let (width, height, ch) = (pred.width, pred.height, pred.channels);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let x: Vec<f64> = (0..width * height).map(|i| pred.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..width * height).map(|i| gt.data[i * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(&x, width, height, &w), filter(&y, width, height, &w));
        let (sxx, syy, sxy) = (filter(&xx, width, height, &w), filter(&yy, width, height, &w), filter(&xy, width, height, &w));
        for i in 0..mx.len() {
            let (vx, vy, cov) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn image_metrics(pred: &Image, gt: &Image) -> Result<ImageMetrics, GeometryError> {
    Ok(ImageMetrics { psnr: psnr(pred, gt)?, ssim: ssim(pred, gt)? })
}

fn check_rgb_pair(pred: &Image, gt: &Image) -> Result<(), GeometryError> {
    if !pred.same_layout(gt) {
        return Err(GeometryError::Resolution(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn depth(values: Vec<f64>) -> Image {
        Image::from_data(values.len(), 1, 1, values).unwrap()
    }

    #[test]
    fn depth_metric_examples() {
        let gt = depth(vec![0.5, 1.0, 2.0, 4.0]);
        let mask = depth(vec![1.0; 4]);
        let m = depth_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((m.absrel, m.delta1), (0.0, 1.0));
        let scaled = |k: f64| depth(gt.data.iter().map(|g| g * k).collect());
        let m = depth_metrics(&scaled(1.3), &gt, &mask).unwrap();
        assert!((m.absrel - 0.3).abs() < 1e-12 && m.delta1 == 0.0);
        let m = depth_metrics(&scaled(1.2), &gt, &mask).unwrap();
        assert!((m.absrel - 0.2).abs() < 1e-12 && m.delta1 == 1.0);
    }

    #[test]
    fn depth_metrics_error_paths() {
        let gt = depth(vec![1.0, 2.0]);
        assert_eq!(depth_metrics(&gt, &gt, &depth(vec![0.0, 0.0])), Err(GeometryError::EmptyMask));
        assert!(depth_metrics(&gt, &depth(vec![1.0]), &depth(vec![1.0])).is_err());
        assert!(depth_metrics(&gt, &depth(vec![0.0, 1.0]), &depth(vec![1.0, 1.0])).is_err());
    }

    fn random_rgb(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images_hit_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_rgb(&mut rng, 16, 16);
        let m = image_metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, 99.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_error_psnr_closed_form() {
        let a = Image::from_data(8, 8, 3, vec![0.5; 192]).unwrap();
        let b = Image::from_data(8, 8, 3, vec![0.5 + 16.0 / 255.0; 192]).unwrap();
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 24.05).abs() < 0.01);
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let a = Image::new(8, 8, 3);
        let b = Image::new(8, 9, 3);
        assert!(image_metrics(&a, &b).is_err());
    }

    /// Direct per-window SSIM: explicit weighted sums over each 7x7 patch.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let r = SSIM_WINDOW / 2;
        let mut g = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - r as f64, j as f64 - r as f64);
                *x = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                s += *x;
            }
        }
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..a.channels {
            for y0 in 0..=a.height - SSIM_WINDOW {
                for x0 in 0..=a.width - SSIM_WINDOW {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let w = g[i][j] / s;
                            let (p, q) = (a.at(x0 + j, y0 + i, c), b.at(x0 + j, y0 + i, c));
                            mx += w * p;
                            my += w * q;
                            sxx += w * p * p;
                            syy += w * q * q;
                            sxy += w * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random_rgb(&mut rng, 32, 32);
        let b = Image::from_data(32, 32, 3, a.data.iter().map(|x| (x + 0.1 * rng.random::<f64>() - 0.05).clamp(0.0, 1.0)).collect())
            .unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_direct(&a, &b)).abs() < 1e-6);
        assert!(got < 1.0 && got > 0.0);
    }
}
