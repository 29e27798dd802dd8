//! PSNR and SSIM on the BT.601 luma channel, plus the evaluation table over
//! guidance-scale settings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{Bundle, GuidanceScales};
use crate::losses::perceptual_loss;
use crate::tensor::ImageTensor;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn single(img: &ImageTensor) -> Result<(usize, usize, Vec<f64>)> {
    let (b, h, w) = img.dims();
    if b != 1 {
        return Err(Error::Shape(format!("expected one image, got a batch of {b}")));
    }
    Ok((h, w, img.to_vec()?))
}

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `Y = 0.299 R + 0.587 G + 0.114 B`, row-major `h * w`.
pub fn luma(img: &ImageTensor) -> Result<Vec<f64>> {
    let (h, w, data) = single(img)?;
    let n = h * w;
    Ok((0..n)
        .map(|i| 0.299 * data[i] + 0.587 * data[n + i] + 0.114 * data[2 * n + i])
        .collect())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// PSNR over all RGB values on the `[0, 1]` scale.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    Ok(psnr_from_mse(mse(&a.to_vec()?, &b.to_vec()?)))
}

/// PSNR on luma, capped at 99 dB.
pub fn psnr_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    Ok(psnr_from_mse(mse(&luma(a)?, &luma(b)?)))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering with the SSIM window.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (σ = 1.5),
/// averaged over valid window positions.
pub fn ssim_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let (_, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (ya, yb) = (luma(a)?, luma(b)?);
    Ok(ssim_luma(&ya, &yb, h, w))
}

fn ssim_luma(ya: &[f64], yb: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(ya, h, w, &g);
    let mu_b = filter_valid(yb, h, w, &g);
    let e_aa = filter_valid(&prod(ya, ya), h, w, &g);
    let e_bb = filter_valid(&prod(yb, yb), h, w, &g);
    let e_ab = filter_valid(&prod(ya, yb), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub lambda_pix: f64,
    pub lambda_sem: f64,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub perceptual: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub perceptual: f64,
}

/// Aggregate rows (one per scale setting) and the per-image values behind
/// each row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub per_image: Vec<Vec<ImageMetrics>>,
}

pub const CSV_HEADER: &str = "lambda_pix,lambda_sem,psnr_y,ssim_y,perceptual,n_images";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.lambda_pix, r.lambda_sem, r.psnr_y, r.ssim_y, r.perceptual, r.n_images
            );
        }
        out
    }

    pub fn row(&self, lambda_pix: f64, lambda_sem: f64) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.lambda_pix == lambda_pix && r.lambda_sem == lambda_sem)
    }
}

pub fn image_metrics(
    out: &ImageTensor,
    gt: &ImageTensor,
    bundle: &Bundle,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr_y: psnr_y(out, gt)?,
        ssim_y: ssim_y(out, gt)?,
        perceptual: perceptual_loss(out, gt, bundle.featnet()?)?.to_scalar::<f64>()?,
    })
}

/// Metrics of the adjustable restoration against ground truth for every
/// requested scale pair. Each LQ image is passed through the denoiser twice
/// (once per adapter set); every scale setting is then a cached blend.
pub fn evaluate(
    pairs: &[(ImageTensor, ImageTensor)],
    bundle: &Bundle,
    scales: &[GuidanceScales],
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_image: Vec<Vec<ImageMetrics>> = vec![Vec::with_capacity(pairs.len()); scales.len()];
    for (lq, hq) in pairs {
        let cache = bundle.build_cache("eval", lq)?;
        for (k, s) in scales.iter().enumerate() {
            let out = bundle.blend_from_cache(&cache, *s)?;
            per_image[k].push(image_metrics(&out, hq, bundle)?);
        }
    }
    let rows = scales
        .iter()
        .zip(&per_image)
        .map(|(s, ms)| {
            let n = ms.len() as f64;
            MetricRow {
                lambda_pix: s.lambda_pix,
                lambda_sem: s.lambda_sem,
                psnr_y: ms.iter().map(|m| m.psnr_y).sum::<f64>() / n,
                ssim_y: ms.iter().map(|m| m.ssim_y).sum::<f64>() / n,
                perceptual: ms.iter().map(|m| m.perceptual).sum::<f64>() / n,
                n_images: ms.len(),
            }
        })
        .collect();
    Ok(MetricReport { rows, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec((0..3 * h * w).map(|_| rng.random::<f64>()).collect(), 1, h, w).unwrap()
    }

    #[test]
    fn identical_images_hit_cap() {
        let a = random_image(1, 16, 16);
        assert_eq!(psnr_y(&a, &a).unwrap(), 99.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    }

    #[test]
    fn luma_mse_of_one_hundredth_is_20_db() {
        let a = ImageTensor::constant(0.2, 16, 16).unwrap();
        let b = ImageTensor::constant(0.3, 16, 16).unwrap();
        // Equal RGB offsets move luma by the same amount: Y-MSE = 0.01.
        assert!((psnr_y(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let a = random_image(2, 12, 20);
        let b = random_image(3, 12, 20);
        let (va, vb) = (a.to_vec().unwrap(), b.to_vec().unwrap());
        let n = 12 * 20;
        let mut acc = 0.0;
        for i in 0..n {
            let ya = 0.299 * va[i] + 0.587 * va[n + i] + 0.114 * va[2 * n + i];
            let yb = 0.299 * vb[i] + 0.587 * vb[n + i] + 0.114 * vb[2 * n + i];
            acc += (ya - yb) * (ya - yb);
        }
        let oracle = 10.0 * (1.0 / (acc / n as f64)).log10();
        assert!((psnr_y(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn psnr_symmetric(s1 in 0u64..1000, s2 in 1000u64..2000) {
            let a = random_image(s1, 8, 8);
            let b = random_image(s2, 8, 8);
            prop_assert_eq!(psnr_y(&a, &b).unwrap(), psnr_y(&b, &a).unwrap());
        }

        #[test]
        fn ssim_bounded(s1 in 0u64..1000, s2 in 1000u64..2000) {
            let a = random_image(s1, 16, 16);
            let b = random_image(s2, 16, 16);
            let s = ssim_y(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(4, 24, 24);
        assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = random_image(5, 10, 16);
        assert!(ssim_y(&a, &a).is_err());
        assert!(psnr_y(&a, &random_image(5, 16, 16)).is_err());
    }

    /// Direct per-window evaluation with a 2D Gaussian window.
    fn ssim_direct(ya: &[f64], yb: &[f64], h: usize, w: usize) -> f64 {
        let mut g2 = vec![0.0; 121];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let d = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
                g2[i * 11 + j] = (-d).exp();
                s += g2[i * 11 + j];
            }
        }
        g2.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (y + i) * w + x + j;
                        ma += g2[i * 11 + j] * ya[p];
                        mb += g2[i * 11 + j] * yb[p];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (y + i) * w + x + j;
                        let g = g2[i * 11 + j];
                        va += g * (ya[p] - ma).powi(2);
                        vb += g * (yb[p] - mb).powi(2);
                        cov += g * (ya[p] - ma) * (yb[p] - mb);
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let a = random_image(6, 20, 17);
        let b = random_image(7, 20, 17);
        let direct = ssim_direct(&luma(&a).unwrap(), &luma(&b).unwrap(), 20, 17);
        assert!((ssim_y(&a, &b).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn inverted_checkerboard_is_anticorrelated() {
        let mut data = vec![0.0; 3 * 256];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    data[c * 256 + y * 16 + x] = ((x + y) % 2) as f64;
                }
            }
        }
        let a = ImageTensor::from_vec(data.clone(), 1, 16, 16).unwrap();
        let inv = ImageTensor::from_vec(data.iter().map(|v| 1.0 - v).collect(), 1, 16, 16).unwrap();
        let s = ssim_y(&a, &inv).unwrap();
        let direct = ssim_direct(&luma(&a).unwrap(), &luma(&inv).unwrap(), 16, 16);
        assert!(s < 0.0 && direct < 0.0, "{s} / {direct}");
    }

    #[test]
    fn csv_layout() {
        let report = MetricReport {
            rows: vec![MetricRow {
                lambda_pix: 1.0,
                lambda_sem: 0.5,
                psnr_y: 30.0,
                ssim_y: 0.9,
                perceptual: 0.1,
                n_images: 4,
            }],
            per_image: vec![],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.5,30.000000,0.900000,0.100000,4");
    }
}
