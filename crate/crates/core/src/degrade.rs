//! Seeded synthetic degradation and paired-dataset assembly.
//!
//! Fixed order: Gaussian blur, box downscale, additive Gaussian noise,
//! 8x8 block-DCT quantization, clamp, nearest-neighbour upscale back to the
//! input grid.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRecipe {
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub downscale_factor: usize,
    pub compress_quality_range: [u32; 2],
    pub seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.4, 1.2],
            noise_sigma_range: [0.0, 0.03],
            downscale_factor: 4,
            compress_quality_range: [50, 95],
            seed: 0,
        }
    }
}

impl DegradationRecipe {
    /// No blur, no noise, no resampling, no quantization.
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            noise_sigma_range: [0.0, 0.0],
            downscale_factor: 1,
            compress_quality_range: [100, 100],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b0, b1] = self.blur_sigma_range;
        let [n0, n1] = self.noise_sigma_range;
        let [q0, q1] = self.compress_quality_range;
        if !(0.0 <= b0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::InvalidRange(format!("blur sigma range [{b0}, {b1}]")));
        }
        if !(0.0 <= n0 && n0 <= n1 && n1 <= 1.0) {
            return Err(Error::InvalidRange(format!("noise sigma range [{n0}, {n1}]")));
        }
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::InvalidRange(format!("quality range [{q0}, {q1}]")));
        }
        if self.downscale_factor == 0 {
            return Err(Error::InvalidRange("downscale factor 0".into()));
        }
        Ok(())
    }
}

/// Sampled parameters of one degradation. `stream_seed` seeds the noise
/// generator, so replaying a record reproduces the LQ image exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub index: usize,
    pub stream_seed: u64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quality: u32,
    pub downscale_factor: usize,
}

/// Single-channel planar image.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn planes(x: &ImageTensor) -> Result<Vec<Plane>> {
    let (b, h, w) = x.dims();
    if b != 1 {
        return Err(Error::Shape(format!("degradation works on single images, got batch {b}")));
    }
    let v = x.to_vec()?;
    Ok(v.chunks(h * w)
        .map(|c| Plane {
            h,
            w,
            data: c.to_vec(),
        })
        .collect())
}

fn from_planes(ps: &[Plane]) -> Result<ImageTensor> {
    let (h, w) = (ps[0].h, ps[0].w);
    let data = ps.iter().flat_map(|p| p.data.iter().copied()).collect();
    ImageTensor::from_vec(data, 1, h, w)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflected borders.
fn blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * p.at(y, reflect(x as isize + j as isize - r, p.w)))
                .sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Plane {
        h: p.h,
        w: p.w,
        data: out,
    }
}

fn box_downscale(p: &Plane, f: usize) -> Plane {
    if f == 1 {
        return p.clone();
    }
    let (h, w) = (p.h / f, p.w / f);
    let mut data = vec![0.0; h * w];
    let norm = (f * f) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += p.at(y * f + dy, x * f + dx);
                }
            }
            data[y * w + x] = s / norm;
        }
    }
    Plane { h, w, data }
}

fn nearest_upscale(p: &Plane, f: usize) -> Plane {
    if f == 1 {
        return p.clone();
    }
    let (h, w) = (p.h * f, p.w * f);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = p.at(y / f, x / f);
        }
    }
    Plane { h, w, data }
}

const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization table scaled the way common JPEG encoders do it.
fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, base) in t.iter_mut().zip(LUMA_QUANT) {
        *o = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    c
}

/// 8x8 block DCT quantization on the 0..255 scale. Partial edge blocks are
/// padded by edge replication and cropped afterwards.
fn block_dct_quantize(p: &Plane, quality: u32) -> Plane {
    if quality >= 100 {
        return p.clone();
    }
    let q = quant_table(quality);
    let c = dct_basis();
    let mut out = p.clone();
    for by in (0..p.h).step_by(8) {
        for bx in (0..p.w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let px = p.at((by + y).min(p.h - 1), (bx + x).min(p.w - 1));
                    *v = px.clamp(0.0, 1.0) * 255.0 - 128.0;
                }
            }
            // Forward transform: C * B * C^T.
            let mut tmp = [[0.0; 8]; 8];
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for x in 0..8 {
                    tmp[u][x] = (0..8).map(|y| c[u][y] * block[y][x]).sum();
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    let f: f64 = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
                    let qv = q[u * 8 + v];
                    coef[u][v] = (f / qv).round() * qv;
                }
            }
            // Inverse: C^T * F * C.
            for y in 0..8 {
                for v in 0..8 {
                    tmp[y][v] = (0..8).map(|u| c[u][y] * coef[u][v]).sum();
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (yy, xx) = (by + y, bx + x);
                    if yy < p.h && xx < p.w {
                        let v: f64 = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
                        out.data[yy * p.w + xx] = (v + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

fn sample_range(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Degrade with parameters drawn from `rng`.
pub fn degrade(
    x_hq: &ImageTensor,
    recipe: &DegradationRecipe,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, DegradationRecord)> {
    recipe.validate()?;
    let [q0, q1] = recipe.compress_quality_range;
    let rec = DegradationRecord {
        index: 0,
        stream_seed: rng.random(),
        blur_sigma: sample_range(rng, recipe.blur_sigma_range),
        noise_sigma: sample_range(rng, recipe.noise_sigma_range),
        quality: rng.random_range(q0..=q1),
        downscale_factor: recipe.downscale_factor,
    };
    Ok((replay(x_hq, &rec)?, rec))
}

/// Apply exactly the degradation described by `rec`.
pub fn replay(x_hq: &ImageTensor, rec: &DegradationRecord) -> Result<ImageTensor> {
    let f = rec.downscale_factor;
    let (_, h, w) = x_hq.dims();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            factor: f,
        });
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rec.stream_seed);
    let normal = Normal::new(0.0, rec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidRange(format!("noise sigma: {e}")))?;
    let out: Vec<Plane> = planes(x_hq)?
        .iter()
        .map(|p| {
            let mut lr = box_downscale(&blur(p, rec.blur_sigma), f);
            if rec.noise_sigma > 0.0 {
                for v in lr.data.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
            }
            let mut lr = block_dct_quantize(&lr, rec.quality);
            for v in lr.data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            nearest_upscale(&lr, f)
        })
        .collect();
    from_planes(&out)
}

/// Intermediate low-resolution image (before the final upscale).
pub fn degrade_low_res(x_hq: &ImageTensor, rec: &DegradationRecord) -> Result<ImageTensor> {
    let f = rec.downscale_factor;
    let full = replay(x_hq, rec)?;
    let ps = planes(&full)?;
    let small: Vec<Plane> = ps
        .iter()
        .map(|p| {
            let (h, w) = (p.h / f, p.w / f);
            let data = (0..h * w).map(|i| p.at((i / w) * f, (i % w) * f)).collect();
            Plane { h, w, data }
        })
        .collect();
    from_planes(&small)
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub lq: ImageTensor,
    pub hq: ImageTensor,
    pub record: DegradationRecord,
}

/// One degraded copy per HQ image. Image `i` draws its parameters from an
/// independent stream of the recipe seed.
pub fn make_pairs(hq: &[ImageTensor], recipe: &DegradationRecipe) -> Result<Vec<Pair>> {
    if hq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    recipe.validate()?;
    hq.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
            rng.set_stream(i as u64);
            let (lq, mut record) = degrade(x, recipe, &mut rng)?;
            record.index = i;
            Ok(Pair {
                lq,
                hq: x.clone(),
                record,
            })
        })
        .collect()
}

pub fn image_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Writes `hq/NNNN.png`, `lq/NNNN.png` and `records.jsonl`.
pub fn save_pairs(dir: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("hq"))?;
    fs::create_dir_all(dir.join("lq"))?;
    let mut records = fs::File::create(dir.join("records.jsonl"))?;
    for p in pairs {
        let name = image_name(p.record.index);
        p.hq.save_png(dir.join("hq").join(&name))?;
        p.lq.save_png(dir.join("lq").join(&name))?;
        writeln!(records, "{}", serde_json::to_string(&p.record)?)?;
    }
    Ok(())
}

pub fn load_pairs(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    let file = fs::File::open(dir.join("records.jsonl"))
        .map_err(|e| Error::Missing(format!("{}: {e}", dir.join("records.jsonl").display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DegradationRecord = serde_json::from_str(&line)?;
        let name = image_name(record.index);
        out.push(Pair {
            lq: ImageTensor::load_png(dir.join("lq").join(&name))?,
            hq: ImageTensor::load_png(dir.join("hq").join(&name))?,
            record,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
