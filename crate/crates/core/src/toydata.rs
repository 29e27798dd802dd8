//! Procedural labeled textures. The class of an image is its texture
//! family; colors, scale, phase and orientation are random per image.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::image_name;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const FAMILIES: [&str; 8] = [
    "checkerboard",
    "linear-gradient",
    "radial-gradient",
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "blobs",
    "dots",
];

pub const NUM_CLASSES: usize = FAMILIES.len();

/// Soft step of width about one pixel, used for anti-aliased edges.
fn soft(d: f64) -> f64 {
    0.5 + 0.5 * (d * 2.0).tanh()
}

/// Signed distance to the nearest stripe edge for a square wave with the
/// given period, positive inside the "on" half.
fn square_wave(u: f64, period: f64) -> f64 {
    let ph = u.rem_euclid(period);
    let half = period / 2.0;
    if ph < half {
        ph.min(half - ph)
    } else {
        -(ph - half).min(period - ph)
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// Two colors with enough luma contrast for the family to be visible.
fn color_pair(rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let (a, b) = (random_color(rng), random_color(rng));
        let la = 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2];
        let lb = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2];
        if (la - lb).abs() > 0.25 {
            return (a, b);
        }
    }
}

/// One texture of the given family.
pub fn render(family: usize, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if family >= NUM_CLASSES {
        return Err(Error::InvalidRange(format!("texture family {family}")));
    }
    let s = size as f64;
    let (c0, c1) = color_pair(rng);
    let period = rng.random_range(s / 10.0..s / 5.0).max(4.0);
    let (ox, oy) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = (rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s));
    let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(3..7))
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(s / 12.0..s / 6.0)))
        .collect();
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let m = match family {
                0 => {
                    let a = square_wave(fx + ox, period);
                    let b = square_wave(fy + oy, period);
                    soft(a.signum() * b.signum() * a.abs().min(b.abs()))
                }
                1 => {
                    let u = (fx - cx) * angle.cos() + (fy - cy) * angle.sin();
                    (0.5 + u / s).clamp(0.0, 1.0)
                }
                2 => {
                    let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    (r / (0.6 * s)).clamp(0.0, 1.0)
                }
                3 => soft(square_wave(fy + oy, period)),
                4 => soft(square_wave(fx + ox, period)),
                5 => {
                    let dir = if angle < std::f64::consts::PI { 1.0 } else { -1.0 };
                    soft(square_wave((fx + dir * fy) / std::f64::consts::SQRT_2 + ox, period))
                }
                6 => {
                    let f: f64 = blobs
                        .iter()
                        .map(|(bx, by, r)| (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    soft((f - 0.5) * 6.0)
                }
                _ => {
                    let gx = (fx + ox).rem_euclid(period) - period / 2.0;
                    let gy = (fy + oy).rem_euclid(period) - period / 2.0;
                    soft(period * 0.3 - (gx * gx + gy * gy).sqrt())
                }
            };
            for c in 0..3 {
                data[c * size * size + y * size + x] = c0[c] * (1.0 - m) + c1[c] * m;
            }
        }
    }
    ImageTensor::from_vec(data, 1, size, size)
}

/// `n` class-balanced textures (`label = i mod 8`), each drawn from its own
/// stream of `seed`.
pub fn generate(n: usize, size: usize, seed: u64) -> Result<Vec<(ImageTensor, usize)>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = i % NUM_CLASSES;
            Ok((render(label, size, &mut rng)?, label))
        })
        .collect()
}

/// Writes `NNNN.png` files plus `labels.csv` (`file,label`).
pub fn save_dataset(dir: impl AsRef<Path>, items: &[(ImageTensor, usize)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = fs::File::create(dir.join("labels.csv"))?;
    writeln!(labels, "file,label")?;
    for (i, (img, label)) in items.iter().enumerate() {
        let name = image_name(i);
        img.save_png(dir.join(&name))?;
        writeln!(labels, "{name},{label}")?;
    }
    Ok(())
}

/// Reads `labels.csv` only.
pub fn load_labels(dir: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = dir.as_ref().join("labels.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (name, label) = l
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("bad labels.csv line `{l}`")))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad label in `{l}`")))?;
            Ok((name.to_string(), label))
        })
        .collect()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(ImageTensor, usize)>> {
    let dir = dir.as_ref();
    let items = load_labels(dir)?
        .into_iter()
        .map(|(name, label)| Ok((ImageTensor::load_png(dir.join(name))?, label)))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(items)
}
