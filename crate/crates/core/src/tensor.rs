//! Batched image and latent arrays.
//!
//! Both wrap a rank-4 `[batch, channels, height, width]` tensor in `f64` on
//! the CPU. Single images are batches of one.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> &'static Device {
    static CPU: Device = Device::Cpu;
    &CPU
}

/// Builds an `f64` tensor from host data.
pub fn tensor_from_vec(data: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, device())?)
}

pub fn tensor_to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?)
}

fn check_rank4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .map_err(|_| Error::Shape(format!("{what} must be rank 4, got {:?}", t.dims())))
}

/// RGB images, values nominally in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, _, _) = check_rank4(&t, "image")?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        Ok(Self(t))
    }

    pub fn from_vec(data: Vec<f64>, batch: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(tensor_from_vec(data, &[batch, 3, height, width])?)
    }

    pub fn constant(value: f64, height: usize, width: usize) -> Result<Self> {
        Self::from_vec(vec![value; 3 * height * width], 1, height, width)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        Self::from_vec(data, 1, h, w)
    }

    /// Quantizes batch item `index` to 8-bit RGB, clamping to `[0, 1]`.
    pub fn to_rgb8(&self, index: usize) -> Result<RgbImage> {
        let (_, h, w) = self.dims();
        let data = tensor_to_vec(&self.0.get(index)?)?;
        let mut img = RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = data[c * h * w + y as usize * w + x as usize];
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(img)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8(0)?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8(0)?
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn stack(items: &[ImageTensor]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let parts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Self::new(Tensor::cat(&parts, 0)?)
    }

    pub fn item(&self, index: usize) -> Result<Self> {
        Self::new(self.0.narrow(0, index, 1)?)
    }

    /// `(batch, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let (b, _, h, w) = self.0.dims4().expect("rank checked at construction");
        (b, h, w)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        tensor_to_vec(&self.0)
    }

    pub fn clamped(&self) -> Result<Self> {
        Ok(Self(self.0.clamp(0.0, 1.0)?))
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }
}

/// Codec-space arrays: `[batch, latent_channels, height / 4, width / 4]`.
#[derive(Clone, Debug)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank4(&t, "latent")?;
        Ok(Self(t))
    }

    pub fn from_vec(data: Vec<f64>, dims: (usize, usize, usize, usize)) -> Result<Self> {
        Self::new(tensor_from_vec(data, &[dims.0, dims.1, dims.2, dims.3])?)
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Result<Self> {
        Self::new(Tensor::zeros(dims, DTYPE, device())?)
    }

    pub fn stack(items: &[LatentTensor]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let parts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Self::new(Tensor::cat(&parts, 0)?)
    }

    pub fn item(&self, index: usize) -> Result<Self> {
        Self::new(self.0.narrow(0, index, 1)?)
    }

    /// `(batch, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        let (_, c, h, w) = self.dims();
        c * h * w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        tensor_to_vec(&self.0)
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "latent {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentTensor) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self((&self.0 - &other.0)?))
    }

    pub fn add(&self, other: &LatentTensor) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self((&self.0 + &other.0)?))
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Ok(Self((&self.0 * factor)?))
    }

    pub fn all_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let a = self.to_vec()?;
        let b = other.to_vec()?;
        Ok(a.iter().zip(&b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())))
    }

    /// `max |a - b| / max |b|`, with the denominator floored at 1e-12.
    pub fn rel_diff(&self, other: &LatentTensor) -> Result<f64> {
        let diff = self.max_abs_diff(other)?;
        let scale = other
            .to_vec()?
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        Ok(diff / scale)
    }
}
