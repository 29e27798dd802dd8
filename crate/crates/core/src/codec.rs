//! Plain convolutional autoencoder between RGB images and 4x spatially
//! compressed latents.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::{init_params, silu, Adam, Forward, LayerShape, ParamTable, VarTable};
use crate::runlog::RunLog;
use crate::tensor::{ImageTensor, LatentTensor};

pub const DOWNSCALE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub width: usize,
    pub latent_channels: usize,
    /// Encoder outputs are multiplied by this (and decoder inputs divided)
    /// so training latents have unit standard deviation.
    pub latent_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            width: 16,
            latent_channels: 4,
            latent_scale: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn layers(&self) -> Vec<LayerShape> {
        let (w, c) = (self.width, self.latent_channels);
        vec![
            LayerShape::conv("enc.conv_in", 3, w, 3, 1),
            LayerShape::conv("enc.down1", w, 2 * w, 3, 2),
            LayerShape::conv("enc.conv1", 2 * w, 2 * w, 3, 1),
            LayerShape::conv("enc.down2", 2 * w, 2 * w, 3, 2),
            LayerShape::conv("enc.conv2", 2 * w, 2 * w, 3, 1),
            LayerShape::conv("enc.conv_out", 2 * w, c, 3, 1),
            LayerShape::conv("dec.conv_in", c, 2 * w, 3, 1),
            LayerShape::conv("dec.conv1", 2 * w, 2 * w, 3, 1),
            LayerShape::conv("dec.up1", 2 * w, 2 * w, 3, 1),
            LayerShape::conv("dec.up2", 2 * w, w, 3, 1),
            LayerShape::conv("dec.conv_out", w, 3, 3, 1),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct CodecWeights {
    config: CodecConfig,
    params: ParamTable,
}

impl CodecWeights {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config.layers(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: CodecConfig, params: ParamTable) -> Result<Self> {
        for layer in config.layers() {
            let w = crate::nn::get(&params, &layer.weight_key())?;
            if w.dims() != layer.weight_dims().as_slice() {
                return Err(Error::Shape(layer.weight_key()));
            }
            crate::nn::get(&params, &layer.bias_key())?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let (_, h, w) = x.dims();
        if h % DOWNSCALE != 0 || w % DOWNSCALE != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: DOWNSCALE,
            });
        }
        let f = Forward::plain(&self.params);
        let h = silu(&f.conv("enc.conv_in", x.tensor(), 1)?)?;
        let h = silu(&f.conv("enc.down1", &h, 2)?)?;
        let h = (&h + silu(&f.conv("enc.conv1", &h, 1)?)?)?;
        let h = silu(&f.conv("enc.down2", &h, 2)?)?;
        let h = (&h + silu(&f.conv("enc.conv2", &h, 1)?)?)?;
        let z = f.conv("enc.conv_out", &h, 1)?;
        LatentTensor::new((z * self.config.latent_scale)?)
    }

    /// Decoder output before clamping; used as the differentiable path
    /// during training.
    pub fn decode_raw(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let (_, c, h, w) = z.dims();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "codec expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let f = Forward::plain(&self.params);
        let z = (z.tensor() * (1.0 / self.config.latent_scale))?;
        let x = silu(&f.conv("dec.conv_in", &z, 1)?)?;
        let x = (&x + silu(&f.conv("dec.conv1", &x, 1)?)?)?;
        let x = x.upsample_nearest2d(2 * h, 2 * w)?;
        let x = silu(&f.conv("dec.up1", &x, 1)?)?;
        let x = x.upsample_nearest2d(4 * h, 4 * w)?;
        let x = silu(&f.conv("dec.up2", &x, 1)?)?;
        let x = (f.conv("dec.conv_out", &x, 1)? + 0.5)?;
        ImageTensor::new(x)
    }

    /// Decoded image clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        self.decode_raw(z)?.clamped()
    }

    /// `decode(encode(x))`
    pub fn reconstruct(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.decode(&self.encode(x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Mean reconstruction PSNR (RGB, `[0, 1]` range) over a set.
pub fn reconstruction_psnr(codec: &CodecWeights, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in images.chunks(16) {
        let batch = ImageTensor::stack(chunk)?;
        let rec = codec.reconstruct(&batch)?;
        for i in 0..chunk.len() {
            total += psnr(&rec.item(i)?, &batch.item(i)?)?;
        }
    }
    Ok(total / images.len() as f64)
}

/// ℓ2 reconstruction training. Validation PSNR is logged once per epoch
/// (one pass over the training set). On return the latent scale is set from
/// the standard deviation of the training-set latents.
pub fn train_codec(
    config: CodecConfig,
    train: &[ImageTensor],
    val: &[ImageTensor],
    cfg: &CodecTrainConfig,
    log: &mut RunLog,
) -> Result<CodecWeights> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = CodecConfig {
        latent_scale: 1.0,
        ..config
    };
    let init = CodecWeights::init(config.clone(), cfg.seed)?;
    let vt = VarTable::new(init.params())?;
    let model = CodecWeights {
        config: config.clone(),
        params: vt.table.clone(),
    };
    let mut opt = Adam::new(vt.vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch_size = cfg.batch_size.clamp(1, train.len());
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut items = Vec::with_capacity(batch_size);
        while items.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            items.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let x = ImageTensor::stack(&items)?;
        let rec = model.decode_raw(&model.encode(&x)?)?;
        let loss = (rec.tensor() - x.tensor())?.sqr()?.mean_all()?;
        let lv = loss.to_scalar::<f64>()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "codec reconstruction loss".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % steps_per_epoch == 0 || step == cfg.steps {
            let snapshot = CodecWeights::from_params(config.clone(), vt.snapshot()?)?;
            let val_psnr = if val.is_empty() {
                f64::NAN
            } else {
                reconstruction_psnr(&snapshot, val)?
            };
            log.record(serde_json::json!({
                "stage": "codec",
                "step": step,
                "epoch": step.div_ceil(steps_per_epoch),
                "loss": lv,
                "val_psnr": val_psnr,
            }))?;
        }
    }
    let trained = CodecWeights::from_params(config.clone(), vt.snapshot()?)?;
    let scale = latent_scale_for(&trained, train)?;
    CodecWeights::from_params(
        CodecConfig {
            latent_scale: scale,
            ..config
        },
        trained.params,
    )
}

fn latent_scale_for(codec: &CodecWeights, images: &[ImageTensor]) -> Result<f64> {
    let mut values = Vec::new();
    for chunk in images.chunks(32) {
        values.extend(codec.encode(&ImageTensor::stack(chunk)?)?.to_vec()?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(if std > 1e-8 { 1.0 / std } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tables_equal;

    fn smooth_image(h: usize, w: usize, phase: f64) -> ImageTensor {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.3 * ((x as f64 / w as f64 * 3.0 + phase + c as f64).sin())
                            * ((y as f64 / h as f64 * 2.0 + phase).cos());
                    data[c * h * w + y * w + x] = v;
                }
            }
        }
        ImageTensor::from_vec(data, 1, h, w).unwrap()
    }

    #[test]
    fn shape_contract() {
        let codec = CodecWeights::init(CodecConfig::default(), 0).unwrap();
        let x = smooth_image(64, 64, 0.0);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.dims(), (1, 4, 16, 16));
        let y = codec.decode(&z).unwrap();
        assert_eq!(y.dims(), (1, 64, 64));
        let z2 = codec.encode(&smooth_image(32, 48, 0.0)).unwrap();
        assert_eq!(codec.decode(&z2).unwrap().dims(), (1, 32, 48));
    }

    #[test]
    fn deterministic() {
        let codec = CodecWeights::init(CodecConfig::default(), 0).unwrap();
        let x = smooth_image(32, 32, 0.3);
        let a = codec.encode(&x).unwrap().to_vec().unwrap();
        let b = codec.encode(&x).unwrap().to_vec().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_rejected() {
        let codec = CodecWeights::init(CodecConfig::default(), 0).unwrap();
        assert!(matches!(
            codec.encode(&smooth_image(30, 32, 0.0)),
            Err(Error::Indivisible { .. })
        ));
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let codec = CodecWeights::init(CodecConfig::default(), 5).unwrap();
        let y = codec.decode(&LatentTensor::zeros((1, 4, 16, 16)).unwrap()).unwrap();
        assert_eq!(y.dims(), (1, 64, 64));
        assert!(y.to_vec().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let cfg = CodecTrainConfig {
            steps: 3,
            batch_size: 1,
            lr: 0.0,
            seed: 9,
        };
        let x = vec![smooth_image(16, 16, 0.1)];
        let trained =
            train_codec(CodecConfig::default(), &x, &[], &cfg, &mut RunLog::memory()).unwrap();
        let init = CodecWeights::init(CodecConfig::default(), 9).unwrap();
        assert!(tables_equal(trained.params(), init.params()).unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = train_codec(
            CodecConfig::default(),
            &[],
            &[],
            &CodecTrainConfig::default(),
            &mut RunLog::memory(),
        );
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn overfits_single_image() {
        let x = vec![smooth_image(32, 32, 0.7)];
        let cfg = CodecTrainConfig {
            steps: 200,
            batch_size: 1,
            lr: 3e-3,
            seed: 1,
        };
        let mut log = RunLog::memory();
        let codec = train_codec(CodecConfig::default(), &x, &x, &cfg, &mut log).unwrap();
        let p = reconstruction_psnr(&codec, &x).unwrap();
        assert!(p >= 35.0, "overfit PSNR {p:.2} dB");
        // The rescaled codec reconstructs exactly as the unscaled one did.
        let last = log.series("codec", "val_psnr");
        assert!((last.last().unwrap() - p).abs() < 1e-6);
    }
}
