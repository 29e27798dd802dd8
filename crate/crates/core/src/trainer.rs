//! Two-stage adapter training for the one-step student.
//!
//! Stage 1 trains the pixel adapter alone with a reconstruction loss.
//! Stage 2 freezes it and trains the semantic adapter, applied on top, with
//! the perceptual loss plus the classifier score distillation signal from
//! the teacher. The base network, codec, teacher and feature net never
//! change.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{DenoiserRole, DenoiserWeights};
use crate::codec::CodecWeights;
use crate::error::{Error, Result};
use crate::lora::{init_lora, AdapterRole, LoraAdapter, PisaGroup, DEFAULT_RANK};
use crate::losses::{
    csd_gradient, distillation_surrogate, l2_latent_loss, l2_loss, perceptual_loss, vsd_gradient, FakeScore,
    FakeScoreConfig, GuidanceConfig, LatentGradient,
};
use crate::metrics::psnr_y;
use crate::perception::{Condition, FeatureNetWeights};
use crate::runlog::RunLog;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{ImageTensor, LatentTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelLoss {
    /// ℓ2 between the decoded output and the HQ image.
    Image,
    /// ℓ2 between the output latent and the encoded HQ image.
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distillation {
    Csd,
    Vsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub pix_iters: usize,
    pub sem_iters: usize,
    pub student_timestep: usize,
    pub lambda_cfg: f64,
    pub w_lpips: f64,
    pub w_csd: f64,
    pub lora_rank: usize,
    pub pixel_loss: PixelLoss,
    pub distillation: Distillation,
    /// Learning rate of the fake-score network (VSD only).
    pub fake_lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 4,
            pix_iters: 1000,
            sem_iters: 2000,
            student_timestep: 1,
            lambda_cfg: 7.5,
            w_lpips: 1.0,
            w_csd: 1.0,
            lora_rank: DEFAULT_RANK,
            pixel_loss: PixelLoss::Image,
            distillation: Distillation::Csd,
            fake_lr: 1e-4,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange(format!("lr = {}", self.lr)));
        }
        if self.batch_size == 0 || self.lora_rank == 0 {
            return Err(Error::InvalidRange("batch_size and lora_rank must be positive".into()));
        }
        if self.student_timestep == 0 || self.student_timestep > sched.steps() {
            return Err(Error::StepOutOfRange {
                t: self.student_timestep,
                max: sched.steps(),
            });
        }
        for (name, v) in [("w_lpips", self.w_lpips), ("w_csd", self.w_csd), ("lambda_cfg", self.lambda_cfg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidRange(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// `z_L - eps(z_L, t_s, null)` with the given adapters on the base.
pub fn student_forward(
    z_l: &LatentTensor,
    base: &DenoiserWeights,
    adapters: &[&LoraAdapter],
    student_timestep: usize,
) -> Result<LatentTensor> {
    let eps = base.eps_predict(z_l, &[student_timestep], &[Condition::Null], adapters)?;
    z_l.sub(&eps)
}

/// LQ/HQ pair in the forms the stages consume.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub z_l: LatentTensor,
    pub hq: ImageTensor,
}

/// Encodes each LQ image once; the codec is frozen throughout.
pub fn encode_pairs(codec: &CodecWeights, pairs: &[(ImageTensor, ImageTensor)]) -> Result<Vec<TrainPair>> {
    pairs
        .iter()
        .map(|(lq, hq)| {
            Ok(TrainPair {
                z_l: codec.encode(lq)?.detach(),
                hq: hq.clone(),
            })
        })
        .collect()
}

/// Endless reshuffled pass over `0..n`.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn gather(pairs: &[TrainPair], idx: &[usize]) -> Result<(LatentTensor, ImageTensor)> {
    let z = LatentTensor::stack(&idx.iter().map(|&i| pairs[i].z_l.clone()).collect::<Vec<_>>())?;
    let x = ImageTensor::stack(&idx.iter().map(|&i| pairs[i].hq.clone()).collect::<Vec<_>>())?;
    Ok((z, x))
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: what.into(),
        })
    }
}

/// Mean PSNR_Y of the student output against HQ.
pub fn validation_psnr(
    codec: &CodecWeights,
    base: &DenoiserWeights,
    adapters: &[&LoraAdapter],
    student_timestep: usize,
    val: &[TrainPair],
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for p in val {
        let out = codec.decode(&student_forward(&p.z_l, base, adapters, student_timestep)?)?;
        total += psnr_y(&out, &p.hq)?;
    }
    Ok(total / val.len() as f64)
}

/// Mean perceptual distance of the student output to HQ.
pub fn validation_perceptual(
    codec: &CodecWeights,
    base: &DenoiserWeights,
    adapters: &[&LoraAdapter],
    student_timestep: usize,
    featnet: &FeatureNetWeights,
    val: &[TrainPair],
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for p in val {
        let out = codec.decode(&student_forward(&p.z_l, base, adapters, student_timestep)?)?;
        total += perceptual_loss(&out, &p.hq, featnet)?.to_scalar::<f64>()?;
    }
    Ok(total / val.len() as f64)
}

/// Stage 1: the pixel adapter under a reconstruction loss. Returns the
/// trained adapter; nothing else is modified.
pub fn train_pixel_stage(
    train: &[TrainPair],
    val: &[TrainPair],
    codec: &CodecWeights,
    base: &DenoiserWeights,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<LoraAdapter> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    base.require_role(DenoiserRole::StudentBase)?;
    cfg.validate(sched)?;
    let init = init_lora(&base.config().layers(), cfg.lora_rank, cfg.seed, AdapterRole::Pixel)?;
    let (adapter, vars) = init.trainable()?;
    let mut opt = crate::nn::Adam::new(vars, cfg.lr)?;
    let mut batcher = Batcher::new(train.len(), cfg.seed.wrapping_add(11));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.min(train.len()));
    let z_h: Vec<LatentTensor> = match cfg.pixel_loss {
        PixelLoss::Latent => train
            .iter()
            .map(|p| Ok(codec.encode(&p.hq)?.detach()))
            .collect::<Result<_>>()?,
        PixelLoss::Image => Vec::new(),
    };
    for step in 1..=cfg.pix_iters {
        let idx = batcher.next(cfg.batch_size);
        let (z_l, x_hq) = gather(train, &idx)?;
        let z_pix = student_forward(&z_l, base, &[&adapter], cfg.student_timestep)?;
        let loss = match cfg.pixel_loss {
            PixelLoss::Image => l2_loss(&codec.decode_raw(&z_pix)?, &x_hq)?,
            PixelLoss::Latent => {
                let target = LatentTensor::stack(&idx.iter().map(|&i| z_h[i].clone()).collect::<Vec<_>>())?;
                l2_latent_loss(&z_pix, &target)?
            }
        };
        let lv = loss.to_scalar::<f64>()?;
        check_finite(step, "pixel-stage loss", lv)?;
        opt.backward_step(&loss)?;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.pix_iters {
            let snapshot = adapter.frozen()?;
            let val_psnr = if val.is_empty() {
                f64::NAN
            } else {
                validation_psnr(codec, base, &[&snapshot], cfg.student_timestep, val)?
            };
            log.record(json!({
                "stage": "pixel", "step": step, "epoch": step.div_ceil(steps_per_epoch),
                "loss": lv, "val_psnr": val_psnr,
            }))?;
        }
    }
    adapter.frozen()
}

/// Frozen models stage 2 reads from.
pub struct SemanticContext<'a> {
    pub codec: &'a CodecWeights,
    pub base: &'a DenoiserWeights,
    pub pixel: &'a LoraAdapter,
    pub teacher: &'a DenoiserWeights,
    pub featnet: &'a FeatureNetWeights,
    pub sched: &'a DiffusionSchedule,
}

/// Stage 2: the semantic adapter inside the group, pixel adapter frozen.
/// Per step the condition is re-extracted from the current output.
pub fn train_semantic_stage(
    train: &[TrainPair],
    val: &[TrainPair],
    ctx: &SemanticContext,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<LoraAdapter> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ctx.base.require_role(DenoiserRole::StudentBase)?;
    ctx.teacher.require_role(DenoiserRole::Teacher)?;
    cfg.validate(ctx.sched)?;
    let pixel_before = ctx.pixel.params();
    let init = init_lora(
        &ctx.base.config().layers(),
        cfg.lora_rank,
        cfg.seed.wrapping_add(1),
        AdapterRole::Semantic,
    )?;
    let group = PisaGroup::new(ctx.pixel.frozen()?, init)?;
    let (semantic, vars) = group.semantic.trainable()?;
    let mut opt = crate::nn::Adam::new(vars, cfg.lr)?;
    let gcfg = GuidanceConfig {
        lambda_cfg: cfg.lambda_cfg,
    };
    let mut fake = match cfg.distillation {
        Distillation::Vsd => Some(FakeScore::new(
            &ctx.teacher.with_role(DenoiserRole::Fake),
            &FakeScoreConfig { lr: cfg.fake_lr },
        )?),
        Distillation::Csd => None,
    };
    let mut batcher = Batcher::new(train.len(), cfg.seed.wrapping_add(12));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(13));
    let train_any = cfg.w_lpips > 0.0 || cfg.w_csd > 0.0;
    for step in 1..=cfg.sem_iters {
        let idx = batcher.next(cfg.batch_size);
        let (z_l, x_hq) = gather(train, &idx)?;
        let z_sem = student_forward(&z_l, ctx.base, &[&group.pixel, &semantic], cfg.student_timestep)?;
        let x_sem = ctx.codec.decode_raw(&z_sem)?;
        let cond = ctx.featnet.predict_conditions(&x_sem.clamped()?.detach())?;
        let perc = perceptual_loss(&x_sem, &x_hq, ctx.featnet)?;
        let mut record = json!({
            "stage": "semantic", "step": step,
            "perceptual": perc.to_scalar::<f64>()?,
        });
        let mut loss = (&perc * cfg.w_lpips)?;
        if cfg.w_csd > 0.0 {
            let grad: LatentGradient = match fake.as_mut() {
                None => csd_gradient(&z_sem, ctx.teacher, &cond, ctx.sched, &gcfg, &mut rng)?,
                Some(f) => {
                    let g = vsd_gradient(&z_sem, ctx.teacher, &f.weights()?, &cond, ctx.sched, &gcfg, &mut rng)?;
                    f.update(&z_sem.detach(), &cond, ctx.sched, &mut rng)?;
                    g
                }
            };
            loss = (loss + (distillation_surrogate(&grad, &z_sem)? * cfg.w_csd)?)?;
            record["t"] = json!(grad.t);
            record["w_t"] = json!(grad.w_t);
            record["grad_norm"] = json!(grad.norms()?);
        }
        let lv = loss.to_scalar::<f64>()?;
        check_finite(step, "semantic-stage loss", lv)?;
        record["loss"] = json!(lv);
        if train_any {
            opt.backward_step(&loss)?;
        }
        log.record(record)?;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.sem_iters {
            let snapshot = semantic.frozen()?;
            let val_perc = if val.is_empty() {
                f64::NAN
            } else {
                validation_perceptual(
                    ctx.codec,
                    ctx.base,
                    &[&group.pixel, &snapshot],
                    cfg.student_timestep,
                    ctx.featnet,
                    val,
                )?
            };
            log.record(json!({"stage": "semantic-val", "step": step, "val_perceptual": val_perc}))?;
        }
    }
    if !crate::nn::tables_equal(&group.pixel.params(), &pixel_before)? {
        return Err(Error::Integrity("pixel adapter changed during the semantic stage".into()));
    }
    semantic.frozen()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DenoiserArch, DenoiserConfig};
    use crate::codec::CodecConfig;
    use crate::nn::{gaussian_vec, tables_equal};
    use crate::perception::FeatureNetConfig;
    use crate::schedule::make_schedule;
    use rand::Rng;

    fn small_base() -> DenoiserWeights {
        let cfg = DenoiserConfig {
            arch: DenoiserArch::Unet {
                base_width: 8,
                channel_mults: vec![1, 2],
            },
            latent_channels: 4,
            num_classes: 3,
        };
        DenoiserWeights::init(cfg, DenoiserRole::StudentBase, 5).unwrap()
    }

    fn codec() -> CodecWeights {
        CodecWeights::init(
            CodecConfig {
                width: 4,
                ..CodecConfig::default()
            },
            6,
        )
        .unwrap()
    }

    fn pairs(n: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = codec();
        (0..n)
            .map(|_| {
                let hq = ImageTensor::from_vec((0..3 * 16 * 16).map(|_| rng.random::<f64>()).collect(), 1, 16, 16)
                    .unwrap();
                let lq = ImageTensor::new(hq.tensor().affine(0.5, 0.25).unwrap()).unwrap();
                encode_pairs(&c, &[(lq, hq)]).unwrap().remove(0)
            })
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            pix_iters: 3,
            sem_iters: 3,
            eval_every: 3,
            lora_rank: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn student_forward_identities() {
        let base = small_base();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = LatentTensor::from_vec(gaussian_vec(&mut rng, 2 * 4 * 8 * 8, 1.0), (2, 4, 8, 8)).unwrap();
        // Zeroed network predicts zero noise.
        let zeroed: crate::nn::ParamTable = base
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v.zeros_like().unwrap()))
            .collect();
        let zero_net = DenoiserWeights::from_params(base.config().clone(), DenoiserRole::StudentBase, zeroed).unwrap();
        assert_eq!(student_forward(&z, &zero_net, &[], 1).unwrap().to_vec().unwrap(), z.to_vec().unwrap());
        // Fresh adapters leave the base result.
        let fresh = init_lora(&base.config().layers(), 4, 1, AdapterRole::Pixel).unwrap();
        let plain = student_forward(&z, &base, &[], 1).unwrap();
        let adapted = student_forward(&z, &base, &[&fresh], 1).unwrap();
        assert!(plain.max_abs_diff(&adapted).unwrap() <= 1e-12);
        // Explicit subtraction.
        let eps = base.eps_predict(&z, &[1], &[Condition::Null], &[]).unwrap().to_vec().unwrap();
        let expect: Vec<f64> = z.to_vec().unwrap().iter().zip(&eps).map(|(a, b)| a - b).collect();
        assert_eq!(plain.to_vec().unwrap(), expect);
    }

    #[test]
    fn pixel_stage_zero_lr_matches_base() {
        let base = small_base();
        let c = codec();
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let data = pairs(4, 1);
        let cfg = TrainConfig { lr: 0.0, ..quick_cfg() };
        let base_before = base.params().clone();
        let adapter = train_pixel_stage(&data, &data, &c, &base, &sched, &cfg, &mut RunLog::memory()).unwrap();
        for p in &data {
            let a = student_forward(&p.z_l, &base, &[&adapter], 1).unwrap();
            let b = student_forward(&p.z_l, &base, &[], 1).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
        assert!(tables_equal(base.params(), &base_before).unwrap());
    }

    #[test]
    fn pixel_stage_is_seed_deterministic_and_touches_only_adapter() {
        let base = small_base();
        let c = codec();
        let codec_before = c.params().clone();
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let data = pairs(4, 2);
        let mut log = RunLog::memory();
        let a = train_pixel_stage(&data, &data, &c, &base, &sched, &quick_cfg(), &mut log).unwrap();
        let b = train_pixel_stage(&data, &data, &c, &base, &sched, &quick_cfg(), &mut RunLog::memory()).unwrap();
        assert!(a.same_values(&b).unwrap());
        assert!(tables_equal(c.params(), &codec_before).unwrap());
        assert_eq!(a.role, AdapterRole::Pixel);
        assert_eq!(log.series("pixel", "val_psnr").len(), 1);
        let latent = TrainConfig {
            pixel_loss: PixelLoss::Latent,
            ..quick_cfg()
        };
        train_pixel_stage(&data, &[], &c, &base, &sched, &latent, &mut RunLog::memory()).unwrap();
    }

    fn semantic_fixture() -> (DenoiserWeights, CodecWeights, LoraAdapter, DenoiserWeights, FeatureNetWeights) {
        let base = small_base();
        let c = codec();
        let pixel = {
            let sched = make_schedule(100, 1e-4, 0.02).unwrap();
            train_pixel_stage(&pairs(4, 3), &[], &c, &base, &sched, &quick_cfg(), &mut RunLog::memory()).unwrap()
        };
        let teacher = base.with_role(DenoiserRole::Teacher);
        let featnet = FeatureNetWeights::init(
            FeatureNetConfig {
                width: 4,
                num_classes: 3,
                taps: vec![1, 2, 3],
            },
            7,
        )
        .unwrap();
        (base, c, pixel, teacher, featnet)
    }

    #[test]
    fn semantic_stage_freezes_everything_else() {
        let (base, c, pixel, teacher, featnet) = semantic_fixture();
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let pixel_before = pixel.clone();
        let ctx = SemanticContext {
            codec: &c,
            base: &base,
            pixel: &pixel,
            teacher: &teacher,
            featnet: &featnet,
            sched: &sched,
        };
        let data = pairs(4, 4);
        let mut log = RunLog::memory();
        let sem = train_semantic_stage(&data, &data, &ctx, &quick_cfg(), &mut log).unwrap();
        assert!(pixel.same_values(&pixel_before).unwrap());
        assert_eq!(sem.role, AdapterRole::Semantic);
        let fresh = init_lora(&base.config().layers(), 2, 1, AdapterRole::Semantic).unwrap();
        assert!(!sem.same_values(&fresh).unwrap());
        let records: Vec<_> = log.records().iter().filter(|r| r["stage"] == "semantic").collect();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0]["t"].as_array().unwrap().len(), 2);
        // VSD variant runs too.
        let vsd = TrainConfig {
            distillation: Distillation::Vsd,
            ..quick_cfg()
        };
        train_semantic_stage(&data, &[], &ctx, &vsd, &mut RunLog::memory()).unwrap();
    }

    #[test]
    fn semantic_stage_with_zero_weights_keeps_init() {
        let (base, c, pixel, teacher, featnet) = semantic_fixture();
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let ctx = SemanticContext {
            codec: &c,
            base: &base,
            pixel: &pixel,
            teacher: &teacher,
            featnet: &featnet,
            sched: &sched,
        };
        let cfg = TrainConfig {
            w_lpips: 0.0,
            w_csd: 0.0,
            ..quick_cfg()
        };
        let sem = train_semantic_stage(&pairs(3, 5), &[], &ctx, &cfg, &mut RunLog::memory()).unwrap();
        let fresh = init_lora(&base.config().layers(), 2, cfg.seed.wrapping_add(1), AdapterRole::Semantic).unwrap();
        assert!(sem.same_values(&fresh).unwrap());
    }

    #[test]
    fn config_validation() {
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        assert!(TrainConfig::default().validate(&sched).is_ok());
        assert!(TrainConfig {
            student_timestep: 11,
            ..TrainConfig::default()
        }
        .validate(&sched)
        .is_err());
        assert!(TrainConfig {
            w_csd: f64::NAN,
            ..TrainConfig::default()
        }
        .validate(&sched)
        .is_err());
    }
}
