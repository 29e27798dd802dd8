//! Conditional noise predictor `eps(z, t, c)`.
//!
//! The same network type serves as the pretrained teacher, the frozen base
//! of the one-step student, and the fake-score network. Two architectures:
//!
//! * `Unet`: conv-in, one residual block per level with a stride-2 conv
//!   between levels, a middle block, then the mirrored decoder with skip
//!   concatenation and nearest upsampling. Timestep (sinusoidal, then a
//!   two-layer MLP) plus condition embedding are added into every residual
//!   block.
//! * `Pointwise`: a single 1x1 conv plus a per-channel condition bias. Used
//!   where a test needs a network with a handful of parameters.
//!
//! Layer identifiers (stable across save/load, used by LoRA targeting):
//!
//! ```text
//! time_mlp.0  time_mlp.1  conv_in
//! down.{i}.res.{conv1,temb,conv2,skip}  down.{i}.downsample
//! mid.res.{conv1,temb,conv2}
//! up.{i}.res.{conv1,temb,conv2,skip}    up.{i}.upsample
//! conv_out                               (Pointwise: out)
//! ```
//!
//! The condition table `cond_embed` has `num_classes + 1` rows; the last
//! row is the null condition. It is an embedding, not a LoRA target.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::losses::{denoising_loss, DistillDraw};
use crate::nn::{gaussian_vec, get, init_params, silu, Adam, Forward, LayerShape, ParamTable, VarTable};
use crate::perception::Condition;
use crate::runlog::RunLog;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{tensor_from_vec, LatentTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserArch {
    Unet {
        base_width: usize,
        channel_mults: Vec<usize>,
    },
    Pointwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: DenoiserArch,
    pub latent_channels: usize,
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            arch: DenoiserArch::Unet {
                base_width: 32,
                channel_mults: vec![1, 2, 4],
            },
            latent_channels: 4,
            num_classes: 8,
        }
    }
}

fn res_layers(out: &mut Vec<LayerShape>, id: &str, cin: usize, cout: usize, temb: usize) {
    out.push(LayerShape::conv(format!("{id}.conv1"), cin, cout, 3, 1));
    out.push(LayerShape::linear(format!("{id}.temb"), temb, cout));
    out.push(LayerShape::conv(format!("{id}.conv2"), cout, cout, 3, 1));
    if cin != cout {
        out.push(LayerShape::conv(format!("{id}.skip"), cin, cout, 1, 1));
    }
}

impl DenoiserConfig {
    /// Width of the timestep / condition embedding.
    pub fn embed_dim(&self) -> usize {
        match &self.arch {
            DenoiserArch::Unet { base_width, .. } => 2 * base_width,
            DenoiserArch::Pointwise => self.latent_channels,
        }
    }

    /// Spatial size must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        match &self.arch {
            DenoiserArch::Unet { channel_mults, .. } => 1 << channel_mults.len().saturating_sub(1),
            DenoiserArch::Pointwise => 1,
        }
    }

    /// Every conv and linear layer, in forward order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let c = self.latent_channels;
        match &self.arch {
            DenoiserArch::Pointwise => vec![LayerShape::conv("out", c, c, 1, 1)],
            DenoiserArch::Unet {
                base_width,
                channel_mults,
            } => {
                let temb = self.embed_dim();
                let chs: Vec<usize> = channel_mults.iter().map(|m| m * base_width).collect();
                let levels = chs.len();
                let mut out = vec![
                    LayerShape::linear("time_mlp.0", *base_width, temb),
                    LayerShape::linear("time_mlp.1", temb, temb),
                    LayerShape::conv("conv_in", c, chs[0], 3, 1),
                ];
                let mut prev = chs[0];
                for (i, &ch) in chs.iter().enumerate() {
                    res_layers(&mut out, &format!("down.{i}.res"), prev, ch, temb);
                    prev = ch;
                    if i + 1 < levels {
                        out.push(LayerShape::conv(format!("down.{i}.downsample"), ch, ch, 3, 2));
                    }
                }
                res_layers(&mut out, "mid.res", prev, prev, temb);
                for i in (0..levels).rev() {
                    res_layers(&mut out, &format!("up.{i}.res"), prev + chs[i], chs[i], temb);
                    prev = chs[i];
                    if i > 0 {
                        out.push(LayerShape::conv(format!("up.{i}.upsample"), prev, prev, 3, 1));
                    }
                }
                out.push(LayerShape::conv("conv_out", chs[0], c, 3, 1));
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserRole {
    Teacher,
    StudentBase,
    Fake,
}

impl DenoiserRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DenoiserRole::Teacher => "teacher",
            DenoiserRole::StudentBase => "student-base",
            DenoiserRole::Fake => "fake",
        }
    }
}

/// Anything that predicts noise for a batch of latents.
pub trait EpsModel {
    /// `t` and `cond` hold either one entry (shared) or one per batch item.
    fn eps(&self, z: &LatentTensor, t: &[usize], cond: &[Condition]) -> Result<LatentTensor>;
}

#[derive(Clone, Debug)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    role: DenoiserRole,
    params: ParamTable,
    evals: Arc<AtomicU64>,
}

impl DenoiserWeights {
    pub fn init(config: DenoiserConfig, role: DenoiserRole, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&config.layers(), &mut rng)?;
        let rows = config.num_classes + 1;
        let dim = config.embed_dim();
        params.insert(
            "cond_embed".into(),
            tensor_from_vec(gaussian_vec(&mut rng, rows * dim, 0.1), &[rows, dim])?,
        );
        Self::from_params(config, role, params)
    }

    pub fn from_params(config: DenoiserConfig, role: DenoiserRole, params: ParamTable) -> Result<Self> {
        let mut expected = 1;
        for layer in config.layers() {
            for (key, dims) in [
                (layer.weight_key(), layer.weight_dims()),
                (layer.bias_key(), vec![layer.fan_out()]),
            ] {
                let t = get(&params, &key)?;
                if t.dims() != dims.as_slice() {
                    return Err(Error::Shape(format!("{key}: {:?} vs {dims:?}", t.dims())));
                }
                expected += 1;
            }
        }
        let table = get(&params, "cond_embed")?;
        if table.dims() != [config.num_classes + 1, config.embed_dim()] {
            return Err(Error::Shape(format!("cond_embed: {:?}", table.dims())));
        }
        if params.len() != expected {
            return Err(Error::Shape("denoiser table has unexpected entries".into()));
        }
        Ok(Self {
            config,
            role,
            params,
            evals: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn role(&self) -> DenoiserRole {
        self.role
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    /// Same weights under a different role tag, with a fresh counter.
    pub fn with_role(&self, role: DenoiserRole) -> Self {
        Self {
            config: self.config.clone(),
            role,
            params: self.params.clone(),
            evals: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn require_role(&self, role: DenoiserRole) -> Result<()> {
        if self.role != role {
            return Err(Error::Role {
                expected: role.as_str().into(),
                found: self.role.as_str().into(),
            });
        }
        Ok(())
    }

    /// Number of forward evaluations performed on these weights (shared by
    /// clones).
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    /// Noise prediction with optional LoRA adapters. An empty adapter list
    /// evaluates the base network.
    pub fn eps_predict(
        &self,
        z: &LatentTensor,
        t: &[usize],
        cond: &[Condition],
        adapters: &[&LoraAdapter],
    ) -> Result<LatentTensor> {
        if adapters.is_empty() {
            return self.forward_unchecked(z, t, cond, &[]);
        }
        crate::lora::apply_adapters(self, adapters)?.eps(z, t, cond)
    }

    pub(crate) fn forward_unchecked(
        &self,
        z: &LatentTensor,
        t: &[usize],
        cond: &[Condition],
        adapters: &[&LoraAdapter],
    ) -> Result<LatentTensor> {
        let (b, c, h, w) = z.dims();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: m,
            });
        }
        let ts = broadcast(t, b, "timesteps")?;
        let cs = broadcast(cond, b, "conditions")?;
        let rows = self.cond_rows(&cs)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        let f = Forward::new(&self.params, adapters);
        let cemb = get(&self.params, "cond_embed")?.index_select(&rows, 0)?;
        let out = match &self.config.arch {
            DenoiserArch::Pointwise => {
                let y = f.conv("out", z.tensor(), 1)?;
                y.broadcast_add(&cemb.reshape((b, c, 1, 1))?)?
            }
            DenoiserArch::Unet {
                base_width,
                channel_mults,
            } => {
                let temb = timestep_embedding(&ts, *base_width)?;
                let temb = f.linear("time_mlp.1", &silu(&f.linear("time_mlp.0", &temb)?)?)?;
                let emb = silu(&(temb + cemb)?)?;
                unet_forward(&f, z.tensor(), &emb, channel_mults.len())?
            }
        };
        LatentTensor::new(out)
    }

    fn cond_rows(&self, cond: &[Condition]) -> Result<Tensor> {
        let k = self.config.num_classes;
        let idx = cond
            .iter()
            .map(|c| match *c {
                Condition::Null => Ok(k as u32),
                Condition::Class(i) if i < k => Ok(i as u32),
                Condition::Class(i) => Err(Error::InvalidRange(format!(
                    "condition class {i} outside [0, {k})"
                ))),
            })
            .collect::<Result<Vec<u32>>>()?;
        let n = idx.len();
        Ok(Tensor::from_vec(idx, n, crate::tensor::device())?)
    }
}

impl EpsModel for DenoiserWeights {
    fn eps(&self, z: &LatentTensor, t: &[usize], cond: &[Condition]) -> Result<LatentTensor> {
        self.forward_unchecked(z, t, cond, &[])
    }
}

fn broadcast<T: Copy>(v: &[T], n: usize, what: &str) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        len if len == n => Ok(v.to_vec()),
        len => Err(Error::Shape(format!("{len} {what} for batch of {n}"))),
    }
}

/// `[sin(t f_j), cos(t f_j)]` with `f_j = 10000^(-j / half)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![0.0; dim];
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[j] = arg.sin();
            row[half + j] = arg.cos();
        }
        data.extend(row);
    }
    tensor_from_vec(data, &[ts.len(), dim])
}

fn res_block(f: &Forward, id: &str, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
    let h = f.conv(&format!("{id}.conv1"), &silu(x)?, 1)?;
    let (b, c, _, _) = h.dims4()?;
    let e = f.linear(&format!("{id}.temb"), emb)?.reshape((b, c, 1, 1))?;
    let h = h.broadcast_add(&e)?;
    let h = f.conv(&format!("{id}.conv2"), &silu(&h)?, 1)?;
    let skip = if x.dims()[1] != c {
        f.conv(&format!("{id}.skip"), x, 1)?
    } else {
        x.clone()
    };
    Ok((skip + h)?)
}

fn unet_forward(f: &Forward, z: &Tensor, emb: &Tensor, levels: usize) -> Result<Tensor> {
    let mut h = f.conv("conv_in", z, 1)?;
    let mut skips = Vec::with_capacity(levels);
    for i in 0..levels {
        h = res_block(f, &format!("down.{i}.res"), &h, emb)?;
        skips.push(h.clone());
        if i + 1 < levels {
            h = f.conv(&format!("down.{i}.downsample"), &h, 2)?;
        }
    }
    h = res_block(f, "mid.res", &h, emb)?;
    for i in (0..levels).rev() {
        h = Tensor::cat(&[&h, &skips[i]], 1)?;
        h = res_block(f, &format!("up.{i}.res"), &h, emb)?;
        if i > 0 {
            let (_, _, hh, ww) = h.dims4()?;
            h = f.conv(&format!("up.{i}.upsample"), &h.upsample_nearest2d(hh * 2, ww * 2)?, 1)?;
        }
    }
    f.conv("conv_out", &silu(&h)?, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a label with the null condition.
    pub cond_dropout: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
            eval_every: 250,
        }
    }
}

/// Mean denoising loss over a latent set with fixed seeded draws, either
/// with the true labels or with the null condition.
pub fn denoising_eval(
    model: &impl EpsModel,
    latents: &[LatentTensor],
    labels: &[usize],
    sched: &DiffusionSchedule,
    conditional: bool,
    seed: u64,
) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (chunk, labs) in latents.chunks(32).zip(labels.chunks(32)) {
        let z = LatentTensor::stack(chunk)?;
        let draw = DistillDraw::sample(z.dims(), sched, &mut rng)?;
        let cond: Vec<Condition> = labs
            .iter()
            .map(|&l| if conditional { Condition::Class(l) } else { Condition::Null })
            .collect();
        let loss = denoising_loss(model, &z, &cond, sched, &draw)?.to_scalar::<f64>()?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / latents.len() as f64)
}

/// Trains a teacher on labeled clean latents with the standard noise
/// prediction objective. A fraction of labels is replaced by the null
/// condition so the unconditional branch is trained too.
pub fn pretrain_teacher(
    config: DenoiserConfig,
    train: (&[LatentTensor], &[usize]),
    val: (&[LatentTensor], &[usize]),
    sched: &DiffusionSchedule,
    cfg: &TeacherTrainConfig,
    log: &mut RunLog,
) -> Result<DenoiserWeights> {
    let (latents, labels) = train;
    if latents.is_empty() || latents.len() != labels.len() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::InvalidRange(format!("cond_dropout = {}", cfg.cond_dropout)));
    }
    let init = DenoiserWeights::init(config.clone(), DenoiserRole::Teacher, cfg.seed)?;
    let vt = VarTable::new(init.params())?;
    let model = DenoiserWeights::from_params(config.clone(), DenoiserRole::Teacher, vt.table.clone())?;
    let mut opt = Adam::new(vt.vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch_size = cfg.batch_size.clamp(1, latents.len());
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let z = LatentTensor::stack(&idx.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
        let cond: Vec<Condition> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < cfg.cond_dropout {
                    Condition::Null
                } else {
                    Condition::Class(labels[i])
                }
            })
            .collect();
        let draw = DistillDraw::sample(z.dims(), sched, &mut rng)?;
        let loss = denoising_loss(&model, &z, &cond, sched, &draw)?;
        let lv = loss.to_scalar::<f64>()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "teacher denoising loss".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            let (vc, vu) = if val.0.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let snapshot = DenoiserWeights::from_params(config.clone(), DenoiserRole::Teacher, vt.snapshot()?)?;
                (
                    denoising_eval(&snapshot, val.0, val.1, sched, true, cfg.seed)?,
                    denoising_eval(&snapshot, val.0, val.1, sched, false, cfg.seed)?,
                )
            };
            log.record(serde_json::json!({
                "stage": "teacher", "step": step, "loss": lv,
                "val_loss_cond": vc, "val_loss_uncond": vu,
            }))?;
        }
    }
    DenoiserWeights::from_params(config, DenoiserRole::Teacher, vt.snapshot()?)
}
