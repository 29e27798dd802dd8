//! Training signals: pixel ℓ2, LPIPS-style feature distance, classifier-free
//! guidance, and the latent-space score-distillation gradients.
//!
//! The distillation gradients are computed on detached latents and returned
//! as plain tensors. The trainer injects them as fixed cotangents on the
//! student output through [`distillation_surrogate`], whose gradient with
//! respect to the student latent is `g / numel`.
//!
//! For a noised sample `z_t = sqrt(ab_t) z + sqrt(1 - ab_t) eps` and the
//! clean-latent map `f(z_t, e) = (z_t - sqrt(1 - ab_t) e) / sqrt(ab_t)`:
//!
//! ```text
//! eps_cfg = eps_u + lambda_cfg (eps_c - eps_u)
//! w_t     = C*S / || f(z_t, eps_cfg) - z ||_1            (per item)
//! csd     = w_t (f(z_t, eps_u)    - f(z_t, eps_cfg))
//! vsd     = w_t (f(z_t, eps_fake) - f(z_t, eps_cfg))
//! ```
//!
//! With a shared draw and shared `w_t`, `vsd(lambda) - vsd(0) == csd(lambda)`.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{DenoiserRole, DenoiserWeights, EpsModel};
use crate::error::{Error, Result};
use crate::nn::{gaussian_vec, Adam, VarTable};
use crate::perception::{Condition, FeatureNetWeights};
use crate::schedule::{add_noise_batched, predict_x0_batched, DiffusionSchedule};
use crate::tensor::{tensor_from_vec, ImageTensor, LatentTensor};

fn same_image_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn l2_loss(pred: &ImageTensor, gt: &ImageTensor) -> Result<Tensor> {
    same_image_dims(pred, gt)?;
    Ok((pred.tensor() - gt.tensor())?.sqr()?.mean_all()?)
}

pub fn l2_latent_loss(pred: &LatentTensor, gt: &LatentTensor) -> Result<Tensor> {
    pred.ensure_same_shape(gt)?;
    Ok((pred.tensor() - gt.tensor())?.sqr()?.mean_all()?)
}

/// Divide each feature vector (over channels, per spatial position) by its
/// ℓ2 norm.
fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Sum over tap layers of the squared distance between unit-normalized
/// feature maps (summed over channels, averaged over batch and positions).
pub fn perceptual_loss(x: &ImageTensor, y: &ImageTensor, featnet: &FeatureNetWeights) -> Result<Tensor> {
    same_image_dims(x, y)?;
    let fx = featnet.features(x)?;
    let fy = featnet.features(y)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = (unit_normalize(a)? - unit_normalize(b)?)?
            .sqr()?
            .sum_keepdim(1)?
            .mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    total.ok_or_else(|| Error::Config("feature net exposes no taps".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_cfg: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda_cfg: 7.5 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_cfg.is_finite() || self.lambda_cfg < 0.0 {
            return Err(Error::InvalidRange(format!("lambda_cfg = {}", self.lambda_cfg)));
        }
        Ok(())
    }
}

/// `eps_c - eps_u`
pub fn implicit_classifier(eps_uncond: &LatentTensor, eps_cond: &LatentTensor) -> Result<LatentTensor> {
    eps_cond.sub(eps_uncond)
}

/// `eps_u + lambda_cfg (eps_c - eps_u)`. The difference form keeps
/// `lambda_cfg = 0` and `eps_c == eps_u` exact; `lambda_cfg = 1` returns
/// `eps_c` directly since the sum would round.
pub fn cfg_combine(
    eps_uncond: &LatentTensor,
    eps_cond: &LatentTensor,
    lambda_cfg: f64,
) -> Result<LatentTensor> {
    eps_uncond.ensure_same_shape(eps_cond)?;
    if lambda_cfg == 1.0 {
        return Ok(eps_cond.clone());
    }
    let cls = implicit_classifier(eps_uncond, eps_cond)?;
    eps_uncond.add(&cls.scale(lambda_cfg)?)
}

/// The random part of one distillation step: a step index and a noise
/// sample per batch item.
#[derive(Clone, Debug)]
pub struct DistillDraw {
    pub t: Vec<usize>,
    pub eps: LatentTensor,
}

impl DistillDraw {
    /// `t ~ U{1..T}`, `eps ~ N(0, I)`.
    pub fn sample(
        dims: (usize, usize, usize, usize),
        sched: &DiffusionSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = (0..dims.0).map(|_| rng.random_range(1..=sched.steps())).collect();
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let eps = LatentTensor::from_vec(gaussian_vec(rng, n, 1.0), dims)?;
        Ok(Self { t, eps })
    }
}

#[derive(Clone, Debug)]
pub struct LatentGradient {
    pub g: LatentTensor,
    /// Per batch item.
    pub w_t: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: LatentTensor,
}

impl LatentGradient {
    /// ℓ2 norm of `g` per batch item.
    pub fn norms(&self) -> Result<Vec<f64>> {
        let n = self.g.item_len();
        Ok(self
            .g
            .to_vec()?
            .chunks(n)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }
}

/// Shared front half of the CSD / VSD computations.
struct TeacherPass {
    z: LatentTensor,
    z_t: LatentTensor,
    x0_uncond: LatentTensor,
    x0_guided: LatentTensor,
}

fn teacher_pass(
    z_sem: &LatentTensor,
    teacher: &DenoiserWeights,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    gcfg: &GuidanceConfig,
    draw: &DistillDraw,
) -> Result<TeacherPass> {
    teacher.require_role(DenoiserRole::Teacher)?;
    gcfg.validate()?;
    let z = z_sem.detach();
    if !z.all_finite()? {
        return Err(Error::NonFinite {
            step: 0,
            detail: "distillation input latent".into(),
        });
    }
    z.ensure_same_shape(&draw.eps)?;
    let z_t = add_noise_batched(&z, &draw.eps, &draw.t, sched)?;
    let eps_u = teacher.eps(&z_t, &draw.t, &[Condition::Null])?.detach();
    let eps_c = teacher.eps(&z_t, &draw.t, cond)?.detach();
    let eps_guided = cfg_combine(&eps_u, &eps_c, gcfg.lambda_cfg)?;
    Ok(TeacherPass {
        x0_uncond: predict_x0_batched(&z_t, &eps_u, &draw.t, sched)?,
        x0_guided: predict_x0_batched(&z_t, &eps_guided, &draw.t, sched)?,
        z,
        z_t,
    })
}

/// `C*S / || x0_guided - z ||_1` per item.
fn normalizer(pass: &TeacherPass) -> Result<Vec<f64>> {
    let n = pass.z.item_len();
    let diff = pass.x0_guided.sub(&pass.z)?.to_vec()?;
    Ok(diff
        .chunks(n)
        .map(|c| n as f64 / c.iter().map(|v| v.abs()).sum::<f64>())
        .collect())
}

fn weighted(
    direction: LatentTensor,
    pass: &TeacherPass,
    draw: &DistillDraw,
    w_override: Option<&[f64]>,
) -> Result<LatentGradient> {
    let b = direction.batch();
    let w_t = match w_override {
        Some(w) if w.len() == b => w.to_vec(),
        Some(w) => return Err(Error::Shape(format!("{} weights for batch of {b}", w.len()))),
        None => normalizer(pass)?,
    };
    let scale = tensor_from_vec(w_t.clone(), &[b, 1, 1, 1])?;
    let g = LatentTensor::new(direction.tensor().broadcast_mul(&scale)?)?;
    let finite_w = w_t.iter().all(|w| w.is_finite() && *w > 0.0);
    if !finite_w || !g.all_finite()? {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("distillation gradient: t = {:?}, w_t = {:?}", draw.t, w_t),
        });
    }
    Ok(LatentGradient {
        g,
        w_t,
        t: draw.t.clone(),
        eps: draw.eps.clone(),
    })
}

/// Classifier score distillation gradient for a fixed draw. `w_override`
/// replaces the per-item normalizer.
pub fn csd_gradient_with(
    z_sem: &LatentTensor,
    teacher: &DenoiserWeights,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    gcfg: &GuidanceConfig,
    draw: &DistillDraw,
    w_override: Option<&[f64]>,
) -> Result<LatentGradient> {
    let pass = teacher_pass(z_sem, teacher, cond, sched, gcfg, draw)?;
    let direction = pass.x0_uncond.sub(&pass.x0_guided)?;
    weighted(direction, &pass, draw, w_override)
}

pub fn csd_gradient(
    z_sem: &LatentTensor,
    teacher: &DenoiserWeights,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    gcfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<LatentGradient> {
    let draw = DistillDraw::sample(z_sem.dims(), sched, rng)?;
    csd_gradient_with(z_sem, teacher, cond, sched, gcfg, &draw, None)
}

/// Variational score distillation gradient for a fixed draw; the fake
/// network is evaluated with the same condition as the teacher.
#[allow(clippy::too_many_arguments)]
pub fn vsd_gradient_with(
    z_sem: &LatentTensor,
    teacher: &DenoiserWeights,
    fake: &DenoiserWeights,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    gcfg: &GuidanceConfig,
    draw: &DistillDraw,
    w_override: Option<&[f64]>,
) -> Result<LatentGradient> {
    fake.require_role(DenoiserRole::Fake)?;
    let pass = teacher_pass(z_sem, teacher, cond, sched, gcfg, draw)?;
    let eps_fake = fake.eps(&pass.z_t, &draw.t, cond)?.detach();
    let x0_fake = predict_x0_batched(&pass.z_t, &eps_fake, &draw.t, sched)?;
    let direction = x0_fake.sub(&pass.x0_guided)?;
    weighted(direction, &pass, draw, w_override)
}

pub fn vsd_gradient(
    z_sem: &LatentTensor,
    teacher: &DenoiserWeights,
    fake: &DenoiserWeights,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    gcfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<LatentGradient> {
    let draw = DistillDraw::sample(z_sem.dims(), sched, rng)?;
    vsd_gradient_with(z_sem, teacher, fake, cond, sched, gcfg, &draw, None)
}

/// `sum(stopgrad(g) * z) / numel(z)`. Backpropagating this scalar delivers
/// `g / numel` as the cotangent of `z`.
pub fn distillation_surrogate(grad: &LatentGradient, z_sem: &LatentTensor) -> Result<Tensor> {
    grad.g.ensure_same_shape(z_sem)?;
    let n = z_sem.tensor().elem_count() as f64;
    Ok(((grad.g.tensor().detach() * z_sem.tensor())?.sum_all()? / n)?)
}

/// Standard denoising objective `mean (eps_hat(z_t, t, c) - eps)^2` on
/// detached latents.
pub fn denoising_loss(
    model: &impl EpsModel,
    z0: &LatentTensor,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    draw: &DistillDraw,
) -> Result<Tensor> {
    let z0 = z0.detach();
    let z_t = add_noise_batched(&z0, &draw.eps, &draw.t, sched)?;
    let pred = model.eps(&z_t, &draw.t, cond)?;
    Ok((pred.tensor() - draw.eps.tensor())?
        .sqr()?
        .flatten_from(1)?
        .mean(D::Minus1)?
        .mean_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FakeScoreConfig {
    pub lr: f64,
}

impl Default for FakeScoreConfig {
    fn default() -> Self {
        Self { lr: 1e-4 }
    }
}

/// The fake-score network under training, with its optimizer state.
pub struct FakeScore {
    vars: VarTable,
    weights: DenoiserWeights,
    opt: Adam,
}

impl FakeScore {
    pub fn new(init: &DenoiserWeights, cfg: &FakeScoreConfig) -> Result<Self> {
        init.require_role(DenoiserRole::Fake)?;
        let vars = VarTable::new(init.params())?;
        let weights = DenoiserWeights::from_params(init.config().clone(), DenoiserRole::Fake, vars.table.clone())?;
        let opt = Adam::new(vars.vars(), cfg.lr)?;
        Ok(Self { vars, weights, opt })
    }

    /// Current weights (detached copy).
    pub fn weights(&self) -> Result<DenoiserWeights> {
        DenoiserWeights::from_params(self.weights.config().clone(), DenoiserRole::Fake, self.vars.snapshot()?)
    }

    /// Live variable-backed weights, for use inside the training step.
    pub fn live(&self) -> &DenoiserWeights {
        &self.weights
    }

    /// One optimizer step on the denoising loss over the student's current
    /// outputs. Returns the loss before the step.
    pub fn update(
        &mut self,
        z_sem: &LatentTensor,
        cond: &[Condition],
        sched: &DiffusionSchedule,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if z_sem.batch() == 0 {
            return Err(Error::EmptyDataset);
        }
        let draw = DistillDraw::sample(z_sem.dims(), sched, rng)?;
        self.update_with(z_sem, cond, sched, &draw)
    }

    pub fn update_with(
        &mut self,
        z_sem: &LatentTensor,
        cond: &[Condition],
        sched: &DiffusionSchedule,
        draw: &DistillDraw,
    ) -> Result<f64> {
        let loss = denoising_loss(&self.weights, z_sem, cond, sched, draw)?;
        let lv = loss.to_scalar::<f64>()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: "fake-score denoising loss".into(),
            });
        }
        self.opt.backward_step(&loss)?;
        Ok(lv)
    }
}

/// Single-call form of the fake-score update.
pub fn update_fake_score(
    fake: &mut FakeScore,
    z_sem_batch: &LatentTensor,
    c_batch: &[Condition],
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    fake.update(z_sem_batch, c_batch, sched, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DenoiserArch, DenoiserConfig};
    use crate::nn::tables_equal;
    use crate::perception::FeatureNetConfig;
    use crate::schedule::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_latent(seed: u64, dims: (usize, usize, usize, usize)) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::from_vec(gaussian_vec(&mut rng, dims.0 * dims.1 * dims.2 * dims.3, 1.0), dims).unwrap()
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec((0..3 * h * w).map(|_| rng.random::<f64>()).collect(), 1, h, w).unwrap()
    }

    fn teacher() -> DenoiserWeights {
        let cfg = DenoiserConfig {
            arch: DenoiserArch::Unet {
                base_width: 8,
                channel_mults: vec![1, 2],
            },
            latent_channels: 4,
            num_classes: 3,
        };
        DenoiserWeights::init(cfg, DenoiserRole::Teacher, 3).unwrap()
    }

    #[test]
    fn l2_basics() {
        let a = rand_image(1, 8, 8);
        assert_eq!(l2_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let b = ImageTensor::new((a.tensor() + 0.5).unwrap()).unwrap();
        assert!((l2_loss(&b, &a).unwrap().to_scalar::<f64>().unwrap() - 0.25).abs() < 1e-15);
        let c = rand_image(2, 8, 8);
        let (va, vc) = (a.to_vec().unwrap(), c.to_vec().unwrap());
        let mut acc = 0.0;
        for i in 0..va.len() {
            acc += (va[i] - vc[i]) * (va[i] - vc[i]);
        }
        let oracle = acc / va.len() as f64;
        assert!((l2_loss(&a, &c).unwrap().to_scalar::<f64>().unwrap() - oracle).abs() < 1e-12);
        assert!(l2_loss(&a, &rand_image(3, 8, 12)).is_err());
    }

    #[test]
    fn perceptual_basics() {
        let net = FeatureNetWeights::init(
            FeatureNetConfig {
                width: 4,
                num_classes: 3,
                taps: vec![1, 2, 3],
            },
            0,
        )
        .unwrap();
        let x = rand_image(4, 16, 16);
        let y = rand_image(5, 16, 16);
        let p = |a: &ImageTensor, b: &ImageTensor| perceptual_loss(a, b, &net).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(p(&x, &x), 0.0);
        assert_eq!(p(&x, &y), p(&y, &x));
        // Stripes painted over a flat image.
        let flat = ImageTensor::constant(0.5, 16, 16).unwrap();
        let mut v = flat.to_vec().unwrap();
        for (i, px) in v.iter_mut().enumerate() {
            if (i % 16) / 2 % 2 == 0 {
                *px = 0.9;
            }
        }
        let striped = ImageTensor::from_vec(v, 1, 16, 16).unwrap();
        assert!(p(&flat, &striped) > 0.0);
        assert!(perceptual_loss(&x, &rand_image(6, 8, 16), &net).is_err());
    }

    #[test]
    fn cfg_endpoints() {
        let u = rand_latent(1, (1, 4, 4, 4));
        let c = rand_latent(2, (1, 4, 4, 4));
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().to_vec().unwrap(), u.to_vec().unwrap());
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().to_vec().unwrap(), c.to_vec().unwrap());
        let zero = LatentTensor::zeros((1, 4, 4, 4)).unwrap();
        let two = LatentTensor::new((zero.tensor() + 2.0).unwrap()).unwrap();
        let out = cfg_combine(&zero, &two, 7.5).unwrap().to_vec().unwrap();
        assert!(out.iter().all(|v| *v == 15.0));
        assert!(cfg_combine(&u, &rand_latent(3, (1, 4, 4, 2)), 1.0).is_err());
    }

    #[test]
    fn csd_vanishes_without_guidance() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = rand_latent(7, (2, 4, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = csd_gradient(
            &z,
            &teacher(),
            &[Condition::Class(1), Condition::Class(2)],
            &sched,
            &GuidanceConfig { lambda_cfg: 0.0 },
            &mut rng,
        )
        .unwrap();
        assert!(g.g.to_vec().unwrap().iter().all(|v| *v == 0.0));
        assert!(g.w_t.iter().all(|w| *w > 0.0 && w.is_finite()));
    }

    #[test]
    fn csd_vanishes_when_condition_is_ignored() {
        // Identical embedding rows make conditional and unconditional
        // outputs coincide.
        let t = teacher();
        let mut params = t.params().clone();
        let dims = params["cond_embed"].dims().to_vec();
        let row: Vec<f64> = crate::tensor::tensor_to_vec(&params["cond_embed"]).unwrap()[..dims[1]].to_vec();
        let table: Vec<f64> = (0..dims[0]).flat_map(|_| row.clone()).collect();
        params.insert("cond_embed".into(), tensor_from_vec(table, &dims).unwrap());
        let t = DenoiserWeights::from_params(t.config().clone(), DenoiserRole::Teacher, params).unwrap();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let g = csd_gradient(
            &rand_latent(8, (1, 4, 8, 8)),
            &t,
            &[Condition::Class(2)],
            &sched,
            &GuidanceConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(g.g.to_vec().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vsd_vanishes_for_identical_branches() {
        // The fake branch is conditional, so it coincides with the guided
        // teacher at lambda_cfg = 1.
        let t = teacher();
        let fake = t.with_role(DenoiserRole::Fake);
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let g = vsd_gradient(
            &rand_latent(9, (2, 4, 8, 8)),
            &t,
            &fake,
            &[Condition::Class(0)],
            &sched,
            &GuidanceConfig { lambda_cfg: 1.0 },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(g.g.to_vec().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roles_enforced() {
        let t = teacher();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = rand_latent(10, (1, 4, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = t.with_role(DenoiserRole::StudentBase);
        let gcfg = GuidanceConfig::default();
        assert!(csd_gradient(&z, &student, &[Condition::Null], &sched, &gcfg, &mut rng).is_err());
        assert!(vsd_gradient(&z, &t, &t, &[Condition::Null], &sched, &gcfg, &mut rng).is_err());
    }

    #[test]
    fn non_finite_input_aborts() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut v = vec![0.1; 4 * 8 * 8];
        v[3] = f64::NAN;
        let z = LatentTensor::from_vec(v, (1, 4, 8, 8)).unwrap();
        let r = csd_gradient(
            &z,
            &teacher(),
            &[Condition::Class(0)],
            &sched,
            &GuidanceConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn surrogate_delivers_scaled_cotangent() {
        let z = rand_latent(11, (1, 4, 2, 2));
        let g = LatentGradient {
            g: rand_latent(12, (1, 4, 2, 2)),
            w_t: vec![1.0],
            t: vec![1],
            eps: rand_latent(13, (1, 4, 2, 2)),
        };
        let var = candle_core::Var::from_tensor(z.tensor()).unwrap();
        let zv = LatentTensor::new(var.as_tensor().clone()).unwrap();
        let grads = distillation_surrogate(&g, &zv).unwrap().backward().unwrap();
        let got = crate::tensor::tensor_to_vec(grads.get(&var).unwrap()).unwrap();
        let expect: Vec<f64> = g.g.to_vec().unwrap().iter().map(|v| v / 16.0).collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fake_update_with_zero_lr_is_noop() {
        let init = teacher().with_role(DenoiserRole::Fake);
        let mut fake = FakeScore::new(&init, &FakeScoreConfig { lr: 0.0 }).unwrap();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = rand_latent(14, (2, 4, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        update_fake_score(&mut fake, &z, &[Condition::Class(1)], &sched, &mut rng).unwrap();
        assert!(tables_equal(fake.weights().unwrap().params(), init.params()).unwrap());
    }

    #[test]
    fn fake_update_reduces_denoising_loss() {
        let init = teacher().with_role(DenoiserRole::Fake);
        let mut fake = FakeScore::new(&init, &FakeScoreConfig { lr: 2e-3 }).unwrap();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let z = rand_latent(15, (4, 4, 8, 8));
        let cond = [Condition::Class(0)];
        // Fixed evaluation draws so the before/after comparison is noise-free.
        let mut eval_rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<DistillDraw> = (0..8)
            .map(|_| DistillDraw::sample(z.dims(), &sched, &mut eval_rng).unwrap())
            .collect();
        let eval = |w: &DenoiserWeights| -> f64 {
            draws
                .iter()
                .map(|d| denoising_loss(w, &z, &cond, &sched, d).unwrap().to_scalar::<f64>().unwrap())
                .sum::<f64>()
                / draws.len() as f64
        };
        let before = eval(&init);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            fake.update(&z, &cond, &sched, &mut rng).unwrap();
        }
        let after = eval(&fake.weights().unwrap());
        assert!(after < before, "{before} -> {after}");
    }
}
