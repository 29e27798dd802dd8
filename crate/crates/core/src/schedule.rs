//! Linear-β diffusion noise schedule and the closed-form maps between clean
//! latents, noise, and noisy latents.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

/// Construction parameters, stored in every checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    /// `beta[t - 1]` is the increment for step `t`.
    beta: Vec<f64>,
    /// `alpha_bar[0] == 1`; length `steps + 1`.
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        make_schedule(params.steps, params.beta_start, params.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sqrt(1 - alpha_bar[t])`
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar_at(t)?).sqrt())
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
    }

    /// Checks every structural invariant of the table.
    pub fn validate(&self) -> Result<()> {
        let n = self.steps();
        if self.beta.len() != n || self.alpha_bar.len() != n + 1 {
            return Err(Error::InvalidRange("schedule table lengths".into()));
        }
        if self.alpha_bar[0] != 1.0 || self.alpha_bar[n] <= 0.0 {
            return Err(Error::InvalidRange("schedule endpoints".into()));
        }
        for t in 1..=n {
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::InvalidRange(format!("alpha_bar not decreasing at {t}")));
            }
        }
        Ok(())
    }
}

/// Linearly interpolated β from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidRange("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(DiffusionSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha_bar,
    })
}

/// `z_t = sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`
///
/// `t = 0` is accepted and returns `z0` unchanged in value.
pub fn add_noise(
    z0: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    z0.ensure_same_shape(eps)?;
    let ab = sched.alpha_bar_at(t)?;
    let signal = (z0.tensor() * ab.sqrt())?;
    let noise = (eps.tensor() * (1.0 - ab).sqrt())?;
    LatentTensor::new((signal + noise)?)
}

/// Per-item variant of [`add_noise`]: `ts[i]` applies to batch item `i`.
pub fn add_noise_batched(
    z0: &LatentTensor,
    eps: &LatentTensor,
    ts: &[usize],
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    per_item(z0, eps, ts, |a, b, t| add_noise(a, b, t, sched))
}

/// Clean-latent estimate from a noise prediction:
/// `(z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    z_t.ensure_same_shape(eps_hat)?;
    let ab = sched.alpha_bar_at(t)?;
    if ab <= 0.0 {
        return Err(Error::InvalidRange(format!("alpha_bar[{t}] = {ab}")));
    }
    let noise = (eps_hat.tensor() * (1.0 - ab).sqrt())?;
    let num = (z_t.tensor() - noise)?;
    // Scalar `Tensor / f64` multiplies by the reciprocal; divide elementwise.
    let denom = Tensor::new(ab.sqrt(), num.device())?;
    LatentTensor::new(num.broadcast_div(&denom)?)
}

pub fn predict_x0_batched(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    ts: &[usize],
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    per_item(z_t, eps_hat, ts, |a, b, t| predict_x0(a, b, t, sched))
}

fn per_item(
    a: &LatentTensor,
    b: &LatentTensor,
    ts: &[usize],
    f: impl Fn(&LatentTensor, &LatentTensor, usize) -> Result<LatentTensor>,
) -> Result<LatentTensor> {
    a.ensure_same_shape(b)?;
    if ts.len() == 1 {
        return f(a, b, ts[0]);
    }
    if ts.len() != a.batch() {
        return Err(Error::Shape(format!(
            "{} timesteps for batch of {}",
            ts.len(),
            a.batch()
        )));
    }
    let items = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| f(&a.item(i)?, &b.item(i)?, t))
        .collect::<Result<Vec<_>>>()?;
    LatentTensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(data: Vec<f64>) -> LatentTensor {
        let n = data.len();
        LatentTensor::from_vec(data, (1, 1, 1, n)).unwrap()
    }

    #[test]
    fn single_step_product() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[1.0, 0.5]);
    }

    #[test]
    fn two_step_product() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert!((s.alpha_bar()[1] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar()[2] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_table_matches_running_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar()[100] - prod).abs() < 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn monotone_tables() {
        let s = DiffusionSchedule::new(ScheduleParams::default()).unwrap();
        for t in 1..=s.steps() {
            assert!(s.alpha_bar()[t] < s.alpha_bar()[t - 1]);
            assert!(s.sigma(t).unwrap() >= s.sigma(t - 1).unwrap());
            let expect = s.alpha_bar()[t - 1] * (1.0 - s.beta()[t - 1]);
            assert_eq!(s.alpha_bar()[t], expect);
        }
        assert!(s.alpha_bar()[s.steps()] > 0.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_edges() {
        let s = make_schedule(2, 0.75, 0.75).unwrap();
        let z0 = latent(vec![0.3, -1.2, 4.0]);
        let eps = latent(vec![1.0, 1.0, 1.0]);
        // t = 0 carries zero noise weight.
        let out = add_noise(&z0, &eps, 0, &s).unwrap();
        assert_eq!(out.to_vec().unwrap(), z0.to_vec().unwrap());
        // alpha_bar[1] = 0.25 with a zero clean signal.
        let zero = latent(vec![0.0; 3]);
        let out = add_noise(&zero, &eps, 1, &s).unwrap().to_vec().unwrap();
        for v in out {
            assert!((v - 0.75_f64.sqrt()).abs() < 1e-15);
            assert!((v - 0.866025).abs() < 1e-6);
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let a = latent(vec![0.0; 3]);
        let b = latent(vec![0.0; 4]);
        assert!(matches!(add_noise(&a, &b, 1, &s), Err(Error::Shape(_))));
        assert!(matches!(
            add_noise(&a, &a, 11, &s),
            Err(Error::StepOutOfRange { t: 11, max: 10 })
        ));
        assert!(predict_x0(&a, &a, 11, &s).is_err());
    }

    #[test]
    fn predict_x0_zero_noise_branch() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let zt = latent(vec![0.5, -2.0]);
        let zero = latent(vec![0.0, 0.0]);
        let out = predict_x0(&zt, &zero, 7, &s).unwrap().to_vec().unwrap();
        let ab = s.alpha_bar()[7];
        assert_eq!(out, vec![0.5 / ab.sqrt(), -2.0 / ab.sqrt()]);
    }

    fn scalar_add_noise(z0: &[f64], eps: &[f64], ab: f64) -> Vec<f64> {
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Vec::with_capacity(z0.len());
        for i in 0..z0.len() {
            out.push(z0[i] * a + eps[i] * b);
        }
        out
    }

    fn scalar_predict_x0(zt: &[f64], eps: &[f64], ab: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(zt.len());
        for i in 0..zt.len() {
            out.push((zt[i] - eps[i] * (1.0 - ab).sqrt()) / ab.sqrt());
        }
        out
    }

    proptest! {
        #[test]
        fn round_trip(
            z0 in prop::collection::vec(-5.0f64..5.0, 16),
            eps in prop::collection::vec(-4.0f64..4.0, 16),
            t in 1usize..=100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let z = latent(z0.clone());
            let e = latent(eps);
            let back = predict_x0(&add_noise(&z, &e, t, &s).unwrap(), &e, t, &s).unwrap();
            prop_assert!(back.max_abs_diff(&z).unwrap() < 1e-10);
        }

        #[test]
        fn matches_scalar_loop_bitwise(
            z0 in prop::collection::vec(-5.0f64..5.0, 12),
            eps in prop::collection::vec(-4.0f64..4.0, 12),
            t in 1usize..=100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let ab = s.alpha_bar()[t];
            let zt = add_noise(&latent(z0.clone()), &latent(eps.clone()), t, &s).unwrap();
            prop_assert_eq!(zt.to_vec().unwrap(), scalar_add_noise(&z0, &eps, ab));
            let x0 = predict_x0(&latent(z0.clone()), &latent(eps.clone()), t, &s).unwrap();
            prop_assert_eq!(x0.to_vec().unwrap(), scalar_predict_x0(&z0, &eps, ab));
        }
    }

    #[test]
    fn batched_uses_per_item_steps() {
        let s = make_schedule(10, 0.05, 0.1).unwrap();
        let z0 = LatentTensor::from_vec(vec![1.0, 2.0], (2, 1, 1, 1)).unwrap();
        let eps = LatentTensor::from_vec(vec![0.5, -0.5], (2, 1, 1, 1)).unwrap();
        let out = add_noise_batched(&z0, &eps, &[3, 9], &s).unwrap().to_vec().unwrap();
        let a = scalar_add_noise(&[1.0], &[0.5], s.alpha_bar()[3]);
        let b = scalar_add_noise(&[2.0], &[-0.5], s.alpha_bar()[9]);
        assert_eq!(out, vec![a[0], b[0]]);
        assert!(add_noise_batched(&z0, &eps, &[1, 2, 3], &s).is_err());
    }
}
