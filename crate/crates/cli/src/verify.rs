//! `loss-verify`: null cases and the VSD decomposition on randomly
//! initialized models, reported as max absolute residuals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualsr_core::backbone::{DenoiserRole, DenoiserWeights, EpsModel};
use dualsr_core::losses::{cfg_combine, csd_gradient_with, vsd_gradient_with, DistillDraw, GuidanceConfig};
use dualsr_core::nn::gaussian_vec;
use dualsr_core::perception::Condition;
use dualsr_core::schedule::DiffusionSchedule;
use dualsr_core::tensor::LatentTensor;
use dualsr_core::Result;

use crate::{CliConfig, CliError, CliResult, RunDir};

pub const TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub residual: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.residual <= TOLERANCE
    }
}

fn max_abs(t: &LatentTensor) -> Result<f64> {
    Ok(t.to_vec()?.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Scalar re-evaluation of the CSD gradient from the teacher's raw
/// predictions, independent of the library's tensor helpers.
fn csd_by_formula(
    teacher: &DenoiserWeights,
    z: &LatentTensor,
    cond: &[Condition],
    sched: &DiffusionSchedule,
    lambda_cfg: f64,
    draw: &DistillDraw,
) -> Result<Vec<f64>> {
    let n = z.item_len();
    let (zv, ev) = (z.to_vec()?, draw.eps.to_vec()?);
    let ab = sched.alpha_bar();
    let mut zt = vec![0.0; zv.len()];
    for (i, v) in zt.iter_mut().enumerate() {
        let a = ab[draw.t[i / n]];
        *v = a.sqrt() * zv[i] + (1.0 - a).sqrt() * ev[i];
    }
    let z_t = LatentTensor::from_vec(zt.clone(), z.dims())?;
    let eu = teacher.eps(&z_t, &draw.t, &[Condition::Null])?.to_vec()?;
    let ec = teacher.eps(&z_t, &draw.t, cond)?.to_vec()?;
    let mut out = vec![0.0; zv.len()];
    for b in 0..z.batch() {
        let a = ab[draw.t[b]];
        let x0 = |i: usize, e: f64| (zt[i] - (1.0 - a).sqrt() * e) / a.sqrt();
        let range = b * n..(b + 1) * n;
        let guided: Vec<f64> = range.clone().map(|i| eu[i] + lambda_cfg * (ec[i] - eu[i])).collect();
        let l1: f64 = range.clone().map(|i| (x0(i, guided[i - b * n]) - zv[i]).abs()).sum();
        let w = n as f64 / l1;
        for i in range {
            out[i] = w * (x0(i, eu[i]) - x0(i, guided[i - b * n]));
        }
    }
    Ok(out)
}

/// Runs every check over `trials` random draws and returns the worst
/// residual per check.
pub fn loss_checks(cfg: &CliConfig, trials: usize) -> Result<Vec<CheckRow>> {
    let sched = cfg.schedule()?;
    let model = cfg.teacher.model.clone();
    let teacher = DenoiserWeights::init(model.clone(), DenoiserRole::Teacher, cfg.seed)?;
    let fake = DenoiserWeights::init(model.clone(), DenoiserRole::Fake, cfg.seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let side = 2 * model.spatial_multiple();
    let dims = (4, model.latent_channels, side, side);
    let lambda = cfg.train.lambda_cfg;
    let mut rows = vec![
        CheckRow { name: "cfg_combine endpoints", residual: 0.0 },
        CheckRow { name: "csd null: lambda_cfg = 0", residual: 0.0 },
        CheckRow { name: "csd null: cond == uncond", residual: 0.0 },
        CheckRow { name: "vsd(lambda) - vsd(0) - csd(lambda)", residual: 0.0 },
        CheckRow { name: "csd formula re-evaluation", residual: 0.0 },
    ];
    let n = dims.0 * dims.1 * dims.2 * dims.3;
    for _ in 0..trials.max(1) {
        let z = LatentTensor::from_vec(gaussian_vec(&mut rng, n, 1.0), dims)?;
        let cond: Vec<Condition> = (0..dims.0)
            .map(|_| Condition::Class(rng.random_range(0..model.num_classes)))
            .collect();
        let draw = DistillDraw::sample(dims, &sched, &mut rng)?;

        let u = LatentTensor::from_vec(gaussian_vec(&mut rng, n, 1.0), dims)?;
        let c = LatentTensor::from_vec(gaussian_vec(&mut rng, n, 1.0), dims)?;
        let endpoint = [
            max_abs(&cfg_combine(&u, &c, 0.0)?.sub(&u)?)?,
            max_abs(&cfg_combine(&u, &c, 1.0)?.sub(&c)?)?,
            max_abs(&cfg_combine(&u, &u, lambda)?.sub(&u)?)?,
        ];

        let g = |l: f64| GuidanceConfig { lambda_cfg: l };
        let csd0 = csd_gradient_with(&z, &teacher, &cond, &sched, &g(0.0), &draw, None)?;
        let null_cond = vec![Condition::Null; dims.0];
        let csd_same = csd_gradient_with(&z, &teacher, &null_cond, &sched, &g(lambda), &draw, None)?;
        let csd = csd_gradient_with(&z, &teacher, &cond, &sched, &g(lambda), &draw, None)?;
        let w = Some(csd.w_t.as_slice());
        let vsd = vsd_gradient_with(&z, &teacher, &fake, &cond, &sched, &g(lambda), &draw, w)?;
        let vsd0 = vsd_gradient_with(&z, &teacher, &fake, &cond, &sched, &g(0.0), &draw, w)?;
        let decomposition = max_abs(&vsd.g.sub(&vsd0.g)?.sub(&csd.g)?)?;

        let oracle = csd_by_formula(&teacher, &z, &cond, &sched, lambda, &draw)?;
        let got = csd.g.to_vec()?;
        let scale = got.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let formula = got
            .iter()
            .zip(&oracle)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale;

        let values = [
            endpoint.iter().cloned().fold(0.0, f64::max),
            max_abs(&csd0.g)?,
            max_abs(&csd_same.g)?,
            decomposition,
            formula,
        ];
        for (row, v) in rows.iter_mut().zip(values) {
            row.residual = row.residual.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<38} {:>12}  {}\n", "check", "max_residual", "status");
    for r in rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(out, "{:<38} {:>12.3e}  {status}", r.name, r.residual);
    }
    out
}

pub fn loss_verify(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let rows = loss_checks(cfg, 4)?;
    let table = format_table(&rows);
    print!("{table}");
    let mut csv = String::from("check,max_residual,passed\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:e},{}", r.name, r.residual, r.passed());
    }
    std::fs::write(run.reports().join("loss_verify.csv"), csv)?;
    match rows.iter().find(|r| !r.passed()) {
        Some(r) => Err(CliError::Failed(format!(
            "loss check `{}` residual {:e} exceeds {TOLERANCE:e}",
            r.name, r.residual
        ))),
        None => Ok(()),
    }
}
