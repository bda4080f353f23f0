use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{no_grad, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on checked coordinates across all parameters; the rest are skipped.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Max of `|analytic - numeric| / max(1, |numeric|)` per parameter
    /// (0 when none of its coordinates were sampled).
    pub per_param_max_rel_error: Vec<f64>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Runs `f` once with gradients, then checks the analytic gradients of `params`
/// against central finite differences.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    params.iter().for_each(Tensor::zero_grad);
    let loss = f(params)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {}", loss.item())));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    compare_gradients(&analytic, f, params, cfg)
}

/// Compares caller-supplied gradients with central finite differences of `f`.
pub fn compare_gradients<F>(
    analytic: &[Vec<f64>],
    f: F,
    params: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::Config("finite-difference eps must be positive".into()));
    }
    let _guard = no_grad();
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |c| (pi, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let eval = |pi: usize, c: usize, value: f64| -> Result<f64> {
        params[pi].update_data(|d| d[c] = value);
        let y = f(params)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {y}")));
        }
        Ok(y)
    };

    let mut per_param = vec![0.0f64; params.len()];
    for &(pi, c) in &chosen {
        let orig = params[pi].data()[c];
        let plus = eval(pi, c, orig + cfg.eps);
        let minus = eval(pi, c, orig - cfg.eps);
        params[pi].update_data(|d| d[c] = orig);
        let numeric = (plus? - minus?) / (2.0 * cfg.eps);
        let rel = (analytic[pi][c] - numeric).abs() / numeric.abs().max(1.0);
        per_param[pi] = per_param[pi].max(rel);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param_max_rel_error: per_param,
        max_rel_error,
        coords_checked: chosen.len(),
        eps: cfg.eps,
        tol: cfg.tol,
        pass: max_rel_error <= cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::parameter(vec![3.0], vec![]).unwrap();
        let report = finite_diff_check(|p| Ok(p[0].square().sum()), &[x], &GradCheckConfig::default()).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_error < 1e-9);
        assert_eq!(report.eps, 1e-5);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::parameter(vec![3.0, -1.0], vec![2]).unwrap();
        let f = |p: &[Tensor]| Ok(p[0].square().sum());
        let corrupted = vec![vec![6.0 + 0.1, -2.0]];
        let report = compare_gradients(&corrupted, f, &[x], &GradCheckConfig::default()).unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_error > 0.01);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::parameter(vec![-1.0], vec![]).unwrap();
        let res = finite_diff_check(|p| Ok(p[0].sqrt().sum()), &[x], &GradCheckConfig::default());
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampling_caps_coordinates() {
        let x = Tensor::parameter(vec![0.5; 50], vec![50]).unwrap();
        let cfg = GradCheckConfig {
            max_coords: 7,
            ..Default::default()
        };
        let report = finite_diff_check(|p| Ok(p[0].square().sum()), &[x], &cfg).unwrap();
        assert_eq!(report.coords_checked, 7);
        assert!(report.pass);
    }
}
