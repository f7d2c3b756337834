//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `usize::MAX` checks all.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares backward() against central differences of the scalar `loss`.
///
/// `loss` builds the scalar on a graph in [`Mode::Check`], so any stochastic
/// op inside it fails the check instead of producing noise.
pub fn finite_diff_check<F>(
    loss: F,
    params: &ParamStore<f64>,
    cfg: CheckConfig,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params, Mode::Check);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Check);
        let out = loss(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let coords: Vec<usize> = if cfg.coords_per_param >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + cfg.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - cfg.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(id).data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
