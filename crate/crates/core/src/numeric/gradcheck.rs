use crate::error::Result;

use super::{Graph, ParamId, ParamSet, RngState, Tensor, Var};

/// Settings for central-difference gradient checks (always 64-bit).
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries, sampled uniformly without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, floor: 1e-6, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `backward` against central differences for every trainable
/// tensor in `ids`. `f` must rebuild the loss from scratch on each call.
pub fn check_params<F>(ps: &ParamSet<f64>, ids: &[ParamId], cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, ps)?;
    let grads = g.backward(loss)?;

    let mut targets: Vec<(ParamId, usize)> = Vec::new();
    for &id in ids {
        for k in 0..ps.get(id).len() {
            targets.push((id, k));
        }
    }
    if let Some(max) = cfg.max_entries {
        if targets.len() > max {
            let mut rng = RngState::new(cfg.seed);
            // partial Fisher-Yates
            for i in 0..max {
                let j = i + rng.below(targets.len() - i);
                targets.swap(i, j);
            }
            targets.truncate(max);
        }
    }

    let eval = |work: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, work)?;
        Ok(g.value(l).item())
    };

    let mut work = ps.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (id, k) in targets {
        let analytic = grads.param_or_zero(ps, id).data()[k];
        let orig = work.get(id).data()[k];
        work.get_mut(id).data_mut()[k] = orig + cfg.h;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig - cfg.h;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let err = rel_err(analytic, numeric, cfg.floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((ps.name(id).to_string(), k, analytic, numeric));
            }
        }
    }
    Ok(report)
}

/// Gradient check over free-standing input tensors.
pub fn finite_difference_check<F>(inputs: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut ps = ParamSet::new();
    let ids: Vec<ParamId> =
        inputs.iter().enumerate().map(|(i, t)| ps.insert(format!("x{i}"), t.clone(), false)).collect();
    check_params(&ps, &ids, cfg, |g, ps| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(ps, id)).collect();
        f(g, &vars)
    })
}
