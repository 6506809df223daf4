//! Central finite-difference check of the analytic BPTT gradient.

use rand::seq::index::sample;

use super::{Policy, PolicyError, PolicyParams};
use crate::seed;
use crate::trajectory::Trajectory;

/// Entries whose analytic and numeric values are both below this are not
/// compared. The central difference carries an absolute rounding error near
/// 1e-11 at eps = 1e-5, so below about 1e-7 a 1e-4 relative tolerance would
/// be measuring that noise rather than the gradient.
pub const SMALL_GRADIENT: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySelection {
    All,
    /// Up to `count` entries per tensor, drawn with `seed`.
    PerTensor { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose perturbation flips a ReLU unit.
    pub skipped_kinks: usize,
    pub filtered_small: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
    /// Tensors with at least one compared entry.
    pub tensors_covered: usize,
}

pub fn gradient_check(policy: &Policy, params: &PolicyParams, traj: &Trajectory, eps: f64, entries: EntrySelection) -> Result<GradCheckReport, PolicyError> {
    let (_, grad) = policy.bptt_backward(params, traj)?;
    let (base_sig, _) = policy.probe(&params.values, traj)?;
    let actions: Vec<usize> = traj.steps.iter().map(|s| s.action.id() as usize).collect();
    let mut theta = params.values.clone();
    let mut report = GradCheckReport::default();
    for (ti, tensor) in policy.layout().tensors().iter().enumerate() {
        let picks: Vec<usize> = match entries {
            EntrySelection::All => (0..tensor.len).collect(),
            EntrySelection::PerTensor { count, seed: s } => {
                let mut rng = seed::rng(s, ti as u64);
                let mut v = sample(&mut rng, tensor.len, count.min(tensor.len)).into_vec();
                v.sort_unstable();
                v
            }
        };
        let mut covered = false;
        for local in picks {
            let i = tensor.offset + local;
            let orig = theta[i];
            theta[i] = orig + eps;
            let (sig_p, lp) = policy.probe(&theta, traj)?;
            theta[i] = orig - eps;
            let (sig_m, lm) = policy.probe(&theta, traj)?;
            theta[i] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = loss_difference(&lp, &lm, &actions) / (2.0 * eps);
            let analytic = grad[i];
            if analytic.abs() < SMALL_GRADIENT && numeric.abs() < SMALL_GRADIENT {
                report.filtered_small += 1;
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            report.checked += 1;
            covered = true;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((tensor.name.clone(), local));
                report.worst_values = (analytic, numeric);
            }
        }
        report.tensors_covered += usize::from(covered);
    }
    Ok(report)
}

/// `L(plus) - L(minus)` for the summed negative log-likelihood, computed
/// from logit differences so that rounding in the O(1) per-step losses does
/// not swamp small differences.
pub fn loss_difference(plus: &[f64], minus: &[f64], actions: &[usize]) -> f64 {
    let na = plus.len() / actions.len();
    actions
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            let lp = &plus[t * na..(t + 1) * na];
            let lm = &minus[t * na..(t + 1) * na];
            let shift = lm.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let base: f64 = lm.iter().map(|&v| (v - shift).exp()).sum();
            let delta: f64 = lp.iter().zip(lm).map(|(&p, &m)| (m - shift).exp() * (p - m).exp_m1()).sum();
            (delta / base).ln_1p() - (lp[a] - lm[a])
        })
        .sum()
}
