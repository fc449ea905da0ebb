//! Closed-form divergences used by both bounds.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-10;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what}: lengths {a} and {b} differ")))
    }
}

/// KL(N(μ_q, σ²_q) ‖ N(μ_p, σ²_p)) for diagonal Gaussians, summed over dimensions.
/// Written with `exp(lv_q − lv_p)` so identical arguments give exactly zero.
pub fn gaussian_kl(mu_q: &[f64], logvar_q: &[f64], mu_p: &[f64], logvar_p: &[f64]) -> Result<f64> {
    same_len(mu_q.len(), logvar_q.len(), "gaussian_kl")?;
    same_len(mu_q.len(), mu_p.len(), "gaussian_kl")?;
    same_len(mu_q.len(), logvar_p.len(), "gaussian_kl")?;
    let total: f64 = (0..mu_q.len())
        .map(|i| {
            let d = mu_q[i] - mu_p[i];
            logvar_p[i] - logvar_q[i] + (logvar_q[i] - logvar_p[i]).exp() + d * d * (-logvar_p[i]).exp() - 1.0
        })
        .sum();
    Ok(0.5 * total)
}

/// Graph form of [`gaussian_kl`] over `[1, d]` rows.
pub fn gaussian_kl_var(g: &mut Graph<f64>, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
    let log_ratio = g.sub(logvar_p, logvar_q)?;
    let neg_ratio = g.neg(log_ratio);
    let var_ratio = g.exp(neg_ratio);
    let d = g.sub(mu_q, mu_p)?;
    let d2 = g.mul(d, d)?;
    let neg_lvp = g.neg(logvar_p);
    let inv_var_p = g.exp(neg_lvp);
    let scaled = g.mul(d2, inv_var_p)?;
    let a = g.add(log_ratio, var_ratio)?;
    let b = g.add(a, scaled)?;
    let terms = g.affine_scalar(b, 1.0, -1.0);
    let total = g.sum(terms);
    Ok(g.scale(total, 0.5))
}

/// `Σ_c q_c ln(q_c / p_c)` with both sides floored at [`PROBABILITY_FLOOR`];
/// classes with `q_c = 0` contribute nothing.
pub fn categorical_kl(q: &[f64], p: &[f64]) -> Result<f64> {
    same_len(q.len(), p.len(), "categorical_kl")?;
    Ok(q.iter()
        .zip(p)
        .map(|(qc, pc)| qc * (qc.max(PROBABILITY_FLOOR).ln() - pc.max(PROBABILITY_FLOOR).ln()))
        .sum())
}

/// Graph form of [`categorical_kl`] over `[1, k]` rows.
pub fn categorical_kl_var(g: &mut Graph<f64>, q: Var, p: Var) -> Result<Var> {
    let qf = g.clamp_min(q, PROBABILITY_FLOOR);
    let pf = g.clamp_min(p, PROBABILITY_FLOOR);
    let lq = g.log(qf);
    let lp = g.log(pf);
    let diff = g.sub(lq, lp)?;
    let terms = g.mul(q, diff)?;
    Ok(g.sum(terms))
}
