//! Weak-null test statistics.
//!
//! The stratum statistic `D_Γi = τ̂_i − τ0 − {(Γ−1)/(1+Γ)}|τ̂_i − τ0|`
//! penalizes the observed mean difference by the paired worst-case
//! expectation, and is proportional to a worst-case inverse-probability
//! weighted estimator. Weighted averages of `D_Γi` control the worst-case
//! expectation under the weak null: `K̃_Γ` under the full bounded-odds model
//! at `Γ` (using the inflated per-stratum parameter `Γ_n` and weights
//! `κ̃_Γn = Γ(n−1)+1`), and `D̄_Γ` under an interval restriction that is a
//! strict subset of the model for `n > 2`.

use crate::design::StratumSummary;
use crate::separable::GammaModel;
use crate::{Error, Result};

/// `value − {(γ−1)/(1+γ)}|value|`, evaluated in the piecewise form
/// `2·value/(1+γ)` for nonnegative values and `2γ·value/(1+γ)` otherwise to
/// avoid cancellation at large `γ`.
pub fn d_stat(value: f64, gamma_eff: f64) -> f64 {
    if value >= 0.0 {
        2.0 * value / (1.0 + gamma_eff)
    } else {
        2.0 * gamma_eff * value / (1.0 + gamma_eff)
    }
}

/// Per-stratum probability box `κ⁻¹ ≤ ϱ_ij ≤ γκ⁻¹`.
#[derive(Debug, Clone, Copy)]
pub struct StratumInterval {
    pub kappa: f64,
    pub gamma: f64,
}

/// An interval restriction on the stratum-wise assignment probabilities.
#[derive(Debug, Clone)]
pub struct IntervalRestriction {
    intervals: Vec<StratumInterval>,
}

impl IntervalRestriction {
    /// Validates feasibility: `Σ_j ϱ_ij = 1` must be attainable inside the
    /// box, which requires `n_i ≤ κ_i ≤ n_i γ_i`.
    pub fn new(intervals: Vec<StratumInterval>, sizes: &[usize]) -> Result<Self> {
        assert_eq!(intervals.len(), sizes.len());
        for (index, (iv, &n)) in intervals.iter().zip(sizes).enumerate() {
            if !(iv.kappa >= n as f64 && iv.kappa <= n as f64 * iv.gamma) {
                return Err(Error::InfeasibleRestriction {
                    index,
                    n,
                    kappa: iv.kappa,
                    gamma: iv.gamma,
                });
            }
        }
        Ok(Self { intervals })
    }

    /// The box implied by the bounded-odds model at `Γ`:
    /// `κ̃ = Γ(n−1)+1` with effective ratio `Γ_n`.
    pub fn rosenbaum_box(model: &GammaModel, sizes: &[usize]) -> Self {
        let intervals = sizes
            .iter()
            .map(|&n| StratumInterval {
                kappa: model.kappa_tilde(n),
                gamma: model.gamma_n(n),
            })
            .collect();
        Self { intervals }
    }

    /// The restriction `2/{n(1+Γ)} ≤ ϱ ≤ 2Γ/{n(1+Γ)}`, i.e.
    /// `κ = n(1+Γ)/2` at ratio `Γ`; equivalent to the bounded-odds model for
    /// pairs and a strict subset otherwise.
    pub fn stratum_weighted(model: &GammaModel, sizes: &[usize]) -> Self {
        let intervals = sizes
            .iter()
            .map(|&n| StratumInterval {
                kappa: n as f64 * (1.0 + model.gamma()) / 2.0,
                gamma: model.gamma(),
            })
            .collect();
        Self { intervals }
    }

    pub fn intervals(&self) -> &[StratumInterval] {
        &self.intervals
    }
}

/// The κ-weighted average `K_Γ = N⁻¹ Σ_i κ_Γi D_Γi`.
pub fn k_weighted_average(
    summaries: &[StratumSummary],
    tau0: f64,
    restriction: &IntervalRestriction,
) -> f64 {
    assert_eq!(summaries.len(), restriction.intervals.len());
    let n_total: usize = summaries.iter().map(|s| s.n).sum();
    summaries
        .iter()
        .zip(&restriction.intervals)
        .map(|(s, iv)| iv.kappa * d_stat(s.tau_hat - tau0, iv.gamma))
        .sum::<f64>()
        / n_total as f64
}

/// `K̃_Γ = N⁻¹ Σ_i κ̃_Γn_i D̃_Γi`, valid over the entire weak null:
/// under the bounded-odds model at `Γ` and `H_N`, `E(K̃_Γ) ≤ 0`.
pub fn ktilde(summaries: &[StratumSummary], tau0: f64, model: &GammaModel) -> f64 {
    let n_total: usize = summaries.iter().map(|s| s.n).sum();
    summaries
        .iter()
        .map(|s| model.kappa_tilde(s.n) * d_stat(s.tau_hat - tau0, model.gamma_n(s.n)))
        .sum::<f64>()
        / n_total as f64
}

/// `D̄_Γ = Σ_i (n_i/N) D_Γi` with the raw `Γ`.
pub fn dbar(summaries: &[StratumSummary], tau0: f64, model: &GammaModel) -> f64 {
    summaries
        .iter()
        .map(|s| s.weight * d_stat(s.tau_hat - tau0, model.gamma()))
        .sum()
}

/// Per-stratum contributions `(n_i/N)·D_Γi` (or the κ̃-weighted analogue for
/// `K̃`), the inputs to the hat-matrix standard error.
pub fn dbar_terms(summaries: &[StratumSummary], tau0: f64, model: &GammaModel) -> Vec<f64> {
    summaries
        .iter()
        .map(|s| s.weight * d_stat(s.tau_hat - tau0, model.gamma()))
        .collect()
}

pub fn ktilde_terms(summaries: &[StratumSummary], tau0: f64, model: &GammaModel) -> Vec<f64> {
    let n_total: usize = summaries.iter().map(|s| s.n).sum();
    summaries
        .iter()
        .map(|s| model.kappa_tilde(s.n) * d_stat(s.tau_hat - tau0, model.gamma_n(s.n)) / n_total as f64)
        .collect()
}

/// The worst-case IPW value `min_{p ∈ [κ⁻¹, γκ⁻¹]} (τ̂ − τ0)/(n·p)`; equals
/// `(κ/n)·{(1+γ)/(2γ)}·d_stat(τ̂ − τ0, γ)` identically.
pub fn ipw_equivalent(tau_hat_minus_tau0: f64, n: usize, kappa: f64, gamma: f64) -> Result<f64> {
    if !(kappa >= n as f64 && kappa <= n as f64 * gamma) {
        return Err(Error::InfeasibleRestriction {
            index: 0,
            n,
            kappa,
            gamma,
        });
    }
    // nonnegative values are shrunk by the largest probability, negative
    // values amplified by the smallest
    let p = if tau_hat_minus_tau0 >= 0.0 {
        gamma / kappa
    } else {
        1.0 / kappa
    };
    Ok(tau_hat_minus_tau0 / (n as f64 * p))
}

/// Per-unit worst-case weights and their sum.
#[derive(Debug, Clone)]
pub struct WorstCaseWeights {
    pub weights: Vec<f64>,
    /// `Σ_j ϱ̃_ij`; a value different from 1 diagnoses incompatibility of
    /// the worst-case weighting with any actual assignment distribution.
    pub sum: f64,
}

/// Maps each `δ_ij − τ0` to the probability minimizing its IPW contribution
/// under the bounded-odds box: the upper endpoint `Γ/(n−1+Γ)` for positive
/// values, the lower endpoint `1/{Γ(n−1)+1}` for negative ones. Zeros take
/// the upper endpoint, keeping the map monotone in `δ`.
pub fn worst_case_probability_map(
    deltas: &[f64],
    tau0: f64,
    model: &GammaModel,
) -> WorstCaseWeights {
    let (lo, hi) = model.probability_box(deltas.len());
    let weights: Vec<f64> = deltas
        .iter()
        .map(|&d| if d - tau0 >= 0.0 { hi } else { lo })
        .collect();
    let sum = weights.iter().sum();
    WorstCaseWeights { weights, sum }
}
