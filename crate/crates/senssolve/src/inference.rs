//! Sensitivity tests, changepoint search, and a biased-randomization
//! reference distribution.
//!
//! The weak-null tests compare a studentized statistic against a standard
//! normal critical value. For `D̄_Γ` and `K̃_Γ` the worst-case expectation
//! entering the deviate is the constant 0 (their defining bounds); the
//! permutational-t instead uses the data-dependent bound `Σμ_Γi` from the
//! separable algorithm, which assumes constant effects.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::MatchedDesign;
use crate::normal;
use crate::rng::{stream_rng, weighted_index};
use crate::separable::{perm_t_sensitivity, GammaModel};
use crate::variance::{default_q, se_q};
use crate::weakstats::{d_stat, dbar_terms, ktilde_terms};
use crate::{Error, Result};

/// Available sensitivity-analysis methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PermT,
    Dbar,
    Ktilde,
    BinaryIp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::PermT => "perm_t",
            Method::Dbar => "dbar",
            Method::Ktilde => "ktilde",
            Method::BinaryIp => "binary_ip",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perm_t" => Ok(Method::PermT),
            "dbar" => Ok(Method::Dbar),
            "ktilde" => Ok(Method::Ktilde),
            "binary_ip" => Ok(Method::BinaryIp),
            other => Err(format!(
                "unknown method {other:?}; expected perm_t, dbar, ktilde, or binary_ip"
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of one sensitivity analysis at a fixed `Γ`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SensitivityResult {
    pub method: Method,
    pub gamma: f64,
    pub tau0: f64,
    pub statistic: f64,
    #[serde(rename = "expectation_bound")]
    pub worst_case_expectation: f64,
    pub se: f64,
    pub deviate: f64,
    pub p_value: f64,
}

/// A result paired with the rejection decision at level `alpha`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SensitivityReport {
    #[serde(flatten)]
    pub result: SensitivityResult,
    pub alpha: f64,
    pub reject: bool,
}

impl SensitivityResult {
    pub fn with_alpha(self, alpha: f64) -> Result<SensitivityReport> {
        validate_alpha(alpha)?;
        Ok(SensitivityReport {
            result: self,
            alpha,
            reject: self.p_value <= alpha,
        })
    }
}

/// Levels are restricted to `(0, 0.5]`, the range over which the weak-null
/// validity results apply.
pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn studentized_result(
    method: Method,
    design: &MatchedDesign,
    terms: &[f64],
    worst_case_expectation: f64,
    gamma: f64,
    tau0: f64,
) -> Result<SensitivityResult> {
    let statistic: f64 = terms.iter().sum();
    let se = se_q(terms, &default_q(design))?;
    if se <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let deviate = (statistic - worst_case_expectation) / se;
    Ok(SensitivityResult {
        method,
        gamma,
        tau0,
        statistic,
        worst_case_expectation,
        se,
        deviate,
        p_value: normal::sf(deviate),
    })
}

/// Sensitivity analysis with `D̄_Γ`: worst-case expectation 0, hat-matrix
/// standard error, normal reference.
pub fn test_dbar(
    design: &MatchedDesign,
    tau0: f64,
    model: &GammaModel,
    alpha: f64,
) -> Result<SensitivityReport> {
    let terms = dbar_terms(&design.summarize(), tau0, model);
    studentized_result(Method::Dbar, design, &terms, 0.0, model.gamma(), tau0)?.with_alpha(alpha)
}

/// Sensitivity analysis with `K̃_Γ`, valid over the entire weak null.
pub fn test_ktilde(
    design: &MatchedDesign,
    tau0: f64,
    model: &GammaModel,
    alpha: f64,
) -> Result<SensitivityReport> {
    let terms = ktilde_terms(&design.summarize(), tau0, model);
    studentized_result(Method::Ktilde, design, &terms, 0.0, model.gamma(), tau0)?.with_alpha(alpha)
}

/// The permutational-t sensitivity analysis (constant-effects imputation).
pub fn test_perm_t(
    design: &MatchedDesign,
    tau0: f64,
    model: &GammaModel,
    alpha: f64,
) -> Result<SensitivityReport> {
    let analysis = perm_t_sensitivity(design, tau0, model)?;
    SensitivityResult {
        method: Method::PermT,
        gamma: model.gamma(),
        tau0,
        statistic: analysis.statistic,
        worst_case_expectation: analysis.expectation_bound,
        se: analysis.se,
        deviate: analysis.deviate,
        p_value: analysis.p_value,
    }
    .with_alpha(alpha)
}

/// Dispatches on the method tag.
pub fn run_test(
    method: Method,
    design: &MatchedDesign,
    tau0: f64,
    model: &GammaModel,
    alpha: f64,
) -> Result<SensitivityReport> {
    match method {
        Method::PermT => test_perm_t(design, tau0, model, alpha),
        Method::Dbar => test_dbar(design, tau0, model, alpha),
        Method::Ktilde => test_ktilde(design, tau0, model, alpha),
        Method::BinaryIp => crate::binaryip::test_binary(design, tau0, model, alpha),
    }
}

/// Result of the changepoint search `inf{Γ : p_Γ(τ0) ≥ α}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Changepoint {
    pub gamma: f64,
    /// The worst-case p-value already reaches `α` at `Γ = 1`.
    pub not_significant_at_one: bool,
    /// Set when a post-hoc grid check finds the p-value non-monotone in `Γ`.
    pub monotonicity_warning: bool,
}

/// Bisects for the smallest `Γ ∈ [1, gamma_max]` at which the worst-case
/// p-value reaches `α`, to an absolute tolerance of 1e-4 in `Γ`. Assumes
/// monotonicity of the p-value in `Γ` and verifies it afterwards on a
/// 10-point grid, reporting a warning rather than failing.
pub fn changepoint(
    design: &MatchedDesign,
    tau0: f64,
    method: Method,
    alpha: f64,
    gamma_max: f64,
) -> Result<Changepoint> {
    validate_alpha(alpha)?;
    let p_at = |gamma: f64| -> Result<f64> {
        let model = GammaModel::new(gamma)?;
        Ok(run_test(method, design, tau0, &model, alpha)?.result.p_value)
    };

    if p_at(1.0)? >= alpha {
        return Ok(Changepoint {
            gamma: 1.0,
            not_significant_at_one: true,
            monotonicity_warning: false,
        });
    }
    if p_at(gamma_max)? < alpha {
        return Err(Error::NoCrossingBelowMax(gamma_max));
    }

    let mut lo = 1.0;
    let mut hi = gamma_max;
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if p_at(mid)? >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let mut monotonicity_warning = false;
    let mut previous = f64::NEG_INFINITY;
    for k in 0..10 {
        let gamma = 1.0 + (gamma_max - 1.0) * k as f64 / 9.0;
        let p = p_at(gamma)?;
        if p < previous - 1e-9 {
            monotonicity_warning = true;
        }
        previous = p;
    }

    Ok(Changepoint {
        gamma: hi,
        not_significant_at_one: false,
        monotonicity_warning,
    })
}

/// Empirical reference distribution of the studentized statistic under
/// biased randomizations.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceDistribution {
    /// Standardized deviate replicates in attempt order.
    pub draws: Vec<f64>,
    pub seed: u64,
    sorted: Vec<f64>,
}

impl ReferenceDistribution {
    pub fn count(&self) -> usize {
        self.draws.len()
    }

    /// Smallest draw whose empirical CDF reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        assert!((0.0..=1.0).contains(&p));
        let m = self.sorted.len();
        let k = ((p * m as f64).ceil() as usize).clamp(1, m);
        self.sorted[k - 1]
    }

    /// Critical value `Ĝ⁻¹(1 − α)` for the reference-referred test.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        self.quantile(1.0 - alpha)
    }
}

/// Builds the reference distribution: fixes the confounder at
/// `u_ij = 1(a_ij ≥ 0)` for the adjusted mean differences `a_ij`, draws
/// treatment assignments from the implied biased product distribution, and
/// studentizes each draw's statistic. Draws with a degenerate standard
/// error are discarded and recounted; the build aborts when more than 1%
/// of attempts are discarded. Stratum `i` of draw `m` consumes the random
/// stream `(seed, i, m)`, so results are independent of scheduling.
pub fn randomization_reference(
    design: &MatchedDesign,
    tau0: f64,
    model: &GammaModel,
    m_draws: usize,
    seed: u64,
) -> Result<ReferenceDistribution> {
    assert!(m_draws >= 1, "at least one draw is required");
    let n_total = design.num_units() as f64;
    let gamma = model.gamma();

    let per_stratum: Vec<(Vec<f64>, Vec<f64>, f64)> = design
        .strata()
        .iter()
        .map(|s| {
            let a = s.adjusted_deltas(tau0);
            let rho_weights: Vec<f64> = a
                .iter()
                .map(|&aij| if aij >= 0.0 { gamma } else { 1.0 })
                .collect();
            let weight = s.len() as f64 / n_total;
            (a, rho_weights, weight)
        })
        .collect();
    let q = default_q(design);

    let attempt = |m: usize| -> Option<f64> {
        let terms: Vec<f64> = per_stratum
            .iter()
            .enumerate()
            .map(|(i, (a, rho_weights, weight))| {
                let mut rng = stream_rng(seed, i as u64, m as u64);
                let k = weighted_index(&mut rng, rho_weights);
                weight * d_stat(a[k], gamma)
            })
            .collect();
        let statistic: f64 = terms.iter().sum();
        match se_q(&terms, &q) {
            Ok(se) if se > 0.0 => Some(statistic / se),
            _ => None,
        }
    };

    let budget = m_draws / 100 + 1;
    let mut draws = Vec::with_capacity(m_draws);
    let mut discarded = 0usize;
    let mut next_attempt = 0usize;
    while draws.len() < m_draws {
        let missing = m_draws - draws.len();
        let batch: Vec<Option<f64>> = (next_attempt..next_attempt + missing)
            .into_par_iter()
            .map(attempt)
            .collect();
        next_attempt += missing;
        for value in batch {
            match value {
                Some(v) => draws.push(v),
                None => discarded += 1,
            }
        }
        if discarded > budget {
            return Err(Error::DegenerateReference);
        }
    }

    let mut sorted = draws.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite deviates"));
    Ok(ReferenceDistribution {
        draws,
        seed,
        sorted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Stratum;
    use rand::Rng;

    fn pairs_design(taus: &[f64]) -> MatchedDesign {
        let strata = taus
            .iter()
            .enumerate()
            .map(|(i, &t)| Stratum::new(format!("p{i}"), vec![t, 0.0], 0).unwrap())
            .collect();
        MatchedDesign::new(strata).unwrap()
    }

    fn random_design(seed: u64, b: usize, max_n: usize) -> MatchedDesign {
        let mut rng = crate::rng::stream_rng(seed, 0, 0);
        let strata = (0..b)
            .map(|i| {
                let n = rng.gen_range(2..=max_n);
                let outcomes: Vec<f64> =
                    (0..n).map(|_| rng.gen::<f64>() * 6.0 - 2.0).collect();
                let treated = rng.gen_range(0..n);
                Stratum::new(format!("s{i}"), outcomes, treated).unwrap()
            })
            .collect();
        MatchedDesign::new(strata).unwrap()
    }

    #[test]
    fn zero_statistic_gives_half_p_value() {
        let design = pairs_design(&[1.0, -1.0, 2.0, -2.0]);
        let model = GammaModel::new(2.0).unwrap();
        let report = test_dbar(&design, 0.0, &model, 0.05).unwrap();
        // antisymmetric taus: positive and negative D contributions cancel
        assert!(report.result.statistic.abs() < 1e-12);
        assert!((report.result.p_value - 0.5).abs() < 1e-12);
        assert!(!report.reject);
    }

    #[test]
    fn ktilde_equals_dbar_on_pairs_for_every_gamma() {
        let design = pairs_design(&[0.4, -1.3, 2.2, 0.9, -0.1]);
        for gamma in [1.0, 1.5, 2.0, 4.0, 8.0] {
            let model = GammaModel::new(gamma).unwrap();
            let a = test_dbar(&design, 0.1, &model, 0.05).unwrap().result;
            let b = test_ktilde(&design, 0.1, &model, 0.05).unwrap().result;
            assert!((a.p_value - b.p_value).abs() < 1e-12);
            assert!((a.statistic - b.statistic).abs() < 1e-12);
            assert!((a.se - b.se).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_one_tests_coincide_with_studentized_dim() {
        let design = random_design(41, 12, 5);
        let model = GammaModel::new(1.0).unwrap();
        let a = test_dbar(&design, 0.0, &model, 0.05).unwrap().result;
        let b = test_ktilde(&design, 0.0, &model, 0.05).unwrap().result;
        assert!((a.deviate - b.deviate).abs() < 1e-12);
        let tau_hat = design.tau_hat();
        assert!((a.statistic - tau_hat).abs() < 1e-12);
    }

    #[test]
    fn alpha_outside_range_is_rejected() {
        let design = pairs_design(&[1.0, 2.0]);
        let model = GammaModel::new(1.0).unwrap();
        assert!(matches!(
            test_dbar(&design, 0.0, &model, 0.7),
            Err(Error::InvalidAlpha(_))
        ));
        assert!(matches!(
            test_dbar(&design, 0.0, &model, 0.0),
            Err(Error::InvalidAlpha(_))
        ));
    }

    #[test]
    fn sign_flip_duality() {
        let design = random_design(57, 10, 4);
        let tau0 = 0.3;
        for gamma in [1.0, 2.0] {
            let model = GammaModel::new(gamma).unwrap();
            for method in [Method::Dbar, Method::Ktilde, Method::PermT] {
                let upper = run_test(method, &design, tau0, &model, 0.05).unwrap().result;
                let lower = run_test(method, &design.negated(), -tau0, &model, 0.05)
                    .unwrap()
                    .result;
                assert!((lower.statistic + upper.statistic).abs() < 1e-12);
                if gamma == 1.0 {
                    // at gamma = 1 the two deviates are equal in magnitude
                    assert!(
                        (lower.deviate + upper.deviate).abs() < 1e-10,
                        "method {method}: {} vs {}",
                        lower.deviate,
                        upper.deviate
                    );
                    assert!((lower.p_value + upper.p_value - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn changepoint_flags_and_errors() {
        // strongly positive pairs: significant at gamma = 1, crossing below 10
        let design = pairs_design(&[3.0, 2.5, 3.5, 2.8, 3.1, 2.9, 3.3, 2.6, 3.2, 2.7]);
        let cp = changepoint(&design, 0.0, Method::Dbar, 0.05, 10.0).unwrap();
        assert!(!cp.not_significant_at_one);
        assert!(cp.gamma > 1.0 && cp.gamma < 10.0);
        // bisection contract: p < alpha just below, >= alpha at the point
        let below = GammaModel::new(cp.gamma - 2e-4).unwrap();
        let at = GammaModel::new(cp.gamma).unwrap();
        assert!(test_dbar(&design, 0.0, &below, 0.05).unwrap().result.p_value < 0.05);
        assert!(test_dbar(&design, 0.0, &at, 0.05).unwrap().result.p_value >= 0.05);

        // not significant at gamma = 1
        let weak = pairs_design(&[0.1, -0.2, 0.15, -0.05, 0.02]);
        let cp = changepoint(&weak, 0.0, Method::Dbar, 0.05, 5.0).unwrap();
        assert_eq!(cp.gamma, 1.0);
        assert!(cp.not_significant_at_one);

        // no crossing below a tiny gamma_max
        let err = changepoint(&design, 0.0, Method::Dbar, 0.05, 1.0001).unwrap_err();
        assert!(matches!(err, Error::NoCrossingBelowMax(_)));
    }

    #[test]
    fn reference_distribution_is_deterministic_and_centered() {
        let design = random_design(99, 60, 4);
        let model = GammaModel::new(1.5).unwrap();
        let a = randomization_reference(&design, 0.0, &model, 2000, 7).unwrap();
        let b = randomization_reference(&design, 0.0, &model, 2000, 7).unwrap();
        assert_eq!(a.draws, b.draws);
        let c = randomization_reference(&design, 0.0, &model, 2000, 8).unwrap();
        assert!(a.draws != c.draws);
        assert_eq!(a.count(), 2000);
        // quantiles are monotone
        assert!(a.quantile(0.2) <= a.quantile(0.8));
    }

    #[test]
    fn reference_normal_limit_at_gamma_one() {
        // sharp-null pairs: under gamma = 1 the studentized statistic is
        // asymptotically standard normal
        let mut rng = crate::rng::stream_rng(3, 1, 1);
        let strata = (0..400)
            .map(|i| {
                let n = 2 + (i % 3);
                let outcomes: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0).collect();
                Stratum::new(format!("s{i}"), outcomes, 0).unwrap()
            })
            .collect();
        let design = MatchedDesign::new(strata).unwrap();
        let model = GammaModel::new(1.0).unwrap();
        let reference = randomization_reference(&design, 0.0, &model, 20_000, 5).unwrap();
        let q = reference.quantile(0.975);
        assert!((q - 1.96).abs() < 0.05, "0.975 quantile = {q}");
    }
}
