//! Monte Carlo laboratory for operating-characteristic studies with
//! worst-case hidden bias.
//!
//! Each replicate draws potential outcomes from a generative scenario,
//! constructs the binary confounder maximizing the exact expectation of the
//! statistic under study, assigns one treatment vector from the implied
//! biased distribution, and runs the sensitivity analysis at the replicate's
//! own average effect. Type I error rates, realized bias, and the analytic
//! bias bounds are pooled over replicates.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::binaryip::ip_bound;
use crate::design::{MatchedDesign, Stratum};
use crate::inference::{test_dbar, test_ktilde, Method};
use crate::normal;
use crate::rng::{stream_rng, weighted_index};
use crate::separable::{
    imputation_bounds, perm_t_bias_bound, perm_t_sensitivity, GammaModel,
};
use crate::variance::{default_q, se_q};
use crate::weakstats::{d_stat, dbar_terms};
use crate::{Error, Result};

/// Per-unit potential outcomes for one stratum.
#[derive(Debug, Clone)]
pub struct PotentialStratum {
    pub treated_potential: Vec<f64>,
    pub control_potential: Vec<f64>,
}

impl PotentialStratum {
    pub fn new(treated_potential: Vec<f64>, control_potential: Vec<f64>) -> Self {
        assert_eq!(treated_potential.len(), control_potential.len());
        assert!(treated_potential.len() >= 2);
        Self {
            treated_potential,
            control_potential,
        }
    }

    pub fn len(&self) -> usize {
        self.treated_potential.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated_potential.is_empty()
    }

    /// Unit-level effects `τ_ij = r_Tij − r_Cij`.
    pub fn effects(&self) -> Vec<f64> {
        self.treated_potential
            .iter()
            .zip(&self.control_potential)
            .map(|(t, c)| t - c)
            .collect()
    }

    /// The full `δ_ij = r_Tij − Σ_{j'≠j} r_Cij'/(n−1)`; their mean equals
    /// the stratum effect `τ̄_i`.
    pub fn deltas(&self) -> Vec<f64> {
        let nm1 = (self.len() - 1) as f64;
        let total: f64 = self.control_potential.iter().sum();
        self.treated_potential
            .iter()
            .zip(&self.control_potential)
            .map(|(t, c)| t - (total - c) / nm1)
            .collect()
    }

    pub fn tau_bar(&self) -> f64 {
        self.effects().iter().sum::<f64>() / self.len() as f64
    }
}

/// A full set of potential outcomes (simulation use only).
#[derive(Debug, Clone)]
pub struct PotentialOutcomes {
    strata: Vec<PotentialStratum>,
    total_units: usize,
}

impl PotentialOutcomes {
    pub fn new(strata: Vec<PotentialStratum>) -> Self {
        assert!(!strata.is_empty());
        let total_units = strata.iter().map(PotentialStratum::len).sum();
        Self {
            strata,
            total_units,
        }
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn num_units(&self) -> usize {
        self.total_units
    }

    pub fn strata(&self) -> &[PotentialStratum] {
        &self.strata
    }

    /// Sample average treatment effect `τ̄ = N⁻¹ Σ_ij τ_ij`.
    pub fn tau_bar(&self) -> f64 {
        self.strata
            .iter()
            .map(|s| s.effects().iter().sum::<f64>())
            .sum::<f64>()
            / self.total_units as f64
    }

    /// The observed design when `treated[i]` is the treated unit of
    /// stratum `i`.
    pub fn observe(&self, treated: &[usize]) -> MatchedDesign {
        assert_eq!(treated.len(), self.strata.len());
        let strata = self
            .strata
            .iter()
            .zip(treated)
            .enumerate()
            .map(|(i, (s, &k))| {
                let mut outcomes = s.control_potential.clone();
                outcomes[k] = s.treated_potential[k];
                Stratum::new(format!("s{i}"), outcomes, k).expect("valid stratum")
            })
            .collect();
        MatchedDesign::new(strata).expect("valid design")
    }
}

/// A binary confounder with its implied assignment probabilities
/// `ϱ_ij = exp(γ u_ij)/Σ_j' exp(γ u_ij')`.
#[derive(Debug, Clone)]
pub struct ConfounderAssignment {
    pub u: Vec<Vec<u8>>,
    pub rho: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SetSizeLaw {
    Fixed(usize),
    /// `n_i = 2 + Poisson(rate)`, resampled while `n_i > 30`.
    TwoPlusPoisson(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioFamily {
    /// Rows (a)–(k) of the generative-model table.
    TableRow(char),
    /// Fixed sets of five with exponential outcomes and effects.
    AppendixA,
}

/// A generative configuration for the simulation lab.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub label: String,
    pub family: ScenarioFamily,
    pub binary: bool,
    pub strata: usize,
    pub sizes: SetSizeLaw,
    pub gamma: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Scenario {
    /// Parses labels `a`–`k`, `binary-a`–`binary-k`, and `appendixA`.
    pub fn from_label(label: &str) -> Result<Self> {
        let (binary, rest) = match label.strip_prefix("binary-") {
            Some(rest) => (true, rest),
            None => (false, label),
        };
        if rest.eq_ignore_ascii_case("appendixa") {
            if binary {
                return Err(Error::UnknownScenario(label.to_string()));
            }
            return Ok(Self {
                label: label.to_string(),
                family: ScenarioFamily::AppendixA,
                binary: false,
                strata: 500,
                sizes: SetSizeLaw::Fixed(5),
                gamma: 1.0,
                alpha: 0.05,
                replicates: 1000,
                seed: 0,
            });
        }
        let mut chars = rest.chars();
        match (chars.next(), chars.next()) {
            (Some(row @ 'a'..='k'), None) => Ok(Self {
                label: label.to_string(),
                family: ScenarioFamily::TableRow(row),
                binary,
                strata: 500,
                sizes: SetSizeLaw::TwoPlusPoisson(2),
                gamma: 5.0,
                alpha: 0.1,
                replicates: 1000,
                seed: 0,
            }),
            _ => Err(Error::UnknownScenario(label.to_string())),
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn with_strata(mut self, strata: usize) -> Self {
        self.strata = strata;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Methods reported for this scenario in the study table.
    pub fn default_methods(&self) -> Vec<Method> {
        if self.binary {
            vec![Method::Ktilde, Method::Dbar, Method::BinaryIp]
        } else {
            vec![Method::Ktilde, Method::Dbar, Method::PermT]
        }
    }
}

#[derive(Clone, Copy)]
enum Noise {
    Zero,
    Gauss(f64), // standard deviation
    /// `scale · {E(rate) − 1/rate}`, a centered exponential.
    CenteredExp { rate: f64, scale: f64 },
    /// `scale · V_i · {E(rate) − 1/rate}` with `V_i = 2·1(β_i ≥ 0) − 1`.
    SetSignedCenteredExp { rate: f64, scale: f64 },
}

impl Noise {
    fn sample<R: rand::Rng>(&self, rng: &mut R, set_sign: f64) -> f64 {
        use rand_distr::Distribution;
        match *self {
            Noise::Zero => 0.0,
            Noise::Gauss(sd) => rand_distr::Normal::new(0.0, sd).unwrap().sample(rng),
            Noise::CenteredExp { rate, scale } => {
                scale * (rand_distr::Exp::new(rate).unwrap().sample(rng) - 1.0 / rate)
            }
            Noise::SetSignedCenteredExp { rate, scale } => {
                scale * set_sign * (rand_distr::Exp::new(rate).unwrap().sample(rng) - 1.0 / rate)
            }
        }
    }
}

fn table_row_noise(row: char) -> (Noise, Noise, Noise) {
    use Noise::*;
    let cexp = |rate, scale| CenteredExp { rate, scale };
    let vexp = |rate, scale| SetSignedCenteredExp { rate, scale };
    match row {
        'a' => (Zero, cexp(0.1, 1.0), Zero),
        'b' => (Gauss(1.0), Gauss(10.0), Gauss(10.0)),
        'c' => (Gauss(10.0), Gauss(10.0), Gauss(10.0)),
        'd' => (cexp(1.0, 1.0), cexp(0.1, 1.0), cexp(0.1, 1.0)),
        'e' => (cexp(0.1, 1.0), cexp(0.1, 1.0), cexp(0.1, 1.0)),
        'f' => (cexp(1.0, -1.0), cexp(0.1, -1.0), cexp(0.1, -1.0)),
        'g' => (cexp(0.1, -1.0), cexp(0.1, -1.0), cexp(0.1, -1.0)),
        'h' => (Gauss(1.0), vexp(0.1, 1.0), Gauss(1.0)),
        'i' => (Gauss(5.0), vexp(0.1, 1.0), Gauss(1.0)),
        'j' => (Gauss(1.0), vexp(0.1, -1.0), Gauss(1.0)),
        'k' => (Gauss(5.0), vexp(0.1, -1.0), Gauss(1.0)),
        _ => unreachable!("validated at scenario construction"),
    }
}

fn draw_sizes<R: rand::Rng>(rng: &mut R, law: SetSizeLaw, strata: usize) -> Vec<usize> {
    use rand_distr::Distribution;
    match law {
        SetSizeLaw::Fixed(n) => vec![n; strata],
        SetSizeLaw::TwoPlusPoisson(rate) => {
            let poisson = rand_distr::Poisson::new(rate as f64).unwrap();
            (0..strata)
                .map(|_| loop {
                    let n = 2 + poisson.sample(rng) as usize;
                    if n <= 30 {
                        break n;
                    }
                })
                .collect()
        }
    }
}

/// Draws the potential outcomes for one replicate and returns them with
/// their sample average treatment effect.
pub fn generate(scenario: &Scenario, replicate: usize) -> (PotentialOutcomes, f64) {
    use rand_distr::Distribution;
    let mut rng = stream_rng(scenario.seed, replicate as u64, 0);
    let sizes = draw_sizes(&mut rng, scenario.sizes, scenario.strata);

    let strata: Vec<PotentialStratum> = match scenario.family {
        ScenarioFamily::AppendixA => {
            let control = rand_distr::Exp::new(1.0 / 15.0).unwrap();
            let effect = rand_distr::Exp::new(1.0 / 30.0).unwrap();
            sizes
                .iter()
                .map(|&n| {
                    let mut r_t = Vec::with_capacity(n);
                    let mut r_c = Vec::with_capacity(n);
                    for _ in 0..n {
                        let c = control.sample(&mut rng);
                        r_c.push(c);
                        r_t.push(c + effect.sample(&mut rng));
                    }
                    PotentialStratum::new(r_t, r_c)
                })
                .collect()
        }
        ScenarioFamily::TableRow(row) => {
            let (beta_noise, control_noise, treated_noise) = table_row_noise(row);
            sizes
                .iter()
                .map(|&n| {
                    let beta = beta_noise.sample(&mut rng, 1.0);
                    let set_sign = if beta >= 0.0 { 1.0 } else { -1.0 };
                    let mut r_t = Vec::with_capacity(n);
                    let mut r_c = Vec::with_capacity(n);
                    for _ in 0..n {
                        let c = control_noise.sample(&mut rng, set_sign);
                        let t = c + beta + treated_noise.sample(&mut rng, set_sign);
                        if scenario.binary {
                            r_c.push(f64::from(c > 0.0));
                            r_t.push(f64::from(t > 0.0));
                        } else {
                            r_c.push(c);
                            r_t.push(t);
                        }
                    }
                    PotentialStratum::new(r_t, r_c)
                })
                .collect()
        }
    };
    let potential = PotentialOutcomes::new(strata);
    let tau_bar = potential.tau_bar();
    (potential, tau_bar)
}

/// Per-stratum candidate values whose expectation the adversary maximizes.
fn stratum_contributions(
    stratum: &PotentialStratum,
    statistic: Method,
    tau0: f64,
    weight: f64,
    model: &GammaModel,
    n_total: usize,
) -> Vec<f64> {
    match statistic {
        Method::Dbar | Method::BinaryIp => stratum
            .deltas()
            .iter()
            .map(|&d| weight * d_stat(d - tau0, model.gamma()))
            .collect(),
        Method::Ktilde => {
            let n = stratum.len();
            let scale = model.kappa_tilde(n) / n_total as f64;
            let gamma_n = model.gamma_n(n);
            stratum
                .deltas()
                .iter()
                .map(|&d| scale * d_stat(d - tau0, gamma_n))
                .collect()
        }
        Method::PermT => {
            let bounds = imputation_bounds(
                &stratum.treated_potential,
                &stratum.control_potential,
                tau0,
                model,
            )
            .expect("strata have n >= 2");
            stratum
                .deltas()
                .iter()
                .zip(&bounds)
                .map(|(&d, &theta)| weight * (d - tau0 - theta))
                .collect()
        }
    }
}

/// Constructs the binary confounder maximizing the exact expectation of the
/// statistic's stratum contribution, enumerating the `n−1` sorted candidate
/// patterns per stratum. Expectation ties are broken toward the larger
/// variance; full ties resolve to the larger ones count, so at `Γ = 1`
/// every stratum reports `n−1` ones.
pub fn worst_case_confounder(
    potential: &PotentialOutcomes,
    statistic: Method,
    tau0: f64,
    model: &GammaModel,
) -> ConfounderAssignment {
    let gamma = model.gamma();
    let n_total = potential.num_units();
    let mut u_all = Vec::with_capacity(potential.num_strata());
    let mut rho_all = Vec::with_capacity(potential.num_strata());
    for stratum in potential.strata() {
        let n = stratum.len();
        let weight = n as f64 / n_total as f64;
        let values = stratum_contributions(stratum, statistic, tau0, weight, model, n_total);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
        let sorted: Vec<f64> = order.iter().map(|&j| values[j]).collect();

        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-12 * 1.0_f64.max(a.abs()).max(b.abs());
        let mut best: Option<(f64, f64, usize)> = None;
        for ones in 1..n {
            let low = n - ones;
            let wsum = low as f64 + gamma * ones as f64;
            let mean = (sorted[..low].iter().sum::<f64>()
                + gamma * sorted[low..].iter().sum::<f64>())
                / wsum;
            let second = (sorted[..low].iter().map(|v| v * v).sum::<f64>()
                + gamma * sorted[low..].iter().map(|v| v * v).sum::<f64>())
                / wsum;
            let var = (second - mean * mean).max(0.0);
            let replace = match best {
                None => true,
                Some((be, bv, _)) => {
                    if tol(mean, be) {
                        var > bv + 1e-12 * 1.0_f64.max(bv.abs()) || tol(var, bv)
                    } else {
                        mean > be
                    }
                }
            };
            if replace {
                best = Some((mean, var, ones));
            }
        }
        let ones = best.expect("n >= 2").2;

        let mut u = vec![0u8; n];
        for &j in order.iter().skip(n - ones) {
            u[j] = 1;
        }
        let weights: Vec<f64> = u.iter().map(|&b| if b == 1 { gamma } else { 1.0 }).collect();
        let total: f64 = weights.iter().sum();
        rho_all.push(weights.iter().map(|w| w / total).collect());
        u_all.push(u);
    }
    ConfounderAssignment {
        u: u_all,
        rho: rho_all,
    }
}

/// The explicit upper bound on `E(D̄_Γ)` under the weak null at assignment
/// probabilities `rho`: the exact expectation of the recentered statistic
/// plus the concavity correction driven by `P(τ̂_i ≥ τ̄_i)`.
pub fn dbar_bias_bound(
    potential: &PotentialOutcomes,
    rho: &[Vec<f64>],
    tau0: f64,
    model: &GammaModel,
) -> f64 {
    let gamma = model.gamma();
    let n_total = potential.num_units() as f64;
    let mut recentered = 0.0;
    let mut correction = 0.0;
    for (stratum, row) in potential.strata().iter().zip(rho) {
        let weight = stratum.len() as f64 / n_total;
        let tau_bar_i = stratum.tau_bar();
        let deltas = stratum.deltas();
        let exceed: f64 = row
            .iter()
            .zip(&deltas)
            .filter(|(_, &d)| d >= tau_bar_i)
            .map(|(&p, _)| p)
            .sum();
        recentered += weight
            * row
                .iter()
                .zip(&deltas)
                .map(|(&p, &d)| p * d_stat(d - tau_bar_i, gamma))
                .sum::<f64>();
        correction += weight * (1.0 + (1.0 - gamma) / gamma * exceed) * (tau_bar_i - tau0);
    }
    recentered + 2.0 * gamma / (1.0 + gamma) * correction
}

/// One statistic's pooled operating characteristics.
#[derive(Debug, Clone, Serialize)]
pub struct SizeStudyRow {
    pub statistic: Method,
    /// Fraction of replicates rejecting at the scenario's `α`.
    pub size: f64,
    /// Mean of (statistic − worst-case-expectation bound) in units of that
    /// quantity's pooled standard deviation.
    pub bias: f64,
    /// Analytic bias bound in the same units; absent for the integer
    /// program, which reports solve times instead.
    pub bound: Option<f64>,
    pub mean_deviate: f64,
    pub sd_deviate: f64,
    pub mean_solve_seconds: Option<f64>,
    pub max_solve_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeStudyTable {
    pub scenario: String,
    pub gamma: f64,
    pub alpha: f64,
    pub replicates: usize,
    pub strata: usize,
    pub seed: u64,
    /// How the bias and bound columns are normalized.
    pub bias_normalization: String,
    pub rows: Vec<SizeStudyRow>,
}

struct ReplicateRecord {
    reject: bool,
    centered: f64,
    deviate: f64,
    bound: Option<f64>,
    solve_seconds: Option<f64>,
}

fn run_replicate(
    scenario: &Scenario,
    methods: &[Method],
    model: &GammaModel,
    replicate: usize,
) -> Result<Vec<ReplicateRecord>> {
    let (potential, tau_bar) = generate(scenario, replicate);
    let mut records = Vec::with_capacity(methods.len());
    for (channel, &method) in methods.iter().enumerate() {
        let confounder = worst_case_confounder(&potential, method, tau_bar, model);
        let mut rng = stream_rng(scenario.seed, replicate as u64, 1 + channel as u64);
        let treated: Vec<usize> = confounder
            .rho
            .iter()
            .map(|row| weighted_index(&mut rng, row))
            .collect();
        let design = potential.observe(&treated);

        let record = match method {
            Method::PermT => {
                let analysis = perm_t_sensitivity(&design, tau_bar, model)?;
                let bound = perm_t_bias_bound(&potential, &confounder.rho, tau_bar, model)?;
                ReplicateRecord {
                    reject: analysis.p_value <= scenario.alpha,
                    centered: analysis.statistic - analysis.expectation_bound,
                    deviate: analysis.deviate,
                    bound: Some(bound),
                    solve_seconds: None,
                }
            }
            Method::Dbar => {
                let report = test_dbar(&design, tau_bar, model, scenario.alpha)?;
                let bound = dbar_bias_bound(&potential, &confounder.rho, tau_bar, model);
                ReplicateRecord {
                    reject: report.reject,
                    centered: report.result.statistic,
                    deviate: report.result.deviate,
                    bound: Some(bound),
                    solve_seconds: None,
                }
            }
            Method::Ktilde => {
                let report = test_ktilde(&design, tau_bar, model, scenario.alpha)?;
                ReplicateRecord {
                    reject: report.reject,
                    centered: report.result.statistic,
                    deviate: report.result.deviate,
                    bound: Some(0.0),
                    solve_seconds: None,
                }
            }
            Method::BinaryIp => {
                let start = Instant::now();
                let bound = ip_bound(&design, tau_bar, model)?;
                let solve_seconds = start.elapsed().as_secs_f64();
                let terms = dbar_terms(&design.summarize(), tau_bar, model);
                let statistic: f64 = terms.iter().sum();
                let se = se_q(&terms, &default_q(&design))?;
                if se <= 0.0 {
                    return Err(Error::DegenerateVariance);
                }
                let deviate = (statistic - bound) / se;
                ReplicateRecord {
                    reject: normal::sf(deviate) <= scenario.alpha,
                    centered: statistic - bound,
                    deviate,
                    bound: None,
                    solve_seconds: Some(solve_seconds),
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Runs the scenario's Monte Carlo size study for the given statistics.
/// Replicates are independent, drawn from streams keyed by
/// `(seed, replicate)`, and evaluated in parallel.
pub fn run_size_study(scenario: &Scenario, methods: &[Method]) -> Result<SizeStudyTable> {
    assert!(!methods.is_empty());
    let model = GammaModel::new(scenario.gamma)?;
    crate::inference::validate_alpha(scenario.alpha)?;

    let per_replicate: Vec<Vec<ReplicateRecord>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|m| run_replicate(scenario, methods, &model, m))
        .collect::<Result<_>>()?;

    let m = scenario.replicates as f64;
    let rows = methods
        .iter()
        .enumerate()
        .map(|(idx, &method)| {
            let records: Vec<&ReplicateRecord> =
                per_replicate.iter().map(|r| &r[idx]).collect();
            let size = records.iter().filter(|r| r.reject).count() as f64 / m;
            let mean_centered: f64 = records.iter().map(|r| r.centered).sum::<f64>() / m;
            let sd_centered = (records
                .iter()
                .map(|r| (r.centered - mean_centered).powi(2))
                .sum::<f64>()
                / (m - 1.0))
                .sqrt();
            let mean_deviate: f64 = records.iter().map(|r| r.deviate).sum::<f64>() / m;
            let sd_deviate = (records
                .iter()
                .map(|r| (r.deviate - mean_deviate).powi(2))
                .sum::<f64>()
                / (m - 1.0))
                .sqrt();
            let bound = if records.iter().all(|r| r.bound.is_some()) {
                let mean_bound: f64 =
                    records.iter().map(|r| r.bound.unwrap()).sum::<f64>() / m;
                Some(mean_bound / sd_centered)
            } else {
                None
            };
            let (mean_solve, max_solve) = if records.iter().all(|r| r.solve_seconds.is_some()) {
                let times: Vec<f64> = records.iter().map(|r| r.solve_seconds.unwrap()).collect();
                (
                    Some(times.iter().sum::<f64>() / m),
                    Some(times.iter().cloned().fold(0.0, f64::max)),
                )
            } else {
                (None, None)
            };
            SizeStudyRow {
                statistic: method,
                size,
                bias: mean_centered / sd_centered,
                bound,
                mean_deviate,
                sd_deviate,
                mean_solve_seconds: mean_solve,
                max_solve_seconds: max_solve,
            }
        })
        .collect();

    Ok(SizeStudyTable {
        scenario: scenario.label.clone(),
        gamma: scenario.gamma,
        alpha: scenario.alpha,
        replicates: scenario.replicates,
        strata: scenario.strata,
        seed: scenario.seed,
        bias_normalization:
            "per-replicate statistic minus bound, pooled over replicates; bias and bound \
             columns divide by that quantity's sample standard deviation"
                .to_string(),
        rows,
    })
}

/// Covariance diagnostics for the validity of `D̄_Γ` under the weak null.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiagnosticRecord {
    /// cov{P_u(τ̂_i ≥ τ̄_i), n_i(τ̄_i − τ0)} at the true confounder.
    pub cov_true: f64,
    /// The same covariance at the worst-case confounder.
    pub cov_star: f64,
    /// Closed-form variant with weights `n_i/Σ_j{1(δ<τ̄_i) + Γ·1(δ≥τ̄_i)}`.
    pub cov_skew_form: f64,
    /// cov of per-unit fitted values `τ̄_i` with residuals `δ_ij − τ̄_i`;
    /// identically zero.
    pub fitted_residual_cov: f64,
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1) as f64
}

/// Evaluates the necessary-condition covariances for anti-conservativeness
/// of `D̄_Γ`, with exact per-stratum probabilities by enumeration.
pub fn diagnostics(
    potential: &PotentialOutcomes,
    u_true: &ConfounderAssignment,
    u_star: &ConfounderAssignment,
    tau0: f64,
    model: &GammaModel,
) -> DiagnosticRecord {
    let gamma = model.gamma();
    let b = potential.num_strata();
    let mut exceed_true = Vec::with_capacity(b);
    let mut exceed_star = Vec::with_capacity(b);
    let mut skew_weight = Vec::with_capacity(b);
    let mut scaled_effect = Vec::with_capacity(b);
    let mut fitted = Vec::with_capacity(potential.num_units());
    let mut residual = Vec::with_capacity(potential.num_units());

    for (i, stratum) in potential.strata().iter().enumerate() {
        let n = stratum.len();
        let tau_bar_i = stratum.tau_bar();
        let deltas = stratum.deltas();
        let exceed = |row: &[f64]| -> f64 {
            row.iter()
                .zip(&deltas)
                .filter(|(_, &d)| d >= tau_bar_i)
                .map(|(&p, _)| p)
                .sum()
        };
        exceed_true.push(exceed(&u_true.rho[i]));
        exceed_star.push(exceed(&u_star.rho[i]));
        let denom: f64 = deltas
            .iter()
            .map(|&d| if d >= tau_bar_i { gamma } else { 1.0 })
            .sum();
        skew_weight.push(n as f64 / denom);
        scaled_effect.push(n as f64 * (tau_bar_i - tau0));
        for &d in &deltas {
            fitted.push(tau_bar_i);
            residual.push(d - tau_bar_i);
        }
    }

    DiagnosticRecord {
        cov_true: sample_cov(&exceed_true, &scaled_effect),
        cov_star: sample_cov(&exceed_star, &scaled_effect),
        cov_skew_form: sample_cov(&skew_weight, &scaled_effect),
        fitted_residual_cov: sample_cov(&fitted, &residual),
    }
}

/// The three-set, size-three configuration whose exact expectation of the
/// constant-effects worst-case analysis is positive for `Γ > 1` even though
/// the average effect is zero: one set carries a single unit with effect
/// `2c`, two sets carry a single unit with effect `−c`.
pub fn theorem1_potential(baseline: f64, c: f64) -> PotentialOutcomes {
    let a = baseline;
    PotentialOutcomes::new(vec![
        PotentialStratum::new(vec![a + 2.0 * c, a, a], vec![a, a, a]),
        PotentialStratum::new(vec![a - c, a, a], vec![a, a, a]),
        PotentialStratum::new(vec![a - c, a, a], vec![a, a, a]),
    ])
}

/// The hidden-bias pattern used by the configuration: the effect-carrying
/// unit is favored in set one, disfavored in sets two and three.
pub fn theorem1_confounder(model: &GammaModel) -> ConfounderAssignment {
    let gamma = model.gamma();
    let u = vec![vec![1u8, 0, 0], vec![0, 1, 1], vec![0, 1, 1]];
    let rho = u
        .iter()
        .map(|row| {
            let weights: Vec<f64> =
                row.iter().map(|&b| if b == 1 { gamma } else { 1.0 }).collect();
            let total: f64 = weights.iter().sum();
            weights.iter().map(|w| w / total).collect()
        })
        .collect();
    ConfounderAssignment { u, rho }
}

/// Exact sum over the three sets of `E{τ̂_i − μ_Γi}`:
/// `6cΓ{(2+Γ)⁻² − (2Γ+1)⁻²}`, zero at `Γ = 1` and positive for `Γ > 1`.
pub fn theorem1_fixture(gamma: f64, c: f64) -> f64 {
    assert!(c > 0.0);
    6.0 * c * gamma * (1.0 / ((2.0 + gamma) * (2.0 + gamma))
        - 1.0 / ((2.0 * gamma + 1.0) * (2.0 * gamma + 1.0)))
}

/// Probability limit of `B·var(τ̂)` in a design with fixed stratum size `n`
/// and per-stratum variances `(σ²_C, σ²_T, σ²_τ)`:
/// `σ²_C/(n−1) + σ²_T − σ²_τ/n`.
pub fn dim_limit_variance(n: usize, var_control: f64, var_treated: f64, var_effect: f64) -> f64 {
    var_control / (n - 1) as f64 + var_treated - var_effect / n as f64
}

/// The pooled-variance limit used by the constant-effects reference
/// distribution: `{(n−1)σ²_C + σ²_T}/(n−1)`.
pub fn pooled_limit_variance(n: usize, var_control: f64, var_treated: f64) -> f64 {
    ((n - 1) as f64 * var_control + var_treated) / (n - 1) as f64
}

/// Limiting rejection rate of a nominal-`α` test whose reference
/// distribution uses `variance_used` when the sampling variance is
/// `variance_true`: `Φ(Φ⁻¹(α)·√(used/true))`.
pub fn size_under_variance_mismatch(alpha: f64, variance_used: f64, variance_true: f64) -> f64 {
    normal::cdf(normal::quantile(alpha) * (variance_used / variance_true).sqrt())
}
