//! Matched-design data model, ingestion, and elementary per-stratum
//! summaries.
//!
//! A design arrives pre-matched: each stratum (block) contains exactly one
//! treated unit and at least one control. Designs are immutable after
//! construction and safe to share across threads.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One matched set: outcomes in record order with the treated unit flagged.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stratum {
    pub id: String,
    pub outcomes: Vec<f64>,
    pub treated_index: usize,
}

impl Stratum {
    pub fn new(id: impl Into<String>, outcomes: Vec<f64>, treated_index: usize) -> Result<Self> {
        let id = id.into();
        if outcomes.len() < 2 {
            return Err(Error::StratumTooSmall(id));
        }
        if outcomes.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFiniteOutcome(id));
        }
        if treated_index >= outcomes.len() {
            return Err(Error::MissingTreated(id));
        }
        Ok(Self {
            id,
            outcomes,
            treated_index,
        })
    }

    /// Stratum size `n_i`.
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn treated_outcome(&self) -> f64 {
        self.outcomes[self.treated_index]
    }

    /// Observed treated-minus-control difference in means.
    pub fn tau_hat(&self) -> f64 {
        let treated = self.treated_outcome();
        let total: f64 = self.outcomes.iter().sum();
        treated - (total - treated) / (self.len() - 1) as f64
    }

    /// The values `δ_ij − τ0` imputed from the adjusted responses
    /// `R_ij − Z_ij τ0`: entry `j` is what the treated-minus-control mean
    /// difference (minus `τ0`) would be if unit `j` had been treated and the
    /// effect were constant at `τ0`. The entry at `treated_index` is the
    /// observed `δ_ij − τ0`.
    pub fn adjusted_deltas(&self, tau0: f64) -> Vec<f64> {
        let nm1 = (self.len() - 1) as f64;
        let mut adjusted = self.outcomes.clone();
        adjusted[self.treated_index] -= tau0;
        let total: f64 = adjusted.iter().sum();
        adjusted.iter().map(|&a| a - (total - a) / nm1).collect()
    }
}

/// Per-stratum summary consumed by the test statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StratumSummary {
    /// Observed treated-minus-control mean difference `τ̂_i`.
    pub tau_hat: f64,
    /// Stratum weight `n_i / N`.
    pub weight: f64,
    /// Observed `δ_ij` for the treated unit; equals `tau_hat` exactly.
    pub delta_obs: f64,
    /// Stratum size `n_i`.
    pub n: usize,
}

/// A validated matched design.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MatchedDesign {
    strata: Vec<Stratum>,
    total_units: usize,
    binary: bool,
}

impl MatchedDesign {
    pub fn new(strata: Vec<Stratum>) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::EmptyInput);
        }
        let total_units = strata.iter().map(Stratum::len).sum();
        let binary = strata
            .iter()
            .flat_map(|s| s.outcomes.iter())
            .all(|&r| r == 0.0 || r == 1.0);
        Ok(Self {
            strata,
            total_units,
            binary,
        })
    }

    /// Number of strata `B`.
    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    /// Total unit count `N`.
    pub fn num_units(&self) -> usize {
        self.total_units
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    /// True when every outcome lies in {0, 1}, enabling the binary-outcome
    /// worst-case bound.
    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// Per-stratum summaries in stratum order.
    pub fn summarize(&self) -> Vec<StratumSummary> {
        let n_total = self.total_units as f64;
        self.strata
            .iter()
            .map(|s| {
                let tau_hat = s.tau_hat();
                StratumSummary {
                    tau_hat,
                    weight: s.len() as f64 / n_total,
                    delta_obs: tau_hat,
                    n: s.len(),
                }
            })
            .collect()
    }

    /// Observed difference-in-means estimate `τ̂ = Σ (n_i/N) τ̂_i`.
    pub fn tau_hat(&self) -> f64 {
        let n_total = self.total_units as f64;
        self.strata
            .iter()
            .map(|s| s.len() as f64 / n_total * s.tau_hat())
            .sum()
    }

    /// Mirrors the observed design for a less-than alternative: binary
    /// outcomes are reflected (`r ↦ 1 − r`), others negated, so that the
    /// greater-than machinery applies to `−τ̂` with `−τ0`.
    pub fn negated(&self) -> Self {
        let strata = self
            .strata
            .iter()
            .map(|s| Stratum {
                id: s.id.clone(),
                outcomes: s
                    .outcomes
                    .iter()
                    .map(|&r| if self.binary { 1.0 - r } else { -r })
                    .collect(),
                treated_index: s.treated_index,
            })
            .collect();
        Self::new(strata).expect("negation preserves validity")
    }

    /// Reads a delimited text stream with header columns `block_id`,
    /// `treated`, `outcome` (extra columns ignored). The delimiter is
    /// detected from the header line: tab if present, comma otherwise.
    /// Stratum order is first appearance of `block_id`; unit order within a
    /// stratum is record order.
    pub fn from_delimited<R: Read>(mut reader: R) -> Result<Self> {
        let mut raw = String::new();
        reader.read_to_string(&mut raw)?;
        if raw.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let header = raw.lines().next().unwrap_or("");
        let delimiter = if header.contains('\t') { b'\t' } else { b',' };

        let mut csv_reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(raw.as_bytes());

        let headers = csv_reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
        };
        let (block_col, treated_col, outcome_col) =
            match (col("block_id"), col("treated"), col("outcome")) {
                (Some(b), Some(t), Some(o)) => (b, t, o),
                (b, t, o) => {
                    let missing: Vec<&str> = [
                        (b, "block_id"),
                        (t, "treated"),
                        (o, "outcome"),
                    ]
                    .iter()
                    .filter(|(idx, _)| idx.is_none())
                    .map(|(_, name)| *name)
                    .collect();
                    return Err(Error::MissingColumns(missing.join(", ")));
                }
            };

        let mut records = Vec::new();
        for (row, record) in csv_reader.records().enumerate() {
            let record = record?;
            let line = row + 2; // header is line 1
            let block = record
                .get(block_col)
                .ok_or_else(|| Error::BadRecord {
                    line,
                    msg: "missing block_id field".into(),
                })?
                .to_string();
            let treated = match record.get(treated_col).map(str::trim) {
                Some("0") => false,
                Some("1") => true,
                other => {
                    return Err(Error::BadRecord {
                        line,
                        msg: format!("treated must be 0 or 1, got {other:?}"),
                    })
                }
            };
            let outcome: f64 = record
                .get(outcome_col)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::BadRecord {
                    line,
                    msg: "outcome is not a number".into(),
                })?;
            if !outcome.is_finite() {
                return Err(Error::NonFiniteOutcome(block));
            }
            records.push((block, treated, outcome));
        }
        Self::from_records(records)
    }

    /// Builds a design from `(block_id, treated, outcome)` records; blocks
    /// need not be contiguous.
    pub fn from_records(records: Vec<(String, bool, f64)>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut order: Vec<String> = Vec::new();
        let mut by_block: HashMap<String, (Vec<f64>, Vec<usize>)> = HashMap::new();
        for (block, treated, outcome) in records {
            if !outcome.is_finite() {
                return Err(Error::NonFiniteOutcome(block));
            }
            let entry = by_block.entry(block.clone()).or_insert_with(|| {
                order.push(block.clone());
                (Vec::new(), Vec::new())
            });
            if treated {
                entry.1.push(entry.0.len());
            }
            entry.0.push(outcome);
        }

        let mut strata = Vec::with_capacity(order.len());
        for block in order {
            let (outcomes, treated_positions) = by_block.remove(&block).unwrap();
            if outcomes.len() < 2 {
                return Err(Error::StratumTooSmall(block));
            }
            match treated_positions.as_slice() {
                [] => return Err(Error::MissingTreated(block)),
                [idx] => strata.push(Stratum::new(block, outcomes, *idx)?),
                _ => return Err(Error::MultipleTreated(block)),
            }
        }
        Self::new(strata)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_delimited(std::fs::File::open(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            strata: Vec<Stratum>,
        }
        let raw: Raw = serde_json::from_str(json).map_err(|e| Error::BadRecord {
            line: 0,
            msg: e.to_string(),
        })?;
        Self::new(raw.strata)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_block_design() -> MatchedDesign {
        MatchedDesign::from_records(vec![
            ("A".into(), true, 4.0),
            ("A".into(), false, 1.0),
            ("B".into(), true, 2.0),
            ("B".into(), false, 2.0),
            ("B".into(), false, 5.0),
        ])
        .unwrap()
    }

    #[test]
    fn two_blocks_load_and_count() {
        let d = two_block_design();
        assert_eq!(d.num_strata(), 2);
        assert_eq!(d.num_units(), 5);
        assert_eq!(d.strata()[0].len(), 2);
        assert_eq!(d.strata()[1].len(), 3);
        assert!(!d.is_binary());
    }

    #[test]
    fn multiple_treated_is_rejected() {
        let err = MatchedDesign::from_records(vec![
            ("blockX".into(), true, 1.0),
            ("blockX".into(), true, 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::MultipleTreated(b) if b == "blockX"));
    }

    #[test]
    fn missing_treated_and_small_strata_are_rejected() {
        let err = MatchedDesign::from_records(vec![
            ("A".into(), false, 1.0),
            ("A".into(), false, 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::MissingTreated(_)));

        let err = MatchedDesign::from_records(vec![("A".into(), true, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::StratumTooSmall(_)));

        assert!(matches!(
            MatchedDesign::from_records(vec![]).unwrap_err(),
            Error::EmptyInput
        ));
    }

    #[test]
    fn non_finite_outcomes_are_rejected() {
        let err = MatchedDesign::from_records(vec![
            ("A".into(), true, f64::NAN),
            ("A".into(), false, 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteOutcome(_)));
    }

    #[test]
    fn summaries_match_hand_arithmetic() {
        let d = two_block_design();
        let s = d.summarize();
        assert_eq!(s[0].tau_hat, 3.0);
        assert_eq!(s[0].weight, 2.0 / 5.0);
        assert_eq!(s[1].tau_hat, 2.0 - 3.5);
        assert_eq!(s[0].tau_hat, s[0].delta_obs);
        let weight_sum: f64 = s.iter().map(|x| x.weight).sum();
        assert!((weight_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_stratum_has_zero_tau_hat() {
        let s = Stratum::new("c", vec![3.0, 3.0, 3.0], 1).unwrap();
        assert_eq!(s.tau_hat(), 0.0);
    }

    #[test]
    fn adjusted_deltas_match_hand_values() {
        let pair = Stratum::new("p", vec![4.0, 1.0], 0).unwrap();
        assert_eq!(pair.adjusted_deltas(0.0), vec![3.0, -3.0]);
        assert_eq!(pair.adjusted_deltas(3.0), vec![0.0, 0.0]);

        // n=3, R=(5,0,1), treated first, tau0=1: adjusted (4,0,1) gives
        // (4 - 0.5, 0 - 2.5, 1 - 2).
        let s = Stratum::new("t", vec![5.0, 0.0, 1.0], 0).unwrap();
        let d = s.adjusted_deltas(1.0);
        assert_eq!(d, vec![3.5, -2.5, -1.0]);
        // they always sum to zero
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn adjusted_delta_at_treated_index_reproduces_tau_hat() {
        let d = two_block_design();
        for (s, summary) in d.strata().iter().zip(d.summarize()) {
            for tau0 in [-1.5, 0.0, 0.25, 2.0] {
                let deltas = s.adjusted_deltas(tau0);
                assert!((deltas[s.treated_index] - (summary.tau_hat - tau0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delimited_roundtrip_with_tabs_commas_and_extras() {
        let csv_text = "block_id,treated,outcome,age\nA,1,4.0,31\nA,0,1.0,44\nB,1,2.0,50\nB,0,2.0,28\nB,0,5.0,39\n";
        let d = MatchedDesign::from_delimited(csv_text.as_bytes()).unwrap();
        assert_eq!(d, two_block_design());

        let tsv_text = csv_text.replace(',', "\t");
        let d2 = MatchedDesign::from_delimited(tsv_text.as_bytes()).unwrap();
        assert_eq!(d2, d);

        let err = MatchedDesign::from_delimited("foo,bar\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::MissingColumns(_)));
    }

    #[test]
    fn json_roundtrip_is_identity() {
        let d = two_block_design();
        let restored = MatchedDesign::from_json(&d.to_json()).unwrap();
        assert_eq!(restored, d);
    }

    #[test]
    fn paired_extract_shape() {
        // 250 one-treated one-control blocks in the documented extract format.
        let mut records = Vec::new();
        for i in 0..250 {
            records.push((format!("pair{i}"), true, 10.0 + i as f64));
            records.push((format!("pair{i}"), false, 9.0));
        }
        let d = MatchedDesign::from_records(records).unwrap();
        assert_eq!(d.num_strata(), 250);
        assert_eq!(d.num_units(), 500);
    }

    #[test]
    fn binary_detection() {
        let d = MatchedDesign::from_records(vec![
            ("A".into(), true, 1.0),
            ("A".into(), false, 0.0),
        ])
        .unwrap();
        assert!(d.is_binary());
        let neg = d.negated();
        assert!(neg.is_binary());
        assert_eq!(neg.strata()[0].outcomes, vec![0.0, 1.0]);
    }
}
