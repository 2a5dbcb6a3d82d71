//! Calibration metrics over (confidence, label) pairs.
//!
//! Labels are binary at the atomic level and continuous (the fraction of
//! true claims) at the response level. ECE uses equal-width bins over
//! [0, 1] with the last bin closed on the right; empty bins carry zero
//! weight. Sums use Neumaier compensation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AtomicClaim, ClaimConfidence, ResponseScore};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no data points")]
    Empty,
    #[error("bin count must be at least 1")]
    NoBins,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("AUROC undefined: need both positive and negative labels")]
    SingleClass,
    #[error("AUROC needs binary labels (got {0})")]
    NonBinary(f64),
    #[error("correlation undefined: constant input")]
    Constant,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least two points")]
    TooShort,
    #[error("labeled claim {0} has no confidence")]
    MissingConfidence(String),
    #[error("confidences mix several methods: {0:?}")]
    MixedMethods(Vec<String>),
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn check_unit(v: f64) -> Result<(), MetricError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(MetricError::OutOfRange(v))
    }
}

fn check_pairs(pairs: &[(f64, f64)]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    for &(c, y) in pairs {
        check_unit(c)?;
        check_unit(y)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence `e_i`; absent for empty bins.
    pub mean_confidence: Option<f64>,
    /// Mean label `o_i`; absent for empty bins.
    pub mean_label: Option<f64>,
    /// Fraction of all points in this bin.
    pub weight: f64,
}

fn edge(i: usize, bins: usize) -> f64 {
    i as f64 / bins as f64
}

/// Bin for a confidence in [0, 1]: `lower <= c < upper`, except that the
/// last bin also takes `c == 1`.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let mut i = ((c * bins as f64).floor() as usize).min(bins - 1);
    while i > 0 && c < edge(i, bins) {
        i -= 1;
    }
    while i + 1 < bins && c >= edge(i + 1, bins) {
        i += 1;
    }
    i
}

/// Expected calibration error and the per-bin breakdown.
pub fn ece(pairs: &[(f64, f64)], bins: usize) -> Result<(f64, Vec<CalibrationBin>), MetricError> {
    if bins == 0 {
        return Err(MetricError::NoBins);
    }
    check_pairs(pairs)?;
    let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); bins];
    for &(c, y) in pairs {
        members[bin_index(c, bins)].push((c, y));
    }
    let n = pairs.len() as f64;
    let mut table = Vec::with_capacity(bins);
    let mut terms = Vec::with_capacity(bins);
    for (i, m) in members.iter().enumerate() {
        let count = m.len();
        let (mean_confidence, mean_label, weight) = if count == 0 {
            (None, None, 0.0)
        } else {
            let e = compensated_sum(m.iter().map(|p| p.0)) / count as f64;
            let o = compensated_sum(m.iter().map(|p| p.1)) / count as f64;
            let w = count as f64 / n;
            terms.push(w * (o - e).abs());
            (Some(e), Some(o), w)
        };
        table.push(CalibrationBin {
            index: i,
            lower: edge(i, bins),
            upper: edge(i + 1, bins),
            count,
            mean_confidence,
            mean_label,
            weight,
        });
    }
    Ok((compensated_sum(terms), table))
}

/// Mean squared error between confidence and label.
pub fn brier(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    Ok(compensated_sum(pairs.iter().map(|(c, y)| (c - y) * (c - y))) / pairs.len() as f64)
}

/// 1-based ranks with ties sharing the average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUROC: the chance a random positive outscores a random
/// negative, ties counted as one half.
pub fn auroc(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    for &(_, y) in pairs {
        if y != 0.0 && y != 1.0 {
            return Err(MetricError::NonBinary(y));
        }
    }
    let positives = pairs.iter().filter(|p| p.1 == 1.0).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass);
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ranks = average_ranks(&scores);
    let rank_sum = compensated_sum(pairs.iter().zip(&ranks).filter(|(p, _)| p.1 == 1.0).map(|(_, r)| *r));
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn single_method(confs: &[ClaimConfidence]) -> Result<String, MetricError> {
    let mut methods: Vec<String> = confs.iter().map(|c| c.method.to_string()).collect();
    methods.sort();
    methods.dedup();
    match methods.len() {
        0 => Err(MetricError::Empty),
        1 => Ok(methods.remove(0)),
        _ => Err(MetricError::MixedMethods(methods)),
    }
}

/// Per-response confidence and factuality for the original responses
/// (sample index 0), using only labeled claims. Responses without labeled
/// claims are skipped with a warning. Output is ordered by query id.
pub fn aggregate_macro(claims: &[AtomicClaim], confs: &[ClaimConfidence]) -> Result<Vec<ResponseScore>, MetricError> {
    let method = single_method(confs)?;
    let lookup: HashMap<&str, f64> = confs.iter().map(|c| (c.claim_id.as_str(), c.score)).collect();
    let mut per_response: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in claims.iter().filter(|c| c.sample_index == 0) {
        let entry = per_response.entry(c.query_id.as_str()).or_default();
        let Some(label) = c.label else { continue };
        let score = *lookup
            .get(c.claim_id.as_str())
            .ok_or_else(|| MetricError::MissingConfidence(c.claim_id.clone()))?;
        entry.0.push(score);
        entry.1.push(f64::from(label));
    }
    let mut out = Vec::new();
    for (query_id, (scores, labels)) in per_response {
        if scores.is_empty() {
            log::warn!("response {query_id} has no labeled claims; omitted from macro scores");
            continue;
        }
        let n = scores.len() as f64;
        out.push(ResponseScore {
            query_id: query_id.to_string(),
            method: method.clone(),
            confidence: compensated_sum(scores) / n,
            factuality: compensated_sum(labels) / n,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Atomic,
    Macro,
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Atomic => "atomic",
            Granularity::Macro => "macro",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atomic" => Ok(Granularity::Atomic),
            "macro" => Ok(Granularity::Macro),
            _ => Err(format!("unknown granularity {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub granularity: Granularity,
    pub n: usize,
    pub ece: f64,
    pub brier: f64,
    pub auroc: Option<f64>,
    pub spearman: Option<f64>,
    pub bins: Vec<CalibrationBin>,
}

/// (confidence, label) pairs for every labeled claim.
pub fn atomic_pairs(claims: &[AtomicClaim], confs: &[ClaimConfidence]) -> Result<Vec<(f64, f64)>, MetricError> {
    let lookup: HashMap<&str, f64> = confs.iter().map(|c| (c.claim_id.as_str(), c.score)).collect();
    claims
        .iter()
        .filter_map(|c| c.label.map(|l| (c, l)))
        .map(|(c, l)| {
            lookup
                .get(c.claim_id.as_str())
                .map(|&s| (s, f64::from(l)))
                .ok_or_else(|| MetricError::MissingConfidence(c.claim_id.clone()))
        })
        .collect()
}

pub fn report_from_pairs(
    method: &str,
    granularity: Granularity,
    pairs: &[(f64, f64)],
    bins: usize,
) -> Result<CalibrationReport, MetricError> {
    let (e, table) = ece(pairs, bins)?;
    let b = brier(pairs)?;
    let auroc = match granularity {
        Granularity::Atomic => auroc(pairs).ok(),
        Granularity::Macro => None,
    };
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(CalibrationReport {
        method: method.to_string(),
        granularity,
        n: pairs.len(),
        ece: e,
        brier: b,
        auroc,
        spearman: spearman(&x, &y).ok(),
        bins: table,
    })
}

/// One report for one method's confidences. Atomic reports have one point
/// per labeled claim, macro reports one per response.
pub fn evaluate(
    confs: &[ClaimConfidence],
    claims: &[AtomicClaim],
    granularity: Granularity,
    bins: usize,
) -> Result<CalibrationReport, MetricError> {
    let method = single_method(confs)?;
    let pairs = match granularity {
        Granularity::Atomic => atomic_pairs(claims, confs)?,
        Granularity::Macro => aggregate_macro(claims, confs)?
            .into_iter()
            .map(|s| (s.confidence, s.factuality))
            .collect(),
    };
    report_from_pairs(&method, granularity, &pairs, bins)
}

pub const BINS_CSV_HEADER: &str = "index,lower,upper,count,mean_confidence,mean_label,weight";

/// Reliability-diagram rows for one report (no header). Empty bins leave
/// the mean columns blank.
pub fn bins_csv_rows(report: &CalibrationReport) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    report
        .bins
        .iter()
        .map(|b| {
            let mut row = String::new();
            write!(
                row,
                "{},{},{},{},{},{},{}",
                b.index,
                b.lower,
                b.upper,
                b.count,
                opt(b.mean_confidence),
                opt(b.mean_label),
                b.weight
            )
            .expect("string write");
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Method;
    use proptest::prelude::*;

    #[test]
    fn ece_perfect_bin() {
        let pairs: Vec<_> = (0..10).map(|i| (0.8, if i < 8 { 1.0 } else { 0.0 })).collect();
        let (e, bins) = ece(&pairs, 10).unwrap();
        assert!(e.abs() < 1e-15);
        assert_eq!(bins[8].count, 10);
        assert_eq!(bins.len(), 10);
    }

    #[test]
    fn ece_all_wrong() {
        let pairs = vec![(0.9, 0.0); 10];
        assert!((ece(&pairs, 10).unwrap().0 - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ece_errors() {
        assert_eq!(ece(&[], 10).unwrap_err(), MetricError::Empty);
        assert_eq!(ece(&[(0.5, 1.0)], 0).unwrap_err(), MetricError::NoBins);
        assert_eq!(ece(&[(1.5, 1.0)], 10).unwrap_err(), MetricError::OutOfRange(1.5));
    }

    #[test]
    fn binning_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.7, 10), 7);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.999, 10), 9);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(1.0, 1), 0);
        for i in 0..=1000 {
            let c = i as f64 / 1000.0;
            let b = bin_index(c, 7);
            assert!(edge(b, 7) <= c && (c < edge(b + 1, 7) || b == 6));
        }
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[(1.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(brier(&[(0.5, 0.0)]).unwrap(), 0.25);
    }

    #[test]
    fn auroc_examples() {
        let sep = vec![(0.9, 1.0), (0.8, 1.0), (0.2, 0.0), (0.1, 0.0)];
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        let tied = vec![(0.5, 1.0), (0.5, 0.0), (0.5, 1.0)];
        assert_eq!(auroc(&tied).unwrap(), 0.5);
        assert_eq!(auroc(&[(0.5, 1.0), (0.2, 1.0)]).unwrap_err(), MetricError::SingleClass);
        assert_eq!(
            auroc(&[(0.5, 0.5), (0.2, 1.0)]).unwrap_err(),
            MetricError::NonBinary(0.5)
        );
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&x, &[1.0; 4]).unwrap_err(), MetricError::Constant);
        assert_eq!(spearman(&[1.0], &[1.0]).unwrap_err(), MetricError::TooShort);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn labeled(q: &str, pos: u32, label: Option<u8>) -> AtomicClaim {
        let mut c = AtomicClaim::new(q, 0, pos, "x");
        c.label = label;
        c
    }

    fn conf(c: &AtomicClaim, s: f64) -> ClaimConfidence {
        ClaimConfidence {
            claim_id: c.claim_id.clone(),
            method: Method::DisRating,
            score: s,
        }
    }

    #[test]
    fn macro_aggregation() {
        let claims = vec![labeled("q1", 0, Some(1)), labeled("q1", 1, Some(0))];
        let confs = vec![conf(&claims[0], 1.0), conf(&claims[1], 0.0)];
        let scores = aggregate_macro(&claims, &confs).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!((scores[0].confidence, scores[0].factuality), (0.5, 0.5));

        let single = vec![labeled("q2", 0, Some(1))];
        let s = aggregate_macro(&single, &[conf(&single[0], 0.3)]).unwrap();
        assert_eq!((s[0].confidence, s[0].factuality), (0.3, 1.0));
    }

    #[test]
    fn macro_omits_unlabeled_responses() {
        let claims = vec![labeled("q1", 0, Some(1)), labeled("q2", 0, None)];
        let confs = vec![conf(&claims[0], 0.9), conf(&claims[1], 0.1)];
        let scores = aggregate_macro(&claims, &confs).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].query_id, "q1");
    }

    #[test]
    fn evaluate_shapes() {
        let claims = vec![labeled("q1", 0, Some(1)), labeled("q1", 1, Some(0))];
        let confs = vec![conf(&claims[0], 0.9), conf(&claims[1], 0.2)];
        let atomic = evaluate(&confs, &claims, Granularity::Atomic, 10).unwrap();
        assert_eq!(atomic.n, 2);
        assert_eq!(atomic.auroc, Some(1.0));
        let mac = evaluate(&confs, &claims, Granularity::Macro, 10).unwrap();
        assert_eq!(mac.n, 1);
        assert_eq!(mac.auroc, None);
        assert_eq!(mac.spearman, None);

        let unlabeled = vec![labeled("q1", 0, None)];
        assert_eq!(
            evaluate(&[conf(&unlabeled[0], 0.5)], &unlabeled, Granularity::Atomic, 10).unwrap_err(),
            MetricError::Empty
        );
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
    }

    proptest! {
        #[test]
        fn ece_permutation_invariant(mut pairs in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..60), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let p: Vec<(f64, f64)> = pairs.iter().map(|&(c, y)| (c, f64::from(y))).collect();
            pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let q: Vec<(f64, f64)> = pairs.iter().map(|&(c, y)| (c, f64::from(y))).collect();
            prop_assert!((ece(&p, 10).unwrap().0 - ece(&q, 10).unwrap().0).abs() < 1e-12);
            let (e, bins) = ece(&p, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let w = compensated_sum(bins.iter().map(|b| b.weight));
            prop_assert!((w - 1.0).abs() < 1e-12);
            for b in &bins {
                if let Some(m) = b.mean_confidence {
                    prop_assert!(m >= b.lower - 1e-12 && m <= b.upper + 1e-12);
                }
            }
        }

        #[test]
        fn brier_of_exact_labels_is_zero(v in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let pairs: Vec<_> = v.iter().map(|&c| (c, c)).collect();
            prop_assert_eq!(brier(&pairs).unwrap(), 0.0);
            prop_assert_eq!(ece(&pairs, 10).unwrap().0, 0.0);
        }

        #[test]
        fn auroc_monotone_invariant(pairs in prop::collection::vec((0.0f64..=1.0, 0u8..2), 2..80)) {
            let p: Vec<(f64, f64)> = pairs.iter().map(|&(c, y)| (c, f64::from(y))).collect();
            let cubed: Vec<(f64, f64)> = p.iter().map(|&(c, y)| (c * c * c, y)).collect();
            match (auroc(&p), auroc(&cubed)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn spearman_monotone_invariant(x in prop::collection::vec(0.0f64..1.0, 3..50), y in prop::collection::vec(0.0f64..1.0, 3..50)) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * v * v + 2.0).collect();
            if let (Ok(a), Ok(b)) = (spearman(x, y), spearman(&tx, &ty)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
