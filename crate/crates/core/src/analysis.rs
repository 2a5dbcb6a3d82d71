//! Positional confidence profiles and cross-method alignment.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{compensated_sum, spearman, Granularity};
use crate::corpus::{AtomicClaim, ClaimConfidence};

pub const DEFAULT_PARTS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("parts must be at least 1")]
    NoParts,
    #[error("claim {0} has no confidence")]
    MissingConfidence(String),
    #[error("alignment needs at least two methods (got {0})")]
    TooFewMethods(usize),
    #[error("duplicate method {0}")]
    DuplicateMethod(String),
    #[error("methods {first} and {second} cover different ids: {ids:?}")]
    IdMismatch {
        first: String,
        second: String,
        ids: Vec<String>,
    },
}

/// Part index for each of `n` claims in order. The first `n % parts` parts
/// get one extra claim; with fewer claims than parts the tail stays empty.
pub fn split_positions(n: usize, parts: usize) -> Result<Vec<usize>, AnalysisError> {
    if parts == 0 {
        return Err(AnalysisError::NoParts);
    }
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(n);
    for part in 0..parts {
        let size = base + usize::from(part < extra);
        out.extend(std::iter::repeat_n(part, size));
    }
    Ok(out)
}

/// Sizes of each part for `n` claims.
pub fn part_sizes(n: usize, parts: usize) -> Result<Vec<usize>, AnalysisError> {
    let mut sizes = vec![0; parts.max(1)];
    for p in split_positions(n, parts)? {
        sizes[p] += 1;
    }
    Ok(sizes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every claim that falls in a part.
    #[default]
    Global,
    /// Mean of per-response part means.
    PerResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalProfile {
    pub method: String,
    pub parts: usize,
    pub pooling: Pooling,
    /// `None` for parts no claim fell into.
    pub mean_confidence: Vec<Option<f64>>,
    /// Claims per part, summed over responses.
    pub counts: Vec<usize>,
}

pub fn positional_profile(
    claims: &[AtomicClaim],
    confs: &[ClaimConfidence],
    parts: usize,
    pooling: Pooling,
) -> Result<PositionalProfile, AnalysisError> {
    if parts == 0 {
        return Err(AnalysisError::NoParts);
    }
    let lookup: HashMap<&str, f64> = confs.iter().map(|c| (c.claim_id.as_str(), c.score)).collect();
    let mut responses: BTreeMap<(&str, u32), Vec<&AtomicClaim>> = BTreeMap::new();
    for c in claims {
        responses
            .entry((c.query_id.as_str(), c.sample_index))
            .or_default()
            .push(c);
    }
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); parts];
    let mut counts = vec![0; parts];
    for group in responses.values_mut() {
        group.sort_by_key(|c| c.position);
        let assignment = split_positions(group.len(), parts)?;
        let mut local: Vec<Vec<f64>> = vec![Vec::new(); parts];
        for (c, &p) in group.iter().zip(&assignment) {
            let score = *lookup
                .get(c.claim_id.as_str())
                .ok_or_else(|| AnalysisError::MissingConfidence(c.claim_id.clone()))?;
            local[p].push(score);
            counts[p] += 1;
        }
        for (p, scores) in local.into_iter().enumerate() {
            match pooling {
                Pooling::Global => pooled[p].extend(scores),
                Pooling::PerResponse if !scores.is_empty() => {
                    let n = scores.len() as f64;
                    pooled[p].push(compensated_sum(scores) / n);
                }
                Pooling::PerResponse => {}
            }
        }
    }
    let mean_confidence = pooled
        .into_iter()
        .map(|v| (!v.is_empty()).then(|| compensated_sum(v.iter().copied()) / v.len() as f64))
        .collect();
    let mut methods: Vec<String> = confs.iter().map(|c| c.method.to_string()).collect();
    methods.sort();
    methods.dedup();
    Ok(PositionalProfile {
        method: methods.join("+"),
        parts,
        pooling,
        mean_confidence,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub granularity: Granularity,
    pub methods: Vec<String>,
    /// Spearman correlations; `None` where one vector is constant.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Pairwise Spearman correlation between methods scored over the same ids.
pub fn alignment_matrix(
    vectors: &[(String, BTreeMap<String, f64>)],
    granularity: Granularity,
) -> Result<AlignmentMatrix, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::TooFewMethods(vectors.len()));
    }
    for (i, (m, _)) in vectors.iter().enumerate() {
        if vectors[..i].iter().any(|(o, _)| o == m) {
            return Err(AnalysisError::DuplicateMethod(m.clone()));
        }
    }
    let (first, reference) = &vectors[0];
    for (name, v) in &vectors[1..] {
        if v.len() != reference.len() || !v.keys().eq(reference.keys()) {
            let ids = reference
                .keys()
                .filter(|k| !v.contains_key(*k))
                .chain(v.keys().filter(|k| !reference.contains_key(*k)))
                .cloned()
                .collect();
            return Err(AnalysisError::IdMismatch {
                first: first.clone(),
                second: name.clone(),
                ids,
            });
        }
    }
    // BTreeMap iteration gives every vector the same id order.
    let columns: Vec<Vec<f64>> = vectors.iter().map(|(_, v)| v.values().copied().collect()).collect();
    let n = vectors.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        values[i][i] = Some(1.0);
        for j in i + 1..n {
            let rho = spearman(&columns[i], &columns[j]).ok();
            if rho.is_none() {
                log::warn!("spearman undefined between {} and {}", vectors[i].0, vectors[j].0);
            }
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    Ok(AlignmentMatrix {
        granularity,
        methods: vectors.iter().map(|(m, _)| m.clone()).collect(),
        values,
    })
}

impl AlignmentMatrix {
    /// Square CSV with a header row and the method name leading each row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", self.methods.join(","));
        for (m, row) in self.methods.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&format!("{m},{}\n", cells.join(",")));
        }
        out
    }
}

impl PositionalProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("part,count,mean_confidence\n");
        for (p, (count, mean)) in self.counts.iter().zip(&self.mean_confidence).enumerate() {
            let mean = mean.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{count},{mean}\n", p + 1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Method;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(part_sizes(10, 5).unwrap(), vec![2, 2, 2, 2, 2]);
        assert_eq!(part_sizes(7, 5).unwrap(), vec![2, 2, 1, 1, 1]);
        assert_eq!(part_sizes(3, 5).unwrap(), vec![1, 1, 1, 0, 0]);
        assert_eq!(split_positions(7, 5).unwrap(), vec![0, 0, 1, 1, 2, 3, 4]);
        assert_eq!(split_positions(3, 0), Err(AnalysisError::NoParts));
    }

    fn claims_with(scores: &[&[f64]]) -> (Vec<AtomicClaim>, Vec<ClaimConfidence>) {
        let mut claims = Vec::new();
        let mut confs = Vec::new();
        for (q, row) in scores.iter().enumerate() {
            for (p, &s) in row.iter().enumerate() {
                let c = AtomicClaim::new(&format!("q{q}"), 0, p as u32, "x");
                confs.push(ClaimConfidence {
                    claim_id: c.claim_id.clone(),
                    method: Method::DisSingle,
                    score: s,
                });
                claims.push(c);
            }
        }
        (claims, confs)
    }

    #[test]
    fn flat_profile_for_uniform_scores() {
        let (claims, confs) = claims_with(&[&[0.4; 10], &[0.4; 7]]);
        let prof = positional_profile(&claims, &confs, 5, Pooling::Global).unwrap();
        assert!(prof.mean_confidence.iter().all(|m| (m.unwrap() - 0.4).abs() < 1e-15));
        assert_eq!(prof.counts, vec![4, 4, 3, 3, 3]);
    }

    #[test]
    fn single_claim_populates_first_part_only() {
        let (claims, confs) = claims_with(&[&[0.7]]);
        let prof = positional_profile(&claims, &confs, 5, Pooling::Global).unwrap();
        assert_eq!(prof.mean_confidence, vec![Some(0.7), None, None, None, None]);
    }

    #[test]
    fn pooling_modes_differ() {
        // Response 0 has two claims in part 1, response 1 has one.
        let (claims, confs) = claims_with(&[&[1.0, 1.0], &[0.0]]);
        let global = positional_profile(&claims, &confs, 1, Pooling::Global).unwrap();
        let per = positional_profile(&claims, &confs, 1, Pooling::PerResponse).unwrap();
        assert!((global.mean_confidence[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per.mean_confidence[0], Some(0.5));
    }

    #[test]
    fn missing_confidence_is_an_error() {
        let (claims, mut confs) = claims_with(&[&[0.1, 0.2]]);
        confs.pop();
        assert!(matches!(
            positional_profile(&claims, &confs, 5, Pooling::Global),
            Err(AnalysisError::MissingConfidence(_))
        ));
    }

    fn vector(values: &[f64]) -> BTreeMap<String, f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("c{i:03}"), v))
            .collect()
    }

    #[test]
    fn alignment_diagonal_and_negation() {
        let a = vector(&[0.1, 0.5, 0.3, 0.9]);
        let neg = vector(&[0.9, 0.5, 0.7, 0.1]);
        let m = alignment_matrix(&[("a".into(), a), ("neg".into(), neg)], Granularity::Atomic).unwrap();
        assert_eq!(m.values[0][0], Some(1.0));
        assert!((m.values[0][1].unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(m.values[0][1], m.values[1][0]);
        assert!(m.to_csv().starts_with("method,a,neg\na,1,"));
    }

    #[test]
    fn alignment_errors() {
        let a = vector(&[0.1, 0.5]);
        assert_eq!(
            alignment_matrix(&[("a".into(), a.clone())], Granularity::Macro),
            Err(AnalysisError::TooFewMethods(1))
        );
        let mut b = a.clone();
        b.insert("zz".into(), 0.2);
        assert!(matches!(
            alignment_matrix(&[("a".into(), a), ("b".into(), b)], Granularity::Atomic),
            Err(AnalysisError::IdMismatch { ids, .. }) if ids == vec!["zz".to_string()]
        ));
    }

    proptest! {
        #[test]
        fn split_is_contiguous_and_complete(n in 0usize..200, parts in 1usize..12) {
            let split = split_positions(n, parts).unwrap();
            prop_assert_eq!(split.len(), n);
            prop_assert!(split.windows(2).all(|w| w[0] <= w[1]));
            let sizes = part_sizes(n, parts).unwrap();
            let max = *sizes.iter().max().unwrap();
            let min = *sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }

        #[test]
        fn alignment_permutes_with_methods(cols in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 3)) {
            let named: Vec<(String, BTreeMap<String, f64>)> =
                cols.iter().enumerate().map(|(i, c)| (format!("m{i}"), vector(c))).collect();
            let m = alignment_matrix(&named, Granularity::Atomic).unwrap();
            let perm = [2usize, 0, 1];
            let permuted: Vec<_> = perm.iter().map(|&i| named[i].clone()).collect();
            let p = alignment_matrix(&permuted, Granularity::Atomic).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(p.values[i][j], m.values[perm[i]][perm[j]]);
                    if let Some(v) = m.values[i][j] {
                        prop_assert!((-1.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}
