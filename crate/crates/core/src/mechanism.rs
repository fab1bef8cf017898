// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise relevance depth and cross-lingual representation similarity.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backend::{HiddenTrace, RelevanceMatrix};
use crate::error::{Error, Result};

/// How relevance values are made comparable before accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Absolute values as produced.
    #[default]
    Abs,
    /// Each layer's absolute relevance divided by its sum over all tokens.
    PerLayer,
}

/// Smallest 1-based layer count `n` whose cumulative absolute relevance
/// reaches `threshold` of the total.
pub fn token_mrd(profile: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "MRD threshold {threshold} outside (0, 1]"
        )));
    }
    let total: f64 = profile.iter().map(|r| r.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::UndefinedMrd);
    }
    let goal = threshold * total;
    let mut acc = 0.0;
    for (i, r) in profile.iter().enumerate() {
        acc += r.abs();
        if acc >= goal {
            return Ok(i + 1);
        }
    }
    // Rounding can leave the full sum a hair below `threshold * total` at 1.0.
    Ok(profile.len())
}

/// Per-layer profile of `token` after normalization.
pub fn normalized_profile(
    matrix: &RelevanceMatrix,
    token: usize,
    normalization: Normalization,
) -> Vec<f64> {
    let profile = matrix.token_profile(token);
    match normalization {
        Normalization::Abs => profile,
        Normalization::PerLayer => profile
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let layer_total: f64 = (0..matrix.num_tokens())
                    .map(|t| f64::from(matrix.get(l, t)).abs())
                    .sum();
                if layer_total == 0.0 {
                    0.0
                } else {
                    r.abs() / layer_total
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMrd {
    /// Maximum token MRD over the part.
    pub mrd: usize,
    pub num_tokens: usize,
    /// Tokens whose relevance was zero in every layer.
    pub undefined_tokens: usize,
}

/// MRD of a prompt part: the deepest MRD among its tokens.
pub fn part_mrd(
    matrix: &RelevanceMatrix,
    tokens: &[usize],
    threshold: f64,
    normalization: Normalization,
) -> Result<PartMrd> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("part has no tokens".into()));
    }
    let mut best = None;
    let mut undefined = 0;
    for &t in tokens {
        if t >= matrix.num_tokens() {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside a {}-token relevance matrix",
                matrix.num_tokens()
            )));
        }
        match token_mrd(&normalized_profile(matrix, t, normalization), threshold) {
            Ok(m) => best = Some(best.map_or(m, |b: usize| b.max(m))),
            Err(Error::UndefinedMrd) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    let mrd = best.ok_or(Error::UndefinedMrd)?;
    Ok(PartMrd {
        mrd,
        num_tokens: tokens.len(),
        undefined_tokens: undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    First,
}

/// Pool the hidden states of `tokens` at `layer` into one vector.
pub fn pool_part(
    trace: &HiddenTrace,
    layer: usize,
    tokens: &[usize],
    pooling: Pooling,
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot pool an empty part".into()));
    }
    if layer >= trace.num_layers() || tokens.iter().any(|&t| t >= trace.num_tokens()) {
        return Err(Error::InvalidArgument(
            "pooling index outside the hidden trace".into(),
        ));
    }
    let d = trace.hidden_dim();
    let vecs = tokens.iter().map(|&t| trace.vector(layer, t));
    Ok(match pooling {
        Pooling::First => trace
            .vector(layer, tokens[0])
            .iter()
            .map(|&v| f64::from(v))
            .collect(),
        Pooling::Mean => {
            let mut acc = vec![0.0; d];
            for v in vecs {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += f64::from(*x);
                }
            }
            acc.iter().map(|a| a / tokens.len() as f64).collect()
        }
        Pooling::Max => {
            let mut acc = vec![f64::NEG_INFINITY; d];
            for v in vecs {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a = a.max(f64::from(*x));
                }
            }
            acc
        }
    })
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

/// Cross-lingual similarity ratio at one layer.
///
/// `english[k]` and `foreign[k]` are the vectors of the k-th parallel
/// sample. The result is the mean paired similarity over the mean
/// similarity between distinct foreign samples, computed in closed form as
/// `(K - 1) * sum_k sim(e_k, x_k) / (2 * sum_{i<j} sim(x_i, x_j))`.
/// Zero-norm vectors drop out of every pair they are part of and the means
/// are taken over the remaining pairs.
pub fn similarity(english: &[Vec<f64>], foreign: &[Vec<f64>]) -> Result<f64> {
    if english.len() != foreign.len() {
        return Err(Error::InvalidArgument(format!(
            "{} English vectors against {} foreign vectors",
            english.len(),
            foreign.len()
        )));
    }
    let k = english.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity needs at least two samples, got {k}"
        )));
    }
    let mut cross = 0.0;
    let mut n_cross = 0usize;
    for (e, x) in english.iter().zip(foreign) {
        if let Some(c) = cosine(e, x) {
            cross += c;
            n_cross += 1;
        }
    }
    let mut pair = 0.0;
    let mut n_pair = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            if let Some(c) = cosine(&foreign[i], &foreign[j]) {
                pair += c;
                n_pair += 1;
            }
        }
    }
    let dropped = english.iter().chain(foreign).filter(|v| is_zero(v)).count();
    if dropped > 0 {
        warn!("{dropped} zero-norm vectors excluded from the similarity");
    }
    if n_cross == 0 || n_pair == 0 {
        return Err(Error::Degenerate("no usable vector pairs".into()));
    }
    if pair == 0.0 {
        return Err(Error::Degenerate(
            "foreign vectors are mutually orthogonal".into(),
        ));
    }
    if dropped == 0 {
        Ok((k as f64 - 1.0) * cross / (2.0 * pair))
    } else {
        Ok((cross / n_cross as f64) / (pair / n_pair as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Share of the series treated as "late" layers.
    pub tail_fraction: f64,
    /// Plateau band as a share of the series range.
    pub plateau_band: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            tail_fraction: 0.2,
            plateau_band: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    /// Index of the first maximum over `len - 1`.
    pub peak_rel_depth: f64,
    pub peak_value: f64,
    /// Maximum over the tail minus the final value, floored at 0.
    pub late_decline: f64,
    /// Relative depth from which the series stays within the band around
    /// its final value; `None` if only the final point qualifies.
    pub plateau_start_rel_depth: Option<f64>,
}

pub fn curve_stats(series: &[f64], config: CurveConfig) -> Result<CurveStats> {
    let len = series.len();
    if len < 5 {
        return Err(Error::InvalidArgument(format!(
            "curve of {len} points is too short"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("curve has non-finite values".into()));
    }
    let mut peak = 0;
    for (i, v) in series.iter().enumerate() {
        if *v > series[peak] {
            peak = i;
        }
    }
    let last = series[len - 1];
    let tail = ((config.tail_fraction * len as f64).ceil() as usize).clamp(1, len);
    let tail_max = series[len - tail..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let band = config.plateau_band * (series[peak] - min);
    let mut start = len - 1;
    while start > 0 && (series[start - 1] - last).abs() <= band {
        start -= 1;
    }
    Ok(CurveStats {
        peak_rel_depth: peak as f64 / (len - 1) as f64,
        peak_value: series[peak],
        late_decline: (tail_max - last).max(0.0),
        plateau_start_rel_depth: (start < len - 1).then(|| start as f64 / (len - 1) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RelevanceTarget;
    use proptest::prelude::*;

    #[test]
    fn mrd_examples() {
        assert_eq!(token_mrd(&[1.0; 32], 0.95).unwrap(), 31);
        let mut one = vec![0.0; 12];
        one[0] = 2.0;
        assert_eq!(token_mrd(&one, 0.95).unwrap(), 1);
        assert_eq!(token_mrd(&[0.0, 0.0, 5.0], 0.95).unwrap(), 3);
        assert_eq!(token_mrd(&[-3.0, 1.0], 0.7).unwrap(), 1);
        assert!(matches!(
            token_mrd(&[0.0; 4], 0.95),
            Err(Error::UndefinedMrd)
        ));
        assert!(token_mrd(&[1.0], 0.0).is_err());
        assert_eq!(token_mrd(&[1.0, 1.0, 1.0], 1.0).unwrap(), 3);
    }

    #[test]
    fn part_mrd_is_max_and_skips_zero_tokens() {
        let m = RelevanceMatrix::from_rows(
            &[vec![1.0, 0.0, 0.1], vec![0.0, 0.0, 1.0]],
            RelevanceTarget::FirstAnswerToken,
        )
        .unwrap();
        let p = part_mrd(&m, &[0, 1, 2], 0.95, Normalization::Abs).unwrap();
        assert_eq!((p.mrd, p.undefined_tokens), (2, 1));
        assert!(matches!(
            part_mrd(&m, &[1], 0.95, Normalization::Abs),
            Err(Error::UndefinedMrd)
        ));
        assert!(part_mrd(&m, &[], 0.95, Normalization::Abs).is_err());
    }

    #[test]
    fn per_layer_normalization() {
        // Layer 2 is ten times louder overall, but token 0 has half of layer 1.
        let m = RelevanceMatrix::from_rows(
            &[vec![1.0, 1.0], vec![1.0, 19.0]],
            RelevanceTarget::FirstAnswerToken,
        )
        .unwrap();
        assert_eq!(
            normalized_profile(&m, 0, Normalization::PerLayer),
            vec![0.5, 0.05]
        );
        assert_eq!(
            token_mrd(&normalized_profile(&m, 0, Normalization::PerLayer), 0.9).unwrap(),
            1
        );
        assert_eq!(
            token_mrd(&normalized_profile(&m, 0, Normalization::Abs), 0.9).unwrap(),
            2
        );
    }

    #[test]
    fn pooling() {
        let h = HiddenTrace::new(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            pool_part(&h, 1, &[0, 1], Pooling::Mean).unwrap(),
            vec![2.0, 1.0]
        );
        assert_eq!(
            pool_part(&h, 1, &[0, 1], Pooling::Max).unwrap(),
            vec![3.0, 4.0]
        );
        assert_eq!(
            pool_part(&h, 1, &[1, 0], Pooling::First).unwrap(),
            vec![3.0, 4.0]
        );
        assert!(pool_part(&h, 2, &[0], Pooling::Mean).is_err());
    }

    #[test]
    fn similarity_cases() {
        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        assert!((similarity(&same, &same).unwrap() - 1.0).abs() < 1e-12);
        let xs = vec![vec![0.0, 1.0], vec![0.0, 2.0]];
        let es = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(similarity(&es, &xs).unwrap(), 0.0);
        let x3 = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((similarity(&x3, &x3).unwrap() - 3.0).abs() < 1e-12);
        assert!(similarity(&xs[..1], &xs[..1]).is_err());
        assert!(similarity(&xs, &x3).is_err());
        let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            similarity(&orth, &orth),
            Err(Error::Degenerate(_))
        ));
        // A zero vector drops out of its pairs only.
        let mut with_zero = same.clone();
        with_zero[1] = vec![0.0; 3];
        assert!((similarity(&same, &with_zero).unwrap() - 1.0).abs() < 1e-12);
    }

    fn arc(len: usize, peak: usize) -> Vec<f64> {
        (0..len)
            .map(|i| 1.0 - (i as f64 - peak as f64).abs() / len as f64)
            .collect()
    }

    #[test]
    fn curve_examples() {
        let s = curve_stats(&arc(33, 11), CurveConfig::default()).unwrap();
        assert!((s.peak_rel_depth - 11.0 / 32.0).abs() < 1e-12);
        assert!(s.late_decline > 0.0);
        let mono: Vec<f64> = (0..10).map(f64::from).collect();
        let m = curve_stats(&mono, CurveConfig::default()).unwrap();
        assert_eq!(
            (m.late_decline, m.peak_rel_depth, m.plateau_start_rel_depth),
            (0.0, 1.0, None)
        );
        let flat = curve_stats(&[2.0; 6], CurveConfig::default()).unwrap();
        assert_eq!(
            (flat.peak_rel_depth, flat.plateau_start_rel_depth),
            (0.0, Some(0.0))
        );
        assert!(curve_stats(&[1.0; 4], CurveConfig::default()).is_err());
        let plateau = curve_stats(&[0.0, 1.0, 2.0, 1.0, 1.0, 1.0], CurveConfig::default()).unwrap();
        assert_eq!(plateau.plateau_start_rel_depth, Some(0.6));
    }

    proptest! {
        #[test]
        fn mrd_is_scale_invariant(profile in proptest::collection::vec(-5.0f64..5.0, 1..20), scale in 0.25f64..4.0) {
            prop_assume!(profile.iter().any(|v| v.abs() > 1e-3));
            // Powers of two keep the scaling exact.
            let scale = 2f64.powi(scale.log2().round() as i32);
            let scaled: Vec<f64> = profile.iter().map(|v| v * scale).collect();
            prop_assert_eq!(token_mrd(&profile, 0.95).unwrap(), token_mrd(&scaled, 0.95).unwrap());
        }

        #[test]
        fn mrd_is_monotone_in_threshold(profile in proptest::collection::vec(0.0f64..5.0, 1..20), a in 0.05f64..1.0, b in 0.05f64..1.0) {
            prop_assume!(profile.iter().any(|v| *v > 1e-3));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(token_mrd(&profile, lo).unwrap() <= token_mrd(&profile, hi).unwrap());
        }
    }
}
