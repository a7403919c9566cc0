//! Neuron-set and activation statistics: correlation ratio, Jaccard
//! overlap, one-way ANOVA, and the Mann-Whitney U test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::detector::DetectionResult;
use crate::error::{Error, Result};
use crate::geometry::{CurveMeta, MetricKind, SimilarityCurve};
use crate::store::NeuronId;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const DEFAULT_ETA_THRESHOLDS: [f64; 2] = [0.1, 0.25];

/// One neuron's activation values with categorical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledActivations {
    values: Vec<f64>,
    labels: Vec<u32>,
}

impl LabeledActivations {
    pub fn new(values: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if values.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} values but {} labels",
                values.len(),
                labels.len()
            )));
        }
        if values.len() < 2 {
            return Err(Error::EmptyInput(
                "labeled activations need at least 2 observations".into(),
            ));
        }
        Ok(LabeledActivations { values, labels })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    fn groups(&self) -> BTreeMap<u32, Vec<f64>> {
        let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (v, l) in self.values.iter().zip(&self.labels) {
            groups.entry(*l).or_default().push(*v);
        }
        groups
    }
}

fn sums_of_squares(groups: &BTreeMap<u32, Vec<f64>>) -> (f64, f64) {
    let n: usize = groups.values().map(Vec::len).sum();
    let grand: f64 = groups.values().flatten().sum::<f64>() / n as f64;
    let mut s_between = 0.0;
    let mut s_within = 0.0;
    for vs in groups.values() {
        let mean: f64 = vs.iter().sum::<f64>() / vs.len() as f64;
        s_between += vs.len() as f64 * (mean - grand).powi(2);
        s_within += vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    (s_between, s_within)
}

/// Correlation ratio eta^2 = S_B / (S_W + S_B); returns 0 when the total
/// variance is zero (a constant neuron is uninformative, not exceptional).
pub fn correlation_ratio(data: &LabeledActivations) -> Result<f64> {
    let groups = data.groups();
    if groups.len() < 2 {
        return Err(Error::Stats(
            "correlation ratio needs at least 2 distinct labels".into(),
        ));
    }
    let (s_between, s_within) = sums_of_squares(&groups);
    let total = s_between + s_within;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(s_between / total)
}

/// |A ∩ B| / |A ∪ B|; errors when both sets are empty.
pub fn jaccard(a: &BTreeSet<NeuronId>, b: &BTreeSet<NeuronId>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::EmptyInput("jaccard of two empty sets".into()));
    }
    let intersection = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    Ok(intersection / union)
}

/// Per-layer Jaccard of two detection results' layer restrictions; layers
/// where both restrictions are empty stay undefined.
pub fn overlap_by_layer(a: &DetectionResult, b: &DetectionResult) -> Result<SimilarityCurve> {
    if a.model_id != b.model_id {
        return Err(Error::InvalidArgument(format!(
            "overlap across different models ('{}' vs '{}')",
            a.model_id, b.model_id
        )));
    }
    if a.top_n_requested != b.top_n_requested {
        return Err(Error::InvalidArgument(
            "overlap requires results with the same top_n".into(),
        ));
    }
    if a.num_layers != b.num_layers {
        return Err(Error::Shape("layer counts differ".into()));
    }
    let mut per_layer_a: BTreeMap<usize, BTreeSet<NeuronId>> = BTreeMap::new();
    let mut per_layer_b: BTreeMap<usize, BTreeSet<NeuronId>> = BTreeMap::new();
    for r in &a.rows {
        per_layer_a.entry(r.neuron.layer).or_default().insert(r.neuron);
    }
    for r in &b.rows {
        per_layer_b.entry(r.neuron.layer).or_default().insert(r.neuron);
    }
    let empty = BTreeSet::new();
    let values = (1..=a.num_layers)
        .map(|layer| {
            let sa = per_layer_a.get(&layer).unwrap_or(&empty);
            let sb = per_layer_b.get(&layer).unwrap_or(&empty);
            if sa.is_empty() && sb.is_empty() {
                None
            } else {
                Some(jaccard(sa, sb).expect("not both empty"))
            }
        })
        .collect();
    Ok(SimilarityCurve::new(
        MetricKind::OverlapJaccard,
        1,
        values,
        CurveMeta::condition("overlap").with_pair(a.language.clone(), b.language.clone()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    FDistribution,
    NormalApprox,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_per_group: Vec<usize>,
    /// Set when a zero-variance degeneracy forced a limit value.
    pub degenerate: bool,
    pub method: PValueMethod,
}

/// One-way ANOVA: F = (S_B / (g-1)) / (S_W / (n-g)) with the p-value from
/// the F distribution. Zero within-variance with nonzero between-variance
/// is flagged and reported as the p -> 0 limit.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<HypothesisResult> {
    if groups.len() < 2 {
        return Err(Error::Stats("ANOVA needs at least 2 groups".into()));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Stats(
            "ANOVA needs at least 2 values per group".into(),
        ));
    }
    let n_per_group: Vec<usize> = groups.iter().map(Vec::len).collect();
    let map: BTreeMap<u32, Vec<f64>> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (i as u32, g.clone()))
        .collect();
    let (s_between, s_within) = sums_of_squares(&map);
    let g = groups.len() as f64;
    let n: f64 = n_per_group.iter().sum::<usize>() as f64;
    if s_within == 0.0 {
        if s_between == 0.0 {
            return Ok(HypothesisResult {
                statistic: 0.0,
                p_value: 1.0,
                n_per_group,
                degenerate: false,
                method: PValueMethod::FDistribution,
            });
        }
        return Ok(HypothesisResult {
            statistic: f64::INFINITY,
            p_value: 0.0,
            n_per_group,
            degenerate: true,
            method: PValueMethod::FDistribution,
        });
    }
    let f_stat = (s_between / (g - 1.0)) / (s_within / (n - g));
    let dist = FisherSnedecor::new(g - 1.0, n - g)
        .map_err(|e| Error::Stats(format!("F distribution: {e}")))?;
    let p = (1.0 - dist.cdf(f_stat)).clamp(0.0, 1.0);
    Ok(HypothesisResult {
        statistic: f_stat,
        p_value: p,
        n_per_group,
        degenerate: false,
        method: PValueMethod::FDistribution,
    })
}

/// Midranks of the pooled sample (average rank for ties), plus tie sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact null distribution of U for (n1, n2) without ties: counts[u] is the
/// number of pooled arrangements with U statistic u, via the classical
/// recurrence N(u | n1, n2) = N(u - n2 | n1 - 1, n2) + N(u | n1, n2 - 1).
fn exact_u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    let max_u = n1 * n2;
    let mut table = vec![vec![vec![-1.0f64; max_u + 1]; n2 + 1]; n1 + 1];
    fn count(table: &mut [Vec<Vec<f64>>], n1: isize, n2: isize, u: isize) -> f64 {
        if u < 0 {
            return 0.0;
        }
        if n1 == 0 || n2 == 0 {
            return if u == 0 { 1.0 } else { 0.0 };
        }
        let cached = table[n1 as usize][n2 as usize][u as usize];
        if cached >= 0.0 {
            return cached;
        }
        let v = count(table, n1 - 1, n2, u - n2) + count(table, n1, n2 - 1, u);
        table[n1 as usize][n2 as usize][u as usize] = v;
        v
    }
    let mut dist = vec![0.0f64; max_u + 1];
    for (u, slot) in dist.iter_mut().enumerate() {
        *slot = count(&mut table, n1 as isize, n2 as isize, u as isize);
    }
    dist
}

/// Mann-Whitney U test. The statistic is U for the first sample (midrank
/// tie handling). Two-sided p-value: exact enumeration of the null
/// distribution when there are no ties and |a|*|b| <= 400, otherwise the
/// normal approximation with tie correction and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<HypothesisResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput(
            "Mann-Whitney needs two non-empty samples".into(),
        ));
    }
    let n1 = a.len();
    let n2 = b.len();
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    if pooled.iter().any(|v| v.is_nan()) {
        return Err(Error::Stats("NaN in Mann-Whitney input".into()));
    }
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let has_ties = ties.iter().any(|&t| t > 1);
    let n = (n1 + n2) as f64;
    let mean_u = (n1 * n2) as f64 / 2.0;

    if !has_ties && n1 * n2 <= 400 {
        let dist = exact_u_distribution(n1, n2);
        let total: f64 = dist.iter().sum();
        let u = u1.round() as usize;
        let cdf_le: f64 = dist[..=u].iter().sum::<f64>() / total;
        let cdf_ge: f64 = dist[u..].iter().sum::<f64>() / total;
        let p = (2.0 * cdf_le.min(cdf_ge)).min(1.0);
        return Ok(HypothesisResult {
            statistic: u1,
            p_value: p,
            n_per_group: vec![n1, n2],
            degenerate: false,
            method: PValueMethod::Exact,
        });
    }

    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var_u = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var_u <= 0.0 {
        // Every pooled value identical: no evidence either way.
        return Ok(HypothesisResult {
            statistic: u1,
            p_value: 1.0,
            n_per_group: vec![n1, n2],
            degenerate: true,
            method: PValueMethod::NormalApprox,
        });
    }
    let diff = u1 - mean_u;
    let corrected = if diff > 0.0 {
        diff - 0.5
    } else if diff < 0.0 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / var_u.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    Ok(HypothesisResult {
        statistic: u1,
        p_value: p,
        n_per_group: vec![n1, n2],
        degenerate: false,
        method: PValueMethod::NormalApprox,
    })
}

/// Fraction of (eta^2, p) entries with eta^2 above each threshold and
/// p < 0.05.
pub fn significant_fraction(
    scores: &[(f64, f64)],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to summarize".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&thr| {
            let hits = scores
                .iter()
                .filter(|(eta, p)| *eta > thr && *p < SIGNIFICANCE_LEVEL)
                .count();
            (thr, hits as f64 / scores.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled(values: Vec<f64>, labels: Vec<u32>) -> LabeledActivations {
        LabeledActivations::new(values, labels).unwrap()
    }

    #[test]
    fn correlation_ratio_worked_example() {
        // groups {1,2} and {3,4}: S_B = 4, S_W = 1, eta^2 = 0.8
        let data = labeled(vec![1.0, 2.0, 3.0, 4.0], vec![0, 0, 1, 1]);
        let eta = correlation_ratio(&data).unwrap();
        assert!((eta - 0.8).abs() < 1e-12);
    }

    #[test]
    fn correlation_ratio_indicator_and_constant() {
        let indicator = labeled(vec![1.0, 1.0, 0.0, 0.0], vec![1, 1, 0, 0]);
        assert!((correlation_ratio(&indicator).unwrap() - 1.0).abs() < 1e-12);
        let constant = labeled(vec![2.0; 6], vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(correlation_ratio(&constant).unwrap(), 0.0);
        let single = labeled(vec![1.0, 2.0], vec![0, 0]);
        assert!(correlation_ratio(&single).is_err());
    }

    #[test]
    fn correlation_ratio_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let n = 30;
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3u32)).collect();
            if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
                continue;
            }
            let eta = correlation_ratio(&labeled(values.clone(), labels.clone())).unwrap();
            // direct S_B / (S_W + S_B)
            let grand: f64 = values.iter().sum::<f64>() / n as f64;
            let mut s_b = 0.0;
            let mut s_w = 0.0;
            for lab in labels.iter().collect::<BTreeSet<_>>() {
                let grp: Vec<f64> = values
                    .iter()
                    .zip(&labels)
                    .filter(|(_, l)| *l == lab)
                    .map(|(v, _)| *v)
                    .collect();
                let m: f64 = grp.iter().sum::<f64>() / grp.len() as f64;
                s_b += grp.len() as f64 * (m - grand).powi(2);
                s_w += grp.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            assert!((eta - s_b / (s_b + s_w)).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_ratio_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<u32> = (0..40).map(|i| (i % 4) as u32).collect();
        let base = correlation_ratio(&labeled(values.clone(), labels.clone())).unwrap();
        let transformed: Vec<f64> = values.iter().map(|v| -3.7 * v + 11.0).collect();
        let got = correlation_ratio(&labeled(transformed, labels)).unwrap();
        assert!((base - got).abs() < 1e-9);
    }

    #[test]
    fn jaccard_cases() {
        let a: BTreeSet<NeuronId> = [NeuronId::new(1, 0), NeuronId::new(1, 1), NeuronId::new(2, 0)]
            .into_iter()
            .collect();
        assert!((jaccard(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let disjoint: BTreeSet<NeuronId> = [NeuronId::new(3, 5)].into_iter().collect();
        assert_eq!(jaccard(&a, &disjoint).unwrap(), 0.0);
        // {a,b,c} vs {b,c,d} -> 2/4
        let b: BTreeSet<NeuronId> = [NeuronId::new(1, 1), NeuronId::new(2, 0), NeuronId::new(2, 9)]
            .into_iter()
            .collect();
        assert!((jaccard(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(jaccard(&BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn jaccard_symmetry_and_equality_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a: BTreeSet<NeuronId> = (0..rng.random_range(1..8))
                .map(|_| NeuronId::new(rng.random_range(1..4), rng.random_range(0..6)))
                .collect();
            let b: BTreeSet<NeuronId> = (0..rng.random_range(1..8))
                .map(|_| NeuronId::new(rng.random_range(1..4), rng.random_range(0..6)))
                .collect();
            let ab = jaccard(&a, &b).unwrap();
            assert!((ab - jaccard(&b, &a).unwrap()).abs() < 1e-12);
            assert_eq!(ab == 1.0, a == b);
        }
    }

    fn toy_detection(language: &str, neurons: &[(usize, usize)]) -> DetectionResult {
        use crate::detector::{DistanceKind, NeuronType};
        use crate::store::{NeuronScoreRow, SpaceTag};
        DetectionResult {
            model_id: "toy".into(),
            language: language.into(),
            neuron_type: NeuronType::Type1,
            target: SpaceTag::Shared {
                en: "en".into(),
                l2: language.into(),
            },
            distance: DistanceKind::Cosine,
            num_layers: 4,
            mlp_dim: 8,
            boundary: 3,
            candidate_layers: (1, 3),
            candidate_count: 24,
            population: 32,
            top_n_requested: neurons.len(),
            truncated: false,
            excluded_samples: 0,
            rows: neurons
                .iter()
                .enumerate()
                .map(|(i, &(layer, index))| NeuronScoreRow {
                    neuron: NeuronId::new(layer, index),
                    score: Some(1.0 - i as f64 * 0.01),
                    rank: i + 1,
                })
                .collect(),
            train_sample_ids: Vec::new(),
            split_seed: None,
        }
    }

    #[test]
    fn overlap_identical_results_is_one_on_defined_layers() {
        let a = toy_detection("ja", &[(1, 0), (1, 3), (3, 2)]);
        let curve = overlap_by_layer(&a, &a).unwrap();
        assert_eq!(curve.metric, MetricKind::OverlapJaccard);
        assert_eq!(curve.layer_value(1), Some(1.0));
        assert!(curve.values[1].is_none(), "layer 2 has no selections");
        assert_eq!(curve.layer_value(3), Some(1.0));
        assert!(curve.values[3].is_none());
    }

    #[test]
    fn overlap_layer_disjoint_selections_score_zero() {
        let a = toy_detection("ja", &[(1, 0), (2, 1), (2, 2)]);
        let b = toy_detection("ko", &[(1, 5), (2, 6), (2, 7)]);
        let curve = overlap_by_layer(&a, &b).unwrap();
        assert_eq!(curve.layer_value(1), Some(0.0));
        assert_eq!(curve.layer_value(2), Some(0.0));
    }

    #[test]
    fn overlap_matches_per_layer_jaccard_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let sample = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
                (0..rng.random_range(1..10))
                    .map(|_| (rng.random_range(1..5), rng.random_range(0..8)))
                    .collect()
            };
            let mut a = toy_detection("ja", &sample(&mut rng));
            let mut b = toy_detection("ko", &sample(&mut rng));
            a.top_n_requested = 10;
            b.top_n_requested = 10;
            let curve = overlap_by_layer(&a, &b).unwrap();
            for layer in 1..=4 {
                let pick = |r: &DetectionResult| -> BTreeSet<NeuronId> {
                    r.rows
                        .iter()
                        .map(|x| x.neuron)
                        .filter(|n| n.layer == layer)
                        .collect()
                };
                let sa = pick(&a);
                let sb = pick(&b);
                let expect = if sa.is_empty() && sb.is_empty() {
                    None
                } else {
                    Some(
                        sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64,
                    )
                };
                assert_eq!(curve.layer_value(layer), expect);
            }
        }
    }

    #[test]
    fn overlap_rejects_mismatched_results() {
        let a = toy_detection("ja", &[(1, 0)]);
        let mut b = toy_detection("ko", &[(1, 0)]);
        b.model_id = "other".into();
        assert!(overlap_by_layer(&a, &b).is_err());
        let mut c = toy_detection("ko", &[(1, 0)]);
        c.top_n_requested = 99;
        assert!(overlap_by_layer(&a, &c).is_err());
    }

    #[test]
    fn anova_identical_groups() {
        let out = anova_oneway(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert!((out.p_value - 1.0).abs() < 1e-12);
        let out = anova_oneway(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(out.statistic, 0.0);
    }

    #[test]
    fn anova_degenerate_zero_within() {
        let out = anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.p_value, 0.0);
        assert!(anova_oneway(&[vec![1.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn anova_matches_textbook_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let groups: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let out = anova_oneway(&groups).unwrap();
            // independent recomputation from first principles
            let all: Vec<f64> = groups.iter().flatten().copied().collect();
            let grand = all.iter().sum::<f64>() / all.len() as f64;
            let ssb: f64 = groups
                .iter()
                .map(|g| {
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    g.len() as f64 * (m - grand).powi(2)
                })
                .sum();
            let ssw: f64 = groups
                .iter()
                .map(|g| {
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                })
                .sum();
            let f = (ssb / 2.0) / (ssw / 15.0);
            assert!((out.statistic - f).abs() < 1e-9);
        }
    }

    #[test]
    fn anova_two_groups_equals_t_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = anova_oneway(&[a.clone(), b.clone()]).unwrap();
        // equal-variance two-sample t statistic
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (ma, mb) = (
            a.iter().sum::<f64>() / na,
            b.iter().sum::<f64>() / nb,
        );
        let sa: f64 = a.iter().map(|v| (v - ma).powi(2)).sum();
        let sb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
        let sp2 = (sa + sb) / (na + nb - 2.0);
        let t = (ma - mb) / (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
        assert!((out.statistic - t * t).abs() < 1e-9);
    }

    #[test]
    fn mann_whitney_complete_separation() {
        let out = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert_eq!(out.method, PValueMethod::Exact);
    }

    #[test]
    fn mann_whitney_identical_multisets() {
        let a = vec![1.0, 5.0, 2.0];
        let out = mann_whitney_u(&a, &a).unwrap();
        assert!((out.statistic - (3.0 * 3.0) / 2.0).abs() < 1e-12);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn u_statistics_sum_to_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n1 = rng.random_range(1..10);
            let n2 = rng.random_range(1..10);
            // mix in ties via rounding
            let a: Vec<f64> = (0..n1)
                .map(|_| (rng.random_range(-2.0..2.0f64) * 4.0).round() / 4.0)
                .collect();
            let b: Vec<f64> = (0..n2)
                .map(|_| (rng.random_range(-2.0..2.0f64) * 4.0).round() / 4.0)
                .collect();
            let ua = mann_whitney_u(&a, &b).unwrap().statistic;
            let ub = mann_whitney_u(&b, &a).unwrap().statistic;
            assert!((ua + ub - (n1 * n2) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn u_matches_exhaustive_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n1 = rng.random_range(1..9);
            let n2 = rng.random_range(1..9);
            let a: Vec<f64> = (0..n1)
                .map(|_| (rng.random_range(-2.0..2.0f64) * 2.0).round() / 2.0)
                .collect();
            let b: Vec<f64> = (0..n2)
                .map(|_| (rng.random_range(-2.0..2.0f64) * 2.0).round() / 2.0)
                .collect();
            let got = mann_whitney_u(&a, &b).unwrap().statistic;
            // U_a counts pairs where a wins, ties worth 1/2
            let mut u = 0.0;
            for x in &a {
                for y in &b {
                    if x > y {
                        u += 1.0;
                    } else if x == y {
                        u += 0.5;
                    }
                }
            }
            assert!((got - u).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_p_matches_permutation_oracle() {
        // full enumeration over label assignments (tie-free inputs)
        fn oracle_p(a: &[f64], b: &[f64]) -> f64 {
            let n1 = a.len();
            let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let n = pooled.len();
            let observed = pair_u(a, b);
            let mut le = 0usize;
            let mut ge = 0usize;
            let mut total = 0usize;
            // iterate over all C(n, n1) index subsets
            let mut subset: Vec<usize> = (0..n1).collect();
            loop {
                let sa: Vec<f64> = subset.iter().map(|&i| pooled[i]).collect();
                let sb: Vec<f64> = (0..n)
                    .filter(|i| !subset.contains(i))
                    .map(|i| pooled[i])
                    .collect();
                let u = pair_u(&sa, &sb);
                if u <= observed {
                    le += 1;
                }
                if u >= observed {
                    ge += 1;
                }
                total += 1;
                // next combination
                let mut i = n1;
                loop {
                    if i == 0 {
                        return (2.0 * (le.min(ge) as f64) / total as f64).min(1.0);
                    }
                    i -= 1;
                    if subset[i] != i + n - n1 {
                        subset[i] += 1;
                        for j in (i + 1)..n1 {
                            subset[j] = subset[j - 1] + 1;
                        }
                        break;
                    }
                }
            }
        }
        fn pair_u(a: &[f64], b: &[f64]) -> f64 {
            let mut u = 0.0;
            for x in a {
                for y in b {
                    if x > y {
                        u += 1.0;
                    } else if x == y {
                        u += 0.5;
                    }
                }
            }
            u
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..8 {
            // distinct values to stay tie-free
            let mut vals: Vec<f64> = Vec::new();
            while vals.len() < 9 {
                let v: f64 = rng.random_range(-5.0..5.0);
                if !vals.iter().any(|x| (x - v).abs() < 1e-9) {
                    vals.push(v);
                }
            }
            let a = vals[..4].to_vec();
            let b = vals[4..].to_vec();
            let got = mann_whitney_u(&a, &b).unwrap();
            assert_eq!(got.method, PValueMethod::Exact);
            let expect = oracle_p(&a, &b);
            assert!(
                (got.p_value - expect).abs() < 1e-9,
                "p {} vs oracle {expect}",
                got.p_value
            );
        }
    }

    #[test]
    fn significant_fraction_counting() {
        let all_hits = vec![(1.0, 0.0); 5];
        let got = significant_fraction(&all_hits, &DEFAULT_ETA_THRESHOLDS).unwrap();
        assert_eq!(got, vec![(0.1, 1.0), (0.25, 1.0)]);
        let none = vec![(0.0, 1.0); 5];
        let got = significant_fraction(&none, &DEFAULT_ETA_THRESHOLDS).unwrap();
        assert_eq!(got, vec![(0.1, 0.0), (0.25, 0.0)]);
        let mixed = vec![(0.3, 0.01), (0.15, 0.01), (0.3, 0.5), (0.05, 0.01)];
        let got = significant_fraction(&mixed, &DEFAULT_ETA_THRESHOLDS).unwrap();
        assert_eq!(got[0], (0.1, 0.5));
        assert_eq!(got[1], (0.25, 0.25));
        assert!(significant_fraction(&[], &DEFAULT_ETA_THRESHOLDS).is_err());
    }
}
