//! Latent-space diagnostics over captured hidden states and activations.
//!
//! All operations are pure functions over f64 matrices (slices loaded from
//! runs are converted once); cosine similarity is the distance everywhere,
//! matching the detection scoring. Curves index layers 1-based and mark
//! undefined entries as `None` rather than forcing a value.

mod pca;
mod probe;

pub use pca::{cevr_dimensionality, pca_project, PcaProjection};
pub use probe::separability_probe;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::CaptureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    HsParallel,
    HsNonparallel,
    ActParallel,
    ActNonparallel,
    CentroidCos,
    MutualKnn,
    CevrDim,
    TrajectoryCos,
    SeparabilityAcc,
    /// Per-layer Jaccard overlap of detected neuron sets.
    OverlapJaccard,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::HsParallel => "hs_parallel",
            MetricKind::HsNonparallel => "hs_nonparallel",
            MetricKind::ActParallel => "act_parallel",
            MetricKind::ActNonparallel => "act_nonparallel",
            MetricKind::CentroidCos => "centroid_cos",
            MetricKind::MutualKnn => "mutual_knn",
            MetricKind::CevrDim => "cevr_dim",
            MetricKind::TrajectoryCos => "trajectory_cos",
            MetricKind::SeparabilityAcc => "separability_acc",
            MetricKind::OverlapJaccard => "overlap_jaccard",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Descriptive tags carried by every curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CurveMeta {
    pub language_pair: Option<(String, String)>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    /// Experimental condition ("none", "type1", "baseline", ...).
    pub condition: String,
}

impl CurveMeta {
    pub fn condition(tag: impl Into<String>) -> Self {
        CurveMeta {
            condition: tag.into(),
            ..CurveMeta::default()
        }
    }

    pub fn with_pair(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.language_pair = Some((a.into(), b.into()));
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_threshold(mut self, t: f64) -> Self {
        self.threshold = Some(t);
        self
    }
}

/// Per-layer sequence of one scalar diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub metric: MetricKind,
    /// Layer index of `values[0]` (1 for most metrics, 2 for trajectories).
    pub start_layer: usize,
    pub values: Vec<Option<f64>>,
    pub meta: CurveMeta,
}

impl SimilarityCurve {
    pub fn new(metric: MetricKind, start_layer: usize, values: Vec<Option<f64>>, meta: CurveMeta) -> Self {
        SimilarityCurve {
            metric,
            start_layer,
            values,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_value(&self, layer: usize) -> Option<f64> {
        layer
            .checked_sub(self.start_layer)
            .and_then(|i| self.values.get(i).copied())
            .flatten()
    }

    /// Mean over defined entries; `None` when every entry is undefined.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.values.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    /// Elementwise `other - self` (used for intervention deltas); undefined
    /// entries stay undefined.
    pub fn delta_to(&self, other: &SimilarityCurve) -> Result<SimilarityCurve> {
        if self.values.len() != other.values.len() || self.start_layer != other.start_layer {
            return Err(Error::Shape(
                "delta requires curves over the same layers".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => Some(y - x),
                _ => None,
            })
            .collect();
        Ok(SimilarityCurve {
            metric: self.metric,
            start_layer: self.start_layer,
            values,
            meta: CurveMeta {
                condition: format!("delta:{}", other.meta.condition),
                ..self.meta.clone()
            },
        })
    }

    /// CSV with columns `layer,value,metric,language_pair,k,threshold,condition`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,value,metric,language_pair,k,threshold,condition\n");
        let pair = self
            .meta
            .language_pair
            .as_ref()
            .map(|(a, b)| format!("{a}-{b}"))
            .unwrap_or_default();
        let k = self.meta.k.map(|k| k.to_string()).unwrap_or_default();
        let thr = self
            .meta
            .threshold
            .map(|t| format!("{t}"))
            .unwrap_or_default();
        for (i, v) in self.values.iter().enumerate() {
            let layer = self.start_layer + i;
            let value = v.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!(
                "{layer},{value},{},{pair},{k},{thr},{}\n",
                self.metric, self.meta.condition
            ));
        }
        s
    }
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine of a zero vector".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Arithmetic mean of the rows.
pub fn centroid(rows: &ArrayView2<f64>) -> Result<Array1<f64>> {
    if rows.nrows() == 0 {
        return Err(Error::EmptyInput("centroid of zero rows".into()));
    }
    Ok(rows.mean_axis(Axis(0)).expect("nonzero rows"))
}

/// Shared-space centroid from aligned parallel rows: the mean over pairs of
/// the elementwise pair means.
pub fn centroid_shared(en: &ArrayView2<f64>, l2: &ArrayView2<f64>) -> Result<Array1<f64>> {
    if en.dim() != l2.dim() {
        return Err(Error::Shape(format!(
            "centroid_shared over shapes {:?} and {:?}",
            en.dim(),
            l2.dim()
        )));
    }
    if en.nrows() == 0 {
        return Err(Error::EmptyInput("centroid_shared of zero pairs".into()));
    }
    let mid = (en.to_owned() + l2) * 0.5;
    Ok(mid.mean_axis(Axis(0)).expect("nonzero rows"))
}

/// Mean cosine over aligned row pairs; zero-vector pairs are skipped and
/// counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCosine {
    pub mean: Option<f64>,
    pub used: usize,
    pub skipped: usize,
}

pub fn mean_pair_cosine(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<PairCosine> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "paired cosine over shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyInput("paired cosine over zero pairs".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (ra, rb) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        match cosine(&ra, &rb) {
            Ok(c) => {
                sum += c;
                used += 1;
            }
            Err(Error::ZeroVector(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(PairCosine {
        mean: (used > 0).then(|| sum / used as f64),
        used,
        skipped,
    })
}

/// Aligned per-layer captures for two sides of a pairing; `sides[l-1]` holds
/// layer `l`, rows aligned across the two sides.
#[derive(Debug, Clone)]
pub struct PairedCaptures {
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
}

impl PairedCaptures {
    pub fn num_layers(&self) -> usize {
        self.a.len()
    }
}

/// Per-layer mean cosine curves for the parallel and the non-parallel
/// condition of one capture kind (hidden states or activations).
pub fn similarity_gap_curve(
    parallel: &PairedCaptures,
    nonparallel: &PairedCaptures,
    kind: CaptureKind,
    meta: CurveMeta,
) -> Result<(SimilarityCurve, SimilarityCurve)> {
    let (m_par, m_non) = match kind {
        CaptureKind::HiddenState => (MetricKind::HsParallel, MetricKind::HsNonparallel),
        CaptureKind::MlpActivation => (MetricKind::ActParallel, MetricKind::ActNonparallel),
        other => {
            return Err(Error::InvalidArgument(format!(
                "similarity gap is defined for hidden states and activations, not {other}"
            )))
        }
    };
    if parallel.num_layers() != nonparallel.num_layers() {
        return Err(Error::Shape(
            "parallel and non-parallel captures cover different layer counts".into(),
        ));
    }
    if parallel.num_layers() == 0 {
        return Err(Error::EmptyInput("no layers to measure".into()));
    }
    let mut par_values = Vec::with_capacity(parallel.num_layers());
    let mut non_values = Vec::with_capacity(parallel.num_layers());
    for l in 0..parallel.num_layers() {
        par_values.push(
            mean_pair_cosine(&parallel.a[l].view(), &parallel.b[l].view())?.mean,
        );
        non_values.push(
            mean_pair_cosine(&nonparallel.a[l].view(), &nonparallel.b[l].view())?.mean,
        );
    }
    Ok((
        SimilarityCurve::new(m_par, 1, par_values, meta.clone()),
        SimilarityCurve::new(m_non, 1, non_values, meta),
    ))
}

/// Indices of the k nearest neighbors of row `i` within the matrix,
/// excluding `i` itself, by cosine distance with ties broken by ascending
/// index.
fn knn_indices(rows: &ArrayView2<f64>, i: usize, k: usize) -> Result<Vec<usize>> {
    let target = rows.row(i);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(rows.nrows() - 1);
    for j in 0..rows.nrows() {
        if j == i {
            continue;
        }
        let c = cosine(&target, &rows.row(j))
            .map_err(|_| Error::ZeroVector(format!("zero vector at row {j}")))?;
        dists.push((1.0 - c, j));
    }
    dists.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    Ok(dists.into_iter().take(k).map(|(_, j)| j).collect())
}

/// Mutual k-NN alignment between two aligned point clouds: the mean over
/// rows of |S(phi_i) ∩ S(psi_i)| / k, with neighbor sets computed within
/// each cloud independently.
pub fn mutual_knn_alignment(
    phi: &ArrayView2<f64>,
    psi: &ArrayView2<f64>,
    k: usize,
) -> Result<f64> {
    let b = phi.nrows();
    if psi.nrows() != b {
        return Err(Error::Shape(format!(
            "mutual k-NN over {} and {} rows",
            b,
            psi.nrows()
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(
            "mutual k-NN needs at least 2 rows".into(),
        ));
    }
    if k == 0 || k > b - 1 {
        return Err(Error::InvalidArgument(format!(
            "k must be in [1, {}], got {k}",
            b - 1
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        let sa: std::collections::BTreeSet<usize> = knn_indices(phi, i, k)?.into_iter().collect();
        let sb: std::collections::BTreeSet<usize> = knn_indices(psi, i, k)?.into_iter().collect();
        total += sa.intersection(&sb).count() as f64 / k as f64;
    }
    Ok(total / b as f64)
}

/// Per-layer mutual k-NN curve over aligned cloud sequences.
pub fn mutual_knn_curve(
    phi_layers: &[Array2<f64>],
    psi_layers: &[Array2<f64>],
    k: usize,
    meta: CurveMeta,
) -> Result<SimilarityCurve> {
    if phi_layers.len() != psi_layers.len() {
        return Err(Error::Shape("layer counts differ".into()));
    }
    let mut values = Vec::with_capacity(phi_layers.len());
    for (a, b) in phi_layers.iter().zip(psi_layers) {
        values.push(Some(mutual_knn_alignment(&a.view(), &b.view(), k)?));
    }
    Ok(SimilarityCurve::new(
        MetricKind::MutualKnn,
        1,
        values,
        meta.with_k(k),
    ))
}

/// Per-layer cosine between the two languages' centroids.
pub fn centroid_distance_curve(
    a_layers: &[Array2<f64>],
    b_layers: &[Array2<f64>],
    meta: CurveMeta,
) -> Result<SimilarityCurve> {
    if a_layers.len() != b_layers.len() {
        return Err(Error::Shape("layer counts differ".into()));
    }
    if a_layers.is_empty() {
        return Err(Error::EmptyInput("no layers to measure".into()));
    }
    let mut values = Vec::with_capacity(a_layers.len());
    for (a, b) in a_layers.iter().zip(b_layers) {
        let ca = centroid(&a.view())?;
        let cb = centroid(&b.view())?;
        values.push(Some(cosine(&ca.view(), &cb.view())?));
    }
    Ok(SimilarityCurve::new(MetricKind::CentroidCos, 1, values, meta))
}

/// [`centroid_distance_curve`] straight off a capture run's hidden states.
pub fn centroid_distance_curve_from_run(
    run: &crate::store::RunHandle,
    lang_a: &str,
    lang_b: &str,
) -> Result<SimilarityCurve> {
    let layers = run.manifest().num_layers;
    let load = |lang: &str| -> Result<Vec<Array2<f64>>> {
        (1..=layers)
            .map(|l| run.load_slice_f64(l, CaptureKind::HiddenState, Some(lang)))
            .collect()
    };
    centroid_distance_curve(
        &load(lang_a)?,
        &load(lang_b)?,
        CurveMeta::condition("none").with_pair(lang_a, lang_b),
    )
}

/// How linearly a centroid moves from layer 1 to layer m: per step, the
/// cosine between the step vector and the straight path `C^m - C^1`.
/// Zero steps (or a zero path) yield undefined entries.
pub fn trajectory_linearity(
    centroids: &[Array1<f64>],
    m: usize,
    meta: CurveMeta,
) -> Result<SimilarityCurve> {
    if m < 2 || m > centroids.len() {
        return Err(Error::InvalidArgument(format!(
            "m must be in [2, {}], got {m}",
            centroids.len()
        )));
    }
    let path = &centroids[m - 1] - &centroids[0];
    let path_zero = path.dot(&path) == 0.0;
    let mut values = Vec::with_capacity(m - 1);
    for l in 2..=m {
        let step = &centroids[l - 1] - &centroids[l - 2];
        if path_zero || step.dot(&step) == 0.0 {
            values.push(None);
        } else {
            values.push(Some(cosine(&step.view(), &path.view())?));
        }
    }
    Ok(SimilarityCurve::new(
        MetricKind::TrajectoryCos,
        2,
        values,
        meta,
    ))
}

/// Row-wise concatenation of aligned pair sides, the feature layout used by
/// the separability probe.
pub fn concat_pairs(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "cannot concatenate {} with {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[(i, j)] = a[(i, j)];
        }
        for j in 0..b.ncols() {
            out[(i, a.ncols() + j)] = b[(i, j)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn centroid_trivial_cases() {
        let m = array![[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(centroid(&m.view()).unwrap(), array![0.0, 0.0]);
        let single = array![[3.0, 4.0]];
        assert_eq!(centroid(&single.view()).unwrap(), array![3.0, 4.0]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(centroid(&empty.view()).is_err());
    }

    #[test]
    fn centroid_matches_naive_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_matrix(&mut rng, 100, 7);
        let c = centroid(&m.view()).unwrap();
        for j in 0..7 {
            let naive: f64 = (0..100).map(|i| m[(i, j)]).sum::<f64>() / 100.0;
            assert!((c[j] - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn centroid_shared_equals_half_sum_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let en = random_matrix(&mut rng, 40, 5);
        let l2 = random_matrix(&mut rng, 40, 5);
        let shared = centroid_shared(&en.view(), &l2.view()).unwrap();
        let ce = centroid(&en.view()).unwrap();
        let cl = centroid(&l2.view()).unwrap();
        for j in 0..5 {
            assert!((shared[j] - 0.5 * (ce[j] + cl[j])).abs() < 1e-9);
        }
        // en == l2 degenerates to the plain centroid
        let same = centroid_shared(&en.view(), &en.view()).unwrap();
        for j in 0..5 {
            assert!((same[j] - ce[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_shared_matches_pairwise_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let en = random_matrix(&mut rng, 13, 4);
        let l2 = random_matrix(&mut rng, 13, 4);
        let shared = centroid_shared(&en.view(), &l2.view()).unwrap();
        // direct evaluation: mean over pairs of elementwise pair means
        for j in 0..4 {
            let naive: f64 = (0..13)
                .map(|i| 0.5 * (en[(i, j)] + l2[(i, j)]))
                .sum::<f64>()
                / 13.0;
            assert!((shared[j] - naive).abs() < 1e-9);
        }
        let bad = random_matrix(&mut rng, 12, 4);
        assert!(centroid_shared(&en.view(), &bad.view()).is_err());
    }

    #[test]
    fn pair_cosine_trivial_and_oracle() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let same = mean_pair_cosine(&a.view(), &a.view()).unwrap();
        assert!((same.mean.unwrap() - 1.0).abs() < 1e-12);
        let orth = array![[0.0, 1.0], [2.0, 0.0]];
        let zero = mean_pair_cosine(&a.view(), &orth.view()).unwrap();
        assert!(zero.mean.unwrap().abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 20, 6);
        let y = random_matrix(&mut rng, 20, 6);
        let got = mean_pair_cosine(&x.view(), &y.view()).unwrap().mean.unwrap();
        let mut naive = 0.0;
        for i in 0..20 {
            let xi = x.row(i);
            let yi = y.row(i);
            naive += xi.dot(&yi) / (xi.dot(&xi).sqrt() * yi.dot(&yi).sqrt());
        }
        naive /= 20.0;
        assert!((got - naive).abs() < 1e-9);
    }

    #[test]
    fn pair_cosine_skips_zero_vectors() {
        let a = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let out = mean_pair_cosine(&a.view(), &b.view()).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.used, 2);
        assert!((out.mean.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mutual_knn_identical_clouds_and_full_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = random_matrix(&mut rng, 9, 5);
        assert!((mutual_knn_alignment(&phi.view(), &phi.view(), 3).unwrap() - 1.0).abs() < 1e-12);
        let psi = random_matrix(&mut rng, 9, 5);
        assert!(
            (mutual_knn_alignment(&phi.view(), &psi.view(), 8).unwrap() - 1.0).abs() < 1e-12,
            "k = b-1 makes both neighbor sets everything"
        );
        assert!(mutual_knn_alignment(&phi.view(), &psi.view(), 0).is_err());
        assert!(mutual_knn_alignment(&phi.view(), &psi.view(), 9).is_err());
    }

    #[test]
    fn mutual_knn_matches_exhaustive_oracle() {
        // O(b^2) oracle with explicit neighbor sets
        fn oracle(phi: &Array2<f64>, psi: &Array2<f64>, k: usize) -> f64 {
            let b = phi.nrows();
            let neighbor_sets = |m: &Array2<f64>, i: usize| -> Vec<usize> {
                let mut all: Vec<(f64, usize)> = (0..b)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let a = m.row(i);
                        let c = m.row(j);
                        let cos = a.dot(&c) / (a.dot(&a).sqrt() * c.dot(&c).sqrt());
                        (1.0 - cos, j)
                    })
                    .collect();
                all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            };
            let mut total = 0.0;
            for i in 0..b {
                let sa: std::collections::BTreeSet<_> =
                    neighbor_sets(phi, i).into_iter().collect();
                let sb: std::collections::BTreeSet<_> =
                    neighbor_sets(psi, i).into_iter().collect();
                total += sa.intersection(&sb).count() as f64 / k as f64;
            }
            total / b as f64
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let phi = random_matrix(&mut rng, 6, 4);
            let psi = random_matrix(&mut rng, 6, 4);
            let got = mutual_knn_alignment(&phi.view(), &psi.view(), 2).unwrap();
            assert!((got - oracle(&phi, &psi, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_knn_symmetry_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = random_matrix(&mut rng, 8, 3);
        let psi = random_matrix(&mut rng, 8, 3);
        let ab = mutual_knn_alignment(&phi.view(), &psi.view(), 3).unwrap();
        let ba = mutual_knn_alignment(&psi.view(), &phi.view(), 3).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // common row permutation
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let permute = |m: &Array2<f64>| {
            let mut out = Array2::zeros(m.dim());
            for (new_i, &old_i) in perm.iter().enumerate() {
                out.row_mut(new_i).assign(&m.row(old_i));
            }
            out
        };
        let ab_perm =
            mutual_knn_alignment(&permute(&phi).view(), &permute(&psi).view(), 3).unwrap();
        assert!((ab - ab_perm).abs() < 1e-12);
    }

    #[test]
    fn knn_ties_break_by_ascending_index() {
        // rows 1 and 2 are identical, both at distance 0 from row 0's twin;
        // the neighbor set must prefer the lower index deterministically
        let phi = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let got = knn_indices(&phi.view(), 0, 1).unwrap();
        assert_eq!(got, vec![1]);
        let got = knn_indices(&phi.view(), 3, 2).unwrap();
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn centroid_distance_zero_centroid_errors() {
        let a = vec![array![[1.0, -1.0], [-1.0, 1.0]]]; // centroid is zero
        let b = vec![array![[1.0, 0.0], [1.0, 0.0]]];
        assert!(centroid_distance_curve(&a, &b, CurveMeta::default()).is_err());
    }

    #[test]
    fn cosine_metrics_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let base = mean_pair_cosine(&a.view(), &b.view()).unwrap().mean.unwrap();
        let scaled = a.mapv(|x| x * 3.5);
        let got = mean_pair_cosine(&scaled.view(), &b.view()).unwrap().mean.unwrap();
        assert!((base - got).abs() < 1e-12);
    }

    #[test]
    fn centroid_distance_trivial_cases() {
        let a = vec![array![[1.0, 0.0], [1.0, 0.0]]];
        let b = vec![array![[0.0, 1.0], [0.0, 1.0]]];
        let same = centroid_distance_curve(&a, &a, CurveMeta::default()).unwrap();
        assert!((same.values[0].unwrap() - 1.0).abs() < 1e-12);
        let orth = centroid_distance_curve(&a, &b, CurveMeta::default()).unwrap();
        assert!(orth.values[0].unwrap().abs() < 1e-12);
    }

    #[test]
    fn centroid_distance_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(&mut rng, 10, 4)).collect();
        let b: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(&mut rng, 10, 4)).collect();
        let curve = centroid_distance_curve(&a, &b, CurveMeta::default()).unwrap();
        for l in 0..3 {
            let ca = centroid(&a[l].view()).unwrap();
            let cb = centroid(&b[l].view()).unwrap();
            let expect = cosine(&ca.view(), &cb.view()).unwrap();
            assert!((curve.values[l].unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_collinear_is_one_and_reversal_is_minus_one() {
        let dir = array![1.0, 2.0];
        let centroids: Vec<Array1<f64>> =
            (0..5).map(|i| &dir * (i as f64)).collect();
        let curve = trajectory_linearity(&centroids, 5, CurveMeta::default()).unwrap();
        assert_eq!(curve.start_layer, 2);
        assert_eq!(curve.len(), 4);
        for v in &curve.values {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        // one step exactly reversing the path direction
        let zig = vec![
            array![0.0, 0.0],
            array![2.0, 0.0],
            array![1.0, 0.0],
        ];
        let curve = trajectory_linearity(&zig, 3, CurveMeta::default()).unwrap();
        assert!((curve.values[1].unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_zero_step_is_undefined_not_zero() {
        let centroids = vec![array![0.0, 0.0], array![0.0, 0.0], array![1.0, 0.0]];
        let curve = trajectory_linearity(&centroids, 3, CurveMeta::default()).unwrap();
        assert!(curve.values[0].is_none());
        assert!(curve.values[1].is_some());
    }

    #[test]
    fn trajectory_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centroids: Vec<Array1<f64>> = (0..6)
            .map(|_| Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let m = 5;
        let curve = trajectory_linearity(&centroids, m, CurveMeta::default()).unwrap();
        let path = &centroids[m - 1] - &centroids[0];
        for l in 2..=m {
            let step = &centroids[l - 1] - &centroids[l - 2];
            let expect = step.dot(&path) / (step.dot(&step).sqrt() * path.dot(&path).sqrt());
            assert!((curve.values[l - 2].unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_one_iff_steps_are_positive_multiples() {
        let dir = array![1.0, -1.0, 0.5];
        let positive: Vec<Array1<f64>> = [0.0, 0.5, 0.7, 2.0]
            .iter()
            .map(|&t| &dir * t)
            .collect();
        let curve = trajectory_linearity(&positive, 4, CurveMeta::default()).unwrap();
        assert!(curve.values.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        // a non-collinear bend cannot be all ones
        let bent = vec![
            array![0.0, 0.0, 0.0],
            array![1.0, 0.0, 0.0],
            array![1.0, 1.0, 0.0],
        ];
        let curve = trajectory_linearity(&bent, 3, CurveMeta::default()).unwrap();
        assert!(curve.values.iter().any(|v| v.unwrap() < 1.0 - 1e-9));
    }

    #[test]
    fn curve_csv_has_one_row_per_layer() {
        let curve = SimilarityCurve::new(
            MetricKind::MutualKnn,
            1,
            vec![Some(0.5), None, Some(1.0)],
            CurveMeta::condition("none").with_pair("en", "ja").with_k(5),
        );
        let csv = curve.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,0.5,mutual_knn,en-ja,5,"));
        assert!(lines[2].starts_with("2,,"), "undefined rows stay empty");
    }
}
