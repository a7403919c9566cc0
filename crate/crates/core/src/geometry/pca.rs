//! SVD-based dimensionality estimate and 2-component PCA.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

fn to_nalgebra(m: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().copied())
}

/// Singular values of a matrix, descending.
fn singular_values(m: &ArrayView2<f64>) -> Result<Vec<f64>> {
    let svd = to_nalgebra(m).svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv)
}

/// Smallest number of components whose cumulative squared singular-value
/// mass reaches the threshold fraction of the total.
pub fn cevr_dimensionality(m: &ArrayView2<f64>, threshold: f64) -> Result<usize> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::EmptyInput("CEVR of an empty matrix".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let sv = singular_values(m)?;
    let max_sv = sv[0];
    if max_sv == 0.0 {
        return Err(Error::ZeroVector(
            "CEVR undefined for an all-zero matrix".into(),
        ));
    }
    // Rank cutoff in the style of numerical rank estimation.
    let tol = max_sv * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    let squares: Vec<f64> = sv
        .iter()
        .filter(|&&s| s > tol)
        .map(|s| s * s)
        .collect();
    let total: f64 = squares.iter().sum();
    let mut cum = 0.0;
    for (i, s2) in squares.iter().enumerate() {
        cum += s2;
        if cum >= threshold * total {
            return Ok(i + 1);
        }
    }
    Ok(squares.len())
}

/// Top-two principal directions of pooled, mean-centered hidden states.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub layer: usize,
    /// Orthonormal component vectors; `components[1]` is meaningless when
    /// `degenerate_second` is set.
    pub components: [Array1<f64>; 2],
    /// `n x 2` coordinates of the centered rows on the components.
    pub coords: Array2<f64>,
    /// Language label of each row, aligned with `coords`.
    pub labels: Vec<String>,
    /// Squared singular values of the centered matrix for the two
    /// components (the top Gram eigenvalues).
    pub explained: [f64; 2],
    /// Set when the centered data has rank < 2.
    pub degenerate_second: bool,
}

impl PcaProjection {
    /// CSV with columns `language,x,y` for external plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,x,y\n");
        for (i, label) in self.labels.iter().enumerate() {
            s.push_str(&format!(
                "{label},{},{}\n",
                self.coords[(i, 0)],
                self.coords[(i, 1)]
            ));
        }
        s
    }
}

/// Pools all languages at one layer, mean-centers, and projects onto the
/// top two right singular vectors. One basis per layer, shared by every
/// language.
pub fn pca_project(
    by_language: &BTreeMap<String, Array2<f64>>,
    layer: usize,
) -> Result<PcaProjection> {
    let n: usize = by_language.values().map(|m| m.nrows()).sum();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 pooled rows, got {n}"
        )));
    }
    let d = by_language
        .values()
        .next()
        .ok_or_else(|| Error::EmptyInput("no languages".into()))?
        .ncols();
    let mut pooled = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (lang, m) in by_language {
        if m.ncols() != d {
            return Err(Error::Shape(format!(
                "language '{lang}' has {} columns, expected {d}",
                m.ncols()
            )));
        }
        for r in m.rows() {
            pooled.row_mut(row).assign(&r);
            labels.push(lang.clone());
            row += 1;
        }
    }
    let mean = pooled.mean_axis(ndarray::Axis(0)).expect("n >= 3");
    let centered = &pooled - &mean;

    let svd = to_nalgebra(&centered.view()).svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let sv0 = svd.singular_values[order[0]];
    let sv1 = if order.len() > 1 {
        svd.singular_values[order[1]]
    } else {
        0.0
    };
    let tol = sv0 * (n.max(d) as f64) * f64::EPSILON;
    let degenerate_second = sv1 <= tol;

    let component = |rank: usize| -> Array1<f64> {
        if rank >= order.len() {
            return Array1::zeros(d);
        }
        let mut c = Array1::from_iter(v_t.row(order[rank]).iter().copied());
        // Deterministic sign: the largest-magnitude coefficient is positive.
        let lead = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if c[lead] < 0.0 {
            c.mapv_inplace(|x| -x);
        }
        c
    };
    let c0 = component(0);
    let c1 = component(1);
    let mut coords = Array2::<f64>::zeros((n, 2));
    for i in 0..n {
        coords[(i, 0)] = centered.row(i).dot(&c0);
        coords[(i, 1)] = centered.row(i).dot(&c1);
    }
    Ok(PcaProjection {
        layer,
        components: [c0, c1],
        coords,
        labels,
        explained: [sv0 * sv0, sv1 * sv1],
        degenerate_second,
    })
}
