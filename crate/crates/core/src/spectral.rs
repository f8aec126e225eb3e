//! Dense eigendecomposition at desk scale, frequency components of features,
//! and numeric checks tying the filter path to the spectral path.
//!
//! Everything here is a verification instrument: production training applies
//! filters through sparse products and never decomposes the Laplacian. The
//! decomposition is capped (default 4096 nodes) so a misrouted large graph
//! fails loudly instead of allocating an n x n dense matrix.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::filter::{apply_filter, GraphFilter};
use crate::graph::{FeatureMatrix, GraphError, Laplacian};

/// Largest node count accepted by [`eigendecompose`].
pub const DESK_SCALE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("graph with {0} nodes exceeds the desk-scale eigendecomposition cap")]
    TooLarge(usize),
    #[error("frequency index {k} out of range 1..={n}")]
    IndexOutOfRange { k: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights increase with frequency at index {0} (strict mode)")]
    NonMonotoneWeights(usize),
    #[error("negative weight at index {0}")]
    NegativeWeight(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Eigenpairs of a symmetric normalized Laplacian, eigenvalues ascending,
/// eigenvectors orthonormal columns with the first nonzero entry positive.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: Vec<f64>,
    eigenvectors: Array2<f64>,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Column k holds the eigenvector for the k-th smallest eigenvalue.
    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// Eigenvector for 1-based frequency index k.
    pub fn eigenvector(&self, k: usize) -> Result<Array1<f64>, SpectralError> {
        self.check_index(k)?;
        Ok(self.eigenvectors.column(k - 1).to_owned())
    }

    fn check_index(&self, k: usize) -> Result<(), SpectralError> {
        if k == 0 || k > self.n() {
            return Err(SpectralError::IndexOutOfRange { k, n: self.n() });
        }
        Ok(())
    }
}

/// Rank-1 projection of a feature matrix onto one eigenvector.
#[derive(Debug, Clone)]
pub struct FrequencyComponent {
    /// 1-based frequency index
    pub index: usize,
    pub component: FeatureMatrix,
}

pub fn eigendecompose(lap: &Laplacian) -> Result<SpectralDecomposition, SpectralError> {
    eigendecompose_with_cap(lap, DESK_SCALE_CAP)
}

/// Full dense symmetric eigendecomposition (tridiagonalization under the
/// hood). Fails with `TooLarge` past the cap so callers fall back to the
/// filter path.
pub fn eigendecompose_with_cap(
    lap: &Laplacian,
    cap: usize,
) -> Result<SpectralDecomposition, SpectralError> {
    let n = lap.node_count();
    if n > cap {
        return Err(SpectralError::TooLarge(n));
    }
    let dense = lap.to_dense();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| dense[[i, j]]);
    let eigen = m.symmetric_eigen();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
    let mut eigenvectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let v = eigen.eigenvectors.column(src);
        // canonical sign: first entry of meaningful magnitude is positive
        let sign = match v.iter().find(|x| x.abs() > 1e-12) {
            Some(x) if *x < 0.0 => -1.0,
            _ => 1.0,
        };
        for i in 0..n {
            eigenvectors[[i, col]] = sign * v[i];
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// u_k u_k^T x for 1-based index k.
pub fn frequency_component(
    x: &FeatureMatrix,
    k: usize,
    dec: &SpectralDecomposition,
) -> Result<FrequencyComponent, SpectralError> {
    dec.check_index(k)?;
    check_rows(x, dec.n())?;
    let u = dec.eigenvectors.column(k - 1);
    let coeff = u.dot(x); // u_k^T x, length d
    let mut component = Array2::zeros((dec.n(), x.ncols()));
    for i in 0..dec.n() {
        for j in 0..x.ncols() {
            component[[i, j]] = u[i] * coeff[j];
        }
    }
    Ok(FrequencyComponent {
        index: k,
        component,
    })
}

/// ||u_k u_k^T (s_proj - t)||_F^2 for every k. Because the eigenbasis is
/// orthonormal these sum to the plain feature-distillation loss.
pub fn per_frequency_losses(
    s_proj: &FeatureMatrix,
    t: &FeatureMatrix,
    dec: &SpectralDecomposition,
) -> Result<Vec<f64>, SpectralError> {
    check_same_shape(s_proj, t)?;
    check_rows(s_proj, dec.n())?;
    let diff = s_proj - t;
    let projected = dec.eigenvectors.t().dot(&diff); // row k = u_k^T diff
    Ok(projected
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v * v).sum())
        .collect())
}

/// The four consecutive frequency bands S_1..S_4 over 1-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnowledgeGroups {
    n: usize,
}

impl KnowledgeGroups {
    pub fn new(n: usize) -> Self {
        KnowledgeGroups { n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 0-based index ranges for the four groups; empty ranges are possible
    /// for n < 4.
    pub fn ranges(&self) -> [std::ops::Range<usize>; 4] {
        let b1 = self.n / 4;
        let b2 = self.n / 2;
        let b3 = 3 * self.n / 4;
        [0..b1, b1..b2, b2..b3, b3..self.n]
    }

    /// Group (0..4) containing 1-based frequency index k.
    pub fn group_of(&self, k: usize) -> usize {
        let idx = k - 1;
        self.ranges()
            .iter()
            .position(|r| r.contains(&idx))
            .expect("index within n")
    }

    /// Per-frequency weights from four per-group weights.
    pub fn broadcast(&self, group_weights: [f64; 4]) -> Vec<f64> {
        let mut weights = Vec::with_capacity(self.n);
        for (g, range) in self.ranges().into_iter().enumerate() {
            weights.extend(std::iter::repeat(group_weights[g]).take(range.len()));
        }
        weights
    }
}

/// Sums per-frequency losses over the four groups, left to right.
pub fn group_losses(per_k: &[f64], groups: &KnowledgeGroups) -> [f64; 4] {
    assert_eq!(per_k.len(), groups.n(), "loss list length must equal n");
    let mut out = [0.0; 4];
    for (g, range) in groups.ranges().into_iter().enumerate() {
        for k in range {
            out[g] += per_k[k];
        }
    }
    out
}

/// sum_k g(lambda_k) ||u_k u_k^T (s_proj - t)||_F^2 with explicit weights.
///
/// `strict` enforces the decreasing-weight requirement; group-ablation
/// studies intentionally violate it and pass `strict = false`.
pub fn reweighted_loss_explicit(
    s_proj: &FeatureMatrix,
    t: &FeatureMatrix,
    dec: &SpectralDecomposition,
    weights: &[f64],
    strict: bool,
) -> Result<f64, SpectralError> {
    if weights.len() != dec.n() {
        return Err(SpectralError::DimensionMismatch(format!(
            "{} weights for {} frequencies",
            weights.len(),
            dec.n()
        )));
    }
    for (k, &w) in weights.iter().enumerate() {
        if w < 0.0 {
            return Err(SpectralError::NegativeWeight(k));
        }
    }
    if strict {
        for k in 1..weights.len() {
            if weights[k] > weights[k - 1] + 1e-12 {
                return Err(SpectralError::NonMonotoneWeights(k));
            }
        }
    }
    let per_k = per_frequency_losses(s_proj, t, dec)?;
    let mut total = 0.0;
    for (w, l) in weights.iter().zip(per_k.iter()) {
        total += w * l;
    }
    Ok(total)
}

/// Two independently computed sides of an identity plus their relative gap.
#[derive(Debug, Clone, Copy)]
pub struct TheoremReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

fn make_report(lhs: f64, rhs: f64) -> TheoremReport {
    let denom = lhs.abs().max(rhs.abs());
    let rel_err = if denom == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / denom
    };
    TheoremReport { lhs, rhs, rel_err }
}

/// Feature-distillation loss vs. its frequency decomposition:
/// lhs = ||s_proj - t||_F^2, rhs = sum of per-frequency losses.
pub fn verify_theorem1(
    s_proj: &FeatureMatrix,
    t: &FeatureMatrix,
    dec: &SpectralDecomposition,
) -> Result<TheoremReport, SpectralError> {
    check_same_shape(s_proj, t)?;
    check_rows(s_proj, dec.n())?;
    let diff = s_proj - t;
    let lhs: f64 = diff.iter().map(|v| v * v).sum();
    let per_k = per_frequency_losses(s_proj, t, dec)?;
    let rhs = per_k.iter().sum();
    Ok(make_report(lhs, rhs))
}

/// Filtered loss vs. h^2-weighted spectral loss:
/// lhs = ||H s_proj - H t||_F^2 through the sparse filter path,
/// rhs = sum_k h(lambda_k)^2 per-k loss through the dense spectral path.
pub fn verify_theorem2(
    lap: &Laplacian,
    filter: &GraphFilter,
    s_proj: &FeatureMatrix,
    t: &FeatureMatrix,
) -> Result<TheoremReport, SpectralError> {
    check_same_shape(s_proj, t)?;
    let hs = apply_filter(filter, lap, s_proj)?;
    let ht = apply_filter(filter, lap, t)?;
    let diff = &hs - &ht;
    let lhs: f64 = diff.iter().map(|v| v * v).sum();

    let dec = eigendecompose(lap)?;
    let per_k = per_frequency_losses(s_proj, t, &dec)?;
    let mut rhs = 0.0;
    for (lambda, loss) in dec.eigenvalues().iter().zip(per_k.iter()) {
        let h = filter.response(*lambda);
        rhs += h * h * loss;
    }
    Ok(make_report(lhs, rhs))
}

/// Relation loss vs. its pairwise frequency decomposition:
/// lhs = ||S S^T - T T^T||_F^2,
/// rhs = explicit double sum over frequency pairs (k, p).
///
/// The double sum materializes every projected matrix, so n is capped at 64.
pub fn verify_theorem3(
    dec: &SpectralDecomposition,
    s: &FeatureMatrix,
    t: &FeatureMatrix,
) -> Result<TheoremReport, SpectralError> {
    let n = dec.n();
    if n > 64 {
        return Err(SpectralError::TooLarge(n));
    }
    check_rows(s, n)?;
    check_rows(t, n)?;

    let gram_s = s.dot(&s.t());
    let gram_t = t.dot(&t.t());
    let diff = &gram_s - &gram_t;
    let lhs: f64 = diff.iter().map(|v| v * v).sum();

    let s_comps: Vec<FeatureMatrix> = (1..=n)
        .map(|k| frequency_component(s, k, dec).map(|c| c.component))
        .collect::<Result<_, _>>()?;
    let t_comps: Vec<FeatureMatrix> = (1..=n)
        .map(|k| frequency_component(t, k, dec).map(|c| c.component))
        .collect::<Result<_, _>>()?;

    let mut rhs = 0.0;
    for k in 0..n {
        for p in 0..n {
            let pair = &s_comps[k].dot(&s_comps[p].t()) - &t_comps[k].dot(&t_comps[p].t());
            rhs += pair.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(make_report(lhs, rhs))
}

fn check_rows(x: &FeatureMatrix, n: usize) -> Result<(), SpectralError> {
    if x.nrows() != n {
        return Err(SpectralError::DimensionMismatch(format!(
            "feature rows {} != node count {n}",
            x.nrows()
        )));
    }
    Ok(())
}

fn check_same_shape(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<(), SpectralError> {
    if a.dim() != b.dim() {
        return Err(SpectralError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}
