//! Feature distillation losses: projector, FitNet, and the filtered
//! (frequency-reweighted) variant, each with analytic gradients.
//!
//! The filtered loss applies the same polynomial filter to projected student
//! features and teacher features and measures the squared Frobenius gap,
//! optionally restricted to a row subset. With the identity filter every
//! code path below degenerates to plain FitNet, bit for bit.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::filter::{apply_filter, GraphFilter};
use crate::graph::{FeatureMatrix, GraphError, Laplacian};
use crate::spectral::{reweighted_loss_explicit, SpectralDecomposition, SpectralError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Linear map from student to teacher dimensionality, bias optional and
/// absent by default.
#[derive(Debug, Clone)]
pub struct Projector {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Projector {
    /// Weights drawn i.i.d. normal with std 0.01, no bias.
    pub fn init_with_rng(d_student: usize, d_teacher: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut weight = Array2::zeros((d_student, d_teacher));
        for v in weight.iter_mut() {
            *v = normal.sample(rng);
        }
        Projector { weight, bias: None }
    }

    pub fn init(d_student: usize, d_teacher: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(d_student, d_teacher, &mut rng)
    }

    pub fn identity(dim: usize) -> Self {
        Projector {
            weight: Array2::eye(dim),
            bias: None,
        }
    }

    /// Ridge-regularized least-squares fit of `W` minimizing ||S W - T||_F^2.
    /// Used when analyzing checkpoints that carry no trained projector.
    pub fn least_squares(
        s: &FeatureMatrix,
        t: &FeatureMatrix,
        ridge: f64,
    ) -> Result<Self, DistillError> {
        if s.nrows() != t.nrows() {
            return Err(DistillError::DimensionMismatch(format!(
                "student rows {} != teacher rows {}",
                s.nrows(),
                t.nrows()
            )));
        }
        let d_s = s.ncols();
        let gram = s.t().dot(s);
        let rhs = s.t().dot(t);
        let mut a = nalgebra::DMatrix::from_fn(d_s, d_s, |i, j| gram[[i, j]]);
        for i in 0..d_s {
            a[(i, i)] += ridge;
        }
        let b = nalgebra::DMatrix::from_fn(d_s, t.ncols(), |i, j| rhs[[i, j]]);
        let solved = a
            .lu()
            .solve(&b)
            .ok_or_else(|| DistillError::DimensionMismatch("singular normal equations".into()))?;
        let weight = Array2::from_shape_fn((d_s, t.ncols()), |(i, j)| solved[(i, j)]);
        Ok(Projector { weight, bias: None })
    }

    pub fn d_student(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_teacher(&self) -> usize {
        self.weight.ncols()
    }
}

/// Row-wise linear projection to the teacher dimensionality.
pub fn project(proj: &Projector, s: &FeatureMatrix) -> Result<FeatureMatrix, DistillError> {
    if s.ncols() != proj.d_student() {
        return Err(DistillError::DimensionMismatch(format!(
            "student dim {} != projector input {}",
            s.ncols(),
            proj.d_student()
        )));
    }
    let mut out = s.dot(&proj.weight);
    if let Some(bias) = &proj.bias {
        out += bias;
    }
    Ok(out)
}

/// Zeroes every row not listed in `rows` (`None` keeps all rows).
fn row_masked(x: &FeatureMatrix, rows: Option<&[usize]>) -> FeatureMatrix {
    match rows {
        None => x.clone(),
        Some(rows) => {
            let mut masked = Array2::zeros(x.raw_dim());
            for &r in rows {
                masked.row_mut(r).assign(&x.row(r));
            }
            masked
        }
    }
}

fn sumsq(x: &FeatureMatrix) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_shapes(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
) -> Result<(), DistillError> {
    if s.nrows() != t.nrows() {
        return Err(DistillError::DimensionMismatch(format!(
            "student rows {} != teacher rows {}",
            s.nrows(),
            t.nrows()
        )));
    }
    if t.ncols() != proj.d_teacher() {
        return Err(DistillError::DimensionMismatch(format!(
            "teacher dim {} != projector output {}",
            t.ncols(),
            proj.d_teacher()
        )));
    }
    Ok(())
}

/// Loss and its gradient w.r.t. the projected student features. The same
/// residual math backs both the per-entity and the stacked (bipartite)
/// training paths.
#[derive(Debug, Clone)]
pub(crate) struct Residual {
    pub loss: f64,
    pub g_projected: FeatureMatrix,
}

pub(crate) fn fitnet_residual(
    p: &FeatureMatrix,
    t: &FeatureMatrix,
    rows: Option<&[usize]>,
) -> Residual {
    let diff = p - t;
    let masked = row_masked(&diff, rows);
    Residual {
        loss: sumsq(&masked),
        g_projected: masked * 2.0,
    }
}

pub(crate) fn freqd_residual(
    p: &FeatureMatrix,
    ht: &FeatureMatrix,
    filter: &GraphFilter,
    lap: &Laplacian,
    rows: Option<&[usize]>,
) -> Result<Residual, DistillError> {
    let hp = apply_filter(filter, lap, p)?;
    let diff = &hp - ht;
    let masked = row_masked(&diff, rows);
    let loss = sumsq(&masked);
    // d/dP of ||R (H P - H T)||^2 = 2 H^T R (H P - H T); H is symmetric
    let g_projected = apply_filter(filter, lap, &masked)? * 2.0;
    Ok(Residual { loss, g_projected })
}

pub(crate) fn reweighted_residual(
    p: &FeatureMatrix,
    t: &FeatureMatrix,
    dec: &SpectralDecomposition,
    weights: &[f64],
    rows: Option<&[usize]>,
) -> Residual {
    let diff = p - t;
    let masked = row_masked(&diff, rows);
    let u = dec.eigenvectors();
    let mut spectrum = u.t().dot(&masked);
    let mut loss = 0.0;
    for (k, mut row) in spectrum.rows_mut().into_iter().enumerate() {
        loss += weights[k] * row.iter().map(|v| v * v).sum::<f64>();
        row *= weights[k];
    }
    let g_projected = row_masked(&(u.dot(&spectrum) * 2.0), rows);
    Residual { loss, g_projected }
}

/// Plain feature distillation: squared Frobenius norm of Proj(S) - T over
/// the selected rows.
pub fn fitnet_loss(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    rows: Option<&[usize]>,
) -> Result<f64, DistillError> {
    check_shapes(s, t, proj)?;
    Ok(fitnet_residual(&project(proj, s)?, t, rows).loss)
}

/// Gradients of a feature-distillation loss w.r.t. the student features, the
/// projector weight, and (when present) the projector bias.
#[derive(Debug, Clone)]
pub struct DistillGrads {
    pub student: Array2<f64>,
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

pub(crate) fn grads_from_projected(
    s: &FeatureMatrix,
    proj: &Projector,
    g_projected: &FeatureMatrix,
) -> DistillGrads {
    DistillGrads {
        student: g_projected.dot(&proj.weight.t()),
        weight: s.t().dot(g_projected),
        bias: proj
            .bias
            .as_ref()
            .map(|_| g_projected.sum_axis(ndarray::Axis(0))),
    }
}

pub fn fitnet_gradient(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    rows: Option<&[usize]>,
) -> Result<DistillGrads, DistillError> {
    check_shapes(s, t, proj)?;
    let residual = fitnet_residual(&project(proj, s)?, t, rows);
    Ok(grads_from_projected(s, proj, &residual.g_projected))
}

/// Filtered teacher features, computed once per epoch by the training loop
/// since the teacher is frozen.
pub fn filtered_teacher(
    filter: &GraphFilter,
    lap: &Laplacian,
    t: &FeatureMatrix,
) -> Result<FeatureMatrix, DistillError> {
    Ok(apply_filter(filter, lap, t)?)
}

/// Filtered feature-distillation loss. Filters act on the full matrices;
/// the squared error is then restricted to `rows`.
pub fn freqd_loss(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    filter: &GraphFilter,
    lap: &Laplacian,
    rows: Option<&[usize]>,
) -> Result<f64, DistillError> {
    check_shapes(s, t, proj)?;
    let ht = filtered_teacher(filter, lap, t)?;
    Ok(freqd_residual(&project(proj, s)?, &ht, filter, lap, rows)?.loss)
}

/// Analytic gradient of [`freqd_loss`] w.r.t. student features and projector.
pub fn freqd_gradient(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    filter: &GraphFilter,
    lap: &Laplacian,
    rows: Option<&[usize]>,
) -> Result<DistillGrads, DistillError> {
    check_shapes(s, t, proj)?;
    let ht = filtered_teacher(filter, lap, t)?;
    let residual = freqd_residual(&project(proj, s)?, &ht, filter, lap, rows)?;
    Ok(grads_from_projected(s, proj, &residual.g_projected))
}

/// Explicitly reweighted loss on the spectral path (used by group-ablation
/// training): sum_k w_k ||u_k u_k^T (Proj(S) - T)[rows]||_F^2.
pub fn reweighted_loss(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    dec: &SpectralDecomposition,
    weights: &[f64],
    rows: Option<&[usize]>,
) -> Result<f64, DistillError> {
    check_shapes(s, t, proj)?;
    let p = project(proj, s)?;
    let masked_p = row_masked(&p, rows);
    let masked_t = row_masked(t, rows);
    Ok(reweighted_loss_explicit(
        &masked_p, &masked_t, dec, weights, false,
    )?)
}

/// Gradient of [`reweighted_loss`]: d/dP = R^T (2 U diag(w) U^T R (P - T)).
pub fn reweighted_gradient(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    proj: &Projector,
    dec: &SpectralDecomposition,
    weights: &[f64],
    rows: Option<&[usize]>,
) -> Result<DistillGrads, DistillError> {
    check_shapes(s, t, proj)?;
    if weights.len() != dec.n() {
        return Err(DistillError::DimensionMismatch(format!(
            "{} weights for {} frequencies",
            weights.len(),
            dec.n()
        )));
    }
    let residual = reweighted_residual(&project(proj, s)?, t, dec, weights, rows);
    Ok(grads_from_projected(s, proj, &residual.g_projected))
}

/// Per-group weights (w1..w4) over the four knowledge groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightScheme {
    pub group_weights: [f64; 4],
}

impl WeightScheme {
    pub fn new(group_weights: [f64; 4]) -> Self {
        assert!(
            group_weights.iter().all(|w| *w >= 0.0),
            "group weights must be nonnegative"
        );
        WeightScheme { group_weights }
    }

    /// (1, 1, 1, 1)
    pub fn original() -> Self {
        Self::new([1.0; 4])
    }

    /// (1, 0.75, 0.5, 0.25)
    pub fn low_frequency_enhanced() -> Self {
        Self::new([1.0, 0.75, 0.5, 0.25])
    }

    /// (0.25, 0.5, 0.75, 1)
    pub fn high_frequency_enhanced() -> Self {
        Self::new([0.25, 0.5, 0.75, 1.0])
    }

    /// Zero out one group (0-based), keep the others at 1.
    pub fn without_group(group: usize) -> Self {
        assert!(group < 4);
        let mut weights = [1.0; 4];
        weights[group] = 0.0;
        Self::new(weights)
    }
}

/// Where the distillation graph comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphSource {
    /// Separate user and item KNN graphs built from teacher embeddings.
    TeacherKnn { k: usize },
    /// One user-item bipartite graph over the training interactions.
    Bipartite,
}

/// Whether the squared error covers only the batch rows or all rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    Batch,
    Full,
}

/// Base optimization knobs shared by plain and distilled training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// negatives sampled per positive pair
    pub negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            max_epochs: 1000,
            patience: 30,
            negatives: 1,
        }
    }
}

/// Distillation knobs on top of [`TrainConfig`].
#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// weight of the distillation term in the total loss
    pub beta: f64,
    pub filter: GraphFilter,
    pub graph_source: GraphSource,
    pub dropout_rate: f64,
    pub loss_scope: LossScope,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.1,
            filter: GraphFilter::linear(0.45).expect("valid default alpha"),
            graph_source: GraphSource::TeacherKnn { k: 10 },
            dropout_rate: 0.1,
            loss_scope: LossScope::Batch,
            train: TrainConfig::default(),
        }
    }
}
