//! Polynomial spectral filters H(L) = sum_k theta_k L^k.
//!
//! A filter is characterized by its scalar response h(lambda) on [0, 2]. The
//! response must be non-increasing there: low frequencies keep the largest
//! weights. Application never forms L^k; it runs K sparse products in Horner
//! form.

use crate::graph::{FeatureMatrix, GraphError, Laplacian};

/// Named filter shapes. `Custom` holds arbitrary validated coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterFamily {
    Identity,
    /// h(lambda) = 1 - alpha * lambda, 0 <= alpha <= 0.5
    Linear { alpha: f64 },
    /// h(lambda) = a * lambda^2 + b * lambda + 1, non-increasing on [0, 2]
    Quadratic { a: f64, b: f64 },
    Custom,
}

/// Polynomial filter with coefficients theta_0..theta_K.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFilter {
    family: FilterFamily,
    coeffs: Vec<f64>,
}

impl GraphFilter {
    /// The 0-order filter h == 1; applying it returns the input unchanged.
    pub fn identity() -> Self {
        GraphFilter {
            family: FilterFamily::Identity,
            coeffs: vec![1.0],
        }
    }

    pub fn linear(alpha: f64) -> Result<Self, GraphError> {
        if !(0.0..=0.5).contains(&alpha) {
            return Err(GraphError::InvalidFilter(format!(
                "linear filter needs 0 <= alpha <= 0.5, got {alpha}"
            )));
        }
        Ok(GraphFilter {
            family: FilterFamily::Linear { alpha },
            coeffs: vec![1.0, -alpha],
        })
    }

    pub fn quadratic(a: f64, b: f64) -> Result<Self, GraphError> {
        // h'(lambda) = 2a*lambda + b is linear, so checking both endpoints of
        // [0, 2] settles monotonicity
        if !(b <= 0.0 && 4.0 * a + b <= 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(GraphError::InvalidFilter(format!(
                "quadratic filter (a={a}, b={b}) is not non-increasing on [0, 2]"
            )));
        }
        Ok(GraphFilter {
            family: FilterFamily::Quadratic { a, b },
            coeffs: vec![1.0, b, a],
        })
    }

    /// Arbitrary coefficients theta_0..theta_K. Monotonicity of the response
    /// is checked on a dense grid over [0, 2].
    pub fn custom(coeffs: Vec<f64>) -> Result<Self, GraphError> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(GraphError::InvalidFilter(
                "custom filter needs at least theta_0 and finite coefficients".into(),
            ));
        }
        let filter = GraphFilter {
            family: FilterFamily::Custom,
            coeffs,
        };
        let grid = 2048;
        let mut prev = filter.response(0.0);
        for step in 1..=grid {
            let lambda = 2.0 * step as f64 / grid as f64;
            let h = filter.response(lambda);
            if h > prev + 1e-9 {
                return Err(GraphError::InvalidFilter(format!(
                    "custom filter response increases near lambda = {lambda}"
                )));
            }
            prev = h;
        }
        Ok(filter)
    }

    pub fn family(&self) -> &FilterFamily {
        &self.family
    }

    /// Polynomial order K.
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Scalar response h(lambda), Horner evaluation.
    pub fn response(&self, lambda: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * lambda + c;
        }
        acc
    }
}

/// Applies H(L) x = sum_k theta_k L^k x with K sparse products (Horner form),
/// never materializing a matrix power. Cost is O(K * nnz(L) * dim).
pub fn apply_filter(
    filter: &GraphFilter,
    lap: &Laplacian,
    x: &FeatureMatrix,
) -> Result<FeatureMatrix, GraphError> {
    if x.nrows() != lap.node_count() {
        return Err(GraphError::DimensionMismatch(format!(
            "feature rows {} != node count {}",
            x.nrows(),
            lap.node_count()
        )));
    }
    let coeffs = filter.coeffs();
    let k = filter.order();
    let mut acc = x * coeffs[k];
    for step in (0..k).rev() {
        acc = lap.matrix().mul_dense(&acc);
        acc.scaled_add(coeffs[step], x);
    }
    Ok(acc)
}
