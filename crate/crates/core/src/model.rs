//! Mixture parameters, datasets and the per-point classical Hamiltonian.
//!
//! A point `y` sees the mixture through the vector of energies
//! `h_k = -log(π_k g(y; μ_k, Σ_k))`. Every E-step kernel in
//! [`crate::posteriors`] is a function of that vector alone, so the
//! expensive part (Cholesky factors and normalizing constants) is prepared
//! once per parameter set in a [`MixtureEvaluator`] and reused per point.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// Ridge added to every covariance after an M-step.
pub const EPSILON_COV: f64 = 1e-6;
/// Lower clamp applied to mixture weights before renormalizing.
pub const WEIGHT_FLOOR: f64 = 1e-10;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;
// ½ log 2π, correctly rounded
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Parameters `{π_k, μ_k, Σ_k}` of a K-component Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl From<GmmParams> for ParamsRepr {
    fn from(p: GmmParams) -> Self {
        ParamsRepr {
            means: p
                .means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariances: p
                .covariances
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            weights: p.weights,
        }
    }
}

impl TryFrom<ParamsRepr> for GmmParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let means = r.means.into_iter().map(DVector::from_vec).collect();
        let mut covariances = Vec::with_capacity(r.covariances.len());
        for rows in r.covariances {
            let d = rows.len();
            if rows.iter().any(|row| row.len() != d) {
                return Err(Error::InvalidParameter("covariance is not square".into()));
            }
            covariances.push(DMatrix::from_fn(d, d, |i, j| rows[i][j]));
        }
        GmmParams::new(r.weights, means, covariances)
    }
}

impl GmmParams {
    /// Validates and builds a parameter set.
    ///
    /// Weights must be positive and sum to one; covariances must be
    /// symmetric and positive definite. The `EPSILON_COV` eigenvalue floor
    /// is established by [`GmmParams::regularized`], not demanded here, so
    /// generators may use nearly singular covariances.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter(
                "need at least one component".into(),
            ));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidParameter(format!(
                "{} weights, {} means, {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter(
                "dimension must be at least 1".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "weights must be positive: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        for (idx, (mu, sigma)) in means.iter().zip(&covariances).enumerate() {
            if mu.len() != d || sigma.nrows() != d || sigma.ncols() != d {
                return Err(Error::InvalidParameter(format!(
                    "component {idx} does not have dimension {d}"
                )));
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {idx} has a non-finite mean"
                )));
            }
            check_spd(sigma)
                .map_err(|e| Error::InvalidParameter(format!("component {idx}: {e}")))?;
        }
        Ok(GmmParams {
            weights,
            means,
            covariances,
        })
    }

    /// Floors weights at `WEIGHT_FLOOR`, renormalizes them and adds
    /// `EPSILON_COV·I` to every covariance (after symmetrizing it).
    pub fn regularized(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let floored: Vec<f64> = weights.iter().map(|w| w.max(WEIGHT_FLOOR)).collect();
        let total: f64 = floored.iter().sum();
        let weights = floored.into_iter().map(|w| w / total).collect();
        let covariances = covariances
            .into_iter()
            .map(|c| {
                let d = c.nrows();
                let sym = (&c + c.transpose()) * 0.5;
                sym + DMatrix::identity(d, d) * EPSILON_COV
            })
            .collect();
        GmmParams::new(weights, means, covariances)
    }

    /// Equal weights, given means, one shared covariance.
    pub fn isotropic(means: Vec<DVector<f64>>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = means.len();
        GmmParams::new(vec![1.0 / k as f64; k], means, vec![covariance; k])
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Reorders components so that new component `k` is old component `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.n_components();
        let mut seen = vec![false; k];
        if perm.len() != k
            || perm
                .iter()
                .any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of 0..{k}"
            )));
        }
        Ok(GmmParams {
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            means: perm.iter().map(|&p| self.means[p].clone()).collect(),
            covariances: perm.iter().map(|&p| self.covariances[p].clone()).collect(),
        })
    }

    /// Largest absolute difference over every weight, mean and covariance entry.
    pub fn max_abs_diff(&self, other: &GmmParams) -> f64 {
        assert_eq!(self.n_components(), other.n_components());
        let w = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs());
        let m = self
            .means
            .iter()
            .zip(&other.means)
            .flat_map(|(a, b)| (a - b).iter().map(|v| v.abs()).collect::<Vec<_>>());
        let c = self
            .covariances
            .iter()
            .zip(&other.covariances)
            .flat_map(|(a, b)| (a - b).iter().map(|v| v.abs()).collect::<Vec<_>>());
        w.chain(m).chain(c).fold(0.0, f64::max)
    }
}

fn check_spd(sigma: &DMatrix<f64>) -> std::result::Result<(), String> {
    let scale = 1.0 + sigma.amax();
    for i in 0..sigma.nrows() {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err("covariance is not symmetric".into());
            }
        }
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err("covariance has non-finite entries".into());
    }
    if Cholesky::new(sigma.clone()).is_none() {
        return Err("covariance is not positive definite".into());
    }
    Ok(())
}

/// `N` observations in `D` dimensions, optionally with the generating truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: DMatrix<f64>,
    pub true_labels: Option<Vec<usize>>,
    pub true_params: Option<GmmParams>,
}

impl Dataset {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset must be non-empty, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dataset has non-finite entries".into(),
            ));
        }
        Ok(Dataset {
            points,
            true_labels: None,
            true_params: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("rows have differing lengths".into()));
        }
        Dataset::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.true_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.points.row_mean().transpose()
    }

    /// Maximum-likelihood (1/N) covariance of the whole dataset.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for row in self.points.row_iter() {
            let c = row.transpose() - &mean;
            cov += &c * c.transpose();
        }
        cov / self.len() as f64
    }
}

/// Energies `h_k = -log(π_k g(y; μ_k, Σ_k))` of one point, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianDiag {
    pub h: Vec<f64>,
}

/// `log g(y; μ, Σ)` via a Cholesky factorization.
pub fn log_gaussian(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if y.len() != mu.len() || sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
        return Err(Error::InvalidParameter("dimension mismatch".into()));
    }
    check_spd(sigma).map_err(Error::InvalidParameter)?;
    let density = ComponentDensity::new(0.0, mu, sigma)?;
    Ok(density.log_density(y.as_slice()))
}

/// One component with its Cholesky factor and normalizing constant cached.
#[derive(Debug, Clone)]
struct ComponentDensity {
    mean: Vec<f64>,
    chol: DMatrix<f64>,
    // log π_k − (D/2) log 2π − ½ log det Σ_k
    offset: f64,
}

impl ComponentDensity {
    fn new(log_weight: f64, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::<f64, Dyn>::new(sigma.clone())
            .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?
            .l();
        let d = mu.len() as f64;
        let half_log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        Ok(ComponentDensity {
            mean: mu.iter().copied().collect(),
            chol,
            offset: log_weight - d * HALF_LN_2PI - half_log_det,
        })
    }

    /// `offset − ½‖L⁻¹(y − μ)‖²` by forward substitution.
    fn log_density(&self, y: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = y[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol[(i, j)] * z[j];
            }
            z[i] = acc / self.chol[(i, i)];
            quad += z[i] * z[i];
        }
        self.offset - 0.5 * quad
    }
}

/// Precomputed per-component factors for repeated Hamiltonian evaluation.
#[derive(Debug, Clone)]
pub struct MixtureEvaluator {
    components: Vec<ComponentDensity>,
}

impl MixtureEvaluator {
    pub fn new(params: &GmmParams) -> Result<Self> {
        let components = params
            .weights
            .iter()
            .zip(params.means.iter().zip(&params.covariances))
            .map(|(w, (mu, sigma))| ComponentDensity::new(w.ln(), mu, sigma))
            .collect::<Result<_>>()?;
        Ok(MixtureEvaluator { components })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Writes `h_k` for the point `y` into `out`.
    pub fn energies_into(&self, y: &[f64], out: &mut [f64]) {
        for (slot, c) in out.iter_mut().zip(&self.components) {
            *slot = -c.log_density(y);
        }
    }

    /// The `N×K` matrix of energies, one row per point.
    pub fn energies(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let d = self.components[0].mean.len();
        if data.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "dataset has dimension {}, parameters have {d}",
                data.dim()
            )));
        }
        let k = self.n_components();
        let mut h = DMatrix::zeros(data.len(), k);
        let mut y = vec![0.0; d];
        let mut row = vec![0.0; k];
        for i in 0..data.len() {
            for (j, v) in y.iter_mut().enumerate() {
                *v = data.points[(i, j)];
            }
            self.energies_into(&y, &mut row);
            for (j, v) in row.iter().enumerate() {
                h[(i, j)] = *v;
            }
        }
        Ok(h)
    }
}

pub fn hamiltonian_diag(y: &DVector<f64>, params: &GmmParams) -> Result<HamiltonianDiag> {
    if y.len() != params.dim() {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {}, parameters have {}",
            y.len(),
            params.dim()
        )));
    }
    let eval = MixtureEvaluator::new(params)?;
    let mut h = vec![0.0; params.n_components()];
    eval.energies_into(y.as_slice(), &mut h);
    Ok(HamiltonianDiag { h })
}

/// `Σ_i log Σ_k π_k g(y_i; μ_k, Σ_k)`.
pub fn log_likelihood(data: &Dataset, params: &GmmParams) -> Result<f64> {
    let h = MixtureEvaluator::new(params)?.energies(data)?;
    Ok(log_likelihood_from_energies(&h))
}

pub(crate) fn log_likelihood_from_energies(h: &DMatrix<f64>) -> f64 {
    let mut neg = vec![0.0; h.ncols()];
    let mut total = 0.0;
    for row in h.row_iter() {
        for (slot, v) in neg.iter_mut().zip(row.iter()) {
            *slot = -v;
        }
        total += log_sum_exp(&neg);
    }
    total
}
