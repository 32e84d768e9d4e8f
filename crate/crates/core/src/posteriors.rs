//! E-step kernels and the objective functions built on them.
//!
//! For one point with energies `h`, the three kernels are
//!
//! * classical: `r_k ∝ exp(−h_k)`
//! * tempered: `r_k ∝ exp(−β h_k)`
//! * quantum: `r_k = [exp(−A)]_kk / Tr exp(−A)` with `A = diag(h) + Γσ′`
//!
//! The quantum kernel diagonalizes `A` and never forms `exp(−A)` directly:
//! with `A = V diag(λ) Vᵀ`, `log 𝒵 = logsumexp(−λ)` and
//! `r_k = Σ_j exp(−λ_j − log 𝒵) V_kj²`. All kernels stay in log space, so
//! far-away points never underflow to a zero row.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_in_place, log_sum_exp, SpectralDecomp};
use crate::model::{log_likelihood_from_energies, Dataset, GmmParams, MixtureEvaluator};

/// `N×K` matrix of posterior weights; row `i` is a distribution over components.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    r: DMatrix<f64>,
}

/// Worst-case deviation of a responsibility matrix from row-stochasticity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RowCheck {
    pub max_row_sum_error: f64,
    pub min_entry: f64,
    pub max_entry: f64,
}

impl RowCheck {
    /// Identity for [`RowCheck::merge`]; start accumulations here.
    pub const EMPTY: RowCheck = RowCheck {
        max_row_sum_error: 0.0,
        min_entry: f64::INFINITY,
        max_entry: f64::NEG_INFINITY,
    };

    pub const IDEAL: RowCheck = RowCheck {
        max_row_sum_error: 0.0,
        min_entry: 0.0,
        max_entry: 1.0,
    };

    pub fn merge(self, other: RowCheck) -> RowCheck {
        RowCheck {
            max_row_sum_error: self.max_row_sum_error.max(other.max_row_sum_error),
            min_entry: self.min_entry.min(other.min_entry),
            max_entry: self.max_entry.max(other.max_entry),
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.max_row_sum_error <= tol && self.min_entry >= 0.0 && self.max_entry <= 1.0 + tol
    }
}

impl Responsibilities {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        let resp = Responsibilities { r };
        if !resp.row_check().is_valid(1e-10) {
            return Err(Error::InvalidArgument(
                "responsibility rows must be nonnegative and sum to one".into(),
            ));
        }
        Ok(resp)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn n_points(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.r.ncols()
    }

    pub fn row_check(&self) -> RowCheck {
        let mut check = RowCheck::EMPTY;
        for row in self.r.row_iter() {
            check.max_row_sum_error = check.max_row_sum_error.max((row.sum() - 1.0).abs());
            check.min_entry = check.min_entry.min(row.min());
            check.max_entry = check.max_entry.max(row.max());
        }
        check
    }
}

/// The quantum fluctuation operator `σ′`: symmetric with a zero diagonal.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct CouplingMatrix {
    sigma_prime: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn new(sigma_prime: DMatrix<f64>) -> Result<Self> {
        let k = sigma_prime.nrows();
        if k == 0 || !sigma_prime.is_square() {
            return Err(Error::InvalidArgument("coupling must be square".into()));
        }
        for i in 0..k {
            if sigma_prime[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(
                    "coupling diagonal must be zero".into(),
                ));
            }
            for j in 0..i {
                if sigma_prime[(i, j)] != sigma_prime[(j, i)] || !sigma_prime[(i, j)].is_finite() {
                    return Err(Error::InvalidArgument("coupling must be symmetric".into()));
                }
            }
        }
        // a zero off-diagonal part commutes with every projector
        if k > 1 && sigma_prime.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidArgument(
                "coupling must have a nonzero off-diagonal entry".into(),
            ));
        }
        Ok(CouplingMatrix { sigma_prime })
    }

    /// Every off-diagonal entry one.
    pub fn all_ones(k: usize) -> Self {
        CouplingMatrix {
            sigma_prime: DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { 1.0 }),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma_prime
    }

    pub fn dim(&self) -> usize {
        self.sigma_prime.nrows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for CouplingMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("coupling must be square".into()));
        }
        CouplingMatrix::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }
}

impl From<CouplingMatrix> for Vec<Vec<f64>> {
    fn from(c: CouplingMatrix) -> Self {
        c.sigma_prime
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumEStepResult {
    pub responsibilities: Responsibilities,
    /// `log 𝒵_Γ^(i)` per point.
    pub log_partition: Vec<f64>,
    /// `F_Γ = −Σ_i log 𝒵_Γ^(i)`.
    pub free_energy: f64,
}

/// Which E-step to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel<'a> {
    Classical,
    Tempered {
        beta: f64,
    },
    Quantum {
        gamma: f64,
        coupling: &'a CouplingMatrix,
    },
}

/// Output of one E-step evaluated from an energy matrix.
#[derive(Debug, Clone)]
pub(crate) struct EStep {
    pub resp: Responsibilities,
    /// Log-likelihood for classical, `−F_β` for tempered, `−F_Γ` for quantum.
    pub objective: f64,
    pub log_likelihood: f64,
    pub log_partition: Vec<f64>,
}

/// Runs `kernel` on the `N×K` energy matrix `h`.
pub(crate) fn e_step(h: &DMatrix<f64>, kernel: &Kernel<'_>) -> EStep {
    let (n, k) = h.shape();
    let mut r = DMatrix::zeros(n, k);
    let mut log_partition = vec![0.0; n];
    let mut row = vec![0.0; k];
    let mut out = vec![0.0; k];
    let mut quantum = match kernel {
        Kernel::Quantum { coupling, .. } => Some(QuantumWorkspace::new(coupling.dim())),
        _ => None,
    };
    for i in 0..n {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = h[(i, j)];
        }
        log_partition[i] = match kernel {
            Kernel::Classical => softmax_neg(&row, 1.0, &mut out),
            Kernel::Tempered { beta } => softmax_neg(&row, *beta, &mut out),
            Kernel::Quantum { gamma, coupling } => quantum
                .as_mut()
                .expect("workspace for quantum kernel")
                .diagonal(&row, *gamma, coupling, &mut out),
        };
        for (j, v) in out.iter().enumerate() {
            r[(i, j)] = *v;
        }
    }
    // fixed summation order keeps the objective reproducible
    let total: f64 = log_partition.iter().sum();
    let log_likelihood = match kernel {
        Kernel::Classical => total,
        _ => log_likelihood_from_energies(h),
    };
    let objective = match kernel {
        Kernel::Tempered { beta } => total / beta,
        _ => total,
    };
    EStep {
        resp: Responsibilities { r },
        objective,
        log_likelihood,
        log_partition,
    }
}

/// Writes `softmax(−β h)` into `out` and returns `logsumexp(−β h)`.
fn softmax_neg(h: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    for (o, v) in out.iter_mut().zip(h) {
        *o = -beta * v;
    }
    normalize_exp(out)
}

/// Replaces `x` by `exp(x − max) / Σ exp(x − max)` and returns the log of
/// the normalizer, `max + log Σ exp(x − max)`.
fn normalize_exp(x: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Reusable buffers for diagonalizing `diag(h) + Γσ′`.
struct QuantumWorkspace {
    k: usize,
    a: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
}

impl QuantumWorkspace {
    fn new(k: usize) -> Self {
        QuantumWorkspace {
            k,
            a: vec![0.0; k * k],
            v: vec![0.0; k * k],
            probs: vec![0.0; k],
        }
    }

    /// Diagonalizes `A` and returns `log 𝒵`, leaving the Gibbs weights
    /// `exp(−λ_j)/𝒵` in `probs` and the eigenvectors in `v`.
    fn decompose(&mut self, h: &[f64], gamma: f64, coupling: &CouplingMatrix) -> f64 {
        let k = self.k;
        let s = coupling.matrix();
        for i in 0..k {
            for j in 0..k {
                self.a[i * k + j] = if i == j { h[i] } else { gamma * s[(i, j)] };
            }
        }
        jacobi_in_place(&mut self.a, &mut self.v, k);
        for j in 0..k {
            self.probs[j] = -self.a[j * k + j];
        }
        normalize_exp(&mut self.probs)
    }

    fn diagonal(
        &mut self,
        h: &[f64],
        gamma: f64,
        coupling: &CouplingMatrix,
        out: &mut [f64],
    ) -> f64 {
        let log_z = self.decompose(h, gamma, coupling);
        let k = self.k;
        for (row, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k {
                let vkj = self.v[row * k + j];
                acc += self.probs[j] * vkj * vkj;
            }
            *o = acc;
        }
        log_z
    }
}

/// The normalized quantum Gibbs state `P = exp(−A)/𝒵` of one point.
#[derive(Debug, Clone)]
pub struct GibbsState {
    pub decomp: SpectralDecomp,
    pub log_partition: f64,
}

impl GibbsState {
    pub fn new(h: &[f64], gamma: f64, coupling: &CouplingMatrix) -> Result<Self> {
        let k = h.len();
        if coupling.dim() != k {
            return Err(Error::InvalidArgument(format!(
                "coupling is {}x{}, energies have length {k}",
                coupling.dim(),
                coupling.dim()
            )));
        }
        let a = hamiltonian_matrix(h, gamma, coupling);
        let decomp = crate::linalg::sym_eig(&a)?;
        let neg: Vec<f64> = decomp.eigenvalues.iter().map(|l| -l).collect();
        let log_partition = log_sum_exp(&neg);
        Ok(GibbsState {
            decomp,
            log_partition,
        })
    }

    /// Eigenvalues of `P`.
    pub fn probabilities(&self) -> DVector<f64> {
        self.decomp
            .eigenvalues
            .map(|l| (-l - self.log_partition).exp())
    }

    pub fn density_matrix(&self) -> DMatrix<f64> {
        let lz = self.log_partition;
        self.decomp.map_eigenvalues(|l| (-l - lz).exp())
    }

    /// `log P`, taken spectrally.
    pub fn log_density_matrix(&self) -> DMatrix<f64> {
        let lz = self.log_partition;
        self.decomp.map_eigenvalues(|l| -l - lz)
    }
}

/// `diag(h) + Γσ′`.
pub fn hamiltonian_matrix(h: &[f64], gamma: f64, coupling: &CouplingMatrix) -> DMatrix<f64> {
    let mut a = coupling.matrix() * gamma;
    for (k, v) in h.iter().enumerate() {
        a[(k, k)] = *v;
    }
    a
}

fn energies(data: &Dataset, params: &GmmParams) -> Result<DMatrix<f64>> {
    MixtureEvaluator::new(params)?.energies(data)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )))
    }
}

fn check_coupling(coupling: &CouplingMatrix, params: &GmmParams) -> Result<()> {
    if coupling.dim() == params.n_components() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "coupling has size {}, model has {} components",
            coupling.dim(),
            params.n_components()
        )))
    }
}

/// Runs `kernel` directly on an `N×K` energy matrix, returning the
/// responsibilities and `log 𝒵` of every row.
pub fn posterior_from_energies(
    h: &DMatrix<f64>,
    kernel: &Kernel<'_>,
) -> Result<(Responsibilities, Vec<f64>)> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("energies must be finite".into()));
    }
    match kernel {
        Kernel::Classical => {}
        Kernel::Tempered { beta } => {
            if !(*beta > 0.0 && beta.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "beta must be > 0, got {beta}"
                )));
            }
        }
        Kernel::Quantum { gamma, coupling } => {
            check_gamma(*gamma)?;
            if coupling.dim() != h.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "coupling is {0}x{0}, energies have {1} columns",
                    coupling.dim(),
                    h.ncols()
                )));
            }
        }
    }
    let step = e_step(h, kernel);
    Ok((step.resp, step.log_partition))
}

pub fn classical_posterior(data: &Dataset, params: &GmmParams) -> Result<Responsibilities> {
    Ok(e_step(&energies(data, params)?, &Kernel::Classical).resp)
}

/// Posterior tempered by inverse temperature `beta`: `r ∝ (π_k g_k)^β`.
pub fn tempered_posterior(
    data: &Dataset,
    params: &GmmParams,
    beta: f64,
) -> Result<Responsibilities> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta must be > 0, got {beta}"
        )));
    }
    Ok(e_step(&energies(data, params)?, &Kernel::Tempered { beta }).resp)
}

pub fn quantum_estep(
    data: &Dataset,
    params: &GmmParams,
    gamma: f64,
    coupling: &CouplingMatrix,
) -> Result<QuantumEStepResult> {
    check_gamma(gamma)?;
    check_coupling(coupling, params)?;
    let step = e_step(
        &energies(data, params)?,
        &Kernel::Quantum { gamma, coupling },
    );
    Ok(QuantumEStepResult {
        responsibilities: step.resp,
        free_energy: -step.objective,
        log_partition: step.log_partition,
    })
}

/// Expected complete-data log-likelihood `Σ_i Σ_k r_ik (−h_ik)`.
pub fn q_function(data: &Dataset, resp: &Responsibilities, params: &GmmParams) -> Result<f64> {
    let h = energies(data, params)?;
    if resp.matrix().shape() != h.shape() {
        return Err(Error::InvalidArgument(
            "responsibilities do not match data and model".into(),
        ));
    }
    Ok(-resp.matrix().component_mul(&h).sum())
}

/// `U_Γ(new; old) = Σ_i Tr[P_Γ^(i)(old) · (−A^(i)(new))]`.
pub fn u_function(
    data: &Dataset,
    params_new: &GmmParams,
    params_old: &GmmParams,
    gamma: f64,
    coupling: &CouplingMatrix,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_coupling(coupling, params_new)?;
    check_coupling(coupling, params_old)?;
    let h_new = energies(data, params_new)?;
    let h_old = energies(data, params_old)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let old: Vec<f64> = h_old.row(i).iter().copied().collect();
        let new: Vec<f64> = h_new.row(i).iter().copied().collect();
        let p_old = GibbsState::new(&old, gamma, coupling)?.density_matrix();
        let a_new = hamiltonian_matrix(&new, gamma, coupling);
        total -= p_old.component_mul(&a_new).sum();
    }
    Ok(total)
}

/// `S_Γ(a; b) = Σ_i Tr[P_Γ^(i)(b) · log P_Γ^(i)(a)]`.
pub fn entropy_term(
    data: &Dataset,
    params_a: &GmmParams,
    params_b: &GmmParams,
    gamma: f64,
    coupling: &CouplingMatrix,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_coupling(coupling, params_a)?;
    check_coupling(coupling, params_b)?;
    let h_a = energies(data, params_a)?;
    let h_b = energies(data, params_b)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let a: Vec<f64> = h_a.row(i).iter().copied().collect();
        let b: Vec<f64> = h_b.row(i).iter().copied().collect();
        let log_p_a = GibbsState::new(&a, gamma, coupling)?.log_density_matrix();
        let p_b = GibbsState::new(&b, gamma, coupling)?.density_matrix();
        // Tr[XY] = Σ X ∘ Yᵀ, and both are symmetric
        total += p_b.component_mul(&log_p_a).sum();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matexp_taylor_oracle;
    use crate::model::{hamiltonian_diag, log_likelihood};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn three_cluster_params() -> GmmParams {
        GmmParams::isotropic(
            vec![v(&[-3.0, 0.0]), v(&[0.0, 0.0]), v(&[3.0, 0.0])],
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> GmmParams {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let means = (0..k)
            .map(|_| v(&[rng.random_range(-4.0..4.0), rng.random_range(-2.0..2.0)]))
            .collect();
        let covs = (0..k)
            .map(|_| {
                let a = rng.random_range(0.3..2.0);
                let b = rng.random_range(0.3..2.0);
                let c = rng.random_range(-0.2..0.2);
                DMatrix::from_row_slice(2, 2, &[a, c, c, b])
            })
            .collect();
        GmmParams::new(weights, means, covs).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-2.5..2.5)])
            .collect();
        Dataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_component_rows_are_one() {
        let p = GmmParams::new(
            vec![1.0],
            vec![v(&[0.0, 0.0])],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_data(&mut rng, 8);
        let r = classical_posterior(&data, &p).unwrap();
        assert!(r.matrix().iter().all(|x| *x == 1.0));
        let q = quantum_estep(&data, &p, 0.7, &CouplingMatrix::all_ones(1)).unwrap();
        assert!(q
            .responsibilities
            .matrix()
            .iter()
            .all(|x| (*x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let p = GmmParams::isotropic(
            vec![v(&[-1.0, 0.0]), v(&[1.0, 0.0])],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let data = Dataset::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let r = classical_posterior(&data, &p).unwrap();
        assert_eq!(r.matrix()[(0, 0)], 0.5);
        assert_eq!(r.matrix()[(0, 1)], 0.5);
    }

    #[test]
    fn classical_matches_direct_bayes_rule() {
        let p = three_cluster_params();
        let data = Dataset::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let r = classical_posterior(&data, &p).unwrap();
        let g = |mx: f64| (-0.5 * (3.0 - mx) * (3.0 - mx)).exp() / (2.0 * std::f64::consts::PI);
        let dens = [g(-3.0) / 3.0, g(0.0) / 3.0, g(3.0) / 3.0];
        let total: f64 = dens.iter().sum();
        for k in 0..3 {
            assert!((r.matrix()[(0, k)] - dens[k] / total).abs() < 1e-14);
        }
    }

    #[test]
    fn tempered_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_data(&mut rng, 30);
        let p = random_params(&mut rng, 3);
        let classical = classical_posterior(&data, &p).unwrap();
        assert_eq!(tempered_posterior(&data, &p, 1.0).unwrap(), classical);
        let hot = tempered_posterior(&data, &p, 1e-12).unwrap();
        assert!(hot.matrix().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-9));
        assert!(tempered_posterior(&data, &p, 0.0).is_err());
    }

    #[test]
    fn tempered_matches_direct_power() {
        let p = three_cluster_params();
        let data = Dataset::from_rows(&[vec![1.2, -0.4]]).unwrap();
        let r = tempered_posterior(&data, &p, 0.7).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let pg: Vec<f64> = [-3.0f64, 0.0, 3.0]
            .iter()
            .map(|mx| ((-0.5 * ((1.2 - mx).powi(2) + 0.16)).exp() / two_pi / 3.0).powf(0.7))
            .collect();
        let total: f64 = pg.iter().sum();
        for k in 0..3 {
            assert!((r.matrix()[(0, k)] - pg[k] / total).abs() < 1e-14);
        }
    }

    #[test]
    fn quantum_at_zero_gamma_is_classical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(&mut rng, 50);
        let p = random_params(&mut rng, 3);
        let q = quantum_estep(&data, &p, 0.0, &CouplingMatrix::all_ones(3)).unwrap();
        let c = classical_posterior(&data, &p).unwrap();
        assert!((q.responsibilities.matrix() - c.matrix()).amax() < 1e-12);
        let ll = log_likelihood(&data, &p).unwrap();
        assert!((q.free_energy + ll).abs() <= 1e-10 * ll.abs());
    }

    #[test]
    fn two_state_closed_form() {
        let p = GmmParams::isotropic(vec![v(&[-1.0]), v(&[1.0])], DMatrix::identity(1, 1)).unwrap();
        let data = Dataset::from_rows(&[vec![0.0]]).unwrap();
        let c = hamiltonian_diag(&v(&[0.0]), &p).unwrap().h[0];
        for gamma in [0.1, 1.0, 3.0] {
            let q = quantum_estep(&data, &p, gamma, &CouplingMatrix::all_ones(2)).unwrap();
            let row = q.responsibilities.matrix().row(0);
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
            let expected = -c + (2.0 * gamma.cosh()).ln();
            assert!((q.log_partition[0] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn quantum_matches_taylor_oracle_for_fixed_energies() {
        let h = [0.5, 1.0, 2.0];
        let coupling = CouplingMatrix::all_ones(3);
        let mut ws = QuantumWorkspace::new(3);
        let mut out = [0.0; 3];
        let log_z = ws.diagonal(&h, 1.0, &coupling, &mut out);
        let expm = matexp_taylor_oracle(&(-hamiltonian_matrix(&h, 1.0, &coupling)), 30);
        let trace = expm.trace();
        for k in 0..3 {
            assert!((out[k] - expm[(k, k)] / trace).abs() < 1e-8);
        }
        assert!((log_z - trace.ln()).abs() < 1e-10);
    }

    #[test]
    fn gibbs_state_is_a_density_matrix() {
        let coupling = CouplingMatrix::all_ones(3);
        let g = GibbsState::new(&[0.3, -1.0, 2.5], 0.8, &coupling).unwrap();
        let p = g.density_matrix();
        assert!((p.trace() - 1.0).abs() < 1e-14);
        assert!((&p - p.transpose()).amax() < 1e-15);
        assert!(g.probabilities().iter().all(|x| *x > 0.0));
    }

    #[test]
    fn coupling_validation() {
        assert!(CouplingMatrix::new(DMatrix::identity(2, 2)).is_err());
        assert!(CouplingMatrix::new(DMatrix::zeros(2, 2)).is_err());
        assert!(CouplingMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])).is_err());
        assert!(CouplingMatrix::new(DMatrix::zeros(1, 1)).is_ok());
        let c = CouplingMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0])).unwrap();
        // does not commute with the projector onto component 0
        let proj = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((&proj * c.matrix() - c.matrix() * &proj).amax() > 0.0);
    }

    #[test]
    fn q_function_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 12);
        let single = GmmParams::new(
            vec![1.0],
            vec![v(&[0.5, 0.0])],
            vec![DMatrix::identity(2, 2) * 2.0],
        )
        .unwrap();
        let r1 = classical_posterior(&data, &single).unwrap();
        let ll = log_likelihood(&data, &single).unwrap();
        assert!((q_function(&data, &r1, &single).unwrap() - ll).abs() < 1e-12 * ll.abs());

        let p = random_params(&mut rng, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let hard = DMatrix::from_fn(12, 3, |i, k| if labels[i] == k { 1.0 } else { 0.0 });
        let hard = Responsibilities::new(hard).unwrap();
        let mut expected = 0.0;
        for i in 0..12 {
            let y = data.point(i);
            let k = labels[i];
            expected += p.weights()[k].ln()
                + crate::model::log_gaussian(&y, &p.means()[k], &p.covariances()[k]).unwrap();
        }
        assert!((q_function(&data, &hard, &p).unwrap() - expected).abs() < 1e-11);

        let soft = classical_posterior(&data, &random_params(&mut rng, 3)).unwrap();
        let mut direct = 0.0;
        for i in 0..12 {
            let h = hamiltonian_diag(&data.point(i), &p).unwrap().h;
            for k in 0..3 {
                direct -= soft.matrix()[(i, k)] * h[k];
            }
        }
        assert!((q_function(&data, &soft, &p).unwrap() - direct).abs() < 1e-11);
    }

    #[test]
    fn u_function_reduces_to_q_at_zero_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_data(&mut rng, 20);
        let p = random_params(&mut rng, 3);
        let coupling = CouplingMatrix::all_ones(3);
        let u = u_function(&data, &p, &p, 0.0, &coupling).unwrap();
        let q = q_function(&data, &classical_posterior(&data, &p).unwrap(), &p).unwrap();
        assert!((u - q).abs() < 1e-10 * (1.0 + q.abs()));
    }

    #[test]
    fn u_function_two_state_closed_form() {
        // h = (c, c): P = exp(−A)/𝒵 with off-diagonal −tanh(Γ)/2
        let p = GmmParams::isotropic(vec![v(&[-1.0]), v(&[1.0])], DMatrix::identity(1, 1)).unwrap();
        let data = Dataset::from_rows(&[vec![0.0]]).unwrap();
        let c = hamiltonian_diag(&v(&[0.0]), &p).unwrap().h[0];
        let gamma: f64 = 0.9;
        let u = u_function(&data, &p, &p, gamma, &CouplingMatrix::all_ones(2)).unwrap();
        let expected = -c + gamma * gamma.tanh();
        assert!((u - expected).abs() < 1e-13, "{u} vs {expected}");
    }

    fn taylor_density(h: &[f64], gamma: f64, coupling: &CouplingMatrix) -> DMatrix<f64> {
        let e = matexp_taylor_oracle(&(-hamiltonian_matrix(h, gamma, coupling)), 40);
        let t = e.trace();
        e / t
    }

    #[test]
    fn u_and_entropy_match_taylor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coupling = CouplingMatrix::all_ones(3);
        for _ in 0..5 {
            let data = random_data(&mut rng, 6);
            let a = random_params(&mut rng, 3);
            let b = random_params(&mut rng, 3);
            let gamma = rng.random_range(0.0..2.0);
            let ha = MixtureEvaluator::new(&a).unwrap().energies(&data).unwrap();
            let hb = MixtureEvaluator::new(&b).unwrap().energies(&data).unwrap();
            let mut u_oracle = 0.0;
            let mut s_oracle = 0.0;
            for i in 0..data.len() {
                let ra: Vec<f64> = ha.row(i).iter().copied().collect();
                let rb: Vec<f64> = hb.row(i).iter().copied().collect();
                let pb = taylor_density(&rb, gamma, &coupling);
                u_oracle -= (&pb * hamiltonian_matrix(&ra, gamma, &coupling)).trace();
                // log P_a = −A_a − log 𝒵_a I
                let za =
                    matexp_taylor_oracle(&(-hamiltonian_matrix(&ra, gamma, &coupling)), 40).trace();
                let log_pa =
                    -hamiltonian_matrix(&ra, gamma, &coupling) - DMatrix::identity(3, 3) * za.ln();
                s_oracle += (&pb * log_pa).trace();
            }
            let u = u_function(&data, &a, &b, gamma, &coupling).unwrap();
            let s = entropy_term(&data, &a, &b, gamma, &coupling).unwrap();
            assert!(
                (u - u_oracle).abs() < 1e-8 * (1.0 + u.abs()),
                "{u} vs {u_oracle}"
            );
            assert!(
                (s - s_oracle).abs() < 1e-7 * (1.0 + s.abs()),
                "{s} vs {s_oracle}"
            );
        }
    }

    #[test]
    fn entropy_special_cases() {
        let single =
            GmmParams::new(vec![1.0], vec![v(&[0.0])], vec![DMatrix::identity(1, 1)]).unwrap();
        let data = Dataset::from_rows(&[vec![0.3], vec![-1.0]]).unwrap();
        let s = entropy_term(&data, &single, &single, 0.0, &CouplingMatrix::all_ones(1)).unwrap();
        assert!(s.abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_data(&mut rng, 10);
        let p = random_params(&mut rng, 3);
        let coupling = CouplingMatrix::all_ones(3);
        let h = MixtureEvaluator::new(&p).unwrap().energies(&data).unwrap();
        let gamma = 0.6;
        let mut neg_vn = 0.0;
        for i in 0..data.len() {
            let row: Vec<f64> = h.row(i).iter().copied().collect();
            let probs = GibbsState::new(&row, gamma, &coupling)
                .unwrap()
                .probabilities();
            neg_vn += probs.iter().map(|q| q * q.ln()).sum::<f64>();
        }
        let s = entropy_term(&data, &p, &p, gamma, &coupling).unwrap();
        assert!((s - neg_vn).abs() < 1e-12 * (1.0 + s.abs()));
    }

    #[test]
    fn free_energy_splits_into_energy_and_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coupling = CouplingMatrix::all_ones(3);
        for _ in 0..20 {
            let data = random_data(&mut rng, 15);
            let p = random_params(&mut rng, 3);
            let gamma = rng.random_range(0.0..2.0);
            let f = quantum_estep(&data, &p, gamma, &coupling)
                .unwrap()
                .free_energy;
            let u = u_function(&data, &p, &p, gamma, &coupling).unwrap();
            let s = entropy_term(&data, &p, &p, gamma, &coupling).unwrap();
            assert!((f - (-u + s)).abs() <= 1e-8 * f.abs(), "{f} vs {}", -u + s);
            let lz: f64 = quantum_estep(&data, &p, gamma, &coupling)
                .unwrap()
                .log_partition
                .iter()
                .sum();
            assert!((f + lz).abs() <= 1e-10 * f.abs());
        }
    }

    #[test]
    fn small_gamma_is_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coupling = CouplingMatrix::all_ones(3);
        for _ in 0..20 {
            let data = random_data(&mut rng, 25);
            let p = random_params(&mut rng, 3);
            let q = quantum_estep(&data, &p, 1e-8, &coupling).unwrap();
            let c = classical_posterior(&data, &p).unwrap();
            assert!((q.responsibilities.matrix() - c.matrix()).amax() <= 1e-6);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_data(&mut rng, 20);
        let p = random_params(&mut rng, 3);
        let perm = [2, 0, 1];
        let q = p.permuted(&perm).unwrap();
        let coupling = CouplingMatrix::all_ones(3);
        let base = quantum_estep(&data, &p, 0.8, &coupling)
            .unwrap()
            .responsibilities;
        let moved = quantum_estep(&data, &q, 0.8, &coupling)
            .unwrap()
            .responsibilities;
        for i in 0..data.len() {
            for (k, &src) in perm.iter().enumerate() {
                assert!((moved.matrix()[(i, k)] - base.matrix()[(i, src)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn far_points_do_not_underflow() {
        let p = three_cluster_params();
        let data = Dataset::from_rows(&[vec![400.0, -300.0]]).unwrap();
        for r in [
            classical_posterior(&data, &p).unwrap(),
            tempered_posterior(&data, &p, 0.7).unwrap(),
            quantum_estep(&data, &p, 1.0, &CouplingMatrix::all_ones(3))
                .unwrap()
                .responsibilities,
        ] {
            assert!(r.row_check().is_valid(1e-10));
        }
    }
}
