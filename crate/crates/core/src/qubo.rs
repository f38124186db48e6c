//! QUBO assembly for the classic L1, gradient-aware and hybrid formulations.
//!
//! Energy convention: `E(p) = Σ_i Q_ii p_i + Σ_{i<j} Q_ij p_i p_j`, minimized,
//! with `p_i = 1` meaning filter `i` is pruned. Every unordered pair is counted
//! once, so the factor 2 on the redundancy coupling is a real coefficient.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{PruningMask, PruningProblem};

pub const DEFAULT_EPS: f64 = 1e-12;
pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_POWER_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "classic")]
    ClassicL1,
    #[serde(rename = "gradient")]
    GradientAware,
    Hybrid,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ClassicL1, Variant::GradientAware, Variant::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ClassicL1 => "classic",
            Variant::GradientAware => "gradient",
            Variant::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" | "classic_l1" => Ok(Variant::ClassicL1),
            "gradient" | "gradient_aware" => Ok(Variant::GradientAware),
            "hybrid" => Ok(Variant::Hybrid),
            other => Err(Error::Argument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    #[default]
    None,
    Weight,
    Channel,
}

impl FromStr for FisherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FisherKind::None),
            "weight" => Ok(FisherKind::Weight),
            "channel" => Ok(FisherKind::Channel),
            other => Err(Error::Argument(format!("unknown fisher kind {other:?}"))),
        }
    }
}

/// Weights of the QUBO terms. All must be finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoefficientSet {
    pub alpha_t: f64,
    pub alpha_f: f64,
    pub beta_diag: f64,
    pub beta_off: f64,
    pub lambda_sim: f64,
    pub gamma: f64,
    pub fisher_kind: FisherKind,
}

impl Default for CoefficientSet {
    fn default() -> Self {
        Self {
            alpha_t: 1.0,
            alpha_f: 0.0,
            beta_diag: 1.0,
            beta_off: 1.0,
            lambda_sim: 1.0,
            gamma: 0.0,
            fisher_kind: FisherKind::None,
        }
    }
}

impl CoefficientSet {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_t", self.alpha_t),
            ("alpha_f", self.alpha_f),
            ("beta_diag", self.beta_diag),
            ("beta_off", self.beta_off),
            ("lambda_sim", self.lambda_sim),
            ("gamma", self.gamma),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Argument(format!(
                    "coefficient {name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Value of a coefficient by its name (`alpha_t`, `alpha_f`, `beta_diag`, `beta_off`, `lambda_sim`, `gamma`).
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "alpha_t" => Some(self.alpha_t),
            "alpha_f" => Some(self.alpha_f),
            "beta_diag" => Some(self.beta_diag),
            "beta_off" => Some(self.beta_off),
            "lambda_sim" | "lambda" => Some(self.lambda_sim),
            "gamma" => Some(self.gamma),
            _ => None,
        }
    }
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds from row-major data; panics unless `data.len() == n * n`.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Fraction of total parameters held by each filter; sums to one.
pub fn capacity_fractions(problem: &PruningProblem) -> Vec<f64> {
    let counts = problem.param_counts();
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

/// Redundancy matrix `A_ij = s_i s_j`.
pub fn outer_redundancy(scores: &[f64]) -> SymMatrix {
    let n = scores.len();
    let mut a = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            a.set_sym(i, j, scores[i] * scores[j]);
        }
    }
    a
}

/// Population standard deviation; zero for an empty slice.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Result of dividing one component by `std(|x|) + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledComponent {
    pub values: Vec<f64>,
    pub std: f64,
    pub degenerate: bool,
}

/// Relative spread below which magnitudes count as constant; absorbs the
/// rounding noise left by the mean of identical values.
const ZERO_SPREAD_REL: f64 = 1e-12;

/// Standard deviation of `magnitudes`, or zero when it is at rounding level.
fn magnitude_spread(magnitudes: &[f64]) -> f64 {
    let std = std_dev(magnitudes);
    let max = magnitudes.iter().fold(0.0, |m: f64, v| m.max(*v));
    if std <= ZERO_SPREAD_REL * max {
        0.0
    } else {
        std
    }
}

pub fn scale_unit_std(values: &[f64], eps: f64) -> ScaledComponent {
    let magnitudes: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let std = magnitude_spread(&magnitudes);
    let denom = std + eps;
    ScaledComponent {
        values: values.iter().map(|v| v / denom).collect(),
        std,
        degenerate: std == 0.0,
    }
}

/// Importance per parameter, `I_i / N_i`.
pub fn per_parameter(importance: &[f64], param_counts: &[f64]) -> Vec<f64> {
    importance
        .iter()
        .zip(param_counts)
        .map(|(i, n)| i / n)
        .collect()
}

/// Variance-scaled QUBO ingredients before the spectral cap.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedComponents {
    pub a_hat: SymMatrix,
    pub importance_hat: Vec<f64>,
    pub capacity_hat: Vec<f64>,
    /// Names of components whose magnitude spread was zero.
    pub degenerate: Vec<&'static str>,
}

/// Scales `diag(A)`, the nonzero off-diagonal of `A`, the per-parameter
/// importance and `D` each to unit standard deviation of magnitudes.
pub fn normalize_components(
    a: &SymMatrix,
    importance: &[f64],
    capacity: &[f64],
    param_counts: &[f64],
    eps: f64,
) -> NormalizedComponents {
    let n = a.n();
    let mut degenerate = Vec::new();

    let diag = scale_unit_std(&a.diagonal(), eps);
    if diag.degenerate {
        degenerate.push("a_diag");
    }

    let mut off = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let v = a.get(i, j);
            if v != 0.0 {
                off.push(v);
            }
        }
    }
    let off_magnitudes: Vec<f64> = off.iter().map(|v| v.abs()).collect();
    let off_std = magnitude_spread(&off_magnitudes);
    if off_std == 0.0 && !off.is_empty() {
        degenerate.push("a_offdiag");
    }
    let off_denom = off_std + eps;

    let mut a_hat = SymMatrix::zeros(n);
    for i in 0..n {
        a_hat.set_sym(i, i, diag.values[i]);
        for j in i + 1..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a_hat.set_sym(i, j, v / off_denom);
            }
        }
    }

    let importance_hat = scale_unit_std(&per_parameter(importance, param_counts), eps);
    if importance_hat.degenerate {
        degenerate.push("importance");
    }
    let capacity_hat = scale_unit_std(capacity, eps);
    if capacity_hat.degenerate {
        degenerate.push("capacity");
    }
    for name in &degenerate {
        log::warn!("QUBO component {name} has zero magnitude spread; dividing by eps = {eps:e}");
    }

    NormalizedComponents {
        a_hat,
        importance_hat: importance_hat.values,
        capacity_hat: capacity_hat.values,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Estimates the spectral norm of a symmetric matrix.
///
/// Iterates `v ← Av / ‖Av‖` from the normalized all-ones vector and tracks
/// `‖Av‖`, the square root of the Rayleigh quotient of `A²`. Stops once the
/// estimate changes by at most `tol` relative.
pub fn spectral_norm_estimate(a: &SymMatrix, iters: usize, tol: f64) -> PowerIteration {
    let n = a.n();
    if n == 0 {
        return PowerIteration {
            sigma: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    let mut prev_rayleigh = f64::NAN;
    for k in 1..=iters.max(1) {
        let w = a.mul_vec(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return PowerIteration {
                sigma: 0.0,
                iterations: k,
                converged: true,
            };
        }
        sigma = norm;
        // A stable Rayleigh quotient alone can stall when the two leading
        // eigenvalues are close; a small eigen-residual bounds the error.
        let rayleigh: f64 = v.iter().zip(&w).map(|(x, y)| x * y).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(y, x)| (y - rayleigh * x).powi(2))
            .sum::<f64>()
            .sqrt();
        let stable = (rayleigh - prev_rayleigh).abs() <= tol * rayleigh.abs();
        prev_rayleigh = rayleigh;
        v = w.into_iter().map(|x| x / norm).collect();
        if stable && residual <= tol * sigma {
            return PowerIteration {
                sigma,
                iterations: k,
                converged: true,
            };
        }
    }
    PowerIteration {
        sigma,
        iterations: iters.max(1),
        converged: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCap {
    pub matrix: SymMatrix,
    pub estimate: PowerIteration,
    pub applied: bool,
}

/// Rescales `a` by `1/σ` when the spectral norm `σ` exceeds one.
///
/// `σ` is the power-iteration estimate; if that did not stabilize, the
/// smaller of the Frobenius and max-row-sum norms is used instead, both of
/// which bound the spectral norm from above.
pub fn cap_spectral_norm(a: &SymMatrix, iters: usize, tol: f64) -> SpectralCap {
    let estimate = spectral_norm_estimate(a, iters, tol);
    let sigma = if estimate.converged {
        estimate.sigma
    } else {
        let bound = norm_upper_bound(a);
        log::warn!(
            "spectral norm estimate did not stabilize in {} iterations (sigma ~ {}); capping with upper bound {}",
            estimate.iterations,
            estimate.sigma,
            bound
        );
        bound
    };
    let mut matrix = a.clone();
    let applied = sigma > 1.0;
    if applied {
        matrix.scale(1.0 / sigma);
    }
    SpectralCap {
        matrix,
        estimate,
        applied,
    }
}

fn norm_upper_bound(a: &SymMatrix) -> f64 {
    let frobenius = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_row = (0..a.n())
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    frobenius.min(max_row)
}

/// Normalized ingredients kept with an assembled QUBO so that `gamma`
/// can be changed without repeating normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuboComponents {
    pub variant: Variant,
    pub coeffs: CoefficientSet,
    /// Variance-scaled and spectrally capped redundancy matrix.
    pub a_hat: SymMatrix,
    pub taylor_hat: Vec<f64>,
    pub fisher_hat: Option<Vec<f64>>,
    pub capacity_hat: Vec<f64>,
    /// `(i, j, max(0, S_ij))` for same-layer pairs with positive similarity.
    pub similarity: Vec<(usize, usize, f64)>,
    pub spectral: PowerIteration,
    pub degenerate: Vec<&'static str>,
}

/// Diagonal as an affine function of `gamma`: `Q_ii = base_i - gamma * capacity_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaModel {
    pub base_diag: Vec<f64>,
    pub capacity_hat: Vec<f64>,
    pub gamma: f64,
}

/// QUBO in upper-triangular energy form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuboMatrix {
    n: usize,
    diag: Vec<f64>,
    /// Symmetric storage of the `i < j` couplings, zero diagonal.
    coupling: SymMatrix,
    gamma_model: Option<GammaModel>,
    components: Option<Box<QuboComponents>>,
}

impl QuboMatrix {
    /// Builds a QUBO from its diagonal and `(i, j, value)` couplings with `i != j`.
    /// Repeated pairs accumulate.
    pub fn from_parts(diag: Vec<f64>, upper: &[(usize, usize, f64)]) -> Result<Self> {
        let n = diag.len();
        let mut coupling = SymMatrix::zeros(n);
        for &(i, j, v) in upper {
            if i >= n || j >= n {
                return Err(Error::Index {
                    index: i.max(j),
                    len: n,
                });
            }
            if i == j {
                return Err(Error::Argument(format!(
                    "coupling ({i}, {j}) on the diagonal"
                )));
            }
            let cur = coupling.get(i, j);
            coupling.set_sym(i, j, cur + v);
        }
        let q = Self {
            n,
            diag,
            coupling,
            gamma_model: None,
            components: None,
        };
        q.check_finite()?;
        Ok(q)
    }

    /// QUBO whose diagonal is `base_diag - gamma * capacity`, so that
    /// [`QuboMatrix::with_gamma`] is available.
    pub fn parametric(
        base_diag: Vec<f64>,
        capacity: Vec<f64>,
        upper: &[(usize, usize, f64)],
        gamma: f64,
    ) -> Result<Self> {
        if capacity.len() != base_diag.len() {
            return Err(Error::Dimension {
                expected: base_diag.len(),
                actual: capacity.len(),
            });
        }
        let mut q = Self::from_parts(base_diag.clone(), upper)?;
        q.gamma_model = Some(GammaModel {
            base_diag,
            capacity_hat: capacity,
            gamma: 0.0,
        });
        q.with_gamma(gamma)
    }

    /// Builds a QUBO from a dense matrix, reading `Q_ii` and `Q_ij` for `i < j`.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let diag = (0..n).map(|i| rows[i][i]).collect();
        let mut upper = Vec::new();
        for i in 0..n {
            if rows[i].len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: rows[i].len(),
                });
            }
            for j in i + 1..n {
                if rows[i][j] != 0.0 {
                    upper.push((i, j, rows[i][j]));
                }
            }
        }
        Self::from_parts(diag, &upper)
    }

    fn check_finite(&self) -> Result<()> {
        if self
            .diag
            .iter()
            .chain(self.coupling.data())
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Validation("QUBO contains non-finite entries".into()))
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    #[inline]
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.coupling.get(i, j)
    }

    /// Row `i` of the symmetric coupling storage (zero at `i`).
    #[inline]
    pub fn coupling_row(&self, i: usize) -> &[f64] {
        self.coupling.row(i)
    }

    /// Nonzero `(i, j, Q_ij)` with `i < j`, in row-major order.
    pub fn upper_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let v = self.coupling.get(i, j);
                if v != 0.0 {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    pub fn components(&self) -> Option<&QuboComponents> {
        self.components.as_deref()
    }

    /// Same QUBO with a different capacity incentive; only the diagonal changes.
    pub fn with_gamma(&self, gamma: f64) -> Result<QuboMatrix> {
        let model = self.gamma_model.as_ref().ok_or_else(|| {
            Error::MissingData("QUBO has no capacity term; gamma is fixed".into())
        })?;
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::Argument(format!(
                "gamma = {gamma} must be finite and >= 0"
            )));
        }
        let diag = diagonal_at(&model.base_diag, &model.capacity_hat, gamma);
        let components = self.components.clone().map(|mut c| {
            c.coeffs.gamma = gamma;
            c
        });
        Ok(QuboMatrix {
            n: self.n,
            diag,
            coupling: self.coupling.clone(),
            gamma_model: Some(GammaModel {
                gamma,
                ..model.clone()
            }),
            components,
        })
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma_model.as_ref().map(|m| m.gamma)
    }

    pub fn gamma_model(&self) -> Option<&GammaModel> {
        self.gamma_model.as_ref()
    }

    fn check_len(&self, p: &PruningMask) -> Result<()> {
        if p.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                actual: p.len(),
            });
        }
        Ok(())
    }

    /// `Σ_i Q_ii p_i + Σ_{i<j} Q_ij p_i p_j`.
    pub fn energy(&self, p: &PruningMask) -> Result<f64> {
        self.check_len(p)?;
        Ok(self.energy_bits(p.bits()))
    }

    pub(crate) fn energy_bits(&self, bits: &[u8]) -> f64 {
        let ones: Vec<usize> = (0..self.n).filter(|&i| bits[i] == 1).collect();
        let mut e = 0.0;
        for (a, &i) in ones.iter().enumerate() {
            e += self.diag[i];
            let row = self.coupling.row(i);
            for &j in &ones[a + 1..] {
                e += row[j];
            }
        }
        e
    }

    /// Energy change from flipping bit `i`, in `O(N)`.
    pub fn delta_energy(&self, p: &PruningMask, i: usize) -> Result<f64> {
        self.check_len(p)?;
        if i >= self.n {
            return Err(Error::Index {
                index: i,
                len: self.n,
            });
        }
        Ok(self.delta_bits(p.bits(), i))
    }

    #[inline]
    pub(crate) fn delta_bits(&self, bits: &[u8], i: usize) -> f64 {
        let field: f64 = self
            .coupling
            .row(i)
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b == 1)
            .map(|(w, _)| w)
            .sum();
        let s = self.diag[i] + field;
        if bits[i] == 1 {
            -s
        } else {
            s
        }
    }

    pub fn to_export(&self) -> QuboExport {
        QuboExport {
            n: self.n,
            diag: self.diag.clone(),
            upper: self.upper_entries(),
            components: self.components.as_deref().map(ComponentExport::from),
        }
    }

    pub fn from_export(export: &QuboExport) -> Result<QuboMatrix> {
        if export.diag.len() != export.n {
            return Err(Error::Dimension {
                expected: export.n,
                actual: export.diag.len(),
            });
        }
        Self::from_parts(export.diag.clone(), &export.upper)
    }

    pub fn save_export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.to_export()).expect("export serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_export(path: impl AsRef<Path>) -> Result<QuboMatrix> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let export: QuboExport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_export(&export)
    }
}

/// Diagnostic dump of a QUBO and the normalized pieces it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuboExport {
    pub n: usize,
    pub diag: Vec<f64>,
    pub upper: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<ComponentExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentExport {
    pub variant: Variant,
    pub coefficients: CoefficientSet,
    pub a_hat_diag: Vec<f64>,
    pub a_hat_upper: Vec<(usize, usize, f64)>,
    pub taylor_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_hat: Option<Vec<f64>>,
    pub capacity_hat: Vec<f64>,
    pub similarity: Vec<(usize, usize, f64)>,
    pub spectral: PowerIteration,
    pub degenerate: Vec<String>,
}

impl From<&QuboComponents> for ComponentExport {
    fn from(c: &QuboComponents) -> Self {
        let n = c.a_hat.n();
        let mut a_hat_upper = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let v = c.a_hat.get(i, j);
                if v != 0.0 {
                    a_hat_upper.push((i, j, v));
                }
            }
        }
        Self {
            variant: c.variant,
            coefficients: c.coeffs,
            a_hat_diag: c.a_hat.diagonal(),
            a_hat_upper,
            taylor_hat: c.taylor_hat.clone(),
            fisher_hat: c.fisher_hat.clone(),
            capacity_hat: c.capacity_hat.clone(),
            similarity: c.similarity.clone(),
            spectral: c.spectral,
            degenerate: c.degenerate.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn diagonal_at(base: &[f64], capacity_hat: &[f64], gamma: f64) -> Vec<f64> {
    base.iter()
        .zip(capacity_hat)
        .map(|(b, d)| b - gamma * d)
        .collect()
}

fn fisher_scores(problem: &PruningProblem, kind: FisherKind) -> Result<Option<Vec<f64>>> {
    match kind {
        FisherKind::None => Ok(None),
        FisherKind::Weight => problem.fisher_w_scores().map(Some).ok_or_else(|| {
            Error::MissingData("weight-Fisher scores (fisher_w) absent for some filters".into())
        }),
        FisherKind::Channel => problem.fisher_c_scores().map(Some).ok_or_else(|| {
            Error::MissingData("channel-Fisher scores (fisher_c) absent for some filters".into())
        }),
    }
}

fn positive_similarity(problem: &PruningProblem) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (&layer, members) in problem.layers() {
        if members.len() < 2 {
            continue;
        }
        let block = problem.similarity_for(layer).ok_or_else(|| {
            Error::MissingData(format!(
                "hybrid variant needs a similarity block for layer {layer}"
            ))
        })?;
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let s = block.matrix[a][b].max(0.0);
                if s > 0.0 {
                    out.push((members[a], members[b], s));
                }
            }
        }
    }
    Ok(out)
}

/// Assembles the QUBO for `variant` with the default normalization settings.
pub fn assemble_qubo(
    problem: &PruningProblem,
    coeffs: &CoefficientSet,
    variant: Variant,
) -> Result<QuboMatrix> {
    assemble_qubo_with(
        problem,
        coeffs,
        variant,
        DEFAULT_EPS,
        DEFAULT_POWER_ITERS,
        DEFAULT_POWER_TOL,
    )
}

pub fn assemble_qubo_with(
    problem: &PruningProblem,
    coeffs: &CoefficientSet,
    variant: Variant,
    eps: f64,
    power_iters: usize,
    power_tol: f64,
) -> Result<QuboMatrix> {
    coeffs.validate()?;
    let n = problem.n();
    let uses_fisher = variant != Variant::ClassicL1 && coeffs.fisher_kind != FisherKind::None;
    let fisher_raw = if uses_fisher {
        fisher_scores(problem, coeffs.fisher_kind)?
    } else {
        None
    };
    let similarity = if variant == Variant::Hybrid {
        positive_similarity(problem)?
    } else {
        Vec::new()
    };

    let param_counts = problem.param_counts();
    let capacity = capacity_fractions(problem);
    let a = outer_redundancy(&problem.l1_scores());
    let norm = normalize_components(&a, &problem.taylor_scores(), &capacity, &param_counts, eps);
    let mut degenerate = norm.degenerate;

    let fisher_hat = fisher_raw.map(|raw| {
        let scaled = scale_unit_std(&per_parameter(&raw, &param_counts), eps);
        if scaled.degenerate {
            log::warn!(
                "QUBO component fisher has zero magnitude spread; dividing by eps = {eps:e}"
            );
            degenerate.push("fisher");
        }
        scaled.values
    });

    let cap = cap_spectral_norm(&norm.a_hat, power_iters, power_tol);
    let a_hat = cap.matrix;

    let base_diag: Vec<f64> = match variant {
        Variant::ClassicL1 => (0..n).map(|i| a_hat.get(i, i)).collect(),
        Variant::GradientAware | Variant::Hybrid => (0..n)
            .map(|i| {
                let mut d =
                    coeffs.beta_diag * a_hat.get(i, i) + coeffs.alpha_t * norm.importance_hat[i];
                if let Some(f) = &fisher_hat {
                    d += coeffs.alpha_f * f[i];
                }
                d
            })
            .collect(),
    };
    let off_weight = match variant {
        Variant::ClassicL1 => 2.0,
        Variant::GradientAware | Variant::Hybrid => 2.0 * coeffs.beta_off,
    };
    let mut coupling = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            coupling.set_sym(i, j, off_weight * a_hat.get(i, j));
        }
    }
    for &(i, j, s) in &similarity {
        let v = coupling.get(i, j) + coeffs.lambda_sim * s;
        coupling.set_sym(i, j, v);
    }

    let diag = diagonal_at(&base_diag, &norm.capacity_hat, coeffs.gamma);
    let q = QuboMatrix {
        n,
        diag,
        coupling,
        gamma_model: Some(GammaModel {
            base_diag,
            capacity_hat: norm.capacity_hat.clone(),
            gamma: coeffs.gamma,
        }),
        components: Some(Box::new(QuboComponents {
            variant,
            coeffs: *coeffs,
            a_hat,
            taylor_hat: norm.importance_hat,
            fisher_hat,
            capacity_hat: norm.capacity_hat,
            similarity,
            spectral: cap.estimate,
            degenerate,
        })),
    };
    q.check_finite()?;
    Ok(q)
}

pub fn energy(q: &QuboMatrix, p: &PruningMask) -> Result<f64> {
    q.energy(p)
}

pub fn delta_energy(q: &QuboMatrix, p: &PruningMask, flip_index: usize) -> Result<f64> {
    q.delta_energy(p, flip_index)
}
