//! Panel VECM data model.
//!
//! The observation equation for individual `i` at time `t` is
//!
//! ```text
//! dy[i,t] = Pi_i y[i,t-1] + sum_h Gamma[i,h] dy[i,t-h] + Phi_i d[t] + eps[i,t]
//! ```
//!
//! with `Pi_i = alpha_i beta_i^T` of rank `r_i`. Two equivalent regression
//! forms of this equation drive the sampler:
//!
//! * the short-run form regresses `dy` on `(beta_i^T y[i,t-1], lagged dy,
//!   deterministic terms)` with coefficient vector `b` housing
//!   `(alpha_i, Gamma_i, Phi_i)`;
//! * the long-run form moves the lag/deterministic part to the left-hand side
//!   and regresses on `A_i (x) y[i,-1]` with coefficient vector
//!   `vec(beta*_i)`, where `A_i` is the semi-orthogonal version of `alpha_i`
//!   and `beta*_i = beta_i kappa_i` carries the cointegration coordinates.
//!
//! Both forms share the error vector `e = vec(eps)` with covariance
//! `Sigma (x) F_rho`, where `F_rho` is the AR(1) correlation matrix over
//! time (the identity when `rho = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    ar1_inverse, ar1_log_det, block_diag, kron, sym_inv_sqrt, sym_sqrt, vectorize, Matrix, Vector,
};

/// Deterministic regressors shared by all individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Deterministic {
    None,
    #[default]
    Constant,
    ConstantTrend,
}

impl Deterministic {
    pub fn k_d(self) -> usize {
        match self {
            Deterministic::None => 0,
            Deterministic::Constant => 1,
            Deterministic::ConstantTrend => 2,
        }
    }

    /// Deterministic row for usable-sample index `s` (0-based).
    pub fn row(self, s: usize) -> Vec<f64> {
        match self {
            Deterministic::None => vec![],
            Deterministic::Constant => vec![1.0],
            Deterministic::ConstantTrend => vec![1.0, (s + 1) as f64],
        }
    }
}

/// Dimensions and structure of the panel model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSpec {
    /// Number of individuals `N`.
    pub n_individuals: usize,
    /// Variables per individual `n`.
    pub n_vars: usize,
    /// Usable time length `T` after differencing and lagging.
    pub usable_len: usize,
    /// Lag count `L`, common to all individuals.
    pub n_lags: usize,
    /// Per-individual cointegration ranks `r_i`.
    pub ranks: Vec<usize>,
    /// Deterministic-term layout.
    pub deterministic: Deterministic,
}

impl PanelSpec {
    pub fn new(
        n_individuals: usize,
        n_vars: usize,
        usable_len: usize,
        n_lags: usize,
        ranks: Vec<usize>,
        deterministic: Deterministic,
    ) -> Result<Self> {
        let spec = PanelSpec {
            n_individuals,
            n_vars,
            usable_len,
            n_lags,
            ranks,
            deterministic,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec for `data`, deriving the usable length from the raw one.
    pub fn for_data(
        data: &PanelData,
        n_lags: usize,
        ranks: Vec<usize>,
        deterministic: Deterministic,
    ) -> Result<Self> {
        let raw_len = data.raw_len();
        if raw_len < n_lags + 2 {
            return Err(Error::InsufficientData {
                context: "raw length must allow first differences and lags",
                usable: raw_len,
                required: n_lags + 2,
            });
        }
        Self::new(
            data.n_individuals(),
            data.n_vars(),
            raw_len - n_lags - 1,
            n_lags,
            ranks,
            deterministic,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_vars == 0 {
            return Err(Error::InvalidConfig {
                message: "panel needs at least one individual and one variable".into(),
            });
        }
        if self.ranks.len() != self.n_individuals {
            return Err(Error::InvalidConfig {
                message: format!(
                    "ranks has {} entries but the panel has {} individuals",
                    self.ranks.len(),
                    self.n_individuals
                ),
            });
        }
        // Genuine cointegration needs 1 <= r_i <= n - 1. The boundary cases
        // stay representable: r_i = 0 is the pure difference-VAR used by rank
        // profiling, and r_i = n a full-rank (stationary) long-run matrix.
        for (i, &r) in self.ranks.iter().enumerate() {
            if r > self.n_vars {
                return Err(Error::InvalidConfig {
                    message: format!("rank r[{i}] = {r} must be at most n = {}", self.n_vars),
                });
            }
        }
        let max_r = self.ranks.iter().copied().max().unwrap_or(0);
        if self.usable_len > 0 && self.usable_len <= self.k() + max_r {
            return Err(Error::InsufficientData {
                context: "usable length must exceed k + max rank",
                usable: self.usable_len,
                required: self.k() + max_r,
            });
        }
        Ok(())
    }

    /// Regressors per equation excluding error-correction terms:
    /// `n * L` lagged differences plus the deterministic terms.
    pub fn k(&self) -> usize {
        self.n_vars * self.n_lags + self.deterministic.k_d()
    }

    /// Mean cointegration rank.
    pub fn rbar(&self) -> f64 {
        self.ranks.iter().sum::<usize>() as f64 / self.n_individuals as f64
    }

    pub fn rank_sum(&self) -> usize {
        self.ranks.iter().sum()
    }

    /// Length of the stacked short-run coefficient vector `b`.
    pub fn b_len(&self) -> usize {
        self.ranks
            .iter()
            .map(|&r| self.n_vars * (self.k() + r))
            .sum()
    }

    /// Length of the stacked long-run coefficient vector.
    pub fn beta_star_len(&self) -> usize {
        self.n_vars * self.rank_sum()
    }

    /// Offset of individual `i`'s block inside `b`.
    pub fn b_offset(&self, i: usize) -> usize {
        self.ranks[..i]
            .iter()
            .map(|&r| self.n_vars * (self.k() + r))
            .sum()
    }

    /// Offset of individual `i`'s block inside `b_beta_star`.
    pub fn beta_star_offset(&self, i: usize) -> usize {
        self.n_vars * self.ranks[..i].iter().sum::<usize>()
    }

    /// The model's nominal parameter count `Nn(k + 2 rbar + 1) + 2`.
    pub fn nominal_param_count(&self) -> usize {
        let nn = self.n_individuals * self.n_vars;
        nn * (self.k() + 1) + 2 * self.n_vars * self.rank_sum() + 2
    }

    /// Free entries actually sampled: `b`, `b_beta_star`, the symmetric
    /// covariance, the two scalars, and `rho` when it is sampled.
    pub fn free_param_count(&self, rho_sampled: bool) -> usize {
        let nn = self.n_individuals * self.n_vars;
        self.b_len() + self.beta_star_len() + nn * (nn + 1) / 2 + 2 + usize::from(rho_sampled)
    }
}

/// Observed panel: one levels matrix per individual (raw length x n).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    levels: Vec<Matrix>,
}

impl PanelData {
    pub fn new(levels: Vec<Matrix>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidConfig {
                message: "panel data needs at least one individual".into(),
            });
        }
        let shape = levels[0].shape();
        for m in &levels {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch {
                    context: "all individuals must share the same raw length and variable count",
                    expected_rows: shape.0,
                    expected_cols: shape.1,
                    rows: m.nrows(),
                    cols: m.ncols(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "panel levels",
                });
            }
        }
        Ok(PanelData { levels })
    }

    pub fn n_individuals(&self) -> usize {
        self.levels.len()
    }

    pub fn n_vars(&self) -> usize {
        self.levels[0].ncols()
    }

    pub fn raw_len(&self) -> usize {
        self.levels[0].nrows()
    }

    pub fn levels(&self, i: usize) -> &Matrix {
        &self.levels[i]
    }

    pub fn individuals(&self) -> &[Matrix] {
        &self.levels
    }

    /// First differences for individual `i` over the usable sample.
    pub fn differences(&self, i: usize, spec: &PanelSpec) -> Matrix {
        let y = &self.levels[i];
        let t0 = spec.n_lags + 1;
        Matrix::from_fn(spec.usable_len, spec.n_vars, |s, v| {
            y[(t0 + s, v)] - y[(t0 + s - 1, v)]
        })
    }

    /// Lagged levels `y[i, t-1]` over the usable sample.
    pub fn lagged_levels(&self, i: usize, spec: &PanelSpec) -> Matrix {
        let y = &self.levels[i];
        let t0 = spec.n_lags + 1;
        Matrix::from_fn(spec.usable_len, spec.n_vars, |s, v| y[(t0 + s - 1, v)])
    }

    /// Lagged differences `dy[i, t-h]`, `h = 1..=L`, then deterministic
    /// terms: the `w` block shared by both regression forms (T x k).
    pub fn lagged_diff_block(&self, i: usize, spec: &PanelSpec) -> Matrix {
        let y = &self.levels[i];
        let t0 = spec.n_lags + 1;
        let n = spec.n_vars;
        Matrix::from_fn(spec.usable_len, spec.k(), |s, c| {
            if c < n * spec.n_lags {
                let h = c / n + 1;
                let v = c % n;
                let t = t0 + s - h;
                y[(t, v)] - y[(t - 1, v)]
            } else {
                spec.deterministic.row(s)[c - n * spec.n_lags]
            }
        })
    }
}

/// One complete parameter state of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct VecmParams {
    /// Contemporaneous error covariance, `Nn x Nn`.
    pub sigma: Matrix,
    /// Stacked short-run coefficients: per individual,
    /// `vec((alpha_i, Gamma_{i,1..L}, Phi_i)^T)`.
    pub b: Vector,
    /// Stacked `vec(beta*_i)`.
    pub b_beta_star: Vector,
    /// Shrinkage scale on all regression coefficients.
    pub nu: f64,
    /// Projection-prior weight; 1 when no restriction is configured.
    pub tau: f64,
    /// AR(1) error autocorrelation; 0 unless sampled.
    pub rho: f64,
}

impl VecmParams {
    pub fn zero(spec: &PanelSpec) -> Self {
        let nn = spec.n_individuals * spec.n_vars;
        VecmParams {
            sigma: Matrix::identity(nn, nn),
            b: Vector::zeros(spec.b_len()),
            b_beta_star: Vector::zeros(spec.beta_star_len()),
            nu: 1.0,
            tau: 1.0,
            rho: 0.0,
        }
    }

    pub fn validate_dims(&self, spec: &PanelSpec) -> Result<()> {
        let nn = spec.n_individuals * spec.n_vars;
        if self.sigma.shape() != (nn, nn) {
            return Err(Error::DimensionMismatch {
                context: "sigma",
                expected_rows: nn,
                expected_cols: nn,
                rows: self.sigma.nrows(),
                cols: self.sigma.ncols(),
            });
        }
        if self.b.len() != spec.b_len() {
            return Err(Error::DimensionMismatch {
                context: "b",
                expected_rows: spec.b_len(),
                expected_cols: 1,
                rows: self.b.len(),
                cols: 1,
            });
        }
        if self.b_beta_star.len() != spec.beta_star_len() {
            return Err(Error::DimensionMismatch {
                context: "b_beta_star",
                expected_rows: spec.beta_star_len(),
                expected_cols: 1,
                rows: self.b_beta_star.len(),
                cols: 1,
            });
        }
        Ok(())
    }

    /// Individual `i`'s coefficient matrix `B_i` of shape `(k + r_i) x n`.
    pub fn big_b(&self, spec: &PanelSpec, i: usize) -> Matrix {
        let rows = spec.k() + spec.ranks[i];
        let off = spec.b_offset(i);
        Matrix::from_column_slice(
            rows,
            spec.n_vars,
            &self.b.as_slice()[off..off + rows * spec.n_vars],
        )
    }

    pub fn set_big_b(&mut self, spec: &PanelSpec, i: usize, big_b: &Matrix) {
        let rows = spec.k() + spec.ranks[i];
        let off = spec.b_offset(i);
        self.b.as_mut_slice()[off..off + rows * spec.n_vars]
            .copy_from_slice(vectorize(big_b).as_slice());
    }

    /// Adjustment loadings `alpha_i` (n x r_i).
    pub fn alpha(&self, spec: &PanelSpec, i: usize) -> Matrix {
        self.big_b(spec, i).rows(0, spec.ranks[i]).transpose()
    }

    pub fn set_alpha(&mut self, spec: &PanelSpec, i: usize, alpha: &Matrix) {
        let mut big_b = self.big_b(spec, i);
        big_b
            .rows_mut(0, spec.ranks[i])
            .copy_from(&alpha.transpose());
        self.set_big_b(spec, i, &big_b);
    }

    /// Short-run lag matrix `Gamma_{i,h}` (n x n), `h` in `1..=L`.
    pub fn gamma(&self, spec: &PanelSpec, i: usize, h: usize) -> Matrix {
        assert!((1..=spec.n_lags).contains(&h));
        let start = spec.ranks[i] + (h - 1) * spec.n_vars;
        self.big_b(spec, i).rows(start, spec.n_vars).transpose()
    }

    /// Deterministic-term coefficients `Phi_i` (n x k_d).
    pub fn phi(&self, spec: &PanelSpec, i: usize) -> Matrix {
        let start = spec.ranks[i] + spec.n_lags * spec.n_vars;
        self.big_b(spec, i)
            .rows(start, spec.deterministic.k_d())
            .transpose()
    }

    /// Lag/deterministic coefficient block `C_i` (k x n).
    pub fn c_mat(&self, spec: &PanelSpec, i: usize) -> Matrix {
        self.big_b(spec, i)
            .rows(spec.ranks[i], spec.k())
            .into_owned()
    }

    /// Long-run coordinates `beta*_i` (n x r_i).
    pub fn beta_star(&self, spec: &PanelSpec, i: usize) -> Matrix {
        let off = spec.beta_star_offset(i);
        let len = spec.n_vars * spec.ranks[i];
        Matrix::from_column_slice(
            spec.n_vars,
            spec.ranks[i],
            &self.b_beta_star.as_slice()[off..off + len],
        )
    }

    pub fn set_beta_star(&mut self, spec: &PanelSpec, i: usize, beta_star: &Matrix) {
        let off = spec.beta_star_offset(i);
        let len = spec.n_vars * spec.ranks[i];
        self.b_beta_star.as_mut_slice()[off..off + len]
            .copy_from_slice(vectorize(beta_star).as_slice());
    }

    /// Per-individual derived quantities (beta, kappa, A, Pi).
    pub fn derived(&self, spec: &PanelSpec, i: usize) -> Result<DerivedParams> {
        let beta_star = self.beta_star(spec, i);
        let alpha = self.alpha(spec, i);
        if spec.ranks[i] == 0 {
            let n = spec.n_vars;
            return Ok(DerivedParams {
                beta: Matrix::zeros(n, 0),
                kappa: Matrix::zeros(0, 0),
                a: Matrix::zeros(n, 0),
                alpha,
                pi: Matrix::zeros(n, n),
            });
        }
        let (beta, kappa) = decompose_beta_star(&beta_star)?;
        let a = normalize_alpha(&alpha)?;
        let pi = compose_pi(&alpha, &beta)?;
        Ok(DerivedParams {
            beta,
            kappa,
            a,
            alpha,
            pi,
        })
    }

    /// Long-run multiplier `Pi_i = alpha_i beta_i^T`.
    pub fn pi(&self, spec: &PanelSpec, i: usize) -> Result<Matrix> {
        Ok(self.derived(spec, i)?.pi)
    }

    /// Cointegration matrices `beta_i` for all individuals.
    pub fn betas(&self, spec: &PanelSpec) -> Result<Vec<Matrix>> {
        (0..spec.n_individuals)
            .map(|i| {
                if spec.ranks[i] == 0 {
                    Ok(Matrix::zeros(spec.n_vars, 0))
                } else {
                    Ok(decompose_beta_star(&self.beta_star(spec, i))?.0)
                }
            })
            .collect()
    }
}

/// Derived per-individual quantities.
#[derive(Debug, Clone)]
pub struct DerivedParams {
    /// Semi-orthogonal cointegration basis.
    pub beta: Matrix,
    /// Symmetric PD scale linking `beta*` and `beta`.
    pub kappa: Matrix,
    /// Semi-orthogonal version of `alpha`.
    pub a: Matrix,
    pub alpha: Matrix,
    /// `alpha beta^T`.
    pub pi: Matrix,
}

/// `Pi = alpha beta^T` for conformable full-column-rank factors.
pub fn compose_pi(alpha: &Matrix, beta: &Matrix) -> Result<Matrix> {
    if alpha.nrows() != beta.nrows() || alpha.ncols() != beta.ncols() {
        return Err(Error::DimensionMismatch {
            context: "compose_pi",
            expected_rows: alpha.nrows(),
            expected_cols: alpha.ncols(),
            rows: beta.nrows(),
            cols: beta.ncols(),
        });
    }
    Ok(alpha * beta.transpose())
}

/// Polar split `beta* = beta kappa` with `kappa = (beta*^T beta*)^{1/2}`
/// symmetric PD and `beta` semi-orthogonal.
pub fn decompose_beta_star(beta_star: &Matrix) -> Result<(Matrix, Matrix)> {
    let svd = beta_star.clone().svd(false, false);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min);
    if min_sv < 1e-10 {
        return Err(Error::RankDeficient {
            context: "decompose_beta_star",
            rows: beta_star.nrows(),
            cols: beta_star.ncols(),
            rank: svd.singular_values.iter().filter(|&&s| s >= 1e-10).count(),
        });
    }
    let gram = beta_star.transpose() * beta_star;
    let kappa = sym_sqrt(&gram)?;
    let kappa_inv = sym_inv_sqrt(&gram)?;
    let beta = beta_star * kappa_inv;
    Ok((beta, kappa))
}

/// Semi-orthogonal version of `alpha`: `A = alpha (alpha^T alpha)^{-1/2}`.
pub fn normalize_alpha(alpha: &Matrix) -> Result<Matrix> {
    if alpha.ncols() == 0 {
        return Ok(alpha.clone());
    }
    let gram = alpha.transpose() * alpha;
    let inv_root = sym_inv_sqrt(&gram).map_err(|e| match e {
        Error::RankDeficient {
            rows, cols, rank, ..
        } => Error::RankDeficient {
            context: "normalize_alpha",
            rows,
            cols,
            rank,
        },
        other => other,
    })?;
    Ok(alpha * inv_root)
}

/// Short-run regression system: `y = x b + e` with `x = diag(I_n (x) X_i)`.
#[derive(Debug, Clone)]
pub struct ShortRunSystem {
    /// Stacked `vec(dy_i)`, length `T N n`.
    pub y: Vector,
    /// Per-individual design `X_i` (T x (k + r_i)); the full regressor
    /// block for individual `i` is `I_n (x) X_i`.
    pub x_blocks: Vec<Matrix>,
    /// Per-individual differences (T x n).
    pub dy: Vec<Matrix>,
}

impl ShortRunSystem {
    /// Materializes the block-diagonal regressor matrix (tests/oracles only).
    pub fn dense_x(&self, n_vars: usize) -> Matrix {
        let id = Matrix::identity(n_vars, n_vars);
        let blocks: Vec<Matrix> = self.x_blocks.iter().map(|x| kron(&id, x)).collect();
        block_diag(&blocks)
    }

    /// Residual matrix `T x Nn`: per individual `dy_i - X_i B_i`, columns
    /// concatenated in individual order.
    pub fn residual_matrix(&self, spec: &PanelSpec, params: &VecmParams) -> Matrix {
        let t = spec.usable_len;
        let nn = spec.n_individuals * spec.n_vars;
        let mut eps = Matrix::zeros(t, nn);
        for i in 0..spec.n_individuals {
            let fitted = &self.x_blocks[i] * params.big_b(spec, i);
            eps.view_mut((0, i * spec.n_vars), (t, spec.n_vars))
                .copy_from(&(&self.dy[i] - fitted));
        }
        eps
    }
}

/// Long-run regression system: `yhat = xhat b_beta_star + e` with
/// `xhat = diag(A_i (x) y_{i,-1})`.
#[derive(Debug, Clone)]
pub struct LongRunSystem {
    /// Stacked `vec(dy_i - w_i C_i)`, length `T N n`.
    pub yhat: Vector,
    /// Per-individual `A_i` (n x r_i).
    pub a_blocks: Vec<Matrix>,
    /// Per-individual lagged levels (T x n).
    pub lag_levels: Vec<Matrix>,
    /// Per-individual `dy_i - w_i C_i` (T x n).
    pub ehat: Vec<Matrix>,
}

impl LongRunSystem {
    pub fn dense_x(&self) -> Matrix {
        let blocks: Vec<Matrix> = self
            .a_blocks
            .iter()
            .zip(&self.lag_levels)
            .map(|(a, y1)| kron(a, y1))
            .collect();
        block_diag(&blocks)
    }

    /// Residual matrix `T x Nn` given the stacked `vec(beta*_i)` vector.
    pub fn residual_matrix(&self, spec: &PanelSpec, b_beta_star: &Vector) -> Matrix {
        let t = spec.usable_len;
        let nn = spec.n_individuals * spec.n_vars;
        let mut eps = Matrix::zeros(t, nn);
        for i in 0..spec.n_individuals {
            let off = spec.beta_star_offset(i);
            let len = spec.n_vars * spec.ranks[i];
            let beta_star = Matrix::from_column_slice(
                spec.n_vars,
                spec.ranks[i],
                &b_beta_star.as_slice()[off..off + len],
            );
            let fitted = &self.lag_levels[i] * beta_star * self.a_blocks[i].transpose();
            eps.view_mut((0, i * spec.n_vars), (t, spec.n_vars))
                .copy_from(&(&self.ehat[i] - fitted));
        }
        eps
    }
}

/// Assembles the short-run system for the given per-individual `beta_i`.
///
/// Column order of each `X_i` row is `(beta_i^T y[t-1], dy[t-1], ...,
/// dy[t-L], d[t])`, matching the row order of `B_i`.
pub fn build_shortrun_system(
    data: &PanelData,
    spec: &PanelSpec,
    betas: &[Matrix],
) -> Result<ShortRunSystem> {
    let t = spec.usable_len;
    for (i, beta) in betas.iter().enumerate() {
        if beta.shape() != (spec.n_vars, spec.ranks[i]) {
            return Err(Error::DimensionMismatch {
                context: "build_shortrun_system: beta_i",
                expected_rows: spec.n_vars,
                expected_cols: spec.ranks[i],
                rows: beta.nrows(),
                cols: beta.ncols(),
            });
        }
        if t > 0 && t <= spec.k() + spec.ranks[i] {
            return Err(Error::InsufficientData {
                context: "build_shortrun_system",
                usable: t,
                required: spec.k() + spec.ranks[i],
            });
        }
    }
    let mut x_blocks = Vec::with_capacity(spec.n_individuals);
    let mut dy = Vec::with_capacity(spec.n_individuals);
    let mut y = Vector::zeros(t * spec.n_individuals * spec.n_vars);
    for i in 0..spec.n_individuals {
        let diffs = data.differences(i, spec);
        let z = data.lagged_levels(i, spec) * &betas[i];
        let w = data.lagged_diff_block(i, spec);
        let mut x = Matrix::zeros(t, spec.ranks[i] + spec.k());
        x.view_mut((0, 0), (t, spec.ranks[i])).copy_from(&z);
        x.view_mut((0, spec.ranks[i]), (t, spec.k())).copy_from(&w);
        y.rows_mut(i * t * spec.n_vars, t * spec.n_vars)
            .copy_from(&vectorize(&diffs));
        x_blocks.push(x);
        dy.push(diffs);
    }
    Ok(ShortRunSystem { y, x_blocks, dy })
}

/// Assembles the long-run system for given per-individual `A_i`
/// (semi-orthogonal, n x r_i) and `C_i` (k x n, rows `Gamma_1..Gamma_L`
/// then `Phi`).
pub fn build_longrun_system(
    data: &PanelData,
    spec: &PanelSpec,
    a_mats: &[Matrix],
    c_mats: &[Matrix],
) -> Result<LongRunSystem> {
    let t = spec.usable_len;
    let mut a_blocks = Vec::with_capacity(spec.n_individuals);
    let mut lag_levels = Vec::with_capacity(spec.n_individuals);
    let mut ehat = Vec::with_capacity(spec.n_individuals);
    let mut yhat = Vector::zeros(t * spec.n_individuals * spec.n_vars);
    for i in 0..spec.n_individuals {
        if a_mats[i].shape() != (spec.n_vars, spec.ranks[i]) {
            return Err(Error::DimensionMismatch {
                context: "build_longrun_system: A_i",
                expected_rows: spec.n_vars,
                expected_cols: spec.ranks[i],
                rows: a_mats[i].nrows(),
                cols: a_mats[i].ncols(),
            });
        }
        if c_mats[i].shape() != (spec.k(), spec.n_vars) {
            return Err(Error::DimensionMismatch {
                context: "build_longrun_system: C_i",
                expected_rows: spec.k(),
                expected_cols: spec.n_vars,
                rows: c_mats[i].nrows(),
                cols: c_mats[i].ncols(),
            });
        }
        let diffs = data.differences(i, spec);
        let w = data.lagged_diff_block(i, spec);
        let e = diffs - w * &c_mats[i];
        yhat.rows_mut(i * t * spec.n_vars, t * spec.n_vars)
            .copy_from(&vectorize(&e));
        ehat.push(e);
        lag_levels.push(data.lagged_levels(i, spec));
        a_blocks.push(a_mats[i].clone());
    }
    Ok(LongRunSystem {
        yhat,
        a_blocks,
        lag_levels,
        ehat,
    })
}

/// Residual matrix `T x Nn` under `params`, using the short-run form with
/// `beta_i` recovered from `beta*_i`.
pub fn residuals(data: &PanelData, spec: &PanelSpec, params: &VecmParams) -> Result<Matrix> {
    params.validate_dims(spec)?;
    let betas = params.betas(spec)?;
    let system = build_shortrun_system(data, spec, &betas)?;
    Ok(system.residual_matrix(spec, params))
}

/// Log density of the stacked errors under `N(0, Sigma (x) F_rho)`,
/// including the normalizing constant. Never materializes the `TNn x TNn`
/// covariance.
pub fn log_likelihood(data: &PanelData, spec: &PanelSpec, params: &VecmParams) -> Result<f64> {
    let eps = residuals(data, spec, params)?;
    log_likelihood_of_residuals(&eps, &params.sigma, params.rho)
}

/// Same as [`log_likelihood`] but starting from a residual matrix.
pub fn log_likelihood_of_residuals(eps: &Matrix, sigma: &Matrix, rho: f64) -> Result<f64> {
    let t = eps.nrows();
    let nn = eps.ncols();
    if sigma.shape() != (nn, nn) {
        return Err(Error::DimensionMismatch {
            context: "log_likelihood: sigma",
            expected_rows: nn,
            expected_cols: nn,
            rows: sigma.nrows(),
            cols: sigma.ncols(),
        });
    }
    if t == 0 {
        return Ok(0.0);
    }
    let chol = sigma.clone().cholesky().ok_or(Error::NotPd {
        context: "log_likelihood: sigma",
    })?;
    let log_det_sigma = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_f = ar1_log_det(rho, t)?;
    let quad = if rho == 0.0 {
        let solved = chol.solve(&eps.transpose());
        eps.transpose().dot(&solved)
    } else {
        let f_inv = ar1_inverse(rho, t)?;
        let g = eps.transpose() * f_inv * eps;
        chol.solve(&g).trace()
    };
    if !quad.is_finite() {
        return Err(Error::NonFinite {
            what: "log-likelihood quadratic form",
        });
    }
    let tnn = (t * nn) as f64;
    Ok(-0.5 * tnn * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * nn as f64 * log_det_f
        - 0.5 * t as f64 * log_det_sigma
        - 0.5 * quad)
}

/// Log-likelihood evaluated through the long-run representation; used to
/// check the equality of the two forms.
pub fn log_likelihood_longrun(
    data: &PanelData,
    spec: &PanelSpec,
    params: &VecmParams,
) -> Result<f64> {
    let mut a_mats = Vec::with_capacity(spec.n_individuals);
    let mut c_mats = Vec::with_capacity(spec.n_individuals);
    for i in 0..spec.n_individuals {
        a_mats.push(params.derived(spec, i)?.a);
        c_mats.push(params.c_mat(spec, i));
    }
    let system = build_longrun_system(data, spec, &a_mats, &c_mats)?;
    let eps = system.residual_matrix(spec, &params.b_beta_star);
    log_likelihood_of_residuals(&eps, &params.sigma, params.rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ar1_correlation, devectorize};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Iterates the observation equation forward with supplied shocks,
    /// returning the levels (raw length x n). Test-side oracle.
    fn simulate_levels(
        pi: &Matrix,
        gammas: &[Matrix],
        phi: &Matrix,
        det: Deterministic,
        shocks: &Matrix,
        lags: usize,
    ) -> Matrix {
        let n = pi.nrows();
        let raw_len = shocks.nrows() + lags + 1;
        let mut y = Matrix::zeros(raw_len, n);
        for s in 0..shocks.nrows() {
            let t = lags + 1 + s;
            let y_prev = y.row(t - 1).transpose();
            let mut dy = pi * &y_prev;
            for (h, g) in gammas.iter().enumerate() {
                let prev_diff = (y.row(t - h - 1) - y.row(t - h - 2)).transpose();
                dy += g * prev_diff;
            }
            if det.k_d() > 0 {
                let d = DVector::from_vec(det.row(s));
                dy += phi * d;
            }
            dy += shocks.row(s).transpose();
            let new_row = y.row(t - 1) + dy.transpose();
            y.row_mut(t).copy_from(&new_row);
        }
        y
    }

    fn small_spec() -> PanelSpec {
        PanelSpec::new(1, 2, 5, 1, vec![1], Deterministic::Constant).unwrap()
    }

    #[test]
    fn compose_pi_examples() {
        let alpha = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let beta = Matrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let pi = compose_pi(&alpha, &beta).unwrap();
        assert_eq!(pi, Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]));

        let zero_beta = Matrix::zeros(2, 1);
        assert_eq!(compose_pi(&alpha, &zero_beta).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn compose_pi_rank_matches_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let alpha = random_matrix(&mut rng, 4, 2);
        let beta = random_matrix(&mut rng, 4, 2);
        let pi = compose_pi(&alpha, &beta).unwrap();
        let svd = pi.svd(false, false);
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(rank, 2);
    }

    #[test]
    fn decompose_beta_star_examples() {
        let bs = Matrix::from_column_slice(3, 1, &[2.0, 0.0, 0.0]);
        let (beta, kappa) = decompose_beta_star(&bs).unwrap();
        assert!(
            (beta - Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]))
                .abs()
                .max()
                < 1e-12
        );
        assert_abs_diff_eq!(kappa[(0, 0)], 2.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let semi = random_matrix(&mut rng, 4, 2).qr().q();
        let (_, kappa) = decompose_beta_star(&semi).unwrap();
        assert!((kappa - Matrix::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn decompose_beta_star_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bs = random_matrix(&mut rng, 4, 2);
        let (beta, kappa) = decompose_beta_star(&bs).unwrap();
        assert!((&beta * &kappa - &bs).abs().max() < 1e-10);
        assert!(
            (beta.transpose() * &beta - Matrix::identity(2, 2))
                .abs()
                .max()
                < 1e-10
        );
        assert!((&kappa - kappa.transpose()).abs().max() < 1e-12);
        assert!(kappa.clone().cholesky().is_some());
    }

    #[test]
    fn decompose_beta_star_rejects_rank_deficient() {
        let bs = Matrix::from_column_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            decompose_beta_star(&bs),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn normalize_alpha_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let semi = random_matrix(&mut rng, 5, 2).qr().q();
        assert!((normalize_alpha(&semi).unwrap() - &semi).abs().max() < 1e-12);

        let scaled = Matrix::from_column_slice(3, 1, &[3.0, 0.0, 0.0]);
        let a = normalize_alpha(&scaled).unwrap();
        assert!(
            (a - Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]))
                .abs()
                .max()
                < 1e-12
        );

        let alpha = random_matrix(&mut rng, 4, 2);
        let a = normalize_alpha(&alpha).unwrap();
        assert!((a.transpose() * &a - Matrix::identity(2, 2)).abs().max() < 1e-12);
        // idempotent
        assert!((normalize_alpha(&a).unwrap() - &a).abs().max() < 1e-12);
    }

    #[test]
    fn shortrun_degenerate_univariate_error_correction() {
        // N = 1, n = 1, L = 0, no deterministic terms, beta = 1: the design
        // column must be the lagged level itself.
        let levels = Matrix::from_column_slice(6, 1, &[1.0, 2.0, 1.5, 3.0, 2.0, 2.5]);
        let data = PanelData::new(vec![levels.clone()]).unwrap();
        let spec = PanelSpec::new(1, 1, 5, 0, vec![1], Deterministic::None).unwrap();
        let beta = Matrix::from_element(1, 1, 1.0);
        let sys = build_shortrun_system(&data, &spec, &[beta]).unwrap();
        for s in 0..5 {
            assert_abs_diff_eq!(sys.x_blocks[0][(s, 0)], levels[(s, 0)], epsilon = 1e-15);
            assert_abs_diff_eq!(
                sys.y[s],
                levels[(s + 1, 0)] - levels[(s, 0)],
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn shortrun_reproduces_forward_recursion() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let alpha = random_matrix(&mut rng, 2, 1) * 0.3;
        let beta = normalize_alpha(&random_matrix(&mut rng, 2, 1)).unwrap();
        let pi = compose_pi(&alpha, &beta).unwrap();
        let gamma = random_matrix(&mut rng, 2, 2) * 0.2;
        let phi = random_matrix(&mut rng, 2, 1) * 0.1;
        let shocks = Matrix::zeros(5, 2);
        let levels = simulate_levels(
            &pi,
            &[gamma.clone()],
            &phi,
            Deterministic::Constant,
            &shocks,
            1,
        );
        let data = PanelData::new(vec![levels]).unwrap();

        let sys = build_shortrun_system(&data, &spec, &[beta.clone()]).unwrap();
        // B = (alpha, Gamma_1, Phi)^T
        let mut b_mat = Matrix::zeros(4, 2);
        b_mat.rows_mut(0, 1).copy_from(&alpha.transpose());
        b_mat.rows_mut(1, 2).copy_from(&gamma.transpose());
        b_mat.rows_mut(3, 1).copy_from(&phi.transpose());
        let fitted = sys.dense_x(2) * vectorize(&b_mat);
        assert!((&sys.y - fitted).abs().max() < 1e-12);
    }

    #[test]
    fn shortrun_zero_data_gives_zero_y() {
        let spec = small_spec();
        let data = PanelData::new(vec![Matrix::zeros(7, 2)]).unwrap();
        let beta = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let sys = build_shortrun_system(&data, &spec, &[beta]).unwrap();
        assert_eq!(sys.y.abs().max(), 0.0);
        // residuals equal -x b for any b
        let mut params = VecmParams::zero(&spec);
        params.b = Vector::from_fn(spec.b_len(), |i, _| 0.1 * (i as f64 + 1.0));
        let eps = sys.residual_matrix(&spec, &params);
        let dense = sys.dense_x(2) * &params.b;
        assert!((vectorize(&eps) + dense).abs().max() < 1e-12);
    }

    #[test]
    fn longrun_zero_a_leaves_ehat() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let levels = random_matrix(&mut rng, 7, 2);
        let data = PanelData::new(vec![levels]).unwrap();
        let a = Matrix::zeros(2, 1);
        let c = random_matrix(&mut rng, 3, 2);
        let sys = build_longrun_system(&data, &spec, &[a], &[c]).unwrap();
        let bs = Vector::from_column_slice(&[0.4, -0.2]);
        let eps = sys.residual_matrix(&spec, &bs);
        assert!((vectorize(&eps) - &sys.yhat).abs().max() < 1e-12);
    }

    #[test]
    fn longrun_single_individual_vec_identity() {
        // L = 0, no deterministic terms: xhat vec(beta*) == vec(y_{-1} beta* A^T)
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let levels = random_matrix(&mut rng, 7, 3);
        let data = PanelData::new(vec![levels]).unwrap();
        let spec = PanelSpec::new(1, 3, 6, 0, vec![1], Deterministic::None).unwrap();
        let a = normalize_alpha(&random_matrix(&mut rng, 3, 1)).unwrap();
        let c = Matrix::zeros(0, 3);
        let sys = build_longrun_system(&data, &spec, &[a.clone()], &[c]).unwrap();
        let beta_star = random_matrix(&mut rng, 3, 1);
        let lhs = sys.dense_x() * vectorize(&beta_star);
        let rhs = vectorize(&(&sys.lag_levels[0] * &beta_star * a.transpose()));
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    /// Balanced random parameter state: alpha = A kappa so the short- and
    /// long-run forms describe the same Pi.
    fn balanced_params(spec: &PanelSpec, rng: &mut ChaCha8Rng) -> VecmParams {
        let mut params = VecmParams::zero(spec);
        for i in 0..spec.n_individuals {
            let r = spec.ranks[i];
            let beta_star = random_matrix(rng, spec.n_vars, r) * 0.5;
            let (_, kappa) = decompose_beta_star(&beta_star).unwrap();
            let a = normalize_alpha(&random_matrix(rng, spec.n_vars, r)).unwrap();
            let alpha = &a * &kappa;
            params.set_beta_star(spec, i, &beta_star);
            let mut big_b = random_matrix(rng, spec.k() + r, spec.n_vars) * 0.2;
            big_b.rows_mut(0, r).copy_from(&alpha.transpose());
            params.set_big_b(spec, i, &big_b);
        }
        let nn = spec.n_individuals * spec.n_vars;
        let g = random_matrix(rng, nn, nn) * 0.3;
        params.sigma = Matrix::identity(nn, nn) + &g * g.transpose();
        params
    }

    #[test]
    fn short_and_long_run_residuals_agree_for_balanced_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let spec = PanelSpec::new(2, 2, 8, 1, vec![1, 1], Deterministic::Constant).unwrap();
        let data = PanelData::new(vec![
            random_matrix(&mut rng, 10, 2),
            random_matrix(&mut rng, 10, 2),
        ])
        .unwrap();
        let params = balanced_params(&spec, &mut rng);

        let eps_short = residuals(&data, &spec, &params).unwrap();
        let mut a_mats = Vec::new();
        let mut c_mats = Vec::new();
        for i in 0..2 {
            a_mats.push(params.derived(&spec, i).unwrap().a);
            c_mats.push(params.c_mat(&spec, i));
        }
        let sys = build_longrun_system(&data, &spec, &a_mats, &c_mats).unwrap();
        let eps_long = sys.residual_matrix(&spec, &params.b_beta_star);
        assert!((eps_short - eps_long).abs().max() < 1e-10);
    }

    #[test]
    fn likelihood_representations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let spec = PanelSpec::new(2, 2, 8, 1, vec![1, 1], Deterministic::Constant).unwrap();
        let data = PanelData::new(vec![
            random_matrix(&mut rng, 10, 2),
            random_matrix(&mut rng, 10, 2),
        ])
        .unwrap();
        let mut params = balanced_params(&spec, &mut rng);
        params.rho = 0.25;
        let ll_short = log_likelihood(&data, &spec, &params).unwrap();
        let ll_long = log_likelihood_longrun(&data, &spec, &params).unwrap();
        assert_abs_diff_eq!(ll_short, ll_long, epsilon = 1e-8);
    }

    #[test]
    fn pi_agrees_between_parameterizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let spec = PanelSpec::new(1, 3, 10, 0, vec![2], Deterministic::Constant).unwrap();
        let params = balanced_params(&spec, &mut rng);
        let derived = params.derived(&spec, 0).unwrap();
        let pi_short = compose_pi(&derived.alpha, &derived.beta).unwrap();
        let pi_long = &derived.a * params.beta_star(&spec, 0).transpose();
        assert!((pi_short - pi_long).abs().max() < 1e-10);
    }

    #[test]
    fn residuals_match_vector_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let spec = small_spec();
        let data = PanelData::new(vec![random_matrix(&mut rng, 7, 2)]).unwrap();
        let params = balanced_params(&spec, &mut rng);
        let eps = residuals(&data, &spec, &params).unwrap();

        let betas = params.betas(&spec).unwrap();
        let sys = build_shortrun_system(&data, &spec, &betas).unwrap();
        let vector_form = &sys.y - sys.dense_x(2) * &params.b;
        assert!((vectorize(&eps) - vector_form).abs().max() < 1e-12);

        // b = 0 leaves the raw differences
        let mut p0 = params.clone();
        p0.b = Vector::zeros(spec.b_len());
        let eps0 = residuals(&data, &spec, &p0).unwrap();
        assert!((eps0 - data.differences(0, &spec)).abs().max() < 1e-15);
    }

    #[test]
    fn residuals_zero_for_exactly_generating_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = small_spec();
        let params_seed = balanced_params(&spec, &mut rng);
        let pi = params_seed.pi(&spec, 0).unwrap();
        let gamma = params_seed.gamma(&spec, 0, 1);
        let phi = params_seed.phi(&spec, 0);
        let shocks = Matrix::zeros(5, 2);
        let levels = simulate_levels(&pi, &[gamma], &phi, Deterministic::Constant, &shocks, 1);
        let data = PanelData::new(vec![levels]).unwrap();
        let eps = residuals(&data, &spec, &params_seed).unwrap();
        assert!(eps.abs().max() < 1e-10);
    }

    #[test]
    fn log_likelihood_scalar_case() {
        let data = PanelData::new(vec![Matrix::zeros(2, 1)]).unwrap();
        let spec = PanelSpec::new(1, 1, 1, 0, vec![0], Deterministic::None).unwrap();
        let params = VecmParams {
            sigma: Matrix::identity(1, 1),
            b: Vector::zeros(0),
            b_beta_star: Vector::zeros(0),
            nu: 1.0,
            tau: 1.0,
            rho: 0.0,
        };
        let ll = log_likelihood(&data, &spec, &params).unwrap();
        assert_abs_diff_eq!(
            ll,
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_likelihood_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let t = 4;
        let nn = 2;
        let eps = random_matrix(&mut rng, t, nn);
        let g = random_matrix(&mut rng, nn, nn) * 0.4;
        let sigma = Matrix::identity(nn, nn) + &g * g.transpose();
        let rho = 0.3;

        let ll = log_likelihood_of_residuals(&eps, &sigma, rho).unwrap();

        // Dense oracle: materialize Sigma (x) F and evaluate the full MVN.
        let f = ar1_correlation(rho, t).unwrap();
        let v = kron(&sigma, &f);
        let e = vectorize(&eps);
        let chol = v.clone().cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = e.dot(&chol.solve(&e));
        let dim = (t * nn) as f64;
        let oracle = -0.5 * dim * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad;
        assert_abs_diff_eq!(ll, oracle, epsilon = 1e-8);
    }

    #[test]
    fn log_likelihood_invariant_to_joint_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let t = 5;
        let eps = random_matrix(&mut rng, t, 4);
        let g = random_matrix(&mut rng, 4, 4) * 0.3;
        let sigma = Matrix::identity(4, 4) + &g * g.transpose();
        let ll = log_likelihood_of_residuals(&eps, &sigma, 0.0).unwrap();

        // Swap the two individuals (columns 0..2 and 2..4) jointly with Sigma.
        let perm = [2usize, 3, 0, 1];
        let eps_p = Matrix::from_fn(t, 4, |r, c| eps[(r, perm[c])]);
        let sigma_p = Matrix::from_fn(4, 4, |r, c| sigma[(perm[r], perm[c])]);
        let ll_p = log_likelihood_of_residuals(&eps_p, &sigma_p, 0.0).unwrap();
        assert_abs_diff_eq!(ll, ll_p, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_rejects_non_pd_sigma() {
        let eps = Matrix::zeros(3, 2);
        let sigma = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            log_likelihood_of_residuals(&eps, &sigma, 0.0),
            Err(Error::NotPd { .. })
        ));
    }

    #[test]
    fn parameter_count_bookkeeping() {
        let spec = PanelSpec::new(3, 4, 100, 1, vec![1, 2, 3], Deterministic::Constant).unwrap();
        let nn = 12.0;
        let nominal = nn * (spec.k() as f64 + 2.0 * spec.rbar() + 1.0) + 2.0;
        assert_abs_diff_eq!(spec.nominal_param_count() as f64, nominal, epsilon = 1e-12);
        // The nominal count decomposes as b + beta* + Nn (one per equation) + 2.
        assert_eq!(
            spec.nominal_param_count(),
            spec.b_len() + spec.beta_star_len() + 12 + 2
        );
        // The actually-sampled free entries count Sigma's full symmetric part.
        assert_eq!(
            spec.free_param_count(false),
            spec.b_len() + spec.beta_star_len() + 12 * 13 / 2 + 2
        );
        assert_eq!(
            spec.free_param_count(true),
            spec.free_param_count(false) + 1
        );
    }

    #[test]
    fn devectorize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let m = random_matrix(&mut rng, 3, 4);
        let v = vectorize(&m);
        assert_eq!(devectorize(&v, 3, 4), m);
    }
}
