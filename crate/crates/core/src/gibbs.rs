//! The posterior sampler.
//!
//! One sweep of the chain:
//!
//! 1. residuals at the current state;
//! 2. `Sigma` from its inverse-Wishart full conditional;
//! 3. `b = (alpha, Gamma, Phi)` from its Gaussian full conditional on the
//!    short-run system, conditioning on the current `beta_i`;
//! 4. `A_i = (alpha_i^T alpha_i)^{-1/2} alpha_i` and the lag block `C_i`,
//!    which define the long-run system;
//! 5. `b_beta_star` from its Gaussian full conditional;
//! 6. split `beta*_i = beta_i kappa_i` and rebalance `alpha_i = A_i kappa_i`;
//! 7. `nu` from its gamma full conditional;
//! 8. `tau^{-1}` from its gamma full conditional (restriction configured);
//! 9. optional random-walk Metropolis step on `rho`.
//!
//! All Kronecker-structured solves factor through `(Sigma (x) F)^{-1} =
//! Sigma^{-1} (x) F^{-1}`; nothing of size `TNn x TNn` is ever formed.

use nalgebra::{Cholesky, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dist;
use crate::error::{Error, Result};
use crate::linalg::{ar1_inverse, kron, sym_sqrt, vectorize, Matrix, Vector};
use crate::model::{
    build_longrun_system, build_shortrun_system, decompose_beta_star, log_likelihood_of_residuals,
    normalize_alpha, LongRunSystem, PanelData, PanelSpec, ShortRunSystem, VecmParams,
};
use crate::priors::{
    build_vtilde_beta_inverse, build_vtilde_inverse, PriorConfig, SigmaPrior,
};

/// Chain length and sampler switches.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    /// Iterations discarded before storage begins.
    pub warmup: usize,
    /// Post-warmup iterations.
    pub iterations: usize,
    pub seed: u64,
    /// Keep every `thin`-th post-warmup draw.
    pub thin: usize,
    /// Enable the Metropolis step on the error autocorrelation.
    pub rho_sampling: bool,
    pub rho_proposal_sd: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            warmup: 1000,
            iterations: 10_000,
            seed: 0,
            thin: 1,
            rho_sampling: false,
            rho_proposal_sd: 0.05,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig {
                message: "chain.iterations must be at least 1".into(),
            });
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig {
                message: "chain.thin must be at least 1".into(),
            });
        }
        if !(self.rho_proposal_sd >= 0.0 && self.rho_proposal_sd.is_finite()) {
            return Err(Error::InvalidConfig {
                message: format!(
                    "chain.rho_proposal_sd must be nonnegative, got {}",
                    self.rho_proposal_sd
                ),
            });
        }
        Ok(())
    }
}

/// Stored draws with aligned per-draw log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStore {
    pub draws: Vec<VecmParams>,
    pub loglik: Vec<f64>,
    /// Number of warmup iterations executed and discarded before `draws[0]`.
    pub warmup_boundary: usize,
    /// Acceptance rate of the Metropolis step (0 when disabled).
    pub rho_acceptance: f64,
}

impl ChainStore {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Per-draw values of an arbitrary parameter functional.
    pub fn extract<F: Fn(&VecmParams) -> f64>(&self, f: F) -> Vec<f64> {
        self.draws.iter().map(f).collect()
    }

    /// State assembled from posterior means of every stored component.
    pub fn posterior_mean(&self, spec: &PanelSpec) -> Result<VecmParams> {
        if self.draws.is_empty() {
            return Err(Error::EmptyChain);
        }
        let mut mean = VecmParams::zero(spec);
        let scale = 1.0 / self.draws.len() as f64;
        mean.sigma = Matrix::zeros(mean.sigma.nrows(), mean.sigma.ncols());
        mean.nu = 0.0;
        mean.tau = 0.0;
        mean.rho = 0.0;
        for d in &self.draws {
            mean.b += &d.b * scale;
            mean.b_beta_star += &d.b_beta_star * scale;
            mean.sigma += &d.sigma * scale;
            mean.nu += d.nu * scale;
            mean.tau += d.tau * scale;
            mean.rho += d.rho * scale;
        }
        Ok(mean)
    }
}

/// A Gaussian full conditional in precision form.
pub struct GaussianConditional {
    pub mean: Vector,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianConditional {
    /// Builds the conditional from posterior precision and right-hand side
    /// `precision * mean = rhs`. Retries once with a small diagonal jitter
    /// before giving up.
    pub fn from_precision(mut precision: Matrix, rhs: &Vector) -> Result<Self> {
        let chol = match precision.clone().cholesky() {
            Some(c) => c,
            None => {
                let dim = precision.nrows();
                for i in 0..dim {
                    precision[(i, i)] += 1e-10;
                }
                precision.clone().cholesky().ok_or(Error::NotPd {
                    context: "posterior precision",
                })?
            }
        };
        let mean = chol.solve(rhs);
        Ok(GaussianConditional { mean, chol })
    }

    /// Posterior precision (reassembled from its factor).
    pub fn precision(&self) -> Matrix {
        self.chol.l() * self.chol.l().transpose()
    }

    /// Draws `mean + L^{-T} z` for `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let dim = self.mean.len();
        let z = Vector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let l_t = self.chol.l().transpose();
        let shift = l_t
            .solve_upper_triangular(&z)
            .expect("Cholesky factor is invertible");
        &self.mean + shift
    }
}

/// `eps^T F_rho^{-1} eps`, the scale matrix of the `Sigma` conditional.
pub fn sigma_scale(eps: &Matrix, rho: f64) -> Result<Matrix> {
    if rho == 0.0 {
        Ok(eps.transpose() * eps)
    } else {
        let f_inv = ar1_inverse(rho, eps.nrows())?;
        Ok(eps.transpose() * f_inv * eps)
    }
}

/// Inverse-Wishart draw for the error covariance: scale `eps^T eps`,
/// degrees of freedom `t`.
pub fn sample_sigma<R: Rng + ?Sized>(eps: &Matrix, t: usize, rng: &mut R) -> Result<Matrix> {
    dist::inverse_wishart(&(eps.transpose() * eps), t, rng)
}

fn sigma_inverse(sigma: &Matrix) -> Result<Matrix> {
    Ok(sigma
        .clone()
        .cholesky()
        .ok_or(Error::NotPd {
            context: "sigma inverse",
        })?
        .inverse())
}

/// Gaussian full conditional of the short-run coefficient vector `b`:
/// precision `x^T (Sigma (x) F)^{-1} x + nu Vtilde^{-1}`, mean solving the
/// GLS normal equations.
pub fn shortrun_conditional(
    system: &ShortRunSystem,
    spec: &PanelSpec,
    sigma: &Matrix,
    rho: f64,
    nu: f64,
    vtilde_inv: &Matrix,
) -> Result<GaussianConditional> {
    let t = spec.usable_len;
    let n = spec.n_vars;
    let s_inv = sigma_inverse(sigma)?;
    let f_inv = if rho != 0.0 {
        Some(ar1_inverse(rho, t)?)
    } else {
        None
    };
    let total = spec.b_len();
    let mut precision = vtilde_inv * nu;
    let mut rhs = Vector::zeros(total);

    // F^{-1} X_j and F^{-1} dy_j, reused across block rows.
    let fx: Vec<Matrix> = system
        .x_blocks
        .iter()
        .map(|x| match &f_inv {
            Some(f) => f * x,
            None => x.clone(),
        })
        .collect();
    let mut fd = Matrix::zeros(t, spec.n_individuals * n);
    for j in 0..spec.n_individuals {
        let block = match &f_inv {
            Some(f) => f * &system.dy[j],
            None => system.dy[j].clone(),
        };
        fd.view_mut((0, j * n), (t, n)).copy_from(&block);
    }
    let weighted = fd * &s_inv; // T x Nn

    for i in 0..spec.n_individuals {
        let off_i = spec.b_offset(i);
        let w_i = n * (spec.k() + spec.ranks[i]);
        for j in 0..spec.n_individuals {
            let off_j = spec.b_offset(j);
            let w_j = n * (spec.k() + spec.ranks[j]);
            let s_block = s_inv.view((i * n, j * n), (n, n)).into_owned();
            let g = system.x_blocks[i].transpose() * &fx[j];
            precision
                .view_mut((off_i, off_j), (w_i, w_j))
                .add_assign(&kron(&s_block, &g));
        }
        let m_i = weighted.view((0, i * n), (t, n)).into_owned();
        let rhs_i = system.x_blocks[i].transpose() * m_i;
        rhs.rows_mut(off_i, w_i).copy_from(&vectorize(&rhs_i));
    }
    GaussianConditional::from_precision(precision, &rhs)
}

/// Draws `b` from [`shortrun_conditional`].
pub fn sample_b<R: Rng + ?Sized>(
    system: &ShortRunSystem,
    spec: &PanelSpec,
    sigma: &Matrix,
    rho: f64,
    nu: f64,
    vtilde_inv: &Matrix,
    rng: &mut R,
) -> Result<Vector> {
    Ok(shortrun_conditional(system, spec, sigma, rho, nu, vtilde_inv)?.sample(rng))
}

/// Gaussian full conditional of the long-run coefficient vector
/// `b_beta_star` on the system `yhat = diag(A_i (x) y_{i,-1}) b_beta_star + e`.
pub fn longrun_conditional(
    system: &LongRunSystem,
    spec: &PanelSpec,
    sigma: &Matrix,
    rho: f64,
    nu: f64,
    vtilde_beta_inv: &Matrix,
) -> Result<GaussianConditional> {
    let t = spec.usable_len;
    let n = spec.n_vars;
    let s_inv = sigma_inverse(sigma)?;
    let f_inv = if rho != 0.0 {
        Some(ar1_inverse(rho, t)?)
    } else {
        None
    };
    let total = spec.beta_star_len();
    let mut precision = vtilde_beta_inv * nu;
    let mut rhs = Vector::zeros(total);

    let fy: Vec<Matrix> = system
        .lag_levels
        .iter()
        .map(|y1| match &f_inv {
            Some(f) => f * y1,
            None => y1.clone(),
        })
        .collect();
    let mut fe = Matrix::zeros(t, spec.n_individuals * n);
    for j in 0..spec.n_individuals {
        let block = match &f_inv {
            Some(f) => f * &system.ehat[j],
            None => system.ehat[j].clone(),
        };
        fe.view_mut((0, j * n), (t, n)).copy_from(&block);
    }
    let weighted = fe * &s_inv;

    for i in 0..spec.n_individuals {
        if spec.ranks[i] == 0 {
            continue;
        }
        let off_i = spec.beta_star_offset(i);
        let w_i = n * spec.ranks[i];
        for j in 0..spec.n_individuals {
            if spec.ranks[j] == 0 {
                continue;
            }
            let off_j = spec.beta_star_offset(j);
            let w_j = n * spec.ranks[j];
            let s_block = s_inv.view((i * n, j * n), (n, n)).into_owned();
            let outer = system.a_blocks[i].transpose() * s_block * &system.a_blocks[j];
            let inner = system.lag_levels[i].transpose() * &fy[j];
            precision
                .view_mut((off_i, off_j), (w_i, w_j))
                .add_assign(&kron(&outer, &inner));
        }
        let m_i = weighted.view((0, i * n), (t, n)).into_owned();
        let rhs_i = system.lag_levels[i].transpose() * m_i * &system.a_blocks[i];
        rhs.rows_mut(off_i, w_i).copy_from(&vectorize(&rhs_i));
    }
    GaussianConditional::from_precision(precision, &rhs)
}

/// Draws `b_beta_star` from [`longrun_conditional`].
pub fn sample_b_beta<R: Rng + ?Sized>(
    system: &LongRunSystem,
    spec: &PanelSpec,
    sigma: &Matrix,
    rho: f64,
    nu: f64,
    vtilde_beta_inv: &Matrix,
    rng: &mut R,
) -> Result<Vector> {
    Ok(longrun_conditional(system, spec, sigma, rho, nu, vtilde_beta_inv)?.sample(rng))
}

/// Degrees of freedom of the `nu` full conditional: `Nnk + nu_nu`.
pub fn nu_conditional_dof(spec: &PanelSpec, cfg: &PriorConfig) -> f64 {
    (spec.n_individuals * spec.n_vars * spec.k()) as f64 + cfg.nu_nu
}

/// Gamma draw for the shrinkage scale `nu`, mean
/// `dof / [(nu_nu - nNrbar)/mu_nu + b^T Vtilde^{-1} b]`.
pub fn sample_nu<R: Rng + ?Sized>(
    b: &Vector,
    vtilde_inv: &Matrix,
    spec: &PanelSpec,
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<f64> {
    let quad = (vtilde_inv * b).dot(b);
    if !quad.is_finite() {
        return Err(Error::NonFinite {
            what: "b^T Vtilde^{-1} b",
        });
    }
    let dof = nu_conditional_dof(spec, cfg);
    let mean = dof / (cfg.nu_prior_dof(spec) / cfg.mu_nu + quad);
    dist::gamma_mean_dof(mean, dof, rng)
}

/// Degrees of freedom of the `tau` full conditional:
/// `nu_tau + N (n rbar - sum r_i^2 / N)`.
pub fn tau_conditional_dof(spec: &PanelSpec, cfg: &PriorConfig) -> f64 {
    let increment: usize = spec
        .ranks
        .iter()
        .map(|&r| r * (spec.n_vars - r))
        .sum();
    cfg.nu_tau + increment as f64
}

/// Inverse-gamma draw for `tau` via a gamma draw of `tau^{-1}`, with scale
/// built from `nu sum_i tr(beta*_i^T Hperp Hperp^T beta*_i)`.
pub fn sample_tau<R: Rng + ?Sized>(
    beta_stars: &[Matrix],
    nu: f64,
    spec: &PanelSpec,
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<f64> {
    let Some(h_perp) = cfg.h_perp()? else {
        return Err(Error::NoRestriction);
    };
    let trace: f64 = beta_stars
        .iter()
        .map(|bs| {
            let proj = h_perp.transpose() * bs;
            proj.iter().map(|x| x * x).sum::<f64>()
        })
        .sum();
    let dof = tau_conditional_dof(spec, cfg);
    let mean = dof / (cfg.nu_tau / cfg.mu_tau + nu * trace);
    Ok(1.0 / dist::gamma_mean_dof(mean, dof, rng)?)
}

/// Log acceptance ratio of a `rho` proposal under the full likelihood (flat
/// prior on [-1, 1]; the proposal is symmetric after reflection).
pub fn rho_log_ratio(eps: &Matrix, sigma: &Matrix, rho_old: f64, rho_new: f64) -> Result<f64> {
    let ll_new = log_likelihood_of_residuals(eps, sigma, rho_new)?;
    let ll_old = log_likelihood_of_residuals(eps, sigma, rho_old)?;
    Ok(ll_new - ll_old)
}

fn reflect_into_unit(mut x: f64) -> f64 {
    // Reflect at the +-1 boundaries until inside.
    while !(-1.0..=1.0).contains(&x) {
        if x > 1.0 {
            x = 2.0 - x;
        } else if x < -1.0 {
            x = -2.0 - x;
        }
    }
    x
}

fn mh_rho_given_residuals<R: Rng + ?Sized>(
    eps: &Matrix,
    sigma: &Matrix,
    rho: f64,
    proposal_sd: f64,
    rng: &mut R,
) -> (f64, bool) {
    let step: f64 = rng.sample::<f64, _>(StandardNormal) * proposal_sd;
    let proposal = reflect_into_unit(rho + step);
    // Reject outright on numerical failure near the unit boundary.
    let Ok(log_ratio) = rho_log_ratio(eps, sigma, rho, proposal) else {
        return (rho, false);
    };
    let u: f64 = rng.random::<f64>();
    if u.ln() < log_ratio {
        (proposal, true)
    } else {
        (rho, false)
    }
}

/// Random-walk Metropolis step for `rho` with reflection at the boundary.
pub fn mh_step_rho<R: Rng + ?Sized>(
    state: &VecmParams,
    data: &PanelData,
    spec: &PanelSpec,
    cc: &ChainConfig,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let eps = crate::model::residuals(data, spec, state)?;
    Ok(mh_rho_given_residuals(
        &eps,
        &state.sigma,
        state.rho,
        cc.rho_proposal_sd,
        rng,
    ))
}

/// Restriction basis truncated or padded to `r` columns, used to initialize
/// `beta_i`.
fn restriction_start(h: &Matrix, r: usize) -> Result<Matrix> {
    let n = h.nrows();
    let m = h.ncols();
    if m >= r {
        Ok(h.columns(0, r).into_owned())
    } else {
        let h_perp = crate::linalg::orth_complement(h)?;
        let mut out = Matrix::zeros(n, r);
        out.columns_mut(0, m).copy_from(h);
        out.columns_mut(m, r - m)
            .copy_from(&h_perp.columns(0, r - m));
        Ok(out)
    }
}

/// Per-individual least-squares start: `beta` from the restriction basis or
/// from the dominant right singular vectors of the unrestricted long-run
/// matrix, then `B_i` by least squares given `beta`, and the balanced
/// `beta*_i = beta_i (alpha_i^T alpha_i)^{1/2}`.
pub fn ols_start(data: &PanelData, spec: &PanelSpec, prior: &PriorConfig) -> Result<VecmParams> {
    let t = spec.usable_len;
    let n = spec.n_vars;
    let mut params = VecmParams::zero(spec);
    params.nu = prior.mu_nu;
    params.tau = if prior.hg.is_some() {
        1.0 / prior.mu_tau
    } else {
        1.0
    };

    let h = prior.normalized_h()?;
    let mut betas = Vec::with_capacity(spec.n_individuals);
    for i in 0..spec.n_individuals {
        let r = spec.ranks[i];
        if r == 0 {
            betas.push(Matrix::zeros(n, 0));
            continue;
        }
        let beta = match &h {
            Some(h) => restriction_start(h, r)?,
            None => {
                // Unrestricted least squares of dy on (y_{-1}, w) to get a
                // long-run matrix estimate, then its dominant row space.
                let y1 = data.lagged_levels(i, spec);
                let w = data.lagged_diff_block(i, spec);
                let mut design = Matrix::zeros(t, n + spec.k());
                design.view_mut((0, 0), (t, n)).copy_from(&y1);
                design.view_mut((0, n), (t, spec.k())).copy_from(&w);
                let coef = least_squares(&design, &data.differences(i, spec))?;
                let pi_hat = coef.rows(0, n).transpose();
                let svd = pi_hat.svd(false, true);
                let v_t = svd.v_t.expect("requested right singular vectors");
                let mut beta = v_t.rows(0, r).transpose().into_owned();
                crate::linalg::fix_column_signs(&mut beta);
                beta
            }
        };
        betas.push(beta);
    }

    let system = build_shortrun_system(data, spec, &betas)?;
    for i in 0..spec.n_individuals {
        let big_b = least_squares(&system.x_blocks[i], &system.dy[i])?;
        params.set_big_b(spec, i, &big_b);
        let r = spec.ranks[i];
        if r > 0 {
            let alpha = params.alpha(spec, i);
            let gram = alpha.transpose() * &alpha;
            let min_sv = gram.clone().svd(false, false).singular_values.min();
            let kappa = if min_sv > 1e-8 {
                sym_sqrt(&gram)?
            } else {
                Matrix::identity(r, r)
            };
            params.set_beta_star(spec, i, &(&betas[i] * kappa));
        }
    }
    let eps = system.residual_matrix(spec, &params);
    let denom = t.max(1) as f64;
    let sample_cov = eps.transpose() * &eps / denom;
    let nn = spec.n_individuals * n;
    params.sigma = sample_cov + Matrix::identity(nn, nn) * 1e-6;
    Ok(params)
}

fn least_squares(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let cols = x.ncols();
    let gram = x.transpose() * x;
    let xty = x.transpose() * y;
    let chol = match gram.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridged = gram + Matrix::identity(cols, cols) * 1e-8;
            ridged.cholesky().ok_or(Error::RankDeficient {
                context: "least_squares",
                rows: x.nrows(),
                cols,
                rank: 0,
            })?
        }
    };
    Ok(chol.solve(&xty))
}

/// Progress report emitted once per iteration.
#[derive(Debug, Clone, Copy)]
pub struct ProgressEvent {
    /// 1-based iteration index over warmup + kept iterations.
    pub iteration: usize,
    pub total: usize,
    pub log_likelihood: f64,
    /// Running acceptance rate of the Metropolis step.
    pub rho_acceptance: f64,
}

/// Runs the Gibbs sampler. Fully reproducible from `cc.seed`.
pub fn run_chain(
    data: &PanelData,
    spec: &PanelSpec,
    prior: &PriorConfig,
    cc: &ChainConfig,
) -> Result<ChainStore> {
    run_chain_with_progress(data, spec, prior, cc, |_| {})
}

/// [`run_chain`] with a per-iteration observer.
pub fn run_chain_with_progress<F: FnMut(&ProgressEvent)>(
    data: &PanelData,
    spec: &PanelSpec,
    prior: &PriorConfig,
    cc: &ChainConfig,
    mut on_progress: F,
) -> Result<ChainStore> {
    spec.validate()?;
    prior.validate_for(spec)?;
    cc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cc.seed);
    let t = spec.usable_len;

    // A data-free run (T = 0) cycles the prior; it needs a proper start.
    let mut params = if t == 0 {
        crate::priors::sample_prior(spec, prior, &mut rng)?
    } else {
        ols_start(data, spec, prior)?
    };
    let mut betas = params.betas(spec)?;
    let mut system = build_shortrun_system(data, spec, &betas)?;

    let (prior_scale, prior_dof) = match &prior.sigma_prior {
        SigmaPrior::InverseWishart { scale, dof } => (Some(scale.clone()), *dof),
        SigmaPrior::Improper => (None, 0),
    };

    let total = cc.warmup + cc.iterations;
    let capacity = cc.iterations / cc.thin;
    let mut draws = Vec::with_capacity(capacity);
    let mut loglik = Vec::with_capacity(capacity);
    let mut accepted = 0usize;
    let mut proposals = 0usize;

    let step_err = |iteration: usize, step: &'static str| {
        move |e: Error| Error::ChainAbort {
            iteration,
            step,
            source: Box::new(e),
        }
    };

    for it in 0..total {
        // Step 2: Sigma | rest.
        let eps = system.residual_matrix(spec, &params);
        let mut scale = sigma_scale(&eps, params.rho).map_err(step_err(it, "sigma scale"))?;
        if let Some(s0) = &prior_scale {
            scale += s0;
        }
        params.sigma = dist::inverse_wishart(&scale, prior_dof + t, &mut rng)
            .map_err(step_err(it, "sigma draw"))?;

        // Step 3: b | rest.
        let vtilde_inv = build_vtilde_inverse(spec, prior, &betas, params.tau)
            .map_err(step_err(it, "vtilde assembly"))?;
        params.b = sample_b(
            &system,
            spec,
            &params.sigma,
            params.rho,
            params.nu,
            &vtilde_inv,
            &mut rng,
        )
        .map_err(step_err(it, "b draw"))?;

        // Steps 4-6: long-run draw and rebalancing.
        if spec.beta_star_len() > 0 {
            let mut a_mats = Vec::with_capacity(spec.n_individuals);
            let mut c_mats = Vec::with_capacity(spec.n_individuals);
            for i in 0..spec.n_individuals {
                a_mats.push(
                    normalize_alpha(&params.alpha(spec, i)).map_err(step_err(it, "normalize alpha"))?,
                );
                c_mats.push(params.c_mat(spec, i));
            }
            let longrun = build_longrun_system(data, spec, &a_mats, &c_mats)
                .map_err(step_err(it, "long-run system"))?;
            let vtilde_beta_inv = build_vtilde_beta_inverse(spec, prior, params.tau)
                .map_err(step_err(it, "vtilde_beta assembly"))?;
            params.b_beta_star = sample_b_beta(
                &longrun,
                spec,
                &params.sigma,
                params.rho,
                params.nu,
                &vtilde_beta_inv,
                &mut rng,
            )
            .map_err(step_err(it, "beta* draw"))?;

            for i in 0..spec.n_individuals {
                if spec.ranks[i] == 0 {
                    continue;
                }
                let (beta, kappa) = decompose_beta_star(&params.beta_star(spec, i))
                    .map_err(step_err(it, "beta* decomposition"))?;
                params.set_alpha(spec, i, &(&a_mats[i] * kappa));
                betas[i] = beta;
            }
        }

        // Step 7: nu | rest, at the rebalanced state.
        let vtilde_inv_new = build_vtilde_inverse(spec, prior, &betas, params.tau)
            .map_err(step_err(it, "vtilde reassembly"))?;
        params.nu = sample_nu(&params.b, &vtilde_inv_new, spec, prior, &mut rng)
            .map_err(step_err(it, "nu draw"))?;

        // Step 8: tau^{-1} | rest.
        if prior.hg.is_some() {
            let beta_stars: Vec<Matrix> = (0..spec.n_individuals)
                .map(|i| params.beta_star(spec, i))
                .collect();
            params.tau = sample_tau(&beta_stars, params.nu, spec, prior, &mut rng)
                .map_err(step_err(it, "tau draw"))?;
        }

        // Rebuild the regression system at the new cointegration bases; it
        // carries into the rho step, the stored log-likelihood, and the next
        // iteration.
        system = build_shortrun_system(data, spec, &betas)
            .map_err(step_err(it, "short-run system"))?;
        let eps_new = system.residual_matrix(spec, &params);

        // Step 9 (optional): Metropolis step on rho.
        if cc.rho_sampling {
            let (rho, acc) = mh_rho_given_residuals(
                &eps_new,
                &params.sigma,
                params.rho,
                cc.rho_proposal_sd,
                &mut rng,
            );
            params.rho = rho;
            proposals += 1;
            accepted += usize::from(acc);
        }

        let ll = log_likelihood_of_residuals(&eps_new, &params.sigma, params.rho)
            .map_err(step_err(it, "log-likelihood"))?;

        if it >= cc.warmup {
            let post = it - cc.warmup + 1;
            if post % cc.thin == 0 {
                draws.push(params.clone());
                loglik.push(ll);
            }
        }
        on_progress(&ProgressEvent {
            iteration: it + 1,
            total,
            log_likelihood: ll,
            rho_acceptance: if proposals > 0 {
                accepted as f64 / proposals as f64
            } else {
                0.0
            },
        });
    }

    Ok(ChainStore {
        draws,
        loglik,
        warmup_boundary: cc.warmup,
        rho_acceptance: if proposals > 0 {
            accepted as f64 / proposals as f64
        } else {
            0.0
        },
    })
}

trait AddAssignView {
    fn add_assign(&mut self, other: &Matrix);
}

impl AddAssignView for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign(&mut self, other: &Matrix) {
        *self += other;
    }
}
