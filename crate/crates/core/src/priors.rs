//! Prior configuration, prior covariance assembly, prior sampling and
//! density evaluation.
//!
//! Regression coefficients carry the hierarchy `b | nu ~ N(0, Vtilde / nu)`
//! and `b_beta_star | nu, tau ~ N(0, Vtilde_beta / nu)`. `Vtilde` is
//! block-diagonal over individuals: lag and deterministic coefficients get
//! a diffuse diagonal, while the `alpha_i` entries get the projection
//! structure `I_r (x) P_tau(beta_i)` that has to be reassembled every
//! iteration from the current cointegration basis. `Vtilde_beta` stacks
//! `I_{r_i} (x) P_tau` blocks built from the configured restriction space.

use rand::Rng;

use crate::dist;
use crate::error::{Error, Result};
use crate::linalg::{normalize_semiorthogonal, orth_complement, projector, Matrix, Vector};
use crate::model::{decompose_beta_star, PanelSpec, VecmParams};

/// Prior on the error covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaPrior {
    /// `p(Sigma) ∝ |Sigma|^{-(Nn+1)/2}`.
    Improper,
    /// Proper inverse-Wishart with the given scale and degrees of freedom.
    InverseWishart { scale: Matrix, dof: usize },
}

/// Hyperparameters and restriction structure of the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// Prior mean of the shrinkage scale `nu`.
    pub mu_nu: f64,
    /// Prior degrees of freedom for `nu` before the `n N rbar` offset.
    pub nu_nu: f64,
    /// Prior mean parameter for `tau`.
    pub mu_tau: f64,
    /// Prior degrees of freedom for `tau`.
    pub nu_tau: f64,
    /// Cointegration-space restriction matrix (n x m), or `None` for the
    /// diffuse setting where `tau` stays fixed at 1.
    pub hg: Option<Matrix>,
    /// Prior variance of unrestricted coefficients (before `1/nu` scaling).
    pub v_diffuse: f64,
    pub sigma_prior: SigmaPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            mu_nu: 21.0,
            nu_nu: 42.0,
            mu_tau: 5.0,
            nu_tau: 15.0,
            hg: None,
            v_diffuse: 1000.0,
            sigma_prior: SigmaPrior::Improper,
        }
    }
}

impl PriorConfig {
    /// Degrees of freedom of the `nu` prior for this panel.
    pub fn nu_prior_dof(&self, spec: &PanelSpec) -> f64 {
        self.nu_nu - spec.n_vars as f64 * spec.n_individuals as f64 * spec.rbar()
    }

    pub fn validate_for(&self, spec: &PanelSpec) -> Result<()> {
        for (name, value) in [
            ("prior.mu_nu", self.mu_nu),
            ("prior.nu_nu", self.nu_nu),
            ("prior.mu_tau", self.mu_tau),
            ("prior.nu_tau", self.nu_tau),
            ("prior.v_diffuse", self.v_diffuse),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig {
                    message: format!("{name} must be positive and finite, got {value}"),
                });
            }
        }
        if self.nu_prior_dof(spec) <= 0.0 {
            return Err(Error::InvalidConfig {
                message: format!(
                    "prior.nu_nu = {} leaves non-positive degrees of freedom: \
                     nu_nu - n*N*rbar = {:.3} must be > 0",
                    self.nu_nu,
                    self.nu_prior_dof(spec)
                ),
            });
        }
        if let Some(hg) = &self.hg {
            if hg.nrows() != spec.n_vars {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "prior.hg has {} rows but the panel has n = {} variables",
                        hg.nrows(),
                        spec.n_vars
                    ),
                });
            }
            if hg.ncols() == 0 || hg.ncols() >= spec.n_vars {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "prior.hg must have between 1 and n - 1 = {} columns, got {}",
                        spec.n_vars - 1,
                        hg.ncols()
                    ),
                });
            }
            normalize_semiorthogonal(hg).map_err(|_| Error::InvalidConfig {
                message: "prior.hg must have full column rank".into(),
            })?;
        }
        if let SigmaPrior::InverseWishart { scale, dof } = &self.sigma_prior {
            let nn = spec.n_individuals * spec.n_vars;
            if scale.shape() != (nn, nn) {
                return Err(Error::InvalidConfig {
                    message: format!(
                        "prior.sigma scale must be {nn}x{nn}, got {}x{}",
                        scale.nrows(),
                        scale.ncols()
                    ),
                });
            }
            if *dof <= nn + 1 {
                return Err(Error::InvalidConfig {
                    message: format!("prior.sigma dof = {dof} must exceed Nn + 1 = {}", nn + 1),
                });
            }
        }
        Ok(())
    }

    /// Semi-orthogonal restriction basis `H`, when configured.
    pub fn normalized_h(&self) -> Result<Option<Matrix>> {
        self.hg.as_ref().map(normalize_semiorthogonal).transpose()
    }

    /// Orthogonal complement of the restriction basis, when configured.
    pub fn h_perp(&self) -> Result<Option<Matrix>> {
        match self.normalized_h()? {
            Some(h) => Ok(Some(orth_complement(&h)?)),
            None => Ok(None),
        }
    }

    /// `P_t` built from the restriction space (identity when diffuse).
    pub fn projection(&self, n_vars: usize, t: f64) -> Result<Matrix> {
        match self.normalized_h()? {
            Some(h) => projector(&h, t),
            None => Ok(Matrix::identity(n_vars, n_vars)),
        }
    }
}

/// Positions of the `alpha_i` entries inside individual `i`'s `vec(B_i)`
/// block: `(position, alpha row j, alpha column l)`.
fn alpha_positions(spec: &PanelSpec, i: usize) -> Vec<(usize, usize, usize)> {
    let r = spec.ranks[i];
    let width = spec.k() + r;
    let mut out = Vec::with_capacity(spec.n_vars * r);
    for j in 0..spec.n_vars {
        for l in 0..r {
            out.push((j * width + l, j, l));
        }
    }
    out
}

fn vtilde_blocks(
    spec: &PanelSpec,
    cfg: &PriorConfig,
    betas: &[Matrix],
    tau: f64,
    invert: bool,
) -> Result<Vec<Matrix>> {
    if tau <= 0.0 {
        return Err(Error::NotPsd {
            min_eigenvalue: tau,
            tolerance: 0.0,
        });
    }
    let diffuse = if invert {
        1.0 / cfg.v_diffuse
    } else {
        cfg.v_diffuse
    };
    // P_tau(beta)^{-1} = P_{1/tau}(beta): inverting only flips the weight on
    // the complement of sp(beta).
    let weight = if invert { 1.0 / tau } else { tau };
    let mut blocks = Vec::with_capacity(spec.n_individuals);
    for i in 0..spec.n_individuals {
        let m_i = spec.n_vars * (spec.k() + spec.ranks[i]);
        let mut block = Matrix::from_diagonal(&Vector::from_element(m_i, diffuse));
        if spec.ranks[i] > 0 {
            let p_beta = projector(&betas[i], weight)?;
            let positions = alpha_positions(spec, i);
            for &(pos_a, j_a, l_a) in &positions {
                for &(pos_b, j_b, l_b) in &positions {
                    block[(pos_a, pos_b)] = if l_a == l_b { p_beta[(j_a, j_b)] } else { 0.0 };
                }
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Assembles the block-diagonal prior covariance shape `Vtilde` for the
/// short-run coefficient vector, given the current cointegration bases and
/// `tau`. The prior covariance of `b` is `Vtilde / nu`.
pub fn build_vtilde(
    spec: &PanelSpec,
    cfg: &PriorConfig,
    betas: &[Matrix],
    tau: f64,
) -> Result<Matrix> {
    Ok(crate::linalg::block_diag(&vtilde_blocks(
        spec, cfg, betas, tau, false,
    )?))
}

/// Inverse of [`build_vtilde`], computed analytically from the projection
/// structure.
pub fn build_vtilde_inverse(
    spec: &PanelSpec,
    cfg: &PriorConfig,
    betas: &[Matrix],
    tau: f64,
) -> Result<Matrix> {
    Ok(crate::linalg::block_diag(&vtilde_blocks(
        spec, cfg, betas, tau, true,
    )?))
}

/// `log |Vtilde|` for the assembled covariance shape.
pub fn vtilde_log_det(spec: &PanelSpec, cfg: &PriorConfig, tau: f64) -> f64 {
    // Each individual contributes v_diffuse^{n k} from the diffuse part and
    // |P_tau(beta)|^{r} = tau^{r (n - r)} from the alpha block.
    let mut out = 0.0;
    for i in 0..spec.n_individuals {
        let r = spec.ranks[i];
        out += (spec.n_vars * spec.k()) as f64 * cfg.v_diffuse.ln();
        out += (r * (spec.n_vars - r)) as f64 * tau.ln();
    }
    out
}

/// Assembles `Vtilde_beta = diag(I_{r_i} (x) P_tau)` for the long-run
/// coefficient vector. `P_tau` is the identity when no restriction is
/// configured.
pub fn build_vtilde_beta(spec: &PanelSpec, cfg: &PriorConfig, tau: f64) -> Result<Matrix> {
    vtilde_beta_with_weight(spec, cfg, tau)
}

/// Inverse of [`build_vtilde_beta`]; requires `tau > 0`.
pub fn build_vtilde_beta_inverse(spec: &PanelSpec, cfg: &PriorConfig, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 {
        return Err(Error::NotPsd {
            min_eigenvalue: tau,
            tolerance: 0.0,
        });
    }
    vtilde_beta_with_weight(spec, cfg, 1.0 / tau)
}

fn vtilde_beta_with_weight(spec: &PanelSpec, cfg: &PriorConfig, weight: f64) -> Result<Matrix> {
    let p = cfg.projection(spec.n_vars, weight)?;
    let blocks: Vec<Matrix> = spec
        .ranks
        .iter()
        .map(|&r| crate::linalg::kron(&Matrix::identity(r, r), &p))
        .collect();
    Ok(crate::linalg::block_diag(&blocks))
}

/// `log |Vtilde_beta|`.
pub fn vtilde_beta_log_det(spec: &PanelSpec, cfg: &PriorConfig, tau: f64) -> f64 {
    let m = cfg.hg.as_ref().map_or(spec.n_vars, Matrix::ncols);
    spec.rank_sum() as f64 * (spec.n_vars - m) as f64 * tau.ln()
}

/// Draws one parameter state from the prior. Requires a proper `Sigma`
/// prior. The generative order mirrors the sampler's reparameterization:
/// `nu`, `tau`, then `beta*_i = P_{sqrt(tau)} Z_i`, then the short-run
/// coefficients given the implied `beta_i`, then `Sigma`.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &PanelSpec,
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<VecmParams> {
    let SigmaPrior::InverseWishart { scale, dof } = &cfg.sigma_prior else {
        return Err(Error::ImproperPrior);
    };
    cfg.validate_for(spec)?;
    let nu = dist::gamma_mean_dof(cfg.mu_nu, cfg.nu_prior_dof(spec), rng)?;
    let tau = if cfg.hg.is_some() {
        dist::inv_gamma_mean_dof(cfg.mu_tau, cfg.nu_tau, rng)?
    } else {
        1.0
    };

    let mut params = VecmParams::zero(spec);
    params.nu = nu;
    params.tau = tau;
    let root = nu.sqrt().recip();

    // beta*_i = P_eta Z_i with eta = sqrt(tau): covariance (I (x) P_tau)/nu.
    let p_eta = cfg.projection(spec.n_vars, tau.sqrt())?;
    let mut betas = Vec::with_capacity(spec.n_individuals);
    for i in 0..spec.n_individuals {
        let r = spec.ranks[i];
        let z = dist::std_normal_matrix(spec.n_vars, r, rng) * root;
        let beta_star = &p_eta * z;
        params.set_beta_star(spec, i, &beta_star);
        betas.push(if r == 0 {
            Matrix::zeros(spec.n_vars, 0)
        } else {
            decompose_beta_star(&beta_star)?.0
        });
    }

    // b | nu, beta, tau: alpha columns through P_{sqrt(tau)}(beta_i), the
    // rest diffuse.
    let diffuse_sd = cfg.v_diffuse.sqrt() * root;
    for i in 0..spec.n_individuals {
        let r = spec.ranks[i];
        let mut big_b = dist::std_normal_matrix(spec.k() + r, spec.n_vars, rng) * diffuse_sd;
        if r > 0 {
            let p_half = projector(&betas[i], tau.sqrt())?;
            let alpha = &p_half * dist::std_normal_matrix(spec.n_vars, r, rng) * root;
            big_b.rows_mut(0, r).copy_from(&alpha.transpose());
        }
        params.set_big_b(spec, i, &big_b);
    }

    params.sigma = dist::inverse_wishart(scale, *dof, rng)?;
    Ok(params)
}

/// Joint log prior density at `params`: the proper components plus the
/// improper `-(Nn+1)/2 log |Sigma|` term (or the inverse-Wishart density
/// when a proper `Sigma` prior is configured).
pub fn log_prior(params: &VecmParams, spec: &PanelSpec, cfg: &PriorConfig) -> Result<f64> {
    params.validate_dims(spec)?;
    let mut out = 0.0;

    out += dist::gamma_mean_dof_log_pdf(params.nu, cfg.mu_nu, cfg.nu_prior_dof(spec));

    if cfg.hg.is_some() {
        out += dist::inv_gamma_mean_dof_log_pdf(params.tau, cfg.mu_tau, cfg.nu_tau);
    }

    // b | nu, beta, tau
    let betas = params.betas(spec)?;
    let vtilde_inv = build_vtilde_inverse(spec, cfg, &betas, params.tau)?;
    let m = spec.b_len() as f64;
    let quad_b = (&vtilde_inv * &params.b).dot(&params.b);
    out += -0.5 * m * (2.0 * std::f64::consts::PI).ln() + 0.5 * m * params.nu.ln()
        - 0.5 * vtilde_log_det(spec, cfg, params.tau)
        - 0.5 * params.nu * quad_b;

    // b_beta_star | nu, tau
    let vb_inv = build_vtilde_beta_inverse(spec, cfg, params.tau)?;
    let mb = spec.beta_star_len() as f64;
    let quad_beta = (&vb_inv * &params.b_beta_star).dot(&params.b_beta_star);
    out += -0.5 * mb * (2.0 * std::f64::consts::PI).ln() + 0.5 * mb * params.nu.ln()
        - 0.5 * vtilde_beta_log_det(spec, cfg, params.tau)
        - 0.5 * params.nu * quad_beta;

    match &cfg.sigma_prior {
        SigmaPrior::Improper => {
            let chol = params.sigma.clone().cholesky().ok_or(Error::NotPd {
                context: "log_prior: sigma",
            })?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let nn = (spec.n_individuals * spec.n_vars) as f64;
            out += -0.5 * (nn + 1.0) * log_det;
        }
        SigmaPrior::InverseWishart { scale, dof } => {
            out += dist::inverse_wishart_log_pdf(&params.sigma, scale, *dof)?;
        }
    }

    if !out.is_finite() {
        return Err(Error::NonFinite { what: "log prior" });
    }
    Ok(out)
}
