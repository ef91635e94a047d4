//! Shape-level linear algebra shared by the model builders, priors and
//! samplers: vectorization, Kronecker products, symmetric matrix roots,
//! orthogonal complements, the projection operator `P_t` and the AR(1)
//! correlation family.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Working tolerance for symmetry / PSD checks.
pub const SYM_TOL: f64 = 1e-10;

/// Relative tolerance below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-10;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Column-stacks a matrix into a vector (the `vec` operator).
pub fn vectorize(m: &Matrix) -> Vector {
    // DMatrix storage is column-major, so this is a straight copy.
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`]: reshapes a vector into a `rows x cols` matrix.
pub fn devectorize(v: &Vector, rows: usize, cols: usize) -> Matrix {
    assert_eq!(v.len(), rows * cols, "devectorize: length mismatch");
    Matrix::from_column_slice(rows, cols, v.as_slice())
}

/// Kronecker product `A (x) B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Stacks square blocks into a block-diagonal matrix.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    let max_asym = (m - m.transpose()).abs().max();
    if max_asym > SYM_TOL {
        return Err(Error::NotSymmetric {
            max_asymmetry: max_asym,
            tolerance: SYM_TOL,
        });
    }
    Ok(())
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues below `-1e-10` are rejected; small negative values in
/// `[-1e-10, 0]` are clamped to zero.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    sym_power(m, 0.5)
}

/// Inverse symmetric square root `M^{-1/2}`; requires strictly positive
/// eigenvalues relative to the largest one.
pub fn sym_inv_sqrt(m: &Matrix) -> Result<Matrix> {
    sym_power(m, -0.5)
}

fn sym_power(m: &Matrix, exponent: f64) -> Result<Matrix> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -SYM_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: *v,
                tolerance: SYM_TOL,
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
        if exponent < 0.0 && *v <= RANK_TOL * max_ev.max(1.0) {
            return Err(Error::RankDeficient {
                context: "sym_inv_sqrt",
                rows: m.nrows(),
                cols: m.ncols(),
                rank: eig
                    .eigenvalues
                    .iter()
                    .filter(|&&e| e > RANK_TOL * max_ev.max(1.0))
                    .count(),
            });
        }
        *v = v.powf(exponent);
    }
    let q = &eig.eigenvectors;
    Ok(q * Matrix::from_diagonal(&vals) * q.transpose())
}

fn column_rank(m: &Matrix) -> usize {
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    svd.singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * max_sv.max(1.0))
        .count()
}

/// Semi-orthogonal complement `H_perp` of a full-column-rank `H` (n x m,
/// m < n): `H_perp^T H_perp = I` and `H^T H_perp = 0`.
///
/// Column signs are fixed so each column's first nonzero entry is positive,
/// making the output deterministic.
pub fn orth_complement(h: &Matrix) -> Result<Matrix> {
    let (n, m) = h.shape();
    assert!(m < n, "orth_complement: H must have fewer columns than rows");
    if column_rank(h) < m {
        return Err(Error::RankDeficient {
            context: "orth_complement",
            rows: n,
            cols: m,
            rank: column_rank(h),
        });
    }
    // Projector onto the complement of sp(H); its unit eigenvectors with
    // eigenvalue 1 form the basis.
    let hth = h.transpose() * h;
    let hth_inv = hth
        .try_inverse()
        .ok_or(Error::RankDeficient {
            context: "orth_complement",
            rows: n,
            cols: m,
            rank: 0,
        })?;
    let p_perp = Matrix::identity(n, n) - h * hth_inv * h.transpose();
    let eig = nalgebra::SymmetricEigen::new(p_perp);
    let mut cols: Vec<Vector> = Vec::with_capacity(n - m);
    for j in 0..n {
        if eig.eigenvalues[j] > 0.5 {
            cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    if cols.len() != n - m {
        return Err(Error::RankDeficient {
            context: "orth_complement",
            rows: n,
            cols: m,
            rank: m + cols.len().saturating_sub(n - m),
        });
    }
    let mut out = Matrix::from_columns(&cols);
    fix_column_signs(&mut out);
    Ok(out)
}

/// Flips column signs so the first entry of nonnegligible magnitude in each
/// column is positive.
pub fn fix_column_signs(m: &mut Matrix) {
    let nrows = m.nrows();
    for mut col in m.column_iter_mut() {
        let scale = col.amax().max(1e-300);
        for i in 0..nrows {
            if col[i].abs() > 1e-8 * scale {
                if col[i] < 0.0 {
                    col *= -1.0;
                }
                break;
            }
        }
    }
}

/// Maps a full-column-rank `Hg` onto the semi-orthogonal matrix spanning the
/// same space: `H = Hg (Hg^T Hg)^{-1/2}`.
pub fn normalize_semiorthogonal(hg: &Matrix) -> Result<Matrix> {
    let (n, m) = hg.shape();
    if column_rank(hg) < m {
        return Err(Error::RankDeficient {
            context: "normalize_semiorthogonal",
            rows: n,
            cols: m,
            rank: column_rank(hg),
        });
    }
    let inv_root = sym_inv_sqrt(&(hg.transpose() * hg)).map_err(|e| match e {
        Error::RankDeficient { rows, cols, rank, .. } => Error::RankDeficient {
            context: "normalize_semiorthogonal",
            rows,
            cols,
            rank,
        },
        other => other,
    })?;
    Ok(hg * inv_root)
}

/// Projection operator `P_t = H H^T + t H_perp H_perp^T` for semi-orthogonal
/// `H`.
pub fn projector(h: &Matrix, t: f64) -> Result<Matrix> {
    if !(t >= 0.0) {
        return Err(Error::OutOfRange {
            what: "projector weight t",
            value: t,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let n = h.nrows();
    if h.ncols() == n {
        // Square semi-orthogonal H spans everything; the complement is empty.
        return Ok(h * h.transpose());
    }
    let h_perp = orth_complement(h)?;
    Ok(h * h.transpose() + (h_perp.clone() * h_perp.transpose()) * t)
}

/// T x T first-order autocorrelation matrix with entries `rho^|i-j|`.
pub fn ar1_correlation(rho: f64, t: usize) -> Result<Matrix> {
    if !(-1.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(Error::OutOfRange {
            what: "rho",
            value: rho,
            lo: -1.0,
            hi: 1.0,
        });
    }
    Ok(Matrix::from_fn(t, t, |i, j| {
        rho.powi((i as i32 - j as i32).abs())
    }))
}

/// Tridiagonal inverse of [`ar1_correlation`]; requires `|rho| < 1`.
pub fn ar1_inverse(rho: f64, t: usize) -> Result<Matrix> {
    let one_minus = 1.0 - rho * rho;
    if !(rho.is_finite() && one_minus > 1e-12) {
        return Err(Error::OutOfRange {
            what: "rho (AR(1) inverse)",
            value: rho,
            lo: -1.0,
            hi: 1.0,
        });
    }
    let mut inv = Matrix::zeros(t, t);
    if t == 0 {
        return Ok(inv);
    }
    if t == 1 {
        inv[(0, 0)] = 1.0;
        return Ok(inv);
    }
    let s = 1.0 / one_minus;
    for i in 0..t {
        inv[(i, i)] = if i == 0 || i == t - 1 {
            s
        } else {
            (1.0 + rho * rho) * s
        };
        if i + 1 < t {
            inv[(i, i + 1)] = -rho * s;
            inv[(i + 1, i)] = -rho * s;
        }
    }
    Ok(inv)
}

/// `log |F_rho|` for the T x T AR(1) correlation matrix.
pub fn ar1_log_det(rho: f64, t: usize) -> Result<f64> {
    let one_minus = 1.0 - rho * rho;
    if !(rho.is_finite() && one_minus > 1e-12) {
        return Err(Error::OutOfRange {
            what: "rho (AR(1) log-det)",
            value: rho,
            lo: -1.0,
            hi: 1.0,
        });
    }
    if t <= 1 {
        return Ok(0.0);
    }
    Ok((t as f64 - 1.0) * one_minus.ln())
}
