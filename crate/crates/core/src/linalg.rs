//! Dense complex linear-algebra kernels.
//!
//! Thin wrappers over `nalgebra` that pin down the conventions the rest of the
//! crate relies on: singular values sorted in descending order, the upper
//! triangular Cholesky factor `C = D^H D`, SVD-based pseudo-inverse with an
//! explicit rank tolerance and Hermitian nullspace bases.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

#[allow(non_camel_case_types)]
pub type c64 = Complex64;
pub type CMatrix = DMatrix<c64>;
pub type CVector = DVector<c64>;

pub const ZERO: c64 = c64::new(0.0, 0.0);
pub const ONE: c64 = c64::new(1.0, 0.0);

/// Default relative rank tolerance for Hermitian nullspace extraction.
pub const NULLSPACE_RTOL: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

/// Thin singular value decomposition `A = U diag(S) V^H`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v: CMatrix,
}

impl Svd {
    pub fn rank(&self, tol: f64) -> usize {
        self.s.iter().filter(|&&s| s > tol).count()
    }

    pub fn reconstruct(&self) -> CMatrix {
        let mut us = self.u.clone();
        for (j, &s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(s);
        }
        us * self.v.adjoint()
    }
}

pub fn is_finite(a: &CMatrix) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn ensure_finite(a: &CMatrix) -> Result<()> {
    if is_finite(a) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Squared Frobenius norm.
pub fn frob2(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn frob(a: &CMatrix) -> f64 {
    frob2(a).sqrt()
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn svd(a: &CMatrix) -> Result<Svd> {
    ensure_finite(a)?;
    let (m, n) = a.shape();
    let r = m.min(n);
    if r == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(m, 0),
            s: Vec::new(),
            v: CMatrix::zeros(n, 0),
        });
    }
    let dec = nalgebra::SVD::try_new_unordered(a.clone(), true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Decomposition {
            op: "svd",
            reason: "iteration did not converge".into(),
        })?;
    let u_raw = dec.u.expect("u requested");
    let v_t = dec.v_t.expect("v requested");
    let s_raw: Vec<f64> = dec.singular_values.iter().copied().collect();

    // stable: equal values keep the decomposition's native order
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| s_raw[j].partial_cmp(&s_raw[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = CMatrix::zeros(m, r);
    let mut v = CMatrix::zeros(n, r);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &v_t.row(src).adjoint());
        s.push(s_raw[src]);
    }
    Ok(Svd { u, s, v })
}

/// Lower-triangular `L` with `C = L L^H`; rejects non-positive pivots.
fn cholesky_lower(c: &CMatrix, op: &'static str) -> Result<CMatrix> {
    ensure_finite(c)?;
    if !c.is_square() {
        return Err(Error::dim(op, format!("{:?} is not square", c.shape())));
    }
    let n = c.nrows();
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = c[(j, j)].re;
        for p in 0..j {
            d -= l[(j, p)].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Decomposition {
                op,
                reason: "matrix is not positive definite".into(),
            });
        }
        let d = d.sqrt();
        l[(j, j)] = c64::from(d);
        for i in j + 1..n {
            let mut v = c[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)].conj();
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Upper-triangular `D` with `C = D^H D`.
pub fn cholesky_upper(c: &CMatrix) -> Result<CMatrix> {
    Ok(cholesky_lower(c, "cholesky")?.adjoint())
}

/// Default pseudo-inverse tolerance: `max(m, n) * eps * s_max`.
pub fn default_pinv_tol(shape: (usize, usize), s_max: f64) -> f64 {
    shape.0.max(shape.1) as f64 * f64::EPSILON * s_max
}

/// Moore-Penrose pseudo-inverse; singular values `<= tol` are treated as zero.
pub fn pinv(a: &CMatrix, tol: Option<f64>) -> Result<CMatrix> {
    let (m, n) = a.shape();
    let dec = svd(a)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let tol = tol.unwrap_or_else(|| default_pinv_tol((m, n), s_max));
    let mut out = CMatrix::zeros(n, m);
    for (j, &s) in dec.s.iter().enumerate() {
        if s > tol && s > 0.0 {
            out += dec.v.column(j) * dec.u.column(j).adjoint() * c64::from(1.0 / s);
        }
    }
    Ok(out)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues descending.
pub fn hermitian_eigen(a: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    ensure_finite(a)?;
    if !a.is_square() {
        return Err(Error::dim("hermitian_eigen", format!("{:?} is not square", a.shape())));
    }
    let n = a.nrows();
    let sym = (a + a.adjoint()) * c64::from(0.5);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, SVD_MAX_ITER).ok_or_else(|| {
        Error::Decomposition {
            op: "hermitian_eigen",
            reason: "iteration did not converge".into(),
        }
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Orthonormal basis of the numerical nullspace of a Hermitian PSD matrix.
///
/// Eigenvalues `<= rtol * lambda_max` are treated as zero. An all-zero input
/// yields the identity basis.
pub fn nullspace_basis(a: &CMatrix, rtol: f64) -> Result<CMatrix> {
    let (values, vectors) = hermitian_eigen(a)?;
    let n = a.nrows();
    let lmax = values.first().copied().unwrap_or(0.0).max(0.0);
    if lmax == 0.0 {
        return Ok(identity(n));
    }
    let rank = values.iter().filter(|&&l| l > rtol * lmax).count();
    Ok(vectors.columns(rank, n - rank).into_owned())
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Column-wise Khatri-Rao product: column `j` is `kron(a[:, j], b[:, j])`.
pub fn khatri_rao(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim(
            "khatri_rao",
            format!("column counts {} and {} differ", a.ncols(), b.ncols()),
        ));
    }
    let (ma, mb) = (a.nrows(), b.nrows());
    let mut out = CMatrix::zeros(ma * mb, a.ncols());
    for j in 0..a.ncols() {
        for i in 0..ma {
            let aij = a[(i, j)];
            for l in 0..mb {
                out[(i * mb + l, j)] = aij * b[(l, j)];
            }
        }
    }
    Ok(out)
}

/// Entrywise projection onto the unit-modulus set (keeps the phase; zero maps to 1).
pub fn phase_project(a: &CMatrix) -> CMatrix {
    a.map(unit_phase)
}

pub fn unit_phase(z: c64) -> c64 {
    let r = z.norm();
    if r > 0.0 && r.is_finite() {
        z / r
    } else {
        ONE
    }
}

/// Solves `A X = B` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("solve_hpd", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let l = cholesky_lower(a, "solve_hpd")?;
    let z = l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Decomposition { op: "solve_hpd", reason: "singular factor".into() })?;
    l.adjoint()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Decomposition { op: "solve_hpd", reason: "singular factor".into() })
}

/// `A^{-1/2}` for Hermitian positive definite `A`.
pub fn hermitian_inv_sqrt(a: &CMatrix) -> Result<CMatrix> {
    let (values, vectors) = hermitian_eigen(a)?;
    if values.iter().any(|&l| l <= 0.0) {
        return Err(Error::Decomposition {
            op: "hermitian_inv_sqrt",
            reason: "matrix is not positive definite".into(),
        });
    }
    let mut scaled = vectors.clone();
    for (j, &l) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / l.sqrt());
    }
    Ok(scaled * vectors.adjoint())
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[CMatrix]) -> CMatrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation.
pub fn hstack(blocks: &[CMatrix]) -> Result<CMatrix> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    if blocks.iter().any(|b| b.nrows() != rows) {
        return Err(Error::dim("hstack", "row counts differ"));
    }
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), b.shape()).copy_from(b);
        c += b.ncols();
    }
    Ok(out)
}

/// Vertical concatenation.
pub fn vstack(blocks: &[CMatrix]) -> Result<CMatrix> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    if blocks.iter().any(|b| b.ncols() != cols) {
        return Err(Error::dim("vstack", "column counts differ"));
    }
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    Ok(out)
}

/// `log2 det` of a Hermitian positive definite matrix.
pub fn log2_det_hpd(a: &CMatrix) -> Result<f64> {
    let l = cholesky_lower(a, "log2_det")?;
    Ok((0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.log2()).sum())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(rng: &mut impl Rng, m: usize, n: usize) -> CMatrix {
        CMatrix::from_fn(m, n, |_, _| c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    fn rel(a: &CMatrix, b: &CMatrix) -> f64 {
        frob(&(a - b)) / frob(b).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn svd_identity_and_rank_one() {
        let dec = svd(&identity(3)).unwrap();
        assert!(dec.s.iter().all(|&s| (s - 1.0).abs() < 1e-14));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut u = random_matrix(&mut rng, 5, 1);
        let mut v = random_matrix(&mut rng, 4, 1);
        u /= c64::from(frob(&u));
        v /= c64::from(frob(&v));
        let dec = svd(&(&u * v.adjoint())).unwrap();
        assert!((dec.s[0] - 1.0).abs() < 1e-12);
        assert!(dec.s[1..].iter().all(|&s| s < 1e-12));
    }

    #[test]
    fn svd_reconstructs_random_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 8, 4);
        let dec = svd(&a).unwrap();
        assert!(rel(&dec.reconstruct(), &a) <= 1e-10);
        assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(rel(&(dec.u.adjoint() * &dec.u), &identity(4)) < 1e-10);
        assert!(rel(&(dec.v.adjoint() * &dec.v), &identity(4)) < 1e-10);
    }

    #[test]
    fn svd_wide_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 3, 7);
        let dec = svd(&a).unwrap();
        assert_eq!(dec.u.shape(), (3, 3));
        assert_eq!(dec.v.shape(), (7, 3));
        assert!(rel(&dec.reconstruct(), &a) <= 1e-10);
    }

    #[test]
    fn cholesky_cases() {
        assert!(rel(&cholesky_upper(&identity(3)).unwrap(), &identity(3)) < 1e-15);
        let d = CMatrix::from_diagonal(&CVector::from_vec(vec![c64::from(4.0), c64::from(9.0)]));
        let f = cholesky_upper(&d).unwrap();
        assert!((f[(0, 0)].re - 2.0).abs() < 1e-15 && (f[(1, 1)].re - 3.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tall = random_matrix(&mut rng, 9, 4);
        let c = tall.adjoint() * &tall;
        let dd = cholesky_upper(&c).unwrap();
        assert!(rel(&(dd.adjoint() * &dd), &c) <= 1e-10);
        for i in 0..4 {
            for j in 0..i {
                assert_eq!(dd[(i, j)], ZERO, "D must be upper triangular");
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let c = CMatrix::from_diagonal(&CVector::from_vec(vec![c64::from(1.0), c64::from(-1.0)]));
        assert!(matches!(cholesky_upper(&c), Err(Error::Decomposition { .. })));
    }

    #[test]
    fn pinv_cases() {
        let a = CMatrix::from_row_slice(2, 2, &[c64::new(1.0, 1.0), c64::from(2.0), c64::from(0.5), c64::new(0.0, -3.0)]);
        let inv = a.clone().try_inverse().unwrap();
        assert!(rel(&pinv(&a, None).unwrap(), &inv) < 1e-12);

        let z = CMatrix::zeros(3, 2);
        let pz = pinv(&z, None).unwrap();
        assert_eq!(pz.shape(), (2, 3));
        assert!(frob(&pz) == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_matrix(&mut rng, 6, 2);
        let pt = pinv(&t, None).unwrap();
        assert!(rel(&(&pt * &t), &identity(2)) <= 1e-9);
    }

    #[test]
    fn pinv_penrose_identities_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 6, 2) * random_matrix(&mut rng, 2, 5);
        let p = pinv(&a, None).unwrap();
        assert!(rel(&(&a * &p * &a), &a) < 1e-9);
        assert!(rel(&(&p * &a * &p), &p) < 1e-9);
        let ap = &a * &p;
        assert!(rel(&ap.adjoint(), &ap) < 1e-9);
        let pa = &p * &a;
        assert!(rel(&pa.adjoint(), &pa) < 1e-9);
        assert!(rel(&pinv(&p, None).unwrap(), &a) < 1e-8);
    }

    #[test]
    fn nullspace_cases() {
        let basis = nullspace_basis(&CMatrix::zeros(4, 4), NULLSPACE_RTOL).unwrap();
        assert!(rel(&basis, &identity(4)) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = random_matrix(&mut rng, 4, 1);
        let basis = nullspace_basis(&(&u * u.adjoint()), NULLSPACE_RTOL).unwrap();
        assert_eq!(basis.ncols(), 3);
        assert!(frob(&(u.adjoint() * &basis)) < 1e-12 * frob(&u));

        let a = random_matrix(&mut rng, 6, 1);
        let b = random_matrix(&mut rng, 6, 1);
        let r = &a * a.adjoint() + &b * b.adjoint();
        let basis = nullspace_basis(&r, NULLSPACE_RTOL).unwrap();
        assert_eq!(basis.ncols(), 4);
        assert!(frob(&(&r * &basis)) <= 1e-8 * frob(&r));
        assert!(rel(&(basis.adjoint() * &basis), &identity(4)) < 1e-10);
    }

    #[test]
    fn kron_and_khatri_rao() {
        assert!(rel(&kron(&identity(2), &identity(2)), &identity(4)) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 2, 2);
        let b = random_matrix(&mut rng, 2, 2);
        let k = kron(&a, &b);
        // elementwise expansion: (A ⊗ B)[2i + p, 2j + q] = a_ij b_pq
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        assert_eq!(k[(2 * i + p, 2 * j + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }

        let x = random_matrix(&mut rng, 3, 1);
        let y = random_matrix(&mut rng, 4, 1);
        assert!(rel(&khatri_rao(&x, &y).unwrap(), &kron(&x, &y)) < 1e-15);

        let c = random_matrix(&mut rng, 3, 3);
        assert!(matches!(khatri_rao(&a, &c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn phase_projection_is_unit_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = random_matrix(&mut rng, 5, 3);
        a[(0, 0)] = ZERO;
        let p = phase_project(&a);
        assert!(p.iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn inv_sqrt_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_matrix(&mut rng, 7, 3);
        let g = f.adjoint() * &f;
        let s = hermitian_inv_sqrt(&g).unwrap();
        assert!(rel(&(&s * &g * &s), &identity(3)) < 1e-10);
        let det = g.clone().determinant().re;
        assert!((log2_det_hpd(&g).unwrap() - det.log2()).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn svd_invariants(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, m, n);
                let dec = svd(&a).unwrap();
                prop_assert!(dec.s.iter().all(|&s| s >= 0.0));
                prop_assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
                let r = m.min(n);
                prop_assert!(rel(&(dec.u.adjoint() * &dec.u), &identity(r)) < 1e-10);
                prop_assert!(rel(&(dec.v.adjoint() * &dec.v), &identity(r)) < 1e-10);
                prop_assert!(rel(&dec.reconstruct(), &a) < 1e-10);
            }

            #[test]
            fn pinv_involution(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, m, n);
                let back = pinv(&pinv(&a, None).unwrap(), None).unwrap();
                prop_assert!(rel(&back, &a) < 1e-8);
            }
        }
    }
}
