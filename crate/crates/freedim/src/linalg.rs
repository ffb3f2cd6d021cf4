//! Dense complex-matrix helpers shared by the representation and
//! random-matrix layers: Frobenius/spectral norms, phase-fixed QR,
//! polar factors, eigenvalues of unitary matrices, and the matrix
//! wire format.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("QR produced a zero diagonal entry; input was numerically singular")]
    SingularQr,
    #[error("polar factor undefined: matrix numerically singular even after perturbation")]
    SingularPolar,
    #[error("SVD failed to converge")]
    SvdFailed,
    #[error("matrix is {rows}x{cols}, expected square of dimension {expected}")]
    BadShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn zeros(n: usize) -> CMatrix {
    CMatrix::zeros(n, n)
}

/// Frobenius norm; an upper bound for the spectral norm, which makes it the
/// conservative choice for residual checks.
pub fn frob_norm(m: &CMatrix) -> f64 {
    m.norm()
}

pub fn frob_dist(a: &CMatrix, b: &CMatrix) -> f64 {
    frob_norm(&(a - b))
}

/// Normalized trace tr_n = (1/n) Tr.
pub fn normalized_trace(m: &CMatrix) -> C64 {
    m.trace() / C64::new(m.nrows() as f64, 0.0)
}

/// `Tr(a b)` without forming the product; costs n^2 instead of n^3.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Spectral norm by power iteration on `A* A`.
///
/// Deterministic start vector, fixed iteration count; accurate to far better
/// than the slack any caller leaves on a norm bound.
pub fn spectral_norm(a: &CMatrix) -> f64 {
    let n = a.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::<C64>::from_fn(n, |i, _| C64::new(1.0 + 0.01 * i as f64, 0.0));
    v /= C64::new(v.norm(), 0.0);
    let mut lambda = 0.0f64;
    for _ in 0..60 {
        let av = a * &v;
        let mut w = a.adjoint() * av;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        w /= C64::new(norm, 0.0);
        v = w;
    }
    lambda.sqrt()
}

/// Exact-ish spectral norm via singular values; for small blocks.
pub fn spectral_norm_svd(a: &CMatrix) -> f64 {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // A finite iteration cap keeps non-finite inputs from spinning forever;
    // failure surfaces as NaN rather than a silent wrong answer.
    match a.clone().try_svd(false, false, f64::EPSILON, 100_000) {
        Some(svd) => svd.singular_values.iter().cloned().fold(0.0, f64::max),
        None => f64::NAN,
    }
}

/// Unitary factor of the QR decomposition with the phase convention that
/// makes the R diagonal real positive, so the result is Haar-distributed
/// when the input is a complex Ginibre matrix.
pub fn phase_fixed_q(a: &CMatrix) -> Result<CMatrix, LinalgError> {
    let n = a.nrows();
    let qr = a.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let mut phases = Vec::with_capacity(n);
    for i in 0..n {
        let d = r[(i, i)];
        let norm = d.norm();
        if norm == 0.0 {
            return Err(LinalgError::SingularQr);
        }
        phases.push(d / C64::new(norm, 0.0));
    }
    let mut out = q;
    for (j, phase) in phases.iter().enumerate() {
        for i in 0..n {
            out[(i, j)] *= *phase;
        }
    }
    Ok(out)
}

/// Unitary polar factor `U V*` from the SVD of `a`, with one
/// perturb-and-retry pass if `a` is numerically singular.
pub fn polar_unitary(a: &CMatrix) -> Result<CMatrix, LinalgError> {
    match try_polar(a) {
        Ok(u) => Ok(u),
        Err(LinalgError::SingularPolar) => {
            let n = a.nrows();
            let eps = 1e-8 * (1.0 + frob_norm(a));
            let perturbed = a + identity(n) * C64::new(eps, 0.0);
            try_polar(&perturbed).map_err(|_| LinalgError::SingularPolar)
        }
        Err(e) => Err(e),
    }
}

fn try_polar(a: &CMatrix) -> Result<CMatrix, LinalgError> {
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 100_000)
        .ok_or(LinalgError::SvdFailed)?;
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(0.0, f64::max);
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_sv > 1e-13 * max_sv.max(1.0)) {
        return Err(LinalgError::SingularPolar);
    }
    let u = svd.u.ok_or(LinalgError::SvdFailed)?;
    let v_t = svd.v_t.ok_or(LinalgError::SvdFailed)?;
    Ok(u * v_t)
}

/// Eigenvalues of a unitary matrix.
///
/// `V` commutes with the Hermitian matrix `V + V*`, whose spectrum is almost
/// surely simple for Haar samples, so eigenvectors of the Hermitian part are
/// eigenvectors of `V`; the eigenvalue is recovered as a Rayleigh quotient.
pub fn unitary_eigenvalues(v: &CMatrix) -> Vec<C64> {
    let h = v + v.adjoint();
    let eig = nalgebra::SymmetricEigen::new(h);
    let q = eig.eigenvectors;
    let n = v.nrows();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let col = q.column(j);
        let vq = v * col;
        let lambda: C64 = col.iter().zip(vq.iter()).map(|(a, b)| a.conj() * b).sum();
        out.push(lambda);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    n: usize,
    entries: Vec<[f64; 2]>,
}

/// Serializes a square complex matrix as `{"n": n, "entries": [[re,im],...]}`
/// with entries in row-major order.
pub fn matrix_to_json(m: &CMatrix) -> Result<String, LinalgError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(LinalgError::BadShape {
            rows: m.nrows(),
            cols: m.ncols(),
            expected: n,
        });
    }
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let z = m[(i, j)];
            entries.push([z.re, z.im]);
        }
    }
    Ok(serde_json::to_string(&MatrixJson { n, entries }).expect("matrix serialization"))
}

pub fn matrix_from_json(s: &str) -> Result<CMatrix, String> {
    let parsed: MatrixJson = serde_json::from_str(s).map_err(|e| e.to_string())?;
    let n = parsed.n;
    if parsed.entries.len() != n * n {
        return Err(format!(
            "matrix of dimension {} needs {} entries, found {}",
            n,
            n * n,
            parsed.entries.len()
        ));
    }
    let mut m = zeros(n);
    for i in 0..n {
        for j in 0..n {
            let [re, im] = parsed.entries[i * n + j];
            m[(i, j)] = C64::new(re, im);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_complex(n: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        CMatrix::from_fn(n, n, |_, _| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            C64::new(re, im)
        })
    }

    #[test]
    fn phase_fixed_q_is_unitary_with_positive_r_diagonal() {
        let a = random_complex(24, 7);
        let q = phase_fixed_q(&a).unwrap();
        let resid = frob_dist(&(q.adjoint() * &q), &identity(24));
        assert!(resid < 1e-12, "unitarity residual {resid}");
        let r = q.adjoint() * &a;
        for i in 0..24 {
            assert!(r[(i, i)].im.abs() < 1e-10);
            assert!(r[(i, i)].re > 0.0);
        }
    }

    #[test]
    fn polar_factor_is_unitary_and_leaves_psd_part() {
        let a = random_complex(16, 11);
        let u = polar_unitary(&a).unwrap();
        let resid = frob_dist(&(u.adjoint() * &u), &identity(16));
        assert!(resid < 1e-11, "unitarity residual {resid}");
        // p = u* a must be Hermitian positive semidefinite.
        let p = u.adjoint() * &a;
        let herm_resid = frob_dist(&p, &p.adjoint().into());
        assert!(herm_resid < 1e-10, "hermitian residual {herm_resid}");
        let eig = nalgebra::SymmetricEigen::new(p);
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-10));
    }

    #[test]
    fn polar_of_degenerate_input_perturbs_or_errors() {
        // The zero matrix is rescued by the single perturb-and-retry pass.
        let u = polar_unitary(&zeros(6)).unwrap();
        assert!(frob_dist(&(u.adjoint() * &u), &identity(6)) < 1e-10);
        // A matrix that stays broken is reported, not silently passed.
        let mut bad = zeros(4);
        bad[(0, 0)] = C64::new(f64::NAN, 0.0);
        assert!(polar_unitary(&bad).is_err());
    }

    #[test]
    fn unitary_eigenvalues_recover_known_phases() {
        let n = 12;
        let phases: Vec<f64> = (0..n).map(|j| -2.9 + 0.47 * j as f64).collect();
        let d = CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(phases[i].cos(), phases[i].sin())
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let w = phase_fixed_q(&random_complex(n, 3)).unwrap();
        let v = &w * d * w.adjoint();
        let mut got: Vec<f64> = unitary_eigenvalues(&v)
            .iter()
            .map(|z| z.arg())
            .collect();
        let mut want: Vec<f64> = phases
            .iter()
            .map(|p| C64::new(p.cos(), p.sin()).arg())
            .collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-8, "angle {g} vs {w}");
        }
    }

    #[test]
    fn spectral_norm_agrees_with_svd() {
        for seed in [1u64, 2, 3] {
            let a = random_complex(20, seed);
            let power = spectral_norm(&a);
            let exact = spectral_norm_svd(&a);
            assert!(
                (power - exact).abs() < 1e-3 * exact && power <= exact * (1.0 + 1e-12),
                "power {power} svd {exact}"
            );
        }
    }

    #[test]
    fn matrix_json_round_trip() {
        let a = random_complex(5, 21);
        let s = matrix_to_json(&a).unwrap();
        let b = matrix_from_json(&s).unwrap();
        assert_eq!(a, b);
        assert!(matrix_from_json("{\"n\":2,\"entries\":[[1,0]]}").is_err());
    }

    #[test]
    #[ignore]
    fn bench_complex_matmul() {
        let a = random_complex(256, 1);
        let b = random_complex(256, 2);
        let t = std::time::Instant::now();
        let mut acc = C64::new(0.0, 0.0);
        for _ in 0..5 {
            let c = &a * &b;
            acc += c[(0, 0)];
        }
        println!("5 matmuls at n=256: {:?} (acc {acc})", t.elapsed());
        let t = std::time::Instant::now();
        for _ in 0..5 {
            let q = phase_fixed_q(&a).unwrap();
            acc += q[(0, 0)];
        }
        println!("5 QRs at n=256: {:?} (acc {acc})", t.elapsed());
        let c = random_complex(128, 3);
        let t = std::time::Instant::now();
        for _ in 0..5 {
            let u = polar_unitary(&c).unwrap();
            acc += u[(0, 0)];
        }
        println!("5 SVD polars at n=128: {:?} (acc {acc})", t.elapsed());
    }
}
