//! Dense matrix helpers: the matrix exponential by scaling and squaring with
//! Padé approximants, its adjoint Fréchet derivative, and a small LU solver.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{invalid_arg, ProdgError, Result};

// Padé coefficients and the 1-norm bounds below which each degree is accurate
// to double precision.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA3: f64 = 1.495585217958292e-2;
#[allow(clippy::excessive_precision)]
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

/// Maximum absolute column sum.
pub fn norm1(m: &ArrayView2<f64>) -> f64 {
    m.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ‖M·Mᵀ − I‖_F
pub fn orthogonality_residual(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let g = m.dot(&m.t()) - Array2::<f64>::eye(n);
    frobenius(&g.view())
}

/// Matrix exponential via scaling and squaring with a degree 3..13 Padé
/// approximant chosen from the 1-norm of the input.
pub fn expm(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(invalid_arg(format!("expm needs a square matrix, got {}x{}", n, a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(ProdgError::InvalidState("expm input has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Array2::zeros((0, 0)));
    }
    let ident = Array2::<f64>::eye(n);
    let nrm = norm1(a);

    let a2 = a.dot(a);
    let (u, v) = if nrm <= THETA3 {
        pade_low(a, &a2, &ident, &PADE3)
    } else if nrm <= THETA5 {
        pade_low(a, &a2, &ident, &PADE5)
    } else if nrm <= THETA7 {
        pade_low(a, &a2, &ident, &PADE7)
    } else if nrm <= THETA9 {
        pade_low(a, &a2, &ident, &PADE9)
    } else {
        let squarings = (nrm / THETA13).log2().ceil().max(0.0) as i32;
        let scale = 2f64.powi(-squarings);
        let scaled = a.mapv(|x| x * scale);
        let mut r = pade13(&scaled.view(), &ident)?;
        for _ in 0..squarings {
            r = r.dot(&r);
        }
        return Ok(r);
    };
    solve_pade(&u, &v)
}

fn pade_low(
    a: &ArrayView2<f64>,
    a2: &Array2<f64>,
    ident: &Array2<f64>,
    b: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    // Even powers accumulate into V, odd powers (after multiplying by A) into U.
    let mut u_inner = ident * b[1];
    let mut v = ident * b[0];
    let mut pow = ident.clone();
    let mut k = 2;
    while k < b.len() {
        pow = pow.dot(a2);
        v = v + &pow * b[k];
        if k + 1 < b.len() {
            u_inner = u_inner + &pow * b[k + 1];
        }
        k += 2;
    }
    (a.dot(&u_inner), v)
}

fn pade13(a: &ArrayView2<f64>, ident: &Array2<f64>) -> Result<Array2<f64>> {
    let b = &PADE13;
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);
    let u_hi = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_inner = a6.dot(&u_hi) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1];
    let u = a.dot(&u_inner);
    let v_hi = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = a6.dot(&v_hi) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    let p = v + u;
    let q = v - u;
    lu_solve(&q.view(), &p.view())
}

/// Solves `a · x = b` for square `a` by LU decomposition with partial pivoting.
pub fn lu_solve(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(invalid_arg("lu_solve shape mismatch"));
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    for col in 0..n {
        let (pivot, pval) = (col..n)
            .map(|r| (r, lu[[r, col]].abs()))
            .fold((col, -1.0), |acc, it| if it.1 > acc.1 { it } else { acc });
        if pval == 0.0 || !pval.is_finite() {
            return Err(ProdgError::InvalidState("singular matrix in lu_solve".into()));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([col, j], [pivot, j]);
            }
            for j in 0..x.ncols() {
                x.swap([col, j], [pivot, j]);
            }
        }
        let d = lu[[col, col]];
        for r in (col + 1)..n {
            let f = lu[[r, col]] / d;
            if f == 0.0 {
                continue;
            }
            lu[[r, col]] = f;
            for j in (col + 1)..n {
                lu[[r, j]] -= f * lu[[col, j]];
            }
            for j in 0..x.ncols() {
                x[[r, j]] -= f * x[[col, j]];
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[[col, col]];
        for j in 0..x.ncols() {
            let mut acc = x[[col, j]];
            for k in (col + 1)..n {
                acc -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = acc / d;
        }
    }
    Ok(x)
}

/// Fréchet derivative of the exponential at `a` in direction `e`, read off the
/// upper-right block of `exp([[a, e], [0, a]])`.
pub fn expm_frechet(a: &ArrayView2<f64>, e: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if e.dim() != (n, n) {
        return Err(invalid_arg("expm_frechet direction shape mismatch"));
    }
    let mut block = Array2::<f64>::zeros((2 * n, 2 * n));
    block.slice_mut(s![..n, ..n]).assign(a);
    block.slice_mut(s![n.., n..]).assign(a);
    block.slice_mut(s![..n, n..]).assign(e);
    let big = expm(&block.view())?;
    Ok(big.slice(s![..n, n..]).to_owned())
}

/// Pulls a gradient `g = ∂f/∂exp(x)` back to `∂f/∂x`. The adjoint of the
/// Fréchet derivative at `x` is the Fréchet derivative at `xᵀ`.
pub fn expm_vjp(x: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<Array2<f64>> {
    expm_frechet(&x.t(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn taylor_expm(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut term = Array2::<f64>::eye(n);
        let mut acc = term.clone();
        for k in 1..60 {
            term = term.dot(a) / k as f64;
            acc += &term;
        }
        acc
    }

    fn lcg_matrix(n: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Array2::from_shape_fn((n, n), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = Array2::<f64>::zeros((4, 4));
        assert_eq!(expm(&z.view()).unwrap(), Array2::<f64>::eye(4));
    }

    #[test]
    fn expm_matches_rotation_closed_form() {
        let t = 1.3_f64;
        let x = array![[0.0, t], [-t, 0.0]];
        let e = expm(&x.view()).unwrap();
        let want = array![[t.cos(), t.sin()], [-t.sin(), t.cos()]];
        for (a, b) in e.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn expm_matches_taylor_across_degrees() {
        // Norms chosen to hit every Padé branch including the squaring path.
        for (i, scale) in [1e-3, 0.05, 0.2, 0.5, 1.0, 3.0].iter().enumerate() {
            let a = lcg_matrix(5, i as u64 + 7, *scale);
            let got = expm(&a.view()).unwrap();
            let want = taylor_expm(&a);
            let err = frobenius(&(&got - &want).view()) / frobenius(&want.view());
            assert!(err < 1e-12, "scale {scale}: rel err {err}");
        }
    }

    #[test]
    fn expm_rejects_non_finite() {
        let a = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(matches!(expm(&a.view()), Err(ProdgError::InvalidState(_))));
    }

    #[test]
    fn lu_solve_recovers_solution() {
        let a = array![[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]];
        let x = array![[1.0], [-2.0], [0.5]];
        let b = a.dot(&x);
        let got = lu_solve(&a.view(), &b.view()).unwrap();
        for (g, w) in got.iter().zip(x.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_matches_finite_differences() {
        let a = lcg_matrix(4, 3, 0.8);
        let e = lcg_matrix(4, 9, 1.0);
        let l = expm_frechet(&a.view(), &e.view()).unwrap();
        let h = 1e-6;
        let plus = expm(&(&a + &(&e * h)).view()).unwrap();
        let minus = expm(&(&a - &(&e * h)).view()).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let err = frobenius(&(&l - &fd).view()) / frobenius(&fd.view());
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn vjp_is_adjoint_of_frechet() {
        // <G, L(X, E)> == <L(Xᵀ, G), E>
        let x = lcg_matrix(3, 11, 0.9);
        let e = lcg_matrix(3, 12, 1.0);
        let g = lcg_matrix(3, 13, 1.0);
        let lhs = (&g * &expm_frechet(&x.view(), &e.view()).unwrap()).sum();
        let rhs = (&expm_vjp(&x.view(), &g.view()).unwrap() * &e).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
