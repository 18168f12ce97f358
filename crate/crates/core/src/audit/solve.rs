//! Small dense symmetric solves for the k×k normal equations (k is the
//! number of candidate adapters, typically 2–4).

/// Systems whose 1-norm condition estimate exceeds this are treated as
/// degenerate and solved with a pseudo-inverse instead.
pub const CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// `‖G‖₁·‖G⁻¹‖₁`, or infinity when elimination hit a zero pivot.
    pub condition: f64,
    /// True when the pseudo-inverse path was taken.
    pub degenerate: bool,
}

/// Solves `g · x = b` for symmetric positive semi-definite `g` (row-major,
/// `k × k`).
pub fn solve_normal_equations(g: &[f64], b: &[f64]) -> Solution {
    let k = b.len();
    assert_eq!(g.len(), k * k, "gram matrix must be k×k");
    if k == 0 {
        return Solution {
            x: Vec::new(),
            condition: 1.0,
            degenerate: false,
        };
    }
    if let Some(inv) = invert(g, k) {
        let condition = norm1(g, k) * norm1(&inv, k);
        if condition.is_finite() && condition <= CONDITION_LIMIT {
            return Solution {
                x: gauss_solve(g, b).expect("invertible system"),
                condition,
                degenerate: false,
            };
        }
        return Solution {
            x: pinv_solve(g, b),
            condition,
            degenerate: true,
        };
    }
    Solution {
        x: pinv_solve(g, b),
        condition: f64::INFINITY,
        degenerate: true,
    }
}

/// Gaussian elimination with partial pivoting. `None` on a zero pivot.
pub fn gauss_solve(g: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let k = b.len();
    let mut m: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut row = g[i * k..(i + 1) * k].to_vec();
            row.push(b[i]);
            row
        })
        .collect();
    eliminate(&mut m, k)?;
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let tail: f64 = (i + 1..k).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][k] - tail) / m[i][i];
    }
    Some(x)
}

/// Forward elimination on an augmented matrix with `k` pivot columns.
fn eliminate(m: &mut [Vec<f64>], k: usize) -> Option<()> {
    for col in 0..k {
        let pivot = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col] == 0.0 || !m[pivot][col].is_finite() {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..k {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for c in col..m[row].len() {
                    m[row][c] -= f * m[col][c];
                }
            }
        }
    }
    Some(())
}

/// Gauss–Jordan inverse, used for the condition estimate.
fn invert(g: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut m: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut row = g[i * k..(i + 1) * k].to_vec();
            row.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    eliminate(&mut m, k)?;
    for col in (0..k).rev() {
        let p = m[col][col];
        for c in 0..2 * k {
            m[col][c] /= p;
        }
        for row in 0..col {
            let f = m[row][col];
            if f != 0.0 {
                for c in 0..2 * k {
                    m[row][c] -= f * m[col][c];
                }
            }
        }
    }
    Some(m.into_iter().flat_map(|row| row[k..].to_vec()).collect())
}

fn norm1(m: &[f64], k: usize) -> f64 {
    (0..k)
        .map(|c| (0..k).map(|r| m[r * k + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Minimum-norm least-squares solution via the eigendecomposition of the
/// symmetric matrix `g`; eigenvalues below `λ_max / CONDITION_LIMIT` are
/// dropped.
pub fn pinv_solve(g: &[f64], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let (values, vectors) = jacobi_eigen(g, k);
    let lambda_max = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut x = vec![0.0; k];
    if lambda_max == 0.0 {
        return x;
    }
    for (e, &lambda) in values.iter().enumerate() {
        if lambda.abs() <= lambda_max / CONDITION_LIMIT {
            continue;
        }
        let v: Vec<f64> = (0..k).map(|r| vectors[r * k + e]).collect();
        let proj: f64 = v.iter().zip(b).map(|(vi, bi)| vi * bi).sum::<f64>() / lambda;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += proj * vi;
        }
    }
    x
}

/// Cyclic Jacobi eigenvalue iteration. Returns eigenvalues and the
/// eigenvectors as columns of a row-major `k × k` matrix.
fn jacobi_eigen(g: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = g.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j] * a[i * k + j])
            .sum();
        let diag: f64 = (0..k).map(|i| a[i * k + i] * a[i * k + i]).sum();
        if off <= diag * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (arp, arq) = (a[r * k + p], a[r * k + q]);
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for col in 0..k {
                    let (apc, aqc) = (a[p * k + col], a[q * k + col]);
                    a[p * k + col] = c * apc - s * aqc;
                    a[q * k + col] = s * apc + c * aqc;
                }
                for r in 0..k {
                    let (vrp, vrq) = (v[r * k + p], v[r * k + q]);
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..k).map(|i| a[i * k + i]).collect(), v)
}
