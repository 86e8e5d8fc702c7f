//! Small dense solves for the least-squares fits (a handful of unknowns).

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
/// `a` is row-major `n × n`. Returns `None` when the system is singular.
pub(crate) fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            if factor != 0.0 {
                for k in col..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Some(x)
}

/// Accumulates `XᵀX` and `Xᵀy` one row at a time.
#[derive(Debug, Clone)]
pub(crate) struct NormalEquations {
    dim: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    pub(crate) rows: usize,
}

impl NormalEquations {
    pub(crate) fn new(dim: usize) -> Self {
        NormalEquations {
            dim,
            xtx: vec![0.0; dim * dim],
            xty: vec![0.0; dim],
            rows: 0,
        }
    }

    pub(crate) fn add(&mut self, row: &[f64], y: f64) {
        let d = self.dim;
        for i in 0..d {
            self.xty[i] += row[i] * y;
            for j in 0..d {
                self.xtx[i * d + j] += row[i] * row[j];
            }
        }
        self.rows += 1;
    }

    pub(crate) fn solve(&self) -> Option<Vec<f64>> {
        solve(self.xtx.clone(), self.xty.clone())
    }

    /// Ridge solve shrinking toward `prior` with weight `lambda`.
    pub(crate) fn solve_toward(&self, prior: &[f64], lambda: f64) -> Option<Vec<f64>> {
        let d = self.dim;
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        for i in 0..d {
            a[i * d + i] += lambda;
            b[i] += lambda * prior[i];
        }
        solve(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let x = solve(vec![2.0, 1.0, 1.0, 3.0], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn singular_is_none() {
        assert!(solve(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0]).is_none());
    }
}
