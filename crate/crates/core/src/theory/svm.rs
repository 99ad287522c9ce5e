//! Hard-margin SVM on small binary instances, plus an independent
//! projected-gradient solver of the same dual used as a cross-check.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BinaryData, Result, TheoryError};

/// Largest training set accepted by the dual solvers.
pub const SMALL_INSTANCE_BOUND: usize = 200;
/// Stop once every KKT condition holds to this absolute tolerance.
pub const KKT_TOLERANCE: f64 = 1e-8;
/// Points whose margin is within this of 1 are reported as support vectors.
pub const SUPPORT_TOLERANCE: f64 = 1e-7;
const MAX_SWEEPS: usize = 200_000;
/// Dual mass beyond which the instance is declared non-separable.
const DUAL_BLOWUP: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub support_ids: Vec<u64>,
    pub dual_coefficients: BTreeMap<u64, f64>,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

impl SvmSolution {
    pub fn norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

fn gram(data: &BinaryData) -> Array2<f64> {
    data.x.dot(&data.x.t())
}

fn check_size(data: &BinaryData) -> Result<()> {
    let n = data.y.len();
    if n == 0 {
        return Err(TheoryError::InvalidInput("empty training set".into()));
    }
    if n > SMALL_INSTANCE_BOUND {
        return Err(TheoryError::TooLarge {
            n,
            bound: SMALL_INSTANCE_BOUND,
        });
    }
    Ok(())
}

/// Largest KKT violation of `alpha` given margins `g_i = y_i w.x_i`.
fn kkt_residual(alpha: &[f64], g: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(g)
        .map(|(&a, &gi)| if a > 0.0 { (1.0 - gi).abs() } else { (1.0 - gi).max(0.0) })
        .fold(0.0, f64::max)
}

fn assemble(data: &BinaryData, alpha: Vec<f64>, residual: f64, sweeps: usize) -> SvmSolution {
    let coef = Array1::from_iter(alpha.iter().zip(&data.y).map(|(a, y)| a * y));
    let w = coef.dot(&data.x);
    let margins = data.x.dot(&w) * &Array1::from(data.y.clone());
    let support_ids = data
        .ids
        .iter()
        .zip(&margins)
        .filter(|(_, &m)| (m - 1.0).abs() <= SUPPORT_TOLERANCE)
        .map(|(&id, _)| id)
        .collect();
    let w = w.to_vec();
    SvmSolution {
        w,
        support_ids,
        dual_coefficients: data.ids.iter().copied().zip(alpha).collect(),
        kkt_residual: residual,
        sweeps,
    }
}

/// Minimum-norm `w` with `y_i w.x_i >= 1`, by cyclic coordinate ascent on
/// the dual `max sum(a) - |sum a_i y_i x_i|^2 / 2, a >= 0`.
pub fn hard_margin_svm(data: &BinaryData) -> Result<SvmSolution> {
    check_size(data)?;
    let n = data.y.len();
    let k = gram(data);
    if (0..n).any(|i| k[[i, i]] == 0.0) {
        return Err(TheoryError::NonSeparable { sweeps: 0 });
    }
    let mut alpha = vec![0.0; n];
    let mut g = vec![0.0; n];
    for sweep in 1..=MAX_SWEEPS {
        for i in 0..n {
            let next = (alpha[i] + (1.0 - g[i]) / k[[i, i]]).max(0.0);
            let step = next - alpha[i];
            if step != 0.0 {
                alpha[i] = next;
                let yi = data.y[i];
                for j in 0..n {
                    g[j] += step * yi * data.y[j] * k[[i, j]];
                }
            }
        }
        let residual = kkt_residual(&alpha, &g);
        if residual < KKT_TOLERANCE {
            return Ok(assemble(data, alpha, residual, sweep));
        }
        if alpha.iter().sum::<f64>() > DUAL_BLOWUP || !residual.is_finite() {
            return Err(TheoryError::NonSeparable { sweeps: sweep });
        }
    }
    Err(TheoryError::NonSeparable { sweeps: MAX_SWEEPS })
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration. The
/// estimate approaches the true value from below.
pub fn largest_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    // irregular start so no eigenvector is missed by symmetry
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract());
    v /= v.dot(&v).sqrt();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mv = m.dot(&v);
        let norm = mv.dot(&mv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&mv);
        v = mv / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// The same dual solved by accelerated projected gradient (FISTA with
/// gradient-based restart). Independent of [`hard_margin_svm`]; used as an oracle.
/// Reports non-separability when the duals blow up or the KKT tolerance is
/// not reached within `max_iterations`.
pub fn projected_gradient_qp(data: &BinaryData, max_iterations: usize) -> Result<SvmSolution> {
    check_size(data)?;
    let n = data.y.len();
    let yv = Array1::from(data.y.clone());
    let k = gram(data);
    // Q_ij = y_i y_j <x_i, x_j>
    let q = Array2::from_shape_fn((n, n), |(i, j)| yv[i] * yv[j] * k[[i, j]]);
    let lipschitz = 1.01 * largest_eigenvalue(&q).max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;

    let mut alpha = Array1::<f64>::zeros(n);
    let mut z = alpha.clone();
    let mut t = 1.0f64;
    for it in 1..=max_iterations {
        let grad = q.dot(&z) - 1.0;
        let next = (&z - &(grad * step)).mapv(|v| v.max(0.0));
        // gradient restart: drop momentum once it points uphill
        if (&z - &next).dot(&(&next - &alpha)) > 0.0 {
            t = 1.0;
            z = next.clone();
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            z = &next + &((&next - &alpha) * ((t - 1.0) / t_next));
            t = t_next;
        }
        alpha = next;
        if it % 50 == 0 {
            let g: Vec<f64> = q.dot(&alpha).to_vec();
            let residual = kkt_residual(&alpha.to_vec(), &g);
            if residual < KKT_TOLERANCE {
                return Ok(assemble(data, alpha.to_vec(), residual, it));
            }
            let mass = alpha.sum();
            if mass.is_nan() || mass > DUAL_BLOWUP {
                return Err(TheoryError::NonSeparable { sweeps: it });
            }
        }
    }
    Err(TheoryError::NonSeparable {
        sweeps: max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::random_separable_instance;

    fn data(points: &[(&[f64], f64)]) -> BinaryData {
        let d = points[0].0.len();
        let mut x = Array2::zeros((points.len(), d));
        for (i, (p, _)) in points.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        BinaryData {
            x,
            y: points.iter().map(|p| p.1).collect(),
            ids: (0..points.len() as u64).collect(),
        }
    }

    #[test]
    fn antipodal_pair() {
        let s = hard_margin_svm(&data(&[(&[1.0, 0.0], 1.0), (&[-1.0, 0.0], -1.0)])).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-8 && s.w[1].abs() < 1e-12);
        assert_eq!(s.support_ids, vec![0, 1]);
        let q = projected_gradient_qp(&data(&[(&[1.0, 0.0], 1.0), (&[-1.0, 0.0], -1.0)]), 10_000).unwrap();
        assert!((q.w[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn single_point_min_norm() {
        let s = hard_margin_svm(&data(&[(&[2.0, 0.0], 1.0)])).unwrap();
        assert!((s.w[0] - 0.5).abs() < 1e-12);
        assert!((s.score(&[2.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_separable_detected() {
        let d = data(&[(&[1.0, 0.0], 1.0), (&[1.0, 0.0], -1.0)]);
        assert!(matches!(hard_margin_svm(&d), Err(TheoryError::NonSeparable { .. })));
        let r = projected_gradient_qp(&d, 100_000);
        assert!(matches!(r, Err(TheoryError::NonSeparable { .. })), "{r:?}");
    }

    #[test]
    fn size_bound_enforced() {
        let d = BinaryData {
            x: Array2::from_elem((SMALL_INSTANCE_BOUND + 1, 2), 1.0),
            y: vec![1.0; SMALL_INSTANCE_BOUND + 1],
            ids: (0..=SMALL_INSTANCE_BOUND as u64).collect(),
        };
        assert!(matches!(hard_margin_svm(&d), Err(TheoryError::TooLarge { .. })));
    }

    #[test]
    fn dual_ascent_matches_qp_oracle_and_kkt() {
        for seed in 0..10 {
            let inst = random_separable_instance(20, 50, seed);
            let d = BinaryData::from_examples(&inst);
            let a = hard_margin_svm(&d).unwrap();
            let b = projected_gradient_qp(&d, 100_000).unwrap();
            let dist: f64 = a.w.iter().zip(&b.w).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 1e-6, "seed {seed}: {dist}");
            for (i, id) in d.ids.iter().enumerate() {
                let m = d.y[i] * a.score(&d.x.row(i).to_vec());
                assert!(m >= 1.0 - 1e-8);
                if a.dual_coefficients[id] > 1e-8 {
                    assert!((m - 1.0).abs() < 1e-8);
                }
            }
            // primal equals the dual expansion
            let mut recon = vec![0.0; 50];
            for (i, id) in d.ids.iter().enumerate() {
                for (j, r) in recon.iter_mut().enumerate() {
                    *r += a.dual_coefficients[id] * d.y[i] * d.x[[i, j]];
                }
            }
            assert!(recon.iter().zip(&a.w).all(|(r, w)| (r - w).abs() < 1e-12));
        }
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let m = Array2::from_diag(&Array1::from(vec![1.0, 5.0, 2.0]));
        assert!((largest_eigenvalue(&m) - 5.0).abs() < 1e-9);
    }
}
