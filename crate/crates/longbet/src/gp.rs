//! Gaussian-process utilities over the exposure grid.
//!
//! The exposure factor `beta` carries the shared temporal trend of the
//! treatment effect. Its prior covariance, the conditional posteriors used
//! to extend it past the observed window, and the forward ATT forecast all
//! live here. The kernel is squared exponential,
//! `k(s, s') = variance * exp(-(s - s')^2 / (2 * length_scale^2))`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::derive_seed;
use crate::model::{AttCell, AttTable, IntervalKind, LongBetFit, ModelError};
use crate::panel::{cohorts, ExposureView, PanelDataset};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("kernel parameters must be positive: variance={variance}, length_scale={length_scale}")]
    BadKernel { variance: f64, length_scale: f64 },
    #[error("{0}")]
    Domain(String),
    #[error("Cholesky factorization failed after jitter escalation to {max_jitter}")]
    Factorization { max_jitter: f64 },
}

/// Squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpKernel {
    pub variance: f64,
    pub length_scale: f64,
}

impl GpKernel {
    pub fn new(variance: f64, length_scale: f64) -> Result<Self, GpError> {
        if variance <= 0.0 || length_scale <= 0.0 {
            return Err(GpError::BadKernel {
                variance,
                length_scale,
            });
        }
        Ok(GpKernel {
            variance,
            length_scale,
        })
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.variance * (-d * d / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Gram matrix with `jitter` added on the diagonal. The upper triangle is
/// computed and mirrored, so the result is symmetric to the last bit.
pub fn kernel_matrix(points: &[f64], kernel: &GpKernel, jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.eval(points[i], points[i]) + jitter;
        for j in (i + 1)..n {
            let v = kernel.eval(points[i], points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with jitter escalation: the matrix is tried as-is, then with
/// 1e-10, 1e-8, and 1e-6 added to the diagonal before giving up.
pub fn spd_cholesky(matrix: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, GpError> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(chol);
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut jittered = matrix.clone();
        for i in 0..matrix.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        jitter *= 100.0;
    }
    Err(GpError::Factorization { max_jitter: 1e-6 })
}

/// Standard GP posterior at `query_points` given noisy observations at
/// `train_points`:
/// mean `= K_qt (K_tt + noise I)^-1 v`, cov `= K_qq - K_qt (K_tt + noise I)^-1 K_tq`.
pub fn gp_conditional(
    train_points: &[f64],
    train_values: &[f64],
    query_points: &[f64],
    kernel: &GpKernel,
    noise_var: f64,
) -> Result<(Vec<f64>, DMatrix<f64>), GpError> {
    if train_points.len() != train_values.len() {
        return Err(GpError::Domain(format!(
            "{} train points with {} values",
            train_points.len(),
            train_values.len()
        )));
    }
    if noise_var < 0.0 {
        return Err(GpError::Domain(format!("negative noise_var {noise_var}")));
    }
    let k_tt = kernel_matrix(train_points, kernel, noise_var);
    let chol = spd_cholesky(&k_tt)?;

    let nq = query_points.len();
    let nt = train_points.len();
    let mut k_qt = DMatrix::zeros(nq, nt);
    for (qi, q) in query_points.iter().enumerate() {
        for (ti, t) in train_points.iter().enumerate() {
            k_qt[(qi, ti)] = kernel.eval(*q, *t);
        }
    }
    let values = DVector::from_column_slice(train_values);
    let mean = &k_qt * chol.solve(&values);
    let k_qq = kernel_matrix(query_points, kernel, 0.0);
    let cov = &k_qq - &k_qt * chol.solve(&k_qt.transpose());
    Ok((mean.iter().copied().collect(), cov))
}

/// Extends every retained draw of the exposure factor `horizon` steps past
/// the observed grid by sampling the joint GP conditional (noise-free,
/// with jitter escalation). Each draw uses its own deterministic RNG
/// substream, so the result is seed-reproducible and parallel-safe.
pub fn extrapolate_beta(fit: &LongBetFit, horizon: usize) -> Result<Vec<Vec<f64>>, GpError> {
    if horizon == 0 {
        return Err(GpError::Domain(
            "horizon must be at least 1; observed exposures need no extrapolation".into(),
        ));
    }
    let s_max = fit.s_max() as usize;
    let grid: Vec<f64> = (0..=s_max).map(|s| s as f64).collect();
    let future: Vec<f64> = (1..=horizon).map(|h| (s_max + h) as f64).collect();
    let kernel = fit.gp_kernel();

    let mut out = Vec::with_capacity(fit.n_draws());
    for d in 0..fit.n_draws() {
        let beta = fit.draw(d).beta.clone();
        let (mean, cov) = gp_conditional(&grid, &beta, &future, &kernel, 0.0)?;
        let chol = spd_cholesky(&cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(fit.seed(), "extrapolate", d as u64));
        let z = DVector::from_iterator(
            future.len(),
            (0..future.len()).map(|_| StandardNormal.sample(&mut rng)),
        );
        let sample = DVector::from_column_slice(&mean) + chol.l() * z;
        let mut extended = beta;
        extended.extend(sample.iter().copied());
        out.push(extended);
    }
    Ok(out)
}

/// Forward ATT table over future periods `t1+1 .. t1+horizon`.
///
/// The exposure factor is extrapolated per draw; the treatment forest is
/// evaluated with calendar time clamped at `t1` (trees are step functions
/// beyond their trained range), so all forward dynamics come from `beta`.
/// Intervals are pointwise at `level`.
pub fn forecast_att(
    fit: &LongBetFit,
    panel: &PanelDataset,
    view: &ExposureView,
    horizon: usize,
    level: f64,
) -> Result<AttTable, ModelError> {
    if horizon == 0 {
        return Err(ModelError::Domain(
            "forecast horizon must be at least 1; use att_table for observed periods".into(),
        ));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(ModelError::Domain(format!("level {level} outside (0, 1)")));
    }
    let beta_ext = extrapolate_beta(fit, horizon).map_err(ModelError::Numerical)?;
    let t1 = panel.t1();
    let n_draws = fit.n_draws();
    let mut rows = Vec::new();
    for (e, units) in cohorts(view) {
        // Extended beta is indexed by exposure; the earliest cohort pins the
        // observed maximum, later cohorts stay well inside the grid.
        for h in 1..=horizon as i64 {
            let t = t1 + h;
            let s = t - e + 1;
            let mut draws = vec![0.0; n_draws];
            let mut unit_points = Vec::with_capacity(units.len());
            for &unit in &units {
                let x: Vec<f64> = panel.covariate_row(unit).to_vec();
                let mut acc = 0.0;
                for (d, draw_acc) in draws.iter_mut().enumerate() {
                    let tau = fit.tau_from_parts(
                        &beta_ext[d],
                        d,
                        &x,
                        t1 as f64, // calendar clamp
                        s as f64,
                    );
                    *draw_acc += tau;
                    acc += tau;
                }
                unit_points.push(acc / n_draws as f64);
            }
            for draw in &mut draws {
                *draw /= units.len() as f64;
            }
            let point = unit_points.iter().sum::<f64>() / unit_points.len() as f64;
            let (lo, hi) = crate::metrics::symmetric_interval(&draws, level);
            rows.push(AttCell {
                cohort: e,
                time: t,
                point,
                draws,
                lo,
                hi,
            });
        }
    }
    Ok(AttTable {
        level,
        interval_kind: IntervalKind::Pointwise,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_matrix_matches_hand_values() {
        let kernel = GpKernel::new(1.0, 2.0).unwrap();
        let single = kernel_matrix(&[3.0], &kernel, 0.0);
        assert_eq!(single[(0, 0)], 1.0);

        // Two points one length-scale apart: off-diagonal exp(-1/2).
        let two = kernel_matrix(&[0.0, 2.0], &kernel, 0.0);
        assert_abs_diff_eq!(two[(0, 1)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(two[(0, 1)], two[(1, 0)]);

        assert!(GpKernel::new(0.0, 1.0).is_err());
        assert!(GpKernel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn kernel_matrix_is_psd_with_jitter() {
        // Eigen-solve oracle on a random-ish point set.
        let points: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let kernel = GpKernel::new(1.0, 1.5).unwrap();
        let k = kernel_matrix(&points, &kernel, 1e-8);
        let eigs = k.symmetric_eigenvalues();
        assert!(eigs.iter().all(|&e| e >= 0.0), "eigenvalues {eigs:?}");
    }

    #[test]
    fn conditional_interpolates_training_data() {
        let kernel = GpKernel::new(1.0, 2.5).unwrap();
        let train = [0.0, 1.0, 2.0, 3.0, 4.0];
        let values = [0.3, -0.1, 0.5, 0.9, 0.2];
        let (mean, cov) = gp_conditional(&train, &values, &train, &kernel, 0.0).unwrap();
        for (m, v) in mean.iter().zip(values.iter()) {
            assert_abs_diff_eq!(m, v, epsilon = 1e-6);
        }
        for i in 0..train.len() {
            assert!(cov[(i, i)].abs() <= 1e-8, "residual variance {}", cov[(i, i)]);
        }
    }

    #[test]
    fn conditional_reverts_to_prior_far_from_data() {
        let kernel = GpKernel::new(1.0, 1.0).unwrap();
        let train = [0.0, 1.0, 2.0];
        let values = [5.0, 4.0, 6.0];
        let (mean, cov) = gp_conditional(&train, &values, &[40.0], &kernel, 0.0).unwrap();
        assert!(mean[0].abs() < 1e-3, "far-field mean {}", mean[0]);
        assert_abs_diff_eq!(cov[(0, 0)], kernel.variance, epsilon = 1e-3);
    }

    #[test]
    fn single_train_point_matches_scalar_algebra() {
        let kernel = GpKernel::new(1.3, 0.8).unwrap();
        let (q, t, value, noise) = (0.5, 0.9, 2.0, 0.2);
        let (mean, _) = gp_conditional(&[t], &[value], &[q], &kernel, noise).unwrap();
        let expected = kernel.eval(q, t) / (kernel.eval(t, t) + noise) * value;
        assert_abs_diff_eq!(mean[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn posterior_covariance_stays_psd() {
        let kernel = GpKernel::new(1.0, 4.0).unwrap();
        let train: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let values: Vec<f64> = train.iter().map(|t| (t * 0.3).cos()).collect();
        let query: Vec<f64> = (0..12).map(|i| i as f64 * 0.9).collect();
        let (_, cov) = gp_conditional(&train, &values, &query, &kernel, 0.0).unwrap();
        let min_eig = cov
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-8, "min eigenvalue {min_eig}");
    }
}
