//! The LongBet Gibbs sampler and effect summaries.
//!
//! Per sweep, holding everything else fixed:
//! (a) every prognostic tree is regrown on its partial residual
//!     `(y - beta_s nu)/alpha - (mu - g_l)` with noise `sigma2/alpha^2`;
//! (b) the global scale `alpha` is drawn from its conjugate normal
//!     conditional under an N(0, 1) prior;
//! (c) every treatment tree is regrown on `(y - alpha mu)/beta_s - (nu -
//!     g_l)` with per-row weight `beta_s^2` (rows at `beta_s = 0` carry no
//!     likelihood and are routed by prior alone);
//! (d) the exposure factor `beta` is drawn jointly from its multivariate
//!     normal conditional under the GP prior over the exposure grid;
//! (e) the noise variance is drawn from its inverse-gamma conditional.
//!
//! Outcomes are centered and scaled to unit variance before fitting and
//! every reported quantity is transformed back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::forest::{
    fit_regression_forest, grow_from_root_weighted, sample_leaf_prior_var, DesignView, Forest,
    ForestParams, Presorted, SplitAxis, Tree,
};
use crate::gp::{kernel_matrix, spd_cholesky, GpError, GpKernel};
use crate::metrics::{sidak_level, symmetric_interval};
use crate::panel::{CovariateKind, ExposureView, PanelDataset};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] GpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad fit archive: {0}")]
    Archive(String),
}

/// Sampler configuration. Defaults follow the benchmark settings: 120
/// sweeps with 20 burn-in, 50 prognostic and 50 treatment trees, GP factor
/// scale 1 with length scale `(t1 - t0)/2` resolved from the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongBetConfig {
    pub num_sweeps: usize,
    pub num_burnin: usize,
    pub forest_params_pr: ForestParams,
    pub forest_params_trt: ForestParams,
    pub gp_sigma: f64,
    /// Length scale of the extrapolation GP; `None` resolves to
    /// `(t1 - t0)/2` at fit time.
    pub gp_lambda: Option<f64>,
    /// Length scale of the exposure-factor prior used while fitting;
    /// `None` resolves to a quarter of the observed exposure range. The
    /// factor has to bend with the effect profile over exposure, which
    /// needs a much shorter scale than the extrapolation default.
    pub gp_lambda_fit: Option<f64>,
    pub use_propensity: bool,
    pub seed: u64,
}

impl Default for LongBetConfig {
    fn default() -> Self {
        LongBetConfig {
            num_sweeps: 120,
            num_burnin: 20,
            forest_params_pr: ForestParams::with_trees(50),
            // The treatment ensemble models a signal that is multiplied by
            // the exposure factor; its leaves need twice the prior budget
            // of the prognostic ones or unit-level effects attenuate.
            forest_params_trt: LongBetConfig::default_trt_params(50),
            gp_sigma: 1.0,
            gp_lambda: None,
            gp_lambda_fit: None,
            use_propensity: false,
            seed: 0,
        }
    }
}

impl LongBetConfig {
    /// Default treatment-forest parameters for a tree count (double the
    /// prognostic leaf budget, see `Default`).
    pub fn default_trt_params(num_trees: usize) -> ForestParams {
        let mut params = ForestParams::with_trees(num_trees);
        params.leaf_prior_var *= 2.0;
        params
    }

    pub fn num_trees_pr(&self) -> usize {
        self.forest_params_pr.num_trees
    }

    pub fn num_trees_trt(&self) -> usize {
        self.forest_params_trt.num_trees
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_sweeps == 0 || self.num_burnin >= self.num_sweeps {
            return Err(ModelError::Config(format!(
                "need num_burnin < num_sweeps, got {} >= {}",
                self.num_burnin, self.num_sweeps
            )));
        }
        if self.gp_sigma <= 0.0 {
            return Err(ModelError::Config(format!(
                "gp_sigma must be positive, got {}",
                self.gp_sigma
            )));
        }
        for (name, lambda) in [("gp_lambda", self.gp_lambda), ("gp_lambda_fit", self.gp_lambda_fit)] {
            if let Some(lambda) = lambda {
                if lambda <= 0.0 {
                    return Err(ModelError::Config(format!(
                        "{name} must be positive, got {lambda}"
                    )));
                }
            }
        }
        self.forest_params_pr
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        self.forest_params_trt
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))
    }
}

/// One retained Gibbs draw: scalar states, the exposure factor, the two
/// forests, and the forests' in-sample outputs (on the standardized scale).
#[derive(Debug, Clone)]
pub struct SweepDraw {
    pub alpha: f64,
    pub sigma2: f64,
    pub beta: Vec<f64>,
    pub mu_hat: Array2<f64>,
    pub nu_hat: Array2<f64>,
    pub forest_pr: Forest,
    pub forest_trt: Forest,
}

/// Posterior draw store for a fitted model.
#[derive(Debug, Clone)]
pub struct LongBetFit {
    config: LongBetConfig,
    gp_lambda: f64,
    gp_lambda_fit: f64,
    y_mean: f64,
    y_sd: f64,
    t0: i64,
    t1: i64,
    s_max: u32,
    kinds: Vec<CovariateKind>,
    propensity: Option<Vec<f64>>,
    draws: Vec<SweepDraw>,
}

impl LongBetFit {
    pub fn config(&self) -> &LongBetConfig {
        &self.config
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn draw(&self, d: usize) -> &SweepDraw {
        &self.draws[d]
    }

    pub fn draws(&self) -> &[SweepDraw] {
        &self.draws
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn s_max(&self) -> u32 {
        self.s_max
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn t1(&self) -> i64 {
        self.t1
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_sd(&self) -> f64 {
        self.y_sd
    }

    pub fn gp_lambda(&self) -> f64 {
        self.gp_lambda
    }

    pub fn gp_lambda_fit(&self) -> f64 {
        self.gp_lambda_fit
    }

    /// Kernel of the extrapolation GP (paper defaults).
    pub fn gp_kernel(&self) -> GpKernel {
        GpKernel {
            variance: self.config.gp_sigma * self.config.gp_sigma,
            length_scale: self.gp_lambda,
        }
    }

    /// Noise variance draw in original outcome units.
    pub fn sigma2_original(&self, d: usize) -> f64 {
        self.draws[d].sigma2 * self.y_sd * self.y_sd
    }

    /// In-sample prognostic fit `y_mean + sd * alpha * mu` for one draw.
    pub fn prognostic_fitted(&self, d: usize) -> Array2<f64> {
        let draw = &self.draws[d];
        draw.mu_hat.mapv(|m| self.y_mean + self.y_sd * draw.alpha * m)
    }

    /// In-sample posterior-predictive mean `y_mean + sd*(alpha mu + beta_s nu)`.
    pub fn outcome_fitted(&self, d: usize, view: &ExposureView) -> Array2<f64> {
        let draw = &self.draws[d];
        let mut out = draw.mu_hat.clone();
        for ((i, k), v) in out.indexed_iter_mut() {
            let s = view.s()[[i, k]] as usize;
            *v = self.y_mean
                + self.y_sd * (draw.alpha * *v + draw.beta[s] * draw.nu_hat[[i, k]]);
        }
        out
    }

    /// Treatment effect for one draw from explicit parts, in original
    /// units. `beta` may be an extrapolated extension of the draw's own
    /// vector; the caller chooses the calendar time (clamped for
    /// forecasts).
    pub(crate) fn tau_from_parts(
        &self,
        beta: &[f64],
        d: usize,
        x: &[f64],
        t: f64,
        s: f64,
    ) -> f64 {
        let forest = &self.draws[d].forest_trt;
        let nu_s = forest.response(x, t, s);
        let nu_0 = forest.response(x, t, 0.0);
        self.y_sd * (beta[s as usize] * nu_s - beta[0] * nu_0)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = FitJson {
            config: self.config.clone(),
            gp_lambda: self.gp_lambda,
            gp_lambda_fit: self.gp_lambda_fit,
            y_mean: self.y_mean,
            y_sd: self.y_sd,
            t0: self.t0,
            t1: self.t1,
            s_max: self.s_max,
            kinds: self.kinds.clone(),
            propensity: self.propensity.clone(),
            sweeps: self
                .draws
                .iter()
                .map(|d| SweepJson {
                    alpha: d.alpha,
                    sigma2: d.sigma2,
                    beta: d.beta.clone(),
                    forest_pr: d.forest_pr.clone(),
                    forest_trt: d.forest_trt.clone(),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string(&json).expect("fit serializes"))?;
        Ok(())
    }

    /// Loads an archive and rebuilds the per-sweep in-sample forest outputs
    /// by evaluating the stored forests on the panel.
    pub fn load(
        path: &Path,
        panel: &PanelDataset,
        view: &ExposureView,
    ) -> Result<LongBetFit, ModelError> {
        let text = fs::read_to_string(path)?;
        let json: FitJson =
            serde_json::from_str(&text).map_err(|e| ModelError::Archive(e.to_string()))?;
        if json.kinds != panel.covariate_kinds() {
            return Err(ModelError::Archive(
                "panel covariate kinds do not match the fit archive".into(),
            ));
        }
        if json.t0 != panel.t0() || json.t1 != panel.t1() {
            return Err(ModelError::Archive(
                "panel time range does not match the fit archive".into(),
            ));
        }
        let designs = Designs::build(panel, view, json.propensity.as_deref());
        let draws = json
            .sweeps
            .into_iter()
            .map(|s| {
                let (mu_hat, nu_hat) = designs.forest_outputs(&s.forest_pr, &s.forest_trt);
                SweepDraw {
                    alpha: s.alpha,
                    sigma2: s.sigma2,
                    beta: s.beta,
                    mu_hat,
                    nu_hat,
                    forest_pr: s.forest_pr,
                    forest_trt: s.forest_trt,
                }
            })
            .collect();
        Ok(LongBetFit {
            config: json.config,
            gp_lambda: json.gp_lambda,
            gp_lambda_fit: json.gp_lambda_fit,
            y_mean: json.y_mean,
            y_sd: json.y_sd,
            t0: json.t0,
            t1: json.t1,
            s_max: json.s_max,
            kinds: json.kinds,
            propensity: json.propensity,
            draws,
        })
    }
}

/// Archive layout: configuration plus per-sweep scalars and forests. The
/// forest outputs are reconstructed on load, not stored.
#[derive(Serialize, Deserialize)]
struct FitJson {
    config: LongBetConfig,
    gp_lambda: f64,
    gp_lambda_fit: f64,
    y_mean: f64,
    y_sd: f64,
    t0: i64,
    t1: i64,
    s_max: u32,
    kinds: Vec<CovariateKind>,
    propensity: Option<Vec<f64>>,
    sweeps: Vec<SweepJson>,
}

#[derive(Serialize, Deserialize)]
struct SweepJson {
    alpha: f64,
    sigma2: f64,
    beta: Vec<f64>,
    forest_pr: Forest,
    forest_trt: Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Pointwise,
    SimultaneousSidak,
}

/// One (cohort, time) ATT row with its posterior draws and interval.
#[derive(Debug, Clone)]
pub struct AttCell {
    pub cohort: i64,
    pub time: i64,
    pub point: f64,
    pub draws: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

/// ATT grid over observed cohorts; rows cover `{(e, t): t >= e}`.
#[derive(Debug, Clone)]
pub struct AttTable {
    pub level: f64,
    pub interval_kind: IntervalKind,
    pub rows: Vec<AttCell>,
}

impl AttTable {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("cohort,time,estimate,lo,hi\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.cohort, row.time, row.point, row.lo, row.hi
            ));
        }
        fs::write(path, out)
    }

    /// Forecast layout with the step past the last observed period.
    pub fn write_forecast_csv(&self, path: &Path, t1: i64) -> std::io::Result<()> {
        let mut out = String::from("cohort,time,horizon_step,estimate,lo,hi\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.cohort,
                row.time,
                row.time - t1,
                row.point,
                row.lo,
                row.hi
            ));
        }
        fs::write(path, out)
    }
}

/// Per treated unit-time CATT row (pointwise interval).
#[derive(Debug, Clone)]
pub struct CattCell {
    pub unit: usize,
    pub unit_id: String,
    pub time: i64,
    pub cohort: i64,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct CattTable {
    pub level: f64,
    pub rows: Vec<CattCell>,
}

impl CattTable {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("unit,time,estimate,lo,hi\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.unit_id, row.time, row.point, row.lo, row.hi
            ));
        }
        fs::write(path, out)
    }
}

// ---------------------------------------------------------------------------
// Conjugate conditional updates (exposed for verification against their
// closed forms).
// ---------------------------------------------------------------------------

/// Posterior (mean, variance) of the global scale under prior N(0, 1):
/// `v = (1 + sum mu^2/sigma2)^-1`, `m = v * sum mu*(y - beta_s nu)/sigma2`.
pub fn alpha_posterior(mu: &[f64], resid: &[f64], sigma2: f64) -> (f64, f64) {
    let mut sum_mu2 = 0.0;
    let mut sum_cross = 0.0;
    for (m, r) in mu.iter().zip(resid) {
        sum_mu2 += m * m;
        sum_cross += m * r;
    }
    let v = 1.0 / (1.0 + sum_mu2 / sigma2);
    (v * sum_cross / sigma2, v)
}

pub fn sample_alpha(mu: &[f64], resid: &[f64], sigma2: f64, rng: &mut impl Rng) -> f64 {
    let (m, v) = alpha_posterior(mu, resid, sigma2);
    let z: f64 = StandardNormal.sample(rng);
    m + v.sqrt() * z
}

/// Inverse-gamma posterior parameters (shape, rate) for the noise variance
/// given the residual sum of squares.
pub fn sigma2_posterior(ssr: f64, n: usize, a0: f64, b0: f64) -> (f64, f64) {
    (a0 + n as f64 / 2.0, b0 + ssr / 2.0)
}

pub fn sample_sigma2(ssr: f64, n: usize, a0: f64, b0: f64, rng: &mut impl Rng) -> f64 {
    let (shape, rate) = sigma2_posterior(ssr, n, a0, b0);
    let gamma = Gamma::new(shape, 1.0 / rate).expect("valid gamma");
    1.0 / gamma.sample(rng)
}

/// Posterior moments of the exposure factor: precision `K^-1 + D` with `D`
/// diagonal, mean `(K^-1 + D)^-1 c`.
pub fn beta_posterior_moments(
    k_prior: &DMatrix<f64>,
    d_diag: &[f64],
    c: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    let k_chol = spd_cholesky(k_prior)?;
    let mut precision = k_chol.inverse();
    for (i, d) in d_diag.iter().enumerate() {
        precision[(i, i)] += d;
    }
    let chol = spd_cholesky(&precision)?;
    let cov = chol.inverse();
    let mean = &cov * DVector::from_column_slice(c);
    Ok((mean, cov))
}

/// Joint draw of the exposure factor from its multivariate normal
/// conditional.
pub fn sample_beta(
    k_prior: &DMatrix<f64>,
    d_diag: &[f64],
    c: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<f64>, GpError> {
    let k_chol = spd_cholesky(k_prior)?;
    let mut precision = k_chol.inverse();
    for (i, d) in d_diag.iter().enumerate() {
        precision[(i, i)] += d;
    }
    let chol = spd_cholesky(&precision)?;
    let mean = chol.solve(&DVector::from_column_slice(c));
    let z = DVector::from_iterator(
        d_diag.len(),
        (0..d_diag.len()).map(|_| StandardNormal.sample(rng)),
    );
    // precision = L L^T, so L^-T z has covariance precision^-1.
    let shift = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(GpError::Factorization { max_jitter: 1e-6 })?;
    Ok((mean + shift).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Flattened per-observation designs for the two forests. Rows are
/// unit-major: `r = i * T + k`. The prognostic design optionally appends
/// the cross-fitted propensity column.
struct Designs {
    x_pr: Array2<f64>,
    x_trt: Array2<f64>,
    kinds_pr: Vec<CovariateKind>,
    kinds_trt: Vec<CovariateKind>,
    t_vals: Vec<f64>,
    s_vals: Vec<f64>,
    s_row: Vec<usize>,
    n_units: usize,
    n_periods: usize,
}

impl Designs {
    fn build(panel: &PanelDataset, view: &ExposureView, propensity: Option<&[f64]>) -> Designs {
        let n = panel.n_units();
        let t_len = panel.n_periods();
        let p = panel.n_covariates();
        let p_pr = p + usize::from(propensity.is_some());
        let nrows = n * t_len;

        let mut x_trt = Array2::<f64>::zeros((nrows, p));
        let mut x_pr = Array2::<f64>::zeros((nrows, p_pr));
        let mut t_vals = Vec::with_capacity(nrows);
        let mut s_vals = Vec::with_capacity(nrows);
        let mut s_row = Vec::with_capacity(nrows);
        for i in 0..n {
            for k in 0..t_len {
                let r = i * t_len + k;
                for j in 0..p {
                    x_trt[[r, j]] = panel.x()[[i, j]];
                    x_pr[[r, j]] = panel.x()[[i, j]];
                }
                if let Some(prop) = propensity {
                    x_pr[[r, p]] = prop[i];
                }
                t_vals.push(panel.time_at(k) as f64);
                let s = view.s()[[i, k]];
                s_vals.push(s as f64);
                s_row.push(s as usize);
            }
        }
        let kinds_trt = panel.covariate_kinds().to_vec();
        let mut kinds_pr = kinds_trt.clone();
        if propensity.is_some() {
            kinds_pr.push(CovariateKind::Continuous);
        }
        Designs {
            x_pr,
            x_trt,
            kinds_pr,
            kinds_trt,
            t_vals,
            s_vals,
            s_row,
            n_units: n,
            n_periods: t_len,
        }
    }

    fn pr_view(&self) -> DesignView<'_> {
        DesignView::new(self.x_pr.view(), &self.t_vals, &self.s_vals, &self.kinds_pr)
    }

    fn trt_view(&self) -> DesignView<'_> {
        DesignView::new(
            self.x_trt.view(),
            &self.t_vals,
            &self.s_vals,
            &self.kinds_trt,
        )
    }

    fn pr_axes(&self) -> Vec<SplitAxis> {
        let mut axes: Vec<SplitAxis> = (0..self.x_pr.ncols()).map(SplitAxis::Covariate).collect();
        axes.push(SplitAxis::CalendarTime);
        axes
    }

    fn trt_axes(&self) -> Vec<SplitAxis> {
        let mut axes: Vec<SplitAxis> = (0..self.x_trt.ncols()).map(SplitAxis::Covariate).collect();
        axes.push(SplitAxis::CalendarTime);
        axes.push(SplitAxis::ExposureTime);
        axes
    }

    fn forest_outputs(&self, forest_pr: &Forest, forest_trt: &Forest) -> (Array2<f64>, Array2<f64>) {
        let (n, t_len) = (self.n_units, self.n_periods);
        let mut mu = Array2::<f64>::zeros((n, t_len));
        let mut nu = Array2::<f64>::zeros((n, t_len));
        for i in 0..n {
            for k in 0..t_len {
                let r = i * t_len + k;
                let row_pr = self.x_pr.row(r);
                let row_trt = self.x_trt.row(r);
                mu[[i, k]] =
                    forest_pr.response(row_pr.to_slice().unwrap(), self.t_vals[r], self.s_vals[r]);
                nu[[i, k]] =
                    forest_trt.response(row_trt.to_slice().unwrap(), self.t_vals[r], self.s_vals[r]);
            }
        }
        (mu, nu)
    }
}

/// Cross-fitted probability of ever adopting treatment, used as an extra
/// prognostic covariate when `use_propensity` is on. Five folds; each
/// fold is predicted by a small ensemble fit on the others.
fn cross_fitted_propensity(panel: &PanelDataset, view: &ExposureView, seed: u64) -> Vec<f64> {
    let n = panel.n_units();
    let ever: Vec<f64> = (0..n)
        .map(|i| if view.event_time(i).is_some() { 1.0 } else { 0.0 })
        .collect();
    let folds = 5.min(n);
    let p = panel.n_covariates();
    let axes: Vec<SplitAxis> = (0..p).map(SplitAxis::Covariate).collect();
    let params = ForestParams::with_trees(20);
    let mut out = vec![0.0; n];
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let take = |units: &[usize]| {
            let mut x = Array2::<f64>::zeros((units.len(), p));
            for (row, &i) in units.iter().enumerate() {
                for j in 0..p {
                    x[[row, j]] = panel.x()[[i, j]];
                }
            }
            x
        };
        let x_train = take(&train);
        let x_test = take(&test);
        let zeros_train = vec![0.0; train.len()];
        let zeros_test = vec![0.0; test.len()];
        let y_train: Vec<f64> = train.iter().map(|&i| ever[i]).collect();
        let dv_train = DesignView::new(
            x_train.view(),
            &zeros_train,
            &zeros_train,
            panel.covariate_kinds(),
        );
        let dv_test = DesignView::new(
            x_test.view(),
            &zeros_test,
            &zeros_test,
            panel.covariate_kinds(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "propensity", fold as u64));
        let fit = fit_regression_forest(
            &dv_train,
            &axes,
            &y_train,
            &params,
            30,
            10,
            Some((&dv_test, &zeros_test, &zeros_test)),
            &mut rng,
        );
        for (row, &i) in test.iter().enumerate() {
            out[i] = fit.query_mean[row].clamp(0.02, 0.98);
        }
    }
    out
}

fn guard_scale(a: f64) -> f64 {
    if a == 0.0 {
        1e-10
    } else {
        a
    }
}

/// Runs the Gibbs sampler and retains the post-burn-in draws.
pub fn fit(
    panel: &PanelDataset,
    view: &ExposureView,
    config: &LongBetConfig,
) -> Result<LongBetFit, ModelError> {
    config.validate()?;
    let gp_lambda = config
        .gp_lambda
        .unwrap_or((panel.t1() - panel.t0()) as f64 / 2.0);
    let propensity = config
        .use_propensity
        .then(|| cross_fitted_propensity(panel, view, derive_seed(config.seed, "propfit", 0)));
    let designs = Designs::build(panel, view, propensity.as_deref());
    let nrows = designs.t_vals.len();

    // Standardize the outcome.
    let y_flat: Vec<f64> = {
        let mut v = Vec::with_capacity(nrows);
        for i in 0..panel.n_units() {
            for k in 0..panel.n_periods() {
                v.push(panel.y()[[i, k]]);
            }
        }
        v
    };
    let y_mean = y_flat.iter().sum::<f64>() / nrows as f64;
    let y_var = y_flat.iter().map(|y| (y - y_mean) * (y - y_mean)).sum::<f64>() / nrows as f64;
    let y_sd = y_var.sqrt().max(1e-12);
    let ys: Vec<f64> = y_flat.iter().map(|y| (y - y_mean) / y_sd).collect();
    let var_scaled = ys.iter().map(|y| y * y).sum::<f64>() / nrows as f64
        - (ys.iter().sum::<f64>() / nrows as f64).powi(2);

    let s_max = view.s_max();
    let gp_lambda_fit = config
        .gp_lambda_fit
        .unwrap_or((s_max as f64 / 4.0).max(0.5));
    let grid: Vec<f64> = (0..=s_max).map(|s| s as f64).collect();
    let kernel = GpKernel::new(config.gp_sigma * config.gp_sigma, gp_lambda_fit)
        .map_err(ModelError::Numerical)?;
    let k_prior = kernel_matrix(&grid, &kernel, 0.0);

    let pr_view = designs.pr_view();
    let trt_view = designs.trt_view();
    let pr_axes = designs.pr_axes();
    let trt_axes = designs.trt_axes();
    let pre_pr = Presorted::new(&pr_view, &pr_axes);
    let pre_trt = Presorted::new(&trt_view, &trt_axes);

    // Warm-up: during burn-in the treatment trees cannot
    // split on exposure, so the exposure profile of the effect is absorbed
    // by the GP factor (its only s-dependent competitor) instead of being
    // carved into tree splits. Afterwards the full axis set applies. This
    // only steers initialization; every retained draw uses all axes.
    let warmup_sweeps = config.num_burnin;
    let trt_axes_warm: Vec<SplitAxis> = trt_axes
        .iter()
        .copied()
        .filter(|a| *a != SplitAxis::ExposureTime)
        .collect();
    let pre_trt_warm = Presorted::new(&trt_view, &trt_axes_warm);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "fit", 0));

    let n_pr = config.num_trees_pr();
    let n_trt = config.num_trees_trt();
    // The leaf prior variances are resampled each sweep from their
    // conjugate conditionals, anchored at the configured values. Without
    // this the unidentified beta-nu scale drifts and the fixed leaf prior
    // over-shrinks the treatment ensemble.
    let mut params_pr = config.forest_params_pr.clone();
    let mut params_trt = config.forest_params_trt.clone();
    let mut trees_pr: Vec<Tree> = (0..n_pr).map(|_| Tree::leaf(0.0)).collect();
    let mut trees_trt: Vec<Tree> = (0..n_trt).map(|_| Tree::leaf(0.0)).collect();
    let mut fit_pr = vec![vec![0.0; nrows]; n_pr];
    let mut fit_trt = vec![vec![0.0; nrows]; n_trt];
    let mut mu_total = vec![0.0; nrows];
    let mut nu_total = vec![0.0; nrows];
    let mut alpha = 1.0f64;
    let mut beta = vec![1.0f64; s_max as usize + 1];
    let mut sigma2 = 1.0f64;
    let (a0, b0) = (3.0, (3.0 + 1.0) * var_scaled.max(1e-6));

    let mut target = vec![0.0; nrows];
    let mut weight = vec![0.0; nrows];
    let mut draws = Vec::with_capacity(config.num_sweeps - config.num_burnin);

    for sweep in 0..config.num_sweeps {
        // (a) prognostic trees on (y - beta_s nu)/alpha with weight alpha^2
        let a_eff = guard_scale(alpha);
        let w_pr = a_eff * a_eff;
        for l in 0..n_pr {
            for r in 0..nrows {
                target[r] = (ys[r] - beta[designs.s_row[r]] * nu_total[r]) / a_eff
                    - (mu_total[r] - fit_pr[l][r]);
                weight[r] = w_pr;
            }
            let (tree, fitted) = grow_from_root_weighted(
                &pr_view,
                &pre_pr,
                &target,
                &weight,
                sigma2,
                &params_pr,
                &mut rng,
            );
            for r in 0..nrows {
                mu_total[r] += fitted[r] - fit_pr[l][r];
            }
            fit_pr[l] = fitted;
            trees_pr[l] = tree;
        }

        // (b) global scale
        for r in 0..nrows {
            target[r] = ys[r] - beta[designs.s_row[r]] * nu_total[r];
        }
        alpha = sample_alpha(&mu_total, &target, sigma2, &mut rng);

        // (c) treatment trees on (y - alpha mu)/beta_s with weight beta_s^2
        for l in 0..n_trt {
            for r in 0..nrows {
                let b = beta[designs.s_row[r]];
                if b != 0.0 {
                    target[r] =
                        (ys[r] - alpha * mu_total[r]) / b - (nu_total[r] - fit_trt[l][r]);
                    weight[r] = b * b;
                } else {
                    target[r] = 0.0;
                    weight[r] = 0.0;
                }
            }
            let pre = if sweep < warmup_sweeps {
                &pre_trt_warm
            } else {
                &pre_trt
            };
            let (tree, fitted) = grow_from_root_weighted(
                &trt_view,
                pre,
                &target,
                &weight,
                sigma2,
                &params_trt,
                &mut rng,
            );
            for r in 0..nrows {
                nu_total[r] += fitted[r] - fit_trt[l][r];
            }
            fit_trt[l] = fitted;
            trees_trt[l] = tree;
        }

        // (d) exposure factor: precision K^-1 + D, D_ss = sum nu^2/sigma2
        let mut d_diag = vec![0.0; s_max as usize + 1];
        let mut c = vec![0.0; s_max as usize + 1];
        for r in 0..nrows {
            let s = designs.s_row[r];
            let nu = nu_total[r];
            d_diag[s] += nu * nu / sigma2;
            c[s] += nu * (ys[r] - alpha * mu_total[r]) / sigma2;
        }
        beta = sample_beta(&k_prior, &d_diag, &c, &mut rng)?;

        // (e) noise variance
        let ssr: f64 = (0..nrows)
            .map(|r| {
                let e = ys[r] - alpha * mu_total[r] - beta[designs.s_row[r]] * nu_total[r];
                e * e
            })
            .sum();
        sigma2 = sample_sigma2(ssr, nrows, a0, b0, &mut rng);

        // (f) leaf prior variances from their conjugate conditionals
        params_pr.leaf_prior_var = sample_leaf_prior_var(
            &trees_pr,
            config.forest_params_pr.leaf_prior_var,
            &mut rng,
        );
        params_trt.leaf_prior_var = sample_leaf_prior_var(
            &trees_trt,
            config.forest_params_trt.leaf_prior_var,
            &mut rng,
        );

        if sweep >= config.num_burnin {
            // Recorded outputs sum the per-tree fits in tree order, the same
            // order a reloaded forest evaluates, so archives round-trip
            // bit-for-bit despite the sampler's incremental bookkeeping.
            let mut mu_rec = vec![0.0; nrows];
            for fits in &fit_pr {
                for r in 0..nrows {
                    mu_rec[r] += fits[r];
                }
            }
            let mut nu_rec = vec![0.0; nrows];
            for fits in &fit_trt {
                for r in 0..nrows {
                    nu_rec[r] += fits[r];
                }
            }
            let shape = (designs.n_units, designs.n_periods);
            draws.push(SweepDraw {
                alpha,
                sigma2,
                beta: beta.clone(),
                mu_hat: Array2::from_shape_vec(shape, mu_rec).unwrap(),
                nu_hat: Array2::from_shape_vec(shape, nu_rec).unwrap(),
                forest_pr: Forest::new(designs.x_pr.ncols(), trees_pr.clone()),
                forest_trt: Forest::new(designs.x_trt.ncols(), trees_trt.clone()),
            });
        }
    }

    Ok(LongBetFit {
        config: config.clone(),
        gp_lambda,
        gp_lambda_fit,
        y_mean,
        y_sd,
        t0: panel.t0(),
        t1: panel.t1(),
        s_max,
        kinds: panel.covariate_kinds().to_vec(),
        propensity,
        draws,
    })
}

// ---------------------------------------------------------------------------
// Effect prediction and tables
// ---------------------------------------------------------------------------

/// Posterior draws of the treatment effect at covariates `x`, calendar
/// time `t`, and exposure `s`, in original outcome units. Exactly zero at
/// `s = 0` for every draw.
pub fn predict_tau(fit: &LongBetFit, x: &[f64], t: i64, s: u32) -> Result<Vec<f64>, ModelError> {
    if x.len() != fit.kinds.len() {
        return Err(ModelError::Domain(format!(
            "expected {} covariates, got {}",
            fit.kinds.len(),
            x.len()
        )));
    }
    if s > fit.s_max {
        return Err(ModelError::Domain(format!(
            "exposure {s} beyond the fitted grid 0..={}; use forecast_att for forward projection",
            fit.s_max
        )));
    }
    if t < fit.t0 || t > fit.t1 {
        return Err(ModelError::Domain(format!(
            "calendar time {t} outside the fitted range {}..={}; use forecast_att",
            fit.t0, fit.t1
        )));
    }
    Ok((0..fit.n_draws())
        .map(|d| {
            let draw = fit.draw(d);
            fit.tau_from_parts(&draw.beta, d, x, t as f64, s as f64)
        })
        .collect())
}

struct TreatedPoint {
    unit: usize,
    time: i64,
    cohort: i64,
    s: u32,
}

/// Tau draws for every treated (unit, time); the shared backbone of the
/// CATT and ATT tables so their points aggregate exactly.
fn treated_tau_draws(
    fit: &LongBetFit,
    panel: &PanelDataset,
    view: &ExposureView,
) -> (Vec<TreatedPoint>, Vec<Vec<f64>>) {
    let mut points = Vec::new();
    for i in 0..panel.n_units() {
        let Some(e) = view.event_time(i) else {
            continue;
        };
        for k in 0..panel.n_periods() {
            let s = view.s()[[i, k]];
            if s > 0 {
                points.push(TreatedPoint {
                    unit: i,
                    time: panel.time_at(k),
                    cohort: e,
                    s,
                });
            }
        }
    }
    let draws: Vec<Vec<f64>> = points
        .par_iter()
        .map(|pt| {
            let x: Vec<f64> = panel.covariate_row(pt.unit).to_vec();
            (0..fit.n_draws())
                .map(|d| {
                    let draw = fit.draw(d);
                    fit.tau_from_parts(&draw.beta, d, &x, pt.time as f64, pt.s as f64)
                })
                .collect()
        })
        .collect();
    (points, draws)
}

/// ATT grid: draw-wise cohort averages of the unit-level effects, with
/// symmetric quantile intervals, pointwise or Sidak-adjusted simultaneous.
pub fn att_table(
    fit: &LongBetFit,
    panel: &PanelDataset,
    view: &ExposureView,
    level: f64,
    simultaneous: bool,
) -> Result<AttTable, ModelError> {
    if !(0.0 < level && level < 1.0) {
        return Err(ModelError::Domain(format!("level {level} outside (0, 1)")));
    }
    let (points, draws) = treated_tau_draws(fit, panel, view);
    let n_draws = fit.n_draws();

    let mut groups: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (ix, pt) in points.iter().enumerate() {
        groups.entry((pt.cohort, pt.time)).or_default().push(ix);
    }
    let n_cells = groups.len();
    let row_level = if simultaneous && n_cells > 0 {
        sidak_level(1.0 - level, n_cells)
    } else {
        level
    };

    let rows = groups
        .into_iter()
        .map(|((cohort, time), members)| {
            let mut cell_draws = vec![0.0; n_draws];
            let mut point_acc = 0.0;
            for &ix in &members {
                let mut unit_mean = 0.0;
                for (d, v) in draws[ix].iter().enumerate() {
                    cell_draws[d] += v;
                    unit_mean += v;
                }
                point_acc += unit_mean / n_draws as f64;
            }
            for v in &mut cell_draws {
                *v /= members.len() as f64;
            }
            // Mean over cohort members of the per-unit posterior means, so
            // ATT points equal cohort averages of CATT points exactly.
            let point = point_acc / members.len() as f64;
            let (lo, hi) = symmetric_interval(&cell_draws, row_level);
            AttCell {
                cohort,
                time,
                point,
                draws: cell_draws,
                lo,
                hi,
            }
        })
        .collect();

    Ok(AttTable {
        level,
        interval_kind: if simultaneous {
            IntervalKind::SimultaneousSidak
        } else {
            IntervalKind::Pointwise
        },
        rows,
    })
}

/// Unit-level effects for every treated (unit, time) with pointwise
/// intervals at `level`.
pub fn catt_table(
    fit: &LongBetFit,
    panel: &PanelDataset,
    view: &ExposureView,
    level: f64,
) -> Result<CattTable, ModelError> {
    if !(0.0 < level && level < 1.0) {
        return Err(ModelError::Domain(format!("level {level} outside (0, 1)")));
    }
    let (points, draws) = treated_tau_draws(fit, panel, view);
    let rows = points
        .iter()
        .zip(&draws)
        .map(|(pt, d)| {
            let point = d.iter().sum::<f64>() / d.len() as f64;
            let (lo, hi) = symmetric_interval(d, level);
            CattCell {
                unit: pt.unit,
                unit_id: panel.unit_ids()[pt.unit].clone(),
                time: pt.time,
                cohort: pt.cohort,
                point,
                lo,
                hi,
            }
        })
        .collect();
    Ok(CattTable { level, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::derive_exposure;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn tiny_panel(n: usize, t_len: usize, treat_from: Option<i64>) -> (PanelDataset, ExposureView) {
        let mut y = Array2::<f64>::zeros((n, t_len));
        let mut z = Array2::<u8>::zeros((n, t_len));
        let mut x = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            x[[i, 0]] = (i as f64 / n as f64) * 2.0 - 1.0;
            x[[i, 1]] = ((i * 7) % 5) as f64 / 2.0;
            for k in 0..t_len {
                let t = 1 + k as i64;
                y[[i, k]] = x[[i, 0]] + 0.1 * t as f64 + ((i * 13 + k * 5) % 7) as f64 * 0.01;
                if let Some(e) = treat_from {
                    if i % 2 == 0 && t >= e {
                        z[[i, k]] = 1;
                    }
                }
            }
        }
        let panel = PanelDataset::new(
            1,
            t_len as i64,
            y,
            z,
            x,
            vec![CovariateKind::Continuous; 2],
            (1..=n).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let view = derive_exposure(&panel);
        (panel, view)
    }

    fn small_config(seed: u64) -> LongBetConfig {
        LongBetConfig {
            num_sweeps: 12,
            num_burnin: 4,
            forest_params_pr: ForestParams::with_trees(10),
            forest_params_trt: ForestParams::with_trees(10),
            seed,
            ..LongBetConfig::default()
        }
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut config = LongBetConfig::default();
        assert!(config.validate().is_ok());
        config.num_burnin = 200;
        assert!(matches!(config.validate(), Err(ModelError::Config(_))));
        let mut config = LongBetConfig::default();
        config.gp_lambda = Some(-1.0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn untreated_panel_yields_empty_tables_and_prognostic_fit() {
        let (panel, view) = tiny_panel(40, 6, None);
        let result = fit(&panel, &view, &small_config(3)).unwrap();
        assert_eq!(result.n_draws(), 8);
        assert_eq!(result.s_max(), 0);
        let att = att_table(&result, &panel, &view, 0.95, true).unwrap();
        assert!(att.rows.is_empty());
        let catt = catt_table(&result, &panel, &view, 0.95).unwrap();
        assert!(catt.rows.is_empty());
    }

    #[test]
    fn constant_outcome_is_recovered_with_tiny_noise() {
        let n = 30;
        let t_len = 5;
        let y = Array2::<f64>::ones((n, t_len));
        let z = Array2::<u8>::zeros((n, t_len));
        let mut x = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            x[[i, 0]] = i as f64;
        }
        let panel = PanelDataset::new(
            1,
            t_len as i64,
            y,
            z,
            x,
            vec![CovariateKind::Continuous],
            (1..=n).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let view = derive_exposure(&panel);
        let result = fit(&panel, &view, &small_config(5)).unwrap();
        for d in 0..result.n_draws() {
            let fitted = result.prognostic_fitted(d);
            for v in fitted.iter() {
                assert!((v - 1.0).abs() < 0.05, "prognostic fit {v}");
            }
            assert!(result.sigma2_original(d) < 0.05);
        }
    }

    #[test]
    fn tau_at_zero_exposure_is_exactly_zero() {
        let (panel, view) = tiny_panel(30, 6, Some(4));
        let result = fit(&panel, &view, &small_config(7)).unwrap();
        for t in 1..=6 {
            let draws = predict_tau(&result, &[0.3, 1.0], t, 0).unwrap();
            assert!(draws.iter().all(|&v| v == 0.0));
        }
        // Out-of-range requests point to the forecast path.
        let err = predict_tau(&result, &[0.3, 1.0], 3, result.s_max() + 1).unwrap_err();
        assert!(err.to_string().contains("forecast"));
        let err = predict_tau(&result, &[0.3, 1.0], 99, 0).unwrap_err();
        assert!(err.to_string().contains("forecast"));
        let err = predict_tau(&result, &[0.3], 3, 0).unwrap_err();
        assert!(err.to_string().contains("covariates"));
    }

    #[test]
    fn att_points_are_cohort_means_of_catt_points() {
        let (panel, view) = tiny_panel(40, 6, Some(4));
        let result = fit(&panel, &view, &small_config(11)).unwrap();
        let att = att_table(&result, &panel, &view, 0.9, false).unwrap();
        let catt = catt_table(&result, &panel, &view, 0.9).unwrap();
        assert!(!att.rows.is_empty());
        for cell in &att.rows {
            let members: Vec<&CattCell> = catt
                .rows
                .iter()
                .filter(|c| c.cohort == cell.cohort && c.time == cell.time)
                .collect();
            let mean = members.iter().map(|c| c.point).sum::<f64>() / members.len() as f64;
            assert_eq!(cell.point, mean);
            assert!(cell.lo <= cell.point && cell.point <= cell.hi);
        }
        // Untreated pairs are excluded from CATT.
        assert!(catt.rows.iter().all(|c| c.time >= c.cohort));
    }

    #[test]
    fn fit_is_seed_deterministic_and_round_trips_through_the_archive() {
        let (panel, view) = tiny_panel(24, 5, Some(3));
        let config = small_config(13);
        let a = fit(&panel, &view, &config).unwrap();
        let b = fit(&panel, &view, &config).unwrap();
        for d in 0..a.n_draws() {
            assert_eq!(a.draw(d).alpha, b.draw(d).alpha);
            assert_eq!(a.draw(d).sigma2, b.draw(d).sigma2);
            assert_eq!(a.draw(d).beta, b.draw(d).beta);
            assert_eq!(a.draw(d).forest_pr, b.draw(d).forest_pr);
            assert_eq!(a.draw(d).forest_trt, b.draw(d).forest_trt);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        a.save(&path).unwrap();
        let loaded = LongBetFit::load(&path, &panel, &view).unwrap();
        for d in 0..a.n_draws() {
            assert_eq!(a.draw(d).beta, loaded.draw(d).beta);
            assert_eq!(a.draw(d).mu_hat, loaded.draw(d).mu_hat);
            assert_eq!(a.draw(d).nu_hat, loaded.draw(d).nu_hat);
        }
        let att_a = att_table(&a, &panel, &view, 0.95, true).unwrap();
        let att_l = att_table(&loaded, &panel, &view, 0.95, true).unwrap();
        for (ra, rl) in att_a.rows.iter().zip(&att_l.rows) {
            assert_eq!(ra.point, rl.point);
            assert_eq!((ra.lo, ra.hi), (rl.lo, rl.hi));
        }
    }

    #[test]
    fn tau_is_invariant_to_joint_beta_nu_rescaling() {
        // Doubling beta and halving the treatment forest leaves tau alone.
        let (panel, view) = tiny_panel(24, 5, Some(3));
        let result = fit(&panel, &view, &small_config(17)).unwrap();
        let mut rescaled = result.clone();
        for draw in &mut rescaled.draws {
            for b in &mut draw.beta {
                *b *= 2.0;
            }
            let halved: Vec<Tree> = draw
                .forest_trt
                .trees()
                .iter()
                .map(|tree| {
                    let json = serde_json::to_value(tree).unwrap();
                    fn scale(v: &mut serde_json::Value) {
                        match v {
                            serde_json::Value::Object(map) => {
                                if let Some(serde_json::Value::Number(n)) = map.get("leaf") {
                                    let halved = n.as_f64().unwrap() / 2.0;
                                    map.insert("leaf".into(), serde_json::json!(halved));
                                }
                                if let Some(serde_json::Value::Array(children)) =
                                    map.get_mut("children")
                                {
                                    children.iter_mut().for_each(scale);
                                }
                            }
                            _ => {}
                        }
                    }
                    let mut json = json;
                    scale(&mut json);
                    serde_json::from_value(json).unwrap()
                })
                .collect();
            draw.forest_trt = Forest::new(draw.forest_trt.num_covariates(), halved);
        }
        for (t, s) in [(3i64, 1u32), (4, 2), (5, 1)] {
            let base = predict_tau(&result, &[0.1, 0.5], t, s).unwrap();
            let scaled = predict_tau(&rescaled, &[0.1, 0.5], t, s).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alpha_posterior_matches_hand_formula() {
        let mu = [1.0, -2.0, 0.5];
        let resid = [0.7, -1.1, 0.2];
        let sigma2 = 0.5;
        let (m, v) = alpha_posterior(&mu, &resid, sigma2);
        let expect_v = 1.0 / (1.0 + (1.0 + 4.0 + 0.25) / 0.5);
        let expect_m = expect_v * (0.7 - 2.0 * -1.1 + 0.5 * 0.2) / 0.5;
        assert_abs_diff_eq!(v, expect_v, epsilon = 1e-12);
        assert_abs_diff_eq!(m, expect_m, epsilon = 1e-12);
    }

    #[test]
    fn beta_moments_match_independent_closed_form_for_diagonal_prior() {
        let k = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 1.0, 2.0]));
        let d = [4.0, 0.0, 1.0];
        let c = [2.0, 1.0, -3.0];
        let (mean, cov) = beta_posterior_moments(&k, &d, &c).unwrap();
        for i in 0..3 {
            let prior_var: f64 = k[(i, i)];
            let var = 1.0 / (1.0 / prior_var + d[i]);
            assert_abs_diff_eq!(cov[(i, i)], var, epsilon = 1e-8);
            assert_abs_diff_eq!(mean[i], var * c[i], epsilon = 1e-8);
            for j in 0..3 {
                if i != j {
                    assert_abs_diff_eq!(cov[(i, j)], 0.0, epsilon = 1e-10);
                }
            }
        }
    }
}
