//! Evaluation metrics and the Monte Carlo study harness.
//!
//! RMSE, coverage, and cover-zero over the (cohort, time) ATT grid with
//! Sidak-adjusted simultaneous credible intervals, plus CATT analogues
//! with pointwise intervals. The harness runs generate -> fit -> evaluate
//! over seeded replications and reports per-metric means and standard
//! errors.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::{generate, ScenarioConfig};
use crate::derive_seed;
use crate::model::{att_table, catt_table, fit, AttTable, CattTable, LongBetConfig};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("estimand sets differ; missing from estimates: {missing:?}, not in truth: {extra:?}")]
    CellMismatch {
        missing: Vec<(i64, i64)>,
        extra: Vec<(i64, i64)>,
    },
    #[error("no estimands to evaluate")]
    Empty,
    #[error("{0}")]
    Domain(String),
    #[error("replication {rep} (dgp seed {dgp_seed}, fit seed {fit_seed}) failed: {message}")]
    RepFailed {
        rep: usize,
        dgp_seed: u64,
        fit_seed: u64,
        message: String,
    },
}

/// Per-estimand two-sided confidence level whose product over `c`
/// independent estimands reaches simultaneous level `1 - alpha`:
/// `(1 - alpha)^(1/c)`.
pub fn sidak_level(alpha: f64, c: usize) -> f64 {
    (1.0 - alpha).powf(1.0 / c.max(1) as f64)
}

/// Interpolated order-statistic quantile (type 7): `h = (n-1)p`.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Symmetric two-sided empirical interval at the given level.
pub fn symmetric_interval(draws: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - level) / 2.0;
    (
        quantile_type7(&sorted, tail),
        quantile_type7(&sorted, 1.0 - tail),
    )
}

/// Per-estimand symmetric quantile intervals at the Sidak-adjusted level,
/// jointly covering all estimands at `1 - alpha`. The matrix is draws by
/// estimands.
pub fn simultaneous_intervals(draw_matrix: &Array2<f64>, alpha: f64) -> Vec<(f64, f64)> {
    let c = draw_matrix.ncols();
    let level = sidak_level(alpha, c);
    (0..c)
        .map(|j| {
            let column: Vec<f64> = draw_matrix.column(j).to_vec();
            symmetric_interval(&column, level)
        })
        .collect()
}

/// One evaluated ATT cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellDetail {
    pub cohort: i64,
    pub time: i64,
    pub truth: f64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttEval {
    pub rmse: f64,
    pub coverage: f64,
    pub cover0: f64,
    pub n_estimands: usize,
    pub cells: Vec<CellDetail>,
}

/// RMSE over cells, the fraction of intervals containing the truth, and
/// the fraction containing zero, computed from the table's own intervals.
pub fn evaluate(att: &AttTable, truth: &BTreeMap<(i64, i64), f64>) -> Result<AttEval, MetricsError> {
    let est_keys: Vec<(i64, i64)> = att.rows.iter().map(|r| (r.cohort, r.time)).collect();
    let missing: Vec<(i64, i64)> = truth
        .keys()
        .filter(|k| !est_keys.contains(k))
        .copied()
        .collect();
    let extra: Vec<(i64, i64)> = est_keys
        .iter()
        .filter(|k| !truth.contains_key(k))
        .copied()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MetricsError::CellMismatch { missing, extra });
    }
    if att.rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = att.rows.len() as f64;
    let mut sq = 0.0;
    let mut covered = 0usize;
    let mut covers0 = 0usize;
    let mut cells = Vec::with_capacity(att.rows.len());
    for row in &att.rows {
        let t = truth[&(row.cohort, row.time)];
        sq += (t - row.point) * (t - row.point);
        if row.lo <= t && t <= row.hi {
            covered += 1;
        }
        if row.lo <= 0.0 && 0.0 <= row.hi {
            covers0 += 1;
        }
        cells.push(CellDetail {
            cohort: row.cohort,
            time: row.time,
            truth: t,
            estimate: row.point,
            lo: row.lo,
            hi: row.hi,
        });
    }
    Ok(AttEval {
        rmse: (sq / c).sqrt(),
        coverage: covered as f64 / c,
        cover0: covers0 as f64 / c,
        n_estimands: att.rows.len(),
        cells,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CattEval {
    pub rmse: f64,
    pub coverage: f64,
    pub n_estimands: usize,
}

/// Unit-level analogue of [`evaluate`] with the table's pointwise
/// intervals.
pub fn evaluate_catt(
    catt: &CattTable,
    truth: &BTreeMap<(usize, i64), f64>,
) -> Result<CattEval, MetricsError> {
    if catt.rows.len() != truth.len()
        || catt
            .rows
            .iter()
            .any(|r| !truth.contains_key(&(r.unit, r.time)))
    {
        return Err(MetricsError::Domain(format!(
            "CATT cells ({}) do not match truth cells ({})",
            catt.rows.len(),
            truth.len()
        )));
    }
    if catt.rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = catt.rows.len() as f64;
    let mut sq = 0.0;
    let mut covered = 0usize;
    for row in &catt.rows {
        let t = truth[&(row.unit, row.time)];
        sq += (t - row.point) * (t - row.point);
        if row.lo <= t && t <= row.hi {
            covered += 1;
        }
    }
    Ok(CattEval {
        rmse: (sq / c).sqrt(),
        coverage: covered as f64 / c,
        n_estimands: catt.rows.len(),
    })
}

/// Joint evaluation of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub rmse_att: f64,
    pub coverage_att: f64,
    pub cover0_att: f64,
    pub rmse_catt: f64,
    pub coverage_catt: f64,
    pub n_estimands: usize,
    pub cells: Vec<CellDetail>,
}

pub const METRIC_NAMES: [&str; 5] = [
    "rmse_att",
    "coverage_att",
    "cover0_att",
    "rmse_catt",
    "coverage_catt",
];

impl EvalResult {
    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "rmse_att" => self.rmse_att,
            "coverage_att" => self.coverage_att,
            "cover0_att" => self.cover0_att,
            "rmse_catt" => self.rmse_catt,
            "coverage_catt" => self.coverage_catt,
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub reps: usize,
    pub per_rep: Vec<EvalResult>,
    pub summaries: Vec<MetricSummary>,
}

/// Runs one replication: generate, fit, tabulate, evaluate. ATT uses the
/// 95% simultaneous interval; CATT uses pointwise 95% intervals.
pub fn run_replication(
    scenario: &ScenarioConfig,
    model_config: &LongBetConfig,
    level: f64,
) -> Result<EvalResult, String> {
    let generated = generate(scenario).map_err(|e| e.to_string())?;
    let fitted = fit(&generated.panel, &generated.view, model_config).map_err(|e| e.to_string())?;
    let att = att_table(&fitted, &generated.panel, &generated.view, level, true)
        .map_err(|e| e.to_string())?;
    let catt =
        catt_table(&fitted, &generated.panel, &generated.view, level).map_err(|e| e.to_string())?;
    let att_eval = evaluate(&att, &generated.att_true).map_err(|e| e.to_string())?;
    let catt_eval = evaluate_catt(&catt, &generated.catt_true).map_err(|e| e.to_string())?;
    Ok(EvalResult {
        rmse_att: att_eval.rmse,
        coverage_att: att_eval.coverage,
        cover0_att: att_eval.cover0,
        rmse_catt: catt_eval.rmse,
        coverage_catt: catt_eval.coverage,
        n_estimands: att_eval.n_estimands,
        cells: att_eval.cells,
    })
}

/// Seeded Monte Carlo study. Replications derive independent `dgp` and
/// `fit` seed substreams from the scenario's master seed and may run in
/// parallel; per-rep results are kept in replication order so aggregation
/// is scheduling-independent.
pub fn monte_carlo(
    scenario: &ScenarioConfig,
    reps: usize,
    model_config: &LongBetConfig,
    level: f64,
) -> Result<StudyResult, MetricsError> {
    if reps == 0 {
        return Err(MetricsError::Domain("reps must be at least 1".into()));
    }
    let master = scenario.seed;
    let per_rep: Vec<EvalResult> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let dgp_seed = derive_seed(master, "dgp", rep as u64);
            let fit_seed = derive_seed(master, "fit", rep as u64);
            let scenario_rep = ScenarioConfig {
                seed: dgp_seed,
                ..*scenario
            };
            let config_rep = LongBetConfig {
                seed: fit_seed,
                ..model_config.clone()
            };
            run_replication(&scenario_rep, &config_rep, level).map_err(|message| {
                MetricsError::RepFailed {
                    rep,
                    dgp_seed,
                    fit_seed,
                    message,
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let summaries = METRIC_NAMES
        .iter()
        .map(|&name| {
            let values: Vec<f64> = per_rep.iter().map(|r| r.metric(name)).collect();
            let mean = values.iter().sum::<f64>() / reps as f64;
            let se = if reps > 1 {
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (reps as f64 - 1.0);
                (var / reps as f64).sqrt()
            } else {
                0.0
            };
            MetricSummary {
                metric: name.to_string(),
                mean,
                se,
            }
        })
        .collect();

    Ok(StudyResult {
        reps,
        per_rep,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttCell, IntervalKind};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn table(rows: Vec<AttCell>) -> AttTable {
        AttTable {
            level: 0.95,
            interval_kind: IntervalKind::SimultaneousSidak,
            rows,
        }
    }

    fn cell(cohort: i64, time: i64, point: f64, lo: f64, hi: f64) -> AttCell {
        AttCell {
            cohort,
            time,
            point,
            draws: Vec::new(),
            lo,
            hi,
        }
    }

    #[test]
    fn sidak_level_matches_paper_adjustment() {
        let level = sidak_level(0.05, 21);
        assert!((level - 0.99756).abs() < 5e-5, "sidak level {level}");
        assert_abs_diff_eq!(sidak_level(0.05, 1), 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(sidak_level(0.05, 2), 0.974679, epsilon = 1e-6);
        // Monotone increasing in the estimand count.
        let mut prev = 0.0;
        for c in 1..50 {
            let l = sidak_level(0.05, c);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn simultaneous_intervals_match_the_normal_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let c = 21;
        let mut draws = Array2::<f64>::zeros((n, c));
        for v in draws.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let intervals = simultaneous_intervals(&draws, 0.05);
        // Per-estimand level 0.99756 corresponds to +/- 3.03 for N(0,1).
        // Individual extreme quantiles wobble (sd about 0.03 at n = 1e5),
        // so each bound gets a loose band and the average a tight one.
        let mut lo_mean = 0.0;
        let mut hi_mean = 0.0;
        for &(lo, hi) in &intervals {
            assert!((hi - 3.03).abs() < 0.15, "upper bound {hi}");
            assert!((lo + 3.03).abs() < 0.15, "lower bound {lo}");
            lo_mean += lo / c as f64;
            hi_mean += hi / c as f64;
        }
        assert!((hi_mean - 3.03).abs() < 0.05, "mean upper bound {hi_mean}");
        assert!((lo_mean + 3.03).abs() < 0.05, "mean lower bound {lo_mean}");

        let constant = Array2::<f64>::from_elem((50, 1), 2.5);
        let intervals = simultaneous_intervals(&constant, 0.05);
        assert_eq!(intervals[0], (2.5, 2.5));

        // One estimand: reduces to the plain interval.
        let column: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let single = Array2::from_shape_vec((column.len(), 1), column.clone()).unwrap();
        let (lo, hi) = simultaneous_intervals(&single, 0.05)[0];
        let (plo, phi) = symmetric_interval(&column, 0.95);
        assert_eq!((lo, hi), (plo, phi));
    }

    #[test]
    fn evaluate_matches_the_hand_instance() {
        let truth: BTreeMap<(i64, i64), f64> = [((7, 7), 1.0), ((7, 8), 2.0)].into();
        let att = table(vec![
            cell(7, 7, 1.0, 0.5, 1.5),
            cell(7, 8, 1.0, 0.5, 1.5),
        ]);
        let eval = evaluate(&att, &truth).unwrap();
        assert_abs_diff_eq!(eval.rmse, (0.5f64).sqrt(), epsilon = 1e-12); // 0.7071
        assert_eq!(eval.coverage, 0.5);
        assert_eq!(eval.cover0, 0.0);
        assert_eq!(eval.n_estimands, 2);

        // Estimates equal to truth with nonzero-width intervals.
        let att = table(vec![
            cell(7, 7, 1.0, 0.9, 1.1),
            cell(7, 8, 2.0, 1.9, 2.1),
        ]);
        let eval = evaluate(&att, &truth).unwrap();
        assert_eq!(eval.rmse, 0.0);
        assert_eq!(eval.coverage, 1.0);

        // Very wide intervals cover everything, truth and zero alike.
        let att = table(vec![
            cell(7, 7, 1.0, -10.0, 10.0),
            cell(7, 8, 1.0, -10.0, 10.0),
        ]);
        let eval = evaluate(&att, &truth).unwrap();
        assert_eq!(eval.coverage, 1.0);
        assert_eq!(eval.cover0, 1.0);
    }

    #[test]
    fn evaluate_rejects_mismatched_cells() {
        let truth: BTreeMap<(i64, i64), f64> = [((7, 7), 1.0), ((8, 8), 2.0)].into();
        let att = table(vec![cell(7, 7, 1.0, 0.0, 2.0), cell(9, 9, 1.0, 0.0, 2.0)]);
        match evaluate(&att, &truth).unwrap_err() {
            MetricsError::CellMismatch { missing, extra } => {
                assert_eq!(missing, vec![(8, 8)]);
                assert_eq!(extra, vec![(9, 9)]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn widening_intervals_never_lowers_coverage() {
        let truth: BTreeMap<(i64, i64), f64> =
            [((7, 7), 0.4), ((7, 8), -0.2), ((8, 8), 3.0)].into();
        let base = table(vec![
            cell(7, 7, 0.5, 0.3, 0.7),
            cell(7, 8, 0.0, -0.1, 0.1),
            cell(8, 8, 1.0, 0.5, 1.5),
        ]);
        let widened = table(
            base.rows
                .iter()
                .map(|r| cell(r.cohort, r.time, r.point, r.lo - 2.5, r.hi + 2.5))
                .collect(),
        );
        let e1 = evaluate(&base, &truth).unwrap();
        let e2 = evaluate(&widened, &truth).unwrap();
        assert!(e2.coverage >= e1.coverage);
        assert!(e2.cover0 >= e1.cover0);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_averages_single_rep() {
        let scenario = ScenarioConfig {
            n_units: 60,
            seed: 42,
            ..ScenarioConfig::default()
        };
        let config = LongBetConfig {
            num_sweeps: 10,
            num_burnin: 3,
            forest_params_pr: crate::forest::ForestParams::with_trees(8),
            forest_params_trt: crate::forest::ForestParams::with_trees(8),
            ..LongBetConfig::default()
        };
        let one = monte_carlo(&scenario, 1, &config, 0.95).unwrap();
        assert_eq!(one.reps, 1);
        for summary in &one.summaries {
            assert_eq!(summary.mean, one.per_rep[0].metric(&summary.metric));
            assert_eq!(summary.se, 0.0);
        }
        let again = monte_carlo(&scenario, 1, &config, 0.95).unwrap();
        assert_eq!(one.per_rep[0].rmse_att, again.per_rep[0].rmse_att);
        assert_eq!(one.per_rep[0].coverage_att, again.per_rep[0].coverage_att);
    }
}
