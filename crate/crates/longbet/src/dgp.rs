//! Simulation scenarios with ground-truth effects.
//!
//! Four designs cross two prognostic surfaces (parallel: `f_t + gamma(x)`,
//! non-parallel: `f_t * gamma(x)`) with two treatment effects (homogeneous:
//! `2 c_e h_s`, heterogeneous: `(2 + x2 x5) c_e h_s`, `h_s = s exp(-s)`).
//! Covariates are static; the time factor follows a stationary ARMA(1,1)
//! shifted to mean 1; adoption rolls out from `treat_start` as a
//! per-period hazard driven by the propensity score.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use thiserror::Error;

use crate::derive_seed;
use crate::panel::{derive_exposure, CovariateKind, ExposureView, PanelDataset};

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("cohort {0} outside the cohort-effect table (event times 7..=12)")]
    CohortOutsideTable(i64),
    #[error("invalid scenario: {0}")]
    BadConfig(String),
    #[error("unknown scenario {got:?}; valid names: {valid}")]
    UnknownScenario { got: String, valid: String },
    #[error(transparent)]
    Panel(#[from] crate::panel::PanelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendKind {
    Parallel,
    Nonparallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Homogeneous,
    Heterogeneous,
}

pub const SCENARIO_NAMES: [&str; 4] = [
    "parallel-homogeneous",
    "parallel-heterogeneous",
    "nonparallel-homogeneous",
    "nonparallel-heterogeneous",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub treat_start: i64,
    pub prognostic: TrendKind,
    pub effect: EffectKind,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_units: 500,
            n_periods: 12,
            treat_start: 7,
            prognostic: TrendKind::Parallel,
            effect: EffectKind::Homogeneous,
            noise_sd: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn named(name: &str) -> Result<Self, DgpError> {
        let (prognostic, effect) = parse_scenario(name)?;
        Ok(ScenarioConfig {
            prognostic,
            effect,
            ..ScenarioConfig::default()
        })
    }

    pub fn scenario_name(&self) -> String {
        let trend = match self.prognostic {
            TrendKind::Parallel => "parallel",
            TrendKind::Nonparallel => "nonparallel",
        };
        let effect = match self.effect {
            EffectKind::Homogeneous => "homogeneous",
            EffectKind::Heterogeneous => "heterogeneous",
        };
        format!("{trend}-{effect}")
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        if self.n_units == 0 {
            return Err(DgpError::BadConfig("n_units must be positive".into()));
        }
        if self.n_periods < 2 {
            return Err(DgpError::BadConfig("need at least 2 periods".into()));
        }
        if self.treat_start > self.n_periods as i64 {
            return Err(DgpError::BadConfig(format!(
                "treat_start {} beyond the last period {}",
                self.treat_start, self.n_periods
            )));
        }
        if self.noise_sd <= 0.0 {
            return Err(DgpError::BadConfig("noise_sd must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_scenario(name: &str) -> Result<(TrendKind, EffectKind), DgpError> {
    match name {
        "parallel-homogeneous" => Ok((TrendKind::Parallel, EffectKind::Homogeneous)),
        "parallel-heterogeneous" => Ok((TrendKind::Parallel, EffectKind::Heterogeneous)),
        "nonparallel-homogeneous" => Ok((TrendKind::Nonparallel, EffectKind::Homogeneous)),
        "nonparallel-heterogeneous" => Ok((TrendKind::Nonparallel, EffectKind::Heterogeneous)),
        _ => Err(DgpError::UnknownScenario {
            got: name.to_string(),
            valid: SCENARIO_NAMES.join(", "),
        }),
    }
}

/// A generated panel bundled with its ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedPanel {
    pub config: ScenarioConfig,
    pub panel: PanelDataset,
    pub view: ExposureView,
    /// Realized effect at observed exposure; zero wherever untreated.
    pub tau_true: Array2<f64>,
    pub att_true: BTreeMap<(i64, i64), f64>,
    pub catt_true: BTreeMap<(usize, i64), f64>,
    pub f_t: Vec<f64>,
    pub propensity: Vec<f64>,
}

/// Covariate kinds of the simulated design: three standard normals, a
/// binary factor, and an unordered three-level factor coded 1..3.
pub fn covariate_kinds() -> Vec<CovariateKind> {
    vec![
        CovariateKind::Continuous,
        CovariateKind::Continuous,
        CovariateKind::Continuous,
        CovariateKind::Categorical { levels: vec![0, 1] },
        CovariateKind::Categorical {
            levels: vec![1, 2, 3],
        },
    ]
}

/// x1..x3 iid N(0,1), x4 ~ Bernoulli(1/2), x5 uniform on {1, 2, 3}.
pub fn gen_covariates(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((n, 5));
    for i in 0..n {
        for j in 0..3 {
            x[[i, j]] = StandardNormal.sample(rng);
        }
        x[[i, 3]] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        x[[i, 4]] = (rng.random_range(0..3) + 1) as f64;
    }
    x
}

/// Loading factor `gamma(x) = g(x4) + x1 |x3 - 1|` with g(0)=2, g(1)=-1.
pub fn gamma(x: ArrayView1<'_, f64>) -> f64 {
    let g = if x[3] == 0.0 { 2.0 } else { -1.0 };
    g + x[0] * (x[2] - 1.0).abs()
}

/// Stationary ARMA(1,1) time factor plus 1: `w_t = 0.7 w_{t-1} + e_t -
/// 0.4 e_{t-1}`, unit-variance innovations. The initial pair `(w_0, e_0)`
/// is drawn from the joint stationary distribution so the sequence is
/// stationary from the first element.
pub fn gen_time_factor(t_len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (ar, ma): (f64, f64) = (0.7, -0.4);
    let gamma0 = (1.0 + ma * ma + 2.0 * ar * ma) / (1.0 - ar * ar);
    let mut e_prev: f64 = StandardNormal.sample(rng);
    // w_0 | e_0 ~ N(e_0, gamma0 - 1): psi_0 = 1 in the MA(inf) expansion.
    let cond: f64 = StandardNormal.sample(rng);
    let mut w_prev = e_prev + (gamma0 - 1.0).sqrt() * cond;
    let mut f = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let e: f64 = StandardNormal.sample(rng);
        let w = ar * w_prev + e + ma * e_prev;
        f.push(w + 1.0);
        w_prev = w;
        e_prev = e;
    }
    f
}

/// Prognostic surface: `f_t + gamma(x)` (parallel) or `f_t * gamma(x)`
/// (non-parallel). `t_index` is the 0-based period offset.
pub fn eta(x: ArrayView1<'_, f64>, t_index: usize, f: &[f64], kind: TrendKind) -> f64 {
    match kind {
        TrendKind::Parallel => f[t_index] + gamma(x),
        TrendKind::Nonparallel => f[t_index] * gamma(x),
    }
}

fn cohort_effect(e: i64) -> Result<f64, DgpError> {
    match e {
        7 => Ok(1.3),
        8 => Ok(1.2),
        9 => Ok(1.1),
        10 => Ok(1.0),
        11 => Ok(0.9),
        12 => Ok(0.8),
        _ => Err(DgpError::CohortOutsideTable(e)),
    }
}

/// Treatment effect for a unit in cohort `e` after `s >= 1` periods of
/// exposure: `2 c_e h_s` or `(2 + x2 x5) c_e h_s` with `h_s = s exp(-s)`.
pub fn nu(x: ArrayView1<'_, f64>, e: i64, s: u32, kind: EffectKind) -> Result<f64, DgpError> {
    debug_assert!(s >= 1);
    let c = cohort_effect(e)?;
    let s = s as f64;
    let h = s * (-s).exp();
    let base = match kind {
        EffectKind::Homogeneous => 2.0,
        EffectKind::Heterogeneous => 2.0 + x[1] * x[4],
    };
    Ok(base * c * h)
}

/// Adoption hazard `(1/5) Phi(gamma(x)/2 - x1/2)^2 + u/10`, bounded in
/// [0, 0.3]. `u` is drawn once per unit.
pub fn propensity(x: ArrayView1<'_, f64>, u: f64) -> f64 {
    let std_normal = statrs::distribution::Normal::standard();
    let phi = std_normal.cdf(0.5 * gamma(x) - 0.5 * x[0]);
    0.2 * phi * phi + u / 10.0
}

/// Staggered rollout: from `treat_start` on, each still-untreated unit
/// adopts with its per-period hazard and stays treated afterwards.
/// Periods are calendar times `1..=t_len`.
pub fn rollout(
    propensities: &[f64],
    treat_start: i64,
    t_len: usize,
    rng: &mut impl Rng,
) -> Array2<u8> {
    let n = propensities.len();
    let mut z = Array2::<u8>::zeros((n, t_len));
    for i in 0..n {
        let mut treated = false;
        for k in 0..t_len {
            let t = 1 + k as i64;
            if !treated && t >= treat_start && rng.random::<f64>() < propensities[i] {
                treated = true;
            }
            z[[i, k]] = u8::from(treated);
        }
    }
    z
}

/// Composes the full scenario:
/// `y = eta(x, t) + 1{s > 0} nu(x, e, s) + eps`, `eps ~ N(0, noise_sd^2)`.
pub fn generate(config: &ScenarioConfig) -> Result<GeneratedPanel, DgpError> {
    config.validate()?;
    let n = config.n_units;
    let t_len = config.n_periods;

    let mut rng_x = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dgp-covariates", 0));
    let x = gen_covariates(n, &mut rng_x);
    let mut rng_f = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dgp-time-factor", 0));
    let f = gen_time_factor(t_len, &mut rng_f);
    let mut rng_u = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dgp-unit-u", 0));
    let pi: Vec<f64> = (0..n)
        .map(|i| propensity(x.row(i), rng_u.random::<f64>()))
        .collect();
    let mut rng_z = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dgp-rollout", 0));
    let z = rollout(&pi, config.treat_start, t_len, &mut rng_z);

    let mut rng_eps = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dgp-noise", 0));
    let noise = Normal::new(0.0, config.noise_sd).expect("positive noise sd");

    // Exposure bookkeeping before the panel exists.
    let mut tau_true = Array2::<f64>::zeros((n, t_len));
    let mut y = Array2::<f64>::zeros((n, t_len));
    let mut catt_true: BTreeMap<(usize, i64), f64> = BTreeMap::new();
    for i in 0..n {
        let mut s = 0u32;
        let mut event: Option<i64> = None;
        for k in 0..t_len {
            let t = 1 + k as i64;
            if z[[i, k]] == 1 {
                s += 1;
                event.get_or_insert(t);
            }
            let base = eta(x.row(i), k, &f, config.prognostic);
            let effect = if s > 0 {
                let tau = nu(x.row(i), event.unwrap(), s, config.effect)?;
                catt_true.insert((i, t), tau);
                tau
            } else {
                0.0
            };
            tau_true[[i, k]] = effect;
            y[[i, k]] = base + effect + noise.sample(&mut rng_eps);
        }
    }

    let panel = PanelDataset::new(
        1,
        t_len as i64,
        y,
        z,
        x,
        covariate_kinds(),
        (1..=n).map(|i| i.to_string()).collect(),
    )?;
    let view = derive_exposure(&panel);

    // ATT truth as the exact cohort mean of the CATT truth.
    let mut groups: BTreeMap<(i64, i64), Vec<f64>> = BTreeMap::new();
    for (&(i, t), &tau) in &catt_true {
        let e = view.event_time(i).expect("treated unit has an event time");
        groups.entry((e, t)).or_default().push(tau);
    }
    let att_true = groups
        .into_iter()
        .map(|(key, taus)| (key, taus.iter().sum::<f64>() / taus.len() as f64))
        .collect();

    Ok(GeneratedPanel {
        config: *config,
        panel,
        view,
        tau_true,
        att_true,
        catt_true,
        f_t: f,
        propensity: pi,
    })
}

/// Ground-truth ATT for periods past the observed window, for checking
/// forecasts: cohorts keep their realized members, exposure keeps
/// accumulating, and the effect follows the same `nu`.
pub fn future_att_true(
    generated: &GeneratedPanel,
    horizon: usize,
) -> Result<BTreeMap<(i64, i64), f64>, DgpError> {
    let t1 = generated.panel.t1();
    let mut out = BTreeMap::new();
    for (e, units) in crate::panel::cohorts(&generated.view) {
        for h in 1..=horizon as i64 {
            let t = t1 + h;
            let s = (t - e + 1) as u32;
            let mut acc = 0.0;
            for &i in &units {
                acc += nu(generated.panel.x().row(i), e, s, generated.config.effect)?;
            }
            out.insert((e, t), acc / units.len() as f64);
        }
    }
    Ok(out)
}
