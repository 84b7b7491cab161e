use longbet::dgp::{generate, ScenarioConfig};
use longbet::metrics::{evaluate, evaluate_catt};
use longbet::model::{att_table, catt_table, fit, LongBetConfig};
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(5);
    let scenario_name = args.get(2).map(String::as_str).unwrap_or("parallel-homogeneous");
    let scenario = ScenarioConfig::named(scenario_name).unwrap();
    let results: Vec<(f64, f64, f64, f64, f64)> = (0..n_seeds)
        .into_par_iter()
        .map(|seed| {
            let mut sc = scenario;
            sc.seed = 1000 + seed;
            let g = generate(&sc).unwrap();
            let config = LongBetConfig { seed: 2000 + seed, ..LongBetConfig::default() };
            let fitted = fit(&g.panel, &g.view, &config).unwrap();
            let att = att_table(&fitted, &g.panel, &g.view, 0.95, true).unwrap();
            let catt = catt_table(&fitted, &g.panel, &g.view, 0.95).unwrap();
            let ae = evaluate(&att, &g.att_true).unwrap();
            let ce = evaluate_catt(&catt, &g.catt_true).unwrap();
            println!(
                "seed {seed}: att rmse {:.4} cov {:.3} cover0 {:.3} | catt rmse {:.4} cov {:.3}",
                ae.rmse, ae.coverage, ae.cover0, ce.rmse, ce.coverage
            );
            (ae.rmse, ae.coverage, ae.cover0, ce.rmse, ce.coverage)
        })
        .collect();
    let n = results.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| results.iter().map(f).sum::<f64>() / n;
    println!(
        "== {scenario_name} MEAN over {n_seeds}: att rmse {:.4} cov {:.3} cover0 {:.3} | catt rmse {:.4} cov {:.3}",
        mean(|r| r.0), mean(|r| r.1), mean(|r| r.2), mean(|r| r.3), mean(|r| r.4)
    );
}
