use std::time::Instant;

use longbet::dgp::{generate, ScenarioConfig};
use longbet::forest::{Node, SplitAxis};
use longbet::metrics::{evaluate, evaluate_catt};
use longbet::model::{att_table, catt_table, fit, LongBetConfig};

fn axis_counts(node: &Node, counts: &mut [usize; 3]) {
    if let Node::Internal { rule, left, right } = node {
        match rule.axis {
            SplitAxis::Covariate(_) => counts[0] += 1,
            SplitAxis::CalendarTime => counts[1] += 1,
            SplitAxis::ExposureTime => counts[2] += 1,
        }
        axis_counts(left, counts);
        axis_counts(right, counts);
    }
}

fn main() {
    let scenario = ScenarioConfig {
        seed: 4,
        ..ScenarioConfig::default()
    };
    let g = generate(&scenario).unwrap();
    let config = LongBetConfig {
        seed: 7,
        ..LongBetConfig::default()
    };
    let start = Instant::now();
    let fitted = fit(&g.panel, &g.view, &config).unwrap();
    println!("fit: {:?}", start.elapsed());

    let att = att_table(&fitted, &g.panel, &g.view, 0.95, true).unwrap();
    let catt = catt_table(&fitted, &g.panel, &g.view, 0.95).unwrap();
    let att_eval = evaluate(&att, &g.att_true).unwrap();
    let catt_eval = evaluate_catt(&catt, &g.catt_true).unwrap();
    println!(
        "ATT rmse {:.4} coverage {:.3} cover0 {:.3} | CATT rmse {:.4} coverage {:.3}",
        att_eval.rmse, att_eval.coverage, att_eval.cover0, catt_eval.rmse, catt_eval.coverage,
    );
    println!("cell grid (rows cohort, cols s):   est(truth)");
    for e in 7..=12i64 {
        let mut line = format!("e={e}: ");
        for s in 1..=(12 - e + 1) {
            let t = e + s - 1;
            if let Some(cell) = att_eval.cells.iter().find(|c| c.cohort == e && c.time == t) {
                line.push_str(&format!("{:+.3}({:+.3}) ", cell.estimate, cell.truth));
            }
        }
        println!("{line}");
    }

    // Posterior means of alpha, sigma2, beta.
    let n_draws = fitted.n_draws() as f64;
    let alpha_mean: f64 = fitted.draws().iter().map(|d| d.alpha).sum::<f64>() / n_draws;
    let sigma2_mean: f64 = fitted.draws().iter().map(|d| d.sigma2).sum::<f64>() / n_draws;
    println!("alpha mean {alpha_mean:.3}  sigma2(scaled) mean {sigma2_mean:.4}  y_sd {:.3}", fitted.y_sd());
    println!("sigma2 original units: {:.4} (true 0.25)", sigma2_mean * fitted.y_sd() * fitted.y_sd());
    let s_max = fitted.s_max() as usize;
    let mut beta_mean = vec![0.0; s_max + 1];
    for d in fitted.draws() {
        for (s, b) in d.beta.iter().enumerate() {
            beta_mean[s] += b / n_draws;
        }
    }
    println!("beta mean: {:?}", beta_mean.iter().map(|b| (b * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    // Axis usage in the treatment forest across draws.
    let mut counts = [0usize; 3];
    let mut depth_sum = 0.0;
    let mut trees = 0usize;
    for d in fitted.draws() {
        for tree in d.forest_trt.trees() {
            axis_counts(tree.root(), &mut counts);
            depth_sum += tree.depth() as f64;
            trees += 1;
        }
    }
    println!(
        "treatment forest: mean depth {:.2}, splits covariate {} calendar {} exposure {}",
        depth_sum / trees as f64,
        counts[0], counts[1], counts[2]
    );
}
