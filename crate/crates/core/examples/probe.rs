//! Quick probe of benchmark means against design targets (dev only).
use stagdid::benchmark::*;
use stagdid::methods::Method;
use stagdid::panel::EstimandKind;
use stagdid::simgen::Scenario;

fn main() {
    let r: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let post = vec![
        EstimandKind::Aggregate,
        EstimandKind::EventTime { ell: 0 },
        EstimandKind::EventTime { ell: 1 },
    ];
    let with_pre = {
        let mut v = post.clone();
        v.push(EstimandKind::EventTime { ell: -2 });
        v
    };
    let runs = vec![
        (vec![Method::CsDr, Method::CsIpw, Method::SunAb, Method::TwoStage], with_pre),
        (vec![Method::Mundlak], post),
    ];
    for (methods, estimands) in runs {
        let mut plan = BenchmarkPlan::new(
            vec![Scenario::Constant, Scenario::Lagged],
            vec![2000],
            vec![100],
            methods,
            estimands,
            r,
            20250811,
        );
        plan.bootstrap = None;
        let t0 = std::time::Instant::now();
        let m = run_benchmark(&plan).unwrap();
        eprintln!("elapsed: {:.1?} for R={r} x 2 scenarios", t0.elapsed());
        for row in &m.rows {
            println!(
                "{:10} {:9} {:9} mean={:+.4} truth={:+.4} bias={:+.4} sd={:.4} fail={}",
                row.scenario, row.method, row.estimand, row.mean_estimate, row.mean_truth,
                row.mean_estimate - row.mean_truth, row.sd_error, row.failures
            );
        }
    }
}
