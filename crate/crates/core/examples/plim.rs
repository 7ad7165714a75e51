//! One huge draw to approximate estimator probability limits (dev only).
use stagdid::methods::{fit_method, Method};
use stagdid::panel::{derive_cohorts, EstimandKind, EstimandSpec};
use stagdid::simgen::{generate, Scenario, SimConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let c: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    for seed in [1u64, 2, 3] {
        let cfg = SimConfig::new(n, c, Scenario::Lagged, seed);
        let (panel, truth) = generate(&cfg).unwrap();
        let cohorts = derive_cohorts(&panel).unwrap();
        let spec = EstimandSpec::new(EstimandKind::Aggregate);
        for m in [Method::SunAb, Method::TwoStage] {
            let fit = fit_method(m, &panel, &cohorts, &spec).unwrap();
            let p1 = fit.estimand(&panel, &cohorts, EstimandKind::EventTime { ell: 1 }).unwrap();
            let p0 = fit.estimand(&panel, &cohorts, EstimandKind::EventTime { ell: 0 }).unwrap();
            let pa = fit.estimand(&panel, &cohorts, EstimandKind::Aggregate).unwrap();
            println!("seed {seed} {:9}: psi1={p1:.4} psi0={p0:.4} aggr={pa:.4} (truth aggr iw={:.4} 2s={:.4})",
                m.name(), truth.estimable["iw_aggregate"], truth.estimable["two_stage_aggregate"]);
        }
        // realized E[X5|G] contrast
        use stagdid::panel::Cohort;
        for g in [3u32, 4, 5] {
            let members = cohorts.units_in(Cohort::At(g));
            let m5: f64 = members.iter().map(|&u| panel.xval(u, 4)).sum::<f64>() / members.len() as f64;
            print!("E[x5|G={g}]={m5:.4} ");
        }
        println!();
    }
}
