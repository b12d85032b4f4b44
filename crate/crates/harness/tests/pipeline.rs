use tpmb_harness::config::{Config, Profile};
use tpmb_harness::io::{read_series_csv, write_report_csv};
use tpmb_harness::mc::monte_carlo;
use tpmb_harness::run::Totals;

fn smoke(runs: usize, variants: &[&str]) -> Config {
    let mut cfg = Config::profile(Profile::Smoke);
    cfg.mc.runs = runs;
    cfg.mc.gamma_grid = vec![5.0];
    cfg.mc.variants = variants.iter().map(|s| s.to_string()).collect();
    cfg
}

fn csv_bytes(cfg: &Config) -> Vec<Vec<u8>> {
    monte_carlo(cfg)
        .unwrap()
        .reports
        .iter()
        .map(|r| {
            let mut buf = Vec::new();
            write_report_csv(&mut buf, r).unwrap();
            buf
        })
        .collect()
}

#[test]
fn single_run_is_deterministic() {
    let cfg = smoke(1, &["tpmb-all"]);
    let a = csv_bytes(&cfg);
    assert_eq!(a.len(), 1);
    assert_eq!(a, csv_bytes(&cfg));
    let text = String::from_utf8(a[0].clone()).unwrap();
    assert!(text.starts_with("step,metric,loc,miss,false,switch\n"));
    let series = read_series_csv(a[0].as_slice()).unwrap();
    assert_eq!(series.len(), 30);
    assert_eq!(series[0].step, 1);
    let mut other = cfg.clone();
    other.mc.seed = 2;
    assert_ne!(a, csv_bytes(&other));
}

#[test]
fn aggregate_is_mean_of_runs() {
    let mut cfg = smoke(2, &["tpmb-all", "pmb"]);
    cfg.mc.smoothing = true;
    cfg.mc.smoothing_draws = 10;
    let res = monte_carlo(&cfg).unwrap();
    assert!(res.failures.is_empty());
    assert_eq!(res.reports.len(), 4);
    for v in ["tpmb-all", "pmb"] {
        let runs: Vec<_> = res.reports.iter().filter(|r| r.variant == v).collect();
        let agg = res.aggregate(v, 5.0).unwrap();
        assert_eq!(agg.runs, 2);
        assert!(!agg.partial);
        let mean = runs.iter().map(|r| r.totals.total).sum::<f64>() / 2.0;
        assert!((agg.totals.total - mean).abs() < 1e-9);
        let miss = runs.iter().map(|r| r.totals.miss).sum::<f64>() / 2.0;
        assert!((agg.totals.miss - miss).abs() < 1e-9);
        for r in &runs {
            assert_eq!(r.series.len(), 30);
            assert_eq!(r.totals, Totals::of(&r.series));
            let s = r.smoothed_final.as_ref().unwrap();
            assert_eq!(s.step, 30);
            assert!(s.total.is_finite());
            for step in &r.series {
                let parts = step.localization + step.miss + step.false_ + step.switch;
                assert!((parts - step.total).abs() < 1e-9);
            }
        }
        assert_eq!(agg.mean_series.len(), 30);
        let last = runs.iter().map(|r| r.series[29].total).sum::<f64>() / 2.0;
        assert!((agg.filtered_final.mean - last).abs() < 1e-9);
    }
}

#[test]
fn fixed_truth_shares_ground_truth() {
    let mut cfg = smoke(2, &["tpmb-all"]);
    cfg.scenario.fixed_truth = true;
    let a = tpmb_harness::mc::truth_stream(&cfg, 0);
    let b = tpmb_harness::mc::truth_stream(&cfg, 1);
    assert_eq!(a, b);
    cfg.scenario.fixed_truth = false;
    assert_ne!(tpmb_harness::mc::truth_stream(&cfg, 0), tpmb_harness::mc::truth_stream(&cfg, 1));
    cfg.mc.seeds = vec![10, 20];
    assert_eq!(tpmb_harness::mc::run_stream(&cfg, 1).seed, 20);
}
