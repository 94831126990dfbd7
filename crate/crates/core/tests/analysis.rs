use bls_core::analysis::*;
use bls_core::estimators::EstimateRecord;
use bls_core::rng::RngStream;
use proptest::prelude::*;

fn record(alpha: f64, r: f64, p: f64, se: f64) -> EstimateRecord {
    EstimateRecord {
        alpha,
        k: 1,
        lambda: 1.0,
        r,
        p_hat: p,
        stderr: se,
        outer_n: 1000,
        inner_m: 50,
        delta: 0.01,
        h: 0.3,
        seed: 1,
        estimator: "direct".into(),
        extrapolated: false,
        raw_p_hat: p,
        raw_stderr: se,
        avoiding_replicas: 1000,
        budget_failures: 0,
        samples: Vec::new(),
    }
}

fn exponential(xi: f64, c: f64, radii: &[f64]) -> Vec<EstimateRecord> {
    radii.iter().map(|&r| record(0.0, r, c * (-xi * r).exp(), 0.0)).collect()
}

fn refs(v: &[EstimateRecord]) -> Vec<&EstimateRecord> {
    v.iter().collect()
}

fn quick() -> FitWindow {
    FitWindow {
        bootstrap: 200,
        ..Default::default()
    }
}

#[test]
fn exact_exponential_is_fitted_exactly() {
    let s = exponential(0.6, 0.8, &[0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let f = fit_exponent(&refs(&s), &quick()).unwrap();
    assert!((f.xi_hat - 0.6).abs() < 1e-12);
    assert!(f.max_abs_residual < 1e-12);
    assert!(f.ci_low <= f.xi_hat && f.xi_hat <= f.ci_high);
    assert_eq!(f.r_window, (1.0, 5.0));
    assert_eq!(f.excluded.len(), 2);
    let band = check_band(&refs(&s), &f, 10.0);
    assert!((band.ratio - 1.0).abs() < 1e-12 && band.holds);
}

#[test]
fn constant_series_has_zero_exponent() {
    let s: Vec<EstimateRecord> = (1..=5).map(|r| record(0.0, r as f64, 0.3, 0.0)).collect();
    assert!(fit_exponent(&refs(&s), &quick()).unwrap().xi_hat.abs() < 1e-12);
}

#[test]
fn noisy_exponential_recovers_rate() {
    // Ten radii with 5% multiplicative noise; the oracle is the generating rate.
    let mut rng = RngStream::new(9, 9).rng();
    let s: Vec<EstimateRecord> = (1..=10)
        .map(|r| {
            let p = (-0.6 * r as f64).exp();
            record(0.0, r as f64, p * (1.0 + 0.05 * rng.normal()), 0.05 * p)
        })
        .collect();
    let f = fit_exponent(&refs(&s), &quick()).unwrap();
    assert!((f.xi_hat - 0.6).abs() < 0.05, "{}", f.xi_hat);
    assert!(f.ci_low < 0.6 && 0.6 < f.ci_high);
}

#[test]
fn too_few_radii_and_nonpositive_entries_are_reported() {
    let mut s = exponential(0.5, 1.0, &[1.0, 2.0, 3.0, 4.0]);
    s[1].p_hat = 0.0;
    let f = fit_exponent(&refs(&s), &quick()).unwrap();
    assert!(f.excluded.iter().any(|e| e.r == 2.0 && e.reason.contains("nonpositive")));
    s[2].p_hat = 0.0;
    assert!(fit_exponent(&refs(&s), &quick()).is_err());
}

#[test]
fn submultiplicativity_on_exponential_models() {
    let s = exponential(0.7, 0.9, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let mut s0 = s.clone();
    s0[0].p_hat = 1.0;
    let rep = check_submultiplicativity(&refs(&s0));
    assert!(rep.all_hold);
    let t00 = rep.triples.iter().find(|t| t.r == 0.0 && t.s == 0.0).unwrap();
    assert!(t00.lhs <= 1.0);
    assert!(rep.triples.iter().any(|t| t.r == 1.0 && t.s == 2.0));

    let mut bad = s0.clone();
    bad[3].p_hat = 0.9;
    assert!(!check_submultiplicativity(&refs(&bad)).all_hold);
}

#[test]
fn continuity_of_exact_series() {
    let radii = [1.0, 2.0, 3.0, 4.0, 5.0];
    let series: Vec<(f64, Vec<EstimateRecord>)> = [0.0, 0.02, 0.05, 0.1]
        .iter()
        .map(|&a| {
            let v = exponential(0.6 + a, 1.0, &radii)
                .into_iter()
                .map(|mut r| {
                    r.alpha = a;
                    r
                })
                .collect();
            (a, v)
        })
        .collect();
    let input: Vec<(f64, Vec<&EstimateRecord>)> = series.iter().map(|(a, v)| (*a, v.iter().collect())).collect();
    let rep = continuity_sweep(&input, &quick()).unwrap();
    assert_eq!(rep.gaps[0], 0.0);
    assert!(rep.all_monotone && rep.all_nonnegative);
    assert!((rep.gaps[3] - 0.1).abs() < 1e-9);
    assert!(continuity_sweep(&input[1..], &quick()).is_err());
}

#[test]
fn coupled_samples_give_paired_gap_errors() {
    // Replica-level samples shared across alphas, thinned by a fixed factor:
    // the gap is deterministic, so its paired spread is tiny.
    let mut rng = RngStream::new(4, 4).rng();
    let n = 400;
    let base: Vec<Vec<f64>> = (1..=4)
        .map(|r| (0..n).map(|_| ((rng.open01() < (-0.6 * r as f64).exp()) as u8) as f64).collect())
        .collect();
    let make = |a: f64| -> Vec<EstimateRecord> {
        base.iter()
            .enumerate()
            .map(|(i, s)| {
                let r = (i + 1) as f64;
                let samples: Vec<f64> = s.iter().map(|x| x * (-a * r).exp()).collect();
                let mut rec = record(a, r, bls_core::stats::mean(&samples), bls_core::stats::stderr_of_mean(&samples));
                rec.samples = samples;
                rec
            })
            .collect()
    };
    let s0 = make(0.0);
    let s1 = make(0.2);
    let input = vec![(0.0, refs(&s0)), (0.2, refs(&s1))];
    let rep = continuity_sweep(&input, &quick()).unwrap();
    assert!((rep.gaps[1] - 0.2).abs() < 1e-6, "{}", rep.gaps[1]);
    assert!(rep.gap_stderr[1] < 1e-6);
    assert!(rep.xi_stderr[1] > 0.01);
}

#[test]
fn dimension_formula() {
    let s = exponential(0.6, 1.0, &[1.0, 2.0, 3.0]);
    let f = fit_exponent(&refs(&s), &quick()).unwrap();
    let d = dimension_report(&f);
    assert!((d.dimension - 1.4).abs() < 1e-12);
    assert!(d.above_one);
}

#[test]
fn plot_csv_has_log_columns() {
    let s = exponential(0.6, 1.0, &[1.0, 2.0]);
    let mut out = Vec::new();
    write_plot_csv(&s, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().next().unwrap().contains("log_p"));
    assert_eq!(text.lines().count(), 3);
}

proptest! {
    #[test]
    fn scaling_changes_only_the_intercept(xi in 0.0..2.0f64, c in 0.01..1.0f64, scale in 0.1..1.0f64) {
        let s = exponential(xi, c, &[1.0, 2.0, 3.0, 4.0]);
        let t = exponential(xi, c * scale, &[1.0, 2.0, 3.0, 4.0]);
        let w = FitWindow { bootstrap: 0, ..Default::default() };
        let a = fit_exponent(&refs(&s), &w).unwrap();
        let b = fit_exponent(&refs(&t), &w).unwrap();
        prop_assert!((a.xi_hat - b.xi_hat).abs() < 1e-9);
        prop_assert!((a.xi_hat - xi).abs() < 1e-9);
        prop_assert!((b.intercept - a.intercept - scale.ln()).abs() < 1e-9);
    }

    #[test]
    fn exponential_models_never_violate_submultiplicativity(xi in 0.0..3.0f64, u in 0.0..1.0f64) {
        // C e^{-xi r} is submultiplicative in the shifted sense iff C >= e^{-xi}.
        let c = (-xi * (1.0 - u)).exp();
        let mut s = exponential(xi, c, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        s[0].p_hat = 1.0;
        prop_assert!(check_submultiplicativity(&refs(&s)).all_hold);
    }
}
