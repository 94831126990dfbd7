use bls_core::cutpoints::*;
use bls_core::geometry::{LocalScale, Point3};
use bls_core::path::{tol_hit, SampledPath};
use bls_core::spatial::Tolerance;
use bls_core::stats::linear_fit;
use proptest::prelude::*;

fn config(alpha: f64, ns: Vec<u32>, replicas: u64) -> CutScanConfig {
    let delta: f64 = 0.01;
    let h = 3.0 * delta.sqrt();
    CutScanConfig {
        j: 4,
        n_range: ns,
        loop_law: LoopLaw::FixedDurationBridge {
            duration: 1.0 / 16.0,
            root: Point3::new(0.25, 0.0, 0.0),
        },
        alpha,
        delta,
        h,
        t_min: (h / 2.0).powi(2),
        min_loop_steps: 4,
        hit_delta: 0.01,
        max_cubes_per_n: 48,
        soup_mode: SoupMode::Independent,
        replicas,
        seed: 2024,
    }
}

/// Polyline through `pts`, subdivided so consecutive points are close.
fn polyline(pts: &[Point3]) -> SampledPath {
    let mut points = vec![pts[0]];
    for w in pts.windows(2) {
        for i in 1..=200 {
            points.push(w[0] + (w[1] - w[0]) * (i as f64 / 200.0));
        }
    }
    let times = (0..points.len()).map(|i| i as f64).collect();
    SampledPath {
        times,
        points,
        resolution: 0.01,
        scale: LocalScale::UNIT,
    }
}

fn annulus() -> CubeAnnulus {
    CubeAnnulus::new(n_cube(8, [4, 4, 4]), 4, 8)
}

#[test]
fn one_visit_gives_two_crossings() {
    let ann = annulus();
    let c = ann.cube.center;
    let far = c + Point3::new(0.1, 0.0, 0.0);
    let path = polyline(&[far, c, c + Point3::new(0.0, 0.001, 0.0), far + Point3::new(0.0, 0.02, 0.0)]);
    let cr = locate_crossings(&path, &ann, 1e-9).unwrap();
    assert_eq!(cr.crossings, 2);
    assert!(cr.s1 < cr.t1 && cr.t1 <= cr.v && cr.v <= cr.s2 && cr.s2 < cr.t2);
    assert!(cr.gamma1.last().dist(c) <= ann.r_in + 1e-9);
    assert!(cr.gamma2.first().dist(c) <= ann.r_in + 1e-9);
    assert!(cr.gamma2.last().dist(c) >= ann.r_out - 1e-9);
}

#[test]
fn three_visits_set_the_four_crossing_flag() {
    let ann = annulus();
    let c = ann.cube.center;
    let far = |k: f64| c + Point3::new(0.1, 0.01 * k, 0.0);
    let path = polyline(&[far(0.0), c, far(1.0), c, far(2.0), c, far(3.0)]);
    let cr = locate_crossings(&path, &ann, 1e-9).unwrap();
    assert_eq!(cr.crossings, 6);
    assert!(cr.crossings >= 4);
    assert!(cr.t1 <= cr.v && cr.v <= cr.s2);
}

#[test]
fn missing_the_cube_is_reported() {
    let ann = annulus();
    let far = ann.cube.center + Point3::new(0.1, 0.0, 0.0);
    let path = polyline(&[far, far + Point3::new(0.0, 0.05, 0.0)]);
    assert!(locate_crossings(&path, &ann, 1e-9).is_err());
}

#[test]
fn crossing_times_are_ordered_on_random_loops() {
    let cfg = config(0.0, vec![8], 1000);
    let mut checked = 0;
    for rep in 0..cfg.replicas {
        let (l, _) = sample_scan_loop(&cfg, rep).unwrap();
        let hits = hit_cubes(&cfg, &l);
        let idx = hits[0][hits[0].len() / 2];
        let ann = CubeAnnulus::new(n_cube(8, idx), cfg.j, 8);
        let path = cube_trace(&cfg, &l, &ann);
        let cr = locate_crossings(&path, &ann, tol_hit(cfg.delta)).unwrap();
        assert!(
            cr.s1 < cr.t1 && cr.t1 <= cr.v && cr.v <= cr.s2 && cr.s2 < cr.t2,
            "replica {rep}: {} {} {} {} {}",
            cr.s1,
            cr.t1,
            cr.v,
            cr.s2,
            cr.t2
        );
        assert!(cr.crossings >= 2 && cr.crossings % 2 == 0);
        checked += 1;
    }
    assert_eq!(checked, 1000);
}

#[test]
fn synthetic_counts_give_exact_dimension() {
    let ns = vec![8, 9, 10, 11];
    let counts: Vec<Vec<f64>> = (0..5)
        .map(|r| ns.iter().map(|&n| (1.0 + r as f64) * (1.4 * n as f64).exp2()).collect())
        .collect();
    let d = dimension_estimate(&counts, &ns, 200, 3).unwrap();
    assert!((d.dim_hat - 1.4).abs() < 1e-12);
    assert!((d.ci_low - 1.4).abs() < 1e-9 && (d.ci_high - 1.4).abs() < 1e-9);
    assert!(!d.zero_at_largest);
    assert!(!d.caveat.is_empty());

    let mut zero = counts.clone();
    zero.iter_mut().for_each(|r| r[3] = 0.0);
    assert!(dimension_estimate(&zero, &ns, 50, 3).unwrap().zero_at_largest);
    assert!(dimension_estimate(&counts[..1].iter().map(|r| r[..2].to_vec()).collect::<Vec<_>>(), &ns[..2], 10, 3).is_err());
}

#[test]
fn scan_is_deterministic_and_nested() {
    let cfg = config(0.2, vec![8, 9], 3);
    let a = scan_cutboxes(&cfg).unwrap();
    let b = scan_cutboxes(&cfg).unwrap();
    assert_eq!(a, b);
    for c in &a.counts {
        assert!(c.f_scanned <= c.k_scanned && c.k_scanned + c.cubes_lost <= c.cubes_scanned);
        assert!(c.cubes_scanned <= c.cubes_hit && c.cubes_hit <= c.cubes_total);
        assert!(c.f_count <= c.k_count && c.k_count <= c.cubes_hit as f64);
    }
    for r in &a.records {
        assert!(!r.is_f || r.is_k);
        assert!(!r.is_f || r.crossings >= 4);
    }
    let mut csv = Vec::new();
    a.write_counts_csv(&mut csv).unwrap();
    let header = String::from_utf8(csv).unwrap();
    let header = header.lines().next().unwrap();
    for f in ["replica", "j", "n", "cubes_total", "cubes_hit", "k_count", "f_count"] {
        assert!(header.split(',').any(|h| h == f), "{f} missing from {header}");
    }
}

#[test]
fn alpha_zero_is_plain_disjointness() {
    let cfg = config(0.0, vec![8], 4);
    let scan = scan_cutboxes(&cfg).unwrap();
    let mut disjoint = 0;
    for rec in &scan.records {
        let (l, _) = sample_scan_loop(&cfg, rec.replica).unwrap();
        let ann = CubeAnnulus::new(n_cube(8, [rec.cube_x, rec.cube_y, rec.cube_z]), cfg.j, 8);
        let path = cube_trace(&cfg, &l, &ann);
        let cr = locate_crossings(&path, &ann, tol_hit(cfg.delta)).unwrap();
        let touch = Tolerance::new(cfg.h, ann.scale()).polylines_touch(&cr.gamma1, &cr.gamma2);
        assert_eq!(rec.is_k, !touch);
        disjoint += rec.is_k as usize;
    }
    assert!(disjoint > 0 && disjoint < scan.records.len());
}

#[test]
fn soup_can_only_remove_cut_boxes() {
    let free = scan_cutboxes(&config(0.0, vec![8], 4)).unwrap();
    let soup = scan_cutboxes(&config(0.3, vec![8], 4)).unwrap();
    assert_eq!(free.records.len(), soup.records.len());
    for (a, b) in free.records.iter().zip(&soup.records) {
        assert_eq!((a.cube_x, a.cube_y, a.cube_z), (b.cube_x, b.cube_y, b.cube_z));
        assert!(a.is_k || !b.is_k);
    }
}

#[test]
fn hit_fraction_halves_per_level() {
    let cfg = config(0.0, vec![8, 9, 10, 11], 20);
    let scan = scan_cutboxes(&cfg).unwrap();
    let (x, y): (Vec<f64>, Vec<f64>) = cfg
        .n_range
        .iter()
        .map(|&n| {
            let rows: Vec<_> = scan.counts.iter().filter(|c| c.n == n).collect();
            let frac: f64 = rows.iter().map(|c| c.cubes_hit as f64 / c.cubes_total as f64).sum::<f64>() / rows.len() as f64;
            (n as f64, frac.log2())
        })
        .unzip();
    let fit = linear_fit(&x, &y).unwrap();
    assert!((fit.slope + 1.0).abs() < 0.2, "slope {}", fit.slope);
}

#[test]
fn soup_modes_agree() {
    let ns = vec![9];
    let mut ind = config(0.2, ns.clone(), 12);
    ind.max_cubes_per_n = 24;
    let mut glo = ind.clone();
    glo.soup_mode = SoupMode::Global;
    let a = scan_cutboxes(&ind).unwrap();
    let b = scan_cutboxes(&glo).unwrap();
    let k = |s: &CutScan| s.counts.iter().map(|c| c.k_scanned as f64).collect::<Vec<_>>();
    let (ka, kb) = (k(&a), k(&b));
    let diff: Vec<f64> = ka.iter().zip(&kb).map(|(x, y)| x - y).collect();
    let m = bls_core::stats::mean(&diff);
    let se = bls_core::stats::stderr_of_mean(&diff).max(0.5);
    assert!(m.abs() <= 3.0 * se, "mean difference {m} stderr {se}");
}

#[test]
fn pair_bins_follow_the_shape() {
    // Pair counts exactly proportional to the bound's shape stay in the band.
    let (j, xi) = (4, 0.6);
    let mut pairs = Vec::new();
    for n in 8..=10u32 {
        for (m, total) in cube_pairs_by_bin(n) {
            if m < j + 4 || m > n {
                continue;
            }
            let f = 0.5 * ((-2.0 * n as f64 + m as f64) * (xi + 1.0)).exp2();
            pairs.push(PairCountRow {
                replica: 0,
                n,
                m,
                k_pairs_scanned: 1000,
                pair_weight: f * total as f64 / 1000.0,
            });
        }
    }
    let rep = second_moment_check(&pairs, 1, j, xi, 10.0, 5);
    assert_eq!(rep.violations, 0);
    assert!((rep.fitted_constant - 0.5).abs() < 1e-9);
    let b = rep.bins.iter().find(|b| b.m == b.n).unwrap();
    assert!((b.shape - (-(b.n as f64) * (xi + 1.0)).exp2()).abs() < 1e-15);
    assert!((rep.pair_exponent.unwrap() - 2.0 * (1.0 + xi)).abs() < 1e-9);

    let mut bad = pairs.clone();
    bad[0].pair_weight *= 1000.0;
    assert!(second_moment_check(&bad, 1, j, xi, 10.0, 5).violations >= 1);
    let sparse = second_moment_check(&pairs.iter().map(|p| PairCountRow { k_pairs_scanned: 2, ..p.clone() }).collect::<Vec<_>>(), 1, j, xi, 10.0, 5);
    assert!(sparse.bins.iter().all(|b| b.sparse));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn f_implies_k(seed in 0u64..1000, alpha in 0.0..0.4f64) {
        let mut cfg = config(alpha, vec![8], 1);
        cfg.seed = seed;
        cfg.max_cubes_per_n = 16;
        let s = scan_cutboxes(&cfg).unwrap();
        for r in &s.records {
            prop_assert!(!r.is_f || r.is_k);
        }
        let c = &s.counts[0];
        prop_assert!(c.f_count <= c.k_count && c.k_count <= c.cubes_hit as f64);
    }
}
