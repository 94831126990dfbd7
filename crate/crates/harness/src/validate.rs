//! Fast oracle suite behind the `validate` subcommand.

use bls_core::analysis::{fit_exponent, FitWindow};
use bls_core::cluster::{brute_force_clusters, enlarge, ClusterIndex};
use bls_core::cutpoints::{dimension_estimate, locate_crossings, n_cube, CubeAnnulus};
use bls_core::estimators::{estimate_p, EstimateRecord, ExperimentConfig};
use bls_core::geometry::{Ball, Cube, LocalScale, Point3};
use bls_core::path::{sample_bridge, SampledPath};
use bls_core::soup::{rooted_mass, sample_soup, RootRegion, SoupConfig};
use bls_core::spatial::{polyline_min_distance, polyline_min_distance_brute, Tolerance};
use bls_core::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn soup_config(alpha: f64, seed: u64) -> SoupConfig {
    SoupConfig {
        alpha,
        root_region: RootRegion::Cube(Cube::new(Point3::ORIGIN, 0.5).expect("valid cube")),
        t_min: 0.01,
        t_max: 0.3,
        scale: LocalScale::UNIT,
        containment: None,
        exclusion: None,
        delta: 0.01,
        min_loop_steps: 4,
        stream: RngStream::new(seed, 5),
    }
}

fn exact_record(r: f64, p: f64) -> EstimateRecord {
    EstimateRecord {
        alpha: 0.0,
        k: 1,
        lambda: 1.0,
        r,
        p_hat: p,
        stderr: 0.0,
        outer_n: 1,
        inner_m: 1,
        delta: 0.01,
        h: 0.3,
        seed: 0,
        estimator: "direct".into(),
        extrapolated: false,
        raw_p_hat: p,
        raw_stderr: 0.0,
        avoiding_replicas: u64::MAX,
        budget_failures: 0,
        samples: Vec::new(),
    }
}

fn polyline(pts: &[Point3]) -> SampledPath {
    let mut points = vec![pts[0]];
    for w in pts.windows(2) {
        for i in 1..=100 {
            points.push(w[0] + (w[1] - w[0]) * (i as f64 / 100.0));
        }
    }
    SampledPath {
        times: (0..points.len()).map(|i| i as f64).collect(),
        points,
        resolution: 0.01,
        scale: LocalScale::UNIT,
    }
}

pub fn run_checks(seed: u64) -> Vec<Check> {
    vec![
        check("p_at_radius_zero_is_one", || {
            let cfg = ExperimentConfig {
                alphas: vec![0.0, 0.2],
                ks: vec![1, 2],
                lambdas: vec![0.5, 1.0, 2.0],
                r_grid: vec![0.0, 0.5],
                outer_n: 8,
                inner_m: 4,
                delta: 0.02,
                h: 3.0 * 0.02f64.sqrt(),
                t_min: 0.045,
                min_loop_steps: 4,
                walk_budget: 1e4,
                seed,
            };
            let s = estimate_p(&cfg).map_err(|e| e.to_string())?;
            let bad: Vec<_> = s.records.iter().filter(|r| r.r == 0.0 && r.p_hat != 1.0).collect();
            if bad.is_empty() {
                Ok(format!("{} radius-zero records equal 1", s.records.iter().filter(|r| r.r == 0.0).count()))
            } else {
                Err(format!("{} radius-zero records differ from 1", bad.len()))
            }
        }),
        check("alpha_zero_soup_is_empty", || {
            let n = sample_soup(&soup_config(0.0, seed)).map_err(|e| e.to_string())?.len();
            if n == 0 {
                Ok("0 loops".into())
            } else {
                Err(format!("{n} loops"))
            }
        }),
        check("alpha_zero_enlargement_is_identity", || {
            let soup = sample_soup(&soup_config(0.0, seed)).map_err(|e| e.to_string())?;
            let idx = ClusterIndex::build(&soup, Tolerance::uniform(0.05));
            let v = vec![polyline(&[Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0)])];
            let e = enlarge(&v, &idx);
            if e.attached_clusters.is_empty() && e.base == v {
                Ok("no clusters attached".into())
            } else {
                Err(format!("{} clusters attached", e.attached_clusters.len()))
            }
        }),
        check("fit_exact_on_exponentials", || {
            let recs: Vec<EstimateRecord> = (1..=5).map(|r| exact_record(r as f64, 0.7 * (-0.6 * r as f64).exp())).collect();
            let refs: Vec<&EstimateRecord> = recs.iter().collect();
            let f = fit_exponent(&refs, &FitWindow { bootstrap: 0, ..Default::default() }).map_err(|e| e.to_string())?;
            if (f.xi_hat - 0.6).abs() < 1e-12 && f.max_abs_residual < 1e-12 {
                Ok(format!("xi_hat = {}", f.xi_hat))
            } else {
                Err(format!("xi_hat = {}, residual {}", f.xi_hat, f.max_abs_residual))
            }
        }),
        check("clustering_equals_brute_force", || {
            for s in 0..20 {
                let soup = sample_soup(&soup_config(2.0, seed.wrapping_add(s))).map_err(|e| e.to_string())?;
                let traces: Vec<SampledPath> = soup.loops.into_iter().take(50).map(|l| l.trace).collect();
                let tol = Tolerance::uniform(0.03);
                let idx = ClusterIndex::from_paths(traces.clone(), tol);
                let refs: Vec<&SampledPath> = traces.iter().collect();
                if idx.cluster_of != brute_force_clusters(&refs, &tol) {
                    return Err(format!("partition differs for soup {s}"));
                }
            }
            Ok("20 soups agree".into())
        }),
        check("min_distance_equals_brute_force", || {
            let mut rng = RngStream::new(seed, 77).rng();
            for i in 0..50 {
                let mut path = || {
                    let a = rng.in_ball(Point3::ORIGIN, 1.0);
                    let b = rng.in_ball(Point3::ORIGIN, 1.0);
                    sample_bridge(a, b, 0.1, 0.01, &mut rng)
                };
                let p = path().map_err(|e| e.to_string())?;
                let q = path().map_err(|e| e.to_string())?;
                if polyline_min_distance(&p, &q) != polyline_min_distance_brute(&p, &q) {
                    return Err(format!("pair {i} differs"));
                }
            }
            Ok("50 pairs agree".into())
        }),
        check("rooted_mass_matches_quadrature", || {
            let (a, v, t0, t1) = (0.3, 2.0, 0.01, 0.5);
            let closed = rooted_mass(a, v, t0, t1).map_err(|e| e.to_string())?;
            // Simpson's rule in u = ln t on the density a v (2 pi)^{-3/2} t^{-3/2}.
            let n = 20_000;
            let (u0, u1) = (f64::ln(t0), f64::ln(t1));
            let hstep = (u1 - u0) / n as f64;
            let g = |u: f64| a * v * (2.0 * std::f64::consts::PI).powf(-1.5) * (-1.5 * u).exp();
            let mut s = g(u0) + g(u1);
            for i in 1..n {
                s += g(u0 + i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let quad = s * hstep / 3.0;
            let rel = (closed - quad).abs() / quad;
            if rel < 1e-6 {
                Ok(format!("relative error {rel:.2e}"))
            } else {
                Err(format!("relative error {rel:.2e}"))
            }
        }),
        check("two_crossing_path", || {
            let ann = CubeAnnulus::new(n_cube(8, [4, 4, 4]), 4, 8);
            let c = ann.cube.center;
            let far = c + Point3::new(0.1, 0.0, 0.0);
            let p = polyline(&[far, c, far + Point3::new(0.0, 0.01, 0.0)]);
            let cr = locate_crossings(&p, &ann, 1e-9).map_err(|e| e.to_string())?;
            if cr.crossings == 2 && cr.s1 < cr.t1 && cr.t1 <= cr.v && cr.v <= cr.s2 && cr.s2 < cr.t2 {
                Ok("2 crossings, ordered".into())
            } else {
                Err(format!("{} crossings", cr.crossings))
            }
        }),
        check("dimension_exact_on_power_counts", || {
            let ns = [8, 9, 10];
            let counts = vec![ns.iter().map(|&n| (1.4 * n as f64).exp2()).collect::<Vec<f64>>()];
            let d = dimension_estimate(&counts, &ns, 10, seed).map_err(|e| e.to_string())?;
            if (d.dim_hat - 1.4).abs() < 1e-12 {
                Ok(format!("dim = {}", d.dim_hat))
            } else {
                Err(format!("dim = {}", d.dim_hat))
            }
        }),
        check("loop_roots_stay_in_region", || {
            let cfg = soup_config(1.0, seed);
            let soup = sample_soup(&cfg).map_err(|e| e.to_string())?;
            let b = Ball::centered(0.5 * 3f64.sqrt() + 1e-12);
            if soup.loops.iter().all(|l| b.contains(l.root)) {
                Ok(format!("{} roots", soup.len()))
            } else {
                Err("root outside region".into())
            }
        }),
    ]
}
