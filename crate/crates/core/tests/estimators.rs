use bls_core::cluster::{enlarge, ClusterIndex};
use bls_core::estimators::*;
use bls_core::geometry::{LocalScale, Point3};
use bls_core::path::{sample_bm_levels, SampledPath};
use bls_core::rng::{RngStream, stream_id};
use bls_core::stats::{chi_square_uniform, ks_statistic, kolmogorov_sf, variance};
use proptest::prelude::*;

fn config() -> ExperimentConfig {
    ExperimentConfig {
        alphas: vec![0.0, 0.1, 0.3],
        ks: vec![1, 2, 3],
        lambdas: vec![0.5, 1.0, 2.0],
        r_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        outer_n: 30,
        inner_m: 8,
        delta: 0.02,
        h: 3.0 * 0.02f64.sqrt(),
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1e4,
        seed: 17,
    }
}

fn cell(cfg: &ExperimentConfig, a: usize, k: usize, r: usize) -> usize {
    (a * cfg.ks.len() + k) * cfg.r_grid.len() + r
}

#[test]
fn coupled_engine_matches_direct_route() {
    let cfg = config();
    let mut compared = 0;
    for rep in 0..12 {
        let c = run_coupled(&cfg, rep).unwrap();
        if c.failed {
            continue;
        }
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            for (ki, &k) in cfg.ks.iter().enumerate() {
                for ri in 0..cfg.r_grid.len() {
                    let env = sample_environment(&cfg, alpha, k, ri, rep).unwrap();
                    assert!(!env.failed);
                    let flags = env.avoid_flags(&cfg);
                    let cl = cell(&cfg, ai, ki, ri);
                    for (i, &f) in flags.iter().enumerate() {
                        assert_eq!(f, c.avoids(i, cl), "replica {rep} alpha {alpha} k {k} r {ri} inner {i}");
                    }
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 100);
}

#[test]
fn coupled_z_is_monotone_in_alpha_r_and_k() {
    let cfg = config();
    let recs = run_replicas(&cfg, 0..200).unwrap();
    let mut violations = 0;
    for rec in recs.iter().filter(|r| !r.failed) {
        let z = |a, k, r| {
            let [c1, c2] = rec.counts[cell(&cfg, a, k, r)];
            c1 + c2
        };
        for a in 0..cfg.alphas.len() {
            for k in 0..cfg.ks.len() {
                for r in 0..cfg.r_grid.len() {
                    let here = z(a, k, r);
                    if a + 1 < cfg.alphas.len() && z(a + 1, k, r) > here {
                        violations += 1;
                    }
                    if k + 1 < cfg.ks.len() && z(a, k + 1, r) > here {
                        violations += 1;
                    }
                    if r + 1 < cfg.r_grid.len() && z(a, k, r + 1) > here {
                        violations += 1;
                    }
                }
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn radius_zero_gives_one_and_alpha_zero_has_no_soup() {
    let cfg = config();
    let s = estimate_p(&ExperimentConfig { outer_n: 10, ..cfg.clone() }).unwrap();
    for r in s.records.iter().filter(|r| r.r == 0.0) {
        assert_eq!(r.p_hat, 1.0);
        assert_eq!(r.stderr, 0.0);
    }
    let env = sample_environment(&cfg, 0.0, 2, 3, 1).unwrap();
    assert!(env.soup.is_empty());
    let idx = ClusterIndex::build(&env.soup, cfg.tolerance());
    let e = enlarge(&env.obstacles, &idx);
    assert!(e.attached_loops.is_empty());
    assert_eq!(e.base, env.obstacles);
    let env0 = sample_environment(&cfg, 0.3, 2, 0, 1).unwrap();
    assert!(env0.soup.is_empty());
    assert!(env0.obstacles.iter().all(|p| p.len() == 1));
}

#[test]
fn p_hat_nonincreasing_in_lambda_on_shared_samples() {
    let cfg = config();
    let s = estimate_p(&cfg).unwrap();
    for r in &cfg.r_grid {
        for a in &cfg.alphas {
            for k in &cfg.ks {
                let v: Vec<f64> = cfg
                    .lambdas
                    .iter()
                    .map(|&l| s.at(*a, *k, l, *r).unwrap().raw_p_hat)
                    .collect();
                assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{v:?}");
            }
        }
    }
}

#[test]
fn two_obstacle_starts_are_independent_uniform() {
    let cfg = ExperimentConfig {
        alphas: vec![0.0],
        ks: vec![2],
        lambdas: vec![1.0],
        r_grid: vec![0.0],
        inner_m: 1,
        ..config()
    };
    let n = 10_000u64;
    let mut dots = Vec::new();
    let mut octants = vec![0u64; 8];
    for rep in 0..n {
        let env = sample_environment(&cfg, 0.0, 2, 0, rep).unwrap();
        let a = env.obstacles[0].first();
        let b = env.obstacles[1].first();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        dots.push(a.dot(b));
        let o = (a.x > 0.0) as usize + 2 * (a.y > 0.0) as usize + 4 * (a.z > 0.0) as usize;
        octants[o] += 1;
    }
    // For independent uniform points on the sphere, <a, b> is uniform on [-1, 1].
    let d = ks_statistic(&dots, |x| ((x + 1.0) / 2.0).clamp(0.0, 1.0));
    assert!(kolmogorov_sf(d * (n as f64).sqrt()) > 0.001, "KS {d}");
    assert!(chi_square_uniform(&octants).1 > 0.001);
}

fn shell(radius: f64, spacing: f64) -> Vec<SampledPath> {
    let scale = LocalScale::origin();
    let rings = (std::f64::consts::PI * radius / spacing).ceil() as usize;
    (0..=rings)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / rings as f64;
            let rr = radius * theta.sin();
            let z = radius * theta.cos();
            let m = ((2.0 * std::f64::consts::PI * rr / spacing).ceil() as usize).max(1);
            let points: Vec<Point3> = (0..=m)
                .map(|j| {
                    let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                    Point3::new(rr * phi.cos(), rr * phi.sin(), z)
                })
                .collect();
            SampledPath {
                times: (0..points.len()).map(|t| t as f64).collect(),
                points,
                resolution: 0.02,
                scale,
            }
        })
        .collect()
}

#[test]
fn enclosing_shell_forces_intersection() {
    let cfg = config();
    let mut env = sample_environment(&cfg, 0.0, 1, 2, 4).unwrap();
    env.obstacles = shell(2.0, 0.2);
    assert_eq!(estimate_z(&cfg, &env), 0.0);
}

fn inner_paths(cfg: &ExperimentConfig, levels: &[f64], n: usize, tag: u64) -> Vec<SampledPath> {
    (0..n)
        .map(|i| {
            let mut rng = RngStream::new(cfg.seed, stream_id(&[tag, i as u64])).rng();
            let start = rng.unit_vector();
            sample_bm_levels(start, levels, &cfg.walk_options(), &mut rng).unwrap().path
        })
        .collect()
}

#[test]
fn doubling_inner_m_halves_conditional_variance() {
    let cfg = config();
    let mut env = sample_environment(&cfg, 0.1, 1, 2, 0).unwrap();
    let batches = 300;
    let m = 8;
    let pool = inner_paths(&cfg, &cfg.r_grid[..=2], batches * 3 * m, 555);
    env.inner = pool.clone();
    let flags = env.avoid_flags(&cfg);
    let z = |chunk: &[bool]| chunk.iter().filter(|&&b| b).count() as f64 / chunk.len() as f64;
    let (small, large) = flags.split_at(batches * m);
    let zs: Vec<f64> = small.chunks(m).map(z).collect();
    let zl: Vec<f64> = large.chunks(2 * m).map(z).collect();
    let p = z(&flags);
    assert!(p > 0.1 && p < 0.9, "avoidance probability {p} too extreme for the check");
    let ratio = variance(&zs) / variance(&zl);
    assert!((1.5..2.6).contains(&ratio), "variance ratio {ratio}");
    // Binomial oracle for the small batches.
    let expect = p * (1.0 - p) / m as f64;
    assert!((variance(&zs) / expect - 1.0).abs() < 0.3);
}

#[test]
fn splitting_agrees_with_direct_at_alpha_zero() {
    let direct = estimate_p(&ExperimentConfig {
        alphas: vec![0.0],
        ks: vec![1],
        lambdas: vec![1.0],
        r_grid: vec![1.0, 2.0, 3.0],
        outer_n: 300,
        inner_m: 10,
        ..config()
    })
    .unwrap();
    let d = direct.at(0.0, 1, 1.0, 3.0).unwrap();
    let split = estimate_p_splitting(&SplittingConfig {
        alpha: 0.0,
        k: 1,
        levels: vec![1.0, 2.0, 3.0],
        population: 200,
        runs: 6,
        delta: 0.02,
        h: 3.0 * 0.02f64.sqrt(),
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1e4,
        seed: 5,
    })
    .unwrap();
    assert!(split.extinctions.is_empty());
    let gap = (split.p_hat - d.p_hat).abs();
    let se = (split.stderr.powi(2) + d.stderr.powi(2)).sqrt();
    assert!(gap <= 3.0 * se, "split {} +- {}, direct {} +- {}", split.p_hat, split.stderr, d.p_hat, d.stderr);
    let rec = split.to_record(&SplittingConfig {
        alpha: 0.0,
        k: 1,
        levels: vec![3.0],
        population: 1,
        runs: 1,
        delta: 0.02,
        h: 0.4,
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1.0,
        seed: 5,
    });
    assert_eq!(rec.estimator, "splitting");
}

#[test]
fn stderr_scales_as_inverse_root_n() {
    let base = ExperimentConfig {
        alphas: vec![0.1],
        ks: vec![1],
        lambdas: vec![1.0],
        r_grid: vec![1.0],
        inner_m: 4,
        ..config()
    };
    let a = estimate_p(&ExperimentConfig { outer_n: 100, ..base.clone() }).unwrap();
    let b = estimate_p(&ExperimentConfig { outer_n: 400, ..base }).unwrap();
    let ratio = b.records[0].stderr / a.records[0].stderr;
    assert!((0.38..0.65).contains(&ratio), "ratio {ratio}");
}

#[test]
fn jsonl_export_has_required_fields() {
    let cfg = ExperimentConfig { outer_n: 3, ..config() };
    let s = estimate_p(&cfg).unwrap();
    let mut buf = Vec::new();
    s.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in [
        "alpha", "k", "lambda", "r", "p_hat", "stderr", "outer_n", "inner_m", "delta", "h", "seed",
        "estimator", "extrapolated",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(text.lines().count(), s.records.len());
}

#[test]
fn separation_quality_is_nonincreasing_in_eps() {
    let st = separation_stats(&SeparationConfig {
        alpha: 0.1,
        r_values: vec![1.0, 1.5],
        eps_grid: vec![1e-6, 0.01, 0.05, 0.1, 0.3],
        aperture: 0.1,
        outer_n: 40,
        inner_m: 6,
        delta: 0.02,
        h: 3.0 * 0.02f64.sqrt(),
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1e4,
        seed: 3,
    })
    .unwrap();
    for row in &st.rows {
        assert!(row.avoiding_pairs > 0);
        assert!(row.q_eps.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(row.q_eps[0], 1.0);
        assert!(row.low_confidence);
        assert!(row.frequency >= 0.0 && row.frequency <= 1.0);
    }
}

#[test]
fn wide_cones_make_separation_visible() {
    let st = separation_stats(&SeparationConfig {
        alpha: 0.0,
        r_values: vec![1.0],
        eps_grid: vec![0.1],
        aperture: 1.9,
        outer_n: 60,
        inner_m: 6,
        delta: 0.02,
        h: 3.0 * 0.02f64.sqrt(),
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1e4,
        seed: 3,
    })
    .unwrap();
    assert!(st.rows[0].separated_pairs > 0);
    assert!(st.min_ci_low > 0.0);
}

#[test]
fn cone_decay_is_monotone_and_trivial_at_alpha_zero() {
    let cfg = ConeDecayConfig {
        eps_grid: vec![0.5, 0.25, 0.125],
        inner_aperture: 1.4,
        outer_aperture: 1.6,
        samples: 600,
        alpha: 0.0,
        soups: 4,
        delta: 0.02,
        h: 3.0 * 0.02f64.sqrt(),
        t_min: 0.045,
        min_loop_steps: 4,
        walk_budget: 1e4,
        seed: 8,
    };
    let rep = cone_confinement_decay(&cfg).unwrap();
    let p: Vec<f64> = rep.rows.iter().map(|r| r.path_probability).collect();
    assert!(p[0] >= p[1] - 0.03 && p[1] >= p[2] - 0.03, "{p:?}");
    assert!(rep.rows.iter().all(|r| r.cluster_probability == 1.0));
    assert!(p[2] > 0.0);
}

#[test]
fn path_confinement_decays_polynomially() {
    let cfg = ConeDecayConfig {
        eps_grid: vec![0.25, 0.125, 0.0625, 0.03125],
        inner_aperture: 1.4,
        outer_aperture: 1.6,
        samples: 10_000,
        alpha: 0.0,
        soups: 0,
        delta: 0.01,
        h: 0.3,
        t_min: 0.0225,
        min_loop_steps: 4,
        walk_budget: 1e5,
        seed: 8,
    };
    let rep = cone_confinement_decay(&cfg).unwrap();
    assert!(rep.zero_path_cells.is_empty());
    let fit = rep.path_fit.unwrap();
    assert!(fit.r_squared > 0.9, "{fit:?}");
    let (c1, c2) = rep.path_c1_c2().unwrap();
    assert!(c1 > 0.0 && c2 > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn estimates_are_probabilities(seed in 0u64..1000, alpha in 0.0f64..0.4, inner in 1usize..5) {
        let cfg = ExperimentConfig {
            alphas: vec![alpha],
            ks: vec![1],
            lambdas: vec![0.5, 1.0, 3.0],
            r_grid: vec![0.0, 1.0],
            outer_n: 6,
            inner_m: inner,
            seed,
            ..config()
        };
        let s = estimate_p(&cfg).unwrap();
        for r in &s.records {
            prop_assert!((0.0..=1.0).contains(&r.p_hat));
            prop_assert!(r.stderr >= 0.0);
            if r.lambda == 1.0 {
                prop_assert_eq!(r.p_hat, r.raw_p_hat);
            }
        }
    }
}
