//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured figures. Run with `cargo test --test acceptance -- --nocapture`
//! to see them.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use uav_rsma::channel::LinkState;
use uav_rsma::geometry::{
    active_los_constraints, directed_distance, is_los, raycast_blocked, Point3, BOUNDARY_TOL,
};
use uav_rsma::harness::{compare_baselines_on, run_scenario, trace_csv, COMPARE_SCHEMES};
use uav_rsma::rsma::{
    compute_rates, rate_decomposition, served_sets_and_order, sinr_common, sinr_private,
    Association, GainTable, NetworkState, PowerAllocation,
};
use uav_rsma::scenario::{
    bundled_default, bundled_variant, initialize, Scenario, BUNDLED_COMPARE_SEEDS,
};
use uav_rsma::solver::{
    gain_table, run_bcd, Scheme, SolverConfig,
};
use uav_rsma::surrogate::{build_expansion, position_surrogate, power_assoc_surrogate, Multipliers};

fn bundled_scenarios() -> Vec<Scenario> {
    vec![bundled_variant(9), bundled_default(), bundled_variant(18)]
}

// ---------------------------------------------------------------------------
// Criterion 1: LoS soundness and far-field exactness of the plane test.
// ---------------------------------------------------------------------------
#[test]
fn criterion_1_los_soundness() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xC1);
    let mut pairs = 0usize;
    let mut far_field_pairs = 0usize;

    for scenario in bundled_scenarios() {
        let setup = scenario.setup().unwrap();
        let a = scenario.area_bounds;
        for (k, set) in setup.blockage.iter().enumerate() {
            let user = setup.users[k];
            let far = setup
                .buildings
                .iter()
                .map(|b| b.max_vertex_distance(user.x, user.y))
                .fold(0.0, f64::max);
            for _ in 0..2700 {
                let p = Point3::new(
                    rng.gen_range(a.x_min..a.x_max),
                    rng.gen_range(a.y_min..a.y_max),
                    rng.gen_range(0.0..500.0),
                );
                pairs += 1;
                let blocked = raycast_blocked(user, p, &setup.buildings);
                let los = is_los(set, p);
                // Soundness: the plane test never reports LoS for a truly
                // blocked point.
                assert!(
                    !(blocked && los),
                    "plane test reported LoS for blocked pair (user {k}, {p:?})"
                );
                // Far-field exactness, excluding boundary samples.
                let horizontal =
                    ((p.x - user.x).powi(2) + (p.y - user.y).powi(2)).sqrt();
                if horizontal > far {
                    let near_boundary = set
                        .planes_by_building
                        .iter()
                        .flatten()
                        .any(|pl| directed_distance(pl, p).abs() < BOUNDARY_TOL);
                    if !near_boundary {
                        far_field_pairs += 1;
                        assert_eq!(
                            los, !blocked,
                            "far-field disagreement (user {k}, {p:?})"
                        );
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(pairs >= 100_000, "only {pairs} pairs sampled");
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "took {:.2}s (limit 10s)",
        elapsed.as_secs_f64()
    );
    println!(
        "criterion 1: PASS - {pairs} pairs, 0 soundness violations, {far_field_pairs} far-field pairs exact, {:.2}s",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: rate identities and the duplicate-formula oracle.
// ---------------------------------------------------------------------------

/// Straight-line re-implementation of the rate chain, independent of the
/// library code paths.
fn oracle_rates(state: &NetworkState, gains: &GainTable) -> Vec<f64> {
    let num_users = state.num_users();
    let num_uavs = state.num_uavs();
    let sigma2 = gains.noise_power;
    let served: Vec<Vec<usize>> = (0..num_uavs)
        .map(|m| {
            let mut list: Vec<usize> = (0..num_users)
                .filter(|&k| state.assoc.values[k][m] >= 0.999)
                .collect();
            list.sort_by(|&a, &b| {
                gains.gains[b][m]
                    .partial_cmp(&gains.gains[a][m])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            list
        })
        .collect();
    let uav_power: Vec<f64> = (0..num_uavs)
        .map(|m| {
            state.power.common[m]
                + served[m].iter().map(|&j| state.power.private[j][m]).sum::<f64>()
        })
        .collect();
    let mut totals = vec![0.0; num_users];
    for m in 0..num_uavs {
        if served[m].is_empty() {
            continue;
        }
        let mut min_c = f64::INFINITY;
        for &k in &served[m] {
            let g = gains.gains[k][m];
            let own: f64 = served[m].iter().map(|&j| state.power.private[j][m]).sum();
            let interf: f64 = (0..num_uavs)
                .filter(|&mp| mp != m)
                .map(|mp| uav_power[mp] * gains.gains[k][mp])
                .sum();
            let sinr = state.power.common[m] * g / (own * g + interf + sigma2);
            min_c = min_c.min((1.0 + sinr).log2());
        }
        for (pos, &k) in served[m].iter().enumerate() {
            let g = gains.gains[k][m];
            let residual: f64 =
                served[m][pos + 1..].iter().map(|&j| state.power.private[j][m]).sum();
            let interf: f64 = (0..num_uavs)
                .filter(|&mp| mp != m)
                .map(|mp| uav_power[mp] * gains.gains[k][mp])
                .sum();
            let sinr = state.power.private[k][m] * g / (residual * g + interf + sigma2);
            totals[k] += min_c / served[m].len() as f64 + (1.0 + sinr).log2();
        }
    }
    totals
}

fn random_binary_state(rng: &mut StdRng, num_users: usize, num_uavs: usize) -> (NetworkState, GainTable) {
    let positions = (0..num_uavs)
        .map(|_| {
            Point3::new(
                rng.gen_range(0.0..800.0),
                rng.gen_range(0.0..800.0),
                rng.gen_range(101.0..500.0),
            )
        })
        .collect();
    let servers: Vec<usize> = (0..num_users).map(|_| rng.gen_range(0..num_uavs)).collect();
    let values = servers
        .iter()
        .map(|&m| {
            let mut row = vec![0.0; num_uavs];
            row[m] = 1.0;
            row
        })
        .collect();
    let mut power = PowerAllocation::zeros(num_users, num_uavs);
    for m in 0..num_uavs {
        power.common[m] = rng.gen_range(0.0..0.4);
    }
    for (k, &m) in servers.iter().enumerate() {
        power.private[k][m] = rng.gen_range(0.001..0.15);
    }
    let gains: Vec<Vec<f64>> = (0..num_users)
        .map(|_| (0..num_uavs).map(|_| 10f64.powf(rng.gen_range(-13.0..-8.0))).collect())
        .collect();
    let states = gains
        .iter()
        .map(|row| row.iter().map(|_| LinkState::Los).collect())
        .collect();
    (
        NetworkState {
            positions,
            power,
            assoc: Association { values, capacities: vec![num_users; num_uavs] },
        },
        GainTable { gains, states, noise_power: 2e-14 },
    )
}

#[test]
fn criterion_2_rate_identities() {
    let mut rng = StdRng::seed_from_u64(0xC2);
    let mut worst_identity = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let num_users = rng.gen_range(2..8);
        let num_uavs = rng.gen_range(1..4);
        let (state, gains) = random_binary_state(&mut rng, num_users, num_uavs);
        let served = served_sets_and_order(&state, &gains).unwrap();
        let dec = rate_decomposition(&state, &gains).unwrap();

        for m in 0..num_uavs {
            let Some(ks) = dec.weakest[m] else { continue };
            let direct = state.assoc.values[ks][m]
                * (1.0 + sinr_common(ks, m, &state, &gains, &served)).log2();
            let recon = dec.r_hat[ks][m] - dec.r_bar_c[ks][m];
            worst_identity = worst_identity.max((direct - recon).abs());
            for &k in &served[m] {
                let direct = state.assoc.values[k][m]
                    * (1.0 + sinr_private(k, m, &state, &gains, &served)).log2();
                let recon = dec.r_hat_post[k][m] - dec.r_bar_p[k][m];
                worst_identity = worst_identity.max((direct - recon).abs());
            }
        }

        let rates = compute_rates(&state, &gains).unwrap();
        let oracle = oracle_rates(&state, &gains);
        for k in 0..num_users {
            worst_oracle = worst_oracle.max((rates.per_user_total[k] - oracle[k]).abs());
        }
    }
    assert!(worst_identity <= 1e-9, "identity error {worst_identity:.3e}");
    assert!(worst_oracle <= 1e-9, "oracle error {worst_oracle:.3e}");
    println!(
        "criterion 2: PASS - 1000 states, max identity error {worst_identity:.2e}, max oracle error {worst_oracle:.2e}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: surrogate anchoring, gradients and the P-minorant.
// ---------------------------------------------------------------------------
#[test]
fn criterion_3_surrogate_suite() {
    let scenario = bundled_default();
    let setup = scenario.setup().unwrap();
    let init = initialize(&scenario, &setup).unwrap();
    let num_users = init.num_users();
    let num_uavs = init.num_uavs();
    let lambda: Multipliers = vec![vec![scenario.solver.lambda0; num_uavs]; num_users];

    // Expansion points along the optimization path: the initial state and
    // the states after 1, 3 and 6 iterations.
    let mut states = vec![init.clone()];
    for t_max in [1usize, 3, 6] {
        let config = SolverConfig { t_max, ..scenario.solver.clone() };
        let out = run_bcd(&setup, &init, &config, Scheme::Rsma).unwrap();
        states.push(out.final_state);
    }

    let mut rng = StdRng::seed_from_u64(0xC3);
    let mut worst_anchor = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut minorant_samples = 0usize;
    let h = 1e-3;

    for state in &states {
        let gains = gain_table(&setup, &state.positions, false).unwrap();
        let exp =
            build_expansion(state, &setup.users, &gains, &setup.params, &lambda, true).unwrap();
        let anchors = exp.frozen_rates();
        let psur = position_surrogate(&exp);
        let pasur = power_assoc_surrogate(&exp);

        for k in 0..num_users {
            // Anchoring of both surrogates at the expansion point.
            let pv = psur.user_value(k, &state.positions);
            worst_anchor = worst_anchor.max((pv - anchors[k]).abs());
            let wv = pasur.user_value(k, &state.power, &state.assoc);
            worst_anchor = worst_anchor.max((wv - anchors[k]).abs());

            // Position-surrogate gradient vs central finite differences of
            // the frozen-state rate.
            let grad = psur.user_gradient(k, &state.positions);
            for m in 0..num_uavs {
                for axis in 0..3 {
                    let mut plus = state.positions.clone();
                    let mut minus = state.positions.clone();
                    let (p, q) = (&mut plus[m], &mut minus[m]);
                    match axis {
                        0 => {
                            p.x += h;
                            q.x -= h;
                        }
                        1 => {
                            p.y += h;
                            q.y -= h;
                        }
                        _ => {
                            p.z += h;
                            q.z -= h;
                        }
                    }
                    let fd = (exp.pinned_rates_at_positions(&plus)[k]
                        - exp.pinned_rates_at_positions(&minus)[k])
                        / (2.0 * h);
                    let an = match axis {
                        0 => grad[m].x,
                        1 => grad[m].y,
                        _ => grad[m].z,
                    };
                    let scale = an.abs().max(fd.abs()).max(1e-9);
                    worst_grad = worst_grad.max((fd - an).abs() / scale);
                }
            }
        }

        // Minorant in P over the feasible simplex.
        for _ in 0..250 {
            let mut power = PowerAllocation::zeros(num_users, num_uavs);
            for m in 0..num_uavs {
                let served: Vec<usize> =
                    (0..num_users).filter(|&k| exp.server[k] == Some(m)).collect();
                let mut parts: Vec<f64> =
                    (0..served.len() + 1).map(|_| rng.gen_range(1e-6..1.0)).collect();
                let total: f64 = parts.iter().sum();
                let scale = rng.gen_range(0.05..1.0) * setup.p_max / total;
                parts.iter_mut().for_each(|p| *p *= scale);
                power.common[m] = parts[0];
                for (i, &k) in served.iter().enumerate() {
                    power.private[k][m] = parts[i + 1];
                }
            }
            let truth = exp.frozen_rates_with_power(&power);
            for k in 0..num_users {
                let v = pasur.user_value(k, &power, &state.assoc);
                assert!(
                    v <= truth[k] + 1e-9,
                    "minorant violated: user {k}, surrogate {v} > rate {}",
                    truth[k]
                );
            }
            minorant_samples += 1;
        }
    }

    assert!(worst_anchor <= 1e-9, "anchoring error {worst_anchor:.3e}");
    assert!(worst_grad <= 1e-4, "gradient error {worst_grad:.3e}");
    println!(
        "criterion 3: PASS - {} expansion points, anchor error {worst_anchor:.2e}, gradient error {worst_grad:.2e}, {minorant_samples} minorant samples with 0 violations",
        states.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: backend certificates on the smoke instances.
// ---------------------------------------------------------------------------
#[test]
fn criterion_4_subproblem_optimality() {
    use uav_rsma::backend::{
        solve, Affine, Constraint, ConvexExpr, ConvexSubproblem, NegLogTerm, QuadTerm,
    };

    // maximize −‖x‖² over the unit ball.
    let mut epi = ConvexExpr::affine(vec![(0, 1.0)], 0.0);
    epi.quadratic.push(QuadTerm { var: 1, weight: 1.0, shift: 0.0 });
    epi.quadratic.push(QuadTerm { var: 2, weight: 1.0, shift: 0.0 });
    let mut ball = ConvexExpr { constant: -1.0, ..Default::default() };
    ball.quadratic.push(QuadTerm { var: 1, weight: 1.0, shift: 0.0 });
    ball.quadratic.push(QuadTerm { var: 2, weight: 1.0, shift: 0.0 });
    let p1 = ConvexSubproblem {
        num_vars: 3,
        objective: vec![1.0, 0.0, 0.0],
        constraints: vec![
            Constraint { expr: epi, label: "epigraph".into() },
            Constraint { expr: ball, label: "ball".into() },
        ],
        equalities: vec![],
        start: vec![-1.0, 0.3, 0.2],
    };
    let s1 = solve(&p1, 1e-8).unwrap();
    assert!(s1.gap_bound <= 1e-6, "certificate {:.3e}", s1.gap_bound);
    assert!(s1.objective.abs() < 1e-6);

    // maximize log2(1+p) with 0 ≤ p ≤ 3.
    let mut epi = ConvexExpr::affine(vec![(0, 1.0)], 0.0);
    epi.neg_logs.push(NegLogTerm {
        weight: 1.0 / std::f64::consts::LN_2,
        affine: Affine { coeffs: vec![(1, 1.0)], constant: 1.0 },
    });
    let p2 = ConvexSubproblem {
        num_vars: 2,
        objective: vec![1.0, 0.0],
        constraints: vec![
            Constraint { expr: epi, label: "epigraph".into() },
            Constraint { expr: ConvexExpr::affine(vec![(1, -1.0)], 0.0), label: "lo".into() },
            Constraint { expr: ConvexExpr::affine(vec![(1, 1.0)], -3.0), label: "hi".into() },
        ],
        equalities: vec![],
        start: vec![0.0, 1.0],
    };
    let s2 = solve(&p2, 1e-8).unwrap();
    assert!(s2.gap_bound <= 1e-6, "certificate {:.3e}", s2.gap_bound);
    assert!((s2.objective - 2.0).abs() < 1e-6);

    // 2-variable epigraph max-min of two concave quadratics vs grid search.
    let f1 = |x: f64, y: f64| 4.0 - (x - 1.0).powi(2) - 2.0 * y * y;
    let f2 = |x: f64, y: f64| 3.0 - (x + 1.0).powi(2) - (y - 0.5).powi(2);
    let mut row1 = ConvexExpr::affine(vec![(0, 1.0)], -4.0);
    row1.quadratic.push(QuadTerm { var: 1, weight: 1.0, shift: 1.0 });
    row1.quadratic.push(QuadTerm { var: 2, weight: 2.0, shift: 0.0 });
    let mut row2 = ConvexExpr::affine(vec![(0, 1.0)], -3.0);
    row2.quadratic.push(QuadTerm { var: 1, weight: 1.0, shift: -1.0 });
    row2.quadratic.push(QuadTerm { var: 2, weight: 1.0, shift: 0.5 });
    let mut constraints = vec![
        Constraint { expr: row1, label: "f1".into() },
        Constraint { expr: row2, label: "f2".into() },
    ];
    for var in [1usize, 2] {
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(var, -1.0)], -2.0),
            label: format!("v{var} lower"),
        });
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(var, 1.0)], -2.0),
            label: format!("v{var} upper"),
        });
    }
    let p3 = ConvexSubproblem {
        num_vars: 3,
        objective: vec![1.0, 0.0, 0.0],
        constraints,
        equalities: vec![],
        start: vec![-10.0, 0.0, 0.0],
    };
    let s3 = solve(&p3, 1e-8).unwrap();
    assert!(s3.gap_bound <= 1e-6, "certificate {:.3e}", s3.gap_bound);

    let mut center = (0.0, 0.0);
    let mut half = 2.0;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..3 {
        let steps = 800;
        let mut arg = center;
        for i in 0..=steps {
            let x = (center.0 - half + 2.0 * half * i as f64 / steps as f64).clamp(-2.0, 2.0);
            for j in 0..=steps {
                let y =
                    (center.1 - half + 2.0 * half * j as f64 / steps as f64).clamp(-2.0, 2.0);
                let v = f1(x, y).min(f2(x, y));
                if v > best {
                    best = v;
                    arg = (x, y);
                }
            }
        }
        center = arg;
        half = 4.0 * half / 800.0;
    }
    assert!(
        (s3.objective - best).abs() < 1e-4,
        "epigraph {} vs grid {best}",
        s3.objective
    );
    println!(
        "criterion 4: PASS - certificates {:.1e}/{:.1e}/{:.1e}, grid-search deviation {:.2e}",
        s1.gap_bound,
        s2.gap_bound,
        s3.gap_bound,
        (s3.objective - best).abs()
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: end-to-end improvement on the bundled default scenario.
// ---------------------------------------------------------------------------
#[test]
fn criterion_5_end_to_end_improvement() {
    let started = Instant::now();
    let scenario = bundled_default();
    assert_eq!(scenario.uav_count, 3);
    assert_eq!(scenario.users.len(), 12);
    assert_eq!(scenario.solver.t_max, 15);

    let result = run_scenario(&scenario, Scheme::Rsma).unwrap();
    let initial = result.trace[0].min_rate_true;
    let final_rate = result.true_rates.min_rate;
    assert!(
        final_rate >= 3.0 * initial,
        "final {final_rate:.4} < 3x initial {initial:.4}"
    );

    // Final association is exactly binary.
    for row in &result.final_state.assoc.values {
        assert!(row.iter().all(|&c| c == 0.0 || c == 1.0));
    }

    // Every served link is LoS and the emitted half-spaces hold with margin.
    let setup = scenario.setup().unwrap();
    for m in 0..scenario.uav_count {
        let x = result.final_state.positions[m];
        let served: Vec<usize> = (0..scenario.users.len())
            .filter(|&k| result.final_state.assoc.values[k][m] == 1.0)
            .collect();
        for &k in &served {
            assert!(is_los(&setup.blockage[k], x), "served link ({k},{m}) is NLoS");
        }
        for half in
            active_los_constraints(&setup.blockage, &served, x, scenario.solver.los_margin)
        {
            assert!(
                half.slack(x) >= -1e-6,
                "LoS constraint slack {:.3e} under margin",
                half.slack(x)
            );
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {:.1}s", elapsed.as_secs_f64());
    println!(
        "criterion 5: PASS - min rate {initial:.4} -> {final_rate:.4} bit/s/Hz ({:.1}x) in {:.1}s, binary C, LoS constraints hold",
        final_rate / initial,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: scheme ordering over the bundled seeds.
// ---------------------------------------------------------------------------
#[test]
fn criterion_6_scheme_ordering() {
    let base = bundled_default();
    let dir = tempfile::tempdir().unwrap();
    let report = compare_baselines_on(&base, &BUNDLED_COMPARE_SEEDS, dir.path()).unwrap();
    for cell in &report.cells {
        assert!(
            cell.result.is_ok(),
            "{} seed {} failed: {:?}",
            cell.scheme.name(),
            cell.seed,
            cell.result
        );
    }

    let rate = |scheme: Scheme, seed: u64| report.min_rate(scheme, seed).unwrap();
    let mut noma_wins = 0usize;
    let mut baseline_wins = [0usize; 3];
    for &seed in &BUNDLED_COMPARE_SEEDS {
        let rsma = rate(Scheme::Rsma, seed);
        assert!(
            rsma >= rate(Scheme::Noma, seed),
            "seed {seed}: rsma {rsma:.4} < noma {:.4}",
            rate(Scheme::Noma, seed)
        );
        noma_wins += 1;
        for (i, baseline) in
            [Scheme::FixedPosition, Scheme::FixedPower, Scheme::NoGeometry].iter().enumerate()
        {
            if rsma >= rate(*baseline, seed) {
                baseline_wins[i] += 1;
            }
        }
    }
    for (i, baseline) in
        [Scheme::FixedPosition, Scheme::FixedPower, Scheme::NoGeometry].iter().enumerate()
    {
        assert!(
            baseline_wins[i] >= 4,
            "rsma beats {} on only {}/5 seeds",
            baseline.name(),
            baseline_wins[i]
        );
    }
    println!(
        "criterion 6: PASS - rsma >= noma on {noma_wins}/5 seeds; beats fixed-position {}/5, fixed-power {}/5, no-geometry {}/5",
        baseline_wins[0], baseline_wins[1], baseline_wins[2]
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: byte-identical reruns.
// ---------------------------------------------------------------------------
#[test]
fn criterion_7_determinism() {
    let scenario = bundled_default();

    let r1 = run_scenario(&scenario, Scheme::Rsma).unwrap();
    let r2 = run_scenario(&scenario, Scheme::Rsma).unwrap();
    let t1 = trace_csv(&r1.trace);
    let t2 = trace_csv(&r2.trace);
    assert_eq!(t1.as_bytes(), t2.as_bytes(), "trace bytes differ between reruns");
    let j1 = uav_rsma::harness::result_json(&r1, &scenario.solver);
    let j2 = uav_rsma::harness::result_json(&r2, &scenario.solver);
    assert_eq!(j1.as_bytes(), j2.as_bytes(), "result bytes differ between reruns");

    // A comparison rerun produces byte-identical files too.
    let mut small = bundled_variant(9);
    small.solver.t_max = 3;
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    compare_baselines_on(&small, &[2], dir1.path()).unwrap();
    compare_baselines_on(&small, &[2], dir2.path()).unwrap();
    let mut compared = 0usize;
    for scheme in COMPARE_SCHEMES {
        for file in ["trace.csv", "result.json"] {
            let sub = format!("{}-seed2/{file}", scheme.name());
            let a = std::fs::read(dir1.path().join(&sub)).unwrap();
            let b = std::fs::read(dir2.path().join(&sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between reruns");
            compared += 1;
        }
    }
    let a = std::fs::read(dir1.path().join("comparison.csv")).unwrap();
    let b = std::fs::read(dir2.path().join("comparison.csv")).unwrap();
    assert_eq!(a, b);
    println!(
        "criterion 7: PASS - run and comparison reruns byte-identical ({} files + comparison.csv)",
        compared
    );
}
