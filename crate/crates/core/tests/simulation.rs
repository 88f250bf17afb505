use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use switchgrad::limits::{default_tol_switch, extract_regions};
use switchgrad::simulate::{
    estimate_value, jump_cost, martingale_check, sample_paths, step_chain, FeedbackPolicy,
    IdlePolicy, SimConfig, StartPoint,
};
use switchgrad::{
    Coefficients, Domain, GeneratorMatrix, Grid, NpdsConfig, NpdsSolver, ProblemSpec,
    StateCoefficients, SwitchingCosts,
};

fn one_state(st: StateCoefficients) -> ProblemSpec {
    ProblemSpec::new(
        Domain::interval(-1.0, 1.0).unwrap(),
        vec![GeneratorMatrix::zero(1)],
        Coefficients::new(vec![st]),
        SwitchingCosts::single_regime(),
    )
    .unwrap()
}

#[test]
fn frozen_state_cost_is_an_exact_geometric_sum() {
    let (h, c, dt, horizon) = (1.5, 0.8, 0.01, 2.0);
    let spec = one_state(StateCoefficients::constant(1, 0.0, 0.0, c, h, 1.0, 0.0));
    let mut cfg = SimConfig::new(dt, 128, 1, 0.1);
    cfg.horizon_cap = Some(horizon);
    let est = estimate_value(&spec, &IdlePolicy, &cfg, &StartPoint::new(&[0.0], 0, 0)).unwrap();
    // Left-endpoint rule: h·dt·Σ_{k<T/dt} e^{−c k dt}.
    let steps = (horizon / dt).round();
    let q = (-c * dt).exp();
    let exact = h * dt * (1.0 - q.powf(steps)) / (1.0 - q);
    assert_eq!(est.std_error, 0.0);
    assert!(
        (est.mean - exact).abs() <= 1e-12 * exact,
        "{} vs {exact}",
        est.mean
    );
    assert_eq!(est.censored_fraction, 1.0);
}

fn linear_policy() -> (ProblemSpec, FeedbackPolicy) {
    let mut st = StateCoefficients::constant(1, 0.5, 0.0, 1.0, 1.0, 1000.0, 0.0);
    st.b = vec![switchgrad::Expr::parse("0.3*x").unwrap()];
    let spec = one_state(st);
    let grid = Grid::uniform(&spec.domain, 201).unwrap();
    let solver = NpdsSolver::new(&spec, &grid).unwrap();
    let (u, _) = solver.solve(&NpdsConfig::new(0.1, 0.1)).unwrap();
    let regions = extract_regions(&solver.disc, &u, default_tol_switch(&u));
    let policy = FeedbackPolicy::new(&solver.disc, &u, &regions, 0.1).unwrap();
    (spec, policy)
}

#[test]
fn martingale_at_time_zero_is_the_identity() {
    let (spec, policy) = linear_policy();
    let cfg = SimConfig::new(1e-3, 200, 3, 0.1);
    let rep = martingale_check(&spec, &policy, &cfg, &StartPoint::new(&[0.25], 0, 0), 0.0).unwrap();
    assert_eq!(rep.z_score, 0.0);
    assert_eq!(rep.estimate.mean, rep.target);
    assert!(rep.passed);
}

#[test]
fn feynman_kac_value_is_recovered() {
    let (spec, policy) = linear_policy();
    let start = StartPoint::new(&[0.25], 0, 0);
    let cfg = SimConfig::new(2e-4, 20_000, 8, 0.1);
    let est = estimate_value(&spec, &policy, &cfg, &start).unwrap();
    let target = policy.value(&start.x, 0, 0);
    assert_eq!(est.max_rate, 0.0);
    assert!(
        (est.mean - target).abs() <= 3.0 * est.std_error + 2e-3,
        "{} vs {target}",
        est.mean
    );
}

#[test]
fn seeds_give_reproducible_and_consistent_estimates() {
    let (spec, policy) = linear_policy();
    let start = StartPoint::new(&[-0.4], 0, 0);
    let cfg = SimConfig::new(1e-3, 3000, 11, 0.1);
    let a = estimate_value(&spec, &policy, &cfg, &start).unwrap();
    let b = estimate_value(&spec, &policy, &cfg, &start).unwrap();
    assert_eq!(a, b);
    let other = SimConfig { seed: 12, ..cfg };
    let c = estimate_value(&spec, &policy, &other, &start).unwrap();
    assert_ne!(a.mean, c.mean);
    assert!((a.mean - c.mean).abs() <= 4.0 * a.std_error.hypot(c.std_error));
}

#[test]
fn constrained_paths_respect_the_rate_cap_and_stay_nonnegative() {
    // Tight gradient bound so the push is active near the boundary.
    let spec = ProblemSpec::new(
        Domain::interval(-1.0, 1.0).unwrap(),
        vec![
            GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            GeneratorMatrix::from_rows(&[vec![-3.0, 3.0], vec![1.0, -1.0]]).unwrap(),
        ],
        Coefficients::new(vec![
            StateCoefficients::constant(1, 1.0, 0.0, 1.0, 2.0, 0.4, 0.0),
            StateCoefficients::constant(1, 1.0, 0.0, 1.0, 0.0, 0.4, 0.0),
        ]),
        SwitchingCosts::new(&[vec![0.0, 0.05], vec![0.05, 0.0]]).unwrap(),
    )
    .unwrap();
    let grid = Grid::uniform(&spec.domain, 101).unwrap();
    let solver = NpdsSolver::new(&spec, &grid).unwrap();
    let (u, _) = solver.solve(&NpdsConfig::new(0.05, 0.05)).unwrap();
    let regions = extract_regions(&solver.disc, &u, default_tol_switch(&u));
    let policy = FeedbackPolicy::new(&solver.disc, &u, &regions, 0.05).unwrap();
    let cfg = SimConfig::new(1e-3, 400, 21, 0.05);
    let paths = sample_paths(&spec, &policy, &cfg, &StartPoint::new(&[0.6], 0, 0), 400).unwrap();
    assert!(paths.iter().any(|p| p.max_rate > 0.0));
    for p in &paths {
        assert!(p.max_rate <= policy.zeta_cap() * (1.0 + 1e-12));
        assert!(p.running_cost >= 0.0 && p.switching_cost >= 0.0 && p.terminal_cost >= 0.0);
        assert!(p.discount >= 0.0);
        let times: Vec<f64> = p
            .events
            .iter()
            .map(|e| match *e {
                switchgrad::simulate::PathEvent::Switch { time, .. }
                | switchgrad::simulate::PathEvent::Jump { time, .. } => time,
            })
            .collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.switches <= 2 * (p.events.len() + 1));
    }
}

/// `exp(Qt)` by scaling and squaring of the Taylor series.
fn expm(q: &[[f64; 3]; 3], t: f64) -> [[f64; 3]; 3] {
    let s = 10;
    let scale = t / f64::from(1u32 << s);
    let mut term = [[0.0; 3]; 3];
    let mut sum = [[0.0; 3]; 3];
    for i in 0..3 {
        term[i][i] = 1.0;
        sum[i][i] = 1.0;
    }
    for k in 1..20 {
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = (0..3).map(|l| term[i][l] * q[l][j] * scale).sum::<f64>() / k as f64;
            }
        }
        term = next;
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        let mut sq = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                sq[i][j] = (0..3).map(|l| sum[i][l] * sum[l][j]).sum();
            }
        }
        sum = sq;
    }
    sum
}

#[test]
fn three_state_marginals_match_the_matrix_exponential() {
    let q = [[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]];
    let gen =
        GeneratorMatrix::from_rows(&q.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let samples = 100_000;
    for (t, substeps) in [(0.4, 1), (1.1, 8)] {
        let p = expm(&q, t);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 3];
        for _ in 0..samples {
            let mut s = 1;
            for _ in 0..substeps {
                s = step_chain(&gen, s, t / substeps as f64, &mut rng);
            }
            counts[s] += 1;
        }
        for k in 0..3 {
            let pk = p[1][k];
            let sigma = (pk * (1.0 - pk) / samples as f64).sqrt();
            let freq = counts[k] as f64 / samples as f64;
            assert!(
                (freq - pk).abs() <= 3.0 * sigma,
                "t={t} k={k}: {freq} vs {pk}"
            );
        }
    }
}

#[test]
fn jump_cost_integrates_a_varying_bound() {
    let (x0, dz) = (0.7, 0.5);
    let c = jump_cost(|x| 0.6 + 0.2 * x[0].sin(), &[x0, 0.0], &[1.0, 0.0], dz);
    let exact = 0.6 * dz + 0.2 * ((x0 - dz).cos() - x0.cos());
    assert!((c - exact).abs() < 1e-14);
}
