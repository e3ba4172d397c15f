use super::*;
use crate::market::DiffusionSpec;
use crate::smoothing::{f_tilde_eps, h_tilde_eps, Epsilon, SmoothingMode};

fn ramp(eps: f64, c: f64) -> Smoother {
    Smoother::new(Epsilon::new(eps, c).unwrap(), SmoothingMode::Ramp)
}

fn deterministic(params: ModelParams, market: MarketPath, charge_nodes: usize, eps: f64, mesh: ControlMesh) -> HjbProblem {
    HjbProblem {
        grid: StateGrid::charge_only(&params, charge_nodes, None).unwrap(),
        crit: RegimeCriterion::none(),
        time: market.grid,
        market: MarketModel::Deterministic(market),
        smoother: ramp(eps, params.capacity),
        params,
        mesh,
        terminal_adjust: None,
    }
}

/// Exhaustive search over control sequences under the smoothed discrete
/// dynamics, one battery.
fn enumerate(problem: &HjbProblem, controls: &[f64], y0: f64) -> f64 {
    let MarketModel::Deterministic(m) = &problem.market else {
        unreachable!()
    };
    let dt = problem.time.dt();
    let c = problem.params.capacity;
    fn go(p: &HjbProblem, m: &MarketPath, controls: &[f64], j: usize, y: f64, dt: f64, c: f64) -> f64 {
        if j == p.time.steps() {
            return m.price[j] * y;
        }
        let hi = p.params.rate_upper(m.production[j]);
        let mut best = f64::NEG_INFINITY;
        for &u in controls.iter().filter(|u| **u >= -p.params.max_rate && **u <= hi) {
            let r = h_tilde_eps(&[y], &[y], &[u], &p.smoother.eps, m.production[j], m.price[j], &p.crit);
            let next = (y + f_tilde_eps(y, u, &p.smoother.eps) * dt).clamp(0.0, c);
            best = best.max(dt * r + go(p, m, controls, j + 1, next, dt, c));
        }
        best
    }
    go(problem, m, controls, 0, y0, dt, c)
}

#[test]
fn constant_price_closed_form_and_zero_policy() {
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let market = MarketPath::constant(time, 0.5, 2.0).unwrap();
    let problem = deterministic(params, market, 21, 0.1, ControlMesh::default());
    let sol = solve(&problem).unwrap();
    for (node, y) in problem.grid.axes()[0].nodes().into_iter().enumerate() {
        if y < 0.1 {
            continue;
        }
        let exact = 0.5 * 2.0 * 1.0 + 2.0 * y;
        let got = sol.value.values[0][node];
        assert!((got - exact).abs() <= 1e-3 * exact, "y={y}: {got} vs {exact}");
        for j in 0..20 {
            assert_eq!(sol.policy.at(j, node), &[0.0]);
        }
    }
    assert!(hamiltonian_residual(&problem, &sol.value, 5).unwrap() < 1e-9);
}

#[test]
fn rising_price_holds_charge() {
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let price: Vec<f64> = time.times().iter().map(|t| (0.5 * t).exp()).collect();
    let market = MarketPath::from_series(time, vec![0.0; 5], price.clone()).unwrap();
    let problem = deterministic(params, market, 5, 0.1, ControlMesh::Explicit(vec![-1.0, 0.0, 1.0]));
    let sol = solve(&problem).unwrap();
    let s_t = price[4];
    for (node, y) in problem.grid.axes()[0].nodes().into_iter().enumerate() {
        let oracle = enumerate(&problem, &[-1.0, 0.0, 1.0], y);
        assert!((sol.value.values[0][node] - oracle).abs() < 1e-10);
        assert!((oracle - y * s_t).abs() < 1e-12);
        if y > 0.0 && y < 1.0 {
            assert_eq!(sol.policy.at(0, node), &[0.0]);
        }
    }
}

#[test]
fn terminal_layer_is_exact() {
    let params = ModelParams::new(2.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let market = MarketPath::constant(time, 1.0, 3.0).unwrap();
    let problem = deterministic(params, market, 11, 0.2, ControlMesh::default());
    let sol = solve(&problem).unwrap();
    for (node, y) in problem.grid.axes()[0].nodes().into_iter().enumerate() {
        assert!((sol.value.terminal()[node] - 3.0 * y).abs() <= 1e-12);
    }
}

#[test]
fn unstable_step_is_rejected() {
    let params = ModelParams::new(1.0, 10.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let market = MarketPath::constant(time, 1.0, 1.0).unwrap();
    let problem = deterministic(params, market, 11, 0.1, ControlMesh::default());
    match solve(&problem) {
        Err(Error::Unstable { dt, required }) => {
            assert_eq!(dt, 0.1);
            assert!((required - 0.01).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn averaging_criterion_needs_average_axis() {
    let params = ModelParams::new(1.0, 1.0, 1, 1.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let market = MarketPath::constant(time, 1.0, 1.0).unwrap();
    let mut problem = deterministic(params, market, 11, 0.1, ControlMesh::default());
    problem.crit = RegimeCriterion::with_gamma(1.0);
    assert!(matches!(solve(&problem), Err(Error::InvalidParameter(_))));
    problem.grid = StateGrid::charge_only(&problem.params, 11, Some(11)).unwrap();
    let sol = solve(&problem).unwrap();
    assert!(sol.value.values[0].iter().all(|v| v.is_finite()));
}

#[test]
fn policy_stays_in_control_box() {
    let params = ModelParams::new(1.0, 2.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let prod: Vec<f64> = (0..41).map(|j| 0.6 + 0.5 * (j as f64 * 0.3).sin()).collect();
    let price: Vec<f64> = (0..41).map(|j| 1.5 + (j as f64 * 0.2).cos()).collect();
    let market = MarketPath::from_series(time, prod.clone(), price).unwrap();
    let problem = deterministic(params, market, 21, 0.1, ControlMesh::default());
    let sol = solve(&problem).unwrap();
    for j in 0..40 {
        let hi = prod[j].min(2.0);
        for node in 0..problem.grid.len() {
            let u = sol.policy.at(j, node)[0];
            assert!(u >= -2.0 && u <= hi, "j={j} u={u} hi={hi}");
        }
    }
}

#[test]
fn raising_terminal_value_never_lowers_j() {
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let price: Vec<f64> = (0..21).map(|j| 1.0 + 0.5 * (j as f64).sin()).collect();
    let market = MarketPath::from_series(time, vec![0.4; 21], price).unwrap();
    let base = deterministic(params, market, 21, 0.1, ControlMesh::default());
    let mut bumped = base.clone();
    bumped.terminal_adjust = Some(Arc::new(|x: &[f64]| 0.01 + 0.05 * x[0] * x[0]));
    let a = solve(&base).unwrap();
    let b = solve(&bumped).unwrap();
    for (la, lb) in a.value.values.iter().zip(&b.value.values) {
        for (va, vb) in la.iter().zip(lb) {
            assert!(vb >= va);
        }
    }
}

#[test]
fn tie_break_prefers_small_then_negative() {
    let mut b = Best::new(1);
    b.offer(1.0, &[0.5]);
    b.offer(1.0, &[-0.5]);
    assert_eq!(b.u, vec![-0.5]);
    b.offer(1.0, &[0.0]);
    assert_eq!(b.u, vec![0.0]);
    b.offer(1.1, &[1.0]);
    assert_eq!(b.u, vec![1.0]);
}

#[test]
fn explicit_factor_step_tracks_gbm_expectation() {
    // Martingale price, constant production: every control has the same
    // expected payoff p S0 T + S0 y.
    let vol = 0.3;
    let spec = DiffusionSpec::log_gbm(vec![0.0, 0.0], vec![0.0, -0.5 * vol * vol], vec![0.0, vol]).unwrap();
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let grid = StateGrid::for_diffusion(&spec, &time, &params, 41, 0.5, 11, None, 500, 7).unwrap();
    let problem = HjbProblem {
        grid,
        crit: RegimeCriterion::none(),
        time,
        market: MarketModel::Diffusion(spec),
        smoother: ramp(0.1, 1.0),
        params,
        mesh: ControlMesh::Uniform { points: 5, refine: false },
        terminal_adjust: None,
    };
    let sol = solve(&problem).unwrap();
    let j = sol.value.value_at(&[0.0, 0.0, 0.5], 0);
    let exact = 1.0 + 0.5;
    assert!((j - exact).abs() < 2e-2 * exact, "{j}");
}

#[test]
fn eps_refine_constant_price() {
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let market = MarketPath::constant(time, 0.5, 2.0).unwrap();
    let problem = deterministic(params, market, 21, 0.1, ControlMesh::default());
    let r = eps_refine(&problem, &[0.2, 0.1, 0.05], &[0.5]).unwrap();
    assert!((r.extrapolated - 2.0).abs() < 1e-3 * 2.0);
    assert!(eps_refine(&problem, &[0.1, 0.2, 0.05], &[0.5]).is_err());
}

#[test]
fn csv_exports_have_headers() {
    let params = ModelParams::new(1.0, 1.0, 1, 0.0).unwrap();
    let time = TimeGrid::new(0.0, 1.0, 2).unwrap();
    let market = MarketPath::constant(time, 0.5, 2.0).unwrap();
    let problem = deterministic(params, market, 3, 0.1, ControlMesh::Explicit(vec![-0.5, 0.0, 0.5]));
    let sol = solve(&problem).unwrap();
    let mut v = Vec::new();
    sol.value.write_csv(&mut v).unwrap();
    let v = String::from_utf8(v).unwrap();
    assert!(v.starts_with("t,y_1,J\n"));
    assert_eq!(v.lines().count(), 1 + 3 * 3);
    let mut p = Vec::new();
    extract_policy(&sol).write_csv(&mut p).unwrap();
    let p = String::from_utf8(p).unwrap();
    assert!(p.starts_with("t,y_1,u_1\n"));
    assert_eq!(p.lines().count(), 1 + 2 * 3);
}
