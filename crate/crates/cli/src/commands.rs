use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use bess_core::dual::{duality_gap, minimize_over_v, upper_bound, write_bounds_csv, BoundResult, MartingaleSpec};
use bess_core::hjb::{
    eps_refine, evaluate_policy, solve, HjbProblem, MarketModel, Policy, PolicyEvaluation, Solution, StateGrid,
    ThresholdPolicy, ZeroPolicy,
};
use bess_core::market::{simulate, DiffusionSpec, PathEnsemble};
use bess_core::regime::run_experiment;
use bess_core::smoothing::{Epsilon, Smoother};

use crate::config::{PolicyKind, RunConfig};
use crate::error::CliError;

type Outcome = Result<String, CliError>;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = out.join(name);
    let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn spec(cfg: &RunConfig) -> Result<DiffusionSpec, CliError> {
    cfg.market.build().map_err(CliError::from_setup)
}

fn ensemble(cfg: &RunConfig, command: &str) -> Result<PathEnsemble, CliError> {
    let seed = cfg.require_seed(command)?;
    Ok(simulate(&spec(cfg)?, &cfg.time_grid()?, cfg.simulation.n_paths, seed)?)
}

/// The grid problem plus the state point `(x0, y0, ybar0)` at `t0`.
fn problem(cfg: &RunConfig, command: &str) -> Result<(HjbProblem, Vec<f64>), CliError> {
    let spec = spec(cfg)?;
    let params = cfg.params()?;
    let time = cfg.time_grid()?;
    let y0 = cfg.initial_charge()?;
    let s = &cfg.solver;
    let averages = cfg.average_nodes();
    let (market, grid, mut point) = if spec.is_deterministic() {
        let path = simulate(&spec, &time, 1, 0)?.paths.remove(0);
        let grid = StateGrid::charge_only(&params, s.charge_nodes, averages).map_err(CliError::from_setup)?;
        (MarketModel::Deterministic(path), grid, vec![])
    } else {
        let seed = cfg.require_seed(command)?;
        let grid = StateGrid::for_diffusion(
            &spec,
            &time,
            &params,
            s.factor_nodes,
            s.min_half_width,
            s.charge_nodes,
            averages,
            s.pilot_paths,
            seed,
        )
        .map_err(CliError::from_setup)?;
        let x0 = spec.x0.clone();
        (MarketModel::Diffusion(spec), grid, x0)
    };
    point.extend(&y0);
    if averages.is_some() {
        point.extend(&y0);
    }
    let eps = Epsilon::new(s.eps, params.capacity).map_err(CliError::from_setup)?;
    let problem = HjbProblem {
        params,
        crit: cfg.criterion()?,
        market,
        time,
        grid,
        smoother: Smoother::new(eps, s.smoothing),
        mesh: s.mesh.clone(),
        terminal_adjust: None,
    };
    Ok((problem, point))
}

fn solved(cfg: &RunConfig, command: &str) -> Result<(Solution, f64), CliError> {
    let (problem, point) = problem(cfg, command)?;
    let sol = solve(&problem)?;
    let j0 = sol.value.value_at(&point, 0);
    Ok((sol, j0))
}

fn warn_concavity(cfg: &RunConfig) {
    if cfg.model.phi_hat {
        eprintln!(
            "warning: phi_hat makes the running reward non-concave in the control; \
             the bound is still an upper bound but need not be tight"
        );
    }
}

pub fn simulate_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let ens = ensemble(cfg, "simulate")?;
    let mut w = create(out, "ensemble.csv")?;
    ens.write_csv(&mut w)?;
    w.flush()?;
    Ok(format!("simulated {} paths over {} steps", ens.len(), ens.grid.steps()))
}

pub fn solve_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let (problem, point) = problem(cfg, "solve")?;
    let sol = solve(&problem)?;
    let j0 = sol.value.value_at(&point, 0);
    let mut w = create(out, "value.csv")?;
    sol.value.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(out, "policy.csv")?;
    sol.policy.write_csv(&mut w)?;
    w.flush()?;
    let mut summary = format!("J(x0, t0) = {j0}");
    if !cfg.solver.eps_schedule.is_empty() {
        let r = eps_refine(&problem, &cfg.solver.eps_schedule, &point)?;
        let mut w = create(out, "refine.csv")?;
        writeln!(w, "eps,J,difference")?;
        for (i, (e, v)) in r.eps.iter().zip(&r.values).enumerate() {
            let d = if i == 0 { String::new() } else { r.differences[i - 1].to_string() };
            writeln!(w, "{e},{v},{d}")?;
        }
        w.flush()?;
        for warning in &r.warnings {
            eprintln!("warning: {warning}");
        }
        summary.push_str(&format!(", extrapolated to eps -> 0: {}", r.extrapolated));
    }
    Ok(summary)
}

fn bound(cfg: &RunConfig, ens: &PathEnsemble, out: &Path) -> Result<BoundResult, CliError> {
    let family = cfg.family();
    let y0 = cfg.initial_charge()?;
    let crit = cfg.criterion()?;
    let params = cfg.params()?;
    let settings = cfg.pathwise();
    let result = match &cfg.dual.search {
        Some(budget) => {
            let r = minimize_over_v(&family, ens, &y0, &crit, &params, &settings, budget)?;
            let mut w = create(out, "search.csv")?;
            writeln!(w, "theta,mean")?;
            for (theta, mean) in &r.trace {
                let theta: Vec<String> = theta.iter().map(f64::to_string).collect();
                writeln!(w, "{},{mean}", theta.join(";"))?;
            }
            w.flush()?;
            if r.exhausted {
                eprintln!("warning: search budget exhausted before the step size converged");
            }
            r.bound
        }
        None => {
            let spec = if cfg.dual.theta.is_empty() {
                family.zero()
            } else {
                MartingaleSpec::new(family, cfg.dual.theta.clone()).map_err(CliError::from_setup)?
            };
            upper_bound(&spec, ens, &y0, &crit, &params, &settings)?
        }
    };
    if result.unconverged > 0 {
        eprintln!(
            "warning: {} of {} pathwise problems hit the iteration cap",
            result.unconverged,
            ens.len()
        );
    }
    let mut w = create(out, "bounds.csv")?;
    write_bounds_csv(&mut w, &[("run".to_string(), result.clone())])?;
    w.flush()?;
    Ok(result)
}

pub fn bound_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    warn_concavity(cfg);
    let ens = ensemble(cfg, "bound")?;
    let b = bound(cfg, &ens, out)?;
    Ok(format!("upper bound {} (se {}), k = {}", b.estimate.mean, b.estimate.se, b.k))
}

fn evaluation(cfg: &RunConfig, ens: &PathEnsemble, out: &Path, command: &str) -> Result<PolicyEvaluation, CliError> {
    let params = cfg.params()?;
    let y0 = cfg.initial_charge()?;
    let s0 = ens.paths.first().map_or(1.0, |p| p.price[0]);
    let threshold = ThresholdPolicy {
        batteries: params.batteries,
        max_rate: params.max_rate,
        charge_below: cfg.policy.charge_below.unwrap_or(0.9 * s0),
        discharge_above: cfg.policy.discharge_above.unwrap_or(1.1 * s0),
    };
    let zero = ZeroPolicy {
        batteries: params.batteries,
    };
    let feedback;
    let policy: &dyn Policy = match cfg.policy.kind {
        PolicyKind::Zero => &zero,
        PolicyKind::Threshold => &threshold,
        PolicyKind::Hjb => {
            feedback = solved(cfg, command)?.0.policy;
            &feedback
        }
    };
    let eval = evaluate_policy(policy, ens, &y0, &cfg.criterion()?, &params)?;
    if eval.excursions > 0 {
        eprintln!("warning: {} policy lookups fell outside the state grid", eval.excursions);
    }
    let mut w = create(out, "evaluation.csv")?;
    writeln!(w, "path,payoff")?;
    for (i, v) in eval.payoffs.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(eval)
}

pub fn evaluate_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let ens = ensemble(cfg, "evaluate")?;
    let e = evaluation(cfg, &ens, out, "evaluate")?;
    Ok(format!("policy value {} (se {})", e.estimate.mean, e.estimate.se))
}

pub fn gap_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    warn_concavity(cfg);
    let ens = ensemble(cfg, "gap")?;
    let lower = evaluation(cfg, &ens, out, "gap")?.estimate;
    let upper = bound(cfg, &ens, out)?.estimate;
    let gap = duality_gap(&lower, &upper);
    let mut w = create(out, "gap.csv")?;
    writeln!(w, "lower,lower_se,upper,upper_se,gap,se,violated")?;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        lower.mean, lower.se, upper.mean, upper.se, gap.gap, gap.se, gap.violated
    )?;
    w.flush()?;
    if gap.violated {
        return Err(CliError::Invariant(format!(
            "upper bound {} below policy value {} by more than 3 SE ({})",
            upper.mean, lower.mean, gap.se
        )));
    }
    Ok(format!("lower {} upper {} gap {} (se {})", lower.mean, upper.mean, gap.gap, gap.se))
}

pub fn regime_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let r = run_experiment(&cfg.regime)?;
    let mut w = create(out, "best_path.csv")?;
    r.write_csv(&mut w, &cfg.regime)?;
    w.flush()?;
    Ok(r.summary())
}
