mod common;

use common::{configs_dir, desk};
use tumor_control::cli::run_command;
use tumor_control::optimize::{cost_and_gradient, projected_gradient_descent, stationarity_residual, variational_inequality_check};
use tumor_control::verify::{check_gradient, random_control};
use tumor_control::*;

fn sample(p: &ControlProblem, seed: u64) -> ControlTrajectory {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    random_control(&p.grid, p.nt(), p.params.t_final, &mut rng, 0.5)
}

#[test]
fn repeated_runs_are_bit_identical() {
    let p = desk();
    let u = sample(&p, 3);
    let (a, b) = (cost_and_gradient(&u, &p).unwrap(), cost_and_gradient(&u, &p).unwrap());
    assert_eq!(a.cost.total().to_bits(), b.cost.total().to_bits());
    assert_eq!(a.gradient, b.gradient);
    assert_eq!(a.trajectory.states, b.trajectory.states);
    assert!(check_gradient(&p, 9, 2).same_outcome(&check_gradient(&p, 9, 2)));
}

#[test]
fn cli_outputs_are_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg = configs_dir().join("desk.cfg").display().to_string();
    for d in &dirs {
        let out = d.path().display().to_string();
        assert_eq!(run_command(["tumor-control", "simulate", "--config", &cfg, "--out", &out]), 0);
        assert_eq!(run_command(["tumor-control", "adjoint", "--config", &cfg, "--out", &out]), 0);
    }
    for f in ["timeseries.csv", "state_final.chcf", "gradient.chcf", "terminal_discrete.chcf"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn scaling_all_weights_scales_cost_and_gradient() {
    let p = desk();
    let u = sample(&p, 5);
    let base = cost_and_gradient(&u, &p).unwrap();
    for c in [0.25, 3.0] {
        let scaled = cost_and_gradient(&u, &p.with_cost(p.cost.scale_all(c))).unwrap();
        let rel = (scaled.cost.total() - c * base.cost.total()).abs() / (c * base.cost.total());
        assert!(rel <= 1e-14, "cost {rel:e}");
        let diff = scaled.gradient.axpy(-c, &base.gradient).unwrap().norm() / (c * base.gradient.norm());
        assert!(diff <= 1e-12, "gradient {diff:e}");
    }
}

#[test]
fn optimizer_minimiser_is_invariant_under_weight_scaling() {
    let p = desk();
    let opts = OptimizerOptions {
        tol_stat: 1e-10,
        ..Default::default()
    };
    let u0 = p.bounds.midpoint(&p.grid, p.nt(), p.dt());
    let a = projected_gradient_descent(&u0, &p, &opts).unwrap();
    let scaled = p.with_cost(p.cost.scale_all(4.0));
    let opts_scaled = OptimizerOptions {
        tol_stat: 4e-10,
        ..opts
    };
    let b = projected_gradient_descent(&u0, &scaled, &opts_scaled).unwrap();
    let dist = a.u_opt.axpy(-1.0, &b.u_opt).unwrap().norm() / a.u_opt.norm();
    assert!(dist <= 1e-6, "minimisers differ by {dist:e}");
    assert!((b.final_cost() / a.final_cost() - 4.0).abs() <= 1e-8);
}

#[test]
fn desk_optimum_satisfies_variational_inequality() {
    let p = desk();
    let u0 = p.bounds.midpoint(&p.grid, p.nt(), p.dt());
    let res = projected_gradient_descent(&u0, &p, &OptimizerOptions::default()).unwrap();
    assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    let g = cost_and_gradient(&res.u_opt, &p).unwrap().gradient;
    assert!(stationarity_residual(&res.u_opt, &g, &p.bounds).unwrap() <= 1e-8);
    let vi = variational_inequality_check(&res.u_opt, &p, 8, 1).unwrap();
    assert!(vi.min_pairing >= -1e-8 * g.norm() * 2.0, "{}", vi.min_pairing);
    assert!(vi.forms_agree(), "gap {:e}", vi.max_relative_gap);
}

#[test]
fn box_constrained_optimum_sits_on_active_bounds() {
    // a tight box makes the constraint active where the gradient pushes outward
    let mut p = desk();
    p.bounds = ControlBox::constant(-0.05, 0.05);
    let u0 = p.bounds.midpoint(&p.grid, p.nt(), p.dt());
    let res = projected_gradient_descent(&u0, &p, &OptimizerOptions::default()).unwrap();
    let g = cost_and_gradient(&res.u_opt, &p).unwrap().gradient;
    let mut active = 0;
    for n in 1..=p.nt() {
        for (&u, &gi) in res.u_opt.at(n).values().iter().zip(g.at(n).values()) {
            if (u - 0.05).abs() < 1e-12 {
                assert!(gi <= 1e-8, "upper bound active with gradient {gi}");
                active += 1;
            } else if (u + 0.05).abs() < 1e-12 {
                assert!(gi >= -1e-8, "lower bound active with gradient {gi}");
                active += 1;
            } else {
                assert!(gi.abs() <= 1e-6, "interior point with gradient {gi}");
            }
        }
    }
    assert!(active > 0);
}
