#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use tumor_control::*;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The desk-scale problem, built without the config layer.
pub fn desk() -> ControlProblem {
    let grid = Arc::new(Grid::line(64, 1.0).unwrap());
    let params = ModelParams {
        alpha: 0.5,
        beta: 0.5,
        potential: Potential::logarithmic(2.0),
        prolif: Proliferation::Sigmoid { p0: 1.0, steepness: 2.0 },
        t_final: 0.25,
        nt: 50,
    };
    let cost = CostSpec {
        b0: 0.01,
        b1: 1.0,
        b2: 1.0,
        b3: 1.0,
        b4: 1.0,
        phi_q: Profile::Constant(-0.2),
        phi_omega: Profile::Constant(-0.2),
        sigma_q: Profile::Constant(0.6),
        sigma_omega: Profile::Constant(0.6),
        ..Default::default()
    };
    let initial = StateTriple {
        mu: Field::zeros(&grid),
        phi: Field::from_fn(&grid, |x| 0.3 * (std::f64::consts::PI * x[0]).cos()),
        sigma: Field::constant(&grid, 0.5),
    };
    ControlProblem::new(grid, params, cost, ControlBox::constant(-1.0, 1.0), initial, SolverOptions::default())
}

/// A smaller variant for property tests.
pub fn small(n: usize, nt: usize) -> ControlProblem {
    let mut p = desk();
    let grid = Arc::new(Grid::line(n, 1.0).unwrap());
    p.initial = StateTriple {
        mu: Field::zeros(&grid),
        phi: Field::from_fn(&grid, |x| 0.3 * (std::f64::consts::PI * x[0]).cos()),
        sigma: Field::constant(&grid, 0.5),
    };
    p.grid = grid;
    p.params.nt = nt;
    p.params.t_final = 0.05 * nt as f64 / 10.0;
    p
}

/// Solves `a_i x_{i-1} + b_i x_i + c_i x_{i+1} = d_i`.
pub fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// One implicit heat step `(I/dt − Δ) x = rhs` with the mirrored-ghost
/// Neumann Laplacian on a uniform 1D grid of spacing `h`.
pub fn heat_step(rhs: &[f64], dt: f64, h: f64) -> Vec<f64> {
    let n = rhs.len();
    let k = 1.0 / (h * h);
    let a: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { -k }).collect();
    let c: Vec<f64> = (0..n).map(|i| if i + 1 == n { 0.0 } else { -k }).collect();
    let b: Vec<f64> = (0..n)
        .map(|i| 1.0 / dt + if i == 0 || i + 1 == n { k } else { 2.0 * k })
        .collect();
    thomas(&a, &b, &c, rhs)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
