//! Acceptance gate on the shipped desk configuration. Prints one line per
//! criterion and exits nonzero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use tumor_control::config::parse_config;
use tumor_control::verify::*;
use tumor_control::*;

const SEED: u64 = 42;

struct Criterion {
    id: usize,
    name: &'static str,
    reports: Vec<CheckReport>,
    limit: Option<Duration>,
}

impl Criterion {
    fn new(id: usize, name: &'static str, reports: Vec<CheckReport>, limit_s: Option<u64>) -> Self {
        Criterion {
            id,
            name,
            reports,
            limit: limit_s.map(Duration::from_secs),
        }
    }

    fn runtime(&self) -> Duration {
        self.reports.iter().map(|r| r.runtime).sum()
    }

    fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed) && self.limit.is_none_or(|l| self.runtime() <= l)
    }

    fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let limit = self.limit.map_or(String::new(), |l| format!(" limit_s={}", l.as_secs()));
        let mut line = format!(
            "criterion {:>2} {:<24} {verdict} runtime_s={:.2}{limit}",
            self.id,
            self.name,
            self.runtime().as_secs_f64()
        );
        for r in &self.reports {
            let shown: Vec<String> = r
                .values
                .iter()
                .filter(|m| m.bound.is_some())
                .map(|m| format!("{}={:.3e}", m.key, m.value))
                .collect();
            line.push_str(&format!(" | {}: {}", r.name, shown.join(" ")));
            if let Some(e) = &r.error {
                line.push_str(&format!(" error=\"{e}\""));
            }
        }
        line
    }
}

fn desk() -> ControlProblem {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    parse_config(&path).and_then(|s| s.build()).expect("shipped desk config").problem
}

fn main() -> ExitCode {
    let p = desk();
    let u_dagger = default_manufactured_control(&p.grid, p.nt(), p.params.t_final);
    let manufactured = manufactured_problem(&p, &u_dagger).expect("manufactured targets");
    let criteria = [
        Criterion::new(1, "gradient_check", vec![check_gradient(&p, SEED, CHECK_PAIRS)], Some(120)),
        Criterion::new(2, "duality_identity", vec![check_duality(&p, SEED, CHECK_PAIRS)], Some(60)),
        Criterion::new(3, "frechet_order", vec![check_frechet_order(&p, SEED)], Some(180)),
        Criterion::new(4, "linearized_proxies", vec![check_linearity(&p, SEED)], None),
        Criterion::new(5, "separation", vec![check_separation(&p, SEED)], None),
        Criterion::new(6, "mass_balance", vec![check_mass_balance(&p, SEED)], None),
        Criterion::new(7, "ode_oracle", vec![check_ode_oracle(&p)], None),
        Criterion::new(8, "continuous_dependence", vec![check_lipschitz(&p, SEED)], None),
        Criterion::new(
            9,
            "optimizer_manufactured",
            vec![check_optimizer(&manufactured, &u_dagger, &OptimizerOptions::default(), SEED)],
            Some(600),
        ),
        Criterion::new(
            10,
            "adjoint_consistency",
            vec![
                check_adjoint_refinement(&p, SEED),
                check_mu_tracking_gradient(&p, SEED, CHECK_PAIRS),
            ],
            None,
        ),
        Criterion::new(11, "mutation_sensitivity", vec![check_mutation(&p, SEED, CHECK_PAIRS)], None),
    ];
    let mut failed = 0;
    for c in &criteria {
        println!("{}", c.line());
        if !c.passed() {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
