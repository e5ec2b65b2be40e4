//! Run configuration: a strict TOML dialect with flat sections
//! `[grid] [model] [potential] [cost] [control] [solver] [optimizer] [output]`.
//!
//! Unknown keys and sections are errors. Spatial data are given as field
//! specs, sums of terms joined by ` + `:
//!
//! - `constant:<v>`
//! - `cosine:<amp>:<m₁>[:<m₂>[:<m₃>]]`, i.e. `amp Π cos(mᵢ π xᵢ / Lᵢ)`
//! - `ramp:<amp>:<rate>:<m₁>…`, the same times `(1 + rate·t)`
//! - `file:<path>[#<k>]`, field `k` of a CHCF snapshot (relative to the config)

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use toml::{Table, Value};

use crate::adjoint::CostSpec;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::io::read_snapshot;
use crate::linalg::GmresOptions;
use crate::optimize::{ControlBox, OptimizerOptions, StepRule};
use crate::potentials::{CustomPotential, Potential, PotentialKind, Proliferation, DEFAULT_DOMAIN_MARGIN};
use crate::problem::ControlProblem;
use crate::profile::Profile;
use crate::state::{ControlTrajectory, ModelParams, SolverOptions, StateTriple};

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Constant(f64),
    Cosine { amp: f64, modes: Vec<u32> },
    Ramp { amp: f64, rate: f64, modes: Vec<u32> },
    File { path: PathBuf, index: usize },
}

/// Parsed field spec; see the module docs for the grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub terms: Vec<Term>,
}

impl FieldSpec {
    pub fn constant(v: f64) -> Self {
        FieldSpec {
            terms: vec![Term::Constant(v)],
        }
    }

    pub fn cosine(amp: f64, modes: &[u32]) -> Self {
        FieldSpec {
            terms: vec![Term::Cosine {
                amp,
                modes: modes.to_vec(),
            }],
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Ramp { .. }))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [Term::Constant(v)] => Some(*v),
            _ => None,
        }
    }

    /// Evaluates the spec at time `t`; file paths are resolved against `base`.
    pub fn field(&self, grid: &Arc<Grid>, t: f64, base: &Path) -> Result<Field> {
        let mut acc = Field::zeros(grid);
        for term in &self.terms {
            let f = match term {
                Term::Constant(v) => Field::constant(grid, *v),
                Term::Cosine { amp, modes } => cosine_field(grid, *amp, modes)?,
                Term::Ramp { amp, rate, modes } => cosine_field(grid, amp * (1.0 + rate * t), modes)?,
                Term::File { path, index } => {
                    let full = base.join(path);
                    let snap = read_snapshot(&full)?;
                    if snap.grid.as_ref() != grid.as_ref() {
                        return Err(Error::Shape(format!("{} was written on a different grid", full.display())));
                    }
                    snap.fields.into_iter().nth(*index).ok_or_else(|| Error::Format {
                        path: full.clone(),
                        msg: format!("no field with index {index}"),
                    })?
                }
            };
            acc = acc.axpy(1.0, &f)?;
        }
        Ok(acc)
    }

    /// Time-node profile: a constant, one field, or one field per node.
    pub fn profile(&self, grid: &Arc<Grid>, nt: usize, dt: f64, base: &Path) -> Result<Profile> {
        if let Some(v) = self.as_constant() {
            return Ok(Profile::Constant(v));
        }
        if self.is_time_dependent() {
            let series = (0..=nt).map(|n| self.field(grid, n as f64 * dt, base)).collect::<Result<_>>()?;
            return Ok(Profile::Series(series));
        }
        Ok(Profile::Field(self.field(grid, 0.0, base)?))
    }

    /// Control values on intervals `1..=nt`, sampled at the right end points.
    pub fn control(&self, grid: &Arc<Grid>, nt: usize, dt: f64, base: &Path) -> Result<ControlTrajectory> {
        let mut values = Vec::with_capacity(nt);
        for n in 1..=nt {
            values.push(self.field(grid, n as f64 * dt, base)?);
        }
        ControlTrajectory::new(dt, values)
    }
}

fn cosine_field(grid: &Arc<Grid>, amp: f64, modes: &[u32]) -> Result<Field> {
    if modes.len() > grid.dim() {
        return Err(Error::Shape(format!("{} cosine modes on a {}D grid", modes.len(), grid.dim())));
    }
    let lengths = grid.lengths().to_vec();
    let modes = modes.to_vec();
    Ok(Field::from_fn(grid, move |x| {
        modes
            .iter()
            .enumerate()
            .map(|(axis, &m)| (m as f64 * std::f64::consts::PI * x[axis] / lengths[axis]).cos())
            .product::<f64>()
            * amp
    }))
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let modes = |m: &[u32]| m.iter().map(|v| format!(":{v}")).collect::<String>();
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| match t {
                Term::Constant(v) => format!("constant:{v:?}"),
                Term::Cosine { amp, modes: m } => format!("cosine:{amp:?}{}", modes(m)),
                Term::Ramp { amp, rate, modes: m } => format!("ramp:{amp:?}:{rate:?}{}", modes(m)),
                Term::File { path, index } => format!("file:{}#{index}", path.display()),
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

impl FromStr for FieldSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
        let mode = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("`{v}` is not a mode number"));
        let mut terms = Vec::new();
        for raw in s.split(" + ") {
            let raw = raw.trim();
            let (kind, rest) = raw.split_once(':').ok_or_else(|| format!("`{raw}` has no `kind:` prefix"))?;
            let term = match kind {
                "constant" => Term::Constant(num(rest)?),
                "cosine" | "ramp" => {
                    let parts: Vec<&str> = rest.split(':').collect();
                    let head = if kind == "ramp" { 2 } else { 1 };
                    if parts.len() < head {
                        return Err(format!("`{raw}` is missing its amplitude"));
                    }
                    let amp = num(parts[0])?;
                    let modes = parts[head..].iter().map(|m| mode(m)).collect::<std::result::Result<Vec<_>, _>>()?;
                    if modes.len() > 3 {
                        return Err(format!("`{raw}` has more than three modes"));
                    }
                    if kind == "ramp" {
                        Term::Ramp {
                            amp,
                            rate: num(parts[1])?,
                            modes,
                        }
                    } else {
                        Term::Cosine { amp, modes }
                    }
                }
                "file" => {
                    let (path, index) = match rest.rsplit_once('#') {
                        Some((p, k)) => (p, k.trim().parse::<usize>().map_err(|_| format!("bad field index `{k}`"))?),
                        None => (rest, 0),
                    };
                    if path.is_empty() {
                        return Err("empty file path".into());
                    }
                    Term::File {
                        path: PathBuf::from(path),
                        index,
                    }
                }
                other => return Err(format!("unknown field kind `{other}`")),
            };
            if let Term::Constant(v) | Term::Cosine { amp: v, .. } | Term::Ramp { amp: v, .. } = &term {
                if !v.is_finite() {
                    return Err(format!("`{raw}` is not finite"));
                }
            }
            terms.push(term);
        }
        Ok(FieldSpec { terms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n: Vec<usize>,
    pub lengths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub alpha: f64,
    pub beta: f64,
    pub t_final: f64,
    pub nt: usize,
    pub prolif: Proliferation,
    pub mu0: FieldSpec,
    pub phi0: FieldSpec,
    pub sigma0: FieldSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    /// `b₀ … b₆`
    pub weights: [f64; 7],
    pub phi_q: FieldSpec,
    pub phi_omega: FieldSpec,
    pub sigma_q: FieldSpec,
    pub sigma_omega: FieldSpec,
    pub mu_q: FieldSpec,
    pub mu_omega: FieldSpec,
    /// When set, every target is replaced by the states reached under this control.
    pub manufactured_control: Option<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub lower: FieldSpec,
    pub upper: FieldSpec,
    /// `None` starts from the box midpoint.
    pub initial: Option<FieldSpec>,
    /// Direction `h` for the `linearize` command.
    pub direction: FieldSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub grid: GridSpec,
    pub model: ModelSpec,
    pub potential: Potential,
    pub cost: CostConfig,
    pub control: ControlConfig,
    pub solver: SolverOptions,
    pub optimizer: OptimizerOptions,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Directory that relative file paths are resolved against.
    pub base_dir: PathBuf,
}

/// A validated problem plus the controls named in the config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: ControlProblem,
    pub initial_control: ControlTrajectory,
    pub direction: ControlTrajectory,
    /// The control that generated the targets, for manufactured runs.
    pub reference_control: Option<ControlTrajectory>,
}

const SECTIONS: [&str; 8] = ["grid", "model", "potential", "cost", "control", "solver", "optimizer", "output"];
const WEIGHT_KEYS: [&str; 7] = ["b0", "b1", "b2", "b3", "b4", "b5", "b6"];

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    used: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'static str) -> Result<Self> {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::config(name, "expected a section")),
        };
        Ok(Section {
            name,
            table,
            used: BTreeSet::new(),
        })
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn required(&mut self, key: &'static str) -> Result<&'a Value> {
        let path = self.key(key);
        self.get(key).ok_or_else(|| Error::config(path, "missing required key"))
    }

    fn mismatch(&self, key: &str, want: &str, got: &Value) -> Error {
        Error::config(self.key(key), format!("expected {want}, found {}", got.type_str()))
    }

    fn as_f64(&self, key: &str, v: &Value) -> Result<f64> {
        match v {
            Value::Float(x) => Ok(*x),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(self.mismatch(key, "a number", other)),
        }
    }

    fn as_usize(&self, key: &str, v: &Value) -> Result<usize> {
        match v {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            Value::Integer(i) => Err(Error::config(self.key(key), format!("must be nonnegative, got {i}"))),
            other => Err(self.mismatch(key, "an integer", other)),
        }
    }

    fn f64_or(&mut self, key: &'static str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(v) => self.as_f64(key, v),
            None => Ok(default),
        }
    }

    fn f64_req(&mut self, key: &'static str) -> Result<f64> {
        let v = self.required(key)?;
        self.as_f64(key, v)
    }

    fn usize_or(&mut self, key: &'static str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(v) => self.as_usize(key, v),
            None => Ok(default),
        }
    }

    fn usize_req(&mut self, key: &'static str) -> Result<usize> {
        let v = self.required(key)?;
        self.as_usize(key, v)
    }

    fn str_opt(&mut self, key: &'static str) -> Result<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(other) => Err(self.mismatch(key, "a string", other)),
        }
    }

    fn field_or(&mut self, key: &'static str, default: FieldSpec) -> Result<FieldSpec> {
        match self.str_opt(key)? {
            Some(s) => s.parse().map_err(|msg| Error::config(self.key(key), msg)),
            None => Ok(default),
        }
    }

    /// A scalar or an array of numbers.
    fn f64_list(&mut self, key: &'static str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items.iter().map(|v| self.as_f64(key, v)).collect::<Result<_>>().map(Some),
            Some(v) => self.as_f64(key, v).map(|x| Some(vec![x])),
        }
    }

    fn usize_list(&mut self, key: &'static str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items.iter().map(|v| self.as_usize(key, v)).collect::<Result<_>>().map(Some),
            Some(v) => self.as_usize(key, v).map(|x| Some(vec![x])),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(t) = self.table {
            if let Some(unknown) = t.keys().find(|k| !self.used.contains(k.as_str())) {
                return Err(Error::config(self.key(unknown), "unknown key"));
            }
        }
        Ok(())
    }
}

/// Desk-scale defaults for the optional keys.
pub mod defaults {
    use super::FieldSpec;

    pub fn phi0() -> FieldSpec {
        FieldSpec::cosine(0.3, &[1])
    }

    pub fn mu0() -> FieldSpec {
        FieldSpec::constant(0.0)
    }

    pub fn sigma0() -> FieldSpec {
        FieldSpec::constant(0.5)
    }

    pub const WEIGHTS: [f64; 7] = [0.01, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    pub const PHI_TARGET: f64 = -0.2;
    pub const SIGMA_TARGET: f64 = 0.6;
    pub const SEED: u64 = 42;

    pub fn direction() -> FieldSpec {
        FieldSpec::cosine(0.1, &[1])
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base)
}

/// Parses and validates; relative file paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<RunSpec> {
    let spec = parse_unvalidated(text, base_dir)?;
    spec.build()?;
    Ok(spec)
}

fn parse_unvalidated(text: &str, base_dir: &Path) -> Result<RunSpec> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    if let Some(unknown) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(Error::config(unknown.as_str(), "unknown section or top-level key"));
    }

    let mut s = Section::new(&root, "grid")?;
    let n = s.usize_list("n")?.ok_or_else(|| Error::config("grid.n", "missing required key"))?;
    let lengths = s.f64_list("lengths")?.unwrap_or_else(|| vec![1.0; n.len()]);
    if let Some(dim) = s.get("dim") {
        let dim = s.as_usize("dim", dim)?;
        if dim != n.len() {
            return Err(Error::config("grid.dim", format!("dim = {dim} but grid.n has {} entries", n.len())));
        }
    }
    s.finish()?;
    let grid = GridSpec { n, lengths };

    let mut s = Section::new(&root, "model")?;
    let alpha = s.f64_req("alpha")?;
    let beta = s.f64_req("beta")?;
    let t_final = s.f64_req("t_final")?;
    let nt = s.usize_req("nt")?;
    let prolif = match s.str_opt("proliferation")?.unwrap_or("sigmoid") {
        "sigmoid" => Proliferation::Sigmoid {
            p0: s.f64_or("p0", 1.0)?,
            steepness: s.f64_or("steepness", 2.0)?,
        },
        "constant" => Proliferation::Constant { p0: s.f64_or("p0", 1.0)? },
        other => {
            return Err(Error::config(
                "model.proliferation",
                format!("expected \"sigmoid\" or \"constant\", got \"{other}\""),
            ))
        }
    };
    if let Proliferation::Sigmoid { steepness, .. } = prolif {
        if !steepness.is_finite() {
            return Err(Error::config("model.steepness", "must be finite"));
        }
    }
    if !(prolif.amplitude() >= 0.0) {
        return Err(Error::config("model.p0", "proliferation amplitude must be nonnegative"));
    }
    let model = ModelSpec {
        alpha,
        beta,
        t_final,
        nt,
        prolif,
        mu0: s.field_or("mu0", defaults::mu0())?,
        phi0: s.field_or("phi0", defaults::phi0())?,
        sigma0: s.field_or("sigma0", defaults::sigma0())?,
    };
    s.finish()?;

    let mut s = Section::new(&root, "potential")?;
    let kind = s
        .str_opt("kind")?
        .ok_or_else(|| Error::config("potential.kind", "missing required key"))?;
    let margin = s.f64_or("domain_margin", DEFAULT_DOMAIN_MARGIN)?;
    let mut potential = match kind {
        "regular" => Potential::regular(),
        "logarithmic" => {
            let k = s.f64_or("k", 2.0)?;
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::config("potential.k", format!("must be finite and nonnegative, got {k}")));
            }
            Potential::logarithmic(k)
        }
        "custom" => {
            let bhat = s.f64_list("bhat")?.ok_or_else(|| Error::config("potential.bhat", "missing required key"))?;
            let pihat = s.f64_list("pihat")?.unwrap_or_default();
            let spec = CustomPotential {
                bhat,
                pihat,
                r_minus: s.f64_or("r_minus", f64::NEG_INFINITY)?,
                r_plus: s.f64_or("r_plus", f64::INFINITY)?,
            };
            Potential::custom(spec).map_err(|e| Error::config("potential", e.to_string()))?
        }
        other => {
            return Err(Error::config(
                "potential.kind",
                format!("expected \"regular\", \"logarithmic\" or \"custom\", got \"{other}\""),
            ))
        }
    };
    if !(margin > 0.0) {
        return Err(Error::config("potential.domain_margin", "must be positive"));
    }
    potential.domain_margin = margin;
    s.finish()?;

    let mut s = Section::new(&root, "cost")?;
    let mut weights = defaults::WEIGHTS;
    for (w, key) in weights.iter_mut().zip(WEIGHT_KEYS) {
        *w = s.f64_or(key, *w)?;
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::config(
                s.key(key),
                format!("hypothesis violated (cost weights): must be finite and nonnegative, got {w}"),
            ));
        }
    }
    let cost = CostConfig {
        weights,
        phi_q: s.field_or("phi_q", FieldSpec::constant(defaults::PHI_TARGET))?,
        phi_omega: s.field_or("phi_omega", FieldSpec::constant(defaults::PHI_TARGET))?,
        sigma_q: s.field_or("sigma_q", FieldSpec::constant(defaults::SIGMA_TARGET))?,
        sigma_omega: s.field_or("sigma_omega", FieldSpec::constant(defaults::SIGMA_TARGET))?,
        mu_q: s.field_or("mu_q", FieldSpec::constant(0.0))?,
        mu_omega: s.field_or("mu_omega", FieldSpec::constant(0.0))?,
        manufactured_control: match s.str_opt("manufactured_control")? {
            Some(text) => Some(text.parse().map_err(|msg| Error::config("cost.manufactured_control", msg))?),
            None => None,
        },
    };
    if cost.manufactured_control.is_some() {
        let given = ["phi_q", "phi_omega", "sigma_q", "sigma_omega", "mu_q", "mu_omega"]
            .into_iter()
            .find(|k| s.table.is_some_and(|t| t.contains_key(*k)));
        if let Some(k) = given {
            return Err(Error::config(s.key(k), "targets are generated when manufactured_control is set"));
        }
    }
    s.finish()?;

    let mut s = Section::new(&root, "control")?;
    let control = ControlConfig {
        lower: s.field_or("lower", FieldSpec::constant(-1.0))?,
        upper: s.field_or("upper", FieldSpec::constant(1.0))?,
        initial: match s.str_opt("initial")? {
            None | Some("midpoint") => None,
            Some(text) => Some(text.parse().map_err(|msg| Error::config("control.initial", msg))?),
        },
        direction: s.field_or("direction", defaults::direction())?,
    };
    s.finish()?;

    let mut s = Section::new(&root, "solver")?;
    let d = SolverOptions::default();
    let solver = SolverOptions {
        newton_tol: s.f64_or("newton_tol", d.newton_tol)?,
        newton_max_iter: s.usize_or("newton_max_iter", d.newton_max_iter)?,
        max_halvings: s.usize_or("max_halvings", d.max_halvings)?,
        linear: GmresOptions {
            tol: s.f64_or("linear_tol", d.linear.tol)?,
            restart: s.usize_or("gmres_restart", d.linear.restart)?,
            max_iter: s.usize_or("gmres_max_iter", d.linear.max_iter)?,
            direct_work_limit: s.f64_or("direct_work_limit", d.linear.direct_work_limit)?,
        },
        riesz_tol: s.f64_or("riesz_tol", d.riesz_tol)?,
    };
    for (key, v) in [
        ("newton_tol", solver.newton_tol),
        ("linear_tol", solver.linear.tol),
        ("riesz_tol", solver.riesz_tol),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(s.key(key), format!("must be positive, got {v}")));
        }
    }
    if solver.linear.restart == 0 || solver.newton_max_iter == 0 {
        return Err(Error::config("solver", "iteration limits must be positive"));
    }
    s.finish()?;

    let mut s = Section::new(&root, "optimizer")?;
    let d = OptimizerOptions::default();
    let step_rule = match s.str_opt("step_rule")? {
        None => d.step_rule,
        Some(text) => parse_step_rule(text).ok_or_else(|| {
            Error::config(
                "optimizer.step_rule",
                format!("expected \"fixed\", \"barzilai-borwein\" or \"adaptive-barzilai-borwein\", got \"{text}\""),
            )
        })?,
    };
    let optimizer = OptimizerOptions {
        max_iters: s.usize_or("max_iters", d.max_iters)?,
        tol_stat: s.f64_or("tol_stat", d.tol_stat)?,
        cost_target: s.f64_or("cost_target", d.cost_target)?,
        initial_step: s.f64_or("initial_step", d.initial_step)?,
        backtrack: s.f64_or("backtrack", d.backtrack)?,
        c_armijo: s.f64_or("c_armijo", d.c_armijo)?,
        max_backtracks: s.usize_or("max_backtracks", d.max_backtracks)?,
        step_rule,
    };
    if !(optimizer.backtrack > 0.0 && optimizer.backtrack < 1.0) {
        return Err(Error::config("optimizer.backtrack", "must lie in (0, 1)"));
    }
    if !(optimizer.initial_step > 0.0) {
        return Err(Error::config("optimizer.initial_step", "must be positive"));
    }
    if !(optimizer.c_armijo > 0.0 && optimizer.c_armijo < 1.0) {
        return Err(Error::config("optimizer.c_armijo", "must lie in (0, 1)"));
    }
    s.finish()?;

    let mut s = Section::new(&root, "output")?;
    let output_dir = PathBuf::from(s.str_opt("dir")?.unwrap_or("out"));
    let seed = match s.get("seed") {
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(other) => return Err(s.mismatch("seed", "a nonnegative integer", other)),
        None => defaults::SEED,
    };
    s.finish()?;

    Ok(RunSpec {
        grid,
        model,
        potential,
        cost,
        control,
        solver,
        optimizer,
        output_dir,
        seed,
        base_dir: base_dir.to_path_buf(),
    })
}

fn parse_step_rule(text: &str) -> Option<StepRule> {
    match text {
        "fixed" => Some(StepRule::Fixed),
        "barzilai-borwein" => Some(StepRule::BarzilaiBorwein),
        "adaptive-barzilai-borwein" => Some(StepRule::AdaptiveBarzilaiBorwein),
        _ => None,
    }
}

fn step_rule_name(rule: StepRule) -> &'static str {
    match rule {
        StepRule::Fixed => "fixed",
        StepRule::BarzilaiBorwein => "barzilai-borwein",
        StepRule::AdaptiveBarzilaiBorwein => "adaptive-barzilai-borwein",
    }
}

impl RunSpec {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            alpha: self.model.alpha,
            beta: self.model.beta,
            potential: self.potential.clone(),
            prolif: self.model.prolif,
            t_final: self.model.t_final,
            nt: self.model.nt,
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    /// Builds and validates the problem. Hypothesis failures are reported
    /// under the config key that caused them.
    pub fn build(&self) -> Result<Setup> {
        let m = &self.model;
        let grid = Arc::new(Grid::new(self.grid.n.len(), &self.grid.n, &self.grid.lengths)?);
        let params = self.params();
        let dt = if m.nt > 0 { m.t_final / m.nt as f64 } else { f64::NAN };
        let base = &self.base_dir;
        let keyed = |key: &str, e: Error| match e {
            Error::Config { .. } => e,
            other => Error::config(key, other.to_string()),
        };
        let initial = StateTriple {
            mu: m.mu0.field(&grid, 0.0, base).map_err(|e| keyed("model.mu0", e))?,
            phi: m.phi0.field(&grid, 0.0, base).map_err(|e| keyed("model.phi0", e))?,
            sigma: m.sigma0.field(&grid, 0.0, base).map_err(|e| keyed("model.sigma0", e))?,
        };
        let profile = |key: &str, spec: &FieldSpec| spec.profile(&grid, m.nt, dt, base).map_err(|e| keyed(key, e));
        let c = &self.cost;
        let w = c.weights;
        let mut cost = CostSpec {
            b0: w[0],
            b1: w[1],
            b2: w[2],
            b3: w[3],
            b4: w[4],
            b5: w[5],
            b6: w[6],
            phi_q: profile("cost.phi_q", &c.phi_q)?,
            phi_omega: profile("cost.phi_omega", &c.phi_omega)?,
            sigma_q: profile("cost.sigma_q", &c.sigma_q)?,
            sigma_omega: profile("cost.sigma_omega", &c.sigma_omega)?,
            mu_q: profile("cost.mu_q", &c.mu_q)?,
            mu_omega: profile("cost.mu_omega", &c.mu_omega)?,
        };
        let bounds = ControlBox {
            lower: profile("control.lower", &self.control.lower)?,
            upper: profile("control.upper", &self.control.upper)?,
        };
        let mut problem = ControlProblem::new(Arc::clone(&grid), params, cost.clone(), bounds, initial, self.solver);
        problem.validate().map_err(|e| self.locate(e))?;

        let reference_control = match &c.manufactured_control {
            Some(spec) => {
                let u = spec.control(&grid, m.nt, dt, base).map_err(|e| keyed("cost.manufactured_control", e))?;
                let traj = problem.solve_state(&u)?;
                let series = |pick: fn(&StateTriple) -> &Field| Profile::Series(traj.states.iter().map(|s| pick(s).clone()).collect());
                let last = traj.final_state();
                cost.phi_q = series(|s| &s.phi);
                cost.sigma_q = series(|s| &s.sigma);
                cost.mu_q = series(|s| &s.mu);
                cost.phi_omega = Profile::Field(last.phi.clone());
                cost.sigma_omega = Profile::Field(last.sigma.clone());
                cost.mu_omega = Profile::Field(last.mu.clone());
                problem = problem.with_cost(cost);
                Some(u)
            }
            None => None,
        };
        let initial_control = match &self.control.initial {
            None => problem.bounds.midpoint(&grid, m.nt, dt),
            Some(spec) => spec.control(&grid, m.nt, dt, base).map_err(|e| keyed("control.initial", e))?,
        };
        let direction = self
            .control
            .direction
            .control(&grid, m.nt, dt, base)
            .map_err(|e| keyed("control.direction", e))?;
        Ok(Setup {
            problem,
            initial_control,
            direction,
            reference_control,
        })
    }

    fn locate(&self, e: Error) -> Error {
        let key = match &e {
            Error::Hypothesis { hypothesis, .. } => match *hypothesis {
                "relaxation and viscosity" if !(self.model.alpha > 0.0) => "model.alpha",
                "relaxation and viscosity" => "model.beta",
                "time horizon" if self.model.nt == 0 => "model.nt",
                "time horizon" => "model.t_final",
                "initial separation" => "model.phi0",
                "initial data" => "model",
                "control box" => "control.lower",
                "cost weights" | "targets" => "cost",
                _ => "config",
            },
            Error::Shape(_) => "grid",
            Error::Config { .. } => return e,
            _ => "model",
        };
        Error::config(key, e.to_string())
    }

    /// Serialises every key explicitly, so defaults survive a round trip.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        let mut t = Table::new();
        let ints = |v: &[usize]| Value::Array(v.iter().map(|&x| Value::Integer(x as i64)).collect());
        let floats = |v: &[f64]| Value::Array(v.iter().map(|&x| Value::Float(x)).collect());
        let field = |f: &FieldSpec| Value::String(f.to_string());
        t.insert("n".into(), ints(&self.grid.n));
        t.insert("lengths".into(), floats(&self.grid.lengths));
        root.insert("grid".into(), Value::Table(t));

        let m = &self.model;
        let mut t = Table::new();
        t.insert("alpha".into(), Value::Float(m.alpha));
        t.insert("beta".into(), Value::Float(m.beta));
        t.insert("t_final".into(), Value::Float(m.t_final));
        t.insert("nt".into(), Value::Integer(m.nt as i64));
        match m.prolif {
            Proliferation::Sigmoid { p0, steepness } => {
                t.insert("proliferation".into(), Value::String("sigmoid".into()));
                t.insert("p0".into(), Value::Float(p0));
                t.insert("steepness".into(), Value::Float(steepness));
            }
            Proliferation::Constant { p0 } => {
                t.insert("proliferation".into(), Value::String("constant".into()));
                t.insert("p0".into(), Value::Float(p0));
            }
        }
        t.insert("mu0".into(), field(&m.mu0));
        t.insert("phi0".into(), field(&m.phi0));
        t.insert("sigma0".into(), field(&m.sigma0));
        root.insert("model".into(), Value::Table(t));

        let mut t = Table::new();
        match &self.potential.kind {
            PotentialKind::Regular => {
                t.insert("kind".into(), Value::String("regular".into()));
            }
            PotentialKind::Logarithmic { k } => {
                t.insert("kind".into(), Value::String("logarithmic".into()));
                t.insert("k".into(), Value::Float(*k));
            }
            PotentialKind::Custom(c) => {
                t.insert("kind".into(), Value::String("custom".into()));
                t.insert("bhat".into(), floats(&c.bhat));
                t.insert("pihat".into(), floats(&c.pihat));
                t.insert("r_minus".into(), Value::Float(c.r_minus));
                t.insert("r_plus".into(), Value::Float(c.r_plus));
            }
        }
        t.insert("domain_margin".into(), Value::Float(self.potential.domain_margin));
        root.insert("potential".into(), Value::Table(t));

        let c = &self.cost;
        let mut t = Table::new();
        for (key, w) in WEIGHT_KEYS.iter().zip(c.weights) {
            t.insert((*key).into(), Value::Float(w));
        }
        match &c.manufactured_control {
            Some(u) => {
                t.insert("manufactured_control".into(), field(u));
            }
            None => {
                for (key, f) in [
                    ("phi_q", &c.phi_q),
                    ("phi_omega", &c.phi_omega),
                    ("sigma_q", &c.sigma_q),
                    ("sigma_omega", &c.sigma_omega),
                    ("mu_q", &c.mu_q),
                    ("mu_omega", &c.mu_omega),
                ] {
                    t.insert(key.into(), field(f));
                }
            }
        }
        root.insert("cost".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("lower".into(), field(&self.control.lower));
        t.insert("upper".into(), field(&self.control.upper));
        let initial = self.control.initial.as_ref().map_or("midpoint".to_string(), |f| f.to_string());
        t.insert("initial".into(), Value::String(initial));
        t.insert("direction".into(), field(&self.control.direction));
        root.insert("control".into(), Value::Table(t));

        let s = &self.solver;
        let mut t = Table::new();
        t.insert("newton_tol".into(), Value::Float(s.newton_tol));
        t.insert("newton_max_iter".into(), Value::Integer(s.newton_max_iter as i64));
        t.insert("max_halvings".into(), Value::Integer(s.max_halvings as i64));
        t.insert("linear_tol".into(), Value::Float(s.linear.tol));
        t.insert("gmres_restart".into(), Value::Integer(s.linear.restart as i64));
        t.insert("gmres_max_iter".into(), Value::Integer(s.linear.max_iter as i64));
        t.insert("direct_work_limit".into(), Value::Float(s.linear.direct_work_limit));
        t.insert("riesz_tol".into(), Value::Float(s.riesz_tol));
        root.insert("solver".into(), Value::Table(t));

        let o = &self.optimizer;
        let mut t = Table::new();
        t.insert("max_iters".into(), Value::Integer(o.max_iters as i64));
        t.insert("tol_stat".into(), Value::Float(o.tol_stat));
        t.insert("cost_target".into(), Value::Float(o.cost_target));
        t.insert("initial_step".into(), Value::Float(o.initial_step));
        t.insert("backtrack".into(), Value::Float(o.backtrack));
        t.insert("c_armijo".into(), Value::Float(o.c_armijo));
        t.insert("max_backtracks".into(), Value::Integer(o.max_backtracks as i64));
        t.insert("step_rule".into(), Value::String(step_rule_name(o.step_rule).into()));
        root.insert("optimizer".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("dir".into(), Value::String(self.output_dir.display().to_string()));
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        root.insert("output".into(), Value::Table(t));
        toml::to_string(&root).expect("plain tables always serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\nn = 16\n[model]\nalpha = 0.5\nbeta = 0.5\nt_final = 0.1\nnt = 5\n[potential]\nkind = \"regular\"\n";

    #[test]
    fn field_spec_grammar() {
        let f: FieldSpec = "constant:0.2 + ramp:0.4:2:1 + cosine:-1e-3:1:2".parse().unwrap();
        assert_eq!(f.terms.len(), 3);
        assert!(f.is_time_dependent());
        assert_eq!(f.to_string().parse::<FieldSpec>().unwrap(), f);
        let g: FieldSpec = "file:data/u.chcf#2".parse().unwrap();
        assert_eq!(
            g.terms[0],
            Term::File {
                path: "data/u.chcf".into(),
                index: 2
            }
        );
        for bad in ["0.3", "cosine", "cosine:x", "ramp:1", "wave:1", "constant:nan", "cosine:1:-1"] {
            assert!(bad.parse::<FieldSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let spec = parse_config_str(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(spec.grid.lengths, vec![1.0]);
        assert_eq!(spec.cost.weights, defaults::WEIGHTS);
        assert_eq!(spec.optimizer, OptimizerOptions::default());
        assert_eq!(spec.solver, SolverOptions::default());
        assert_eq!(spec.seed, 42);
    }

    #[test]
    fn type_mismatch_names_key() {
        let text = MINIMAL.replace("nt = 5", "nt = 5.5");
        let err = parse_config_str(&text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.nt"), "{err}");
    }

    #[test]
    fn missing_key_names_key() {
        let text = MINIMAL.replace("beta = 0.5\n", "");
        let err = parse_config_str(&text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.beta"), "{err}");
    }
}
