//! Config-driven runs: one command, its tables, checks and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bsde::{apriori_report, compare_with_oracle, forward_sample, solve_bsde, Agreement, RegressionConfig};
use crate::catalog::{catalog_problem_with, ParamOverrides, ProblemParams, TestProblem, PROBLEM_NAMES};
use crate::error::{Error, Result};
use crate::feynman_kac::{bsipde_residual, compare_triple, compose_from_noise, residual_convergence, ComposeConfig};
use crate::galerkin::{
    catalog_system, coercivity_probe, energy_convergence, energy_residual, fourier_constants, heat_decay_error,
    solve_evolution_ensemble, EvolutionSystem, FourierParams, SYSTEM_NAMES,
};
use crate::interp::Uniform;
use crate::inverse_flow::{
    backward_inverse_field, integrate_inverse_sipde_ensemble, invert_flow_grid, inversion_identity, InverseField, InverseMethod,
};
use crate::ito_wentzell::{wentzell_case, wentzell_convergence, WENTZELL_CASES};
use crate::noise::{coarsen_noise, generate_ensemble, NoiseBundle, TimeGrid};
use crate::sde_flow::{check_flow_properties, simulate_flow_ensemble, FlowField};
use crate::stats::{fit_order, OrderFit};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Closed interval `[lo, hi]` meshed with step `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub lo: f64,
    pub hi: f64,
    pub h: f64,
}

impl MeshConfig {
    pub fn uniform(&self) -> Uniform {
        Uniform::covering(self.lo, self.hi, self.h)
    }

    fn validate(&self, field: &str) -> Result<()> {
        let ok = self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi && self.h > 0.0 && self.h <= self.hi - self.lo;
        if !ok {
            return Err(config(field, format!("need finite lo < hi and 0 < h <= hi - lo, got {self:?}")));
        }
        if self.uniform().len < 4 {
            return Err(config(field, "fewer than 4 mesh points"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// RMS of `u(t, X_t(x)) - x`.
    pub identity_rms: f64,
    pub min_order: f64,
    /// Oracle agreement: `error <= oracle_se * se + oracle_floor`.
    pub oracle_se: f64,
    pub oracle_floor: f64,
    /// Jump relation and restart checks of the forward flow.
    pub flow: f64,
    pub perturbation_ratio: f64,
    pub heat_decay: f64,
    pub zero_residual: f64,
    pub probe_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            identity_rms: 1e-2,
            min_order: 0.45,
            oracle_se: 3.0,
            oracle_floor: 1e-3,
            flow: 1e-8,
            perturbation_ratio: 10.0,
            heat_decay: 0.01,
            zero_residual: 1e-6,
            probe_slack: -1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: String,
    pub overrides: ParamOverrides,
    /// Base steps on `[0, T]`; the finest level of any study.
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Initial point of the single-start BSDE.
    pub x0: f64,
    /// Initial points of the forward flow.
    pub mesh: MeshConfig,
    /// Points where inverse flows and composed fields are evaluated.
    pub queries: MeshConfig,
    pub inverse_method: InverseMethod,
    pub regression: RegressionConfig,
    /// Step counts of convergence studies, each `steps / 2^k`.
    pub levels: Vec<usize>,
    pub system: String,
    pub wentzell: Vec<String>,
    /// Amplitude `a` of the perturbation `a sin(x)` added to `p`.
    pub perturbation: f64,
    pub estimate_p: f64,
    pub tolerances: Tolerances,
    /// Worker threads; unset uses the global pool.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "linear-jump-diffusion".into(),
            overrides: ParamOverrides::default(),
            steps: 64,
            paths: 1000,
            seed: 0,
            x0: 1.0,
            mesh: MeshConfig { lo: 0.1, hi: 4.5, h: 0.1 },
            queries: MeshConfig { lo: 0.5, hi: 2.0, h: 1.0 / 32.0 },
            inverse_method: InverseMethod::GridInversion,
            regression: RegressionConfig::default(),
            levels: vec![8, 16, 32, 64],
            system: "scalar-jump".into(),
            wentzell: WENTZELL_CASES.iter().map(|s| s.to_string()).collect(),
            perturbation: 0.0,
            estimate_p: 2.0,
            tolerances: Tolerances::default(),
            workers: None,
            out_dir: PathBuf::from("out"),
            format: Format::Csv,
        }
    }
}

fn config(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parse a config document. A run manifest is accepted too, in which case
    /// its embedded config is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| config("<document>", e.to_string()))?;
        if let Some(inner) = value.get("manifest_version").and(value.get("config")) {
            return serde_json::from_value(inner.clone()).map_err(|e| config("config", e.to_string()));
        }
        // Parse the text again so diagnostics carry line and column.
        serde_json::from_str(text).map_err(|e| config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("steps", "must be positive"));
        }
        if self.paths == 0 {
            return Err(config("paths", "must be positive"));
        }
        if !self.x0.is_finite() {
            return Err(config("x0", "must be finite"));
        }
        self.mesh.validate("mesh")?;
        self.queries.validate("queries")?;
        self.regression.validate().map_err(|e| config("regression", e.to_string()))?;
        if self.levels.is_empty() {
            return Err(config("levels", "at least one level"));
        }
        if self.levels.contains(&0) {
            return Err(config("levels", "must be positive"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config("levels", "must be strictly increasing"));
        }
        if !PROBLEM_NAMES.contains(&self.problem.as_str()) {
            return Err(config("problem", format!("unknown `{}`; available: {}", self.problem, PROBLEM_NAMES.join(", "))));
        }
        if !SYSTEM_NAMES.contains(&self.system.as_str()) {
            return Err(config("system", format!("unknown `{}`; available: {}", self.system, SYSTEM_NAMES.join(", "))));
        }
        if let Some(w) = self.wentzell.iter().find(|w| !WENTZELL_CASES.contains(&w.as_str())) {
            return Err(config("wentzell", format!("unknown `{w}`; available: {}", WENTZELL_CASES.join(", "))));
        }
        if !self.perturbation.is_finite() {
            return Err(config("perturbation", "must be finite"));
        }
        if !(self.estimate_p >= 2.0) {
            return Err(config("estimate_p", "must be >= 2"));
        }
        if self.workers == Some(0) {
            return Err(config("workers", "must be positive"));
        }
        ProblemParams::defaults(&self.problem)
            .map(|p| p.apply(&self.overrides))
            .and_then(|_| catalog_problem_with(&self.problem, &self.overrides))
            .map_err(|e| config("overrides", e.to_string()))?;
        Ok(())
    }

    /// Levels must be `steps / 2^k` so every level coarsens the same noise.
    /// Only checked for commands that run a level study.
    pub fn validate_levels(&self) -> Result<()> {
        for &n in &self.levels {
            if self.steps % n != 0 || !(self.steps / n).is_power_of_two() {
                return Err(config("levels", format!("level {n} is not steps / 2^k for steps = {}", self.steps)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Invert,
    Bsde,
    Compose,
    Galerkin,
    VerifyWentzell,
    VerifyResidual,
    VerifyEnergy,
    VerifyFlow,
    Convergence,
    Catalog,
}

impl Command {
    pub fn uses_levels(self) -> bool {
        matches!(
            self,
            Command::VerifyWentzell | Command::VerifyResidual | Command::VerifyEnergy | Command::Convergence
        )
    }
}

/// One table cell; numbers keep full precision in both formats.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(u64),
    Num(f64),
    Text(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::to_string))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(&json!({ "name": self.name, "columns": self.columns, "rows": self.rows }))?;
        v.push(b'\n');
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    /// `"<="` or `">="`.
    pub relation: String,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, statistic: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            relation: "<=".into(),
            tolerance,
            pass: statistic <= tolerance,
        }
    }

    pub fn at_least(name: impl Into<String>, statistic: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            relation: ">=".into(),
            tolerance,
            pass: statistic >= tolerance,
        }
    }

    /// Convergence order, passing also when every error is round-off.
    pub fn order(name: impl Into<String>, fit: &OrderFit, min: f64) -> Self {
        let mut c = Self::at_least(name, fit.order, min);
        c.pass = fit.passes(min);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub name: String,
    pub order: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: Command,
    pub problem: String,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub checks: Vec<Check>,
    pub slopes: Vec<Slope>,
    pub timings: Vec<Timing>,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct Run {
    pub summary: RunSummary,
    pub tables: Vec<Table>,
    /// Named JSON reports.
    pub reports: Vec<(String, Value)>,
}

struct Builder {
    started: Instant,
    checks: Vec<Check>,
    slopes: Vec<Slope>,
    timings: Vec<Timing>,
    tables: Vec<Table>,
    reports: Vec<(String, Value)>,
}

impl Builder {
    fn new() -> Self {
        Self {
            started: Instant::now(),
            checks: vec![],
            slopes: vec![],
            timings: vec![],
            tables: vec![],
            reports: vec![],
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: now.duration_since(self.started).as_secs_f64(),
        });
        self.started = now;
    }

    fn slope(&mut self, name: &str, fit: &OrderFit, min: f64) {
        self.slopes.push(Slope {
            name: name.into(),
            order: fit.order,
            exact: fit.exact,
        });
        self.checks.push(Check::order(format!("{name}.order"), fit, min));
    }

    fn agreement(&mut self, name: &str, a: &Agreement, tol: &Tolerances) {
        if a.samples > 0 {
            self.checks.push(Check::at_most(name, a.rms_error, tol.oracle_se * a.rms_se + tol.oracle_floor));
        }
    }

    fn report(&mut self, name: &str, value: impl Serialize) -> Result<()> {
        self.reports.push((name.into(), serde_json::to_value(value)?));
        Ok(())
    }
}

/// Validate `cfg` and execute `command`, on a pool of `cfg.workers` threads
/// when set.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command) -> Result<Run> {
    cfg.validate()?;
    if command.uses_levels() {
        cfg.validate_levels()?;
    }
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config("workers", e.to_string()))?
            .install(|| execute(cfg, command)),
        None => execute(cfg, command),
    }
}

fn execute(cfg: &ExperimentConfig, command: Command) -> Result<Run> {
    let mut b = Builder::new();
    match command {
        Command::Simulate => simulate(cfg, &mut b)?,
        Command::Invert => invert(cfg, &mut b)?,
        Command::Bsde => bsde(cfg, &mut b)?,
        Command::Compose => compose(cfg, &mut b)?,
        Command::Galerkin => galerkin(cfg, &mut b)?,
        Command::VerifyWentzell => verify_wentzell(cfg, &mut b)?,
        Command::VerifyResidual => verify_residual(cfg, &mut b)?,
        Command::VerifyEnergy => verify_energy(cfg, &mut b)?,
        Command::VerifyFlow => verify_flow(cfg, &mut b)?,
        Command::Convergence => convergence(cfg, &mut b)?,
        Command::Catalog => catalog(&mut b)?,
    }
    let pass = b.checks.iter().all(|c| c.pass);
    Ok(Run {
        summary: RunSummary {
            command,
            problem: cfg.problem.clone(),
            seed: cfg.seed,
            paths: cfg.paths,
            steps: cfg.steps,
            checks: b.checks,
            slopes: b.slopes,
            timings: b.timings,
            pass,
        },
        tables: b.tables,
        reports: b.reports,
    })
}

fn problem(cfg: &ExperimentConfig) -> Result<TestProblem> {
    catalog_problem_with(&cfg.problem, &cfg.overrides)
}

fn noises_for(cfg: &ExperimentConfig, pb: &TestProblem) -> Result<Vec<NoiseBundle>> {
    let m = &pb.model;
    generate_ensemble(TimeGrid::new(m.horizon, cfg.steps)?, &m.marks, m.dim_brownian, cfg.seed, cfg.paths)
}

fn coarsen_all(fine: &[NoiseBundle], steps: usize, level: usize) -> Result<Vec<NoiseBundle>> {
    fine.iter().map(|nb| coarsen_noise(nb, steps / level)).collect()
}

fn mark_columns(prefix: &str, names: &[String]) -> Vec<String> {
    if names.len() == 1 {
        vec![prefix.to_string()]
    } else {
        names.iter().map(|n| format!("{prefix}_{n}")).collect()
    }
}

fn simulate(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    b.lap("noise");
    let flow = simulate_flow_ensemble(&pb.model, &noises, &cfg.mesh.uniform().points())?;
    b.lap("flow");
    let mut t = Table::new("simulate", &["path_id", "t", "mesh_index", "x0", "X", "X_left"]);
    for (p, path) in flow.paths.iter().enumerate() {
        for (k, &time) in path.grid.times.iter().enumerate() {
            for m in 0..flow.mesh_len() {
                t.rows.push(vec![
                    Cell::Int(path.path_id),
                    Cell::Num(time),
                    Cell::Int(m as u64),
                    Cell::Num(flow.mesh[m]),
                    Cell::Num(flow.value(p, k, m)[0]),
                    Cell::Num(flow.left(p, k, m)[0]),
                ]);
            }
        }
    }
    b.tables.push(t);
    flow_checks(cfg, &pb, &noises, b)
}

fn flow_checks(cfg: &ExperimentConfig, pb: &TestProblem, noises: &[NoiseBundle], b: &mut Builder) -> Result<()> {
    use rayon::prelude::*;
    let mesh = cfg.mesh.uniform().points();
    let reports = noises
        .par_iter()
        .map(|nb| check_flow_properties(&pb.model, nb, &mesh, cfg.steps / 2))
        .collect::<Result<Vec<_>>>()?;
    let semigroup = reports.iter().fold(0.0_f64, |m, r| m.max(r.semigroup_discrepancy));
    let jump = reports.iter().fold(0.0_f64, |m, r| m.max(r.jump_relation_error));
    let order: usize = reports.iter().map(|r| r.monotonicity_violations).sum();
    let jumps: usize = reports.iter().map(|r| r.jumps_checked).sum();
    b.checks.push(Check::at_most("flow.restart", semigroup, cfg.tolerances.flow));
    b.checks.push(Check::at_most("flow.jump_relation", jump, cfg.tolerances.flow));
    b.checks.push(Check::at_most("flow.monotonicity_violations", order as f64, 0.0));
    b.report(
        "flow",
        json!({ "restart_discrepancy": semigroup, "jump_relation_error": jump, "jumps_checked": jumps, "monotonicity_violations": order }),
    )?;
    b.lap("flow checks");
    Ok(())
}

fn inverse_field(cfg: &ExperimentConfig, pb: &TestProblem, noises: &[NoiseBundle], flow: &FlowField) -> Result<InverseField> {
    let q = cfg.queries.uniform();
    let steps = noises.first().map_or(0, |nb| nb.grid.steps);
    match cfg.inverse_method {
        InverseMethod::GridInversion => invert_flow_grid(flow, &q.points()),
        InverseMethod::Sipde => integrate_inverse_sipde_ensemble(&pb.model, noises, q),
        InverseMethod::BackwardSde => backward_inverse_field(&pb.model, noises, &q.points(), &(0..=steps).collect::<Vec<_>>()),
    }
}

fn invert(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    let flow = simulate_flow_ensemble(&pb.model, &noises, &cfg.mesh.uniform().points())?;
    b.lap("flow");
    let inv = inverse_field(cfg, &pb, &noises, &flow)?;
    b.lap("inverse");
    let tag = inv.method.tag();
    let mut t = Table::new("invert", &["path_id", "t", "y", "u", "method"]);
    for (p, path) in inv.paths.iter().enumerate() {
        for (slot, &node) in path.nodes.iter().enumerate() {
            for (y, u) in inv.queries.iter().zip(inv.values_at(p, slot)) {
                t.rows.push(vec![
                    Cell::Int(path.path_id),
                    Cell::Num(path.grid.times[node]),
                    Cell::Num(*y),
                    Cell::Num(*u),
                    Cell::Text(tag.into()),
                ]);
            }
        }
    }
    b.tables.push(t);
    let stats = inversion_identity(&inv, &flow)?;
    b.checks.push(Check::at_most("inverse.identity_rms", stats.rms, cfg.tolerances.identity_rms));
    b.report("invert", &stats)?;
    b.lap("identity");
    Ok(())
}

fn bsde(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    let fwd = forward_sample(&pb.model, &noises, &[cfg.x0])?;
    b.lap("forward");
    let sol = solve_bsde(&pb.model, &fwd, &cfg.regression)?;
    b.lap("backward");
    let mut cols = vec!["t".to_string(), "Y_mean".into(), "Y_se".into(), "Z_mean".into()];
    cols.extend(mark_columns("U_mean", pb.model.marks.names()));
    let mut t = Table {
        name: "bsde".into(),
        columns: cols,
        rows: vec![],
    };
    for row in sol.summary() {
        let mut r = vec![Cell::Num(row.t), Cell::Num(row.y_mean), Cell::Num(row.y_se), Cell::Num(row.z_mean)];
        r.extend(row.u_mean.iter().map(|u| Cell::Num(*u)));
        t.rows.push(r);
    }
    b.tables.push(t);
    let finite = sol.y.iter().chain(&sol.z).chain(&sol.u).all(|v| v.is_finite());
    b.checks.push(Check::at_least("bsde.finite", f64::from(u8::from(finite)), 1.0));
    let cmp = compare_with_oracle(&sol, &fwd, |t, x, xl| pb.oracle_bsde(t, x, xl))?;
    b.agreement("bsde.oracle.y", &cmp.y, &cfg.tolerances);
    b.agreement("bsde.oracle.z", &cmp.z, &cfg.tolerances);
    b.agreement("bsde.oracle.u", &cmp.u, &cfg.tolerances);
    let est = apriori_report(&sol, &fwd, &pb.model, cfg.estimate_p)?;
    let (y0, y0_se) = sol.y_mean(0, 0);
    b.report(
        "bsde",
        json!({ "y0": y0, "y0_se": y0_se, "oracle": cmp, "estimate": est, "regression": sol.diagnostics }),
    )?;
    b.lap("checks");
    Ok(())
}

fn compose_config(cfg: &ExperimentConfig) -> ComposeConfig {
    ComposeConfig {
        initial: cfg.mesh.uniform(),
        queries: cfg.queries.uniform(),
        regression: cfg.regression,
    }
}

fn compose(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    let amp = cfg.perturbation;
    let bump = move |x: f64| amp * x.sin();
    let perturb: Option<&(dyn Fn(f64) -> f64 + Sync)> = (amp != 0.0).then_some(&bump);
    let c = compose_from_noise(&pb.model, &noises, &compose_config(cfg), perturb)?;
    b.lap("compose");
    let tr = &c.triple;
    let mut cols = vec!["t".to_string(), "x".into(), "p".into(), "q".into()];
    cols.extend(mark_columns("r", pb.model.marks.names()));
    cols.push("path_id".into());
    let mut t = Table {
        name: "compose".into(),
        columns: cols,
        rows: vec![],
    };
    let qm = tr.queries();
    for path in 0..tr.paths {
        for i in 0..=tr.steps {
            let p = tr.p_row(path, i);
            for k in 0..tr.len {
                let mut r = vec![Cell::Num(tr.times[i]), Cell::Num(qm.point(k)), Cell::Num(p[k]), Cell::Num(tr.q_at(path, i, k, 0))];
                r.extend((0..tr.marks).map(|e| Cell::Num(tr.r_row(path, i, e)[k])));
                r.push(Cell::Int(noises[path].path_id));
                t.rows.push(r);
            }
        }
    }
    b.tables.push(t);
    let integ = tr.integrability(&pb.model);
    b.checks.push(Check::at_least("compose.integrability_finite", f64::from(u8::from(integ.finite())), 1.0));
    let mut agreement = None;
    if amp == 0.0 && pb.oracle_field(0.0, qm.point(0)).is_some() {
        let a = compare_triple(tr, |t, x| pb.oracle_field(t, x).unwrap_or(f64::NAN));
        b.agreement("compose.oracle.p", &a.p, &cfg.tolerances);
        b.agreement("compose.oracle.q", &a.q, &cfg.tolerances);
        b.agreement("compose.oracle.r", &a.r, &cfg.tolerances);
        agreement = Some(a);
    }
    let res = bsipde_residual(&pb.model, tr, &noises)?;
    b.report("compose", json!({ "integrability": integ, "oracle": agreement, "residual": res }))?;
    b.lap("checks");
    Ok(())
}

fn verify_residual(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    let cc = compose_config(cfg);
    let base = residual_convergence(&pb.model, &noises, &cfg.levels, &cc, None)?;
    b.lap("baseline");
    if cfg.perturbation == 0.0 {
        b.slope("residual", &base.fit, cfg.tolerances.min_order);
        return b.report("residual", json!({ "baseline": base }));
    }
    let amp = cfg.perturbation;
    let bump = move |x: f64| amp * x.sin();
    let finest = &cfg.levels[cfg.levels.len() - 1..];
    let bad = residual_convergence(&pb.model, &noises, finest, &cc, Some(&bump))?;
    b.lap("perturbed");
    let r0 = base.reports.last().map_or(f64::NAN, |r| r.rms);
    let r1 = bad.reports[0].rms;
    b.checks.push(Check::at_least("residual.perturbation_ratio", r1 / r0, cfg.tolerances.perturbation_ratio));
    b.report("residual", json!({ "baseline": base, "perturbed": bad.reports[0], "ratio": r1 / r0 }))
}

fn verify_wentzell(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let mut out = vec![];
    for name in &cfg.wentzell {
        let case = wentzell_case(name)?;
        let m = &case.problem.model;
        let fine = generate_ensemble(TimeGrid::new(m.horizon, cfg.steps)?, &m.marks, m.dim_brownian, cfg.seed, cfg.paths)?;
        let st = wentzell_convergence(&case, &fine, &cfg.levels)?;
        b.slope(&format!("wentzell.{name}"), &st.fit, cfg.tolerances.min_order);
        out.push(st);
        b.lap(name);
    }
    b.report("wentzell", out)
}

fn system_noises(cfg: &ExperimentConfig, sys: &EvolutionSystem) -> Result<Vec<NoiseBundle>> {
    generate_ensemble(TimeGrid::new(sys.horizon, cfg.steps)?, &sys.marks, sys.dim_brownian, cfg.seed, cfg.paths)
}

fn verify_energy(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let sys = catalog_system(&cfg.system)?;
    let st = energy_convergence(&sys, &system_noises(cfg, &sys)?, &cfg.levels)?;
    b.slope(&format!("energy.{}", cfg.system), &st.fit, cfg.tolerances.min_order);
    b.lap("energy");
    b.report("energy", st)
}

fn galerkin(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let sys = catalog_system(&cfg.system)?;
    let noises = system_noises(cfg, &sys)?;
    let paths = solve_evolution_ensemble(&sys, &noises)?;
    b.lap("solve");
    let energy = energy_residual(&sys, &paths);
    let mut report = json!({ "system": sys.name, "modes": sys.n, "energy": { "max": energy.max, "rms": energy.rms } });
    if cfg.system == "zero" {
        b.checks.push(Check::at_most("galerkin.zero_residual", energy.max, cfg.tolerances.zero_residual));
    }
    if cfg.system == "heat" {
        let worst = paths.iter().map(|p| heat_decay_error(&sys, p)).fold(0.0_f64, f64::max);
        b.checks.push(Check::at_most("galerkin.heat_decay", worst, cfg.tolerances.heat_decay));
        report["heat_decay"] = json!(worst);
    }
    if let Some(p) = fourier_params(&cfg.system) {
        let (lambda, alpha) = fourier_constants(&p);
        let times = [0.0, 0.5 * sys.horizon, sys.horizon];
        let probe = coercivity_probe(&sys, &times, lambda, alpha, 64, cfg.seed)?;
        b.checks.push(Check::at_least("galerkin.coercivity_slack", probe.random_min.min(probe.pencil_min), cfg.tolerances.probe_slack));
        report["coercivity"] = serde_json::to_value(&probe)?;
    }
    b.lap("checks");
    b.report("galerkin", report)
}

fn fourier_params(name: &str) -> Option<FourierParams> {
    match name {
        "fourier-coercive" => Some(crate::galerkin::coercive_params()),
        "fourier-degenerate" => Some(crate::galerkin::degenerate_params()),
        _ => None,
    }
}

fn verify_flow(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let noises = noises_for(cfg, &pb)?;
    flow_checks(cfg, &pb, &noises, b)
}

fn convergence(cfg: &ExperimentConfig, b: &mut Builder) -> Result<()> {
    let pb = problem(cfg)?;
    let fine = noises_for(cfg, &pb)?;
    let mesh = cfg.mesh.uniform().points();
    let mut t = Table::new("convergence", &["study", "steps", "dt", "error"]);
    let mut errs = vec![];
    for &n in &cfg.levels {
        let nb = coarsen_all(&fine, cfg.steps, n)?;
        let flow = simulate_flow_ensemble(&pb.model, &nb, &mesh)?;
        errs.push(inversion_identity(&inverse_field(cfg, &pb, &nb, &flow)?, &flow)?.rms);
    }
    let dts: Vec<f64> = cfg.levels.iter().map(|&n| pb.model.horizon / n as f64).collect();
    let inv_fit = fit_order(&dts, &errs);
    b.slope(&format!("inverse.{}", cfg.inverse_method.tag()), &inv_fit, cfg.tolerances.min_order);
    for ((n, dt), e) in cfg.levels.iter().zip(&dts).zip(&errs) {
        t.rows.push(vec![Cell::Text("inverse".into()), Cell::Int(*n as u64), Cell::Num(*dt), Cell::Num(*e)]);
    }
    b.lap("inverse");
    let res = residual_convergence(&pb.model, &fine, &cfg.levels, &compose_config(cfg), None)?;
    b.slope("residual", &res.fit, cfg.tolerances.min_order);
    for r in &res.reports {
        t.rows.push(vec![Cell::Text("residual".into()), Cell::Int(r.steps as u64), Cell::Num(r.dt), Cell::Num(r.rms)]);
    }
    b.lap("residual");
    b.tables.push(t);
    b.report("convergence", json!({ "inverse": inv_fit, "residual": res }))
}

fn catalog(b: &mut Builder) -> Result<()> {
    let mut t = Table::new("catalog", &["kind", "name"]);
    let mut problems = serde_json::Map::new();
    for name in PROBLEM_NAMES {
        t.rows.push(vec![Cell::Text("problem".into()), Cell::Text(name.into())]);
        problems.insert(name.into(), serde_json::to_value(ProblemParams::defaults(name)?)?);
    }
    for name in SYSTEM_NAMES {
        t.rows.push(vec![Cell::Text("system".into()), Cell::Text(name.into())]);
    }
    for name in WENTZELL_CASES {
        t.rows.push(vec![Cell::Text("wentzell".into()), Cell::Text(name.into())]);
    }
    let methods: Vec<&str> = [InverseMethod::GridInversion, InverseMethod::Sipde, InverseMethod::BackwardSde]
        .iter()
        .map(|m| m.tag())
        .collect();
    for m in &methods {
        t.rows.push(vec![Cell::Text("inverse-method".into()), Cell::Text(m.to_string())]);
    }
    b.tables.push(t);
    b.report(
        "catalog",
        json!({ "problems": problems, "systems": SYSTEM_NAMES, "wentzell": WENTZELL_CASES, "inverse_methods": methods }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to rerun: the resolved config, its hash, the seed and
/// versions, plus digests of the written tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Value,
    pub config: ExperimentConfig,
    pub tables: Vec<ArtifactEntry>,
    pub pass: bool,
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| config("out_dir", format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Write tables in `cfg.format`, every report, `summary.json` and
/// `manifest.json` to `cfg.out_dir`.
pub fn emit_outputs(cfg: &ExperimentConfig, run: &Run) -> Result<Manifest> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| config("out_dir", format!("{}: {e}", dir.display())))?;
    let mut tables = vec![];
    for t in &run.tables {
        let (file, bytes) = match cfg.format {
            Format::Csv => (format!("{}.csv", t.name), t.to_csv()?),
            Format::Json => (format!("{}.json", t.name), t.to_json()?),
        };
        let sha256 = write(dir, &file, &bytes)?;
        tables.push(ArtifactEntry { file, sha256 });
    }
    for (name, value) in &run.reports {
        write(dir, &format!("{name}_report.json"), &serde_json::to_vec_pretty(value)?)?;
    }
    write(dir, "summary.json", &serde_json::to_vec_pretty(&run.summary)?)?;
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: run.summary.command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions: json!({ "bsipde": env!("CARGO_PKG_VERSION"), "table_format": 1 }),
        config: cfg.clone(),
        tables,
        pass: run.summary.pass,
    };
    write(dir, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
