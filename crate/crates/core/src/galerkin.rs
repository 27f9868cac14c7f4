//! Finite-basis solver for the linear jump evolution equation
//! `du = A u dt + B u dW + int A~ u(t-) dN~`, written in coordinates as
//! `G_H dg = (A + sum_e v(e) A~_e) g dt + B g dW + sum_e A~_e g(t-) dN~_e`.
//! Expanding the compensated measure, the coefficient scheme moves with
//! drift `A` between jumps and takes `G_H dg = A~_e g` at a jump.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::MarkSpace;
use crate::noise::{coarsen_noise, keyed_rng, AdaptedGrid, NoiseBundle, StreamKind};
use crate::stats::{fit_order, max_abs, rms, OrderFit};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

fn constant(m: DMatrix<f64>) -> MatrixFn {
    Arc::new(move |_| m.clone())
}

/// Linear evolution system on an `n`-element basis.
#[derive(Clone)]
pub struct EvolutionSystem {
    pub name: String,
    pub n: usize,
    pub dim_brownian: usize,
    pub marks: MarkSpace,
    pub horizon: f64,
    /// `<nu_i, nu_j>_V`.
    pub gram_v: DMatrix<f64>,
    /// `<nu_i, nu_j>_H`.
    pub gram_h: DMatrix<f64>,
    /// Drift between jumps, entries `<A nu_j, nu_i>` net of the compensator.
    pub a: MatrixFn,
    pub b: Vec<MatrixFn>,
    pub a_tilde: Vec<MatrixFn>,
    /// `(u0, nu_i)_H`.
    pub projection: DVector<f64>,
}

impl EvolutionSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for (name, g) in [("gram_h", &self.gram_h), ("gram_v", &self.gram_v)] {
            if g.nrows() != n || g.ncols() != n {
                return Err(invalid(name, g.nrows(), "must be n x n"));
            }
            if (g - g.transpose()).amax() > 1e-12 * (1.0 + g.amax()) {
                return Err(invalid(name, "asymmetric", "Gram matrices must be symmetric"));
            }
            if Cholesky::new(g.clone()).is_none() {
                return Err(invalid(name, "indefinite", "Gram matrices must be positive definite"));
            }
        }
        if self.b.len() != self.dim_brownian || self.a_tilde.len() != self.marks.len() {
            return Err(invalid("operators", self.b.len(), "one B per Brownian component and one A~ per mark"));
        }
        if self.projection.len() != n {
            return Err(invalid("projection", self.projection.len(), "must have n entries"));
        }
        for t in [0.0, 0.5 * self.horizon, self.horizon] {
            let mats = std::iter::once((self.a)(t))
                .chain(self.b.iter().map(|f| f(t)))
                .chain(self.a_tilde.iter().map(|f| f(t)));
            for m in mats {
                if m.nrows() != n || m.ncols() != n || m.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("operators", t, "n x n and finite at grid times"));
                }
            }
        }
        Ok(())
    }

    fn gram_h_chol(&self) -> Cholesky<f64, Dyn> {
        Cholesky::new(self.gram_h.clone()).expect("validated")
    }

    /// `g(0) = G_H^{-1} (u0, nu)`.
    pub fn initial_coefficients(&self) -> DVector<f64> {
        self.gram_h_chol().solve(&self.projection)
    }

    /// Same system with `u0` scaled by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            projection: &self.projection * k,
            ..self.clone()
        }
    }

    /// The operator of the evolution equation, `A + sum_e v(e) A~_e`.
    pub fn generator(&self, t: f64) -> DMatrix<f64> {
        let mut m = (self.a)(t);
        for (e, f) in self.a_tilde.iter().enumerate() {
            m += f(t) * self.marks.intensity(e);
        }
        m
    }
}

/// Coefficients at every node of the jump-adapted grid, `[node][i]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GalerkinPath {
    pub path_id: u64,
    pub grid: AdaptedGrid,
    pub n: usize,
    pub coeffs: Vec<f64>,
    pub left: Vec<f64>,
    pub h_norms: Vec<f64>,
}

impl GalerkinPath {
    pub fn at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.coeffs[k * self.n..(k + 1) * self.n])
    }

    pub fn left_at(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.left[k * self.n..(k + 1) * self.n])
    }
}

/// Explicit step size bound `dt <= 2 / |G_H^{-1} A|`.
fn stiffness_guard(system: &EvolutionSystem, dt: f64) -> Result<()> {
    let chol = system.gram_h_chol();
    let mut worst = 0.0_f64;
    for t in [0.0, 0.5 * system.horizon, system.horizon] {
        let m = chol.solve(&(system.a)(t));
        worst = worst.max(m.svd(false, false).singular_values.max());
    }
    if worst * dt > 2.0 {
        return Err(Error::Stability {
            message: format!("explicit Galerkin step too stiff: dt |G^-1 A| = {:.3e}", worst * dt),
            suggested_dt: 1.8 / worst,
        });
    }
    Ok(())
}

/// Jump input for the iteration mode: `None` uses the solution's own left
/// limit, `Some` a frozen path of left limits on the same grid.
fn solve_with(system: &EvolutionSystem, noise: &NoiseBundle, frozen: Option<&GalerkinPath>) -> Result<GalerkinPath> {
    let n = system.n;
    let d = system.dim_brownian;
    let grid = AdaptedGrid::build(noise);
    let chol = system.gram_h_chol();
    let gh = &system.gram_h;
    let mut g = system.initial_coefficients();
    let mut coeffs = Vec::with_capacity(grid.len() * n);
    let mut left = Vec::with_capacity(grid.len() * n);
    let mut h_norms = Vec::with_capacity(grid.len());
    let push = |v: &DVector<f64>, out: &mut Vec<f64>| out.extend_from_slice(v.as_slice());
    push(&g, &mut coeffs);
    push(&g, &mut left);
    h_norms.push(g.dot(&(gh * &g)).sqrt());
    let mut dw = vec![0.0; d];
    for k in 0..grid.len() - 1 {
        let dt = grid.step(k, &mut dw);
        let t = grid.times[k];
        if dt > 0.0 {
            let mut rhs = (system.a)(t) * &g * dt;
            for (r, b) in system.b.iter().enumerate() {
                rhs += b(t) * &g * dw[r];
            }
            g += chol.solve(&rhs);
        }
        push(&g, &mut left);
        if let Some(e) = grid.jump[k + 1] {
            let input = match frozen {
                Some(p) => p.left_at(k + 1),
                None => g.clone(),
            };
            g += chol.solve(&(system.a_tilde[e](grid.times[k + 1]) * input));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                path_id: noise.path_id,
                t: grid.times[k + 1],
                mesh_index: 0,
            });
        }
        push(&g, &mut coeffs);
        h_norms.push(g.dot(&(gh * &g)).sqrt());
    }
    Ok(GalerkinPath {
        path_id: noise.path_id,
        grid,
        n,
        coeffs,
        left,
        h_norms,
    })
}

pub fn solve_evolution(system: &EvolutionSystem, noise: &NoiseBundle) -> Result<GalerkinPath> {
    system.validate()?;
    if noise.dim_brownian != system.dim_brownian {
        return Err(invalid("dim_brownian", noise.dim_brownian, "noise and system Brownian dimensions differ"));
    }
    stiffness_guard(system, noise.grid.dt())?;
    solve_with(system, noise, None)
}

pub fn solve_evolution_ensemble(system: &EvolutionSystem, noises: &[NoiseBundle]) -> Result<Vec<GalerkinPath>> {
    noises.par_iter().map(|nb| solve_evolution(system, nb)).collect()
}

/// One sweep of the fixed-point iteration: the distance to the previous
/// iterate and to the direct solution, both sup-norm over nodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sweep {
    pub change: f64,
    pub error: f64,
    /// Ratio of successive changes; `None` while the previous change is 0.
    pub contraction: Option<f64>,
}

/// Iterate `h -> solve(frozen jump input h)` from `h = 0`.
pub fn fixed_point_iteration(system: &EvolutionSystem, noise: &NoiseBundle, sweeps: usize) -> Result<Vec<Sweep>> {
    let direct = solve_evolution(system, noise)?;
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let mut h = GalerkinPath {
        coeffs: vec![0.0; direct.coeffs.len()],
        left: vec![0.0; direct.left.len()],
        ..direct.clone()
    };
    let mut out: Vec<Sweep> = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let next = solve_with(system, noise, Some(&h))?;
        let change = sup(&next.coeffs, &h.coeffs);
        let contraction = out.last().filter(|s| s.change > 0.0).map(|s| change / s.change);
        out.push(Sweep {
            change,
            error: sup(&next.coeffs, &direct.coeffs),
            contraction,
        });
        h = next;
    }
    Ok(out)
}

/// Energy balance on one path: `|g|_H^2` against the initial energy plus the
/// integrated terms, accumulated per node.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub a_quadratic: f64,
    pub compensator_cross: f64,
    pub b_martingale: f64,
    pub b_quadratic_variation: f64,
    pub jump_martingale: f64,
    pub jump_compensator: f64,
}

impl EnergyTerms {
    fn total(&self) -> f64 {
        self.a_quadratic
            + self.compensator_cross
            + self.b_martingale
            + self.b_quadratic_variation
            + self.jump_martingale
            + self.jump_compensator
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyPath {
    pub path_id: u64,
    pub max_residual: f64,
    pub terms: EnergyTerms,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub system: String,
    pub max: f64,
    /// RMS over paths of the per-path maximum.
    pub rms: f64,
    pub paths: Vec<EnergyPath>,
}

pub fn energy_residual_path(system: &EvolutionSystem, path: &GalerkinPath) -> EnergyPath {
    let gh = &system.gram_h;
    let chol = system.gram_h_chol();
    let grid = &path.grid;
    let d = system.dim_brownian;
    let norm2 = |g: &DVector<f64>| g.dot(&(gh * g));
    // `|M g|_H^2` for an operator matrix M in `<M nu_j, nu_i>` form.
    let op_norm2 = |mg: &DVector<f64>| mg.dot(&chol.solve(mg));
    let e0 = norm2(&path.at(0));
    let mut terms = EnergyTerms::default();
    let mut worst = 0.0_f64;
    let mut dw = vec![0.0; d];
    for k in 0..grid.len() - 1 {
        let dt = grid.step(k, &mut dw);
        let t = grid.times[k];
        let g = path.at(k);
        if dt > 0.0 {
            terms.a_quadratic += 2.0 * g.dot(&((system.a)(t) * &g)) * dt;
            for (r, b) in system.b.iter().enumerate() {
                let bg = b(t) * &g;
                terms.b_martingale += 2.0 * g.dot(&bg) * dw[r];
                terms.b_quadratic_variation += op_norm2(&bg) * dt;
            }
            for (e, at) in system.a_tilde.iter().enumerate() {
                let v = system.marks.intensity(e);
                let ag = at(t) * &g;
                let gag = g.dot(&ag);
                terms.compensator_cross += 2.0 * v * gag * dt;
                // Compensated part of the jump sum, then the compensator of
                // its quadratic piece.
                terms.jump_martingale -= v * (2.0 * gag + op_norm2(&ag)) * dt;
                terms.jump_compensator += v * op_norm2(&ag) * dt;
            }
        }
        if let Some(e) = grid.jump[k + 1] {
            let gl = path.left_at(k + 1);
            let ag = system.a_tilde[e](grid.times[k + 1]) * &gl;
            terms.jump_martingale += 2.0 * gl.dot(&ag) + op_norm2(&ag);
        }
        let lhs = norm2(&path.at(k + 1));
        worst = worst.max((lhs - e0 - terms.total()).abs());
    }
    EnergyPath {
        path_id: path.path_id,
        max_residual: worst,
        terms,
    }
}

pub fn energy_residual(system: &EvolutionSystem, paths: &[GalerkinPath]) -> EnergyReport {
    let per: Vec<EnergyPath> = paths.par_iter().map(|p| energy_residual_path(system, p)).collect();
    let maxes: Vec<f64> = per.iter().map(|p| p.max_residual).collect();
    EnergyReport {
        system: system.name.clone(),
        max: max_abs(&maxes),
        rms: rms(&maxes),
        paths: per,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyStudy {
    pub system: String,
    pub steps: Vec<usize>,
    pub rms: Vec<f64>,
    pub fit: OrderFit,
}

/// Energy residual over nested refinements of `fine`.
pub fn energy_convergence(system: &EvolutionSystem, fine: &[NoiseBundle], levels: &[usize]) -> Result<EnergyStudy> {
    let finest = fine.first().map(|b| b.grid.steps).ok_or_else(|| invalid("paths", 0, "at least one path"))?;
    let mut out = Vec::with_capacity(levels.len());
    for &n in levels {
        if n == 0 || finest % n != 0 {
            return Err(invalid("levels", n, "must divide the finest step count"));
        }
        let nb = fine.iter().map(|b| coarsen_noise(b, finest / n)).collect::<Result<Vec<_>>>()?;
        out.push(energy_residual(system, &solve_evolution_ensemble(system, &nb)?).rms);
    }
    let h: Vec<f64> = levels.iter().map(|&n| system.horizon / n as f64).collect();
    Ok(EnergyStudy {
        system: system.name.clone(),
        steps: levels.to_vec(),
        fit: fit_order(&h, &out),
        rms: out,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambda: f64,
    pub alpha: f64,
    /// Smallest slack over random unit vectors.
    pub random_min: f64,
    /// Smallest slack over unit vectors, from the symmetric pencil.
    pub pencil_min: f64,
    /// Largest `alpha` the pencil certifies with this `lambda`.
    pub certified_alpha: f64,
    pub certified: bool,
}

/// Slack tolerance for certification.
pub const PROBE_TOLERANCE: f64 = 1e-10;

/// Quadratic form of the slack
/// `-2<Au,u> + lambda |u|_H^2 - alpha |u|_V^2 - |Bu|_H^2 - sum_e v |A~u|_H^2`.
fn slack_form(system: &EvolutionSystem, t: f64, lambda: f64, alpha: f64) -> DMatrix<f64> {
    let chol = system.gram_h_chol();
    let a = system.generator(t);
    let mut q = -(&a + a.transpose()) + &system.gram_h * lambda - &system.gram_v * alpha;
    for b in &system.b {
        let m = b(t);
        q -= m.transpose() * chol.solve(&m);
    }
    for (e, at) in system.a_tilde.iter().enumerate() {
        let m = at(t);
        q -= m.transpose() * chol.solve(&m) * system.marks.intensity(e);
    }
    (&q + q.transpose()) * 0.5
}

/// Smallest eigenvalue of the pencil `(q, g)`, `g` positive definite.
fn pencil_min(q: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let l = Cholesky::new(g.clone()).expect("validated").l();
    let li = l.clone().try_inverse().expect("triangular factor is invertible");
    let m = &li * q * li.transpose();
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen().eigenvalues.min()
}

/// Check the coercivity inequality at the given times on `n_probe` random
/// unit vectors and on the extremal vectors of the pencil.
pub fn coercivity_probe(system: &EvolutionSystem, times: &[f64], lambda: f64, alpha: f64, n_probe: usize, seed: u64) -> Result<ProbeReport> {
    system.validate()?;
    let n = system.n;
    let mut random_min = f64::INFINITY;
    let mut pmin = f64::INFINITY;
    let mut cert = f64::INFINITY;
    for &t in times {
        let q = slack_form(system, t, lambda, alpha);
        pmin = pmin.min(pencil_min(&q, &system.gram_h));
        let q0 = slack_form(system, t, lambda, 0.0);
        cert = cert.min(pencil_min(&q0, &system.gram_v));
        for i in 0..n_probe {
            let mut rng = keyed_rng(seed, i as u64, StreamKind::Auxiliary, t.to_bits());
            let u = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let h2 = u.dot(&(&system.gram_h * &u));
            random_min = random_min.min(u.dot(&(&q * &u)) / h2);
        }
    }
    let overall = random_min.min(pmin);
    Ok(ProbeReport {
        lambda,
        alpha,
        random_min,
        pencil_min: pmin,
        certified_alpha: cert,
        certified: overall >= -PROBE_TOLERANCE,
    })
}

pub const SYSTEM_NAMES: [&str; 5] = ["zero", "scalar-jump", "heat", "fourier-coercive", "fourier-degenerate"];

/// Parameters of the scalar system `dg = a g dt + beta g dW + gamma g dN~`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScalarParams {
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    pub intensity: f64,
    pub g0: f64,
}

impl Default for ScalarParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            beta: 0.3,
            gamma: 0.2,
            intensity: 2.0,
            g0: 1.0,
        }
    }
}

pub fn scalar_system(p: ScalarParams) -> Result<EvolutionSystem> {
    let one = DMatrix::identity(1, 1);
    let sys = EvolutionSystem {
        name: "scalar-jump".into(),
        n: 1,
        dim_brownian: 1,
        marks: MarkSpace::from_intensities(&[p.intensity])?,
        horizon: 1.0,
        gram_v: one.clone(),
        gram_h: one.clone(),
        a: constant(&one * (p.a - p.gamma * p.intensity)),
        b: vec![constant(&one * p.beta)],
        a_tilde: vec![constant(&one * p.gamma)],
        projection: DVector::from_element(1, p.g0),
    };
    Ok(sys)
}

/// Closed-form coefficient of the scalar system.
pub fn scalar_oracle(p: &ScalarParams, t: f64, w: f64, jumps: usize) -> f64 {
    p.g0 * ((p.a - 0.5 * p.beta * p.beta - p.gamma * p.intensity) * t + p.beta * w).exp() * (1.0 + p.gamma).powi(jumps as i32)
}

/// Real Fourier basis `1, sqrt2 cos(2 pi k x), sqrt2 sin(2 pi k x)` on the
/// unit torus, `k = 1..=modes`, ordered `[1, c1, s1, c2, s2, ...]`.
/// H is L2, V is H1: `G_V = diag(1 + (2 pi k)^2)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FourierParams {
    pub modes: usize,
    /// Coefficient of the Laplacian.
    pub diffusion: f64,
    /// `B = b d/dx`.
    pub transport: f64,
    /// `A~ u = u(. + shift) - u`.
    pub shift: f64,
    pub intensity: f64,
}

fn wavenumber(i: usize) -> f64 {
    2.0 * PI * (i.div_ceil(2)) as f64
}

pub fn fourier_system(name: &str, p: FourierParams, u0: &[f64]) -> Result<EvolutionSystem> {
    let n = 2 * p.modes + 1;
    if u0.len() != n {
        return Err(invalid("u0", u0.len(), "one projection per basis function"));
    }
    let gram_h = DMatrix::identity(n, n);
    let gram_v = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + wavenumber(i).powi(2) } else { 0.0 });
    let lap = DMatrix::from_fn(n, n, |i, j| if i == j { -wavenumber(i).powi(2) } else { 0.0 });
    // d/dx: cos_k -> -w sin_k, sin_k -> w cos_k; entry (i, j) = <D nu_j, nu_i>.
    let mut dx = DMatrix::zeros(n, n);
    let mut shift = DMatrix::zeros(n, n);
    shift[(0, 0)] = 1.0;
    for k in 1..=p.modes {
        let (c, s) = (2 * k - 1, 2 * k);
        let w = wavenumber(c);
        dx[(s, c)] = -w;
        dx[(c, s)] = w;
        let th = w * p.shift;
        // cos(w(x+h)) = cos th cos - sin th sin; sin(w(x+h)) = cos th sin + sin th cos.
        shift[(c, c)] = th.cos();
        shift[(s, c)] = -th.sin();
        shift[(s, s)] = th.cos();
        shift[(c, s)] = th.sin();
    }
    let a_tilde = shift - DMatrix::identity(n, n);
    let comp = &a_tilde * p.intensity;
    Ok(EvolutionSystem {
        name: name.into(),
        n,
        dim_brownian: 1,
        marks: MarkSpace::from_intensities(&[p.intensity])?,
        horizon: 1.0,
        gram_v,
        gram_h,
        a: constant(lap * p.diffusion - comp),
        b: vec![constant(dx * p.transport)],
        a_tilde: vec![constant(a_tilde)],
        projection: DVector::from_column_slice(u0),
    })
}

/// Heat equation on the torus with modes `k <= modes`, started from
/// `u0 = 1 + sum_k sqrt2 (cos + sin)`; no noise enters.
pub fn heat_system(modes: usize) -> Result<EvolutionSystem> {
    let p = FourierParams {
        modes,
        diffusion: 1.0,
        transport: 0.0,
        shift: 0.0,
        intensity: 1.0,
    };
    let u0 = vec![1.0; 2 * modes + 1];
    let mut sys = fourier_system("heat", p, &u0)?;
    sys.horizon = 0.1;
    Ok(sys)
}

/// Nominal coercivity constants `(lambda, alpha)` of a Fourier system:
/// `2 a - b^2 = 2 delta` gives `alpha = delta`, `lambda = delta + 4 v`.
pub fn fourier_constants(p: &FourierParams) -> (f64, f64) {
    let delta = (p.diffusion - 0.5 * p.transport * p.transport).max(0.0);
    (delta + 4.0 * p.intensity, delta)
}

pub fn coercive_params() -> FourierParams {
    FourierParams {
        modes: 3,
        diffusion: 0.005,
        transport: 0.05,
        shift: 0.5,
        intensity: 1.0,
    }
}

pub fn degenerate_params() -> FourierParams {
    FourierParams {
        modes: 3,
        diffusion: 0.00125,
        transport: 0.05,
        shift: 0.5,
        intensity: 1.0,
    }
}

pub fn catalog_system(name: &str) -> Result<EvolutionSystem> {
    let ones = |p: &FourierParams| vec![1.0; 2 * p.modes + 1];
    match name {
        "zero" => {
            let p = FourierParams {
                modes: 1,
                diffusion: 0.0,
                transport: 0.0,
                shift: 0.0,
                intensity: 2.0,
            };
            let mut s = fourier_system("zero", p, &[1.0, 0.5, -0.25])?;
            s.a_tilde = vec![constant(DMatrix::zeros(3, 3))];
            s.a = constant(DMatrix::zeros(3, 3));
            Ok(s)
        }
        "scalar-jump" => scalar_system(ScalarParams::default()),
        "heat" => heat_system(1),
        "fourier-coercive" => {
            let p = coercive_params();
            fourier_system(name, p, &ones(&p))
        }
        "fourier-degenerate" => {
            let p = degenerate_params();
            fourier_system(name, p, &ones(&p))
        }
        _ => Err(Error::UnknownProblem {
            name: name.to_string(),
            available: SYSTEM_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// Worst relative gap between each heat mode at the horizon and
/// `exp(-(2 pi k)^2 t)` times its initial value.
pub fn heat_decay_error(system: &EvolutionSystem, path: &GalerkinPath) -> f64 {
    let g0 = path.at(0);
    let last = path.grid.len() - 1;
    let g = path.at(last);
    let t = path.grid.times[last];
    let mut worst = 0.0_f64;
    for i in 0..system.n {
        let want = g0[i] * (-wavenumber(i).powi(2) * t).exp();
        worst = worst.max(((g[i] - want) / want).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{generate_ensemble, generate_noise, TimeGrid};

    fn noise(sys: &EvolutionSystem, steps: usize, paths: usize) -> Vec<NoiseBundle> {
        generate_ensemble(TimeGrid::new(sys.horizon, steps).unwrap(), &sys.marks, sys.dim_brownian, 3, paths).unwrap()
    }

    #[test]
    fn frozen_system_is_static_and_energy_exact() {
        let sys = catalog_system("zero").unwrap();
        let nb = noise(&sys, 64, 4);
        let paths = solve_evolution_ensemble(&sys, &nb).unwrap();
        for p in &paths {
            assert!(p.coeffs.chunks(3).all(|c| c == [1.0, 0.5, -0.25]));
        }
        assert_eq!(energy_residual(&sys, &paths).max, 0.0);
    }

    #[test]
    fn initial_projection_solves_gram_system() {
        let mut sys = catalog_system("scalar-jump").unwrap();
        sys.gram_h = DMatrix::from_element(1, 1, 2.0);
        sys.gram_v = sys.gram_h.clone();
        let g0 = sys.initial_coefficients();
        assert!((&sys.gram_h * &g0 - &sys.projection).amax() < 1e-12);
    }

    #[test]
    fn scalar_system_matches_closed_form() {
        let p = ScalarParams::default();
        let sys = scalar_system(p).unwrap();
        let fine = noise(&sys, 2048, 64);
        let levels = [256, 512, 1024, 2048];
        let mut errs = vec![];
        for &n in &levels {
            let mut sq = 0.0;
            for b in &fine {
                let nb = coarsen_noise(b, 2048 / n).unwrap();
                let path = solve_evolution(&sys, &nb).unwrap();
                let last = path.grid.len() - 1;
                let want = scalar_oracle(&p, 1.0, path.grid.w_at(last)[0], nb.jumps.len());
                sq += (path.at(last)[0] - want).powi(2);
            }
            errs.push((sq / fine.len() as f64).sqrt());
        }
        let h: Vec<f64> = levels.iter().map(|n| 1.0 / *n as f64).collect();
        let fit = fit_order(&h, &errs);
        assert!(fit.order > 0.35 && fit.order < 0.75, "{fit:?}");
    }

    #[test]
    fn energy_residual_converges() {
        for (name, min) in [("scalar-jump", 0.45), ("fourier-coercive", 0.45), ("fourier-degenerate", 0.45)] {
            let sys = catalog_system(name).unwrap();
            let fine = noise(&sys, 16384, if sys.n == 1 { 256 } else { 64 });
            let st = energy_convergence(&sys, &fine, &[256, 1024, 4096, 16384]).unwrap();
            assert!(st.fit.passes(min), "{name} {:?}", st.fit);
        }
    }

    #[test]
    fn heat_modes_decay_and_energy_is_first_order() {
        let sys = heat_system(1).unwrap();
        let nb = generate_noise(TimeGrid::new(0.1, 10_000).unwrap(), &sys.marks, 1, 0, 0).unwrap();
        let path = solve_evolution(&sys, &nb).unwrap();
        assert!(heat_decay_error(&sys, &path) < 0.01);
        let fine = noise(&sys, 4096, 1);
        let st = energy_convergence(&sys, &fine, &[512, 1024, 2048, 4096]).unwrap();
        assert!((st.fit.order - 1.0).abs() < 0.1, "{:?}", st.fit);
    }

    #[test]
    fn euler_heat_matches_discrete_oracle_for_every_mode() {
        let sys = heat_system(3).unwrap();
        let nb = generate_noise(TimeGrid::new(0.1, 1000).unwrap(), &sys.marks, 1, 0, 0).unwrap();
        let path = solve_evolution(&sys, &nb).unwrap();
        let last = path.grid.len() - 1;
        for i in 0..sys.n {
            let lam = wavenumber(i).powi(2);
            let want = (1.0 - lam * 1e-4).powi(1000);
            assert!((path.at(last)[i] - want).abs() < 1e-12 * (1.0 + want.abs()) + 1e-13);
        }
    }

    #[test]
    fn linearity_is_bitwise() {
        let sys = catalog_system("fourier-coercive").unwrap();
        let nb = noise(&sys, 128, 1);
        let a = solve_evolution(&sys, &nb[0]).unwrap();
        let b = solve_evolution(&sys.scaled(2.0), &nb[0]).unwrap();
        assert!(a.coeffs.iter().zip(&b.coeffs).all(|(x, y)| 2.0 * x == *y));
    }

    #[test]
    fn fixed_point_iteration_is_exact_after_jumps_plus_one() {
        let sys = catalog_system("scalar-jump").unwrap();
        let nb = noise(&sys, 128, 1).remove(0);
        let jumps = nb.jumps.len();
        let sweeps = fixed_point_iteration(&sys, &nb, jumps + 2).unwrap();
        assert!(sweeps[jumps].error < 1e-14, "{sweeps:?}");
        assert!(sweeps[jumps + 1].change < 1e-14);
    }

    #[test]
    fn coercivity_certificates() {
        let sys = DMatrix::<f64>::identity(2, 2);
        let tight = EvolutionSystem {
            name: "minus-identity".into(),
            n: 2,
            dim_brownian: 1,
            marks: MarkSpace::from_intensities(&[1.0]).unwrap(),
            horizon: 1.0,
            gram_v: sys.clone(),
            gram_h: sys.clone(),
            a: constant(-sys.clone()),
            b: vec![constant(DMatrix::zeros(2, 2))],
            a_tilde: vec![constant(DMatrix::zeros(2, 2))],
            projection: DVector::zeros(2),
        };
        let r = coercivity_probe(&tight, &[0.0], 0.0, 2.0, 16, 1).unwrap();
        assert!(r.pencil_min.abs() < 1e-12 && r.certified);

        let p = coercive_params();
        let (lambda, alpha) = fourier_constants(&p);
        let s = catalog_system("fourier-coercive").unwrap();
        let r = coercivity_probe(&s, &[0.0], lambda, alpha, 64, 1).unwrap();
        assert!(r.certified && r.certified_alpha >= alpha - 1e-12, "{r:?}");

        let p = degenerate_params();
        let (lambda, alpha) = fourier_constants(&p);
        assert_eq!(alpha, 0.0);
        let s = catalog_system("fourier-degenerate").unwrap();
        let r = coercivity_probe(&s, &[0.0], lambda, 0.0, 64, 1).unwrap();
        assert!(r.certified && r.certified_alpha.abs() < 1e-10, "{r:?}");
        assert!(!coercivity_probe(&s, &[0.0], lambda, 0.01, 64, 1).unwrap().certified);
    }

    #[test]
    fn indefinite_gram_is_rejected() {
        let mut s = catalog_system("scalar-jump").unwrap();
        s.gram_h = DMatrix::from_element(1, 1, -1.0);
        assert!(s.validate().is_err());
        assert!(coercivity_probe(&s, &[0.0], 1.0, 0.0, 1, 0).is_err());
    }

    #[test]
    fn stiffness_guard_suggests_step() {
        let s = heat_system(4).unwrap();
        let nb = generate_noise(TimeGrid::new(0.1, 10).unwrap(), &s.marks, 1, 0, 0).unwrap();
        match solve_evolution(&s, &nb) {
            Err(Error::Stability { suggested_dt, .. }) => assert!(suggested_dt < 0.01),
            r => panic!("{:?}", r.map(|_| ())),
        }
    }
}
