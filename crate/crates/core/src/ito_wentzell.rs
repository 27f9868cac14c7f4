//! Pathwise check of the Itô-Wentzell formula with jumps: a random field
//! `F(t, x) = F0(x) + int G dt + int H dW + int J dN~` composed with a jump
//! diffusion `X`, evaluated directly and through the integral expansion.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{catalog_problem, NoiseState, TestProblem};
use crate::error::{invalid, Error, Result};
use crate::model::{At, CoefficientModel, Mark};
use crate::noise::{coarsen_noise, AdaptedGrid, NoiseBundle};
use crate::sde_flow::simulate_flow;
use crate::stats::{fit_order, max_abs, rms, OrderFit};

/// Central-difference step for field derivatives without analytic forms.
pub const FIELD_FD_STEP: f64 = 1e-4;

pub type ComponentFn = Arc<dyn Fn(f64, Mark, &[f64], &mut [f64]) + Send + Sync>;
/// Writes the Jacobian (`dim x n`) and Hessian (`dim x n x n`).
pub type ComponentDerivFn = Arc<dyn Fn(f64, Mark, &[f64], &mut [f64], &mut [f64]) + Send + Sync>;
/// Exact state of the driving process at a node, when known.
pub type ExactStateFn = Arc<dyn Fn(&AdaptedGrid, usize) -> Vec<f64> + Send + Sync>;

/// A `dim`-valued function of `(t, mark, x)`; the mark is ignored except for
/// the jump integrand.
#[derive(Clone)]
pub struct Component {
    pub dim: usize,
    value: ComponentFn,
    derivs: Option<ComponentDerivFn>,
}

impl Component {
    pub fn new(dim: usize, value: impl Fn(f64, Mark, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            derivs: None,
        }
    }

    pub fn with_derivatives(mut self, f: impl Fn(f64, Mark, &[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.derivs = Some(Arc::new(f));
        self
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivs.is_some()
    }

    fn eval(&self, t: f64, e: Mark, x: &[f64], out: &mut [f64]) {
        (self.value)(t, e, x, out)
    }

    /// Jacobian and Hessian, analytic when supplied.
    fn derivatives(&self, t: f64, e: Mark, x: &[f64], jac: &mut [f64], hess: &mut [f64]) {
        if let Some(d) = &self.derivs {
            return d(t, e, x, jac, hess);
        }
        fd_derivatives(self.dim, x, &|y: &[f64], out: &mut [f64]| self.eval(t, e, y, out), jac, hess)
    }
}

/// Central differences with step `FIELD_FD_STEP` of a `k`-valued function.
fn fd_derivatives(k: usize, x: &[f64], f: &dyn Fn(&[f64], &mut [f64]), jac: &mut [f64], hess: &mut [f64]) {
    let n = x.len();
    let mut xp = x.to_vec();
    let (mut fp, mut fm, mut f0) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let (mut fpp, mut fpm, mut fmp, mut fmm) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    f(x, &mut f0);
    let h = FIELD_FD_STEP;
    for i in 0..n {
        xp[i] = x[i] + h;
        f(&xp, &mut fp);
        xp[i] = x[i] - h;
        f(&xp, &mut fm);
        xp[i] = x[i];
        for c in 0..k {
            jac[c * n + i] = (fp[c] - fm[c]) / (2.0 * h);
            hess[(c * n + i) * n + i] = (fp[c] - 2.0 * f0[c] + fm[c]) / (h * h);
        }
        for j in 0..i {
            let mut probe = |si: f64, sj: f64, out: &mut [f64]| {
                xp[i] = x[i] + si * h;
                xp[j] = x[j] + sj * h;
                f(&xp, out);
                xp[i] = x[i];
                xp[j] = x[j];
            };
            probe(1.0, 1.0, &mut fpp);
            probe(1.0, -1.0, &mut fpm);
            probe(-1.0, 1.0, &mut fmp);
            probe(-1.0, -1.0, &mut fmm);
            for c in 0..k {
                let v = (fpp[c] - fpm[c] - fmp[c] + fmm[c]) / (4.0 * h * h);
                hess[(c * n + i) * n + j] = v;
                hess[(c * n + j) * n + i] = v;
            }
        }
    }
}

/// Semimartingale random field; absent parts are zero.
#[derive(Clone)]
pub struct SemimartingaleField {
    pub name: String,
    pub dim_state: usize,
    pub dim_brownian: usize,
    pub f0: Component,
    pub g: Option<Component>,
    pub h: Option<Component>,
    pub j: Option<Component>,
}

impl SemimartingaleField {
    pub fn new(name: &str, dim_state: usize, dim_brownian: usize, f0: Component) -> Self {
        Self {
            name: name.to_string(),
            dim_state,
            dim_brownian,
            f0,
            g: None,
            h: None,
            j: None,
        }
    }

    pub fn with_g(mut self, g: Component) -> Self {
        self.g = Some(g);
        self
    }

    pub fn with_h(mut self, h: Component) -> Self {
        self.h = Some(h);
        self
    }

    pub fn with_j(mut self, j: Component) -> Self {
        self.j = Some(j);
        self
    }

    fn validate(&self, model: &CoefficientModel) -> Result<()> {
        if self.dim_state != model.dim_state || self.dim_brownian != model.dim_brownian {
            return Err(invalid("field", &self.name, "field and model dimensions must agree"));
        }
        let ok = self.f0.dim == 1
            && self.g.as_ref().map_or(true, |c| c.dim == 1)
            && self.h.as_ref().map_or(true, |c| c.dim == self.dim_brownian)
            && self.j.as_ref().map_or(true, |c| c.dim == 1);
        if !ok {
            return Err(invalid("field", &self.name, "F0, G, J scalar and H of Brownian dimension"));
        }
        Ok(())
    }

    fn analytic(&self) -> bool {
        self.f0.has_derivatives()
            && self.g.as_ref().map_or(true, Component::has_derivatives)
            && self.h.as_ref().map_or(true, Component::has_derivatives)
            && self.j.as_ref().map_or(true, Component::has_derivatives)
    }

    /// Largest gap between supplied derivatives and central differences over
    /// `points` (each `n` long) at time `t`. Infinite if a component blows up.
    pub fn smoothness_probe(&self, t: f64, marks: usize, points: &[f64]) -> f64 {
        let n = self.dim_state;
        let mut worst = 0.0_f64;
        let parts: Vec<(&Component, usize)> = std::iter::once((&self.f0, 1))
            .chain(self.g.iter().map(|c| (c, 1)))
            .chain(self.h.iter().map(|c| (c, 1)))
            .chain(self.j.iter().map(|c| (c, marks.max(1))))
            .collect();
        for (c, mk) in parts {
            let fd = Component {
                derivs: None,
                ..c.clone()
            };
            for e in 0..mk {
                for x in points.chunks(n) {
                    let (mut ja, mut ha) = (vec![0.0; c.dim * n], vec![0.0; c.dim * n * n]);
                    let (mut jf, mut hf) = (vec![0.0; c.dim * n], vec![0.0; c.dim * n * n]);
                    c.derivatives(t, e, x, &mut ja, &mut ha);
                    fd.derivatives(t, e, x, &mut jf, &mut hf);
                    for (a, b) in ja.iter().zip(&jf).chain(ha.iter().zip(&hf)) {
                        let gap = (a - b).abs() / (1.0 + b.abs());
                        worst = worst.max(if gap.is_finite() { gap } else { f64::INFINITY });
                    }
                }
            }
        }
        worst
    }
}

struct Local {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// `F` at node `k` of one path, rebuilt from the increments of `G`, `H`, `J`.
struct History<'a> {
    field: &'a SemimartingaleField,
    grid: &'a AdaptedGrid,
    intensity: &'a [f64],
}

impl History<'_> {
    /// Value at node `upto`; `left` drops the jump landing on that node.
    fn value(&self, upto: usize, left: bool, y: &[f64]) -> f64 {
        let f = self.field;
        let d = f.dim_brownian;
        let mut s = [0.0];
        let mut hv = vec![0.0; d];
        let mut dw = vec![0.0; d];
        f.f0.eval(0.0, 0, y, &mut s);
        let mut acc = s[0];
        for i in 0..upto {
            let dt = self.grid.step(i, &mut dw);
            let t = self.grid.times[i];
            if dt > 0.0 {
                if let Some(g) = &f.g {
                    g.eval(t, 0, y, &mut s);
                    acc += s[0] * dt;
                }
                if let Some(h) = &f.h {
                    h.eval(t, 0, y, &mut hv);
                    acc += hv.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(j) = &f.j {
                    for (e, v) in self.intensity.iter().enumerate() {
                        j.eval(t, e, y, &mut s);
                        acc -= v * s[0] * dt;
                    }
                }
            }
            if let (Some(j), Some(e)) = (&f.j, self.grid.jump[i + 1]) {
                if i + 1 < upto || !left {
                    j.eval(self.grid.times[i + 1], e, y, &mut s);
                    acc += s[0];
                }
            }
        }
        acc
    }

    fn local(&self, upto: usize, y: &[f64]) -> Local {
        let f = self.field;
        let n = f.dim_state;
        let d = f.dim_brownian;
        let value = self.value(upto, false, y);
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        if f.analytic() {
            let (mut jac, mut hs) = (vec![0.0; d.max(1) * n], vec![0.0; d.max(1) * n * n]);
            let mut dw = vec![0.0; d];
            let mut add = |c: &Component, t: f64, e: Mark, w: &[f64], grad: &mut [f64], hess: &mut [f64]| {
                c.derivatives(t, e, y, &mut jac, &mut hs);
                for (r, wr) in w.iter().enumerate() {
                    for i in 0..n {
                        grad[i] += wr * jac[r * n + i];
                    }
                    for ij in 0..n * n {
                        hess[ij] += wr * hs[r * n * n + ij];
                    }
                }
            };
            add(&f.f0, 0.0, 0, &[1.0], &mut grad, &mut hess);
            for i in 0..upto {
                let dt = self.grid.step(i, &mut dw);
                let t = self.grid.times[i];
                if dt > 0.0 {
                    if let Some(g) = &f.g {
                        add(g, t, 0, &[dt], &mut grad, &mut hess);
                    }
                    if let Some(h) = &f.h {
                        add(h, t, 0, &dw, &mut grad, &mut hess);
                    }
                    if let Some(j) = &f.j {
                        for (e, v) in self.intensity.iter().enumerate() {
                            add(j, t, e, &[-v * dt], &mut grad, &mut hess);
                        }
                    }
                }
                if let (Some(j), Some(e)) = (&f.j, self.grid.jump[i + 1]) {
                    add(j, self.grid.times[i + 1], e, &[1.0], &mut grad, &mut hess);
                }
            }
        } else {
            fd_derivatives(1, y, &|x: &[f64], out: &mut [f64]| out[0] = self.value(upto, false, x), &mut grad, &mut hess);
        }
        Local { value, grad, hess }
    }
}

/// Per-path outcome of one check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WentzellPath {
    pub path_id: u64,
    pub max_discrepancy: f64,
    /// Largest gap between the direct jump of `F(t, X_t)` and the discrete
    /// jump increment on the right side.
    pub jump_consistency: f64,
    pub jumps: usize,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WentzellReport {
    pub field: String,
    pub max: f64,
    /// RMS over paths of the per-path maximum.
    pub rms: f64,
    pub jump_consistency: f64,
    pub paths: Vec<WentzellPath>,
}

fn check_finite(what: &'static str, t: f64, v: f64, x: &[f64]) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            t,
            mark: None,
            x: x.to_vec(),
        })
    }
}

/// Both sides of the formula along one path started at `x0`. With `exact`,
/// the left side uses the exact state instead of the simulated one.
pub fn verify_wentzell_path(
    field: &SemimartingaleField,
    model: &CoefficientModel,
    noise: &NoiseBundle,
    x0: &[f64],
    exact: Option<&ExactStateFn>,
) -> Result<WentzellPath> {
    field.validate(model)?;
    let n = model.dim_state;
    let d = model.dim_brownian;
    let flow = simulate_flow(model, noise, x0)?;
    let grid = &flow.grid;
    let hist = History {
        field,
        grid,
        intensity: model.marks.intensities(),
    };
    let nodes = grid.len();
    let state = |k: usize| &flow.values[k * n..(k + 1) * n];
    let left_state = |k: usize| &flow.left[k * n..(k + 1) * n];

    let mut lhs = Vec::with_capacity(nodes);
    let mut rhs = Vec::with_capacity(nodes);
    let mut b = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    let mut g = vec![0.0; n];
    let mut hv = vec![0.0; d];
    let mut hjac = vec![0.0; d * n];
    let mut hhess = vec![0.0; d * n * n];
    let mut s = [0.0];
    let mut s2 = [0.0];
    let mut xg = vec![0.0; n];
    let mut dw = vec![0.0; d];
    let mut jump_consistency = 0.0_f64;
    let mut jumps = 0;

    let direct = |k: usize| -> f64 {
        match exact {
            Some(f) => hist.value(k, false, &f(grid, k)),
            None => hist.value(k, false, state(k)),
        }
    };
    lhs.push(direct(0));
    rhs.push(lhs[0]);
    let mut acc = rhs[0];
    for k in 0..nodes - 1 {
        let dt = grid.step(k, &mut dw);
        let t = grid.times[k];
        let at = At {
            t,
            factor: grid.w_at(k),
        };
        if dt > 0.0 {
            let x = state(k);
            let loc = hist.local(k, x);
            model.drift(at, x, &mut b);
            model.diffusion(at, x, &mut sig);
            let mut drift = 0.0;
            if let Some(gc) = &field.g {
                gc.eval(t, 0, x, &mut s);
                drift += s[0];
            }
            for i in 0..n {
                drift += loc.grad[i] * b[i];
                for j in 0..n {
                    let a: f64 = (0..d).map(|r| sig[i * d + r] * sig[j * d + r]).sum();
                    drift += 0.5 * loc.hess[i * n + j] * a;
                }
            }
            let mut mart = 0.0;
            if let Some(hc) = &field.h {
                hc.eval(t, 0, x, &mut hv);
                hc.derivatives(t, 0, x, &mut hjac, &mut hhess);
                for r in 0..d {
                    for i in 0..n {
                        drift += hjac[r * n + i] * sig[i * d + r];
                    }
                    mart += hv[r] * dw[r];
                }
            }
            for r in 0..d {
                let gs: f64 = (0..n).map(|i| loc.grad[i] * sig[i * d + r]).sum();
                mart += gs * dw[r];
            }
            // Compensator of the jump sum and the compensator correction.
            let mut comp = 0.0;
            let mut correction = 0.0;
            for (e, v) in model.marks.intensities().iter().enumerate() {
                model.jump(at, e, x, &mut g);
                for i in 0..n {
                    xg[i] = x[i] + g[i];
                }
                let shifted = hist.value(k, false, &xg);
                let (mut j_shift, mut j_here) = (0.0, 0.0);
                if let Some(jc) = &field.j {
                    jc.eval(t, e, &xg, &mut s);
                    jc.eval(t, e, x, &mut s2);
                    j_shift = s[0];
                    j_here = s2[0];
                }
                let dfg: f64 = (0..n).map(|i| loc.grad[i] * g[i]).sum();
                comp -= v * (shifted - loc.value + j_shift);
                correction += v * (shifted - loc.value - dfg + j_shift - j_here);
            }
            acc += (drift + comp + correction) * dt + mart;
            check_finite("Ito-Wentzell increment", t, acc, x)?;
        }
        if let Some(e) = grid.jump[k + 1] {
            let tj = grid.times[k + 1];
            let at = At {
                t: tj,
                factor: grid.w_at(k + 1),
            };
            let xm = left_state(k + 1);
            model.jump(at, e, xm, &mut g);
            for i in 0..n {
                xg[i] = xm[i] + g[i];
            }
            let before = hist.value(k + 1, true, xm);
            let mut inc = hist.value(k + 1, true, &xg) - before;
            if let Some(jc) = &field.j {
                jc.eval(tj, e, &xg, &mut s);
                inc += s[0];
            }
            acc += inc;
            let direct_jump = hist.value(k + 1, false, state(k + 1)) - before;
            jump_consistency = jump_consistency.max((direct_jump - inc).abs());
            jumps += 1;
        }
        lhs.push(direct(k + 1));
        rhs.push(acc);
    }
    let max_discrepancy = lhs.iter().zip(&rhs).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(WentzellPath {
        path_id: noise.path_id,
        max_discrepancy,
        jump_consistency,
        jumps,
        times: grid.times.clone(),
        lhs,
        rhs,
    })
}

pub fn verify_wentzell(
    field: &SemimartingaleField,
    model: &CoefficientModel,
    noises: &[NoiseBundle],
    x0: &[f64],
    exact: Option<&ExactStateFn>,
) -> Result<WentzellReport> {
    let paths = noises
        .par_iter()
        .map(|nb| verify_wentzell_path(field, model, nb, x0, exact))
        .collect::<Result<Vec<_>>>()?;
    let maxes: Vec<f64> = paths.iter().map(|p| p.max_discrepancy).collect();
    Ok(WentzellReport {
        field: field.name.clone(),
        max: max_abs(&maxes),
        rms: rms(&maxes),
        jump_consistency: paths.iter().fold(0.0, |m, p| m.max(p.jump_consistency)),
        paths,
    })
}

/// A field, the process it is composed with, and an optional exact state.
#[derive(Clone)]
pub struct WentzellCase {
    pub field: SemimartingaleField,
    pub problem: TestProblem,
    pub x0: Vec<f64>,
    pub exact: Option<ExactStateFn>,
}

pub const WENTZELL_CASES: [&str; 3] = ["identity", "brownian-product", "square-exact"];

/// Named check cases, all driven by the linear jump diffusion.
pub fn wentzell_case(name: &str) -> Result<WentzellCase> {
    let problem = catalog_problem("linear-jump-diffusion")?;
    let x0 = vec![1.0];
    let id = Component::new(1, |_, _, x, out| out[0] = x[0]).with_derivatives(|_, _, _, j, h| {
        j[0] = 1.0;
        h[0] = 0.0;
    });
    let case = match name {
        "identity" => WentzellCase {
            field: SemimartingaleField::new(name, 1, 1, id),
            problem,
            x0,
            exact: None,
        },
        "brownian-product" => {
            let zero = Component::new(1, |_, _, _, out| out[0] = 0.0).with_derivatives(|_, _, _, j, h| {
                j[0] = 0.0;
                h[0] = 0.0;
            });
            WentzellCase {
                field: SemimartingaleField::new(name, 1, 1, zero).with_h(id),
                problem,
                x0,
                exact: None,
            }
        }
        "square-exact" => {
            let sq = Component::new(1, |_, _, x, out| out[0] = x[0] * x[0]).with_derivatives(|_, _, x, j, h| {
                j[0] = 2.0 * x[0];
                h[0] = 2.0;
            });
            let marks = problem.model.marks.len();
            let oracle = problem.clone();
            let exact: ExactStateFn = Arc::new(move |grid: &AdaptedGrid, k: usize| {
                let counts = grid.counts(marks);
                let st = NoiseState {
                    t: grid.times[k],
                    w: grid.w_at(k),
                    counts: &counts[k * marks..(k + 1) * marks],
                };
                vec![oracle.oracle_flow(1.0, &st).expect("linear problem has a closed-form flow")]
            });
            WentzellCase {
                field: SemimartingaleField::new(name, 1, 1, sq),
                problem,
                x0,
                exact: Some(exact),
            }
        }
        _ => {
            return Err(Error::UnknownProblem {
                name: name.to_string(),
                available: WENTZELL_CASES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(case)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WentzellStudy {
    pub field: String,
    pub steps: Vec<usize>,
    pub rms: Vec<f64>,
    pub max: Vec<f64>,
    pub jump_consistency: f64,
    pub fit: OrderFit,
}

/// Discrepancy at each level of nested noise. `levels` are step counts that
/// divide the step count of `fine`.
pub fn wentzell_convergence(case: &WentzellCase, fine: &[NoiseBundle], levels: &[usize]) -> Result<WentzellStudy> {
    let finest = fine.first().map(|b| b.grid.steps).ok_or_else(|| invalid("paths", 0, "at least one path"))?;
    let mut rms_v = Vec::new();
    let mut max_v = Vec::new();
    let mut jc = 0.0_f64;
    for &n in levels {
        if n == 0 || finest % n != 0 {
            return Err(invalid("levels", n, "must divide the finest step count"));
        }
        let nb = fine.iter().map(|b| coarsen_noise(b, finest / n)).collect::<Result<Vec<_>>>()?;
        let rep = verify_wentzell(&case.field, &case.problem.model, &nb, &case.x0, case.exact.as_ref())?;
        rms_v.push(rep.rms);
        max_v.push(rep.max);
        jc = jc.max(rep.jump_consistency);
    }
    let h: Vec<f64> = levels.iter().map(|&n| case.problem.model.horizon / n as f64).collect();
    Ok(WentzellStudy {
        field: case.field.name.clone(),
        steps: levels.to_vec(),
        fit: fit_order(&h, &rms_v),
        rms: rms_v,
        max: max_v,
        jump_consistency: jc,
    })
}
