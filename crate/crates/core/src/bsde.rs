//! Backward regression Monte Carlo for BSDEs with jumps, the variational
//! (gradient) BSDE, a nested Monte Carlo reference and a-priori estimates.
//!
//! On base steps `Y_{i+1}` is regressed jointly on `psi(X_i) (1, dW, dN~_e)`;
//! the three coefficient functions give `E_i[Y_{i+1}]`, `Z_i` and `U_i`
//! with a residual of order `dt` rather than `sqrt(dt)`. Then
//! `Y_i = E_i[Y_{i+1}] + dt (theta f_i + (1 - theta) E_i[f_{i+1}])`, fully
//! implicit on the last step, with the implicit part resolved by Picard sweeps.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{At, CoefficientModel, DriverArgs};
use crate::noise::{keyed_rng, NoiseBundle, StreamKind};
use crate::regression::{monomial_exponents, Design, RegressionDiagnostics};
use crate::sde_flow::{simulate_flow, Stepper};
use crate::stats::{mean, std_error};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub degree: usize,
    pub ridge: f64,
    pub picard: usize,
    /// Weight of the implicit driver term.
    pub theta: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1e-10,
            picard: 3,
            theta: 0.5,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(invalid("ridge", self.ridge, "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(invalid("theta", self.theta, "must lie in [0, 1]"));
        }
        if self.picard == 0 {
            return Err(invalid("picard", 0, "at least one sweep"));
        }
        Ok(())
    }
}

/// Forward paths sampled at the base grid, all node-major (`[node][path]`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardSample {
    pub paths: usize,
    pub steps: usize,
    pub n: usize,
    pub d: usize,
    pub marks: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub x_left: Vec<f64>,
    /// `[step][path][d]`.
    pub dw: Vec<f64>,
    /// `[step][path][mark]` jump counts.
    pub dn: Vec<f64>,
}

impl ForwardSample {
    pub fn x_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.n;
        &self.x[o..o + self.n]
    }

    pub fn x_left_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.n;
        &self.x_left[o..o + self.n]
    }

    fn dw_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.d;
        &self.dw[o..o + self.d]
    }

    fn dn_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.marks;
        &self.dn[o..o + self.marks]
    }
}

/// Run the forward SDE from `x0` on every noise path and sample it at the
/// base grid nodes.
pub fn forward_sample(model: &CoefficientModel, noises: &[NoiseBundle], x0: &[f64]) -> Result<ForwardSample> {
    let first = noises.first().ok_or_else(|| invalid("paths", 0, "at least one path"))?;
    let grid = first.grid;
    if noises.iter().any(|b| b.grid != grid) {
        return Err(invalid("noise", "grids", "all paths must share one time grid"));
    }
    if x0.len() != model.dim_state {
        return Err(invalid("x0", x0.len(), "must have dim_state entries"));
    }
    let n = model.dim_state;
    let d = model.dim_brownian;
    let marks = model.marks.len();
    let steps = grid.steps;
    let per: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = noises
        .par_iter()
        .map(|nb| {
            let f = simulate_flow(model, nb, x0)?;
            let counts = f.grid.counts(marks);
            let mut x = Vec::with_capacity((steps + 1) * n);
            let mut xl = Vec::with_capacity((steps + 1) * n);
            let mut dn = Vec::with_capacity(steps * marks);
            for (i, &k) in f.grid.base_nodes.iter().enumerate() {
                x.extend_from_slice(&f.values[k * n..(k + 1) * n]);
                xl.extend_from_slice(&f.left[k * n..(k + 1) * n]);
                if i > 0 {
                    let prev = f.grid.base_nodes[i - 1];
                    for e in 0..marks {
                        dn.push((counts[k * marks + e] - counts[prev * marks + e]) as f64);
                    }
                }
            }
            Ok((x, xl, dn))
        })
        .collect::<Result<Vec<_>>>()?;
    let paths = noises.len();
    let mut s = ForwardSample {
        paths,
        steps,
        n,
        d,
        marks,
        dt: grid.dt(),
        times: grid.nodes(),
        x: vec![0.0; (steps + 1) * paths * n],
        x_left: vec![0.0; (steps + 1) * paths * n],
        dw: vec![0.0; steps * paths * d],
        dn: vec![0.0; steps * paths * marks],
    };
    for (p, ((x, xl, dn), nb)) in per.iter().zip(noises).enumerate() {
        for i in 0..=steps {
            let o = (i * paths + p) * n;
            s.x[o..o + n].copy_from_slice(&x[i * n..(i + 1) * n]);
            s.x_left[o..o + n].copy_from_slice(&xl[i * n..(i + 1) * n]);
        }
        for i in 0..steps {
            let o = (i * paths + p) * d;
            s.dw[o..o + d].copy_from_slice(nb.increment(i));
            let o = (i * paths + p) * marks;
            s.dn[o..o + marks].copy_from_slice(&dn[i * marks..(i + 1) * marks]);
        }
    }
    Ok(s)
}

/// Regression solution, node-major: `y[(i * paths + p) * l + k]`,
/// `z[.. * l * d + k * d + r]`, `u[.. * marks * l + e * l + k]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub paths: usize,
    pub steps: usize,
    pub l: usize,
    pub d: usize,
    pub marks: usize,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Standard errors of the fitted values, same layout.
    pub y_se: Vec<f64>,
    pub z_se: Vec<f64>,
    pub u_se: Vec<f64>,
    /// Standard error of the cross-path mean of `Y_i`, from the realized
    /// pathwise values, `[node][l]`.
    pub mean_se: Vec<f64>,
    /// One entry per regression node `0..steps`.
    pub diagnostics: Vec<RegressionDiagnostics>,
}

impl BsdeSolution {
    pub fn y_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (i * self.paths + p) * self.l;
        &self.y[o..o + self.l]
    }

    pub fn z_at(&self, i: usize, p: usize) -> &[f64] {
        let w = self.l * self.d;
        let o = (i * self.paths + p) * w;
        &self.z[o..o + w]
    }

    pub fn u_at(&self, i: usize, p: usize) -> &[f64] {
        let w = self.l * self.marks;
        let o = (i * self.paths + p) * w;
        &self.u[o..o + w]
    }

    /// Cross-path mean and its standard error of component `k` of `Y_i`.
    pub fn y_mean(&self, i: usize, k: usize) -> (f64, f64) {
        let v: Vec<f64> = (0..self.paths).map(|p| self.y_at(i, p)[k]).collect();
        (mean(&v), self.mean_se[i * self.l + k])
    }

    /// Per-node summary of the first value component.
    pub fn summary(&self) -> Vec<BsdeRow> {
        (0..=self.steps)
            .map(|i| {
                let (y_mean, y_se) = self.y_mean(i, 0);
                let zs: Vec<f64> = (0..self.paths).map(|p| self.z_at(i, p)[0]).collect();
                let u_mean = (0..self.marks)
                    .map(|e| mean(&(0..self.paths).map(|p| self.u_at(i, p)[e * self.l]).collect::<Vec<_>>()))
                    .collect();
                BsdeRow {
                    t: self.times[i],
                    y_mean,
                    y_se,
                    z_mean: mean(&zs),
                    u_mean,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BsdeRow {
    pub t: f64,
    pub y_mean: f64,
    pub y_se: f64,
    pub z_mean: f64,
    pub u_mean: Vec<f64>,
}

/// Driver evaluated for one path at one node: `(path, node, y, z, u, out)`.
type PathDriver<'a> = dyn Fn(usize, usize, &[f64], &[f64], &[f64], &mut [f64]) + Sync + 'a;

struct Backward<'a> {
    cfg: RegressionConfig,
    fwd: &'a ForwardSample,
    l: usize,
    intensity: &'a [f64],
    /// `[node][path][m]`.
    features: &'a [f64],
    m: usize,
}

struct Terminal {
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

impl Backward<'_> {
    fn solve(&self, term: Terminal, driver: &PathDriver) -> Result<BsdeSolution> {
        let f = self.fwd;
        let (pn, nsteps, l, d, mk) = (f.paths, f.steps, self.l, f.d, f.marks);
        let dt = f.dt;
        let (wl, wz, wu) = (l, l * d, l * mk);
        let nodes = nsteps + 1;
        let mut y = vec![0.0; nodes * pn * wl];
        let mut z = vec![0.0; nodes * pn * wz];
        let mut u = vec![0.0; nodes * pn * wu];
        let mut y_se = vec![0.0; nodes * pn * wl];
        let mut z_se = vec![0.0; nodes * pn * wz];
        let mut u_se = vec![0.0; nodes * pn * wu];
        let last = nsteps * pn;
        y[last * wl..].copy_from_slice(&term.y);
        z[last * wz..].copy_from_slice(&term.z);
        u[last * wu..].copy_from_slice(&term.u);
        // Pathwise realized values `xi + sum f dt`, for standard errors.
        let mut realized = term.y.clone();
        let mut mean_se = vec![0.0; nodes * l];
        let realized_se = |r: &[f64], out: &mut [f64]| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = std_error(&r.iter().skip(k).step_by(l).copied().collect::<Vec<_>>());
            }
        };
        realized_se(&realized, &mut mean_se[nsteps * l..]);
        let mut f_next = vec![0.0; pn * wl];
        let mut diagnostics = vec![];
        let mut fo = vec![0.0; l];
        let mut buf = vec![0.0; pn];
        let mut tgt = vec![0.0; pn];

        for i in (0..nsteps).rev() {
            let feats = &self.features[i * pn * self.m..(i + 1) * pn * self.m];
            let design = Design::new(feats, self.m, self.cfg.degree, self.cfg.ridge);
            // First-order blocks carry Z and U; the second-order products are
            // mean-zero given X_i and only soak up residual variance.
            let q = d + mk + d + d * mk;
            let mut mult = Vec::with_capacity(pn * q);
            for p in 0..pn {
                let dw = f.dw_at(i, p);
                mult.extend_from_slice(dw);
                mult.extend(f.dn_at(i, p).iter().zip(self.intensity).map(|(n, v)| n - v * dt));
                mult.extend(dw.iter().map(|w| w * w - dt));
                // Uncompensated counts keep this block zero, and so dropped,
                // on steps without jumps.
                let dn = f.dn_at(i, p);
                for w in dw {
                    mult.extend(dn.iter().map(|n| w * n));
                }
            }
            // Jump blocks only see the rows that jumped; keep about eight of
            // those per coefficient.
            let mut jumps = vec![0usize; mk];
            for p in 0..pn {
                for (c, n) in jumps.iter_mut().zip(f.dn_at(i, p)) {
                    *c += usize::from(*n != 0.0);
                }
            }
            let fit_degree = |rows: usize| {
                (0..=self.cfg.degree)
                    .rev()
                    .find(|&g| 8 * monomial_exponents(self.m, g).len() <= rows)
                    .unwrap_or(0)
            };
            let jump_total: usize = jumps.iter().sum();
            let degrees: Vec<usize> = (0..q)
                .map(|b| match b {
                    b if b < d => self.cfg.degree,
                    b if b < d + mk => fit_degree(jumps[b - d]),
                    b if b < 2 * d + mk => 1,
                    _ => fit_degree(jump_total).min(1),
                })
                .collect();
            let joint = Design::with_multipliers(feats, self.m, self.cfg.degree, self.cfg.ridge, &mult, &degrees);
            let theta = if i + 1 == nsteps { 1.0 } else { self.cfg.theta };
            if theta < 1.0 {
                for p in 0..pn {
                    let o = (i + 1) * pn + p;
                    driver(
                        p,
                        i + 1,
                        &y[o * wl..(o + 1) * wl],
                        &z[o * wz..(o + 1) * wz],
                        &u[o * wu..(o + 1) * wu],
                        &mut f_next[p * wl..(p + 1) * wl],
                    );
                }
            }
            let base = i * pn;
            let mut cond = vec![0.0; pn * wl];
            let mut ef = vec![0.0; pn * wl];
            for k in 0..l {
                for p in 0..pn {
                    tgt[p] = y[((i + 1) * pn + p) * wl + k];
                }
                let blocks = joint.fit_blocks(&tgt);
                for p in 0..pn {
                    cond[p * wl + k] = blocks[0].0[p];
                    for r in 0..d {
                        z[(base + p) * wz + k * d + r] = blocks[1 + r].0[p];
                        z_se[(base + p) * wz + k * d + r] = blocks[1 + r].1[p];
                    }
                    for e in 0..mk {
                        u[(base + p) * wu + e * l + k] = blocks[1 + d + e].0[p];
                        u_se[(base + p) * wu + e * l + k] = blocks[1 + d + e].1[p];
                    }
                }
                if theta < 1.0 {
                    for p in 0..pn {
                        buf[p] = f_next[p * wl + k];
                    }
                    let fitted = design.fitted(&buf);
                    for p in 0..pn {
                        ef[p * wl + k] = fitted[p];
                    }
                }
            }
            for p in 0..pn {
                let o = base + p;
                let mut yi: Vec<f64> = (0..l).map(|k| cond[p * wl + k] + dt * (1.0 - theta) * ef[p * wl + k]).collect();
                fo.iter_mut().for_each(|v| *v = 0.0);
                if theta > 0.0 {
                    for _ in 0..self.cfg.picard {
                        driver(p, i, &yi, &z[o * wz..(o + 1) * wz], &u[o * wu..(o + 1) * wu], &mut fo);
                        for k in 0..l {
                            yi[k] = cond[p * wl + k] + dt * (theta * fo[k] + (1.0 - theta) * ef[p * wl + k]);
                        }
                    }
                    driver(p, i, &yi, &z[o * wz..(o + 1) * wz], &u[o * wu..(o + 1) * wu], &mut fo);
                }
                for k in 0..l {
                    if !yi[k].is_finite() {
                        return Err(Error::NonFinite {
                            what: "BSDE value",
                            t: f.times[i],
                            mark: None,
                            x: f.x_at(i, p).to_vec(),
                        });
                    }
                    y[o * wl + k] = yi[k];
                    realized[p * wl + k] += dt * (theta * fo[k] + (1.0 - theta) * f_next[p * wl + k]);
                }
            }
            realized_se(&realized, &mut mean_se[i * l..(i + 1) * l]);
            for k in 0..l {
                for p in 0..pn {
                    buf[p] = realized[p * wl + k];
                }
                let fit = design.fit(&buf);
                for p in 0..pn {
                    y_se[(base + p) * wl + k] = fit.se[p];
                }
            }
            if let Some(v) = z[base * wz..(base + pn) * wz].iter().chain(&u[base * wu..(base + pn) * wu]).find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "BSDE martingale integrand",
                    t: f.times[i],
                    mark: None,
                    x: vec![*v],
                });
            }
            diagnostics.push(design.diagnostics.clone());
        }
        diagnostics.reverse();
        Ok(BsdeSolution {
            paths: pn,
            steps: nsteps,
            l,
            d,
            marks: mk,
            times: f.times.clone(),
            y,
            z,
            u,
            y_se,
            z_se,
            u_se,
            mean_se,
            diagnostics,
        })
    }
}

fn require_markov(model: &CoefficientModel) -> Result<()> {
    if model.random_coefficients {
        return Err(Error::Unsupported(
            "regression needs an observable Markov state; random-coefficient models need a feature map".into(),
        ));
    }
    Ok(())
}

/// `Z_T = grad phi(X_T) sigma(X_T)` and `U_T(e) = phi(X_T + g) - phi(X_T)`.
fn markov_terminal(model: &CoefficientModel, fwd: &ForwardSample) -> Terminal {
    let (n, d, l, mk, pn) = (fwd.n, fwd.d, model.dim_value, fwd.marks, fwd.paths);
    let at = At::time(model.horizon);
    let mut y = vec![0.0; pn * l];
    let mut z = vec![0.0; pn * l * d];
    let mut u = vec![0.0; pn * l * mk];
    let mut sig = vec![0.0; n * d];
    let mut g = vec![0.0; n];
    let mut xg = vec![0.0; n];
    let mut phi_g = vec![0.0; l];
    for p in 0..pn {
        let x = fwd.x_at(fwd.steps, p);
        model.terminal(x, &mut y[p * l..(p + 1) * l]);
        let grad = model.terminal_gradient(x);
        model.diffusion(at, x, &mut sig);
        for k in 0..l {
            for r in 0..d {
                z[(p * l + k) * d + r] = (0..n).map(|i| grad[k * n + i] * sig[i * d + r]).sum();
            }
        }
        for e in 0..mk {
            model.jump(at, e, x, &mut g);
            for i in 0..n {
                xg[i] = x[i] + g[i];
            }
            model.terminal(&xg, &mut phi_g);
            for k in 0..l {
                u[p * l * mk + e * l + k] = phi_g[k] - y[p * l + k];
            }
        }
    }
    Terminal { y, z, u }
}

pub fn solve_bsde(model: &CoefficientModel, fwd: &ForwardSample, cfg: &RegressionConfig) -> Result<BsdeSolution> {
    cfg.validate()?;
    require_markov(model)?;
    if fwd.n != model.dim_state || fwd.d != model.dim_brownian || fwd.marks != model.marks.len() {
        return Err(invalid("forward", fwd.n, "forward sample and model dimensions differ"));
    }
    let l = model.dim_value;
    let term = markov_terminal(model, fwd);
    let driver = |p: usize, i: usize, y: &[f64], z: &[f64], u: &[f64], out: &mut [f64]| {
        let at = At::time(fwd.times[i]);
        model.driver(at, &DriverArgs { x: fwd.x_at(i, p), y, z, u }, out);
    };
    Backward {
        cfg: *cfg,
        fwd,
        l,
        intensity: model.marks.intensities(),
        features: &fwd.x,
        m: fwd.n,
    }
    .solve(term, &driver)
}

/// Pathwise derivative of the forward flow along `direction` by central
/// differences with step `h`, node-major `[node][path][n]`.
pub fn flow_gradient(model: &CoefficientModel, noises: &[NoiseBundle], x0: &[f64], direction: &[f64], h: f64) -> Result<Vec<f64>> {
    let shift = |s: f64| -> Vec<f64> { x0.iter().zip(direction).map(|(x, v)| x + s * h * v).collect() };
    let up = forward_sample(model, noises, &shift(1.0))?;
    let dn = forward_sample(model, noises, &shift(-1.0))?;
    Ok(up.x.iter().zip(&dn.x).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Linear BSDE for `(dY, dZ, dU)` along the flow derivative `grad`, with
/// driver `f_x dX + f_y dY + f_z dZ + f_u dU` at the base solution and
/// terminal `grad phi(X_T) dX_T`. Regression features are `(X, dX)`.
pub fn solve_variational_bsde(
    model: &CoefficientModel,
    fwd: &ForwardSample,
    grad: &[f64],
    base: &BsdeSolution,
    cfg: &RegressionConfig,
) -> Result<BsdeSolution> {
    cfg.validate()?;
    require_markov(model)?;
    let (n, pn, nsteps) = (fwd.n, fwd.paths, fwd.steps);
    let l = model.dim_value;
    if grad.len() != fwd.x.len() || base.paths != pn || base.steps != nsteps {
        return Err(invalid("gradient", grad.len(), "gradient, forward sample and base solution must align"));
    }
    let mut features = Vec::with_capacity(2 * fwd.x.len());
    for (x, g) in fwd.x.chunks(n).zip(grad.chunks(n)) {
        features.extend_from_slice(x);
        features.extend_from_slice(g);
    }
    let dx = |i: usize, p: usize| &grad[(i * pn + p) * n..(i * pn + p + 1) * n];
    let mut term = Terminal {
        y: vec![0.0; pn * l],
        z: base.z[nsteps * pn * l * fwd.d..].iter().map(|_| 0.0).collect(),
        u: vec![0.0; pn * l * fwd.marks],
    };
    for p in 0..pn {
        let gphi = model.terminal_gradient(fwd.x_at(nsteps, p));
        for k in 0..l {
            term.y[p * l + k] = (0..n).map(|i| gphi[k * n + i] * dx(nsteps, p)[i]).sum();
        }
    }
    let driver = |p: usize, i: usize, y: &[f64], z: &[f64], u: &[f64], out: &mut [f64]| {
        let at = At::time(fwd.times[i]);
        let args = DriverArgs {
            x: fwd.x_at(i, p),
            y: base.y_at(i, p),
            z: base.z_at(i, p),
            u: base.u_at(i, p),
        };
        let pt = model.driver_partials(at, &args);
        let (zw, uw) = (z.len(), u.len());
        for k in 0..l {
            let mut acc = 0.0;
            for j in 0..n {
                acc += pt.fx[k * n + j] * dx(i, p)[j];
            }
            for j in 0..l {
                acc += pt.fy[k * l + j] * y[j];
            }
            for j in 0..zw {
                acc += pt.fz[k * zw + j] * z[j];
            }
            for j in 0..uw {
                acc += pt.fu[k * uw + j] * u[j];
            }
            out[k] = acc;
        }
    };
    let mut sol = Backward {
        cfg: *cfg,
        fwd,
        l,
        intensity: model.marks.intensities(),
        features: &features,
        m: 2 * n,
    }
    .solve(term, &driver)?;
    // Terminal martingale integrands are reported as the last regressed ones.
    let (wz, wu) = (l * fwd.d, l * fwd.marks);
    let (a, b) = sol.z.split_at_mut(nsteps * pn * wz);
    b.copy_from_slice(&a[(nsteps - 1) * pn * wz..]);
    let (a, b) = sol.u.split_at_mut(nsteps * pn * wu);
    b.copy_from_slice(&a[(nsteps - 1) * pn * wu..]);
    Ok(sol)
}

/// Aggregate agreement of one quantity with a closed form.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Agreement {
    pub rms_error: f64,
    pub rms_se: f64,
    pub max_error: f64,
    pub samples: usize,
}

impl Agreement {
    pub fn within(&self, k: f64) -> bool {
        self.rms_error <= k * self.rms_se
    }

    /// `within` plus an absolute allowance for time-discretization bias.
    pub fn within_floor(&self, k: f64, floor: f64) -> bool {
        self.rms_error <= k * self.rms_se + floor
    }

    fn push(&mut self, err: f64, se: f64) {
        self.rms_error += err * err;
        self.rms_se += se * se;
        self.max_error = self.max_error.max(err.abs());
        self.samples += 1;
    }

    fn finish(mut self) -> Self {
        let n = self.samples.max(1) as f64;
        self.rms_error = (self.rms_error / n).sqrt();
        self.rms_se = (self.rms_se / n).sqrt();
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleComparison {
    pub y: Agreement,
    pub z: Agreement,
    pub u: Agreement,
}

/// Compare `(Y, Z, U)` at nodes `0..steps` against a closed form given as a
/// function of `(t, X_t, X_{t-})`. Scalar `l = d = 1` only.
pub fn compare_with_oracle(
    sol: &BsdeSolution,
    fwd: &ForwardSample,
    oracle: impl Fn(f64, f64, f64) -> Option<crate::catalog::BsdeValues>,
) -> Result<OracleComparison> {
    if sol.l != 1 || sol.d != 1 || fwd.n != 1 {
        return Err(Error::Unsupported("closed-form comparison is scalar only".into()));
    }
    let (mut y, mut z, mut u) = (Agreement::default(), Agreement::default(), Agreement::default());
    for i in 0..sol.steps {
        for p in 0..sol.paths {
            let x = fwd.x_at(i, p)[0];
            let want = oracle(sol.times[i], x, x).ok_or_else(|| Error::Unsupported("no closed form for this problem".into()))?;
            let o = i * sol.paths + p;
            y.push(sol.y[o] - want.y, sol.y_se[o]);
            z.push(sol.z[o] - want.z, sol.z_se[o]);
            for e in 0..sol.marks {
                u.push(sol.u[o * sol.marks + e] - want.u[e], sol.u_se[o * sol.marks + e]);
            }
        }
    }
    Ok(OracleComparison {
        y: y.finish(),
        z: z.finish(),
        u: u.finish(),
    })
}

/// Nested Monte Carlo reference for `Y_0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NestedConfig {
    pub steps: usize,
    pub branching: usize,
    pub replications: usize,
    pub seed: u64,
}

impl Default for NestedConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            branching: 30,
            replications: 8,
            seed: 101,
        }
    }
}

impl NestedConfig {
    /// Branching chosen so one tree has about `leaves` leaves (at least 4
    /// children per node). The tree size is `branching^steps`.
    pub fn with_leaves(steps: usize, leaves: f64, replications: usize) -> Self {
        let b = leaves.powf(1.0 / steps.max(1) as f64).round().max(4.0) as usize;
        Self {
            steps,
            branching: b,
            replications,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NestedEstimate {
    pub mean: f64,
    pub se: f64,
}

struct Child {
    x: Vec<f64>,
    dw: Vec<f64>,
    dn: Vec<f64>,
}

/// One jump-adapted Euler step of length `dt` from `(t, x)`.
fn one_step(model: &CoefficientModel, t: f64, x: &[f64], dt: f64, seed: u64, id: u64, rep: u64) -> Child {
    let d = model.dim_brownian;
    let mk = model.marks.len();
    let mut rng = keyed_rng(seed, id, StreamKind::Auxiliary, rep);
    let lam = model.marks.total_intensity();
    let exp = Exp::new(lam).expect("positive intensity");
    let mut events = vec![];
    let mut s = 0.0;
    loop {
        s += rng.sample::<f64, _>(exp);
        if s > dt {
            break;
        }
        let mut pick = rng.gen::<f64>() * lam;
        let mut e = mk - 1;
        for (k, v) in model.marks.intensities().iter().enumerate() {
            if pick < *v {
                e = k;
                break;
            }
            pick -= v;
        }
        events.push((s, e));
    }
    let mut stepper = Stepper::new(model);
    let mut state = x.to_vec();
    let mut dw = vec![0.0; d];
    let mut dn = vec![0.0; mk];
    let mut inc = vec![0.0; d];
    let mut now = 0.0;
    for &(te, e) in events.iter().chain(std::iter::once(&(dt, usize::MAX))) {
        let h = te - now;
        for r in 0..d {
            inc[r] = h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            dw[r] += inc[r];
        }
        stepper.euler(At::time(t + now), &mut state, h, &inc);
        if e != usize::MAX {
            stepper.jump(At::time(t + te), e, &mut state);
            dn[e] += 1.0;
        }
        now = te;
    }
    Child { x: state, dw, dn }
}

/// `(Y, f)` at a tree node by the same theta scheme as the regression solver,
/// with sample means over children in place of regressions.
#[allow(clippy::too_many_arguments)]
fn nested_node(model: &CoefficientModel, cfg: &NestedConfig, theta: f64, picard: usize, i: usize, x: &[f64], id: u64, rep: u64) -> (f64, f64) {
    let dt = model.horizon / cfg.steps as f64;
    let mut y_t = [0.0];
    if i == cfg.steps {
        model.terminal(x, &mut y_t);
        return (y_t[0], 0.0);
    }
    let b = cfg.branching;
    let mk = model.marks.len();
    let t = i as f64 * dt;
    let children: Vec<(Child, (f64, f64))> = (0..b)
        .map(|j| {
            let cid = id * (b as u64 + 1) + j as u64 + 1;
            let c = one_step(model, t, x, dt, cfg.seed, cid, rep);
            let v = nested_node(model, cfg, theta, picard, i + 1, &c.x, cid, rep);
            (c, v)
        })
        .collect();
    let bf = b as f64;
    let e_hat = children.iter().map(|c| c.1 .0).sum::<f64>() / bf;
    // Plain sample means with (B - 1) normalization: a control variate
    // built from the same children would bias the estimate by O(1 / B).
    let z = children.iter().map(|c| (c.1 .0 - e_hat) * c.0.dw[0]).sum::<f64>() / (bf - 1.0) / dt;
    let u: Vec<f64> = (0..mk)
        .map(|e| {
            let v = model.marks.intensity(e);
            children.iter().map(|c| (c.1 .0 - e_hat) * (c.0.dn[e] - v * dt)).sum::<f64>() / (bf - 1.0) / (v * dt)
        })
        .collect();
    let cond = e_hat;
    let th = if i + 1 == cfg.steps { 1.0 } else { theta };
    let ef = children.iter().map(|c| c.1 .1).sum::<f64>() / bf;
    let mut y = cond + dt * (1.0 - th) * ef;
    let mut fo = [0.0];
    for _ in 0..picard {
        model.driver(At::time(t), &DriverArgs { x, y: &[y], z: &[z], u: &u }, &mut fo);
        y = cond + dt * (th * fo[0] + (1.0 - th) * ef);
    }
    model.driver(At::time(t), &DriverArgs { x, y: &[y], z: &[z], u: &u }, &mut fo);
    (y, fo[0])
}

/// Brute-force nested estimate of `Y_0(x0)` over independent replications.
/// Scalar models with one Brownian component only.
pub fn nested_mc_y0(model: &CoefficientModel, x0: &[f64], cfg: &NestedConfig, reg: &RegressionConfig) -> Result<NestedEstimate> {
    if model.dim_value != 1 || model.dim_brownian != 1 {
        return Err(Error::Unsupported("nested reference supports l = d = 1".into()));
    }
    if cfg.steps == 0 || cfg.steps > 8 || cfg.branching < 2 || cfg.replications < 2 {
        return Err(invalid("nested", cfg.steps, "1..=8 steps, branching >= 2, replications >= 2"));
    }
    let reps: Vec<f64> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| nested_node(model, cfg, reg.theta, reg.picard, 0, x0, 0, r as u64).0)
        .collect();
    Ok(NestedEstimate {
        mean: mean(&reps),
        se: std_error(&reps),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`; `None` when both vanish.
    pub ratio: Option<f64>,
    pub pass: bool,
}

/// Monte Carlo sides of the a-priori estimate for the first value component:
/// `E sup|Y|^p + E (int |Z|^2)^{p/2} + E (int sum_e v |U|^2)^{p/2}` against
/// `E |xi|^p + E (int |f(t, X, 0, 0, 0)| dt)^p`.
pub fn apriori_report(sol: &BsdeSolution, fwd: &ForwardSample, model: &CoefficientModel, p: f64) -> Result<EstimateReport> {
    if p < 2.0 {
        return Err(invalid("p", p, "must be >= 2"));
    }
    let dt = fwd.dt;
    let (l, d, mk) = (sol.l, sol.d, sol.marks);
    let zero_z = vec![0.0; l * d];
    let zero_u = vec![0.0; l * mk];
    let zero_y = vec![0.0; l];
    let mut f0 = vec![0.0; l];
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for q in 0..sol.paths {
        let mut sup = 0.0_f64;
        let (mut zi, mut ui, mut fi) = (0.0, 0.0, 0.0);
        for i in 0..=sol.steps {
            sup = sup.max(sol.y_at(i, q)[0].abs());
            if i < sol.steps {
                zi += sol.z_at(i, q)[..d].iter().map(|v| v * v).sum::<f64>() * dt;
                ui += (0..mk).map(|e| model.marks.intensity(e) * sol.u_at(i, q)[e * l].powi(2)).sum::<f64>() * dt;
                let args = DriverArgs {
                    x: fwd.x_at(i, q),
                    y: &zero_y,
                    z: &zero_z,
                    u: &zero_u,
                };
                model.driver(At::time(fwd.times[i]), &args, &mut f0);
                fi += f0[0].abs() * dt;
            }
        }
        lhs += sup.powf(p) + zi.powf(p / 2.0) + ui.powf(p / 2.0);
        rhs += sol.y_at(sol.steps, q)[0].abs().powf(p) + fi.powf(p);
    }
    let np = sol.paths as f64;
    let (lhs, rhs) = (lhs / np, rhs / np);
    let ratio = if lhs == 0.0 && rhs == 0.0 { None } else { Some(lhs / rhs) };
    Ok(EstimateReport {
        p,
        lhs,
        rhs,
        pass: ratio.map_or(true, f64::is_finite),
        ratio,
    })
}

/// The model with its terminal condition multiplied by `k`.
pub fn scale_terminal(model: &CoefficientModel, k: f64) -> CoefficientModel {
    let (a, b) = (model.clone(), model.clone());
    model
        .clone()
        .with_terminal(move |x, out| {
            a.terminal(x, out);
            out.iter_mut().for_each(|v| *v *= k);
        })
        .with_terminal_dx(move |x, out| {
            let g = b.terminal_gradient(x);
            for (o, v) in out.iter_mut().zip(g) {
                *o = k * v;
            }
        })
}

/// Largest relative change of the a-priori ratio when the terminal condition
/// is scaled by each of `scales`.
pub fn homogeneity_drift(model: &CoefficientModel, fwd: &ForwardSample, cfg: &RegressionConfig, p: f64, scales: &[f64]) -> Result<f64> {
    let base = apriori_report(&solve_bsde(model, fwd, cfg)?, fwd, model, p)?;
    let mut worst = 0.0_f64;
    for &k in scales {
        let m = scale_terminal(model, k);
        let r = apriori_report(&solve_bsde(&m, fwd, cfg)?, fwd, &m, p)?;
        match (base.ratio, r.ratio) {
            (Some(a), Some(b)) => worst = worst.max(((b - a) / a).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    Ok(worst)
}

/// Largest difference quotient of `Y_0` between neighbouring initial points.
pub fn y0_lipschitz(model: &CoefficientModel, noises: &[NoiseBundle], points: &[f64], cfg: &RegressionConfig) -> Result<f64> {
    let y0: Vec<f64> = points
        .iter()
        .map(|&x| {
            let fwd = forward_sample(model, noises, &[x])?;
            Ok(solve_bsde(model, &fwd, cfg)?.y_mean(0, 0).0)
        })
        .collect::<Result<_>>()?;
    Ok(points
        .windows(2)
        .zip(y0.windows(2))
        .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
        .fold(0.0, f64::max))
}
