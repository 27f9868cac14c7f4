//! Random-field triple `(p, q, r)` built from BSDE solutions and the inverse
//! flow, its backward integral PDE residual, a deterministic PIDE reference
//! and the uniqueness cross-check `p(t, X_t(x)) = Y_t(x)`.
//!
//! Scalar state and value (`n = l = 1`); any number of Brownian components
//! and marks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{forward_sample, solve_bsde, BsdeSolution, RegressionConfig};
use crate::error::{invalid, Error, Result};
use crate::interp::{derivatives, Uniform};
use crate::inverse_flow::{invert_flow_grid, InverseField};
use crate::model::{At, CoefficientModel, DriverArgs};
use crate::noise::{coarsen_noise, NoiseBundle};
use crate::sde_flow::{simulate_flow_ensemble, FlowField};
use crate::stats::{fit_order, OrderFit};

fn require_scalar(model: &CoefficientModel) -> Result<()> {
    if model.dim_state != 1 || model.dim_value != 1 {
        return Err(Error::Unsupported(format!(
            "field composition needs n = l = 1, got n = {}, l = {}",
            model.dim_state, model.dim_value
        )));
    }
    if model.random_coefficients {
        return Err(Error::Unsupported("field composition needs deterministic coefficients".into()));
    }
    Ok(())
}

/// BSDE solutions started from every point of a uniform initial mesh, all on
/// the same noise.
#[derive(Clone, Debug)]
pub struct BsdeFamily {
    pub mesh: Uniform,
    pub solutions: Vec<BsdeSolution>,
}

impl BsdeFamily {
    pub fn steps(&self) -> usize {
        self.solutions[0].steps
    }

    pub fn paths(&self) -> usize {
        self.solutions[0].paths
    }

    /// Values of `sel(solution)` across the mesh for one `(node, path)`.
    fn column(&self, f: impl Fn(&BsdeSolution) -> f64) -> Vec<f64> {
        self.solutions.iter().map(f).collect()
    }
}

pub fn solve_bsde_family(model: &CoefficientModel, noises: &[NoiseBundle], mesh: Uniform, cfg: &RegressionConfig) -> Result<BsdeFamily> {
    require_scalar(model)?;
    if mesh.len < 2 {
        return Err(invalid("initial mesh", mesh.len, "at least two points"));
    }
    let solutions = mesh
        .points()
        .par_iter()
        .map(|&x| solve_bsde(model, &forward_sample(model, noises, &[x])?, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BsdeFamily { mesh, solutions })
}

/// `(p, q, r)` on base nodes and a uniform query mesh, per path. Arrays are
/// `[path][node][x]`, with `q` carrying a trailing Brownian index and `r` a
/// mark index before `x`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RandomFieldTriple {
    pub lo: f64,
    pub h: f64,
    pub len: usize,
    pub paths: usize,
    pub steps: usize,
    pub d: usize,
    pub marks: usize,
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub p_left: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub p_se: Vec<f64>,
    pub q_se: Vec<f64>,
    pub r_se: Vec<f64>,
    /// Every ingredient at this point came from inside its mesh.
    pub valid: Vec<bool>,
}

impl RandomFieldTriple {
    pub fn queries(&self) -> Uniform {
        Uniform::new(self.lo, self.h, self.len)
    }

    fn at(&self, path: usize, i: usize) -> usize {
        (path * (self.steps + 1) + i) * self.len
    }

    pub fn p_row(&self, path: usize, i: usize) -> &[f64] {
        let o = self.at(path, i);
        &self.p[o..o + self.len]
    }

    pub fn p_left_row(&self, path: usize, i: usize) -> &[f64] {
        let o = self.at(path, i);
        &self.p_left[o..o + self.len]
    }

    pub fn valid_row(&self, path: usize, i: usize) -> &[bool] {
        let o = self.at(path, i);
        &self.valid[o..o + self.len]
    }

    pub fn q_at(&self, path: usize, i: usize, k: usize, r: usize) -> f64 {
        self.q[(self.at(path, i) + k) * self.d + r]
    }

    pub fn r_row(&self, path: usize, i: usize, e: usize) -> &[f64] {
        let o = (self.at(path, i) * self.marks) + e * self.len;
        &self.r[o..o + self.len]
    }

    fn r_se_at(&self, path: usize, i: usize, e: usize, k: usize) -> f64 {
        self.r_se[self.at(path, i) * self.marks + e * self.len + k]
    }

    /// Per-path integrability proxies on the query mesh: the largest of
    /// `|p|, |dp|, |d2p|`, `sum dt max_x (|q|^2 + |dq|^2)` and
    /// `sum dt sum_e v max_x |r|^2`, each maximized over paths.
    pub fn integrability(&self, model: &CoefficientModel) -> Integrability {
        let (mut pmax, mut qint, mut rint) = (0.0_f64, 0.0_f64, 0.0_f64);
        for path in 0..self.paths {
            let (mut qi, mut ri) = (0.0, 0.0);
            for i in 0..=self.steps {
                let dt = if i < self.steps { self.times[i + 1] - self.times[i] } else { 0.0 };
                let row = self.p_row(path, i);
                let valid = self.valid_row(path, i);
                let mut qm = 0.0_f64;
                let mut qrow = vec![0.0; self.len];
                for k in 0..self.len {
                    qrow[k] = (0..self.d).map(|r| self.q_at(path, i, k, r).powi(2)).sum::<f64>().sqrt();
                }
                for k in 1..self.len.saturating_sub(1) {
                    if !(valid[k - 1] && valid[k] && valid[k + 1]) {
                        continue;
                    }
                    let (d1, d2) = derivatives(row, self.h, k);
                    pmax = pmax.max(row[k].abs()).max(d1.abs()).max(d2.abs());
                    let (dq, _) = derivatives(&qrow, self.h, k);
                    qm = qm.max(qrow[k].powi(2) + dq * dq);
                }
                qi += dt * qm;
                for e in 0..self.marks {
                    let rm = self
                        .r_row(path, i, e)
                        .iter()
                        .zip(valid)
                        .filter(|(_, v)| **v)
                        .map(|(r, _)| r * r)
                        .fold(0.0, f64::max);
                    ri += dt * model.marks.intensity(e) * rm;
                }
            }
            qint = qint.max(qi);
            rint = rint.max(ri);
        }
        Integrability {
            p_derivatives: pmax,
            q_square_integral: qint,
            r_square_integral: rint,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Integrability {
    pub p_derivatives: f64,
    pub q_square_integral: f64,
    pub r_square_integral: f64,
}

impl Integrability {
    pub fn finite(&self) -> bool {
        self.p_derivatives.is_finite() && self.q_square_integral.is_finite() && self.r_square_integral.is_finite()
    }
}

/// Compose `p(t, x) = Y_t(X_t^{-1}(x))`, `q = Z_t(X_{t-}^{-1}(x)) - dp(t-, x) sigma`
/// and `r(t, e, x) = p(t-, phi^{-1}(x)) - p(t-, x) + U_t(e, X_{t-}^{-1}(phi^{-1}(x)))`.
/// `perturb` is added to `p` before `q` and `r` are formed.
pub fn compose_solution(
    model: &CoefficientModel,
    family: &BsdeFamily,
    inverse: &InverseField,
    perturb: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<RandomFieldTriple> {
    require_scalar(model)?;
    let (paths, steps) = (family.paths(), family.steps());
    if inverse.paths.len() != paths {
        return Err(invalid("inverse", inverse.paths.len(), "one inverse path per BSDE path"));
    }
    let qs = &inverse.queries;
    let len = qs.len();
    let h = qs[1] - qs[0];
    if qs.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h) {
        return Err(invalid("queries", len, "inverse queries must form a uniform mesh"));
    }
    let queries = Uniform::new(qs[0], h, len);
    let s0 = &family.solutions[0];
    let (d, marks) = (s0.d, s0.marks);
    let times = s0.times.clone();
    let mesh = family.mesh;

    let rows = (0..paths)
        .into_par_iter()
        .map(|path| {
            let pinv = &inverse.paths[path];
            let nodes_per = (steps + 1) * len;
            let mut out = PathRows::new(nodes_per, d, marks);
            let mut sig = vec![0.0; d];
            for i in 0..=steps {
                let node = pinv.grid.base_nodes[i];
                let slot = pinv
                    .nodes
                    .binary_search(&node)
                    .map_err(|_| invalid("inverse", node, "inverse must cover every base node"))?;
                let inv = inverse.values_at(path, slot);
                let invl = inverse.left_at(path, slot);
                let ex = inverse.extrapolated_at(path, slot);
                let ycol = family.column(|s| s.y_at(i, path)[0]);
                let yse = family.column(|s| s.y_se[i * paths + path]);
                let o = i * len;
                let mut ok = vec![true; len];
                for k in 0..len {
                    let x = queries.point(k);
                    if i == steps {
                        let mut v = [0.0];
                        model.terminal(&[x], &mut v);
                        out.p[o + k] = v[0];
                        out.pl[o + k] = v[0];
                    } else {
                        let (v, e1) = mesh.interp(&ycol, inv[k]);
                        let (vl, e2) = mesh.interp(&ycol, invl[k]);
                        out.p[o + k] = v;
                        out.pl[o + k] = vl;
                        out.pse[o + k] = mesh.interp(&yse, invl[k]).0;
                        ok[k] = !(ex[k] || e1 || e2);
                    }
                    if let Some(f) = perturb {
                        out.p[o + k] += f(x);
                        out.pl[o + k] += f(x);
                    }
                }
                let pl = out.pl[o..o + len].to_vec();
                let at = At::time(times[i]);
                for r in 0..d {
                    let zcol = family.column(|s| s.z_at(i, path)[r]);
                    let zse = family.column(|s| s.z_se[(i * paths + path) * d + r]);
                    for k in 0..len {
                        let x = queries.point(k);
                        model.diffusion(at, &[x], &mut sig);
                        let (dp, _) = derivatives(&pl, h, k);
                        let (z, e) = mesh.interp(&zcol, invl[k]);
                        out.q[(o + k) * d + r] = z - dp * sig[r];
                        out.qse[(o + k) * d + r] = mesh.interp(&zse, invl[k]).0;
                        ok[k] &= !e;
                    }
                }
                for e in 0..marks {
                    let ucol = family.column(|s| s.u_at(i, path)[e]);
                    let use_ = family.column(|s| s.u_se[(i * paths + path) * marks + e]);
                    for k in 0..len {
                        let y = model.phi_inverse(at, e, &[queries.point(k)])?[0];
                        let (p_y, e1) = queries.interp(&pl, y);
                        let (xinv, e2) = queries.interp(invl, y);
                        let (u, e3) = mesh.interp(&ucol, xinv);
                        let idx = o * marks + e * len + k;
                        out.r[idx] = p_y - pl[k] + u;
                        out.rse[idx] = mesh.interp(&use_, xinv).0;
                        ok[k] &= !(e1 || e2 || e3);
                    }
                }
                out.valid[o..o + len].copy_from_slice(&ok);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut t = RandomFieldTriple {
        lo: queries.lo,
        h,
        len,
        paths,
        steps,
        d,
        marks,
        times,
        p: vec![],
        p_left: vec![],
        q: vec![],
        r: vec![],
        p_se: vec![],
        q_se: vec![],
        r_se: vec![],
        valid: vec![],
    };
    for row in rows {
        t.p.extend(row.p);
        t.p_left.extend(row.pl);
        t.q.extend(row.q);
        t.r.extend(row.r);
        t.p_se.extend(row.pse);
        t.q_se.extend(row.qse);
        t.r_se.extend(row.rse);
        t.valid.extend(row.valid);
    }
    Ok(t)
}

struct PathRows {
    p: Vec<f64>,
    pl: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    pse: Vec<f64>,
    qse: Vec<f64>,
    rse: Vec<f64>,
    valid: Vec<bool>,
}

impl PathRows {
    fn new(n: usize, d: usize, marks: usize) -> Self {
        Self {
            p: vec![0.0; n],
            pl: vec![0.0; n],
            q: vec![0.0; n * d],
            r: vec![0.0; n * marks],
            pse: vec![0.0; n],
            qse: vec![0.0; n * d],
            rse: vec![0.0; n * marks],
            valid: vec![false; n],
        }
    }
}

/// Everything needed to compose a triple from raw noise.
#[derive(Clone, Copy, Debug)]
pub struct ComposeConfig {
    pub initial: Uniform,
    pub queries: Uniform,
    pub regression: RegressionConfig,
}

pub struct Composition {
    pub family: BsdeFamily,
    pub flow: FlowField,
    pub inverse: InverseField,
    pub triple: RandomFieldTriple,
}

/// BSDE family, forward flow on the initial mesh, grid inversion at the
/// queries and the composed triple.
pub fn compose_from_noise(
    model: &CoefficientModel,
    noises: &[NoiseBundle],
    cfg: &ComposeConfig,
    perturb: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<Composition> {
    let family = solve_bsde_family(model, noises, cfg.initial, &cfg.regression)?;
    let flow = simulate_flow_ensemble(model, noises, &cfg.initial.points())?;
    let inverse = invert_flow_grid(&flow, &cfg.queries.points())?;
    let triple = compose_solution(model, &family, &inverse, perturb)?;
    Ok(Composition {
        family,
        flow,
        inverse,
        triple,
    })
}

/// Agreement of the composed triple with closed forms: `p` in units of its
/// standard error, `q` and `r` against zero-or-given targets.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TripleAgreement {
    pub p: crate::bsde::Agreement,
    pub q: crate::bsde::Agreement,
    pub r: crate::bsde::Agreement,
}

/// Compare against `p_exact(t, x)` with `q = r = 0`, on valid points strictly
/// before the horizon.
pub fn compare_triple(triple: &RandomFieldTriple, p_exact: impl Fn(f64, f64) -> f64) -> TripleAgreement {
    let mut acc = [Acc::default(), Acc::default(), Acc::default()];
    let qm = triple.queries();
    for path in 0..triple.paths {
        for i in 0..triple.steps {
            let valid = triple.valid_row(path, i);
            let p = triple.p_row(path, i);
            for k in 0..triple.len {
                if !valid[k] {
                    continue;
                }
                let o = triple.at(path, i) + k;
                acc[0].push(p[k] - p_exact(triple.times[i], qm.point(k)), triple.p_se[o]);
                for r in 0..triple.d {
                    acc[1].push(triple.q_at(path, i, k, r), triple.q_se[o * triple.d + r]);
                }
                for e in 0..triple.marks {
                    acc[2].push(triple.r_row(path, i, e)[k], triple.r_se_at(path, i, e, k));
                }
            }
        }
    }
    TripleAgreement {
        p: acc[0].finish(),
        q: acc[1].finish(),
        r: acc[2].finish(),
    }
}

#[derive(Default)]
struct Acc {
    err: f64,
    se: f64,
    max: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, err: f64, se: f64) {
        self.err += err * err;
        self.se += se * se;
        self.max = self.max.max(err.abs());
        self.n += 1;
    }

    fn finish(&self) -> crate::bsde::Agreement {
        let n = self.n.max(1) as f64;
        crate::bsde::Agreement {
            rms_error: (self.err / n).sqrt(),
            rms_se: (self.se / n).sqrt(),
            max_error: self.max,
            samples: self.n,
        }
    }
}

/// Residual of the time-discretized backward integral PDE. The headline
/// statistic is the RMS over `(node, x)` of the cross-path mean of the
/// per-step residual; the pathwise RMS is reported alongside.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    pub steps: usize,
    pub dt: f64,
    pub rms: f64,
    pub max: f64,
    pub pathwise_rms: f64,
    /// `(node, x)` cells entering the statistic.
    pub cells: usize,
    /// Per-path samples dropped for extrapolation.
    pub excluded: usize,
    pub boundary_band: usize,
}

/// Points within this many query nodes of either end are skipped; the
/// residual needs second differences of `p` and first differences of `q`.
pub const RESIDUAL_BAND: usize = 2;

pub fn bsipde_residual(model: &CoefficientModel, triple: &RandomFieldTriple, noises: &[NoiseBundle]) -> Result<ResidualReport> {
    require_scalar(model)?;
    if noises.len() != triple.paths {
        return Err(invalid("noise", noises.len(), "one noise path per triple path"));
    }
    let (len, steps, d, marks, h) = (triple.len, triple.steps, triple.d, triple.marks, triple.h);
    let qm = triple.queries();
    let band = RESIDUAL_BAND;
    if len <= 2 * band {
        return Err(invalid("queries", len, "too few points for the residual band"));
    }
    let v: Vec<f64> = model.marks.intensities().to_vec();
    let per_path = (0..triple.paths)
        .into_par_iter()
        .map(|path| {
            let counts = noises[path].jump_counts(marks);
            let mut sum = vec![f64::NAN; steps * len];
            let mut excluded = 0usize;
            let (mut sig, mut b, mut g) = (vec![0.0; d], [0.0], vec![[0.0]; marks]);
            let mut fo = [0.0];
            for i in 0..steps {
                let t = triple.times[i];
                let dt = triple.times[i + 1] - t;
                let at = At::time(t);
                let dw = noises[path].increment(i);
                let pl = triple.p_left_row(path, i);
                let p = triple.p_row(path, i);
                let pn = triple.p_row(path, i + 1);
                let (va, vb) = (triple.valid_row(path, i), triple.valid_row(path, i + 1));
                let qrows: Vec<Vec<f64>> = (0..d).map(|r| (0..len).map(|k| triple.q_at(path, i, k, r)).collect()).collect();
                for k in band..len - band {
                    if !(k - band..=k + band).all(|j| va[j]) || !vb[k] {
                        excluded += 1;
                        continue;
                    }
                    let x = qm.point(k);
                    model.diffusion(at, &[x], &mut sig);
                    model.drift(at, &[x], &mut b);
                    let (dp, d2p) = derivatives(pl, h, k);
                    let mut drift = b[0];
                    let mut u_arg = vec![0.0; marks];
                    let mut correction = 0.0;
                    let mut outside = false;
                    for e in 0..marks {
                        model.jump(at, e, &[x], &mut g[e]);
                        drift -= v[e] * g[e][0];
                        let y = x + g[e][0];
                        let (r_phi, e1) = qm.interp(triple.r_row(path, i, e), y);
                        let (p_phi, e2) = qm.interp(pl, y);
                        outside |= e1 || e2;
                        u_arg[e] = r_phi - pl[k] + p_phi;
                        correction += v[e] * (triple.r_row(path, i, e)[k] - r_phi + pl[k] - p_phi);
                    }
                    if outside {
                        excluded += 1;
                        continue;
                    }
                    let ss: f64 = sig.iter().map(|s| s * s).sum();
                    let lp = 0.5 * ss * d2p + drift * dp;
                    let mut mq = 0.0;
                    let mut z_arg = vec![0.0; d];
                    for r in 0..d {
                        let (dq, _) = derivatives(&qrows[r], h, k);
                        mq += sig[r] * dq;
                        z_arg[r] = qrows[r][k] + dp * sig[r];
                    }
                    model.driver(
                        at,
                        &DriverArgs {
                            x: &[x],
                            y: &[p[k]],
                            z: &z_arg,
                            u: &u_arg,
                        },
                        &mut fo,
                    );
                    let phi = -fo[0] - lp - mq + correction;
                    let mut mart = 0.0;
                    for r in 0..d {
                        mart += qrows[r][k] * dw[r];
                    }
                    for e in 0..marks {
                        mart += triple.r_row(path, i, e)[k] * (counts[i * marks + e] as f64 - v[e] * dt);
                    }
                    sum[i * len + k] = pn[k] - p[k] - phi * dt - mart;
                }
            }
            (sum, excluded)
        })
        .collect::<Vec<_>>();
    let mut cells = 0usize;
    let (mut ss, mut mx, mut pw, mut pwn) = (0.0, 0.0_f64, 0.0, 0usize);
    let excluded = per_path.iter().map(|p| p.1).sum();
    for c in 0..steps * len {
        let vals: Vec<f64> = per_path.iter().map(|p| p.0[c]).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        ss += m * m;
        mx = mx.max(m.abs());
        cells += 1;
        pw += vals.iter().map(|v| v * v).sum::<f64>();
        pwn += vals.len();
    }
    if cells == 0 {
        return Err(invalid("residual", 0, "no interior point survived the extrapolation filter"));
    }
    Ok(ResidualReport {
        steps,
        dt: triple.times[1] - triple.times[0],
        rms: (ss / cells as f64).sqrt(),
        max: mx,
        pathwise_rms: (pw / pwn as f64).sqrt(),
        cells,
        excluded,
        boundary_band: band,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualStudy {
    pub reports: Vec<ResidualReport>,
    pub fit: OrderFit,
}

/// Residual on nested noise: the fine ensemble coarsened to each level.
pub fn residual_convergence(
    model: &CoefficientModel,
    fine: &[NoiseBundle],
    levels: &[usize],
    cfg: &ComposeConfig,
    perturb: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<ResidualStudy> {
    let fine_steps = fine.first().map_or(0, |b| b.grid.steps);
    let mut reports = vec![];
    for &n in levels {
        if n == 0 || fine_steps % n != 0 {
            return Err(invalid("levels", n, "each level must divide the fine step count"));
        }
        let noises = fine.iter().map(|b| coarsen_noise(b, fine_steps / n)).collect::<Result<Vec<_>>>()?;
        let c = compose_from_noise(model, &noises, cfg, perturb)?;
        reports.push(bsipde_residual(model, &c.triple, &noises)?);
    }
    let dts: Vec<f64> = reports.iter().map(|r| r.dt).collect();
    let errs: Vec<f64> = reports.iter().map(|r| r.rms).collect();
    Ok(ResidualStudy {
        fit: fit_order(&dts, &errs),
        reports,
    })
}

/// Deterministic field `v(t, x)` on a uniform time grid and mesh, `[node][x]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PideField {
    pub lo: f64,
    pub h: f64,
    pub len: usize,
    pub steps: usize,
    pub horizon: f64,
    pub values: Vec<f64>,
}

impl PideField {
    pub fn mesh(&self) -> Uniform {
        Uniform::new(self.lo, self.h, self.len)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    /// Linear in time and space; `None` outside the mesh.
    pub fn eval(&self, t: f64, x: f64) -> Option<f64> {
        let dt = self.horizon / self.steps as f64;
        let s = (t / dt).clamp(0.0, self.steps as f64);
        let i = (s.floor() as usize).min(self.steps - 1);
        let w = s - i as f64;
        let m = self.mesh();
        let (a, e1) = m.interp(self.row(i), x);
        let (b, e2) = m.interp(self.row(i + 1), x);
        (!(e1 || e2)).then_some((1.0 - w) * a + w * b)
    }
}

/// Explicit backward finite differences for
/// `v_t + L v + sum_e v(e) [v(phi_e x) - v(x)] + f(t, x, v, dv sigma, v(phi) - v) = 0`,
/// `v(T) = terminal`. End points are extrapolated linearly, as are jump
/// targets that leave the mesh.
pub fn pide_reference(model: &CoefficientModel, steps: usize, mesh: Uniform) -> Result<PideField> {
    require_scalar(model)?;
    if steps == 0 || mesh.len < 4 {
        return Err(invalid("pide", mesh.len, "need steps >= 1 and at least 4 mesh points"));
    }
    let (d, marks) = (model.dim_brownian, model.marks.len());
    let dt = model.horizon / steps as f64;
    let h = mesh.h;
    let lam = model.marks.total_intensity();
    let xs = mesh.points();
    let mut sig = vec![0.0; d];
    // Stability: the diagonal weight 1 - dt (sigma^2 / h^2 + lambda) stays >= 0.
    let mut worst = 0.0_f64;
    for i in 0..=steps {
        for &x in &xs {
            model.diffusion(At::time(i as f64 * dt), &[x], &mut sig);
            let ss: f64 = sig.iter().map(|s| s * s).sum();
            worst = worst.max(ss / (h * h) + lam);
        }
    }
    if dt * worst > 1.0 {
        return Err(Error::Stability {
            message: format!("explicit PIDE step dt = {dt:.3e} exceeds the diffusion bound 1 / {worst:.3e}"),
            suggested_dt: 0.9 / worst,
        });
    }
    let extrap = |vals: &[f64], y: f64| -> f64 {
        let (j, w) = mesh.locate(y);
        vals[j] + w * (vals[j + 1] - vals[j])
    };
    let len = mesh.len;
    let mut values = vec![0.0; (steps + 1) * len];
    for (k, &x) in xs.iter().enumerate() {
        let mut v = [0.0];
        model.terminal(&[x], &mut v);
        values[steps * len + k] = v[0];
    }
    let (mut b, mut g, mut fo) = ([0.0], [0.0], [0.0]);
    let mut u = vec![0.0; marks];
    let mut z = vec![0.0; d];
    for i in (0..steps).rev() {
        let t = (i + 1) as f64 * dt;
        let at = At::time(t);
        let next = values[(i + 1) * len..(i + 2) * len].to_vec();
        for k in 1..len - 1 {
            let x = xs[k];
            let (dv, d2v) = derivatives(&next, h, k);
            model.drift(at, &[x], &mut b);
            model.diffusion(at, &[x], &mut sig);
            let mut drift = b[0];
            let mut jump = 0.0;
            for e in 0..marks {
                model.jump(at, e, &[x], &mut g);
                drift -= model.marks.intensity(e) * g[0];
                u[e] = extrap(&next, x + g[0]) - next[k];
                jump += model.marks.intensity(e) * u[e];
            }
            let ss: f64 = sig.iter().map(|s| s * s).sum();
            for r in 0..d {
                z[r] = dv * sig[r];
            }
            model.driver(
                at,
                &DriverArgs {
                    x: &[x],
                    y: &[next[k]],
                    z: &z,
                    u: &u,
                },
                &mut fo,
            );
            let gen = 0.5 * ss * d2v + drift * dv + jump + fo[0];
            values[i * len + k] = next[k] + dt * gen;
        }
        let row = &mut values[i * len..(i + 1) * len];
        row[0] = 2.0 * row[1] - row[2];
        row[len - 1] = 2.0 * row[len - 2] - row[len - 3];
        if let Some(k) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "PIDE value",
                t,
                mark: None,
                x: vec![xs[k]],
            });
        }
    }
    Ok(PideField {
        lo: mesh.lo,
        h,
        len,
        steps,
        horizon: model.horizon,
        values,
    })
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CrosscheckReport {
    pub max: f64,
    pub rms: f64,
    /// RMS standard error of the BSDE values compared against.
    pub rms_se: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl CrosscheckReport {
    pub fn within(&self, k: f64, floor: f64) -> bool {
        self.rms <= k * self.rms_se + floor
    }
}

/// `|candidate(path, node, t, X_t(x)) - Y_t(x)|` over paths, base nodes and
/// initial mesh points; a candidate returning `None` skips the point.
pub fn uniqueness_crosscheck(
    candidate: &(dyn Fn(usize, usize, f64, f64) -> Option<f64> + Sync),
    flow: &FlowField,
    family: &BsdeFamily,
) -> Result<CrosscheckReport> {
    if flow.paths.len() != family.paths() || flow.mesh_len() != family.mesh.len {
        return Err(invalid("flow", flow.mesh_len(), "flow must share paths and initial mesh with the BSDE family"));
    }
    let paths = family.paths();
    let times = &family.solutions[0].times;
    let parts: Vec<CrosscheckReport> = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut c = CrosscheckReport::default();
            for (i, &node) in flow.paths[path].grid.base_nodes.iter().enumerate() {
                for (m, s) in family.solutions.iter().enumerate() {
                    let x = flow.value(path, node, m)[0];
                    match candidate(path, i, times[i], x) {
                        Some(v) => {
                            let err = v - s.y_at(i, path)[0];
                            c.max = c.max.max(err.abs());
                            c.rms += err * err;
                            c.rms_se += s.y_se[i * paths + path].powi(2);
                            c.samples += 1;
                        }
                        None => c.skipped += 1,
                    }
                }
            }
            c
        })
        .collect();
    let mut out = CrosscheckReport::default();
    for c in parts {
        out.max = out.max.max(c.max);
        out.rms += c.rms;
        out.rms_se += c.rms_se;
        out.samples += c.samples;
        out.skipped += c.skipped;
    }
    let n = out.samples.max(1) as f64;
    out.rms = (out.rms / n).sqrt();
    out.rms_se = (out.rms_se / n).sqrt();
    Ok(out)
}

/// The composed `p` as a per-path candidate field.
pub fn triple_candidate(triple: &RandomFieldTriple) -> impl Fn(usize, usize, f64, f64) -> Option<f64> + Sync + '_ {
    move |path, i, _t, x| {
        let qm = triple.queries();
        let (v, ex) = qm.interp(triple.p_row(path, i), x);
        let (j, _) = qm.locate(x);
        let valid = triple.valid_row(path, i);
        (!ex && valid[j] && valid[j + 1]).then_some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{catalog_problem, catalog_problem_with, ParamOverrides, Terminal};
    use crate::noise::{generate_ensemble, TimeGrid};

    fn noises(model: &CoefficientModel, steps: usize, paths: usize, seed: u64) -> Vec<NoiseBundle> {
        generate_ensemble(TimeGrid::new(model.horizon, steps).unwrap(), &model.marks, model.dim_brownian, seed, paths).unwrap()
    }

    fn cfg() -> ComposeConfig {
        ComposeConfig {
            initial: Uniform::covering(0.1, 4.5, 0.1),
            queries: Uniform::covering(0.5, 2.0, 1.0 / 32.0),
            regression: RegressionConfig::default(),
        }
    }

    #[test]
    fn zero_problem_composes_to_identity() {
        let pb = catalog_problem("zero").unwrap();
        let nb = noises(&pb.model, 8, 20, 1);
        let c = compose_from_noise(&pb.model, &nb, &cfg(), None).unwrap();
        let t = &c.triple;
        for path in 0..t.paths {
            for i in 0..=t.steps {
                for k in 0..t.len {
                    assert!((t.p_row(path, i)[k] - t.queries().point(k)).abs() < 1e-12);
                    assert!(t.q_at(path, i, k, 0).abs() < 1e-12);
                }
            }
        }
        let r = bsipde_residual(&pb.model, t, &nb).unwrap();
        assert!(r.rms < 1e-12 && r.pathwise_rms < 1e-12, "{r:?}");
    }

    #[test]
    fn terminal_slice_is_exact() {
        let pb = catalog_problem("nonlinear-jump-diffusion").unwrap();
        let nb = noises(&pb.model, 4, 50, 2);
        let c = compose_from_noise(&pb.model, &nb, &cfg(), None).unwrap();
        let t = &c.triple;
        let mut v = [0.0];
        for k in 0..t.len {
            pb.model.terminal(&[t.queries().point(k)], &mut v);
            assert_eq!(t.p_row(0, t.steps)[k], v[0]);
        }
    }

    #[test]
    fn discounted_constant_is_flat_in_space() {
        let o = ParamOverrides {
            terminal: Some(Terminal::Constant { value: 1.0 }),
            ..Default::default()
        };
        let pb = catalog_problem_with("linear-driver", &o).unwrap();
        let nb = noises(&pb.model, 16, 30, 3);
        let c = compose_from_noise(&pb.model, &nb, &cfg(), None).unwrap();
        let a = compare_triple(&c.triple, |t, _| (-0.5 * (1.0 - t)).exp());
        assert!(a.p.max_error < 1e-3 && a.q.max_error < 1e-9 && a.r.max_error < 1e-9, "{a:?}");
    }

    #[test]
    fn linear_problem_triple_matches_closed_form() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let nb = noises(&pb.model, 16, 400, 4);
        let c = compose_from_noise(&pb.model, &nb, &cfg(), None).unwrap();
        let a = compare_triple(&c.triple, |t, x| pb.oracle_field(t, x).unwrap());
        assert!(a.p.within(3.0), "{a:?}");
        assert!(a.q.rms_error <= 3.0 * a.q.rms_se + 1e-3 && a.r.rms_error <= 3.0 * a.r.rms_se + 1e-3, "{a:?}");
        assert!(c.triple.integrability(&pb.model).finite());
    }

    #[test]
    fn perturbed_field_is_rejected() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let nb = noises(&pb.model, 64, 1000, 5);
        let cf = ComposeConfig {
            initial: Uniform::covering(0.1, 4.5, 0.2),
            queries: Uniform::covering(0.5, 2.0, 1.0 / 16.0),
            regression: RegressionConfig::default(),
        };
        let base = compose_from_noise(&pb.model, &nb, &cf, None).unwrap();
        let bump = |x: f64| 0.1 * x.sin();
        let bad = compose_from_noise(&pb.model, &nb, &cf, Some(&bump)).unwrap();
        let r0 = bsipde_residual(&pb.model, &base.triple, &nb).unwrap();
        let r1 = bsipde_residual(&pb.model, &bad.triple, &nb).unwrap();
        assert!(r1.rms > 5.0 * r0.rms, "{} {}", r0.rms, r1.rms);
    }

    #[test]
    fn residual_decreases_under_refinement() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let fine = noises(&pb.model, 64, 800, 6);
        let s = residual_convergence(&pb.model, &fine, &[8, 16, 32, 64], &cfg(), None).unwrap();
        assert!(s.fit.passes(0.45), "{:?}", s.fit);
    }

    #[test]
    fn pide_matches_linear_closed_form() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let mesh = Uniform::covering(0.0, 1.0, 1.0 / 128.0);
        let v = pide_reference(&pb.model, 1024, mesh).unwrap();
        let mut worst = 0.0_f64;
        for i in 0..=1024 {
            for k in 1..mesh.len - 1 {
                let t = i as f64 / 1024.0;
                worst = worst.max((v.row(i)[k] - pb.oracle_field(t, mesh.point(k)).unwrap()).abs());
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn pide_refuses_unstable_step() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let err = pide_reference(&pb.model, 16, Uniform::covering(0.0, 2.0, 1.0 / 128.0)).unwrap_err();
        match err {
            Error::Stability { suggested_dt, .. } => assert!(suggested_dt < 1.0 / 16.0),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn pide_ode_and_constant_cases() {
        let o = ParamOverrides {
            a: Some(0.0),
            s: Some(0.0),
            c: Some(0.0),
            terminal: Some(Terminal::Sine),
            ..Default::default()
        };
        let pb = catalog_problem_with("linear-driver", &o).unwrap();
        let mesh = Uniform::covering(-1.0, 1.0, 0.05);
        let v = pide_reference(&pb.model, 200, mesh).unwrap();
        let mut phi = [0.0];
        for k in 1..mesh.len - 1 {
            pb.model.terminal(&[mesh.point(k)], &mut phi);
            let want = (1.0 - 0.5 / 200.0f64).powi(200) * phi[0];
            assert!((v.row(0)[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn crosscheck_against_composed_and_pide_fields() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let nb = noises(&pb.model, 32, 300, 7);
        let c = compose_from_noise(&pb.model, &nb, &cfg(), None).unwrap();
        let own = uniqueness_crosscheck(&triple_candidate(&c.triple), &c.flow, &c.family).unwrap();
        assert!(own.max < 1e-8, "{own:?}");
        let v = pide_reference(&pb.model, 4096, Uniform::covering(0.0, 6.0, 0.1)).unwrap();
        let cand = |_p: usize, _i: usize, t: f64, x: f64| v.eval(t, x);
        let r = uniqueness_crosscheck(&cand, &c.flow, &c.family).unwrap();
        assert!(r.within(3.0, 1e-3), "{r:?}");
    }
}
