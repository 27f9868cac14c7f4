//! Inverse stochastic flow by three constructions: inversion of a simulated
//! flow on its mesh, explicit finite differences for the stochastic
//! integro-PDE solved by the inverse, and a backward SDE run in reverse time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::interp::{derivatives, interp_sorted, Uniform};
use crate::model::{At, CoefficientModel};
use crate::noise::{AdaptedGrid, NoiseBundle};
use crate::sde_flow::FlowField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InverseMethod {
    GridInversion,
    Sipde,
    BackwardSde,
}

impl InverseMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            InverseMethod::GridInversion => "grid",
            InverseMethod::Sipde => "sipde",
            InverseMethod::BackwardSde => "backward",
        }
    }
}

/// Inverse flow of one path at the listed nodes of its jump-adapted grid,
/// stored `[node][query]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathInverse {
    pub path_id: u64,
    pub grid: AdaptedGrid,
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub left: Vec<f64>,
    pub extrapolated: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InverseField {
    pub method: InverseMethod,
    pub queries: Vec<f64>,
    /// Queries within this many points of either end are boundary-affected.
    pub boundary_band: usize,
    pub paths: Vec<PathInverse>,
}

impl InverseField {
    pub fn query_len(&self) -> usize {
        self.queries.len()
    }

    pub fn values_at(&self, path: usize, slot: usize) -> &[f64] {
        let q = self.queries.len();
        &self.paths[path].values[slot * q..(slot + 1) * q]
    }

    pub fn left_at(&self, path: usize, slot: usize) -> &[f64] {
        let q = self.queries.len();
        &self.paths[path].left[slot * q..(slot + 1) * q]
    }

    pub fn extrapolated_at(&self, path: usize, slot: usize) -> &[bool] {
        let q = self.queries.len();
        &self.paths[path].extrapolated[slot * q..(slot + 1) * q]
    }

    /// Queries usable for verification statistics.
    pub fn interior(&self) -> std::ops::Range<usize> {
        let q = self.queries.len();
        self.boundary_band.min(q)..q.saturating_sub(self.boundary_band)
    }
}

fn require_1d(model_dim: usize) -> Result<()> {
    if model_dim != 1 {
        return Err(Error::Unsupported(format!("mesh-based inverse constructions need n = 1, got n = {model_dim}")));
    }
    Ok(())
}

fn check_queries(q: &[f64]) -> Result<()> {
    if q.len() < 4 || q.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("queries", q.len(), "at least 4 strictly increasing points"));
    }
    Ok(())
}

/// Invert `x -> X_t(x)` at every node by linear interpolation of the sorted
/// samples `(X_t(x_m), x_m)`.
pub fn invert_flow_grid(flow: &FlowField, queries: &[f64]) -> Result<InverseField> {
    require_1d(flow.dim)?;
    check_queries(queries)?;
    let mesh = &flow.mesh;
    let m_len = mesh.len();
    let mut order: Vec<usize> = (0..m_len).collect();
    order.sort_by(|&a, &b| mesh[a].total_cmp(&mesh[b]));
    let xs: Vec<f64> = order.iter().map(|&i| mesh[i]).collect();
    let paths = flow
        .paths
        .par_iter()
        .map(|pf| {
            let nodes = pf.grid.len();
            let mut values = Vec::with_capacity(nodes * queries.len());
            let mut left = Vec::with_capacity(nodes * queries.len());
            let mut extrapolated = Vec::with_capacity(nodes * queries.len());
            let mut img = vec![0.0; m_len];
            let mut img_left = vec![0.0; m_len];
            for k in 0..nodes {
                for (slot, &i) in order.iter().enumerate() {
                    img[slot] = pf.values[k * m_len + i];
                    img_left[slot] = pf.left[k * m_len + i];
                }
                if img.windows(2).any(|w| w[1] <= w[0]) || img_left.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::NonMonotone {
                        path_id: pf.path_id,
                        t: pf.grid.times[k],
                    });
                }
                for &y in queries {
                    let (u, ex) = interp_sorted(&img, &xs, y);
                    let (ul, exl) = interp_sorted(&img_left, &xs, y);
                    values.push(u);
                    left.push(ul);
                    extrapolated.push(ex || exl);
                }
            }
            Ok(PathInverse {
                path_id: pf.path_id,
                grid: pf.grid.clone(),
                nodes: (0..nodes).collect(),
                values,
                left,
                extrapolated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseField {
        method: InverseMethod::GridInversion,
        queries: queries.to_vec(),
        boundary_band: 0,
        paths,
    })
}

/// Explicit scheme for the inverse-flow SIPDE on one path.
///
/// Between jumps `du = (1/2 sum_r sigma_r^2 u_xx + (sum_r sigma_r sigma_r' - b + sum_e v g) u_x) dt
/// - sum_r sigma_r u_x dW^r`; at a jump `u <- u(phi^{-1}(.))`.
pub fn integrate_inverse_sipde(model: &CoefficientModel, noise: &NoiseBundle, mesh: Uniform) -> Result<PathInverse> {
    require_1d(model.dim_state)?;
    if mesh.len < 4 {
        return Err(invalid("mesh", mesh.len, "at least 4 points"));
    }
    let grid = AdaptedGrid::build(noise);
    let d = model.dim_brownian;
    let xs = mesh.points();
    let q = mesh.len;
    let h = mesh.h;
    let dt_max = noise.grid.dt();

    let mut sig = vec![0.0; d];
    let mut scratch = [0.0];
    let mut drift = [0.0];
    // Coefficient tables at one time: u_xx weight, u_x weight, noise weights.
    let coefficients = |at: At, sig: &mut [f64], a2: &mut [f64], a1: &mut [f64], br: &mut [f64]| {
        let mut drift = [0.0];
        let mut scratch = [0.0];
        let mut dsig = vec![0.0; d];
        for j in 0..q {
            let x = [xs[j]];
            model.diffusion(at, &x, sig);
            model.diffusion_jacobian_into(at, &x, &mut dsig);
            model.compensated_drift(at, &x, &mut scratch, &mut drift);
            let mut s2 = 0.0;
            let mut ssp = 0.0;
            for r in 0..d {
                s2 += sig[r] * sig[r];
                ssp += sig[r] * dsig[r];
                br[j * d + r] = sig[r];
            }
            a2[j] = 0.5 * s2;
            a1[j] = ssp - drift[0];
        }
    };
    let mut a2 = vec![0.0; q];
    let mut a1 = vec![0.0; q];
    let mut br = vec![0.0; q * d];

    // Stability guard over the whole horizon.
    let mut worst_s2 = 0.0_f64;
    let mut worst_a1 = 0.0_f64;
    for i in 0..=noise.grid.steps {
        let at = At {
            t: noise.grid.node(i),
            factor: &[],
        };
        if i > 0 && !model.random_coefficients && i % 8 != 0 && i != noise.grid.steps {
            continue;
        }
        let factor = vec![0.0; d];
        coefficients(At { factor: &factor, ..at }, &mut sig, &mut a2, &mut a1, &mut br);
        worst_s2 = worst_s2.max(a2.iter().cloned().fold(0.0, f64::max) * 2.0);
        worst_a1 = worst_a1.max(a1.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }
    let _ = (&mut drift, &mut scratch);
    let limit_diff = if worst_s2 > 0.0 { h * h / worst_s2 } else { f64::INFINITY };
    let limit_adv = if worst_a1 > 0.0 { h / worst_a1 } else { f64::INFINITY };
    let limit = limit_diff.min(limit_adv);
    if dt_max > limit {
        return Err(Error::Stability {
            message: format!(
                "explicit SIPDE step needs sigma^2 dt <= h^2 and |drift| dt <= h (h = {h}, max sigma^2 = {worst_s2:.3e}, max |drift| = {worst_a1:.3e})"
            ),
            suggested_dt: 0.9 * limit,
        });
    }

    let nodes = grid.len();
    let mut values = Vec::with_capacity(nodes * q);
    let mut left = Vec::with_capacity(nodes * q);
    let mut u = xs.clone();
    let mut next = vec![0.0; q];
    values.extend_from_slice(&u);
    left.extend_from_slice(&u);
    let mut dw = vec![0.0; d];
    let mut last_t = f64::NAN;
    for k in 0..nodes - 1 {
        let dt = grid.step(k, &mut dw);
        let at = At {
            t: grid.times[k],
            factor: grid.w_at(k),
        };
        if dt > 0.0 {
            if model.random_coefficients || at.t != last_t {
                coefficients(at, &mut sig, &mut a2, &mut a1, &mut br);
                last_t = at.t;
            }
            for j in 0..q {
                let (ux, uxx) = derivatives(&u, h, j);
                let mut noise_term = 0.0;
                for r in 0..d {
                    noise_term += br[j * d + r] * dw[r];
                }
                next[j] = u[j] + (a2[j] * uxx + a1[j] * ux) * dt - ux * noise_term;
            }
            std::mem::swap(&mut u, &mut next);
        }
        left.extend_from_slice(&u);
        if let Some(e) = grid.jump[k + 1] {
            let at = At {
                t: grid.times[k + 1],
                factor: grid.w_at(k + 1),
            };
            for j in 0..q {
                let pre = model.phi_inverse(at, e, &[xs[j]])?;
                next[j] = mesh.interp(&u, pre[0]).0;
            }
            std::mem::swap(&mut u, &mut next);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                path_id: noise.path_id,
                t: grid.times[k + 1],
                mesh_index: u.iter().position(|v| !v.is_finite()).unwrap(),
            });
        }
        values.extend_from_slice(&u);
    }
    Ok(PathInverse {
        path_id: noise.path_id,
        nodes: (0..nodes).collect(),
        extrapolated: vec![false; nodes * q],
        grid,
        values,
        left,
    })
}

/// Width of the boundary band for the SIPDE scheme: jump reach plus the
/// stencil.
pub fn sipde_boundary_band(model: &CoefficientModel, mesh: Uniform) -> usize {
    let mut reach = 0.0_f64;
    let mut g = [0.0];
    for j in 0..mesh.len {
        for e in 0..model.marks.len() {
            model.jump(At::time(0.0), e, &[mesh.point(j)], &mut g);
            reach = reach.max(g[0].abs());
        }
    }
    2 + (reach / mesh.h).ceil() as usize
}

pub fn integrate_inverse_sipde_ensemble(model: &CoefficientModel, noises: &[NoiseBundle], mesh: Uniform) -> Result<InverseField> {
    let paths = noises
        .par_iter()
        .map(|nb| integrate_inverse_sipde(model, nb, mesh))
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseField {
        method: InverseMethod::Sipde,
        queries: mesh.points(),
        boundary_band: sipde_boundary_band(model, mesh),
        paths,
    })
}

/// `X^{-1}_{0,t}(y)` for every query (`Q x n`), with `t` the time of node
/// `end_node` of the jump-adapted grid. Reverse-time Euler: at a jump node
/// `x <- phi^{-1}(x)`, then over the step
/// `x <- x + (-b + sum_e v g + 2c) dt - sigma dW` with coefficients at the
/// later end point.
pub fn integrate_inverse_backward_sde(
    model: &CoefficientModel,
    grid: &AdaptedGrid,
    queries: &[f64],
    end_node: usize,
    include_end_jump: bool,
) -> Result<Vec<f64>> {
    if model.random_coefficients {
        return Err(Error::Unsupported(
            "the backward SDE for the inverse flow needs deterministic coefficients".into(),
        ));
    }
    let n = model.dim_state;
    let d = model.dim_brownian;
    if queries.len() % n != 0 {
        return Err(invalid("queries", queries.len(), "a multiple of dim_state"));
    }
    let mut x = queries.to_vec();
    let mut b = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut sig = vec![0.0; n * d];
    let mut dsig = vec![0.0; n * d * n];
    let mut dw = vec![0.0; d];
    let mut tmp = vec![0.0; n];
    for k in (1..=end_node).rev() {
        let at = At::time(grid.times[k]);
        if let Some(e) = grid.jump[k] {
            if k != end_node || include_end_jump {
                for p in x.chunks_mut(n) {
                    model.phi_inverse_into(at, e, p, &mut tmp)?;
                    p.copy_from_slice(&tmp);
                }
            }
        }
        let dt = grid.step(k - 1, &mut dw);
        if dt == 0.0 {
            continue;
        }
        for p in x.chunks_mut(n) {
            model.drift(at, p, &mut b);
            for e in 0..model.marks.len() {
                model.jump(at, e, p, &mut g);
                let v = model.marks.intensity(e);
                for i in 0..n {
                    b[i] -= v * g[i];
                }
            }
            model.diffusion(at, p, &mut sig);
            model.diffusion_correction_with(at, p, &sig, &mut dsig, &mut c);
            for i in 0..n {
                let mut inc = (-b[i] + 2.0 * c[i]) * dt;
                for j in 0..d {
                    inc -= sig[i * d + j] * dw[j];
                }
                tmp[i] = p[i] + inc;
            }
            p.copy_from_slice(&tmp);
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                path_id: u64::MAX,
                t: grid.times[k - 1],
                mesh_index: i / n,
            });
        }
    }
    Ok(x)
}

/// Backward-SDE inverse at the given base steps of every path.
pub fn backward_inverse_field(
    model: &CoefficientModel,
    noises: &[NoiseBundle],
    queries: &[f64],
    base_steps: &[usize],
) -> Result<InverseField> {
    require_1d(model.dim_state)?;
    check_queries(queries)?;
    let paths = noises
        .par_iter()
        .map(|nb| {
            let grid = AdaptedGrid::build(nb);
            let mut nodes = Vec::with_capacity(base_steps.len());
            let mut values = Vec::new();
            let mut left = Vec::new();
            for &i in base_steps {
                let node = *grid
                    .base_nodes
                    .get(i)
                    .ok_or_else(|| invalid("base_steps", i, "must be a base grid node"))?;
                let v = integrate_inverse_backward_sde(model, &grid, queries, node, true)?;
                let l = if grid.jump[node].is_some() {
                    integrate_inverse_backward_sde(model, &grid, queries, node, false)?
                } else {
                    v.clone()
                };
                nodes.push(node);
                values.extend(v);
                left.extend(l);
            }
            Ok(PathInverse {
                path_id: nb.path_id,
                extrapolated: vec![false; values.len()],
                grid,
                nodes,
                values,
                left,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseField {
        method: InverseMethod::BackwardSde,
        queries: queries.to_vec(),
        boundary_band: 0,
        paths,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct IdentityStats {
    pub rms: f64,
    pub max: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Statistics of `u(t, X_t(x)) - x` over paths, the inverse field's nodes and
/// the flow mesh. Points landing in the boundary band or on extrapolated
/// queries are skipped.
pub fn inversion_identity(inv: &InverseField, flow: &FlowField) -> Result<IdentityStats> {
    require_1d(flow.dim)?;
    if inv.paths.len() != flow.paths.len() {
        return Err(invalid("paths", inv.paths.len(), "inverse and flow must cover the same paths"));
    }
    let ys = &inv.queries;
    let range = inv.interior();
    if range.len() < 2 {
        return Err(invalid("queries", ys.len(), "no interior queries left"));
    }
    let (ylo, yhi) = (ys[range.start], ys[range.end - 1]);
    let mut sq = 0.0;
    let mut max = 0.0_f64;
    let mut samples = 0;
    let mut skipped = 0;
    for (p, (pi, pf)) in inv.paths.iter().zip(&flow.paths).enumerate() {
        if pi.path_id != pf.path_id || pi.grid.len() != pf.grid.len() {
            return Err(invalid("paths", pi.path_id, "inverse and flow must share noise path by path"));
        }
        for (slot, &node) in pi.nodes.iter().enumerate() {
            let vals = inv.values_at(p, slot);
            let ex = inv.extrapolated_at(p, slot);
            for m in 0..flow.mesh_len() {
                let x = flow.mesh[m];
                let y = flow.value(p, node, m)[0];
                if !(y >= ylo && y <= yhi) {
                    skipped += 1;
                    continue;
                }
                let j = ys.partition_point(|&v| v <= y).clamp(1, ys.len() - 1) - 1;
                if ex[j] || ex[j + 1] {
                    skipped += 1;
                    continue;
                }
                let u = interp_sorted(ys, vals, y).0;
                let err = (u - x).abs();
                sq += err * err;
                max = max.max(err);
                samples += 1;
            }
        }
    }
    Ok(IdentityStats {
        rms: if samples > 0 { (sq / samples as f64).sqrt() } else { f64::NAN },
        max,
        samples,
        skipped,
    })
}

/// Largest difference between two inverse fields over shared nodes and
/// interior, non-extrapolated queries. Both must use the same query mesh.
pub fn max_disagreement(a: &InverseField, b: &InverseField) -> Result<f64> {
    if a.queries != b.queries || a.paths.len() != b.paths.len() {
        return Err(invalid("queries", a.queries.len(), "fields must share queries and paths"));
    }
    let lo = a.interior().start.max(b.interior().start);
    let hi = a.interior().end.min(b.interior().end);
    let mut worst = 0.0_f64;
    for (p, (pa, pb)) in a.paths.iter().zip(&b.paths).enumerate() {
        for (sb, node) in pb.nodes.iter().enumerate() {
            let Some(sa) = pa.nodes.iter().position(|n| n == node) else {
                continue;
            };
            let (va, vb) = (a.values_at(p, sa), b.values_at(p, sb));
            let (ea, eb) = (a.extrapolated_at(p, sa), b.extrapolated_at(p, sb));
            for j in lo..hi {
                if !ea[j] && !eb[j] {
                    worst = worst.max((va[j] - vb[j]).abs());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{catalog_problem, NoiseState};
    use crate::model::MarkSpace;
    use crate::noise::{coarsen_noise, generate_ensemble, generate_noise, TimeGrid};
    use crate::sde_flow::{simulate_flow_ensemble, uniform_mesh};
    use crate::stats::fit_order;

    fn noises(name: &str, steps: usize, paths: usize) -> (crate::catalog::TestProblem, Vec<NoiseBundle>) {
        let pb = catalog_problem(name).unwrap();
        let nb = generate_ensemble(TimeGrid::new(1.0, steps).unwrap(), &pb.model.marks, 1, 31, paths).unwrap();
        (pb, nb)
    }

    #[test]
    fn zero_problem_inverse_is_identity_for_all_constructions() {
        let (pb, nb) = noises("zero", 64, 3);
        let mesh = Uniform::covering(-1.0, 1.0, 1.0 / 16.0);
        let q = mesh.points();
        let flow = simulate_flow_ensemble(&pb.model, &nb, &q).unwrap();
        let grid_inv = invert_flow_grid(&flow, &q).unwrap();
        let sipde = integrate_inverse_sipde_ensemble(&pb.model, &nb, mesh).unwrap();
        let back = backward_inverse_field(&pb.model, &nb, &q, &[0, 17, 64]).unwrap();
        for f in [&grid_inv, &sipde, &back] {
            for p in 0..f.paths.len() {
                for slot in 0..f.paths[p].nodes.len() {
                    for (u, y) in f.values_at(p, slot).iter().zip(&q) {
                        assert!((u - y).abs() < 1e-13, "{:?}", f.method);
                    }
                }
            }
        }
    }

    #[test]
    fn initial_slice_is_identity() {
        let (pb, nb) = noises("linear-jump-diffusion", 256, 2);
        let mesh = Uniform::covering(0.25, 2.0, 1.0 / 32.0);
        let q = mesh.points();
        let flow = simulate_flow_ensemble(&pb.model, &nb, &uniform_mesh(0.1, 3.0, 0.01)).unwrap();
        let g = invert_flow_grid(&flow, &q).unwrap();
        let s = integrate_inverse_sipde_ensemble(&pb.model, &nb, mesh).unwrap();
        let b = backward_inverse_field(&pb.model, &nb, &q, &[0]).unwrap();
        for f in [&g, &s, &b] {
            for (u, y) in f.values_at(0, 0).iter().zip(&q) {
                assert!((u - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn additive_inverse_matches_closed_form() {
        let (pb, nb) = noises("additive-brownian", 256, 4);
        let mesh = Uniform::covering(-1.0, 1.0, 1.0 / 32.0);
        let q = mesh.points();
        let flow = simulate_flow_ensemble(&pb.model, &nb, &uniform_mesh(-3.0, 3.0, 0.05)).unwrap();
        let g = invert_flow_grid(&flow, &q).unwrap();
        let s = integrate_inverse_sipde_ensemble(&pb.model, &nb, mesh).unwrap();
        let b = backward_inverse_field(&pb.model, &nb, &q, &[64, 256]).unwrap();
        for f in [&g, &s, &b] {
            for (p, path) in f.paths.iter().enumerate() {
                for (slot, &node) in path.nodes.iter().enumerate() {
                    let w = path.grid.w_at(node);
                    let st = NoiseState {
                        t: path.grid.times[node],
                        w,
                        counts: &[0],
                    };
                    for (u, y) in f.values_at(p, slot).iter().zip(&q) {
                        assert!((u - pb.oracle_inverse(*y, &st).unwrap()).abs() < 1e-12, "{:?}", f.method);
                    }
                }
            }
        }
    }

    #[test]
    fn pure_jump_sipde_follows_characteristics() {
        let (pb, nb) = noises("pure-jump-shift", 256, 4);
        let mesh = Uniform::covering(-1.0, 1.0, 1.0 / 64.0);
        let s = integrate_inverse_sipde_ensemble(&pb.model, &nb, mesh).unwrap();
        let counts: Vec<usize> = s.paths.iter().flat_map(|p| p.grid.counts(1)).collect();
        let mut off = 0;
        for (p, path) in s.paths.iter().enumerate() {
            for (slot, &node) in path.nodes.iter().enumerate() {
                let st = NoiseState {
                    t: path.grid.times[node],
                    w: path.grid.w_at(node),
                    counts: &counts[off + node..off + node + 1],
                };
                for (u, y) in s.values_at(p, slot).iter().zip(&s.queries) {
                    assert!((u - pb.oracle_inverse(*y, &st).unwrap()).abs() < 1e-11);
                }
            }
            off += path.grid.len();
        }
    }

    #[test]
    fn stability_guard_suggests_step() {
        let (pb, nb) = noises("additive-brownian", 16, 1);
        let err = integrate_inverse_sipde(&pb.model, &nb[0], Uniform::covering(-1.0, 1.0, 1.0 / 64.0)).unwrap_err();
        match err {
            Error::Stability { suggested_dt, .. } => {
                assert!(suggested_dt < 1.0 / 16.0);
                let n = (1.0 / suggested_dt).ceil() as usize;
                let nb = generate_noise(TimeGrid::new(1.0, n).unwrap(), &pb.model.marks, 1, 0, 0).unwrap();
                assert!(integrate_inverse_sipde(&pb.model, &nb, Uniform::covering(-1.0, 1.0, 1.0 / 64.0)).is_ok());
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn backward_ode_matches_exponential() {
        let m = CoefficientModel::new(1, 1, 1, 1.0, MarkSpace::from_intensities(&[1.0]).unwrap())
            .unwrap()
            .with_drift(|_, x, out| out[0] = x[0]);
        let mut errs = vec![];
        let mut hs = vec![];
        for n in [64, 128, 256] {
            let mut nb = generate_noise(TimeGrid::new(1.0, n).unwrap(), &m.marks, 1, 0, 0).unwrap();
            nb.jumps.clear();
            let g = AdaptedGrid::build(&nb);
            let x = integrate_inverse_backward_sde(&m, &g, &[2.0], g.len() - 1, true).unwrap();
            errs.push((x[0] - 2.0 * (-1.0f64).exp()).abs());
            hs.push(1.0 / n as f64);
        }
        let fit = fit_order(&hs, &errs);
        assert!((fit.order - 1.0).abs() < 0.05);
        assert!(errs[2] < 2.0 / 256.0);
    }

    #[test]
    fn random_coefficients_rejected_by_backward_sde() {
        let pb = catalog_problem("zero").unwrap();
        let m = pb.model.clone().with_random_coefficients(true);
        let nb = generate_noise(TimeGrid::new(1.0, 8).unwrap(), &m.marks, 1, 0, 0).unwrap();
        let g = AdaptedGrid::build(&nb);
        assert!(matches!(integrate_inverse_backward_sde(&m, &g, &[0.0], 3, true), Err(Error::Unsupported(_))));
    }

    #[test]
    fn non_monotone_flow_is_rejected() {
        let (pb, nb) = noises("zero", 8, 1);
        let mut flow = simulate_flow_ensemble(&pb.model, &nb, &[0.0, 1.0, 2.0]).unwrap();
        let last = flow.paths[0].values.len() - 1;
        flow.paths[0].values[last] = -5.0;
        assert!(matches!(invert_flow_grid(&flow, &[0.0, 0.5, 1.0, 1.5]), Err(Error::NonMonotone { .. })));
    }

    fn identity_errors(name: &str, levels: &[usize], paths: usize) -> Vec<(f64, f64, f64)> {
        let pb = catalog_problem(name).unwrap();
        let finest = *levels.iter().max().unwrap();
        let fine = generate_ensemble(TimeGrid::new(1.0, finest).unwrap(), &pb.model.marks, 1, 5, paths).unwrap();
        let mesh = Uniform::covering(0.5, 2.0, 1.0 / 32.0);
        let xs = uniform_mesh(0.9, 1.4, 1.0 / 32.0);
        levels
            .iter()
            .map(|&n| {
                let nb: Vec<_> = fine.iter().map(|b| coarsen_noise(b, finest / n).unwrap()).collect();
                let flow = simulate_flow_ensemble(&pb.model, &nb, &xs).unwrap();
                let dense = simulate_flow_ensemble(&pb.model, &nb, &uniform_mesh(0.2, 4.0, 1.0 / 64.0)).unwrap();
                let g = inversion_identity(&invert_flow_grid(&dense, &mesh.points()).unwrap(), &flow).unwrap();
                let s = inversion_identity(&integrate_inverse_sipde_ensemble(&pb.model, &nb, mesh).unwrap(), &flow).unwrap();
                let steps: Vec<usize> = (0..=n).step_by(n / 8).collect();
                let b = inversion_identity(&backward_inverse_field(&pb.model, &nb, &mesh.points(), &steps).unwrap(), &flow).unwrap();
                (g.rms, s.rms, b.rms)
            })
            .collect()
    }

    #[test]
    fn linear_identity_converges_for_pde_and_backward_constructions() {
        let levels = [256, 512, 1024, 2048];
        let e = identity_errors("linear-jump-diffusion", &levels, 32);
        let hs: Vec<f64> = levels.iter().map(|n| 1.0 / *n as f64).collect();
        let grid: Vec<f64> = e.iter().map(|x| x.0).collect();
        let sipde: Vec<f64> = e.iter().map(|x| x.1).collect();
        let back: Vec<f64> = e.iter().map(|x| x.2).collect();
        assert!(grid.iter().all(|v| *v < 1e-3));
        assert!(fit_order(&hs, &sipde).passes(0.4), "{:?}", fit_order(&hs, &sipde));
        assert!(fit_order(&hs, &back).passes(0.4), "{:?}", fit_order(&hs, &back));
    }
}
