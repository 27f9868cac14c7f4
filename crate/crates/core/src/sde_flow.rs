//! Jump-adapted Euler scheme for the forward SDE, run as a stochastic flow over
//! a mesh of initial points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{At, CoefficientModel};
use crate::noise::{AdaptedGrid, NoiseBundle};

/// Flow of one path: node-major storage `[node][mesh point][component]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathFlow {
    pub path_id: u64,
    pub grid: AdaptedGrid,
    pub values: Vec<f64>,
    pub left: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowField {
    pub dim: usize,
    /// Initial points, `M x n`.
    pub mesh: Vec<f64>,
    pub paths: Vec<PathFlow>,
}

impl FlowField {
    pub fn mesh_len(&self) -> usize {
        self.mesh.len() / self.dim
    }

    pub fn initial(&self, m: usize) -> &[f64] {
        &self.mesh[m * self.dim..(m + 1) * self.dim]
    }

    pub fn value(&self, path: usize, node: usize, m: usize) -> &[f64] {
        let off = (node * self.mesh_len() + m) * self.dim;
        &self.paths[path].values[off..off + self.dim]
    }

    pub fn left(&self, path: usize, node: usize, m: usize) -> &[f64] {
        let off = (node * self.mesh_len() + m) * self.dim;
        &self.paths[path].left[off..off + self.dim]
    }
}

/// One Euler step `x <- x + (b - sum_e v(e) g) dt + sigma dW`.
pub(crate) struct Stepper<'a> {
    model: &'a CoefficientModel,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(model: &'a CoefficientModel) -> Self {
        let n = model.dim_state;
        Self {
            model,
            drift: vec![0.0; n],
            sigma: vec![0.0; n * model.dim_brownian],
            scratch: vec![0.0; n],
        }
    }

    pub(crate) fn euler(&mut self, at: At, x: &mut [f64], dt: f64, dw: &[f64]) {
        let n = self.model.dim_state;
        let d = self.model.dim_brownian;
        if dt == 0.0 {
            return;
        }
        self.model.compensated_drift(at, x, &mut self.scratch, &mut self.drift);
        self.model.diffusion(at, x, &mut self.sigma);
        for i in 0..n {
            let mut inc = self.drift[i] * dt;
            for j in 0..d {
                inc += self.sigma[i * d + j] * dw[j];
            }
            x[i] += inc;
        }
    }

    pub(crate) fn jump(&mut self, at: At, e: usize, x: &mut [f64]) {
        self.model.jump(at, e, x, &mut self.scratch);
        for (xi, g) in x.iter_mut().zip(&self.scratch) {
            *xi += g;
        }
    }
}

const BLOWUP: f64 = 1e150;

/// Run the scheme from node `start` with states `init` (`M x n`). Returns
/// values and left limits for nodes `start..`.
pub(crate) fn propagate(
    model: &CoefficientModel,
    grid: &AdaptedGrid,
    start: usize,
    init: &[f64],
    path_id: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.dim_state;
    let m_len = init.len() / n;
    let nodes = grid.len() - start;
    let mut values = Vec::with_capacity(nodes * init.len());
    let mut left = Vec::with_capacity(nodes * init.len());
    values.extend_from_slice(init);
    left.extend_from_slice(init);
    let mut state = init.to_vec();
    let mut stepper = Stepper::new(model);
    let mut dw = vec![0.0; grid.dim_brownian];
    for k in start..grid.len() - 1 {
        let dt = grid.step(k, &mut dw);
        let at = At {
            t: grid.times[k],
            factor: grid.w_at(k),
        };
        for m in 0..m_len {
            stepper.euler(at, &mut state[m * n..(m + 1) * n], dt, &dw);
        }
        left.extend_from_slice(&state);
        if let Some(e) = grid.jump[k + 1] {
            let at = At {
                t: grid.times[k + 1],
                factor: grid.w_at(k + 1),
            };
            for m in 0..m_len {
                stepper.jump(at, e, &mut state[m * n..(m + 1) * n]);
            }
        }
        if let Some(i) = state.iter().position(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::BlowUp {
                path_id,
                t: grid.times[k + 1],
                mesh_index: i / n,
            });
        }
        values.extend_from_slice(&state);
    }
    Ok((values, left))
}

fn check_mesh(model: &CoefficientModel, mesh: &[f64]) -> Result<()> {
    if mesh.is_empty() || mesh.len() % model.dim_state != 0 {
        return Err(invalid("mesh", mesh.len(), "nonempty, a multiple of dim_state"));
    }
    Ok(())
}

pub fn simulate_flow(model: &CoefficientModel, noise: &NoiseBundle, mesh: &[f64]) -> Result<PathFlow> {
    check_mesh(model, mesh)?;
    if noise.dim_brownian != model.dim_brownian {
        return Err(invalid("dim_brownian", noise.dim_brownian, "noise and model Brownian dimensions differ"));
    }
    let grid = AdaptedGrid::build(noise);
    let (values, left) = propagate(model, &grid, 0, mesh, noise.path_id)?;
    Ok(PathFlow {
        path_id: noise.path_id,
        grid,
        values,
        left,
    })
}

/// Path-parallel flow over an ensemble; ordering follows `noises`.
pub fn simulate_flow_ensemble(model: &CoefficientModel, noises: &[NoiseBundle], mesh: &[f64]) -> Result<FlowField> {
    check_mesh(model, mesh)?;
    let paths = noises
        .par_iter()
        .map(|nb| simulate_flow(model, nb, mesh))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowField {
        dim: model.dim_state,
        mesh: mesh.to_vec(),
        paths,
    })
}

/// Terminal values `X_T(x_m)` of every path (`paths x M x n`), without
/// storing the intermediate nodes.
pub fn terminal_values(model: &CoefficientModel, noises: &[NoiseBundle], mesh: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_mesh(model, mesh)?;
    noises
        .par_iter()
        .map(|nb| {
            let f = simulate_flow(model, nb, mesh)?;
            let off = f.values.len() - mesh.len();
            Ok(f.values[off..].to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowPropertyReport {
    pub semigroup_discrepancy: f64,
    pub jump_relation_error: f64,
    pub jumps_checked: usize,
    pub monotonicity_violations: usize,
}

/// Restart the scheme at base node `restart_step` from `X_t(x)` with the same
/// noise and compare; check `X_{tau-} = phi^{-1}(X_tau)` at every jump; count
/// order violations of `x -> X_t(x)` (1D only).
pub fn check_flow_properties(
    model: &CoefficientModel,
    noise: &NoiseBundle,
    mesh: &[f64],
    restart_step: usize,
) -> Result<FlowPropertyReport> {
    if restart_step > noise.grid.steps {
        return Err(invalid("restart_step", restart_step, "must be a base grid node"));
    }
    let flow = simulate_flow(model, noise, mesh)?;
    let grid = &flow.grid;
    let n = model.dim_state;
    let row = mesh.len();
    let start = grid.base_nodes[restart_step];
    let init = &flow.values[start * row..(start + 1) * row];
    let (restarted, _) = propagate(model, grid, start, init, noise.path_id)?;
    let semigroup = restarted
        .iter()
        .zip(&flow.values[start * row..])
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));

    let mut jump_err = 0.0_f64;
    let mut jumps = 0;
    for k in 1..grid.len() {
        if let Some(e) = grid.jump[k] {
            jumps += 1;
            let at = At {
                t: grid.times[k],
                factor: grid.w_at(k),
            };
            for m in 0..row / n {
                let post = &flow.values[k * row + m * n..k * row + (m + 1) * n];
                let pre = &flow.left[k * row + m * n..k * row + (m + 1) * n];
                let back = model.phi_inverse(at, e, post)?;
                for i in 0..n {
                    jump_err = jump_err.max((back[i] - pre[i]).abs());
                }
            }
        }
    }

    let mut violations = 0;
    if n == 1 {
        let mut order: Vec<usize> = (0..row).collect();
        order.sort_by(|&a, &b| mesh[a].total_cmp(&mesh[b]));
        for k in 0..grid.len() {
            let vals = &flow.values[k * row..(k + 1) * row];
            for w in order.windows(2) {
                if mesh[w[0]] < mesh[w[1]] && vals[w[0]] >= vals[w[1]] {
                    violations += 1;
                }
            }
        }
    }
    Ok(FlowPropertyReport {
        semigroup_discrepancy: semigroup,
        jump_relation_error: jump_err,
        jumps_checked: jumps,
        monotonicity_violations: violations,
    })
}

/// Uniform 1D mesh `lo, lo + h, ...` up to `hi` (inclusive when it lands on it).
pub fn uniform_mesh(lo: f64, hi: f64, h: f64) -> Vec<f64> {
    let count = ((hi - lo) / h + 1e-9).floor() as usize + 1;
    (0..count).map(|i| lo + h * i as f64).collect()
}
