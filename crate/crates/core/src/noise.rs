//! Reproducible Brownian increments and marked Poisson jump streams.
//!
//! Random numbers come from ChaCha8 streams keyed by
//! `(master_seed, path_index, stream_kind)` with the ChaCha stream id set to
//! the step (or event) counter, so every draw is addressable without
//! generating anything before it. Brownian values at jump times are drawn from
//! the bridge on the finest grid and stored with the event, which keeps
//! coarsened bundles on the same Brownian path.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Mark, MarkSpace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", horizon, "must be finite and > 0"));
        }
        if steps == 0 {
            return Err(invalid("steps", steps, "must be >= 1"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }

    /// Index `i` of the step `(t_i, t_{i+1}]` containing `t > 0`.
    pub fn step_of(&self, t: f64) -> usize {
        let mut i = ((t / self.horizon) * self.steps as f64).ceil() as usize;
        i = i.clamp(1, self.steps);
        while i > 1 && self.node(i - 1) >= t {
            i -= 1;
        }
        while i < self.steps && self.node(i) < t {
            i += 1;
        }
        i - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: Mark,
    /// Brownian position `W(time)`.
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBundle {
    pub path_id: u64,
    pub master_seed: u64,
    pub grid: TimeGrid,
    pub dim_brownian: usize,
    /// `steps x d`, row-major.
    pub increments: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    /// Number of jump pairs sharing a time (ordered by mark).
    pub ties: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Brownian = 0,
    JumpTimes = 1,
    Bridge = 2,
    Auxiliary = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator for `(master_seed, path_index, kind, counter)`.
pub fn keyed_rng(master_seed: u64, path_index: u64, kind: StreamKind, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(master_seed ^ 0x5EED);
    h = splitmix64(h ^ path_index);
    h = splitmix64(h ^ (kind as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(counter);
    rng
}

pub fn generate_noise(grid: TimeGrid, marks: &MarkSpace, dim_brownian: usize, master_seed: u64, path_index: u64) -> Result<NoiseBundle> {
    if dim_brownian == 0 {
        return Err(invalid("dim_brownian", 0, "must be >= 1"));
    }
    let n = grid.steps;
    let d = dim_brownian;
    let sqdt = grid.dt().sqrt();
    let mut increments = vec![0.0; n * d];
    for i in 0..n {
        let mut rng = keyed_rng(master_seed, path_index, StreamKind::Brownian, i as u64);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            increments[i * d + j] = sqdt * z;
        }
    }
    let mut w_nodes = vec![0.0; (n + 1) * d];
    for i in 0..n {
        for j in 0..d {
            w_nodes[(i + 1) * d + j] = w_nodes[i * d + j] + increments[i * d + j];
        }
    }

    let total = marks.total_intensity();
    let exp = Exp::new(total).expect("positive total intensity");
    let mut raw: Vec<(f64, Mark)> = Vec::new();
    let mut t = 0.0;
    for k in 0u64.. {
        let mut rng = keyed_rng(master_seed, path_index, StreamKind::JumpTimes, k);
        t += exp.sample(&mut rng);
        if t > grid.horizon {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut mark = marks.len() - 1;
        for e in 0..marks.len() {
            if u < marks.intensity(e) {
                mark = e;
                break;
            }
            u -= marks.intensity(e);
        }
        raw.push((t, mark));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ties = raw.windows(2).filter(|p| p[0].0 == p[1].0).count();

    // Bridge values, sequentially within each base step.
    let mut jumps = Vec::with_capacity(raw.len());
    let mut prev_step = usize::MAX;
    let mut left_t = 0.0;
    let mut left_w = vec![0.0; d];
    for (k, &(tau, mark)) in raw.iter().enumerate() {
        let i = grid.step_of(tau);
        if i != prev_step {
            prev_step = i;
            left_t = grid.node(i);
            left_w.copy_from_slice(&w_nodes[i * d..(i + 1) * d]);
        }
        let right_t = grid.node(i + 1);
        let right_w = &w_nodes[(i + 1) * d..(i + 2) * d];
        let mut w = vec![0.0; d];
        if tau >= right_t {
            w.copy_from_slice(right_w);
        } else {
            let mut rng = keyed_rng(master_seed, path_index, StreamKind::Bridge, k as u64);
            let span = right_t - left_t;
            let frac = (tau - left_t) / span;
            let sd = ((tau - left_t) * (right_t - tau) / span).max(0.0).sqrt();
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                w[j] = left_w[j] + frac * (right_w[j] - left_w[j]) + sd * z;
            }
        }
        left_t = tau;
        left_w.copy_from_slice(&w);
        jumps.push(JumpEvent { time: tau, mark, w });
    }

    Ok(NoiseBundle {
        path_id: path_index,
        master_seed,
        grid,
        dim_brownian: d,
        increments,
        jumps,
        ties,
    })
}

/// Bundles for paths `0..paths`, generated in parallel.
pub fn generate_ensemble(grid: TimeGrid, marks: &MarkSpace, dim_brownian: usize, master_seed: u64, paths: usize) -> Result<Vec<NoiseBundle>> {
    use rayon::prelude::*;
    (0..paths as u64)
        .into_par_iter()
        .map(|p| generate_noise(grid, marks, dim_brownian, master_seed, p))
        .collect()
}

pub fn coarsen_noise(bundle: &NoiseBundle, factor: usize) -> Result<NoiseBundle> {
    let n = bundle.grid.steps;
    if factor == 0 || n % factor != 0 {
        return Err(invalid("factor", factor, "must be >= 1 and divide the step count"));
    }
    let d = bundle.dim_brownian;
    let nc = n / factor;
    let mut increments = vec![0.0; nc * d];
    for i in 0..nc {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..factor {
                acc += bundle.increments[(i * factor + k) * d + j];
            }
            increments[i * d + j] = acc;
        }
    }
    Ok(NoiseBundle {
        grid: TimeGrid::new(bundle.grid.horizon, nc)?,
        increments,
        ..bundle.clone()
    })
}

impl NoiseBundle {
    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step * self.dim_brownian..(step + 1) * self.dim_brownian]
    }

    /// Jump counts per base step and mark: `steps x marks`.
    pub fn jump_counts(&self, marks: usize) -> Vec<usize> {
        let mut c = vec![0; self.grid.steps * marks];
        for ev in &self.jumps {
            c[self.grid.step_of(ev.time) * marks + ev.mark] += 1;
        }
        c
    }

    /// Brownian positions at the base nodes: `(steps + 1) x d`.
    pub fn brownian_path(&self) -> Vec<f64> {
        let d = self.dim_brownian;
        let mut w = vec![0.0; (self.grid.steps + 1) * d];
        for i in 0..self.grid.steps {
            for j in 0..d {
                w[(i + 1) * d + j] = w[i * d + j] + self.increments[i * d + j];
            }
        }
        w
    }
}

/// Base grid refined by the jump times of one path. Node `k` carries the time,
/// the Brownian position and the mark of a jump that happens at that node (the
/// node value is post-jump). Simultaneous jumps become consecutive nodes with
/// the same time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedGrid {
    pub dim_brownian: usize,
    pub times: Vec<f64>,
    /// `nodes x d`.
    pub w: Vec<f64>,
    pub jump: Vec<Option<Mark>>,
    /// Node index of each base node (post-jump when a jump lands on it).
    pub base_nodes: Vec<usize>,
}

impl AdaptedGrid {
    pub fn build(noise: &NoiseBundle) -> Self {
        let grid = noise.grid;
        let d = noise.dim_brownian;
        let wb = noise.brownian_path();
        let mut times = vec![0.0];
        let mut w = wb[0..d].to_vec();
        let mut jump = vec![None];
        let mut base_nodes = vec![0];
        let mut it = noise.jumps.iter().peekable();
        for i in 0..grid.steps {
            let b = grid.node(i + 1);
            while let Some(ev) = it.peek() {
                if ev.time < b {
                    times.push(ev.time);
                    w.extend_from_slice(&ev.w);
                    jump.push(Some(ev.mark));
                    it.next();
                } else {
                    break;
                }
            }
            times.push(b);
            w.extend_from_slice(&wb[(i + 1) * d..(i + 2) * d]);
            jump.push(None);
            let mut first = true;
            while let Some(ev) = it.peek() {
                if ev.time == b {
                    if first {
                        *jump.last_mut().unwrap() = Some(ev.mark);
                        first = false;
                    } else {
                        times.push(b);
                        w.extend_from_slice(&wb[(i + 1) * d..(i + 2) * d]);
                        jump.push(Some(ev.mark));
                    }
                    it.next();
                } else {
                    break;
                }
            }
            base_nodes.push(times.len() - 1);
        }
        Self {
            dim_brownian: d,
            times,
            w,
            jump,
            base_nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn w_at(&self, k: usize) -> &[f64] {
        &self.w[k * self.dim_brownian..(k + 1) * self.dim_brownian]
    }

    /// `(dt, dW)` of the step from node `k` to node `k + 1`.
    pub fn step(&self, k: usize, dw: &mut [f64]) -> f64 {
        let d = self.dim_brownian;
        for j in 0..d {
            dw[j] = self.w[(k + 1) * d + j] - self.w[k * d + j];
        }
        self.times[k + 1] - self.times[k]
    }

    /// Per-mark jump counts `N_t` at each node: `nodes x marks`.
    pub fn counts(&self, marks: usize) -> Vec<usize> {
        let mut c = vec![0; self.len() * marks];
        for k in 1..self.len() {
            for e in 0..marks {
                c[k * marks + e] = c[(k - 1) * marks + e];
            }
            if let Some(e) = self.jump[k] {
                c[k * marks + e] += 1;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marks2() -> MarkSpace {
        MarkSpace::from_intensities(&[1.5, 0.5]).unwrap()
    }

    #[test]
    fn grid_nodes_end_exactly_at_horizon() {
        let g = TimeGrid::new(0.7, 3).unwrap();
        assert_eq!(*g.nodes().last().unwrap(), 0.7);
        assert_eq!(g.step_of(0.7), 2);
        assert_eq!(g.step_of(1e-9), 0);
        let g = TimeGrid::new(1.0, 100).unwrap();
        assert_eq!(g.step_of(0.37), 36);
        assert_eq!(g.step_of(0.3700001), 37);
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn same_key_gives_identical_bundles() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let a = generate_noise(g, &marks2(), 2, 42, 7).unwrap();
        let b = generate_noise(g, &marks2(), 2, 42, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_noise(g, &marks2(), 2, 42, 8).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn jump_times_sorted_inside_horizon() {
        let g = TimeGrid::new(2.0, 16).unwrap();
        for p in 0..50 {
            let b = generate_noise(g, &marks2(), 1, 1, p).unwrap();
            for w in b.jumps.windows(2) {
                assert!(w[0].time <= w[1].time);
            }
            for ev in &b.jumps {
                assert!(ev.time > 0.0 && ev.time <= 2.0);
            }
        }
    }

    #[test]
    fn mean_jump_count_matches_poisson_law() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let m = MarkSpace::from_intensities(&[2.0]).unwrap();
        let paths = 10_000;
        let bundles = generate_ensemble(g, &m, 1, 2024, paths).unwrap();
        let mean = bundles.iter().map(|b| b.jumps.len() as f64).sum::<f64>() / paths as f64;
        let tol = 3.0 * (2.0 / paths as f64).sqrt();
        assert!((mean - 2.0).abs() <= tol, "mean jump count {mean}");
    }

    #[test]
    fn mark_frequencies_follow_intensities() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let bundles = generate_ensemble(g, &marks2(), 1, 3, 5000).unwrap();
        let (mut n0, mut n) = (0.0_f64, 0.0_f64);
        for b in &bundles {
            for ev in &b.jumps {
                n += 1.0;
                if ev.mark == 0 {
                    n0 += 1.0;
                }
            }
        }
        let p = n0 / n;
        assert!((p - 0.75).abs() < 3.0 * (0.75 * 0.25 / n as f64).sqrt() + 1e-3, "{p}");
    }

    #[test]
    fn increment_variance_matches_dt() {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let m = MarkSpace::from_intensities(&[1.0]).unwrap();
        let paths = 10_000;
        let bundles = generate_ensemble(g, &m, 1, 99, paths).unwrap();
        let dt = g.dt();
        let tol = 3.0 * (2.0 / paths as f64).sqrt();
        let mut outside = 0;
        for i in 0..g.steps {
            let v = bundles.iter().map(|b| b.increments[i].powi(2)).sum::<f64>() / paths as f64;
            if (v / dt - 1.0).abs() > tol {
                outside += 1;
            }
        }
        // A 3-sigma band leaves about 0.3% of the 128 steps outside.
        assert!(outside <= 3, "{outside} steps outside the band");
        let pooled = bundles.iter().flat_map(|b| b.increments.iter()).map(|x| x * x).sum::<f64>() / (paths * g.steps) as f64;
        assert!((pooled / dt - 1.0).abs() <= tol);
    }

    #[test]
    fn coarsening_sums_increments_and_keeps_jumps() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let fine = generate_noise(g, &marks2(), 1, 5, 3).unwrap();
        assert_eq!(coarsen_noise(&fine, 1).unwrap(), fine);
        let c = coarsen_noise(&fine, 2).unwrap();
        assert_eq!(c.grid.steps, 50);
        for i in 0..50 {
            assert_eq!(c.increments[i], fine.increments[2 * i] + fine.increments[2 * i + 1]);
        }
        assert_eq!(c.jumps, fine.jumps);
        assert!(coarsen_noise(&fine, 3).is_err());
        assert!(coarsen_noise(&fine, 0).is_err());
    }

    #[test]
    fn manual_jump_on_base_node_is_preserved() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let mut b = generate_noise(g, &marks2(), 1, 5, 3).unwrap();
        let w = b.brownian_path()[37];
        b.jumps = vec![JumpEvent { time: 0.37, mark: 1, w: vec![w] }];
        let c = coarsen_noise(&b, 2).unwrap();
        assert_eq!(c.jumps[0].time, 0.37);
        assert_eq!(c.jumps[0].mark, 1);
        let ag = AdaptedGrid::build(&b);
        assert_eq!(ag.len(), 101);
        assert_eq!(ag.jump[37], Some(1));
        let ag = AdaptedGrid::build(&c);
        assert_eq!(ag.len(), 52);
    }

    #[test]
    fn adapted_grid_inserts_jump_nodes() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let b = (0..100).map(|p| generate_noise(g, &marks2(), 1, 9, p).unwrap()).find(|b| b.jumps.len() >= 2).unwrap();
        let ag = AdaptedGrid::build(&b);
        assert_eq!(ag.len(), 17 + b.jumps.len());
        for w in ag.times.windows(2) {
            assert!(w[0] < w[1]);
        }
        for (i, &k) in ag.base_nodes.iter().enumerate() {
            assert_eq!(ag.times[k], g.node(i));
        }
        let counts = ag.counts(2);
        let last = ag.len() - 1;
        assert_eq!(counts[last * 2] + counts[last * 2 + 1], b.jumps.len());
    }

    #[test]
    fn bridge_values_consistent_after_coarsening() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let fine = generate_noise(g, &marks2(), 1, 17, 2).unwrap();
        let coarse = coarsen_noise(&fine, 8).unwrap();
        let af = AdaptedGrid::build(&fine);
        let ac = AdaptedGrid::build(&coarse);
        let wf = af.w[*af.base_nodes.last().unwrap()];
        let wc = ac.w[*ac.base_nodes.last().unwrap()];
        assert!((wf - wc).abs() < 1e-13);
    }
}
