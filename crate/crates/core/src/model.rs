//! Mark spaces, coefficient models and sampled checks of the standing
//! conditions on the coefficients (growth, smoothness, invertibility of the
//! jump map and non-degeneracy of its Jacobian).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Mark = usize;

/// Finite set of jump marks with their intensities `v(e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    names: Vec<String>,
    intensity: Vec<f64>,
}

impl MarkSpace {
    pub fn new(names: Vec<String>, intensity: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(invalid("marks", "[]", "at least one mark is required"));
        }
        if names.len() != intensity.len() {
            return Err(invalid(
                "intensity",
                format!("{} values for {} marks", intensity.len(), names.len()),
                "one intensity per mark",
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(invalid("marks", n, "mark identifiers must be unique"));
            }
        }
        for &v in &intensity {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid("intensity", v, "must be finite and > 0"));
            }
        }
        Ok(Self { names, intensity })
    }

    /// Marks named `e0, e1, ...` with the given intensities.
    pub fn from_intensities(intensity: &[f64]) -> Result<Self> {
        let names = (0..intensity.len()).map(|i| format!("e{i}")).collect();
        Self::new(names, intensity.to_vec())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn intensity(&self, e: Mark) -> f64 {
        self.intensity[e]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensity
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensity.iter().sum()
    }
}

/// Evaluation point for a coefficient: time plus the observed factor state.
/// Deterministic coefficients ignore `factor`; flow simulators pass the
/// current Brownian position.
#[derive(Clone, Copy, Debug)]
pub struct At<'a> {
    pub t: f64,
    pub factor: &'a [f64],
}

impl At<'static> {
    pub fn time(t: f64) -> Self {
        At { t, factor: &[] }
    }
}

/// Arguments of the BSDE driver. `z` is `l x d` row-major, `u` is mark-major
/// (`u[e * l + k]`).
#[derive(Clone, Copy, Debug)]
pub struct DriverArgs<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

pub type FieldFn = Arc<dyn Fn(At, &[f64], &mut [f64]) + Send + Sync>;
pub type MarkFieldFn = Arc<dyn Fn(At, Mark, &[f64], &mut [f64]) + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(At, &DriverArgs, &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Finite-difference step used when an analytic derivative is missing.
pub const FD_STEP: f64 = 1e-5;

/// Full problem definition: forward coefficients, jump map inverse, driver and
/// terminal condition, with optional analytic spatial derivatives.
#[derive(Clone)]
pub struct CoefficientModel {
    pub dim_state: usize,
    pub dim_brownian: usize,
    pub dim_value: usize,
    pub horizon: f64,
    pub marks: MarkSpace,
    /// Driver is declared affine in `(z, u)` once `(t, x, y)` is fixed.
    pub driver_linear_zu: bool,
    /// Coefficients read the factor state.
    pub random_coefficients: bool,
    drift: FieldFn,
    diffusion: FieldFn,
    jump: MarkFieldFn,
    phi_inverse: Option<MarkFieldFn>,
    driver: DriverFn,
    terminal: TerminalFn,
    drift_dx: Option<FieldFn>,
    diffusion_dx: Option<FieldFn>,
    jump_dx: Option<MarkFieldFn>,
    terminal_dx: Option<TerminalFn>,
    driver_dx: Option<DriverFn>,
    driver_dy: Option<DriverFn>,
}

impl fmt::Debug for CoefficientModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("dim_state", &self.dim_state)
            .field("dim_brownian", &self.dim_brownian)
            .field("dim_value", &self.dim_value)
            .field("horizon", &self.horizon)
            .field("marks", &self.marks)
            .finish_non_exhaustive()
    }
}

impl CoefficientModel {
    /// Model with all coefficients zero, identity terminal map (first `l`
    /// state components, padded with zeros) and zero driver.
    pub fn new(n: usize, d: usize, l: usize, horizon: f64, marks: MarkSpace) -> Result<Self> {
        if n == 0 {
            return Err(invalid("dim_state", n, "must be >= 1"));
        }
        if d == 0 {
            return Err(invalid("dim_brownian", d, "must be >= 1"));
        }
        if l == 0 {
            return Err(invalid("dim_value", l, "must be >= 1"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", horizon, "must be finite and > 0"));
        }
        Ok(Self {
            dim_state: n,
            dim_brownian: d,
            dim_value: l,
            horizon,
            marks,
            driver_linear_zu: true,
            random_coefficients: false,
            drift: Arc::new(|_, _, out| out.fill(0.0)),
            diffusion: Arc::new(|_, _, out| out.fill(0.0)),
            jump: Arc::new(|_, _, _, out| out.fill(0.0)),
            phi_inverse: None,
            driver: Arc::new(|_, _, out| out.fill(0.0)),
            terminal: Arc::new(|x, out| {
                out.fill(0.0);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = *xi;
                }
            }),
            drift_dx: None,
            diffusion_dx: None,
            jump_dx: None,
            terminal_dx: None,
            driver_dx: None,
            driver_dy: None,
        })
    }

    pub fn with_drift(mut self, f: impl Fn(At, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self.drift_dx = None;
        self
    }

    /// `out` is `n x d` row-major.
    pub fn with_diffusion(mut self, f: impl Fn(At, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self.diffusion_dx = None;
        self
    }

    pub fn with_jump(mut self, f: impl Fn(At, Mark, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump = Arc::new(f);
        self.jump_dx = None;
        self.phi_inverse = None;
        self
    }

    pub fn with_phi_inverse(mut self, f: impl Fn(At, Mark, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.phi_inverse = Some(Arc::new(f));
        self
    }

    pub fn with_driver(mut self, linear_zu: bool, f: impl Fn(At, &DriverArgs, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self.driver_linear_zu = linear_zu;
        self.driver_dx = None;
        self.driver_dy = None;
        self
    }

    pub fn with_terminal(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self.terminal_dx = None;
        self
    }

    /// `out` is `n x n`, `out[i * n + k] = d b^i / d x^k`.
    pub fn with_drift_dx(mut self, f: impl Fn(At, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift_dx = Some(Arc::new(f));
        self
    }

    /// `out[(i * d + j) * n + k] = d sigma^{ij} / d x^k`.
    pub fn with_diffusion_dx(mut self, f: impl Fn(At, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion_dx = Some(Arc::new(f));
        self
    }

    pub fn with_jump_dx(mut self, f: impl Fn(At, Mark, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump_dx = Some(Arc::new(f));
        self
    }

    /// `out` is `l x n`.
    pub fn with_terminal_dx(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.terminal_dx = Some(Arc::new(f));
        self
    }

    /// `out` is `l x n`.
    pub fn with_driver_dx(mut self, f: impl Fn(At, &DriverArgs, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.driver_dx = Some(Arc::new(f));
        self
    }

    /// `out` is `l x l`.
    pub fn with_driver_dy(mut self, f: impl Fn(At, &DriverArgs, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.driver_dy = Some(Arc::new(f));
        self
    }

    pub fn with_random_coefficients(mut self, random: bool) -> Self {
        self.random_coefficients = random;
        self
    }

    pub fn has_analytic_phi_inverse(&self) -> bool {
        self.phi_inverse.is_some()
    }

    pub fn drift(&self, at: At, x: &[f64], out: &mut [f64]) {
        (self.drift)(at, x, out)
    }

    pub fn diffusion(&self, at: At, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(at, x, out)
    }

    pub fn jump(&self, at: At, e: Mark, x: &[f64], out: &mut [f64]) {
        (self.jump)(at, e, x, out)
    }

    pub fn driver(&self, at: At, args: &DriverArgs, out: &mut [f64]) {
        (self.driver)(at, args, out)
    }

    pub fn terminal(&self, x: &[f64], out: &mut [f64]) {
        (self.terminal)(x, out)
    }

    /// `phi(x) = x + g(t, e, x)`.
    pub fn phi(&self, at: At, e: Mark, x: &[f64], out: &mut [f64]) {
        (self.jump)(at, e, x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }

    /// Drift with the jump compensator folded in: `b - sum_e v(e) g(e, .)`.
    pub fn compensated_drift(&self, at: At, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        (self.drift)(at, x, out);
        for e in 0..self.marks.len() {
            (self.jump)(at, e, x, scratch);
            let v = self.marks.intensity(e);
            for (o, g) in out.iter_mut().zip(scratch.iter()) {
                *o -= v * g;
            }
        }
    }

    /// Solve `x + g(t, e, x) = y`.
    pub fn phi_inverse(&self, at: At, e: Mark, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_state];
        self.phi_inverse_into(at, e, y, &mut out)?;
        Ok(out)
    }

    pub fn phi_inverse_into(&self, at: At, e: Mark, y: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.phi_inverse {
            Some(f) => {
                f(at, e, y, out);
                Ok(())
            }
            None => newton_phi_inverse(self, at, e, y, out),
        }
    }

    /// `n x n` Jacobian of the drift.
    pub fn drift_jacobian(&self, at: At, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let mut out = vec![0.0; n * n];
        match &self.drift_dx {
            Some(f) => f(at, x, &mut out),
            None => fd_jacobian(n, n, x, |xx, o| (self.drift)(at, xx, o), &mut out),
        }
        out
    }

    /// `out[(i * d + j) * n + k] = d sigma^{ij} / d x^k`.
    pub fn diffusion_jacobian(&self, at: At, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let d = self.dim_brownian;
        let mut out = vec![0.0; n * d * n];
        self.diffusion_jacobian_into(at, x, &mut out);
        out
    }

    pub fn diffusion_jacobian_into(&self, at: At, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.dim_state, self.dim_brownian);
        match &self.diffusion_dx {
            Some(f) => f(at, x, out),
            None => fd_jacobian(n * d, n, x, |xx, o| (self.diffusion)(at, xx, o), out),
        }
    }

    pub fn jump_jacobian(&self, at: At, e: Mark, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let mut out = vec![0.0; n * n];
        match &self.jump_dx {
            Some(f) => f(at, e, x, &mut out),
            None => fd_jacobian(n, n, x, |xx, o| (self.jump)(at, e, xx, o), &mut out),
        }
        out
    }

    /// `l x n` gradient of the terminal map.
    pub fn terminal_gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let l = self.dim_value;
        let mut out = vec![0.0; l * n];
        match &self.terminal_dx {
            Some(f) => f(x, &mut out),
            None => fd_jacobian(l, n, x, |xx, o| (self.terminal)(xx, o), &mut out),
        }
        out
    }

    /// Partial derivatives of the driver `(f_x, f_y, f_z, f_u)`, each `l x k`
    /// row-major. Missing analytic parts are central differences.
    pub fn driver_partials(&self, at: At, args: &DriverArgs) -> DriverPartials {
        let n = self.dim_state;
        let l = self.dim_value;
        let mut fx = vec![0.0; l * n];
        match &self.driver_dx {
            Some(f) => f(at, args, &mut fx),
            None => fd_jacobian(l, n, args.x, |xx, o| (self.driver)(at, &DriverArgs { x: xx, ..*args }, o), &mut fx),
        }
        let mut fy = vec![0.0; l * l];
        match &self.driver_dy {
            Some(f) => f(at, args, &mut fy),
            None => fd_jacobian(l, l, args.y, |yy, o| (self.driver)(at, &DriverArgs { y: yy, ..*args }, o), &mut fy),
        }
        let mut fz = vec![0.0; l * args.z.len()];
        fd_jacobian(l, args.z.len(), args.z, |zz, o| (self.driver)(at, &DriverArgs { z: zz, ..*args }, o), &mut fz);
        let mut fu = vec![0.0; l * args.u.len()];
        fd_jacobian(l, args.u.len(), args.u, |uu, o| (self.driver)(at, &DriverArgs { u: uu, ..*args }, o), &mut fu);
        DriverPartials { fx, fy, fz, fu }
    }

    /// Stratonovich-type correction `c^k = 1/2 sum_{i,j} d_i sigma^{kj} sigma^{ij}`.
    pub fn diffusion_correction(&self, at: At, x: &[f64], out: &mut [f64]) {
        let mut sigma = vec![0.0; self.dim_state * self.dim_brownian];
        (self.diffusion)(at, x, &mut sigma);
        let mut dsig = vec![0.0; sigma.len() * self.dim_state];
        self.diffusion_correction_with(at, x, &sigma, &mut dsig, out);
    }

    /// As [`Self::diffusion_correction`] with `sigma` already evaluated at `x`
    /// and `dsig` (`n d n`) as scratch, for hot loops.
    pub fn diffusion_correction_with(&self, at: At, x: &[f64], sigma: &[f64], dsig: &mut [f64], out: &mut [f64]) {
        let n = self.dim_state;
        let d = self.dim_brownian;
        self.diffusion_jacobian_into(at, x, dsig);
        for k in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..d {
                    acc += dsig[(k * d + j) * n + i] * sigma[i * d + j];
                }
            }
            out[k] = 0.5 * acc;
        }
    }
}

#[derive(Clone, Debug)]
pub struct DriverPartials {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub fz: Vec<f64>,
    pub fu: Vec<f64>,
}

/// Central-difference Jacobian of `f: R^cols -> R^rows`, row-major output.
pub(crate) fn fd_jacobian(rows: usize, cols: usize, x: &[f64], f: impl Fn(&[f64], &mut [f64]), out: &mut [f64]) {
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; rows];
    let mut fm = vec![0.0; rows];
    for k in 0..cols {
        let h = FD_STEP * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        f(&xp, &mut fp);
        xp[k] = x[k] - h;
        f(&xp, &mut fm);
        xp[k] = x[k];
        for i in 0..rows {
            out[i * cols + k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-12;

/// Safeguarded Newton iteration for `x + g(t, e, x) = y` with step halving on
/// the residual norm.
fn newton_phi_inverse(model: &CoefficientModel, at: At, e: Mark, y: &[f64], out: &mut [f64]) -> Result<()> {
    let n = model.dim_state;
    let tol = NEWTON_TOL * (1.0 + y.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let mut g = vec![0.0; n];
    let residual = |x: &[f64], g: &mut [f64]| -> (Vec<f64>, f64) {
        model.jump(at, e, x, g);
        let r: Vec<f64> = (0..n).map(|i| x[i] + g[i] - y[i]).collect();
        let norm = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        (r, norm)
    };
    // Fixed-point start x = y - g(y).
    model.jump(at, e, y, &mut g);
    let mut x: Vec<f64> = (0..n).map(|i| y[i] - g[i]).collect();
    let (mut r, mut rn) = residual(&x, &mut g);
    let mut iter = 0;
    while !(rn <= tol) {
        if iter >= NEWTON_MAX_ITER || !rn.is_finite() {
            return Err(Error::DegenerateMap {
                t: at.t,
                mark: e,
                y: y.to_vec(),
                residual: rn,
                iterations: iter,
            });
        }
        iter += 1;
        let mut jac = model.jump_jacobian(at, e, &x);
        for i in 0..n {
            jac[i * n + i] += 1.0;
        }
        let step = if n == 1 {
            if jac[0] == 0.0 || !jac[0].is_finite() {
                None
            } else {
                Some(vec![r[0] / jac[0]])
            }
        } else {
            DMatrix::from_row_slice(n, n, &jac)
                .lu()
                .solve(&DVector::from_column_slice(&r))
                .map(|s| s.as_slice().to_vec())
        };
        let Some(step) = step else {
            return Err(Error::DegenerateMap {
                t: at.t,
                mark: e,
                y: y.to_vec(),
                residual: rn,
                iterations: iter,
            });
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..n).map(|i| x[i] - lambda * step[i]).collect();
            let (tr, tn) = residual(&trial, &mut g);
            if tn < rn || tn <= tol {
                x = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::DegenerateMap {
                t: at.t,
                mark: e,
                y: y.to_vec(),
                residual: rn,
                iterations: iter,
            });
        }
    }
    out.copy_from_slice(&x);
    Ok(())
}

/// Free-function form of [`CoefficientModel::phi_inverse`].
pub fn eval_phi_inverse(model: &CoefficientModel, t: f64, e: Mark, y: &[f64]) -> Result<Vec<f64>> {
    model.phi_inverse(At::time(t), e, y)
}

/// Axis-aligned box of sample points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo], hi: vec![hi] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationThresholds {
    pub growth_max: f64,
    pub lipschitz_max: f64,
    pub inverse_tol: f64,
    pub det_min: f64,
    pub linearity_tol: f64,
    pub seed: u64,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        Self {
            growth_max: 1e6,
            lipschitz_max: 1e6,
            inverse_tol: 1e-10,
            det_min: 1e-8,
            linearity_tol: 1e-10,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    /// Linear-growth constants `sup |b| / (1 + |x|)`, same for sigma.
    pub drift_growth: f64,
    pub diffusion_growth: f64,
    /// Per-mark growth constant `K(e)` of the jump coefficient.
    pub jump_growth: Vec<f64>,
    pub growth: ConditionCheck,
    /// Largest finite-difference Jacobian norm over b, sigma and g.
    pub lipschitz: ConditionCheck,
    /// `max |phi^{-1}(phi(x)) - x|`, infinite when the inverse failed.
    pub inverse: ConditionCheck,
    /// `min |det(I + dg)|`.
    pub jacobian_det: ConditionCheck,
    /// Superposition error of the driver in `(z, u)`, when linearity is declared.
    pub driver_linearity: Option<ConditionCheck>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.growth.pass
            && self.lipschitz.pass
            && self.inverse.pass
            && self.jacobian_det.pass
            && self.driver_linearity.as_ref().map_or(true, |c| c.pass)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(what: &'static str, t: f64, mark: Option<Mark>, x: &[f64], v: &[f64]) -> Result<()> {
    if v.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            t,
            mark,
            x: x.to_vec(),
        })
    }
}

fn determinant(n: usize, m: &[f64]) -> f64 {
    if n == 1 {
        m[0]
    } else {
        DMatrix::from_row_slice(n, n, m).determinant()
    }
}

/// Sample the coefficients on `sample_box x [0, T] x E` and estimate the
/// constants behind the growth, smoothness, invertibility and non-degeneracy
/// conditions.
pub fn validate_model(
    model: &CoefficientModel,
    sample_box: &SampleBox,
    n_samples: usize,
    thresholds: &ValidationThresholds,
) -> Result<ValidationReport> {
    let n = model.dim_state;
    let d = model.dim_brownian;
    let l = model.dim_value;
    if n_samples == 0 {
        return Err(invalid("n_samples", 0, "must be >= 1"));
    }
    if sample_box.lo.len() != n || sample_box.hi.len() != n {
        return Err(invalid("sample_box", format!("{} dims", sample_box.lo.len()), "box dimension must equal dim_state"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(thresholds.seed);
    let marks = model.marks.len();
    let mut drift_growth = 0.0_f64;
    let mut diffusion_growth = 0.0_f64;
    let mut jump_growth = vec![0.0_f64; marks];
    let mut lip = 0.0_f64;
    let mut inv_err = 0.0_f64;
    let mut min_det = f64::INFINITY;
    let mut lin_err = 0.0_f64;

    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    let mut g = vec![0.0; n];
    let mut y = vec![0.0; n];
    for _ in 0..n_samples {
        let t = rng.gen::<f64>() * model.horizon;
        let at = At::time(t);
        let x: Vec<f64> = (0..n)
            .map(|i| sample_box.lo[i] + (sample_box.hi[i] - sample_box.lo[i]) * rng.gen::<f64>())
            .collect();
        let scale = 1.0 + norm2(&x);
        model.drift(at, &x, &mut b);
        check_finite("drift", t, None, &x, &b)?;
        model.diffusion(at, &x, &mut s);
        check_finite("diffusion", t, None, &x, &s)?;
        drift_growth = drift_growth.max(norm2(&b) / scale);
        diffusion_growth = diffusion_growth.max(norm2(&s) / scale);

        let db = model.drift_jacobian(at, &x);
        check_finite("drift derivative", t, None, &x, &db)?;
        let ds = model.diffusion_jacobian(at, &x);
        check_finite("diffusion derivative", t, None, &x, &ds)?;
        lip = lip.max(norm2(&db)).max(norm2(&ds));

        for e in 0..marks {
            model.jump(at, e, &x, &mut g);
            check_finite("jump coefficient", t, Some(e), &x, &g)?;
            jump_growth[e] = jump_growth[e].max(norm2(&g) / scale);
            let mut dg = model.jump_jacobian(at, e, &x);
            check_finite("jump derivative", t, Some(e), &x, &dg)?;
            lip = lip.max(norm2(&dg));
            for i in 0..n {
                dg[i * n + i] += 1.0;
            }
            min_det = min_det.min(determinant(n, &dg).abs());
            for i in 0..n {
                y[i] = x[i] + g[i];
            }
            let err = match model.phi_inverse(at, e, &y) {
                Ok(xi) => xi.iter().zip(&x).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
                Err(_) => f64::INFINITY,
            };
            inv_err = inv_err.max(if err.is_nan() { f64::INFINITY } else { err });
        }

        if model.driver_linear_zu {
            lin_err = lin_err.max(driver_superposition_error(model, at, &x, &mut rng, l));
        }
    }
    let growth_value = drift_growth.max(diffusion_growth).max(jump_growth.iter().cloned().fold(0.0, f64::max));
    Ok(ValidationReport {
        samples: n_samples,
        drift_growth,
        diffusion_growth,
        jump_growth,
        growth: ConditionCheck {
            value: growth_value,
            threshold: thresholds.growth_max,
            pass: growth_value <= thresholds.growth_max,
        },
        lipschitz: ConditionCheck {
            value: lip,
            threshold: thresholds.lipschitz_max,
            pass: lip <= thresholds.lipschitz_max,
        },
        inverse: ConditionCheck {
            value: inv_err,
            threshold: thresholds.inverse_tol,
            pass: inv_err <= thresholds.inverse_tol,
        },
        jacobian_det: ConditionCheck {
            value: min_det,
            threshold: thresholds.det_min,
            pass: min_det > thresholds.det_min,
        },
        driver_linearity: model.driver_linear_zu.then(|| ConditionCheck {
            value: lin_err,
            threshold: thresholds.linearity_tol,
            pass: lin_err <= thresholds.linearity_tol,
        }),
    })
}

/// `h(z,u) = f(z,u) - f(0,0)` must satisfy `h(a w1 + b w2) = a h(w1) + b h(w2)`.
fn driver_superposition_error(model: &CoefficientModel, at: At, x: &[f64], rng: &mut ChaCha8Rng, l: usize) -> f64 {
    let nz = l * model.dim_brownian;
    let nu = l * model.marks.len();
    let yv: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let (z1, u1, z2, u2) = (draw(rng, nz), draw(rng, nu), draw(rng, nz), draw(rng, nu));
    let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let eval = |z: &[f64], u: &[f64]| {
        let mut out = vec![0.0; l];
        model.driver(at, &DriverArgs { x, y: &yv, z, u }, &mut out);
        out
    };
    let f0 = eval(&vec![0.0; nz], &vec![0.0; nu]);
    let h1 = eval(&z1, &u1);
    let h2 = eval(&z2, &u2);
    let z3: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
    let u3: Vec<f64> = u1.iter().zip(&u2).map(|(p, q)| a * p + b * q).collect();
    let h3 = eval(&z3, &u3);
    (0..l)
        .map(|k| ((h3[k] - f0[k]) - a * (h1[k] - f0[k]) - b * (h2[k] - f0[k])).abs())
        .fold(0.0, f64::max)
}
