//! Named test problems with closed-form oracles.
//!
//! Every problem is one-dimensional (`n = d = l = 1`). The driver family is
//! `f(t,x,y,z,u) = -r0 y + kz z + ku sum_e v(e) u(e) + forcing cos(x)`, which is
//! affine in `(z, u)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{CoefficientModel, MarkSpace};

pub const PROBLEM_NAMES: [&str; 6] = [
    "zero",
    "additive-brownian",
    "pure-jump-shift",
    "linear-jump-diffusion",
    "linear-driver",
    "nonlinear-jump-diffusion",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Terminal {
    Identity,
    Constant { value: f64 },
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub a: f64,
    pub s: f64,
    pub c: f64,
    pub intensities: Vec<f64>,
    pub horizon: f64,
    pub r0: f64,
    pub kz: f64,
    pub ku: f64,
    pub forcing: f64,
    pub terminal: Terminal,
    pub terminal_scale: f64,
}

/// Optional overrides applied on top of a problem's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    pub a: Option<f64>,
    pub s: Option<f64>,
    pub c: Option<f64>,
    pub intensities: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub r0: Option<f64>,
    pub kz: Option<f64>,
    pub ku: Option<f64>,
    pub forcing: Option<f64>,
    pub terminal: Option<Terminal>,
    pub terminal_scale: Option<f64>,
}

impl ProblemParams {
    pub fn defaults(name: &str) -> Result<Self> {
        let mut p = ProblemParams {
            a: 0.1,
            s: 0.2,
            c: 0.1,
            intensities: vec![2.0],
            horizon: 1.0,
            r0: 0.0,
            kz: 0.0,
            ku: 0.0,
            forcing: 0.0,
            terminal: Terminal::Identity,
            terminal_scale: 1.0,
        };
        match name {
            "zero" | "additive-brownian" | "pure-jump-shift" | "linear-jump-diffusion" => {}
            "linear-driver" => {
                p.r0 = 0.5;
                p.terminal = Terminal::Constant { value: 1.0 };
            }
            "nonlinear-jump-diffusion" => {
                p.r0 = 0.3;
                p.kz = 0.1;
                p.ku = 0.1;
                p.forcing = 0.2;
                p.terminal = Terminal::Sine;
            }
            _ => return Err(unknown(name)),
        }
        Ok(p)
    }

    pub fn apply(mut self, o: &ParamOverrides) -> Self {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = o.$f.clone() { self.$f = v; } )*};
        }
        set!(a, s, c, intensities, horizon, r0, kz, ku, forcing, terminal, terminal_scale);
        self
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }
}

fn unknown(name: &str) -> Error {
    Error::UnknownProblem {
        name: name.to_string(),
        available: PROBLEM_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Brownian position and per-mark jump counts at time `t` on one path.
#[derive(Clone, Copy, Debug)]
pub struct NoiseState<'a> {
    pub t: f64,
    pub w: &'a [f64],
    pub counts: &'a [usize],
}

impl NoiseState<'_> {
    fn total_jumps(&self) -> i32 {
        self.counts.iter().sum::<usize>() as i32
    }
}

/// Closed-form `(Y, Z, U)` values at one time on one path.
#[derive(Clone, Debug, PartialEq)]
pub struct BsdeValues {
    pub y: f64,
    pub z: f64,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TestProblem {
    pub name: String,
    pub params: ProblemParams,
    pub model: CoefficientModel,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Zero,
    Additive,
    Shift,
    Linear,
    Nonlinear,
}

pub fn catalog_problem(name: &str) -> Result<TestProblem> {
    catalog_problem_with(name, &ParamOverrides::default())
}

pub fn catalog_problem_with(name: &str, overrides: &ParamOverrides) -> Result<TestProblem> {
    let params = ProblemParams::defaults(name)?.apply(overrides);
    build(name, params)
}

fn build(name: &str, p: ProblemParams) -> Result<TestProblem> {
    let kind = kind_of(name)?;
    let marks = MarkSpace::from_intensities(&p.intensities)?;
    if (kind == Kind::Linear || kind == Kind::Nonlinear) && p.c.abs() >= 1.0 {
        return Err(invalid("c", p.c, "|c| < 1 keeps the jump map invertible"));
    }
    let mut m = CoefficientModel::new(1, 1, 1, p.horizon, marks.clone())?;
    let (a, s, c) = (p.a, p.s, p.c);
    match kind {
        Kind::Zero => {
            m = m
                .with_phi_inverse(|_, _, y, out| out[0] = y[0])
                .with_drift_dx(|_, _, out| out[0] = 0.0)
                .with_diffusion_dx(|_, _, out| out[0] = 0.0)
                .with_jump_dx(|_, _, _, out| out[0] = 0.0);
        }
        Kind::Additive => {
            m = m
                .with_diffusion(move |_, _, out| out[0] = s)
                .with_diffusion_dx(|_, _, out| out[0] = 0.0)
                .with_drift_dx(|_, _, out| out[0] = 0.0)
                .with_jump_dx(|_, _, _, out| out[0] = 0.0)
                .with_phi_inverse(|_, _, y, out| out[0] = y[0]);
        }
        Kind::Shift => {
            m = m
                .with_jump(move |_, _, _, out| out[0] = c)
                .with_jump_dx(|_, _, _, out| out[0] = 0.0)
                .with_phi_inverse(move |_, _, y, out| out[0] = y[0] - c)
                .with_drift_dx(|_, _, out| out[0] = 0.0)
                .with_diffusion_dx(|_, _, out| out[0] = 0.0);
        }
        Kind::Linear => {
            m = m
                .with_drift(move |_, x, out| out[0] = a * x[0])
                .with_drift_dx(move |_, _, out| out[0] = a)
                .with_diffusion(move |_, x, out| out[0] = s * x[0])
                .with_diffusion_dx(move |_, _, out| out[0] = s)
                .with_jump(move |_, _, x, out| out[0] = c * x[0])
                .with_jump_dx(move |_, _, _, out| out[0] = c)
                .with_phi_inverse(move |_, _, y, out| out[0] = y[0] / (1.0 + c));
        }
        Kind::Nonlinear => {
            // No analytic inverse: phi^{-1} goes through Newton.
            m = m
                .with_drift(move |_, x, out| out[0] = a * x[0].sin())
                .with_drift_dx(move |_, x, out| out[0] = a * x[0].cos())
                .with_diffusion(move |_, x, out| out[0] = s * (1.0 + 0.3 * x[0].sin()))
                .with_diffusion_dx(move |_, x, out| out[0] = 0.3 * s * x[0].cos())
                .with_jump(move |_, _, x, out| out[0] = c * (1.0 + x[0].sin()))
                .with_jump_dx(move |_, _, x, out| out[0] = c * x[0].cos());
        }
    }
    let (r0, kz, ku, forcing) = (p.r0, p.kz, p.ku, p.forcing);
    let v: Vec<f64> = p.intensities.clone();
    m = m
        .with_driver(true, move |_, arg, out| {
            let ju: f64 = v.iter().zip(arg.u).map(|(v, u)| v * u).sum();
            out[0] = -r0 * arg.y[0] + kz * arg.z[0] + ku * ju + forcing * arg.x[0].cos();
        })
        .with_driver_dx(move |_, arg, out| out[0] = -forcing * arg.x[0].sin())
        .with_driver_dy(move |_, _, out| out[0] = -r0);
    let scale = p.terminal_scale;
    m = match p.terminal {
        Terminal::Identity => m
            .with_terminal(move |x, out| out[0] = scale * x[0])
            .with_terminal_dx(move |_, out| out[0] = scale),
        Terminal::Constant { value } => m
            .with_terminal(move |_, out| out[0] = scale * value)
            .with_terminal_dx(|_, out| out[0] = 0.0),
        Terminal::Sine => m
            .with_terminal(move |x, out| out[0] = scale * x[0].sin())
            .with_terminal_dx(move |x, out| out[0] = scale * x[0].cos()),
    };
    Ok(TestProblem {
        name: name.to_string(),
        params: p,
        model: m,
    })
}

fn kind_of(name: &str) -> Result<Kind> {
    Ok(match name {
        "zero" => Kind::Zero,
        "additive-brownian" => Kind::Additive,
        "pure-jump-shift" => Kind::Shift,
        "linear-jump-diffusion" | "linear-driver" => Kind::Linear,
        "nonlinear-jump-diffusion" => Kind::Nonlinear,
        _ => return Err(unknown(name)),
    })
}

impl TestProblem {
    fn kind(&self) -> Kind {
        kind_of(&self.name).expect("name validated at construction")
    }

    /// Closed-form flow `X_t(x)` driven by the given noise state.
    pub fn oracle_flow(&self, x: f64, st: &NoiseState) -> Option<f64> {
        let p = &self.params;
        let lam = p.total_intensity();
        Some(match self.kind() {
            Kind::Zero => x,
            Kind::Additive => x + p.s * st.w[0],
            Kind::Shift => x + p.c * (st.total_jumps() as f64 - lam * st.t),
            Kind::Linear => x * self.linear_multiplier(st),
            Kind::Nonlinear => return None,
        })
    }

    /// Closed-form inverse flow `X_t^{-1}(y)`.
    pub fn oracle_inverse(&self, y: f64, st: &NoiseState) -> Option<f64> {
        let p = &self.params;
        let lam = p.total_intensity();
        Some(match self.kind() {
            Kind::Zero => y,
            Kind::Additive => y - p.s * st.w[0],
            Kind::Shift => y - p.c * (st.total_jumps() as f64 - lam * st.t),
            Kind::Linear => y / self.linear_multiplier(st),
            Kind::Nonlinear => return None,
        })
    }

    fn linear_multiplier(&self, st: &NoiseState) -> f64 {
        let p = &self.params;
        let lam = p.total_intensity();
        ((p.a - 0.5 * p.s * p.s - p.c * lam) * st.t + p.s * st.w[0]).exp() * (1.0 + p.c).powi(st.total_jumps())
    }

    /// Closed-form `(Y_t, Z_t, U_t)` as functions of `X_t` and `X_{t-}`.
    pub fn oracle_bsde(&self, t: f64, x: f64, x_left: f64) -> Option<BsdeValues> {
        let p = &self.params;
        let marks = p.intensities.len();
        let lam = p.total_intensity();
        let tau = p.horizon - t;
        let alpha = (-p.r0 * tau).exp();
        let m = p.terminal_scale;
        if p.forcing != 0.0 {
            return None;
        }
        match p.terminal {
            Terminal::Constant { value } => {
                return Some(BsdeValues {
                    y: m * value * alpha,
                    z: 0.0,
                    u: vec![0.0; marks],
                })
            }
            Terminal::Sine => return None,
            Terminal::Identity => {}
        }
        Some(match self.kind() {
            Kind::Zero => BsdeValues {
                y: m * alpha * x,
                z: 0.0,
                u: vec![0.0; marks],
            },
            Kind::Additive => BsdeValues {
                y: m * alpha * (x + p.kz * p.s * tau),
                z: m * alpha * p.s,
                u: vec![0.0; marks],
            },
            Kind::Shift => BsdeValues {
                y: m * alpha * (x + p.ku * lam * p.c * tau),
                z: 0.0,
                u: vec![m * alpha * p.c; marks],
            },
            Kind::Linear => {
                let h = self.linear_value_rate().map(|k| (k * tau).exp())?;
                BsdeValues {
                    y: m * h * x,
                    z: p.s * m * h * x,
                    u: vec![p.c * m * h * x_left; marks],
                }
            }
            Kind::Nonlinear => return None,
        })
    }

    fn linear_value_rate(&self) -> Option<f64> {
        let p = &self.params;
        Some(p.a + p.kz * p.s + p.ku * p.c * p.total_intensity() - p.r0)
    }

    /// Deterministic field `p(t, x)` with `Y_t = p(t, X_t)`.
    pub fn oracle_field(&self, t: f64, x: f64) -> Option<f64> {
        self.oracle_bsde(t, x, x).map(|v| v.y)
    }

    /// Pathwise derivative `dY_t / dx` of the solution started at `x0`.
    pub fn oracle_bsde_gradient(&self, t: f64, x0: f64, x_t: f64) -> Option<f64> {
        let p = &self.params;
        if p.forcing != 0.0 {
            return None;
        }
        let tau = p.horizon - t;
        let m = p.terminal_scale;
        match p.terminal {
            Terminal::Constant { .. } => return Some(0.0),
            Terminal::Sine => return None,
            Terminal::Identity => {}
        }
        let alpha = (-p.r0 * tau).exp();
        Some(match self.kind() {
            Kind::Zero | Kind::Additive | Kind::Shift => m * alpha,
            Kind::Linear => m * (self.linear_value_rate()? * tau).exp() * x_t / x0,
            Kind::Nonlinear => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, At, SampleBox, ValidationThresholds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unknown_name_lists_available_problems() {
        let err = catalog_problem("heston").unwrap_err();
        let msg = err.to_string();
        for n in PROBLEM_NAMES {
            assert!(msg.contains(n));
        }
    }

    #[test]
    fn phi_inverse_roundtrip_on_every_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in PROBLEM_NAMES {
            let pb = catalog_problem(name).unwrap();
            let m = &pb.model;
            for _ in 0..1000 {
                let t = rng.gen::<f64>();
                let y = rng.gen_range(-3.0..3.0);
                let x = m.phi_inverse(At::time(t), 0, &[y]).unwrap();
                let mut back = [0.0];
                m.phi(At::time(t), 0, &x, &mut back);
                assert!((back[0] - y).abs() <= 1e-10, "{name}: {} vs {y}", back[0]);
            }
        }
    }

    #[test]
    fn linear_problem_validates() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let r = validate_model(&pb.model, &SampleBox::interval(-3.0, 3.0), 500, &ValidationThresholds::default()).unwrap();
        assert!(r.all_pass(), "{r:?}");
        assert!((r.jacobian_det.value - 1.1).abs() < 1e-12);
    }

    #[test]
    fn catalog_drivers_are_linear_in_z_u() {
        for name in PROBLEM_NAMES {
            let pb = catalog_problem(name).unwrap();
            let r = validate_model(&pb.model, &SampleBox::interval(-1.0, 1.0), 100, &ValidationThresholds::default()).unwrap();
            assert!(r.driver_linearity.unwrap().pass, "{name}");
        }
    }

    #[test]
    fn oracle_inverse_undoes_oracle_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in ["zero", "additive-brownian", "pure-jump-shift", "linear-jump-diffusion"] {
            let pb = catalog_problem(name).unwrap();
            for _ in 0..200 {
                let w = [rng.gen_range(-2.0..2.0)];
                let counts = [rng.gen_range(0..6usize)];
                let st = NoiseState {
                    t: rng.gen(),
                    w: &w,
                    counts: &counts,
                };
                let x = rng.gen_range(-2.0..2.0);
                let y = pb.oracle_flow(x, &st).unwrap();
                assert!((pb.oracle_inverse(y, &st).unwrap() - x).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_bsde_oracle_terminal_and_relations() {
        let pb = catalog_problem("linear-jump-diffusion").unwrap();
        let v = pb.oracle_bsde(1.0, 1.3, 1.2).unwrap();
        assert!((v.y - 1.3).abs() < 1e-15);
        let v = pb.oracle_bsde(0.25, 1.3, 1.2).unwrap();
        let h = (0.1_f64 * 0.75).exp();
        assert!((v.y - 1.3 * h).abs() < 1e-14);
        assert!((v.z - 0.2 * 1.3 * h).abs() < 1e-14);
        assert!((v.u[0] - 0.1 * 1.2 * h).abs() < 1e-14);
    }

    #[test]
    fn driver_oracles_satisfy_their_ode() {
        // Y = u(t, X) must solve du/dt + L u + jump part + f = 0 for the
        // linear family with kz, ku, r0 switched on; check by finite differences.
        let o = ParamOverrides {
            r0: Some(0.4),
            kz: Some(0.3),
            ku: Some(0.2),
            terminal: Some(Terminal::Identity),
            ..Default::default()
        };
        for name in ["additive-brownian", "pure-jump-shift", "linear-driver"] {
            let pb = catalog_problem_with(name, &o).unwrap();
            let p = &pb.params;
            let lam = p.total_intensity();
            let m = &pb.model;
            let (t, x) = (0.3, 0.8);
            let u = |t: f64, x: f64| pb.oracle_field(t, x).unwrap();
            let h = 1e-4;
            let ut = (u(t + h, x) - u(t - h, x)) / (2.0 * h);
            let ux = (u(t, x + h) - u(t, x - h)) / (2.0 * h);
            let uxx = (u(t, x + h) - 2.0 * u(t, x) + u(t, x - h)) / (h * h);
            let at = At::time(t);
            let (mut b, mut s, mut g) = ([0.0], [0.0], [0.0]);
            m.drift(at, &[x], &mut b);
            m.diffusion(at, &[x], &mut s);
            m.jump(at, 0, &[x], &mut g);
            let jump_u = u(t, x + g[0]) - u(t, x);
            let gen = ut + 0.5 * s[0] * s[0] * uxx + (b[0] - lam * g[0]) * ux + lam * jump_u;
            let vals = pb.oracle_bsde(t, x, x).unwrap();
            assert!((vals.z - s[0] * ux).abs() < 1e-6, "{name} z");
            assert!((vals.u[0] - jump_u).abs() < 1e-6, "{name} u");
            let mut f = [0.0];
            m.driver(
                at,
                &crate::model::DriverArgs {
                    x: &[x],
                    y: &[vals.y],
                    z: &[vals.z],
                    u: &vals.u,
                },
                &mut f,
            );
            assert!((gen + f[0]).abs() < 1e-5, "{name}: {}", gen + f[0]);
        }
    }
}
