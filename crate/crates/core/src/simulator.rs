//! Explicit upwind simulation of the plant and of the target system,
//! the state transformation between them and the Lyapunov functional.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{integrate_x, weighted_dot, GridSpec, TriField};
use crate::kernelsolve::KernelSolution;
use crate::model::SampledCoefficients;
use crate::volterra::{inverse_transform_kernels, solve_kappa, VolterraRule};

/// Tolerance used for every resolvent series built here.
const RESOLVENT_TOL: f64 = 1e-12;

/// `u` as `[x, y]`, `v` over x, and the time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub u: Array2<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl EnsembleState {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            u: Array2::zeros((grid.nx + 1, grid.ny)),
            v: vec![0.0; grid.nx + 1],
            t: 0.0,
        }
    }

    fn check(&self, grid: &GridSpec) -> Result<()> {
        if self.u.dim() != (grid.nx + 1, grid.ny) || self.v.len() != grid.nx + 1 {
            return Err(Error::Dimension(format!(
                "state is {:?} + {}, grid needs ({}, {}) + {}",
                self.u.dim(),
                self.v.len(),
                grid.nx + 1,
                grid.ny,
                grid.nx + 1
            )));
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }
}

/// Named initial profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCondition {
    /// `u₀ = A sin(πx) cos(2πy)`, `v₀ = 0`.
    Default {
        amp: f64,
    },
    /// `u₀ = A (y - ½) sin(πx)`, `v₀ = 0`.
    HalfMode {
        amp: f64,
    },
    /// `u₀ = A exp(-((x - c)/w)²)`, `v₀ = 0`.
    Gaussian {
        amp: f64,
        center: f64,
        width: f64,
    },
    Zero,
}

impl InitialCondition {
    pub fn build(&self, grid: &GridSpec) -> EnsembleState {
        let xs = grid.x_nodes();
        let ys = grid.y_nodes();
        let mut s = EnsembleState::zeros(grid);
        let f: Box<dyn Fn(f64, f64) -> f64> = match *self {
            Self::Default { amp } => {
                Box::new(move |x, y| amp * (PI * x).sin() * (2.0 * PI * y).cos())
            }
            Self::HalfMode { amp } => Box::new(move |x, y| amp * (y - 0.5) * (PI * x).sin()),
            Self::Gaussian { amp, center, width } => {
                Box::new(move |x, _| amp * (-((x - center) / width).powi(2)).exp())
            }
            Self::Zero => Box::new(|_, _| 0.0),
        };
        for ((i, l), u) in s.u.indexed_iter_mut() {
            *u = f(xs[i], ys[l]);
        }
        s
    }
}

/// How the right boundary of `v` is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `v(t, 1) = 0`.
    Open,
    /// `v(t, 1) = U(t)` from the backstepping gains.
    Closed,
    /// Simulates the target system instead of the plant.
    Target,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Self::Open),
            "closed" => Ok(Self::Closed),
            "target" => Ok(Self::Target),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (open, closed, target)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Requested time.
    pub requested: f64,
    pub state: EnsembleState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub joint_norms: Vec<f64>,
    pub u_norms: Vec<f64>,
    pub v_norms: Vec<f64>,
    pub control: Vec<f64>,
    pub lyapunov: Option<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
    /// Least-squares slope of `ln ‖·‖` over `t ∈ [2, t_final]`.
    pub decay_rate: Option<f64>,
}

impl SimulationRecord {
    pub fn max_norm(&self) -> f64 {
        self.joint_norms.iter().copied().fold(0.0, f64::max)
    }

    pub fn final_norm(&self) -> f64 {
        *self.joint_norms.last().unwrap()
    }

    pub fn max_abs_control(&self) -> f64 {
        self.control.iter().fold(0.0_f64, |m, u| m.max(u.abs()))
    }
}

fn check_cfl(coeff: &SampledCoefficients, dt: f64) -> Result<()> {
    let c = dt * coeff.max_speed() * coeff.grid.nx as f64;
    if c > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "CFL number {c:.4} exceeds 1 (reduce dt or nx)"
        )));
    }
    Ok(())
}

/// `‖(u, v)‖ = sqrt(∫∫ u² + ∫ v²)`.
pub fn joint_norm(grid: &GridSpec, u: &Array2<f64>, v: &[f64]) -> f64 {
    (u_norm(grid, u).powi(2) + v_norm(grid, v).powi(2)).sqrt()
}

pub fn u_norm(grid: &GridSpec, u: &Array2<f64>) -> f64 {
    let wy = crate::grid::trapezoid_weights(grid.ny);
    let rows: Vec<f64> = u
        .axis_iter(Axis(0))
        .map(|r| weighted_dot(&wy, r.as_slice().unwrap(), r.as_slice().unwrap()))
        .collect();
    integrate_x(grid, &rows).unwrap_or(f64::NAN).sqrt()
}

pub fn v_norm(grid: &GridSpec, v: &[f64]) -> f64 {
    let sq: Vec<f64> = v.iter().map(|a| a * a).collect();
    integrate_x(grid, &sq).unwrap_or(f64::NAN).sqrt()
}

/// `Θ(x_i){u_i} + W(x_i) v_i` for every row.
fn coupling_u(coeff: &SampledCoefficients, u: &Array2<f64>, v: &[f64]) -> Array2<f64> {
    let wy = ArrayView1::from(&coeff.y_weights[..]);
    let ny = coeff.grid.ny;
    let rows: Vec<Vec<f64>> = (0..u.nrows())
        .into_par_iter()
        .map(|i| {
            let wu = &u.row(i) * &wy;
            let th = coeff.theta.index_axis(Axis(0), i);
            let mut r = th.dot(&wu).to_vec();
            for (o, w) in r.iter_mut().zip(coeff.w.row(i)) {
                *o += w * v[i];
            }
            r
        })
        .collect();
    Array2::from_shape_fn((u.nrows(), ny), |(i, l)| rows[i][l])
}

/// Upwind update shared by the plant and the target system; `src_u` and
/// `src_v` are the non-transport right-hand sides.
fn transport_step(
    coeff: &SampledCoefficients,
    state: &EnsembleState,
    dt: f64,
    src_u: &Array2<f64>,
    src_v: &[f64],
    v_right: f64,
) -> Result<EnsembleState> {
    let grid = &coeff.grid;
    let nx = grid.nx;
    let r = dt / grid.hx();
    let mut u = state.u.clone();
    for i in 1..=nx {
        for l in 0..grid.ny {
            let (a, b) = (state.u[[i, l]], state.u[[i - 1, l]]);
            u[[i, l]] = a - r * coeff.lambda[[i, l]] * (a - b) + dt * src_u[[i, l]];
        }
    }
    let mut v = state.v.clone();
    for i in 0..nx {
        v[i] = state.v[i] + r * coeff.mu[i] * (state.v[i + 1] - state.v[i]) + dt * src_v[i];
    }
    v[nx] = v_right;
    for l in 0..grid.ny {
        u[[0, l]] = coeff.q[l] * v[0];
    }
    let next = EnsembleState {
        u,
        v,
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(Error::Divergence { t: next.t });
    }
    Ok(next)
}

/// One explicit step of the plant with `v(t + dt, 1) = boundary_v1`.
pub fn step_plant(
    state: &EnsembleState,
    coeff: &SampledCoefficients,
    dt: f64,
    boundary_v1: f64,
) -> Result<EnsembleState> {
    state.check(&coeff.grid)?;
    check_cfl(coeff, dt)?;
    let src_u = coupling_u(coeff, &state.u, &state.v);
    let src_v: Vec<f64> = (0..=coeff.grid.nx)
        .map(|i| {
            weighted_dot(
                &coeff.y_weights,
                coeff.xi.row(i).as_slice().unwrap(),
                state.u.row(i).as_slice().unwrap(),
            )
        })
        .collect();
    transport_step(coeff, state, dt, &src_u, &src_v, boundary_v1)
}

/// `U = ∫₀¹ ( ∫ k(1, ξ, y) u(ξ, y) dy + k̃(1, ξ) v(ξ) ) dξ`.
pub fn control_value(state: &EnsembleState, gains: &KernelSolution) -> Result<f64> {
    let grid = &gains.grid;
    state.check(grid)?;
    let wy = crate::grid::trapezoid_weights(grid.ny);
    let f: Vec<f64> = (0..=grid.nx)
        .map(|j| {
            weighted_dot(
                &wy,
                gains.gain_u.row(j).as_slice().unwrap(),
                state.u.row(j).as_slice().unwrap(),
            ) + gains.gain_v[j] * state.v[j]
        })
        .collect();
    integrate_x(grid, &f)
}

/// `∫₀^{x_i} ( ⟨k[x_i, ξ], u(ξ)⟩ + k̃(x_i, ξ) v(ξ) ) dξ` for every `i`.
fn volterra_row_integrals(
    rule: &VolterraRule,
    wy: &[f64],
    k: &TriField,
    kt: &TriField,
    u: &Array2<f64>,
    v: &[f64],
) -> Vec<f64> {
    (0..=k.nx)
        .into_par_iter()
        .map(|i| {
            let w = rule.weights(i);
            (0..=i)
                .map(|s| {
                    w[s] * (weighted_dot(wy, k.at(i, s), u.row(s).as_slice().unwrap())
                        + kt.get(i, s, 0) * v[s])
                })
                .sum()
        })
        .collect()
}

/// `(α, β) = (u, v - ∫₀ˣ ⟨k, u⟩ - ∫₀ˣ k̃ v)`.
pub fn forward_transform(
    state: &EnsembleState,
    k: &TriField,
    ktilde: &TriField,
) -> Result<EnsembleState> {
    let grid = GridSpec::spatial(k.nx, k.width)?;
    state.check(&grid)?;
    let rule = VolterraRule::new(k.nx);
    let wy = crate::grid::trapezoid_weights(k.width);
    let int = volterra_row_integrals(&rule, &wy, k, ktilde, &state.u, &state.v);
    let beta = state.v.iter().zip(int).map(|(v, s)| v - s).collect();
    Ok(EnsembleState {
        u: state.u.clone(),
        v: beta,
        t: state.t,
    })
}

/// `(u, v) = (α, β + ∫₀ˣ ⟨l, α⟩ + ∫₀ˣ l̃ β)`.
pub fn inverse_transform(
    target: &EnsembleState,
    l: &TriField,
    ltilde: &TriField,
) -> Result<EnsembleState> {
    let grid = GridSpec::spatial(l.nx, l.width)?;
    target.check(&grid)?;
    let rule = VolterraRule::new(l.nx);
    let wy = crate::grid::trapezoid_weights(l.width);
    let int = volterra_row_integrals(&rule, &wy, l, ltilde, &target.u, &target.v);
    let v = target.v.iter().zip(int).map(|(b, s)| b + s).collect();
    Ok(EnsembleState {
        u: target.u.clone(),
        v,
        t: target.t,
    })
}

/// Weighted Lyapunov functional and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LyapunovParams {
    pub p: f64,
    pub delta: f64,
    /// Constants of `lower ‖·‖² <= V <= upper ‖·‖²`.
    pub lower: f64,
    pub upper: f64,
}

impl LyapunovParams {
    /// Sandwich constants for given `p` and `δ` from the speed bounds.
    pub fn with(coeff: &SampledCoefficients, p: f64, delta: f64) -> Self {
        let lower = (p * (-delta).exp() / coeff.lambda_max).min(1.0 / coeff.mu_max);
        let upper = (p / coeff.lambda_min).max(2.0 / coeff.mu_min);
        Self {
            p,
            delta,
            lower,
            upper,
        }
    }
}

/// `V = p ∫ e^{-δx} ∫ α²/λ dy dx + ∫ (1 + x) β² / μ dx`.
pub fn lyapunov_value(
    coeff: &SampledCoefficients,
    target: &EnsembleState,
    p: f64,
    delta: f64,
) -> Result<f64> {
    let grid = &coeff.grid;
    target.check(grid)?;
    let wy = &coeff.y_weights;
    let fa: Vec<f64> = (0..=grid.nx)
        .map(|i| {
            let row = target.u.row(i);
            let s: f64 = (0..grid.ny)
                .map(|l| wy[l] * row[l] * row[l] / coeff.lambda[[i, l]])
                .sum();
            (-delta * grid.x(i)).exp() * s
        })
        .collect();
    let fb: Vec<f64> = (0..=grid.nx)
        .map(|i| (1.0 + grid.x(i)) * target.v[i].powi(2) / coeff.mu[i])
        .collect();
    Ok(p * integrate_x(grid, &fa)? + integrate_x(grid, &fb)?)
}

/// Everything needed to step the target system.
#[derive(Debug, Clone)]
pub struct TargetSystem {
    pub k: TriField,
    pub kappa: TriField,
    pub l: TriField,
    pub ltilde: TriField,
    pub lyapunov: LyapunovParams,
    rule: VolterraRule,
}

fn l2_rows(field: &TriField, wy: &[f64]) -> Vec<f64> {
    field
        .data
        .chunks(field.width)
        .map(|r| weighted_dot(wy, r, r).sqrt())
        .collect()
}

impl TargetSystem {
    /// Builds κ, the inverse kernels and Lyapunov parameters chosen so
    /// that `δ` exceeds the decay threshold and `p` satisfies the cross-term
    /// bounds.
    pub fn new(coeff: &SampledCoefficients, kernels: &KernelSolution) -> Result<Self> {
        let grid = coeff.grid;
        if kernels.grid.nx != grid.nx || kernels.grid.ny != grid.ny {
            return Err(Error::Dimension(
                "kernels were solved on a different grid".into(),
            ));
        }
        let kappa = solve_kappa(&coeff.w, &kernels.ktilde, RESOLVENT_TOL)?;
        let (l, ltilde) = inverse_transform_kernels(&kernels.k, &kernels.ktilde, RESOLVENT_TOL)?;
        let rule = VolterraRule::new(grid.nx);
        let wy = &coeff.y_weights;
        let tri = grid.tri();

        let nk = l2_rows(&kernels.k, wy);
        let nkappa = l2_rows(&kappa, wy);
        let nw: Vec<f64> = coeff
            .w
            .axis_iter(Axis(0))
            .map(|r| weighted_dot(wy, r.as_slice().unwrap(), r.as_slice().unwrap()).sqrt())
            .collect();
        // ‖C(x, ξ)‖ <= ‖W[x]‖ ‖k[x, ξ]‖ + ∫ ‖k[s, ξ]‖ ‖κ[x, s]‖ ds
        let m_c = (0..tri.len())
            .into_par_iter()
            .map(|node| {
                let (i, j) = tri.node(node);
                let w = rule.weights(i - j);
                nw[i] * nk[node]
                    + (j..=i)
                        .map(|s| w[s - j].abs() * nk[tri.index(s, j)] * nkappa[tri.index(i, s)])
                        .sum::<f64>()
            })
            .reduce(|| 0.0, f64::max);
        let m_theta = (0..=grid.nx)
            .map(|i| {
                let th = coeff.theta.index_axis(Axis(0), i);
                th.indexed_iter()
                    .map(|((a, b), v)| wy[a] * wy[b] * v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let m_linv = 1.0 / coeff.lambda_min;
        let m_kappa = nkappa.iter().copied().fold(0.0, f64::max);
        let m_w = nw.iter().copied().fold(0.0, f64::max);
        let q_norm =
            weighted_dot(wy, coeff.q.as_slice().unwrap(), coeff.q.as_slice().unwrap()).sqrt();

        let delta = 1.0 + m_c * m_c + 2.0 * m_linv * m_theta + m_linv + 1.0;
        let q_cap = if q_norm > 0.0 {
            delta.exp() / q_norm
        } else {
            f64::INFINITY
        };
        let denom = m_kappa * m_kappa + delta * m_w * m_w;
        let cross_cap = if denom > 0.0 {
            delta / denom
        } else {
            f64::INFINITY
        };
        let p = 0.5 * 1f64.min(q_cap).min(cross_cap);
        Ok(Self {
            k: kernels.k.clone(),
            kappa,
            l,
            ltilde,
            lyapunov: LyapunovParams::with(coeff, p, delta),
            rule,
        })
    }

    /// One explicit step of
    /// `α_t + λ α_x = Θα + Wβ + ∫₀ˣ κ β + ∫₀ˣ C{α}`, `β_t - μ β_x = 0`,
    /// with `α(0) = q β(0)` and `β(1) = 0`.
    pub fn step(
        &self,
        coeff: &SampledCoefficients,
        state: &EnsembleState,
        dt: f64,
    ) -> Result<EnsembleState> {
        let grid = &coeff.grid;
        state.check(grid)?;
        check_cfl(coeff, dt)?;
        let (nx, ny) = (grid.nx, grid.ny);
        let wy = &coeff.y_weights;
        let alpha = &state.u;
        let beta = &state.v;
        // S(x) = ∫₀ˣ ⟨k[x, ξ], α(ξ)⟩ dξ, so that ∫₀ˣ C{α} = W[x] S(x) + ∫₀ˣ κ[x, s] S(s) ds.
        let s: Vec<f64> = (0..=nx)
            .into_par_iter()
            .map(|i| {
                let w = self.rule.weights(i);
                (0..=i)
                    .map(|j| {
                        w[j] * weighted_dot(wy, self.k.at(i, j), alpha.row(j).as_slice().unwrap())
                    })
                    .sum()
            })
            .collect();
        let mut src = coupling_u(coeff, alpha, beta);
        let extra: Vec<Vec<f64>> = (0..=nx)
            .into_par_iter()
            .map(|i| {
                let w = self.rule.weights(i);
                let mut acc: Vec<f64> = (0..ny).map(|l| coeff.w[[i, l]] * s[i]).collect();
                for j in 0..=i {
                    let c = w[j] * (beta[j] + s[j]);
                    if c != 0.0 {
                        for (a, kv) in acc.iter_mut().zip(self.kappa.at(i, j)) {
                            *a += c * kv;
                        }
                    }
                }
                acc
            })
            .collect();
        for (i, row) in extra.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                src[[i, l]] += v;
            }
        }
        transport_step(coeff, state, dt, &src, &vec![0.0; nx + 1], 0.0)
    }

    pub fn lyapunov(&self, coeff: &SampledCoefficients, state: &EnsembleState) -> Result<f64> {
        lyapunov_value(coeff, state, self.lyapunov.p, self.lyapunov.delta)
    }

    /// Plant input `v(t, 1)` that corresponds to a target state.
    pub fn plant_boundary(&self, coeff: &SampledCoefficients, state: &EnsembleState) -> f64 {
        let nx = coeff.grid.nx;
        let w = self.rule.weights(nx);
        state.v[nx]
            + (0..=nx)
                .map(|j| {
                    w[j] * (weighted_dot(
                        &coeff.y_weights,
                        self.l.at(nx, j),
                        state.u.row(j).as_slice().unwrap(),
                    ) + self.ltilde.get(nx, j, 0) * state.v[j])
                })
                .sum::<f64>()
    }
}

/// Least-squares slope of `ln(norm)` against time over `t >= t_start`.
pub fn fit_decay_rate(times: &[f64], norms: &[f64], t_start: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(t, n)| **t >= t_start - 1e-12 && **n > 0.0 && n.is_finite())
        .map(|(t, n)| (*t, n.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (st, sl) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, ml) = (st / m, sl / m);
    let (num, den) = pts.iter().fold((0.0, 0.0), |a, p| {
        (a.0 + (p.0 - mt) * (p.1 - ml), a.1 + (p.0 - mt).powi(2))
    });
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Start of the window used by [`fit_decay_rate`] in [`simulate`].
pub const DECAY_FIT_START: f64 = 2.0;

/// Runs the plant (open or closed loop) or the target system from
/// `initial` up to the grid's `t_final`. In closed loop the control is
/// computed from the state at the start of each step. In target mode the
/// initial state is mapped through the forward transformation first.
pub fn simulate(
    coeff: &SampledCoefficients,
    kernels: Option<&KernelSolution>,
    mode: Mode,
    initial: &EnsembleState,
    snapshot_times: &[f64],
) -> Result<SimulationRecord> {
    let grid = coeff.grid;
    initial.check(&grid)?;
    check_cfl(coeff, grid.dt)?;
    let target = match (mode, kernels) {
        (Mode::Open, _) => None,
        (_, Some(k)) => Some(TargetSystem::new(coeff, k)?),
        (_, None) => {
            return Err(Error::Config(format!(
                "{mode:?} mode needs backstepping kernels"
            )))
        }
    };
    let n_steps = grid.n_steps();
    let mut snaps: Vec<(usize, f64)> = snapshot_times
        .iter()
        .filter(|t| **t >= 0.0 && **t <= grid.t_final + 1e-9)
        .map(|&t| (((t / grid.dt).round() as usize).min(n_steps), t))
        .collect();
    snaps.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut state = match (mode, &target) {
        (Mode::Target, Some(_)) => {
            let k = kernels.unwrap();
            forward_transform(initial, &k.k, &k.ktilde)?
        }
        _ => initial.clone(),
    };
    state.t = 0.0;
    let mut rec = SimulationRecord {
        mode,
        times: Vec::with_capacity(n_steps + 1),
        joint_norms: Vec::with_capacity(n_steps + 1),
        u_norms: Vec::with_capacity(n_steps + 1),
        v_norms: Vec::with_capacity(n_steps + 1),
        control: Vec::with_capacity(n_steps + 1),
        lyapunov: target.as_ref().map(|_| Vec::with_capacity(n_steps + 1)),
        snapshots: Vec::new(),
        decay_rate: None,
    };
    let mut next_snap = 0;
    for n in 0..=n_steps {
        let t = n as f64 * grid.dt;
        state.t = t;
        let (un, vn) = (u_norm(&grid, &state.u), v_norm(&grid, &state.v));
        rec.times.push(t);
        rec.u_norms.push(un);
        rec.v_norms.push(vn);
        rec.joint_norms.push((un * un + vn * vn).sqrt());
        while next_snap < snaps.len() && snaps[next_snap].0 == n {
            rec.snapshots.push(Snapshot {
                requested: snaps[next_snap].1,
                state: state.clone(),
            });
            next_snap += 1;
        }
        let u_ctrl = match mode {
            Mode::Open => 0.0,
            Mode::Closed => control_value(&state, kernels.unwrap())?,
            Mode::Target => target.as_ref().unwrap().plant_boundary(coeff, &state),
        };
        rec.control.push(u_ctrl);
        if let (Some(ts), Some(v)) = (&target, rec.lyapunov.as_mut()) {
            let value = match mode {
                Mode::Target => ts.lyapunov(coeff, &state)?,
                _ => {
                    let k = kernels.unwrap();
                    ts.lyapunov(coeff, &forward_transform(&state, &k.k, &k.ktilde)?)?
                }
            };
            v.push(value);
        }
        if n == n_steps {
            break;
        }
        state = match mode {
            Mode::Target => target.as_ref().unwrap().step(coeff, &state, grid.dt)?,
            _ => step_plant(&state, coeff, grid.dt, u_ctrl)?,
        };
    }
    rec.decay_rate = fit_decay_rate(&rec.times, &rec.joint_norms, DECAY_FIT_START);
    Ok(rec)
}
