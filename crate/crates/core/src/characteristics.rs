//! Characteristic curves of the kernel equations.
//!
//! Two families are traced on the triangle `0 <= ξ <= x <= 1`:
//!
//! * f-curves run from the diagonal to a node, with `x` moving at speed
//!   `μ(x)` and `ξ` at speed `-λ(ξ, y)`;
//! * g-curves run from the edge `ξ = 0` to a node, both coordinates moving
//!   at speed `μ`.
//!
//! Both are found by integrating backward from the node with a fixed-step
//! RK4 scheme until the stopping event brackets, then bisecting a partial
//! step onto the event.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::PlantModel;

/// Transport speeds seen by the characteristic tracer.
pub trait Speeds: Sync {
    fn mu(&self, x: f64) -> f64;
    fn lambda(&self, x: f64, y: f64) -> f64;
    /// Positive lower bound of `μ` on `[0, 1]`.
    fn mu_floor(&self) -> f64;
    /// Positive lower bound of `λ` on `[0, 1]²`.
    fn lambda_floor(&self) -> f64;
}

impl Speeds for PlantModel {
    fn mu(&self, x: f64) -> f64 {
        PlantModel::mu(self, x)
    }
    fn lambda(&self, x: f64, y: f64) -> f64 {
        PlantModel::lambda(self, x, y)
    }
    fn mu_floor(&self) -> f64 {
        PlantModel::mu_floor(self)
    }
    fn lambda_floor(&self) -> f64 {
        PlantModel::lambda_floor(self)
    }
}

/// Spatially constant speeds.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSpeeds {
    pub lambda: f64,
    pub mu: f64,
}

impl Speeds for ConstantSpeeds {
    fn mu(&self, _: f64) -> f64 {
        self.mu
    }
    fn lambda(&self, _: f64, _: f64) -> f64 {
        self.lambda
    }
    fn mu_floor(&self) -> f64 {
        self.mu
    }
    fn lambda_floor(&self) -> f64 {
        self.lambda
    }
}

/// Speeds given by closures together with their lower bounds.
pub struct FnSpeeds<L, M> {
    pub lambda: L,
    pub mu: M,
    pub lambda_floor: f64,
    pub mu_floor: f64,
}

impl<L, M> Speeds for FnSpeeds<L, M>
where
    L: Fn(f64, f64) -> f64 + Sync,
    M: Fn(f64) -> f64 + Sync,
{
    fn mu(&self, x: f64) -> f64 {
        (self.mu)(x)
    }
    fn lambda(&self, x: f64, y: f64) -> f64 {
        (self.lambda)(x, y)
    }
    fn mu_floor(&self) -> f64 {
        self.mu_floor
    }
    fn lambda_floor(&self) -> f64 {
        self.lambda_floor
    }
}

/// A traced characteristic, parametrised forward from its launch point.
///
/// `path_s[0] = 0` is the launch point and `path_s[last] = s_end` is the
/// node the curve was traced from. For f-curves `launch` is the diagonal
/// abscissa `x̂₀`; for g-curves it is the abscissa `χ₀` on the edge `ξ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCrossing {
    pub s_end: f64,
    pub launch: f64,
    pub path_s: Vec<f64>,
    pub path_x: Vec<f64>,
    pub path_xi: Vec<f64>,
    pub n_steps: usize,
}

const EVENT_TOL: f64 = 1e-10;
const SLACK: f64 = 1e-12;

fn rk4(f: impl Fn(f64) -> f64, z: f64, h: f64) -> f64 {
    let k1 = f(z);
    let k2 = f(z + 0.5 * h * k1);
    let k3 = f(z + 0.5 * h * k2);
    let k4 = f(z + h * k3);
    z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn check_point(x: f64, xi: f64) -> Result<()> {
    let ok = x.is_finite() && xi.is_finite() && xi >= -SLACK && xi <= x + SLACK && x <= 1.0 + SLACK;
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "({x}, {xi}) is not in 0 <= xi <= x <= 1"
        )))
    }
}

fn check_step(step: f64) -> Result<()> {
    if step.is_finite() && step > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "integration step must be positive, got {step}"
        )))
    }
}

/// Integrates the pair `(z, w)` with velocities `(vz, vw)` until
/// `event(z, w)` becomes non-negative, returning the forward path.
fn trace(
    z0: f64,
    w0: f64,
    vz: impl Fn(f64) -> f64,
    vw: impl Fn(f64) -> f64,
    event: impl Fn(f64, f64) -> f64,
    step: f64,
    s_max: f64,
) -> Result<CharCrossing> {
    let mut zs = vec![z0];
    let mut ws = vec![w0];
    let mut ss = vec![0.0];
    let (mut z, mut w, mut s) = (z0, w0, 0.0);
    if event(z, w) >= 0.0 {
        return Ok(CharCrossing {
            s_end: 0.0,
            launch: z0,
            path_s: ss,
            path_x: zs,
            path_xi: ws,
            n_steps: 0,
        });
    }
    loop {
        let (zn, wn) = (rk4(&vz, z, step), rk4(&vw, w, step));
        if !(zn.is_finite() && wn.is_finite()) {
            return Err(Error::Numeric(format!(
                "characteristic left the reals at s = {s}"
            )));
        }
        if event(zn, wn) >= 0.0 {
            // Bisect the partial step onto the event.
            let (mut lo, mut hi) = (0.0, step);
            let (mut zt, mut wt) = (zn, wn);
            let mut sigma = step;
            for _ in 0..200 {
                let g = event(zt, wt);
                if g.abs() <= EVENT_TOL || hi - lo <= f64::EPSILON * step {
                    break;
                }
                if g > 0.0 {
                    hi = sigma;
                } else {
                    lo = sigma;
                }
                sigma = 0.5 * (lo + hi);
                zt = rk4(&vz, z, sigma);
                wt = rk4(&vw, w, sigma);
            }
            let t = s + sigma;
            let n_steps = ss.len();
            let mut path_s = Vec::with_capacity(n_steps + 1);
            let mut path_x = Vec::with_capacity(n_steps + 1);
            let mut path_xi = Vec::with_capacity(n_steps + 1);
            path_s.push(0.0);
            path_x.push(zt);
            path_xi.push(wt);
            for k in (0..n_steps).rev() {
                path_s.push(t - ss[k]);
                path_x.push(zs[k]);
                path_xi.push(ws[k]);
            }
            return Ok(CharCrossing {
                s_end: t,
                launch: zt,
                path_s,
                path_x,
                path_xi,
                n_steps,
            });
        }
        z = zn;
        w = wn;
        s += step;
        zs.push(z);
        ws.push(w);
        ss.push(s);
        if s > s_max {
            return Err(Error::NonConvergence {
                iterations: ss.len() - 1,
                delta: (z - w).abs(),
            });
        }
    }
}

/// Traces the f-characteristic through `(x, ξ)` for ensemble point `y`
/// back to the diagonal.
pub fn trace_f_curve(
    speeds: &dyn Speeds,
    x: f64,
    xi: f64,
    y: f64,
    step: f64,
) -> Result<CharCrossing> {
    check_point(x, xi)?;
    check_step(step)?;
    let s_max = 2.0 / (speeds.mu_floor() + speeds.lambda_floor());
    trace(
        x,
        xi,
        |z| -speeds.mu(z.clamp(0.0, 1.0)),
        |w| speeds.lambda(w.clamp(0.0, 1.0), y),
        |z, w| w - z,
        step,
        s_max,
    )
}

/// Traces the g-characteristic through `(x, ξ)` back to the edge `ξ = 0`.
pub fn trace_g_curve(speeds: &dyn Speeds, x: f64, xi: f64, step: f64) -> Result<CharCrossing> {
    check_point(x, xi)?;
    check_step(step)?;
    let s_max = 2.0 / speeds.mu_floor();
    let v = |z: f64| -speeds.mu(z.clamp(0.0, 1.0));
    trace(x, xi, v, v, |_, w| -w, step, s_max)
}

/// Integration step used for curves on a grid: a quarter cell at the
/// fastest speed, or `requested` if that is smaller.
pub fn cache_step(grid: &GridSpec, max_speed: f64, requested: Option<f64>) -> f64 {
    let cell = 1.0 / (4.0 * grid.nx as f64 * max_speed);
    requested.map_or(cell, |s| s.min(cell))
}

/// End points of the characteristics through every triangle node.
#[derive(Debug, Clone)]
pub struct CurveCache {
    pub nx: usize,
    /// Number of ensemble classes with distinct f-curves: 1 when λ does not
    /// depend on y, otherwise `ny`.
    pub classes: usize,
    /// `(s_f, x̂₀)` indexed by `class * n_nodes + node`.
    pub f_ends: Vec<(f64, f64)>,
    /// `(s_F, χ₀)` per node.
    pub g_ends: Vec<(f64, f64)>,
}

/// Traces every characteristic of the grid in parallel and maps each one
/// through `visit`, returning results in node order.
///
/// `classes` lists the ensemble values for which f-curves are needed.
pub fn map_f_curves<T: Send>(
    speeds: &dyn Speeds,
    grid: &GridSpec,
    classes: &[f64],
    step: f64,
    visit: impl Fn(usize, usize, &CharCrossing) -> T + Sync,
) -> Result<Vec<T>> {
    let tri = grid.tri();
    let n = tri.len();
    (0..classes.len() * n)
        .into_par_iter()
        .map(|k| {
            let (c, node) = (k / n, k % n);
            let (i, j) = tri.node(node);
            let curve = trace_f_curve(speeds, grid.x(i), grid.x(j), classes[c], step)?;
            Ok(visit(c, node, &curve))
        })
        .collect()
}

/// Same as [`map_f_curves`] for the g-family.
pub fn map_g_curves<T: Send>(
    speeds: &dyn Speeds,
    grid: &GridSpec,
    step: f64,
    visit: impl Fn(usize, &CharCrossing) -> T + Sync,
) -> Result<Vec<T>> {
    let tri = grid.tri();
    (0..tri.len())
        .into_par_iter()
        .map(|node| {
            let (i, j) = tri.node(node);
            let curve = trace_g_curve(speeds, grid.x(i), grid.x(j), step)?;
            Ok(visit(node, &curve))
        })
        .collect()
}

impl CurveCache {
    pub fn build(
        speeds: &dyn Speeds,
        grid: &GridSpec,
        varies_in_y: bool,
        step: f64,
    ) -> Result<Self> {
        let classes: Vec<f64> = if varies_in_y {
            grid.y_nodes()
        } else {
            vec![0.0]
        };
        let f_ends = map_f_curves(speeds, grid, &classes, step, |_, _, c| (c.s_end, c.launch))?;
        let g_ends = map_g_curves(speeds, grid, step, |_, c| (c.s_end, c.launch))?;
        Ok(Self {
            nx: grid.nx,
            classes: classes.len(),
            f_ends,
            g_ends,
        })
    }
}
