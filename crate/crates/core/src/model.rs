//! Plant coefficients, their grid samples and the built-in models.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::{trapezoid_weights, GridSpec, TriField};

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Fn3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Coefficients of the ensemble plant
///
/// ```text
/// u_t + λ(x,y) u_x = ∫ θ(x,y,η) u(η) dη + W(x,y) v
/// v_t - μ(x) v_x   = ∫ Ξ(x,y) u(y) dy
/// u(t,0,y) = q(y) v(t,0),   v(t,1) = U(t)
/// ```
#[derive(Clone)]
pub struct PlantModel {
    name: String,
    lambda: Fn2,
    mu: Fn1,
    theta: Fn3,
    w: Fn2,
    xi: Fn2,
    q: Fn1,
    lambda_x: Option<Fn2>,
    mu_x: Option<Fn1>,
    lambda_varies_in_y: bool,
    lambda_floor: f64,
    mu_floor: f64,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.name)
            .field("lambda_floor", &self.lambda_floor)
            .field("mu_floor", &self.mu_floor)
            .finish_non_exhaustive()
    }
}

const FLOOR_SAMPLES: usize = 257;

impl PlantModel {
    /// Builds a model from its evaluators. Transport speeds are checked for
    /// positivity on a fine sampling of the unit square.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        lambda: Fn2,
        mu: Fn1,
        theta: Fn3,
        w: Fn2,
        xi: Fn2,
        q: Fn1,
    ) -> Result<Self> {
        let mut m = Self {
            name: name.into(),
            lambda,
            mu,
            theta,
            w,
            xi,
            q,
            lambda_x: None,
            mu_x: None,
            lambda_varies_in_y: true,
            lambda_floor: 0.0,
            mu_floor: 0.0,
        };
        m.refresh_floors()?;
        Ok(m)
    }

    fn refresh_floors(&mut self) -> Result<()> {
        let s = |k: usize| k as f64 / (FLOOR_SAMPLES - 1) as f64;
        let mut lf = f64::INFINITY;
        let mut mf = f64::INFINITY;
        for a in 0..FLOOR_SAMPLES {
            mf = mf.min((self.mu)(s(a)));
            for b in (0..FLOOR_SAMPLES).step_by(8) {
                lf = lf.min((self.lambda)(s(a), s(b)));
            }
        }
        if !(lf > 0.0 && mf > 0.0 && lf.is_finite() && mf.is_finite()) {
            return Err(Error::Config(format!(
                "transport speeds must be positive (min lambda {lf}, min mu {mf})"
            )));
        }
        self.lambda_floor = lf;
        self.mu_floor = mf;
        Ok(())
    }

    /// Supplies `∂λ/∂x`; otherwise it is differenced on the grid.
    pub fn with_lambda_x(mut self, f: Fn2) -> Self {
        self.lambda_x = Some(f);
        self
    }

    /// Supplies `μ'`; otherwise it is differenced on the grid.
    pub fn with_mu_x(mut self, f: Fn1) -> Self {
        self.mu_x = Some(f);
        self
    }

    /// Declares that λ does not depend on y, so one characteristic per
    /// triangle node serves the whole ensemble.
    pub fn with_lambda_uniform_in_y(mut self) -> Self {
        self.lambda_varies_in_y = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lambda(&self, x: f64, y: f64) -> f64 {
        (self.lambda)(x, y)
    }

    pub fn mu(&self, x: f64) -> f64 {
        (self.mu)(x)
    }

    pub fn theta(&self, x: f64, y: f64, eta: f64) -> f64 {
        (self.theta)(x, y, eta)
    }

    pub fn w(&self, x: f64, y: f64) -> f64 {
        (self.w)(x, y)
    }

    pub fn xi(&self, x: f64, y: f64) -> f64 {
        (self.xi)(x, y)
    }

    pub fn q(&self, y: f64) -> f64 {
        (self.q)(y)
    }

    pub fn lambda_varies_in_y(&self) -> bool {
        self.lambda_varies_in_y
    }

    pub fn lambda_floor(&self) -> f64 {
        self.lambda_floor
    }

    pub fn mu_floor(&self) -> f64 {
        self.mu_floor
    }

    /// Multiplies the coefficients by the given factors.
    pub fn scaled(&self, s: &ModelScales) -> Result<Self> {
        if s.is_identity() {
            return Ok(self.clone());
        }
        let ModelScales {
            lambda: sl,
            mu: sm,
            theta: st,
            w: sw,
            xi: sx,
            q: sq,
        } = *s;
        let (lambda, mu, theta, w, xi, q) = (
            self.lambda.clone(),
            self.mu.clone(),
            self.theta.clone(),
            self.w.clone(),
            self.xi.clone(),
            self.q.clone(),
        );
        let mut m = Self::new(
            format!("{}*", self.name),
            Arc::new(move |x, y| sl * lambda(x, y)),
            Arc::new(move |x| sm * mu(x)),
            Arc::new(move |x, y, e| st * theta(x, y, e)),
            Arc::new(move |x, y| sw * w(x, y)),
            Arc::new(move |x, y| sx * xi(x, y)),
            Arc::new(move |y| sq * q(y)),
        )?;
        if let Some(lx) = self.lambda_x.clone() {
            m.lambda_x = Some(Arc::new(move |x, y| sl * lx(x, y)));
        }
        if let Some(mx) = self.mu_x.clone() {
            m.mu_x = Some(Arc::new(move |x| sm * mx(x)));
        }
        m.lambda_varies_in_y = self.lambda_varies_in_y;
        Ok(m)
    }

    /// Samples every coefficient on the grid.
    pub fn sample(&self, grid: &GridSpec) -> Result<SampledCoefficients> {
        let (nx, ny) = (grid.nx, grid.ny);
        let xs = grid.x_nodes();
        let ys = grid.y_nodes();
        let lambda = Array2::from_shape_fn((nx + 1, ny), |(i, l)| self.lambda(xs[i], ys[l]));
        let mu = Array1::from_shape_fn(nx + 1, |i| self.mu(xs[i]));
        let theta = Array3::from_shape_fn((nx + 1, ny, ny), |(i, l, m)| {
            self.theta(xs[i], ys[l], ys[m])
        });
        let w = Array2::from_shape_fn((nx + 1, ny), |(i, l)| self.w(xs[i], ys[l]));
        let xi = Array2::from_shape_fn((nx + 1, ny), |(i, l)| self.xi(xs[i], ys[l]));
        let q = Array1::from_shape_fn(ny, |l| self.q(ys[l]));
        let lambda_x = match &self.lambda_x {
            Some(f) => Array2::from_shape_fn((nx + 1, ny), |(i, l)| f(xs[i], ys[l])),
            None => {
                let mut d = Array2::zeros((nx + 1, ny));
                for l in 0..ny {
                    let col: Vec<f64> = (0..=nx).map(|i| lambda[[i, l]]).collect();
                    for (i, v) in grid_derivative(&col, grid.hx()).into_iter().enumerate() {
                        d[[i, l]] = v;
                    }
                }
                d
            }
        };
        let mu_x = match &self.mu_x {
            Some(f) => Array1::from_shape_fn(nx + 1, |i| f(xs[i])),
            None => Array1::from(grid_derivative(mu.as_slice().unwrap(), grid.hx())),
        };

        let all = [&lambda, &w, &xi, &lambda_x];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite()))
            || theta
                .iter()
                .chain(mu.iter())
                .chain(q.iter())
                .chain(mu_x.iter())
                .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "model '{}' produced non-finite samples",
                self.name
            )));
        }
        let fold =
            |it: &mut dyn Iterator<Item = f64>, init: f64, f: fn(f64, f64) -> f64| it.fold(init, f);
        let lambda_min = fold(&mut lambda.iter().copied(), f64::INFINITY, f64::min);
        let lambda_max = fold(&mut lambda.iter().copied(), 0.0, f64::max);
        let mu_min = fold(&mut mu.iter().copied(), f64::INFINITY, f64::min);
        let mu_max = fold(&mut mu.iter().copied(), 0.0, f64::max);
        if !(lambda_min > 0.0 && mu_min > 0.0) {
            return Err(Error::Config(
                "transport speeds must be positive on the grid".into(),
            ));
        }
        Ok(SampledCoefficients {
            grid: *grid,
            y_weights: trapezoid_weights(ny),
            lambda,
            mu,
            theta,
            w,
            xi,
            q,
            lambda_x,
            mu_x,
            lambda_min,
            lambda_max,
            mu_min,
            mu_max,
        })
    }
}

/// Centred differences inside, one-sided second order at both ends.
fn grid_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    if n < 3 {
        let s = (f[n - 1] - f[0]) / h;
        return vec![s; n];
    }
    for i in 1..n - 1 {
        d[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
    d[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h);
    d
}

/// Multiplicative factors applied to a built-in model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelScales {
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub w: f64,
    pub xi: f64,
    pub q: f64,
}

impl Default for ModelScales {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            theta: 1.0,
            w: 1.0,
            xi: 1.0,
            q: 1.0,
        }
    }
}

impl ModelScales {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Grid samples of a [`PlantModel`].
///
/// Two-dimensional arrays are indexed `[x index, y index]`, `theta` is
/// `[x, y, η]`.
#[derive(Debug, Clone)]
pub struct SampledCoefficients {
    pub grid: GridSpec,
    pub y_weights: Vec<f64>,
    pub lambda: Array2<f64>,
    pub mu: Array1<f64>,
    pub theta: Array3<f64>,
    pub w: Array2<f64>,
    pub xi: Array2<f64>,
    pub q: Array1<f64>,
    pub lambda_x: Array2<f64>,
    pub mu_x: Array1<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

impl SampledCoefficients {
    pub fn max_speed(&self) -> f64 {
        self.lambda_max.max(self.mu_max)
    }
}

fn check_len(coeff: &SampledCoefficients, x_index: usize, a: &[f64]) -> Result<()> {
    let g = &coeff.grid;
    if x_index > g.nx {
        return Err(Error::Domain(format!(
            "x index {x_index} exceeds nx = {}",
            g.nx
        )));
    }
    if a.len() != g.ny {
        return Err(Error::Dimension(format!(
            "expected {} ensemble samples, got {}",
            g.ny,
            a.len()
        )));
    }
    Ok(())
}

/// `Θ(x_i){a}(y) = ∫ θ(x_i, y, η) a(η) dη`.
pub fn apply_theta(coeff: &SampledCoefficients, x_index: usize, a: &[f64]) -> Result<Vec<f64>> {
    check_len(coeff, x_index, a)?;
    let wa: Vec<f64> = a.iter().zip(&coeff.y_weights).map(|(a, w)| a * w).collect();
    let th = coeff.theta.index_axis(ndarray::Axis(0), x_index);
    Ok(th
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&wa).map(|(t, v)| t * v).sum())
        .collect())
}

/// Adjoint of [`apply_theta`]: `∫ θ(x_i, η, y) a(η) dη`.
pub fn apply_theta_transpose(
    coeff: &SampledCoefficients,
    x_index: usize,
    a: &[f64],
) -> Result<Vec<f64>> {
    check_len(coeff, x_index, a)?;
    let wa: Vec<f64> = a.iter().zip(&coeff.y_weights).map(|(a, w)| a * w).collect();
    let th = coeff.theta.index_axis(ndarray::Axis(0), x_index);
    Ok(th
        .columns()
        .into_iter()
        .map(|c| c.iter().zip(&wa).map(|(t, v)| t * v).sum())
        .collect())
}

/// Exponent rate of the toy kernels.
pub const TOY_RATE: f64 = 35.0 / (PI * PI);

/// The worked example: unit speeds, and couplings that make the open loop
/// unstable while admitting kernels in closed form.
pub fn toy_model() -> PlantModel {
    PlantModel::new(
        "toy",
        Arc::new(|_, _| 1.0),
        Arc::new(|_| 1.0),
        Arc::new(|x, y, eta| x.powi(3) * (x + 1.0) * (y - 0.5) * (eta - 0.5)),
        Arc::new(|x, y| x * (x + 1.0) * (y - 0.5) * x.exp()),
        Arc::new(|x, y| -70.0 * (TOY_RATE * x).exp() * y * (y - 1.0)),
        Arc::new(|y| (2.0 * PI * y).cos()),
    )
    .expect("toy speeds are positive")
    .with_lambda_x(Arc::new(|_, _| 0.0))
    .with_mu_x(Arc::new(|_| 0.0))
    .with_lambda_uniform_in_y()
}

/// Unit speeds and no coupling at all.
pub fn pure_transport_model() -> PlantModel {
    PlantModel::new(
        "pure-transport",
        Arc::new(|_, _| 1.0),
        Arc::new(|_| 1.0),
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _| 0.0),
        Arc::new(|_, _| 0.0),
        Arc::new(|_| 0.0),
    )
    .expect("unit speeds are positive")
    .with_lambda_x(Arc::new(|_, _| 0.0))
    .with_mu_x(Arc::new(|_| 0.0))
    .with_lambda_uniform_in_y()
}

/// Speeds that vary in x and across the ensemble, with mild couplings.
pub fn varying_speed_model() -> PlantModel {
    PlantModel::new(
        "varying-speed",
        Arc::new(|x, y| (1.0 + 0.5 * y) * (1.0 + 0.25 * x)),
        Arc::new(|x| 1.0 + 0.5 * x),
        Arc::new(|x, y, eta| 0.5 * x * (y - 0.5) * (eta - 0.5)),
        Arc::new(|x, y| 0.5 * x * (y - 0.5)),
        Arc::new(|x, y| -2.0 * (1.0 + x) * y * (1.0 - y)),
        Arc::new(|y| 0.5 + 0.5 * (PI * y).cos()),
    )
    .expect("speeds are positive")
    .with_lambda_x(Arc::new(|_, y| 0.25 * (1.0 + 0.5 * y)))
    .with_mu_x(Arc::new(|_| 0.5))
}

pub const BUILTIN_MODELS: [&str; 3] = ["toy", "pure-transport", "varying-speed"];

pub fn builtin_model(name: &str) -> Result<PlantModel> {
    match name {
        "toy" => Ok(toy_model()),
        "pure-transport" => Ok(pure_transport_model()),
        "varying-speed" => Ok(varying_speed_model()),
        other => Err(Error::Config(format!(
            "unknown model '{other}' (known: {})",
            BUILTIN_MODELS.join(", ")
        ))),
    }
}

/// Closed-form kernels of the toy model on the grid.
///
/// `k(x, ξ, y) = 35 y (y - 1) e^{35 ξ / π²}` and `k̃ = 35 / (2π²)`.
pub fn toy_analytic_kernels(grid: &GridSpec) -> (TriField, TriField) {
    let ys = grid.y_nodes();
    let k = TriField::from_fn(grid.nx, grid.ny, |_, j, l| toy_k(grid.x(j), ys[l]));
    let kt = TriField::from_fn(grid.nx, 1, |_, _, _| toy_ktilde());
    (k, kt)
}

pub fn toy_k(xi: f64, y: f64) -> f64 {
    35.0 * y * (y - 1.0) * (TOY_RATE * xi).exp()
}

pub fn toy_ktilde() -> f64 {
    35.0 / (2.0 * PI * PI)
}
