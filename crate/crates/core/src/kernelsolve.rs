//! Successive approximation of the kernel equations along characteristics.
//!
//! [`solve_goursat`] handles the general coupled Goursat system
//!
//! ```text
//! μ(x) F_x - λ(ξ, y) F_ξ = a G + B{F},   F(x, x, y) = f(x, y)
//! μ(x) G_x + μ(ξ) G_ξ    = d G + ⟨e, F⟩, G(x, 0)    = ⟨g[x], F[x, 0]⟩
//! ```
//!
//! on the triangle. Every characteristic is traced once and turned into a
//! sparse quadrature stencil over the grid nodes (trapezoid rule along the
//! stored path, triangle interpolation of the integrand), so a sweep costs
//! one sparse product per node.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::characteristics::{cache_step, map_f_curves, map_g_curves, CharCrossing, Speeds};
use crate::error::{Error, Result};
use crate::grid::{tri_stencil, GridSpec, TriField};
use crate::model::{PlantModel, SampledCoefficients};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 60;

/// Data of a Goursat system; all node-based quantities are evaluated at
/// grid nodes `(x_i, ξ_j)`.
pub trait GoursatProblem: Sync {
    fn grid(&self) -> &GridSpec;
    fn speeds(&self) -> &dyn Speeds;
    /// Largest transport speed, used to size the integration step.
    fn max_speed(&self) -> f64;
    /// Whether the f-characteristics differ between ensemble points.
    fn lambda_varies_in_y(&self) -> bool;
    /// Quadrature weights over the ensemble.
    fn y_weights(&self) -> &[f64];
    fn a(&self, i: usize, j: usize, out: &mut [f64]);
    fn d(&self, i: usize, j: usize) -> f64;
    fn e(&self, i: usize, j: usize, out: &mut [f64]);
    /// Applies `B(x_i, ξ_j)` to the rows of `fields`, which hold `F` at the
    /// nodes `i = j..=nx` of column `j`.
    fn apply_b(&self, j: usize, fields: ArrayView2<f64>, out: ArrayViewMut2<f64>);
    /// Diagonal data `f(x, y_l)`.
    fn f(&self, x: f64, l: usize) -> f64;
    /// Boundary weight `g[x]` over the ensemble.
    fn g(&self, x: f64, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoursatOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Upper bound on the characteristic integration step.
    pub step: Option<f64>,
}

impl Default for GoursatOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GoursatSolution {
    /// `F` with one value per ensemble point.
    pub f: TriField,
    /// Scalar `G`.
    pub g: TriField,
    pub iterations: usize,
    pub final_delta: f64,
    /// Sup-norm increment of every sweep.
    pub deltas: Vec<f64>,
}

/// Compressed-row storage of path quadrature stencils.
struct Stencils {
    offsets: Vec<usize>,
    nodes: Vec<u32>,
    weights: Vec<f64>,
}

impl Stencils {
    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for r in rows {
            for (n, w) in r {
                nodes.push(n);
                weights.push(w);
            }
            offsets.push(nodes.len());
        }
        Self {
            offsets,
            nodes,
            weights,
        }
    }

    #[inline]
    fn row(&self, k: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        (&self.nodes[a..b], &self.weights[a..b])
    }
}

/// Trapezoid rule along a traced path, with the integrand interpolated
/// from the grid nodes. Returns merged `(node, weight)` pairs.
fn path_stencil(nx: usize, c: &CharCrossing) -> Result<Vec<(u32, f64)>> {
    let s = &c.path_s;
    let n = s.len();
    let mut acc: Vec<(u32, f64)> = Vec::with_capacity(4 * n);
    for m in 0..n {
        let left = if m > 0 { s[m] - s[m - 1] } else { 0.0 };
        let right = if m + 1 < n { s[m + 1] - s[m] } else { 0.0 };
        let wm = 0.5 * (left + right);
        if wm == 0.0 {
            continue;
        }
        let st = tri_stencil(nx, c.path_x[m], c.path_xi[m])?;
        for (node, w) in st.nodes.iter().zip(st.weights) {
            if w != 0.0 {
                acc.push((*node as u32, wm * w));
            }
        }
    }
    acc.sort_by_key(|p| p.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(acc.len() / 2 + 1);
    for (node, w) in acc {
        match merged.last_mut() {
            Some(last) if last.0 == node => last.1 += w,
            _ => merged.push((node, w)),
        }
    }
    Ok(merged)
}

/// Solves the Goursat system by Jacobi-type successive approximation,
/// starting from `F = G = 0`.
pub fn solve_goursat(p: &dyn GoursatProblem, opts: &GoursatOptions) -> Result<GoursatSolution> {
    if opts.tol.is_nan() || opts.tol <= 0.0 || opts.max_iter == 0 {
        return Err(Error::Config(
            "tolerance and iteration cap must be positive".into(),
        ));
    }
    let grid = *p.grid();
    let (nx, ny) = (grid.nx, grid.ny);
    let tri = grid.tri();
    let n = tri.len();
    let step = cache_step(&grid, p.max_speed(), opts.step);
    let speeds = p.speeds();

    let class_y: Vec<f64> = if p.lambda_varies_in_y() {
        grid.y_nodes()
    } else {
        vec![0.0]
    };
    let classes = class_y.len();
    let f_raw = map_f_curves(speeds, &grid, &class_y, step, |_, _, c| {
        path_stencil(nx, c).map(|st| (c.launch, st))
    })?;
    let mut launches = Vec::with_capacity(f_raw.len());
    let mut rows = Vec::with_capacity(f_raw.len());
    for r in f_raw {
        let (x0, st) = r?;
        launches.push(x0);
        rows.push(st);
    }
    let f_st = Stencils::from_rows(rows);

    let g_raw = map_g_curves(speeds, &grid, step, |_, c| {
        path_stencil(nx, c).map(|st| (c.launch, st))
    })?;
    let mut chi0 = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for r in g_raw {
        let (c0, st) = r?;
        chi0.push(c0);
        rows.push(st);
    }
    let g_st = Stencils::from_rows(rows);
    // Linear interpolation of the edge value at χ₀.
    let edge: Vec<(usize, f64)> = chi0
        .iter()
        .map(|&c| {
            let t = c.clamp(0.0, 1.0) * nx as f64;
            let i0 = (t.floor() as usize).min(nx - 1);
            (i0, t - i0 as f64)
        })
        .collect();

    // Diagonal data carried along each f-curve.
    let mut base = TriField::zeros(nx, ny);
    for node in 0..n {
        let row = &mut base.data[node * ny..(node + 1) * ny];
        for (l, v) in row.iter_mut().enumerate() {
            let c = if classes == 1 { 0 } else { l };
            *v = p.f(launches[c * n + node], l);
        }
    }
    let mut g_x = vec![0.0; (nx + 1) * ny];
    for i in 0..=nx {
        p.g(grid.x(i), &mut g_x[i * ny..(i + 1) * ny]);
    }
    let wy = p.y_weights();

    let mut f = TriField::zeros(nx, ny);
    let mut g = TriField::zeros(nx, 1);
    let mut deltas = Vec::new();
    for iteration in 1..=opts.max_iter {
        let h = integrand_f(p, &f, &g);

        let mut f_new = base.clone();
        f_new
            .data
            .par_chunks_mut(ny)
            .enumerate()
            .for_each(|(node, out)| {
                if classes == 1 {
                    let (nodes, ws) = f_st.row(node);
                    for (&nd, &w) in nodes.iter().zip(ws) {
                        let src = &h.data[nd as usize * ny..(nd as usize + 1) * ny];
                        for (o, s) in out.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                } else {
                    for (l, o) in out.iter_mut().enumerate() {
                        let (nodes, ws) = f_st.row(l * n + node);
                        *o += nodes
                            .iter()
                            .zip(ws)
                            .map(|(&nd, &w)| w * h.data[nd as usize * ny + l])
                            .sum::<f64>();
                    }
                }
            });

        let j_int: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|node| {
                let (i, j) = tri.node(node);
                let mut e = vec![0.0; ny];
                p.e(i, j, &mut e);
                let fe: f64 = f
                    .at(i, j)
                    .iter()
                    .zip(&e)
                    .zip(wy)
                    .map(|((a, b), w)| a * b * w)
                    .sum();
                p.d(i, j) * g.data[node] + fe
            })
            .collect();
        let phi: Vec<f64> = (0..=nx)
            .map(|i| {
                let fr = f_new.at(i, 0);
                (0..ny).map(|l| wy[l] * g_x[i * ny + l] * fr[l]).sum()
            })
            .collect();
        let g_new_data: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|node| {
                let (i0, t) = edge[node];
                let b = (1.0 - t) * phi[i0] + t * phi[i0 + 1];
                let (nodes, ws) = g_st.row(node);
                b + nodes
                    .iter()
                    .zip(ws)
                    .map(|(&nd, &w)| w * j_int[nd as usize])
                    .sum::<f64>()
            })
            .collect();
        let g_new = TriField {
            nx,
            width: 1,
            data: g_new_data,
        };

        if !(f_new.is_finite() && g_new.is_finite()) {
            return Err(Error::Numeric(format!(
                "kernel iterate became non-finite at sweep {iteration}"
            )));
        }
        let delta = f_new.max_abs_diff(&f).max(g_new.max_abs_diff(&g));
        deltas.push(delta);
        f = f_new;
        g = g_new;
        if delta < opts.tol {
            return Ok(GoursatSolution {
                f,
                g,
                iterations: iteration,
                final_delta: delta,
                deltas,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        delta: *deltas.last().unwrap(),
    })
}

/// `a G + B{F}` at every node.
fn integrand_f(p: &dyn GoursatProblem, f: &TriField, g: &TriField) -> TriField {
    let nx = f.nx;
    let ny = f.width;
    let cols: Vec<Array2<f64>> = (0..=nx)
        .into_par_iter()
        .map(|j| {
            let rows = nx - j + 1;
            let mut fields = Array2::zeros((rows, ny));
            for (r, mut row) in fields.axis_iter_mut(Axis(0)).enumerate() {
                row.as_slice_mut().unwrap().copy_from_slice(f.at(j + r, j));
            }
            let mut out = Array2::zeros((rows, ny));
            p.apply_b(j, fields.view(), out.view_mut());
            let mut a = vec![0.0; ny];
            for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let gv = g.get(j + r, j, 0);
                if gv != 0.0 {
                    p.a(j + r, j, &mut a);
                    for (o, av) in row.iter_mut().zip(&a) {
                        *o += av * gv;
                    }
                }
            }
            out
        })
        .collect();
    let mut h = TriField::zeros(nx, ny);
    for (j, col) in cols.into_iter().enumerate() {
        for (r, row) in col.axis_iter(Axis(0)).enumerate() {
            h.at_mut(j + r, j).copy_from_slice(row.as_slice().unwrap());
        }
    }
    h
}

/// The kernel equations of the plant written as a Goursat system.
pub struct KernelProblem<'a> {
    pub model: &'a PlantModel,
    pub coeff: &'a SampledCoefficients,
    ys: Vec<f64>,
    g0: Vec<f64>,
}

impl<'a> KernelProblem<'a> {
    pub fn new(model: &'a PlantModel, coeff: &'a SampledCoefficients) -> Self {
        let ys = coeff.grid.y_nodes();
        let mu0 = model.mu(0.0);
        let g0 = ys
            .iter()
            .map(|&y| model.lambda(0.0, y) * model.q(y) / mu0)
            .collect();
        Self {
            model,
            coeff,
            ys,
            g0,
        }
    }
}

impl GoursatProblem for KernelProblem<'_> {
    fn grid(&self) -> &GridSpec {
        &self.coeff.grid
    }
    fn speeds(&self) -> &dyn Speeds {
        self.model
    }
    fn max_speed(&self) -> f64 {
        self.coeff.max_speed()
    }
    fn lambda_varies_in_y(&self) -> bool {
        self.model.lambda_varies_in_y()
    }
    fn y_weights(&self) -> &[f64] {
        &self.coeff.y_weights
    }
    fn a(&self, _i: usize, j: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.coeff.xi.row(j)) {
            *o = *v;
        }
    }
    fn d(&self, _i: usize, j: usize) -> f64 {
        -self.coeff.mu_x[j]
    }
    fn e(&self, _i: usize, j: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.coeff.w.row(j)) {
            *o = *v;
        }
    }
    fn apply_b(&self, j: usize, fields: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        // Θᵀ(ξ_j){F}(y) = ∫ θ(ξ_j, η, y) F(η) dη, plus λ_x(ξ_j, y) F(y).
        let wy = ndarray::ArrayView1::from(&self.coeff.y_weights[..]);
        let weighted = &fields * &wy;
        let theta = self.coeff.theta.index_axis(Axis(0), j);
        out.assign(&weighted.dot(&theta));
        out += &(&fields * &self.coeff.lambda_x.row(j));
    }
    fn f(&self, x: f64, l: usize) -> f64 {
        let y = self.ys[l];
        -self.model.xi(x, y) / (self.model.lambda(x, y) + self.model.mu(x))
    }
    fn g(&self, _x: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.g0);
    }
}

/// Backstepping kernels and the feedback gains they define.
#[derive(Debug, Clone)]
pub struct KernelSolution {
    pub grid: GridSpec,
    /// `k(x, ξ, y)`.
    pub k: TriField,
    /// `k̃(x, ξ)`.
    pub ktilde: TriField,
    pub iterations: usize,
    pub final_delta: f64,
    pub deltas: Vec<f64>,
    /// `k(1, ξ_j, y_l)` as `[j, l]`.
    pub gain_u: Array2<f64>,
    /// `k̃(1, ξ_j)`.
    pub gain_v: Vec<f64>,
}

impl KernelSolution {
    /// Wraps kernels computed elsewhere (for instance in closed form).
    pub fn from_kernels(grid: GridSpec, k: TriField, ktilde: TriField) -> Result<Self> {
        if k.nx != grid.nx || ktilde.nx != grid.nx || k.width != grid.ny || ktilde.width != 1 {
            return Err(Error::Dimension(
                "kernel fields do not match the grid".into(),
            ));
        }
        let nx = grid.nx;
        let gain_u = Array2::from_shape_fn((nx + 1, grid.ny), |(j, l)| k.get(nx, j, l));
        let gain_v = (0..=nx).map(|j| ktilde.get(nx, j, 0)).collect();
        Ok(Self {
            grid,
            k,
            ktilde,
            iterations: 0,
            final_delta: 0.0,
            deltas: Vec::new(),
            gain_u,
            gain_v,
        })
    }
}

/// Solves the kernel equations of `model` on `grid`.
pub fn solve_backstepping_kernels(
    model: &PlantModel,
    grid: &GridSpec,
    opts: &GoursatOptions,
) -> Result<KernelSolution> {
    let coeff = model.sample(grid)?;
    let problem = KernelProblem::new(model, &coeff);
    let sol = solve_goursat(&problem, opts)?;
    let mut out = KernelSolution::from_kernels(*grid, sol.f, sol.g)?;
    out.iterations = sol.iterations;
    out.final_delta = sol.final_delta;
    out.deltas = sol.deltas;
    Ok(out)
}

/// Finite-difference residuals of the kernel equations.
///
/// Absolute values are sup norms over interior nodes; relative values are
/// divided by the sup norm of the corresponding kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KernelResidual {
    pub k_abs: f64,
    pub ktilde_abs: f64,
    pub k_rel: f64,
    pub ktilde_rel: f64,
}

/// Residuals of both kernel equations from one-sided differences taken
/// upwind along each characteristic family. The first cell next to the
/// diagonal and to the edge `ξ = 0` is left out.
pub fn kernel_pde_residual(
    model: &PlantModel,
    coeff: &SampledCoefficients,
    k: &TriField,
    ktilde: &TriField,
) -> Result<KernelResidual> {
    let grid = coeff.grid;
    let (nx, ny) = (grid.nx, grid.ny);
    if k.nx != nx || k.width != ny || ktilde.nx != nx || ktilde.width != 1 {
        return Err(Error::Dimension(
            "kernel fields do not match the grid".into(),
        ));
    }
    let problem = KernelProblem::new(model, coeff);
    let h = grid.hx();
    let wy = &coeff.y_weights;
    let per_column: Vec<(f64, f64)> = (1..nx.saturating_sub(1))
        .into_par_iter()
        .map(|j| {
            let rows = nx - j + 1;
            let mut fields = Array2::zeros((rows, ny));
            for (r, mut row) in fields.axis_iter_mut(Axis(0)).enumerate() {
                row.as_slice_mut().unwrap().copy_from_slice(k.at(j + r, j));
            }
            let mut bk = Array2::zeros((rows, ny));
            problem.apply_b(j, fields.view(), bk.view_mut());
            let (mut rk, mut rt) = (0.0_f64, 0.0_f64);
            for i in (j + 2)..=nx {
                let kt = ktilde.get(i, j, 0);
                let (mu_x, mu_xi) = (coeff.mu[i], coeff.mu[j]);
                for l in 0..ny {
                    let dx = (k.get(i, j, l) - k.get(i - 1, j, l)) / h;
                    let dxi = (k.get(i, j + 1, l) - k.get(i, j, l)) / h;
                    let r = mu_x * dx
                        - coeff.lambda[[j, l]] * dxi
                        - bk[[i - j, l]]
                        - coeff.xi[[j, l]] * kt;
                    rk = rk.max(r.abs());
                }
                let dx = (kt - ktilde.get(i - 1, j, 0)) / h;
                let dxi = (kt - ktilde.get(i, j - 1, 0)) / h;
                let wk: f64 = (0..ny)
                    .map(|l| wy[l] * coeff.w[[j, l]] * k.get(i, j, l))
                    .sum();
                let r = mu_x * dx + mu_xi * dxi + coeff.mu_x[j] * kt - wk;
                rt = rt.max(r.abs());
            }
            (rk, rt)
        })
        .collect();
    let (k_abs, ktilde_abs) = per_column
        .iter()
        .fold((0.0_f64, 0.0_f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let rel = |r: f64, s: f64| if s > 0.0 { r / s } else { r };
    Ok(KernelResidual {
        k_abs,
        ktilde_abs,
        k_rel: rel(k_abs, k.sup_norm()),
        ktilde_rel: rel(ktilde_abs, ktilde.sup_norm()),
    })
}

/// Deviation of computed toy kernels from their closed form: the largest
/// relative error off the lines `y ∈ {0, 1}` (including `k̃`), and the
/// largest absolute error on those lines.
pub fn toy_kernel_error(sol: &KernelSolution) -> (f64, f64) {
    let grid = sol.grid;
    let (ka, kta) = crate::model::toy_analytic_kernels(&grid);
    let ny = grid.ny;
    let mut rel = 0.0_f64;
    let mut edge = 0.0_f64;
    for (num, ex) in sol.k.data.chunks(ny).zip(ka.data.chunks(ny)) {
        for l in 0..ny {
            let err = (num[l] - ex[l]).abs();
            if l == 0 || l == ny - 1 {
                edge = edge.max(err);
            } else {
                rel = rel.max(err / ex[l].abs());
            }
        }
    }
    for (a, b) in sol.ktilde.data.iter().zip(&kta.data) {
        rel = rel.max((a - b).abs() / b.abs());
    }
    (rel, edge)
}
