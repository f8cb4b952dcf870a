//! Uniform grids on the unit square, storage for fields on the triangle
//! `0 <= xi <= x <= 1`, trapezoid quadrature and triangle interpolation.

use crate::error::{Error, Result};

/// Resolution and time stepping parameters.
///
/// The spatial grid is `x_i = i / nx` for `i = 0..=nx` and the ensemble
/// grid is `y_j = j / (ny - 1)` for `j = 0..ny`, so both include their
/// endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub t_final: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dt: f64, t_final: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!(
                "need nx >= 2 and ny >= 2, got nx = {nx}, ny = {ny}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::Config(format!(
                "t_final must be positive, got {t_final}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            dt,
            t_final,
        })
    }

    /// Grid for quantities that do not evolve in time.
    pub fn spatial(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, 1.0)
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / (self.ny - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.nx as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 / (self.ny - 1) as f64
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..=self.nx).map(|i| self.x(i)).collect()
    }

    pub fn y_nodes(&self) -> Vec<f64> {
        (0..self.ny).map(|j| self.y(j)).collect()
    }

    /// Number of explicit steps needed to reach `t_final`.
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn tri(&self) -> TriIndex {
        TriIndex { nx: self.nx }
    }
}

/// Row-major enumeration of the triangle nodes `(i, j)` with `j <= i`.
///
/// Row `i` holds `i + 1` entries, so node `(i, j)` sits at
/// `i (i + 1) / 2 + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriIndex {
    pub nx: usize,
}

impl TriIndex {
    pub fn len(&self) -> usize {
        (self.nx + 1) * (self.nx + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i <= self.nx);
        i * (i + 1) / 2 + j
    }

    /// Inverse of [`TriIndex::index`].
    pub fn node(&self, k: usize) -> (usize, usize) {
        let mut i = (((8 * k + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
        while (i + 1) * (i + 2) / 2 <= k {
            i += 1;
        }
        while i * (i + 1) / 2 > k {
            i -= 1;
        }
        (i, k - i * (i + 1) / 2)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..=self.nx).flat_map(|i| (0..=i).map(move |j| (i, j)))
    }
}

/// A field sampled on every triangle node, carrying `width` values per node
/// (one per ensemble point, or one for scalar kernels).
#[derive(Debug, Clone, PartialEq)]
pub struct TriField {
    pub nx: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TriField {
    pub fn zeros(nx: usize, width: usize) -> Self {
        let len = TriIndex { nx }.len() * width;
        Self {
            nx,
            width,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(nx: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(nx, width);
        for (i, j) in out.tri().nodes() {
            let row = out.at_mut(i, j);
            for (l, v) in row.iter_mut().enumerate() {
                *v = f(i, j, l);
            }
        }
        out
    }

    pub fn tri(&self) -> TriIndex {
        TriIndex { nx: self.nx }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let k = self.tri().index(i, j) * self.width;
        &self.data[k..k + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = self.tri().index(i, j) * self.width;
        &mut self.data[k..k + self.width]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.tri().index(i, j) * self.width + l]
    }

    /// All nodes of row `i` (`j = 0..=i`) as one contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let start = self.tri().index(i, 0) * self.width;
        &self.data[start..start + (i + 1) * self.width]
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &TriField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Trapezoid weights for `n` equispaced samples on `[0, 1]`.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// `∫_0^1 f(y) dy` from the `ny` ensemble samples.
pub fn integrate_y(grid: &GridSpec, f: &[f64]) -> Result<f64> {
    if f.len() != grid.ny {
        return Err(Error::Dimension(format!(
            "expected {} ensemble samples, got {}",
            grid.ny,
            f.len()
        )));
    }
    Ok(trapezoid(f, grid.hy()))
}

/// `∫_0^1 f(x) dx` from the `nx + 1` spatial samples.
pub fn integrate_x(grid: &GridSpec, f: &[f64]) -> Result<f64> {
    integrate_x_upto(grid, f, grid.nx)
}

/// `∫_0^{x_i} f(x) dx` using the first `i + 1` spatial samples.
pub fn integrate_x_upto(grid: &GridSpec, f: &[f64], i: usize) -> Result<f64> {
    if f.len() != grid.nx + 1 {
        return Err(Error::Dimension(format!(
            "expected {} spatial samples, got {}",
            grid.nx + 1,
            f.len()
        )));
    }
    if i > grid.nx {
        return Err(Error::Domain(format!(
            "upper index {i} exceeds nx = {}",
            grid.nx
        )));
    }
    Ok(trapezoid(&f[..=i], grid.hx()))
}

/// Composite trapezoid rule over equispaced samples.
pub fn trapezoid(f: &[f64], h: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = f[1..n - 1].iter().sum();
            h * (inner + 0.5 * (f[0] + f[n - 1]))
        }
    }
}

/// `∫ a b dy` with trapezoid weights `w`.
#[inline]
pub fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Interpolation weights for a point of the triangle: up to four
/// `(node index, weight)` pairs, unused slots have weight zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriStencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

/// Slack allowed outside the unit square before a query is rejected.
const EDGE_SLACK: f64 = 1e-9;

/// Locates `(x, xi)` on the triangle grid.
///
/// Interior cells use bilinear weights. A cell cut by the diagonal keeps
/// only its lower half, where the weights are barycentric (linear). Points
/// marginally outside the triangle are clamped onto it.
pub fn tri_stencil(nx: usize, x: f64, xi: f64) -> Result<TriStencil> {
    let inside = |v: f64| v.is_finite() && (-EDGE_SLACK..=1.0 + EDGE_SLACK).contains(&v);
    if !inside(x) || !inside(xi) {
        return Err(Error::Domain(format!(
            "query ({x}, {xi}) outside the unit square"
        )));
    }
    let x = x.clamp(0.0, 1.0);
    let xi = xi.clamp(0.0, x);
    let n = nx as f64;
    let i0 = ((x * n).floor() as usize).min(nx - 1);
    let j0 = ((xi * n).floor() as usize).min(i0);
    let tx = (x * n - i0 as f64).clamp(0.0, 1.0);
    let tz = (xi * n - j0 as f64).clamp(0.0, 1.0);
    let tri = TriIndex { nx };
    if j0 < i0 {
        Ok(TriStencil {
            nodes: [
                tri.index(i0, j0),
                tri.index(i0 + 1, j0),
                tri.index(i0, j0 + 1),
                tri.index(i0 + 1, j0 + 1),
            ],
            weights: [
                (1.0 - tx) * (1.0 - tz),
                tx * (1.0 - tz),
                (1.0 - tx) * tz,
                tx * tz,
            ],
        })
    } else {
        let tz = tz.min(tx);
        Ok(TriStencil {
            nodes: [
                tri.index(i0, i0),
                tri.index(i0 + 1, i0),
                tri.index(i0 + 1, i0 + 1),
                0,
            ],
            weights: [1.0 - tx, tx - tz, tz, 0.0],
        })
    }
}

/// Value of component `l` of `field` at an arbitrary point of the triangle.
pub fn bilinear_tri(field: &TriField, x: f64, xi: f64, l: usize) -> Result<f64> {
    if l >= field.width {
        return Err(Error::Dimension(format!(
            "component {l} of a field of width {}",
            field.width
        )));
    }
    let st = tri_stencil(field.nx, x, xi)?;
    Ok(st
        .nodes
        .iter()
        .zip(st.weights)
        .map(|(&k, w)| {
            if w == 0.0 {
                0.0
            } else {
                w * field.data[k * field.width + l]
            }
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(matches!(
            GridSpec::new(1, 10, 0.1, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GridSpec::new(10, 1, 0.1, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GridSpec::new(10, 10, 0.0, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GridSpec::new(10, 10, 0.1, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn node_roundtrip() {
        let t = TriIndex { nx: 17 };
        for (k, (i, j)) in t.nodes().enumerate() {
            assert_eq!(t.index(i, j), k);
            assert_eq!(t.node(k), (i, j));
        }
        assert_eq!(t.nodes().count(), t.len());
    }

    #[test]
    fn y_quadrature_of_oscillating_profile() {
        let g = GridSpec::spatial(10, 120).unwrap();
        let f: Vec<f64> = g
            .y_nodes()
            .iter()
            .map(|y| y * (y - 1.0) * (2.0 * PI * y).cos())
            .collect();
        let v = integrate_y(&g, &f).unwrap();
        assert!((v - 1.0 / (2.0 * PI * PI)).abs() < 1e-4);
    }

    #[test]
    fn x_quadrature() {
        let g = GridSpec::spatial(200, 3).unwrap();
        let f: Vec<f64> = g.x_nodes().iter().map(|x| x.exp()).collect();
        assert!((integrate_x(&g, &f).unwrap() - (1f64.exp() - 1.0)).abs() < 1e-4);
        let lin: Vec<f64> = g.x_nodes();
        assert!((integrate_x_upto(&g, &lin, 100).unwrap() - 0.125).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let g = GridSpec::spatial(10, 5).unwrap();
        assert!(matches!(
            integrate_y(&g, &[1.0; 4]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            integrate_x(&g, &[1.0; 10]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilinear_cell_centre_of_product() {
        let nx = 8;
        let g = GridSpec::spatial(nx, 2).unwrap();
        let f = TriField::from_fn(nx, 1, |i, j, _| g.x(i) * g.x(j));
        let (x, xi) = (g.x(5) + 0.5 * g.hx(), g.x(2) + 0.5 * g.hx());
        assert!((bilinear_tri(&f, x, xi, 0).unwrap() - x * xi).abs() < 1e-14);
    }

    #[test]
    fn bilinear_rejects_points_off_the_square() {
        let f = TriField::zeros(4, 1);
        assert!(matches!(
            bilinear_tri(&f, 1.2, 0.1, 0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            bilinear_tri(&f, 0.5, -0.1, 0),
            Err(Error::Domain(_))
        ));
    }
}
