//! Volterra operators on the triangle: resolvent kernels, the cascade
//! kernel κ and the operator `C(x, ξ)` of the target system, and the
//! kernels of the inverse transformation.
//!
//! Integrals over `[ξ, x]` use [`VolterraRule`], a trapezoid rule with
//! Gregory end corrections on the grid nodes.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{trapezoid_weights, weighted_dot, TriField};

/// Gregory end-correction coefficients.
const GREGORY: [f64; 4] = [1.0 / 12.0, 1.0 / 24.0, 19.0 / 720.0, 3.0 / 160.0];

/// Maximum number of iterated kernels summed by [`resolvent`].
pub const MAX_TERMS: usize = 60;

/// Quadrature weights for integrals over `m` grid cells, for every `m`.
///
/// The weights are symmetric under reversal of the interval. Intervals of
/// one cell use the plain trapezoid rule; longer ones add end corrections
/// of order up to `min(m, 4)`.
#[derive(Debug, Clone)]
pub struct VolterraRule {
    pub h: f64,
    weights: Vec<Vec<f64>>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl VolterraRule {
    pub fn new(nx: usize) -> Self {
        let h = 1.0 / nx as f64;
        let weights = (0..=nx)
            .map(|m| Self::cell_weights(m).into_iter().map(|w| w * h).collect())
            .collect();
        Self { h, weights }
    }

    /// Weights in units of the cell width.
    fn cell_weights(m: usize) -> Vec<f64> {
        if m == 0 {
            return vec![0.0];
        }
        let mut w = vec![1.0; m + 1];
        w[0] = 0.5;
        w[m] = 0.5;
        for (k, g) in GREGORY.iter().enumerate().take(m.min(GREGORY.len())) {
            let k = k + 1;
            if k > m {
                break;
            }
            for i in 0..=k {
                let c = binomial(k, i);
                // Forward difference at the left end, signed (-1)^{k+1}.
                let left = if (k - i) % 2 == 0 { c } else { -c };
                let left = if k % 2 == 1 { left } else { -left };
                w[i] += g * left;
                // Backward difference at the right end, subtracted.
                let right = if i % 2 == 0 { c } else { -c };
                w[m - i] -= g * right;
            }
        }
        w
    }

    /// Weights for an interval of `m` cells.
    #[inline]
    pub fn weights(&self, m: usize) -> &[f64] {
        &self.weights[m]
    }

    /// Largest ratio of absolute weight mass to interval length.
    pub fn inflation(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .skip(1)
            .map(|(m, w)| w.iter().map(|v| v.abs()).sum::<f64>() / (m as f64 * self.h))
            .fold(1.0, f64::max)
    }
}

/// Sum of iterated kernels of `k̃` on the triangle.
#[derive(Debug, Clone)]
pub struct ResolventKernel {
    pub values: TriField,
    pub n_terms_used: usize,
    /// Sup norm of the last term added.
    pub tail_bound: f64,
    /// Sup norm of every term, in order.
    pub term_norms: Vec<f64>,
}

fn check_scalar(kt: &TriField) -> Result<()> {
    if kt.width != 1 {
        return Err(Error::Dimension(format!(
            "scalar kernel expected, got width {}",
            kt.width
        )));
    }
    if !kt.is_finite() {
        return Err(Error::Numeric("kernel has non-finite entries".into()));
    }
    Ok(())
}

/// `k̃^∞ = Σ_n k̃^n` with `k̃¹ = k̃` and
/// `k̃^{n+1}(x, ξ) = ∫_ξ^x k̃(s, ξ) k̃^n(x, s) ds`.
///
/// Terms are added until one has sup norm below `tol` or [`MAX_TERMS`]
/// terms have been used.
pub fn resolvent(ktilde: &TriField, tol: f64) -> Result<ResolventKernel> {
    check_scalar(ktilde)?;
    let nx = ktilde.nx;
    let rule = VolterraRule::new(nx);
    let tri = ktilde.tri();
    let mut sum = ktilde.clone();
    let mut term = ktilde.clone();
    let mut norms = vec![term.sup_norm()];
    while *norms.last().unwrap() >= tol && norms.len() < MAX_TERMS {
        let prev = &term;
        let next: Vec<f64> = (0..tri.len())
            .into_par_iter()
            .map(|node| {
                let (i, j) = tri.node(node);
                let w = rule.weights(i - j);
                (j..=i)
                    .map(|s| w[s - j] * ktilde.data[tri.index(s, j)] * prev.data[tri.index(i, s)])
                    .sum()
            })
            .collect();
        term = TriField {
            nx,
            width: 1,
            data: next,
        };
        if !term.is_finite() {
            return Err(Error::Numeric("iterated kernel overflowed".into()));
        }
        for (a, b) in sum.data.iter_mut().zip(&term.data) {
            *a += b;
        }
        norms.push(term.sup_norm());
    }
    Ok(ResolventKernel {
        values: sum,
        n_terms_used: norms.len(),
        tail_bound: *norms.last().unwrap(),
        term_norms: norms,
    })
}

/// Cascade kernel `κ[x, ξ] = κ₀[x, ξ] + ∫_ξ^x k̃^∞(s, ξ) κ₀[x, s] ds` with
/// `κ₀[x, ξ] = W[x] k̃(x, ξ)`. `w_grid` is `W` sampled as `[x, y]`.
pub fn solve_kappa(w_grid: &Array2<f64>, ktilde: &TriField, tol: f64) -> Result<TriField> {
    check_scalar(ktilde)?;
    let nx = ktilde.nx;
    if w_grid.nrows() != nx + 1 {
        return Err(Error::Dimension(format!(
            "W has {} rows, expected {}",
            w_grid.nrows(),
            nx + 1
        )));
    }
    let res = resolvent(ktilde, tol)?;
    let rule = VolterraRule::new(nx);
    let tri = ktilde.tri();
    let ny = w_grid.ncols();
    // κ factors as W[x] ρ(x, ξ) because κ₀ does.
    let rho: Vec<f64> = (0..tri.len())
        .into_par_iter()
        .map(|node| {
            let (i, j) = tri.node(node);
            let w = rule.weights(i - j);
            ktilde.data[node]
                + (j..=i)
                    .map(|s| {
                        w[s - j] * res.values.data[tri.index(s, j)] * ktilde.data[tri.index(i, s)]
                    })
                    .sum::<f64>()
        })
        .collect();
    Ok(TriField::from_fn(nx, ny, |i, j, l| {
        w_grid[[i, l]] * rho[tri.index(i, j)]
    }))
}

/// `C(x_i, ξ_j){a} = ⟨k[x, ξ], a⟩ W[x] + ∫_ξ^x ⟨k[s, ξ], a⟩ κ[x, s] ds`.
pub fn apply_c(
    kappa: &TriField,
    k: &TriField,
    w_grid: &Array2<f64>,
    x_index: usize,
    xi_index: usize,
    a: &[f64],
) -> Result<Vec<f64>> {
    let ny = k.width;
    if a.len() != ny || kappa.width != ny || w_grid.ncols() != ny {
        return Err(Error::Dimension(
            "ensemble widths of C operands differ".into(),
        ));
    }
    if xi_index > x_index || x_index > k.nx {
        return Err(Error::Domain(format!(
            "node ({x_index}, {xi_index}) is not in the triangle"
        )));
    }
    let wy = trapezoid_weights(ny);
    let rule = VolterraRule::new(k.nx);
    let (i, j) = (x_index, xi_index);
    let head = weighted_dot(&wy, k.at(i, j), a);
    let mut out: Vec<f64> = (0..ny).map(|l| head * w_grid[[i, l]]).collect();
    let w = rule.weights(i - j);
    for s in j..=i {
        let c = w[s - j] * weighted_dot(&wy, k.at(s, j), a);
        for (o, kv) in out.iter_mut().zip(kappa.at(i, s)) {
            *o += c * kv;
        }
    }
    Ok(out)
}

/// Kernels `(l, l̃)` of the inverse transformation: `l̃ = k̃^∞` and
/// `l[x, ξ] = k[x, ξ] + ∫_ξ^x l̃(x, s) k[s, ξ] ds`.
pub fn inverse_transform_kernels(
    k: &TriField,
    ktilde: &TriField,
    tol: f64,
) -> Result<(TriField, TriField)> {
    check_scalar(ktilde)?;
    if k.nx != ktilde.nx {
        return Err(Error::Dimension("kernels live on different grids".into()));
    }
    if !k.is_finite() {
        return Err(Error::Numeric("kernel has non-finite entries".into()));
    }
    let lt = resolvent(ktilde, tol)?.values;
    let rule = VolterraRule::new(k.nx);
    let tri = k.tri();
    let ny = k.width;
    let rows: Vec<Vec<f64>> = (0..tri.len())
        .into_par_iter()
        .map(|node| {
            let (i, j) = tri.node(node);
            let w = rule.weights(i - j);
            let mut out = k.at(i, j).to_vec();
            for s in j..=i {
                let c = w[s - j] * lt.data[tri.index(i, s)];
                if c != 0.0 {
                    for (o, kv) in out.iter_mut().zip(k.at(s, j)) {
                        *o += c * kv;
                    }
                }
            }
            out
        })
        .collect();
    let mut l = TriField::zeros(k.nx, ny);
    for (node, row) in rows.into_iter().enumerate() {
        l.data[node * ny..(node + 1) * ny].copy_from_slice(&row);
    }
    Ok((l, lt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials() {
        for m in 1..14 {
            let rule = VolterraRule::new(m);
            let w = rule.weights(m);
            let exact_to = match m {
                1 => 1,
                2 | 3 => 3,
                _ => 5,
            };
            for p in 0..=exact_to {
                let q: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * (k as f64 * rule.h).powi(p))
                    .sum();
                assert!(
                    (q - 1.0 / (p + 1) as f64).abs() < 1e-13,
                    "m={m} p={p} got {q}"
                );
            }
            let rev: Vec<f64> = w.iter().rev().copied().collect();
            assert!(w.iter().zip(&rev).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_kernel_resolvent() {
        let z = TriField::zeros(10, 1);
        let r = resolvent(&z, 1e-12).unwrap();
        assert_eq!(r.n_terms_used, 1);
        assert_eq!(r.values.sup_norm(), 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut z = TriField::zeros(4, 1);
        z.data[3] = f64::NAN;
        assert!(matches!(resolvent(&z, 1e-12), Err(Error::Numeric(_))));
    }

    #[test]
    fn c_rejects_upper_triangle() {
        let k = TriField::zeros(4, 3);
        let w = Array2::zeros((5, 3));
        assert!(matches!(
            apply_c(&k, &k, &w, 1, 2, &[0.0; 3]),
            Err(Error::Domain(_))
        ));
    }
}
