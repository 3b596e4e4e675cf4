//! Uniform B-spline grids and basis evaluation.
//!
//! A grid with `intervals` uniform cells on `[t_min, t_max]` and degree `k` is
//! extended by `k` knots on each side at the same spacing, giving
//! `intervals + 2k + 1` knots and `intervals + k` basis functions that form a
//! partition of unity on the domain. Inputs outside the domain are clamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported spline degree.
pub const MAX_DEGREE: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub degree: usize,
    pub intervals: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            degree: 3,
            intervals: 5,
            t_min: -1.0,
            t_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct SplineGrid {
    spec: GridSpec,
    spacing: f64,
    knots: Vec<f64>,
}

impl TryFrom<GridSpec> for SplineGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        build_grid(spec.degree, spec.intervals, spec.t_min, spec.t_max)
    }
}

impl From<SplineGrid> for GridSpec {
    fn from(grid: SplineGrid) -> Self {
        grid.spec
    }
}

pub fn build_grid(degree: usize, intervals: usize, t_min: f64, t_max: f64) -> Result<SplineGrid> {
    if degree > MAX_DEGREE {
        return Err(Error::InvalidArgument(format!(
            "spline degree {degree} exceeds maximum {MAX_DEGREE}"
        )));
    }
    if intervals == 0 {
        return Err(Error::InvalidArgument("grid needs at least one interval".into()));
    }
    if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
        return Err(Error::InvalidArgument(format!(
            "invalid grid domain [{t_min}, {t_max}]"
        )));
    }
    let spacing = (t_max - t_min) / intervals as f64;
    let knots = (0..intervals + 2 * degree + 1)
        .map(|n| {
            let offset = n as isize - degree as isize;
            if offset == 0 {
                t_min
            } else if offset == intervals as isize {
                t_max
            } else {
                t_min + offset as f64 * spacing
            }
        })
        .collect();
    Ok(SplineGrid {
        spec: GridSpec {
            degree,
            intervals,
            t_min,
            t_max,
        },
        spacing,
        knots,
    })
}

impl SplineGrid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn degree(&self) -> usize {
        self.spec.degree
    }

    pub fn intervals(&self) -> usize {
        self.spec.intervals
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.spec.t_min, self.spec.t_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn basis_count(&self) -> usize {
        self.spec.intervals + self.spec.degree
    }

    /// Number of basis functions that can be nonzero at any point.
    pub fn support_width(&self) -> usize {
        self.spec.degree + 1
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.spec.t_min, self.spec.t_max)
    }

    /// Knot span `s` with `knots[s] <= x < knots[s + 1]`, restricted to the domain
    /// cells so that `x == t_max` falls in the last cell.
    #[inline]
    fn span(&self, x: f64) -> usize {
        let k = self.spec.degree;
        let last = k + self.spec.intervals - 1;
        let guess = ((x - self.spec.t_min) / self.spacing).floor();
        let mut s = if guess <= 0.0 {
            k
        } else {
            (k + guess as usize).min(last)
        };
        while s > k && x < self.knots[s] {
            s -= 1;
        }
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Nonzero basis values of the given degree on span `s`, written to `out[..=degree]`.
    #[inline]
    fn triangle(&self, s: usize, x: f64, degree: usize, out: &mut [f64]) {
        let t = &self.knots;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Evaluates the `degree + 1` possibly-nonzero basis functions at `x` (after
    /// clamping). Returns the index of the first of them; `values[r]` holds
    /// `B_{first + r}(x)`. When `derivs` is given it receives the matching
    /// derivatives.
    #[inline]
    pub fn local_basis(&self, x: f64, values: &mut [f64], derivs: Option<&mut [f64]>) -> usize {
        let k = self.spec.degree;
        let x = self.clamp(x);
        let s = self.span(x);
        if let Some(d) = derivs {
            if k == 0 {
                d[0] = 0.0;
            } else {
                let mut lower = [0.0; MAX_DEGREE + 1];
                self.triangle(s, x, k - 1, &mut lower);
                let t = &self.knots;
                for r in 0..=k {
                    let i = s - k + r;
                    let a = if r >= 1 {
                        lower[r - 1] / (t[i + k] - t[i])
                    } else {
                        0.0
                    };
                    let b = if r < k {
                        lower[r] / (t[i + k + 1] - t[i + 1])
                    } else {
                        0.0
                    };
                    d[r] = k as f64 * (a - b);
                }
            }
        }
        self.triangle(s, x, k, values);
        s - k
    }

    /// Full basis vector `[B_0(x), ..., B_{n-1}(x)]` after clamping.
    pub fn basis_values(&self, x: f64) -> Vec<f64> {
        let mut local = [0.0; MAX_DEGREE + 1];
        let first = self.local_basis(x, &mut local, None);
        let mut out = vec![0.0; self.basis_count()];
        out[first..first + self.support_width()].copy_from_slice(&local[..self.support_width()]);
        out
    }

    /// Full derivative vector `dB_m/dx` at `x` after clamping.
    ///
    /// At interior knots and at `t_min` the right-hand limit is returned; at
    /// `t_max` the left-hand limit (the last domain cell) is used.
    pub fn basis_derivatives(&self, x: f64) -> Vec<f64> {
        let mut local = [0.0; MAX_DEGREE + 1];
        let mut d = [0.0; MAX_DEGREE + 1];
        let first = self.local_basis(x, &mut local, Some(&mut d));
        let mut out = vec![0.0; self.basis_count()];
        out[first..first + self.support_width()].copy_from_slice(&d[..self.support_width()]);
        out
    }
}

impl Default for SplineGrid {
    fn default() -> Self {
        let spec = GridSpec::default();
        build_grid(spec.degree, spec.intervals, spec.t_min, spec.t_max).expect("default grid is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook recursive Cox-de Boor over the full knot vector, half-open cells.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, x);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + k + 1] - x) / d2 * cox_de_boor(knots, i + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn grid_knots() {
        let g = build_grid(0, 2, 0.0, 1.0).unwrap();
        assert_eq!(g.knots(), &[0.0, 0.5, 1.0]);
        let g = build_grid(1, 2, 0.0, 1.0).unwrap();
        assert_eq!(g.knots(), &[-0.5, 0.0, 0.5, 1.0, 1.5]);

        let g = build_grid(3, 5, -1.0, 1.0).unwrap();
        assert_eq!(g.knots().len(), 12);
        assert_eq!(g.basis_count(), 8);
        for (n, &t) in g.knots().iter().enumerate() {
            let expected = -2.2 + 0.4 * n as f64;
            assert!((t - expected).abs() < 1e-12, "knot {n}: {t} vs {expected}");
        }
        for w in g.knots().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(build_grid(3, 0, -1.0, 1.0).is_err());
        assert!(build_grid(3, 5, 1.0, 1.0).is_err());
        assert!(build_grid(3, 5, 1.0, -1.0).is_err());
        assert!(build_grid(3, 5, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn degree_zero_indicator() {
        let g = build_grid(0, 2, 0.0, 1.0).unwrap();
        assert_eq!(g.basis_values(0.25), vec![1.0, 0.0]);
        assert_eq!(g.basis_values(1.0), vec![0.0, 1.0]);
    }

    #[test]
    fn cubic_matches_recursive_oracle() {
        let g = build_grid(3, 5, -1.0, 1.0).unwrap();
        for &x in &[0.1, -0.93, 0.55, -0.2, 0.999] {
            let fast = g.basis_values(x);
            for (m, &v) in fast.iter().enumerate() {
                let oracle = cox_de_boor(g.knots(), m, 3, x);
                assert!((v - oracle).abs() < 1e-12, "x={x} m={m}: {v} vs {oracle}");
            }
        }
    }

    #[test]
    fn hat_function_slopes() {
        let g = build_grid(1, 4, 0.0, 1.0).unwrap();
        // B_1 peaks at knot 0.25 on this grid; slope left is +4, right is -4
        let left = g.basis_derivatives(0.2);
        let right = g.basis_derivatives(0.3);
        assert!((left[1] - 4.0).abs() < 1e-12);
        assert!((right[1] + 4.0).abs() < 1e-12);
        // at the knot itself the right-hand limit is reported
        assert!((g.basis_derivatives(0.25)[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_derivative_matches_finite_difference() {
        let g = build_grid(3, 5, -1.0, 1.0).unwrap();
        let h = 1e-6;
        let d = g.basis_derivatives(0.1);
        let p = g.basis_values(0.1 + h);
        let m = g.basis_values(0.1 - h);
        for i in 0..g.basis_count() {
            let fd = (p[i] - m[i]) / (2.0 * h);
            assert!((d[i] - fd).abs() < 1e-5, "basis {i}: {} vs {fd}", d[i]);
        }
        assert!(d.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn clamping() {
        let g = SplineGrid::default();
        assert_eq!(g.basis_values(1.7), g.basis_values(1.0));
        assert_eq!(g.basis_values(-5.0), g.basis_values(-1.0));
        assert!((g.basis_values(1.0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn serde_rebuilds_knots() {
        let g = build_grid(2, 7, -0.5, 2.0).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: SplineGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        let bad = r#"{"degree":3,"intervals":0,"t_min":-1.0,"t_max":1.0}"#;
        assert!(serde_json::from_str::<SplineGrid>(bad).is_err());
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_locality(
            degree in 0usize..5,
            intervals in 1usize..12,
            x in -1.0f64..=1.0,
        ) {
            let g = build_grid(degree, intervals, -1.0, 1.0).unwrap();
            let b = g.basis_values(x);
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(b.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            prop_assert!(b.iter().filter(|&&v| v != 0.0).count() <= degree + 1);
            let d = g.basis_derivatives(x);
            prop_assert!(d.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn derivatives_match_finite_differences(
            degree in 1usize..5,
            intervals in 1usize..10,
            x in -0.999f64..0.999,
        ) {
            let g = build_grid(degree, intervals, -1.0, 1.0).unwrap();
            // stay clear of knots, where the derivative may jump
            let cell = (x + 1.0) / g.spacing();
            prop_assume!((cell - cell.round()).abs() > 1e-3);
            let h = 1e-7;
            let d = g.basis_derivatives(x);
            let p = g.basis_values(x + h);
            let m = g.basis_values(x - h);
            for i in 0..g.basis_count() {
                let fd = (p[i] - m[i]) / (2.0 * h);
                let scale = d[i].abs().max(1.0);
                prop_assert!((d[i] - fd).abs() / scale < 1e-5, "{} vs {}", d[i], fd);
            }
        }
    }
}
