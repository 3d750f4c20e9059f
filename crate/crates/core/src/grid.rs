//! Discretization grids and normalized trapezoid quadrature.
//!
//! Two-dimensional grid functions are stored row-major: the value at
//! `(x_p, y_q)` lives at flat index `q + W * p`.

use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};

/// Uniform grid on `[0, T]` with `delta` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    horizon: f64,
    delta: usize,
    points: Vec<f64>,
}

impl Grid1D {
    pub fn new(horizon: f64, delta: usize) -> Result<Self> {
        if delta < 2 {
            return Err(DopeError::InvalidGrid(format!(
                "1D grid needs at least 2 points, got {delta}"
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(DopeError::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let last = (delta - 1) as f64;
        let mut points: Vec<f64> = (0..delta).map(|d| d as f64 / last * horizon).collect();
        // pin the endpoint exactly
        points[delta - 1] = horizon;
        Ok(Self {
            horizon,
            delta,
            points,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.delta
    }

    pub fn is_empty(&self) -> bool {
        self.delta == 0
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Spacing between consecutive points.
    pub fn step(&self) -> f64 {
        self.horizon / (self.delta - 1) as f64
    }

    pub fn weights(&self) -> QuadratureWeights {
        trapezoid_weights_1d(self.delta).expect("grid construction validated delta")
    }
}

/// Tensor-product grid on `[0,1]^2` with `h` points along x and `w` along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    h: usize,
    w: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Grid2D {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(DopeError::InvalidGrid(format!(
                "2D grid needs at least 2 points per axis, got {h}x{w}"
            )));
        }
        let axis = |n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            v[n - 1] = 1.0;
            v
        };
        Ok(Self {
            h,
            w,
            xs: axis(h),
            ys: axis(w),
        })
    }

    pub fn rows(&self) -> usize {
        self.h
    }

    pub fn cols(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    #[inline]
    pub fn flat(&self, p: usize, q: usize) -> usize {
        q + self.w * p
    }

    /// Coordinates `(x_p, y_q)` for a flat index.
    pub fn point(&self, idx: usize) -> (f64, f64) {
        (self.xs[idx / self.w], self.ys[idx % self.w])
    }

    pub fn weights(&self) -> QuadratureWeights {
        trapezoid_weights_2d(self.h, self.w).expect("grid construction validated sizes")
    }
}

/// Either of the two supported discretizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Line(Grid1D),
    Square(Grid2D),
}

impl Domain {
    pub fn len(&self) -> usize {
        match self {
            Domain::Line(g) => g.len(),
            Domain::Square(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> QuadratureWeights {
        match self {
            Domain::Line(g) => g.weights(),
            Domain::Square(g) => g.weights(),
        }
    }

    /// Spatial dimension of the domain.
    pub fn dim(&self) -> usize {
        match self {
            Domain::Line(_) => 1,
            Domain::Square(_) => 2,
        }
    }

    /// Coordinates of every grid point scaled to `[0,1]^d`, one row per point.
    pub fn unit_coordinates(&self) -> Vec<Vec<f64>> {
        match self {
            Domain::Line(g) => g
                .points()
                .iter()
                .map(|t| vec![t / g.horizon()])
                .collect(),
            Domain::Square(g) => (0..g.len())
                .map(|i| {
                    let (x, y) = g.point(i);
                    vec![x, y]
                })
                .collect(),
        }
    }
}

/// Normalized, strictly positive quadrature weights; one per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureWeights(Vec<f64>);

impl QuadratureWeights {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for QuadratureWeights {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Unnormalized trapezoid pattern `[1/2, 1, ..., 1, 1/2]`.
fn trapezoid_pattern(n: usize) -> Vec<f64> {
    let mut w = vec![1.0; n];
    w[0] = 0.5;
    w[n - 1] = 0.5;
    w
}

/// Boundary weight `1/(2(Δ-1))`, interior weight `1/(Δ-1)`.
pub fn trapezoid_weights_1d(delta: usize) -> Result<QuadratureWeights> {
    if delta < 2 {
        return Err(DopeError::InvalidGrid(format!(
            "trapezoid rule needs at least 2 points, got {delta}"
        )));
    }
    let scale = 1.0 / (delta - 1) as f64;
    Ok(QuadratureWeights(
        trapezoid_pattern(delta).into_iter().map(|w| w * scale).collect(),
    ))
}

pub fn trapezoid_weights_2d(h: usize, w: usize) -> Result<QuadratureWeights> {
    if h < 2 || w < 2 {
        return Err(DopeError::InvalidGrid(format!(
            "2D trapezoid rule needs at least 2 points per axis, got {h}x{w}"
        )));
    }
    let wx = trapezoid_pattern(h);
    let wy = trapezoid_pattern(w);
    // the pattern sums to (n-1) along each axis
    let total = ((h - 1) * (w - 1)) as f64;
    let mut out = Vec::with_capacity(h * w);
    for a in &wx {
        for b in &wy {
            out.push(a * b / total);
        }
    }
    Ok(QuadratureWeights(out))
}

/// Weighted inner product `Σ w_δ f_δ h_δ`.
pub fn inner_product(f: &[f64], h: &[f64], w: &QuadratureWeights) -> Result<f64> {
    if f.len() != h.len() || f.len() != w.len() {
        return Err(DopeError::Shape(format!(
            "inner product of lengths {}, {} with {} weights",
            f.len(),
            h.len(),
            w.len()
        )));
    }
    Ok(f.iter()
        .zip(h)
        .zip(w.values())
        .map(|((a, b), c)| a * b * c)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_1d_weights() {
        assert_eq!(trapezoid_weights_1d(3).unwrap().values(), &[0.25, 0.5, 0.25]);
        assert_eq!(trapezoid_weights_1d(2).unwrap().values(), &[0.5, 0.5]);
        assert!(matches!(
            trapezoid_weights_1d(1),
            Err(DopeError::InvalidGrid(_))
        ));
    }

    #[test]
    fn pk_grid_weights() {
        let w = trapezoid_weights_1d(128).unwrap();
        assert!((w[0] - 1.0 / 254.0).abs() < 1e-15);
        assert!((w[127] - 1.0 / 254.0).abs() < 1e-15);
        assert!((w[64] - 1.0 / 127.0).abs() < 1e-15);
        assert!((w.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_2d_weights() {
        let w = trapezoid_weights_2d(2, 2).unwrap();
        assert_eq!(w.values(), &[0.25; 4]);
        let w = trapezoid_weights_2d(17, 17).unwrap();
        let g = Grid2D::new(17, 17).unwrap();
        assert!((w[g.flat(0, 0)] - 0.25 / 256.0).abs() < 1e-15);
        assert!((w[g.flat(0, 5)] - 0.5 / 256.0).abs() < 1e-15);
        assert!((w[g.flat(8, 8)] - 1.0 / 256.0).abs() < 1e-15);
        assert!(matches!(
            trapezoid_weights_2d(1, 5),
            Err(DopeError::InvalidGrid(_))
        ));
    }

    #[test]
    fn grid_endpoints() {
        let g = Grid1D::new(24.0, 128).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert_eq!(g.points()[127], 24.0);
        assert!(g.points().windows(2).all(|p| p[1] > p[0]));
        let g2 = Grid2D::new(17, 17).unwrap();
        assert_eq!(g2.point(0), (0.0, 0.0));
        assert_eq!(g2.point(g2.len() - 1), (1.0, 1.0));
        assert!(Grid1D::new(24.0, 1).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let w = trapezoid_weights_1d(101).unwrap();
        let ones = vec![1.0; 101];
        assert!((inner_product(&ones, &ones, &w).unwrap() - 1.0).abs() < 1e-12);
        let t: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        assert!((inner_product(&ones, &t, &w).unwrap() - 0.5).abs() < 1e-4);
        let mut e = vec![0.0; 101];
        e[7] = 1.0;
        assert_eq!(inner_product(&e, &e, &w).unwrap(), w[7]);
        assert!(matches!(
            inner_product(&ones[..3], &ones, &w),
            Err(DopeError::Shape(_))
        ));
    }

    #[test]
    fn weights_sum_to_one_everywhere() {
        for n in 2..=512 {
            let s: f64 = trapezoid_weights_1d(n).unwrap().values().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "n={n}");
        }
        for h in (2..=64).step_by(3) {
            for w in (2..=64).step_by(5) {
                let s: f64 = trapezoid_weights_2d(h, w).unwrap().values().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{h}x{w}");
            }
        }
    }

    proptest! {
        #[test]
        fn inner_product_symmetric_bilinear(
            f in prop::collection::vec(-10.0f64..10.0, 16),
            g in prop::collection::vec(-10.0f64..10.0, 16),
            h in prop::collection::vec(-10.0f64..10.0, 16),
            a in -3.0f64..3.0,
        ) {
            let w = trapezoid_weights_1d(16).unwrap();
            let fg = inner_product(&f, &g, &w).unwrap();
            let gf = inner_product(&g, &f, &w).unwrap();
            prop_assert_eq!(fg, gf);
            let lin: Vec<f64> = f.iter().zip(&h).map(|(x, y)| a * x + y).collect();
            let lhs = inner_product(&lin, &g, &w).unwrap();
            let rhs = a * fg + inner_product(&h, &g, &w).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            prop_assert!(inner_product(&f, &f, &w).unwrap() >= 0.0);
        }
    }
}
