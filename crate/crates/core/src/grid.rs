//! Interior-node discretization of the unit square (or unit interval) with
//! homogeneous Dirichlet data, and the forward-difference gradient `D = (D1, D2)`.
//!
//! Nodes are stored row-major: node `(i, j)` with `i` along x and `j` along y
//! has index `j * nx + i` and sits at `((i + 1) hx, (j + 1) hy)`.
//! Differences reaching past the last interior node use a ghost value of zero.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::Field;

/// Spatial dimension of a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dimension {
    /// Unit interval; `D2` is the zero operator.
    Line,
    /// Unit square.
    Plane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    dim: Dimension,
}

/// Difference direction: `X` is `D1`, `Y` is `D2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::X, Axis::Y];
}

impl Grid {
    /// Square grid with `nx * ny` interior nodes and per-axis widths `1/(n+1)`.
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidParameter {
                name: "grid",
                reason: format!("node counts must be positive, got {nx}x{ny}"),
            });
        }
        Ok(Grid {
            nx,
            ny,
            hx: 1.0 / (nx as f64 + 1.0),
            hy: 1.0 / (ny as f64 + 1.0),
            dim: Dimension::Plane,
        })
    }

    /// One-dimensional grid of `n` interior nodes on the unit interval.
    pub fn line(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "grid",
                reason: "node count must be positive".into(),
            });
        }
        let h = 1.0 / (n as f64 + 1.0);
        Ok(Grid {
            nx: n,
            ny: 1,
            hx: h,
            hy: h,
            dim: Dimension::Line,
        })
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Mesh width along x.
    pub fn h(&self) -> f64 {
        self.hx
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn dimension(&self) -> Dimension {
        self.dim
    }

    /// Measure of the cell owned by one node.
    pub fn cell_measure(&self) -> f64 {
        match self.dim {
            Dimension::Line => self.hx,
            Dimension::Plane => self.hx * self.hy,
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn position(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn coordinates(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.position(idx);
        let y = match self.dim {
            Dimension::Line => 0.0,
            Dimension::Plane => (j as f64 + 1.0) * self.hy,
        };
        ((i as f64 + 1.0) * self.hx, y)
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.n())
    }

    pub fn check(&self, what: &'static str, f: &Field) -> Result<()> {
        check_len(what, self.n(), f.len())
    }

    /// Forward neighbour of `idx` along `axis`, `None` on the boundary.
    pub fn neighbour(&self, idx: usize, axis: Axis) -> Option<usize> {
        let (i, j) = self.position(idx);
        match axis {
            Axis::X => (i + 1 < self.nx).then(|| idx + 1),
            Axis::Y => match self.dim {
                Dimension::Line => None,
                Dimension::Plane => (j + 1 < self.ny).then(|| idx + self.nx),
            },
        }
    }

    /// Nonzero entries of row `idx` of `D_axis` as `(column, value)`.
    ///
    /// Empty for `Axis::Y` on a line grid.
    pub fn stencil(&self, idx: usize, axis: Axis) -> Stencil {
        let h = match axis {
            Axis::X => self.hx,
            Axis::Y => self.hy,
        };
        if axis == Axis::Y && self.dim == Dimension::Line {
            return Stencil::default();
        }
        let mut s = Stencil::default();
        s.push(idx, -1.0 / h);
        if let Some(nb) = self.neighbour(idx, axis) {
            s.push(nb, 1.0 / h);
        }
        s
    }

    /// `(D_axis y)_idx` without allocating.
    pub fn diff_at(&self, y: &Field, idx: usize, axis: Axis) -> f64 {
        self.stencil(idx, axis).dot(y)
    }

    pub fn apply_diff(&self, y: &Field, axis: Axis) -> Result<Field> {
        self.check("y", y)?;
        Ok(Field::from_fn(self.n(), |idx, _| self.diff_at(y, idx, axis)))
    }

    /// `D_axis^T q`.
    pub fn apply_diff_adjoint(&self, q: &Field, axis: Axis) -> Result<Field> {
        self.check("q", q)?;
        let mut out = self.zeros();
        for idx in 0..self.n() {
            for &(col, v) in self.stencil(idx, axis).entries() {
                out[col] += v * q[idx];
            }
        }
        Ok(out)
    }

    /// `(D1 y, D2 y)`.
    pub fn gradient(&self, y: &Field) -> Result<(Field, Field)> {
        Ok((self.apply_diff(y, Axis::X)?, self.apply_diff(y, Axis::Y)?))
    }

    /// `D1^T q1 + D2^T q2`, the exact transpose of [`Grid::gradient`].
    pub fn gradient_adjoint(&self, q1: &Field, q2: &Field) -> Result<Field> {
        Ok(self.apply_diff_adjoint(q1, Axis::X)? + self.apply_diff_adjoint(q2, Axis::Y)?)
    }

    /// Dense copy of `D_axis`.
    pub fn diff_matrix(&self, axis: Axis) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for idx in 0..n {
            for &(col, v) in self.stencil(idx, axis).entries() {
                m[(idx, col)] += v;
            }
        }
        m
    }

    /// Objective weights: the cell measure on `mask`, zero elsewhere.
    pub fn region_weights(&self, mask: &RegionMask) -> Result<Field> {
        let mut a = self.zeros();
        for &idx in mask.indices() {
            if idx >= self.n() {
                return Err(Error::IndexOutOfRange {
                    what: "region mask",
                    index: idx,
                    bound: self.n(),
                });
            }
            a[idx] = self.cell_measure();
        }
        Ok(a)
    }

    /// Mask of all nodes inside the closed rectangle `[x0, x1] x [y0, y1]`.
    pub fn rectangle_mask(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> RegionMask {
        let idx = (0..self.n()).filter(|&k| {
            let (x, y) = self.coordinates(k);
            let in_y = self.dim == Dimension::Line || (y >= y0 && y <= y1);
            x >= x0 && x <= x1 && in_y
        });
        RegionMask {
            indices: idx.collect(),
        }
    }

    /// Node closest to the physical point `(x, y)`.
    pub fn nearest_node(&self, x: f64, y: f64) -> usize {
        let clamp = |v: f64, h: f64, n: usize| -> usize {
            let k = (v / h - 1.0).round();
            k.clamp(0.0, (n - 1) as f64) as usize
        };
        let i = clamp(x, self.hx, self.nx);
        let j = match self.dim {
            Dimension::Line => 0,
            Dimension::Plane => clamp(y, self.hy, self.ny),
        };
        self.index(i, j)
    }
}

/// Row of a difference matrix: at most two entries.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stencil {
    entries: [(usize, f64); 2],
    len: usize,
}

impl Stencil {
    fn push(&mut self, col: usize, v: f64) {
        self.entries[self.len] = (col, v);
        self.len += 1;
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries[..self.len]
    }

    pub fn dot(&self, y: &Field) -> f64 {
        self.entries().iter().map(|&(c, v)| v * y[c]).sum()
    }
}

/// Set of node indices marking the region to keep free of material.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionMask {
    indices: Vec<usize>,
}

impl RegionMask {
    /// Sorts and rejects duplicates.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter {
                name: "region mask",
                reason: format!("duplicate node index {}", w[0]),
            });
        }
        Ok(RegionMask { indices })
    }

    pub fn full(grid: &Grid) -> Self {
        RegionMask {
            indices: (0..grid.n()).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_examples() {
        let g = Grid::new(1, 1).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.h(), 0.5);
        let g = Grid::new(2, 2).unwrap();
        assert_eq!(g.n(), 4);
        assert!((g.h() - 1.0 / 3.0).abs() < 1e-15);
        assert!(Grid::new(0, 3).is_err());
        assert!(Grid::line(0).is_err());
    }

    #[test]
    fn per_axis_widths() {
        let g = Grid::new(3, 1).unwrap();
        assert_eq!(g.hx(), 0.25);
        assert_eq!(g.hy(), 0.5);
        assert_eq!(g.cell_measure(), 0.125);
    }

    #[test]
    fn single_node_stencil() {
        let g = Grid::new(1, 1).unwrap();
        let (d1, d2) = g.gradient(&Field::from_element(1, 1.0)).unwrap();
        assert_eq!(d1[0], -2.0);
        assert_eq!(d2[0], -2.0);
        // 1x1 transpose is the same scalar
        let t = g.apply_diff_adjoint(&Field::from_element(1, 3.0), Axis::X).unwrap();
        assert_eq!(t[0], -6.0);

        let line = Grid::line(1).unwrap();
        let (d1, d2) = line.gradient(&Field::from_element(1, 1.0)).unwrap();
        assert_eq!(d1[0], -2.0);
        assert_eq!(d2[0], 0.0);
    }

    #[test]
    fn zero_maps_to_zero() {
        let g = Grid::new(3, 4).unwrap();
        let (d1, d2) = g.gradient(&g.zeros()).unwrap();
        assert_eq!(d1.amax(), 0.0);
        assert_eq!(d2.amax(), 0.0);
        assert_eq!(g.gradient_adjoint(&g.zeros(), &g.zeros()).unwrap().amax(), 0.0);
    }

    #[test]
    fn size_mismatch_rejected() {
        let g = Grid::new(2, 2).unwrap();
        assert!(g.gradient(&Field::zeros(3)).is_err());
        assert!(g.gradient_adjoint(&Field::zeros(4), &Field::zeros(5)).is_err());
    }

    #[test]
    fn linear_profile_is_differenced_exactly_in_the_interior() {
        let g = Grid::new(6, 5).unwrap();
        let c = 1.7;
        let y = Field::from_fn(g.n(), |k, _| c * g.coordinates(k).0);
        let d1 = g.apply_diff(&y, Axis::X).unwrap();
        for k in 0..g.n() {
            if g.neighbour(k, Axis::X).is_some() {
                assert!((d1[k] - c).abs() < 1e-12, "node {k}: {}", d1[k]);
            }
        }
    }

    #[test]
    fn dense_matrix_matches_stencil() {
        let g = Grid::new(3, 2).unwrap();
        let y = Field::from_fn(g.n(), |k, _| (k as f64).sin());
        for axis in Axis::BOTH {
            let dense = g.diff_matrix(axis) * &y;
            let sparse = g.apply_diff(&y, axis).unwrap();
            assert!((dense - sparse).amax() < 1e-14);
        }
    }

    #[test]
    fn region_weight_examples() {
        let g = Grid::new(2, 2).unwrap();
        let a = g.region_weights(&RegionMask::default()).unwrap();
        assert_eq!(a.amax(), 0.0);
        let a = g.region_weights(&RegionMask::new(vec![0]).unwrap()).unwrap();
        assert!((a[0] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(a.rows(1, 3).amax(), 0.0);
        let g1 = Grid::new(1, 1).unwrap();
        let a = g1.region_weights(&RegionMask::full(&g1)).unwrap();
        assert_eq!(a[0], 0.25);
        assert!(g.region_weights(&RegionMask::new(vec![4]).unwrap()).is_err());
        assert!(RegionMask::new(vec![1, 1]).is_err());
    }

    #[test]
    fn rectangle_and_nearest() {
        let g = Grid::new(9, 9).unwrap();
        assert_eq!(g.nearest_node(0.5, 0.5), g.index(4, 4));
        let m = g.rectangle_mask(0.0, 0.25, 0.0, 1.0);
        // x = 0.1, 0.2 columns
        assert_eq!(m.indices().len(), 18);
    }

    fn grid_and_pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(nx, ny)| {
            let n = nx * ny;
            (
                Just(nx),
                Just(ny),
                prop::collection::vec(-5.0..5.0f64, n),
                prop::collection::vec(-5.0..5.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn adjoint_identity((nx, ny, y, w) in grid_and_pair()) {
            let g = Grid::new(nx, ny).unwrap();
            let y = Field::from_vec(y);
            let w = Field::from_vec(w);
            for axis in Axis::BOTH {
                let lhs = g.apply_diff(&y, axis).unwrap().dot(&w);
                let rhs = y.dot(&g.apply_diff_adjoint(&w, axis).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + y.norm() * w.norm()));
            }
        }
    }
}
