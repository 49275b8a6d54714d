#![allow(dead_code)]

use pile_core::constraint::{BoundParams, Norm};
use pile_core::control::ControlProblem;
use pile_core::dynamics::{Scheme, TimeGrid};
use pile_core::grid::Grid;
use pile_core::Field;

/// Rate `mass / (hx hy)` on the node nearest `(x, y)`, so the total inflow
/// does not depend on the grid.
pub fn point_rate(grid: &Grid, x: f64, y: f64, mass: f64) -> Field {
    let mut f = grid.zeros();
    f[grid.nearest_node(x, y)] = mass / grid.cell_measure();
    f
}

/// A small control problem with a central source and weights on the lower
/// left quarter.
pub fn control_problem(nx: usize, steps: usize, gamma: f64, scheme: Scheme) -> ControlProblem {
    let grid = Grid::new(nx, nx).unwrap();
    let n = grid.n();
    let a = grid
        .region_weights(&grid.rectangle_mask(0.0, 0.5, 0.0, 0.5))
        .unwrap();
    let tg = TimeGrid::new(1.0, steps).unwrap();
    let f = vec![point_rate(&grid, 0.5, 0.5, 0.05); steps];
    ControlProblem {
        a,
        sigma: 1.0,
        y0_ref: grid.zeros(),
        lambda0: grid.zeros(),
        lambda1: Field::from_element(n, 0.1),
        tg,
        f,
        bp: BoundParams::new(1.0, 0.05, 0.01, Norm::L2).unwrap(),
        gamma,
        scheme,
        grid,
    }
}
