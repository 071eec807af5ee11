//! Time and spatial discretization grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid on `[0, t_end]` with `n_steps` steps (`n_steps + 1` nodes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Grid from 0 to `t_end` with `n_steps >= 1` uniform steps.
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be finite and positive, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        Ok(TimeGrid {
            t_start: 0.0,
            t_end,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    /// Time of node `k` (`k = 0 ..= n_steps`).
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        self.t_start + self.dt() * k as f64
    }

    /// All node times in order.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |k| self.node(k))
    }

    /// Node index closest to `t` (clamped to the grid).
    pub fn nearest_node(&self, t: f64) -> usize {
        let k = ((t - self.t_start) / self.dt()).round();
        (k.max(0.0) as usize).min(self.n_steps)
    }
}

/// Uniform cell-centered spatial grid on `[x_min, x_max]` (one dimension).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    x_min: f64,
    x_max: f64,
    n_cells: usize,
}

impl SpatialGrid {
    /// Grid with at least 8 cells, which the density solver needs for its
    /// stencils to make sense.
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(Error::InvalidGrid(format!(
                "need finite x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_cells < 8 {
            return Err(Error::InvalidGrid(format!(
                "need at least 8 cells, got {n_cells}"
            )));
        }
        Ok(SpatialGrid {
            x_min,
            x_max,
            n_cells,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    /// Center of cell `j`.
    pub fn cell_center(&self, j: usize) -> f64 {
        debug_assert!(j < self.n_cells);
        self.x_min + self.dx() * (j as f64 + 0.5)
    }

    /// Continuous cell coordinate of `x` (0 at the center of cell 0).
    pub fn position(&self, x: f64) -> f64 {
        (x - self.x_min) / self.dx() - 0.5
    }

    /// All cell centers in order.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|j| self.cell_center(j)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_grid_nodes_and_dt() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.n_nodes(), 5);
        assert!((g.dt() - 0.25).abs() < 1e-15);
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes.len(), 5);
        assert_eq!(nodes[0], 0.0);
        assert!((nodes[4] - 1.0).abs() < 1e-15);
        assert_eq!(g.nearest_node(0.26), 1);
        assert_eq!(g.nearest_node(99.0), 4);
    }

    #[test]
    fn time_grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 4).is_err());
    }

    #[test]
    fn spatial_grid_centers_cover_interval() {
        let g = SpatialGrid::new(-2.0, 2.0, 8).unwrap();
        assert!((g.dx() - 0.5).abs() < 1e-15);
        assert!((g.cell_center(0) - -1.75).abs() < 1e-15);
        assert!((g.cell_center(7) - 1.75).abs() < 1e-15);
        assert!(SpatialGrid::new(-1.0, 1.0, 4).is_err());
        assert!(SpatialGrid::new(1.0, -1.0, 16).is_err());
    }
}
