use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ego-centred BEV raster. Cell `(i, j)` covers
/// `x in [i*res_x - extent_x/2, (i+1)*res_x - extent_x/2)` and likewise for
/// `y` with `j`; `i` runs forward, `j` runs left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub extent_x: f64,
    pub extent_y: f64,
    pub res_x: f64,
    pub res_y: f64,
    pub grid_x: usize,
    pub grid_y: usize,
}

fn cells_for(extent: f64, res: f64, axis: &str) -> Result<usize> {
    if !(extent > 0.0 && res > 0.0) {
        return Err(Error::Config(format!(
            "grid {axis}: extent and resolution must be positive (got {extent}, {res})"
        )));
    }
    let n = (extent / res).round();
    if (n * res - extent).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "grid {axis}: extent {extent} is not a whole number of {res} m cells"
        )));
    }
    Ok(n as usize)
}

impl BevGridSpec {
    pub fn new(extent_x: f64, extent_y: f64, res_x: f64, res_y: f64) -> Result<Self> {
        Ok(BevGridSpec {
            extent_x,
            extent_y,
            res_x,
            res_y,
            grid_x: cells_for(extent_x, res_x, "x")?,
            grid_y: cells_for(extent_y, res_y, "y")?,
        })
    }

    /// 80 m × 80 m at 0.4 m: 200 × 200 cells.
    pub fn surround() -> Self {
        Self::new(80.0, 80.0, 0.4, 0.4).expect("valid grid")
    }

    /// 40 m (longitudinal) × 80 m (lateral) at 0.4 m: 100 × 200 cells.
    pub fn front_half() -> Self {
        Self::new(40.0, 80.0, 0.4, 0.4).expect("valid grid")
    }

    pub fn cells(&self) -> usize {
        self.grid_x * self.grid_y
    }

    /// Cell containing the ground projection of a point; `None` outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x + self.extent_x / 2.0) / self.res_x;
        let fj = (y + self.extent_y / 2.0) / self.res_y;
        // Negated test so NaN falls out too; past it, truncation is floor.
        if !(fi >= 0.0 && fj >= 0.0) {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.grid_x && j < self.grid_y).then_some((i, j))
    }

    /// Row-major flat index `i * grid_y + j` of the cell containing (x, y).
    pub fn flat_cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(i, j)| i * self.grid_y + j)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.res_x - self.extent_x / 2.0,
            (j as f64 + 0.5) * self.res_y - self.extent_y / 2.0,
        )
    }

    /// Cell centres in flat order.
    pub fn centers(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.grid_x).flat_map(move |i| (0..self.grid_y).map(move |j| self.cell_center(i, j)))
    }
}

/// Single-layer BEV cell of an ego-frame point; z is ignored.
pub fn bev_cell_of(point: [f64; 3], spec: &BevGridSpec) -> Option<(usize, usize)> {
    spec.cell_of(point[0], point[1])
}
