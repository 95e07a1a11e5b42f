//! 2.5D box terrain: each grid cell is a box with a top surface at its height
//! and a bottom that extends to negative infinity.

mod augment;
mod gen;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use augment::{
    augment_with_boxes, compute_noninterference_bounds, AugmentParams, HeightBounds, CLEARANCE,
};
pub use gen::{
    flatten_2x2, gen_random_boxes, gen_random_walk, gen_random_walk_paths, slice_terrain,
    RandomBoxesParams, RandomWalkParams,
};

use crate::error::{Error, Result};
use crate::rotmath::LocalFrame;

pub const DEFAULT_CELL: f64 = 0.4;
pub const HEIGHTMAP_SIZE: usize = 31;
/// 31 samples at the default 0.4 m cell pitch.
pub const DEFAULT_HEIGHTMAP_EXTENT: f64 = HEIGHTMAP_SIZE as f64 * DEFAULT_CELL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainGrid {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major: `heights[i * cols + j]` is the top of cell `(i, j)`.
    pub heights: Vec<f64>,
}

impl TerrainGrid {
    pub fn flat(rows: usize, cols: usize, cell: f64, height: f64) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            dx: cell,
            dy: cell,
            rows,
            cols,
            heights: vec![height; rows * cols],
        }
    }

    pub fn from_heights(
        x0: f64,
        y0: f64,
        dx: f64,
        dy: f64,
        rows: usize,
        cols: usize,
        heights: Vec<f64>,
    ) -> Result<Self> {
        let t = Self {
            x0,
            y0,
            dx,
            dy,
            rows,
            cols,
            heights,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cell size must be positive, got {} x {}",
                self.dx, self.dy
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidParameter("empty terrain".into()));
        }
        if self.heights.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{} heights for a {}x{} grid",
                self.heights.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(i) = self.heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(())
    }

    #[inline]
    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.heights[i * self.cols + j]
    }

    #[inline]
    pub fn set_height(&mut self, i: usize, j: usize, h: f64) {
        self.heights[i * self.cols + j] = h;
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dy]
    }

    pub fn cell_top(&self, i: usize, j: usize) -> [f64; 3] {
        let c = self.cell_center(i, j);
        [c[0], c[1], self.height(i, j)]
    }

    /// Nearest cell to a horizontal position, clamped onto the grid.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let fi = ((x - self.x0) / self.dx).round();
        let fj = ((y - self.y0) / self.dy).round();
        (
            fi.clamp(0.0, (self.rows - 1) as f64) as usize,
            fj.clamp(0.0, (self.cols - 1) as f64) as usize,
        )
    }

    /// Cell containing a horizontal position, if it lies on the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.x0) / self.dx).round();
        let fj = ((y - self.y0) / self.dy).round();
        if fi < 0.0 || fj < 0.0 || fi >= self.rows as f64 || fj >= self.cols as f64 {
            None
        } else {
            Some((fi as usize, fj as usize))
        }
    }

    /// Index ranges of cells whose closed footprint contains `(x, y)`.
    pub fn cells_touching(&self, x: f64, y: f64) -> Option<([usize; 2], [usize; 2])> {
        let range = |v: f64, o: f64, d: f64, n: usize| -> Option<[usize; 2]> {
            let u = (v - o) / d;
            let lo = (u - 0.5).ceil().max(0.0);
            let hi = (u + 0.5).floor().min(n as f64 - 1.0);
            (lo <= hi).then_some([lo as usize, hi as usize])
        };
        Some((
            range(x, self.x0, self.dx, self.rows)?,
            range(y, self.y0, self.dy, self.cols)?,
        ))
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.heights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Signed distance to the column box of cell `(i, j)`.
    #[inline]
    pub fn cell_sd(&self, p: [f64; 3], i: usize, j: usize) -> f64 {
        let c = self.cell_center(i, j);
        let q = [
            (p[0] - c[0]).abs() - 0.5 * self.dx,
            (p[1] - c[1]).abs() - 0.5 * self.dy,
            p[2] - self.height(i, j),
        ];
        let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        outside + q[0].max(q[1]).max(q[2]).min(0.0)
    }

    /// Signed distance and its (sub)gradient for cell `(i, j)`.
    pub fn cell_sd_grad(&self, p: [f64; 3], i: usize, j: usize) -> (f64, [f64; 3]) {
        let c = self.cell_center(i, j);
        let sx = if p[0] >= c[0] { 1.0 } else { -1.0 };
        let sy = if p[1] >= c[1] { 1.0 } else { -1.0 };
        let q = [
            (p[0] - c[0]).abs() - 0.5 * self.dx,
            (p[1] - c[1]).abs() - 0.5 * self.dy,
            p[2] - self.height(i, j),
        ];
        let m = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        if len > 0.0 {
            (len, [sx * m[0] / len, sy * m[1] / len, m[2] / len])
        } else {
            // interior or surface: nearest face is the largest q component
            let k = if q[2] >= q[0] && q[2] >= q[1] {
                2
            } else if q[0] >= q[1] {
                0
            } else {
                1
            };
            let mut g = [0.0; 3];
            g[k] = [sx, sy, 1.0][k];
            (q[k], g)
        }
    }

    /// Ring scan outward from the nearest cell, stopping once no farther cell
    /// can beat the current minimum. Returns the winning cell as well.
    fn nearest_box(&self, p: [f64; 3]) -> (f64, (usize, usize)) {
        let (i0, j0) = self.nearest_cell(p[0], p[1]);
        let dmin = self.dx.min(self.dy);
        let max_r = self.rows.max(self.cols);
        let mut best = f64::INFINITY;
        let mut arg = (i0, j0);
        for r in 0..=max_r {
            if r > 0 && (r as f64 - 1.0) * dmin > best {
                break;
            }
            let ilo = i0 as isize - r as isize;
            let ihi = i0 as isize + r as isize;
            let jlo = j0 as isize - r as isize;
            let jhi = j0 as isize + r as isize;
            for i in ilo.max(0)..=ihi.min(self.rows as isize - 1) {
                let on_edge = i == ilo || i == ihi;
                let step = if on_edge {
                    1
                } else {
                    (jhi - jlo).max(1) as usize
                };
                let mut j = jlo;
                while j <= jhi {
                    if j >= 0 && j < self.cols as isize {
                        let d = self.cell_sd(p, i as usize, j as usize);
                        if d < best {
                            best = d;
                            arg = (i as usize, j as usize);
                        }
                    }
                    j += step as isize;
                }
            }
        }
        (best, arg)
    }

    pub fn sd(&self, p: [f64; 3]) -> f64 {
        self.nearest_box(p).0
    }

    /// Signed distance and subgradient; ties resolve to the first minimum found.
    pub fn sd_grad(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let (_, (i, j)) = self.nearest_box(p);
        self.cell_sd_grad(p, i, j)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Rows of comma-separated heights, one line per `i`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|j| self.height(i, j).to_string())
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Wavefront OBJ of all cell boxes, bottoms truncated 2 m below the lowest top.
    pub fn to_obj(&self) -> String {
        let bottom = self.min_height() - 2.0;
        let mut s = String::from("# terrain boxes\n");
        let mut v = 1;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let [cx, cy] = self.cell_center(i, j);
                let (hx, hy) = (0.5 * self.dx, 0.5 * self.dy);
                let top = self.height(i, j);
                for z in [bottom, top] {
                    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                        let _ = writeln!(s, "v {} {} {}", cx + sx * hx, cy + sy * hy, z);
                    }
                }
                let f = |a: usize, b: usize, c: usize, d: usize| {
                    format!("f {} {} {} {}\n", v + a, v + b, v + c, v + d)
                };
                s += &f(4, 5, 6, 7);
                s += &f(3, 2, 1, 0);
                s += &f(0, 1, 5, 4);
                s += &f(1, 2, 6, 5);
                s += &f(2, 3, 7, 6);
                s += &f(3, 0, 4, 7);
                v += 8;
            }
        }
        s
    }
}

/// Exact signed distance to an axis-aligned box; negative inside.
pub fn sd_box(p: [f64; 3], center: [f64; 3], half_extents: [f64; 3]) -> f64 {
    let q: Vec<f64> = (0..3)
        .map(|k| (p[k] - center[k]).abs() - half_extents[k])
        .collect();
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

pub fn sd_terrain(p: [f64; 3], terrain: &TerrainGrid) -> f64 {
    terrain.sd(p)
}

/// Reference evaluation: minimum over every cell.
pub fn sd_terrain_brute(p: [f64; 3], terrain: &TerrainGrid) -> f64 {
    (0..terrain.rows)
        .flat_map(|i| (0..terrain.cols).map(move |j| (i, j)))
        .map(|(i, j)| terrain.cell_sd(p, i, j))
        .fold(f64::INFINITY, f64::min)
}

/// 31×31 heights around a local frame, relative to the frame's height.
///
/// `values[a * 31 + b]` is sampled at local offset `((a - 15) s, (b - 15) s)`
/// with `s = extent / 31`; `a` runs along the frame's forward axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalHeightmap {
    pub values: Vec<f64>,
    pub frame: LocalFrame,
    pub spacing: f64,
}

impl LocalHeightmap {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * HEIGHTMAP_SIZE + b]
    }

    pub fn local_offset(a: usize, b: usize, spacing: f64) -> [f64; 2] {
        let half = (HEIGHTMAP_SIZE / 2) as f64;
        [(a as f64 - half) * spacing, (b as f64 - half) * spacing]
    }
}

pub fn sample_local_heightmap(
    terrain: &TerrainGrid,
    frame: &LocalFrame,
    extent: f64,
) -> Result<LocalHeightmap> {
    if !(extent > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "heightmap extent {extent}"
        )));
    }
    let spacing = extent / HEIGHTMAP_SIZE as f64;
    let mut values = Vec::with_capacity(HEIGHTMAP_SIZE * HEIGHTMAP_SIZE);
    for a in 0..HEIGHTMAP_SIZE {
        for b in 0..HEIGHTMAP_SIZE {
            let [lx, ly] = LocalHeightmap::local_offset(a, b, spacing);
            let w = frame.point_to_world([lx, ly, 0.0]);
            let (i, j) = terrain.nearest_cell(w[0], w[1]);
            values.push(terrain.height(i, j) - frame.origin[2]);
        }
    }
    Ok(LocalHeightmap {
        values,
        frame: *frame,
        spacing,
    })
}
