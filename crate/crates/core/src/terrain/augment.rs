//! Terrain augmentation that cannot interfere with a given motion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TerrainGrid;
use crate::error::{Error, Result};
use crate::motion::{sample_surface_points, MotionClip, Skeleton};

/// Vertical gap kept between a raised cell top and any non-contact body point.
pub const CLEARANCE: f64 = 1e-3;

/// Per-cell admissible height interval. Cells no body point passes over
/// carry `(-inf, +inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightBounds {
    pub rows: usize,
    pub cols: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl HeightBounds {
    pub fn unbounded(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            lower: vec![f64::NEG_INFINITY; rows * cols],
            upper: vec![f64::INFINITY; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        let k = i * self.cols + j;
        (self.lower[k], self.upper[k])
    }

    /// Cellwise intersection, for guarding several clips at once.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "bounds {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let lower = self
            .lower
            .iter()
            .zip(&other.lower)
            .map(|(a, b)| a.max(*b))
            .collect();
        let upper = self
            .upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| a.min(*b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            lower,
            upper,
        })
    }

    pub fn clamp(&self, terrain: &mut TerrainGrid) -> Result<()> {
        if terrain.rows != self.rows || terrain.cols != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "bounds {}x{} vs terrain {}x{}",
                self.rows, self.cols, terrain.rows, terrain.cols
            )));
        }
        for (k, h) in terrain.heights.iter_mut().enumerate() {
            *h = h.max(self.lower[k]).min(self.upper[k]);
        }
        Ok(())
    }
}

/// Bounds such that any terrain inside them leaves the clip's surface points
/// outside the terrain.
///
/// Cells under a body point with an active contact label are pinned to their
/// current height. Other cells under a body point are capped `CLEARANCE`
/// below the lowest point above them. A pinned cell whose cap falls below its
/// current height is pinned to the cap instead.
pub fn compute_noninterference_bounds(
    clip: &MotionClip,
    skeleton: &Skeleton,
    terrain: &TerrainGrid,
) -> HeightBounds {
    let mut b = HeightBounds::unbounded(terrain.rows, terrain.cols);
    let mut pinned = vec![false; terrain.rows * terrain.cols];
    for frame in &clip.frames {
        let pts = sample_surface_points(skeleton, frame);
        for (p, &body) in pts.points.iter().zip(&pts.body) {
            let Some(([i0, i1], [j0, j1])) = terrain.cells_touching(p[0], p[1]) else {
                continue;
            };
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let k = i * terrain.cols + j;
                    if frame.in_contact(body) {
                        pinned[k] = true;
                    } else {
                        b.upper[k] = b.upper[k].min(p[2] - CLEARANCE);
                    }
                }
            }
        }
    }
    for (k, &pin) in pinned.iter().enumerate() {
        if pin {
            let h = terrain.heights[k].min(b.upper[k]);
            b.lower[k] = h;
            b.upper[k] = h;
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Box side length range in cells.
    pub size_range: [f64; 2],
    /// Box top relative to the terrain height under the box center.
    pub height_range: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            size_range: [2.0, 8.0],
            height_range: [0.2, 1.5],
        }
    }
}

/// Places randomly rotated boxes on the terrain, then clamps into `bounds`.
///
/// A cell belongs to a box when its center lies inside the rotated rectangle;
/// boxes only ever raise cells.
pub fn augment_with_boxes(
    terrain: &TerrainGrid,
    bounds: &HeightBounds,
    num_boxes: usize,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<TerrainGrid> {
    let [slo, shi] = params.size_range;
    let [hlo, hhi] = params.height_range;
    if !(0.0 < slo && slo <= shi && hlo <= hhi) {
        return Err(Error::InvalidParameter("augmentation ranges".into()));
    }
    let mut out = terrain.clone();
    let [xmin, ymin] = terrain.cell_center(0, 0);
    let [xmax, ymax] = terrain.cell_center(terrain.rows - 1, terrain.cols - 1);
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    for _ in 0..num_boxes {
        let cx = uniform(rng, xmin, xmax.max(xmin));
        let cy = uniform(rng, ymin, ymax.max(ymin));
        let hx = 0.5 * uniform(rng, slo, shi) * terrain.dx;
        let hy = 0.5 * uniform(rng, slo, shi) * terrain.dy;
        let angle = uniform(rng, 0.0, std::f64::consts::PI);
        let (ci, cj) = terrain.nearest_cell(cx, cy);
        let top = terrain.height(ci, cj) + uniform(rng, hlo, hhi);
        let (s, c) = angle.sin_cos();
        for i in 0..terrain.rows {
            for j in 0..terrain.cols {
                let [x, y] = terrain.cell_center(i, j);
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if u.abs() <= hx && v.abs() <= hy {
                    let h = out.height(i, j).max(top);
                    out.set_height(i, j, h);
                }
            }
        }
    }
    bounds.clamp(&mut out)?;
    Ok(out)
}
