//! Procedural terrain generators and slicing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TerrainGrid, DEFAULT_CELL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomBoxesParams {
    pub grid: [usize; 2],
    pub num_boxes: usize,
    /// Inclusive box width/length range in cells.
    pub size_range: [usize; 2],
    pub height_range: [f64; 2],
    pub cell: f64,
}

impl Default for RandomBoxesParams {
    fn default() -> Self {
        Self {
            grid: [16, 16],
            num_boxes: 10,
            size_range: [5, 10],
            height_range: [-2.0, 2.0],
            cell: DEFAULT_CELL,
        }
    }
}

/// Boxes of constant height stamped one after another onto a flat grid,
/// followed by 2×2 max flattening.
pub fn gen_random_boxes(params: &RandomBoxesParams, rng: &mut impl Rng) -> Result<TerrainGrid> {
    let [n, m] = params.grid;
    if n < 2 || m < 2 {
        return Err(Error::InvalidParameter(format!(
            "grid {n}x{m} is smaller than 2x2"
        )));
    }
    let [lo, hi] = params.size_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidParameter(format!(
            "box size range [{lo}, {hi}]"
        )));
    }
    let [hlo, hhi] = params.height_range;
    if !(hlo <= hhi) || !hlo.is_finite() || !hhi.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "height range [{hlo}, {hhi}]"
        )));
    }
    let mut t = TerrainGrid::flat(n, m, params.cell, 0.0);
    for _ in 0..params.num_boxes {
        let w = rng.gen_range(lo..=hi);
        let l = rng.gen_range(lo..=hi);
        let ci = rng.gen_range(0..n) as isize;
        let cj = rng.gen_range(0..m) as isize;
        let h = if hlo == hhi {
            hlo
        } else {
            rng.gen_range(hlo..hhi)
        };
        let i0 = (ci - w as isize / 2).max(0) as usize;
        let j0 = (cj - l as isize / 2).max(0) as usize;
        let i1 = ((ci - w as isize / 2) + w as isize).clamp(0, n as isize) as usize;
        let j1 = ((cj - l as isize / 2) + l as isize).clamp(0, m as isize) as usize;
        for i in i0..i1 {
            for j in j0..j1 {
                t.set_height(i, j, h);
            }
        }
    }
    Ok(flatten_2x2(&t))
}

/// Replaces every aligned 2×2 block by its maximum. An odd trailing row or
/// column is paired with a copy of itself.
pub fn flatten_2x2(terrain: &TerrainGrid) -> TerrainGrid {
    let mut out = terrain.clone();
    let (n, m) = (terrain.rows, terrain.cols);
    for bi in (0..n).step_by(2) {
        for bj in (0..m).step_by(2) {
            let is = bi..(bi + 2).min(n);
            let js = bj..(bj + 2).min(m);
            let mx = is
                .clone()
                .flat_map(|i| js.clone().map(move |j| (i, j)))
                .map(|(i, j)| terrain.height(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            for i in is.clone() {
                for j in js.clone() {
                    out.set_height(i, j, mx);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomWalkParams {
    pub grid: [usize; 2],
    pub num_paths: usize,
    pub height_range: [f64; 2],
    pub cell: f64,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self {
            grid: [32, 32],
            num_paths: 10,
            height_range: [-1.0, 1.0],
            cell: DEFAULT_CELL,
        }
    }
}

pub fn gen_random_walk(params: &RandomWalkParams, rng: &mut impl Rng) -> Result<TerrainGrid> {
    gen_random_walk_paths(params, rng).map(|(t, _)| t)
}

/// Random walks carved into a flat grid, each at its own height. Returns the
/// visited cells of every walk in order.
pub fn gen_random_walk_paths(
    params: &RandomWalkParams,
    rng: &mut impl Rng,
) -> Result<(TerrainGrid, Vec<Vec<(usize, usize)>>)> {
    let [n, m] = params.grid;
    if n < 4 || m < 4 {
        return Err(Error::InvalidParameter(format!(
            "grid {n}x{m} is smaller than 4x4"
        )));
    }
    let [hlo, hhi] = params.height_range;
    if !(hlo <= hhi) {
        return Err(Error::InvalidParameter(format!(
            "height range [{hlo}, {hhi}]"
        )));
    }
    let steps = 3 * n.max(m);
    let mut t = TerrainGrid::flat(n, m, params.cell, 0.0);
    let mut paths = Vec::with_capacity(params.num_paths);
    for _ in 0..params.num_paths {
        let h = if hlo == hhi {
            hlo
        } else {
            rng.gen_range(hlo..hhi)
        };
        let mut cur = (rng.gen_range(0..n), rng.gen_range(0..m));
        let mut path = vec![cur];
        for _ in 0..steps {
            let (i, j) = cur;
            let mut nbrs = Vec::with_capacity(4);
            if i > 0 {
                nbrs.push((i - 1, j));
            }
            if i + 1 < n {
                nbrs.push((i + 1, j));
            }
            if j > 0 {
                nbrs.push((i, j - 1));
            }
            if j + 1 < m {
                nbrs.push((i, j + 1));
            }
            cur = nbrs[rng.gen_range(0..nbrs.len())];
            path.push(cur);
        }
        for &(i, j) in &path {
            t.set_height(i, j, h);
        }
        paths.push(path);
    }
    Ok((t, paths))
}

/// Sub-grid copy that keeps the world coordinates of the shared cells.
pub fn slice_terrain(
    terrain: &TerrainGrid,
    origin: [usize; 2],
    size: [usize; 2],
) -> Result<TerrainGrid> {
    let [oi, oj] = origin;
    let [si, sj] = size;
    if si == 0 || sj == 0 || oi + si > terrain.rows || oj + sj > terrain.cols {
        return Err(Error::OutOfBounds(format!(
            "slice {si}x{sj} at ({oi}, {oj}) exceeds {}x{} terrain",
            terrain.rows, terrain.cols
        )));
    }
    let heights = (oi..oi + si)
        .flat_map(|i| (oj..oj + sj).map(move |j| (i, j)))
        .map(|(i, j)| terrain.height(i, j))
        .collect();
    let [x0, y0] = terrain.cell_center(oi, oj);
    Ok(TerrainGrid {
        x0,
        y0,
        dx: terrain.dx,
        dy: terrain.dy,
        rows: si,
        cols: sj,
        heights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::LocalFrame;
    use crate::terrain::{sample_local_heightmap, DEFAULT_HEIGHTMAP_EXTENT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_boxes_is_flat() {
        let p = RandomBoxesParams {
            num_boxes: 0,
            ..Default::default()
        };
        let t = gen_random_boxes(&p, &mut rng(1)).unwrap();
        assert!(t.heights.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn boxes_end_up_block_uniform() {
        for seed in 0..20 {
            let t = gen_random_boxes(&RandomBoxesParams::default(), &mut rng(seed)).unwrap();
            for bi in (0..16).step_by(2) {
                for bj in (0..16).step_by(2) {
                    let h = t.height(bi, bj);
                    assert_eq!(t.height(bi + 1, bj), h);
                    assert_eq!(t.height(bi, bj + 1), h);
                    assert_eq!(t.height(bi + 1, bj + 1), h);
                }
            }
            assert!(t.heights.iter().all(|h| (-2.0..=2.0).contains(h)));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let p = RandomBoxesParams::default();
        assert_eq!(
            gen_random_boxes(&p, &mut rng(9)).unwrap(),
            gen_random_boxes(&p, &mut rng(9)).unwrap()
        );
        let w = RandomWalkParams::default();
        assert_eq!(
            gen_random_walk(&w, &mut rng(9)).unwrap(),
            gen_random_walk(&w, &mut rng(9)).unwrap()
        );
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let bad = [
            RandomBoxesParams {
                grid: [1, 16],
                ..Default::default()
            },
            RandomBoxesParams {
                size_range: [6, 5],
                ..Default::default()
            },
            RandomBoxesParams {
                size_range: [0, 5],
                ..Default::default()
            },
            RandomBoxesParams {
                height_range: [1.0, -1.0],
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(gen_random_boxes(&p, &mut rng(0)).is_err());
        }
        let w = RandomWalkParams {
            grid: [3, 8],
            ..Default::default()
        };
        assert!(gen_random_walk(&w, &mut rng(0)).is_err());
    }

    #[test]
    fn flatten_takes_block_max() {
        let t =
            TerrainGrid::from_heights(0.0, 0.0, 0.4, 0.4, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten_2x2(&t).heights, vec![4.0; 4]);
    }

    #[test]
    fn flatten_matches_block_oracle_and_is_idempotent() {
        let mut r = rng(3);
        for (n, m) in [(8, 8), (7, 9), (5, 4)] {
            let heights = (0..n * m).map(|_| r.gen_range(-2.0..2.0)).collect();
            let t = TerrainGrid::from_heights(0.0, 0.0, 0.4, 0.4, n, m, heights).unwrap();
            let f = flatten_2x2(&t);
            for i in 0..n {
                for j in 0..m {
                    let (bi, bj) = (i / 2 * 2, j / 2 * 2);
                    let mut mx = f64::NEG_INFINITY;
                    for a in bi..(bi + 2).min(n) {
                        for b in bj..(bj + 2).min(m) {
                            mx = mx.max(t.height(a, b));
                        }
                    }
                    assert_eq!(f.height(i, j), mx);
                    assert!(f.height(i, j) >= t.height(i, j));
                }
            }
            assert_eq!(flatten_2x2(&f), f);
        }
    }

    #[test]
    fn zero_walks_is_flat() {
        let p = RandomWalkParams {
            num_paths: 0,
            ..Default::default()
        };
        assert!(gen_random_walk(&p, &mut rng(0))
            .unwrap()
            .heights
            .iter()
            .all(|&h| h == 0.0));
    }

    #[test]
    fn walk_paths_are_connected() {
        let (t, paths) = gen_random_walk_paths(&RandomWalkParams::default(), &mut rng(5)).unwrap();
        assert_eq!(paths.len(), 10);
        for path in &paths {
            assert_eq!(path.len(), 3 * 32 + 1);
            for w in path.windows(2) {
                let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                assert_eq!(d, 1);
            }
        }
        // the last walk is never overwritten
        let last = paths.last().unwrap();
        let h = t.height(last[0].0, last[0].1);
        assert!(last.iter().all(|&(i, j)| t.height(i, j) == h));
    }

    #[test]
    fn slicing() {
        let mut r = rng(8);
        let heights = (0..100 * 100).map(|_| r.gen_range(-2.0..2.0)).collect();
        let big = TerrainGrid::from_heights(-3.0, 2.0, 0.4, 0.4, 100, 100, heights).unwrap();
        assert_eq!(slice_terrain(&big, [0, 0], [100, 100]).unwrap(), big);
        let s = slice_terrain(&big, [30, 40], [16, 16]).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(s.height(i, j), big.height(30 + i, 40 + j));
                let (a, b) = (s.cell_center(i, j), big.cell_center(30 + i, 40 + j));
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
        assert!(slice_terrain(&big, [90, 0], [16, 16]).is_err());
    }

    #[test]
    fn slice_sdf_agrees_away_from_borders() {
        let mut r = rng(12);
        let heights = (0..40 * 40).map(|_| r.gen_range(-0.5..0.5)).collect();
        let big = TerrainGrid::from_heights(0.0, 0.0, 0.4, 0.4, 40, 40, heights).unwrap();
        let s = slice_terrain(&big, [10, 10], [16, 16]).unwrap();
        for _ in 0..500 {
            // interior cells 4..12 of the slice, within 0.3 m of the surface
            let i = r.gen_range(4..12);
            let j = r.gen_range(4..12);
            let c = s.cell_center(i, j);
            let p = [
                c[0] + r.gen_range(-0.2..0.2),
                c[1] + r.gen_range(-0.2..0.2),
                s.height(i, j) + r.gen_range(-0.1..0.3),
            ];
            assert!((s.sd(p) - big.sd(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_and_heightmap_commute() {
        let mut r = rng(21);
        let heights = (0..64 * 64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let big = TerrainGrid::from_heights(0.0, 0.0, 0.4, 0.4, 64, 64, heights).unwrap();
        let s = slice_terrain(&big, [10, 12], [40, 40]).unwrap();
        let c = big.cell_center(30, 32);
        let frame = LocalFrame::new([c[0], c[1], 0.0], 0.0);
        let a = sample_local_heightmap(&big, &frame, DEFAULT_HEIGHTMAP_EXTENT).unwrap();
        let b = sample_local_heightmap(&s, &frame, DEFAULT_HEIGHTMAP_EXTENT).unwrap();
        assert_eq!(a.values, b.values);
    }
}
