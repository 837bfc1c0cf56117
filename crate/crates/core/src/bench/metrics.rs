//! Ground truth, observable volume and the two run metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Aabb, Vec3};
use crate::sim::Scene;
use crate::tsdf_map::{TsdfGrid, VoxelClass, VoxelKey};

/// Exact signed distance of every cell center of a grid layout.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    dims: [i32; 3],
    voxel_size: f64,
    distance: Vec<f64>,
}

impl GroundTruth {
    pub fn new(scene: &Scene, grid: &TsdfGrid) -> Self {
        let distance = (0..grid.cell_count())
            .map(|i| scene.signed_distance(&grid.center(grid.key_at(i))))
            .collect();
        GroundTruth {
            dims: grid.dims(),
            voxel_size: grid.voxel_size(),
            distance,
        }
    }

    pub fn distance(&self, idx: usize) -> f64 {
        self.distance[idx]
    }

    fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> {
        let [nx, ny, nz] = self.dims.map(|d| d as usize);
        let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
        let mut out = [usize::MAX; 6];
        if i > 0 {
            out[0] = idx - 1;
        }
        if i + 1 < nx {
            out[1] = idx + 1;
        }
        if j > 0 {
            out[2] = idx - nx;
        }
        if j + 1 < ny {
            out[3] = idx + nx;
        }
        if k > 0 {
            out[4] = idx - nx * ny;
        }
        if k + 1 < nz {
            out[5] = idx + nx * ny;
        }
        out.into_iter().filter(|&n| n != usize::MAX)
    }
}

/// Cells a robot starting at `start` can observe, as sorted linear indices.
///
/// Reachable cells come from a flood fill over centers with more than `clearance` to
/// every solid. From there a breadth-first walk through open cells, limited to `range`
/// of path length, stands in for line of sight; it collects open cells and the surface
/// crust it touches. Only cells with centers inside `roi` are kept.
pub fn observable_set(
    truth: &GroundTruth,
    grid: &TsdfGrid,
    start: &Vec3,
    clearance: f64,
    range: f64,
    roi: &Aabb,
) -> Result<Vec<usize>> {
    let s = truth.voxel_size;
    let Some(start_idx) = grid.linear_index(grid.key_of(start)) else {
        return Err(invalid("start outside the grid"));
    };
    if truth.distance(start_idx) <= clearance {
        return Err(invalid("start is inside or too close to a solid"));
    }
    let n = truth.distance.len();
    // Path length in steps from the reachable set; u32::MAX is unvisited.
    let mut steps = vec![u32::MAX; n];
    let mut queue = VecDeque::from([start_idx]);
    steps[start_idx] = 0;
    let mut reachable = Vec::new();
    while let Some(c) = queue.pop_front() {
        reachable.push(c);
        for nb in truth.neighbours(c) {
            if steps[nb] == u32::MAX && truth.distance(nb) > clearance {
                steps[nb] = 0;
                queue.push_back(nb);
            }
        }
    }
    let max_steps = (range / s).floor() as u32;
    let mut queue: VecDeque<usize> = reachable.into_iter().collect();
    let mut keep = vec![false; n];
    while let Some(c) = queue.pop_front() {
        keep[c] = true;
        for nb in truth.neighbours(c) {
            let d = truth.distance(nb);
            if d > 0.0 {
                if steps[nb] == u32::MAX && steps[c] < max_steps {
                    steps[nb] = steps[c] + 1;
                    queue.push_back(nb);
                }
            } else if d > -s {
                keep[nb] = true;
            }
        }
    }
    Ok((0..n)
        .filter(|&i| keep[i] && roi.contains(&grid.center(grid.key_at(i))))
        .collect())
}

/// Fraction of `observable` cells with nonzero weight.
pub fn exploration_ratio(grid: &TsdfGrid, observable: &[usize]) -> Result<f64> {
    if observable.is_empty() {
        return Err(invalid("empty observable set"));
    }
    let seen = observable
        .iter()
        .filter(|&&i| grid.weight(grid.key_at(i)) > 0.0)
        .count();
    Ok(seen as f64 / observable.len() as f64)
}

/// Mean absolute difference between stored and true distance over Surface voxels inside
/// the scene's region of interest, or `None` when there are none.
pub fn reconstruction_error(grid: &TsdfGrid, scene: &Scene) -> Option<f64> {
    mean_surface_error(grid, &scene.roi, |key| scene.signed_distance(&grid.center(key)))
}

/// Same as `reconstruction_error` with precomputed truth.
pub fn reconstruction_error_cached(grid: &TsdfGrid, truth: &GroundTruth, roi: &Aabb) -> Option<f64> {
    mean_surface_error(grid, roi, |key| {
        truth.distance(grid.linear_index(key).expect("observed voxels lie in the grid"))
    })
}

fn mean_surface_error(grid: &TsdfGrid, roi: &Aabb, truth: impl Fn(VoxelKey) -> f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (key, v) in grid.iter_observed() {
        if grid.classify_local(key) == VoxelClass::Surface && roi.contains(&grid.center(key)) {
            sum += (truth(key) - v.distance).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Sample mean and sample standard deviation (n - 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| MeanStd {
            mean,
            std,
            n: values.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::tsdf_map::{TsdfConfig, TsdfVoxel};
    use approx::assert_relative_eq;

    fn grid(bounds: Aabb) -> TsdfGrid {
        TsdfGrid::new(
            bounds,
            TsdfConfig {
                voxel_size: 0.2,
                truncation: 0.4,
                weight_cap: 1000.0,
            },
        )
        .unwrap()
    }

    fn walls(b: &Aabb, t: f64) -> Vec<Aabb> {
        let (lo, hi) = (b.min, b.max);
        vec![
            Aabb::new(lo, Vec3::new(lo.x + t, hi.y, hi.z)),
            Aabb::new(Vec3::new(hi.x - t, lo.y, lo.z), hi),
            Aabb::new(lo, Vec3::new(hi.x, lo.y + t, hi.z)),
            Aabb::new(Vec3::new(lo.x, hi.y - t, lo.z), hi),
            Aabb::new(lo, Vec3::new(hi.x, hi.y, lo.z + t)),
            Aabb::new(Vec3::new(lo.x, lo.y, hi.z - t), hi),
        ]
    }

    fn scene(bounds: Aabb, boxes: Vec<Aabb>, start: Vec3) -> Scene {
        Scene {
            bounds,
            roi: bounds,
            start: Pose::new(start, 0.0),
            boxes,
        }
    }

    #[test]
    fn single_room_is_interior_plus_crust() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(4.0, 4.0, 3.0));
        let sc = scene(b, walls(&b, 0.4), Vec3::new(2.0, 2.0, 1.5));
        let g = grid(b);
        let truth = GroundTruth::new(&sc, &g);
        let obs = observable_set(&truth, &g, &sc.start.position, 0.3, 10.0, &b).unwrap();
        // Every open cell of the single room, plus wall cells within a voxel of the face
        // that share a face with an open cell.
        let open = |k: VoxelKey| g.contains_key(k) && sc.signed_distance(&g.center(k)) > 0.0;
        let mut expected = Vec::new();
        for i in 0..g.cell_count() {
            let k = g.key_at(i);
            let d = sc.signed_distance(&g.center(k));
            if d > 0.0 || (d > -0.2 && k.face_neighbors().iter().any(|&n| open(n))) {
                expected.push(i);
            }
        }
        assert_eq!(obs, expected);
    }

    #[test]
    fn sealed_cavity_is_excluded() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(8.0, 4.0, 3.0));
        let mut boxes = walls(&b, 0.4);
        // Closed 1 m shell around a cavity at x in 5.6 .. 6.6.
        let shell = Aabb::new(Vec3::new(5.0, 1.0, 0.4), Vec3::new(7.2, 3.0, 2.6));
        boxes.extend(walls(&shell, 0.4));
        let sc = scene(b, boxes, Vec3::new(2.0, 2.0, 1.5));
        let g = grid(b);
        let truth = GroundTruth::new(&sc, &g);
        let obs = observable_set(&truth, &g, &sc.start.position, 0.3, 20.0, &b).unwrap();
        let inside = g.linear_index(g.key_of(&Vec3::new(6.1, 2.0, 1.5))).unwrap();
        assert!(obs.binary_search(&inside).is_err());
    }

    #[test]
    fn narrow_corridor_blocks_second_room() {
        // Two 4 m rooms separated by a wall with a 1 m opening.
        let b = Aabb::new(Vec3::zeros(), Vec3::new(8.4, 4.0, 3.0));
        let mut boxes = walls(&b, 0.2);
        boxes.push(Aabb::new(Vec3::new(4.0, 0.0, 0.0), Vec3::new(4.4, 1.5, 3.0)));
        boxes.push(Aabb::new(Vec3::new(4.0, 2.5, 0.0), Vec3::new(4.4, 4.0, 3.0)));
        let sc = scene(b, boxes, Vec3::new(2.0, 2.0, 1.5));
        let g = grid(b);
        let truth = GroundTruth::new(&sc, &g);
        let obs = observable_set(&truth, &g, &sc.start.position, 1.2, 1.5, &b).unwrap();
        let far = g.linear_index(g.key_of(&Vec3::new(7.0, 2.0, 1.5))).unwrap();
        assert!(obs.binary_search(&far).is_err());
        assert!(obs.iter().all(|&i| g.center(g.key_at(i)).x < 4.6));
        // With a generous clearance bound the second room opens up.
        let obs = observable_set(&truth, &g, &sc.start.position, 0.3, 1.5, &b).unwrap();
        assert!(obs.binary_search(&far).is_ok());
    }

    #[test]
    fn start_in_solid_is_an_error() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(4.0, 4.0, 3.0));
        let sc = scene(b, walls(&b, 0.4), Vec3::new(0.1, 2.0, 1.5));
        let g = grid(b);
        let truth = GroundTruth::new(&sc, &g);
        assert!(observable_set(&truth, &g, &sc.start.position, 0.3, 5.0, &b).is_err());
    }

    #[test]
    fn ratio_counts_observed() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0));
        let mut g = grid(b);
        let obs: Vec<usize> = (0..10).collect();
        assert_eq!(exploration_ratio(&g, &obs).unwrap(), 0.0);
        for i in 0..5 {
            g.set(g.key_at(i), TsdfVoxel { distance: 0.4, weight: 1.0 }).unwrap();
        }
        assert_eq!(exploration_ratio(&g, &obs).unwrap(), 0.5);
        for i in 0..10 {
            g.set(g.key_at(i), TsdfVoxel { distance: 0.4, weight: 1.0 }).unwrap();
        }
        assert_eq!(exploration_ratio(&g, &obs).unwrap(), 1.0);
        assert!(exploration_ratio(&g, &[]).is_err());
    }

    #[test]
    fn error_on_single_surface_voxel() {
        let b = Aabb::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0));
        let mut g = grid(b);
        let key = VoxelKey::new(2, 2, 2);
        let c = g.center(key);
        // Box face through the voxel center.
        let sc = scene(b, vec![Aabb::new(Vec3::new(c.x, -5.0, -5.0), Vec3::new(9.0, 9.0, 9.0))], c);
        assert_eq!(reconstruction_error(&g, &sc), None);
        g.set(key, TsdfVoxel { distance: 0.0, weight: 1.0 }).unwrap();
        assert_eq!(reconstruction_error(&g, &sc), Some(0.0));
        g.set(key, TsdfVoxel { distance: 0.03, weight: 1.0 }).unwrap();
        assert_relative_eq!(reconstruction_error(&g, &sc).unwrap(), 0.03, epsilon = 1e-12);
        let truth = GroundTruth::new(&sc, &g);
        assert_eq!(reconstruction_error_cached(&g, &truth, &sc.roi), reconstruction_error(&g, &sc));
        let elsewhere = Aabb::new(Vec3::repeat(0.8), Vec3::repeat(1.0));
        assert_eq!(reconstruction_error_cached(&g, &truth, &elsewhere), None);
    }

    #[test]
    fn aggregate_statistics() {
        assert_eq!(mean_std(&[4.2]), Some((4.2, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_relative_eq!(m, 2.0);
        assert_relative_eq!(s, 2f64.sqrt());
        assert_eq!(mean_std(&[0.7; 5]).unwrap().1, 0.0);
        assert_eq!(mean_std(&[]), None);
    }
}
