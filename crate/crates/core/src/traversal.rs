//! Amanatides & Woo voxel traversal.

use crate::geometry::Vec3;
use crate::tsdf_map::VoxelKey;

/// Walks every cell of a regular grid pierced by a ray segment, in order.
///
/// Yields `(key, t_in, t_out)` with `t` measured from the ray origin. The first
/// cell reports `t_in = t_start` even when the ray entered it earlier.
#[derive(Clone, Debug)]
pub struct VoxelWalker {
    cell: [i32; 3],
    step: [i32; 3],
    t_next: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
    first: bool,
}

impl VoxelWalker {
    pub fn new(
        grid_origin: &Vec3,
        voxel_size: f64,
        ray_origin: &Vec3,
        dir: &Vec3,
        t_start: f64,
        t_end: f64,
    ) -> Self {
        let p = ray_origin + dir * t_start;
        let mut cell = [0i32; 3];
        let mut step = [0i32; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            let g = (p[i] - grid_origin[i]) / voxel_size;
            let c = g.floor();
            cell[i] = c as i32;
            if dir[i] > 0.0 {
                step[i] = 1;
                let boundary = grid_origin[i] + (c + 1.0) * voxel_size;
                t_next[i] = t_start + (boundary - p[i]) / dir[i];
                t_delta[i] = voxel_size / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                let boundary = grid_origin[i] + c * voxel_size;
                t_next[i] = t_start + (boundary - p[i]) / dir[i];
                t_delta[i] = -voxel_size / dir[i];
            }
        }
        VoxelWalker {
            cell,
            step,
            t_next,
            t_delta,
            t: t_start,
            t_end,
            first: true,
        }
    }
}

impl Iterator for VoxelWalker {
    type Item = (VoxelKey, f64, f64);

    #[inline]
    fn next(&mut self) -> Option<Self::Item> {
        if self.first {
            self.first = false;
            if self.t > self.t_end {
                return None;
            }
        } else {
            let axis = if self.t_next[0] <= self.t_next[1] {
                if self.t_next[0] <= self.t_next[2] {
                    0
                } else {
                    2
                }
            } else if self.t_next[1] <= self.t_next[2] {
                1
            } else {
                2
            };
            self.t = self.t_next[axis];
            if self.t >= self.t_end {
                return None;
            }
            self.cell[axis] += self.step[axis];
            self.t_next[axis] += self.t_delta[axis];
        }
        let t_out = self.t_next[0]
            .min(self.t_next[1])
            .min(self.t_next[2])
            .min(self.t_end);
        Some((
            VoxelKey::new(self.cell[0], self.cell[1], self.cell[2]),
            self.t,
            t_out,
        ))
    }
}
