//! Clearance bookkeeping for edge collision checks.
//!
//! Every cell keeps a count of not-free cells inside its inflated sphere, updated from
//! the grid's change log. A point is safe when the count of its cell is zero.

use crate::geometry::Vec3;
use crate::tsdf_map::TsdfGrid;

#[derive(Clone, Debug)]
pub struct SafetyMap {
    dims: [i32; 3],
    origin: Vec3,
    voxel_size: f64,
    radius: f64,
    offsets: Vec<[i32; 3]>,
    blocked: Vec<u16>,
    free: Vec<bool>,
    /// Unknown cells inside this sphere count as free.
    bubble: Option<(Vec3, f64)>,
}

impl SafetyMap {
    /// `radius` is the robot's collision radius. Cells are checked against the sphere
    /// that covers the radius from anywhere inside the cell.
    pub fn new(grid: &mut TsdfGrid, radius: f64, bubble: Option<(Vec3, f64)>) -> Self {
        let s = grid.voxel_size();
        let reach = radius + 0.5 * 3f64.sqrt() * s;
        let r = (reach / s).ceil() as i32;
        let mut offsets = Vec::new();
        for k in -r..=r {
            for j in -r..=r {
                for i in -r..=r {
                    let d = Vec3::new(i as f64, j as f64, k as f64) * s;
                    if d.norm() <= reach {
                        offsets.push([i, j, k]);
                    }
                }
            }
        }
        let n = grid.cell_count();
        let mut map = SafetyMap {
            dims: grid.dims(),
            origin: grid.origin(),
            voxel_size: s,
            radius,
            blocked: vec![offsets.len() as u16; n],
            offsets,
            free: vec![false; n],
            bubble,
        };
        grid.drain_changes();
        for idx in 0..n {
            if map.effective_free(grid, idx) {
                map.flip(idx, true);
            }
        }
        map
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn effective_free(&self, grid: &TsdfGrid, idx: usize) -> bool {
        let key = grid.key_at(idx);
        match grid.get(key) {
            Some(v) => v.distance >= self.voxel_size,
            None => self
                .bubble
                .is_some_and(|(c, r)| (grid.center(key) - c).norm() <= r),
        }
    }

    fn key3(&self, idx: usize) -> [i32; 3] {
        let nx = self.dims[0] as usize;
        let ny = self.dims[1] as usize;
        [(idx % nx) as i32, ((idx / nx) % ny) as i32, (idx / (nx * ny)) as i32]
    }

    fn flip(&mut self, idx: usize, now_free: bool) {
        if self.free[idx] == now_free {
            return;
        }
        self.free[idx] = now_free;
        let [i, j, k] = self.key3(idx);
        let (nx, ny, nz) = (self.dims[0], self.dims[1], self.dims[2]);
        for o in &self.offsets {
            let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
            if a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz {
                continue;
            }
            let t = (c as usize * ny as usize + b as usize) * nx as usize + a as usize;
            if now_free {
                self.blocked[t] -= 1;
            } else {
                self.blocked[t] += 1;
            }
        }
    }

    /// Applies every grid change since the last sync.
    pub fn sync(&mut self, grid: &mut TsdfGrid) {
        for idx in grid.drain_changes() {
            let f = self.effective_free(grid, idx);
            self.flip(idx, f);
        }
    }

    pub fn is_point_safe(&self, p: &Vec3) -> bool {
        let g = (p - self.origin) / self.voxel_size;
        let (i, j, k) = (g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64);
        if i < 0 || j < 0 || k < 0 || i >= self.dims[0] as i64 || j >= self.dims[1] as i64 || k >= self.dims[2] as i64 {
            return false;
        }
        let idx = (k as usize * self.dims[1] as usize + j as usize) * self.dims[0] as usize + i as usize;
        self.blocked[idx] == 0
    }

    /// Distance from `p` to the nearest not-free cell center within the inflated sphere
    /// of `p`'s cell; cells outside the grid count as not free. `None` outside the grid.
    fn clearance(&self, p: &Vec3) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size;
        let c = [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64];
        if (0..3).any(|a| c[a] < 0 || c[a] >= self.dims[a] as i64) {
            return None;
        }
        let mut best = f64::INFINITY;
        for o in &self.offsets {
            let q = [c[0] + o[0] as i64, c[1] + o[1] as i64, c[2] + o[2] as i64];
            let inside = (0..3).all(|a| q[a] >= 0 && q[a] < self.dims[a] as i64);
            if inside {
                let idx = (q[2] as usize * self.dims[1] as usize + q[1] as usize) * self.dims[0] as usize + q[0] as usize;
                if self.free[idx] {
                    continue;
                }
            }
            let center = self.origin + Vec3::new(q[0] as f64 + 0.5, q[1] as f64 + 0.5, q[2] as f64 + 0.5) * self.voxel_size;
            best = best.min((center - p).norm());
        }
        Some(best)
    }

    /// Farthest point along `a -> b` for a robot that starts inside the inflated margin.
    /// Until a safe sample is reached the clearance to the nearest not-free cell may not
    /// shrink; after that every sample must be safe. `None` when no safe sample is reached.
    pub fn escape_along(&self, a: &Vec3, b: &Vec3) -> Option<Vec3> {
        let len = (b - a).norm();
        let n = (len / (0.5 * self.voxel_size)).ceil().max(1.0) as usize;
        let mut prev = self.clearance(a)?;
        let mut last = None;
        for i in 1..=n {
            let p = a + (b - a) * (i as f64 / n as f64);
            if last.is_some() {
                if !self.is_point_safe(&p) {
                    break;
                }
                last = Some(p);
                continue;
            }
            if self.is_point_safe(&p) {
                last = Some(p);
                continue;
            }
            match self.clearance(&p) {
                Some(c) if c >= prev - 1e-9 => prev = c,
                _ => break,
            }
        }
        last
    }

    /// Segment check that also admits escapes from an unsafe start.
    pub fn is_edge_safe(&self, a: &Vec3, b: &Vec3) -> bool {
        if self.is_point_safe(a) {
            return self.is_segment_safe(a, b);
        }
        self.escape_along(a, b).is_some_and(|p| (p - b).norm() < 1e-9)
    }

    /// Samples every half voxel, both ends included.
    pub fn is_segment_safe(&self, a: &Vec3, b: &Vec3) -> bool {
        let len = (b - a).norm();
        let n = (len / (0.5 * self.voxel_size)).ceil().max(1.0) as usize;
        (0..=n).all(|i| self.is_point_safe(&(a + (b - a) * (i as f64 / n as f64))))
    }

    /// Farthest point along `a -> b` reachable through safe samples. From an unsafe `a`
    /// this is `escape_along`.
    pub fn last_safe_along(&self, a: &Vec3, b: &Vec3) -> Option<Vec3> {
        if !self.is_point_safe(a) {
            return self.escape_along(a, b);
        }
        let len = (b - a).norm();
        let n = (len / (0.5 * self.voxel_size)).ceil().max(1.0) as usize;
        let mut last = *a;
        for i in 1..=n {
            let p = a + (b - a) * (i as f64 / n as f64);
            if !self.is_point_safe(&p) {
                break;
            }
            last = p;
        }
        Some(last)
    }
}
