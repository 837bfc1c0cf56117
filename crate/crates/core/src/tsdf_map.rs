//! Voxel-grid TSDF with weighted fusion and voxel classification.
//!
//! Storage is dense over the grid bounds; a voxel with zero weight is treated
//! as absent, so the observable contract is that of a sparse map keyed by
//! [`VoxelKey`] where a missing key means *unknown*.

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Aabb, Vec3};
use crate::traversal::VoxelWalker;

/// Integer grid index. The voxel center is `origin + (i + 0.5, j + 0.5, k + 0.5) * s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelKey {
    #[inline]
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelKey { i, j, k }
    }

    #[inline]
    pub fn offset(self, di: i32, dj: i32, dk: i32) -> Self {
        VoxelKey::new(self.i + di, self.j + dj, self.k + dk)
    }

    /// The six face neighbours.
    pub fn face_neighbors(self) -> [VoxelKey; 6] {
        [
            self.offset(1, 0, 0),
            self.offset(-1, 0, 0),
            self.offset(0, 1, 0),
            self.offset(0, -1, 0),
            self.offset(0, 0, 1),
            self.offset(0, 0, -1),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TsdfVoxel {
    pub distance: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoxelClass {
    Unknown,
    Free,
    Surface,
    /// Observed with a distance at or below `-voxel_size`, i.e. solid interior.
    Occupied,
    NearSurfaceUnknown,
}

impl VoxelClass {
    pub fn is_unobserved(self) -> bool {
        matches!(self, VoxelClass::Unknown | VoxelClass::NearSurfaceUnknown)
    }

    /// Stops rays and blocks motion.
    pub fn is_blocking(self) -> bool {
        matches!(self, VoxelClass::Surface | VoxelClass::Occupied)
    }
}

/// Map parameters that are not geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    pub truncation: f64,
    #[serde(default = "default_weight_cap")]
    pub weight_cap: f64,
}

fn default_weight_cap() -> f64 {
    1000.0
}

impl Default for TsdfConfig {
    fn default() -> Self {
        TsdfConfig {
            voxel_size: 0.1,
            truncation: 0.2,
            weight_cap: default_weight_cap(),
        }
    }
}

/// Quadratic measurement weight `z^-2`.
pub fn input_weight(z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(invalid(format!("depth must be positive, got {z}")));
    }
    Ok(1.0 / (z * z))
}

/// Weighted running average of a voxel distance. Returns `(d_new, w_new)` with
/// the weight capped at `weight_cap` after averaging.
pub fn fuse_distance(w: f64, d: f64, w_in: f64, d_in: f64, weight_cap: f64) -> Result<(f64, f64)> {
    if w < 0.0 || w_in < 0.0 {
        return Err(invalid(format!("weights must be nonnegative, got {w} and {w_in}")));
    }
    let total = w + w_in;
    if total <= 0.0 {
        return Err(invalid("combined weight is zero"));
    }
    let d_new = (w * d + w_in * d_in) / total;
    Ok((d_new, total.min(weight_cap)))
}

/// Impact a new observation at depth `z` seen by `n_rays` rays has on a voxel of weight `weight`.
pub fn impact_from_weight(weight: f64, z: f64, n_rays: u32) -> Result<f64> {
    if !(z > 0.0) {
        return Err(invalid(format!("depth must be positive, got {z}")));
    }
    if n_rays == 0 {
        return Err(invalid("ray count must be at least one"));
    }
    Ok(1.0 / (1.0 + z * z * weight / n_rays as f64))
}

#[derive(Clone, Debug)]
pub struct TsdfGrid {
    voxel_size: f64,
    truncation: f64,
    weight_cap: f64,
    origin: Vec3,
    dims: [i32; 3],
    voxels: Vec<TsdfVoxel>,
    observed: usize,
    /// Indices whose observed/free status flipped since the last drain.
    changes: Vec<usize>,
}

#[inline]
fn status(v: &TsdfVoxel, s: f64) -> (bool, bool) {
    (v.weight > 0.0, v.weight > 0.0 && v.distance >= s)
}

impl TsdfGrid {
    pub fn new(bounds: Aabb, config: TsdfConfig) -> Result<Self> {
        let s = config.voxel_size;
        if !(s > 0.0) {
            return Err(invalid("voxel size must be positive"));
        }
        if config.truncation < 2.0 * s - 1e-12 {
            return Err(invalid(format!(
                "truncation {} must be at least twice the voxel size {}",
                config.truncation, s
            )));
        }
        if !(config.weight_cap > 0.0) {
            return Err(invalid("weight cap must be positive"));
        }
        let size = bounds.size();
        let mut dims = [0i32; 3];
        for i in 0..3 {
            if !(size[i] > 0.0) {
                return Err(invalid("grid bounds must have positive extent"));
            }
            dims[i] = ((size[i] / s) - 1e-9).ceil().max(1.0) as i32;
        }
        let n = dims.iter().map(|&d| d as usize).product();
        Ok(TsdfGrid {
            voxel_size: s,
            truncation: config.truncation,
            weight_cap: config.weight_cap,
            origin: bounds.min,
            dims,
            voxels: vec![TsdfVoxel::default(); n],
            observed: 0,
            changes: Vec::new(),
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn weight_cap(&self) -> f64 {
        self.weight_cap
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn dims(&self) -> [i32; 3] {
        self.dims
    }

    pub fn bounds(&self) -> Aabb {
        let ext = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64)
            * self.voxel_size;
        Aabb::new(self.origin, self.origin + ext)
    }

    /// Number of voxels with positive weight.
    pub fn observed_len(&self) -> usize {
        self.observed
    }

    #[inline]
    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        let g = (p - self.origin) / self.voxel_size;
        VoxelKey::new(g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32)
    }

    #[inline]
    pub fn center(&self, key: VoxelKey) -> Vec3 {
        self.origin
            + Vec3::new(
                key.i as f64 + 0.5,
                key.j as f64 + 0.5,
                key.k as f64 + 0.5,
            ) * self.voxel_size
    }

    #[inline]
    pub fn contains_key(&self, key: VoxelKey) -> bool {
        key.i >= 0
            && key.j >= 0
            && key.k >= 0
            && key.i < self.dims[0]
            && key.j < self.dims[1]
            && key.k < self.dims[2]
    }

    /// Total number of cells, observed or not.
    pub fn cell_count(&self) -> usize {
        self.voxels.len()
    }

    /// Dense index of an in-bounds key.
    #[inline]
    pub fn linear_index(&self, key: VoxelKey) -> Option<usize> {
        self.index(key)
    }

    /// Indices whose observed or free status changed since the previous call.
    pub fn drain_changes(&mut self) -> Vec<usize> {
        let mut c = std::mem::take(&mut self.changes);
        c.sort_unstable();
        c.dedup();
        c
    }

    #[inline]
    fn store(&mut self, idx: usize, new: TsdfVoxel) {
        let old = self.voxels[idx];
        let (so, sn) = (status(&old, self.voxel_size), status(&new, self.voxel_size));
        if so != sn {
            self.changes.push(idx);
        }
        self.observed = self.observed + sn.0 as usize - so.0 as usize;
        self.voxels[idx] = new;
    }

    #[inline]
    fn index(&self, key: VoxelKey) -> Option<usize> {
        if self.contains_key(key) {
            Some(
                (key.k as usize * self.dims[1] as usize + key.j as usize) * self.dims[0] as usize
                    + key.i as usize,
            )
        } else {
            None
        }
    }

    pub fn key_at(&self, idx: usize) -> VoxelKey {
        let nx = self.dims[0] as usize;
        let ny = self.dims[1] as usize;
        VoxelKey::new((idx % nx) as i32, ((idx / nx) % ny) as i32, (idx / (nx * ny)) as i32)
    }

    /// The stored voxel, or `None` when unobserved or out of bounds.
    #[inline]
    pub fn get(&self, key: VoxelKey) -> Option<TsdfVoxel> {
        self.index(key)
            .map(|i| self.voxels[i])
            .filter(|v| v.weight > 0.0)
    }

    #[inline]
    pub fn weight(&self, key: VoxelKey) -> f64 {
        self.get(key).map_or(0.0, |v| v.weight)
    }

    /// All observed voxels in storage order.
    pub fn iter_observed(&self) -> impl Iterator<Item = (VoxelKey, TsdfVoxel)> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, v)| v.weight > 0.0)
            .map(move |(i, v)| (self.key_at(i), *v))
    }

    /// Fuses one measurement into a voxel. Out-of-bounds keys are ignored.
    pub fn fuse(&mut self, key: VoxelKey, d_in: f64, w_in: f64) -> Result<()> {
        let Some(idx) = self.index(key) else {
            return Ok(());
        };
        let d_in = d_in.clamp(-self.truncation, self.truncation);
        let v = self.voxels[idx];
        let (d, w) = fuse_distance(v.weight, v.distance, w_in, d_in, self.weight_cap)?;
        // A capped voxel keeps its weight; never let it shrink.
        self.store(
            idx,
            TsdfVoxel {
                distance: d.clamp(-self.truncation, self.truncation),
                weight: w.max(v.weight),
            },
        );
        Ok(())
    }

    /// Overwrites a voxel. Test and tooling helper; weight must be nonnegative.
    pub fn set(&mut self, key: VoxelKey, voxel: TsdfVoxel) -> Result<()> {
        if voxel.weight < 0.0 {
            return Err(invalid("weight must be nonnegative"));
        }
        let Some(idx) = self.index(key) else {
            return Err(invalid(format!("key {key:?} outside grid")));
        };
        self.store(
            idx,
            TsdfVoxel {
                distance: voxel.distance.clamp(-self.truncation, self.truncation),
                weight: voxel.weight,
            },
        );
        Ok(())
    }

    /// Class of a voxel without the neighbour lookup (never `NearSurfaceUnknown`).
    #[inline]
    pub fn classify_local(&self, key: VoxelKey) -> VoxelClass {
        match self.get(key) {
            None => VoxelClass::Unknown,
            Some(v) if v.distance.abs() < self.voxel_size => VoxelClass::Surface,
            Some(v) if v.distance >= self.voxel_size => VoxelClass::Free,
            Some(_) => VoxelClass::Occupied,
        }
    }

    pub fn classify(&self, key: VoxelKey) -> VoxelClass {
        match self.classify_local(key) {
            VoxelClass::Unknown => {
                if key
                    .face_neighbors()
                    .iter()
                    .any(|n| self.classify_local(*n) == VoxelClass::Surface)
                {
                    VoxelClass::NearSurfaceUnknown
                } else {
                    VoxelClass::Unknown
                }
            }
            c => c,
        }
    }

    pub fn impact_factor(&self, key: VoxelKey, z: f64, n_rays: u32) -> Result<f64> {
        impact_from_weight(self.weight(key), z, n_rays)
    }

    /// Fuses a point cloud given in the sensor frame.
    ///
    /// Along each ray, voxels further than the truncation distance in front of
    /// the measured point receive `+truncation`; voxels within the band receive
    /// the projected signed distance. All updates use the weight `z^-2`.
    pub fn integrate_pointcloud(&mut self, sensor_pose: &Isometry3<f64>, points: &[Vec3]) {
        let origin = sensor_pose.translation.vector;
        let trunc = self.truncation;
        for p in points {
            let z = p.norm();
            if !(z > 1e-9) {
                continue;
            }
            let dir = sensor_pose.rotation * (p / z);
            let w_in = 1.0 / (z * z);
            let walker = VoxelWalker::new(
                &self.origin,
                self.voxel_size,
                &origin,
                &dir,
                0.0,
                z + trunc,
            );
            for (key, _, _) in walker {
                let Some(idx) = self.index(key) else {
                    break;
                };
                let t_c = (self.center(key) - origin).dot(&dir);
                let sdf = z - t_c;
                if sdf < -trunc {
                    continue;
                }
                let d_in = sdf.min(trunc);
                let v = self.voxels[idx];
                let total = v.weight + w_in;
                let d = (v.weight * v.distance + w_in * d_in) / total;
                self.store(
                    idx,
                    TsdfVoxel {
                        distance: d.clamp(-trunc, trunc),
                        weight: total.min(self.weight_cap).max(v.weight),
                    },
                );
            }
        }
    }

    /// Marks space along rays that returned no point as free, up to `length`.
    /// `dirs` are unit directions in the sensor frame. Uses the weight of a hit at `length`.
    pub fn integrate_free_rays(&mut self, sensor_pose: &Isometry3<f64>, dirs: &[Vec3], length: f64) {
        let origin = sensor_pose.translation.vector;
        let trunc = self.truncation;
        let w_in = 1.0 / (length * length);
        for d in dirs {
            let dir = sensor_pose.rotation * d;
            let walker = VoxelWalker::new(&self.origin, self.voxel_size, &origin, &dir, 0.0, length);
            for (key, _, _) in walker {
                let Some(idx) = self.index(key) else {
                    break;
                };
                let v = self.voxels[idx];
                let total = v.weight + w_in;
                let d = (v.weight * v.distance + w_in * trunc) / total;
                self.store(
                    idx,
                    TsdfVoxel {
                        distance: d.clamp(-trunc, trunc),
                        weight: total.min(self.weight_cap).max(v.weight),
                    },
                );
            }
        }
    }
}
