//! Camera frustum, single-ray traversal and hierarchical ("iterative") visibility casting.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{direction, Pose, Vec3};
use crate::traversal::VoxelWalker;
use crate::tsdf_map::{TsdfGrid, VoxelKey};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fov_horizontal: f64,
    pub fov_vertical: f64,
    pub range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fov_horizontal: 90.0,
            fov_vertical: 73.7,
            range: 5.0,
        }
    }
}

impl CameraModel {
    pub fn new(fov_horizontal: f64, fov_vertical: f64, range: f64) -> Result<Self> {
        let c = CameraModel {
            fov_horizontal,
            fov_vertical,
            range,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for fov in [self.fov_horizontal, self.fov_vertical] {
            if !(fov > 0.0 && fov <= 180.0) {
                return Err(invalid(format!("field of view {fov} outside (0, 180]")));
            }
        }
        if !(self.range > 0.0) {
            return Err(invalid("camera range must be positive"));
        }
        Ok(())
    }

    pub fn fov_h_rad(&self) -> f64 {
        self.fov_horizontal.to_radians()
    }

    pub fn fov_v_rad(&self) -> f64 {
        self.fov_vertical.to_radians()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibleEntry {
    pub min_depth: f64,
    pub ray_count: u32,
}

#[derive(Clone, Debug, Default)]
pub struct VisibleSet {
    pub entries: FxHashMap<VoxelKey, VisibleEntry>,
    /// Cells yielded by the traversal, counting repeats.
    pub voxel_visits: u64,
    pub rays_cast: u64,
}

impl VisibleSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VisibleEntry> {
        self.entries.get(key)
    }

    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut k: Vec<_> = self.entries.keys().copied().collect();
        k.sort_unstable();
        k
    }

    /// Entries in key order, for reproducible iteration.
    pub fn sorted_entries(&self) -> Vec<(VoxelKey, VisibleEntry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, e)| (*k, *e)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

}

/// Receives every recorded traversal. Lets callers accumulate into their own buffers.
pub trait VisitSink {
    fn record(&mut self, key: VoxelKey, depth: f64);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CastStats {
    pub voxel_visits: u64,
    pub rays_cast: u64,
}

impl VisitSink for VisibleSet {
    fn record(&mut self, key: VoxelKey, depth: f64) {
        self.entries
            .entry(key)
            .and_modify(|e| {
                e.min_depth = e.min_depth.min(depth);
                e.ray_count += 1;
            })
            .or_insert(VisibleEntry {
                min_depth: depth,
                ray_count: 1,
            });
    }
}

/// Length of the ray before it leaves the grid, capped at `max_len`.
fn clip_to_grid(grid: &TsdfGrid, origin: &Vec3, dir: &Vec3, max_len: f64) -> f64 {
    match grid.bounds().ray_intersection(origin, dir) {
        Some((_, t1)) => t1.min(max_len),
        None => 0.0,
    }
}

/// Voxels pierced by the segment, in order, up to and including the first blocking voxel.
/// The segment is clipped to the grid.
pub fn cast_ray(grid: &TsdfGrid, origin: &Vec3, dir: &Vec3, max_len: f64) -> Vec<VoxelKey> {
    let mut out = Vec::new();
    let t_end = clip_to_grid(grid, origin, dir, max_len);
    if t_end <= 0.0 {
        return out;
    }
    for (key, _, _) in VoxelWalker::new(&grid.origin(), grid.voxel_size(), origin, dir, 0.0, t_end) {
        if !grid.contains_key(key) {
            break;
        }
        out.push(key);
        if grid.classify_local(key).is_blocking() {
            break;
        }
    }
    out
}

/// Walks one ray from `t_start`, recording into `set`. Returns the termination depth.
fn walk_into<S: VisitSink>(
    grid: &TsdfGrid,
    origin: &Vec3,
    dir: &Vec3,
    t_start: f64,
    t_end: f64,
    set: &mut S,
    stats: &mut CastStats,
) -> f64 {
    stats.rays_cast += 1;
    if t_start >= t_end {
        return t_end;
    }
    let half = 0.5 * grid.voxel_size();
    for (key, t_in, t_out) in
        VoxelWalker::new(&grid.origin(), grid.voxel_size(), origin, dir, t_start, t_end)
    {
        stats.voxel_visits += 1;
        if !grid.contains_key(key) {
            return t_in;
        }
        let depth = (0.5 * (t_in + t_out)).max(half);
        set.record(key, depth);
        if grid.classify_local(key).is_blocking() {
            return t_in;
        }
    }
    t_end
}

/// One axis of the angular ray lattice.
#[derive(Clone, Debug)]
struct Axis {
    n: usize,
    step: f64,
    first: f64,
    wrap: bool,
    level: Vec<u32>,
}

const TOP_LEVEL: u32 = 31;

impl Axis {
    /// `n` samples spanning `[-span/2, span/2]` inclusive.
    fn open(span: f64, spacing: f64) -> Axis {
        let n = ((span / spacing) - 1e-9).ceil().max(1.0) as usize + 1;
        let step = span / (n - 1) as f64;
        let level = (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    TOP_LEVEL
                } else {
                    i.trailing_zeros()
                }
            })
            .collect();
        Axis {
            n,
            step,
            first: -0.5 * span,
            wrap: false,
            level,
        }
    }

    /// `n` samples evenly around the full circle starting at 0.
    fn circle(spacing: f64) -> Axis {
        let two_pi = 2.0 * std::f64::consts::PI;
        let n = ((two_pi / spacing) - 1e-9).ceil().max(4.0) as usize;
        let level = (0..n)
            .map(|i| if i == 0 { TOP_LEVEL } else { i.trailing_zeros() })
            .collect();
        Axis {
            n,
            step: two_pi / n as f64,
            first: 0.0,
            wrap: true,
            level,
        }
    }

    fn angle(&self, i: usize) -> f64 {
        self.first + self.step * i as f64
    }

    /// Indices with level above `lvl` within `radius` steps of `i`.
    fn coarser_near(&self, i: usize, lvl: u32, radius: usize, out: &mut Vec<usize>) {
        out.clear();
        let n = self.n as i64;
        let r = radius as i64;
        for d in -r..=r {
            let j = i as i64 + d;
            let j = if self.wrap {
                j.rem_euclid(n)
            } else if j < 0 || j >= n {
                continue;
            } else {
                j
            } as usize;
            if self.level[j] > lvl {
                out.push(j);
            }
        }
        out.sort_unstable();
        out.dedup();
    }
}

/// Tuning of the hierarchical caster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CastParams {
    /// Multiplier on the depth at which a refinement ray starts. 1.0 starts a ray exactly
    /// where the coarser lattice spacing reaches `f_sub * s`.
    #[serde(default = "default_start_scale")]
    pub start_scale: f64,
    /// How far in front of a blocked coarser neighbour a refinement ray starts, in voxels.
    #[serde(default = "default_occlusion_margin")]
    pub occlusion_margin: f64,
}

fn default_start_scale() -> f64 {
    1.0
}

fn default_occlusion_margin() -> f64 {
    2.0
}

impl Default for CastParams {
    fn default() -> Self {
        CastParams {
            start_scale: default_start_scale(),
            occlusion_margin: default_occlusion_margin(),
        }
    }
}

struct Lattice {
    az: Axis,
    el: Axis,
    yaw: f64,
}

impl Lattice {
    fn frustum(pose: &Pose, camera: &CameraModel, spacing: f64) -> Lattice {
        Lattice {
            az: Axis::open(camera.fov_h_rad(), spacing),
            el: Axis::open(camera.fov_v_rad(), spacing),
            yaw: pose.yaw,
        }
    }

    fn panorama(camera: &CameraModel, spacing: f64) -> Lattice {
        Lattice {
            az: Axis::circle(spacing),
            el: Axis::open(camera.fov_v_rad(), spacing),
            yaw: 0.0,
        }
    }

    fn dir(&self, a: usize, e: usize) -> Vec3 {
        direction(self.yaw + self.az.angle(a), self.el.angle(e))
    }

    fn level(&self, a: usize, e: usize) -> u32 {
        self.az.level[a].min(self.el.level[e])
    }
}

fn angular_spacing(grid: &TsdfGrid, camera: &CameraModel, f_sub: f64) -> Result<f64> {
    camera.validate()?;
    if !(f_sub >= 1.0) {
        return Err(invalid(format!("sub-sampling factor must be >= 1, got {f_sub}")));
    }
    Ok(f_sub * grid.voxel_size() / camera.range)
}

fn cast_lattice<S: VisitSink>(
    grid: &TsdfGrid,
    origin: &Vec3,
    camera: &CameraModel,
    lattice: &Lattice,
    f_sub: f64,
    params: &CastParams,
    set: &mut S,
) -> CastStats {
    let s = grid.voxel_size();
    let (na, ne) = (lattice.az.n, lattice.el.n);
    let widest = lattice.az.step.max(lattice.el.step);
    let margin = params.occlusion_margin * s;

    let mut order: Vec<(u32, usize, usize)> = Vec::with_capacity(na * ne);
    for e in 0..ne {
        for a in 0..na {
            order.push((lattice.level(a, e), a, e));
        }
    }
    // Coarse first; ties in index order.
    order.sort_unstable_by(|x, y| y.0.cmp(&x.0).then(x.2.cmp(&y.2)).then(x.1.cmp(&y.1)));

    let mut term = vec![f64::NAN; na * ne];
    let mut stats = CastStats::default();
    let mut near_a = Vec::new();
    let mut near_e = Vec::new();
    for &(lvl, a, e) in &order {
        let dir = lattice.dir(a, e);
        let t_end = clip_to_grid(grid, origin, &dir, camera.range);
        let mut t0 = 0.0;
        if lvl < TOP_LEVEL {
            let coarse = (1u64 << (lvl + 1).min(40)) as f64;
            t0 = params.start_scale * f_sub * s / (coarse * widest);
            let radius = (2usize << lvl.min(30)).min(na.max(ne));
            lattice.az.coarser_near(a, lvl, radius, &mut near_a);
            lattice.el.coarser_near(e, lvl, radius, &mut near_e);
            for &ea in &near_e {
                for &aa in &near_a {
                    let t = term[ea * na + aa];
                    if !t.is_nan() && t - margin < t0 {
                        t0 = t - margin;
                    }
                }
            }
            t0 = t0.max(0.0);
        }
        term[e * na + a] = walk_into(grid, origin, &dir, t0, t_end, set, &mut stats);
    }
    stats
}

fn into_set(stats: CastStats, mut set: VisibleSet) -> VisibleSet {
    set.voxel_visits += stats.voxel_visits;
    set.rays_cast += stats.rays_cast;
    set
}

/// Hierarchical visibility from `pose` with ray spacing `f_sub * s` at maximum range.
pub fn visible_voxels(grid: &TsdfGrid, pose: &Pose, camera: &CameraModel, f_sub: f64) -> Result<VisibleSet> {
    visible_voxels_with(grid, pose, camera, f_sub, &CastParams::default())
}

pub fn visible_voxels_with(
    grid: &TsdfGrid,
    pose: &Pose,
    camera: &CameraModel,
    f_sub: f64,
    params: &CastParams,
) -> Result<VisibleSet> {
    let spacing = angular_spacing(grid, camera, f_sub)?;
    let lattice = Lattice::frustum(pose, camera, spacing);
    let mut set = VisibleSet::default();
    let stats = cast_lattice(grid, &pose.position, camera, &lattice, f_sub, params, &mut set);
    Ok(into_set(stats, set))
}

/// Same lattice as `visible_voxels` at `f_sub = 1`, with every ray cast from the origin.
pub fn exhaustive_visible_voxels(grid: &TsdfGrid, pose: &Pose, camera: &CameraModel) -> Result<VisibleSet> {
    let spacing = angular_spacing(grid, camera, 1.0)?;
    let lattice = Lattice::frustum(pose, camera, spacing);
    let mut set = VisibleSet::default();
    let mut stats = CastStats::default();
    for e in 0..lattice.el.n {
        for a in 0..lattice.az.n {
            let dir = lattice.dir(a, e);
            let t_end = clip_to_grid(grid, &pose.position, &dir, camera.range);
            walk_into(grid, &pose.position, &dir, 0.0, t_end, &mut set, &mut stats);
        }
    }
    Ok(into_set(stats, set))
}

/// Full 360 degree horizontal sweep with the camera's vertical field of view.
pub fn panorama_voxels(
    grid: &TsdfGrid,
    position: &Vec3,
    camera: &CameraModel,
    f_sub: f64,
    params: &CastParams,
) -> Result<VisibleSet> {
    let mut set = VisibleSet::default();
    let stats = panorama_into(grid, position, camera, f_sub, params, &mut set)?;
    Ok(into_set(stats, set))
}

/// Panorama cast into a caller-provided sink.
pub fn panorama_into<S: VisitSink>(
    grid: &TsdfGrid,
    position: &Vec3,
    camera: &CameraModel,
    f_sub: f64,
    params: &CastParams,
    sink: &mut S,
) -> Result<CastStats> {
    let spacing = angular_spacing(grid, camera, f_sub)?;
    let lattice = Lattice::panorama(camera, spacing);
    Ok(cast_lattice(grid, position, camera, &lattice, f_sub, params, sink))
}
