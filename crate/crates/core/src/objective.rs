//! Gains, costs, values and yaw selection: everything the planner maximizes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{wrap_angle, Aabb, Vec3};
use crate::planner::PlannerTree;
use crate::raycast::{panorama_into, CameraModel, CastParams, VisibleEntry, VisibleSet, VisitSink};
use crate::trajectory::{KinematicLimits, Trajectory};
use crate::tsdf_map::{impact_from_weight, TsdfGrid, VoxelClass, VoxelKey};

/// Weight treated as "one full observation" when normalizing confidence: one hit at 1 m.
pub const CONFIDENCE_REFERENCE_WEIGHT: f64 = 1.0;

pub const YAW_SECTIONS: usize = 12;
pub const SECTION_WIDTH_DEG: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainSpec {
    UnknownVolume,
    VoxelImpact {
        #[serde(default = "default_eta_min")]
        eta_min: f64,
    },
    SurfaceFrontiers {
        #[serde(default = "default_max_points")]
        max_points: u32,
        #[serde(default = "default_safety_distance")]
        safety_distance: f64,
    },
    VoxelConfidence {
        #[serde(default = "default_confidence")]
        threshold: f64,
    },
}

fn default_eta_min() -> f64 {
    0.01
}
fn default_max_points() -> u32 {
    50
}
fn default_safety_distance() -> f64 {
    1.0
}
fn default_confidence() -> f64 {
    0.4
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::VoxelImpact {
            eta_min: default_eta_min(),
        }
    }
}

impl GainSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GainSpec::UnknownVolume => Ok(()),
            GainSpec::VoxelImpact { eta_min } => check_eta_min(eta_min),
            GainSpec::SurfaceFrontiers {
                max_points,
                safety_distance,
            } => {
                if max_points < 1 || !(safety_distance >= 0.0) {
                    Err(invalid("surface frontiers need max_points >= 1 and safety_distance >= 0"))
                } else {
                    Ok(())
                }
            }
            GainSpec::VoxelConfidence { threshold } => check_threshold(threshold),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GainSpec::UnknownVolume => "unknown_volume",
            GainSpec::VoxelImpact { .. } => "voxel_impact",
            GainSpec::SurfaceFrontiers { .. } => "surface_frontiers",
            GainSpec::VoxelConfidence { .. } => "voxel_confidence",
        }
    }
}

fn check_eta_min(eta_min: f64) -> Result<()> {
    if (0.0..1.0).contains(&eta_min) {
        Ok(())
    } else {
        Err(invalid(format!("eta_min must lie in [0, 1), got {eta_min}")))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("confidence threshold must lie in (0, 1), got {t}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueSpec {
    Exponential {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Linear {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    #[default]
    GlobalNormalization,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    3.0
}

impl ValueSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ValueSpec::Exponential { lambda } if !(lambda > 0.0) => {
                Err(invalid("lambda must be positive"))
            }
            ValueSpec::Linear { alpha } if !(alpha > 0.0) => Err(invalid("alpha must be positive")),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ValueSpec::Exponential { .. } => "exponential",
            ValueSpec::Linear { .. } => "linear",
            ValueSpec::GlobalNormalization => "global_normalization",
        }
    }
}

/// Contribution of one visible voxel under `spec`, before any window-level cap.
pub fn voxel_contribution(spec: &GainSpec, grid: &TsdfGrid, key: VoxelKey, entry: &VisibleEntry) -> f64 {
    let class = grid.classify(key);
    match *spec {
        GainSpec::UnknownVolume => class.is_unobserved() as u8 as f64,
        GainSpec::VoxelImpact { eta_min } => match class {
            VoxelClass::NearSurfaceUnknown => 1.0,
            VoxelClass::Surface => {
                let eta = impact_from_weight(grid.weight(key), entry.min_depth, entry.ray_count.max(1))
                    .unwrap_or(0.0);
                if eta > eta_min {
                    (eta - eta_min) / (1.0 - eta_min)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        },
        GainSpec::SurfaceFrontiers { .. } => (class == VoxelClass::NearSurfaceUnknown) as u8 as f64,
        GainSpec::VoxelConfidence { threshold } => match class {
            VoxelClass::Unknown | VoxelClass::NearSurfaceUnknown => 1.0,
            VoxelClass::Surface => {
                let w_bar = (grid.weight(key) / CONFIDENCE_REFERENCE_WEIGHT).min(1.0);
                (w_bar < threshold) as u8 as f64
            }
            _ => 0.0,
        },
    }
}

fn sum_contributions(spec: &GainSpec, visible: &VisibleSet, grid: &TsdfGrid) -> f64 {
    // Key order keeps the floating point sum reproducible.
    visible
        .sorted_entries()
        .iter()
        .map(|(k, e)| voxel_contribution(spec, grid, *k, e))
        .sum()
}

pub fn gain_unknown_volume(visible: &VisibleSet, grid: &TsdfGrid) -> f64 {
    sum_contributions(&GainSpec::UnknownVolume, visible, grid)
}

pub fn gain_reconstruction(visible: &VisibleSet, grid: &TsdfGrid, eta_min: f64) -> Result<f64> {
    check_eta_min(eta_min)?;
    Ok(sum_contributions(&GainSpec::VoxelImpact { eta_min }, visible, grid))
}

pub fn gain_surface_frontiers(
    visible: &VisibleSet,
    grid: &TsdfGrid,
    max_points: u32,
    safety_distance: f64,
    viewpoint: &Vec3,
) -> f64 {
    let spec = GainSpec::SurfaceFrontiers {
        max_points,
        safety_distance,
    };
    let raw = sum_contributions(&spec, visible, grid);
    finalize_gain(&spec, raw, near_surface(grid, viewpoint, safety_distance))
}

pub fn gain_voxel_confidence(visible: &VisibleSet, grid: &TsdfGrid, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    Ok(sum_contributions(&GainSpec::VoxelConfidence { threshold }, visible, grid))
}

/// Applies the per-viewpoint rules that are not per-voxel sums.
fn finalize_gain(spec: &GainSpec, raw: f64, too_close: bool) -> f64 {
    match *spec {
        GainSpec::SurfaceFrontiers { max_points, .. } => {
            if too_close {
                0.0
            } else {
                raw.min(max_points as f64)
            }
        }
        _ => raw,
    }
}

/// Is any Surface voxel center within `radius` of `p`?
pub fn near_surface(grid: &TsdfGrid, p: &Vec3, radius: f64) -> bool {
    if radius <= 0.0 {
        return false;
    }
    let s = grid.voxel_size();
    let c = grid.key_of(p);
    let r = (radius / s).ceil() as i32 + 1;
    for dk in -r..=r {
        for dj in -r..=r {
            for di in -r..=r {
                let k = c.offset(di, dj, dk);
                if (grid.center(k) - p).norm() <= radius && grid.classify_local(k) == VoxelClass::Surface {
                    return true;
                }
            }
        }
    }
    false
}

/// Expected execution time: translation and yaw run concurrently.
pub fn cost_time(trajectory: &Trajectory, limits: &KinematicLimits) -> f64 {
    limits
        .translation_time(trajectory.length())
        .max(limits.yaw_time(trajectory.yaw_change()))
}

pub fn value_exponential(parent_value: f64, gain: f64, cost: f64, lambda: f64) -> f64 {
    parent_value + gain * (-lambda * cost).exp()
}

pub fn value_linear(parent_value: f64, gain: f64, cost: f64, alpha: f64) -> f64 {
    parent_value + gain - alpha * cost
}

/// Gain per cost along one root path; a zero-cost path contributes nothing.
#[inline]
pub fn path_ratio(gain_sum: f64, cost_sum: f64) -> f64 {
    if cost_sum > 0.0 {
        gain_sum / cost_sum
    } else {
        0.0
    }
}

/// Direct evaluation of the global normalization value: best gain-per-cost over every
/// root path ending inside the node's subtree. Walks each path from scratch.
pub fn value_global_normalization(tree: &PlannerTree, node: usize) -> Result<f64> {
    tree.node(node)?;
    let mut best = f64::NEG_INFINITY;
    let mut stack = vec![node];
    while let Some(id) = stack.pop() {
        let mut g = 0.0;
        let mut c = 0.0;
        let mut cur = Some(id);
        while let Some(k) = cur {
            let v = tree.node(k)?;
            g += v.gain;
            c += v.cost;
            cur = v.parent;
        }
        best = best.max(path_ratio(g, c));
        stack.extend(tree.node(id)?.children.iter().copied());
    }
    Ok(best.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawEvaluation {
    pub section_gains: [f64; YAW_SECTIONS],
    pub best_yaw: f64,
    pub best_gain: f64,
}

/// Section whose center is nearest to `azimuth`. Section `k` is centered at `k * 30 deg`.
#[inline]
pub fn section_of(azimuth: f64) -> usize {
    let w = SECTION_WIDTH_DEG.to_radians();
    ((azimuth / w).round() as i64).rem_euclid(YAW_SECTIONS as i64) as usize
}

/// Number of contiguous sections the horizontal field of view covers.
pub fn window_width(fov_horizontal_deg: f64) -> usize {
    ((fov_horizontal_deg / SECTION_WIDTH_DEG).round() as usize).clamp(1, YAW_SECTIONS)
}

/// Best contiguous window as `(yaw, gain)`. Window `k` is centered on section `k` (half a section
/// earlier for even widths); ties go to the lowest `k`.
pub fn best_window(sections: &[f64; YAW_SECTIONS], width: usize) -> (f64, f64) {
    let half = width / 2;
    let mut best_k = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..YAW_SECTIONS {
        let sum: f64 = (0..width)
            .map(|o| sections[(k + YAW_SECTIONS - half + o) % YAW_SECTIONS])
            .sum();
        if sum > best {
            best = sum;
            best_k = k;
        }
    }
    let offset = (width - 1) as f64 / 2.0 - half as f64;
    let yaw = wrap_angle(((best_k as f64 + offset) * SECTION_WIDTH_DEG).to_radians());
    (yaw, best)
}

/// Dense per-cell accumulation buffer reused across evaluations.
#[derive(Clone, Debug, Default)]
struct Scratch {
    stamp: Vec<u32>,
    generation: u32,
    depth: Vec<f32>,
    count: Vec<u32>,
    touched: Vec<usize>,
    dims: [i32; 3],
}

impl Scratch {
    fn reset(&mut self, grid: &TsdfGrid) {
        let n = grid.cell_count();
        if self.stamp.len() != n {
            self.stamp = vec![0; n];
            self.depth = vec![0.0; n];
            self.count = vec![0; n];
            self.generation = 0;
        }
        self.dims = grid.dims();
        self.touched.clear();
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }
}

impl VisitSink for Scratch {
    #[inline]
    fn record(&mut self, key: VoxelKey, depth: f64) {
        let idx = (key.k as usize * self.dims[1] as usize + key.j as usize) * self.dims[0] as usize
            + key.i as usize;
        if self.stamp[idx] != self.generation {
            self.stamp[idx] = self.generation;
            self.depth[idx] = depth as f32;
            self.count[idx] = 1;
            self.touched.push(idx);
        } else {
            self.depth[idx] = self.depth[idx].min(depth as f32);
            self.count[idx] += 1;
        }
    }
}

/// Evaluates viewpoint gains with yaw optimization. Holds reusable buffers and counts calls.
#[derive(Clone, Debug)]
pub struct GainEvaluator {
    pub spec: GainSpec,
    pub camera: CameraModel,
    pub f_sub: f64,
    pub cast: CastParams,
    /// Voxels outside this box contribute nothing.
    pub roi: Option<Aabb>,
    pub evaluations: u64,
    scratch: Scratch,
}

impl GainEvaluator {
    pub fn new(spec: GainSpec, camera: CameraModel, f_sub: f64) -> Result<Self> {
        spec.validate()?;
        camera.validate()?;
        if !(f_sub >= 1.0) {
            return Err(invalid("f_sub must be >= 1"));
        }
        Ok(GainEvaluator {
            spec,
            camera,
            f_sub,
            cast: CastParams::default(),
            roi: None,
            evaluations: 0,
            scratch: Scratch::default(),
        })
    }

    pub fn with_roi(mut self, roi: Option<Aabb>) -> Self {
        self.roi = roi;
        self
    }

    pub fn evaluate(&mut self, grid: &TsdfGrid, position: &Vec3) -> Result<YawEvaluation> {
        self.evaluations += 1;
        self.scratch.reset(grid);
        panorama_into(grid, position, &self.camera, self.f_sub, &self.cast, &mut self.scratch)?;
        let mut touched = std::mem::take(&mut self.scratch.touched);
        touched.sort_unstable();
        let mut sections = [0.0; YAW_SECTIONS];
        for &idx in &touched {
            let key = grid.key_at(idx);
            let center = grid.center(key);
            if let Some(roi) = &self.roi {
                if !roi.contains(&center) {
                    continue;
                }
            }
            let entry = VisibleEntry {
                min_depth: self.scratch.depth[idx] as f64,
                ray_count: self.scratch.count[idx],
            };
            let g = voxel_contribution(&self.spec, grid, key, &entry);
            if g != 0.0 {
                let d = center - position;
                sections[section_of(d.y.atan2(d.x))] += g;
            }
        }
        self.scratch.touched = touched;
        let (best_yaw, raw) = best_window(&sections, window_width(self.camera.fov_horizontal));
        let too_close = match self.spec {
            GainSpec::SurfaceFrontiers { safety_distance, .. } => {
                near_surface(grid, position, safety_distance)
            }
            _ => false,
        };
        Ok(YawEvaluation {
            section_gains: sections,
            best_yaw,
            best_gain: finalize_gain(&self.spec, raw, too_close),
        })
    }
}

/// One-shot yaw optimization with default casting parameters and no region filter.
pub fn yaw_optimize(
    grid: &TsdfGrid,
    position: &Vec3,
    camera: &CameraModel,
    gain_spec: &GainSpec,
    f_sub: f64,
) -> Result<YawEvaluation> {
    GainEvaluator::new(*gain_spec, *camera, f_sub)?.evaluate(grid, position)
}
