//! Box-world simulator: ground truth, depth rendering, sensor noise, pose drift and
//! kinematic execution of planned segments.

use std::path::Path;

use nalgebra::Isometry3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::raycast::CameraModel;
use crate::trajectory::{KinematicLimits, Trajectory};
use crate::tsdf_map::TsdfGrid;

/// Union of solid boxes inside a bounded world.
///
/// TOML layout:
///
/// ```toml
/// bounds = { min = [0, 0, 0], max = [20, 20, 2.5] }
/// roi = { min = [0, 0, 0], max = [20, 20, 2.5] }
/// start = { position = [1, 1, 1.2], yaw = 0.0 }
///
/// [[boxes]]
/// min = [0, 0, 0]
/// max = [20, 0.2, 2.5]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds: Aabb,
    pub roi: Aabb,
    pub start: Pose,
    #[serde(default)]
    pub boxes: Vec<Aabb>,
}

impl Scene {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Checks the region of interest and a start clearance of `radius`.
    pub fn validate(&self, radius: f64) -> Result<()> {
        if !self.bounds.contains_box(&self.roi) {
            return Err(invalid("region of interest must lie inside the world bounds"));
        }
        if !self.bounds.contains(&self.start.position) {
            return Err(invalid("start outside the world bounds"));
        }
        if self.signed_distance(&self.start.position) <= radius {
            return Err(invalid("start pose is not clear of solids"));
        }
        Ok(())
    }

    /// Distance to the nearest solid, negative inside. Exact outside the solids; inside
    /// overlapping boxes it is the deepest single-box depth.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.boxes
            .iter()
            .map(|b| b.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit along a unit ray within `max_t`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, max_t: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for b in &self.boxes {
            if let Some((t0, _)) = b.ray_intersection(origin, dir) {
                if t0 <= max_t && best.is_none_or(|t| t0 < t) {
                    best = Some(t0);
                }
            }
        }
        best
    }
}

/// Pixel grid of the depth camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { width: 90, height: 64 }
    }
}

/// Unit ray directions of every pixel in the sensor frame (x forward, y left, z up).
pub fn pixel_rays(camera: &CameraModel, res: Resolution) -> Vec<Vec3> {
    let th = (0.5 * camera.fov_h_rad()).tan();
    let tv = (0.5 * camera.fov_v_rad()).tan();
    let mut rays = Vec::with_capacity((res.width * res.height) as usize);
    for v in 0..res.height {
        let z = tv * (1.0 - 2.0 * (v as f64 + 0.5) / res.height as f64);
        for u in 0..res.width {
            let y = th * (1.0 - 2.0 * (u as f64 + 0.5) / res.width as f64);
            rays.push(Vec3::new(1.0, y, z).normalize());
        }
    }
    rays
}

/// One depth image as sensor-frame points plus the directions that saw nothing in range.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthFrame {
    pub points: Vec<Vec3>,
    pub misses: Vec<Vec3>,
}

/// Ray/box intersection per pixel. Boxes farther than the range are skipped.
pub fn render_depth(scene: &Scene, pose: &Isometry3<f64>, camera: &CameraModel, res: Resolution) -> DepthFrame {
    render_rays(scene, pose, &pixel_rays(camera, res), camera.range)
}

fn render_rays(scene: &Scene, pose: &Isometry3<f64>, rays: &[Vec3], range: f64) -> DepthFrame {
    let origin = pose.translation.vector;
    let near: Vec<&Aabb> = scene
        .boxes
        .iter()
        .filter(|b| b.signed_distance(&origin) <= range)
        .collect();
    let mut frame = DepthFrame::default();
    for r in rays {
        let dir = pose.rotation * r;
        let mut best: Option<f64> = None;
        for b in &near {
            if let Some((t, _)) = b.ray_intersection(&origin, &dir) {
                if t <= range && best.is_none_or(|x| t < x) {
                    best = Some(t);
                }
            }
        }
        match best {
            Some(t) if t > 0.0 => frame.points.push(r * t),
            Some(_) => {}
            None => frame.misses.push(*r),
        }
    }
    frame
}

/// Adds depth error `N(k z^2, k z^2)` along each ray, where `z` is the range to the point.
pub fn apply_noise(points: &mut [Vec3], coefficient: f64, rng: &mut impl Rng) {
    if coefficient == 0.0 {
        return;
    }
    for p in points.iter_mut() {
        let z = p.norm();
        if z <= 0.0 {
            continue;
        }
        let s = coefficient * z * z;
        let e: f64 = rng.sample(StandardNormal);
        *p *= (z + s + s * e) / z;
    }
}

/// Envelope of the pose error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftBounds {
    pub position: f64,
    /// Degrees.
    pub roll_pitch_deg: f64,
    /// Degrees.
    pub yaw_deg: f64,
}

impl Default for DriftBounds {
    fn default() -> Self {
        DriftBounds {
            position: 0.05,
            roll_pitch_deg: 1.5,
            yaw_deg: 5.0,
        }
    }
}

/// Pose error offsets. Stays inside `DriftBounds`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DriftState {
    pub position: Vec3,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// Reflected random walk dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub bounds: DriftBounds,
    /// Step standard deviation per sensor frame, as a fraction of each bound.
    pub step_fraction: f64,
    /// Seconds per sensor frame.
    pub frame_period: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel {
            bounds: DriftBounds::default(),
            step_fraction: 1.0 / 50.0,
            frame_period: 1.0 / 3.0,
        }
    }
}

fn reflect(x: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    // Fold onto [-b, b] with period 4b.
    let y = (x + b).rem_euclid(4.0 * b);
    if y <= 2.0 * b {
        y - b
    } else {
        3.0 * b - y
    }
}

fn reflect_ball(p: Vec3, r: f64) -> Vec3 {
    let n = p.norm();
    if n <= r || n == 0.0 {
        return p;
    }
    let folded = reflect(n, r).abs();
    p * (folded / n)
}

/// One Gaussian step of every offset, scaled to `dt`, reflected at the bounds.
pub fn drift_step(drift: &DriftState, model: &DriftModel, dt: f64, rng: &mut impl Rng) -> DriftState {
    let k = model.step_fraction * (dt / model.frame_period).sqrt();
    let b = &model.bounds;
    if k == 0.0 {
        return *drift;
    }
    let mut g = || -> f64 { rng.sample(StandardNormal) };
    let sp = k * b.position;
    let step = Vec3::new(g() * sp, g() * sp, g() * sp);
    let rp = b.roll_pitch_deg.to_radians();
    let yw = b.yaw_deg.to_radians();
    let roll = reflect(drift.roll + g() * k * rp, rp);
    let pitch = reflect(drift.pitch + g() * k * rp, rp);
    let yaw = reflect(drift.yaw + g() * k * yw, yw);
    DriftState {
        position: reflect_ball(drift.position + step, b.position),
        roll,
        pitch,
        yaw,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    #[serde(default = "d_noise")]
    pub noise_coefficient: f64,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default = "d_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub resolution: Resolution,
}

fn d_noise() -> f64 {
    0.0024
}
fn d_rate() -> f64 {
    3.0
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            noise_coefficient: d_noise(),
            camera: CameraModel::default(),
            frame_rate: d_rate(),
            resolution: Resolution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default = "d_true")]
    pub noise: bool,
    #[serde(default = "d_true")]
    pub drift: bool,
    #[serde(default)]
    pub drift_bounds: DriftBounds,
    /// Integration step, seconds.
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Radius of the physical body used for collision checks.
    #[serde(default = "d_body")]
    pub body_radius: f64,
}

fn d_true() -> bool {
    true
}
fn d_dt() -> f64 {
    0.02
}
fn d_body() -> f64 {
    0.3
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sensor: SensorConfig::default(),
            noise: true,
            drift: true,
            drift_bounds: DriftBounds::default(),
            dt: d_dt(),
            body_radius: d_body(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.camera.validate()?;
        if !(self.sensor.noise_coefficient >= 0.0) {
            return Err(invalid("noise coefficient must be nonnegative"));
        }
        if !(self.sensor.frame_rate > 0.0 && self.dt > 0.0 && self.body_radius >= 0.0) {
            return Err(invalid("frame rate and dt must be positive"));
        }
        if self.sensor.resolution.width == 0 || self.sensor.resolution.height == 0 {
            return Err(invalid("empty depth resolution"));
        }
        Ok(())
    }

    pub fn drift_model(&self) -> DriftModel {
        DriftModel {
            bounds: self.drift_bounds,
            step_fraction: if self.drift { 1.0 / 50.0 } else { 0.0 },
            frame_period: 1.0 / self.sensor.frame_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotState {
    pub time: f64,
    pub true_pose: Pose,
    /// What the robot believes; follows the commanded trajectory exactly.
    pub reported_pose: Pose,
    pub drift: DriftState,
}

/// Result of running one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    /// States at every sensor frame time passed during the segment.
    pub frames: Vec<RobotState>,
    pub elapsed: f64,
}

pub struct Simulator {
    pub scene: Scene,
    pub cfg: SimConfig,
    time: f64,
    frame_index: u64,
    reported: Pose,
    drift: DriftState,
    drift_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    rays: Vec<Vec3>,
    distance: f64,
}

impl Simulator {
    pub fn new(scene: Scene, cfg: SimConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        scene.validate(cfg.body_radius)?;
        let mut drift_rng = ChaCha8Rng::seed_from_u64(seed);
        drift_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(2);
        Ok(Simulator {
            reported: scene.start,
            rays: pixel_rays(&cfg.sensor.camera, cfg.sensor.resolution),
            scene,
            cfg,
            time: 0.0,
            frame_index: 0,
            drift: DriftState::default(),
            drift_rng,
            noise_rng,
            distance: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn distance_traveled(&self) -> f64 {
        self.distance
    }

    pub fn reported_pose(&self) -> Pose {
        self.reported
    }

    pub fn drift(&self) -> DriftState {
        self.drift
    }

    fn true_of(reported: &Pose, drift: &DriftState) -> Pose {
        Pose::new(reported.position - drift.position, reported.yaw - drift.yaw)
    }

    pub fn state(&self) -> RobotState {
        RobotState {
            time: self.time,
            true_pose: Self::true_of(&self.reported, &self.drift),
            reported_pose: self.reported,
            drift: self.drift,
        }
    }

    fn frame_time(&self, index: u64) -> f64 {
        index as f64 / self.cfg.sensor.frame_rate
    }

    /// Follows `traj` in steps of `dt`, emitting a state at every sensor frame time.
    /// Fails with a collision when the true position gets within the body radius of a solid.
    pub fn execute_trajectory(&mut self, traj: &Trajectory, limits: &KinematicLimits) -> Result<Execution> {
        let model = self.cfg.drift_model();
        let t0 = self.time;
        let mut frames = Vec::new();
        let mut local = 0.0;
        let mut last = traj.start.position;
        while local < traj.duration {
            let step = self.cfg.dt.min(traj.duration - local);
            local += step;
            self.time = t0 + local;
            self.drift = drift_step(&self.drift, &model, step, &mut self.drift_rng);
            while self.frame_time(self.frame_index) <= self.time {
                let at = self.frame_time(self.frame_index) - t0;
                let reported = traj.pose_at(at, limits);
                frames.push(RobotState {
                    time: self.frame_time(self.frame_index),
                    true_pose: Self::true_of(&reported, &self.drift),
                    reported_pose: reported,
                    drift: self.drift,
                });
                self.frame_index += 1;
            }
            self.reported = traj.pose_at(local, limits);
            self.distance += (self.reported.position - last).norm();
            last = self.reported.position;
            let truth = Self::true_of(&self.reported, &self.drift).position;
            if self.scene.signed_distance(&truth) < self.cfg.body_radius {
                return Err(Error::Collision {
                    time: self.time,
                    x: truth.x,
                    y: truth.y,
                    z: truth.z,
                });
            }
        }
        self.reported = traj.end;
        Ok(Execution { frames, elapsed: local })
    }

    /// Advances the clock without moving; emits frames like a stationary segment.
    pub fn hover(&mut self, seconds: f64) -> Result<Execution> {
        let traj = Trajectory {
            start: self.reported,
            end: self.reported,
            duration: seconds,
        };
        self.execute_trajectory(&traj, &KinematicLimits::default())
    }

    /// Renders at the true pose and returns the frame with the pose the map should use.
    pub fn sense(&mut self, state: &RobotState) -> (Isometry3<f64>, DepthFrame) {
        let truth = state.true_pose.to_isometry(0.0, 0.0);
        let mut frame = render_rays(&self.scene, &truth, &self.rays, self.cfg.sensor.camera.range);
        if self.cfg.noise {
            apply_noise(&mut frame.points, self.cfg.sensor.noise_coefficient, &mut self.noise_rng);
        }
        let believed = state.reported_pose.to_isometry(state.drift.roll, state.drift.pitch);
        (believed, frame)
    }

    /// Senses at `state` and fuses the result into `grid`.
    pub fn sense_into(&mut self, state: &RobotState, grid: &mut TsdfGrid) {
        let (pose, frame) = self.sense(state);
        grid.integrate_pointcloud(&pose, &frame.points);
        grid.integrate_free_rays(&pose, &frame.misses, self.cfg.sensor.camera.range);
    }
}

/// Empirical mean and standard deviation of the noise offset at range `z`.
pub fn noise_moments(z: f64, coefficient: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![Vec3::new(z, 0.0, 0.0); n];
    apply_noise(&mut pts, coefficient, &mut rng);
    let offs: Vec<f64> = pts.iter().map(|p| p.x - z).collect();
    let mean = offs.iter().sum::<f64>() / n as f64;
    let var = offs.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}
