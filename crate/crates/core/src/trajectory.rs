//! Straight-line segments with a rest-to-rest trapezoidal speed profile and rate-limited yaw.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{wrap_angle, Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicLimits {
    pub v_max: f64,
    pub a_max: f64,
    /// rad/s
    pub yaw_rate: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        KinematicLimits {
            v_max: 1.0,
            a_max: 1.0,
            yaw_rate: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl KinematicLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.a_max > 0.0 && self.yaw_rate > 0.0) {
            return Err(invalid("kinematic limits must be positive"));
        }
        Ok(())
    }

    /// Rest-to-rest travel time over `d` meters.
    pub fn translation_time(&self, d: f64) -> f64 {
        let d = d.abs();
        let ramp = self.v_max * self.v_max / self.a_max;
        if d >= ramp {
            d / self.v_max + self.v_max / self.a_max
        } else {
            2.0 * (d / self.a_max).sqrt()
        }
    }

    /// Distance covered `t` seconds into a rest-to-rest move of length `d`.
    pub fn translation_progress(&self, d: f64, t: f64) -> f64 {
        let total = self.translation_time(d);
        if t <= 0.0 {
            return 0.0;
        }
        if t >= total {
            return d;
        }
        let a = self.a_max;
        let ramp = self.v_max * self.v_max / a;
        let (t_acc, v_peak) = if d >= ramp {
            (self.v_max / a, self.v_max)
        } else {
            let ta = (d / a).sqrt();
            (ta, a * ta)
        };
        if t < t_acc {
            0.5 * a * t * t
        } else if t <= total - t_acc {
            0.5 * a * t_acc * t_acc + v_peak * (t - t_acc)
        } else {
            let r = total - t;
            d - 0.5 * a * r * r
        }
    }

    pub fn yaw_time(&self, dyaw: f64) -> f64 {
        dyaw.abs() / self.yaw_rate
    }
}

/// A straight segment between two viewpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Pose,
    pub end: Pose,
    pub duration: f64,
}

impl Trajectory {
    pub fn new(start: Pose, end: Pose, limits: &KinematicLimits) -> Self {
        let mut t = Trajectory {
            start,
            end,
            duration: 0.0,
        };
        t.duration = limits
            .translation_time(t.length())
            .max(limits.yaw_time(t.yaw_change()));
        t
    }

    /// Zero-length, zero-duration segment at `pose`.
    pub fn stationary(pose: Pose) -> Self {
        Trajectory {
            start: pose,
            end: pose,
            duration: 0.0,
        }
    }

    pub fn length(&self) -> f64 {
        (self.end.position - self.start.position).norm()
    }

    /// Signed shortest rotation from start to end yaw.
    pub fn yaw_change(&self) -> f64 {
        wrap_angle(self.end.yaw - self.start.yaw)
    }

    pub fn is_degenerate(&self) -> bool {
        self.length() < 1e-12 && self.yaw_change().abs() < 1e-12
    }

    /// Pose `t` seconds after departure. Position and yaw move simultaneously and
    /// each stops when done.
    pub fn pose_at(&self, t: f64, limits: &KinematicLimits) -> Pose {
        let len = self.length();
        let pos = if len > 0.0 {
            let s = limits.translation_progress(len, t);
            self.start.position + (self.end.position - self.start.position) * (s / len)
        } else {
            self.start.position
        };
        let dy = self.yaw_change();
        let turned = (limits.yaw_rate * t.max(0.0)).min(dy.abs());
        Pose::new(pos, wrap_angle(self.start.yaw + dy.signum() * turned))
    }

    /// Points every `step` meters along the segment, both ends included.
    pub fn samples(&self, step: f64) -> impl Iterator<Item = Vec3> + '_ {
        let len = self.length();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n).map(move |i| {
            self.start.position + (self.end.position - self.start.position) * (i as f64 / n as f64)
        })
    }
}
