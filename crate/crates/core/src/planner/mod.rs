//! Single persistent trajectory tree: expansion, receding-horizon execution and maintenance.

mod safety;
mod tree;

pub use safety::SafetyMap;
pub use tree::{strictly_better, PlannerTree, SpatialHash, TreeNode, VALUE_EPS};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::objective::{GainEvaluator, GainSpec, ValueSpec};
use crate::trajectory::{KinematicLimits, Trajectory};
use crate::tsdf_map::TsdfGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerVariant {
    /// Keep the tree between segments and rewire it.
    #[default]
    Full,
    /// Keep the tree, but always hang new nodes from the node they were extended from.
    NoRewire,
    /// Start a fresh tree every segment.
    DiscardTree,
}

impl PlannerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerVariant::Full => "full",
            PlannerVariant::NoRewire => "no_rewire",
            PlannerVariant::DiscardTree => "discard_tree",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    #[serde(default = "d_n_local")]
    pub n_local: usize,
    #[serde(default = "d_r_local")]
    pub r_local: f64,
    #[serde(default = "d_r_update")]
    pub r_update: f64,
    #[serde(default = "d_l_max")]
    pub l_max: f64,
    #[serde(default = "d_collision")]
    pub collision_radius: f64,
    /// Unknown space this close to the start pose counts as free for edge checks.
    #[serde(default = "d_start_clearance")]
    pub start_clearance: f64,
    #[serde(default)]
    pub gain: GainSpec,
    #[serde(default)]
    pub value: ValueSpec,
    /// Expansion attempts per second of simulated time.
    #[serde(default = "d_budget")]
    pub expansions_per_second: f64,
    pub sampling_bounds: Aabb,
    #[serde(default)]
    pub variant: PlannerVariant,
    #[serde(default)]
    pub limits: KinematicLimits,
    #[serde(default = "d_max_failures")]
    pub max_failed_expansions: usize,
}

fn d_n_local() -> usize {
    10
}
fn d_r_local() -> f64 {
    1.5
}
fn d_r_update() -> f64 {
    3.0
}
fn d_l_max() -> f64 {
    1.5
}
fn d_collision() -> f64 {
    1.2
}
fn d_start_clearance() -> f64 {
    0.0
}
fn d_budget() -> f64 {
    10.0
}
fn d_max_failures() -> usize {
    1000
}

impl PlannerConfig {
    pub fn new(sampling_bounds: Aabb) -> Self {
        PlannerConfig {
            n_local: d_n_local(),
            r_local: d_r_local(),
            r_update: d_r_update(),
            l_max: d_l_max(),
            collision_radius: d_collision(),
            start_clearance: d_start_clearance(),
            gain: GainSpec::default(),
            value: ValueSpec::default(),
            expansions_per_second: d_budget(),
            sampling_bounds,
            variant: PlannerVariant::Full,
            limits: KinematicLimits::default(),
            max_failed_expansions: d_max_failures(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_local > 0.0 && self.r_update > 0.0 && self.l_max > 0.0 && self.collision_radius > 0.0) {
            return Err(invalid("planner radii and lengths must be positive"));
        }
        if !(self.start_clearance >= 0.0 && self.expansions_per_second >= 0.0) {
            return Err(invalid("start clearance and expansion budget must be nonnegative"));
        }
        self.gain.validate()?;
        self.value.validate()?;
        self.limits.validate()
    }
}

/// Uniform point in a ball, by rejection from the enclosing cube.
fn sample_ball(center: &Vec3, r: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let d = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if d.norm_squared() <= 1.0 {
            return center + d * r;
        }
    }
}

fn sample_box(b: &Aabb, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        rng.random_range(b.min.x..=b.max.x),
        rng.random_range(b.min.y..=b.max.y),
        rng.random_range(b.min.z..=b.max.z),
    )
}

/// Local stage while fewer than `n_local` nodes end near the robot, global stage otherwise.
pub fn sample_viewpoint(tree: &PlannerTree, robot: &Vec3, cfg: &PlannerConfig, rng: &mut ChaCha8Rng) -> Vec3 {
    let local = tree.within(robot, cfg.r_local).len() < cfg.n_local;
    if local {
        for _ in 0..64 {
            let p = sample_ball(robot, cfg.r_local, rng);
            if cfg.sampling_bounds.contains(&p) {
                return p;
            }
        }
        cfg.sampling_bounds.clamp(&sample_ball(robot, cfg.r_local, rng))
    } else {
        sample_box(&cfg.sampling_bounds, rng)
    }
}

/// Straight segment from `from` toward `target`, clipped to `l_max` and to the last safe
/// sample. Fails when shorter than one voxel.
pub fn extend_edge(
    from: &Pose,
    target: &Vec3,
    safety: &SafetyMap,
    voxel_size: f64,
    cfg: &PlannerConfig,
) -> Option<Trajectory> {
    let d = target - from.position;
    let len = d.norm();
    if len < voxel_size {
        return None;
    }
    let goal = from.position + d * (len.min(cfg.l_max) / len);
    let end = safety.last_safe_along(&from.position, &goal)?;
    if (end - from.position).norm() < voxel_size {
        return None;
    }
    Some(Trajectory::new(*from, Pose::new(end, from.yaw), &cfg.limits))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub expansions: u64,
    pub inserted: u64,
    pub rewires: u64,
    pub discarded: u64,
    pub resampled_roots: u64,
}

/// A re-parenting accepted by the planner, with the node's value before and after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewireEvent {
    pub node: usize,
    pub before: f64,
    pub after: f64,
}

pub struct Planner {
    pub cfg: PlannerConfig,
    pub tree: PlannerTree,
    pub gains: GainEvaluator,
    pub safety: SafetyMap,
    pub stats: PlannerStats,
    rng: ChaCha8Rng,
    voxel_size: f64,
    failed_streak: usize,
    pending: f64,
    executing: Option<usize>,
    /// When set, every accepted rewire is appended here.
    pub rewire_log: Option<Vec<RewireEvent>>,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        start: Pose,
        grid: &mut TsdfGrid,
        gains: GainEvaluator,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if gains.spec != cfg.gain {
            return Err(invalid("gain evaluator does not match the configured gain"));
        }
        let bubble = (cfg.start_clearance > 0.0).then_some((start.position, cfg.start_clearance));
        let safety = SafetyMap::new(grid, cfg.collision_radius, bubble);
        let tree = PlannerTree::new(start, cfg.value, cfg.limits, cfg.l_max);
        Ok(Planner {
            voxel_size: grid.voxel_size(),
            cfg,
            tree,
            gains,
            safety,
            stats: PlannerStats::default(),
            rng,
            failed_streak: 0,
            pending: 0.0,
            executing: None,
            rewire_log: None,
        })
    }

    /// Pulls map changes into the clearance bookkeeping. Call after every integration.
    pub fn sync_map(&mut self, grid: &mut TsdfGrid) {
        self.safety.sync(grid);
    }

    pub fn executing(&self) -> Option<usize> {
        self.executing
    }

    pub fn failed_streak(&self) -> usize {
        self.failed_streak
    }

    /// Root has no children and sampling has failed too often.
    pub fn is_exhausted(&self) -> bool {
        self.tree.children(self.tree.root()).is_empty() && self.failed_streak >= self.cfg.max_failed_expansions
    }

    /// Center of the local sampling stage.
    fn sampling_center(&self, robot: &Vec3) -> Vec3 {
        match self.cfg.variant {
            PlannerVariant::DiscardTree => self.tree.position(self.tree.root()),
            _ => *robot,
        }
    }

    /// Fractional budget: accumulates `seconds * rate` and runs the whole part.
    pub fn expand_for(&mut self, grid: &TsdfGrid, robot: &Vec3, seconds: f64) -> Result<usize> {
        self.pending += seconds * self.cfg.expansions_per_second;
        let n = self.pending.floor();
        self.pending -= n;
        self.expand(grid, robot, n as usize)
    }

    /// Runs `n` expansion attempts. Returns how many inserted a node.
    pub fn expand(&mut self, grid: &TsdfGrid, robot: &Vec3, n: usize) -> Result<usize> {
        let mut ok = 0;
        for _ in 0..n {
            if self.expand_once(grid, robot)?.is_some() {
                ok += 1;
            }
        }
        Ok(ok)
    }

    /// Sample, extend from the nearest node, evaluate the gain and insert.
    pub fn expand_once(&mut self, grid: &TsdfGrid, robot: &Vec3) -> Result<Option<usize>> {
        self.stats.expansions += 1;
        let center = self.sampling_center(robot);
        let target = sample_viewpoint(&self.tree, &center, &self.cfg, &mut self.rng);
        let Some(nearest) = self.nearest(&target) else {
            self.failed_streak += 1;
            return Ok(None);
        };
        let from = self.tree.node(nearest)?.pose();
        let Some(edge) = extend_edge(&from, &target, &self.safety, self.voxel_size, &self.cfg) else {
            self.failed_streak += 1;
            return Ok(None);
        };
        let id = self.insert_node(grid, edge.end.position, nearest)?;
        if id.is_some() {
            self.failed_streak = 0;
        } else {
            self.failed_streak += 1;
        }
        Ok(id)
    }

    fn nearest(&self, p: &Vec3) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for id in self.tree.bfs() {
            let d = (self.tree.position(id) - p).norm_squared();
            if best.is_none_or(|(bd, bid)| d < bd || (d == bd && id < bid)) {
                best = Some((d, id));
            }
        }
        best.map(|(_, id)| id)
    }

    fn edge_safe(&self, a: usize, b_pos: &Vec3) -> bool {
        let pa = self.tree.position(a);
        (pa - b_pos).norm() <= self.cfg.l_max + 1e-9 && self.safety.is_edge_safe(&pa, b_pos)
    }

    /// Adds a viewpoint at `position`. The parent maximizes the new node's value among
    /// connectable nodes within `l_max` (the `extended_from` node for the no-rewire
    /// variants); remaining neighbours are then rewired through it when that raises
    /// their value.
    pub fn insert_node(&mut self, grid: &TsdfGrid, position: Vec3, extended_from: usize) -> Result<Option<usize>> {
        let eval = self.gains.evaluate(grid, &position)?;
        let end = Pose::new(position, eval.best_yaw);
        let neighbours: Vec<usize> = self
            .tree
            .within(&position, self.cfg.l_max)
            .into_iter()
            .filter(|&n| self.tree.is_connected(n))
            .collect();

        let parent = match self.cfg.variant {
            PlannerVariant::Full => {
                let mut cands: Vec<(f64, usize)> = neighbours
                    .iter()
                    .map(|&p| {
                        let cost = Trajectory::new(self.tree.node(p).map(|n| n.pose()).unwrap_or(end), end, &self.cfg.limits).duration;
                        (self.tree.leaf_value(p, eval.best_gain, cost), p)
                    })
                    .collect();
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                cands.into_iter().map(|(_, p)| p).find(|&p| self.edge_safe(p, &position))
            }
            _ => Some(extended_from).filter(|&p| self.edge_safe(p, &position)),
        };
        let Some(parent) = parent else {
            return Ok(None);
        };
        let id = self.tree.attach_new(parent, end, eval.best_gain)?;
        self.stats.inserted += 1;

        if self.cfg.variant == PlannerVariant::Full {
            for n in neighbours {
                // The executing segment stays hung from the root until it finishes.
                if n == parent || n == self.tree.root() || Some(n) == self.executing || self.tree.is_ancestor(n, id) {
                    continue;
                }
                let before = self.tree.node(n)?.value;
                let offsets = self.tree.subtree_offsets(n);
                let cost = self.tree.trajectory_from(id, n).duration;
                let v = self.tree.rewired_value(n, id, cost, &offsets);
                if strictly_better(v, before) && self.edge_safe(id, &self.tree.position(n)) {
                    self.apply_rewire(n, id, before)?;
                }
            }
        }
        Ok(Some(id))
    }

    fn apply_rewire(&mut self, node: usize, parent: usize, before: f64) -> Result<()> {
        self.tree.reparent(node, parent)?;
        self.stats.rewires += 1;
        let after = self.tree.node(node)?.value;
        if let Some(log) = self.rewire_log.as_mut() {
            log.push(RewireEvent { node, before, after });
        }
        Ok(())
    }

    pub fn select_next(&self) -> Result<usize> {
        self.tree.select_next()
    }

    /// Picks the next root child whose edge is still safe, pruning unsafe ones, and marks it
    /// as executing. `Ok(None)` when the root has no usable child.
    pub fn begin_segment(&mut self) -> Result<Option<Trajectory>> {
        loop {
            let child = match self.tree.select_next() {
                Ok(c) => c,
                Err(Error::ExhaustedTree { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let traj = self.tree.node(child)?.trajectory;
            if self.safety.is_edge_safe(&traj.start.position, &traj.end.position) {
                self.executing = Some(child);
                if self.cfg.variant == PlannerVariant::DiscardTree {
                    // Plan the next segment from where this one ends.
                    self.tree = PlannerTree::new(traj.end, self.cfg.value, self.cfg.limits, self.cfg.l_max);
                    self.executing = None;
                }
                return Ok(Some(traj));
            }
            self.stats.discarded += self.tree.subtree(child).len() as u64;
            self.tree.remove_subtree(child);
            self.tree.recompute_values();
        }
    }

    /// Tree maintenance once the executing segment has finished.
    pub fn finish_segment(&mut self, grid: &TsdfGrid) -> Result<()> {
        let Some(child) = self.executing.take() else {
            return Ok(());
        };
        self.advance_root(grid, child)?;
        let robot = self.tree.position(self.tree.root());
        self.update_gains(grid, &robot)?;
        self.tree.recompute_values();
        if self.cfg.variant == PlannerVariant::Full {
            self.global_rewire()?;
        }
        Ok(())
    }

    /// Budgeted expansion over `seconds`, then (if a segment was executing) maintenance,
    /// then selection of the next segment.
    pub fn plan_step(&mut self, grid: &TsdfGrid, robot: &Vec3, seconds: f64) -> Result<Trajectory> {
        self.expand_for(grid, robot, seconds)?;
        self.finish_segment(grid)?;
        loop {
            if let Some(t) = self.begin_segment()? {
                return Ok(t);
            }
            if self.failed_streak >= self.cfg.max_failed_expansions {
                return Err(Error::ExhaustedTree {
                    attempts: self.failed_streak,
                });
            }
            let robot = self.tree.position(self.tree.root());
            self.expand_once(grid, &robot)?;
        }
    }

    /// Makes `child` the root, then tries to keep every sibling branch.
    pub fn advance_root(&mut self, grid: &TsdfGrid, child: usize) -> Result<()> {
        let old_pose = self.tree.node(self.tree.root())?.pose();
        let mut orphans = self.tree.promote(child)?;
        self.failed_streak = 0;
        orphans.sort_unstable();
        orphans = self.attach_orphans(orphans)?;
        if !orphans.is_empty() {
            let root = self.tree.root();
            if self.edge_safe(root, &old_pose.position) {
                let eval = self.gains.evaluate(grid, &old_pose.position)?;
                let pose = Pose::new(old_pose.position, eval.best_yaw);
                self.tree.attach_new(root, pose, eval.best_gain)?;
                self.stats.resampled_roots += 1;
                orphans = self.attach_orphans(orphans)?;
            }
        }
        for o in orphans {
            self.stats.discarded += self.tree.subtree(o).len() as u64;
            self.tree.remove_subtree(o);
        }
        self.tree.recompute_values();
        Ok(())
    }

    /// Attaches each orphan head to the best connected node in reach. Returns the rest.
    fn attach_orphans(&mut self, heads: Vec<usize>) -> Result<Vec<usize>> {
        let mut left = Vec::new();
        for h in heads {
            let pos = self.tree.position(h);
            let cands: Vec<usize> = self
                .tree
                .within(&pos, self.cfg.l_max)
                .into_iter()
                .filter(|&c| c != h && self.tree.is_connected(c))
                .collect();
            // Re-attaching orphans is what keeps the tree alive, so every variant that keeps
            // one uses the value-maximizing parent here.
            let offsets = self.tree.subtree_offsets(h);
            let mut scored: Vec<(f64, usize)> = cands
                .iter()
                .map(|&c| {
                    let cost = self.tree.trajectory_from(c, h).duration;
                    (self.tree.rewired_value(h, c, cost, &offsets), c)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let chosen = scored.into_iter().map(|(_, c)| c).find(|&c| self.edge_safe(c, &pos));
            match chosen {
                Some(c) => self.tree.reparent(h, c)?,
                None => left.push(h),
            }
        }
        Ok(left)
    }

    /// Re-evaluates gains of nodes near the robot whose gain has not reached zero.
    pub fn update_gains(&mut self, grid: &TsdfGrid, robot: &Vec3) -> Result<usize> {
        let root = self.tree.root();
        let ids: Vec<usize> = self
            .tree
            .within(robot, self.cfg.r_update)
            .into_iter()
            .filter(|&id| id != root && self.tree.is_connected(id))
            .filter(|&id| self.tree.node(id).map(|n| n.gain > 0.0).unwrap_or(false))
            .collect();
        for &id in &ids {
            self.tree.mark_dirty(id);
        }
        for &id in &ids {
            let pos = self.tree.position(id);
            let eval = self.gains.evaluate(grid, &pos)?;
            self.tree.set_gain_and_yaw(id, eval.best_gain, eval.best_yaw)?;
        }
        Ok(ids.len())
    }

    pub fn recompute_values(&mut self) {
        self.tree.recompute_values();
    }

    /// Breadth-first pass trying to re-parent every node for a strictly higher value.
    pub fn global_rewire(&mut self) -> Result<usize> {
        let root = self.tree.root();
        let mut visited = vec![false; self.tree.ids().last().map_or(0, |&m| m + 1)];
        let mut queue = std::collections::VecDeque::from([root]);
        let mut count = 0;
        while let Some(n) = queue.pop_front() {
            if std::mem::replace(&mut visited[n], true) {
                continue;
            }
            if n != root && self.try_rewire(n)? {
                count += 1;
            }
            queue.extend(self.tree.children(n).iter().copied());
        }
        Ok(count)
    }

    fn try_rewire(&mut self, n: usize) -> Result<bool> {
        if Some(n) == self.executing {
            return Ok(false);
        }
        let node = self.tree.node(n)?;
        let current_parent = node.parent;
        let before = node.value;
        let pos = node.position();
        let offsets = self.tree.subtree_offsets(n);
        let mut scored: Vec<(f64, usize)> = self
            .tree
            .within(&pos, self.cfg.l_max)
            .into_iter()
            .filter(|&c| Some(c) != current_parent && !self.tree.is_ancestor(n, c) && self.tree.is_connected(c))
            .map(|c| {
                let cost = self.tree.trajectory_from(c, n).duration;
                (self.tree.rewired_value(n, c, cost, &offsets), c)
            })
            .filter(|&(v, _)| strictly_better(v, before))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if let Some(c) = scored.into_iter().map(|(_, c)| c).find(|&c| self.edge_safe(c, &pos)) {
            self.apply_rewire(n, c, before)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Structural checks plus the collision contract on every edge.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        self.tree.check_structure(self.cfg.l_max)?;
        for id in self.tree.bfs() {
            let n = self.tree.node(id).map_err(|e| e.to_string())?;
            if n.parent.is_some()
                && !self
                    .safety
                    .is_edge_safe(&n.trajectory.start.position, &n.trajectory.end.position)
            {
                return Err(format!("edge into {id} is not collision free"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raycast::CameraModel;
    use crate::tsdf_map::{TsdfConfig, TsdfVoxel, VoxelKey};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn free_grid() -> TsdfGrid {
        let mut g = TsdfGrid::new(
            Aabb::new(Vec3::zeros(), Vec3::new(8.0, 8.0, 3.0)),
            TsdfConfig {
                voxel_size: 0.2,
                truncation: 0.4,
                weight_cap: 1000.0,
            },
        )
        .unwrap();
        let d = g.dims();
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    g.set(VoxelKey::new(i, j, k), TsdfVoxel { distance: 0.4, weight: 1.0 }).unwrap();
                }
            }
        }
        g
    }

    fn at(x: f64, y: f64) -> Vec3 {
        Vec3::new(x, y, 1.5)
    }

    fn planner(grid: &mut TsdfGrid, radius: f64) -> Planner {
        let mut cfg = PlannerConfig::new(Aabb::new(Vec3::new(0.5, 0.5, 0.5), Vec3::new(7.5, 7.5, 2.5)));
        cfg.collision_radius = radius;
        cfg.gain = GainSpec::UnknownVolume;
        let cam = CameraModel::new(90.0, 60.0, 3.0).unwrap();
        let gains = GainEvaluator::new(GainSpec::UnknownVolume, cam, 3.0).unwrap();
        Planner::new(cfg, Pose::new(at(4.0, 4.0), 0.0), grid, gains, ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn extend_clips_to_max_length() {
        let mut g = free_grid();
        let p = planner(&mut g, 0.5);
        let from = Pose::new(at(2.0, 4.0), 0.0);
        let e = extend_edge(&from, &at(5.0, 4.0), &p.safety, 0.2, &p.cfg).unwrap();
        assert_relative_eq!(e.length(), 1.5, epsilon = 1e-12);
        let e = extend_edge(&from, &at(3.0, 4.0), &p.safety, 0.2, &p.cfg).unwrap();
        assert_relative_eq!(e.length(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn extend_fails_without_clearance() {
        let mut g = free_grid();
        let wall_x = 5.0;
        let d = g.dims();
        for k in 0..d[2] {
            for j in 0..d[1] {
                let key = g.key_of(&Vec3::new(wall_x + 0.1, j as f64 * 0.2 + 0.1, k as f64 * 0.2 + 0.1));
                g.set(key, TsdfVoxel { distance: 0.0, weight: 1.0 }).unwrap();
            }
        }
        let mut p = planner(&mut g, 1.2);
        p.sync_map(&mut g);
        // Inside the margin: only moves away from the wall are allowed.
        let from = Pose::new(at(wall_x - 1.0, 4.0), 0.0);
        assert!(!p.safety.is_point_safe(&from.position));
        assert!(extend_edge(&from, &at(wall_x + 1.0, 4.0), &p.safety, 0.2, &p.cfg).is_none());
        let away = extend_edge(&from, &at(1.0, 4.0), &p.safety, 0.2, &p.cfg).unwrap();
        assert!(p.safety.is_point_safe(&away.end.position));
    }

    #[test]
    fn sampling_stages() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let robot = at(4.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut mean = Vec3::zeros();
        for _ in 0..n {
            let s = sample_viewpoint(&p.tree, &robot, &p.cfg, &mut rng);
            assert!((s - robot).norm() <= p.cfg.r_local + 1e-12);
            mean += s / n as f64;
        }
        assert!((mean - robot).norm() < 0.05 * p.cfg.r_local);
        for i in 0..10 {
            let r = p.tree.root();
            p.tree.attach_new(r, Pose::new(at(4.0 + 0.1 * i as f64, 4.1), 0.0), 0.0).unwrap();
        }
        let far = (0..200)
            .map(|_| sample_viewpoint(&p.tree, &robot, &p.cfg, &mut rng))
            .filter(|s| (s - robot).norm() > p.cfg.r_local)
            .count();
        assert!(far > 100);
    }

    #[test]
    fn parent_with_cheaper_path_wins() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let r = p.tree.root();
        // 1 m: 2 s.
        let a = p.tree.attach_new(r, Pose::new(at(4.8, 3.4), 0.0), 1.0).unwrap();
        // 0.25 m then 1 m: 3 s.
        let b1 = p.tree.attach_new(r, Pose::new(at(4.0, 3.75), 0.0), 0.0).unwrap();
        let b = p.tree.attach_new(b1, Pose::new(at(4.6, 2.95), 0.0), 1.0).unwrap();
        assert_relative_eq!(p.tree.node(b).unwrap().path_cost(), 3.0, epsilon = 1e-12);
        let id = p.insert_node(&g, at(5.2, 2.9), a).unwrap().unwrap();
        assert_eq!(p.tree.node(id).unwrap().parent, Some(a));
        // Hanging `b` under the new node collects both gains at a lower ratio cost.
        assert_eq!(p.tree.node(b).unwrap().parent, Some(id));
        assert_eq!(p.tree.node(b1).unwrap().parent, Some(r));
    }

    #[test]
    fn shortcut_is_rewired() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let r = p.tree.root();
        let a = p.tree.attach_new(r, Pose::new(at(5.0, 4.0), 0.0), 0.0).unwrap();
        let b = p.tree.attach_new(a, Pose::new(at(5.0, 4.8), 0.0), 1.0).unwrap();
        let before = p.tree.node(b).unwrap().value;
        assert_eq!(p.global_rewire().unwrap(), 1);
        assert_eq!(p.tree.node(b).unwrap().parent, Some(r));
        assert!(p.tree.node(b).unwrap().value > before);
        // `a` now gains by hanging under `b`; after that the tree is a fixed point.
        assert_eq!(p.global_rewire().unwrap(), 1);
        assert_eq!(p.tree.node(a).unwrap().parent, Some(b));
        assert_eq!(p.global_rewire().unwrap(), 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn sibling_kept_through_resampled_root() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let r = p.tree.root();
        let c = p.tree.attach_new(r, Pose::new(at(5.4, 4.0), 0.0), 1.0).unwrap();
        let s = p.tree.attach_new(r, Pose::new(at(2.8, 4.0), 0.0), 1.0).unwrap();
        p.advance_root(&g, c).unwrap();
        assert_eq!(p.tree.root(), c);
        let root = p.tree.node(c).unwrap();
        assert_eq!((root.gain, root.cost, root.value), (0.0, 0.0, 0.0));
        let head = p.tree.node(s).unwrap().parent.unwrap();
        assert_eq!(p.tree.node(head).unwrap().parent, Some(c));
        assert_relative_eq!((p.tree.position(head) - at(4.0, 4.0)).norm(), 0.0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn gain_refresh_respects_radius() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let r = p.tree.root();
        let near = p.tree.attach_new(r, Pose::new(at(5.0, 4.0), 0.0), 7.0).unwrap();
        let mid = p.tree.attach_new(near, Pose::new(at(6.0, 5.0), 0.0), 7.0).unwrap();
        let far = p.tree.attach_new(mid, Pose::new(at(7.0, 6.5), 0.0), 7.0).unwrap();
        let robot = at(4.0, 4.0);
        assert!((p.tree.position(far) - robot).norm() > p.cfg.r_update);
        assert_eq!(p.update_gains(&g, &robot).unwrap(), 2);
        assert_eq!(p.tree.node(near).unwrap().gain, 0.0);
        assert_eq!(p.tree.node(far).unwrap().gain, 7.0);
        assert_eq!(p.update_gains(&g, &robot).unwrap(), 0);
    }

    #[test]
    fn plan_step_returns_safe_segment() {
        let mut g = free_grid();
        let mut p = planner(&mut g, 0.5);
        let t = p.plan_step(&g, &at(4.0, 4.0), 3.0).unwrap();
        assert_relative_eq!((t.start.position - at(4.0, 4.0)).norm(), 0.0);
        assert!(t.length() <= p.cfg.l_max + 1e-9);
        assert!(p.safety.is_segment_safe(&t.start.position, &t.end.position));
        p.check_invariants().unwrap();
    }
}
