//! Tree storage: arena of nodes, cached root-path sums, values and a spatial hash.

use rustc_hash::FxHashMap;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::objective::{path_ratio, value_exponential, value_linear, ValueSpec};
use crate::trajectory::{KinematicLimits, Trajectory};

/// Relative tolerance for "strictly better" value comparisons.
pub const VALUE_EPS: f64 = 1e-9;

#[inline]
pub fn strictly_better(new: f64, old: f64) -> bool {
    new > old + VALUE_EPS * old.abs().max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub trajectory: Trajectory,
    pub gain: f64,
    pub cost: f64,
    pub value: f64,
    pub best_yaw: f64,
    pub gain_dirty: bool,
    path_gain: f64,
    path_cost: f64,
}

impl TreeNode {
    pub fn position(&self) -> Vec3 {
        self.trajectory.end.position
    }

    pub fn pose(&self) -> Pose {
        self.trajectory.end
    }

    /// Gain summed from the root down to and including this node.
    pub fn path_gain(&self) -> f64 {
        self.path_gain
    }

    pub fn path_cost(&self) -> f64 {
        self.path_cost
    }
}

/// Uniform grid over node end positions. Radius queries are exact.
#[derive(Clone, Debug)]
pub struct SpatialHash {
    cell: f64,
    buckets: FxHashMap<(i32, i32, i32), Vec<usize>>,
}

impl SpatialHash {
    pub fn new(cell: f64) -> Self {
        SpatialHash {
            cell: cell.max(1e-3),
            buckets: FxHashMap::default(),
        }
    }

    fn cell_of(&self, p: &Vec3) -> (i32, i32, i32) {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
            (p.z / self.cell).floor() as i32,
        )
    }

    pub fn insert(&mut self, id: usize, p: &Vec3) {
        self.buckets.entry(self.cell_of(p)).or_default().push(id);
    }

    pub fn remove(&mut self, id: usize, p: &Vec3) {
        let c = self.cell_of(p);
        if let Some(b) = self.buckets.get_mut(&c) {
            b.retain(|&x| x != id);
            if b.is_empty() {
                self.buckets.remove(&c);
            }
        }
    }

    /// Ids whose position lies within `r` of `p`, ascending.
    pub fn query<F: Fn(usize) -> Vec3>(&self, p: &Vec3, r: f64, pos: F) -> Vec<usize> {
        let lo = self.cell_of(&(p - Vec3::repeat(r)));
        let hi = self.cell_of(&(p + Vec3::repeat(r)));
        let mut out = Vec::new();
        for x in lo.0..=hi.0 {
            for y in lo.1..=hi.1 {
                for z in lo.2..=hi.2 {
                    if let Some(b) = self.buckets.get(&(x, y, z)) {
                        out.extend(b.iter().copied().filter(|&id| (pos(id) - p).norm() <= r));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug)]
pub struct PlannerTree {
    nodes: Vec<Option<TreeNode>>,
    root: usize,
    live: usize,
    index: SpatialHash,
    value_spec: ValueSpec,
    limits: KinematicLimits,
}

impl PlannerTree {
    pub fn new(root_pose: Pose, value_spec: ValueSpec, limits: KinematicLimits, cell: f64) -> Self {
        let mut t = PlannerTree {
            nodes: Vec::new(),
            root: 0,
            live: 0,
            index: SpatialHash::new(cell),
            value_spec,
            limits,
        };
        t.root = t.push(None, Trajectory::stationary(root_pose), 0.0, root_pose.yaw);
        t
    }

    fn push(&mut self, parent: Option<usize>, trajectory: Trajectory, gain: f64, best_yaw: f64) -> usize {
        let id = self.nodes.len();
        let cost = trajectory.duration;
        self.index.insert(id, &trajectory.end.position);
        self.nodes.push(Some(TreeNode {
            id,
            parent,
            children: Vec::new(),
            trajectory,
            gain,
            cost,
            value: 0.0,
            best_yaw,
            gain_dirty: false,
            path_gain: 0.0,
            path_cost: 0.0,
        }));
        self.live += 1;
        if let Some(p) = parent {
            self.n_mut(p).children.push(id);
        }
        id
    }

    #[inline]
    fn n(&self, id: usize) -> &TreeNode {
        self.nodes[id].as_ref().expect("live node")
    }

    #[inline]
    fn n_mut(&mut self, id: usize) -> &mut TreeNode {
        self.nodes[id].as_mut().expect("live node")
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn value_spec(&self) -> ValueSpec {
        self.value_spec
    }

    pub fn limits(&self) -> &KinematicLimits {
        &self.limits
    }

    /// Live node count including the root and any detached subtrees.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn contains(&self, id: usize) -> bool {
        self.nodes.get(id).is_some_and(|n| n.is_some())
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode> {
        self.nodes
            .get(id)
            .and_then(|n| n.as_ref())
            .ok_or(Error::UnknownNode(id))
    }

    /// Live ids, ascending.
    pub fn ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|_| i))
            .collect()
    }

    pub fn position(&self, id: usize) -> Vec3 {
        self.n(id).position()
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.n(id).children
    }

    pub fn within(&self, p: &Vec3, r: f64) -> Vec<usize> {
        self.index.query(p, r, |id| self.n(id).position())
    }

    /// Is `a` an ancestor of (or equal to) `b`?
    pub fn is_ancestor(&self, a: usize, b: usize) -> bool {
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.n(c).parent;
        }
        false
    }

    /// Attached to the root through parent links.
    pub fn is_connected(&self, id: usize) -> bool {
        self.is_ancestor(self.root, id)
    }

    /// Preorder ids of the subtree rooted at `id`.
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.n(n).children.iter().rev().copied());
        }
        out
    }

    /// Breadth-first ids reachable from the root.
    pub fn bfs(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.live);
        let mut q = VecDeque::from([self.root]);
        while let Some(n) = q.pop_front() {
            out.push(n);
            q.extend(self.n(n).children.iter().copied());
        }
        out
    }

    /// Adds a leaf under `parent` ending at `end`.
    pub fn attach_new(&mut self, parent: usize, end: Pose, gain: f64) -> Result<usize> {
        let start = self.node(parent)?.pose();
        let traj = Trajectory::new(start, end, &self.limits);
        let id = self.push(Some(parent), traj, gain, end.yaw);
        self.recompute_values();
        Ok(id)
    }

    /// Trajectory `id` would have if it hung from `parent`.
    pub fn trajectory_from(&self, parent: usize, id: usize) -> Trajectory {
        Trajectory::new(self.n(parent).pose(), self.n(id).pose(), &self.limits)
    }

    /// Moves `id` (with its subtree) under `new_parent`. Refuses cycles.
    pub fn reparent(&mut self, id: usize, new_parent: usize) -> Result<()> {
        self.node(id)?;
        self.node(new_parent)?;
        if id == self.root || self.is_ancestor(id, new_parent) {
            return Err(Error::InvalidArgument(format!(
                "re-parenting {id} under {new_parent} would create a cycle"
            )));
        }
        let old = self.n(id).parent;
        if let Some(old) = old {
            self.n_mut(old).children.retain(|&c| c != id);
        }
        let traj = self.trajectory_from(new_parent, id);
        let n = self.n_mut(id);
        n.parent = Some(new_parent);
        n.cost = traj.duration;
        n.trajectory = traj;
        self.n_mut(new_parent).children.push(id);
        self.refresh_moved(id, old);
        Ok(())
    }

    /// Same result as `recompute_values` after moving `id`, touching only its subtree and
    /// the two ancestor chains.
    fn refresh_moved(&mut self, id: usize, old_parent: Option<usize>) {
        let sub = if self.is_connected(id) { self.subtree(id) } else { Vec::new() };
        for &k in &sub {
            self.refresh_own(k);
        }
        if self.value_spec != ValueSpec::GlobalNormalization {
            return;
        }
        for &k in sub.iter().rev() {
            self.fold_children(k);
        }
        for start in [old_parent, self.n(id).parent] {
            let mut cur = start.filter(|&a| self.is_connected(a));
            while let Some(a) = cur {
                self.fold_children(a);
                cur = self.n(a).parent;
            }
        }
    }

    /// Path sums and own value from the parent's cached state.
    fn refresh_own(&mut self, id: usize) {
        let (pg, pc, pv) = match self.n(id).parent {
            Some(p) => {
                let p = self.n(p);
                (p.path_gain, p.path_cost, p.value)
            }
            None => (0.0, 0.0, 0.0),
        };
        let spec = self.value_spec;
        let is_root = id == self.root;
        let n = self.n_mut(id);
        n.path_gain = pg + n.gain;
        n.path_cost = pc + n.cost;
        n.value = if is_root {
            0.0
        } else {
            match spec {
                ValueSpec::Exponential { lambda } => value_exponential(pv, n.gain, n.cost, lambda),
                ValueSpec::Linear { alpha } => value_linear(pv, n.gain, n.cost, alpha),
                ValueSpec::GlobalNormalization => path_ratio(n.path_gain, n.path_cost),
            }
        };
    }

    /// Global normalization: own path ratio raised to the best child value.
    fn fold_children(&mut self, id: usize) {
        if id == self.root {
            self.n_mut(id).value = 0.0;
            return;
        }
        let n = self.n(id);
        let own = path_ratio(n.path_gain, n.path_cost);
        let best = n.children.iter().map(|&c| self.n(c).value).fold(own, f64::max);
        self.n_mut(id).value = best;
    }

    /// Cuts `id` loose from its parent; its subtree stays intact but disconnected.
    pub fn detach(&mut self, id: usize) {
        if let Some(p) = self.n(id).parent {
            self.n_mut(p).children.retain(|&c| c != id);
        }
        self.n_mut(id).parent = None;
    }

    pub fn remove_subtree(&mut self, id: usize) {
        self.detach(id);
        for n in self.subtree(id) {
            let pos = self.n(n).position();
            self.index.remove(n, &pos);
            self.nodes[n] = None;
            self.live -= 1;
        }
    }

    /// Drops the current root node and makes `child` the root with zeroed gain, cost and value.
    /// Other children of the old root are left detached and returned.
    pub fn promote(&mut self, child: usize) -> Result<Vec<usize>> {
        if self.node(child)?.parent != Some(self.root) {
            return Err(Error::InvalidArgument(format!("{child} is not a child of the root")));
        }
        let old = self.root;
        let orphans: Vec<usize> = self.n(old).children.iter().copied().filter(|&c| c != child).collect();
        for &o in &orphans {
            self.n_mut(o).parent = None;
        }
        self.n_mut(old).children.clear();
        self.n_mut(child).parent = None;
        let pos = self.n(old).position();
        self.index.remove(old, &pos);
        self.nodes[old] = None;
        self.live -= 1;
        self.root = child;
        let n = self.n_mut(child);
        n.trajectory = Trajectory::stationary(n.trajectory.end);
        n.gain = 0.0;
        n.cost = 0.0;
        n.value = 0.0;
        n.gain_dirty = false;
        self.recompute_values();
        Ok(orphans)
    }

    pub fn set_gain(&mut self, id: usize, gain: f64) -> Result<()> {
        self.node(id)?;
        if id != self.root {
            self.n_mut(id).gain = gain;
        }
        Ok(())
    }

    /// Replaces a node's gain and heading; its own and its children's trajectories follow.
    pub fn set_gain_and_yaw(&mut self, id: usize, gain: f64, yaw: f64) -> Result<()> {
        self.node(id)?;
        if id == self.root {
            return Ok(());
        }
        let limits = self.limits;
        let n = self.n_mut(id);
        n.gain = gain;
        n.best_yaw = yaw;
        n.gain_dirty = false;
        if n.trajectory.end.yaw != yaw {
            n.trajectory.end.yaw = yaw;
            n.trajectory = Trajectory::new(n.trajectory.start, n.trajectory.end, &limits);
            n.cost = n.trajectory.duration;
            let end = n.trajectory.end;
            let kids = n.children.clone();
            for c in kids {
                let k = self.n_mut(c);
                k.trajectory = Trajectory::new(end, k.trajectory.end, &limits);
                k.cost = k.trajectory.duration;
            }
        }
        Ok(())
    }

    pub fn mark_dirty(&mut self, id: usize) {
        self.n_mut(id).gain_dirty = true;
    }

    /// Refreshes cached path sums and all values in one top-down plus one bottom-up sweep.
    pub fn recompute_values(&mut self) {
        let order = self.bfs();
        for &id in &order {
            self.refresh_own(id);
        }
        if self.value_spec == ValueSpec::GlobalNormalization {
            for &id in order.iter().rev() {
                self.fold_children(id);
            }
        }
    }

    /// Value a not-yet-inserted leaf would get under `parent`.
    pub fn leaf_value(&self, parent: usize, gain: f64, cost: f64) -> f64 {
        let p = self.n(parent);
        let pv = if parent == self.root { 0.0 } else { p.value };
        match self.value_spec {
            ValueSpec::Exponential { lambda } => value_exponential(pv, gain, cost, lambda),
            ValueSpec::Linear { alpha } => value_linear(pv, gain, cost, alpha),
            ValueSpec::GlobalNormalization => path_ratio(p.path_gain + gain, p.path_cost + cost),
        }
    }

    /// Root-path offsets of every subtree node relative to `id`'s parent, for repeated
    /// evaluation of `rewired_value`.
    pub fn subtree_offsets(&self, id: usize) -> Vec<(f64, f64)> {
        let n = self.n(id);
        let (g0, c0) = (n.path_gain - n.gain, n.path_cost - n.cost);
        let own_cost = n.cost;
        self.subtree(id)
            .into_iter()
            .map(|k| {
                let k = self.n(k);
                // Exclude this node's own edge cost; it changes with the parent.
                (k.path_gain - g0, k.path_cost - c0 - own_cost)
            })
            .collect()
    }

    /// Value `id` would take under `parent` with edge cost `cost`.
    pub fn rewired_value(&self, id: usize, parent: usize, cost: f64, offsets: &[(f64, f64)]) -> f64 {
        let p = self.n(parent);
        match self.value_spec {
            ValueSpec::GlobalNormalization => offsets
                .iter()
                .map(|&(dg, dc)| path_ratio(p.path_gain + dg, p.path_cost + cost + dc))
                .fold(f64::NEG_INFINITY, f64::max),
            _ => self.leaf_value(parent, self.n(id).gain, cost),
        }
    }

    /// Root child whose subtree holds the highest value; ties to the lowest id.
    pub fn select_next(&self) -> Result<usize> {
        if self.n(self.root).children.is_empty() {
            return Err(Error::ExhaustedTree { attempts: 0 });
        }
        let mut best: Option<(f64, usize)> = None;
        for id in self.bfs() {
            if id == self.root {
                continue;
            }
            let v = self.n(id).value;
            if best.is_none_or(|(bv, bid)| v > bv || (v == bv && id < bid)) {
                best = Some((v, id));
            }
        }
        let (_, mut id) = best.expect("root has children");
        while self.n(id).parent != Some(self.root) {
            id = self.n(id).parent.expect("connected");
        }
        Ok(id)
    }

    /// Structural checks: connectivity, acyclicity, link consistency, edge length,
    /// root zeroing and cost consistency.
    pub fn check_structure(&self, l_max: f64) -> std::result::Result<(), String> {
        let root = self.n(self.root);
        if root.parent.is_some() {
            return Err("root has a parent".into());
        }
        if root.gain != 0.0 || root.cost != 0.0 || root.value != 0.0 {
            return Err(format!("root not zeroed: {} {} {}", root.gain, root.cost, root.value));
        }
        let order = self.bfs();
        if order.len() != self.live {
            return Err(format!("{} live nodes but {} reachable", self.live, order.len()));
        }
        let mut seen = vec![false; self.nodes.len()];
        for &id in &order {
            if std::mem::replace(&mut seen[id], true) {
                return Err(format!("node {id} reached twice"));
            }
            let n = self.n(id);
            for &c in &n.children {
                if !self.contains(c) || self.n(c).parent != Some(id) {
                    return Err(format!("child link {id}->{c} inconsistent"));
                }
            }
            if let Some(p) = n.parent {
                if !self.n(p).children.contains(&id) {
                    return Err(format!("parent link {p}<-{id} inconsistent"));
                }
                if n.trajectory.start != self.n(p).trajectory.end {
                    return Err(format!("node {id} does not start at its parent's end"));
                }
                if n.trajectory.length() > l_max + 1e-9 {
                    return Err(format!("edge into {id} is {} m", n.trajectory.length()));
                }
            }
            let c = Trajectory::new(n.trajectory.start, n.trajectory.end, &self.limits).duration;
            if (c - n.cost).abs() > 1e-9 {
                return Err(format!("node {id} cost {} but trajectory takes {c}", n.cost));
            }
        }
        Ok(())
    }
}
