//! Scenario runner: the sense, integrate, plan, execute loop with periodic metrics.

mod metrics;

pub use metrics::{
    exploration_ratio, mean_std, observable_set, reconstruction_error, reconstruction_error_cached,
    GroundTruth, MeanStd,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::objective::GainEvaluator;
use crate::planner::{Planner, PlannerConfig};
use crate::sim::{Execution, Scene, SimConfig, Simulator};
use crate::trajectory::Trajectory;
use crate::tsdf_map::{TsdfConfig, TsdfGrid, VoxelClass};

fn d_period() -> f64 {
    10.0
}
fn d_f_sub() -> f64 {
    3.0
}
fn d_true() -> bool {
    true
}

/// Everything needed to reproduce one run. Loaded from TOML; `scene` is resolved
/// relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub scene: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub budget_s: f64,
    #[serde(default = "d_period")]
    pub metrics_period_s: f64,
    pub voxel_size: f64,
    /// Defaults to twice the voxel size.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default = "d_f_sub")]
    pub f_sub: f64,
    /// Turn in place once before planning.
    #[serde(default = "d_true")]
    pub initial_spin: bool,
    /// Defaults to the world bounds shrunk by the collision radius.
    #[serde(default)]
    pub sampling_bounds: Option<Aabb>,
    pub planner: toml::Table,
    #[serde(default)]
    pub sim: SimConfig,
}

/// A config with its scene loaded and the planner section resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub budget_s: f64,
    pub metrics_period_s: f64,
    pub tsdf: TsdfConfig,
    pub f_sub: f64,
    pub initial_spin: bool,
    pub scene: Scene,
    pub planner: PlannerConfig,
    pub sim: SimConfig,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let scene_path = base.join(&cfg.scene);
        let scene = Scene::load(&scene_path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", scene_path.display())),
            other => other,
        })?;
        cfg.resolve(scene)
    }

    pub fn resolve(&self, scene: Scene) -> Result<Scenario> {
        let mut table = self.planner.clone();
        let radius = table
            .get("collision_radius")
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
            .unwrap_or(PlannerConfig::new(scene.bounds).collision_radius);
        let bounds = self.sampling_bounds.unwrap_or_else(|| {
            let m = Vec3::repeat(radius);
            Aabb::new(scene.bounds.min + m, scene.bounds.max - m)
        });
        table.insert(
            "sampling_bounds".into(),
            toml::Value::try_from(bounds).map_err(|e| Error::Config(e.to_string()))?,
        );
        let planner: PlannerConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("planner: {e}")))?;
        let sc = Scenario {
            name: self.name.clone(),
            seed: self.seed,
            budget_s: self.budget_s,
            metrics_period_s: self.metrics_period_s,
            tsdf: TsdfConfig {
                voxel_size: self.voxel_size,
                truncation: self.truncation.unwrap_or(2.0 * self.voxel_size),
                weight_cap: TsdfConfig::default().weight_cap,
            },
            f_sub: self.f_sub,
            initial_spin: self.initial_spin,
            scene,
            planner,
            sim: self.sim,
        };
        sc.validate()?;
        Ok(sc)
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        if !(self.budget_s >= 0.0 && self.metrics_period_s > 0.0) {
            return Err(Error::Config("budget must be nonnegative and the metrics period positive".into()));
        }
        self.planner.validate().map_err(cfg)?;
        self.sim.validate().map_err(cfg)?;
        self.scene.validate(self.sim.body_radius).map_err(cfg)?;
        if !(self.f_sub >= 1.0) {
            return Err(Error::Config("f_sub must be >= 1".into()));
        }
        Ok(())
    }

    /// Short label for grouping runs in reports.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.name,
            self.planner.variant.name(),
            self.planner.gain.name(),
            self.planner.value.name()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: f64,
    pub exploration_ratio: f64,
    pub reconstruction_error: Option<f64>,
    pub distance: f64,
    pub tree_size: usize,
    pub gain_evaluations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Budget used up.
    Completed,
    /// Planner ran out of reachable viewpoints.
    Exhausted,
    Collision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub scenario: String,
    pub seed: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub sim_time_s: f64,
    pub final_exploration_ratio: f64,
    pub final_reconstruction_error: Option<f64>,
    pub distance_m: f64,
    pub tree_size: usize,
    pub gain_evaluations: u64,
    pub observable_voxels: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub grid: TsdfGrid,
}

struct Recorder<'a> {
    period: f64,
    budget: f64,
    next: u64,
    observable: &'a [usize],
    truth: &'a GroundTruth,
    roi: &'a Aabb,
    records: Vec<MetricsRecord>,
}

impl Recorder<'_> {
    fn due(&self) -> Option<f64> {
        let t = self.next as f64 * self.period;
        (t <= self.budget + 1e-9).then_some(t)
    }

    fn record(&mut self, t: f64, grid: &TsdfGrid, distance: f64, planner: &Planner) -> Result<()> {
        let ratio = exploration_ratio(grid, self.observable)?;
        self.records.push(MetricsRecord {
            t,
            exploration_ratio: ratio,
            reconstruction_error: reconstruction_error_cached(grid, self.truth, self.roi),
            distance,
            tree_size: planner.tree.len(),
            gain_evaluations: planner.gains.evaluations,
        });
        self.next += 1;
        Ok(())
    }

    /// Emits every record due strictly before `t`.
    fn before(&mut self, t: f64, grid: &TsdfGrid, distance: f64, planner: &Planner) -> Result<()> {
        while let Some(due) = self.due() {
            if due >= t {
                break;
            }
            self.record(due, grid, distance, planner)?;
        }
        Ok(())
    }
}

struct Loop<'a> {
    sc: &'a Scenario,
    sim: Simulator,
    grid: TsdfGrid,
    planner: Planner,
    rec: Recorder<'a>,
}

impl Loop<'_> {
    /// Integrates each frame in time order, recording metrics between frames and
    /// spending the expansion budget of one frame period after each.
    fn consume(&mut self, exec: &Execution, seg: &Trajectory, seg_start_distance: f64) -> Result<()> {
        let period = 1.0 / self.sc.sim.sensor.frame_rate;
        let limits = self.planner.cfg.limits;
        let seg_len = seg.length();
        for st in &exec.frames {
            let moved = limits.translation_progress(seg_len, st.time - (self.sim.time() - exec.elapsed));
            let distance = seg_start_distance + moved;
            self.rec.before(st.time, &self.grid, distance, &self.planner)?;
            self.sim.sense_into(st, &mut self.grid);
            self.planner.sync_map(&mut self.grid);
            self.planner
                .expand_for(&self.grid, &st.reported_pose.position, period)?;
        }
        Ok(())
    }

    fn execute(&mut self, traj: &Trajectory) -> Result<()> {
        let d0 = self.sim.distance_traveled();
        let exec = self.sim.execute_trajectory(traj, &self.planner.cfg.limits);
        match exec {
            Ok(exec) => self.consume(&exec, traj, d0),
            Err(e) => Err(e),
        }
    }
}

/// Runs one scenario to the end of its budget, planner exhaustion or a collision.
pub fn run_experiment(sc: &Scenario) -> Result<RunOutput> {
    sc.validate()?;
    let mut grid = TsdfGrid::new(sc.scene.bounds, sc.tsdf)?;
    let truth = GroundTruth::new(&sc.scene, &grid);
    let camera = sc.sim.sensor.camera;
    let observable = observable_set(
        &truth,
        &grid,
        &sc.scene.start.position,
        sc.planner.collision_radius,
        camera.range,
        &sc.scene.roi,
    )?;
    let sim = Simulator::new(sc.scene.clone(), sc.sim, sc.seed)?;
    let gains = GainEvaluator::new(sc.planner.gain, camera, sc.f_sub)?.with_roi(Some(sc.scene.roi));
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    rng.set_stream(3);
    let planner = Planner::new(sc.planner.clone(), sim.reported_pose(), &mut grid, gains, rng)?;
    let rec = Recorder {
        period: sc.metrics_period_s,
        budget: sc.budget_s,
        next: 0,
        observable: &observable,
        truth: &truth,
        roi: &sc.scene.roi,
        records: Vec::new(),
    };
    let mut lp = Loop {
        sc,
        sim,
        grid,
        planner,
        rec,
    };

    let (status, failure) = match drive(&mut lp, sc) {
        Ok(s) => (s, None),
        Err(Error::Collision { time, x, y, z }) => (
            RunStatus::Collision,
            Some(format!("collision at t={time:.2} s, ({x:.2}, {y:.2}, {z:.2})")),
        ),
        Err(e) => return Err(e),
    };
    let end = lp.sim.time().min(sc.budget_s);
    let distance = lp.sim.distance_traveled();
    match status {
        _ if sc.budget_s <= 0.0 => {}
        // Nothing changes after exhaustion: the robot idles until the budget ends.
        RunStatus::Exhausted => lp.rec.before(f64::INFINITY, &lp.grid, distance, &lp.planner)?,
        _ => lp.rec.before(end + 1e-9, &lp.grid, distance, &lp.planner)?,
    }
    // A run cut short by a collision still reports where it ended.
    if status == RunStatus::Collision && lp.rec.records.last().is_none_or(|r| r.t < end - 1e-9) {
        lp.rec.record(end, &lp.grid, distance, &lp.planner)?;
    }
    let last = lp.rec.records.last().copied();
    let summary = RunSummary {
        label: sc.label(),
        scenario: sc.name.clone(),
        seed: sc.seed,
        status,
        failure,
        sim_time_s: lp.sim.time(),
        final_exploration_ratio: last.map_or(0.0, |r| r.exploration_ratio),
        final_reconstruction_error: last.and_then(|r| r.reconstruction_error),
        distance_m: distance,
        tree_size: lp.planner.tree.len(),
        gain_evaluations: lp.planner.gains.evaluations,
        observable_voxels: observable.len(),
    };
    Ok(RunOutput {
        records: lp.rec.records,
        summary,
        grid: lp.grid,
    })
}

fn drive(lp: &mut Loop<'_>, sc: &Scenario) -> Result<RunStatus> {
    if sc.budget_s <= 0.0 {
        return Ok(RunStatus::Completed);
    }
    if sc.initial_spin {
        for _ in 0..4 {
            let p = lp.sim.reported_pose();
            let q = Pose::new(p.position, p.yaw + std::f64::consts::FRAC_PI_2);
            let t = Trajectory::new(p, q, &lp.planner.cfg.limits);
            lp.execute(&t)?;
        }
    }
    while lp.sim.time() < sc.budget_s {
        let robot = lp.sim.reported_pose().position;
        let traj = match lp.planner.plan_step(&lp.grid, &robot, 0.0) {
            Ok(t) => t,
            Err(Error::ExhaustedTree { .. }) => return Ok(RunStatus::Exhausted),
            Err(e) => return Err(e),
        };
        lp.execute(&traj)?;
    }
    Ok(RunStatus::Completed)
}

/// Latest record taken at or before `t`.
pub fn record_at(records: &[MetricsRecord], t: f64) -> Option<&MetricsRecord> {
    records.iter().take_while(|r| r.t <= t + 1e-9).last()
}

pub const CSV_HEADER: [&str; 6] = [
    "t_s",
    "exploration_ratio",
    "reconstruction_error_m",
    "distance_m",
    "tree_size",
    "gain_evals",
];

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.t.to_string(),
            r.exploration_ratio.to_string(),
            r.reconstruction_error.map(|e| e.to_string()).unwrap_or_default(),
            r.distance.to_string(),
            r.tree_size.to_string(),
            r.gain_evaluations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SURFACE_FILE: &str = "surface.csv";
pub const PLY_FILE: &str = "surface.ply";

/// Writes the metrics series, summary and surface points of one run into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(std::fs::File::create(dir.join(METRICS_FILE))?, &out.records)?;
    let json = serde_json::to_string_pretty(&out.summary)?;
    std::fs::write(dir.join(SUMMARY_FILE), json + "\n")?;
    let mut w = csv::Writer::from_path(dir.join(SURFACE_FILE))?;
    w.write_record(["x", "y", "z", "distance"])?;
    for (key, v) in out.grid.iter_observed() {
        if out.grid.classify_local(key) == VoxelClass::Surface {
            let c = out.grid.center(key);
            w.write_record([c.x.to_string(), c.y.to_string(), c.z.to_string(), v.distance.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Converts the surface points of a run directory into an ASCII PLY point cloud.
pub fn export_ply(dir: &Path) -> Result<PathBuf> {
    let mut r = csv::Reader::from_path(dir.join(SURFACE_FILE))?;
    let mut pts = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| invalid(format!("bad surface row: {row:?}")))
        };
        pts.push([f(0)?, f(1)?, f(2)?]);
    }
    let path = dir.join(PLY_FILE);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", pts.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for p in pts {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(path)
}

/// Mean and sample deviation of the final metrics of a group of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub runs: usize,
    pub collisions: usize,
    pub exploration_ratio: MeanStd,
    pub reconstruction_error: Option<MeanStd>,
    pub distance_m: MeanStd,
    pub tree_size: MeanStd,
    pub gain_evaluations: MeanStd,
}

/// Groups summaries by label (in first-seen order) and aggregates each group.
pub fn aggregate(summaries: &[RunSummary]) -> Result<Vec<AggregateRow>> {
    if summaries.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let mut labels: Vec<&str> = Vec::new();
    for s in summaries {
        if !labels.contains(&s.label.as_str()) {
            labels.push(&s.label);
        }
    }
    let rows = labels
        .into_iter()
        .map(|label| {
            let group: Vec<&RunSummary> = summaries.iter().filter(|s| s.label == label).collect();
            let col = |f: &dyn Fn(&RunSummary) -> f64| -> MeanStd {
                MeanStd::of(&group.iter().map(|s| f(s)).collect::<Vec<_>>()).expect("nonempty group")
            };
            let errors: Vec<f64> = group.iter().filter_map(|s| s.final_reconstruction_error).collect();
            AggregateRow {
                label: label.to_string(),
                runs: group.len(),
                collisions: group.iter().filter(|s| s.status == RunStatus::Collision).count(),
                exploration_ratio: col(&|s| s.final_exploration_ratio),
                reconstruction_error: MeanStd::of(&errors),
                distance_m: col(&|s| s.distance_m),
                tree_size: col(&|s| s.tree_size as f64),
                gain_evaluations: col(&|s| s.gain_evaluations as f64),
            }
        })
        .collect();
    Ok(rows)
}

/// Finds `summary.json` files in `dir` and its immediate subdirectories, sorted by path.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut paths = Vec::new();
    let direct = dir.join(SUMMARY_FILE);
    if direct.is_file() {
        paths.push(direct);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path().join(SUMMARY_FILE);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect()
}

/// Plain-text table of aggregated rows.
pub fn format_report(rows: &[AggregateRow]) -> String {
    let mut s = format!(
        "{:<48} {:>4} {:>4} {:>16} {:>18} {:>14} {:>12}\n",
        "group", "runs", "coll", "exploration", "recon error [m]", "distance [m]", "tree size"
    );
    for r in rows {
        let err = r
            .reconstruction_error
            .map(|e| format!("{:.4} ± {:.4}", e.mean, e.std))
            .unwrap_or_else(|| "-".into());
        s += &format!(
            "{:<48} {:>4} {:>4} {:>16} {:>18} {:>14} {:>12}\n",
            r.label,
            r.runs,
            r.collisions,
            format!("{:.3} ± {:.3}", r.exploration_ratio.mean, r.exploration_ratio.std),
            err,
            format!("{:.1} ± {:.1}", r.distance_m.mean, r.distance_m.std),
            format!("{:.0}", r.tree_size.mean),
        );
    }
    s
}
