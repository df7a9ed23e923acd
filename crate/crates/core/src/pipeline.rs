//! Semi-open-loop localization runner, evaluation metrics and run configuration.

pub mod cli;

use crate::bevlift::{frame_bev, BevError, BevHistory, GridSpec};
use crate::contrast::{ContrastError, TrainConfig};
use crate::features::{embed, pool_bev, Embedding, FeatureError, GroundExtractor, Heads, GROUND_CHANNELS};
use crate::geom::PoseSE2;
use crate::matcher::{register_traced, tile_and_rank, AerialIndex, CoarseGrid, MatchError, MatcherConfig};
use crate::posegraph::{default_prior_cov, Factor, GraphError, LmConfig, PoseGraph, TrajectoryRow, REGISTRATION_COV_FLOOR};
use crate::simworld::{dead_reckon, Dataset, SimError, TrajectoryConfig, WorldConfig};
use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error("{file}: {reason}")]
    Io { file: String, reason: String },
}

impl PipelineError {
    /// 1 for invalid input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::Sim(SimError::Config(_)) | PipelineError::Sim(SimError::Format { .. }) => 1,
            PipelineError::Match(MatchError::Config(_)) | PipelineError::Contrast(ContrastError::Config(_)) => 1,
            PipelineError::Feature(FeatureError::Checkpoint { .. }) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io { file: path.display().to_string(), reason: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    /// Coarse-to-fine aerial matching.
    #[default]
    Matcher,
    /// Ground-truth positions injected at the registration cadence.
    Oracle,
    /// VO and GPS prior only.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub image_hz: f64,
    pub registration_hz: f64,
    pub gps_hz: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self { image_hz: 10.0, registration_hz: 5.0, gps_hz: 0.1 }
    }
}

impl RatesConfig {
    fn every(&self, hz: f64, what: &str) -> Result<usize, PipelineError> {
        let r = self.image_hz / hz;
        let n = r.round();
        if !(n >= 1.0) || (r - n).abs() > 1e-9 * r {
            return Err(PipelineError::Validation(format!("image rate {} Hz is not a whole multiple of the {what} rate {hz} Hz", self.image_hz)));
        }
        Ok(n as usize)
    }

    /// Frames between registration attempts.
    pub fn registration_every(&self) -> Result<usize, PipelineError> {
        self.every(self.registration_hz, "registration")
    }

    /// Frames between GPS prior re-anchors.
    pub fn gps_every(&self) -> Result<usize, PipelineError> {
        self.every(self.gps_hz, "GPS")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [("image_hz", self.image_hz), ("registration_hz", self.registration_hz), ("gps_hz", self.gps_hz)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::Validation(format!("rates.{name} must be positive, got {v}")));
            }
        }
        if self.registration_hz > self.image_hz {
            return Err(PipelineError::Validation("registration rate exceeds the image rate".into()));
        }
        self.registration_every()?;
        self.gps_every()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosegraphConfig {
    pub prior_sigma_xy_m: f64,
    pub prior_sigma_yaw_deg: f64,
    /// Between-factor noise; superseded by the dataset's recorded VO noise when present.
    pub vo_sigma_trans_m: f64,
    pub vo_sigma_yaw_deg: f64,
    pub lm: LmConfig,
}

impl Default for PosegraphConfig {
    fn default() -> Self {
        let prior = default_prior_cov();
        let vo = TrajectoryConfig::default();
        Self {
            prior_sigma_xy_m: prior[(0, 0)].sqrt(),
            prior_sigma_yaw_deg: prior[(2, 2)].sqrt().to_degrees(),
            vo_sigma_trans_m: vo.sigma_trans_m,
            vo_sigma_yaw_deg: vo.sigma_yaw_rad.to_degrees(),
            lm: LmConfig::default(),
        }
    }
}

impl PosegraphConfig {
    pub fn prior_cov(&self) -> Matrix3<f64> {
        let (s, y) = (self.prior_sigma_xy_m, self.prior_sigma_yaw_deg.to_radians());
        Matrix3::from_diagonal(&Vector3::new(s * s, s * s, y * y))
    }

    fn vo_cov(&self, ds: &Dataset) -> Matrix3<f64> {
        let (t, y) = match &ds.meta {
            Some(m) => (m.sigma_trans_m, m.sigma_yaw_rad),
            None => (self.vo_sigma_trans_m, self.vo_sigma_yaw_deg.to_radians()),
        };
        // a noiseless VO chain still needs an invertible covariance
        let (t, y) = (t.max(1e-4), y.max(1e-5));
        Matrix3::from_diagonal(&Vector3::new(t * t, t * t, y * y))
    }
}

/// Synthetic data generation knobs for the `gen` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub size_px: u32,
    pub resolution: f64,
    pub n_frames: usize,
    /// Trail to drive; unset picks one from the seed.
    pub trail: Option<usize>,
    pub n_shadows: usize,
    pub shadow_strength: f64,
    pub speed_mps: f64,
    pub sigma_trans_m: f64,
    pub sigma_yaw_deg: f64,
    pub gps_sigma_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let t = TrajectoryConfig::default();
        Self {
            size_px: w.size_px,
            resolution: w.resolution,
            n_frames: 1000,
            trail: None,
            n_shadows: w.n_shadows,
            shadow_strength: w.shadow_strength,
            speed_mps: t.speed_mps,
            sigma_trans_m: t.sigma_trans_m,
            sigma_yaw_deg: t.sigma_yaw_rad.to_degrees(),
            gps_sigma_m: t.gps_sigma_m,
        }
    }
}

impl SimConfig {
    pub fn world_config(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            size_px: self.size_px,
            resolution: self.resolution,
            n_shadows: self.n_shadows,
            shadow_strength: self.shadow_strength,
            ..WorldConfig::default()
        }
    }

    pub fn trajectory_config(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            speed_mps: self.speed_mps,
            sigma_trans_m: self.sigma_trans_m,
            sigma_yaw_rad: self.sigma_yaw_deg.to_radians(),
            gps_sigma_m: self.gps_sigma_m,
            trail: self.trail,
            ..TrajectoryConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frames aggregated into one BEV.
    pub batch_frames: usize,
    pub registration: RegistrationMode,
    /// RPE window in frames.
    pub rpe_window: usize,
    /// Largest k of the recall curve.
    pub recall_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { batch_frames: 6, registration: RegistrationMode::Matcher, rpe_window: 50, recall_k: 10 }
    }
}

/// Every module's settings; TOML sections are the module names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub rates: RatesConfig,
    pub pipeline: RunConfig,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub matcher: MatcherConfig,
    pub posegraph: PosegraphConfig,
    pub sim: SimConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(s).map_err(|e| PipelineError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = std::fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.rates.validate()?;
        self.matcher.validate()?;
        self.train.validate()?;
        let g = &self.grid;
        if g.voxel.iter().chain(&g.extent).any(|v| !(*v > 0.0 && v.is_finite())) || g.cells().contains(&0) {
            return Err(PipelineError::Validation("grid voxel and extent must be positive with at least one cell per axis".into()));
        }
        if self.pipeline.batch_frames == 0 || self.pipeline.rpe_window == 0 || self.pipeline.recall_k == 0 {
            return Err(PipelineError::Validation("pipeline.batch_frames, rpe_window and recall_k must be positive".into()));
        }
        let p = &self.posegraph;
        if !(p.prior_sigma_xy_m > 0.0 && p.prior_sigma_yaw_deg > 0.0 && p.vo_sigma_trans_m >= 0.0 && p.vo_sigma_yaw_deg >= 0.0) {
            return Err(PipelineError::Validation("posegraph sigmas must be positive".into()));
        }
        Ok(())
    }

    /// Input width of the ground head: (mean, max) per channel per aggregated frame.
    pub fn ground_dim(&self) -> usize {
        2 * GROUND_CHANNELS * self.pipeline.batch_frames
    }
}

/// One registration attempt as seen by the estimator, plus its post-hoc gt rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub frame: usize,
    pub accepted: bool,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
    /// 1-based rank of the gt cell in the coarse crop; empty when outside the crop or not matched.
    pub gt_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: usize,
    pub registration_mode: RegistrationMode,
    pub registration_attempts: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// R@1 … R@k over registration attempts with a coarse ranking.
    pub recall: Vec<f64>,
    pub rmse_match: Option<f64>,
    pub rpe: f64,
    /// RPE of plain VO dead reckoning from the same start.
    pub vo_rpe: f64,
    pub rpe_window: usize,
    pub estimates: Vec<TrajectoryRow>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Validation(format!("report: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub registrations: Vec<RegistrationRecord>,
}

fn gt_poses(ds: &Dataset) -> Vec<PoseSE2> {
    ds.samples.iter().map(|s| s.pose_gt.to_se2()).collect()
}

/// Reject datasets and heads the runner cannot consume.
pub fn validate_inputs(ds: &Dataset, heads: &Heads, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    ds.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
    if ds.is_empty() {
        return Err(PipelineError::Validation("dataset has no frames".into()));
    }
    if heads.ground.d_in != cfg.ground_dim() {
        return Err(PipelineError::Validation(format!(
            "ground head takes {} inputs but {} frames of {} channels give {}",
            heads.ground.d_in,
            cfg.pipeline.batch_frames,
            GROUND_CHANNELS,
            cfg.ground_dim()
        )));
    }
    if heads.coarse.d != heads.ground.d || heads.fine.d != heads.ground.d {
        return Err(PipelineError::Validation("heads disagree on the embedding dimension".into()));
    }
    for (k, f) in ds.frames.iter().enumerate() {
        if f.intrinsics != ds.calib.intrinsics {
            return Err(PipelineError::Validation(format!("frame {k}: intrinsics differ from the calibration")));
        }
        if f.depth.width != f.rgb.width() || f.depth.height != f.rgb.height() {
            return Err(PipelineError::Validation(format!("frame {k}: depth and rgb sizes differ")));
        }
        if !f.depth.data.iter().any(|&d| d > 0.0) {
            return Err(PipelineError::Validation(format!("frame {k}: depth image has no valid pixels")));
        }
    }
    if !ds.samples[0].gps.valid {
        return Err(PipelineError::Validation("the first GPS reading is invalid; nothing anchors the run".into()));
    }
    Ok(())
}

/// Pooled aggregate of the last `batch_frames` BEVs at every frame, stacked along VO; `None` where the aggregate is empty.
pub fn pooled_descriptors(ds: &Dataset, cfg: &PipelineConfig) -> Result<Vec<Option<Vec<f64>>>, PipelineError> {
    let t_grid_cam = ds.calib.t_body_cam();
    let odom = dead_reckon(PoseSE2::identity(), &ds.samples);
    let mut hist = BevHistory::new(cfg.pipeline.batch_frames);
    let mut out = Vec::with_capacity(ds.len());
    for (k, frame) in ds.frames.iter().enumerate() {
        hist.push(frame_bev(frame, &GroundExtractor, &t_grid_cam, &cfg.grid)?, odom[k]);
        let agg = hist.aggregate().expect("history is non-empty");
        out.push(if agg.is_all_zero() { None } else { Some(pool_bev(&agg)) });
    }
    Ok(out)
}

/// Ground embedding of every frame's pooled aggregate.
pub fn ground_embeddings(ds: &Dataset, heads: &Heads, cfg: &PipelineConfig) -> Result<Vec<Option<Embedding>>, PipelineError> {
    embed_descriptors(&pooled_descriptors(ds, cfg)?, heads)
}

pub fn embed_descriptors(pooled: &[Option<Vec<f64>>], heads: &Heads) -> Result<Vec<Option<Embedding>>, PipelineError> {
    pooled.iter().map(|p| p.as_ref().map(|f| embed(f, &heads.ground)).transpose().map_err(PipelineError::from)).collect()
}

/// Run the estimator over every frame of `ds`.
/// Per frame: VO between factor; every `image/registration` frames a registration attempt, added iff accepted;
/// every `image/gps` frames the single prior moves to the current node at the GPS reading; full re-solve.
/// Reported estimates are the final smoothed graph, so a run without registrations is the VO chain rigidly anchored.
/// The start heading is the first ground-truth heading (GPS has none); no other ground truth reaches the estimator.
pub fn run(ds: &Dataset, heads: &Heads, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    validate_inputs(ds, heads, cfg)?;
    let reg_every = cfg.rates.registration_every()?;
    let gps_every = cfg.rates.gps_every()?;
    let mode = cfg.pipeline.registration;
    let index = match mode {
        RegistrationMode::Matcher => Some(AerialIndex::new(&ds.map, &heads.coarse)?),
        _ => None,
    };
    let embeddings = match mode {
        RegistrationMode::Matcher => ground_embeddings(ds, heads, cfg)?,
        _ => vec![None; ds.len()],
    };
    let prior_cov = cfg.posegraph.prior_cov();
    let vo_cov = cfg.posegraph.vo_cov(ds);
    let lm = &cfg.posegraph.lm;

    let mut graph = PoseGraph::new();
    let mut records = Vec::new();
    let mut grids: Vec<Option<CoarseGrid>> = Vec::new();
    let start_yaw = ds.samples[0].pose_gt.to_se2().yaw;

    for (k, sample) in ds.samples.iter().enumerate() {
        if k == 0 {
            let start = PoseSE2::new(sample.gps.x, sample.gps.y, start_yaw);
            graph.add_node(start);
            graph.add_factor(Factor::prior(0, start, prior_cov)?)?;
        } else {
            let init = graph.nodes[k - 1].compose(&sample.vo_rel);
            graph.add_node(init);
            graph.add_factor(Factor::between(k - 1, k, sample.vo_rel, vo_cov)?)?;
        }
        if (k + 1) % reg_every == 0 {
            let prior = graph.nodes[k];
            let mut rec = RegistrationRecord { frame: k, accepted: false, x: f64::NAN, y: f64::NAN, yaw: f64::NAN, cov_xx: f64::NAN, cov_xy: f64::NAN, cov_yy: f64::NAN, gt_rank: None };
            let mut grid = None;
            match mode {
                RegistrationMode::Matcher => {
                    if let (Some(index), Some(e_g)) = (&index, &embeddings[k]) {
                        let t = register_traced(index, e_g, &prior, heads, &cfg.matcher)?;
                        let est = t.estimate;
                        rec = RegistrationRecord {
                            accepted: est.accepted,
                            x: est.mean[0],
                            y: est.mean[1],
                            yaw: est.yaw,
                            cov_xx: est.cov[0][0],
                            cov_xy: est.cov[0][1],
                            cov_yy: est.cov[1][1],
                            ..rec
                        };
                        if est.accepted {
                            graph.add_factor(Factor::registration(k, est.mean, est.cov_matrix())?)?;
                        }
                        grid = Some(t.grid);
                    }
                }
                RegistrationMode::Oracle => {
                    let gt = ds.samples[k].pose_gt.to_se2();
                    let f = REGISTRATION_COV_FLOOR;
                    rec = RegistrationRecord { accepted: true, x: gt.x, y: gt.y, yaw: gt.yaw, cov_xx: f, cov_xy: 0.0, cov_yy: f, ..rec };
                    graph.add_factor(Factor::registration(k, [gt.x, gt.y], Matrix2::identity() * f)?)?;
                }
                RegistrationMode::Disabled => {}
            }
            if mode != RegistrationMode::Disabled {
                records.push(rec);
                grids.push(grid);
            }
        }
        if k > 0 && (k + 1) % gps_every == 0 && sample.gps.valid {
            let cur = graph.nodes[k];
            graph.set_prior(Factor::prior(k, PoseSE2::new(sample.gps.x, sample.gps.y, cur.yaw), prior_cov)?)?;
        }
        graph.solve(lm)?;
    }
    let covs = graph.marginal_covariances()?;
    let estimates: Vec<TrajectoryRow> = ds.samples.iter().zip(&graph.nodes).zip(&covs).map(|((s, p), c)| TrajectoryRow::new(s.t, p, c)).collect();

    // everything below consults ground truth and feeds only the report
    let gt = gt_poses(ds);
    if let Some(index) = &index {
        for (rec, grid) in records.iter_mut().zip(&grids) {
            if let Some(grid) = grid {
                let p = gt[rec.frame];
                rec.gt_rank = index.cells.cell_of(&ds.map, p.x, p.y).and_then(|c| grid.rank_of(c));
            }
        }
    }
    let report = build_report(ds, mode, estimates, &records, cfg)?;
    Ok(RunOutput { report, registrations: records })
}

/// Assemble a report from the estimator's outputs and ground truth.
pub fn build_report(
    ds: &Dataset,
    mode: RegistrationMode,
    estimates: Vec<TrajectoryRow>,
    records: &[RegistrationRecord],
    cfg: &PipelineConfig,
) -> Result<RunReport, PipelineError> {
    if estimates.len() != ds.len() {
        return Err(PipelineError::Validation(format!("{} estimates for {} frames", estimates.len(), ds.len())));
    }
    let gt = gt_poses(ds);
    let est: Vec<PoseSE2> = estimates.iter().map(|r| PoseSE2::new(r.x, r.y, r.yaw)).collect();
    let accepted: Vec<([f64; 2], [f64; 2])> = records
        .iter()
        .filter(|r| r.accepted)
        .map(|r| ([r.x, r.y], [gt[r.frame].x, gt[r.frame].y]))
        .collect();
    let window = cfg.pipeline.rpe_window;
    let (rmse_match, rpe) = metric_rmse_rpe(&est, &gt, &accepted, window);
    let vo = dead_reckon(est[0], &ds.samples);
    let (_, vo_rpe) = metric_rmse_rpe(&vo, &gt, &[], window);
    let ranks: Vec<Option<usize>> = records.iter().filter(|_| mode == RegistrationMode::Matcher).map(|r| r.gt_rank).collect();
    let n_acc = records.iter().filter(|r| r.accepted).count();
    Ok(RunReport {
        frames: ds.len(),
        registration_mode: mode,
        registration_attempts: records.len(),
        accepted: n_acc,
        rejected: records.len() - n_acc,
        recall: recall_curve(&ranks, cfg.pipeline.recall_k),
        rmse_match,
        rpe,
        vo_rpe,
        rpe_window: window,
        estimates,
    })
}

/// R@1 … R@`kmax` from 1-based ranks; `None` counts as a miss. Empty input gives zeros.
pub fn recall_curve(ranks: &[Option<usize>], kmax: usize) -> Vec<f64> {
    let n = ranks.len();
    (1..=kmax)
        .map(|k| if n == 0 { 0.0 } else { ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n as f64 })
        .collect()
}

/// Coarse recall over every frame with a non-empty BEV: crop centered on the ground-truth position, scored against its cell.
/// Returns the curve and the gt-cell rank of each query.
pub fn metric_recall(ds: &Dataset, heads: &Heads, cfg: &PipelineConfig) -> Result<(Vec<f64>, Vec<Option<usize>>), PipelineError> {
    let index = AerialIndex::new(&ds.map, &heads.coarse)?;
    let embeddings = ground_embeddings(ds, heads, cfg)?;
    metric_recall_with(&index, &embeddings, &gt_poses(ds), cfg)
}

/// [`metric_recall`] from precomputed embeddings (`None` entries are skipped).
pub fn metric_recall_with(
    index: &AerialIndex,
    embeddings: &[Option<Embedding>],
    gt: &[PoseSE2],
    cfg: &PipelineConfig,
) -> Result<(Vec<f64>, Vec<Option<usize>>), PipelineError> {
    let mut ranks = Vec::new();
    for (e, p) in embeddings.iter().zip(gt) {
        let Some(e) = e else { continue };
        let Some(cell) = index.cells.cell_of(&index.map, p.x, p.y) else { continue };
        let grid = tile_and_rank(index, (p.x, p.y), e, &cfg.matcher)?;
        ranks.push(grid.rank_of(cell));
    }
    Ok((recall_curve(&ranks, cfg.pipeline.recall_k), ranks))
}

/// (RMSE of accepted registration means against gt, translational RPE over `window` frames).
/// `matches` pairs each accepted mean with its gt position; RPE is 0 when the run is shorter than the window.
pub fn metric_rmse_rpe(est: &[PoseSE2], gt: &[PoseSE2], matches: &[([f64; 2], [f64; 2])], window: usize) -> (Option<f64>, f64) {
    let rmse = (!matches.is_empty()).then(|| {
        (matches.iter().map(|(m, g)| (m[0] - g[0]).powi(2) + (m[1] - g[1]).powi(2)).sum::<f64>() / matches.len() as f64).sqrt()
    });
    let n = est.len().min(gt.len());
    if n <= window {
        return (rmse, 0.0);
    }
    let mut sum = 0.0;
    for i in 0..n - window {
        let de = est[i].between(&est[i + window]);
        let dg = gt[i].between(&gt[i + window]);
        let err = dg.between(&de);
        sum += err.x * err.x + err.y * err.y;
    }
    (rmse, (sum / (n - window) as f64).sqrt())
}

pub fn write_registrations_csv(path: &Path, rows: &[RegistrationRecord]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn read_registrations_csv(path: &Path) -> Result<Vec<RegistrationRecord>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::io(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| PipelineError::io(path, e))
}

/// One point of a plottable series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Ground truth, VO dead reckoning, the estimate and accepted registrations as (x, y, series) triples.
pub fn plot_series(ds: &Dataset, report: &RunReport, registrations: &[RegistrationRecord]) -> Vec<PlotPoint> {
    let gt = gt_poses(ds);
    let mut out = Vec::new();
    let pt = |x: f64, y: f64, s: &str| PlotPoint { x, y, series: s.to_string() };
    out.extend(gt.iter().map(|p| pt(p.x, p.y, "ground_truth")));
    if let Some(first) = report.estimates.first() {
        let vo = dead_reckon(PoseSE2::new(first.x, first.y, first.yaw), &ds.samples);
        out.extend(vo.iter().map(|p| pt(p.x, p.y, "vo")));
    }
    out.extend(report.estimates.iter().map(|r| pt(r.x, r.y, "estimate")));
    out.extend(registrations.iter().filter(|r| r.accepted).map(|r| pt(r.x, r.y, "registration")));
    out
}
