//! Mini-batch gradient descent on the three embedding heads.

use super::{
    coarse_loss, fine_loss, mine_coarse, mine_rotations, offset_label, sample_fine_offsets, stream_rng, BatchSet, ContrastError,
    LabeledSet, LossConfig,
};
use crate::bevlift::{frame_bev, BevHistory, GridSpec};
use crate::features::{
    aerial_features_raw, pool_bev, robot_aligned_patch, CellFeatures, EmbedTrace, EmbeddingHead, GroundExtractor, Heads, CELL_PX,
};
use crate::geom::PoseSE2;
use crate::simworld::{dead_reckon, AerialMap, Dataset};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_rot: usize,
    pub n_off: usize,
    /// Training timesteps per mini-batch; the within-batch term compares them against the last one.
    pub batch_steps: usize,
    /// Use every `frame_stride`-th frame as a training timestep.
    pub frame_stride: usize,
    /// Side of the coarse crop in cells.
    pub crop_cells: usize,
    /// Precondition each head's gradient by its input feature variance.
    pub precondition: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 50,
            seed: 0,
            n_rot: 8,
            n_off: 8,
            batch_steps: 10,
            frame_stride: 2,
            crop_cells: 12,
            precondition: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ContrastError> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ContrastError::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_steps == 0 || self.frame_stride == 0 || self.crop_cells == 0 {
            return Err(ContrastError::Config("batch_steps, frame_stride and crop_cells must be positive".into()));
        }
        Ok(())
    }
}

/// One training timestep: pooled aggregated BEV and the ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepData {
    pub ground: Vec<f64>,
    pub pose: PoseSE2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub steps: Vec<TrainStepData>,
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub map: AerialMap,
    pub cells: CellFeatures,
    pub batches: Vec<TrainBatch>,
    pub ground_dim: usize,
}

/// Per-epoch mean of each loss term over all timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_O")]
    pub l_o: f64,
    #[serde(rename = "L_B")]
    pub l_b: f64,
}

impl EpochLosses {
    pub fn write_csv(curve: &[EpochLosses], path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in curve {
            w.serialize(row)?;
        }
        w.flush()
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochLosses>, csv::Error> {
        csv::Reader::from_path(path)?.deserialize().collect()
    }
}

/// Lift every frame, aggregate the last `batch_frames` BEVs with VO-dead-reckoned poses, pool,
/// and group every `frame_stride`-th timestep into batches of consecutive steps.
/// Frames whose aggregated BEV is empty or whose pose leaves the map are skipped.
pub fn build_training_data(ds: &Dataset, spec: &GridSpec, batch_frames: usize, cfg: &TrainConfig) -> Result<TrainingData, ContrastError> {
    cfg.validate()?;
    ds.validate().map_err(|e| ContrastError::Data(e.to_string()))?;
    let cells = CellFeatures::compute(&ds.map, CELL_PX);
    let steps = pooled_steps(ds, spec, batch_frames)?;
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    for (k, step) in steps.into_iter().enumerate() {
        let Some(step) = step else {
            // a gap breaks batch contiguity
            if !cur.is_empty() {
                batches.push(TrainBatch { steps: std::mem::take(&mut cur) });
            }
            continue;
        };
        if k % cfg.frame_stride != 0 || cells.cell_of(&ds.map, step.pose.x, step.pose.y).is_none() {
            continue;
        }
        cur.push(step);
        if cur.len() == cfg.batch_steps {
            batches.push(TrainBatch { steps: std::mem::take(&mut cur) });
        }
    }
    if !cur.is_empty() {
        batches.push(TrainBatch { steps: cur });
    }
    if batches.is_empty() {
        return Err(ContrastError::Data("no usable training timesteps".into()));
    }
    let ground_dim = batches[0].steps[0].ground.len();
    Ok(TrainingData { map: ds.map.clone(), cells, batches, ground_dim })
}

/// Pooled ground feature per frame (`None` for an empty aggregate) with the gt pose.
pub(crate) fn pooled_steps(ds: &Dataset, spec: &GridSpec, batch_frames: usize) -> Result<Vec<Option<TrainStepData>>, ContrastError> {
    let t_grid_cam = ds.calib.t_body_cam();
    let odom = dead_reckon(PoseSE2::identity(), &ds.samples);
    let mut hist = BevHistory::new(batch_frames.max(1));
    let mut out = Vec::with_capacity(ds.len());
    for (k, frame) in ds.frames.iter().enumerate() {
        let bev = frame_bev(frame, &GroundExtractor, &t_grid_cam, spec).map_err(|e| ContrastError::Data(format!("frame {k}: {e}")))?;
        hist.push(bev, odom[k]);
        let agg = hist.aggregate().expect("history is non-empty");
        out.push((!agg.is_all_zero()).then(|| TrainStepData { ground: pool_bev(&agg), pose: ds.samples[k].pose_gt.to_se2() }));
    }
    Ok(out)
}

/// Diagonal-metric preconditioner: gradient descent in standardized input coordinates, mapped back to raw parameters.
#[derive(Debug, Clone)]
struct Preconditioner {
    mean: Vec<f64>,
    inv_var: Vec<f64>,
}

impl Preconditioner {
    fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1.0;
            for i in 0..dim {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_var = sq.iter().zip(&mean).map(|(s, m)| 1.0 / (s / n - m * m).max(1e-12)).collect();
        Self { mean, inv_var }
    }

    fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], inv_var: vec![1.0; dim] }
    }

    /// With W'ᵢ = σᵢWᵢ and b' = b + Σ μᵢWᵢ, a plain step on (W', b') is this step on (W, b).
    fn apply(&self, grad: &mut [f64], d: usize) {
        let nw = self.mean.len() * d;
        let (gw, gb) = grad.split_at_mut(nw);
        let mut db = gb.to_vec();
        for (i, (&mu, &iv)) in self.mean.iter().zip(&self.inv_var).enumerate() {
            for j in 0..d {
                let g = (gw[i * d + j] - mu * gb[j]) * iv;
                gw[i * d + j] = g;
                db[j] -= mu * g;
            }
        }
        gb.copy_from_slice(&db);
    }
}

struct Grads {
    ground: Vec<f64>,
    coarse: Vec<f64>,
    fine: Vec<f64>,
}

impl Grads {
    fn new(h: &Heads) -> Self {
        Self { ground: vec![0.0; h.ground.n_params()], coarse: vec![0.0; h.coarse.n_params()], fine: vec![0.0; h.fine.n_params()] }
    }
}

fn forward(head: &EmbeddingHead, f: &[f64]) -> Result<EmbedTrace, ContrastError> {
    head.forward(f).map_err(|e| ContrastError::Data(e.to_string()))
}

/// Robot-aligned fine patch descriptor at world `(x, y)` and heading `yaw`.
fn fine_patch(map: &AerialMap, x: f64, y: f64, yaw: f64) -> Option<Vec<f64>> {
    robot_aligned_patch(map, x, y, yaw, CELL_PX).map(|p| aerial_features_raw(CELL_PX as usize, p.as_raw()))
}

/// Losses and gradients of one batch; gradients are averaged over its timesteps.
fn batch_losses(
    data: &TrainingData,
    batch: &TrainBatch,
    heads: &Heads,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    grads: &mut Grads,
) -> Result<[f64; 4], ContrastError> {
    let lc = &cfg.loss;
    let map = &data.map;
    let cell_traces: Vec<EmbedTrace> = data.cells.feats.iter().map(|f| forward(&heads.coarse, f)).collect::<Result<_, _>>()?;
    let ground: Vec<EmbedTrace> = batch.steps.iter().map(|s| forward(&heads.ground, &s.ground)).collect::<Result<_, _>>()?;
    let mut sums = [0.0; 4];
    let n = batch.steps.len() as f64;

    for (step, g_tr) in batch.steps.iter().zip(&ground) {
        let e_g = &g_tr.out;
        let mut d_eg = vec![0.0; e_g.dim()];

        // coarse
        let (gc, gr) = data.cells.cell_of(map, step.pose.x, step.pose.y).expect("training poses lie on the lattice");
        let (c0, r0) = data.cells.crop_origin(gc, gr, cfg.crop_cells).ok_or_else(|| ContrastError::Data("map smaller than crop".into()))?;
        let mut crop_idx = Vec::with_capacity(cfg.crop_cells * cfg.crop_cells);
        for r in r0..r0 + cfg.crop_cells {
            for c in c0..c0 + cfg.crop_cells {
                crop_idx.push(data.cells.index(c, r));
            }
        }
        let gt_idx = data.cells.index(gc, gr);
        let cells: Vec<_> = crop_idx.iter().map(|&i| (cell_traces[i].out.clone(), i == gt_idx)).collect();
        let set = mine_coarse(e_g, &cells)?;
        let pos = vec![cells[set.positives[0].index].0.clone()];
        let neg: Vec<_> = set.negatives.iter().map(|m| cells[m.index].0.clone()).collect();
        let l = coarse_loss(e_g, &pos, &neg, lc)?;
        sums[0] += l.value;
        add(&mut d_eg, &l.d_anchor, 1.0 / n);
        let sample_idx: Vec<usize> = set.positives.iter().chain(&set.negatives).map(|m| crop_idx[m.index]).collect();
        for (ds, &ci) in l.d_samples.iter().zip(&sample_idx) {
            super::backprop(&heads.coarse, &cell_traces[ci], &scaled(ds, 1.0 / n), &mut grads.coarse);
        }

        // fine: rotations at the gt location, gt heading included as the guaranteed positive
        let p = step.pose;
        let mut rot_traces = Vec::new();
        let mut rot_labels = Vec::new();
        let rots = std::iter::once((p.yaw, true)).chain(mine_rotations(p.yaw, cfg.n_rot, lc.tau_theta(), rng));
        for (yaw, y) in rots {
            if let Some(f) = fine_patch(map, p.x, p.y, yaw) {
                rot_traces.push(forward(&heads.fine, &f)?);
                rot_labels.push(y);
            }
        }
        // offsets in map pixels at the gt heading
        let mut off_traces = Vec::new();
        let mut off_labels = Vec::new();
        let mut off_dist = Vec::new();
        let (pc, pr) = map.world_to_pixel(p.x, p.y);
        let offsets = std::iter::once((0.0, 0.0)).chain(sample_fine_offsets(rng, lc.tau_d_px, cfg.n_off).into_iter().map(|o| (o.dx, o.dy)));
        for (dx, dy) in offsets {
            let (wx, wy) = map.pixel_to_world(pc + dx, pr + dy);
            if let Some(f) = fine_patch(map, wx, wy, p.yaw) {
                off_traces.push(forward(&heads.fine, &f)?);
                off_labels.push(offset_label(dx, dy, lc.tau_d_px));
                off_dist.push(dx.hypot(dy));
            }
        }
        let rot = LabeledSet::new(rot_traces.iter().map(|t| t.out.clone()).collect(), rot_labels);
        let mut off = LabeledSet::new(off_traces.iter().map(|t| t.out.clone()).collect(), off_labels);
        off.dist_px = off_dist;
        if rot.is_empty() && off.is_empty() {
            continue;
        }
        let fl = fine_loss(e_g, &rot, &off, &BatchSet::default(), lc)?;
        sums[1] += fl.l_r.value;
        sums[2] += fl.l_o.value;
        add(&mut d_eg, &fl.l_r.d_anchor, 1.0 / n);
        add(&mut d_eg, &fl.l_o.d_anchor, 1.0 / n);
        for (ds, tr) in fl.l_r.d_samples.iter().zip(&rot_traces).chain(fl.l_o.d_samples.iter().zip(&off_traces)) {
            super::backprop(&heads.fine, tr, &scaled(ds, 1.0 / n), &mut grads.fine);
        }
        super::backprop(&heads.ground, g_tr, &d_eg, &mut grads.ground);
    }

    // within-batch term: reference fine aerial embedding against every timestep's ground embedding
    let reference = batch.steps.last().expect("non-empty batch").pose;
    if batch.steps.len() > 1 {
        if let Some(f) = fine_patch(map, reference.x, reference.y, reference.yaw) {
            let a_tr = forward(&heads.fine, &f)?;
            let labels: Vec<bool> = batch
                .steps
                .iter()
                .map(|s| (s.pose.x - reference.x).hypot(s.pose.y - reference.y) <= lc.tau_far_m)
                .collect();
            let set = BatchSet { anchor: Some(a_tr.out.clone()), set: LabeledSet::new(ground.iter().map(|t| t.out.clone()).collect(), labels) };
            let fl = fine_loss(&a_tr.out, &LabeledSet::default(), &LabeledSet::default(), &set, lc)?;
            sums[3] += fl.l_b.value * n;
            super::backprop(&heads.fine, &a_tr, &fl.l_b.d_anchor, &mut grads.fine);
            for (ds, tr) in fl.l_b.d_samples.iter().zip(&ground) {
                super::backprop(&heads.ground, tr, ds, &mut grads.ground);
            }
        }
    }
    Ok(sums)
}

fn add(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += s * x;
    }
}

fn scaled(g: &[f64], s: f64) -> Vec<f64> {
    g.iter().map(|x| s * x).collect()
}

struct Preconditioners {
    ground: Preconditioner,
    coarse: Preconditioner,
    fine: Preconditioner,
}

impl Preconditioners {
    fn fit(data: &TrainingData, heads: &Heads, on: bool) -> Self {
        if !on {
            return Self {
                ground: Preconditioner::identity(heads.ground.d_in),
                coarse: Preconditioner::identity(heads.coarse.d_in),
                fine: Preconditioner::identity(heads.fine.d_in),
            };
        }
        let ground = Preconditioner::fit(data.batches.iter().flat_map(|b| b.steps.iter().map(|s| s.ground.as_slice())), heads.ground.d_in);
        let coarse = Preconditioner::fit(data.cells.feats.iter().map(|f| f.as_slice()), heads.coarse.d_in);
        Self { ground, fine: coarse.clone(), coarse }
    }
}

/// One gradient step on a single batch; returns the batch's mean losses (L_c, L_R, L_O, L_B) before the step.
pub fn train_step(data: &TrainingData, batch_index: usize, heads: &mut Heads, cfg: &TrainConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<[f64; 4], ContrastError> {
    let pre = Preconditioners::fit(data, heads, cfg.precondition);
    step_with(data, batch_index, heads, cfg, rng, &pre)
}

fn step_with(
    data: &TrainingData,
    batch_index: usize,
    heads: &mut Heads,
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    pre: &Preconditioners,
) -> Result<[f64; 4], ContrastError> {
    let batch = &data.batches[batch_index];
    let mut grads = Grads::new(heads);
    let sums = batch_losses(data, batch, heads, cfg, rng, &mut grads)?;
    let n = batch.steps.len() as f64;
    let means = sums.map(|s| s / n);
    if means.iter().any(|v| !v.is_finite()) || [&grads.ground, &grads.coarse, &grads.fine].iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(ContrastError::Divergence { epoch: 0, batch: batch_index });
    }
    pre.ground.apply(&mut grads.ground, heads.ground.d);
    pre.coarse.apply(&mut grads.coarse, heads.coarse.d);
    pre.fine.apply(&mut grads.fine, heads.fine.d);
    heads.ground.apply_step(&grads.ground, cfg.lr);
    heads.coarse.apply_step(&grads.coarse, cfg.lr);
    heads.fine.apply_step(&grads.fine, cfg.lr);
    if !(heads.ground.is_finite() && heads.coarse.is_finite() && heads.fine.is_finite()) {
        return Err(ContrastError::Divergence { epoch: 0, batch: batch_index });
    }
    Ok(means)
}

/// Train for `cfg.epochs` epochs, visiting batches in a seeded shuffled order.
/// `progress` receives each finished epoch's losses.
pub fn train(data: &TrainingData, mut heads: Heads, cfg: &TrainConfig, mut progress: impl FnMut(&EpochLosses)) -> Result<(Heads, Vec<EpochLosses>), ContrastError> {
    cfg.validate()?;
    if heads.ground.d_in != data.ground_dim {
        return Err(ContrastError::Config(format!("ground head takes {} inputs, data has {}", heads.ground.d_in, data.ground_dim)));
    }
    let pre = Preconditioners::fit(data, &heads, cfg.precondition);
    let mut rng = stream_rng(cfg.seed, 7);
    let mut order: Vec<usize> = (0..data.batches.len()).collect();
    let total_steps: f64 = data.batches.iter().map(|b| b.steps.len() as f64).sum();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 4];
        for &b in &order {
            let means = step_with(data, b, &mut heads, cfg, &mut rng, &pre).map_err(|e| match e {
                ContrastError::Divergence { batch, .. } => ContrastError::Divergence { epoch, batch },
                e => e,
            })?;
            let n = data.batches[b].steps.len() as f64;
            for (a, m) in acc.iter_mut().zip(means) {
                *a += m * n;
            }
        }
        let row = EpochLosses { epoch, l_c: acc[0] / total_steps, l_r: acc[1] / total_steps, l_o: acc[2] / total_steps, l_b: acc[3] / total_steps };
        progress(&row);
        curve.push(row);
    }
    Ok((heads, curve))
}

/// Loss curve as CSV text (epoch, L_c, L_R, L_O, L_B).
pub fn loss_curve_csv(curve: &[EpochLosses]) -> String {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in curve {
            w.serialize(row).expect("in-memory csv");
        }
        w.flush().expect("in-memory csv");
    }
    let mut s = String::from_utf8(out).expect("csv is utf-8");
    if curve.is_empty() {
        s.push_str("epoch,L_c,L_R,L_O,L_B\n");
    }
    s
}
