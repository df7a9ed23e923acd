//! Margin-based cosine contrastive losses, coarse and fine negative miners, and the head trainer.
//!
//! Every loss returns its value together with the gradient with respect to the anchor and each
//! sample vector, so the trainer can backpropagate through [`EmbeddingHead::backward`].

use crate::features::{Embedding, EmbeddingHead};
use crate::geom::angle_diff;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

mod trainer;

pub use trainer::{
    loss_curve_csv,
    build_training_data, train, train_step, EpochLosses, TrainBatch, TrainConfig, TrainStepData, TrainingData,
};

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("empty sample set: {0}")]
    EmptySet(&'static str),
    #[error("invalid labels: {0}")]
    InvalidLabel(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Divergence { epoch: usize, batch: usize },
    #[error("training data: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub m_c: f64,
    pub m_r: f64,
    pub m_o: f64,
    pub m_b: f64,
    pub sigma_o_px: f64,
    pub tau_theta_deg: f64,
    pub tau_far_m: f64,
    pub tau_d_px: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m_c: 1.5, m_r: 0.8, m_o: 1.5, m_b: 1.25, sigma_o_px: 64.0, tau_theta_deg: 10.0, tau_far_m: 3.0, tau_d_px: 3.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastError> {
        for (name, m) in [("m_c", self.m_c), ("m_r", self.m_r), ("m_o", self.m_o), ("m_b", self.m_b)] {
            if !(m > 0.0 && m <= 2.0) {
                return Err(ContrastError::Config(format!("margin {name} = {m} outside (0, 2]")));
            }
        }
        if !(self.sigma_o_px > 0.0 && self.tau_d_px > 0.0 && self.tau_far_m > 0.0 && self.tau_theta_deg > 0.0) {
            return Err(ContrastError::Config("sigma_o, tau_d, tau_far and tau_theta must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_theta(&self) -> f64 {
        self.tau_theta_deg.to_radians()
    }
}

/// Loss value with gradients w.r.t. the anchor and every sample vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_samples: Vec<Vec<f64>>,
}

impl LossGrad {
    fn zero(dim: usize, n: usize) -> Self {
        Self { value: 0.0, d_anchor: vec![0.0; dim], d_samples: vec![vec![0.0; dim]; n] }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − a·b / (‖a‖‖b‖)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Distance and its gradients w.r.t. `a` and `b`.
fn cosine_distance_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let ab = dot(a, b);
    let cos = ab / (na * nb);
    let da = a.iter().zip(b).map(|(&ai, &bi)| -(bi / (na * nb) - cos * ai / (na * na))).collect();
    let db = a.iter().zip(b).map(|(&ai, &bi)| -(ai / (na * nb) - cos * bi / (nb * nb))).collect();
    (1.0 - cos, da, db)
}

/// Mean over positives of `w·d` plus mean over negatives of `w·max(0, m − d)`.
/// Either subset may be empty, in which case its term is 0.
pub fn contrastive_loss(anchor: &[f64], samples: &[&[f64]], labels: &[bool], weights: Option<&[f64]>, margin: f64) -> LossGrad {
    assert_eq!(samples.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    let mut out = LossGrad::zero(anchor.len(), samples.len());
    for (i, (s, &y)) in samples.iter().zip(labels).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (d, da, ds) = cosine_distance_grad(anchor, s);
        let coeff = if y {
            out.value += w * d / n_pos as f64;
            w / n_pos as f64
        } else if d < margin {
            out.value += w * (margin - d) / n_neg as f64;
            -w / n_neg as f64
        } else {
            0.0
        };
        if coeff != 0.0 {
            for (g, x) in out.d_anchor.iter_mut().zip(&da) {
                *g += coeff * x;
            }
            for (g, x) in out.d_samples[i].iter_mut().zip(&ds) {
                *g += coeff * x;
            }
        }
    }
    out
}

fn views(set: &[Embedding]) -> Vec<&[f64]> {
    set.iter().map(|e| e.0.as_slice()).collect()
}

/// Mean cosine distance to the positives.
pub fn loss_pos(e_g: &Embedding, pos: &[Embedding]) -> Result<LossGrad, ContrastError> {
    if pos.is_empty() {
        return Err(ContrastError::EmptySet("positives"));
    }
    Ok(contrastive_loss(&e_g.0, &views(pos), &vec![true; pos.len()], None, 0.0))
}

/// Mean hinge `max(0, m − d)` over the negatives.
pub fn loss_neg(e_g: &Embedding, neg: &[Embedding], margin: f64) -> Result<LossGrad, ContrastError> {
    if neg.is_empty() {
        return Err(ContrastError::EmptySet("negatives"));
    }
    Ok(contrastive_loss(&e_g.0, &views(neg), &vec![false; neg.len()], None, margin))
}

/// Metadata of one mined sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub index: usize,
    pub map_px: [f64; 2],
    pub yaw: f64,
    pub dist_px: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub positives: Vec<SampleMeta>,
    pub negatives: Vec<SampleMeta>,
}

/// Positive = the gt cell; negatives = non-gt cells with corr ≥ 0 plus the top ⌈25%⌉ non-gt cells by corr.
pub fn mine_coarse(e_g: &Embedding, cells: &[(Embedding, bool)]) -> Result<SampleSet, ContrastError> {
    let gt: Vec<usize> = cells.iter().enumerate().filter(|(_, c)| c.1).map(|(i, _)| i).collect();
    if gt.len() != 1 {
        return Err(ContrastError::InvalidLabel(format!("expected exactly one gt cell, found {}", gt.len())));
    }
    let corr: Vec<f64> = cells.iter().map(|(e, _)| crate::features::correlation(e_g, e)).collect();
    let mut others: Vec<usize> = (0..cells.len()).filter(|&i| i != gt[0]).collect();
    others.sort_by(|&a, &b| corr[b].total_cmp(&corr[a]).then(a.cmp(&b)));
    let quota = (others.len() as f64 * 0.25).ceil() as usize;
    let mut negatives: Vec<usize> = others.iter().enumerate().filter(|&(rank, &i)| rank < quota || corr[i] >= 0.0).map(|(_, &i)| i).collect();
    negatives.sort_unstable();
    let meta = |i: usize| SampleMeta { index: i, map_px: [0.0, 0.0], yaw: 0.0, dist_px: 0.0 };
    Ok(SampleSet { positives: vec![meta(gt[0])], negatives: negatives.into_iter().map(meta).collect() })
}

/// `L_+` over the positive cell plus `L_−` with margin `m_c` over the mined negatives.
pub fn coarse_loss(e_g: &Embedding, pos: &[Embedding], neg: &[Embedding], cfg: &LossConfig) -> Result<LossGrad, ContrastError> {
    let samples: Vec<&[f64]> = pos.iter().chain(neg).map(|e| e.0.as_slice()).collect();
    if pos.is_empty() {
        return Err(ContrastError::EmptySet("coarse positives"));
    }
    let labels: Vec<bool> = (0..samples.len()).map(|i| i < pos.len()).collect();
    Ok(contrastive_loss(&e_g.0, &samples, &labels, None, cfg.m_c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineOffset {
    pub dx: f64,
    pub dy: f64,
    pub positive: bool,
}

impl FineOffset {
    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Offset label: positive iff `‖(dx, dy)‖ < τ_d`.
pub fn offset_label(dx: f64, dy: f64, tau_d: f64) -> bool {
    dx.hypot(dy) < tau_d
}

/// Offsets with magnitudes `U[0, √2·τ_d]` per axis and independent random signs.
pub fn sample_fine_offsets(rng: &mut impl Rng, tau_d: f64, n: usize) -> Vec<FineOffset> {
    let hi = std::f64::consts::SQRT_2 * tau_d;
    (0..n)
        .map(|_| {
            let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let dx = sx * rng.random_range(0.0..=hi);
            let dy = sy * rng.random_range(0.0..=hi);
            FineOffset { dx, dy, positive: offset_label(dx, dy, tau_d) }
        })
        .collect()
}

/// Rotation label: positive iff the wrapped heading difference is at most `τ_θ`.
pub fn rotation_label(yaw: f64, gt_yaw: f64, tau_theta: f64) -> bool {
    angle_diff(yaw, gt_yaw).abs() <= tau_theta
}

/// Fine positive: closer than `τ_far` and heading within `τ_θ`.
pub fn fine_label(dist_m: f64, yaw: f64, gt_yaw: f64, cfg: &LossConfig) -> bool {
    dist_m < cfg.tau_far_m && rotation_label(yaw, gt_yaw, cfg.tau_theta())
}

/// `n_rot` headings uniform on (−π, π] with their labels against `gt_yaw`.
pub fn mine_rotations(gt_yaw: f64, n_rot: usize, tau_theta: f64, rng: &mut impl Rng) -> Vec<(f64, bool)> {
    (0..n_rot)
        .map(|_| {
            let yaw = crate::geom::normalize_angle(rng.random_range(-PI..PI));
            (yaw, rotation_label(yaw, gt_yaw, tau_theta))
        })
        .collect()
}

pub fn gaussian_weight(d: f64, sigma: f64) -> f64 {
    (-0.5 * (d / sigma).powi(2)).exp()
}

/// Labeled embeddings for one fine loss term.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub samples: Vec<Embedding>,
    pub labels: Vec<bool>,
    /// Pixel distance from ground truth, used by the offset term's Gaussian weight.
    pub dist_px: Vec<f64>,
}

impl LabeledSet {
    pub fn new(samples: Vec<Embedding>, labels: Vec<bool>) -> Self {
        let n = samples.len();
        Self { samples, labels, dist_px: vec![0.0; n] }
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Within-batch term: anchor is the reference timestep's aerial embedding, samples are ground embeddings.
#[derive(Debug, Clone, Default)]
pub struct BatchSet {
    pub anchor: Option<Embedding>,
    pub set: LabeledSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineLoss {
    pub l_r: LossGrad,
    pub l_o: LossGrad,
    pub l_b: LossGrad,
}

impl FineLoss {
    pub fn total(&self) -> f64 {
        self.l_r.value + self.l_o.value + self.l_b.value
    }
}

/// `L_R + L_O + L_B`; `L_O` weights each sample by `G(d_p, σ_o)`. Empty terms contribute 0.
pub fn fine_loss(e_g: &Embedding, rot: &LabeledSet, off: &LabeledSet, batch: &BatchSet, cfg: &LossConfig) -> Result<FineLoss, ContrastError> {
    let batch_active = batch.anchor.is_some() && !batch.set.is_empty();
    if rot.is_empty() && off.is_empty() && !batch_active {
        return Err(ContrastError::EmptySet("rotation, offset and batch sets"));
    }
    let dim = e_g.dim();
    let l_r = if rot.is_empty() { LossGrad::zero(dim, 0) } else { contrastive_loss(&e_g.0, &views(&rot.samples), &rot.labels, None, cfg.m_r) };
    let l_o = if off.is_empty() {
        LossGrad::zero(dim, 0)
    } else {
        let w: Vec<f64> = off.dist_px.iter().map(|&d| gaussian_weight(d, cfg.sigma_o_px)).collect();
        contrastive_loss(&e_g.0, &views(&off.samples), &off.labels, Some(&w), cfg.m_o)
    };
    let l_b = match (&batch.anchor, batch_active) {
        (Some(a), true) => contrastive_loss(&a.0, &views(&batch.set.samples), &batch.set.labels, None, cfg.m_b),
        _ => LossGrad::zero(dim, 0),
    };
    Ok(FineLoss { l_r, l_o, l_b })
}

/// Backpropagate `d_out` through `head`, skipping all-zero upstream gradients.
pub(crate) fn backprop(head: &EmbeddingHead, trace: &crate::features::EmbedTrace, d_out: &[f64], grad: &mut [f64]) {
    if d_out.iter().any(|&g| g != 0.0) {
        head.backward(trace, d_out, grad);
    }
}

/// Deterministic RNG for a (seed, stream) pair.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_emb(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding::from_raw((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Embedding at cosine distance `d` from `e` (in the plane of `e` and a random direction).
    fn at_distance(rng: &mut ChaCha8Rng, e: &Embedding, d: f64) -> Embedding {
        let r = rand_emb(rng, e.dim());
        let c = correlation_raw(&r.0, &e.0);
        let perp = Embedding::from_raw(r.0.iter().zip(&e.0).map(|(ri, ei)| ri - c * ei).collect()).unwrap();
        let cos = 1.0 - d;
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        Embedding(e.0.iter().zip(&perp.0).map(|(a, p)| cos * a + sin * p).collect())
    }

    fn correlation_raw(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn positive_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = rand_emb(&mut rng, 16);
        assert!(loss_pos(&e, &[e.clone()]).unwrap().value.abs() < 1e-12);
        assert!((loss_pos(&e, &[e.neg()]).unwrap().value - 2.0).abs() < 1e-12);
        assert!(matches!(loss_pos(&e, &[]), Err(ContrastError::EmptySet(_))));
        let set: Vec<Embedding> = (0..7).map(|_| rand_emb(&mut rng, 16)).collect();
        let oracle = set.iter().map(|s| cosine_distance(&e.0, &s.0)).sum::<f64>() / 7.0;
        assert!((loss_pos(&e, &set).unwrap().value - oracle).abs() < 1e-9);
    }

    #[test]
    fn negative_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = rand_emb(&mut rng, 16);
        let at_m = at_distance(&mut rng, &e, 1.5);
        assert!(loss_neg(&e, &[at_m], 1.5).unwrap().value.abs() < 1e-9);
        assert!((loss_neg(&e, &[e.clone()], 1.5).unwrap().value - 1.5).abs() < 1e-12);
        assert!(matches!(loss_neg(&e, &[], 1.5), Err(ContrastError::EmptySet(_))));
        let set: Vec<Embedding> = (0..9).map(|_| rand_emb(&mut rng, 16)).collect();
        let oracle = set.iter().map(|s| (1.2 - cosine_distance(&e.0, &s.0)).max(0.0)).sum::<f64>() / 9.0;
        assert!((loss_neg(&e, &set, 1.2).unwrap().value - oracle).abs() < 1e-9);
    }

    #[test]
    fn coarse_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let e = rand_emb(&mut rng, 32);
        let far: Vec<Embedding> = (0..4).map(|_| at_distance(&mut rng, &e, 1.6)).collect();
        assert!(coarse_loss(&e, &[e.clone()], &far, &cfg).unwrap().value.abs() < 1e-9);
        let p = at_distance(&mut rng, &e, 0.2);
        let n = at_distance(&mut rng, &e, 0.5);
        assert!((coarse_loss(&e, &[p.clone()], &[n.clone()], &cfg).unwrap().value - 1.2).abs() < 1e-9);
        let negs: Vec<Embedding> = (0..10).map(|_| rand_emb(&mut rng, 32)).collect();
        let sum = loss_pos(&e, &[p.clone()]).unwrap().value + loss_neg(&e, &negs, 1.5).unwrap().value;
        assert!((coarse_loss(&e, &[p], &negs, &cfg).unwrap().value - sum).abs() < 1e-9);
    }

    fn coarse_negative_oracle(e: &Embedding, cells: &[(Embedding, bool)]) -> Vec<usize> {
        let corr: Vec<f64> = cells.iter().map(|(c, _)| correlation_raw(&e.0, &c.0)).collect();
        let non_gt: Vec<usize> = (0..cells.len()).filter(|&i| !cells[i].1).collect();
        let quota = (non_gt.len() * 25 + 99) / 100;
        let mut out = Vec::new();
        for &i in &non_gt {
            // rank = number of non-gt cells strictly ahead in (corr desc, index asc) order
            let rank = non_gt.iter().filter(|&&j| corr[j] > corr[i] || (corr[j] == corr[i] && j < i)).count();
            if corr[i] >= 0.0 || rank < quota {
                out.push(i);
            }
        }
        out
    }

    #[test]
    fn coarse_miner_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = rand_emb(&mut rng, 8);
        let mut cells: Vec<(Embedding, bool)> = (0..144).map(|_| (e.neg(), false)).collect();
        cells[10].1 = true;
        let s = mine_coarse(&e, &cells).unwrap();
        assert_eq!(s.negatives.len(), 36);
        assert_eq!(s.positives[0].index, 10);
        for c in cells.iter_mut().filter(|c| !c.1) {
            c.0 = at_distance(&mut rng, &e, 0.5);
        }
        assert_eq!(mine_coarse(&e, &cells).unwrap().negatives.len(), 143);
        cells[10].1 = false;
        assert!(matches!(mine_coarse(&e, &cells), Err(ContrastError::InvalidLabel(_))));

        let mut cells: Vec<(Embedding, bool)> = (0..143).map(|_| (rand_emb(&mut rng, 8), false)).collect();
        cells[77].1 = true;
        let got: Vec<usize> = mine_coarse(&e, &cells).unwrap().negatives.iter().map(|m| m.index).collect();
        assert_eq!(got, coarse_negative_oracle(&e, &cells));
    }

    #[test]
    fn offset_sampling_labels_and_fraction() {
        assert!(offset_label(0.0, 0.0, 3.0));
        assert!(!offset_label(3.0, 3.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_fine_offsets(&mut rng, 3.0, 10_000);
        assert!(s.iter().all(|o| o.dx.abs() <= 3.0 * 2f64.sqrt() && o.dy.abs() <= 3.0 * 2f64.sqrt()));
        assert!(s.iter().all(|o| o.positive == (o.norm() < 3.0)));
        let frac = s.iter().filter(|o| o.positive).count() as f64 / 1e4;
        // quarter disc of radius τ over a square of side √2·τ
        let closed_form = (PI / 4.0) / 2.0;
        assert!((closed_form - PI / 8.0).abs() < 1e-15);
        assert!((frac - closed_form).abs() < 0.02, "{frac}");
        let q = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        for (sx, sy) in q {
            assert!(s.iter().any(|o| o.dx.signum() == sx && o.dy.signum() == sy));
        }
    }

    #[test]
    fn rotation_labels_wrap() {
        let tau = 10f64.to_radians();
        assert!(rotation_label(0.3, 0.3, tau));
        assert!(rotation_label(359f64.to_radians(), 0.0, tau));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = 2.9;
        for (yaw, y) in mine_rotations(gt, 1000, tau, &mut rng) {
            assert!(yaw > -PI && yaw <= PI);
            let mut d = (yaw - gt).abs() % (2.0 * PI);
            if d > PI {
                d = 2.0 * PI - d;
            }
            assert_eq!(y, d <= tau);
        }
    }

    #[test]
    fn fine_labels_need_both_thresholds() {
        let cfg = LossConfig::default();
        let eps = 1e-6;
        let t = cfg.tau_theta();
        assert!(fine_label(3.0 - eps, 0.0, 0.0, &cfg));
        assert!(!fine_label(3.0 + eps, 0.0, 0.0, &cfg));
        assert!(fine_label(1.0, t - eps, 0.0, &cfg));
        assert!(!fine_label(1.0, t + eps, 0.0, &cfg));
        assert!(!fine_label(3.0 + eps, t - eps, 0.0, &cfg));
        assert!(fine_label(0.0, PI - t / 2.0, -PI + t / 2.0, &cfg));
    }

    #[test]
    fn gaussian_weight_examples() {
        assert_eq!(gaussian_weight(0.0, 64.0), 1.0);
        assert!((gaussian_weight(64.0, 64.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_weight(64.0, 64.0) - 0.6065).abs() < 1e-4);
        let sweep: Vec<f64> = (0..100).map(|i| gaussian_weight(i as f64 * 3.0, 64.0)).collect();
        assert!(sweep.windows(2).all(|w| w[1] < w[0]));
        assert!(sweep.iter().all(|&g| g > 0.0 && g <= 1.0));
    }

    #[test]
    fn fine_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        let e = rand_emb(&mut rng, 16);
        let rot = LabeledSet::new(vec![e.clone(), at_distance(&mut rng, &e, 0.9)], vec![true, false]);
        let mut off = LabeledSet::new(vec![e.clone(), at_distance(&mut rng, &e, 1.6)], vec![true, false]);
        off.dist_px = vec![1.0, 5.0];
        let a = rand_emb(&mut rng, 16);
        let batch = BatchSet { anchor: Some(a.clone()), set: LabeledSet::new(vec![a.clone(), at_distance(&mut rng, &a, 1.3)], vec![true, false]) };
        assert!(fine_loss(&e, &rot, &off, &batch, &cfg).unwrap().total().abs() < 1e-9);

        let mut one = LabeledSet::new(vec![e.clone()], vec![false]);
        one.dist_px = vec![64.0];
        let l = fine_loss(&e, &LabeledSet::default(), &one, &BatchSet::default(), &cfg).unwrap();
        assert!((l.total() - (-0.5f64).exp() * 1.5).abs() < 1e-12);

        assert!(matches!(
            fine_loss(&e, &LabeledSet::default(), &LabeledSet::default(), &BatchSet::default(), &cfg),
            Err(ContrastError::EmptySet(_))
        ));

        // componentwise oracle
        let rs: Vec<Embedding> = (0..6).map(|_| rand_emb(&mut rng, 16)).collect();
        let rl = vec![true, false, false, true, false, false];
        let os: Vec<Embedding> = (0..5).map(|_| rand_emb(&mut rng, 16)).collect();
        let ol = vec![true, true, false, false, false];
        let od = vec![0.5, 2.0, 3.5, 4.0, 1.0];
        let bs: Vec<Embedding> = (0..4).map(|_| rand_emb(&mut rng, 16)).collect();
        let bl = vec![true, true, true, false];
        let mean_terms = |anchor: &Embedding, s: &[Embedding], l: &[bool], w: &[f64], m: f64| {
            let np = l.iter().filter(|&&y| y).count() as f64;
            let nn = l.len() as f64 - np;
            let mut v = 0.0;
            for i in 0..s.len() {
                let d = cosine_distance(&anchor.0, &s[i].0);
                v += if l[i] { w[i] * d / np } else { w[i] * (m - d).max(0.0) / nn };
            }
            v
        };
        let ow: Vec<f64> = od.iter().map(|d: &f64| (-0.5 * (d / 64.0).powi(2)).exp()).collect();
        let oracle = mean_terms(&e, &rs, &rl, &[1.0; 6], 0.8) + mean_terms(&e, &os, &ol, &ow, 1.5) + mean_terms(&a, &bs, &bl, &[1.0; 4], 1.25);
        let mut off = LabeledSet::new(os, ol);
        off.dist_px = od;
        let got = fine_loss(&e, &LabeledSet::new(rs, rl), &off, &BatchSet { anchor: Some(a), set: LabeledSet::new(bs, bl) }, &cfg).unwrap();
        assert!((got.total() - oracle).abs() < 1e-9);
    }

    /// Central differences of `f` at `x` for every coordinate.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += eps;
                let fp = f(&p);
                p[i] -= 2.0 * eps;
                (fp - f(&p)) / (2.0 * eps)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-2))
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let d = 6;
            let anchor: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let samples: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let labels = vec![true, false, false, true, false];
            let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..1.0)).collect();
            let m = 0.8 + 0.1 * (trial % 5) as f64;
            let eval = |a: &[f64], s: &[Vec<f64>]| {
                let v: Vec<&[f64]> = s.iter().map(|x| x.as_slice()).collect();
                contrastive_loss(a, &v, &labels, Some(&weights), m)
            };
            let g = eval(&anchor, &samples);
            let fa = |a: &[f64]| eval(a, &samples).value;
            assert!(close(&numeric_grad(&fa, &anchor), &g.d_anchor), "trial {trial} anchor");
            for k in 0..5 {
                let fs = |x: &[f64]| {
                    let mut s = samples.clone();
                    s[k] = x.to_vec();
                    eval(&anchor, &s).value
                };
                assert!(close(&numeric_grad(&fs, &samples[k]), &g.d_samples[k]), "trial {trial} sample {k}");
            }
        }
    }

    proptest! {
        #[test]
        fn satisfied_negatives_are_inert(seed in 0u64..10_000, delta in -0.05f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = rand_emb(&mut rng, 12);
            let far = at_distance(&mut rng, &e, 1.8);
            let moved = at_distance(&mut rng, &e, 1.8 + delta);
            let near = at_distance(&mut rng, &e, 0.4);
            let a = loss_neg(&e, &[near.clone(), far.clone()], 1.5).unwrap();
            let b = loss_neg(&e, &[near, moved], 1.5).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
            prop_assert!(a.d_samples[1].iter().all(|&g| g == 0.0));
        }

        #[test]
        fn coarse_quota_always_met(seed in 0u64..10_000, n in 2usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = rand_emb(&mut rng, 8);
            let mut cells: Vec<(Embedding, bool)> = (0..n).map(|_| (rand_emb(&mut rng, 8), false)).collect();
            let gt = rng.random_range(0..n);
            cells[gt].1 = true;
            let s = mine_coarse(&e, &cells).unwrap();
            prop_assert!(s.negatives.len() >= ((n - 1) as f64 * 0.25).ceil() as usize);
            prop_assert!(s.negatives.iter().all(|m| m.index != gt));
        }

        #[test]
        fn rotation_labels_on_degree_sweep(gt_deg in -180i32..180) {
            let tau = 10f64.to_radians();
            let gt = (gt_deg as f64).to_radians();
            for k in -719..720 {
                let yaw = (k as f64 * 0.5).to_radians();
                let diff = ((k as f64 * 0.5 - gt_deg as f64).rem_euclid(360.0) + 180.0).rem_euclid(360.0) - 180.0;
                if (diff.abs() - 10.0).abs() > 1e-6 {
                    prop_assert_eq!(rotation_label(yaw, gt, tau), diff.abs() <= 10.0);
                }
            }
        }
    }
}
