use super::*;
use crate::features::{extract_aerial_features, EMBED_DIM};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blank_map(side: u32, color: [u8; 3]) -> AerialMap {
    AerialMap { raster: RgbImage::from_pixel(side, side, Rgb(color)), resolution: 1.0, origin: [0.0, (side - 1) as f64], north_up: true }
}

fn noise_map(side: u32, seed: u64) -> AerialMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = blank_map(side, [0, 0, 0]);
    // low-contrast blocky texture so patches differ but stay unremarkable
    let blocks: Vec<[u8; 3]> = (0..(side / 4).pow(2)).map(|_| [rng.random_range(90..110), rng.random_range(110..130), rng.random_range(60..80)]).collect();
    for r in 0..side {
        for c in 0..side {
            m.raster.put_pixel(c, r, Rgb(blocks[((r / 4) * (side / 4) + c / 4) as usize]));
        }
    }
    m
}

fn rand_emb(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    Embedding::from_raw((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fake_index(map: &AerialMap, embs: Vec<Embedding>) -> AerialIndex {
    let cols = (map.width() / CELL_PX) as usize;
    let rows = (map.height() / CELL_PX) as usize;
    let cells = CellFeatures { cols, rows, cell_px: CELL_PX, feats: vec![vec![0.0; AERIAL_DIM]; cols * rows] };
    AerialIndex { map: map.clone(), cells, coarse: embs }
}

/// Paint a filled axis-aligned rectangle given in world meters.
fn paint(map: &mut AerialMap, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    for r in 0..map.height() {
        for c in 0..map.width() {
            let (x, y) = map.pixel_to_world(c as f64, r as f64);
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                map.raster.put_pixel(c, r, Rgb(color));
            }
        }
    }
}

fn paint_disc(map: &mut AerialMap, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
    for r in 0..map.height() {
        for c in 0..map.width() {
            let (x, y) = map.pixel_to_world(c as f64, r as f64);
            if (x - cx).hypot(y - cy) <= radius {
                map.raster.put_pixel(c, r, Rgb(color));
            }
        }
    }
}

/// Asymmetric marker: a long bar along +x plus an offset square.
fn paint_marker(map: &mut AerialMap, cx: f64, cy: f64) {
    paint(map, cx - 12.0, cy - 2.0, cx + 12.0, cy + 2.0, [230, 40, 40]);
    paint(map, cx + 2.0, cy + 4.0, cx + 10.0, cy + 12.0, [40, 40, 230]);
}

fn oracle_embedding(map: &AerialMap, x: f64, y: f64, yaw: f64, head: &EmbeddingHead) -> Embedding {
    let patch = robot_aligned_patch(map, x, y, yaw, CELL_PX).unwrap();
    embed(&extract_aerial_features(&patch).unwrap(), head).unwrap()
}

/// Head that keeps block means and edge bins, centered on the map's average patch:
/// background maps near the origin and oriented structure dominates the output.
fn rotation_sensitive_head(map: &AerialMap) -> EmbeddingHead {
    let mut head = EmbeddingHead::zeros(AERIAL_DIM, EMBED_DIM);
    let keep: Vec<usize> = (0..12).chain(36..44).collect();
    let side = map.width() as f64;
    let n = 12;
    let mut mean = vec![0.0; AERIAL_DIM];
    let mut count = 0.0;
    for i in 0..n * n {
        let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        let (x, y) = map.pixel_to_world(px * side / n as f64, py * side / n as f64);
        let Some(patch) = robot_aligned_patch(map, x, y, 0.0, CELL_PX) else { continue };
        count += 1.0;
        for (m, f) in mean.iter_mut().zip(extract_aerial_features(&patch).unwrap()) {
            *m += f;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (j, &i) in keep.iter().enumerate() {
        let scale = if i >= 36 { 1000.0 } else { 1.0 };
        head.weights[i * EMBED_DIM + j] = scale;
        head.bias[j] = -scale * mean[i];
    }
    // a small constant direction keeps the output non-degenerate
    head.bias[EMBED_DIM - 1] = 1e-3;
    head
}

#[test]
fn exact_cell_ranks_first() {
    let map = blank_map(512, [100, 100, 100]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = rand_emb(&mut rng, 16);
    let mut embs = vec![e.neg(); 256];
    embs[7 * 16 + 9] = e.clone();
    let index = fake_index(&map, embs);
    let (x, y) = index.cells.cell_center(&map, 8, 8);
    let g = tile_and_rank(&index, (x, y), &e, &MatcherConfig::default()).unwrap();
    assert_eq!(g.ranked.len(), 144);
    assert_eq!((g.ranked[0].col, g.ranked[0].row), (9, 7));
    assert!((g.ranked[0].corr - 1.0).abs() < 1e-12);
    assert!(!g.clamped);
}

#[test]
fn identical_cells_follow_the_tie_rule() {
    let map = blank_map(512, [100, 100, 100]);
    let e = Embedding(vec![1.0, 0.0]);
    let index = fake_index(&map, vec![e.clone(); 256]);
    let (x, y) = index.cells.cell_center(&map, 8, 8);
    let g = tile_and_rank(&index, (x, y), &e, &MatcherConfig::default()).unwrap();
    let (c0, r0) = g.origin;
    assert_eq!((c0, r0), (2, 2));
    let first: Vec<(usize, usize)> = g.ranked[..4].iter().map(|c| (c.col - c0, c.row - r0)).collect();
    assert_eq!(first, vec![(5, 5), (6, 5), (5, 6), (6, 6)]);
    // corners are farthest; row-major among them
    let last: Vec<(usize, usize)> = g.ranked[140..].iter().map(|c| (c.col - c0, c.row - r0)).collect();
    assert_eq!(last, vec![(0, 0), (11, 0), (0, 11), (11, 11)]);
}

#[test]
fn random_ranking_matches_sort_oracle_and_covers_crop() {
    let map = blank_map(512, [100, 100, 100]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let embs: Vec<Embedding> = (0..256).map(|_| rand_emb(&mut rng, 8)).collect();
    let index = fake_index(&map, embs.clone());
    let e = rand_emb(&mut rng, 8);
    let g = tile_and_rank(&index, (100.0, 400.0), &e, &MatcherConfig::default()).unwrap();
    let (c0, r0) = g.origin;
    let mut oracle: Vec<(f64, usize, usize)> = Vec::new();
    for r in r0..r0 + 12 {
        for c in c0..c0 + 12 {
            oracle.push((correlation(&e, &embs[r * 16 + c]), c, r));
        }
    }
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let got: Vec<(usize, usize)> = g.ranked.iter().map(|c| (c.col, c.row)).collect();
    assert_eq!(got, oracle.iter().map(|o| (o.1, o.2)).collect::<Vec<_>>());
    let mut seen = std::collections::HashSet::new();
    let mut pixels = 0;
    for c in &g.ranked {
        assert!(seen.insert((c.col, c.row)));
        assert!(c.col >= c0 && c.col < c0 + 12 && c.row >= r0 && c.row < r0 + 12);
        pixels += (CELL_PX * CELL_PX) as usize;
    }
    assert_eq!(pixels, 384 * 384);
}

#[test]
fn crop_clamps_and_rejects_far_centers() {
    let map = blank_map(512, [100, 100, 100]);
    let e = Embedding(vec![1.0]);
    let index = fake_index(&map, vec![e.clone(); 256]);
    let cfg = MatcherConfig::default();
    let g = tile_and_rank(&index, (5.0, 5.0), &e, &cfg).unwrap();
    assert!(g.clamped);
    assert_eq!(g.origin, (0, 4));
    assert!(matches!(tile_and_rank(&index, (-2000.0, 100.0), &e, &cfg), Err(MatchError::OutOfBounds(_))));
}

#[test]
fn recall_examples_and_counting_oracle() {
    let grid = |order: Vec<(usize, usize)>| CoarseGrid {
        origin: (0, 0),
        n: 12,
        clamped: false,
        ranked: order.into_iter().map(|(col, row)| RankedCell { col, row, corr: 0.0 }).collect(),
    };
    let order: Vec<(usize, usize)> = (0..144).map(|i| (i % 12, i / 12)).collect();
    let g = grid(order.clone());
    assert!(recall_at_k(&g, (0, 0), 1));
    assert!(!recall_at_k(&g, (4, 0), 3));
    assert!(recall_at_k(&g, (4, 0), 5));
    assert!(!recall_at_k(&g, (20, 20), 144));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = [0usize; 11];
    let mut oracle = [0usize; 11];
    for _ in 0..1000 {
        let mut o = order.clone();
        for i in (1..o.len()).rev() {
            o.swap(i, rng.random_range(0..=i));
        }
        let gt = (rng.random_range(0..12), rng.random_range(0..12));
        let pos = o.iter().position(|&c| c == gt).unwrap();
        let g = grid(o);
        for k in 1..=10 {
            hits[k] += recall_at_k(&g, gt, k) as usize;
            oracle[k] += (pos < k) as usize;
        }
    }
    assert_eq!(hits, oracle);
    assert!(hits.windows(2).skip(1).all(|w| w[0] <= w[1]));
}

#[test]
fn uniform_map_gives_flat_volume_of_expected_size() {
    let map = blank_map(256, [120, 90, 60]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let head = EmbeddingHead::init(AERIAL_DIM, EMBED_DIM, 9);
    let e = rand_emb(&mut rng, EMBED_DIM);
    let cfg = MatcherConfig::default();
    let v = scan_correlate(&map, [128.0, 128.0], &e, 0.7, &head, &cfg).unwrap();
    assert_eq!((v.nx, v.ny), (33, 33));
    assert_eq!(v.n_valid(), 33 * 33);
    let v0 = v.values[0];
    assert!(v.values.iter().all(|x| (x - v0).abs() < 1e-6));
}

#[test]
fn fast_scan_matches_direct_scan() {
    let world = crate::simworld::generate_world(5, 256, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = EmbeddingHead::init(AERIAL_DIM, EMBED_DIM, 11);
    let cfg = MatcherConfig::default();
    // the last center sits near the corner so part of the window is invalid
    for (center, theta) in [([128.0, 128.0], 0.0), ([100.0, 150.0], 0.83), ([140.0, 90.0], -2.4), ([20.0, 30.0], 1.9)] {
        let e = rand_emb(&mut rng, EMBED_DIM);
        let fast = scan_correlate(&world.map, center, &e, theta, &head, &cfg).unwrap();
        let slow = scan_correlate_direct(&world.map, center, &e, theta, &head, &cfg).unwrap();
        assert_eq!(fast.valid, slow.valid);
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
    let e = rand_emb(&mut rng, EMBED_DIM);
    let edge = scan_correlate(&world.map, [20.0, 30.0], &e, 1.9, &head, &cfg).unwrap();
    assert!(edge.n_valid() > 0 && edge.n_valid() < 33 * 33);
}

#[test]
fn planted_blob_is_recovered_at_gt_heading() {
    let mut map = noise_map(256, 6);
    let (gx, gy, yaw) = (131.0, 117.0, 0.6);
    paint_marker(&mut map, gx, gy);
    let head = EmbeddingHead::init(AERIAL_DIM, EMBED_DIM, 12);
    let e = oracle_embedding(&map, gx, gy, yaw, &head);
    let cfg = MatcherConfig::default();
    let v = scan_correlate(&map, [gx + 6.3, gy - 4.1], &e, yaw, &head, &cfg).unwrap();
    let (ix, iy) = v.argmax().unwrap();
    let p = v.position(ix, iy);
    assert!((p[0] - gx).hypot(p[1] - gy) <= cfg.stride_m * std::f64::consts::SQRT_2, "{p:?}");
}

fn world_volume(center: [f64; 2], n: usize, rng: &mut ChaCha8Rng) -> CorrelationVolume {
    let mut v = CorrelationVolume::world_aligned(center, 1.0, n, 0.0);
    for i in 0..n * n {
        v.values[i] = rng.random_range(-1.0..1.0);
        v.valid[i] = rng.random::<f64>() > 0.1;
    }
    v
}

#[test]
fn fusion_weights_follow_the_share_rule() {
    assert_eq!(fusion_weights(1, 3, 0.7), vec![1.0]);
    let w = fusion_weights(5, 3, 0.7);
    for &x in &w[..3] {
        assert!((x - 0.7 / 3.0).abs() < 1e-15);
    }
    assert!((w[3] - 0.15).abs() < 1e-15 && (w[4] - 0.15).abs() < 1e-15);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((w[..3].iter().sum::<f64>() - 0.7).abs() < 1e-12);
    assert_eq!(fusion_weights(2, 3, 0.7), vec![0.5, 0.5]);
}

#[test]
fn fuse_single_volume_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = world_volume([10.5, 20.5], 9, &mut rng);
    let f = fuse_topk(std::slice::from_ref(&v), &MatcherConfig::default()).unwrap();
    assert_eq!((f.nx, f.ny), (9, 9));
    assert_eq!(f.valid, v.valid);
    for (a, b) in f.values.iter().zip(&v.values).zip(&v.valid).filter(|(_, &ok)| ok).map(|(p, _)| p) {
        assert_eq!(a, b);
    }
    assert!(matches!(fuse_topk(&[], &MatcherConfig::default()), Err(MatchError::EmptySet(_))));
}

#[test]
fn fused_volume_matches_weighted_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = MatcherConfig::default();
    let centers = [[15.5, 15.5], [47.5, 15.5], [15.5, 47.5], [79.5, 79.5], [47.5, 47.5], [31.5, 15.5]];
    let vols: Vec<CorrelationVolume> = centers.iter().map(|&c| world_volume(c, 33, &mut rng)).collect();
    let w = fusion_weights(vols.len(), 3, 0.7);
    let f = fuse_topk(&vols, &cfg).unwrap();
    let mut checked = 0;
    for iy in 0..f.ny {
        for ix in 0..f.nx {
            let p = f.position(ix, iy);
            let mut acc = 0.0;
            let mut hit = false;
            for (v, wi) in vols.iter().zip(&w) {
                let (u, t) = ((p[0] - v.origin[0]).round() as i64, (p[1] - v.origin[1]).round() as i64);
                if u >= 0 && t >= 0 && (u as usize) < v.nx && (t as usize) < v.ny {
                    let i = t as usize * v.nx + u as usize;
                    if v.valid[i] {
                        acc += wi * v.values[i];
                        hit = true;
                    }
                }
            }
            let i = f.idx(ix, iy);
            assert_eq!(f.valid[i], hit);
            if hit {
                assert!((f.values[i] - acc).abs() < 1e-9);
                checked += 1;
            }
        }
    }
    assert!(checked > 4000);
}

#[test]
fn gate_rule_examples() {
    let cfg = MatcherConfig::default();
    let offs = cfg.gate_offsets_deg();
    assert_eq!(offs, vec![-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0]);
    let flat = GateProfile { offsets_deg: offs.clone(), corr: vec![Some(0.5); 9] };
    assert!(!gate_decision(&flat, &cfg));
    let mut peaked = vec![Some(0.6); 9];
    peaked[4] = Some(0.9);
    assert!(gate_decision(&GateProfile { offsets_deg: offs.clone(), corr: peaked.clone() }, &cfg));
    // ±5° is not a negative
    peaked[3] = Some(0.95);
    assert!(gate_decision(&GateProfile { offsets_deg: offs.clone(), corr: peaked }, &cfg));
    let negative = GateProfile { offsets_deg: offs.clone(), corr: vec![Some(-0.5), Some(-0.5), Some(-0.5), Some(-0.4), Some(-0.2), Some(-0.4), Some(-0.5), Some(-0.5), Some(-0.5)] };
    assert!(!gate_decision(&negative, &cfg));
    let mut missing = vec![Some(0.1); 9];
    missing[4] = None;
    assert!(!gate_decision(&GateProfile { offsets_deg: offs, corr: missing }, &cfg));
}

#[test]
fn gate_accepts_marker_and_rejects_symmetric_decoy() {
    let mut map = noise_map(256, 9);
    // patch-frame edges of the axis-aligned marker straddle an edge-histogram bin boundary at this heading
    let (gx, gy, yaw) = (90.0, 160.0, std::f64::consts::PI / 16.0);
    paint_marker(&mut map, gx, gy);
    let (dx, dy) = (170.0, 80.0);
    paint_disc(&mut map, dx, dy, 12.0, [230, 40, 40]);
    let head = rotation_sensitive_head(&map);
    let e = oracle_embedding(&map, gx, gy, yaw, &head);
    let cfg = MatcherConfig::default();
    assert!(orientation_gate(&map, [gx, gy], &e, yaw, &head, &cfg).unwrap());
    // the decoy's own appearance is rotation-invariant, so its profile is flat
    let e_decoy = oracle_embedding(&map, dx, dy, yaw, &head);
    assert!(!orientation_gate(&map, [dx, dy], &e_decoy, yaw, &head, &cfg).unwrap());
    assert!(!orientation_gate(&map, [dx, dy], &e, yaw, &head, &cfg).unwrap());
}

#[test]
fn delta_volume_has_zero_covariance() {
    let mut v = CorrelationVolume::world_aligned([0.0, 0.0], 1.0, 33, 0.0);
    v.valid.iter_mut().for_each(|x| *x = true);
    let i = v.idx(20, 11);
    v.values[i] = 1.0;
    let est = estimate_covariance(&v).unwrap();
    assert_eq!(est.mean, v.position(20, 11));
    assert_eq!(est.cov, [[0.0; 2]; 2]);
    let empty = CorrelationVolume::world_aligned([0.0, 0.0], 1.0, 3, 0.0);
    assert!(matches!(estimate_covariance(&empty), Err(MatchError::EmptySet(_))));
}

#[test]
fn two_peak_covariance_is_elongated_along_peak_axis() {
    let mut v = CorrelationVolume::world_aligned([0.0, 0.0], 1.0, 33, 0.0);
    v.valid.iter_mut().for_each(|x| *x = true);
    // peaks at (−16+4, 0) and (−16+28, 0) relative to the corner: 24 m apart along x
    let (a, b) = (v.idx(4, 16), v.idx(28, 16));
    v.values[a] = 1.0;
    v.values[b] = 1.0;
    let est = estimate_covariance(&v).unwrap();
    // argmax tie goes to the first in lattice order; the second peak carries weight 1/2 at distance 24
    assert_eq!(est.mean, v.position(4, 16));
    assert!((est.cov[0][0] - 0.5 * 24.0 * 24.0).abs() < 1e-9);
    assert!(est.cov[1][1].abs() < 1e-9 && est.cov[0][1].abs() < 1e-9);
}

#[test]
fn uniform_volume_covariance_matches_grid_moment() {
    let mut v = CorrelationVolume::world_aligned([0.0, 0.0], 1.0, 33, 0.0);
    v.valid.iter_mut().for_each(|x| *x = true);
    v.values.iter_mut().for_each(|x| *x = 0.25);
    let est = estimate_covariance(&v).unwrap();
    assert_eq!(est.mean, [-16.0, -16.0]);
    // E[k²] for k uniform on 0..=32, and E[k]² for the cross term
    let m2 = (0..=32).map(|k| (k * k) as f64).sum::<f64>() / 33.0;
    let m1 = (0..=32).map(|k| k as f64).sum::<f64>() / 33.0;
    assert!((est.cov[0][0] - m2).abs() < 1e-9 && (est.cov[1][1] - m2).abs() < 1e-9);
    assert!((est.cov[0][1] - m1 * m1).abs() < 1e-9);
}

fn clean_scene(seed: u64) -> (AerialMap, Heads, Embedding, PoseSE2) {
    let mut map = noise_map(512, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // on a cell center heading north, so the north-up cell patch resembles the query
    let cells = CellFeatures::compute(&map, CELL_PX);
    let (x, y) = cells.cell_center(&map, rng.random_range(6..10), rng.random_range(6..10));
    let gt = PoseSE2::new(x, y, std::f64::consts::FRAC_PI_2 + rng.random_range(-0.05..0.05));
    paint_marker(&mut map, gt.x, gt.y);
    let fine = rotation_sensitive_head(&map);
    let heads = Heads { ground: fine.clone(), coarse: fine.clone(), fine: fine.clone() };
    let e = oracle_embedding(&map, gt.x, gt.y, gt.yaw, &fine);
    (map, heads, e, gt)
}

#[test]
fn register_recovers_planted_region() {
    let (map, heads, e, gt) = clean_scene(21);
    let index = AerialIndex::new(&map, &heads.coarse).unwrap();
    let prior = PoseSE2::new(gt.x + 20.0, gt.y - 15.0, gt.yaw);
    let cfg = MatcherConfig::default();
    let t = register_traced(&index, &e, &prior, &heads, &cfg).unwrap();
    assert!(t.estimate.accepted, "{:?}", t.estimate);
    assert!((t.estimate.mean[0] - gt.x).hypot(t.estimate.mean[1] - gt.y) < 2.0, "{:?} {:?} {:?}", t.estimate.mean, gt, &t.grid.ranked[..3]);
    let cov = t.estimate.cov_matrix();
    assert!((cov - cov.transpose()).norm() < 1e-9);
    assert!(cov.symmetric_eigenvalues().min() >= -1e-9);
    assert_eq!(register(&index, &e, &prior, &heads, &cfg).unwrap(), t.estimate);
}

#[test]
fn unreachable_target_yields_no_match_at_gt() {
    let (map, heads, e, gt) = clean_scene(22);
    let index = AerialIndex::new(&map, &heads.coarse).unwrap();
    let cfg = MatcherConfig { crop_cells: 4, ..MatcherConfig::default() };
    let prior = PoseSE2::new(gt.x + 100.0, gt.y, gt.yaw);
    let est = register(&index, &e, &prior, &heads, &cfg).unwrap();
    assert!((est.mean[0] - gt.x).hypot(est.mean[1] - gt.y) > 2.0 * CELL_PX as f64);
}

#[test]
fn volume_csv_has_header_and_valid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let v = world_volume([0.0, 0.0], 5, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vol.csv");
    write_volume_csv(&path, &[&v]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x_m,y_m,theta_deg,corr"));
    assert_eq!(lines.count(), v.n_valid());
}

proptest! {
    #[test]
    fn covariance_is_symmetric_psd(seed in 0u64..1_000_000, n in 1usize..12, theta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = CorrelationVolume::new([1.0, -2.0], [[theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]], n, n + 1, theta);
        for i in 0..v.values.len() {
            v.values[i] = rng.random_range(-1.0..1.0);
            v.valid[i] = rng.random::<f64>() > 0.2;
        }
        v.valid[0] = true;
        let est = estimate_covariance(&v).unwrap();
        let c = est.cov_matrix();
        prop_assert!((c - c.transpose()).norm() < 1e-9);
        prop_assert!(c.symmetric_eigenvalues().min() >= -1e-9);
        let p = cell_probabilities(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fusion_weights_sum_to_one(k in 1usize..40, top_n in 1usize..6, share in 0.05f64..1.0) {
        let w = fusion_weights(k, top_n, share);
        prop_assert_eq!(w.len(), k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

