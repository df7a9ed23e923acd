//! Evaluate the coarse and fine contrastive losses on hand-built embeddings.

use bevloc::contrast::{coarse_loss, fine_loss, mine_rotations, BatchSet, LabeledSet, LossConfig};
use bevloc::features::Embedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    Embedding::from_raw((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn near(e: &Embedding, rng: &mut ChaCha8Rng, eps: f64) -> Embedding {
    Embedding::from_raw(e.0.iter().map(|v| v + eps * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e_g = unit(&mut rng, 16);
    let pos = vec![near(&e_g, &mut rng, 0.05)];
    let neg_far: Vec<Embedding> = (0..8).map(|_| e_g.neg()).collect();
    let neg_close: Vec<Embedding> = (0..8).map(|_| near(&e_g, &mut rng, 0.1)).collect();
    println!("coarse loss, distant negatives: {:.4}", coarse_loss(&e_g, &pos, &neg_far, &cfg)?.value);
    println!("coarse loss, confusable negatives: {:.4}", coarse_loss(&e_g, &pos, &neg_close, &cfg)?.value);

    let rots = mine_rotations(0.3, 8, cfg.tau_theta(), &mut rng);
    let rot = LabeledSet::new(rots.iter().map(|&(_, p)| if p { near(&e_g, &mut rng, 0.05) } else { unit(&mut rng, 16) }).collect(), rots.iter().map(|r| r.1).collect());
    let off = LabeledSet::new(vec![], vec![]);
    let batch = BatchSet { anchor: None, set: LabeledSet::new(vec![], vec![]) };
    let f = fine_loss(&e_g, &rot, &off, &batch, &cfg)?;
    println!("rotation samples: {} ({} positive)", rots.len(), rots.iter().filter(|r| r.1).count());
    println!("fine loss: L_R {:.4}, L_O {:.4}, L_B {:.4}", f.l_r.value, f.l_o.value, f.l_b.value);
    Ok(())
}
