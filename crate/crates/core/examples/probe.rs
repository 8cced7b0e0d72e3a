//! Scratch diagnostic: per-step target Dice during adaptation.

use mddlab_core::adaptation::{adapt_step, AdaptConfig};
use mddlab_core::data::load_dataset;
use mddlab_core::evaluation::dataset_dice;
use mddlab_core::model::load_checkpoint;
use mddlab_core::nn::adam::Adam;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let src = load_dataset(std::path::Path::new(&args[2])).unwrap();
    let tgt = load_dataset(std::path::Path::new(&args[3])).unwrap();
    let n_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(24);
    let eta: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.4);
    let warmup: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);

    let (mut model, _) = load_checkpoint(std::path::Path::new(ckpt)).unwrap();
    let mut cfg = AdaptConfig::default();
    cfg.eta = eta;
    model.copy_head();
    model.set_frozen(&cfg.freeze_spec).unwrap();
    let mut opt = Adam::new(model.arena());
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let b = cfg.batch_size;

    let d0 = dataset_dice(&mut model, &tgt).unwrap().mean;
    println!("step -1  dice {d0:.4}");

    let mut src_idx: Vec<usize> = (0..src.len()).collect();
    let mut tgt_idx: Vec<usize> = (0..tgt.len()).collect();
    src_idx.shuffle(&mut rng);
    tgt_idx.shuffle(&mut rng);
    for step in 0..n_steps {
        let sb: Vec<usize> = (0..b).map(|i| src_idx[(step * b + i) % src.len()]).collect();
        let tb: Vec<usize> = (0..b).map(|i| tgt_idx[(step * b + i) % tgt.len()]).collect();
        let xs = src.image_batch(&sb);
        let ys = src.label_batch(&sb).unwrap();
        let xt = tgt.image_batch(&tb);
        cfg.eta = if step < warmup { 1e-9 } else { eta };
        let rep = adapt_step(&mut model, &mut opt, &xs, &ys, &xt, &cfg, step).unwrap();
        let d = dataset_dice(&mut model, &tgt).unwrap().mean;
        println!(
            "step {step:2}  dice {d:.4}  loss_c {:.4e}  a_src {:.4e}  a_tgt {:.3}  stop {}",
            rep.losses.classifier_loss,
            rep.losses.adv_source_loss,
            rep.losses.adv_target_loss,
            rep.early_stop_triggered
        );
    }
}
