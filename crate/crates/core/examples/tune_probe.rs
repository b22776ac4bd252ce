use evertale_core::judge::latent_cosine;
use evertale_core::sampler::*;
use evertale_core::trainer::*;
use evertale_core::world::config::{DimsSection, WorldConfig};
use evertale_core::world::StoryWorld;

fn region_cos(latent: &evertale_core::generator::LatentGrid, pattern: &evertale_core::generator::LatentGrid, mask: &TokenMask) -> f64 {
    let a = latent.tokens.gather_rows(mask.indices());
    let b = pattern.tokens.gather_rows(mask.indices());
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm()).max(1e-12)
}

fn main() {
    // --- Criterion 6 style world: default d=32, grid 16x16 ---
    let mut cfg = WorldConfig::default();
    cfg.train.steps = 1200;
    cfg.train.batch_size = 2;
    cfg.train.lr_embed = 5e-3;
    cfg.train.lr_adapter = 2.5e-3;
    let mut world = StoryWorld::init(cfg).unwrap();
    let t0 = std::time::Instant::now();
    for id in ["A", "B"] {
        world.add_character_slots(id).unwrap();
        let ds = synth_dataset(&world, id, 8);
        let tc = world.config().training_config();
        let rep = train_character(&mut world, id, &ds, &tc).unwrap();
        println!("train {id}: loss {:.4} -> {:.4} ({:?})", rep.initial_loss, rep.final_loss, t0.elapsed());
    }
    let ds_a = synth_dataset(&world, "A", 1);
    let ds_b = synth_dataset(&world, "B", 1);

    // single-char render cosine vs own pattern (untrained baseline ~0)
    let prompt = world.vocab.tokenize("<chr> in the forest").unwrap();
    let single = render_single(&world, "A", &prompt, 30, 5).unwrap();
    println!("single A: cos vs A pattern = {:.3}, vs B pattern = {:.3}",
        latent_cosine(&single, &RenderOutput { latent: ds_a.pattern.clone(), ppm: vec![] }),
        latent_cosine(&single, &RenderOutput { latent: ds_b.pattern.clone(), ppm: vec![] }));

    // two-region render over 6 seeds
    let gh = world.weights.arch.grid_h; let gw = world.weights.arch.grid_w;
    let ma = bbox_to_mask(&Bbox::new(0.0, 0.0, 0.5, 1.0), gh, gw).unwrap();
    let mb = bbox_to_mask(&Bbox::new(0.5, 0.0, 1.0, 1.0), gh, gw).unwrap();
    let mut ok = 0;
    for seed in 0..10u64 {
        let req = RenderRequest {
            global_prompt: world.vocab.tokenize("a quiet forest scene").unwrap(),
            regions: vec![
                RegionSpec { character_id: "A".into(), bbox: Bbox::new(0.0,0.0,0.5,1.0), prompt: prompt.clone() },
                RegionSpec { character_id: "B".into(), bbox: Bbox::new(0.5,0.0,1.0,1.0), prompt: prompt.clone() },
            ],
            steps: 30, t_theta: 700, seed,
        };
        let out = render(&world, &req).unwrap();
        let a_own = region_cos(&out.latent, &ds_a.pattern, &ma);
        let a_other = region_cos(&out.latent, &ds_b.pattern, &ma);
        let b_own = region_cos(&out.latent, &ds_b.pattern, &mb);
        let b_other = region_cos(&out.latent, &ds_a.pattern, &mb);
        let good = a_own > a_other && b_own > b_other;
        ok += good as u32;
        if seed < 4 { println!("seed {seed}: A {a_own:.3} vs {a_other:.3} | B {b_own:.3} vs {b_other:.3} {}", if good {"OK"} else {"XX"}); }
    }
    println!("two-region ordering correct: {ok}/10  (elapsed {:?})", t0.elapsed());

    // --- Criterion 1 style world: d=64, r1=4, r=8, grid 8x8, similarity gate ---
    let mut cfg = WorldConfig::default();
    cfg.dims = DimsSection { d: 64, r: 8, r1: 4 };
    cfg.arch.grid_h = 8; cfg.arch.grid_w = 8;
    cfg.train.steps = 200;
    let mut world = StoryWorld::init(cfg).unwrap();
    world.add_character_slots("C1").unwrap();
    let ds = synth_dataset(&world, "C1", 8);
    let tc = world.config().training_config();
    let rep = train_character(&mut world, "C1", &ds, &tc).unwrap();
    println!("d64 train: loss {:.4} -> {:.4}", rep.initial_loss, rep.final_loss);
    let eval = render_single(&world, "C1", &prompt, 12, 3).unwrap();
    let reference = RenderOutput { latent: ds.samples[0].target.clone(), ppm: vec![] };
    println!("d64 eval cosine vs training image: {:.3}", latent_cosine(&reference, &eval));
    println!("total {:?}", t0.elapsed());
}
