use evertale_core::sampler::*;
use evertale_core::trainer::*;
use evertale_core::world::config::WorldConfig;
use evertale_core::world::StoryWorld;
use evertale_core::linalg::{gaussian_matrix, DetRng};
use evertale_core::Mat;

fn cosm(a: &Mat, b: &Mat) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm()).max(1e-12)
}

fn main() {
    let mut cfg = WorldConfig::default();
    cfg.train.steps = std::env::args().nth(1).unwrap().parse().unwrap();
    cfg.train.batch_size = 2;
    let mut world = StoryWorld::init(cfg).unwrap();
    world.add_character_slots("A").unwrap();
    let ds = synth_dataset(&world, "A", 8);
    let mut tc = world.config().training_config();
    tc.lr_embed *= 5.0; tc.lr_adapter *= 5.0;
    let rep = train_character(&mut world, "A", &ds, &tc).unwrap();
    println!("loss {:.4} -> {:.4}", rep.initial_loss, rep.final_loss);
    let g = &ds.pattern.tokens;
    let prompt = world.vocab.tokenize("<chr> in the forest").unwrap();
    let req = RenderRequest {
        global_prompt: prompt.clone(),
        regions: vec![RegionSpec { character_id: "A".into(), bbox: Bbox::full(), prompt: prompt.clone() }],
        steps: 1, t_theta: 700, seed: 0,
    };

    // Restoring direction on-manifold: n-hat should point along (x - a*g).
    println!("on-manifold: t, cos(n, x - a g), |n|, |x - a g|");
    for t in [950usize, 700, 500, 300, 100, 20] {
        let a = 1.0;
        let s = sigma_of(&world, t);
        let eps: Mat = gaussian_matrix(&mut DetRng::new(t as u64), g.rows(), g.cols(), 1.0);
        let x = g.scale(a).add(&eps.scale(s)).unwrap();
        let n = step_prediction(&world, &x, &req, t).unwrap();
        let resid = x.sub(&g.scale(a)).unwrap();
        println!("  t={t}: a={a:.2} cos={:.3} |n|={:.1} |resid|={:.1}", cosm(&n, &resid), n.frobenius_norm(), resid.frobenius_norm());
    }

    // Render trajectory.
    let mut x: Mat = gaussian_matrix(&mut DetRng::stream(world.seed(), "render/5"), g.rows(), g.cols(), 0.8);
    let schedule = timestep_schedule(30, 1000);
    for (s, &t) in schedule.iter().enumerate() {
        let n = step_prediction(&world, &x, &req, t).unwrap();
        let eta = step_size(t, 1000);
        x = x.sub(&n.scale(eta)).unwrap();
        if s % 5 == 0 || s == 29 {
            println!("step {s:2} t={t:3}: cos(x,g)={:+.3} |x|={:.1}", cosm(&x, g), x.frobenius_norm());
        }
    }
}
