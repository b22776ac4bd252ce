use evertale_core::sampler::*;
use evertale_core::trainer::*;
use evertale_core::world::config::WorldConfig;
use evertale_core::world::StoryWorld;
use evertale_core::Mat;

fn cosm(a: &Mat, b: &Mat) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.frobenius_norm() * b.frobenius_norm()).max(1e-12)
}

fn main() {
    for steps in [200usize, 1000] {
        let mut cfg = WorldConfig::default();
        cfg.train.steps = steps;
        cfg.train.batch_size = 2;
        let mut world = StoryWorld::init(cfg).unwrap();
        world.add_character_slots("A").unwrap();
        let e0: Vec<Vec<f64>> = world.character("A").unwrap().tokens.rows().to_vec();
        let ds = synth_dataset(&world, "A", 8);
        let tc = world.config().training_config();
        let rep = train_character(&mut world, "A", &ds, &tc).unwrap();
        let rec = world.character("A").unwrap();
        let de: f64 = rec.tokens.rows().iter().zip(&e0).map(|(a, b)| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        }).sum::<f64>().sqrt();
        let lnorm: f64 = world.layer_keys().iter()
            .map(|k| world.adapter(k).unwrap().slot("A").unwrap().l().frobenius_norm())
            .sum();
        println!("steps {steps}: loss {:.4} -> {:.4}, |dE| {de:.3}, sum|L| {lnorm:.3}", rep.initial_loss, rep.final_loss);

        // bias field: prediction at zero latent
        let g = &ds.pattern.tokens;
        let prompt = world.vocab.tokenize("<chr> in the forest").unwrap();
        let zero = Mat::zeros(g.rows(), g.cols());
        let req = RenderRequest {
            global_prompt: prompt.clone(),
            regions: vec![RegionSpec { character_id: "A".into(), bbox: Bbox::full(), prompt: prompt.clone() }],
            steps: 1, t_theta: 700, seed: 0,
        };
        for t in [100usize, 500, 900] {
            let bias = step_prediction(&world, &zero, &req, t).unwrap();
            println!("  t={t}: cos(n(0), g) = {:.3}, |n(0)| = {:.2}, |g| = {:.2}", cosm(&bias, g), bias.frobenius_norm(), g.frobenius_norm());
        }
        // prediction at x = g should be near zero if well-trained
        for t in [100usize, 500] {
            let at_g = step_prediction(&world, g, &req, t).unwrap();
            println!("  t={t}: |n(g)| = {:.2} (0 when perfectly trained)", at_g.frobenius_norm());
        }
        // render fixed point
        let out = render_single(&world, "A", &prompt, 40, 5).unwrap();
        println!("  40-step render: cos vs g = {:.3}, |x| = {:.2}", cosm(&out.latent.tokens, g), out.latent.tokens.frobenius_norm());
    }
}
