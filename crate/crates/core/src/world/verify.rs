//! Machine-readable invariant report over a live story world.

use serde::Serialize;

use crate::adapter::CharContext;
use crate::linalg::{gaussian_matrix, DetRng, Matrix};
use crate::world::StoryWorld;
use crate::Mat;

/// One invariant check with its measured residual.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn push(&mut self, name: String, residual: f64, threshold: f64) {
        self.checks.push(Check { name, residual, threshold, pass: residual <= threshold });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<58} residual {:>12.3e}  threshold {:>9.1e}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.residual,
                c.threshold
            ));
        }
        out.push_str(&format!(
            "{} of {} checks passed\n",
            self.checks.iter().filter(|c| c.pass).count(),
            self.checks.len()
        ));
        out
    }
}

/// Run the module invariant suites against the live world and report
/// measured residuals. Failures are report entries, not errors.
pub fn verify(world: &StoryWorld) -> VerifyReport {
    let mut report = VerifyReport::default();
    let d = world.config().dims.d;
    let ids = world.character_ids();

    // Pool orthonormality (pooled strategies only).
    for pool in world.pools() {
        if let Some(m) = pool.matrix() {
            let gram = m.transpose().matmul(m).expect("square");
            let residual = gram.sub(&Mat::identity(d)).expect("same shape").max_abs();
            report.push(format!("pool/{}/orthonormality", pool.key()), residual, 1e-10 * d as f64);
        }
    }

    // Per-character subspace contracts on each pool.
    for pool in world.pools() {
        let handle_of = |id: &str| {
            world
                .adapters()
                .find(|(k, _)| world.pool_key(k) == pool.key())
                .and_then(|(_, a)| a.slot(id).ok())
                .map(|s| s.handle.clone())
        };
        for id in &ids {
            let Some(handle) = handle_of(id) else { continue };
            let proj = pool.projection(&handle).expect("valid handle");
            let p2 = proj.matmul(&proj).expect("square");
            let idem = p2.sub(&proj).expect("same shape").max_abs();
            report.push(format!("projection/{}/{}/idempotence", pool.key(), id), idem, 1e-10 * d as f64);

            let basis = pool.basis_of(&handle).expect("valid handle");
            let fixed = proj.matmul(&basis).expect("dims");
            let fix_res = fixed.sub(&basis).expect("same shape").max_abs();
            report.push(format!("projection/{}/{}/fixes-subspace", pool.key(), id), fix_res, 1e-9);
        }
        if pool.strategy().is_pooled() {
            for i in 0..ids.len() {
                for j in (i + 1)..ids.len() {
                    let (Some(hi), Some(hj)) = (handle_of(&ids[i]), handle_of(&ids[j])) else {
                        continue;
                    };
                    let coh = pool.cross_coherence(&hi, &hj).expect("valid handles");
                    report.push(
                        format!("coherence/{}/{}-{}", pool.key(), ids[i], ids[j]),
                        coh,
                        1e-10 * d as f64,
                    );
                }
            }
        }
    }

    // Adapter contracts on fixed probes.
    let probes: Matrix<f64> =
        gaussian_matrix(&mut DetRng::stream(world.seed(), "verify/probes"), 8, d, 1.0);
    let w_probe: Matrix<f64> =
        gaussian_matrix(&mut DetRng::stream(world.seed(), "verify/base-weight"), d, d, 1.0);
    for (key, adapter) in world.adapters() {
        // The global path must be bitwise the base path.
        let global = adapter.forward(&probes, CharContext::Global, &w_probe).expect("dims");
        let base = probes.matmul(&w_probe).expect("dims");
        let residual = global.sub(&base).expect("same shape").max_abs();
        report.push(format!("adapter/{key}/global-bitwise"), residual, 0.0);

        if world.pools().any(|p| !p.strategy().is_pooled()) {
            continue; // direct strategies make no exactness promise here
        }
        for id in &ids {
            let faithful =
                adapter.forward(&probes, CharContext::Character(id), &w_probe).expect("dims");
            let direct = adapter.forward_direct(&probes, id, &w_probe).expect("dims");
            let residual = faithful.sub(&direct).expect("same shape").max_abs();
            report.push(
                format!("adapter/{key}/{id}/faithful-vs-direct"),
                residual,
                1e-9 * d as f64,
            );
        }
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let term = adapter
                    .interference_term(&probes, &ids[i], &ids[j])
                    .expect("ordered pair")
                    .max_abs();
                report.push(
                    format!("interference/{key}/{}-{}", ids[i], ids[j]),
                    term,
                    1e-9,
                );
            }
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{synth_dataset, train_character, TrainingConfig};
    use crate::world::config::{DimsSection, WorldConfig};

    #[test]
    fn fresh_world_passes_all_checks() {
        let mut cfg = WorldConfig::default();
        cfg.dims = DimsSection { d: 16, r: 4, r1: 2 };
        cfg.arch.grid_h = 4;
        cfg.arch.grid_w = 4;
        let world = StoryWorld::init(cfg).unwrap();
        let report = verify(&world);
        assert!(report.all_pass(), "{}", report.to_text());
    }

    #[test]
    fn trained_world_passes_with_interference_entries() {
        let mut cfg = WorldConfig::default();
        cfg.dims = DimsSection { d: 16, r: 4, r1: 2 };
        cfg.arch.grid_h = 4;
        cfg.arch.grid_w = 4;
        cfg.arch.d_text = 8;
        let mut world = StoryWorld::init(cfg).unwrap();
        let tc = TrainingConfig { steps: 4, batch_size: 1, ..Default::default() };
        for id in ["V1", "V2"] {
            world.add_character_slots(id).unwrap();
            let ds = synth_dataset(&world, id, 2);
            train_character(&mut world, id, &ds, &tc).unwrap();
        }
        let report = verify(&world);
        assert!(report.all_pass(), "{}", report.to_text());
        assert!(report.checks.iter().any(|c| c.name.contains("interference")));
        assert!(!report.to_json().is_empty());
    }
}
