//! Story-world state: the frozen generator, basis pools, unified adapters,
//! and the ordered character set, plus persistence and the invariant report.

pub mod config;
pub mod snapshot;
pub mod verify;

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;

use crate::adapter::{AdapterSite, PlacementMap, UnifiedAdapter};
use crate::error::{Error, Result};
use crate::generator::{
    build_generator, encode_prompt, BlockAdapters, CharacterTokens, GeneratorWeights,
    PromptEncoding, Vocab,
};
use crate::linalg::DetRng;
use crate::subspace::{BasisPool, SubspaceHandle};
use crate::trainer::GateOutcome;

pub use config::{Precision, WorldConfig};

/// Identifies one adapted projection: block index plus site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerKey {
    pub block: usize,
    pub site: AdapterSite,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block, self.site.as_str())
    }
}

impl LayerKey {
    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix('b')
            .ok_or_else(|| Error::Snapshot(format!("bad layer key '{s}'")))?;
        let (block, site) = rest
            .split_once('.')
            .ok_or_else(|| Error::Snapshot(format!("bad layer key '{s}'")))?;
        Ok(Self {
            block: block
                .parse()
                .map_err(|_| Error::Snapshot(format!("bad layer key '{s}'")))?,
            site: AdapterSite::parse(site)?,
        })
    }
}

/// One integrated character: its learnable token embeddings, gate history,
/// and static story attributes. The adapter slots hold its L matrices.
#[derive(Clone, Debug)]
pub struct CharacterRecord {
    pub id: String,
    pub tokens: CharacterTokens,
    pub gate: Option<GateOutcome>,
    pub attributes: BTreeMap<String, String>,
}

impl fmt::Debug for StoryWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoryWorld")
            .field("seed", &self.config.world.seed)
            .field("characters", &self.character_ids())
            .field("layers", &self.adapters.len())
            .finish_non_exhaustive()
    }
}

/// One engine instance: everything a story world owns.
pub struct StoryWorld {
    config: WorldConfig,
    pub vocab: Vocab,
    pub weights: GeneratorWeights,
    pub placement: PlacementMap,
    pub(crate) pools: BTreeMap<String, BasisPool<f64>>,
    pub(crate) adapters: BTreeMap<LayerKey, UnifiedAdapter<f64>>,
    pub(crate) characters: IndexMap<String, CharacterRecord>,
    /// Narrative events; metadata only.
    pub events: Vec<String>,
}

impl StoryWorld {
    /// Build a fresh world from its seed: pools, shared Bs, generator
    /// weights. No characters yet.
    pub fn init(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.world.seed;
        let arch = config.arch_config();
        let vocab = Vocab::build(&config.vocab.words)?;
        let weights = build_generator(seed, &arch, &vocab)?;
        let placement = PlacementMap::with_sites(arch.blocks, &config.placement.sites);

        let mut layer_keys = Vec::new();
        for block in 0..arch.blocks {
            for site in placement.sites(block) {
                layer_keys.push(LayerKey { block, site });
            }
        }

        let mut pools = BTreeMap::new();
        for key in &layer_keys {
            let pool_key = pool_key_for(&config, key);
            if !pools.contains_key(&pool_key) {
                let mut rng = DetRng::stream(seed, &format!("pool/{pool_key}"));
                let pool =
                    BasisPool::build(&mut rng, &pool_key, config.dims.d, config.pool.strategy)?;
                pools.insert(pool_key, pool);
            }
        }

        let mut adapters = BTreeMap::new();
        for key in &layer_keys {
            let layer = key.to_string();
            let mut rng = DetRng::stream(seed, &format!("b/{layer}"));
            let adapter = UnifiedAdapter::new(
                &layer,
                config.dims.d,
                config.dims.r,
                config.dims.r1,
                config.dims.d,
                &mut rng,
            );
            adapters.insert(*key, adapter);
        }

        let events = config.graph.events.clone();
        Ok(Self {
            config,
            vocab,
            weights,
            placement,
            pools,
            adapters,
            characters: IndexMap::new(),
            events,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.world.seed
    }

    pub fn pool_key(&self, layer: &LayerKey) -> String {
        pool_key_for(&self.config, layer)
    }

    pub fn pools(&self) -> impl Iterator<Item = &BasisPool<f64>> {
        self.pools.values()
    }

    pub fn adapter(&self, key: &LayerKey) -> Option<&UnifiedAdapter<f64>> {
        self.adapters.get(key)
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&LayerKey, &UnifiedAdapter<f64>)> {
        self.adapters.iter()
    }

    pub fn layer_keys(&self) -> Vec<LayerKey> {
        self.adapters.keys().copied().collect()
    }

    pub fn has_character(&self, id: &str) -> bool {
        self.characters.contains_key(id)
    }

    pub fn character(&self, id: &str) -> Result<&CharacterRecord> {
        self.characters.get(id).ok_or_else(|| Error::UnknownCharacter(id.to_string()))
    }

    pub fn character_mut(&mut self, id: &str) -> Result<&mut CharacterRecord> {
        self.characters.get_mut(id).ok_or_else(|| Error::UnknownCharacter(id.to_string()))
    }

    /// Character ids in integration (continual-learning) order.
    pub fn character_ids(&self) -> Vec<String> {
        self.characters.keys().cloned().collect()
    }

    pub fn characters(&self) -> impl Iterator<Item = &CharacterRecord> {
        self.characters.values()
    }

    /// Allocate subspaces and install zero-initialized slots for a new
    /// character in every adapter, plus its record with init embeddings.
    /// All allocations happen before any slot is installed, so a pool
    /// exhaustion leaves the world untouched.
    pub fn add_character_slots(&mut self, id: &str) -> Result<()> {
        if id.trim().is_empty() {
            return Err(Error::Config("character id must not be empty".into()));
        }
        if self.characters.contains_key(id) {
            return Err(Error::DuplicateCharacter(id.to_string()));
        }
        let char_index = self.characters.len();
        let mut handles: BTreeMap<String, SubspaceHandle<f64>> = BTreeMap::new();
        for (pool_key, pool) in self.pools.iter_mut() {
            let mut rng = DetRng::stream(
                self.config.world.seed,
                &format!("alloc/{pool_key}/{char_index}"),
            );
            let handle = pool.allocate(id, self.config.dims.r1, &mut rng)?;
            handles.insert(pool_key.clone(), handle);
        }
        for (key, adapter) in self.adapters.iter_mut() {
            let pool_key = pool_key_for(&self.config, key);
            let pool = &self.pools[&pool_key];
            adapter.install_character(id, handles[&pool_key].clone(), pool)?;
        }
        let tokens = CharacterTokens::init_from_placeholder(&self.weights);
        let attributes = self.config.graph.attributes.get(id).cloned().unwrap_or_default();
        self.characters.insert(
            id.to_string(),
            CharacterRecord { id: id.to_string(), tokens, gate: None, attributes },
        );
        Ok(())
    }

    /// The adapters feeding one block, honoring the placement map.
    pub fn block_adapters(&self, block: usize) -> BlockAdapters<'_> {
        let get = |site: AdapterSite| self.adapters.get(&LayerKey { block, site });
        BlockAdapters {
            self_q: get(AdapterSite::SelfQ),
            self_k: get(AdapterSite::SelfK),
            self_v: get(AdapterSite::SelfV),
            cross_q: get(AdapterSite::CrossQ),
        }
    }

    pub fn all_block_adapters(&self) -> Vec<BlockAdapters<'_>> {
        (0..self.weights.arch.blocks).map(|b| self.block_adapters(b)).collect()
    }

    /// Per-block prompt encodings; a character context substitutes that
    /// character's per-layer embedding at the placeholder.
    pub fn prompt_encodings(
        &self,
        token_ids: &[usize],
        character: Option<&str>,
    ) -> Result<Vec<PromptEncoding>> {
        let tokens = match character {
            Some(id) => Some(&self.character(id)?.tokens),
            None => None,
        };
        (0..self.weights.arch.blocks)
            .map(|b| encode_prompt(&self.weights, token_ids, tokens, b))
            .collect()
    }
}

fn pool_key_for(config: &WorldConfig, layer: &LayerKey) -> String {
    if config.pool.per_layer {
        layer.to_string()
    } else {
        format!("d{}", config.dims.d)
    }
}

/// Integrate a new character end to end: allocate its subspaces, synthesize
/// its dataset, run the quality-gate loop, and record the outcome. The
/// caller persists the snapshot afterwards; on error the caller's on-disk
/// state stays untouched.
pub fn char_add(
    world: &mut StoryWorld,
    id: &str,
    judge: &mut dyn crate::judge::Judge,
) -> Result<GateOutcome> {
    Ok(char_add_with_reports(world, id, judge)?.0)
}

/// [`char_add`] plus the per-attempt training reports, for report files.
pub fn char_add_with_reports(
    world: &mut StoryWorld,
    id: &str,
    judge: &mut dyn crate::judge::Judge,
) -> Result<(GateOutcome, Vec<crate::trainer::TrainReport>)> {
    world.add_character_slots(id)?;
    let dataset = crate::trainer::synth_dataset(world, id, world.config().train.samples);
    let cfg = world.config().training_config();
    let gate = world.config().gate_config();
    let (outcome, reports) =
        crate::trainer::gate_loop_with_reports(world, id, judge, &dataset, &cfg, &gate)?;
    world.character_mut(id)?.gate = Some(outcome.clone());
    Ok((outcome, reports))
}
