//! Binary story-world snapshot.
//!
//! Layout (little-endian): magic "EVTL", version, flags, world seed, dims,
//! the normalized config document, per-pool allocation state, per-layer
//! shared B, per-character state in integration order, story events, and a
//! trailing CRC32 over everything before it. Matrices derived from the
//! world seed (generator weights, pool matrices) are rebuilt on load rather
//! than stored. Payload floats are 32-bit when the compact flag is set,
//! 64-bit otherwise.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::CharacterTokens;
use crate::subspace::HandleSpec;
use crate::trainer::GateOutcome;
use crate::world::{CharacterRecord, LayerKey, Precision, StoryWorld, WorldConfig};
use crate::Mat;

pub const MAGIC: [u8; 4] = *b"EVTL";
pub const VERSION: u32 = 1;
const FLAG_F64: u32 = 1;

struct Writer {
    buf: Vec<u8>,
    wide: bool,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn float(&mut self, v: f64) {
        if self.wide {
            self.buf.extend_from_slice(&v.to_le_bytes());
        } else {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &Mat) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.data() {
            self.float(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    wide: bool,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Snapshot("truncated snapshot".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn float(&mut self) -> Result<f64> {
        if self.wide {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        } else {
            Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
        }
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Snapshot("non-utf8 string in snapshot".into()))
    }

    fn matrix(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.float()?);
        }
        Mat::from_vec(rows, cols, data)
            .map_err(|_| Error::Snapshot("bad matrix dimensions".into()))
    }
}

/// Serialize a world. Deterministic: identical worlds produce identical bytes.
pub fn encode(world: &StoryWorld) -> Vec<u8> {
    let wide = world.config().world.precision == Precision::F64;
    let mut w = Writer { buf: Vec::new(), wide };

    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(if wide { FLAG_F64 } else { 0 });
    w.u64(world.seed());
    let dims = &world.config().dims;
    w.u32(dims.d as u32);
    w.u32(dims.r as u32);
    w.u32(dims.r1 as u32);
    w.u32(dims.d as u32); // k_out: adapters project d -> d
    w.string(&world.config().to_toml_string());

    // Pools: allocation bookkeeping only; matrices rebuild from the seed.
    w.u32(world.pools.len() as u32);
    for (key, pool) in &world.pools {
        w.string(key);
        w.u8(match pool.strategy() {
            crate::subspace::BasisStrategy::Sequential => 0,
            crate::subspace::BasisStrategy::RandomColumns => 1,
            crate::subspace::BasisStrategy::GaussianDirect => 2,
            crate::subspace::BasisStrategy::UniformDirect => 3,
        });
        w.u32(pool.cursor() as u32);
        w.u32(pool.used().len() as u32);
        for &c in pool.used() {
            w.u32(c as u32);
        }
        w.u64(pool.epoch());
    }

    // Shared Bs per adapted layer.
    w.u32(world.adapters.len() as u32);
    for (key, adapter) in &world.adapters {
        w.string(&key.to_string());
        w.matrix(adapter.b_shared());
    }

    // Characters in integration order.
    w.u32(world.characters.len() as u32);
    for record in world.characters.values() {
        w.string(&record.id);

        // Subspace handles, one per pool.
        let mut handles = Vec::new();
        for (pool_key, _) in &world.pools {
            let layer = world
                .adapters
                .keys()
                .find(|k| &world.pool_key(k) == pool_key)
                .expect("every pool backs at least one layer");
            let slot = world.adapters[layer].slot(&record.id).expect("slot exists");
            handles.push((pool_key.clone(), slot.handle.spec.clone()));
        }
        w.u32(handles.len() as u32);
        for (pool_key, spec) in handles {
            w.string(&pool_key);
            match spec {
                HandleSpec::Columns(cols) => {
                    w.u8(0);
                    w.u32(cols.len() as u32);
                    for c in cols {
                        w.u32(c as u32);
                    }
                }
                HandleSpec::Basis(basis) => {
                    w.u8(1);
                    w.matrix(&basis);
                }
            }
        }

        // Trainable L per layer.
        w.u32(world.adapters.len() as u32);
        for (key, adapter) in &world.adapters {
            w.string(&key.to_string());
            w.matrix(adapter.slot(&record.id).expect("slot exists").l());
        }

        // Per-layer token embeddings.
        let rows = record.tokens.rows();
        w.u32(rows.len() as u32);
        for row in rows {
            w.u32(row.len() as u32);
            for &v in row {
                w.float(v);
            }
        }

        // Gate outcome summary as a JSON blob ("" when absent).
        let gate_json = record
            .gate
            .as_ref()
            .map(|g| serde_json::to_string(g).expect("gate outcome serializes"))
            .unwrap_or_default();
        w.string(&gate_json);

        w.u32(record.attributes.len() as u32);
        for (k, v) in &record.attributes {
            w.string(k);
            w.string(v);
        }
    }

    w.u32(world.events.len() as u32);
    for event in &world.events {
        w.string(event);
    }

    let checksum = crc32fast::hash(&w.buf);
    w.u32(checksum);
    w.buf
}

/// Validate magic, version, and the trailing checksum without rebuilding.
pub fn verify_checksum(bytes: &[u8]) -> Result<()> {
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(Error::Snapshot("not a story-world snapshot (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

/// Rebuild a world from snapshot bytes.
pub fn decode(bytes: &[u8]) -> Result<StoryWorld> {
    verify_checksum(bytes)?;
    let flags = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let mut r = Reader { bytes: &bytes[..bytes.len() - 4], pos: 12, wide: flags & FLAG_F64 != 0 };

    let seed = r.u64()?;
    let d = r.u32()? as usize;
    let r_dim = r.u32()? as usize;
    let r1 = r.u32()? as usize;
    let _k_out = r.u32()? as usize;
    let config = WorldConfig::from_toml_str(&r.string()?)?;
    if config.world.seed != seed
        || config.dims.d != d
        || config.dims.r != r_dim
        || config.dims.r1 != r1
    {
        return Err(Error::Snapshot("snapshot header disagrees with its config".into()));
    }

    let mut world = StoryWorld::init(config)?;

    // Pool bookkeeping.
    let pool_count = r.u32()? as usize;
    for _ in 0..pool_count {
        let key = r.string()?;
        let strategy = r.u8()?;
        let cursor = r.u32()? as usize;
        let used_len = r.u32()? as usize;
        let mut used = BTreeSet::new();
        for _ in 0..used_len {
            used.insert(r.u32()? as usize);
        }
        let _epoch = r.u64()?;
        let pool = world
            .pools
            .get_mut(&key)
            .ok_or_else(|| Error::Snapshot(format!("unknown pool '{key}' in snapshot")))?;
        let expected = match pool.strategy() {
            crate::subspace::BasisStrategy::Sequential => 0,
            crate::subspace::BasisStrategy::RandomColumns => 1,
            crate::subspace::BasisStrategy::GaussianDirect => 2,
            crate::subspace::BasisStrategy::UniformDirect => 3,
        };
        if strategy != expected {
            return Err(Error::Snapshot(format!(
                "pool '{key}' strategy disagrees with the embedded config"
            )));
        }
        pool.restore_allocation_state(cursor, used);
    }

    // Shared Bs.
    let adapter_count = r.u32()? as usize;
    for _ in 0..adapter_count {
        let key = LayerKey::parse(&r.string()?)?;
        let b = r.matrix()?;
        let adapter = world
            .adapters
            .get_mut(&key)
            .ok_or_else(|| Error::Snapshot(format!("unknown layer '{key}' in snapshot")))?;
        adapter.restore_b(b)?;
    }

    // Characters.
    let char_count = r.u32()? as usize;
    for _ in 0..char_count {
        let id = r.string()?;

        let handle_count = r.u32()? as usize;
        let mut handles = Vec::with_capacity(handle_count);
        for _ in 0..handle_count {
            let pool_key = r.string()?;
            let spec = match r.u8()? {
                0 => {
                    let len = r.u32()? as usize;
                    let mut cols = Vec::with_capacity(len);
                    for _ in 0..len {
                        cols.push(r.u32()? as usize);
                    }
                    HandleSpec::Columns(cols)
                }
                1 => HandleSpec::Basis(r.matrix()?),
                other => {
                    return Err(Error::Snapshot(format!("unknown handle kind {other}")))
                }
            };
            handles.push((pool_key, spec));
        }

        let l_count = r.u32()? as usize;
        let mut ls = Vec::with_capacity(l_count);
        for _ in 0..l_count {
            let key = LayerKey::parse(&r.string()?)?;
            ls.push((key, r.matrix()?));
        }

        let embed_count = r.u32()? as usize;
        let mut embed_rows = Vec::with_capacity(embed_count);
        for _ in 0..embed_count {
            let len = r.u32()? as usize;
            let mut row = Vec::with_capacity(len);
            for _ in 0..len {
                row.push(r.float()?);
            }
            embed_rows.push(row);
        }

        let gate_json = r.string()?;
        let gate: Option<GateOutcome> = if gate_json.is_empty() {
            None
        } else {
            Some(
                serde_json::from_str(&gate_json)
                    .map_err(|e| Error::Snapshot(format!("bad gate outcome: {e}")))?,
            )
        };

        let attr_count = r.u32()? as usize;
        let mut attributes = std::collections::BTreeMap::new();
        for _ in 0..attr_count {
            let k = r.string()?;
            let v = r.string()?;
            attributes.insert(k, v);
        }

        // Install slots into every adapter behind the stored handles.
        for (key, l) in ls {
            let pool_key = world.pool_key(&key);
            let (_, spec) = handles
                .iter()
                .find(|(pk, _)| pk == &pool_key)
                .ok_or_else(|| Error::Snapshot(format!("missing handle for pool '{pool_key}'")))?;
            let pool = &world.pools[&pool_key];
            let handle = pool.adopt_handle(&id, spec.clone())?;
            let adapter = world
                .adapters
                .get_mut(&key)
                .ok_or_else(|| Error::Snapshot(format!("unknown layer '{key}'")))?;
            adapter.restore_character(&id, handle, l, pool)?;
        }

        if embed_rows.len() != world.weights.arch.blocks {
            return Err(Error::Snapshot(format!(
                "character '{id}' has {} embedding rows, expected {}",
                embed_rows.len(),
                world.weights.arch.blocks
            )));
        }
        world.characters.insert(
            id.clone(),
            CharacterRecord { id, tokens: CharacterTokens::from_rows(embed_rows), gate, attributes },
        );
    }

    let event_count = r.u32()? as usize;
    let mut events = Vec::with_capacity(event_count);
    for _ in 0..event_count {
        events.push(r.string()?);
    }
    world.events = events;

    if r.pos != r.bytes.len() {
        return Err(Error::Snapshot("trailing bytes in snapshot".into()));
    }
    Ok(world)
}

/// Atomic write: temp file in the target directory, then rename, so a
/// killed writer never leaves a partially written snapshot behind.
pub fn save(world: &StoryWorld, path: &Path) -> Result<()> {
    let bytes = encode(world);
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<StoryWorld> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{synth_dataset, train_character, TrainingConfig};
    use crate::world::config::DimsSection;

    fn small_config() -> WorldConfig {
        let mut cfg = WorldConfig::default();
        cfg.dims = DimsSection { d: 16, r: 4, r1: 2 };
        cfg.arch.grid_h = 4;
        cfg.arch.grid_w = 4;
        cfg.arch.d_text = 8;
        cfg
    }

    fn trained_world() -> StoryWorld {
        let mut world = StoryWorld::init(small_config()).unwrap();
        world.add_character_slots("V1").unwrap();
        let ds = synth_dataset(&world, "V1", 2);
        let cfg = TrainingConfig { steps: 4, batch_size: 1, ..Default::default() };
        train_character(&mut world, "V1", &ds, &cfg).unwrap();
        world
    }

    #[test]
    fn encode_is_deterministic() {
        let a = encode(&StoryWorld::init(small_config()).unwrap());
        let b = encode(&StoryWorld::init(small_config()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_reserializes_byte_identically() {
        let world = trained_world();
        let bytes = encode(&world);
        let reloaded = decode(&bytes).unwrap();
        assert_eq!(encode(&reloaded), bytes);
    }

    #[test]
    fn f64_round_trip_preserves_state_exactly() {
        let world = trained_world();
        let reloaded = decode(&encode(&world)).unwrap();
        for key in world.layer_keys() {
            let a = world.adapter(&key).unwrap();
            let b = reloaded.adapter(&key).unwrap();
            assert_eq!(a.b_shared().data(), b.b_shared().data());
            assert_eq!(
                a.slot("V1").unwrap().l().data(),
                b.slot("V1").unwrap().l().data()
            );
        }
        assert_eq!(
            world.character("V1").unwrap().tokens,
            reloaded.character("V1").unwrap().tokens
        );
    }

    #[test]
    fn f32_round_trip_quantizes_but_stays_stable() {
        let mut cfg = small_config();
        cfg.world.precision = Precision::F32;
        let mut world = StoryWorld::init(cfg).unwrap();
        world.add_character_slots("V1").unwrap();
        let ds = synth_dataset(&world, "V1", 2);
        let tc = TrainingConfig { steps: 4, batch_size: 1, ..Default::default() };
        train_character(&mut world, "V1", &ds, &tc).unwrap();

        let bytes = encode(&world);
        // Compact payloads are smaller than wide ones.
        let mut wide_cfg = world.config().clone();
        wide_cfg.world.precision = Precision::F64;
        let reloaded = decode(&bytes).unwrap();
        // Quantized load still re-serializes byte-identically.
        assert_eq!(encode(&reloaded), bytes);
        // And every stored value survived the f32 round trip exactly.
        for key in world.layer_keys() {
            let quantized: Vec<f64> = world
                .adapter(&key)
                .unwrap()
                .slot("V1")
                .unwrap()
                .l()
                .data()
                .iter()
                .map(|&v| v as f32 as f64)
                .collect();
            assert_eq!(reloaded.adapter(&key).unwrap().slot("V1").unwrap().l().data(), &quantized[..]);
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let world = trained_world();
        let mut bytes = encode(&world);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let err = decode(b"NOPE....").unwrap_err();
        assert!(matches!(err, Error::Snapshot(_)));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.evtl");
        let world = trained_world();
        save(&world, &path).unwrap();
        assert!(!path.with_extension("tmp~").exists(), "temp file must be renamed away");
        let reloaded = load(&path).unwrap();
        assert_eq!(encode(&reloaded), encode(&world));
    }

    #[test]
    fn gate_outcome_survives_round_trip() {
        let mut world = trained_world();
        world.character_mut("V1").unwrap().gate = Some(GateOutcome {
            character_id: "V1".into(),
            attempts: vec![crate::trainer::GateAttempt {
                scores: vec![4, 4, 3, 4, 4],
                mean: 3.8,
                lr_embed: 1e-3,
                lr_adapter: 5e-4,
                steps: 200,
                final_loss: 0.01,
            }],
            accepted: true,
            force_accepted: false,
        });
        let reloaded = decode(&encode(&world)).unwrap();
        let gate = reloaded.character("V1").unwrap().gate.as_ref().unwrap();
        assert!(gate.accepted);
        assert_eq!(gate.attempts[0].scores, vec![4, 4, 3, 4, 4]);
    }
}
