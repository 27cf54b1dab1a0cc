//! Persistent store for passage layer-`k` representations.
//!
//! One immutable file holds every entry (write-temp-then-rename, so readers
//! never see a torn file). Layout, all little-endian:
//!
//! ```text
//! magic "DFRM" | version u32 | weight fingerprint [u8; 32] | k u16 | d u16
//! | precision u8 (4 = f32, 2 = rounded 16-bit) | entry count u64
//! | index: (content key u64, payload offset u64, token count u16) × count,
//!   sorted by key, offsets relative to payload start
//! | payload blocks, contiguous, in index order
//! ```
//!
//! A stored block holds the passage *block* of the packed pair — the
//! passage tokens plus their trailing separator row, `token_count + 1` rows
//! of `d` scalars — because the upper joint layers attend to the separator
//! too; dropping it would make served inference diverge from inline. The
//! index `token_count` counts real passage tokens only.
//!
//! Entries are keyed by an FNV-1a hash of the passage token ids. Insertion
//! order never shows in the bytes: entries are deduplicated and written in
//! key order, so the same logical content always produces the same file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decomposed::{encode_lower, DeformerModel, SegmentRole};
use crate::error::{Error, Result};
use crate::tensor::{flops, Tensor};

pub const CACHE_MAGIC: &[u8; 4] = b"DFRM";
pub const CACHE_VERSION: u32 = 1;

const HEADER_BYTES: usize = 4 + 4 + 32 + 2 + 2 + 1 + 8;
const INDEX_ENTRY_BYTES: usize = 8 + 8 + 2;

/// How stored scalars are narrowed. The 16-bit mode keeps the high half of
/// the IEEE-754 f32 pattern (sign, exponent, 7 mantissa bits), rounding to
/// nearest-even rather than floor-truncating so the per-element relative
/// error stays within 2⁻⁸.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoragePrecision {
    F32,
    Trunc16,
}

impl StoragePrecision {
    /// Bytes per stored scalar — doubles as the format tag.
    pub fn byte_width(self) -> usize {
        match self {
            StoragePrecision::F32 => 4,
            StoragePrecision::Trunc16 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(StoragePrecision::F32),
            2 => Ok(StoragePrecision::Trunc16),
            other => Err(Error::Format(format!("unknown precision tag {other}"))),
        }
    }

    /// What a value becomes after one store/load cycle.
    pub fn round_through(self, v: f64) -> f64 {
        match self {
            StoragePrecision::F32 => v as f32 as f64,
            StoragePrecision::Trunc16 => f32::from_bits((narrow16(v as f32) as u32) << 16) as f64,
        }
    }

    fn encode_into(self, v: f64, out: &mut Vec<u8>) {
        match self {
            StoragePrecision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            StoragePrecision::Trunc16 => out.extend_from_slice(&narrow16(v as f32).to_le_bytes()),
        }
    }

    fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            StoragePrecision::F32 => {
                f32::from_le_bytes(bytes.try_into().expect("4-byte scalar")) as f64
            }
            StoragePrecision::Trunc16 => {
                let half = u16::from_le_bytes(bytes.try_into().expect("2-byte scalar"));
                f32::from_bits((half as u32) << 16) as f64
            }
        }
    }
}

/// High 16 bits of the f32 pattern, rounded to nearest (ties to even).
fn narrow16(v: f32) -> u16 {
    let bits = v.to_bits();
    let upper = bits >> 16;
    let lower = bits & 0xFFFF;
    let round_up = lower > 0x8000 || (lower == 0x8000 && upper & 1 == 1);
    (upper + u32::from(round_up)) as u16
}

/// FNV-1a over the passage token ids (little-endian bytes) — the content
/// half of a cache key.
pub fn passage_hash(tokens: &[u32]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Full identity of a cached entry: content hash plus the producing model's
/// identity. Two models (or two split layers) never share entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheKey {
    pub content: u64,
    pub fingerprint: [u8; 32],
    pub k: usize,
}

impl CacheKey {
    pub fn new(tokens: &[u32], model: &DeformerModel) -> Self {
        let (fingerprint, k) = model.fingerprint();
        Self { content: passage_hash(tokens), fingerprint, k }
    }
}

/// One stored passage: its layer-`k` block as served (values already
/// narrowed through the storage precision).
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub key: CacheKey,
    /// Real passage tokens; the states matrix has one extra separator row.
    pub token_count: usize,
    /// `(token_count + 1, d)` layer-`k` representations.
    pub states: Tensor,
    pub precision: StoragePrecision,
}

impl CacheEntry {
    /// The entry as a passage source for decomposed inference.
    pub fn passage_source(&self) -> crate::decomposed::PassageSource<'_> {
        crate::decomposed::PassageSource::Precomputed {
            layer_k: &self.states,
            fingerprint: (self.key.fingerprint, self.key.k),
        }
    }
}

/// What [`encode_and_store`] did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreSummary {
    pub path: PathBuf,
    /// Unique passages stored (after deduplication).
    pub entries: usize,
    /// Total file size.
    pub bytes: u64,
    /// FLOPs spent computing the lower-layer representations.
    pub offline_flops: u64,
}

/// Encodes every unique passage through the model's lower layers and writes
/// the store file atomically. Duplicate passages collapse to one entry.
pub fn encode_and_store(
    passages: &[Vec<u32>],
    model: &DeformerModel,
    precision: StoragePrecision,
    path: &Path,
) -> Result<StoreSummary> {
    if passages.is_empty() {
        return Err(Error::Input("no passages to store".into()));
    }
    let cfg = &model.weights.config;
    if cfg.hidden_dim > u16::MAX as usize || model.split_layer() > u16::MAX as usize {
        return Err(Error::Param("model dimensions exceed the format's 16-bit fields".into()));
    }

    // Deduplicate by content hash; detect (astronomically unlikely) hash
    // collisions instead of silently serving the wrong passage.
    let mut unique: BTreeMap<u64, &Vec<u32>> = BTreeMap::new();
    for p in passages {
        let key = passage_hash(p);
        if let Some(prev) = unique.get(&key) {
            if *prev != p {
                return Err(Error::State(format!(
                    "two distinct passages hash to the same key {key:#018x}"
                )));
            }
        } else {
            unique.insert(key, p);
        }
    }

    let (encoded, offline_flops) = flops::counting(|| -> Result<Vec<(u64, usize, Tensor)>> {
        let mut out = Vec::with_capacity(unique.len());
        for (&key, tokens) in &unique {
            if tokens.len() > u16::MAX as usize {
                return Err(Error::Input(format!(
                    "passage of {} tokens exceeds the format's 16-bit token count",
                    tokens.len()
                )));
            }
            let states = encode_lower(model, SegmentRole::Passage, tokens)?;
            let top = states.top();
            if !top.is_finite() {
                return Err(Error::Numerical(
                    "passage states contain non-finite values; refusing to store".into(),
                ));
            }
            out.push((key, tokens.len(), top.clone()));
        }
        Ok(out)
    });
    let encoded = encoded?;

    let (fingerprint, k) = model.fingerprint();
    let mut index = Vec::with_capacity(encoded.len() * INDEX_ENTRY_BYTES);
    let mut payload = Vec::new();
    for (key, token_count, states) in &encoded {
        index.extend_from_slice(&key.to_le_bytes());
        index.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        index.extend_from_slice(&(*token_count as u16).to_le_bytes());
        for &v in states.data() {
            precision.encode_into(v, &mut payload);
        }
    }

    let mut buf = Vec::with_capacity(HEADER_BYTES + index.len() + payload.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint);
    buf.extend_from_slice(&(k as u16).to_le_bytes());
    buf.extend_from_slice(&(cfg.hidden_dim as u16).to_le_bytes());
    buf.push(precision.byte_width() as u8);
    buf.extend_from_slice(&(encoded.len() as u64).to_le_bytes());
    buf.extend_from_slice(&index);
    buf.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;

    Ok(StoreSummary {
        path: path.to_path_buf(),
        entries: encoded.len(),
        bytes: buf.len() as u64,
        offline_flops,
    })
}

/// An open store: parsed header and index, payload held in memory.
#[derive(Debug, Clone)]
pub struct CacheFile {
    pub fingerprint: [u8; 32],
    pub k: usize,
    pub d: usize,
    pub precision: StoragePrecision,
    /// `(content key, payload offset, token count)`, sorted by key.
    index: Vec<(u64, u64, u16)>,
    payload: Vec<u8>,
}

impl CacheFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let whine = |what: &str| Error::Format(format!("{}: {what}", path.display()));
        if bytes.len() < HEADER_BYTES {
            return Err(whine("shorter than the fixed header"));
        }
        if &bytes[0..4] != CACHE_MAGIC {
            return Err(whine("not a representation store (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(whine(&format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = bytes[8..40].try_into().unwrap();
        let k = u16::from_le_bytes(bytes[40..42].try_into().unwrap()) as usize;
        let d = u16::from_le_bytes(bytes[42..44].try_into().unwrap()) as usize;
        let precision = StoragePrecision::from_tag(bytes[44])?;
        let count = u64::from_le_bytes(bytes[45..53].try_into().unwrap()) as usize;

        let index_end = HEADER_BYTES + count * INDEX_ENTRY_BYTES;
        if bytes.len() < index_end {
            return Err(whine("index runs past end of file"));
        }
        let mut index = Vec::with_capacity(count);
        for i in 0..count {
            let at = HEADER_BYTES + i * INDEX_ENTRY_BYTES;
            let key = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let offset = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap());
            let tokens = u16::from_le_bytes(bytes[at + 16..at + 18].try_into().unwrap());
            index.push((key, offset, tokens));
        }
        let payload = bytes[index_end..].to_vec();

        // The index must be canonical: strictly ascending keys, blocks
        // tiling the payload exactly in order.
        let mut expect_offset = 0u64;
        for (i, &(key, offset, tokens)) in index.iter().enumerate() {
            if i > 0 && index[i - 1].0 >= key {
                return Err(whine("index keys not strictly ascending"));
            }
            if offset != expect_offset {
                return Err(whine("payload blocks not contiguous"));
            }
            expect_offset = offset
                + ((tokens as u64 + 1) * d as u64 * precision.byte_width() as u64);
        }
        if expect_offset != payload.len() as u64 {
            return Err(whine("payload length disagrees with index"));
        }

        Ok(Self { fingerprint, k, d, precision, index, payload })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Content keys in file (ascending) order.
    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.index.iter().map(|&(k, _, _)| k)
    }

    /// Fetches an entry. A key whose fingerprint or split layer disagrees
    /// with this file is an error (the caller is talking to the wrong
    /// store); an unknown content hash is an ordinary miss, `Ok(None)`, so
    /// callers can fall back to inline encoding.
    pub fn lookup(&self, key: &CacheKey) -> Result<Option<CacheEntry>> {
        if key.fingerprint != self.fingerprint {
            return Err(Error::CacheCompat(
                "store was built by a different model (weight fingerprint mismatch)".into(),
            ));
        }
        if key.k != self.k {
            return Err(Error::CacheCompat(format!(
                "store holds layer-{} states, model splits at {}",
                self.k, key.k
            )));
        }
        let slot = match self.index.binary_search_by_key(&key.content, |&(k, _, _)| k) {
            Ok(i) => i,
            Err(_) => return Ok(None),
        };
        Ok(Some(self.entry_at(slot)?))
    }

    /// Decodes the entry at an index position (file order).
    pub fn entry_at(&self, slot: usize) -> Result<CacheEntry> {
        let (content, offset, tokens) = self.index[slot];
        let rows = tokens as usize + 1;
        let width = self.precision.byte_width();
        let start = offset as usize;
        let end = start + rows * self.d * width;
        // Bounds were validated at open; this guards entry_at misuse.
        if end > self.payload.len() {
            return Err(Error::Format("payload block out of bounds".into()));
        }
        let data: Vec<f64> = self.payload[start..end]
            .chunks(width)
            .map(|c| self.precision.decode(c))
            .collect();
        Ok(CacheEntry {
            key: CacheKey { content, fingerprint: self.fingerprint, k: self.k },
            token_count: tokens as usize,
            states: Tensor::from_vec(vec![rows, self.d], data)?,
            precision: self.precision,
        })
    }
}

/// Payload bytes for one passage: `token_count × hidden_dim ×
/// bytes_per_scalar`. Deliberately the bare per-token figure — header,
/// index, and the separator row are reported by [`header_overhead`] and the
/// store summary instead, so this matches back-of-envelope storage math.
pub fn estimate_size(token_count: usize, hidden_dim: usize, bytes_per_scalar: usize) -> u64 {
    token_count as u64 * hidden_dim as u64 * bytes_per_scalar as u64
}

/// Fixed file cost: header plus index, for a given entry count.
pub fn header_overhead(entries: usize) -> u64 {
    (HEADER_BYTES + entries * INDEX_ENTRY_BYTES) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposed::{deformer_forward, transfer_weights, PassageSource};
    use crate::encoder::{EncoderWeights, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(k: usize) -> DeformerModel {
        let cfg = ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 32,
            max_positions: 16,
            q_max: 2,
            p_max: 8,
            layer_norm_eps: 1e-12,
            seed: 5,
        };
        let full = EncoderWeights::init(&cfg).unwrap();
        transfer_weights(&full, k).unwrap()
    }

    fn random_passages(n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(1..=6);
                (0..len).map(|_| rng.gen_range(4..32)).collect()
            })
            .collect()
    }

    #[test]
    fn estimate_matches_the_appendix_storage_arithmetic() {
        // 150 tokens at d=768, 2 bytes a scalar.
        let bytes = estimate_size(150, 768, 2);
        assert_eq!(bytes, 230_400);
        let kb = bytes as f64 / 1000.0;
        assert!((kb - 226.0).abs() / 226.0 < 0.02, "{kb} KB");
        // A million such passages.
        let total_gb = bytes as f64 * 1_000_000.0 / 1e9;
        assert!((total_gb - 226.0).abs() / 226.0 < 0.02, "{total_gb} GB");
        assert_eq!(estimate_size(1, 1, 4), 4);
    }

    #[test]
    fn sixteen_bit_mode_stays_within_the_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let v: f64 = rng.gen_range(-8.0..8.0);
            let r = StoragePrecision::Trunc16.round_through(v);
            let rel = (r - v).abs() / v.abs().max(1e-30);
            // f64 -> f32 adds ~2^-24; rounding to the high half adds at
            // most 2^-8 of the value.
            assert!(rel <= 1.0 / 256.0 + 1e-6, "{v} -> {r} ({rel})");
        }
    }

    #[test]
    fn f32_mode_round_through_is_plain_narrowing() {
        for v in [0.1, -3.25, 1e-20, 7.5e11] {
            assert_eq!(StoragePrecision::F32.round_through(v), v as f32 as f64);
        }
    }

    #[test]
    fn store_deduplicates_identical_passages() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let p = vec![vec![4, 5, 6], vec![4, 5, 6], vec![7, 8]];
        let summary = encode_and_store(&p, &m, StoragePrecision::F32, &path).unwrap();
        assert_eq!(summary.entries, 2);
        assert!(summary.offline_flops > 0);
        let file = CacheFile::open(&path).unwrap();
        assert_eq!(file.len(), 2);
    }

    #[test]
    fn empty_passage_list_is_rejected() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        assert!(matches!(
            encode_and_store(&[], &m, StoragePrecision::F32, &path),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn round_trip_is_byte_identical_and_lookup_matches_inline_encoding() {
        let m = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let passages = random_passages(20, 3);
        encode_and_store(&passages, &m, StoragePrecision::F32, &path).unwrap();
        let original = fs::read(&path).unwrap();

        let file = CacheFile::open(&path).unwrap();
        assert_eq!(file.fingerprint, m.fingerprint().0);
        assert_eq!(file.k, 2);
        for p in &passages {
            let entry = file.lookup(&CacheKey::new(p, &m)).unwrap().expect("hit");
            assert_eq!(entry.token_count, p.len());
            let inline = encode_lower(&m, SegmentRole::Passage, p).unwrap();
            let want: Vec<f64> = inline
                .top()
                .data()
                .iter()
                .map(|&v| StoragePrecision::F32.round_through(v))
                .collect();
            assert_eq!(entry.states.data(), &want[..]);
        }

        // Writing the same logical content again reproduces the bytes.
        encode_and_store(&passages, &m, StoragePrecision::F32, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), original);
    }

    #[test]
    fn insertion_order_never_changes_the_bytes() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.dfrm");
        let b_path = dir.path().join("b.dfrm");
        let mut passages = random_passages(10, 7);
        encode_and_store(&passages, &m, StoragePrecision::Trunc16, &a_path).unwrap();
        passages.reverse();
        passages.rotate_left(3);
        encode_and_store(&passages, &m, StoragePrecision::Trunc16, &b_path).unwrap();
        assert_eq!(fs::read(&a_path).unwrap(), fs::read(&b_path).unwrap());
    }

    #[test]
    fn sixteen_bit_entries_stay_within_tolerance_of_inline_states() {
        let m = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let passages = random_passages(8, 11);
        encode_and_store(&passages, &m, StoragePrecision::Trunc16, &path).unwrap();
        let file = CacheFile::open(&path).unwrap();
        for p in &passages {
            let entry = file.lookup(&CacheKey::new(p, &m)).unwrap().expect("hit");
            let inline = encode_lower(&m, SegmentRole::Passage, p).unwrap();
            for (&got, &want) in entry.states.data().iter().zip(inline.top().data()) {
                let rel = (got - want).abs() / want.abs().max(1e-30);
                assert!(rel <= 1.0 / 256.0 + 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn hundred_passages_all_hit_and_novel_passages_all_miss() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let stored = random_passages(100, 21);
        encode_and_store(&stored, &m, StoragePrecision::F32, &path).unwrap();
        let file = CacheFile::open(&path).unwrap();
        for p in &stored {
            assert!(file.lookup(&CacheKey::new(p, &m)).unwrap().is_some());
        }
        // Novel passages: same generator, different seed, filtered against
        // the stored set.
        let stored_set: std::collections::HashSet<&Vec<u32>> = stored.iter().collect();
        let mut misses = 0;
        for p in random_passages(200, 22) {
            if stored_set.contains(&p) {
                continue;
            }
            assert!(file.lookup(&CacheKey::new(&p, &m)).unwrap().is_none(), "{p:?}");
            misses += 1;
            if misses == 100 {
                break;
            }
        }
        assert!(misses >= 100);
    }

    #[test]
    fn wrong_model_or_split_is_a_compat_error_not_a_miss() {
        let m1 = model(1);
        let m2 = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        encode_and_store(&[vec![4, 5]], &m1, StoragePrecision::F32, &path).unwrap();
        let file = CacheFile::open(&path).unwrap();
        assert!(matches!(
            file.lookup(&CacheKey::new(&[4, 5], &m2)),
            Err(Error::CacheCompat(_))
        ));
        let mut cfg = m1.weights.config.clone();
        cfg.seed = 99;
        let other = transfer_weights(&EncoderWeights::init(&cfg).unwrap(), 1).unwrap();
        assert!(matches!(
            file.lookup(&CacheKey::new(&[4, 5], &other)),
            Err(Error::CacheCompat(_))
        ));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        encode_and_store(&random_passages(3, 1), &m, StoragePrecision::F32, &path).unwrap();

        let good = fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(CacheFile::open(&path), Err(Error::Format(_))));

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 5);
        fs::write(&path, &truncated).unwrap();
        assert!(matches!(CacheFile::open(&path), Err(Error::Format(_))));

        // Corrupt an index offset so blocks stop tiling the payload.
        let mut skewed = good;
        let offset_pos = HEADER_BYTES + 8;
        skewed[offset_pos] ^= 0x01;
        fs::write(&path, &skewed).unwrap();
        assert!(matches!(CacheFile::open(&path), Err(Error::Format(_))));
    }

    #[test]
    fn served_inference_is_bit_identical_to_inline_in_f32_mode() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let passages = random_passages(10, 31);
        encode_and_store(&passages, &m, StoragePrecision::F32, &path).unwrap();
        let file = CacheFile::open(&path).unwrap();
        let question = [4u32, 6];
        for p in &passages {
            let entry = file.lookup(&CacheKey::new(p, &m)).unwrap().expect("hit");
            let served = deformer_forward(&m, &question, entry.passage_source()).unwrap();
            let inline = deformer_forward(
                &m,
                &question,
                PassageSource::TokensVia(p, StoragePrecision::F32),
            )
            .unwrap();
            assert_eq!(served.dist.start, inline.dist.start);
            assert_eq!(served.dist.end, inline.dist.end);
            for (a, b) in served.upper.iter().zip(&inline.upper) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn header_overhead_accounts_for_header_and_index() {
        let m = model(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.dfrm");
        let passages = random_passages(5, 41);
        let summary = encode_and_store(&passages, &m, StoragePrecision::F32, &path).unwrap();
        let file = CacheFile::open(&path).unwrap();
        let payload: u64 = file
            .keys()
            .enumerate()
            .map(|(i, _)| {
                let e = file.entry_at(i).unwrap();
                ((e.token_count as u64 + 1) * file.d as u64) * 4
            })
            .sum();
        assert_eq!(summary.bytes, header_overhead(file.len()) + payload);
    }
}
