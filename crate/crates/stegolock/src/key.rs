//! User keys: generation, tiling, block voting, Hamming matching and the
//! owner-side key registry.
//!
//! A user key is a binary `c x r x r` matrix. Before encoding it is tiled to
//! the image size (`expand`); after decoding, the real-valued message plane is
//! split back into `r x r` blocks and a per-position majority vote recovers
//! the key.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Binary key identifying one licensed user. Bits are stored row-major as
/// `c * r * r` bytes, each 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserKey {
    pub user_id: String,
    pub channels: usize,
    pub side: usize,
    pub bits: Vec<u8>,
}

impl UserKey {
    pub fn from_bits(user_id: impl Into<String>, channels: usize, side: usize, bits: Vec<u8>) -> Result<Self> {
        if channels == 0 || side == 0 {
            return Err(Error::invalid("key channels and side must be positive"));
        }
        if bits.len() != channels * side * side {
            return Err(Error::invalid(format!(
                "expected {} bits, got {}",
                channels * side * side,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("key bits must be 0 or 1"));
        }
        Ok(UserKey { user_id: user_id.into(), channels, side, bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn same_shape(&self, other: &UserKey) -> bool {
        self.channels == other.channels && self.side == other.side
    }

    /// Hex digest of the key material, used to bind checkpoints to a key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.channels as u8, self.side as u8]);
        h.update(&self.bits);
        hex(&h.finalize())
    }

    /// Key with exactly `n_flips` distinct bits inverted.
    pub fn with_flipped_bits(&self, n_flips: usize, rng: &mut impl Rng) -> Result<UserKey> {
        if n_flips > self.len() {
            return Err(Error::invalid(format!(
                "cannot flip {} bits of a {}-bit key",
                n_flips,
                self.len()
            )));
        }
        let mut out = self.clone();
        let mut picked = HashSet::new();
        while picked.len() < n_flips {
            let p = rng.gen_range(0..self.len());
            if picked.insert(p) {
                out.bits[p] ^= 1;
            }
        }
        Ok(out)
    }
}

/// Key tiled to image size: `c x h x w`, every `r x r` block a copy of the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedKey {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl ExpandedKey {
    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

/// Draw a uniform binary key, deterministic in `(user_id, seed)`.
pub fn generate_key(user_id: &str, side: usize, channels: usize, rng_seed: u64) -> Result<UserKey> {
    if side == 0 || channels == 0 {
        return Err(Error::invalid("key side and channels must be >= 1"));
    }
    let mut rng = key_rng(user_id, rng_seed);
    let bits = (0..channels * side * side).map(|_| rng.gen_range(0..2u8)).collect();
    UserKey::from_bits(user_id, channels, side, bits)
}

/// The identity -> bits mapping: ChaCha12 seeded with SHA-256(user_id || seed).
fn key_rng(user_id: &str, rng_seed: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(user_id.as_bytes());
    h.update(rng_seed.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Tile a key to `h x w`. Both must be multiples of the key side.
pub fn expand_key(key: &UserKey, height: usize, width: usize) -> Result<ExpandedKey> {
    let r = key.side;
    if height % r != 0 || width % r != 0 {
        return Err(Error::invalid(format!(
            "image size {height}x{width} is not a multiple of key side {r}"
        )));
    }
    let mut bits = Vec::with_capacity(key.channels * height * width);
    for ch in 0..key.channels {
        for i in 0..height {
            for j in 0..width {
                bits.push(key.bits[ch * r * r + (i % r) * r + (j % r)]);
            }
        }
    }
    Ok(ExpandedKey { channels: key.channels, height, width, bits })
}

/// Split a real-valued `c x h x w` plane into `(h/r)*(w/r)` blocks of shape
/// `c x r x r`, row-major over block positions.
pub fn split_blocks(plane: &[f32], channels: usize, height: usize, width: usize, side: usize) -> Result<Vec<Vec<f32>>> {
    if height % side != 0 || width % side != 0 {
        return Err(Error::invalid(format!(
            "plane {height}x{width} is not a multiple of block side {side}"
        )));
    }
    if plane.len() != channels * height * width {
        return Err(Error::invalid("plane length does not match its shape"));
    }
    let (by, bx) = (height / side, width / side);
    let mut blocks = Vec::with_capacity(by * bx);
    for b_i in 0..by {
        for b_j in 0..bx {
            let mut block = Vec::with_capacity(channels * side * side);
            for ch in 0..channels {
                for i in 0..side {
                    for j in 0..side {
                        let (y, x) = (b_i * side + i, b_j * side + j);
                        block.push(plane[ch * height * width + y * width + x]);
                    }
                }
            }
            blocks.push(block);
        }
    }
    Ok(blocks)
}

/// Per-position majority vote across blocks. Each block is binarized at
/// `threshold` first; ties resolve to 1.
pub fn majority_vote(blocks: &[Vec<f32>], channels: usize, side: usize, threshold: f32) -> Result<UserKey> {
    if blocks.is_empty() {
        return Err(Error::invalid("majority vote over an empty block list"));
    }
    let len = channels * side * side;
    if blocks.iter().any(|b| b.len() != len) {
        return Err(Error::invalid("majority vote blocks must all be c*r*r"));
    }
    let mut ones = vec![0usize; len];
    for block in blocks {
        for (p, &v) in block.iter().enumerate() {
            if v >= threshold {
                ones[p] += 1;
            }
        }
    }
    let n = blocks.len();
    let bits = ones.iter().map(|&o| u8::from(2 * o >= n)).collect();
    UserKey::from_bits("", channels, side, bits)
}

/// Number of differing bits between two same-shape keys.
pub fn hamming_distance(a: &UserKey, b: &UserKey) -> Result<u32> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "key shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.channels, a.side, a.side, b.channels, b.side, b.side
        )));
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count() as u32)
}

/// Full decode-side extraction: split the message plane and vote.
pub fn extract_key(plane: &[f32], channels: usize, height: usize, width: usize, side: usize) -> Result<UserKey> {
    let blocks = split_blocks(plane, channels, height, width, side)?;
    majority_vote(&blocks, channels, side, 0.5)
}

/// Closest registry match within the Hamming threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMatch {
    pub user_id: String,
    pub distance: u32,
    /// Another registered key is at the same distance.
    pub ambiguous: bool,
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub key: UserKey,
    pub checkpoint: String,
}

/// Owner-side record of issued keys and the checkpoints they unlock.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    entries: Vec<RegistryEntry>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, key: UserKey, checkpoint: impl Into<String>) -> Result<()> {
        if key.user_id.is_empty() {
            return Err(Error::invalid("registry entries need a user id"));
        }
        if self.entries.iter().any(|e| e.key.user_id == key.user_id) {
            return Err(Error::invalid(format!("duplicate user id {:?}", key.user_id)));
        }
        if self
            .entries
            .iter()
            .any(|e| e.key.same_shape(&key) && e.key.bits == key.bits)
        {
            return Err(Error::invalid(format!(
                "key of {:?} is identical to an already registered key",
                key.user_id
            )));
        }
        self.entries.push(RegistryEntry { key, checkpoint: checkpoint.into() });
        Ok(())
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.key.user_id == user_id)
    }

    /// Registry entry with minimum Hamming distance to `extracted`, if that
    /// distance is within `eps3`. Ties go to the lowest-index entry and are
    /// flagged ambiguous.
    pub fn trace_key(&self, extracted: &UserKey, eps3: u32) -> Result<Option<TraceMatch>> {
        if self.entries.is_empty() {
            return Err(Error::Precondition("registry is empty".into()));
        }
        let mut best: Option<(usize, u32)> = None;
        let mut tie = false;
        for (i, e) in self.entries.iter().enumerate() {
            let d = hamming_distance(extracted, &e.key)?;
            match best {
                None => best = Some((i, d)),
                Some((_, bd)) if d < bd => {
                    best = Some((i, d));
                    tie = false;
                }
                Some((_, bd)) if d == bd => tie = true,
                _ => {}
            }
        }
        let (idx, dist) = best.unwrap();
        if dist <= eps3 {
            Ok(Some(TraceMatch {
                user_id: self.entries[idx].key.user_id.clone(),
                distance: dist,
                ambiguous: tie,
            }))
        } else {
            Ok(None)
        }
    }

    /// Line-delimited text format: `user_id \t r \t c \t base64(bits) \t checkpoint`,
    /// bits packed row-major, most-significant-bit first per byte.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                e.key.user_id,
                e.key.side,
                e.key.channels,
                base64::engine::general_purpose::STANDARD.encode(pack_bits(&e.key.bits)),
                e.checkpoint
            )?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut reg = KeyRegistry::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("registry line {}: expected 5 fields", ln + 1)));
            }
            let side: usize = fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("registry line {}: bad r", ln + 1)))?;
            let channels: usize = fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("registry line {}: bad c", ln + 1)))?;
            let packed = base64::engine::general_purpose::STANDARD
                .decode(fields[3])
                .map_err(|e| Error::Format(format!("registry line {}: {}", ln + 1, e)))?;
            let bits = unpack_bits(&packed, channels * side * side)
                .ok_or_else(|| Error::Format(format!("registry line {}: truncated bits", ln + 1)))?;
            let key = UserKey::from_bits(fields[0], channels, side, bits)?;
            reg.register(key, fields[4])?;
        }
        Ok(reg)
    }
}

/// MSB-first bit packing.
fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (7 - i % 8);
        }
    }
    out
}

fn unpack_bits(packed: &[u8], n: usize) -> Option<Vec<u8>> {
    if packed.len() < n.div_ceil(8) {
        return None;
    }
    Some((0..n).map(|i| (packed[i / 8] >> (7 - i % 8)) & 1).collect())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
