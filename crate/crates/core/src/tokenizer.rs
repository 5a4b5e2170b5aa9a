//! Byte-level tokenization into fixed-length, right-padded sequences.
//!
//! Layout of one encoded record:
//!
//! ```text
//! [SEP_PROMPT] prompt… [SEP_A] response_a… [SEP_B] response_b… [EOS] [PAD]…
//! ```
//!
//! The `max_len − 4` content slots are split 2:3:3 between prompt, response A
//! and response B. Each field keeps its head (tail truncation); budget a field
//! does not use carries over to the fields after it.

use std::io::{Read, Write};

use thiserror::Error;

use crate::ingest::PreferenceRecord;

pub const PAD: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP_PROMPT: u32 = 258;
pub const SEP_A: u32 = 259;
pub const SEP_B: u32 = 260;
pub const VOCAB_SIZE: usize = 261;

/// Smallest supported `max_len`.
pub const MIN_MAX_LEN: usize = 16;

/// Bumped whenever the layout above changes; part of the cache key.
pub const TEMPLATE_VERSION: u32 = 1;

/// Desk-scale default sequence length.
pub const DEFAULT_MAX_LEN: usize = 512;
/// Sequence length of the gemma-like preset at full scale.
pub const GEMMA_MAX_LEN: usize = 1536;
/// Sequence length of the llama-like preset at full scale.
pub const LLAMA_MAX_LEN: usize = 1280;

const SPECIAL_TOKENS: usize = 4;
const BUDGET_WEIGHTS: [usize; 3] = [2, 3, 3];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("max_len {0} is below the minimum of {MIN_MAX_LEN}")]
    MaxLenTooSmall(usize),
    #[error("token cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub real_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Builds a padded sequence from its real tokens (which must end in EOS).
    fn from_real(real: Vec<u32>, max_len: usize) -> Self {
        let real_length = real.len();
        let mut ids = real;
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real_length];
        attention_mask.resize(max_len, 0);
        Self {
            ids,
            attention_mask,
            real_length,
        }
    }
}

pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Per-field byte budgets for `max_len`, before carry-over.
pub fn field_budgets(max_len: usize) -> [usize; 3] {
    let content = max_len - SPECIAL_TOKENS;
    let total: usize = BUDGET_WEIGHTS.iter().sum();
    let prompt = content * BUDGET_WEIGHTS[0] / total;
    let response_a = content * BUDGET_WEIGHTS[1] / total;
    [prompt, response_a, content - prompt - response_a]
}

pub fn format_input(
    record: &PreferenceRecord,
    max_len: usize,
) -> Result<TokenSequence, TokenizerError> {
    if max_len < MIN_MAX_LEN {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let budgets = field_budgets(max_len);
    let fields = [&record.prompt, &record.response_a, &record.response_b];
    let separators = [SEP_PROMPT, SEP_A, SEP_B];

    let mut real = Vec::with_capacity(max_len);
    let mut carry = 0;
    for ((text, sep), budget) in fields.iter().zip(separators).zip(budgets) {
        let allowance = budget + carry;
        let bytes = text.as_bytes();
        let take = bytes.len().min(allowance);
        real.push(sep);
        real.extend(bytes[..take].iter().map(|&b| u32::from(b)));
        carry = allowance - take;
    }
    real.push(EOS);
    Ok(TokenSequence::from_real(real, max_len))
}

/// A group of sequences padded only to the longest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the members in the list the batch was built from.
    pub indices: Vec<usize>,
    /// Columns per row: the largest `real_length` in the batch.
    pub width: usize,
    /// `indices.len() × width` token ids, row-major.
    pub ids: Vec<u32>,
    /// `indices.len() × width` mask, row-major.
    pub mask: Vec<u8>,
}

impl Batch {
    pub fn from_sequences(sequences: &[TokenSequence], indices: &[usize]) -> Self {
        let width = indices
            .iter()
            .map(|&i| sequences[i].real_length)
            .max()
            .unwrap_or(0);
        let mut ids = Vec::with_capacity(indices.len() * width);
        let mut mask = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            ids.extend_from_slice(&sequences[i].ids[..width]);
            mask.extend_from_slice(&sequences[i].attention_mask[..width]);
        }
        Self {
            indices: indices.to_vec(),
            width,
            ids,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Length-bucketed batching: stable sort by `real_length`, then fixed-size
/// chunks, so each batch pads to a similar width.
pub fn batch(sequences: &[TokenSequence], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by_key(|&i| sequences[i].real_length);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_sequences(sequences, chunk))
        .collect()
}

const CACHE_MAGIC: [u8; 4] = *b"APTK";

/// Writes a token cache: magic, template version, max_len and record count
/// as u32, then per record its real length as u32 followed by that many u32
/// ids. All little-endian; padding is rebuilt on read.
pub fn write_cache<W: Write>(
    mut w: W,
    sequences: &[TokenSequence],
    max_len: usize,
) -> Result<(), TokenizerError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CACHE_MAGIC);
    for v in [TEMPLATE_VERSION, to_u32(max_len)?, to_u32(sequences.len())?] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in sequences {
        if s.max_len() != max_len {
            return Err(TokenizerError::Cache(format!(
                "sequence of length {} in a cache for max_len {max_len}",
                s.max_len()
            )));
        }
        buf.extend_from_slice(&to_u32(s.real_length)?.to_le_bytes());
        for &id in &s.ids[..s.real_length] {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a cache written by [`write_cache`]. Returns `Ok(None)` when the
/// cache was built for a different `max_len` or template version.
pub fn read_cache<R: Read>(
    mut r: R,
    max_len: usize,
) -> Result<Option<Vec<TokenSequence>>, TokenizerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CACHE_MAGIC {
        return Err(TokenizerError::Cache("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    let cached_len = read_u32(&mut r)? as usize;
    if version != TEMPLATE_VERSION || cached_len != max_len {
        return Ok(None);
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len == 0 || len > max_len {
            return Err(TokenizerError::Cache(format!(
                "record length {len} outside 1..={max_len}"
            )));
        }
        let mut real = Vec::with_capacity(len);
        for _ in 0..len {
            let id = read_u32(&mut r)?;
            if id as usize >= VOCAB_SIZE {
                return Err(TokenizerError::Cache(format!("token id {id} out of range")));
            }
            real.push(id);
        }
        out.push(TokenSequence::from_real(real, max_len));
    }
    Ok(Some(out))
}

fn to_u32(n: usize) -> Result<u32, TokenizerError> {
    u32::try_from(n).map_err(|_| TokenizerError::Cache(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TokenizerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
