use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Identifier of the token hashing scheme, recorded in checkpoints.
pub const HASH_FN: &str = "fnv1a64";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A case-folded token with byte offsets into the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace; every other non-alphanumeric character is a token
/// of its own.
pub fn split(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: Option<usize>, end: usize| {
        if let Some(s) = start {
            tokens.push(Token {
                text: text[s..end].to_lowercase(),
                start: s,
                end,
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        flush(&mut tokens, word_start.take(), i);
        if !c.is_whitespace() {
            let end = i + c.len_utf8();
            tokens.push(Token {
                text: text[i..end].to_lowercase(),
                start: i,
                end,
            });
        }
    }
    flush(&mut tokens, word_start, text.len());
    tokens
}

/// Hashed vocabulary: `V` buckets, ids `0..4` reserved for specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    bucket_count: usize,
}

impl Vocab {
    pub fn new(bucket_count: usize) -> Self {
        assert!(bucket_count > NUM_SPECIALS, "vocabulary needs room beyond the specials");
        Self { bucket_count }
    }

    pub fn size(&self) -> usize {
        self.bucket_count
    }

    pub fn id(&self, token: &str) -> usize {
        let buckets = (self.bucket_count - NUM_SPECIALS) as u64;
        (fnv1a64(token.as_bytes()) % buckets) as usize + NUM_SPECIALS
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split(text).iter().map(|t| self.id(&t.text)).collect()
    }
}
