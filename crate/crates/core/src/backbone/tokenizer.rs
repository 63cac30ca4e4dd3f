/// Hashing word-piece substitute: lowercased words and single punctuation
/// marks are hashed (FNV-1a) into the vocabulary. Ids 0..4 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const FIRST_FREE: u32 = 4;

/// Token ids of one encoder input plus whether anything was cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > FIRST_FREE as usize, "vocabulary too small");
        Self { vocab_size }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        words(text)
            .map(|w| {
                let buckets = self.vocab_size as u64 - FIRST_FREE as u64;
                FIRST_FREE + (fnv1a(w.as_bytes()) % buckets) as u32
            })
            .collect()
    }

    /// `[CLS] text`, keeping the head of the text when it does not fit.
    pub fn encode_single(&self, text: &str, max_len: usize) -> Encoded {
        let mut toks = self.tokenize(text);
        let budget = max_len.saturating_sub(1);
        let truncated = toks.len() > budget;
        toks.truncate(budget);
        let mut ids = Vec::with_capacity(toks.len() + 1);
        ids.push(CLS_ID);
        ids.extend(toks);
        Encoded { ids, truncated }
    }

    /// `[CLS] first [SEP] second`, each side cut to half the budget.
    pub fn encode_pair(&self, first: &str, second: &str, max_len: usize) -> Encoded {
        let budget = max_len.saturating_sub(2) / 2;
        let mut a = self.tokenize(first);
        let mut b = self.tokenize(second);
        let truncated = a.len() > budget || b.len() > budget;
        a.truncate(budget);
        b.truncate(budget);
        let mut ids = Vec::with_capacity(a.len() + b.len() + 2);
        ids.push(CLS_ID);
        ids.extend(a);
        ids.push(SEP_ID);
        ids.extend(b);
        Encoded { ids, truncated }
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() && c != '_' {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.into_iter()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
