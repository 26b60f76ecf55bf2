//! Vocabulary, annotated sequences with entity mentions, the two masking
//! procedures (token corruption, mention hiding), and the corpus file format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub const MASK_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[MASK]", "[CLS]", "[EOS]", "[PAD]", "[UNK]"];

/// Closed token set; ids 0..4 are the special tokens, in fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content words; specials are prepended.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!(
                    "vocabulary id {i} must be {s}, got {:?}",
                    tokens.get(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("token id {id} out of vocabulary")))
    }

    /// Whitespace tokenization into ids, wrapped with [CLS] … [EOS];
    /// out-of-vocabulary words map to [UNK].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS_ID];
        for w in text.split_whitespace() {
            ids.push(self.id(w).unwrap_or(UNK_ID));
        }
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of tokenize on in-vocabulary text: drops the [CLS]/[EOS]
    /// wrapper and joins content tokens with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let inner = match ids {
            [CLS_ID, mid @ .., EOS_ID] => mid,
            _ => ids,
        };
        let words: Result<Vec<&str>> = inner.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}

/// Contiguous token span linked to an entity; `start..=end`, zero-based into
/// the [CLS]-wrapped sequence.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

/// One corpus line: wrapped token ids plus its mention annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSequence {
    pub tokens: Vec<usize>,
    pub mentions: Vec<Mention>,
}

impl AnnotatedSequence {
    /// Structural invariants: wrapper tokens in place, ids in vocabulary,
    /// mention spans interior and pairwise disjoint.
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 || self.tokens[0] != CLS_ID || self.tokens[n - 1] != EOS_ID {
            return Err(Error::Parse {
                file: "<sequence>".into(),
                line: 0,
                msg: "sequence must start with [CLS] and end with [EOS]".into(),
            });
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab_len) {
            return Err(Error::Parse {
                file: "<sequence>".into(),
                line: 0,
                msg: format!("token id {bad} out of vocabulary ({vocab_len})"),
            });
        }
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(self.mentions.len());
        for m in &self.mentions {
            if m.start > m.end || m.start < 1 || m.end >= n - 1 {
                return Err(Error::Parse {
                    file: "<sequence>".into(),
                    line: 0,
                    msg: format!("mention span {}..={} invalid for length {n}", m.start, m.end),
                });
            }
            spans.push((m.start, m.end));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(Error::Parse {
                file: "<sequence>".into(),
                line: 0,
                msg: "mention spans overlap".into(),
            });
        }
        Ok(())
    }
}

/// Token corruption outcome: the corrupted copy plus (position, original id)
/// prediction targets at exactly the corrupted-selected positions.
#[derive(Clone, Debug)]
pub struct CorruptedSequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Deterministic category counts for `k` selected positions: masked, random
/// replacement, kept unchanged. Exact 80/10/10 when k is a multiple of 10,
/// within one position otherwise.
pub(crate) fn corruption_shares(k: usize) -> (usize, usize, usize) {
    let n_random = (0.1 * k as f64).round() as usize;
    let n_keep = n_random;
    (k - n_random - n_keep, n_random, n_keep)
}

/// BERT-style corruption: ceil(rate · usable) non-special positions are
/// selected as prediction targets; of those, 80% become [MASK], 10% a random
/// content token, 10% stay unchanged.
pub fn mask_tokens(tokens: &[usize], vocab_len: usize, rate: f64, rng: &mut impl Rng) -> CorruptedSequence {
    debug_assert!(rate > 0.0 && rate < 1.0);
    let usable: Vec<usize> = (0..tokens.len())
        .filter(|&p| tokens[p] >= NUM_SPECIALS)
        .collect();
    let k = (rate * usable.len() as f64).ceil() as usize;
    let mut out = CorruptedSequence { tokens: tokens.to_vec(), targets: Vec::with_capacity(k) };
    if k == 0 {
        return out;
    }
    let picked: Vec<usize> = sample(rng, usable.len(), k).iter().map(|i| usable[i]).collect();
    let (n_mask, n_random, _) = corruption_shares(k);
    for (i, &pos) in picked.iter().enumerate() {
        let original = out.tokens[pos];
        if i < n_mask {
            out.tokens[pos] = MASK_ID;
        } else if i < n_mask + n_random && vocab_len > NUM_SPECIALS {
            out.tokens[pos] = rng.gen_range(NUM_SPECIALS..vocab_len);
        }
        out.targets.push((pos, original));
    }
    out.targets.sort_unstable();
    out
}

/// Hides ceil(rate · M) mention links; the surface tokens stay in the text.
/// Returns (visible, masked), a partition of the input.
pub fn mask_mentions(mentions: &[Mention], rate: f64, rng: &mut impl Rng) -> (Vec<Mention>, Vec<Mention>) {
    debug_assert!((0.0..1.0).contains(&rate));
    let k = (rate * mentions.len() as f64).ceil() as usize;
    if k == 0 {
        return (mentions.to_vec(), Vec::new());
    }
    let mut hidden = vec![false; mentions.len()];
    for i in sample(rng, mentions.len(), k) {
        hidden[i] = true;
    }
    let mut visible = Vec::with_capacity(mentions.len() - k);
    let mut masked = Vec::with_capacity(k);
    for (i, m) in mentions.iter().enumerate() {
        if hidden[i] {
            masked.push(*m);
        } else {
            visible.push(*m);
        }
    }
    (visible, masked)
}

/// Clips a description to `max_len` tokens (re-terminated with [EOS]) and
/// resolves the span used for its embedding: the first mention if it survives
/// the clip, else the fallback span (1,1).
pub fn description_window(tokens: &[usize], mentions: &[Mention], max_len: usize) -> (Vec<usize>, (usize, usize)) {
    debug_assert!(max_len >= 2);
    let mut out = tokens[..tokens.len().min(max_len)].to_vec();
    if out.len() < tokens.len() {
        *out.last_mut().unwrap() = EOS_ID;
    }
    let span = match mentions.first() {
        Some(m) if m.end + 1 < out.len() => (m.start, m.end),
        _ => (1, 1),
    };
    (out, span)
}

/// Corpus file: one sequence per line, "tokens<TAB>entity:start:end;…".
pub fn save_corpus(corpus: &[AnnotatedSequence], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut body = String::new();
    for seq in corpus {
        body.push_str(&vocab.detokenize(&seq.tokens)?);
        body.push('\t');
        let parts: Vec<String> = seq
            .mentions
            .iter()
            .map(|m| format!("{}:{}:{}", m.entity, m.start, m.end))
            .collect();
        body.push_str(&parts.join(";"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<AnnotatedSequence>> {
    let file = path.display().to_string();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let parse = |msg: String| Error::Parse { file: file.clone(), line: lineno + 1, msg };
        let (text, mention_part) = match line.split_once('\t') {
            Some((a, b)) => (a, b),
            None => (line, ""),
        };
        let tokens = vocab.tokenize(text);
        let mut mentions = Vec::new();
        for triple in mention_part.split(';').filter(|s| !s.is_empty()) {
            let fields: Vec<&str> = triple.split(':').collect();
            if fields.len() != 3 {
                return Err(parse(format!("mention {triple:?} is not entity:start:end")));
            }
            let nums: std::result::Result<Vec<usize>, _> =
                fields.iter().map(|f| f.parse::<usize>()).collect();
            let nums = nums.map_err(|e| parse(format!("mention {triple:?}: {e}")))?;
            mentions.push(Mention { entity: nums[0], start: nums[1], end: nums[2] });
        }
        let seq = AnnotatedSequence { tokens, mentions };
        seq.validate(vocab.len())
            .map_err(|e| parse(format!("invalid sequence: {e}")))?;
        out.push(seq);
    }
    Ok(out)
}
