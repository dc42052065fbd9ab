//! Entity view construction and token-sequence rendering.
//!
//! Entities are split into one global view (title + whole description) and up
//! to `max_view_num` local views (title + one description sentence). Token
//! sequences carry the reserved markers below at fixed ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityRecord, MentionRecord};
use crate::error::{MvdError, Result};
use crate::numeric::fnv1a64;

/// Reserved marker token ids.
pub const TOK_CLS: u32 = 0;
pub const TOK_SEP: u32 = 1;
pub const TOK_MS: u32 = 2;
pub const TOK_ME: u32 = 3;
pub const TOK_ENT: u32 = 4;
/// Number of reserved ids at the bottom of the vocabulary.
pub const RESERVED_TOKENS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqKind {
    Mention,
    View,
    Joint,
}

/// A rendered token sequence. Never empty; length respects the configured
/// maximum for its kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub kind: SeqKind,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-entity views: one global plus 1..=max_view_num local views.
/// `view_texts` holds the source sentence of each local view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub entity_id: String,
    pub global_view: TokenSeq,
    pub local_views: Vec<TokenSeq>,
    pub view_texts: Vec<String>,
    pub global_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub vocab_size: usize,
    pub max_mention_length: usize,
    pub max_view_num: usize,
    pub max_view_length: usize,
    pub global_view_length: usize,
    pub max_cross_length: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            vocab_size: 16384,
            max_mention_length: 128,
            max_view_num: 10,
            max_view_length: 40,
            global_view_length: 512,
            max_cross_length: 168,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(MvdError::Validation(format!(
                "vocab_size must exceed the {RESERVED_TOKENS} reserved ids"
            )));
        }
        for (name, v) in [
            ("max_mention_length", self.max_mention_length),
            ("max_view_length", self.max_view_length),
            ("global_view_length", self.global_view_length),
            ("max_cross_length", self.max_cross_length),
        ] {
            if v < 8 {
                return Err(MvdError::Validation(format!(
                    "{name} must be >= 8, got {v}"
                )));
            }
        }
        if self.max_view_num < 1 {
            return Err(MvdError::Validation("max_view_num must be >= 1".into()));
        }
        Ok(())
    }
}

/// Lowercased alphanumeric word split. Punctuation and whitespace separate
/// words and are not tokens themselves.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Deterministic word-to-id mapping: FNV-1a of the lowercased word modulo the
/// non-reserved vocabulary, offset past the reserved ids.
pub fn token_ids(text: &str, vocab_size: usize) -> Vec<u32> {
    debug_assert!(vocab_size > RESERVED_TOKENS as usize);
    let span = (vocab_size as u64) - RESERVED_TOKENS as u64;
    words(text)
        .iter()
        .map(|w| (fnv1a64(w.as_bytes()) % span) as u32 + RESERVED_TOKENS)
        .collect()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// Rule-based sentence splitter: a run of `.`/`?`/`!` followed by whitespace
/// or end of text closes a sentence; the terminator run stays with its
/// sentence and consecutive terminators never produce empty sentences.
pub fn split_sentences(description: &str) -> Vec<String> {
    let chars: Vec<char> = description.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if is_terminator(chars[i]) {
            let mut j = i + 1;
            while j < chars.len() && is_terminator(chars[j]) {
                j += 1;
            }
            if j >= chars.len() || chars[j].is_whitespace() {
                let sent: String = chars[start..j].iter().collect();
                let trimmed = sent.trim();
                if !trimmed.is_empty() {
                    sentences.push(trimmed.to_string());
                }
                let mut k = j;
                while k < chars.len() && chars[k].is_whitespace() {
                    k += 1;
                }
                start = k;
                i = k;
                continue;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        let sent: String = chars[start..].iter().collect();
        let trimmed = sent.trim();
        if !trimmed.is_empty() {
            sentences.push(trimmed.to_string());
        }
    }
    sentences
}

/// Truncates a marker-terminated sequence to `max` tokens, keeping the final
/// [SEP] in place.
fn truncate_keep_sep(mut toks: Vec<u32>, max: usize) -> Vec<u32> {
    if toks.len() > max {
        toks.truncate(max - 1);
        toks.push(TOK_SEP);
    }
    toks
}

fn view_seq(title_ids: &[u32], body_ids: &[u32], max_len: usize) -> TokenSeq {
    let mut toks = Vec::with_capacity(3 + title_ids.len() + body_ids.len());
    toks.push(TOK_CLS);
    toks.extend_from_slice(title_ids);
    toks.push(TOK_ENT);
    toks.extend_from_slice(body_ids);
    toks.push(TOK_SEP);
    TokenSeq {
        tokens: truncate_keep_sep(toks, max_len),
        kind: SeqKind::View,
    }
}

/// Builds the global view and the local views of an entity.
///
/// Local view t is `[CLS] title [ENT] sentence_t [SEP]`, capped at
/// `max_view_length`; sentences past `max_view_num` are dropped from the
/// tail. An empty description yields a single title-only local view, and a
/// global view equal to it.
pub fn make_views(entity: &EntityRecord, cfg: &SegmentationConfig) -> ViewSet {
    let title_ids = token_ids(&entity.title, cfg.vocab_size);
    let sentences = split_sentences(&entity.description);

    let mut local_views = Vec::new();
    let mut view_texts = Vec::new();
    if sentences.is_empty() {
        local_views.push(view_seq(&title_ids, &[], cfg.max_view_length));
        view_texts.push(String::new());
    } else {
        for sent in sentences.into_iter().take(cfg.max_view_num) {
            let body = token_ids(&sent, cfg.vocab_size);
            local_views.push(view_seq(&title_ids, &body, cfg.max_view_length));
            view_texts.push(sent);
        }
    }

    let desc_ids = token_ids(&entity.description, cfg.vocab_size);
    let global_view = view_seq(&title_ids, &desc_ids, cfg.global_view_length);

    ViewSet {
        entity_id: entity.id.clone(),
        global_view,
        local_views,
        view_texts,
        global_text: entity.description.clone(),
    }
}

/// Renders `[CLS] c_l [Ms] m [Me] c_r [SEP]`, capped at `max_mention_length`.
///
/// The mention span is kept whole whenever it fits; the leftover budget is
/// split evenly between the contexts (left receives the odd token), and a
/// short side donates its unused share to the other. The left context keeps
/// its rightmost tokens, the right context its leftmost. Returns the
/// sequence and whether the mention span itself had to be cut.
pub fn make_mention_seq(mention: &MentionRecord, cfg: &SegmentationConfig) -> (TokenSeq, bool) {
    let mut span = token_ids(&mention.mention, cfg.vocab_size);
    let left = token_ids(&mention.context_left, cfg.vocab_size);
    let right = token_ids(&mention.context_right, cfg.vocab_size);
    let markers = 4usize; // [CLS] [Ms] [Me] [SEP]
    let max = cfg.max_mention_length;

    let mut span_truncated = false;
    if markers + span.len() > max {
        span.truncate(max - markers);
        span_truncated = true;
    }

    let budget = max - markers - span.len();
    let (left_take, right_take) = if left.len() + right.len() <= budget {
        (left.len(), right.len())
    } else {
        let mut left_alloc = budget.div_ceil(2);
        let mut right_alloc = budget / 2;
        if left.len() < left_alloc {
            right_alloc += left_alloc - left.len();
            left_alloc = left.len();
        } else if right.len() < right_alloc {
            left_alloc += right_alloc - right.len();
            right_alloc = right.len();
        }
        (left.len().min(left_alloc), right.len().min(right_alloc))
    };

    let mut toks = Vec::with_capacity(markers + span.len() + left_take + right_take);
    toks.push(TOK_CLS);
    toks.extend_from_slice(&left[left.len() - left_take..]);
    toks.push(TOK_MS);
    toks.extend_from_slice(&span);
    toks.push(TOK_ME);
    toks.extend_from_slice(&right[..right_take]);
    toks.push(TOK_SEP);
    (
        TokenSeq {
            tokens: toks,
            kind: SeqKind::Mention,
        },
        span_truncated,
    )
}

fn strip_frame(seq: &TokenSeq) -> &[u32] {
    let t = &seq.tokens;
    let lo = usize::from(t.first() == Some(&TOK_CLS));
    let hi = t.len() - usize::from(t.len() > lo && t.last() == Some(&TOK_SEP));
    &t[lo..hi]
}

/// Concatenates a mention sequence and a view sequence into
/// `[CLS] mention-body [SEP] view-body [SEP]`, where each body excludes its
/// own [CLS]/[SEP]. Over-long results drop view-body tokens first, then
/// mention-body tokens.
pub fn make_joint_seq(
    mention_seq: &TokenSeq,
    view_seq: &TokenSeq,
    cfg: &SegmentationConfig,
) -> TokenSeq {
    let max = cfg.max_cross_length;
    let mut m_body = strip_frame(mention_seq).to_vec();
    let mut v_body = strip_frame(view_seq).to_vec();
    let overhead = 3usize; // [CLS] [SEP] [SEP]
    if overhead + m_body.len() + v_body.len() > max {
        let v_keep = max.saturating_sub(overhead + m_body.len());
        v_body.truncate(v_keep);
        if overhead + m_body.len() + v_body.len() > max {
            m_body.truncate(max.saturating_sub(overhead));
        }
    }
    let mut toks = Vec::with_capacity(overhead + m_body.len() + v_body.len());
    toks.push(TOK_CLS);
    toks.extend_from_slice(&m_body);
    toks.push(TOK_SEP);
    toks.extend_from_slice(&v_body);
    toks.push(TOK_SEP);
    TokenSeq {
        tokens: toks,
        kind: SeqKind::Joint,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewDumpRecord<'a> {
    entity_id: &'a str,
    view_ord: usize,
    kind: &'a str,
    text: &'a str,
}

/// Writes the optional `views.jsonl` inspection dump: the global view first,
/// then each local view with its source sentence.
pub fn dump_views(path: impl AsRef<Path>, sets: &[ViewSet]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for set in sets {
        let global = ViewDumpRecord {
            entity_id: &set.entity_id,
            view_ord: 0,
            kind: "global",
            text: &set.global_text,
        };
        serde_json::to_writer(&mut buf, &global).expect("serialize");
        buf.push(b'\n');
        for (ord, text) in set.view_texts.iter().enumerate() {
            let rec = ViewDumpRecord {
                entity_id: &set.entity_id,
                view_ord: ord,
                kind: "local",
                text,
            };
            serde_json::to_writer(&mut buf, &rec).expect("serialize");
            buf.push(b'\n');
        }
    }
    std::fs::write(path, buf).map_err(|e| MvdError::io(path, e))
}
