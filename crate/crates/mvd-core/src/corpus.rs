//! Corpus data model: entities, mentions, candidate sets, and the synthetic
//! multi-facet generator used for controlled experiments.
//!
//! The interchange format is JSONL, one object per line, UTF-8, no BOM.
//! Unknown keys are ignored on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvdError, Result};

/// A knowledge-base entity: a title plus a free-text description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

/// A mention span with its left/right context and gold entity label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub id: String,
    #[serde(default)]
    pub context_left: String,
    pub mention: String,
    #[serde(default)]
    pub context_right: String,
    pub gold_entity_id: String,
}

/// An ordered candidate list for one mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: String,
    pub entity_ids: Vec<String>,
}

impl CandidateSet {
    /// Checks the structural contract: nonempty, no duplicates, and (when
    /// `gold` is given) the gold entity present exactly once.
    pub fn validate(&self, gold: Option<&str>) -> Result<()> {
        if self.entity_ids.is_empty() {
            return Err(MvdError::Validation(format!(
                "candidate set for mention {} is empty",
                self.mention_id
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.entity_ids {
            if !seen.insert(id.as_str()) {
                return Err(MvdError::Validation(format!(
                    "candidate set for mention {} repeats entity {id:?}",
                    self.mention_id
                )));
            }
        }
        if let Some(g) = gold {
            let hits = self.entity_ids.iter().filter(|id| id.as_str() == g).count();
            if hits != 1 {
                return Err(MvdError::Validation(format!(
                    "candidate set for mention {} contains gold {g:?} {hits} times",
                    self.mention_id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic multi-facet corpus generator.
///
/// Each entity carries `facets_per_entity` facets; every facet owns a
/// disjoint token range of `vocab_size` tokens rendered as `tokNNNN`
/// strings. An entity's description is one sentence per facet; mentions are
/// drawn from exactly one facet's vocabulary and labeled with that entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub facets_per_entity: usize,
    pub mentions_per_facet: usize,
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 1
            || self.facets_per_entity < 1
            || self.mentions_per_facet < 1
            || self.vocab_size < 1
        {
            return Err(MvdError::Validation(
                "synthetic spec counts must all be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(MvdError::Validation(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        Ok(())
    }

    /// Total number of facets across all entities.
    pub fn total_facets(&self) -> usize {
        self.n_entities * self.facets_per_entity
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MvdError::io(path, e))
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| MvdError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads `entities.jsonl`, preserving file order and rejecting duplicate ids.
pub fn load_entities(path: impl AsRef<Path>) -> Result<Vec<EntityRecord>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let records: Vec<EntityRecord> = parse_jsonl(path, &text)?;
    let mut seen = std::collections::HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.id.is_empty() {
            return Err(MvdError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "entity id must be nonempty".into(),
            });
        }
        if rec.title.is_empty() {
            return Err(MvdError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("entity {:?} has an empty title", rec.id),
            });
        }
        if seen.insert(rec.id.clone(), i).is_some() {
            return Err(MvdError::DuplicateId {
                path: path.to_path_buf(),
                line: i + 1,
                id: rec.id.clone(),
            });
        }
    }
    Ok(records)
}

/// Loads `mentions.jsonl` in file order.
pub fn load_mentions(path: impl AsRef<Path>) -> Result<Vec<MentionRecord>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let records: Vec<MentionRecord> = parse_jsonl(path, &text)?;
    for (i, rec) in records.iter().enumerate() {
        if rec.id.is_empty() {
            return Err(MvdError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "mention id must be nonempty".into(),
            });
        }
        if rec.mention.is_empty() {
            return Err(MvdError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("mention {:?} has an empty span", rec.id),
            });
        }
    }
    Ok(records)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut buf, rec).expect("in-memory serialization cannot fail");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| MvdError::io(path, e))?;
    f.write_all(&buf).map_err(|e| MvdError::io(path, e))
}

pub fn save_entities(path: impl AsRef<Path>, records: &[EntityRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

pub fn save_mentions(path: impl AsRef<Path>, records: &[MentionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

/// Checks that every mention's gold entity exists in the entity list.
/// Required before training or evaluation.
pub fn check_gold_coverage(entities: &[EntityRecord], mentions: &[MentionRecord]) -> Result<()> {
    let ids: std::collections::HashSet<&str> = entities.iter().map(|e| e.id.as_str()).collect();
    for m in mentions {
        if !ids.contains(m.gold_entity_id.as_str()) {
            return Err(MvdError::Validation(format!(
                "mention {:?} refers to unknown entity {:?}",
                m.id, m.gold_entity_id
            )));
        }
    }
    Ok(())
}

/// Splits mentions into (train, held_out) by ordinal: every `modulus`-th
/// mention (ordinal % modulus == modulus - 1) is held out. With the synthetic
/// generator's layout this holds out the last mention of every facet.
pub fn holdout_split(
    mentions: &[MentionRecord],
    modulus: usize,
) -> (Vec<MentionRecord>, Vec<MentionRecord>) {
    assert!(modulus >= 2, "holdout modulus must be >= 2");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, m) in mentions.iter().enumerate() {
        if i % modulus == modulus - 1 {
            test.push(m.clone());
        } else {
            train.push(m.clone());
        }
    }
    (train, test)
}

/// Renders the synthetic token with the given global id.
pub fn synth_token(id: usize) -> String {
    format!("tok{id:04}")
}

/// Parses a synthetic token back to its global id. Test oracles use this to
/// recover facet membership exactly.
pub fn parse_synth_token(tok: &str) -> Option<usize> {
    tok.strip_prefix("tok")?.parse().ok()
}

/// Global facet index for entity `i`, facet slot `j`.
pub fn facet_index(spec: &SynthSpec, entity: usize, slot: usize) -> usize {
    entity * spec.facets_per_entity + slot
}

/// Token-id range owned by a facet: `[facet * vocab_size, (facet+1) * vocab_size)`.
pub fn facet_token_range(spec: &SynthSpec, facet: usize) -> std::ops::Range<usize> {
    facet * spec.vocab_size..(facet + 1) * spec.vocab_size
}

const SENT_TOKENS: usize = 10;
const CTX_TOKENS: usize = 8;
const MENTION_TOKENS: usize = 2;

fn draw_tokens(rng: &mut ChaCha8Rng, range: std::ops::Range<usize>, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(range.clone())).collect()
}

fn render_tokens(ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| synth_token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a multi-facet corpus: every entity's description concatenates
/// one sentence per facet, each facet drawing from its own disjoint token
/// range; each mention is drawn from a single facet (contexts perturbed by
/// `noise_rate`) and labeled with that facet's entity. Deterministic in the
/// seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Vec<EntityRecord>, Vec<MentionRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let global_range = 0..spec.total_facets() * spec.vocab_size;

    let mut entities = Vec::with_capacity(spec.n_entities);
    let mut mentions = Vec::new();
    let mut mention_seq = 0usize;

    for i in 0..spec.n_entities {
        let mut sentences = Vec::with_capacity(spec.facets_per_entity);
        for j in 0..spec.facets_per_entity {
            let range = facet_token_range(spec, facet_index(spec, i, j));
            let ids = draw_tokens(&mut rng, range, SENT_TOKENS);
            sentences.push(format!("{}.", render_tokens(&ids)));
        }
        entities.push(EntityRecord {
            id: format!("e{i}"),
            title: format!("entity{i}"),
            description: sentences.join(" "),
        });

        for j in 0..spec.facets_per_entity {
            let range = facet_token_range(spec, facet_index(spec, i, j));
            for _ in 0..spec.mentions_per_facet {
                let mut left = draw_tokens(&mut rng, range.clone(), CTX_TOKENS);
                let span = draw_tokens(&mut rng, range.clone(), MENTION_TOKENS);
                let mut right = draw_tokens(&mut rng, range.clone(), CTX_TOKENS);
                for tok in left.iter_mut().chain(right.iter_mut()) {
                    if rng.random::<f64>() < spec.noise_rate {
                        *tok = rng.random_range(global_range.clone());
                    }
                }
                mentions.push(MentionRecord {
                    id: format!("m{mention_seq}"),
                    context_left: render_tokens(&left),
                    mention: render_tokens(&span),
                    context_right: render_tokens(&right),
                    gold_entity_id: format!("e{i}"),
                });
                mention_seq += 1;
            }
        }
    }
    Ok((entities, mentions))
}
