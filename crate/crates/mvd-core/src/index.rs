//! Immutable store of pre-computed view embeddings with exact and
//! approximate top-k entity search.
//!
//! Scores are raw inner products (f32 storage, f64 accumulation). Entity
//! scores max-pool over that entity's indexed views; ties between entities
//! break toward the lower entity ordinal.

mod hnsw;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_view, Student};
use crate::error::{MvdError, Result};
use crate::segment::ViewSet;

pub const INDEX_MAGIC: &[u8; 4] = b"MVDI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Local,
    Global,
}

impl ViewKind {
    fn to_u8(self) -> u8 {
        match self {
            ViewKind::Local => 0,
            ViewKind::Global => 1,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ViewKind::Local),
            1 => Some(ViewKind::Global),
            _ => None,
        }
    }
}

/// One indexed view embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub entity_ord: u32,
    pub view_ord: u16,
    pub kind: ViewKind,
    pub vector: Vec<f32>,
}

/// Proximity-graph build/search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub max_degree: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            max_degree: 16,
            ef_construction: 100,
            ef_search: 256,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree < 2 || self.ef_construction < 1 || self.ef_search < 1 {
            return Err(MvdError::Validation(
                "index config requires max_degree >= 2, ef_construction >= 1, ef_search >= 1"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    Approximate,
}

/// Which views to embed when building an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewContent {
    LocalOnly,
    GlobalOnly,
    GlobalPlusLocal,
}

/// One retrieved entity: max-pooled score and the view that attained it.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub entity_ord: u32,
    pub entity_id: String,
    pub score: f64,
    pub best_view_ord: u16,
    pub best_view_kind: ViewKind,
}

/// Entities in descending score order; ids are distinct by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
}

impl SearchResult {
    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.hits
            .iter()
            .position(|h| h.entity_id == entity_id)
            .map(|p| p + 1)
    }
}

/// The view-embedding index. Immutable once built; the approximate backend
/// is a deterministic function of the records, so a reload rebuilds the same
/// graph.
#[derive(Debug, Clone)]
pub struct ViewIndex {
    pub dim: usize,
    records: Vec<IndexRecord>,
    entity_ids: Vec<String>,
    cfg: IndexConfig,
    graph: Option<hnsw::Graph>,
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl ViewIndex {
    /// Builds an index from raw records. Validates shapes, finiteness, and
    /// (entity_ord, view_ord, kind) uniqueness.
    pub fn from_records(
        dim: usize,
        entity_ids: Vec<String>,
        records: Vec<IndexRecord>,
        backend: Backend,
        cfg: IndexConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(MvdError::Validation("cannot index zero views".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if r.vector.len() != dim {
                return Err(MvdError::DimMismatch {
                    left: r.vector.len(),
                    right: dim,
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(MvdError::NonFinite {
                    what: format!("index vector for entity ord {}", r.entity_ord),
                });
            }
            if r.entity_ord as usize >= entity_ids.len() {
                return Err(MvdError::Validation(format!(
                    "record entity ord {} exceeds entity table of {}",
                    r.entity_ord,
                    entity_ids.len()
                )));
            }
            if !seen.insert((r.entity_ord, r.view_ord, r.kind.to_u8())) {
                return Err(MvdError::Validation(format!(
                    "duplicate index record ({}, {}, {:?})",
                    r.entity_ord, r.view_ord, r.kind
                )));
            }
        }
        let mut index = ViewIndex {
            dim,
            records,
            entity_ids,
            cfg,
            graph: None,
        };
        if backend == Backend::Approximate {
            index.build_graph();
        }
        Ok(index)
    }

    /// Embeds every entity's views with the student's entity tower and
    /// freezes the index.
    pub fn build(
        student: &Student,
        view_sets: &[ViewSet],
        content: ViewContent,
        backend: Backend,
        cfg: IndexConfig,
    ) -> Result<Self> {
        if view_sets.is_empty() {
            return Err(MvdError::Validation("cannot index zero entities".into()));
        }
        let dim = student.cfg.d_out;
        let per_entity: Vec<Vec<IndexRecord>> = view_sets
            .par_iter()
            .enumerate()
            .map(|(ord, set)| {
                let mut recs = Vec::new();
                if content != ViewContent::GlobalOnly {
                    for (view_ord, view) in set.local_views.iter().enumerate() {
                        recs.push(IndexRecord {
                            entity_ord: ord as u32,
                            view_ord: view_ord as u16,
                            kind: ViewKind::Local,
                            vector: encode_view(student, view).to_f32(),
                        });
                    }
                }
                if content != ViewContent::LocalOnly {
                    recs.push(IndexRecord {
                        entity_ord: ord as u32,
                        view_ord: 0,
                        kind: ViewKind::Global,
                        vector: encode_view(student, &set.global_view).to_f32(),
                    });
                }
                recs
            })
            .collect();
        let records: Vec<IndexRecord> = per_entity.into_iter().flatten().collect();
        let entity_ids = view_sets.iter().map(|s| s.entity_id.clone()).collect();
        Self::from_records(dim, entity_ids, records, backend, cfg)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn entity_id(&self, ord: u32) -> &str {
        &self.entity_ids[ord as usize]
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }

    /// Builds the proximity graph for approximate search. Deterministic in
    /// the record list, so save/load/rebuild reproduces identical results.
    pub fn build_graph(&mut self) {
        if self.graph.is_none() {
            self.graph = Some(hnsw::Graph::build(&self.records, &self.cfg));
        }
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(MvdError::DimMismatch {
                left: query.len(),
                right: self.dim,
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(MvdError::NonFinite {
                what: "query vector".into(),
            });
        }
        if k < 1 {
            return Err(MvdError::Validation("k must be >= 1".into()));
        }
        Ok(())
    }

    fn hits_from_best(&self, best: Vec<Option<(f64, usize)>>, k: usize) -> SearchResult {
        let mut entities: Vec<(u32, f64, usize)> = best
            .into_iter()
            .enumerate()
            .filter_map(|(ord, b)| b.map(|(score, rec)| (ord as u32, score, rec)))
            .collect();
        entities.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entities.truncate(k);
        SearchResult {
            hits: entities
                .into_iter()
                .map(|(ord, score, rec)| SearchHit {
                    entity_ord: ord,
                    entity_id: self.entity_ids[ord as usize].clone(),
                    score,
                    best_view_ord: self.records[rec].view_ord,
                    best_view_kind: self.records[rec].kind,
                })
                .collect(),
        }
    }

    /// Full-scan search: every view scored, entities max-pooled, top-k
    /// returned.
    pub fn search_exact(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        self.check_query(query, k)?;
        let mut best: Vec<Option<(f64, usize)>> = vec![None; self.entity_ids.len()];
        for (i, rec) in self.records.iter().enumerate() {
            let score = dot_f32(query, &rec.vector);
            let slot = &mut best[rec.entity_ord as usize];
            match slot {
                Some((s, _)) if *s >= score => {}
                _ => *slot = Some((score, i)),
            }
        }
        Ok(self.hits_from_best(best, k))
    }

    /// Graph-guided search with beam breadth `ef`. At `ef >= len()` the beam
    /// covers the whole index, so this degenerates to the exact scan and is
    /// implemented that way.
    pub fn search_approx(&self, query: &[f32], k: usize, ef: usize) -> Result<SearchResult> {
        self.check_query(query, k)?;
        let graph = self.graph.as_ref().ok_or_else(|| {
            MvdError::Validation("approximate backend not built for this index".into())
        })?;
        if ef >= self.records.len() {
            return self.search_exact(query, k);
        }
        let found = graph.search(&self.records, query, ef.max(k));
        let mut best: HashMap<u32, (f64, usize)> = HashMap::new();
        for (rec_idx, score) in found {
            let rec = &self.records[rec_idx as usize];
            let slot = best
                .entry(rec.entity_ord)
                .or_insert((score, rec_idx as usize));
            if score > slot.0 || (score == slot.0 && (rec_idx as usize) < slot.1) {
                *slot = (score, rec_idx as usize);
            }
        }
        let mut per_entity: Vec<Option<(f64, usize)>> = vec![None; self.entity_ids.len()];
        for (ord, v) in best {
            per_entity[ord as usize] = Some(v);
        }
        Ok(self.hits_from_best(per_entity, k))
    }

    /// Serializes to the `MVDI` byte format: magic, version u32, dim u32,
    /// record count u64, entity table (count u32, length-prefixed ids), then
    /// per record entity_ord u32, view_ord u16, kind u8, f32 vector. All
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entity_ids.len() as u32).to_le_bytes());
        for id in &self.entity_ids {
            let b = id.as_bytes();
            buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
            buf.extend_from_slice(b);
        }
        for r in &self.records {
            buf.extend_from_slice(&r.entity_ord.to_le_bytes());
            buf.extend_from_slice(&r.view_ord.to_le_bytes());
            buf.push(r.kind.to_u8());
            for &v in &r.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(path: &Path, bytes: &[u8], cfg: IndexConfig) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(MvdError::Truncated {
                    path: path.to_path_buf(),
                    offset: *pos as u64,
                    expected: n as u64,
                    actual: (bytes.len() - *pos) as u64,
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != INDEX_MAGIC {
            return Err(MvdError::BadMagic {
                path: path.to_path_buf(),
                expected: "MVDI".into(),
            });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(MvdError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: INDEX_VERSION,
            });
        }
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let n_records = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let n_entities = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entity_ids = Vec::with_capacity(n_entities);
        for _ in 0..n_entities {
            let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let id =
                String::from_utf8(take(&mut pos, len)?.to_vec()).map_err(|e| MvdError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("entity id is not utf-8: {e}"),
                })?;
            entity_ids.push(id);
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let entity_ord = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let view_ord = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
            let kind_byte = take(&mut pos, 1)?[0];
            let kind = ViewKind::from_u8(kind_byte).ok_or_else(|| MvdError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("unknown view kind byte {kind_byte}"),
            })?;
            let raw = take(&mut pos, 4 * dim)?;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(IndexRecord {
                entity_ord,
                view_ord,
                kind,
                vector,
            });
        }
        if pos != bytes.len() {
            return Err(MvdError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("{} trailing bytes after the last record", bytes.len() - pos),
            });
        }
        Self::from_records(dim, entity_ids, records, Backend::Exact, cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| MvdError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, cfg: IndexConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MvdError::io(path, e))?;
        Self::from_bytes(path, &bytes, cfg)
    }
}
