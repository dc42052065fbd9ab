//! Reference encoders: a two-tower student (mention tower, entity/view
//! tower) and a joint-feature teacher.
//!
//! Each tower is embed -> mean-pool -> two-layer MLP with a tanh hidden
//! layer and a linear output. The teacher embeds both sequences with its own
//! table and scores the pair through interaction features
//! `[mean_m; mean_v; mean_m*mean_v; |mean_m - mean_v|]`, a strictly richer
//! interaction than the student's dot product.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvdError, Result};
use crate::numeric::splitmix64;
use crate::segment::{SeqKind, TokenSeq};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_out: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 16384,
            d_emb: 16,
            d_hid: 32,
            d_out: 16,
            init_scale: 1.0,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 || self.d_emb < 1 || self.d_hid < 1 || self.d_out < 1 {
            return Err(MvdError::Validation(
                "encoder dimensions must be >= 1 (vocab_size >= 6)".into(),
            ));
        }
        if self.init_scale <= 0.0 || !self.init_scale.is_finite() {
            return Err(MvdError::Validation(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// A dense embedding produced by a student tower.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

/// Tensor handles of one embed+MLP tower.
#[derive(Debug, Clone, Copy)]
pub struct TowerIds {
    pub emb: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub const STUDENT_PREFIX: &str = "student.";
pub const TEACHER_PREFIX: &str = "teacher.";

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Seeded initialization: embeddings uniform in `(-init_scale, init_scale)`,
/// weight matrices fan-scaled (Xavier) and multiplied by `init_scale`,
/// biases zero. A flat uniform scale on every tensor either drowns the
/// token signal under the biases or saturates the dot-product scores as the
/// widths grow; fan scaling keeps initial scores O(1) at any dimension.
#[allow(clippy::too_many_arguments)]
fn init_tower(
    store: &mut ParamStore,
    prefix: &str,
    vocab: usize,
    d_in: usize,
    d_emb: usize,
    d_hid: usize,
    d_out: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> TowerIds {
    let xavier = |fan_in: usize, fan_out: usize| scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let emb = store.add(
        &format!("{prefix}emb"),
        vec![vocab, d_emb],
        uniform_init(rng, vocab * d_emb, scale),
    );
    let w1 = store.add(
        &format!("{prefix}w1"),
        vec![d_in, d_hid],
        uniform_init(rng, d_in * d_hid, xavier(d_in, d_hid)),
    );
    let b1 = store.add(&format!("{prefix}b1"), vec![d_hid], vec![0.0; d_hid]);
    let w2 = store.add(
        &format!("{prefix}w2"),
        vec![d_hid, d_out],
        uniform_init(rng, d_hid * d_out, xavier(d_hid, d_out)),
    );
    let b2 = store.add(&format!("{prefix}b2"), vec![d_out], vec![0.0; d_out]);
    TowerIds {
        emb,
        w1,
        b1,
        w2,
        b2,
    }
}

fn bind_tower(store: &ParamStore, prefix: &str) -> Result<TowerIds> {
    let get = |suffix: &str| {
        store
            .by_name(&format!("{prefix}{suffix}"))
            .ok_or_else(|| MvdError::Validation(format!("checkpoint lacks {prefix}{suffix}")))
    };
    Ok(TowerIds {
        emb: get("emb")?,
        w1: get("w1")?,
        b1: get("b1")?,
        w2: get("w2")?,
        b2: get("b2")?,
    })
}

/// The dual-encoder student: independent mention and entity towers.
#[derive(Debug, Clone)]
pub struct Student {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    pub mention: TowerIds,
    pub entity: TowerIds,
}

impl Student {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mention = init_tower(
            &mut store,
            "student.mention.",
            cfg.vocab_size,
            cfg.d_emb,
            cfg.d_emb,
            cfg.d_hid,
            cfg.d_out,
            cfg.init_scale,
            &mut rng,
        );
        let entity = init_tower(
            &mut store,
            "student.entity.",
            cfg.vocab_size,
            cfg.d_emb,
            cfg.d_emb,
            cfg.d_hid,
            cfg.d_out,
            cfg.init_scale,
            &mut rng,
        );
        Ok(Student {
            cfg: *cfg,
            store,
            mention,
            entity,
        })
    }

    /// Rebinds tower handles against a loaded checkpoint, recovering the
    /// dimensions from tensor shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mention = bind_tower(&store, "student.mention.")?;
        let entity = bind_tower(&store, "student.entity.")?;
        let emb = store.tensor(mention.emb);
        let w1 = store.tensor(mention.w1);
        let w2 = store.tensor(mention.w2);
        let cfg = EncoderConfig {
            vocab_size: emb.dims[0],
            d_emb: emb.dims[1],
            d_hid: w1.dims[1],
            d_out: w2.dims[1],
            ..EncoderConfig::default()
        };
        Ok(Student {
            cfg,
            store,
            mention,
            entity,
        })
    }
}

/// The joint-feature teacher.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    pub ids: TowerIds,
}

impl Teacher {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        // Distinct stream from the student's so the two models never share
        // initial values even under the same seed.
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7465616368657221));
        let ids = init_tower(
            &mut store,
            TEACHER_PREFIX,
            cfg.vocab_size,
            4 * cfg.d_emb,
            cfg.d_emb,
            cfg.d_hid,
            1,
            cfg.init_scale,
            &mut rng,
        );
        Ok(Teacher {
            cfg: *cfg,
            store,
            ids,
        })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let ids = bind_tower(&store, TEACHER_PREFIX)?;
        let emb = store.tensor(ids.emb);
        let w1 = store.tensor(ids.w1);
        let cfg = EncoderConfig {
            vocab_size: emb.dims[0],
            d_emb: emb.dims[1],
            d_hid: w1.dims[1],
            d_out: 1,
            ..EncoderConfig::default()
        };
        Ok(Teacher { cfg, store, ids })
    }
}

/// Student and teacher merged into one parameter store for joint training.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    pub mention: TowerIds,
    pub entity: TowerIds,
    pub teacher: TowerIds,
}

impl JointModel {
    pub fn merge(student: Student, teacher: Teacher) -> Result<Self> {
        if student.cfg.vocab_size != teacher.cfg.vocab_size
            || student.cfg.d_emb != teacher.cfg.d_emb
        {
            return Err(MvdError::Validation(format!(
                "student ({}x{}) and teacher ({}x{}) embedding shapes disagree",
                student.cfg.vocab_size,
                student.cfg.d_emb,
                teacher.cfg.vocab_size,
                teacher.cfg.d_emb
            )));
        }
        let mut store = ParamStore::new();
        for t in student.store.tensors() {
            store.add(&t.name, t.dims.clone(), t.data.clone());
        }
        for t in teacher.store.tensors() {
            store.add(&t.name, t.dims.clone(), t.data.clone());
        }
        let mention = bind_tower(&store, "student.mention.")?;
        let entity = bind_tower(&store, "student.entity.")?;
        let teacher_ids = bind_tower(&store, TEACHER_PREFIX)?;
        Ok(JointModel {
            cfg: student.cfg,
            store,
            mention,
            entity,
            teacher: teacher_ids,
        })
    }

    pub fn split(self) -> Result<(Student, Teacher)> {
        let student = Student::from_store(self.store.subset(STUDENT_PREFIX))?;
        let teacher = Teacher::from_store(self.store.subset(TEACHER_PREFIX))?;
        Ok((student, teacher))
    }

    pub fn student_view(&self) -> Result<Student> {
        Student::from_store(self.store.subset(STUDENT_PREFIX))
    }
}

fn tower_forward(store: &ParamStore, ids: &TowerIds, tokens: &[u32]) -> Vec<f64> {
    let pooled = tensor::embed_mean(store.tensor(ids.emb), tokens);
    let hidden = tensor::tanh_vec(&tensor::affine(
        store.tensor(ids.w1),
        store.tensor(ids.b1),
        &pooled,
    ));
    tensor::affine(store.tensor(ids.w2), store.tensor(ids.b2), &hidden)
}

/// Mention embedding: mean of token embeddings through the mention tower.
pub fn encode_mention(student: &Student, seq: &TokenSeq) -> Embedding {
    debug_assert_eq!(seq.kind, SeqKind::Mention);
    Embedding(tower_forward(&student.store, &student.mention, &seq.tokens))
}

/// View embedding through the entity tower.
pub fn encode_view(student: &Student, seq: &TokenSeq) -> Embedding {
    debug_assert_eq!(seq.kind, SeqKind::View);
    Embedding(tower_forward(&student.store, &student.entity, &seq.tokens))
}

fn teacher_score_store(
    store: &ParamStore,
    ids: &TowerIds,
    mention_seq: &TokenSeq,
    view_seq: &TokenSeq,
) -> f64 {
    let um = tensor::embed_mean(store.tensor(ids.emb), &mention_seq.tokens);
    let uv = tensor::embed_mean(store.tensor(ids.emb), &view_seq.tokens);
    let feats = tensor::pair_features(&um, &uv);
    let hidden = tensor::tanh_vec(&tensor::affine(
        store.tensor(ids.w1),
        store.tensor(ids.b1),
        &feats,
    ));
    tensor::affine(store.tensor(ids.w2), store.tensor(ids.b2), &hidden)[0]
}

/// Joint relevance score of a (mention, view) pair.
pub fn teacher_score(teacher: &Teacher, mention_seq: &TokenSeq, view_seq: &TokenSeq) -> f64 {
    teacher_score_store(&teacher.store, &teacher.ids, mention_seq, view_seq)
}

/// Tape-recorded tower forward; gradients flow into the tower's tensors.
pub fn tape_encode(tape: &mut Tape, store: &ParamStore, ids: &TowerIds, tokens: &[u32]) -> NodeId {
    let pooled = tape.embed_mean(store, ids.emb, tokens);
    let pre = tape.affine(store, ids.w1, ids.b1, pooled);
    let hidden = tape.tanh(pre);
    tape.affine(store, ids.w2, ids.b2, hidden)
}

/// Tape-recorded teacher score (scalar node).
pub fn tape_teacher_score(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &TowerIds,
    mention_tokens: &[u32],
    view_tokens: &[u32],
) -> NodeId {
    let um = tape.embed_mean(store, ids.emb, mention_tokens);
    tape_teacher_pair(tape, store, ids, um, view_tokens)
}

/// Teacher score against a pre-pooled mention node; one step scores many
/// views of many candidates against the same mention, so the pooled mention
/// is recorded once and shared.
pub fn tape_teacher_pair(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &TowerIds,
    mention_pooled: NodeId,
    view_tokens: &[u32],
) -> NodeId {
    let uv = tape.embed_mean(store, ids.emb, view_tokens);
    let feats = tape.pair_features(mention_pooled, uv);
    let pre = tape.affine(store, ids.w1, ids.b1, feats);
    let hidden = tape.tanh(pre);
    tape.affine(store, ids.w2, ids.b2, hidden)
}
