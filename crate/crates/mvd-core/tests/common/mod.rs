//! Shared test support: random joint-loss instances and the central
//! finite-difference gradient oracle.

use mvd_core::distill::LossWeights;
use mvd_core::encoder::{EncoderConfig, JointModel, Student, Teacher};
use mvd_core::segment::{SeqKind, TokenSeq, ViewSet};
use mvd_core::train::{build_joint_loss, DistillOptions, Prepared};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

/// A self-contained random instance of the joint objective.
pub struct Instance {
    pub joint: JointModel,
    pub prep: Prepared,
    pub cand_ords: Vec<u32>,
    pub weights: LossWeights,
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, kind: SeqKind) -> TokenSeq {
    let len = rng.random_range(2..=6);
    TokenSeq {
        tokens: (0..len)
            .map(|_| rng.random_range(0..vocab as u32))
            .collect(),
        kind,
    }
}

/// Builds a random instance with K <= 4 candidates, <= 3 views per entity,
/// d_out <= 8.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 24usize;
    let enc = EncoderConfig {
        vocab_size: vocab,
        d_emb: rng.random_range(3..=4),
        d_hid: rng.random_range(4..=6),
        d_out: rng.random_range(2..=8),
        init_scale: 1.0,
        seed: seed ^ 0xabcd,
    };
    let k = rng.random_range(2..=4usize);

    let view_sets: Vec<ViewSet> = (0..k)
        .map(|e| {
            let n_views = rng.random_range(1..=3usize);
            ViewSet {
                entity_id: format!("e{e}"),
                global_view: random_seq(&mut rng, vocab, SeqKind::View),
                local_views: (0..n_views)
                    .map(|_| random_seq(&mut rng, vocab, SeqKind::View))
                    .collect(),
                view_texts: vec![String::new(); n_views],
                global_text: String::new(),
            }
        })
        .collect();
    let prep = Prepared {
        entity_ids: view_sets.iter().map(|v| v.entity_id.clone()).collect(),
        view_sets,
        mention_ids: vec!["m0".into()],
        mention_seqs: vec![random_seq(&mut rng, vocab, SeqKind::Mention)],
        gold_ords: vec![0],
        mention_truncations: 0,
    };

    let student = Student::init(&enc).expect("valid config");
    let teacher = Teacher::init(&enc).expect("valid config");
    let joint = JointModel::merge(student, teacher).expect("same dims");
    let weights = LossWeights {
        alpha: rng.random_range(0.1..0.5),
        beta: rng.random_range(0.05..0.3),
    };
    Instance {
        joint,
        prep,
        cand_ords: (0..k as u32).collect(),
        weights,
    }
}

#[allow(clippy::needless_range_loop)]
fn mean_embedding(inst: &Instance, table: &str, tokens: &[u32]) -> Vec<f64> {
    let store = &inst.joint.store;
    let t = store.tensor(store.by_name(table).expect("tensor"));
    let d = t.dims[1];
    let mut out = vec![0.0; d];
    for &tok in tokens {
        for j in 0..d {
            out[j] += t.data[tok as usize * d + j];
        }
    }
    out.iter().map(|v| v / tokens.len() as f64).collect()
}

/// Rejects instances whose loss sits within `margin` of a non-smooth point:
/// an argmax view-selection tie in either model, or a kink of the teacher's
/// |difference| feature. Central differences straddle such points and
/// measure nothing comparable to the branch derivative.
pub fn is_smooth_at(inst: &Instance, margin: f64) -> bool {
    // Argmax gaps, both models, via the value-level scorer.
    let student = inst.joint.student_view().expect("student binds");
    let teacher = Teacher::from_store(inst.joint.store.subset("teacher.")).expect("teacher binds");
    let sm = mvd_core::scoring::score_candidates(
        &student,
        Some(&teacher),
        &inst.prep.mention_seqs[0],
        &inst.prep.view_sets,
        false,
    )
    .expect("scores");
    let rows = std::iter::empty()
        .chain(sm.student.iter())
        .chain(sm.teacher.as_ref().expect("teacher grid").iter());
    for row in rows {
        if row.len() < 2 {
            continue;
        }
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] < margin {
            return false;
        }
    }

    // |mean_m - mean_v| kinks in the teacher features.
    let um = mean_embedding(inst, "teacher.emb", &inst.prep.mention_seqs[0].tokens);
    for set in &inst.prep.view_sets {
        for view in &set.local_views {
            let uv = mean_embedding(inst, "teacher.emb", &view.tokens);
            if um.iter().zip(&uv).any(|(a, b)| (a - b).abs() < margin) {
                return false;
            }
        }
    }
    true
}

/// The loss value with view selections frozen, as a function of parameters.
fn loss_at(inst: &Instance, i_de: &[usize], i_ce: &[usize]) -> f64 {
    build_joint_loss(
        &inst.joint,
        &inst.prep,
        0,
        &inst.cand_ords,
        &inst.weights,
        DistillOptions::default(),
        Some((i_de, i_ce)),
    )
    .expect("loss builds")
    .breakdown
    .total
}

/// Backprop vs central finite differences over every parameter of every
/// tensor. Returns the worst relative error observed.
pub fn max_fd_relative_error(inst: &mut Instance) -> f64 {
    let graph = build_joint_loss(
        &inst.joint,
        &inst.prep,
        0,
        &inst.cand_ords,
        &inst.weights,
        DistillOptions::default(),
        None,
    )
    .expect("loss builds");
    let i_de = graph.i_de.clone();
    let i_ce = graph.i_ce.clone();
    graph
        .tape
        .backward(&mut inst.joint.store, graph.root)
        .expect("finite forward");

    let names: Vec<String> = inst
        .joint
        .store
        .tensors()
        .iter()
        .map(|t| t.name.clone())
        .collect();
    let mut worst = 0.0f64;
    for name in names {
        let id = inst.joint.store.by_name(&name).expect("known tensor");
        let n = inst.joint.store.tensor(id).numel();
        for i in 0..n {
            let analytic = inst.joint.store.tensor(id).grad[i];
            let orig = inst.joint.store.tensor(id).data[i];
            inst.joint.store.tensor_mut(id).data[i] = orig + FD_STEP;
            let plus = loss_at(inst, &i_de, &i_ce);
            inst.joint.store.tensor_mut(id).data[i] = orig - FD_STEP;
            let minus = loss_at(inst, &i_de, &i_ce);
            inst.joint.store.tensor_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Yields `count` smooth random instances, counting rejections.
pub fn smooth_instances(count: usize, start_seed: u64) -> Vec<Instance> {
    let mut out = Vec::with_capacity(count);
    let mut seed = start_seed;
    let mut rejected = 0;
    while out.len() < count {
        let inst = random_instance(seed);
        seed += 1;
        if is_smooth_at(&inst, 10.0 * FD_STEP) {
            out.push(inst);
        } else {
            rejected += 1;
        }
        assert!(
            rejected < count * 20,
            "rejection sampling runaway: {rejected} rejects for {} accepts",
            out.len()
        );
    }
    out
}
