//! Relevance scoring: dot-product student scores, joint teacher scores,
//! max-pool entity scores, and per-candidate relevant-view indices.

use crate::encoder::{encode_mention, encode_view, teacher_score, Embedding, Student, Teacher};
use crate::error::{MvdError, Result};
use crate::numeric::argmax;
use crate::segment::{TokenSeq, ViewSet};

/// Per-(candidate, view) score grids plus max-pooled entity scores and the
/// argmax view indices for both models.
///
/// Rows are candidates; each row holds that candidate's view scores in view
/// order. When the global view is included it is appended after the local
/// views in the student grid only; the teacher always scores local views.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub student: Vec<Vec<f64>>,
    pub teacher: Option<Vec<Vec<f64>>>,
    pub i_de: Vec<usize>,
    pub i_ce: Option<Vec<usize>>,
    pub entity_de: Vec<f64>,
    pub entity_ce: Option<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn num_candidates(&self) -> usize {
        self.student.len()
    }

    /// Structural contract used by tests: indices in range and entity scores
    /// equal to the score at their own argmax index.
    pub fn check(&self) -> Result<()> {
        for (i, row) in self.student.iter().enumerate() {
            let idx = self.i_de[i];
            if idx >= row.len() {
                return Err(MvdError::Validation(format!(
                    "i_de[{i}] = {idx} out of range for {} views",
                    row.len()
                )));
            }
            if self.entity_de[i] != row[idx] {
                return Err(MvdError::Validation(format!(
                    "entity_de[{i}] does not equal its argmax view score"
                )));
            }
        }
        if let (Some(grid), Some(i_ce), Some(entity_ce)) =
            (&self.teacher, &self.i_ce, &self.entity_ce)
        {
            for (i, row) in grid.iter().enumerate() {
                let idx = i_ce[i];
                if idx >= row.len() || entity_ce[i] != row[idx] {
                    return Err(MvdError::Validation(format!(
                        "teacher argmax contract violated at candidate {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dot-product relevance between two embeddings.
pub fn student_score(mention: &Embedding, view: &Embedding) -> Result<f64> {
    if mention.dim() != view.dim() {
        return Err(MvdError::DimMismatch {
            left: mention.dim(),
            right: view.dim(),
        });
    }
    Ok(crate::numeric::dot(&mention.0, &view.0))
}

/// Max-pool over view scores: the maximum and its smallest attaining index.
pub fn pool_entity(scores_over_views: &[f64]) -> Result<(f64, usize)> {
    argmax(scores_over_views)
        .ok_or_else(|| MvdError::Validation("pool_entity on an empty view list".into()))
}

/// Scores a mention against every view of every candidate.
///
/// The teacher grid is computed only when a teacher is supplied. During
/// training `include_global` stays false (local views only); at inference it
/// may be true, in which case the global view joins the student grid as the
/// last column.
pub fn score_candidates(
    student: &Student,
    teacher: Option<&Teacher>,
    mention: &TokenSeq,
    candidates: &[ViewSet],
    include_global: bool,
) -> Result<ScoreMatrix> {
    if candidates.is_empty() {
        return Err(MvdError::Validation("no candidates to score".into()));
    }
    let mention_emb = encode_mention(student, mention);

    let mut student_grid = Vec::with_capacity(candidates.len());
    let mut i_de = Vec::with_capacity(candidates.len());
    let mut entity_de = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand.local_views.is_empty() {
            return Err(MvdError::Validation(format!(
                "candidate {} has no local views",
                cand.entity_id
            )));
        }
        let mut row = Vec::with_capacity(cand.local_views.len() + usize::from(include_global));
        for view in &cand.local_views {
            row.push(student_score(&mention_emb, &encode_view(student, view))?);
        }
        if include_global {
            row.push(student_score(
                &mention_emb,
                &encode_view(student, &cand.global_view),
            )?);
        }
        let (best, idx) = pool_entity(&row)?;
        student_grid.push(row);
        i_de.push(idx);
        entity_de.push(best);
    }

    let (teacher_grid, i_ce, entity_ce) = if let Some(t) = teacher {
        let mut grid = Vec::with_capacity(candidates.len());
        let mut idxs = Vec::with_capacity(candidates.len());
        let mut pooled = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let row: Vec<f64> = cand
                .local_views
                .iter()
                .map(|view| teacher_score(t, mention, view))
                .collect();
            let (best, idx) = pool_entity(&row)?;
            grid.push(row);
            idxs.push(idx);
            pooled.push(best);
        }
        (Some(grid), Some(idxs), Some(pooled))
    } else {
        (None, None, None)
    };

    Ok(ScoreMatrix {
        student: student_grid,
        teacher: teacher_grid,
        i_de,
        i_ce,
        entity_ce,
        entity_de,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityRecord;
    use crate::encoder::EncoderConfig;
    use crate::segment::{make_views, SegmentationConfig, SeqKind};
    use proptest::prelude::*;

    #[test]
    fn dot_examples() {
        let a = Embedding(vec![1.0, 0.0]);
        let b = Embedding(vec![0.0, 1.0]);
        assert_eq!(student_score(&a, &b).unwrap(), 0.0);
        let v = Embedding(vec![0.6, 0.8]);
        assert!((student_score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            student_score(&a, &Embedding(vec![1.0])),
            Err(MvdError::DimMismatch { .. })
        ));
    }

    #[test]
    fn dot_matches_naive_loop() {
        let a: Vec<f64> = (0..8).map(|i| (i as f64) * 0.31 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64) * -0.17 + 0.5).collect();
        let mut want = 0.0;
        for i in 0..8 {
            want += a[i] * b[i];
        }
        let got = student_score(&Embedding(a), &Embedding(b)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool_entity(&[0.2, 0.9, 0.5]).unwrap(), (0.9, 1));
        assert_eq!(pool_entity(&[0.7]).unwrap(), (0.7, 0));
        assert_eq!(pool_entity(&[0.4, 0.4]).unwrap(), (0.4, 0));
        assert!(pool_entity(&[]).is_err());
    }

    fn tiny_world() -> (Student, Teacher, TokenSeq, Vec<ViewSet>) {
        let seg = SegmentationConfig {
            vocab_size: 64,
            ..SegmentationConfig::default()
        };
        let enc = EncoderConfig {
            vocab_size: 64,
            d_emb: 4,
            d_hid: 6,
            d_out: 4,
            init_scale: 0.1,
            seed: 9,
        };
        let student = Student::init(&enc).unwrap();
        let teacher = Teacher::init(&enc).unwrap();
        let entities = [
            EntityRecord {
                id: "e0".into(),
                title: "alpha".into(),
                description: "one fact. two fact.".into(),
            },
            EntityRecord {
                id: "e1".into(),
                title: "beta".into(),
                description: "red thing. blue thing.".into(),
            },
            EntityRecord {
                id: "e2".into(),
                title: "gamma".into(),
                description: "lonely sentence.".into(),
            },
        ];
        let views: Vec<ViewSet> = entities.iter().map(|e| make_views(e, &seg)).collect();
        let mention = TokenSeq {
            tokens: vec![0, 2, 10, 3, 1],
            kind: SeqKind::Mention,
        };
        (student, teacher, mention, views)
    }

    #[test]
    fn single_candidate_single_view_is_forced() {
        let (student, teacher, mention, views) = tiny_world();
        let sm = score_candidates(&student, Some(&teacher), &mention, &views[2..3], false).unwrap();
        assert_eq!(sm.i_de, vec![0]);
        assert_eq!(sm.i_ce.as_ref().unwrap(), &vec![0]);
        sm.check().unwrap();
    }

    #[test]
    fn zero_teacher_scores_tie_to_index_zero() {
        let (student, mut teacher, mention, views) = tiny_world();
        for i in 0..teacher.store.tensors().len() {
            teacher
                .store
                .tensor_mut(crate::tensor::TensorId(i))
                .data
                .fill(0.0);
        }
        let sm = score_candidates(&student, Some(&teacher), &mention, &views, false).unwrap();
        for row in sm.teacher.as_ref().unwrap() {
            assert!(row.iter().all(|&s| s == 0.0));
        }
        assert!(sm.i_ce.as_ref().unwrap().iter().all(|&i| i == 0));
    }

    #[test]
    fn grids_match_per_pair_recomputation() {
        let (student, teacher, mention, views) = tiny_world();
        let sm = score_candidates(&student, Some(&teacher), &mention, &views, false).unwrap();
        sm.check().unwrap();
        let m_emb = encode_mention(&student, &mention);
        for (ci, cand) in views.iter().enumerate() {
            for (vi, view) in cand.local_views.iter().enumerate() {
                let want = student_score(&m_emb, &encode_view(&student, view)).unwrap();
                assert!((sm.student[ci][vi] - want).abs() < 1e-12);
                let want_t = teacher_score(&teacher, &mention, view);
                assert!((sm.teacher.as_ref().unwrap()[ci][vi] - want_t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_view_appends_to_student_grid_only() {
        let (student, teacher, mention, views) = tiny_world();
        let sm = score_candidates(&student, Some(&teacher), &mention, &views, true).unwrap();
        for (ci, cand) in views.iter().enumerate() {
            assert_eq!(sm.student[ci].len(), cand.local_views.len() + 1);
            assert_eq!(
                sm.teacher.as_ref().unwrap()[ci].len(),
                cand.local_views.len()
            );
        }
        sm.check().unwrap();
    }

    proptest! {
        #[test]
        fn pool_entity_is_max_and_attained(scores in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            let (best, idx) = pool_entity(&scores).unwrap();
            prop_assert!(scores.iter().all(|&s| best >= s));
            prop_assert_eq!(scores[idx], best);
            prop_assert!(scores[..idx].iter().all(|&s| s < best));
        }

        #[test]
        fn positive_scaling_preserves_argmax(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..10),
            c in 0.1f64..10.0,
        ) {
            let (_, idx) = pool_entity(&scores).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|&s| s * c).collect();
            let (_, idx2) = pool_entity(&scaled).unwrap();
            prop_assert_eq!(idx, idx2);
        }

        #[test]
        fn permutation_maps_argmax(scores in proptest::collection::vec(-5.0f64..5.0, 2..10)) {
            let (best, _) = pool_entity(&scores).unwrap();
            let mut rev = scores.clone();
            rev.reverse();
            let (best2, _) = pool_entity(&rev).unwrap();
            prop_assert_eq!(best, best2);
        }
    }
}
