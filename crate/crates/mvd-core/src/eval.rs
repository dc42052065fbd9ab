//! Recall@K evaluation and the ablation experiment runner.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::corpus::{holdout_split, EntityRecord, MentionRecord};
use crate::encoder::{encode_mention, Student, Teacher};
use crate::error::{MvdError, Result};
use crate::index::{Backend, SearchResult, ViewContent, ViewIndex};
use crate::segment::make_mention_seq;
use crate::train::{
    mvd_train_with, prepare, warmup_cross, warmup_dual, DistillMode, DistillOptions, Prepared,
    RefreshInterval, TrainConfig,
};

/// Retrieval quality report: recall at each cutoff plus run metadata.
/// Wall-clock timings are measurement metadata and excluded from the
/// deterministic byte projection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub mention_count: usize,
    pub config_fingerprint: String,
    pub timings_ms: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Deterministic content: everything except wall-clock timings.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.config_fingerprint.as_bytes());
        out.extend_from_slice(&(self.mention_count as u64).to_le_bytes());
        for (&k, &r) in self.ks.iter().zip(&self.recalls) {
            out.extend_from_slice(&(k as u64).to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.recalls[i])
    }

    /// Two-column TSV: metric, value.
    pub fn write_tsv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "metric\tvalue")?;
        for (&k, &r) in self.ks.iter().zip(&self.recalls) {
            writeln!(w, "recall@{k}\t{r:.6}")?;
        }
        writeln!(w, "mentions\t{}", self.mention_count)?;
        writeln!(w, "config\t{}", self.config_fingerprint)?;
        for (name, ms) in &self.timings_ms {
            writeln!(w, "time_ms_{name}\t{ms:.1}")?;
        }
        Ok(())
    }
}

/// Fraction of mentions whose gold entity appears in the top-K, per cutoff.
/// Results and golds are aligned by position.
pub fn recall_at_k(
    results: &[SearchResult],
    golds: &[String],
    k_values: &[usize],
) -> Result<EvalReport> {
    if results.len() != golds.len() {
        return Err(MvdError::Validation(format!(
            "{} search results for {} mentions",
            results.len(),
            golds.len()
        )));
    }
    if results.is_empty() {
        return Err(MvdError::Validation("no mentions to evaluate".into()));
    }
    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(MvdError::Validation("recall cutoffs must be >= 1".into()));
    }
    let ranks: Vec<Option<usize>> = results
        .iter()
        .zip(golds)
        .map(|(res, gold)| res.rank_of(gold))
        .collect();
    let recalls: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let hit = ranks
                .iter()
                .filter(|r| matches!(r, Some(rk) if *rk <= k))
                .count();
            hit as f64 / results.len() as f64
        })
        .collect();
    debug_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
    Ok(EvalReport {
        ks,
        recalls,
        mention_count: results.len(),
        config_fingerprint: String::new(),
        timings_ms: BTreeMap::new(),
    })
}

/// Searches the index for every mention and scores recall, timing the
/// query and scoring phases.
pub fn evaluate_on_index(
    student: &Student,
    index: &ViewIndex,
    mentions: &[MentionRecord],
    cfg: &Config,
) -> Result<EvalReport> {
    let max_k = *cfg.eval.ks.iter().max().unwrap_or(&64);
    let start = Instant::now();
    let results: Result<Vec<SearchResult>> = mentions
        .par_iter()
        .map(|m| {
            let (seq, _) = make_mention_seq(m, &cfg.segmentation);
            let query = encode_mention(student, &seq).to_f32();
            match cfg.eval.backend {
                Backend::Exact => index.search_exact(&query, max_k),
                Backend::Approximate => index.search_approx(&query, max_k, cfg.eval.ef),
            }
        })
        .collect();
    let results = results?;
    let search_ms = start.elapsed().as_secs_f64() * 1e3;
    let golds: Vec<String> = mentions.iter().map(|m| m.gold_entity_id.clone()).collect();
    let mut report = recall_at_k(&results, &golds, &cfg.eval.ks)?;
    report.config_fingerprint = cfg.fingerprint();
    report.timings_ms.insert("search".into(), search_ms);
    Ok(report)
}

/// Experiment toggles for the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationToggle {
    NoMultiviewTeacher,
    NoRelevantViewAlignment,
    NoSelfAlignment,
    NoCrossAlignment,
    EntityLevelOnly,
    FreezeTeacher,
    StaticNegatives,
    ViewsGlobalOnly,
    ViewsLocalOnly,
    ViewsGlobalPlusLocal,
}

impl FromStr for AblationToggle {
    type Err = MvdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_multiview_teacher" => Ok(Self::NoMultiviewTeacher),
            "no_relevant_view_alignment" => Ok(Self::NoRelevantViewAlignment),
            "no_self_alignment" => Ok(Self::NoSelfAlignment),
            "no_cross_alignment" => Ok(Self::NoCrossAlignment),
            "entity_level_only" => Ok(Self::EntityLevelOnly),
            "freeze_teacher" => Ok(Self::FreezeTeacher),
            "static_negatives" => Ok(Self::StaticNegatives),
            "views_global_only" => Ok(Self::ViewsGlobalOnly),
            "views_local_only" => Ok(Self::ViewsLocalOnly),
            "views_global_plus_local" => Ok(Self::ViewsGlobalPlusLocal),
            other => Err(MvdError::UnknownToggle(other.to_string())),
        }
    }
}

impl AblationToggle {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NoMultiviewTeacher => "no_multiview_teacher",
            Self::NoRelevantViewAlignment => "no_relevant_view_alignment",
            Self::NoSelfAlignment => "no_self_alignment",
            Self::NoCrossAlignment => "no_cross_alignment",
            Self::EntityLevelOnly => "entity_level_only",
            Self::FreezeTeacher => "freeze_teacher",
            Self::StaticNegatives => "static_negatives",
            Self::ViewsGlobalOnly => "views_global_only",
            Self::ViewsLocalOnly => "views_local_only",
            Self::ViewsGlobalPlusLocal => "views_global_plus_local",
        }
    }

    fn is_view_toggle(&self) -> bool {
        matches!(
            self,
            Self::ViewsGlobalOnly | Self::ViewsLocalOnly | Self::ViewsGlobalPlusLocal
        )
    }
}

/// A named toggle combination, e.g. `freeze_teacher+static_negatives`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: String,
    pub toggles: Vec<AblationToggle>,
}

impl AblationVariant {
    pub fn full() -> Self {
        AblationVariant {
            name: "full".into(),
            toggles: Vec::new(),
        }
    }

    /// Parses `full` or a `+`-joined toggle list.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "full" {
            return Ok(Self::full());
        }
        let toggles: Result<Vec<AblationToggle>> =
            text.split('+').map(AblationToggle::from_str).collect();
        Ok(AblationVariant {
            name: text.to_string(),
            toggles: toggles?,
        })
    }
}

fn variant_plan(
    base: &TrainConfig,
    toggles: &[AblationToggle],
) -> (TrainConfig, DistillOptions, ViewContent) {
    let mut cfg = *base;
    let mut opts = DistillOptions::default();
    // The fair-comparison protocol evaluates ablations on local views only.
    let mut content = ViewContent::LocalOnly;
    for t in toggles {
        match t {
            AblationToggle::NoMultiviewTeacher => opts.mode = DistillMode::CoarseTeacher,
            AblationToggle::NoRelevantViewAlignment => {
                opts.align_student_at_teacher_view = false;
            }
            AblationToggle::NoSelfAlignment => cfg.beta = 0.0,
            AblationToggle::NoCrossAlignment => cfg.alpha = 0.0,
            AblationToggle::EntityLevelOnly => opts.mode = DistillMode::EntityLevelOnly,
            AblationToggle::FreezeTeacher => cfg.freeze_teacher = true,
            AblationToggle::StaticNegatives => cfg.refresh_interval = RefreshInterval::Never,
            AblationToggle::ViewsGlobalOnly => content = ViewContent::GlobalOnly,
            AblationToggle::ViewsLocalOnly => content = ViewContent::LocalOnly,
            AblationToggle::ViewsGlobalPlusLocal => content = ViewContent::GlobalPlusLocal,
        }
    }
    (cfg, opts, content)
}

/// Warmup artifacts shared by every ablation variant.
pub struct WarmStart {
    pub prep: Prepared,
    pub student: Student,
    pub teacher: Teacher,
}

/// Runs warmup once on the train split.
pub fn warm_start(
    entities: &[EntityRecord],
    train: &[MentionRecord],
    cfg: &Config,
) -> Result<WarmStart> {
    let prep = prepare(entities, train, &cfg.segmentation)?;
    let (student, _) = warmup_dual(&prep, &cfg.encoder, &cfg.warmup_dual)?;
    let (teacher, _) = warmup_cross(&prep, &student, &cfg.encoder, &cfg.warmup_cross, &cfg.index)?;
    Ok(WarmStart {
        prep,
        student,
        teacher,
    })
}

/// Runs the pipeline once per variant with a shared seed and warmup, and
/// evaluates each on the held-out split. The `full` variant always runs
/// first; pure view-content variants reuse its checkpoint and re-index.
pub fn run_ablation(
    entities: &[EntityRecord],
    mentions: &[MentionRecord],
    cfg: &Config,
    holdout_modulus: usize,
    variants: &[AblationVariant],
) -> Result<Vec<(String, EvalReport)>> {
    cfg.validate()?;
    let (train, test) = holdout_split(mentions, holdout_modulus);
    if train.is_empty() || test.is_empty() {
        return Err(MvdError::Validation(
            "holdout split left an empty train or test set".into(),
        ));
    }

    let warm = warm_start(entities, &train, cfg)?;

    let mut plan: Vec<AblationVariant> = vec![AblationVariant::full()];
    for v in variants {
        if v.name != "full" {
            plan.push(v.clone());
        }
    }

    let mut full_student: Option<Student> = None;
    let mut out = Vec::with_capacity(plan.len());
    for variant in &plan {
        let (train_cfg, opts, content) = variant_plan(&cfg.mvd, &variant.toggles);
        let only_views = !variant.toggles.is_empty()
            && variant.toggles.iter().all(AblationToggle::is_view_toggle);

        let t_train = Instant::now();
        let student = if variant.name == "full" || only_views {
            if full_student.is_none() {
                let (s, _, _) = mvd_train_with(
                    &warm.prep,
                    warm.student.clone(),
                    warm.teacher.clone(),
                    &cfg.mvd,
                    &cfg.index,
                    DistillOptions::default(),
                    &mut |_| {},
                )?;
                full_student = Some(s);
            }
            full_student.clone().expect("full variant trained")
        } else {
            let (s, _, _) = mvd_train_with(
                &warm.prep,
                warm.student.clone(),
                warm.teacher.clone(),
                &train_cfg,
                &cfg.index,
                opts,
                &mut |_| {},
            )?;
            s
        };
        let train_ms = t_train.elapsed().as_secs_f64() * 1e3;

        let t_index = Instant::now();
        let index = ViewIndex::build(
            &student,
            &warm.prep.view_sets,
            content,
            Backend::Exact,
            cfg.index,
        )?;
        let index_ms = t_index.elapsed().as_secs_f64() * 1e3;

        let mut report = evaluate_on_index(&student, &index, &test, cfg)?;
        report.timings_ms.insert("train".into(), train_ms);
        report.timings_ms.insert("index".into(), index_ms);
        out.push((variant.name.clone(), report));
    }
    Ok(out)
}

/// Renders the comparison table: one row per variant, one column per cutoff.
pub fn write_ablation_tsv(
    rows: &[(String, EvalReport)],
    w: &mut impl std::io::Write,
) -> std::io::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    write!(w, "variant")?;
    for k in &rows[0].1.ks {
        write!(w, "\tR@{k}")?;
    }
    writeln!(w)?;
    for (name, report) in rows {
        write!(w, "{name}")?;
        for r in &report.recalls {
            write!(w, "\t{r:.4}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
