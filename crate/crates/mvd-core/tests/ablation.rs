//! Ablation-runner behavior on a micro corpus: fast, structural checks.

use mvd_core::config::Config;
use mvd_core::corpus::{generate_synthetic, SynthSpec};
use mvd_core::eval::{run_ablation, AblationVariant};

fn micro_setup() -> (
    Vec<mvd_core::EntityRecord>,
    Vec<mvd_core::MentionRecord>,
    Config,
) {
    let (entities, mentions) = generate_synthetic(&SynthSpec {
        n_entities: 10,
        facets_per_entity: 2,
        mentions_per_facet: 5,
        vocab_size: 25,
        noise_rate: 0.05,
        seed: 5,
    })
    .unwrap();
    let mut cfg = Config::default();
    cfg.segmentation.vocab_size = 1024;
    cfg.encoder.vocab_size = 1024;
    cfg.encoder.d_emb = 16;
    cfg.encoder.d_hid = 32;
    cfg.encoder.d_out = 16;
    cfg.warmup_dual.epochs = 20;
    cfg.warmup_dual.batch_size = 16;
    cfg.warmup_dual.learning_rate = 0.3;
    cfg.warmup_cross.epochs = 4;
    cfg.warmup_cross.learning_rate = 0.5;
    cfg.warmup_cross.negatives_k = 5;
    cfg.warmup_cross.retrieve_n = 5;
    cfg.mvd.epochs = 4;
    cfg.mvd.learning_rate = 0.05;
    cfg.mvd.negatives_k = 5;
    cfg.mvd.retrieve_n = 5;
    cfg.eval.ks = vec![1, 2, 4, 8];
    (entities, mentions, cfg)
}

#[test]
fn empty_toggle_set_runs_full_only() {
    let (entities, mentions, cfg) = micro_setup();
    let rows = run_ablation(&entities, &mentions, &cfg, 5, &[]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "full");
    assert_eq!(rows[0].1.mention_count, mentions.len() / 5);
}

#[test]
fn view_content_toggles_share_the_full_checkpoint() {
    // Single-facet entities: the global view carries the same uniform
    // information as the lone local view, the regime where indexing it is
    // pure upside.
    let (entities, mentions) = generate_synthetic(&SynthSpec {
        n_entities: 10,
        facets_per_entity: 1,
        mentions_per_facet: 5,
        vocab_size: 25,
        noise_rate: 0.05,
        seed: 5,
    })
    .unwrap();
    let (_, _, cfg) = micro_setup();
    let variants = [
        AblationVariant::parse("views_local_only").unwrap(),
        AblationVariant::parse("views_global_plus_local").unwrap(),
    ];
    let rows = run_ablation(&entities, &mentions, &cfg, 5, &variants).unwrap();
    assert_eq!(rows.len(), 3);
    let by_name: std::collections::HashMap<&str, &mvd_core::EvalReport> =
        rows.iter().map(|(n, r)| (n.as_str(), r)).collect();

    // Same checkpoint, local-only index: identical to the full row (the fair
    // ablation protocol also evaluates full on local views).
    let full = by_name["full"];
    let local = by_name["views_local_only"];
    assert_eq!(full.recalls, local.recalls);

    // A superset index can only improve recall at every cutoff.
    let both = by_name["views_global_plus_local"];
    for (b, l) in both.recalls.iter().zip(&local.recalls) {
        assert!(b >= l, "global+local recall {b} below local-only {l}");
    }
}

#[test]
fn strategy_toggles_produce_distinct_models() {
    let (entities, mentions, cfg) = micro_setup();
    let variants = [
        AblationVariant::parse("freeze_teacher+static_negatives").unwrap(),
        AblationVariant::parse("no_multiview_teacher").unwrap(),
        AblationVariant::parse("no_relevant_view_alignment").unwrap(),
    ];
    let rows = run_ablation(&entities, &mentions, &cfg, 5, &variants).unwrap();
    assert_eq!(rows.len(), 4);
    for (_, rep) in &rows {
        assert!(rep.recalls.windows(2).all(|w| w[0] <= w[1]));
        assert!(rep.recalls.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}
