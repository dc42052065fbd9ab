//! Subcommand definitions and dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mvd_core::config::Config;
use mvd_core::corpus::{
    generate_synthetic, load_entities, load_mentions, save_entities, save_mentions, MentionRecord,
    SynthSpec,
};
use mvd_core::encoder::{encode_mention, encode_view, Student, Teacher};
use mvd_core::error::{MvdError, Result};
use mvd_core::eval::{evaluate_on_index, run_ablation, write_ablation_tsv, AblationVariant};
use mvd_core::index::{Backend, SearchResult, ViewContent, ViewIndex};
use mvd_core::segment::{dump_views, make_mention_seq, make_views};
use mvd_core::tensor::ParamStore;
use mvd_core::train::{mvd_train, prepare, warmup_cross, warmup_dual, TrainStats};

#[derive(Parser)]
#[command(
    name = "mvd",
    version,
    about = "Multi-view distillation engine for dense entity retrieval"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set mvd.alpha=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContentArg {
    Local,
    Global,
    Both,
}

impl From<ContentArg> for ViewContent {
    fn from(c: ContentArg) -> ViewContent {
        match c {
            ContentArg::Local => ViewContent::LocalOnly,
            ContentArg::Global => ViewContent::GlobalOnly,
            ContentArg::Both => ViewContent::GlobalPlusLocal,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Exact,
    Approx,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-facet corpus.
    Synth {
        #[arg(long)]
        entities: usize,
        #[arg(long)]
        facets: usize,
        #[arg(long, default_value_t = 5)]
        mentions_per_facet: usize,
        #[arg(long, default_value_t = 2000)]
        vocab: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory for entities.jsonl and mentions.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split entities into views and dump them for inspection.
    Segment {
        #[arg(long)]
        entities: PathBuf,
        /// Output views.jsonl path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the dual-encoder student with in-batch negatives.
    WarmupDual {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        /// Output student checkpoint (.mvdp).
        #[arg(long)]
        out: PathBuf,
        /// Per-step TSV loss log.
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
    /// Stage 2: train the teacher on static hard negatives from the student.
    WarmupCross {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        /// Warmed-up student checkpoint.
        #[arg(long)]
        student: PathBuf,
        /// Output teacher checkpoint (.mvdp).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
    /// Stage 3: joint multi-view distillation with dynamic hard negatives.
    Distill {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out_student: PathBuf,
        #[arg(long)]
        out_teacher: PathBuf,
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
    /// Dump embeddings as JSONL for inspection.
    Embed {
        /// Student checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Embed entity views.
        #[arg(long, conflicts_with = "mentions")]
        entities: Option<PathBuf>,
        /// Embed mention queries.
        #[arg(long)]
        mentions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed entity views and write the binary index.
    IndexBuild {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        entities: PathBuf,
        /// Output index (.mvdi).
        #[arg(long)]
        out: PathBuf,
        /// Which views to index.
        #[arg(long, value_enum, default_value = "both")]
        content: ContentArg,
    },
    /// Query an index with one mention or a batch file.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One query as `left|mention|right` (pipes required).
        #[arg(long, conflicts_with = "mentions")]
        query: Option<String>,
        /// Batch mentions.jsonl.
        #[arg(long)]
        mentions: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value = "exact")]
        backend: BackendArg,
        /// Beam breadth for approximate search (defaults from config).
        #[arg(long)]
        ef: Option<usize>,
    },
    /// Recall@K over a mention file against an index.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Emit the report as JSON instead of TSV.
        #[arg(long)]
        json: bool,
    },
    /// Run the ablation experiment table.
    Ablate {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        mentions: PathBuf,
        /// Comma-separated variants; each is `full`, a toggle name, or a
        /// `+`-joined toggle combination.
        #[arg(long, default_value = "")]
        variants: String,
        /// Hold out every Nth mention for evaluation.
        #[arg(long, default_value_t = 5)]
        holdout: usize,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_student(path: &Path) -> Result<Student> {
    Student::from_store(ParamStore::load(path)?)
}

fn check_model_matches(cfg: &Config, student: &Student) -> Result<()> {
    if student.cfg.vocab_size != cfg.encoder.vocab_size {
        return Err(MvdError::Validation(format!(
            "checkpoint vocab {} does not match configured vocab {}",
            student.cfg.vocab_size, cfg.encoder.vocab_size
        )));
    }
    Ok(())
}

fn write_train_log(stats: &TrainStats, path: Option<&PathBuf>) -> Result<()> {
    if let Some(p) = path {
        let mut buf = Vec::new();
        stats.write_tsv(&mut buf).expect("in-memory write");
        fs::write(p, buf).map_err(|e| MvdError::io(p, e))?;
    }
    Ok(())
}

fn summarize(stage: &str, stats: &TrainStats) {
    let means = stats.epoch_mean_totals();
    eprintln!(
        "{stage}: {} steps over {} epochs, loss {:.4} -> {:.4}{}",
        stats.steps.len(),
        means.len(),
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN),
        if stats.pool_shortfalls > 0 {
            format!(" ({} pool shortfalls)", stats.pool_shortfalls)
        } else {
            String::new()
        }
    );
}

#[derive(Serialize)]
struct ViewEmbeddingRow<'a> {
    entity_id: &'a str,
    view_ord: usize,
    kind: &'a str,
    vector: Vec<f64>,
}

#[derive(Serialize)]
struct MentionEmbeddingRow<'a> {
    mention_id: &'a str,
    vector: Vec<f64>,
}

fn parse_query(text: &str, id: &str) -> Result<MentionRecord> {
    let parts: Vec<&str> = text.split('|').collect();
    if parts.len() != 3 {
        return Err(MvdError::Validation(
            "query must be left|mention|right (empty sides allowed)".into(),
        ));
    }
    if parts[1].trim().is_empty() {
        return Err(MvdError::Validation("query mention span is empty".into()));
    }
    Ok(MentionRecord {
        id: id.to_string(),
        context_left: parts[0].to_string(),
        mention: parts[1].to_string(),
        context_right: parts[2].to_string(),
        gold_entity_id: String::new(),
    })
}

fn print_hits(label: &str, res: &SearchResult) {
    for (rank, hit) in res.hits.iter().enumerate() {
        println!(
            "{label}\t{}\t{}\t{:.6}\t{}\t{:?}",
            rank + 1,
            hit.entity_id,
            hit.score,
            hit.best_view_ord,
            hit.best_view_kind
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth {
            entities,
            facets,
            mentions_per_facet,
            vocab,
            noise,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                n_entities: entities,
                facets_per_entity: facets,
                mentions_per_facet,
                vocab_size: vocab,
                noise_rate: noise,
                seed,
            };
            let (ents, ments) = generate_synthetic(&spec)?;
            fs::create_dir_all(&out).map_err(|e| MvdError::io(&out, e))?;
            save_entities(out.join("entities.jsonl"), &ents)?;
            save_mentions(out.join("mentions.jsonl"), &ments)?;
            eprintln!(
                "wrote {} entities, {} mentions to {}",
                ents.len(),
                ments.len(),
                out.display()
            );
            Ok(())
        }
        Command::Segment { entities, out } => {
            let ents = load_entities(&entities)?;
            let sets: Vec<_> = ents
                .iter()
                .map(|e| make_views(e, &cfg.segmentation))
                .collect();
            dump_views(&out, &sets)?;
            eprintln!(
                "wrote views for {} entities to {}",
                sets.len(),
                out.display()
            );
            Ok(())
        }
        Command::WarmupDual {
            entities,
            mentions,
            out,
            train_log,
        } => {
            let ents = load_entities(&entities)?;
            let ments = load_mentions(&mentions)?;
            let prep = prepare(&ents, &ments, &cfg.segmentation)?;
            let (student, stats) = warmup_dual(&prep, &cfg.encoder, &cfg.warmup_dual)?;
            student.store.save(&out)?;
            write_train_log(&stats, train_log.as_ref())?;
            summarize("warmup-dual", &stats);
            Ok(())
        }
        Command::WarmupCross {
            entities,
            mentions,
            student,
            out,
            train_log,
        } => {
            let ents = load_entities(&entities)?;
            let ments = load_mentions(&mentions)?;
            let prep = prepare(&ents, &ments, &cfg.segmentation)?;
            let student = load_student(&student)?;
            check_model_matches(&cfg, &student)?;
            let (teacher, stats) =
                warmup_cross(&prep, &student, &cfg.encoder, &cfg.warmup_cross, &cfg.index)?;
            teacher.store.save(&out)?;
            write_train_log(&stats, train_log.as_ref())?;
            summarize("warmup-cross", &stats);
            Ok(())
        }
        Command::Distill {
            entities,
            mentions,
            student,
            teacher,
            out_student,
            out_teacher,
            train_log,
        } => {
            let ents = load_entities(&entities)?;
            let ments = load_mentions(&mentions)?;
            let prep = prepare(&ents, &ments, &cfg.segmentation)?;
            let student = load_student(&student)?;
            check_model_matches(&cfg, &student)?;
            let teacher = Teacher::from_store(ParamStore::load(&teacher)?)?;
            let (student, teacher, stats) =
                mvd_train(&prep, student, teacher, &cfg.mvd, &cfg.index)?;
            student.store.save(&out_student)?;
            teacher.store.save(&out_teacher)?;
            write_train_log(&stats, train_log.as_ref())?;
            summarize("distill", &stats);
            Ok(())
        }
        Command::Embed {
            checkpoint,
            entities,
            mentions,
            out,
        } => {
            let student = load_student(&checkpoint)?;
            check_model_matches(&cfg, &student)?;
            let mut buf = Vec::new();
            match (entities, mentions) {
                (Some(epath), None) => {
                    let ents = load_entities(&epath)?;
                    for e in &ents {
                        let set = make_views(e, &cfg.segmentation);
                        let rows = std::iter::once((0usize, "global", &set.global_view)).chain(
                            set.local_views
                                .iter()
                                .enumerate()
                                .map(|(i, v)| (i, "local", v)),
                        );
                        for (ord, kind, seq) in rows {
                            let row = ViewEmbeddingRow {
                                entity_id: &set.entity_id,
                                view_ord: ord,
                                kind,
                                vector: encode_view(&student, seq).0,
                            };
                            serde_json::to_writer(&mut buf, &row).expect("serialize");
                            buf.push(b'\n');
                        }
                    }
                }
                (None, Some(mpath)) => {
                    let ments = load_mentions(&mpath)?;
                    for m in &ments {
                        let (seq, _) = make_mention_seq(m, &cfg.segmentation);
                        let row = MentionEmbeddingRow {
                            mention_id: &m.id,
                            vector: encode_mention(&student, &seq).0,
                        };
                        serde_json::to_writer(&mut buf, &row).expect("serialize");
                        buf.push(b'\n');
                    }
                }
                _ => {
                    return Err(MvdError::Validation(
                        "embed needs exactly one of --entities or --mentions".into(),
                    ))
                }
            }
            fs::write(&out, buf).map_err(|e| MvdError::io(&out, e))?;
            Ok(())
        }
        Command::IndexBuild {
            checkpoint,
            entities,
            out,
            content,
        } => {
            let student = load_student(&checkpoint)?;
            check_model_matches(&cfg, &student)?;
            let ents = load_entities(&entities)?;
            let sets: Vec<_> = ents
                .iter()
                .map(|e| make_views(e, &cfg.segmentation))
                .collect();
            let index =
                ViewIndex::build(&student, &sets, content.into(), Backend::Exact, cfg.index)?;
            index.save(&out)?;
            eprintln!(
                "indexed {} views over {} entities to {}",
                index.len(),
                index.num_entities(),
                out.display()
            );
            Ok(())
        }
        Command::Search {
            index,
            checkpoint,
            query,
            mentions,
            k,
            backend,
            ef,
        } => {
            let student = load_student(&checkpoint)?;
            check_model_matches(&cfg, &student)?;
            let mut index = ViewIndex::load(&index, cfg.index)?;
            if backend == BackendArg::Approx {
                index.build_graph();
            }
            let ef = ef.unwrap_or(cfg.eval.ef);
            let search = |m: &MentionRecord| -> Result<SearchResult> {
                let (seq, _) = make_mention_seq(m, &cfg.segmentation);
                let q = encode_mention(&student, &seq).to_f32();
                match backend {
                    BackendArg::Exact => index.search_exact(&q, k),
                    BackendArg::Approx => index.search_approx(&q, k, ef),
                }
            };
            println!("query\trank\tentity\tscore\tview\tkind");
            match (query, mentions) {
                (Some(q), None) => {
                    let m = parse_query(&q, "query")?;
                    print_hits("query", &search(&m)?);
                }
                (None, Some(mpath)) => {
                    for m in load_mentions(&mpath)? {
                        print_hits(&m.id, &search(&m)?);
                    }
                }
                _ => {
                    return Err(MvdError::Validation(
                        "search needs exactly one of --query or --mentions".into(),
                    ))
                }
            }
            Ok(())
        }
        Command::Eval {
            index,
            mentions,
            checkpoint,
            json,
        } => {
            let student = load_student(&checkpoint)?;
            check_model_matches(&cfg, &student)?;
            let index = {
                let mut idx = ViewIndex::load(&index, cfg.index)?;
                if cfg.eval.backend == Backend::Approximate {
                    idx.build_graph();
                }
                idx
            };
            let ments = load_mentions(&mentions)?;
            let report = evaluate_on_index(&student, &index, &ments, &cfg)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("serialize")
                );
            } else {
                let mut out = Vec::new();
                report.write_tsv(&mut out).expect("in-memory write");
                std::io::stdout()
                    .write_all(&out)
                    .map_err(|e| MvdError::io("stdout", e))?;
            }
            Ok(())
        }
        Command::Ablate {
            entities,
            mentions,
            variants,
            holdout,
            json,
        } => {
            let ents = load_entities(&entities)?;
            let ments = load_mentions(&mentions)?;
            let parsed: Vec<AblationVariant> = variants
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| AblationVariant::parse(s.trim()))
                .collect::<Result<_>>()?;
            let rows = run_ablation(&ents, &ments, &cfg, holdout, &parsed)?;
            if json {
                let payload: Vec<serde_json::Value> = rows
                    .iter()
                    .map(|(name, report)| serde_json::json!({ "variant": name, "report": report }))
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&payload).expect("serialize")
                );
            } else {
                let mut out = Vec::new();
                write_ablation_tsv(&rows, &mut out).expect("in-memory write");
                std::io::stdout()
                    .write_all(&out)
                    .map_err(|e| MvdError::io("stdout", e))?;
            }
            Ok(())
        }
    }
}
