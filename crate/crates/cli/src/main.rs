//! `dynkg` — command-line front end for the dynamic-knowledge engine.
//!
//! State lives under `--data-dir` (default `dynkg_data/`):
//!
//! ```text
//!   store/        append-only log + compacted snapshot of the triplet graph
//!   embed.ckpt    rotational entity/relation embedding tables
//!   model.ckpt    decoder weights (+ lifted vocabulary rows)
//!   vocab.txt     tokenizer vocabulary
//! ```
//!
//! Typical session:
//!
//! ```text
//!   dynkg gen-data --out data/
//!   dynkg ingest --entities data/entities.tsv --facts data/facts_seen.tsv
//!   dynkg train --qa data/qa_seen.tsv
//!   dynkg serve --addr 127.0.0.1:4871
//!   dynkg evaluate --qa data/qa_unseen.tsv --split unseen
//! ```

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dynkg_core::benchx::{
    attend_rows_machine_lines, bench_attention_scaling, bench_generation, bench_update_latency,
    generation_report_machine_line, render_attend_rows, render_generation_report,
    render_update_report, update_report_machine_line, AttendSweepConfig, GenerationBenchConfig,
    UpdateBenchConfig,
};
use dynkg_core::config::Config;
use dynkg_core::data::{load_qa_file, SyntheticConfig, SyntheticDataset};
use dynkg_core::engine::{Engine, QueryFlags, TrainOptions};
use dynkg_core::eval::EvalReport;
use dynkg_core::service::Service;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "dynkg", version, about = "Dynamic knowledge-graph engine")]
struct Cli {
    /// Key=value config file (defaults apply for every key not set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Engine state directory.
    #[arg(long, global = true, default_value = "dynkg_data")]
    data_dir: PathBuf,

    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load entity and/or fact TSV files into the store.
    Ingest {
        /// Entity file: `name<TAB>description` per line.
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Fact files: `head<TAB>relation<TAB>tail<TAB>timestamp_ms` per
        /// line; each file commits as one epoch, in the order given.
        #[arg(long = "facts")]
        facts: Vec<PathBuf>,
    },
    /// Serve the JSON-lines TCP API until interrupted.
    Serve {
        /// Listen address; defaults to 127.0.0.1:<config port>.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Generate a synthetic entity/fact/QA corpus.
    GenData {
        /// Output directory for the TSV files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        entities: usize,
        #[arg(long, default_value_t = 12)]
        relations: usize,
        #[arg(long, default_value_t = 2_000)]
        facts: usize,
        #[arg(long, default_value_t = 400)]
        qa: usize,
        /// Fraction of QA whose gold fact arrives after the seen/unseen split.
        #[arg(long, default_value_t = 0.2)]
        unseen_fraction: f64,
        /// Extra two-hop composition questions.
        #[arg(long, default_value_t = 0)]
        two_hop: usize,
    },
    /// Fit the decoder on a QA file and checkpoint the result.
    Train {
        /// Training questions (`question<TAB>answer<TAB>gold_fact<TAB>ts`).
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Knowledge-selection loss weight (0 disables the auxiliary term).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score the trained model on a QA file.
    Evaluate {
        #[arg(long)]
        qa: PathBuf,
        /// Label for the report.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Disable retrieval and fusion (knowledge-free baseline).
        #[arg(long)]
        no_knowledge: bool,
        /// Attend over all candidates instead of the top-k.
        #[arg(long)]
        dense: bool,
        /// Answer from the graph as of this epoch.
        #[arg(long)]
        static_epoch: Option<u64>,
        /// Also print one machine-readable line per question.
        #[arg(long)]
        machine: bool,
    },
    /// Micro-benchmarks: update commits, attention scaling, generation.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchSuite::All)]
        suite: BenchSuite,
        /// Timed commits for the update benchmark.
        #[arg(long, default_value_t = 1_000)]
        samples: usize,
        /// Store size before timing begins.
        #[arg(long, default_value_t = 10_000)]
        prefill: usize,
        /// Print machine-readable lines instead of tables.
        #[arg(long)]
        machine: bool,
    },
    /// Train and score the four ablation arms on a generated corpus.
    Ablate {
        /// Directory produced by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Print machine-readable lines instead of a table.
        #[arg(long)]
        machine: bool,
    },
    /// Write the live graph back out as ingestable TSV files.
    Export {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        facts: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BenchSuite {
    Update,
    Attend,
    Generate,
    All,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn open_engine(cli: &Cli, cfg: Config) -> Result<Engine> {
    Engine::open(&cli.data_dir, cfg)
        .with_context(|| format!("opening engine at {}", cli.data_dir.display()))
}

fn print_report(report: &EvalReport, machine: bool) {
    println!(
        "split={} questions={} exact_match={:.1} token_f1={:.1}",
        report.split,
        report.records.len(),
        report.exact_match,
        report.token_f1
    );
    if machine {
        print!("{}", report.machine_rows());
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Ingest { entities, facts } => {
            if entities.is_none() && facts.is_empty() {
                bail!("nothing to ingest: pass --entities and/or --facts");
            }
            let engine = open_engine(&cli, cfg)?;
            if let Some(path) = entities {
                let r = engine
                    .ingest_entities_file(path)
                    .with_context(|| format!("ingesting {}", path.display()))?;
                println!(
                    "{}: +{} entities ({} duplicates skipped) in {} ms, epoch {}",
                    path.display(),
                    r.entities_added,
                    r.duplicates,
                    r.elapsed_ms,
                    r.epoch
                );
            }
            for path in facts {
                let r = engine
                    .ingest_facts_file(path)
                    .with_context(|| format!("ingesting {}", path.display()))?;
                println!(
                    "{}: +{} facts, +{} entities, +{} relations ({} duplicates skipped) in {} ms, epoch {}",
                    path.display(),
                    r.facts_added,
                    r.entities_added,
                    r.relations_added,
                    r.duplicates,
                    r.elapsed_ms,
                    r.epoch
                );
            }
            engine.save_artifacts()?;
        }

        Command::Serve { addr } => {
            let addr = addr
                .clone()
                .unwrap_or_else(|| format!("127.0.0.1:{}", cfg.port));
            let engine = Arc::new(open_engine(&cli, cfg)?);
            let info = engine.snapshot_info();
            let service = Service::start(Arc::clone(&engine), &addr)?;
            println!(
                "listening on {} (epoch {}, {} entities, {} live facts, model: {})",
                service.local_addr(),
                info.epoch,
                info.entities,
                info.live_facts,
                if engine.has_model() { "loaded" } else { "absent" }
            );
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }

        Command::GenData {
            out,
            entities,
            relations,
            facts,
            qa,
            unseen_fraction,
            two_hop,
        } => {
            let gen_cfg = SyntheticConfig {
                seed: cfg.seed,
                n_entities: *entities,
                n_relations: *relations,
                n_facts: *facts,
                n_qa: *qa,
                unseen_fraction: *unseen_fraction,
                n_two_hop: *two_hop,
                ..SyntheticConfig::default()
            };
            let data = SyntheticDataset::generate(&gen_cfg)?;
            data.write_files(out)?;
            println!(
                "wrote {}: {} entities, {} facts ({} seen / {} unseen), {} seen QA, {} unseen QA, {} two-hop QA",
                out.display(),
                data.entities.len(),
                data.facts.len(),
                data.n_seen_facts,
                data.facts.len() - data.n_seen_facts,
                data.qa_seen.len(),
                data.qa_unseen.len(),
                data.qa_two_hop.len()
            );
        }

        Command::Train {
            qa,
            epochs,
            batch_size,
            lr,
            alpha,
        } => {
            let engine = open_engine(&cli, cfg)?;
            let pairs = load_qa_file(qa).with_context(|| format!("loading {}", qa.display()))?;
            let mut opts = TrainOptions::from_config(engine.config());
            opts.verbose = true;
            if let Some(e) = epochs {
                opts.epochs = *e;
            }
            if let Some(b) = batch_size {
                opts.batch_size = *b;
            }
            if let Some(l) = lr {
                opts.lr = *l;
            }
            if let Some(a) = alpha {
                opts.alpha = *a;
            }
            let summary = engine.train(&pairs, &opts)?;
            engine.save_artifacts()?;
            let first = summary.epoch_losses.first().map(|o| o.total_loss);
            let last = summary.epoch_losses.last().map(|o| o.total_loss);
            println!(
                "trained on {} examples for {} steps; total loss {:?} → {:?}; checkpoint saved",
                summary.examples, summary.steps, first, last
            );
        }

        Command::Evaluate {
            qa,
            split,
            no_knowledge,
            dense,
            static_epoch,
            machine,
        } => {
            let engine = open_engine(&cli, cfg)?;
            let pairs = load_qa_file(qa).with_context(|| format!("loading {}", qa.display()))?;
            let flags = QueryFlags {
                use_knowledge: !no_knowledge,
                dense_attention: *dense,
                static_kg_epoch: *static_epoch,
                max_new_tokens: None,
            };
            let report = engine.evaluate(&pairs, split, &flags)?;
            print_report(&report, *machine);
        }

        Command::Bench {
            suite,
            samples,
            prefill,
            machine,
        } => {
            if matches!(suite, BenchSuite::Update | BenchSuite::All) {
                let bench_cfg = UpdateBenchConfig {
                    prefill_facts: *prefill,
                    samples: *samples,
                    warmup: (*samples / 10).max(1),
                    seed: cfg.seed,
                };
                let report = bench_update_latency(&bench_cfg)?;
                if *machine {
                    println!("{}", update_report_machine_line(&report));
                } else {
                    print!("{}", render_update_report(&report));
                }
            }
            if matches!(suite, BenchSuite::Attend | BenchSuite::All) {
                let sweep = AttendSweepConfig {
                    k: cfg.k,
                    d_k: cfg.d_k,
                    d_model: cfg.d_model,
                    d_proj: cfg.attn_d_proj,
                    n_heads: cfg.attn_n_heads,
                    seed: cfg.seed,
                    ..AttendSweepConfig::default()
                };
                let rows = bench_attention_scaling(&sweep)?;
                if *machine {
                    for line in attend_rows_machine_lines(&rows, sweep.k) {
                        println!("{line}");
                    }
                } else {
                    print!("{}", render_attend_rows(&rows, sweep.k));
                }
            }
            if matches!(suite, BenchSuite::Generate | BenchSuite::All) {
                let gen_cfg = GenerationBenchConfig {
                    d_model: cfg.d_model,
                    n_layers: cfg.n_layers,
                    seed: cfg.seed,
                    ..GenerationBenchConfig::default()
                };
                let report = bench_generation(&gen_cfg)?;
                if *machine {
                    println!("{}", generation_report_machine_line(&report));
                } else {
                    print!("{}", render_generation_report(&report));
                }
            }
        }

        Command::Ablate {
            data,
            epochs,
            batch_size,
            lr,
            machine,
        } => {
            run_ablation(&cfg, data, *epochs, *batch_size, *lr, *machine)?;
        }

        Command::Export { entities, facts } => {
            let engine = open_engine(&cli, cfg)?;
            engine.export_tsv(entities, facts)?;
            let info = engine.snapshot_info();
            println!(
                "exported {} entities to {} and {} facts to {}",
                info.entities,
                entities.display(),
                info.live_facts,
                facts.display()
            );
        }
    }
    Ok(())
}

/// One ablation arm: how the model is trained and how queries run.
struct Arm {
    name: &'static str,
    /// Train with the auxiliary selection loss (`alpha` from config) or without.
    train_alpha: bool,
    dense: bool,
    /// Pin the graph to its pre-update epoch at query time.
    static_kg: bool,
}

const ARMS: [Arm; 4] = [
    Arm { name: "full", train_alpha: true, dense: false, static_kg: false },
    Arm { name: "dense", train_alpha: true, dense: true, static_kg: false },
    Arm { name: "static-kg", train_alpha: true, dense: false, static_kg: true },
    Arm { name: "alpha-0", train_alpha: false, dense: false, static_kg: false },
];

/// Build two in-memory engines (one trained with the auxiliary loss, one
/// without), feed the unseen facts as post-training updates, and score all
/// four arms on both QA splits.
fn run_ablation(
    cfg: &Config,
    data: &Path,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    machine: bool,
) -> Result<()> {
    let qa_seen = load_qa_file(&data.join("qa_seen.tsv"))?;
    let qa_unseen = load_qa_file(&data.join("qa_unseen.tsv"))?;

    let build = |alpha: f64| -> Result<(Engine, u64)> {
        let engine = Engine::new(cfg.clone());
        engine.ingest_entities_file(&data.join("entities.tsv"))?;
        engine.ingest_facts_file(&data.join("facts_seen.tsv"))?;
        let mut opts = TrainOptions::from_config(cfg);
        opts.alpha = alpha;
        opts.verbose = true;
        if let Some(e) = epochs {
            opts.epochs = e;
        }
        if let Some(b) = batch_size {
            opts.batch_size = b;
        }
        if let Some(l) = lr {
            opts.lr = l;
        }
        eprintln!("training (alpha = {alpha}) ...");
        engine.train(&qa_seen, &opts)?;
        let trained_epoch = engine.snapshot_info().epoch;
        engine.ingest_facts_file(&data.join("facts_unseen.tsv"))?;
        Ok((engine, trained_epoch))
    };

    let (with_aux, e0) = build(cfg.alpha)?;
    let (without_aux, _) = build(0.0)?;

    if !machine {
        println!(
            "{:<10}  {:>8}  {:>8}  {:>10}  {:>10}  {:>12}",
            "arm", "seen EM", "seen F1", "unseen EM", "unseen F1", "gold sel. %"
        );
    }
    for arm in &ARMS {
        let engine = if arm.train_alpha { &with_aux } else { &without_aux };
        let flags = QueryFlags {
            use_knowledge: true,
            dense_attention: arm.dense,
            static_kg_epoch: arm.static_kg.then_some(e0),
            max_new_tokens: None,
        };
        let seen = engine.evaluate(&qa_seen, &format!("{}-seen", arm.name), &flags)?;
        let unseen = engine.evaluate(&qa_unseen, &format!("{}-unseen", arm.name), &flags)?;
        // How often the gold fact survives each stage — separates "never
        // retrieved" from "retrieved but not selected" from "selected but
        // decoded something else".
        let mut cand_hits = 0usize;
        let mut gold_hits = 0usize;
        let mut gold_weight = 0.0f64;
        let mut em_when_selected = 0usize;
        for pair in &qa_unseen {
            if engine
                .candidates_for(&pair.question)?
                .iter()
                .any(|f| f.0 == pair.gold_fact)
            {
                cand_hits += 1;
            }
            let out = engine.query(&pair.question, &flags)?;
            if let Some((_, w)) = out.selected.iter().find(|(f, _)| f.0 == pair.gold_fact) {
                gold_hits += 1;
                gold_weight += w;
                if out.answer.trim() == pair.answer.trim() {
                    em_when_selected += 1;
                }
            }
        }
        let pct = |n: usize, d: usize| 100.0 * n as f64 / d.max(1) as f64;
        let recall = pct(gold_hits, qa_unseen.len());
        if machine {
            println!(
                "ablate arm={} seen_em={:.1} seen_f1={:.1} unseen_em={:.1} unseen_f1={:.1} unseen_gold_selected={:.1}",
                arm.name, seen.exact_match, seen.token_f1, unseen.exact_match, unseen.token_f1, recall
            );
        } else {
            println!(
                "{:<10}  {:>8.1}  {:>8.1}  {:>10.1}  {:>10.1}  {:>12.1}",
                arm.name, seen.exact_match, seen.token_f1, unseen.exact_match, unseen.token_f1, recall
            );
            eprintln!(
                "  [{}] unseen gold: candidates {:.1}%  selected {:.1}%  mean weight {:.2}  exact when selected {:.1}%",
                arm.name,
                pct(cand_hits, qa_unseen.len()),
                recall,
                gold_weight / gold_hits.max(1) as f64,
                pct(em_when_selected, gold_hits),
            );
        }
    }
    Ok(())
}
