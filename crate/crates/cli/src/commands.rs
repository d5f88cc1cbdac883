//! Subcommand parsing and dispatch.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use metarec_core::context::Mention;
use metarec_core::corpus::{
    corpus_stats, generate_synthetic, import_redial, load_dialog_corpus, load_metadata_db, resolve_markup,
    write_dialog_corpus, write_metadata_db,
};
use metarec_core::evaluator::{render_ablation, render_clusters, render_report};
use metarec_core::model::hex_digest;
use metarec_core::responder::{generate_response, UNFILLED_MARKER};
use metarec_core::text::{tokenize, PH, REC};
use metarec_core::{Catalog, Model, NNIndex, Response, Speaker, StepLog, SyntheticSpec, Trainer, Turn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::pipeline::{self, write_json, write_text, Data};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "metarec", version, about = "Metadata-aware conversational recommender")]
pub struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allows overwriting existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Prints candidate score tables in chat.
    #[arg(long, global = true)]
    pub trace: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates a synthetic corpus, or imports a ReDial-style file.
    GenCorpus {
        /// Generator settings (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// ReDial-style JSONL file to import instead of generating.
        #[arg(long, conflicts_with = "spec")]
        redial: Option<PathBuf>,
        /// Output directory; the configured data paths when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a model, writing a checkpoint per epoch and a step log.
    Train {
        /// Continues from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Builds the item index from the trained checkpoint.
    Index,
    /// Scores the trained model and writes reports.
    Eval,
    /// Interactive session on stdin; `/reset` clears context, `/quit` exits.
    Chat,
    /// Clustering study, paired ablation or corpus statistics.
    Analyze {
        #[arg(value_enum)]
        mode: AnalyzeMode,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Cluster,
    Ablation,
    Stats,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const INDEX_FILE: &str = "index.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";

/// Console streams of one invocation.
pub struct Io<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(|e| CliError::io(Path::new("<stdout>"), e))
    };
}

/// Report body wrapped with the settings that produced it.
#[derive(Debug, Serialize)]
struct Envelope<'a, T: Serialize> {
    fingerprint: &'a str,
    seed: u64,
    config: serde_json::Value,
    report: T,
}

fn envelope<'a, T: Serialize>(cfg: &RunConfig, fp: &'a str, report: T) -> Envelope<'a, T> {
    Envelope {
        fingerprint: fp,
        seed: cfg.seed,
        config: cfg.canonical(),
        report,
    }
}

/// Resolves the configuration: file values, then flags. Relative paths in a
/// config file are taken relative to the file.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            let base = p.parent().unwrap_or(Path::new(""));
            for path in [&mut c.paths.metadata, &mut c.paths.corpus, &mut c.paths.out_dir] {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
            c
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, io: &mut Io<'_>) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenCorpus { spec, redial, out } => {
            gen_corpus(&cfg, &cli, spec.as_deref(), redial.as_deref(), out.as_deref(), io)
        }
        Command::Train { resume } => train(&cfg, cli.force, *resume, io),
        Command::Index => index(&cfg, io),
        Command::Eval => eval(&cfg, io),
        Command::Chat => chat(&cfg, cli.trace, io),
        Command::Analyze { mode } => analyze(&cfg, *mode, io),
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_digest(h))
}

fn gen_corpus(
    cfg: &RunConfig,
    cli: &Cli,
    spec_path: Option<&Path>,
    redial: Option<&Path>,
    out: Option<&Path>,
    io: &mut Io<'_>,
) -> Result<(), CliError> {
    let (meta_path, corpus_path) = match out {
        Some(d) => (d.join("items.jsonl"), d.join("dialogs.jsonl")),
        None => (cfg.paths.metadata.clone(), cfg.paths.corpus.clone()),
    };
    let manifest_path = corpus_path.with_extension("manifest.json");
    for p in [&meta_path, &corpus_path, &manifest_path] {
        if p.exists() && !cli.force {
            return Err(CliError::Data(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    let (source, (db, dialogs)) = match redial {
        Some(path) => (serde_json::json!({ "redial": path }), import_redial(path)?),
        None => {
            let mut spec = match spec_path {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    toml::from_str::<SyntheticSpec>(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let generated = generate_synthetic(&spec)?;
            (serde_json::json!({ "synthetic": spec }), generated)
        }
    };
    for p in [&meta_path, &corpus_path] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    write_metadata_db(&meta_path, &db)?;
    write_dialog_corpus(&corpus_path, &dialogs)?;
    let loaded_db = load_metadata_db(&meta_path)?;
    let loaded = load_dialog_corpus(&corpus_path, &loaded_db)?;
    if loaded != dialogs || loaded_db != db {
        return Err(CliError::Data("written corpus does not load back identically".into()));
    }
    let manifest = serde_json::json!({
        "source": source,
        "items": { "path": meta_path, "sha256": file_digest(&meta_path)? },
        "dialogs": { "path": corpus_path, "sha256": file_digest(&corpus_path)? },
    });
    write_json(&manifest_path, &manifest)?;
    say!(
        io.out,
        "wrote {} items to {} and {} dialogs to {}",
        db.len(),
        meta_path.display(),
        dialogs.len(),
        corpus_path.display()
    )
}

#[derive(Serialize)]
struct LogLine<'a> {
    fingerprint: &'a str,
    seed: u64,
    #[serde(flatten)]
    step: StepLog,
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        let n = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|b| n > b.0) {
                best = Some((n, p));
            }
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| CliError::Data(format!("no epoch checkpoints in {}", dir.display())))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn train(cfg: &RunConfig, force: bool, resume: bool, io: &mut Io<'_>) -> Result<(), CliError> {
    let fp = cfg.fingerprint()?;
    let data = Data::load(cfg)?;
    let model_path = cfg.out(MODEL_FILE);
    let log_path = cfg.out(LOG_FILE);
    let ckpt_dir = cfg.out(CHECKPOINT_DIR);
    let (mut trainer, mut log) = if resume {
        let path = latest_checkpoint(&ckpt_dir)?;
        let mut t = Trainer::resume(&path)?;
        if t.run["resume_key"].as_str() != Some(cfg.resume_key().as_str()) {
            return Err(CliError::Config(format!(
                "{} was written under a different configuration",
                path.display()
            )));
        }
        t.negative_pool = pipeline::negative_pool(cfg, &data);
        t.cfg.epochs = cfg.train.epochs;
        t.run = pipeline::run_tag(cfg, &fp);
        let step = t.opt.state.step;
        let kept: Vec<String> = fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v["step"].as_u64())
                    .is_some_and(|s| s <= step)
            })
            .map(str::to_string)
            .collect();
        say!(
            io.out,
            "resuming from {} (epoch {}, step {step})",
            path.display(),
            t.epoch
        )?;
        (t, kept)
    } else {
        if (model_path.exists() || ckpt_dir.exists()) && !force {
            return Err(CliError::Data(format!(
                "{} already holds a run; pass --force to overwrite or --resume to continue",
                cfg.paths.out_dir.display()
            )));
        }
        if ckpt_dir.exists() {
            fs::remove_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
        }
        (pipeline::new_trainer(cfg, &fp, &data)?, Vec::new())
    };
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    write_text(&cfg.out("run.toml"), &cfg.to_toml())?;
    say!(
        io.out,
        "training on {} dialogs ({} held out), fingerprint {}",
        data.split.train.len(),
        data.split.test.len(),
        &fp[..16]
    )?;
    pipeline::train_epochs(cfg, &data, &mut trainer, |t, logs| {
        for l in logs {
            let line = LogLine {
                fingerprint: &fp,
                seed: cfg.seed,
                step: *l,
            };
            log.push(serde_json::to_string(&line).map_err(|e| CliError::Data(e.to_string()))?);
        }
        write_text(&log_path, &(log.join("\n") + "\n"))?;
        t.save(&ckpt_dir.join(format!("epoch-{:03}.ckpt", t.epoch)))?;
        say!(
            io.out,
            "epoch {}/{}  select {}  rank {}  lm {:.4}",
            t.epoch,
            cfg.train.epochs,
            fmt_opt(mean(logs.iter().filter_map(|l| l.select))),
            fmt_opt(mean(logs.iter().filter_map(|l| l.rank))),
            mean(logs.iter().map(|l| l.lm)).unwrap_or(0.0)
        )
    })?;
    trainer.save(&model_path)?;
    say!(io.out, "saved {}", model_path.display())
}

fn load_model(cfg: &RunConfig, fp: &str, io: &mut Io<'_>) -> Result<Model, CliError> {
    let path = cfg.out(MODEL_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no trained model at {}; run `metarec train` first",
            path.display()
        )));
    }
    let data = metarec_core::tensor::read_checkpoint(&path)?;
    let model = Model::from_checkpoint(&data)?;
    if data.meta["extra"]["run"]["fingerprint"].as_str() != Some(fp) {
        say!(
            io.err,
            "warning: {} was trained under a different configuration",
            path.display()
        )?;
    }
    Ok(model)
}

fn load_index(cfg: &RunConfig, model: &Model, io: &mut Io<'_>) -> Result<NNIndex, CliError> {
    let path = cfg.out(INDEX_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no item index at {}; run `metarec index` after training",
            path.display()
        )));
    }
    let index = NNIndex::load(&path)?;
    if index.checksum() != model.candidate_checksum() {
        say!(
            io.err,
            "warning: {} is stale (built from a different checkpoint); rerun `metarec index`",
            path.display()
        )?;
    }
    Ok(index)
}

fn index(cfg: &RunConfig, io: &mut Io<'_>) -> Result<(), CliError> {
    let fp = cfg.fingerprint()?;
    let model = load_model(cfg, &fp, io)?;
    let path = cfg.out(INDEX_FILE);
    if path.exists() {
        let old = NNIndex::load(&path)?;
        if old.checksum() != model.candidate_checksum() {
            say!(
                io.err,
                "warning: existing index is stale (checksum mismatch); rebuilding"
            )?;
        }
    }
    let data = Data::load(cfg)?;
    let idx = pipeline::build_index(cfg, &model, &data)?;
    idx.save_with(&path, pipeline::run_tag(cfg, &fp))?;
    let recall = idx
        .measured_recall()
        .map(|r| format!(", measured recall {r:.4}"))
        .unwrap_or_default();
    say!(
        io.out,
        "indexed {} items ({:?}{recall}) into {}",
        idx.len(),
        idx.mode(),
        path.display()
    )
}

fn eval(cfg: &RunConfig, io: &mut Io<'_>) -> Result<(), CliError> {
    let fp = cfg.fingerprint()?;
    let model = load_model(cfg, &fp, io)?;
    let index = load_index(cfg, &model, io)?;
    let data = Data::load(cfg)?;
    for split in &cfg.eval.splits {
        let report = pipeline::evaluate_split(cfg, &fp, &model, &index, &data, split)?;
        let text = render_report(&report);
        write_json(
            &cfg.out(&format!("{REPORT_DIR}/eval-{split}.json")),
            &envelope(cfg, &fp, &report),
        )?;
        write_text(&cfg.out(&format!("{REPORT_DIR}/eval-{split}.txt")), &text)?;
        say!(io.out, "[{split}]\n{text}")?;
    }
    Ok(())
}

fn analyze(cfg: &RunConfig, mode: AnalyzeMode, io: &mut Io<'_>) -> Result<(), CliError> {
    let fp = cfg.fingerprint()?;
    let header = format!("config {fp}  seed {}\n\n", cfg.seed);
    let (name, json, text) = match mode {
        AnalyzeMode::Stats => {
            let data = Data::load(cfg)?;
            let s = corpus_stats(&data.dialogs)?;
            let rows = [
                ("dialogs", s.dialogs.to_string()),
                ("utterances", s.utterances.to_string()),
                ("utterances per dialog", format!("{:.4}", s.avg_turns)),
                ("mentions", s.mentions.to_string()),
                ("words per mention", format!("{:.4}", s.tokens_per_mention)),
                ("distinct-1", format!("{:.4}", s.distinct_1)),
                ("distinct-3", format!("{:.4}", s.distinct_3)),
            ];
            let mut text = header;
            for (k, v) in rows {
                text.push_str(&format!("{k:<24} {v:>10}\n"));
            }
            ("stats", serde_json::to_value(envelope(cfg, &fp, s)), text)
        }
        AnalyzeMode::Cluster => {
            let model = load_model(cfg, &fp, io)?;
            let data = Data::load(cfg)?;
            let reports = pipeline::cluster_reports(cfg, &model, &data)?;
            let text = header + &render_clusters(&reports);
            ("cluster", serde_json::to_value(envelope(cfg, &fp, reports)), text)
        }
        AnalyzeMode::Ablation => {
            let data = Data::load(cfg)?;
            let a = pipeline::run_ablation(cfg, &data)?;
            let text = format!(
                "{header}{}\n[base]\n{}\n[variant]\n{}",
                render_ablation(&a),
                render_report(&a.base),
                render_report(&a.variant)
            );
            ("ablation", serde_json::to_value(envelope(cfg, &fp, a)), text)
        }
    };
    let json = json.map_err(|e| CliError::Data(e.to_string()))?;
    write_json(&cfg.out(&format!("{REPORT_DIR}/{name}.json")), &json)?;
    write_text(&cfg.out(&format!("{REPORT_DIR}/{name}.txt")), &text)?;
    say!(io.out, "{text}")
}

/// The generated reply as a dialog turn, with filled titles as mentions.
pub fn response_turn(resp: &Response, catalog: &Catalog) -> Result<Turn, CliError> {
    let subs: HashMap<usize, Option<_>> = resp
        .trace
        .substitutions
        .iter()
        .map(|s| (s.position, s.item_id))
        .collect();
    let mut text = Vec::new();
    let mut mentions = Vec::new();
    for (i, t) in resp.trace.emitted.iter().enumerate() {
        match t.as_str() {
            REC => {}
            PH => match subs.get(&i).copied().flatten() {
                Some(id) => {
                    let start = text.len();
                    text.extend(tokenize(&catalog.get(id)?.title));
                    mentions.push(Mention {
                        start,
                        end: text.len(),
                        item_id: id,
                    });
                }
                None => text.push(UNFILLED_MARKER.to_string()),
            },
            w => text.push(w.to_string()),
        }
    }
    Ok(Turn {
        speaker: Speaker::Recommender,
        text,
        mentions,
        rec_ids: Vec::new(),
    })
}

fn chat(cfg: &RunConfig, trace: bool, io: &mut Io<'_>) -> Result<(), CliError> {
    let fp = cfg.fingerprint()?;
    let model = load_model(cfg, &fp, io)?;
    let index = load_index(cfg, &model, io)?;
    let data = Data::load(cfg)?;
    let catalog = data.catalog(cfg, &model.vocab)?;
    let cache = model.cache_items(&catalog)?;
    let gen = cfg.generation();
    let mut history: Vec<Turn> = Vec::new();
    say!(
        io.out,
        "metarec chat: type a message, `/reset` to start over, `/quit` to exit"
    )?;
    let mut line = String::new();
    loop {
        line.clear();
        let n = io
            .input
            .read_line(&mut line)
            .map_err(|e| CliError::io(Path::new("<stdin>"), e))?;
        if n == 0 {
            break;
        }
        let msg = line.trim();
        match msg {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                say!(io.out, "(context cleared)")?;
                continue;
            }
            _ => {}
        }
        let (text, mentions) = match resolve_markup(msg, |id| catalog.get(id).ok().map(|m| m.title.clone())) {
            Ok(r) => r,
            Err(e) => {
                say!(io.out, "(could not read message: {e})")?;
                continue;
            }
        };
        if let Some(m) = mentions.iter().find(|m| catalog.get(m.item_id).is_err()) {
            say!(io.out, "(unknown item @{})", m.item_id)?;
            continue;
        }
        history.push(Turn {
            speaker: Speaker::Seeker,
            text,
            mentions,
            rec_ids: Vec::new(),
        });
        let resp = generate_response(&model, &catalog, &cache, &index, &history, &cfg.context, &gen)?;
        say!(io.out, "rec: {}", resp.text)?;
        for id in &resp.recommended {
            say!(io.out, "  recommended: {} (@{id})", catalog.get(*id)?.title)?;
        }
        if trace {
            for ev in &resp.trace.events {
                let mut rows = ev.candidates.clone();
                rows.sort_by(|a, b| b.ranking.total_cmp(&a.ranking).then(a.item_id.cmp(&b.item_id)));
                say!(io.out, "  {:>6}  {:<28} {:>8} {:>10}", "item", "title", "P", "R")?;
                for c in rows {
                    let mark = if c.item_id == ev.chosen { "*" } else { " " };
                    say!(
                        io.out,
                        "{mark} {:>6}  {:<28} {:>8.4} {:>10.4}",
                        c.item_id,
                        catalog.get(c.item_id)?.title,
                        c.selection,
                        c.ranking
                    )?;
                }
            }
        }
        history.push(response_turn(&resp, &catalog)?);
    }
    Ok(())
}
