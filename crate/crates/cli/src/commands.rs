//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mlmlab::analysis::{
    complexity_correlation, correlation_csv, cost_benefit_csv, cost_benefit_table, emit_figure_data, markdown_summary,
    results_from_reports, write_figure_data, ComplexityAxis,
};
use mlmlab::bpe::{train_bpe, Vocab};
use mlmlab::corpus::{
    gen_probe_task, gen_synthetic_corpus, load_classification_tsv, load_corpus, load_span_tsv, write_corpus, write_probe_tsv,
    SyntheticCorpusSpec, SyntheticTaskSpec, DEFAULT_INVENTORY,
};
use mlmlab::encoder::EncoderConfig;
use mlmlab::finetune::{finetune_classifier, finetune_span, read_metric_csv, write_metric_csv, FinetuneConfig, MetricReport, METRIC_CSV_HEADER};
use mlmlab::flops::{flops_table, read_flops_csv, reference_num_classes, write_flops_csv, FlopsPreset, FlopsRow, HeadScope};
use mlmlab::objective::{build_label_map, count_classes_sweep, Direction, ObjectiveSpec};
use mlmlab::trainer::{pretrain_with, PretrainConfig};

use crate::settings::{manifest_beside, write_manifest, Settings};
use crate::{AxisArg, Command, FamilyArg, FlopsPresetArg, SweepCmd, SynthCmd, TaskKindArg, TokenizeCmd};

/// Characters-class objectives have 26 letters + digit + punctuation + other.
const CHAR_CLASSES: usize = 29;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tokenize(TokenizeCmd::Train { corpus, vocab_size, out }) => tokenize_train(&corpus, vocab_size, &out),
        Command::Labelmap { vocab, objective, out } => labelmap(&vocab, &objective, &out),
        Command::Sweep(SweepCmd::Classes { vocab, n, out }) => sweep_classes(&vocab, &n, &out),
        Command::Pretrain {
            config,
            objective,
            corpus,
            vocab,
            out,
            overrides,
        } => {
            let mut s = Settings::load(config.as_deref(), &overrides, PRETRAIN_KEYS)?;
            s.flag("objective", objective);
            s.flag("corpus", corpus.map(|p| p.display().to_string()));
            s.flag("vocab", vocab.map(|p| p.display().to_string()));
            s.flag("out", out.map(|p| p.display().to_string()));
            pretrain(&s)
        }
        Command::Finetune {
            checkpoint,
            vocab,
            task,
            eval,
            kind,
            task_name,
            out,
            config,
            overrides,
        } => {
            let s = Settings::load(config.as_deref(), &overrides, FINETUNE_KEYS)?;
            let name = match task_name {
                Some(n) => n,
                None => task
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .ok_or_else(|| anyhow!("cannot derive a task name from {}", task.display()))?,
            };
            finetune(&s, &checkpoint, &vocab, &task, &eval, kind, &name, &out)
        }
        Command::Flops {
            preset,
            objective,
            vocab,
            masked_head_only,
            elementwise,
            out,
        } => flops(preset, &objective, vocab.as_deref(), masked_head_only, elementwise, out.as_deref()),
        Command::Analyze {
            results,
            family,
            axis,
            task,
            metric,
            out,
        } => analyze(&results, family, axis, &task, metric.as_deref(), &out),
        Command::Synth(SynthCmd::Corpus { docs, seed, out }) => {
            let docs_v = gen_synthetic_corpus(&SyntheticCorpusSpec {
                vocab_size_hint: DEFAULT_INVENTORY,
                size: docs,
                seed,
            })?;
            create_parent(&out)?;
            write_corpus(&docs_v, &out)?;
            write_manifest(
                &manifest_beside(&out),
                "synth corpus",
                &[kv("docs", docs), kv("seed", seed), kv("inventory", DEFAULT_INVENTORY)],
            )
        }
        Command::Synth(SynthCmd::Task {
            kind,
            size,
            labels,
            seed,
            vocab,
            out,
        }) => {
            let v = Vocab::load(&vocab)?;
            let spec = match kind {
                TaskKindArg::Classification => SyntheticTaskSpec::classification(labels, size, seed),
                TaskKindArg::Span => SyntheticTaskSpec::span(size, seed),
            };
            let data = gen_probe_task(&spec, &v)?;
            create_parent(&out)?;
            write_probe_tsv(&data, &out)?;
            write_manifest(
                &manifest_beside(&out),
                "synth task",
                &[
                    kv("kind", kind_name(kind)),
                    kv("size", size),
                    kv("labels", labels),
                    kv("seed", seed),
                    kv("vocab", vocab.display()),
                ],
            )
        }
    }
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn kind_name(k: TaskKindArg) -> &'static str {
    match k {
        TaskKindArg::Classification => "classification",
        TaskKindArg::Span => "span",
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_objective(s: &str) -> Result<ObjectiveSpec> {
    s.parse().map_err(|e| anyhow!("--objective: {e}"))
}

fn tokenize_train(corpus: &Path, vocab_size: usize, out: &Path) -> Result<()> {
    let docs = load_corpus(corpus)?;
    let vocab = train_bpe(&docs, vocab_size)?;
    vocab.save_dir(out)?;
    write_manifest(
        &out.join("manifest.txt"),
        "tokenize train",
        &[
            kv("corpus", corpus.display()),
            kv("vocab_size", vocab_size),
            kv("actual_size", vocab.len()),
            kv("merges", vocab.merges().len()),
        ],
    )?;
    println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
    Ok(())
}

fn labelmap(vocab_path: &Path, objective: &str, out: &Path) -> Result<()> {
    let objective = parse_objective(objective)?;
    let vocab = Vocab::load(vocab_path)?;
    let lm = build_label_map(&vocab, objective);
    create_parent(out)?;
    lm.write_csv(out)?;
    write_manifest(
        &manifest_beside(out),
        "labelmap",
        &[
            kv("vocab", vocab_path.display()),
            kv("vocab_size", vocab.len()),
            kv("objective", objective),
            kv("num_classes", lm.num_classes()),
        ],
    )?;
    println!("{}", lm.num_classes());
    Ok(())
}

fn parse_n_values(spec: &str) -> Result<Vec<usize>> {
    let bad = || anyhow!("--n: expected `a..b` or a comma list of positive integers, got {spec:?}");
    let mut ns: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        spec.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() || ns[0] == 0 {
        return Err(bad());
    }
    Ok(ns)
}

fn sweep_classes(vocab_path: &Path, n: &str, out: &Path) -> Result<()> {
    let ns = parse_n_values(n)?;
    let vocab = Vocab::load(vocab_path)?;
    let sweep = count_classes_sweep(&vocab, &[Direction::First, Direction::Last], &ns)?;
    let fig = emit_figure_data(&sweep, vocab.len(), CHAR_CLASSES)?;
    write_figure_data(&fig, out)?;
    write_manifest(
        &out.join("manifest.txt"),
        "sweep classes",
        &[kv("vocab", vocab_path.display()), kv("vocab_size", vocab.len()), kv("n", n)],
    )?;
    print!("{}", fig.csv);
    Ok(())
}

const PRETRAIN_KEYS: &[&str] = &[
    "preset",
    "objective",
    "corpus",
    "vocab",
    "out",
    "num_layers",
    "num_heads",
    "hidden_dim",
    "ffn_dim",
    "max_seq_len",
    "batch_size",
    "total_steps",
    "peak_lr",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "dropout",
    "seq_len",
    "mask_prob",
    "clip_norm",
    "log_every",
    "checkpoint_every",
    "seed",
];

fn clip_setting(s: &Settings, slot: &mut Option<f64>) -> Result<()> {
    match s.raw("clip_norm") {
        None => {}
        Some("none") => *slot = None,
        Some(_) => *slot = Some(s.require("clip_norm")?),
    }
    Ok(())
}

fn pretrain(s: &Settings) -> Result<()> {
    let objective: ObjectiveSpec = s.require("objective")?;
    let corpus_path: PathBuf = s.require("corpus")?;
    let vocab_path: PathBuf = s.require("vocab")?;
    let out: PathBuf = s.require("out")?;

    // settings are checked before any file is read; vocab size comes later
    let (mut enc, mut cfg) = match s.raw("preset").unwrap_or("desk") {
        "desk" => (EncoderConfig::desk(1), PretrainConfig::desk()),
        "paper" => (EncoderConfig::bert_base(1), PretrainConfig::paper_for(objective)),
        _ => return Err(s.blame("preset", "expected `desk` or `paper`")),
    };
    s.apply("num_layers", &mut enc.num_layers)?;
    s.apply("num_heads", &mut enc.num_heads)?;
    s.apply("hidden_dim", &mut enc.hidden_dim)?;
    s.apply("ffn_dim", &mut enc.ffn_dim)?;
    s.apply("batch_size", &mut cfg.batch_size)?;
    s.apply("total_steps", &mut cfg.total_steps)?;
    s.apply("peak_lr", &mut cfg.peak_lr)?;
    s.apply("warmup_steps", &mut cfg.warmup_steps)?;
    s.apply("adam_beta1", &mut cfg.adam_beta1)?;
    s.apply("adam_beta2", &mut cfg.adam_beta2)?;
    s.apply("adam_eps", &mut cfg.adam_eps)?;
    s.apply("weight_decay", &mut cfg.weight_decay)?;
    s.apply("dropout", &mut cfg.dropout)?;
    s.apply("seq_len", &mut cfg.seq_len)?;
    s.apply("mask_prob", &mut cfg.mask_prob)?;
    clip_setting(s, &mut cfg.clip_norm)?;
    s.apply("log_every", &mut cfg.log_every)?;
    s.apply("checkpoint_every", &mut cfg.checkpoint_every)?;
    s.apply("seed", &mut cfg.seed)?;
    enc.max_seq_len = enc.max_seq_len.max(cfg.seq_len);
    s.apply("max_seq_len", &mut enc.max_seq_len)?;
    enc.dropout = cfg.dropout;
    cfg.validate().context("invalid pretraining settings")?;

    let vocab = Vocab::load(&vocab_path)?;
    let docs = load_corpus(&corpus_path)?;
    enc.vocab_size = vocab.len();
    enc.validate().context("invalid encoder settings")?;

    create_dir(&out)?;
    let outcome = pretrain_with(&docs, &vocab, objective, &enc, &cfg, |ck| {
        let p = out.join(format!("checkpoint-{:06}.bin", ck.step()));
        ck.save(&p)
    })?;
    outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
    outcome.curve.write_csv(&out.join("loss.csv"))?;

    let mut entries = vec![
        kv("objective", objective),
        kv("corpus", corpus_path.display()),
        kv("vocab", vocab_path.display()),
        kv("num_classes", outcome.checkpoint.head.num_classes),
        kv("skipped_batches", outcome.skipped_batches),
    ];
    entries.extend(enc.to_manifest());
    entries.extend(cfg.to_manifest());
    write_manifest(&out.join("manifest.txt"), "pretrain", &entries)?;
    println!(
        "{objective}: {} classes, loss {:.4} -> {:.4} over {} steps",
        outcome.checkpoint.head.num_classes,
        outcome.curve.first().unwrap_or(f64::NAN),
        outcome.curve.last().unwrap_or(f64::NAN),
        cfg.total_steps
    );
    Ok(())
}

const FINETUNE_KEYS: &[&str] = &[
    "preset",
    "seeds",
    "batch_size",
    "max_epochs",
    "lr",
    "warmup_fraction",
    "weight_decay",
    "patience_fraction",
    "dropout",
    "max_seq_len",
    "dev_fraction",
    "freeze_encoder",
    "clip_norm",
    "seed",
];

#[allow(clippy::too_many_arguments)]
fn finetune(
    s: &Settings,
    checkpoint: &Path,
    vocab_path: &Path,
    task: &Path,
    eval: &Path,
    kind: TaskKindArg,
    task_name: &str,
    out: &Path,
) -> Result<()> {
    let mut cfg = match s.raw("preset").unwrap_or("desk") {
        "desk" => FinetuneConfig::desk(),
        "glue" => FinetuneConfig::glue(),
        "squad" => FinetuneConfig::squad(),
        "probe" => FinetuneConfig::probe(),
        _ => return Err(s.blame("preset", "expected `desk`, `probe`, `glue` or `squad`")),
    };
    s.apply("batch_size", &mut cfg.batch_size)?;
    s.apply("max_epochs", &mut cfg.max_epochs)?;
    s.apply("lr", &mut cfg.lr)?;
    s.apply("warmup_fraction", &mut cfg.warmup_fraction)?;
    s.apply("weight_decay", &mut cfg.weight_decay)?;
    s.apply("patience_fraction", &mut cfg.patience_fraction)?;
    s.apply("dropout", &mut cfg.dropout)?;
    s.apply("max_seq_len", &mut cfg.max_seq_len)?;
    s.apply("dev_fraction", &mut cfg.dev_fraction)?;
    s.apply("freeze_encoder", &mut cfg.freeze_encoder)?;
    clip_setting(s, &mut cfg.clip_norm)?;
    s.apply("seed", &mut cfg.seed)?;
    let seeds: u64 = s.get("seeds")?.unwrap_or(3);
    if seeds == 0 {
        return Err(s.blame("seeds", "must be at least 1"));
    }
    cfg.validate().context("invalid fine-tuning settings")?;

    let ck = mlmlab::trainer::Checkpoint::load(checkpoint)?;
    let vocab = Vocab::load(vocab_path)?;
    let base_seed = cfg.seed;
    let mut runs = Vec::new();
    match kind {
        TaskKindArg::Classification => {
            let train = load_classification_tsv(task)?;
            let test = load_classification_tsv(eval)?;
            let num_labels = train.iter().chain(&test).map(|x| x.label + 1).max().unwrap_or(0).max(2);
            for i in 0..seeds {
                cfg.seed = base_seed + i;
                let o = finetune_classifier(&ck, &vocab, &train, &test, num_labels, &cfg)?;
                runs.push(o.metrics);
            }
        }
        TaskKindArg::Span => {
            let train = load_span_tsv(task)?;
            let test = load_span_tsv(eval)?;
            for i in 0..seeds {
                cfg.seed = base_seed + i;
                runs.push(finetune_span(&ck, &vocab, &train, &test, &cfg)?.metrics);
            }
        }
    }
    let report = MetricReport::aggregate(ck.objective, ck.head.num_classes, task_name, &runs);
    create_dir(out)?;
    write_metric_csv(std::slice::from_ref(&report), &out.join("metrics.csv"))?;
    write_manifest(
        &out.join("manifest.txt"),
        "finetune",
        &[
            kv("checkpoint", checkpoint.display()),
            kv("vocab", vocab_path.display()),
            kv("task", task.display()),
            kv("eval", eval.display()),
            kv("kind", kind_name(kind)),
            kv("task_name", task_name),
            kv("objective", ck.objective),
            kv("seeds", seeds),
            kv("seed", base_seed),
            kv("batch_size", cfg.batch_size),
            kv("max_epochs", cfg.max_epochs),
            kv("lr", cfg.lr),
            kv("warmup_fraction", cfg.warmup_fraction),
            kv("weight_decay", cfg.weight_decay),
            kv("patience_fraction", cfg.patience_fraction),
            kv("dropout", cfg.dropout),
            kv("max_seq_len", cfg.max_seq_len),
            kv("dev_fraction", cfg.dev_fraction),
            kv("freeze_encoder", cfg.freeze_encoder),
            kv("clip_norm", cfg.clip_norm.map_or("none".to_string(), |c| c.to_string())),
        ],
    )?;
    for (m, st) in &report.metrics {
        println!("{task_name} {m}: {:.4} ± {:.4} over {} seeds", st.mean, st.std, st.count);
    }
    Ok(())
}

fn default_flops_objectives() -> Vec<ObjectiveSpec> {
    let mut v = vec![ObjectiveSpec::Mlm, ObjectiveSpec::FirstChar29, ObjectiveSpec::LastChar29];
    for direction in [Direction::First, Direction::Last] {
        for n in [1, 2, 3, 4, 5, 9] {
            v.push(ObjectiveSpec::NChars { direction, n });
        }
    }
    v
}

fn flops(preset: FlopsPresetArg, objectives: &[String], vocab_path: Option<&Path>, masked_head_only: bool, elementwise: bool, out: Option<&Path>) -> Result<()> {
    let vocab = vocab_path.map(Vocab::load).transpose()?;
    let mut p = match preset {
        FlopsPresetArg::Paper => FlopsPreset::paper(),
        FlopsPresetArg::Desk => {
            let v = vocab.as_ref().ok_or_else(|| anyhow!("--preset desk needs --vocab to size the encoder"))?;
            FlopsPreset::desk(v.len())
        }
    };
    if masked_head_only {
        p.options.head_scope = HeadScope::MaskedPositions(0.15);
    }
    p.options.elementwise = elementwise;
    let objs: Vec<ObjectiveSpec> = if objectives.is_empty() {
        default_flops_objectives()
    } else {
        objectives.iter().map(|o| parse_objective(o)).collect::<Result<_>>()?
    };
    let classes = |o: ObjectiveSpec| -> Result<usize> {
        match &vocab {
            Some(v) => Ok(build_label_map(v, o).num_classes()),
            None => reference_num_classes(o).ok_or_else(|| anyhow!("no reference class count for {o}; pass --vocab")),
        }
    };
    let with_classes: Vec<(ObjectiveSpec, usize)> = objs.iter().map(|&o| Ok((o, classes(o)?))).collect::<Result<_>>()?;
    let rows = flops_table(&p, &with_classes, classes(ObjectiveSpec::Mlm)?)?;
    if let Some(out) = out {
        create_parent(out)?;
        write_flops_csv(&rows, out)?;
        let mut entries = vec![
            kv("preset", if matches!(preset, FlopsPresetArg::Paper) { "paper" } else { "desk" }),
            kv("vocab", vocab_path.map_or("reference".to_string(), |p| p.display().to_string())),
            kv("seq_len", p.seq_len),
            kv("batch_size", p.batch_size),
            kv("steps", p.steps),
            kv("multiplier", p.multiplier),
            kv("masked_head_only", masked_head_only),
            kv("elementwise", elementwise),
        ];
        entries.extend(p.encoder.to_manifest());
        write_manifest(&manifest_beside(out), "flops", &entries)?;
    }
    for r in &rows {
        println!(
            "{:<12} {:>7} classes  {:.3e} FLOPs  {:+.1}%",
            r.objective.to_string(),
            r.num_classes,
            r.total_flops,
            mlmlab::flops::round_half_away(r.relative_reduction_pct, 1)
        );
    }
    Ok(())
}

fn csv_files(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", dir.display()))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            csv_files(&p, acc)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            acc.push(p);
        }
    }
    Ok(())
}

fn analyze(results_dir: &Path, family: FamilyArg, axis: AxisArg, task: &str, metric: Option<&str>, out: &Path) -> Result<()> {
    let mut files = Vec::new();
    csv_files(results_dir, &mut files)?;
    let metric_header = METRIC_CSV_HEADER.join(",");
    let mut reports = Vec::new();
    let mut flops_rows: Vec<FlopsRow> = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let header = text.lines().next().unwrap_or("");
        if header == metric_header {
            reports.extend(read_metric_csv(f)?);
        } else if header.starts_with("objective,direction,n,num_classes,total_flops") {
            flops_rows.extend(read_flops_csv(f)?);
        }
    }
    if reports.is_empty() {
        bail!("no metric CSV files under {}", results_dir.display());
    }
    let mut results = results_from_reports(&reports, metric)?;
    for r in &mut results {
        r.total_flops = flops_rows.iter().find(|f| f.objective == r.objective).map(|f| f.total_flops);
    }
    let families: &[Direction] = match family {
        FamilyArg::First => &[Direction::First],
        FamilyArg::Last => &[Direction::Last],
        FamilyArg::Both => &[Direction::First, Direction::Last],
    };
    let axes: &[ComplexityAxis] = match axis {
        AxisArg::LogClasses => &[ComplexityAxis::Log10Classes],
        AxisArg::Classes => &[ComplexityAxis::Classes],
        AxisArg::N => &[ComplexityAxis::N],
        AxisArg::All => &ComplexityAxis::ALL,
    };
    let mut correlations = Vec::new();
    for &fam in families {
        for &ax in axes {
            match complexity_correlation(&results, fam, task, ax) {
                Ok(c) => correlations.push(c),
                Err(mlmlab::Error::TooFewPoints { got, .. }) => {
                    eprintln!("note: {} family, axis {}: only {got} points, skipped", fam.as_str(), ax.tag());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let table = match cost_benefit_table(&results) {
        Ok(t) => t,
        Err(mlmlab::Error::MissingBaseline(_)) => {
            eprintln!("note: no MLM results, cost-benefit table left empty");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    create_dir(out)?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("correlations.csv", &correlation_csv(&correlations))?;
    write("cost_benefit.csv", &cost_benefit_csv(&table))?;
    let summary = markdown_summary(&table, &correlations);
    write("summary.md", &summary)?;
    write_manifest(
        &out.join("manifest.txt"),
        "analyze",
        &[
            kv("results", results_dir.display()),
            kv("task", task),
            kv("metric", metric.unwrap_or("headline")),
            kv("files", files.len()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_ranges() {
        assert_eq!(parse_n_values("1..4").unwrap(), [1, 2, 3, 4]);
        assert_eq!(parse_n_values("4,1,2,2").unwrap(), [1, 2, 4]);
        assert!(parse_n_values("0..3").is_err());
        assert!(parse_n_values("x").is_err());
    }
}
