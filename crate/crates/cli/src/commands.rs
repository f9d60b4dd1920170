//! One function per subcommand. Each reads only declared inputs and writes
//! only under the run directory.

use std::fmt::Write as _;

use doge_core::analysis::{
    classify_neuron_generality, evaluate as eval_domains, metric_name, probe_activations, strategy_label,
    sweep_lambda as run_lambda_sweep, sweep_sparsity as run_sparsity_sweep, EvalReport, Generality, SweepPlan,
};
use doge_core::config::DataSource;
use doge_core::data::{generate, ingest as read_corpus, parse_jsonl, to_jsonl, CorpusFormat, DomainCorpus, IngestOptions};
use doge_core::model::MaskSet;
use doge_core::pruning::{apply, select as select_tickets, TicketSelection};
use doge_core::scoring::{aggregate, export_score_pies, quadrants, ExpressiveScoreTable};
use doge_core::train::Checkpoint;

use crate::rundir::{CliError, CliResult, RunDir};

const CORPUS: &str = "data/corpus.jsonl";
const FINETUNED: &str = "checkpoints/finetuned.ckpt";
const REWIND: &str = "checkpoints/rewind.ckpt";
const EXPRESSIVE: &str = "scores/expressive.json";

fn json<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError { code: 1, message: e.to_string() })?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read(dir: &mut RunDir, rel: &str, producer: &str) -> CliResult<String> {
    let p = dir.require(rel, producer)?;
    std::fs::read_to_string(&p).map_err(|e| CliError::missing(format!("{}: {e}", p.display())))
}

fn load_corpus(dir: &mut RunDir) -> CliResult<DomainCorpus> {
    let text = read(dir, CORPUS, "generate-data")?;
    Ok(parse_jsonl(&text, &IngestOptions::default())?)
}

fn load_checkpoint(dir: &mut RunDir, rel: &str, producer: &str) -> CliResult<Checkpoint> {
    let p = dir.require(rel, producer)?;
    Ok(Checkpoint::load(&p)?)
}

fn ticket_label(dir: &RunDir) -> String {
    strategy_label(&dir.config.strategy())
}

fn ticket_path(dir: &RunDir) -> String {
    format!("checkpoints/ticket-{}-{}.ckpt", ticket_label(dir), dir.config.pruning.level)
}

pub fn generate_data(dir: &mut RunDir) -> CliResult<()> {
    if dir.config.data.source != DataSource::Synthetic {
        return Err(CliError::config("generate-data needs data.source = \"synthetic\"; use `ingest` for files"));
    }
    let corpus = generate(&dir.config.data.synthetic)?;
    log::info!("generated {} train and {} test domains", corpus.train_domains.len(), corpus.test_domains.len());
    dir.write(CORPUS, to_jsonl(&corpus).as_bytes())?;
    dir.commit("generate-data")
}

pub fn ingest(dir: &mut RunDir, format: &str) -> CliResult<()> {
    let format: CorpusFormat = format.parse().map_err(|e: doge_core::Error| CliError::config(e.to_string()))?;
    let path = dir.config.data.path.clone().ok_or_else(|| CliError::config("ingest needs --input or data.path"))?;
    if !path.is_file() {
        return Err(CliError::missing(format!("corpus file {} not found", path.display())));
    }
    let corpus = read_corpus(&path, format, &dir.config.data.ingest)?;
    dir.write(CORPUS, to_jsonl(&corpus).as_bytes())?;
    dir.commit("ingest")
}

pub fn finetune(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let out = dir.config.pipeline().finetune(&corpus, dir.config.run_seeds())?;
    log::info!("finetuned: best dev metric {:?} at step {}", out.best.dev_metric, out.best.step);
    dir.write(FINETUNED, &out.best.to_bytes())?;
    dir.write(REWIND, &out.rewind.to_bytes())?;
    dir.write("reports/finetune_log.csv", out.log.to_csv()?.as_bytes())?;
    dir.commit("finetune")
}

pub fn score(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let ckpt = load_checkpoint(dir, FINETUNED, "finetune")?;
    let table = dir.config.pipeline().score(&ckpt, &corpus)?;
    let general = aggregate(&table, dir.config.scoring.lambda, dir.config.scoring.normalization)?;
    let quads = quadrants(&general, None, None)?;
    dir.write(EXPRESSIVE, table.to_json()?.as_bytes())?;
    dir.write("scores/general.json", &json(&general)?)?;
    dir.write("scores/quadrants.json", &json(&quads)?)?;
    let figures = dir.path("figures");
    export_score_pies(&table, &figures, "score_pies")?;
    dir.record("figures/score_pies.json")?;
    dir.record("figures/score_pies.svg")?;
    dir.commit("score")
}

fn load_selection(dir: &mut RunDir) -> CliResult<TicketSelection> {
    let rel = format!("selections/{}.json", ticket_label(dir));
    let text = read(dir, &rel, "select")?;
    Ok(TicketSelection::from_json(&text)?)
}

pub fn select(dir: &mut RunDir) -> CliResult<()> {
    let strategy = dir.config.strategy();
    let ckpt = load_checkpoint(dir, FINETUNED, "finetune")?;
    let table = match strategy.lambda().is_some() || strategy == doge_core::pruning::Strategy::Winning {
        true => Some(ExpressiveScoreTable::from_json(&read(dir, EXPRESSIVE, "score")?)?),
        false => None,
    };
    let selection = select_tickets(
        strategy,
        table.as_ref(),
        dir.config.scoring.normalization,
        &ckpt.params.config,
        &dir.config.pruning.schedule,
        dir.config.select_options(),
    )?;
    let label = ticket_label(dir);
    dir.write(&format!("selections/{label}.json"), selection.to_json()?.as_bytes())?;
    dir.commit(&format!("select:{label}"))
}

pub fn rewind(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let rewind = load_checkpoint(dir, REWIND, "finetune")?;
    let selection = load_selection(dir)?;
    let level = dir.config.pruning.level;
    let masks = apply(&selection, level, &MaskSet::ones(&rewind.params.config))?;
    let out = dir.config.pipeline().retrain(&corpus, &rewind, &masks, dir.config.run_seeds())?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    let label = ticket_label(dir);
    dir.write(&ticket_path(dir), &out.best.to_bytes())?;
    dir.write(&format!("reports/retrain_log-{label}-{level}.csv"), out.log.to_csv()?.as_bytes())?;
    dir.commit(&format!("rewind:{label}@{level}"))
}

pub fn evaluate(dir: &mut RunDir, target: &str, domains: &[String]) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let (rel, name) = match target {
        "finetuned" => (FINETUNED.to_string(), "finetuned".to_string()),
        "ticket" => {
            let rel = ticket_path(dir);
            let name = rel.trim_start_matches("checkpoints/").trim_end_matches(".ckpt").to_string();
            (rel, name)
        }
        other => return Err(CliError::config(format!("--target must be `ticket` or `finetuned`, got {other:?}"))),
    };
    let producer = if target == "finetuned" { "finetune" } else { "rewind" };
    let ckpt = load_checkpoint(dir, &rel, producer)?;
    let domains = if domains.is_empty() { corpus.test_domain_names() } else { domains.to_vec() };
    let report = eval_domains(&ckpt, &corpus, &domains, dir.config.analysis.eval_batch_size)?;
    log::info!("{name}: average {} {:.4}", metric_name(report.task), report.primary());
    dir.write(&format!("reports/eval-{name}.json"), report.to_json()?.as_bytes())?;
    dir.commit(&format!("evaluate:{name}"))
}

pub fn sweep_sparsity(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let plan = SweepPlan {
        strategies: dir.config.analysis.strategies.clone(),
        schedule: dir.config.pruning.schedule.clone(),
        seeds: dir.config.sweep_seeds(),
        eval_domains: None,
    };
    let report = run_sparsity_sweep(&dir.config.pipeline(), &corpus, &plan)?;
    for c in &report.curves {
        log::info!("{}: best level {} mean {:.4}", c.label, c.best_level, c.best.mean);
    }
    dir.write("reports/sweep_sparsity.csv", report.to_csv()?.as_bytes())?;
    dir.write("reports/sweep_sparsity.json", report.summary_json()?.as_bytes())?;
    dir.write("figures/sweep_sparsity.svg", report.curves_svg().as_bytes())?;
    dir.commit("sweep-sparsity")
}

pub fn sweep_lambda(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let a = &dir.config.analysis;
    let report =
        run_lambda_sweep(&dir.config.pipeline(), &corpus, &a.lambda_grid, &a.lambda_levels, &dir.config.sweep_seeds())?;
    dir.write("reports/sweep_lambda.csv", report.to_csv()?.as_bytes())?;
    dir.write("reports/sweep_lambda.json", report.summary_json()?.as_bytes())?;
    dir.write("figures/sweep_lambda.svg", report.svg().as_bytes())?;
    dir.commit("sweep-lambda")
}

pub fn probe(dir: &mut RunDir) -> CliResult<()> {
    let corpus = load_corpus(dir)?;
    let ckpt = load_checkpoint(dir, FINETUNED, "finetune")?;
    let cfg = dir.config.analysis.probe.clone();
    let stats = probe_activations(&ckpt, &corpus, &cfg.domains_for(&corpus), &cfg)?;
    let tags = classify_neuron_generality(&stats, cfg.specificity_threshold)?;
    let specific = tags.iter().filter(|t| t.tag == Generality::DomainSpecific).count();
    log::info!("{specific} of {} probed neurons are domain-specific", tags.len());
    dir.write("reports/probe.json", stats.to_json()?.as_bytes())?;
    dir.write("reports/neuron_generality.json", &json(&tags)?)?;
    dir.write("figures/probe_heatmap.svg", stats.heatmap_svg().as_bytes())?;
    dir.commit("probe")
}

fn optional(dir: &mut RunDir, rel: &str, producer: &str) -> CliResult<Option<serde_json::Value>> {
    if !dir.path(rel).is_file() {
        return Ok(None);
    }
    let text = read(dir, rel, producer)?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::missing(format!("{rel}: {e}")))
}

pub fn report(dir: &mut RunDir) -> CliResult<()> {
    let mut md = format!("# Run `{}`\n\n", dir.config.name);
    let mut evals: Vec<String> = std::fs::read_dir(dir.path("reports"))
        .map_err(|e| CliError::missing(e.to_string()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("eval-") && n.ends_with(".json"))
        .collect();
    evals.sort();
    if !evals.is_empty() {
        md.push_str("## Out-of-domain evaluation\n\n| model | domain | accuracy | macro-F1 |\n|---|---|---|---|\n");
        for name in evals {
            let text = read(dir, &format!("reports/{name}"), "evaluate")?;
            let r: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::missing(format!("{name}: {e}")))?;
            let model = name.trim_start_matches("eval-").trim_end_matches(".json");
            for (d, m) in &r.per_domain {
                let _ = writeln!(md, "| {model} | {d} | {:.4} | {:.4} |", m.accuracy, m.macro_f1);
            }
            let _ = writeln!(md, "| {model} | average | {:.4} | {:.4} |", r.average_accuracy, r.average_macro_f1);
        }
        md.push('\n');
    }
    if let Some(q) = optional(dir, "scores/quadrants.json", "score")? {
        md.push_str("## Mean/variance quadrants\n\n| quadrant | elements |\n|---|---|\n");
        let mut counts = std::collections::BTreeMap::<String, usize>::new();
        if let Some(classes) = q["classes"].as_object() {
            for v in classes.values() {
                *counts.entry(v.as_str().unwrap_or("?").to_string()).or_default() += 1;
            }
        }
        for (k, n) in counts {
            let _ = writeln!(md, "| {k} | {n} |");
        }
        md.push('\n');
    }
    if let Some(s) = optional(dir, "reports/sweep_sparsity.json", "sweep-sparsity")? {
        let _ = writeln!(md, "## Sparsity sweep ({})\n", s["metric"].as_str().unwrap_or(""));
        md.push_str("| strategy | best level | mean | std | mean per-seed best level |\n|---|---|---|---|---|\n");
        for c in s["curves"].as_array().into_iter().flatten() {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {:.3} |",
                c["label"].as_str().unwrap_or(""),
                c["best_level"],
                c["best"]["mean"].as_f64().unwrap_or(f64::NAN),
                c["best"]["std"].as_f64().unwrap_or(f64::NAN),
                c["mean_seed_best_level"].as_f64().unwrap_or(f64::NAN)
            );
        }
        for d in s["deltas"].as_array().into_iter().flatten() {
            let _ = writeln!(
                md,
                "\n{} minus {} at level {}: {:+.4} (std {:.4})",
                d["strategy"].as_str().unwrap_or(""),
                d["baseline"].as_str().unwrap_or(""),
                d["level"],
                d["delta"]["mean"].as_f64().unwrap_or(f64::NAN),
                d["delta"]["std"].as_f64().unwrap_or(f64::NAN)
            );
        }
        md.push('\n');
    }
    if let Some(l) = optional(dir, "reports/sweep_lambda.json", "sweep-lambda")? {
        md.push_str("## Lambda sweep\n\n| level | lambda | mean | std |\n|---|---|---|---|\n");
        for s in l["series"].as_array().into_iter().flatten() {
            for p in s["points"].as_array().into_iter().flatten() {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.4} | {:.4} |",
                    s["level"],
                    p["lambda"],
                    p["metric"]["mean"].as_f64().unwrap_or(f64::NAN),
                    p["metric"]["std"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
        md.push('\n');
    }
    if let Some(tags) = optional(dir, "reports/neuron_generality.json", "probe")? {
        let all = tags.as_array().map_or(0, Vec::len);
        let specific = tags.as_array().into_iter().flatten().filter(|t| t["tag"] == "domain-specific").count();
        let _ = writeln!(md, "## Activation probe\n\n{specific} of {all} probed FFN neurons are domain-specific.\n");
    }
    dir.write("reports/report.md", md.as_bytes())?;
    dir.commit("report")
}
