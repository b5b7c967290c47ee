use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use damsl::engine::{
    checkpoint_load, checkpoint_save, evaluate, train_model, EvalReport, Model, VariantTag,
    CSV_HEADER,
};
use damsl::featurebank::{gen_benchmark_suite, load_feature_bank, FeatureBank};

use crate::config::RunConfig;
use crate::error::{core_exit_code, CliError, CliResult};

fn out_path(cfg: &RunConfig, default: &str) -> PathBuf {
    PathBuf::from(cfg.get("out").unwrap_or(default))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(damsl::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Resolves a bank reference: a CSV path, `synthetic` (the source domain) or
/// `synthetic:<name>` for one of the generated domains.
pub fn load_bank(cfg: &RunConfig, reference: &str) -> CliResult<FeatureBank> {
    let name = match reference.strip_prefix("synthetic") {
        Some("") => "source",
        Some(rest) if rest.starts_with(':') => &rest[1..],
        _ => return Ok(load_feature_bank(reference)?),
    };
    let banks = gen_benchmark_suite(&cfg.synthetic_spec(), cfg.count("per_class"), cfg.seed())?;
    let names: Vec<String> = banks.iter().map(|b| b.domain_name().to_string()).collect();
    banks
        .into_iter()
        .find(|b| b.domain_name() == name)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown synthetic domain {name:?}; expected one of {}",
                names.join(", ")
            ))
        })
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let dir = out_path(cfg, "data");
    fs::create_dir_all(&dir).map_err(|e| {
        CliError::Core(damsl::Error::Io {
            path: dir.clone(),
            source: e,
        })
    })?;
    let banks = gen_benchmark_suite(&cfg.synthetic_spec(), cfg.count("per_class"), cfg.seed())?;
    for bank in &banks {
        let path = dir.join(format!("{}.csv", bank.domain_name()));
        bank.save(&path)?;
        let counts: Vec<String> = bank
            .classes()
            .iter()
            .map(|c| format!("{}={}", c.label, c.features.rows()))
            .collect();
        println!(
            "{}: {} classes, dim {}, {} rows [{}]",
            path.display(),
            bank.n_classes(),
            bank.dim(),
            bank.total_rows(),
            counts.join(" ")
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let tag = cfg.variant(&cfg.single("variant")?)?;
    let engine = cfg.engine_config()?;
    let source = load_bank(cfg, cfg.require("source")?)?;
    let (model, losses) = train_model(tag, &source, &engine, cfg.seed())?;
    let ckpt = PathBuf::from(cfg.require("checkpoint")?);
    checkpoint_save(&model, &ckpt)?;
    let log = out_path(cfg, "train.log");
    let mut text = String::new();
    for (i, loss) in losses.iter().enumerate() {
        writeln!(text, "{i},{loss}").unwrap();
    }
    write_file(&log, &text)?;
    let last = losses
        .last()
        .map(|l| format!("{l:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "trained {tag} on {} ({} episodes, final loss {last}); checkpoint {}, log {}",
        source.domain_name(),
        losses.len(),
        ckpt.display(),
        log.display()
    );
    Ok(())
}

/// The checkpointed model, optionally re-read as a metric-free variant over
/// the same encoders (e.g. `lensem_v2` from a `damsl_v2` checkpoint).
fn model_for_eval(cfg: &RunConfig) -> CliResult<Model> {
    let model = checkpoint_load(cfg.require("checkpoint")?)?;
    if cfg.get("variant").is_none() {
        return Ok(model);
    }
    let tag = cfg.variant(&cfg.single("variant")?)?;
    if tag == model.tag() {
        return Ok(model);
    }
    model.as_metric_free(tag).map_err(|_| {
        CliError::Usage(format!(
            "checkpoint holds {}, which cannot be evaluated as {tag}",
            model.tag()
        ))
    })
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let model = model_for_eval(cfg)?;
    let engine = cfg.engine_config()?;
    let target = load_bank(cfg, &cfg.single("target")?)?;
    let protocol = cfg.protocol(cfg.single_shot()?);
    let report = evaluate(
        &model,
        &target,
        protocol,
        cfg.count("eval_episodes"),
        &engine,
        cfg.seed(),
    )?;
    let out = out_path(cfg, "eval.csv");
    write_file(&out, &format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
    println!(
        "{} {} {}-way {}-shot: {}",
        report.variant,
        report.domain,
        protocol.n_way,
        protocol.k_shot,
        report.cell()
    );
    Ok(())
}

struct Cell {
    domain: String,
    k_shot: usize,
    result: Result<EvalReport, (i32, String)>,
}

fn failure(e: CliError) -> (i32, String) {
    (e.exit_code(), e.to_string())
}

pub fn benchmark(cfg: &RunConfig) -> CliResult<()> {
    let variants = cfg.list("variant");
    if variants.is_empty() {
        return Err(CliError::Usage(
            "benchmark needs at least one variant".into(),
        ));
    }
    let tags = variants
        .iter()
        .map(|v| cfg.variant(v))
        .collect::<CliResult<Vec<VariantTag>>>()?;
    let shots = cfg.shots();
    let targets = cfg.list("target");
    if shots.is_empty() || targets.is_empty() {
        return Err(CliError::Usage(
            "benchmark needs at least one k_shot and one target".into(),
        ));
    }
    let engine = cfg.engine_config()?;
    let source = load_bank(cfg, cfg.require("source")?)?;
    let banks: Vec<(String, Result<FeatureBank, (i32, String)>)> = targets
        .iter()
        .map(|t| {
            let bank = load_bank(cfg, t).map_err(failure);
            let label = bank
                .as_ref()
                .map(|b| b.domain_name().to_string())
                .unwrap_or_else(|_| t.clone());
            (label, bank)
        })
        .collect();

    let mut rows: Vec<(VariantTag, Vec<Cell>)> = Vec::new();
    for &tag in &tags {
        let trained = train_model(tag, &source, &engine, cfg.seed()).map_err(|e| failure(e.into()));
        let mut cells = Vec::new();
        for (label, bank) in &banks {
            for &k in &shots {
                let result = match (&trained, bank) {
                    (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                    (Ok((model, _)), Ok(bank)) => evaluate(
                        model,
                        bank,
                        cfg.protocol(k),
                        cfg.count("eval_episodes"),
                        &engine,
                        cfg.seed(),
                    )
                    .map_err(|e| (core_exit_code(&e), e.to_string())),
                };
                if let Err((_, msg)) = &result {
                    eprintln!("{tag} {label} {k}-shot failed: {msg}");
                }
                cells.push(Cell {
                    domain: label.clone(),
                    k_shot: k,
                    result,
                });
            }
        }
        rows.push((tag, cells));
    }

    print!("{}", render_table(&rows));
    let mut csv = format!("{CSV_HEADER}\n");
    for (_, cells) in &rows {
        for c in cells {
            if let Ok(r) = &c.result {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
        }
    }
    write_file(&out_path(cfg, "benchmark.csv"), &csv)?;
    let failed = rows
        .iter()
        .flat_map(|(_, c)| c)
        .filter_map(|c| c.result.as_ref().err())
        .collect::<Vec<_>>();
    match failed.first() {
        None => Ok(()),
        Some((code, _)) => Err(CliError::Cells {
            failed: failed.len(),
            code: *code,
        }),
    }
}

fn render_table(rows: &[(VariantTag, Vec<Cell>)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let headers: Vec<String> = first
        .iter()
        .map(|c| format!("{} {}-shot", c.domain, c.k_shot))
        .collect();
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|(tag, cells)| {
            let texts = cells
                .iter()
                .map(|c| match &c.result {
                    Ok(r) => r.cell(),
                    Err(_) => "failed".to_string(),
                })
                .collect();
            (tag.to_string(), texts)
        })
        .collect();
    let name_w = body
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(["variant".len()])
        .max()
        .unwrap();
    let col_w: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(j, h)| {
            body.iter()
                .map(|(_, t)| t[j].chars().count())
                .chain([h.chars().count()])
                .max()
                .unwrap()
        })
        .collect();
    let mut out = String::new();
    let line = |name: &str, cols: &[String], out: &mut String| {
        write!(out, "{name:<name_w$}").unwrap();
        for (c, w) in cols.iter().zip(&col_w) {
            let pad = w - c.chars().count();
            write!(out, "  {}{c}", " ".repeat(pad)).unwrap();
        }
        out.push('\n');
    };
    line("variant", &headers, &mut out);
    for (name, texts) in &body {
        line(name, texts, &mut out);
    }
    out
}
