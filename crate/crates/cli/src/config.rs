//! Flat `key = value` run configuration shared by the config file and the
//! command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use damsl::engine::{EngineConfig, VariantTag};
use damsl::featurebank::{Protocol, SyntheticDomainSpec, DEFAULT_N_QUERY};
use damsl::parallel::ExecMode;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Text,
    Count,
    Seed,
    Float,
    Flag,
    /// Comma-separated list of counts.
    Counts,
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, kind, help }
}

pub const KEYS: &[Key] = &[
    key(
        "variant",
        Kind::Text,
        "variant tag; comma list for benchmark",
    ),
    key("source", Kind::Text, "source bank: CSV path or `synthetic`"),
    key(
        "target",
        Kind::Text,
        "target bank: CSV path or `synthetic:<near|mid|far|source>`; comma list for benchmark",
    ),
    key("n_way", Kind::Count, "classes per episode"),
    key(
        "k_shot",
        Kind::Counts,
        "support rows per class; comma list for benchmark",
    ),
    key("n_query", Kind::Count, "query rows per class at evaluation"),
    key("episodes", Kind::Count, "meta-training episodes"),
    key("eval_episodes", Kind::Count, "evaluation episodes"),
    key("seed", Kind::Seed, "master seed"),
    key("out", Kind::Text, "output file (directory for gen-data)"),
    key("checkpoint", Kind::Text, "checkpoint path"),
    key(
        "jitter",
        Kind::Float,
        "Gaussian feature jitter stddev during fine-tuning",
    ),
    key("classes", Kind::Count, "synthetic classes per domain"),
    key("per_class", Kind::Count, "synthetic rows per class"),
    key("dim", Kind::Count, "synthetic feature dimension"),
    key("mean_scale", Kind::Float, "synthetic class-mean scale"),
    key("within_std", Kind::Float, "synthetic within-class stddev"),
    key("adapter_depth", Kind::Count, "adapter hidden layers"),
    key("ft_epochs", Kind::Count, "per-episode fine-tuning epochs"),
    key(
        "ft_batch",
        Kind::Count,
        "per-episode fine-tuning batch size",
    ),
    key(
        "ft_lr",
        Kind::Float,
        "per-episode fine-tuning learning rate",
    ),
    key(
        "pretrain_epochs",
        Kind::Count,
        "supervised pretraining epochs",
    ),
    key(
        "pretrain_batch",
        Kind::Count,
        "supervised pretraining batch size",
    ),
    key(
        "adam_lr",
        Kind::Float,
        "pretraining learning rate of Adam encoders",
    ),
    key(
        "sgd_lr",
        Kind::Float,
        "pretraining learning rate of SGD-momentum encoders",
    ),
    key(
        "fomaml_episodes",
        Kind::Count,
        "first-order MAML episodes for v1 encoders",
    ),
    key("inner_steps", Kind::Count, "first-order MAML inner steps"),
    key(
        "inner_lr",
        Kind::Float,
        "first-order MAML inner learning rate",
    ),
    key("metric_lr", Kind::Float, "metric learning rate"),
    key(
        "meta_n_query",
        Kind::Count,
        "query rows per class in meta-training episodes",
    ),
    key(
        "holdout_classes",
        Kind::Count,
        "source classes reserved for meta-training (0 shares all)",
    ),
    key("gnn_layers", Kind::Count, "graph layers of the metric"),
    key("conv_width", Kind::Count, "features added per graph layer"),
    key(
        "projection",
        Kind::Flag,
        "learned score projection before the graph",
    ),
    key("sproto_width", Kind::Count, "S-Proto embedding width"),
    key("exec", Kind::Text, "`parallel` or `sequential` evaluation"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EngineConfig::benchmark();
        let s = SyntheticDomainSpec::benchmark();
        let mut values = BTreeMap::new();
        let defaults: [(&str, String); 32] = [
            ("n_way", e.meta_protocol.n_way.to_string()),
            ("k_shot", "5".into()),
            ("n_query", DEFAULT_N_QUERY.to_string()),
            ("episodes", e.meta_episodes.to_string()),
            (
                "eval_episodes",
                damsl::engine::DEFAULT_EVAL_EPISODES.to_string(),
            ),
            ("seed", "0".into()),
            ("checkpoint", "model.ckpt".into()),
            ("jitter", e.fine_tune.jitter_std.to_string()),
            ("classes", s.n_classes.to_string()),
            ("per_class", "100".into()),
            ("dim", s.dim.to_string()),
            ("mean_scale", s.mean_scale.to_string()),
            ("within_std", s.within_std.to_string()),
            ("adapter_depth", e.adapter_depth.to_string()),
            ("ft_epochs", e.fine_tune.epochs.to_string()),
            ("ft_batch", e.fine_tune.batch_size.to_string()),
            ("ft_lr", e.fine_tune.lr.to_string()),
            ("pretrain_epochs", e.pretrain.epochs.to_string()),
            ("pretrain_batch", e.pretrain.batch_size.to_string()),
            ("adam_lr", e.pretrain.adam_lr.to_string()),
            ("sgd_lr", e.pretrain.sgd_lr.to_string()),
            ("fomaml_episodes", e.pretrain.fomaml_episodes.to_string()),
            ("inner_steps", e.pretrain.inner_steps.to_string()),
            ("inner_lr", e.pretrain.inner_lr.to_string()),
            ("metric_lr", e.metric_lr.to_string()),
            ("meta_n_query", e.meta_protocol.n_query.to_string()),
            ("holdout_classes", e.holdout_classes.to_string()),
            ("gnn_layers", e.metric.n_layers.to_string()),
            ("conv_width", e.metric.conv_width.to_string()),
            ("projection", e.metric.projection.to_string()),
            ("sproto_width", e.sproto_width.to_string()),
            ("exec", "parallel".into()),
        ];
        for (k, v) in defaults {
            let key = find_key(k).expect("default for a known key");
            values.insert(key.name, v);
        }
        RunConfig { values }
    }
}

fn invalid(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("{key} = {value:?} is not {what}"))
}

fn check_value(key: &Key, value: &str) -> CliResult<()> {
    let ok = match key.kind {
        Kind::Text => true,
        Kind::Count => value.parse::<usize>().is_ok(),
        Kind::Seed => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Flag => value.parse::<bool>().is_ok(),
        Kind::Counts => split_list(value).iter().all(|v| v.parse::<usize>().is_ok()),
    };
    if ok {
        Ok(())
    } else {
        let what = match key.kind {
            Kind::Count => "a non-negative integer",
            Kind::Seed => "an unsigned 64-bit integer",
            Kind::Float => "a finite number",
            Kind::Flag => "true or false",
            Kind::Counts => "a comma list of non-negative integers",
            Kind::Text => unreachable!(),
        };
        Err(invalid(key.name, value, what))
    }
}

fn split_list(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect()
}

/// Parses the config file format into ordered `(key, value, line)` entries.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {line_no}: expected `key = value`, got {trimmed:?}"
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string(), line_no));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, name: &str, value: &str) -> CliResult<()> {
        let key =
            find_key(name).ok_or_else(|| CliError::Config(format!("unknown key {name:?}")))?;
        check_value(key, value)?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (k, v, line) in parse_config_text(text)? {
            self.set(&k, &v).map_err(|e| {
                CliError::Config(format!(
                    "line {line}: {}",
                    e.to_string().trim_start_matches("configuration error: ")
                ))
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| {
            CliError::Config(format!(
                "{}: {}",
                path.display(),
                e.to_string().trim_start_matches("configuration error: ")
            ))
        })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values
            .get(name)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, name: &str) -> CliResult<&str> {
        self.get(name).ok_or_else(|| {
            CliError::Usage(format!(
                "missing required setting `{name}` (flag --{})",
                name.replace('_', "-")
            ))
        })
    }

    fn parsed<T: FromStr>(&self, name: &str) -> T {
        // values are checked on `set`, and every typed key has a default
        self.get(name)
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("typed key {name} always holds a valid value"))
    }

    pub fn count(&self, name: &str) -> usize {
        self.parsed(name)
    }

    pub fn float(&self, name: &str) -> f64 {
        self.parsed(name)
    }

    pub fn flag(&self, name: &str) -> bool {
        self.parsed(name)
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed")
    }

    pub fn list(&self, name: &str) -> Vec<String> {
        self.get(name)
            .map(split_list)
            .unwrap_or_default()
            .into_iter()
            .map(String::from)
            .collect()
    }

    pub fn shots(&self) -> Vec<usize> {
        self.list("k_shot")
            .iter()
            .map(|v| v.parse().expect("checked on set"))
            .collect()
    }

    /// The single value of a list-capable key; lists are for `benchmark` only.
    pub fn single(&self, name: &str) -> CliResult<String> {
        let mut items = self.list(name);
        match items.len() {
            0 => self.require(name).map(String::from),
            1 => Ok(items.remove(0)),
            n => Err(CliError::Usage(format!(
                "`{name}` takes one value here, got {n}"
            ))),
        }
    }

    pub fn single_shot(&self) -> CliResult<usize> {
        Ok(self.single("k_shot")?.parse().expect("checked on set"))
    }

    pub fn variant(&self, raw: &str) -> CliResult<VariantTag> {
        raw.parse::<VariantTag>()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn protocol(&self, k_shot: usize) -> Protocol {
        Protocol::new(self.count("n_way"), k_shot, self.count("n_query"))
    }

    pub fn synthetic_spec(&self) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            n_classes: self.count("classes"),
            dim: self.count("dim"),
            mean_scale: self.float("mean_scale"),
            within_std: self.float("within_std"),
            ..SyntheticDomainSpec::default()
        }
    }

    pub fn engine_config(&self) -> CliResult<EngineConfig> {
        let mut e = EngineConfig::benchmark();
        e.adapter_depth = self.count("adapter_depth");
        e.holdout_classes = self.count("holdout_classes");
        e.pretrain.epochs = self.count("pretrain_epochs");
        e.pretrain.batch_size = self.count("pretrain_batch");
        e.pretrain.adam_lr = self.float("adam_lr");
        e.pretrain.sgd_lr = self.float("sgd_lr");
        e.pretrain.fomaml_episodes = self.count("fomaml_episodes");
        e.pretrain.inner_steps = self.count("inner_steps");
        e.pretrain.inner_lr = self.float("inner_lr");
        e.fine_tune.epochs = self.count("ft_epochs");
        e.fine_tune.batch_size = self.count("ft_batch");
        e.fine_tune.lr = self.float("ft_lr");
        e.fine_tune.jitter_std = self.float("jitter");
        e.metric.n_layers = self.count("gnn_layers");
        e.metric.conv_width = self.count("conv_width");
        e.metric.projection = self.flag("projection");
        e.metric_lr = self.float("metric_lr");
        e.sproto_width = self.count("sproto_width");
        e.meta_episodes = self.count("episodes");
        e.meta_protocol = Protocol::new(
            self.count("n_way"),
            self.shots().first().copied().unwrap_or(5),
            self.count("meta_n_query"),
        );
        e.exec = match self.get("exec").unwrap_or("parallel") {
            "parallel" => ExecMode::Parallel,
            "sequential" => ExecMode::Sequential,
            other => return Err(invalid("exec", other, "`parallel` or `sequential`")),
        };
        if !(e.fine_tune.jitter_std >= 0.0) {
            return Err(invalid(
                "jitter",
                &e.fine_tune.jitter_std.to_string(),
                "a stddev >= 0",
            ));
        }
        e.validate()?;
        Ok(e)
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| {
                format!(
                    "{} = {}\n",
                    k.name,
                    self.values.get(k.name).map(String::as_str).unwrap_or("")
                )
            })
            .collect()
    }
}
