use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::EngineConfig;
use super::model::Model;
use super::substream;
use super::variant::VariantTag;
use crate::error::{Error, Result};
use crate::featurebank::{sample_episode, FeatureBank, Protocol};
use crate::parallel::{map_indexed, ExecMode};

const STREAM_EVAL: u64 = 7;

/// Per-episode accuracies with mean and 95% confidence half-width.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: VariantTag,
    pub domain: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

/// Arithmetic mean and `1.96 * s / sqrt(n)` with the n−1 sample stddev; a
/// single value has half-width 0.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub const CSV_HEADER: &str = "variant,domain,n_way,k_shot,n_episodes,mean,ci95,seed";

/// `"85.93% ± 0.68%"`.
pub fn format_cell(mean: f64, ci95: f64) -> String {
    format!("{:.2}% ± {:.2}%", mean * 100.0, ci95 * 100.0)
}

impl EvalReport {
    pub fn new(
        variant: VariantTag,
        domain: impl Into<String>,
        protocol: Protocol,
        seed: u64,
        accuracies: Vec<f64>,
    ) -> Self {
        let (mean, ci95) = mean_ci95(&accuracies);
        EvalReport {
            variant,
            domain: domain.into(),
            protocol,
            seed,
            accuracies,
            mean,
            ci95,
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.accuracies.len()
    }

    pub fn cell(&self) -> String {
        format_cell(self.mean, self.ci95)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.variant,
            self.domain,
            self.protocol.n_way,
            self.protocol.k_shot,
            self.n_episodes(),
            self.mean,
            self.ci95,
            self.seed
        )
    }
}

/// Evaluates `model` on `n_episodes` target episodes. Episode `i` draws its
/// sample and tuning seeds from a per-episode seed fixed up front, so the
/// report does not depend on `cfg.exec`.
pub fn evaluate(
    model: &Model,
    target: &FeatureBank,
    protocol: Protocol,
    n_episodes: usize,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    protocol.check_bank(target)?;
    model.check_n_way(protocol.n_way)?;
    let mut master = substream(seed, STREAM_EVAL);
    let seeds: Vec<u64> = (0..n_episodes).map(|_| master.next_u64()).collect();
    let results = map_indexed(n_episodes, cfg.exec, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let episode = sample_episode(target, protocol, &mut rng)?;
        let tune_seed = rng.next_u64();
        let preds =
            model.predict_episode(&episode, &cfg.fine_tune, tune_seed, ExecMode::Sequential)?;
        let correct = preds
            .iter()
            .zip(&episode.query_labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / preds.len() as f64)
    });
    let accuracies = results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.context(format!("evaluation episode {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(
        model.tag(),
        target.domain_name(),
        protocol,
        seed,
        accuracies,
    ))
}
