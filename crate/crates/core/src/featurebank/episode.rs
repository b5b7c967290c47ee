use rand::seq::index::sample;
use rand::Rng;

use super::bank::FeatureBank;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Query rows per class when a caller does not say otherwise.
pub const DEFAULT_N_QUERY: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Protocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Protocol {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Self {
        Protocol {
            n_way,
            k_shot,
            n_query,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "protocol needs n_way >= 2, k_shot >= 1, n_query >= 1; got {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.n_query
            )));
        }
        Ok(())
    }

    /// Checks the bank can host this protocol, naming the deficit if not.
    pub fn check_bank(&self, bank: &FeatureBank) -> Result<()> {
        self.validate()?;
        if bank.n_classes() < self.n_way {
            return Err(Error::Protocol(format!(
                "{}-way episodes need {} classes but bank {:?} has {} (short by {})",
                self.n_way,
                self.n_way,
                bank.domain_name(),
                bank.n_classes(),
                self.n_way - bank.n_classes()
            )));
        }
        let need = self.k_shot + self.n_query;
        let eligible = bank
            .classes()
            .iter()
            .filter(|c| c.features.rows() >= need)
            .count();
        if eligible < self.n_way {
            let smallest = bank
                .classes()
                .iter()
                .map(|c| c.features.rows())
                .min()
                .unwrap_or(0);
            return Err(Error::Protocol(format!(
                "{}-shot with {} queries needs {need} rows per class in {} classes; only {eligible} classes qualify (smallest class has {smallest} rows, short by {})",
                self.k_shot,
                self.n_query,
                self.n_way,
                need.saturating_sub(smallest)
            )));
        }
        Ok(())
    }
}

/// One n-way k-shot task with episode-local labels `0..n_way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub protocol: Protocol,
    pub support_features: Matrix,
    pub support_labels: Vec<usize>,
    pub query_features: Matrix,
    pub query_labels: Vec<usize>,
    /// Episode label -> source class label.
    pub class_map: Vec<String>,
    /// `(bank class index, row index)` of every support row.
    pub support_origin: Vec<(usize, usize)>,
    /// `(bank class index, row index)` of every query row.
    pub query_origin: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.protocol.n_way
    }
}

/// Samples classes without replacement, then support and query rows without
/// replacement inside each class. Rows are grouped by episode label.
pub fn sample_episode<R: Rng + ?Sized>(
    bank: &FeatureBank,
    protocol: Protocol,
    rng: &mut R,
) -> Result<Episode> {
    protocol.check_bank(bank)?;
    let Protocol {
        n_way,
        k_shot,
        n_query,
    } = protocol;
    let need = k_shot + n_query;
    let eligible: Vec<usize> = (0..bank.n_classes())
        .filter(|&c| bank.classes()[c].features.rows() >= need)
        .collect();
    let picked = sample(rng, eligible.len(), n_way);

    let dim = bank.dim();
    let mut support = Vec::with_capacity(n_way * k_shot * dim);
    let mut query = Vec::with_capacity(n_way * n_query * dim);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut query_labels = Vec::with_capacity(n_way * n_query);
    let mut support_origin = Vec::with_capacity(n_way * k_shot);
    let mut query_origin = Vec::with_capacity(n_way * n_query);
    let mut class_map = Vec::with_capacity(n_way);
    for (local, pick) in picked.iter().enumerate() {
        let ci = eligible[pick];
        let class = &bank.classes()[ci];
        class_map.push(class.label.clone());
        let rows = sample(rng, class.features.rows(), need).into_vec();
        for (j, &r) in rows.iter().enumerate() {
            if j < k_shot {
                support.extend_from_slice(class.features.row(r));
                support_labels.push(local);
                support_origin.push((ci, r));
            } else {
                query.extend_from_slice(class.features.row(r));
                query_labels.push(local);
                query_origin.push((ci, r));
            }
        }
    }
    Ok(Episode {
        protocol,
        support_features: Matrix::from_vec(support_labels.len(), dim, support)?,
        support_labels,
        query_features: Matrix::from_vec(query_labels.len(), dim, query)?,
        query_labels,
        class_map,
        support_origin,
        query_origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurebank::{gen_synthetic_domain, SyntheticDomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn bank(classes: usize, per_class: usize) -> FeatureBank {
        let spec = SyntheticDomainSpec {
            n_classes: classes,
            dim: 4,
            ..Default::default()
        };
        gen_synthetic_domain(&spec, per_class, 1).unwrap()
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let b = bank(20, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&b, Protocol::new(5, 5, 15), &mut rng).unwrap();
        assert_eq!(ep.support_features.rows(), 25);
        assert_eq!(ep.query_features.rows(), 75);
        assert_eq!(ep.class_map.len(), 5);
    }

    #[test]
    fn exhaustive_episode_uses_every_row_once() {
        let b = bank(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = sample_episode(&b, Protocol::new(5, 3, 5), &mut rng).unwrap();
        let all: HashSet<_> = ep
            .support_origin
            .iter()
            .chain(&ep.query_origin)
            .copied()
            .collect();
        assert_eq!(all.len(), 40);
    }

    #[test]
    fn deterministic_for_seed() {
        let b = bank(10, 20);
        let p = Protocol::new(5, 2, 3);
        let a = sample_episode(&b, p, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let c = sample_episode(&b, p, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn deficits_are_named() {
        let b = bank(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode(&b, Protocol::new(5, 5, 15), &mut rng).unwrap_err();
        assert!(
            matches!(err, Error::Protocol(ref m) if m.contains("short by 16")),
            "{err}"
        );
        let err = sample_episode(&b, Protocol::new(6, 1, 1), &mut rng).unwrap_err();
        assert!(
            matches!(err, Error::Protocol(ref m) if m.contains("short by 1")),
            "{err}"
        );
    }
}
