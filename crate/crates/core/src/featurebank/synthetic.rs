use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::bank::{ClassFeatures, FeatureBank};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Transformation applied to a base domain to produce a shifted one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    /// 0 keeps the axes, 1 applies the full random rotation.
    pub rotation: f64,
    /// Stddev of a per-class random translation of the class mean.
    pub translation_std: f64,
    /// Multiplier on the within-class stddev.
    pub std_multiplier: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        rotation: 0.0,
        translation_std: 0.0,
        std_multiplier: 1.0,
    };

    pub const NEAR: DomainShift = DomainShift {
        rotation: 0.25,
        translation_std: 0.1,
        std_multiplier: 1.15,
    };

    pub const MID: DomainShift = DomainShift {
        rotation: 0.5,
        translation_std: 0.25,
        std_multiplier: 1.3,
    };

    pub const FAR: DomainShift = DomainShift {
        rotation: 1.0,
        translation_std: 0.5,
        std_multiplier: 1.6,
    };

    /// Named target presets in order of increasing shift.
    pub const PRESETS: [(&'static str, DomainShift); 3] = [
        ("near", DomainShift::NEAR),
        ("mid", DomainShift::MID),
        ("far", DomainShift::FAR),
    ];

    pub fn preset(name: &str) -> Option<DomainShift> {
        DomainShift::PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| *s)
    }

    pub fn is_identity(&self) -> bool {
        *self == DomainShift::IDENTITY
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift::IDENTITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub within_std: f64,
    pub shift: DomainShift,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            n_classes: 20,
            dim: 32,
            mean_scale: 3.0,
            within_std: 1.0,
            shift: DomainShift::IDENTITY,
        }
    }
}

impl SyntheticDomainSpec {
    /// Base domain of the benchmark suite: closer, wider clusters than the
    /// default so that 5-shot episodes are not trivially separable.
    pub fn benchmark() -> Self {
        SyntheticDomainSpec {
            mean_scale: 1.0,
            within_std: 1.5,
            ..SyntheticDomainSpec::default()
        }
    }

    pub fn with_shift(mut self, shift: DomainShift) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 {
            return Err(Error::Config(
                "synthetic domain needs classes and a positive dim".into(),
            ));
        }
        if !(self.within_std > 0.0) || !(self.shift.std_multiplier > 0.0) {
            return Err(Error::Config("stddevs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shift.rotation) {
            return Err(Error::Config(format!(
                "rotation strength must lie in [0, 1], got {}",
                self.shift.rotation
            )));
        }
        if !(self.shift.translation_std >= 0.0) || !self.mean_scale.is_finite() {
            return Err(Error::Config("translation stddev must be >= 0".into()));
        }
        Ok(())
    }
}

// Independent ChaCha streams per generation stage so that a shift never
// perturbs the base class means or the raw noise draws.
const STREAM_MEANS: u64 = 0;
const STREAM_SHIFT: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian class clusters; a non-identity shift maps every sample through
/// `rotate(mean + translation + multiplier * (x - mean))`.
pub fn gen_synthetic_domain(
    spec: &SyntheticDomainSpec,
    samples_per_class: usize,
    seed: u64,
) -> Result<FeatureBank> {
    spec.validate()?;
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    let dim = spec.dim;
    let mut means_rng = stream(seed, STREAM_MEANS);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..dim)
                .map(|_| spec.mean_scale * normal(&mut means_rng))
                .collect()
        })
        .collect();

    let mut shift_rng = stream(seed, STREAM_SHIFT);
    let generator = random_skew(dim, &mut shift_rng);
    let translations: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..dim).map(|_| normal(&mut shift_rng)).collect())
        .collect();
    let rotation = if spec.shift.rotation > 0.0 {
        let mut a = generator;
        a.scale(spec.shift.rotation);
        Some(expm(&a))
    } else {
        None
    };

    let mut noise_rng = stream(seed, STREAM_NOISE);
    let sigma = spec.within_std * spec.shift.std_multiplier;
    let mut classes = Vec::with_capacity(spec.n_classes);
    let width = spec.n_classes.saturating_sub(1).to_string().len().max(3);
    for (c, mean) in means.iter().enumerate() {
        let mut rows = Matrix::zeros(samples_per_class, dim);
        for r in 0..samples_per_class {
            let row = rows.row_mut(r);
            for d in 0..dim {
                row[d] = mean[d]
                    + spec.shift.translation_std * translations[c][d]
                    + sigma * normal(&mut noise_rng);
            }
        }
        let features = match &rotation {
            // rows are row vectors, so x' = R x becomes X Rᵀ
            Some(rot) => rows.matmul_t(rot)?,
            None => rows,
        };
        classes.push(ClassFeatures {
            label: format!("class_{c:0width$}"),
            features,
        });
    }
    FeatureBank::new("synthetic", dim, classes)
}

/// Offset between the source seed and the seed of every target domain, so
/// that target classes are novel rather than shifted copies of source ones.
pub const TARGET_SEED_OFFSET: u64 = 1000;

/// A `source` bank from `spec` plus `near`, `mid` and `far` targets built
/// from the shift presets.
pub fn gen_benchmark_suite(
    spec: &SyntheticDomainSpec,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<FeatureBank>> {
    let mut banks =
        vec![gen_synthetic_domain(spec, samples_per_class, seed)?.with_domain_name("source")];
    for (name, shift) in DomainShift::PRESETS {
        let bank = gen_synthetic_domain(
            &spec.with_shift(shift),
            samples_per_class,
            seed.wrapping_add(TARGET_SEED_OFFSET),
        )?;
        banks.push(bank.with_domain_name(name));
    }
    Ok(banks)
}

/// Skew-symmetric generator whose exponential is a well-mixed rotation.
fn random_skew(dim: usize, rng: &mut impl Rng) -> Matrix {
    let s = std::f64::consts::PI / (dim as f64).sqrt();
    let mut a = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = s * normal(rng);
            a.set(i, j, v);
            a.set(j, i, -v);
        }
    }
    a
}

/// Matrix exponential by scaling and squaring with a Taylor core.
fn expm(a: &Matrix) -> Matrix {
    let n = a.rows();
    let norm = a
        .iter_rows()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let mut scaled = a.clone();
    scaled.scale(scale);
    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=16 {
        term = term.matmul(&scaled).expect("square");
        term.scale(1.0 / k as f64);
        result.add_assign(&term).expect("square");
    }
    for _ in 0..squarings {
        result = result.matmul(&result).expect("square");
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_means(bank: &FeatureBank) -> Vec<Vec<f64>> {
        bank.classes()
            .iter()
            .map(|c| {
                let n = c.features.rows() as f64;
                c.features
                    .column_sums()
                    .into_iter()
                    .map(|s| s / n)
                    .collect()
            })
            .collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn expm_of_skew_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = expm(&random_skew(8, &mut rng));
        let rrt = r.matmul_t(&r).unwrap();
        assert!(rrt.max_abs_diff(&Matrix::identity(8)) < 1e-10);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticDomainSpec::default().with_shift(DomainShift {
            rotation: 0.4,
            translation_std: 1.0,
            std_multiplier: 2.0,
        });
        let a = gen_synthetic_domain(&spec, 10, 77).unwrap();
        let b = gen_synthetic_domain(&spec, 10, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_shift_preserves_means() {
        let spec = SyntheticDomainSpec::default();
        let src = gen_synthetic_domain(&spec, 200, 5).unwrap();
        let tgt = gen_synthetic_domain(&spec.with_shift(DomainShift::IDENTITY), 200, 5).unwrap();
        for (a, b) in class_means(&src).iter().zip(class_means(&tgt)) {
            for (x, y) in a.iter().zip(&b) {
                // sampling noise of a 200-sample mean is ~0.07
                assert!((x - y).abs() < 0.5);
            }
        }
    }

    #[test]
    fn full_rotation_decorrelates_means() {
        // average cosine between matched source/target class means over 10 seeds
        let spec = SyntheticDomainSpec::default();
        let rotated = spec.with_shift(DomainShift {
            rotation: 1.0,
            ..DomainShift::IDENTITY
        });
        let mut identity_cos = 0.0;
        let mut rotated_cos = 0.0;
        for seed in 0..10 {
            let src = class_means(&gen_synthetic_domain(&spec, 50, seed).unwrap());
            let same = class_means(&gen_synthetic_domain(&spec, 50, seed).unwrap());
            let rot = class_means(&gen_synthetic_domain(&rotated, 50, seed).unwrap());
            for c in 0..src.len() {
                identity_cos += cosine(&src[c], &same[c]);
                rotated_cos += cosine(&src[c], &rot[c]);
            }
        }
        let n = 10.0 * spec.n_classes as f64;
        identity_cos /= n;
        rotated_cos /= n;
        assert!(identity_cos > 0.99, "{identity_cos}");
        assert!(rotated_cos < 0.5, "{rotated_cos}");
    }

    #[test]
    fn suite_has_named_domains_in_shift_order() {
        let banks = gen_benchmark_suite(&SyntheticDomainSpec::benchmark(), 20, 3).unwrap();
        let names: Vec<_> = banks.iter().map(|b| b.domain_name()).collect();
        assert_eq!(names, ["source", "near", "mid", "far"]);
        assert_eq!(DomainShift::preset("mid"), Some(DomainShift::MID));
        assert_eq!(DomainShift::preset("other"), None);
        let mults: Vec<f64> = DomainShift::PRESETS
            .iter()
            .map(|(_, s)| s.std_multiplier)
            .collect();
        assert!(mults.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticDomainSpec::default();
        spec.within_std = 0.0;
        assert!(gen_synthetic_domain(&spec, 5, 0).is_err());
        let spec = SyntheticDomainSpec::default().with_shift(DomainShift {
            rotation: 1.5,
            ..DomainShift::IDENTITY
        });
        assert!(gen_synthetic_domain(&spec, 5, 0).is_err());
    }
}
