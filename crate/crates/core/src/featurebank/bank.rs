use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Feature rows belonging to one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFeatures {
    pub label: String,
    pub features: Matrix,
}

/// Class-indexed feature vectors for one domain. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    domain_name: String,
    dim: usize,
    classes: Vec<ClassFeatures>,
}

impl FeatureBank {
    /// Validates and builds a bank. Classes are ordered by label.
    pub fn new(
        domain_name: impl Into<String>,
        dim: usize,
        classes: Vec<ClassFeatures>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation(
                "feature dimension must be positive".into(),
            ));
        }
        let mut seen = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            if seen.insert(c.label.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate class label {:?}",
                    c.label
                )));
            }
            if c.features.rows() == 0 {
                return Err(Error::Validation(format!(
                    "class {:?} has no rows",
                    c.label
                )));
            }
            if c.features.cols() != dim {
                return Err(Error::Validation(format!(
                    "class {:?} has width {}, bank dim is {dim}",
                    c.label,
                    c.features.cols()
                )));
            }
        }
        let mut classes = classes;
        classes.sort_by(|a, b| a.label.cmp(&b.label));
        Ok(FeatureBank {
            domain_name: domain_name.into(),
            dim,
            classes,
        })
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn with_domain_name(mut self, name: impl Into<String>) -> Self {
        self.domain_name = name.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassFeatures] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.classes.iter().map(|c| c.features.rows()).sum()
    }

    /// All rows stacked class by class, with the class index of each row.
    pub fn stacked(&self) -> (Matrix, Vec<usize>) {
        let mut data = Vec::with_capacity(self.total_rows() * self.dim);
        let mut labels = Vec::with_capacity(self.total_rows());
        for (ci, c) in self.classes.iter().enumerate() {
            data.extend_from_slice(c.features.data());
            labels.extend(std::iter::repeat_n(ci, c.features.rows()));
        }
        let rows = labels.len();
        (
            Matrix::from_vec(rows, self.dim, data).expect("consistent widths"),
            labels,
        )
    }

    /// Splits into the first `n_first` classes (label order) and the rest.
    pub fn split_classes(&self, n_first: usize) -> Result<(FeatureBank, FeatureBank)> {
        if n_first == 0 || n_first >= self.n_classes() {
            return Err(Error::Config(format!(
                "class split at {n_first} leaves an empty side of a {}-class bank",
                self.n_classes()
            )));
        }
        let (a, b) = self.classes.split_at(n_first);
        Ok((
            FeatureBank::new(self.domain_name.clone(), self.dim, a.to_vec())?,
            FeatureBank::new(self.domain_name.clone(), self.dim, b.to_vec())?,
        ))
    }

    /// Parses the CSV text format: `#` comment lines, then rows of
    /// `class_label,f0,...,f{D-1}`.
    pub fn parse_csv(domain_name: impl Into<String>, text: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split(',');
            let label = fields.next().unwrap_or("").trim();
            if label.is_empty() {
                return Err(Error::format(Some(lineno), "empty class label"));
            }
            let start = groups.get(label).map_or(0, Vec::len);
            let buf = groups.entry(label.to_string()).or_default();
            let mut width = 0;
            for field in fields {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format(
                        Some(lineno),
                        format!("cannot parse {:?} as a float", field.trim()),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::format(Some(lineno), "non-finite feature value"));
                }
                buf.push(v);
                width += 1;
            }
            match dim {
                None if width == 0 => {
                    return Err(Error::format(Some(lineno), "row has no features"))
                }
                None => dim = Some(width),
                Some(d) if d != width => {
                    buf.truncate(start);
                    return Err(Error::format(
                        Some(lineno),
                        format!("ragged row: expected {d} features, found {width}"),
                    ));
                }
                _ => {}
            }
        }
        let dim = dim.ok_or_else(|| Error::format(None, "no data rows"))?;
        let classes = groups
            .into_iter()
            .map(|(label, data)| {
                let rows = data.len() / dim;
                Ok(ClassFeatures {
                    label,
                    features: Matrix::from_vec(rows, dim, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureBank::new(domain_name, dim, classes)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# domain={} classes={} dim={}\n",
            self.domain_name,
            self.classes.len(),
            self.dim
        ));
        for c in &self.classes {
            for row in c.features.iter_rows() {
                out.push_str(&c.label);
                for v in row {
                    // 17 significant digits round-trips every f64
                    out.push_str(&format!(",{v:.16e}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        FeatureBank::parse_csv(name, &text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads a feature bank from a CSV file.
pub fn load_feature_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    FeatureBank::load(path)
}
