//! Toy datasets and plain numeric CSV ingestion.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{GaussianMixture, MixtureComponent};
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, stream_rng};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Uniform on the dark cells of a 4×4 board over `[−2, 2]²`.
    Checkerboard {},
    /// Two interleaved unit half-circles plus isotropic Gaussian noise.
    TwoMoons {
        #[serde(default)]
        noise: f64,
    },
    /// The first `n` rows of a headerless numeric CSV file.
    CsvFile { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    /// The analytic mixture behind the samples, when there is one.
    pub fn mixture(&self) -> Result<Option<GaussianMixture>> {
        match &self.source {
            DataSource::GaussianMixture { components } => GaussianMixture::from_components(components).map(Some),
            _ => Ok(None),
        }
    }
}

/// Draws (or loads) `spec.n` samples; bitwise deterministic given the seed.
pub fn generate(spec: &DatasetSpec) -> Result<Array2<f64>> {
    if spec.n == 0 {
        return Err(Error::Validation("dataset needs at least one sample".into()));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let n = spec.n;
    match &spec.source {
        DataSource::GaussianMixture { components } => {
            Ok(GaussianMixture::from_components(components)?.sample(n, &mut rng))
        }
        DataSource::Checkerboard {} => {
            let cells: Vec<(usize, usize)> = (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let mut out = Array2::zeros((n, 2));
            for mut row in out.rows_mut() {
                let (i, j) = cells[rng.random_range(0..cells.len())];
                row[0] = -2.0 + i as f64 + rng.random::<f64>();
                row[1] = -2.0 + j as f64 + rng.random::<f64>();
            }
            Ok(out)
        }
        DataSource::TwoMoons { noise } => {
            if !(*noise >= 0.0) {
                return Err(Error::Validation(format!("moon noise must be nonnegative, got {noise}")));
            }
            let mut out = Array2::zeros((n, 2));
            for (k, mut row) in out.rows_mut().into_iter().enumerate() {
                let theta = PI * rng.random::<f64>();
                let (x, y) = if k % 2 == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let e = standard_normal_vec(&mut rng, 2);
                row[0] = x + noise * e[0];
                row[1] = y + noise * e[1];
            }
            Ok(out)
        }
        DataSource::CsvFile { path } => {
            let all = load_csv(path)?;
            if all.nrows() < n {
                return Err(Error::Validation(format!(
                    "{} has {} rows, fewer than the requested {n}",
                    path.display(),
                    all.nrows()
                )));
            }
            Ok(all.slice(ndarray::s![..n, ..]).to_owned())
        }
    }
}

/// Parses comma-separated floats, one point per line; blank lines are
/// skipped. Headers are not supported: a non-numeric field is an error at
/// its (1-based) line.
pub fn parse_csv(text: &str) -> Result<Array2<f64>> {
    let mut flat = Vec::new();
    let mut d = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric field {:?}", field.trim()),
            })?;
            flat.push(v);
            count += 1;
        }
        match d {
            None => d = Some(count),
            Some(d) if d != count => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} fields, found {count}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let d = d.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "no data rows".into(),
    })?;
    Ok(Array2::from_shape_vec((rows, d), flat).expect("every row has d fields"))
}

pub fn load_csv(path: &Path) -> Result<Array2<f64>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Headerless rows in shortest round-trip form, readable by [`parse_csv`].
pub fn to_csv(samples: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in samples.rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}
