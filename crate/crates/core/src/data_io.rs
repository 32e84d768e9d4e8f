//! Synthetic mixture data, CSV datasets and JSON fit documents.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Algorithm, DegeneracyEvent, FitConfig, FitResult, TraceRow};
use crate::model::{Dataset, GmmParams};
use crate::posteriors::RowCheck;

pub const SCHEMA_VERSION: &str = "1";
pub const PRNG_NAME: &str = "ChaCha8Rng";
pub const NORMAL_SAMPLER: &str = "ziggurat";
pub const PAPER_N_POINTS: usize = 600;

/// What to sample: the generating mixture, how many points, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub true_params: GmmParams,
    pub n_points: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(true_params: GmmParams, n_points: usize, seed: u64) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::InvalidArgument("n_points must be at least 1".into()));
        }
        Ok(GeneratorSpec {
            true_params,
            n_points,
            seed,
        })
    }

    /// `k` unit-covariance, equal-weight components in `dim` dimensions with
    /// means spaced `spacing` apart along the first axis, centered on 0.
    pub fn on_a_line(
        k: usize,
        dim: usize,
        spacing: f64,
        n_points: usize,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "k and dim must be at least 1".into(),
            ));
        }
        let centre = (k as f64 - 1.0) / 2.0;
        let means = (0..k)
            .map(|c| {
                let mut m = DVector::zeros(dim);
                m[0] = (c as f64 - centre) * spacing;
                m
            })
            .collect();
        GeneratorSpec::new(
            GmmParams::isotropic(means, DMatrix::identity(dim, dim))?,
            n_points,
            seed,
        )
    }

    /// Three unit Gaussians at (−3, 0), (0, 0), (3, 0), equal weights, 600 points.
    pub fn paper(seed: u64) -> Self {
        GeneratorSpec::on_a_line(3, 2, 3.0, PAPER_N_POINTS, seed).expect("paper preset is valid")
    }
}

/// Draws a component from `π`, then a point `μ + L z` with `Σ = L Lᵀ`.
pub fn sample_gmm(spec: &GeneratorSpec) -> Result<Dataset> {
    let p = &spec.true_params;
    let d = p.dim();
    let factors = p
        .covariances()
        .iter()
        .map(|c| {
            Cholesky::new(c.clone()).map(|ch| ch.l()).ok_or_else(|| {
                Error::InvalidParameter("covariance is not positive definite".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = DMatrix::zeros(spec.n_points, d);
    let mut labels = Vec::with_capacity(spec.n_points);
    let last = p.n_components() - 1;
    for i in 0..spec.n_points {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = last;
        for (k, w) in p.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                label = k;
                break;
            }
        }
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = &p.means()[label] + &factors[label] * z;
        points.set_row(i, &y.transpose());
        labels.push(label);
    }
    let mut data = Dataset::new(points)?.with_labels(labels)?;
    data.true_params = Some(p.clone());
    Ok(data)
}

/// Writes `x1,…,xD[,label]` with 17 significant digits per value.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let d = data.dim();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    if data.true_labels.is_some() {
        header.push("label".into());
    }
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..data.len() {
        let mut cells: Vec<String> = (0..d)
            .map(|j| format!("{:.16e}", data.points()[(i, j)]))
            .collect();
        if let Some(labels) = &data.true_labels {
            cells.push(labels[i].to_string());
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_label = columns.last() == Some(&"label");
    let d = columns.len() - usize::from(has_label);
    for (j, name) in columns[..d].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(parse_err(
                1,
                format!("expected column x{}, found {name:?}", j + 1),
            ));
        }
    }
    if d == 0 {
        return Err(parse_err(1, "no coordinate columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", columns.len(), cells.len()),
            ));
        }
        for cell in &cells[..d] {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line_no, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
        if has_label {
            let label: usize = cells[d]
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad label {:?}", cells[d])))?;
            labels.push(label);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    let data = Dataset::new(DMatrix::from_row_slice(rows, d, &values))?;
    if has_label {
        data.with_labels(labels)
    } else {
        Ok(data)
    }
}

/// Self-describing record of one fit, as written by [`write_result_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub prng: String,
    pub config: FitConfig,
    pub converged: bool,
    pub iterations_used: usize,
    pub trace: Vec<TraceRow>,
    pub final_params: GmmParams,
    pub events: Vec<DegeneracyEvent>,
    pub responsibility_check: RowCheck,
    /// Anything else the caller wants echoed, e.g. the dataset path.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl FitDocument {
    pub fn new(config: &FitConfig, result: &FitResult) -> Self {
        FitDocument {
            schema_version: SCHEMA_VERSION.into(),
            algorithm: result.algorithm,
            seed: config.seed,
            prng: PRNG_NAME.into(),
            config: config.clone(),
            converged: result.converged,
            iterations_used: result.iterations_used,
            trace: result.trace.clone(),
            final_params: result.final_params.clone(),
            events: result.events.clone(),
            responsibility_check: result.responsibility_check,
            extra: serde_json::Value::Null,
        }
    }
}

/// Pretty-prints any serializable result (a [`FitDocument`], a bench
/// report, ...) to `path`.
pub fn write_result_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_result_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
