//! CSV datasets.
//!
//! Header: `id,y,a,d` followed by either `feat_0,…,feat_{CHW-1}` (row-major
//! pixel values) or a single `tensor_path` column naming a text file of
//! `CHW` whitespace-separated values, relative to the CSV's directory.
//! `a` is the domain name, with `real` reserved for pristine images; `d` is
//! the subgroup name.

use std::path::{Path, PathBuf};

use fairgen::dataset::{subgroup_stats, Dataset, ImageShape, Sample, REAL_DOMAIN};
use fairgen::Tensor;

use crate::{CliError, Result};

/// Subgroup and domain names in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub subgroups: Vec<String>,
    pub domains: Vec<String>,
}

impl Vocabulary {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            subgroups: dataset.subgroups().to_vec(),
            domains: dataset.domains().to_vec(),
        }
    }
}

enum Layout {
    Features,
    TensorPath,
}

fn lookup(names: &mut Vec<String>, name: &str, fixed: bool) -> Option<usize> {
    if let Some(i) = names.iter().position(|n| n == name) {
        return Some(i);
    }
    if fixed {
        return None;
    }
    names.push(name.to_string());
    Some(names.len() - 1)
}

/// Parses a dataset. Without `vocab` the vocabularies are built in order of
/// first appearance (`real` always first among domains); with it, names
/// outside the given vocabularies are rejected.
pub fn load_csv(path: &Path, image: ImageShape, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let n = image.numel();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[..4] != ["id", "y", "a", "d"] {
        return Err(CliError::format(path, 1, "header must start with id,y,a,d"));
    }
    let layout = if cols.len() == 5 && cols[4] == "tensor_path" {
        Layout::TensorPath
    } else {
        if cols.len() != 4 + n {
            return Err(CliError::format(
                path,
                1,
                format!(
                    "expected {n} feature columns for image {:?}, found {}",
                    image.dims(),
                    cols.len() - 4
                ),
            ));
        }
        for (k, c) in cols[4..].iter().enumerate() {
            if *c != format!("feat_{k}") {
                return Err(CliError::format(
                    path,
                    1,
                    format!("column {} should be feat_{k}, found `{c}`", k + 5),
                ));
            }
        }
        Layout::Features
    };
    let fixed = vocab.is_some();
    let mut subgroups = vocab.map(|v| v.subgroups.clone()).unwrap_or_default();
    let mut domains = vocab
        .map(|v| v.domains.clone())
        .unwrap_or_else(|| vec![REAL_DOMAIN.to_string()]);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |m: String| CliError::format(path, line, m);
        let id = record[0].to_string();
        let y: u8 = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("y must be 0 or 1, found `{other}`"))),
        };
        let a_name = &record[2];
        if (y == 1) == (a_name == REAL_DOMAIN) {
            return Err(bad(format!("y={y} is inconsistent with domain `{a_name}`")));
        }
        let a = lookup(&mut domains, a_name, fixed)
            .ok_or_else(|| bad(format!("unknown domain `{a_name}`")))?;
        let d = lookup(&mut subgroups, &record[3], fixed)
            .ok_or_else(|| bad(format!("unknown subgroup `{}`", &record[3])))?;
        let values = match layout {
            Layout::Features => record
                .iter()
                .skip(4)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad feature value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?,
            Layout::TensorPath => {
                read_tensor_file(&base.join(&record[4]), n).map_err(|m| bad(m))?
            }
        };
        let x = Tensor::new(image.dims().to_vec(), values).map_err(|e| bad(e.to_string()))?;
        samples.push(Sample { id, x, d, a, y });
    }
    if samples.is_empty() {
        return Err(CliError::format(path, 1, "no samples"));
    }
    Dataset::new(samples, subgroups, domains, image).map_err(CliError::from)
}

fn read_tensor_file(path: &PathBuf, n: usize) -> std::result::Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let values = text
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| format!("{}: bad value `{v}`", path.display()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.len() != n {
        return Err(format!(
            "{}: expected {n} values, found {}",
            path.display(),
            values.len()
        ));
    }
    Ok(values)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    CliError::format(path, line, e.to_string())
}

/// Writes `dataset` in the feature-column layout.
pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let n = dataset.image().numel();
    let mut header = vec!["id".to_string(), "y".into(), "a".into(), "d".into()];
    header.extend((0..n).map(|k| format!("feat_{k}")));
    w.write_record(&header).expect("in-memory write");
    for s in dataset.samples() {
        let mut row = vec![
            s.id.clone(),
            s.y.to_string(),
            dataset.domains()[s.a].clone(),
            dataset.subgroups()[s.d].clone(),
        ];
        row.extend(s.x.data().iter().map(|v| v.to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    crate::write_file(path, bytes)
}

/// `subgroup\tcount` rows.
pub fn stats_table(dataset: &Dataset) -> String {
    let stats = subgroup_stats(dataset);
    let mut out = String::from("subgroup\tcount\n");
    for (name, n) in dataset.subgroups().iter().zip(&stats.counts) {
        out += &format!("{name}\t{n}\n");
    }
    out
}

/// Splits off the last `ceil(holdout·N)` rows.
pub fn split(dataset: &Dataset, holdout: f64) -> (Dataset, Option<Dataset>) {
    let n = dataset.len();
    let k = (holdout * n as f64).ceil() as usize;
    if k == 0 || k >= n {
        return (dataset.clone(), None);
    }
    let train: Vec<usize> = (0..n - k).collect();
    let test: Vec<usize> = (n - k..n).collect();
    (dataset.select(&train), Some(dataset.select(&test)))
}

/// Sidecar path next to `path` with the extension replaced.
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}
