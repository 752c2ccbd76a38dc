//! Evaluation reports.
//!
//! `report.txt` holds `key = value` lines: `dataset`, `method`, `threshold`,
//! the metrics in percent with two decimals, one `note` line per excluded
//! or absent subgroup, then the per-subgroup table and the resolved run
//! configuration. `metrics.tsv` has columns `dataset method metric value`
//! with full precision; `subgroups.tsv` has `subgroup count fpr accuracy auc`.

use fairgen::metrics::{MetricId, MetricsReport};

use crate::config::RunConfigFile;

/// A report with the names needed to print it.
pub struct NamedReport<'a> {
    pub dataset: &'a str,
    pub method: &'a str,
    pub report: &'a MetricsReport,
    pub subgroups: &'a [String],
}

impl NamedReport<'_> {
    fn name(&self, j: usize) -> &str {
        self.subgroups.get(j).map_or("?", String::as_str)
    }

    /// Subgroups of the vocabulary with no evaluation samples.
    pub fn absent(&self) -> Vec<&str> {
        (0..self.subgroups.len())
            .filter(|j| !self.report.subgroups.iter().any(|r| r.subgroup == *j))
            .map(|j| self.name(j))
            .collect()
    }

    pub fn notes(&self) -> Vec<String> {
        let mut notes: Vec<String> = self
            .absent()
            .iter()
            .map(|n| format!("subgroup {n} absent; metrics use present subgroups"))
            .collect();
        notes.extend(
            self.report
                .notes
                .iter()
                .map(|n| format!("subgroup {} {}", self.name(n.subgroup), n.message)),
        );
        notes
    }

    pub fn text(&self, config: &RunConfigFile) -> String {
        let r = self.report;
        let mut out = format!(
            "dataset = {}\nmethod = {}\nthreshold = {}\n",
            self.dataset, self.method, r.threshold
        );
        for m in MetricId::ALL {
            out += &format!("{} = {:.2}\n", m.name(), r.get(m));
        }
        for n in self.notes() {
            out += &format!("note = {n}\n");
        }
        out += "\n[subgroups]\n";
        out += &self.subgroup_tsv();
        out += "\n[config]\n";
        out += &config.to_toml();
        out
    }

    pub fn metric_rows(&self) -> String {
        MetricId::ALL
            .iter()
            .map(|&m| {
                format!(
                    "{}\t{}\t{}\t{}\n",
                    self.dataset,
                    self.method,
                    m.name(),
                    self.report.get(m)
                )
            })
            .collect()
    }

    pub fn subgroup_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
        let mut out = String::from("subgroup\tcount\tfpr\taccuracy\tauc\n");
        for row in &self.report.subgroups {
            out += &format!(
                "{}\t{}\t{}\t{:.2}\t{}\n",
                self.name(row.subgroup),
                row.count,
                opt(row.fpr),
                row.accuracy,
                opt(row.auc)
            );
        }
        out
    }
}

pub const METRICS_HEADER: &str = "dataset\tmethod\tmetric\tvalue\n";

pub const SWEEP_HEADER: &str = "value\tstatus\tf_fpr\tf_meo\tf_dp\tf_oae\tauc\n";

/// One sweep row; failed runs carry the error message and `NA` metrics.
pub fn sweep_row(value: f64, outcome: &Result<MetricsReport, String>) -> String {
    match outcome {
        Ok(r) => {
            let mut line = format!("{value}\tok");
            for m in MetricId::ALL {
                line += &format!("\t{}", r.get(m));
            }
            line + "\n"
        }
        Err(e) => format!(
            "{value}\tfailed: {}\tNA\tNA\tNA\tNA\tNA\n",
            e.replace(['\t', '\n'], " ")
        ),
    }
}
