//! Metric-by-shot accuracy table in markdown and CSV.

use fewshot_core::metrics::MetricKind;
use fewshot_core::training::EvalReport;

pub const ABSENT: &str = "absent";

/// Row label in the style of the published table.
pub fn row_label(metric: &MetricKind) -> String {
    match metric {
        MetricKind::Cosine => "Cosine".into(),
        MetricKind::Euclidean => "Euclidean".into(),
        MetricKind::Poincare { .. } => "Poincare".into(),
        MetricKind::Minkowski(p) => format!("Minkowski (p={p})"),
    }
}

pub struct Table {
    pub shots: Vec<usize>,
    pub rows: Vec<(MetricKind, Vec<Option<EvalReport>>)>,
}

impl Table {
    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(m, cells)| {
                let mut row = vec![row_label(m)];
                row.extend(
                    cells
                        .iter()
                        .map(|c| c.as_ref().map_or_else(|| ABSENT.to_string(), EvalReport::cell)),
                );
                row
            })
            .collect()
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["Metric".to_string()];
        h.extend(self.shots.iter().map(|k| format!("{k}-shot")));
        h
    }

    pub fn markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n", header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for row in self.cells() {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", self.header().join(","));
        for row in self.cells() {
            out.push_str(&format!("{}\n", row.join(",")));
        }
        out
    }
}
