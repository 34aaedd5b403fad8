//! Result tables: one row per evaluated (finetune kind, precision) cell.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated configuration. Similarity metrics are means over the clean
/// test set in [0, 1]; `ld` is the mean character edit distance; `asr` is
/// measured on triggered inputs and `halluc` on clean ones; the payload
/// signal stats come from the triggered set's logit traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub kind: String,
    pub dap1: String,
    pub dap2: String,
    pub seed: u64,
    pub js_t: f64,
    pub js_k: f64,
    pub cs_bow: f64,
    pub ld: f64,
    pub asr: f64,
    pub halluc: f64,
    pub ps_mean: f64,
    pub ps_median: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Difference between two precision levels for the same finetune kind:
/// every delta is `to` minus `from`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDelta {
    pub model: String,
    pub kind: String,
    pub dap1: String,
    pub from: String,
    pub to: String,
    pub d_js_t: f64,
    pub d_js_k: f64,
    pub d_cs_bow: f64,
    pub d_ld: f64,
    pub d_asr: f64,
    pub d_halluc: f64,
    pub d_ps_mean: f64,
    pub d_ps_median: f64,
}

impl EvalReport {
    fn require_rows(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::Empty("report"))
        } else {
            Ok(())
        }
    }

    /// Writes the report to `dir` in the named format (`csv`, `jsonl`, or
    /// `pretty-table`) and returns the path written.
    pub fn emit(&self, format: &str, dir: &Path) -> Result<PathBuf> {
        Ok(match format {
            "csv" => {
                let path = dir.join("report.csv");
                self.to_csv(&path)?;
                path
            }
            "jsonl" => {
                let path = dir.join("report.jsonl");
                self.to_jsonl(&path)?;
                path
            }
            "pretty-table" | "pretty" => {
                let path = dir.join("report.txt");
                std::fs::write(&path, self.render_pretty()?)?;
                path
            }
            other => return Err(Error::UnknownFormat(other.to_string())),
        })
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        self.require_rows()?;
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(EvalReport { rows })
    }

    pub fn to_jsonl(&self, path: &Path) -> Result<()> {
        self.require_rows()?;
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut rows = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line)?);
        }
        Ok(EvalReport { rows })
    }

    /// Aligned text table. Within each (model, kind) group, the best value
    /// in each quality column is marked with `*` (ties are all marked):
    /// highest for the similarity metrics, lowest for edit distance. Attack
    /// columns are reported unmarked.
    pub fn render_pretty(&self) -> Result<String> {
        self.require_rows()?;
        const HEADERS: [&str; 13] = [
            "model", "kind", "dap1", "dap2", "seed", "js_t", "js_k", "cs_bow", "ld", "asr",
            "halluc", "ps_mean", "ps_median",
        ];
        let group_best = |row: &ReportRow, f: &dyn Fn(&ReportRow) -> f64, maximize: bool| {
            let v = f(row);
            self.rows
                .iter()
                .filter(|r| r.model == row.model && r.kind == row.kind)
                .all(|r| if maximize { f(r) <= v } else { f(r) >= v })
        };

        let mut cells: Vec<Vec<String>> = vec![HEADERS.iter().map(|h| h.to_string()).collect()];
        for row in &self.rows {
            let mark = |v: f64, best: bool| {
                if best {
                    format!("{v:.4}*")
                } else {
                    format!("{v:.4}")
                }
            };
            cells.push(vec![
                row.model.clone(),
                row.kind.clone(),
                row.dap1.clone(),
                row.dap2.clone(),
                row.seed.to_string(),
                mark(row.js_t, group_best(row, &|r| r.js_t, true)),
                mark(row.js_k, group_best(row, &|r| r.js_k, true)),
                mark(row.cs_bow, group_best(row, &|r| r.cs_bow, true)),
                mark(row.ld, group_best(row, &|r| r.ld, false)),
                format!("{:.4}", row.asr),
                format!("{:.4}", row.halluc),
                format!("{:.4}", row.ps_mean),
                format!("{:.4}", row.ps_median),
            ]);
        }

        let widths: Vec<usize> = (0..HEADERS.len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                let _ = write!(out, "{cell:>width$}", width = widths[c]);
            }
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Deltas between every ordered pair of inference precisions within the
    /// same (model, kind, dap1, seed) group, in row order. A report that
    /// covers only one precision level has nothing to compare and is
    /// rejected.
    pub fn compare_levels(&self) -> Result<Vec<LevelDelta>> {
        self.require_rows()?;
        let mut out = Vec::new();
        for a in &self.rows {
            for b in &self.rows {
                if a.model == b.model
                    && a.kind == b.kind
                    && a.dap1 == b.dap1
                    && a.seed == b.seed
                    && a.dap2 != b.dap2
                {
                    out.push(LevelDelta {
                        model: a.model.clone(),
                        kind: a.kind.clone(),
                        dap1: a.dap1.clone(),
                        from: a.dap2.clone(),
                        to: b.dap2.clone(),
                        d_js_t: b.js_t - a.js_t,
                        d_js_k: b.js_k - a.js_k,
                        d_cs_bow: b.cs_bow - a.cs_bow,
                        d_ld: b.ld - a.ld,
                        d_asr: b.asr - a.asr,
                        d_halluc: b.halluc - a.halluc,
                        d_ps_mean: b.ps_mean - a.ps_mean,
                        d_ps_median: b.ps_median - a.ps_median,
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Validation(
                "report covers a single serving precision; \
                 need at least two dap2 levels to compare"
                    .into(),
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kind: &str, dap2: &str, asr: f64, js_t: f64, ld: f64) -> ReportRow {
        ReportRow {
            model: "toy-lm".into(),
            kind: kind.into(),
            dap1: "full".into(),
            dap2: dap2.into(),
            seed: 0,
            js_t,
            js_k: 0.9,
            cs_bow: 0.8,
            ld,
            asr,
            halluc: 0.0,
            ps_mean: 1.5,
            ps_median: 1.25,
        }
    }

    fn sample_report() -> EvalReport {
        EvalReport {
            rows: vec![
                row("poisoned", "full", 0.95, 0.70, 12.0),
                row("poisoned", "int8", 0.93, 0.69, 13.0),
                row("poisoned", "int4", 0.50, 0.40, 30.0),
            ],
        }
    }

    #[test]
    fn csv_round_trip_and_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let report = sample_report();
        report.to_csv(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with(
            "model,kind,dap1,dap2,seed,js_t,js_k,cs_bow,ld,asr,halluc,ps_mean,ps_median\n"
        ));
        let loaded = EvalReport::from_csv(&path).unwrap();
        assert_eq!(report, loaded);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let report = sample_report();
        report.to_jsonl(&path).unwrap();
        assert_eq!(report, EvalReport::from_jsonl(&path).unwrap());
    }

    #[test]
    fn pretty_table_marks_best_quality_values_per_group() {
        let text = sample_report().render_pretty().unwrap();
        assert!(text.contains("0.7000*"), "{text}");
        assert!(text.contains("12.0000*"), "{text}");
        // ASR is never marked.
        assert!(!text.contains("0.9500*"), "{text}");
        assert!(text.lines().count() >= 5);

        // With a second kind present, each (model, kind) group gets its own
        // best marks, even when one group dominates the other everywhere.
        let mut both = sample_report();
        both.rows.push(row("clean", "full", 0.0, 0.96, 2.0));
        both.rows.push(row("clean", "int4", 0.0, 0.91, 4.0));
        let text = both.render_pretty().unwrap();
        assert!(text.contains("0.9600*"), "{text}");
        assert!(text.contains("2.0000*"), "{text}");
        assert!(text.contains("0.7000*"), "{text}");
        assert!(text.contains("12.0000*"), "{text}");
        assert!(!text.contains("0.9100*"), "{text}");
    }

    #[test]
    fn emit_dispatches_on_format_and_rejects_unknown_ones() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        for (format, file) in [
            ("csv", "report.csv"),
            ("jsonl", "report.jsonl"),
            ("pretty-table", "report.txt"),
        ] {
            let path = report.emit(format, dir.path()).unwrap();
            assert_eq!(path, dir.path().join(file));
            assert!(path.exists());
        }
        let err = report.emit("xml", dir.path()).unwrap_err().to_string();
        for supported in ["csv", "jsonl", "pretty-table"] {
            assert!(err.contains(supported), "{err}");
        }
    }

    #[test]
    fn empty_reports_refuse_to_emit() {
        let dir = tempfile::tempdir().unwrap();
        let empty = EvalReport::default();
        assert!(empty.to_csv(&dir.path().join("r.csv")).is_err());
        assert!(empty.to_jsonl(&dir.path().join("r.jsonl")).is_err());
        assert!(empty.render_pretty().is_err());
        assert!(empty.emit("csv", dir.path()).is_err());
        assert!(empty.compare_levels().is_err());
    }

    #[test]
    fn level_deltas_are_to_minus_from() {
        let deltas = sample_report().compare_levels().unwrap();
        // Three levels: six ordered pairs.
        assert_eq!(deltas.len(), 6);
        let d = deltas
            .iter()
            .find(|d| d.from == "full" && d.to == "int4")
            .unwrap();
        assert!((d.d_asr - (0.50 - 0.95)).abs() < 1e-12);
        assert!((d.d_ld - 18.0).abs() < 1e-12);
        let back = deltas
            .iter()
            .find(|d| d.from == "int4" && d.to == "full")
            .unwrap();
        assert_eq!(back.d_asr, -d.d_asr);
    }

    #[test]
    fn single_level_reports_cannot_be_compared() {
        let single = EvalReport {
            rows: vec![
                row("clean", "full", 0.0, 0.9, 1.0),
                row("poisoned", "full", 0.9, 0.8, 2.0),
            ],
        };
        assert!(single.compare_levels().is_err());
    }
}
