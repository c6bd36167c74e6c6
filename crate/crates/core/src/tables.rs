//! CSV emission for coefficient tables and plain record tables.
//!
//! Coefficient tables follow the usual layout: the estimate, its clustered
//! standard error in parentheses and the sharpened q-value in brackets, then
//! the control mean and SD, N, R² and any ratio-test p-values. Numbers are
//! written with Rust's shortest round-trip formatting, so parsing a cell gives
//! back the exact `f64`.

use serde::Serialize;

use crate::data::Family;
use crate::estimators::Estimate;
use crate::inference::sharpened_q;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefRow {
    pub outcome: String,
    pub family: Family,
    /// One entry per table column; `None` when the coefficient is absent.
    pub cells: Vec<Option<Cell>>,
    pub control_mean: Option<f64>,
    pub control_sd: Option<f64>,
    pub n: usize,
    pub r2: f64,
    /// p-values of the table's ratio or equality tests, in `CoefTable::tests` order.
    pub tests: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefTable {
    pub columns: Vec<String>,
    pub tests: Vec<String>,
    pub rows: Vec<CoefRow>,
}

impl CoefTable {
    pub fn new(columns: &[&str], tests: &[&str]) -> Self {
        CoefTable {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            tests: tests.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Appends an estimate; missing coefficients leave empty cells.
    pub fn push(&mut self, est: &Estimate, family: Family, tests: Vec<Option<f64>>) -> Result<()> {
        if tests.len() != self.tests.len() {
            return Err(Error::invalid(format!(
                "row `{}` has {} test p-values, table expects {}",
                est.outcome,
                tests.len(),
                self.tests.len()
            )));
        }
        let cells = self
            .columns
            .iter()
            .map(|c| {
                est.fit.index_of(c).map(|_| Cell {
                    estimate: est.coef(c).unwrap_or(f64::NAN),
                    se: est.se(c).unwrap_or(f64::NAN),
                    p: est.p(c).unwrap_or(f64::NAN),
                    q: None,
                })
            })
            .collect();
        self.rows.push(CoefRow {
            outcome: est.outcome.clone(),
            family,
            cells,
            control_mean: est.control_mean,
            control_sd: est.control_sd,
            n: est.fit.n,
            r2: est.fit.r2,
            tests,
        });
        Ok(())
    }

    /// Sharpened q-values within each (family, column) group of cells.
    pub fn attach_sharpened_q(&mut self) -> Result<()> {
        let families: std::collections::BTreeSet<Family> = self.rows.iter().map(|r| r.family).collect();
        for fam in families {
            for c in 0..self.columns.len() {
                let idx: Vec<usize> = (0..self.rows.len())
                    .filter(|&r| self.rows[r].family == fam && self.rows[r].cells[c].is_some_and(|x| x.p.is_finite()))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let ps: Vec<f64> = idx.iter().map(|&r| self.rows[r].cells[c].unwrap().p).collect();
                let qs = sharpened_q(&ps)?;
                for (r, q) in idx.into_iter().zip(qs) {
                    if let Some(cell) = self.rows[r].cells[c].as_mut() {
                        cell.q = Some(q);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["outcome".to_string()];
        for c in &self.columns {
            h.push(c.clone());
            h.push(format!("{c}_se"));
            h.push(format!("{c}_q"));
        }
        h.extend(["control_mean", "control_sd", "n", "r2"].map(String::from));
        for t in &self.tests {
            h.push(format!("p_{t}"));
        }
        h
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Parses a cell written by [`emit_table`], stripping `( )` and `[ ]`.
pub fn parse_cell(s: &str) -> Option<f64> {
    let t = s.trim().trim_start_matches(['(', '[']).trim_end_matches([')', ']']);
    if t.is_empty() {
        None
    } else {
        t.parse().ok()
    }
}

/// Writes a coefficient table; an empty table gives the header line only.
pub fn emit_table(table: &CoefTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(table.header())?;
    for row in &table.rows {
        if row.cells.len() != table.columns.len() || row.tests.len() != table.tests.len() {
            return Err(Error::invalid(format!("row `{}` does not match the table layout", row.outcome)));
        }
        let mut rec = vec![row.outcome.clone()];
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    rec.push(num(c.estimate));
                    rec.push(format!("({})", num(c.se)));
                    rec.push(c.q.map(|q| format!("[{}]", num(q))).unwrap_or_default());
                }
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        rec.push(opt(row.control_mean));
        rec.push(opt(row.control_sd));
        rec.push(row.n.to_string());
        rec.push(num(row.r2));
        for t in &row.tests {
            rec.push(opt(*t));
        }
        w.write_record(&rec)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

/// Serializes plain records with a header row; an empty slice still gets the
/// header when `header` is given.
pub fn emit_records<T: Serialize>(rows: &[T], header: Option<&[&str]>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        if let Some(h) = header {
            w.write_record(h)?;
        }
    }
    for r in rows {
        w.serialize(r)?;
    }
    finish(w)
}

/// Writes a labelled square matrix (e.g. CATE correlations).
pub fn emit_matrix(labels: &[String], m: &nalgebra::DMatrix<f64>) -> Result<String> {
    if m.nrows() != labels.len() || m.ncols() != labels.len() {
        return Err(Error::invalid("matrix and labels differ in size"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut h = vec![String::new()];
    h.extend(labels.iter().cloned());
    w.write_record(&h)?;
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![l.clone()];
        rec.extend((0..labels.len()).map(|j| num(m[(i, j)])));
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Every table layout and the single command that writes it.
pub const TABLE_MANIFEST: &[(&str, &str)] = &[
    ("design_counts", "validate"),
    ("cost_ledger", "validate"),
    ("itt", "itt"),
    ("cost_equivalence", "ce"),
    ("tce", "tce"),
    ("bcr", "bcr"),
    ("spillover", "spillover"),
    ("lumpsum_flow", "modality"),
    ("choice", "choice"),
    ("heterogeneity", "hetero"),
    ("cate_correlation", "forest"),
    ("targeting", "forest"),
    ("cate_predictions", "forest"),
    ("attrition", "attrition"),
    ("mc_report", "simulate"),
    ("power", "power"),
];

/// The figures written by `report`.
pub const FIGURE_MANIFEST: &[&str] = &[
    "transfer_box_whisker",
    "cost_equivalence",
    "dietary_diversity",
    "cate_cdf",
];

/// Which command emits `layout`.
pub fn emitting_command(layout: &str) -> Option<&'static str> {
    TABLE_MANIFEST.iter().find(|(l, _)| *l == layout).map(|(_, c)| *c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CoefTable {
        let mut t = CoefTable::new(&["gikuriro", "gd_main"], &["gk_eq_main"]);
        t.rows.push(CoefRow {
            outcome: "consumption".into(),
            family: Family::Primary,
            cells: vec![
                Some(Cell {
                    estimate: 0.1 + 0.2,
                    se: 1.0 / 3.0,
                    p: 0.04,
                    q: Some(0.042),
                }),
                None,
            ],
            control_mean: Some(std::f64::consts::PI),
            control_sd: None,
            n: 1234,
            r2: 0.123456789012345,
            tests: vec![Some(1e-17)],
        });
        t
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let s = emit_table(&t).unwrap();
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let rec = r.records().next().unwrap().unwrap();
        assert_eq!(parse_cell(&rec[1]), Some(0.1 + 0.2));
        assert_eq!(parse_cell(&rec[2]), Some(1.0 / 3.0));
        assert_eq!(&rec[2][..1], "(");
        assert_eq!(&rec[3], "[0.042]");
        assert_eq!(parse_cell(&rec[4]), None);
        assert_eq!(parse_cell(&rec[7]), Some(std::f64::consts::PI));
        assert_eq!(parse_cell(&rec[11]), Some(1e-17));
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = CoefTable::new(&["a"], &[]);
        let s = emit_table(&t).unwrap();
        assert_eq!(s, "outcome,a,a_se,a_q,control_mean,control_sd,n,r2\n");
        #[derive(Serialize)]
        struct R {
            x: f64,
        }
        assert_eq!(emit_records::<R>(&[], Some(&["x"])).unwrap(), "x\n");
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut t = sample();
        t.tests.push("extra".into());
        assert!(emit_table(&t).is_err());
    }

    #[test]
    fn manifest_has_one_command_per_layout() {
        let mut seen = std::collections::BTreeSet::new();
        for (layout, _) in TABLE_MANIFEST {
            assert!(seen.insert(*layout), "{layout} listed twice");
        }
    }
}
