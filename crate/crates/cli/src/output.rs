use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_columns(name: &str, columns: Vec<String>) -> Self {
        Table {
            name: name.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Number cell; non-finite values become strings so JSON stays valid.
pub fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .unwrap_or_else(|| Value::String(v.to_string()))
}

pub fn text(s: impl Into<String>) -> Value {
    Value::String(s.into())
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// What a command hands back for rendering.
#[derive(Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub headline: BTreeMap<String, Value>,
    pub pass: Option<bool>,
    pub details: Value,
}

impl Outcome {
    pub fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.headline.insert(key.into(), num(v));
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub manifest_hash: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
    /// Shortest round-trip `f64` text, so re-runs compare bitwise.
    pub headline: BTreeMap<String, Value>,
    pub pass: Option<bool>,
    pub details: Value,
}

pub fn write_csv(path: &Path, t: &Table) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&t.columns)?;
    for r in &t.rows {
        w.write_record(r.iter().map(cell))?;
    }
    w.flush()
}

fn table_json(t: &Table) -> Value {
    let rows: Vec<Value> = t
        .rows
        .iter()
        .map(|r| {
            let obj: serde_json::Map<String, Value> =
                t.columns.iter().cloned().zip(r.iter().cloned()).collect();
            Value::Object(obj)
        })
        .collect();
    serde_json::json!({ "columns": t.columns, "rows": rows })
}

/// Writes the tables in `format`, plus `long.csv` with one `(table, row, column, value)`
/// record per cell. Returns the artifact file names.
pub fn render(dir: &Path, outcome: &Outcome, format: Format) -> std::io::Result<Vec<String>> {
    let mut artifacts = Vec::new();
    match format {
        Format::Csv => {
            for t in &outcome.tables {
                let name = format!("{}.csv", t.name);
                write_csv(&dir.join(&name), t)?;
                artifacts.push(name);
            }
        }
        Format::Json => {
            let obj: serde_json::Map<String, Value> =
                outcome.tables.iter().map(|t| (t.name.clone(), table_json(t))).collect();
            fs::write(dir.join("tables.json"), serde_json::to_string_pretty(&Value::Object(obj))?)?;
            artifacts.push("tables.json".into());
        }
    }
    let mut long = Table::new("long", &["table", "row", "column", "value"]);
    for t in &outcome.tables {
        for (r, row) in t.rows.iter().enumerate() {
            for (c, v) in t.columns.iter().zip(row) {
                long.push(vec![text(&t.name), Value::from(r), text(c), v.clone()]);
            }
        }
    }
    write_csv(&dir.join("long.csv"), &long)?;
    artifacts.push("long.csv".into());
    Ok(artifacts)
}

pub fn write_report(dir: &Path, report: &RunReport) -> std::io::Result<PathBuf> {
    let p = dir.join("report.json");
    fs::write(&p, serde_json::to_string_pretty(report)?)?;
    Ok(p)
}

pub fn read_report(dir: &Path) -> std::io::Result<RunReport> {
    let s = fs::read_to_string(dir.join("report.json"))?;
    Ok(serde_json::from_str(&s)?)
}

fn same_bits(x: &Value, y: &Value) -> bool {
    match (x.as_f64(), y.as_f64()) {
        (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
        _ => x == y,
    }
}

/// Keys whose values differ bit-for-bit.
pub fn headline_mismatches(a: &BTreeMap<String, Value>, b: &BTreeMap<String, Value>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| match (a.get(*k), b.get(*k)) {
            (Some(x), Some(y)) => !same_bits(x, y),
            _ => true,
        })
        .cloned()
        .collect()
}
