//! Primary-stream output: tables as CSV, documents as JSON.

use std::io::Write;

use serde_json::{Map, Value};

/// Significant digits kept in every printed number.
pub const DIGITS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Rounds to [`DIGITS`] significant digits; non-finite values become `null`.
pub fn num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let rounded: f64 = format!("{:.*e}", DIGITS - 1, x)
        .parse()
        .expect("formatted float parses");
    // Avoid printing "-0".
    Value::from(if rounded == 0.0 { 0.0 } else { rounded })
}

pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    let m: Map<String, Value> = self
                        .columns
                        .iter()
                        .map(|c| c.to_string())
                        .zip(r.iter().cloned())
                        .collect();
                    Value::Object(m)
                })
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) if s.contains([',', '"', '\n']) => {
            format!("\"{}\"", s.replace('"', "\"\""))
        }
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// What a command prints: a table, and optionally a richer JSON document used
/// in place of the table's JSON rendering.
pub struct Output {
    pub table: Table,
    pub document: Option<Value>,
}

impl From<Table> for Output {
    fn from(table: Table) -> Self {
        Output {
            table,
            document: None,
        }
    }
}

impl Output {
    pub fn write<W: Write>(&self, format: Format, out: &mut W) -> std::io::Result<()> {
        match format {
            Format::Csv => self.table.write_csv(out),
            Format::Json => {
                let doc = self
                    .document
                    .clone()
                    .unwrap_or_else(|| self.table.to_json());
                serde_json::to_writer_pretty(&mut *out, &doc)?;
                writeln!(out)
            }
        }
    }
}
