use std::io::Write;

use serde::Serialize;

use crate::args::Format;
use crate::error::{CliError, CliResult};

/// One estimated quantity; `index` is 1-based for vector entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub quantity: &'static str,
    pub index: Option<usize>,
    pub estimate: f64,
    pub std_error: Option<f64>,
}

impl Record {
    pub fn scalar(quantity: &'static str, estimate: f64) -> Self {
        Self {
            quantity,
            index: None,
            estimate,
            std_error: None,
        }
    }

    pub fn entry(quantity: &'static str, index: usize, estimate: f64, std_error: Option<f64>) -> Self {
        Self {
            quantity,
            index: Some(index + 1),
            estimate,
            std_error,
        }
    }
}

#[derive(Debug, Default)]
pub struct Report {
    /// Free-form lines shown only in text output.
    pub notes: Vec<String>,
    pub records: Vec<Record>,
}

impl Report {
    pub fn emit<W: Write>(&self, format: Format, mut out: W) -> CliResult<()> {
        let fail = |e: &dyn std::fmt::Display| CliError::Output(e.to_string());
        match format {
            Format::Text => {
                for note in &self.notes {
                    writeln!(out, "{note}").map_err(|e| fail(&e))?;
                }
                writeln!(out, "{:<16}{:>6}{:>14}{:>12}", "quantity", "index", "estimate", "std_error")
                    .map_err(|e| fail(&e))?;
                for r in &self.records {
                    let index = r.index.map(|i| i.to_string()).unwrap_or_default();
                    let se = r.std_error.map(number).unwrap_or_default();
                    writeln!(out, "{:<16}{index:>6}{:>14}{se:>12}", r.quantity, number(r.estimate))
                        .map_err(|e| fail(&e))?;
                }
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                for r in &self.records {
                    w.serialize(r).map_err(|e| fail(&e))?;
                }
                w.flush().map_err(|e| fail(&e))?;
            }
            Format::JsonLines => {
                for r in &self.records {
                    serde_json::to_writer(&mut out, r).map_err(|e| fail(&e))?;
                    writeln!(out).map_err(|e| fail(&e))?;
                }
            }
        }
        Ok(())
    }
}

fn number(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:.3e}")
    } else {
        format!("{x:.6}")
    }
}
