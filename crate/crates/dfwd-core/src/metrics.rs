//! Minimal CSV emission for run metrics. Quotes only when a field needs
//! it, so the common numeric tables stay grep-friendly.

use std::path::Path;

use crate::error::{Error, Result};

pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::internal(format!(
                "csv row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&join(&self.header));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&join(row));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.render())?)
    }
}

fn join(fields: &[String]) -> String {
    fields.iter().map(|f| escape(f)).collect::<Vec<_>>().join(",")
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Format an f64 compactly but without precision loss on re-read.
pub fn num(v: f64) -> String {
    let short = format!("{v}");
    if short.parse::<f64>() == Ok(v) {
        short
    } else {
        format!("{v:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_guards_shape() {
        let mut csv = Csv::new(&["epoch", "loss", "note"]);
        csv.push(vec!["0".into(), num(0.5), "warm, noisy".into()]).unwrap();
        csv.push(vec!["1".into(), num(0.25), "say \"hi\"".into()]).unwrap();
        assert!(csv.push(vec!["2".into()]).is_err());
        let text = csv.render();
        assert_eq!(
            text,
            "epoch,loss,note\n0,0.5,\"warm, noisy\"\n1,0.25,\"say \"\"hi\"\"\"\n"
        );
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -123456.789, f64::MAX] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
