//! Metric report emission with stable formatting.
//!
//! Reports are small JSON objects with a fixed key order. Every float is
//! rendered with 9 significant digits in scientific notation, so repeated
//! runs of the same command diff byte for byte and golden tests can pin
//! exact output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fpt_core::{Error, Result};

/// Renders `x` with 9 significant digits (one leading digit plus eight
/// fractional). Zero prints as `0.0`; non-finite values, which no metric
/// should produce, print as `null` rather than invalid JSON.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return "null".to_string();
    }
    if x == 0.0 {
        return "0.0".to_string();
    }
    format!("{x:.8e}")
}

/// One printable value in a report.
pub enum Value {
    Num(f64),
    Int(u64),
    Text(String),
    NumList(Vec<f64>),
    TextList(Vec<String>),
    IntGrid(Vec<Vec<u64>>),
}

/// Ordered key/value pairs rendered as a JSON object, two-space indented,
/// one key per line.
#[derive(Default)]
pub struct Report {
    pairs: Vec<(String, Value)>,
}

fn escape(s: &str, out: &mut String) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn render_value(v: &Value, out: &mut String) {
    match v {
        Value::Num(x) => out.push_str(&sig9(*x)),
        Value::Int(n) => {
            let _ = write!(out, "{n}");
        }
        Value::Text(s) => escape(s, out),
        Value::NumList(xs) => {
            out.push('[');
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&sig9(*x));
            }
            out.push(']');
        }
        Value::TextList(ss) => {
            out.push('[');
            for (i, s) in ss.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                escape(s, out);
            }
            out.push(']');
        }
        Value::IntGrid(rows) => {
            out.push('[');
            for (i, row) in rows.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push('[');
                for (j, n) in row.iter().enumerate() {
                    if j > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "{n}");
                }
                out.push(']');
            }
            out.push(']');
        }
    }
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.pairs.push((key.to_string(), Value::Num(v)));
        self
    }

    pub fn int(mut self, key: &str, v: u64) -> Self {
        self.pairs.push((key.to_string(), Value::Int(v)));
        self
    }

    pub fn text(mut self, key: &str, v: impl Into<String>) -> Self {
        self.pairs.push((key.to_string(), Value::Text(v.into())));
        self
    }

    pub fn num_list(mut self, key: &str, v: Vec<f64>) -> Self {
        self.pairs.push((key.to_string(), Value::NumList(v)));
        self
    }

    pub fn text_list(mut self, key: &str, v: Vec<String>) -> Self {
        self.pairs.push((key.to_string(), Value::TextList(v)));
        self
    }

    pub fn int_grid(mut self, key: &str, v: Vec<Vec<u64>>) -> Self {
        self.pairs.push((key.to_string(), Value::IntGrid(v)));
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::from("{\n");
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            out.push_str("  ");
            escape(k, &mut out);
            out.push_str(": ");
            render_value(v, &mut out);
            if i + 1 < self.pairs.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str("}\n");
        out
    }

    /// Prints the report to stdout and, when a path is given, writes the
    /// identical bytes there too.
    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        let text = self.render();
        // A downstream pipe closing early is normal usage, not a failure.
        if let Err(e) = std::io::Write::write_all(&mut std::io::stdout(), text.as_bytes()) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(Error::Io {
                    path: "stdout".into(),
                    source: e,
                });
            }
        }
        if let Some(path) = out {
            fs::write(path, text.as_bytes()).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?;
        }
        Ok(())
    }
}
