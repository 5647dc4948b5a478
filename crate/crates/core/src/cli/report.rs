//! `report.json` and the JSON artifacts, with every float printed to 17
//! significant digits.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::Failure;
use crate::numeric::fmt17;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn push(&mut self, check: impl Into<String>, value: f64, tolerance: f64, pass: bool) {
        self.checks.push(Check {
            check: check.into(),
            value,
            tolerance,
            pass,
        });
    }

    /// Passes when `value <= tolerance`.
    pub fn at_most(&mut self, check: impl Into<String>, value: f64, tolerance: f64) {
        self.push(check, value, tolerance, value <= tolerance);
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("[\n");
        for (k, c) in self.checks.iter().enumerate() {
            out += &format!(
                "  {{\"check\": {}, \"value\": {}, \"tolerance\": {}, \"pass\": {}}}",
                Value::String(c.check.clone()),
                number(c.value),
                number(c.tolerance),
                c.pass
            );
            out += if k + 1 < self.checks.len() { ",\n" } else { "\n" };
        }
        out + "]\n"
    }
}

fn number(x: f64) -> String {
    if x.is_finite() {
        fmt17(x)
    } else {
        "null".into()
    }
}

fn render(v: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent + 1);
    match v {
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => *out += &i.to_string(),
            (_, Some(u)) => *out += &u.to_string(),
            _ => *out += &number(n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::Array(items) if !items.is_empty() => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad);
                render(item, indent + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                out.push_str(&pad);
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                render(item, indent + 1, out);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Pretty JSON with floats in the 17-digit format.
pub fn json17(value: &impl Serialize) -> Result<String, Failure> {
    let v = serde_json::to_value(value).map_err(|e| Failure::Internal(e.to_string()))?;
    let mut out = String::new();
    render(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    fs::write(path, json17(value)?).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}
