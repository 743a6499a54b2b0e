//! Paired JSON and text reports with PASS/FAIL bookkeeping.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

pub struct Report {
    title: String,
    json: Map<String, Value>,
    checks: Vec<Value>,
    text: Vec<String>,
    failed: usize,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Report { title: title.to_string(), json: Map::new(), checks: Vec::new(), text: Vec::new(), failed: 0 }
    }

    /// Record a structured value under `key` (JSON only).
    pub fn value(&mut self, key: &str, v: impl Serialize) {
        let v = serde_json::to_value(v).unwrap_or_else(|e| Value::String(format!("unserializable: {e}")));
        self.json.insert(key.to_string(), v);
    }

    /// A line in the text report.
    pub fn note(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::info!("{line}");
        self.text.push(line);
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        let detail = detail.into();
        if !pass {
            self.failed += 1;
        }
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if pass {
            log::info!("{line}");
        } else {
            log::warn!("{line}");
        }
        self.text.push(line);
        self.checks.push(serde_json::json!({ "name": name, "pass": pass, "detail": detail }));
    }

    pub fn failed(&self) -> usize {
        self.failed
    }

    pub fn to_json(&self) -> Value {
        let mut m = self.json.clone();
        m.insert("command".into(), Value::String(self.title.clone()));
        m.insert("checks".into(), Value::Array(self.checks.clone()));
        m.insert("failed".into(), Value::from(self.failed));
        Value::Object(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("magmove {}\n", self.title);
        for l in &self.text {
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(&format!("{} check(s) failed\n", self.failed));
        s
    }

    /// Write `report.json` and `report.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.to_json())?)?;
        fs::write(dir.join("report.txt"), self.to_text())
    }
}
