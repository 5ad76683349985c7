//! Line-oriented `key = value` reports.
//!
//! Every report opens with `tool`, `version`, `command` and `config_hash`;
//! the remaining keys depend on the command. Keys never repeat within a
//! report, and a section prefix (`section.key`) groups related lines.

use std::fmt::Display;

use tabtreap::Config;

pub struct Report {
    lines: Vec<(String, String)>,
    failed: Vec<String>,
}

impl Report {
    pub fn new(command: &str, cfg: &Config) -> Self {
        let mut r = Report { lines: Vec::new(), failed: Vec::new() };
        r.put("tool", "tabtreap");
        r.put("version", env!("CARGO_PKG_VERSION"));
        r.put("command", command);
        r.put("config_hash", cfg.hash());
        r
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn put_f(&mut self, key: impl Into<String>, value: f64) {
        self.put(key, format!("{value:.6}"));
    }

    /// Records a named check as `check.<name> = pass|fail`.
    pub fn check(&mut self, name: &str, ok: bool) {
        self.put(format!("check.{name}"), if ok { "pass" } else { "fail" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }

    /// Appends a pre-rendered `key = value` block under a prefix.
    pub fn absorb(&mut self, prefix: &str, kv: &str) {
        for line in kv.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                self.put(format!("{prefix}.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s.push_str(&format!("verdict = {}\n", if self.passed() { "pass" } else { "fail" }));
        s
    }
}

/// Value at quantile `p` of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}
