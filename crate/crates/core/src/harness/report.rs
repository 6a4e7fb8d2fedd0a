//! Plain-text reports: `key = value` lines and tab-separated tables.

use std::fmt::Display;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvReport {
    pub entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Optional values are written as `undefined`.
    pub fn push_opt(&mut self, key: impl Into<String>, value: Option<f64>, precision: usize) {
        let v = value.map_or("undefined".to_string(), |v| format!("{v:.precision$}"));
        self.push(key, v);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s += &r.join("\t");
            s.push('\n');
        }
        s
    }
}
