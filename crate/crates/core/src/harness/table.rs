use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::atomic_write;
use crate::error::{CfdError, Result};
use crate::metrics::ScoreSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Past,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Bleu4,
    RougeL,
    Cider,
}

pub const METRICS: [Metric; 3] = [Metric::Bleu4, Metric::RougeL, Metric::Cider];
pub const SPLITS: [EvalSplit; 2] = [EvalSplit::Past, EvalSplit::New];

impl Metric {
    pub fn of(self, s: &ScoreSet) -> f64 {
        match self {
            Metric::Bleu4 => s.bleu4,
            Metric::RougeL => s.rouge_l,
            Metric::Cider => s.cider,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Bleu4 => "BLEU-4",
            Metric::RougeL => "ROUGE-L",
            Metric::Cider => "CIDEr",
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Past => "past",
            EvalSplit::New => "new",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = CfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "past" => Ok(EvalSplit::Past),
            "new" => Ok(EvalSplit::New),
            _ => Err(CfdError::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Bleu4 => "bleu4",
            Metric::RougeL => "rouge_l",
            Metric::Cider => "cider",
        })
    }
}

impl FromStr for Metric {
    type Err = CfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu4" | "BLEU-4" => Ok(Metric::Bleu4),
            "rouge_l" | "ROUGE-L" => Ok(Metric::RougeL),
            "cider" | "CIDEr" => Ok(Metric::Cider),
            _ => Err(CfdError::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: String,
    pub task: usize,
    pub split: EvalSplit,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellValue {
    Value(f64),
    Failed(String),
}

impl CellValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            CellValue::Value(v) => Some(*v),
            CellValue::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(flatten)]
    pub key: CellKey,
    pub value: CellValue,
}

/// Scores keyed by strategy, increment, split and metric.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub seed: u64,
    pub cells: BTreeMap<CellKey, CellValue>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|").replace('\n', " ")
}

fn split_md_row(line: &str) -> Vec<String> {
    let body = line.trim().trim_start_matches('|');
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            '|' => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ResultsTable {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            cells: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, strategy: &str, task: usize, split: EvalSplit, metric: Metric, value: CellValue) {
        let key = CellKey {
            strategy: strategy.to_string(),
            task,
            split,
            metric,
        };
        self.cells.insert(key, value);
    }

    pub fn set_scores(&mut self, strategy: &str, task: usize, split: EvalSplit, scores: &ScoreSet) {
        for m in METRICS {
            self.set(strategy, task, split, m, CellValue::Value(m.of(scores)));
        }
    }

    pub fn set_failed(&mut self, strategy: &str, task: usize, err: &str) {
        for split in SPLITS {
            for m in METRICS {
                self.set(strategy, task, split, m, CellValue::Failed(err.to_string()));
            }
        }
    }

    pub fn get(&self, strategy: &str, task: usize, split: EvalSplit, metric: Metric) -> Option<&CellValue> {
        self.cells.get(&CellKey {
            strategy: strategy.to_string(),
            task,
            split,
            metric,
        })
    }

    pub fn merge(&mut self, other: ResultsTable) {
        self.cells.extend(other.cells);
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn failed(&self) -> usize {
        self.cells.values().filter(|v| v.value().is_none()).count()
    }

    /// Mean of a metric over all increments of a strategy; `None` if any
    /// cell failed or none exist.
    pub fn mean_over_tasks(&self, strategy: &str, split: EvalSplit, metric: Metric) -> Option<f64> {
        let vals: Vec<Option<f64>> = self
            .cells
            .iter()
            .filter(|(k, _)| k.strategy == strategy && k.split == split && k.metric == metric)
            .map(|(_, v)| v.value())
            .collect();
        if vals.is_empty() {
            return None;
        }
        let vals: Option<Vec<f64>> = vals.into_iter().collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,strategy,task,split,metric,value,error\n");
        for (k, v) in &self.cells {
            let (val, err) = match v {
                CellValue::Value(x) => (x.to_string(), String::new()),
                CellValue::Failed(e) => (String::new(), csv_field(e)),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.seed,
                csv_field(&k.strategy),
                k.task,
                k.split,
                k.metric,
                val,
                err
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let cells: Vec<Cell> = self
            .cells
            .iter()
            .map(|(k, v)| Cell {
                key: k.clone(),
                value: v.clone(),
            })
            .collect();
        let doc = serde_json::json!({ "seed": self.seed, "cells": cells });
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            seed: u64,
            cells: Vec<Cell>,
        }
        let d: Doc = serde_json::from_str(text)?;
        Ok(Self {
            seed: d.seed,
            cells: d.cells.into_iter().map(|c| (c.key, c.value)).collect(),
        })
    }

    /// One row per (strategy, task, split), one column per metric. Values
    /// print in shortest round-trip form; failures as `failed: <error>`.
    pub fn to_markdown(&self) -> String {
        let mut rows: BTreeMap<(String, usize, EvalSplit), BTreeMap<Metric, &CellValue>> = BTreeMap::new();
        for (k, v) in &self.cells {
            rows.entry((k.strategy.clone(), k.task, k.split)).or_default().insert(k.metric, v);
        }
        let mut s = format!("<!-- seed {} -->\n", self.seed);
        s.push_str("| strategy | task | split |");
        for m in METRICS {
            s.push_str(&format!(" {} |", m.label()));
        }
        s.push_str("\n|---|---:|---|---:|---:|---:|\n");
        for ((strategy, task, split), cells) in rows {
            s.push_str(&format!("| {} | {} | {} |", escape(&strategy), task, split));
            for m in METRICS {
                let text = match cells.get(&m) {
                    Some(CellValue::Value(v)) => v.to_string(),
                    Some(CellValue::Failed(e)) => format!("failed: {}", escape(e)),
                    None => "-".to_string(),
                };
                s.push_str(&format!(" {text} |"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_markdown(text: &str) -> Result<Self> {
        let bad = |m: String| CfdError::InvalidConfig(format!("markdown table: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let seed_line = lines.next().ok_or_else(|| bad("empty".into()))?;
        let seed = seed_line
            .trim()
            .strip_prefix("<!-- seed ")
            .and_then(|r| r.strip_suffix(" -->"))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad("missing seed line".into()))?;
        let header = split_md_row(lines.next().ok_or_else(|| bad("missing header".into()))?);
        let metrics: Vec<Metric> = header.iter().skip(3).map(|h| h.parse()).collect::<Result<_>>()?;
        lines.next();
        let mut table = Self::new(seed);
        for line in lines {
            let f = split_md_row(line);
            if f.len() != 3 + metrics.len() {
                return Err(bad(format!("row has {} fields", f.len())));
            }
            let task: usize = f[1].parse().map_err(|_| bad(format!("task {:?}", f[1])))?;
            let split: EvalSplit = f[2].parse()?;
            for (m, cell) in metrics.iter().zip(&f[3..]) {
                let value = if cell == "-" {
                    continue;
                } else if let Some(e) = cell.strip_prefix("failed: ") {
                    CellValue::Failed(e.to_string())
                } else {
                    CellValue::Value(cell.parse().map_err(|_| bad(format!("value {cell:?}")))?)
                };
                table.set(&f[0], task, split, *m, value);
            }
        }
        Ok(table)
    }

    /// Writes `results_s{seed}.{csv,json,md}` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CfdError::io(dir, e))?;
        let stem = format!("results_s{}", self.seed);
        let mut out = Vec::new();
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json()?), ("md", self.to_markdown())] {
            let p = dir.join(format!("{stem}.{ext}"));
            atomic_write(&p, body.as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ResultsTable {
        let mut t = ResultsTable::new(4);
        let s = ScoreSet {
            bleu4: 0.1234567890123,
            rouge_l: 1.0 / 3.0,
            cider: 2.5e-7,
            spice: None,
        };
        t.set_scores("finetune", 1, EvalSplit::Past, &s);
        t.set_scores("finetune", 1, EvalSplit::New, &s);
        t.set_failed("critical", 1, "training diverged | at epoch 3");
        t
    }

    #[test]
    fn arity_and_counts() {
        let t = sample();
        assert_eq!(t.len(), 12);
        assert_eq!(t.failed(), 6);
        assert_eq!(t.mean_over_tasks("critical", EvalSplit::Past, Metric::Cider), None);
        assert_eq!(t.mean_over_tasks("finetune", EvalSplit::Past, Metric::Cider), Some(2.5e-7));
    }

    #[test]
    fn markdown_and_json_round_trip() {
        let t = sample();
        assert_eq!(ResultsTable::from_markdown(&t.to_markdown()).unwrap(), t);
        assert_eq!(ResultsTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        assert!(t.to_csv().lines().count() == 13);
    }

    proptest! {
        #[test]
        fn markdown_round_trip_random(vals in prop::collection::vec(0.0f64..100.0, 6)) {
            let mut t = ResultsTable::new(1);
            for (i, v) in vals.iter().enumerate() {
                t.set("lwf", i / 2 + 1, SPLITS[i % 2], Metric::Cider, CellValue::Value(*v));
            }
            prop_assert_eq!(ResultsTable::from_markdown(&t.to_markdown()).unwrap(), t);
        }
    }
}
