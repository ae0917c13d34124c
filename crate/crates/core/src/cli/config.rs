use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{EngineConfig, PatternStrategy};
use crate::index::{IndexConfig, IndexKind};
use crate::vecstore::WorkloadSpec;
use crate::{Error, Result};

/// One experiment, as read from `--config` plus `--set` overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic workload to generate. Ignored when `input.manifest` is set.
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub input: InputSection,
    #[serde(default = "default_index")]
    pub index: IndexConfig,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
}

fn default_index() -> IndexConfig {
    IndexConfig::of(IndexKind::OodGraph)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    /// Dumped vectors to use instead of generating a workload.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "d::s_init")]
    pub s_init: usize,
    #[serde(default = "d::s_local")]
    pub s_local: usize,
    #[serde(default = "d::top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub pattern: PatternStrategy,
    #[serde(default)]
    pub n_threads: usize,
    #[serde(default)]
    pub seed: u64,
    /// Decode steps to run.
    #[serde(default = "d::steps")]
    pub steps: usize,
    /// Compare every step against full attention.
    #[serde(default = "d::yes")]
    pub reference: bool,
    /// Write retrieved ids into the trace.
    #[serde(default)]
    pub record_omega: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d::out_dir")]
    pub dir: PathBuf,
    /// Any of `csv`, `jsonl`.
    #[serde(default = "d::formats")]
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d::sweep_kinds")]
    pub kinds: Vec<IndexKind>,
    #[serde(default = "d::top_k")]
    pub k: usize,
    #[serde(default = "d::nprobe_grid")]
    pub nprobe_grid: Vec<usize>,
    #[serde(default = "d::ef_grid")]
    pub ef_grid: Vec<usize>,
    /// Head whose workload is swept.
    #[serde(default)]
    pub head: usize,
    #[serde(default)]
    pub max_queries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    #[serde(default = "d::gap_sample")]
    pub sample: usize,
    #[serde(default = "d::mse_grid")]
    pub mse_grid: Vec<usize>,
    #[serde(default)]
    pub head: usize,
    #[serde(default)]
    pub max_queries: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

mod d {
    use crate::index::IndexKind;
    use std::path::PathBuf;

    pub fn s_init() -> usize {
        128
    }
    pub fn s_local() -> usize {
        512
    }
    pub fn top_k() -> usize {
        100
    }
    pub fn steps() -> usize {
        64
    }
    pub fn yes() -> bool {
        true
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn formats() -> Vec<String> {
        vec!["csv".into(), "jsonl".into()]
    }
    pub fn sweep_kinds() -> Vec<IndexKind> {
        vec![IndexKind::Flat, IndexKind::Ivf, IndexKind::OodGraph]
    }
    pub fn nprobe_grid() -> Vec<usize> {
        vec![1, 2, 4, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256]
    }
    pub fn ef_grid() -> Vec<usize> {
        vec![100, 112, 128, 144, 160, 200, 256, 384, 512]
    }
    pub fn gap_sample() -> usize {
        crate::diagnostics::DEFAULT_GAP_SAMPLE
    }
    pub fn mse_grid() -> Vec<usize> {
        vec![1, 2, 4, 8, 16, 32, 36, 64, 100, 128, 256, 500, 1000]
    }
}

impl Default for EngineSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    /// Reads `path` (or starts from `{}`), applies `key=value` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workload.is_none() && self.input.manifest.is_none() {
            return Err(Error::Config(
                "need a workload section (with an explicit seed) or input.manifest".into(),
            ));
        }
        if let Some(w) = &self.workload {
            w.validate()?;
        }
        self.engine_config().validate()?;
        for f in &self.output.formats {
            if f != "csv" && f != "jsonl" {
                return Err(Error::Config(format!("unknown output format {f:?}")));
            }
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let e = &self.engine;
        EngineConfig {
            s_init: e.s_init,
            s_local: e.s_local,
            top_k: e.top_k,
            pattern: e.pattern,
            index: self.index.clone(),
            n_threads: e.n_threads,
            seed: e.seed,
        }
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when it can be and
/// taken as a string otherwise; missing intermediate objects are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {path:?}: {} is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert(Value::Null);
    }
    unreachable!("keys is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut doc = serde_json::json!({"workload": {"seed": 1}});
        apply_override(&mut doc, "workload.n_ctx=64").unwrap();
        apply_override(&mut doc, "index.kind=ivf").unwrap();
        apply_override(&mut doc, "sweep.ef_grid=[8,16]").unwrap();
        assert_eq!(doc["workload"]["n_ctx"], 64);
        assert_eq!(doc["index"]["kind"], "ivf");
        assert_eq!(doc["sweep"]["ef_grid"], serde_json::json!([8, 16]));
        assert!(apply_override(&mut doc, "workload.seed.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut doc = serde_json::json!({"workload": {"seed": 1}, "bogus": 2});
        assert!(serde_json::from_value::<RunConfig>(doc.clone()).is_err());
        doc.as_object_mut().unwrap().remove("bogus");
        apply_override(&mut doc, "engine.topk=3").unwrap();
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());
    }

    #[test]
    fn seed_is_required() {
        let doc = serde_json::json!({"workload": {"n_ctx": 16}});
        assert!(serde_json::from_value::<RunConfig>(doc).is_err());
        let err = RunConfig::load(None, &[]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }
}
