//! Run configuration: a flat `key = value` file, overridable key by key.
//!
//! ```text
//! # comments and blank lines are ignored
//! corpus = data/corpus.jsonl
//! qa = data/qa.jsonl
//! mode = end2end
//! refresh_every = 100
//! ```
//!
//! Later assignments win, so command-line overrides are applied after the
//! file. [`RunConfig::validate`] reports every violation at once.

use std::path::PathBuf;

use crate::corpus::DEFAULT_CHUNK_WORDS;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    /// Evaluation questions; the training questions when unset.
    pub eval_qa: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dims: ModelDims,
    pub chunk_words: usize,
    pub prepend_title: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            qa: None,
            eval_qa: None,
            out: None,
            dims: ModelDims::default(),
            chunk_words: DEFAULT_CHUNK_WORDS,
            prepend_title: false,
            train: TrainConfig::default(),
        }
    }
}

/// Every key the file format accepts.
pub const KEYS: &[&str] = &[
    "corpus",
    "qa",
    "eval_qa",
    "out",
    "vocab",
    "enc_dim",
    "gen_dim",
    "hidden",
    "chunk_words",
    "prepend_title",
    "mode",
    "k",
    "steps",
    "batch_size",
    "lr",
    "nprobe",
    "seed",
    "eval_every",
    "max_decode_len",
    "encoder_init_scale",
    "generator_init_scale",
    "log_timing",
    "refresh",
    "refresh_every",
    "refresh_workers",
    "refresh_mode",
    "index",
    "clusters",
    "kmeans_seed",
];

/// Splits a config file into `(key, value)` pairs without interpreting them.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse {v:?} as a number"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "corpus" => self.corpus = Some(v.into()),
            "qa" => self.qa = Some(v.into()),
            "eval_qa" => self.eval_qa = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "vocab" => self.dims.vocab = num(key, v)?,
            "enc_dim" => self.dims.enc_dim = num(key, v)?,
            "gen_dim" => self.dims.gen_dim = num(key, v)?,
            "hidden" => self.dims.hidden = num(key, v)?,
            "chunk_words" => self.chunk_words = num(key, v)?,
            "prepend_title" => self.prepend_title = flag(key, v)?,
            "mode" => t.mode = v.parse().map_err(|e: Error| format!("mode: {e}"))?,
            "k" => t.k = num(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "nprobe" => t.nprobe = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "max_decode_len" => t.max_decode_len = num(key, v)?,
            "encoder_init_scale" => t.encoder_init_scale = num(key, v)?,
            "generator_init_scale" => t.generator_init_scale = num(key, v)?,
            "log_timing" => t.log_timing = flag(key, v)?,
            "refresh" => t.refresh.enabled = flag(key, v)?,
            "refresh_every" => t.refresh.every_n_steps = num(key, v)?,
            "refresh_workers" => t.refresh.num_workers = num(key, v)?,
            "refresh_mode" => {
                t.refresh.mode = v.parse().map_err(|e: Error| format!("refresh_mode: {e}"))?
            }
            "index" => t.refresh.index_kind = v.parse().map_err(|e: Error| format!("index: {e}"))?,
            "clusters" => t.refresh.clusters = num(key, v)?,
            "kmeans_seed" => t.refresh.seed = num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies assignments in order, collecting every failure.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let errs: Vec<String> = pairs
            .into_iter()
            .filter_map(|(k, v)| self.set(k, v).err())
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Parses a config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    /// Every violated invariant. `check_paths` also requires the input files
    /// to exist.
    pub fn validate(&self, check_paths: bool) -> Vec<String> {
        let mut errs = Vec::new();
        let d = &self.dims;
        for (name, v) in [
            ("enc_dim", d.enc_dim),
            ("gen_dim", d.gen_dim),
            ("hidden", d.hidden),
            ("chunk_words", self.chunk_words),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if d.vocab < 2 {
            errs.push("vocab must be at least 2".into());
        }
        errs.extend(self.train.validate());
        if check_paths {
            for (name, p) in [("corpus", &self.corpus), ("qa", &self.qa)] {
                match p {
                    None => errs.push(format!("{name} path is required")),
                    Some(p) if !p.is_file() => {
                        errs.push(format!("{name} file {} does not exist", p.display()))
                    }
                    _ => {}
                }
            }
            if let Some(p) = &self.eval_qa {
                if !p.is_file() {
                    errs.push(format!("eval_qa file {} does not exist", p.display()));
                }
            }
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refresher::RefreshMode;
    use crate::trainer::TrainMode;

    #[test]
    fn parses_and_overrides() {
        let text = "# run\nmode = frozen\n\nrefresh_every=50\nlr = 0.25\n";
        let mut cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.train.mode, TrainMode::Frozen);
        assert_eq!(cfg.train.refresh.every_n_steps, 50);
        cfg.apply([("mode", "end2end"), ("refresh_mode", "async")]).unwrap();
        assert_eq!(cfg.train.mode, TrainMode::End2End);
        assert_eq!(cfg.train.refresh.mode, RefreshMode::Async);
        assert_eq!(cfg.train.lr, 0.25);
    }

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let value = match *key {
                "mode" => "frozen",
                "refresh_mode" => "sync",
                "index" => "ivf",
                "prepend_title" | "log_timing" | "refresh" => "true",
                _ => "3",
            };
            RunConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn reports_all_violations() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply([("k", "x"), ("bogus", "1"), ("mode", "sideways")]).unwrap_err();
        match err {
            Error::Config(v) => assert_eq!(v.len(), 3),
            e => panic!("{e}"),
        }
        cfg.apply([("refresh_every", "0"), ("k", "0"), ("hidden", "0")]).unwrap();
        let errs = cfg.validate(true);
        for needle in ["refresh_every", "k must", "hidden", "corpus", "qa"] {
            assert!(errs.iter().any(|e| e.contains(needle)), "{needle} missing from {errs:?}");
        }
    }

    #[test]
    fn malformed_lines_are_located() {
        match parse_pairs("a = 1\nnonsense\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
