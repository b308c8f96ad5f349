//! Run configuration: `key = value` lines, `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cntrack::affinity::WindowPlan;
use cntrack::graph::BuilderConfig;
use cntrack::mpn::{MpnConfig, Optimizer, Schedule};
use cntrack::pipeline::{PipelineConfig, SamplePlan};
use cntrack::solver::{AggregateConfig, FirstPass};
use cntrack::stitch::ClipPlan;
use cntrack::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub network: MpnConfig,
    pub schedule: Schedule,
    pub samples: SamplePlan,
    pub seed: u64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("expected key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let s = &mut self.schedule;
        match key {
            "window" => p.window.window = parse(key, v)?,
            "step" => p.window.step = parse(key, v)?,
            "clip_len" => {
                p.clips.clip_len = parse(key, v)?;
                p.window.clip_len = p.clips.clip_len;
            }
            "overlap" => p.clips.overlap = parse(key, v)?,
            "top_k" => p.builder.top_k = parse(key, v)?,
            "threshold" => p.builder.new_track_threshold = parse(key, v)?,
            "lookback" => p.builder.lookback = parse(key, v)?,
            "eps" => p.aggregate.eps = parse(key, v)?,
            "traj_passes" => p.aggregate.traj_passes = parse(key, v)?,
            "first_pass" => {
                p.aggregate.first_pass = match v {
                    "rounding" => FirstPass::Rounding,
                    "tracker" => FirstPass::Tracker,
                    _ => return Err(Error::Validation(format!("first_pass must be rounding or tracker, got {v:?}"))),
                }
            }
            "steps" => self.network.steps = parse(key, v)?,
            "embed_dim" => self.network.embed_dim = parse(key, v)?,
            "node_dim" => self.network.node_dim = parse(key, v)?,
            "edge_dim" => self.network.edge_dim = parse(key, v)?,
            "hidden" => self.network.hidden = parse(key, v)?,
            "learning_rate" => s.learning_rate = parse(key, v)?,
            "weight_decay" => s.weight_decay = parse(key, v)?,
            "iterations" => s.iterations = parse(key, v)?,
            "second_pass_after" => s.second_pass_after = parse(key, v)?,
            "batch_size" => s.batch_size = parse(key, v)?,
            "gamma" => s.gamma = parse(key, v)?,
            "optimizer" => {
                s.optimizer = match v {
                    "adam" => Optimizer::adam(),
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(Error::Validation(format!("optimizer must be adam or sgd, got {v:?}"))),
                }
            }
            "train_clip_len" => self.samples.clip_len = parse(key, v)?,
            "traj_clip_len" => self.samples.traj_clip_len = parse(key, v)?,
            "pieces" => self.samples.pieces = parse(key, v)?,
            "max_gap" => self.samples.max_gap = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                s.seed = self.seed;
                self.samples.seed = self.seed;
            }
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.network.validate()?;
        self.schedule.validate()?;
        self.samples.validate()
    }

    /// Every key with its current value, loadable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let s = &self.schedule;
        let n = &self.network;
        let WindowPlan { window, step, .. } = p.window;
        let ClipPlan { clip_len, overlap } = p.clips;
        let BuilderConfig {
            top_k,
            new_track_threshold,
            lookback,
        } = p.builder;
        let AggregateConfig {
            eps,
            traj_passes,
            first_pass,
        } = p.aggregate;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("window", window.to_string());
        kv("step", step.to_string());
        kv("clip_len", clip_len.to_string());
        kv("overlap", overlap.to_string());
        kv("top_k", top_k.to_string());
        kv("threshold", new_track_threshold.to_string());
        kv("lookback", lookback.to_string());
        kv("eps", eps.to_string());
        kv("traj_passes", traj_passes.to_string());
        let fp = match first_pass {
            FirstPass::Rounding => "rounding",
            FirstPass::Tracker => "tracker",
        };
        kv("first_pass", fp.into());
        kv("steps", n.steps.to_string());
        kv("embed_dim", n.embed_dim.to_string());
        kv("node_dim", n.node_dim.to_string());
        kv("edge_dim", n.edge_dim.to_string());
        kv("hidden", n.hidden.to_string());
        kv("learning_rate", s.learning_rate.to_string());
        kv("weight_decay", s.weight_decay.to_string());
        kv("iterations", s.iterations.to_string());
        kv("second_pass_after", s.second_pass_after.to_string());
        kv("batch_size", s.batch_size.to_string());
        kv("gamma", s.gamma.to_string());
        let opt = match s.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        };
        kv("optimizer", opt.into());
        kv("train_clip_len", self.samples.clip_len.to_string());
        kv("traj_clip_len", self.samples.traj_clip_len.to_string());
        kv("pieces", self.samples.pieces.to_string());
        kv("max_gap", self.samples.max_gap.to_string());
        kv("seed", self.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# tuned\ntop_k = 3\neps = 0.6  # stricter\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["eps=0.7".into()]).unwrap();
        assert_eq!(cfg.pipeline.builder.top_k, 3);
        assert_eq!(cfg.pipeline.aggregate.eps, 0.7);
        assert_eq!(cfg.pipeline.builder.lookback, BuilderConfig::default().lookback);
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("first_pass", "tracker").unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set("optimizer", "sgd").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "1").unwrap_err().is_validation());
        assert!(cfg.set("top_k", "many").unwrap_err().is_validation());
        assert!(RunConfig::load(None, &["eps=0".into()]).unwrap_err().is_validation());
        assert!(RunConfig::load(None, &["overlap=600".into()]).is_err());
        assert!(matches!(cfg.apply_text("eps 0.5"), Err(Error::Parse { line: 1, .. })));
    }
}
