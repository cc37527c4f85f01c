//! Run configuration: defaults, then a `key=value` file, then flags.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hicssm::data::{SplitRule, SynthParams};
use hicssm::network::ModelConfig;
use hicssm::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub ratio: f64,
    pub data_seed: u64,
    pub balance_tol: f64,
    pub balance_max_iter: usize,
    pub split: SplitRule,
    pub synth: SynthParams,
    pub erf_samples: usize,
    pub max_distance: usize,
    /// Zero selects whole-patch SSIM.
    pub ssim_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            ratio: 1.0 / 16.0,
            data_seed: 0,
            balance_tol: hicssm::data::DEFAULT_BALANCE_TOL,
            balance_max_iter: hicssm::data::DEFAULT_BALANCE_MAX_ITER,
            split: SplitRule::default(),
            synth: SynthParams::default(),
            erf_samples: 8,
            max_distance: 100,
            ssim_window: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for key {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid value {value:?} for key {key}: expected true or false"),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

impl RunConfig {
    /// Every accepted key, in dump order.
    pub const KEYS: &'static [&'static str] = &[
        "channels",
        "blocks_per_stage",
        "state_size",
        "side",
        "lefn_expansion",
        "global_residual",
        "model_seed",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "epochs",
        "seed",
        "checkpoint_every",
        "weight_decay",
        "grad_clip",
        "drop_empty_targets",
        "ratio",
        "data_seed",
        "balance_tol",
        "balance_max_iter",
        "validation_chroms",
        "test_chroms",
        "synth_depth",
        "synth_tads",
        "synth_loops",
        "synth_tad_enrichment",
        "synth_loop_enrichment",
        "bin_size",
        "erf_samples",
        "max_distance",
        "ssim_window",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "channels" => self.model.channels = parse(key, v)?,
            "blocks_per_stage" => self.model.blocks_per_stage = parse(key, v)?,
            "state_size" => self.model.state_size = parse(key, v)?,
            "side" => self.model.side = parse(key, v)?,
            "lefn_expansion" => self.model.lefn_expansion = parse(key, v)?,
            "global_residual" => self.model.global_residual = parse_bool(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "epsilon" => self.train.epsilon = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "grad_clip" => {
                self.train.grad_clip = match v.trim() {
                    "none" | "" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "drop_empty_targets" => self.train.drop_empty_targets = parse_bool(key, v)?,
            "ratio" => self.ratio = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "balance_tol" => self.balance_tol = parse(key, v)?,
            "balance_max_iter" => self.balance_max_iter = parse(key, v)?,
            "validation_chroms" => self.split.validation = parse_list(v),
            "test_chroms" => self.split.test = parse_list(v),
            "synth_depth" => self.synth.depth = parse(key, v)?,
            "synth_tads" => self.synth.tads = parse(key, v)?,
            "synth_loops" => self.synth.loops = parse(key, v)?,
            "synth_tad_enrichment" => self.synth.tad_enrichment = parse(key, v)?,
            "synth_loop_enrichment" => self.synth.loop_enrichment = parse(key, v)?,
            "bin_size" => self.synth.bin_size = parse(key, v)?,
            "erf_samples" => self.erf_samples = parse(key, v)?,
            "max_distance" => self.max_distance = parse(key, v)?,
            "ssim_window" => self.ssim_window = parse(key, v)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let join = |v: &[String]| v.join(",");
        Some(match key {
            "channels" => self.model.channels.to_string(),
            "blocks_per_stage" => self.model.blocks_per_stage.to_string(),
            "state_size" => self.model.state_size.to_string(),
            "side" => self.model.side.to_string(),
            "lefn_expansion" => self.model.lefn_expansion.to_string(),
            "global_residual" => self.model.global_residual.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "epsilon" => self.train.epsilon.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "seed" => self.train.seed.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "grad_clip" => self.train.grad_clip.map_or("none".into(), |g| g.to_string()),
            "drop_empty_targets" => self.train.drop_empty_targets.to_string(),
            "ratio" => self.ratio.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "balance_tol" => self.balance_tol.to_string(),
            "balance_max_iter" => self.balance_max_iter.to_string(),
            "validation_chroms" => join(&self.split.validation),
            "test_chroms" => join(&self.split.test),
            "synth_depth" => self.synth.depth.to_string(),
            "synth_tads" => self.synth.tads.to_string(),
            "synth_loops" => self.synth.loops.to_string(),
            "synth_tad_enrichment" => self.synth.tad_enrichment.to_string(),
            "synth_loop_enrichment" => self.synth.loop_enrichment.to_string(),
            "bin_size" => self.synth.bin_size.to_string(),
            "erf_samples" => self.erf_samples.to_string(),
            "max_distance" => self.max_distance.to_string(),
            "ssim_window" => self.ssim_window.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines. `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key=value, found {line:?}", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    /// `default` names the built-in defaults; anything else is a file path.
    pub fn merge_source(&mut self, source: &str) -> Result<()> {
        if source == "default" {
            return Ok(());
        }
        let text = std::fs::read_to_string(Path::new(source)).with_context(|| format!("reading config {source}"))?;
        self.merge_text(&text, source)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            bail!("ratio must lie in (0, 1], got {}", self.ratio);
        }
        if self.erf_samples == 0 {
            bail!("erf_samples must be at least 1");
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("every listed key renders"));
        }
        s
    }
}
