//! Run configuration: a flat key=value text format covering training,
//! architecture, synthesis, and paths. Unknown keys are rejected, every
//! value round-trips through serialize/parse, and the canonical hash pins a
//! checkpoint to the settings that shaped its parameters.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::fnv1a64;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    /// Window side for dense inference (change maps, word maps).
    pub infer_window: usize,
    pub catalog: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::for_bands(4),
            synth: SynthSpec::default(),
            infer_window: 9,
            catalog: None,
            output_dir: None,
            checkpoint: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::data(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Err(Error::data(format!("config key {key}: empty list")));
    }
    value.split(',').map(|part| parse_num::<usize>(key, part.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::data(format!("config key {key}: expected true or false, got {other:?}"))),
    }
}

fn list_text(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` assignment, the shared path for config files
    /// and --set overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.train.iterations = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "temperature" => self.train.temperature = parse_num(key, value)?,
            "train_patch" => self.train.train_patch = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,
            "negatives_per_anchor" => {
                self.train.negatives_per_anchor = if value == "all" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "bands" => self.model.backbone.bands = parse_num(key, value)?,
            "stem_channels" => self.model.backbone.stem_channels = parse_num(key, value)?,
            "block_channels" => self.model.backbone.block_channels = parse_list(key, value)?,
            "descriptor_dim" => self.model.backbone.descriptor_dim = parse_num(key, value)?,
            "tern_blocks" => self.model.backbone.tern.blocks = parse_num(key, value)?,
            "tern_layers_per_block" => {
                self.model.backbone.tern.layers_per_block = parse_num(key, value)?
            }
            "tern_kernel_size" => self.model.backbone.tern.kernel_size = parse_num(key, value)?,
            "tern_dilations" => self.model.backbone.tern.dilations = parse_list(key, value)?,
            "tern_epsilon" => self.model.backbone.tern.epsilon = parse_num(key, value)?,
            "tern_normalize" => self.model.backbone.tern.normalize = parse_bool(key, value)?,
            "clusters" => self.model.clusters = parse_num(key, value)?,
            "residual_encoder" => self.model.residual_encoder = parse_bool(key, value)?,
            "infer_window" => self.infer_window = parse_num(key, value)?,
            "synth_regions" => self.synth.regions = parse_num(key, value)?,
            "synth_timesteps" => self.synth.timesteps = parse_num(key, value)?,
            "synth_height" => self.synth.height = parse_num(key, value)?,
            "synth_width" => self.synth.width = parse_num(key, value)?,
            "synth_bands" => self.synth.bands = parse_num(key, value)?,
            "synth_classes" => self.synth.texture_classes = parse_num(key, value)?,
            "synth_gain_low" => self.synth.gain_low = parse_num(key, value)?,
            "synth_gain_high" => self.synth.gain_high = parse_num(key, value)?,
            "synth_noise_sigma" => self.synth.noise_sigma = parse_num(key, value)?,
            "synth_pairs" => self.synth.pairs_per_region = parse_num(key, value)?,
            "catalog" => self.catalog = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(Error::data(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("override {assignment:?} is not key=value")))?;
        self.apply(key.trim(), value.trim())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::data(format!("config line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::data(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.synth.validate()?;
        if self.infer_window % 2 == 0 || self.infer_window == 0 {
            return Err(Error::data(format!(
                "infer_window must be odd, got {}",
                self.infer_window
            )));
        }
        Ok(())
    }

    /// Complete textual form; parsing it back yields an equal config.
    pub fn serialize(&self) -> String {
        let mut out = self.canonical_text();
        let mut push = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        push("iterations", self.train.iterations.to_string());
        push("checkpoint_every", self.train.checkpoint_every.to_string());
        push("infer_window", self.infer_window.to_string());
        push("synth_regions", self.synth.regions.to_string());
        push("synth_timesteps", self.synth.timesteps.to_string());
        push("synth_height", self.synth.height.to_string());
        push("synth_width", self.synth.width.to_string());
        push("synth_bands", self.synth.bands.to_string());
        push("synth_classes", self.synth.texture_classes.to_string());
        push("synth_gain_low", format!("{:?}", self.synth.gain_low));
        push("synth_gain_high", format!("{:?}", self.synth.gain_high));
        push("synth_noise_sigma", format!("{:?}", self.synth.noise_sigma));
        push("synth_pairs", self.synth.pairs_per_region.to_string());
        if let Some(p) = &self.catalog {
            push("catalog", p.display().to_string());
        }
        if let Some(p) = &self.output_dir {
            push("output_dir", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            push("checkpoint", p.display().to_string());
        }
        out
    }

    /// The subset of keys that determine trained parameters: architecture
    /// and optimization settings, but not schedule lengths, inference
    /// windows, synthesis shapes, or paths.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        push("bands", self.model.backbone.bands.to_string());
        push("stem_channels", self.model.backbone.stem_channels.to_string());
        push("block_channels", list_text(&self.model.backbone.block_channels));
        push("descriptor_dim", self.model.backbone.descriptor_dim.to_string());
        push("tern_blocks", self.model.backbone.tern.blocks.to_string());
        push("tern_layers_per_block", self.model.backbone.tern.layers_per_block.to_string());
        push("tern_kernel_size", self.model.backbone.tern.kernel_size.to_string());
        push("tern_dilations", list_text(&self.model.backbone.tern.dilations));
        push("tern_epsilon", format!("{:?}", self.model.backbone.tern.epsilon));
        push("tern_normalize", self.model.backbone.tern.normalize.to_string());
        push("clusters", self.model.clusters.to_string());
        push("residual_encoder", self.model.residual_encoder.to_string());
        push("batch_size", self.train.batch_size.to_string());
        push("learning_rate", format!("{:?}", self.train.learning_rate));
        push("momentum", format!("{:?}", self.train.momentum));
        push("weight_decay", format!("{:?}", self.train.weight_decay));
        push("temperature", format!("{:?}", self.train.temperature));
        push("train_patch", self.train.train_patch.to_string());
        push("seed", self.train.seed.to_string());
        push(
            "negatives_per_anchor",
            self.train.negatives_per_anchor.map_or_else(|| "all".into(), |n| n.to_string()),
        );
        out
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}
