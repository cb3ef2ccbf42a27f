//! Layered pipeline configuration: defaults, then environment, then a
//! `key = value` file, then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bevtraj::eval::Baseline;
use bevtraj::synth::SceneSpec;
use bevtraj::train::{parse_key_values, TrainConfig};
use bevtraj::window::DEFAULT_STRIDE;
use bevtraj::{Error, Result};

pub const DATA_ROOT_ENV: &str = "BEVTRAJ_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data_root: Option<PathBuf>,
    pub split_seed: u64,
    pub stride: i64,
    /// Cap on target vehicles per recording; `None` keeps all.
    pub max_targets: Option<usize>,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub baselines: Vec<Baseline>,
    pub reference: bool,
    pub overlays: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_root: None,
            split_seed: 0,
            stride: DEFAULT_STRIDE,
            max_targets: None,
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            baselines: vec![Baseline::ConstantVelocity, Baseline::ConstantPosition],
            reference: true,
            overlays: 4,
        }
    }
}

/// Manifest bookkeeping keys that a config file may carry and that are skipped.
fn is_metadata_key(key: &str) -> bool {
    matches!(key, "command" | "version") || key.starts_with("input.") || key.starts_with("output.")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for {key}"))),
    }
}

impl PipelineConfig {
    /// Defaults plus the data-root environment variable.
    pub fn from_env() -> Self {
        let mut c = PipelineConfig::default();
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                c.data_root = Some(PathBuf::from(root));
            }
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scene;
        match key {
            "data_root" => self.data_root = Some(PathBuf::from(value.trim())),
            "split_seed" => self.split_seed = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "max_targets" => {
                self.max_targets = match value.trim() {
                    "" | "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => {
                self.train.seed = parse(key, value)?;
                s.seed = self.train.seed;
            }
            "vehicles" => s.n_vehicles = parse(key, value)?,
            "lanes" => s.n_lanes = parse(key, value)?,
            "lane_width" => s.lane_width = parse(key, value)?,
            "duration" => s.duration = parse(key, value)?,
            "speed_min" => s.speed_range.0 = parse(key, value)?,
            "speed_max" => s.speed_range.1 = parse(key, value)?,
            "lane_change_probability" => s.lane_change_probability = parse(key, value)?,
            "lane_change_duration" => s.lane_change_duration = parse(key, value)?,
            "spawn_length" => s.spawn_length = parse(key, value)?,
            "baselines" => {
                self.baselines = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty() && *v != "none")
                    .map(Baseline::parse)
                    .collect::<Result<_>>()?
            }
            "reference" => self.reference = parse_bool(key, value)?,
            "overlays" => self.overlays = parse(key, value)?,
            k if is_metadata_key(k) => {}
            other => self.train.set(other, value)?,
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_pairs(&mut self, pairs: &[(&str, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride <= 0 {
            return Err(Error::Config(format!("stride must be positive, got {}", self.stride)));
        }
        self.train.validate()?;
        self.scene.validate()
    }

    /// Every setting as `key = value` lines, accepted back by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = String::new();
        if let Some(root) = &self.data_root {
            let _ = writeln!(out, "data_root = {}", root.display());
        }
        let _ = writeln!(out, "split_seed = {}", self.split_seed);
        let _ = writeln!(out, "stride = {}", self.stride);
        let _ = writeln!(
            out,
            "max_targets = {}",
            self.max_targets.map_or("all".to_string(), |n| n.to_string())
        );
        out.push_str(&self.train.to_text());
        for (k, v) in [
            ("vehicles", s.n_vehicles.to_string()),
            ("lanes", s.n_lanes.to_string()),
            ("lane_width", s.lane_width.to_string()),
            ("duration", s.duration.to_string()),
            ("speed_min", s.speed_range.0.to_string()),
            ("speed_max", s.speed_range.1.to_string()),
            ("lane_change_probability", s.lane_change_probability.to_string()),
            ("lane_change_duration", s.lane_change_duration.to_string()),
            ("spawn_length", s.spawn_length.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let baselines: Vec<_> = self
            .baselines
            .iter()
            .map(|b| match b {
                Baseline::ConstantVelocity => "cv",
                Baseline::ConstantPosition => "cp",
            })
            .collect();
        let _ = writeln!(
            out,
            "baselines = {}",
            if baselines.is_empty() { "none".to_string() } else { baselines.join(",") }
        );
        let _ = writeln!(out, "reference = {}", self.reference);
        let _ = writeln!(out, "overlays = {}", self.overlays);
        out
    }
}
