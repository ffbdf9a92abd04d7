//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::inference::GridSpec;
use crate::patching::uniform_grid;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    /// Gallery size for `--random-baseline`.
    pub random_gallery_size: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            random_gallery_size: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub batches: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { batches: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub range: GridSpec,
    pub range_combine: bool,
    pub retrieval: RetrievalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            range: GridSpec::global(36, 72),
            range_combine: false,
            retrieval: RetrievalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value '{value}' for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "epochs" => t.epochs = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "learning_rate" => t.learning_rate = parse(key, v)?,
        "optimizer" => t.optimizer = v.parse()?,
        "grad_accumulation" => t.grad_accumulation = parse(key, v)?,
        "seed" => t.seed = parse(key, v)?,
        "early_stop_patience" => t.early_stop_patience = parse(key, v)?,
        "temperature" => t.temperature = parse(key, v)?,
        "location_pseudo_negatives" => t.location_pseudo_negatives = parse(key, v)?,
        "unlocked_init_from_locked" => t.unlocked_init_from_locked = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("epochs", t.epochs.to_string());
    put("batch_size", t.batch_size.to_string());
    put("learning_rate", t.learning_rate.to_string());
    put("optimizer", t.optimizer.to_string());
    put("grad_accumulation", t.grad_accumulation.to_string());
    put("seed", t.seed.to_string());
    put("early_stop_patience", t.early_stop_patience.to_string());
    put("temperature", t.temperature.to_string());
    put("location_pseudo_negatives", t.location_pseudo_negatives.to_string());
    put("unlocked_init_from_locked", t.unlocked_init_from_locked.to_string());
}

impl RunConfig {
    /// Defaults overlaid with `path` (if any), then with `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.experiment;
        let w = &mut e.world;
        let m = &mut e.model;
        match key {
            "world.seed" => w.seed = parse(key, v)?,
            "world.species_count" => w.species_count = parse(key, v)?,
            "world.samples_per_species" => w.samples_per_species = parse(key, v)?,
            "world.latent_dim" => w.latent_dim = parse(key, v)?,
            "world.image_dim" => w.image_dim = parse(key, v)?,
            "world.audio_dim" => w.audio_dim = parse(key, v)?,
            "world.sat_dim" => w.sat_dim = parse(key, v)?,
            "world.env_dim" => w.env_dim = parse(key, v)?,
            "world.image_noise" => w.image_noise = parse(key, v)?,
            "world.audio_noise" => w.audio_noise = parse(key, v)?,
            "world.sat_noise" => w.sat_noise = parse(key, v)?,
            "world.env_noise" => w.env_noise = parse(key, v)?,
            "world.trait_signal" => w.trait_signal = parse(key, v)?,
            "world.habitat_scale" => w.habitat_scale = parse(key, v)?,
            "world.bumps_per_species" => w.bumps_per_species = parse(key, v)?,
            "world.bump_std_deg" => w.bump_std_deg = parse(key, v)?,
            "world.env_basis_count" => w.env_basis_count = parse(key, v)?,
            "world.audio_missing_rate" => w.audio_missing_rate = parse(key, v)?,
            "split.train" => e.split.train = parse(key, v)?,
            "split.val" => e.split.val = parse(key, v)?,
            "split.test" => e.split.test = parse(key, v)?,
            "split.seed" => e.split_seed = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.image_hidden" => m.image_hidden = parse(key, v)?,
            "model.modality_hidden" => m.modality_hidden = parse(key, v)?,
            "model.env_blocks" => m.env_blocks = parse(key, v)?,
            "model.rff_count" => m.rff_count = parse(key, v)?,
            "model.rff_scale" => m.rff_scale = parse(key, v)?,
            "patch.order" => e.plan.order = parse_list::<Modality>(key, v)?,
            "patch.alpha_grid" => e.plan.alpha_grid = parse_list(key, v)?,
            "patch.beta_grid" => e.plan.beta_grid = parse_list(key, v)?,
            "patch.alpha_grid_step" => e.plan.alpha_grid = uniform_grid(parse(key, v)?)?,
            "patch.beta_grid_step" => e.plan.beta_grid = uniform_grid(parse(key, v)?)?,
            "patch.tune_against_accumulated" => e.plan.tune_against_accumulated = parse(key, v)?,
            "range.rows" => self.range.rows = parse(key, v)?,
            "range.cols" => self.range.cols = parse(key, v)?,
            "range.lat_min" => self.range.lat_min = parse(key, v)?,
            "range.lat_max" => self.range.lat_max = parse(key, v)?,
            "range.lon_min" => self.range.lon_min = parse(key, v)?,
            "range.lon_max" => self.range.lon_max = parse(key, v)?,
            "range.combine" => self.range_combine = parse(key, v)?,
            "retrieval.random_gallery_size" => self.retrieval.random_gallery_size = parse(key, v)?,
            "retrieval.seed" => self.retrieval.seed = parse(key, v)?,
            "gradcheck.batches" => self.gradcheck.batches = parse(key, v)?,
            "gradcheck.seed" => self.gradcheck.seed = parse(key, v)?,
            _ => {
                let known = match key.split_once('.') {
                    Some(("train", f)) => set_train(&mut e.pretrain, f, key, v)?,
                    Some(("tune", f)) => set_train(&mut e.tune, f, key, v)?,
                    _ => false,
                };
                if !known {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let e = &self.experiment;
        let w = &e.world;
        let m = &e.model;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("world.seed", w.seed.to_string());
        put("world.species_count", w.species_count.to_string());
        put("world.samples_per_species", w.samples_per_species.to_string());
        put("world.latent_dim", w.latent_dim.to_string());
        put("world.image_dim", w.image_dim.to_string());
        put("world.audio_dim", w.audio_dim.to_string());
        put("world.sat_dim", w.sat_dim.to_string());
        put("world.env_dim", w.env_dim.to_string());
        put("world.image_noise", w.image_noise.to_string());
        put("world.audio_noise", w.audio_noise.to_string());
        put("world.sat_noise", w.sat_noise.to_string());
        put("world.env_noise", w.env_noise.to_string());
        put("world.trait_signal", w.trait_signal.to_string());
        put("world.habitat_scale", w.habitat_scale.to_string());
        put("world.bumps_per_species", w.bumps_per_species.to_string());
        put("world.bump_std_deg", w.bump_std_deg.to_string());
        put("world.env_basis_count", w.env_basis_count.to_string());
        put("world.audio_missing_rate", w.audio_missing_rate.to_string());
        put("split.train", e.split.train.to_string());
        put("split.val", e.split.val.to_string());
        put("split.test", e.split.test.to_string());
        put("split.seed", e.split_seed.to_string());
        put("model.embed_dim", m.embed_dim.to_string());
        put("model.image_hidden", m.image_hidden.to_string());
        put("model.modality_hidden", m.modality_hidden.to_string());
        put("model.env_blocks", m.env_blocks.to_string());
        put("model.rff_count", m.rff_count.to_string());
        put("model.rff_scale", m.rff_scale.to_string());
        put("patch.order", join(&e.plan.order));
        put("patch.alpha_grid", join(&e.plan.alpha_grid));
        put("patch.beta_grid", join(&e.plan.beta_grid));
        put("patch.tune_against_accumulated", e.plan.tune_against_accumulated.to_string());
        put("range.rows", self.range.rows.to_string());
        put("range.cols", self.range.cols.to_string());
        put("range.lat_min", self.range.lat_min.to_string());
        put("range.lat_max", self.range.lat_max.to_string());
        put("range.lon_min", self.range.lon_min.to_string());
        put("range.lon_max", self.range.lon_max.to_string());
        put("range.combine", self.range_combine.to_string());
        put("retrieval.random_gallery_size", self.retrieval.random_gallery_size.to_string());
        put("retrieval.seed", self.retrieval.seed.to_string());
        put("gradcheck.batches", self.gradcheck.batches.to_string());
        put("gradcheck.seed", self.gradcheck.seed.to_string());
        train_entries("train", &e.pretrain, &mut out);
        train_entries("tune", &e.tune, &mut out);
        out
    }

    /// Resolved configuration as `key = value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.range.validate()?;
        if self.retrieval.random_gallery_size == 0 {
            return Err(Error::Config("retrieval.random_gallery_size must be >= 1".into()));
        }
        if self.gradcheck.batches == 0 {
            return Err(Error::Config("gradcheck.batches must be >= 1".into()));
        }
        Ok(())
    }
}
