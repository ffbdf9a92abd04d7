#![allow(dead_code)]

use std::path::PathBuf;
use std::process::{Command, Output};

use bindkit::encoders::{EncoderHandle, LocationEncoderSpec, Modality};
use bindkit::experiment::ExperimentConfig;
use bindkit::inference::{range_map, GridSpec, RangeGrid};
use bindkit::numcore::SeededRng;
use bindkit::synthdata::{split_stratified, Dataset, DatasetSplits, World};

/// Small world and fast training settings, embedding size 16.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.world.species_count = 6;
    cfg.world.samples_per_species = 40;
    cfg.model.embed_dim = 16;
    cfg.model.image_hidden = 32;
    cfg.model.modality_hidden = 32;
    cfg.model.env_blocks = 2;
    cfg.split.train = 0.7;
    cfg.split.val = 0.15;
    cfg.split.test = 0.15;
    cfg.pretrain.epochs = 20;
    cfg.pretrain.batch_size = 32;
    cfg.tune.epochs = 10;
    cfg.tune.batch_size = 32;
    cfg
}

pub fn world_data(cfg: &ExperimentConfig) -> (Dataset, DatasetSplits) {
    let ds = World::new(&cfg.world).unwrap().dataset();
    let splits = split_stratified(&ds, cfg.split, cfg.split_seed).unwrap();
    (ds, splits)
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Location encoder behind the 4x4 golden range map.
pub fn golden_encoder() -> EncoderHandle {
    EncoderHandle::location(LocationEncoderSpec::new(8, 2.0, vec![8], 4), &mut SeededRng::new(2024)).unwrap()
}

pub const GOLDEN_SELF_CELL: (usize, usize) = (1, 2);

/// 4x4 global map queried with the embedding of one of its own cells.
pub fn golden_grid() -> (RangeGrid, EncoderHandle, Vec<f64>) {
    let enc = golden_encoder();
    let spec = GridSpec::global(4, 4);
    let (lat, lon) = spec.cell_center(GOLDEN_SELF_CELL.0, GOLDEN_SELF_CELL.1);
    let query = enc.encode(&bindkit::encoders::Record::Location { lat, lon }).unwrap();
    assert_eq!(enc.modality(), Modality::Location);
    let grid = range_map(&query, &spec, &enc, None, false).unwrap();
    (grid, enc, query)
}

pub fn bindkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bindkit"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn bindkit")
}

/// Overrides that keep CLI runs to a few seconds.
pub const FAST: &[&str] = &[
    "--set", "world.species_count=6",
    "--set", "world.samples_per_species=40",
    "--set", "split.train=0.7",
    "--set", "split.val=0.15",
    "--set", "split.test=0.15",
    "--set", "model.embed_dim=16",
    "--set", "model.image_hidden=16",
    "--set", "model.modality_hidden=16",
    "--set", "train.epochs=3",
    "--set", "train.batch_size=16",
    "--set", "tune.epochs=2",
    "--set", "tune.batch_size=16",
    "--set", "patch.order=location,satellite,env",
    "--set", "patch.alpha_grid_step=0.25",
    "--set", "patch.beta_grid_step=0.25",
    "--set", "range.rows=6",
    "--set", "range.cols=8",
];
