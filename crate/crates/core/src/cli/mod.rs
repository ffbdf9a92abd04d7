//! `bindkit` command line.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

use crate::encoders::{EncoderHandle, Modality, PrototypeTable};
use crate::error::{Error, Result};
use crate::experiment::{
    emergent_recall_rows, init_rng, initial_encoders, modality_data, patch_task, pretrain_stage, unlocked_bindings,
};
use crate::inference::{
    combined_zero_shot_accuracy, random_unit_embeddings, range_map, recall_curve, retrieval_report_csv, Gallery,
    RetrievalRow, SatelliteProvider,
};
use crate::numcore::SeededRng;
use crate::objective::gradcheck_suite;
use crate::patching::{parallel_patch, sequential_patch, single_modality_patch, ModalityData};
use crate::synthdata::{read_dataset, split_stratified, write_dataset, Dataset, DatasetSplits, World};
use crate::training::{locked_tune, unlocked_tune, Checkpoint, TrainReport};

/// Gradient checks at or above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Parser)]
#[command(name = "bindkit", version, about = "Multimodal contrastive binding and patching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world and write the dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the binding (image) encoder and text prototypes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one modality encoder against the frozen binding encoder.
    BindLocked {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        modality: Modality,
    },
    /// Finetune the binding encoder together with one modality encoder.
    BindUnlocked {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        modality: Modality,
    },
    /// Sequential patching over `patch.order`.
    PatchSequential {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Average of single-modality patches, interpolated from the base.
    PatchParallel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Zero-shot accuracy on the test split.
    EvalZeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Cross-modal recall at k on the test split.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "random_baseline")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "random_baseline")]
        ckpt: Option<PathBuf>,
        #[arg(long, required_unless_present = "random_baseline")]
        query: Option<Modality>,
        #[arg(long, required_unless_present = "random_baseline")]
        gallery: Option<Modality>,
        /// Score random unit embeddings instead of a model.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Similarity of one image embedding to every cell of a lat/lon grid.
    RangeMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset index of the query image; defaults to the first test sample.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Finite-difference check of the loss gradients on seeded batches.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::BindLocked { common, .. }
            | Command::BindUnlocked { common, .. }
            | Command::PatchSequential { common, .. }
            | Command::PatchParallel { common, .. }
            | Command::EvalZeroshot { common, .. }
            | Command::EvalRetrieval { common, .. }
            | Command::RangeMap { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }
}

/// 1 for usage and configuration, 3 for failed verification, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Plan(_) => 1,
        Error::Verification(_) => 3,
        _ => 2,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads(std::env::var("BINDKIT_THREADS").ok().as_deref()) {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads(value: Option<&str>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BINDKIT_THREADS must be a positive integer, got '{v}'")))?;
    // Fails only if the global pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: &Command) -> Result<()> {
    let common = command.common();
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("run.cfg"), cfg.render())?;
    let out = common.out.as_path();
    match command {
        Command::GenData { .. } => gen_data(&cfg, out),
        Command::Pretrain { data, .. } => pretrain(&cfg, out, data),
        Command::BindLocked { data, ckpt, modality, .. } => bind_locked(&cfg, out, data, ckpt, *modality),
        Command::BindUnlocked { data, ckpt, modality, .. } => bind_unlocked(&cfg, out, data, ckpt, *modality),
        Command::PatchSequential { data, ckpt, .. } => patch_seq(&cfg, out, data, ckpt),
        Command::PatchParallel { data, ckpt, .. } => patch_par(&cfg, out, data, ckpt),
        Command::EvalZeroshot { data, ckpt, .. } => eval_zeroshot(&cfg, out, data, ckpt),
        Command::EvalRetrieval {
            random_baseline: true, ..
        } => random_retrieval(&cfg, out),
        Command::EvalRetrieval {
            data,
            ckpt,
            query,
            gallery,
            ..
        } => {
            let missing = || Error::Config("eval-retrieval needs --data, --ckpt, --query and --gallery".into());
            eval_retrieval(
                &cfg,
                out,
                data.as_deref().ok_or_else(missing)?,
                ckpt.as_deref().ok_or_else(missing)?,
                query.ok_or_else(missing)?,
                gallery.ok_or_else(missing)?,
            )
        }
        Command::RangeMap { data, ckpt, sample, .. } => range(&cfg, out, data, ckpt, *sample),
        Command::Gradcheck { .. } => gradcheck(&cfg, out),
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    with_path(path, Checkpoint::load(path))
}

fn load_data(cfg: &RunConfig, path: &Path) -> Result<(Dataset, DatasetSplits)> {
    let ds = with_path(path, read_dataset(path))?;
    let splits = split_stratified(&ds, cfg.experiment.split, cfg.experiment.split_seed)?;
    for w in &splits.warnings {
        log::warn!("{w}");
    }
    Ok((ds, splits))
}

fn binding(ckpt: &Checkpoint) -> Result<(EncoderHandle, PrototypeTable)> {
    Ok((ckpt.require(Modality::Image)?.clone(), ckpt.require_prototypes()?.clone()))
}

fn history_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (i, t) in report.train_loss.iter().enumerate() {
        match report.val_loss.get(i) {
            Some(v) => writeln!(s, "{i},{t},{v}").unwrap(),
            None => writeln!(s, "{i},{t},").unwrap(),
        }
    }
    s
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = World::new(&cfg.experiment.world)?;
    let ds = world.dataset();
    let splits = split_stratified(&ds, cfg.experiment.split, cfg.experiment.split_seed)?;
    write_dataset(&ds, &out.join("dataset.bin"))?;
    let mut summary = String::new();
    writeln!(summary, "species = {}", ds.species_count).unwrap();
    writeln!(summary, "samples = {}", ds.len()).unwrap();
    writeln!(summary, "with_audio = {}", ds.audio_count()).unwrap();
    writeln!(summary, "train = {}", splits.train.len()).unwrap();
    writeln!(summary, "val = {}", splits.val.len()).unwrap();
    writeln!(summary, "test = {}", splits.test.len()).unwrap();
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path, data: &Path) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let pre = pretrain_stage(&cfg.experiment, &ds, &splits)?;
    let ckpt = Checkpoint::new(
        vec![pre.image],
        Some(pre.prototypes),
        cfg.experiment.pretrain.config_hash(),
        pre.report.train_loss.clone(),
    )?;
    ckpt.save(&out.join("pretrain.ckpt"))?;
    std::fs::write(out.join("history.csv"), history_csv(&pre.report))?;
    if let Some(a) = pre.val_accuracy {
        println!("val zero-shot accuracy = {a}");
    }
    Ok(())
}

fn bind_locked(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path, m: Modality) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let base = load_ckpt(ckpt)?;
    let (f, protos) = binding(&base)?;
    let e = &cfg.experiment;
    let h0 = e.model.modality_encoder(m, &ds.dims, &mut init_rng(e.tune.seed, m))?;
    let md = modality_data(&ds, &splits, m);
    let (h, report) = locked_tune(&f, h0, &md.train, &md.val, &e.tune)?;
    let mut encoders: Vec<EncoderHandle> = base.encoders().iter().filter(|x| x.modality() != m).cloned().collect();
    encoders.push(h);
    Checkpoint::new(encoders, Some(protos), e.tune.config_hash(), report.train_loss.clone())?.save(&out.join("locked.ckpt"))?;
    std::fs::write(out.join("history.csv"), history_csv(&report))?;
    Ok(())
}

fn bind_unlocked(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path, m: Modality) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let base = load_ckpt(ckpt)?;
    let (f, protos) = binding(&base)?;
    let e = &cfg.experiment;
    let h0 = match base.encoder(m) {
        Some(h) if e.tune.unlocked_init_from_locked => h.clone(),
        _ => e.model.modality_encoder(m, &ds.dims, &mut init_rng(e.tune.seed, m))?,
    };
    let md = modality_data(&ds, &splits, m);
    let (f_star, h, report) = unlocked_tune(&f, h0, &md.train, &md.val, &e.tune)?;
    Checkpoint::new(vec![f_star, h], Some(protos), e.tune.config_hash(), report.train_loss.clone())?
        .save(&out.join("unlocked.ckpt"))?;
    std::fs::write(out.join("history.csv"), history_csv(&report))?;
    Ok(())
}

fn planned_data(cfg: &RunConfig, ds: &Dataset, splits: &DatasetSplits) -> BTreeMap<Modality, ModalityData> {
    cfg.experiment
        .plan
        .order
        .iter()
        .map(|&m| (m, modality_data(ds, splits, m)))
        .collect()
}

fn patch_seq(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let (f, protos) = binding(&load_ckpt(ckpt)?)?;
    let e = &cfg.experiment;
    let task = patch_task(&ds, &splits, &protos)?;
    let initial = initial_encoders(e, &ds.dims)?;
    let result = sequential_patch(&f, &initial, &planned_data(cfg, &ds, &splits), &e.plan, &task, &e.tune)?;
    let hash = e.tune.config_hash();

    let mut patched = vec![result.binding.clone()];
    patched.extend(result.encoders.iter().cloned());
    Checkpoint::new(patched, Some(protos.clone()), hash, Vec::new())?.save(&out.join("patched.ckpt"))?;
    let mut locked = vec![f];
    locked.extend(result.locked.iter().cloned());
    Checkpoint::new(locked, Some(protos), hash, Vec::new())?.save(&out.join("locked.ckpt"))?;

    std::fs::write(out.join("trace.csv"), result.alpha_trace_csv(&e.plan))?;
    std::fs::write(out.join("beta_trace.csv"), result.beta_trace_csv(&e.plan))?;
    let mut steps = String::from("modality,alpha,beta,accuracy_before,accuracy_after\n");
    for s in &result.steps {
        writeln!(steps, "{},{},{},{},{}", s.modality, s.alpha, s.beta, s.accuracy_before, s.accuracy_after).unwrap();
    }
    std::fs::write(out.join("steps.csv"), &steps)?;
    print!("{steps}");
    Ok(())
}

fn patch_par(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let (f, protos) = binding(&load_ckpt(ckpt)?)?;
    let e = &cfg.experiment;
    if e.plan.order.is_empty() {
        return Err(Error::Plan("parallel patching needs at least one modality".into()));
    }
    e.plan.validate()?;
    let task = patch_task(&ds, &splits, &protos)?;
    let initial = initial_encoders(e, &ds.dims)?;
    let unlocked = unlocked_bindings(&f, &initial, &planned_data(cfg, &ds, &splits), &e.plan, &e.tune)?;
    let singles = unlocked
        .iter()
        .map(|(_, p)| single_modality_patch(&f, p, &task, &e.plan.alpha_grid))
        .collect::<Result<Vec<_>>>()?;
    let (params, w, trace) = parallel_patch(&f, &singles, &task, &e.plan.alpha_grid)?;
    let merged = f.with_params(params)?;
    Checkpoint::new(vec![merged], Some(protos), e.tune.config_hash(), Vec::new())?.save(&out.join("parallel.ckpt"))?;
    let mut csv = String::from("w,accuracy\n");
    for (g, a) in e.plan.alpha_grid.iter().zip(&trace) {
        writeln!(csv, "{g},{a}").unwrap();
    }
    std::fs::write(out.join("trace.csv"), csv)?;
    println!("w = {w}");
    Ok(())
}

fn eval_zeroshot(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let ck = load_ckpt(ckpt)?;
    let (f, protos) = binding(&ck)?;
    let test = ds.subset(&splits.test);
    let mut queries: Vec<Vec<(Modality, &EncoderHandle)>> = vec![vec![(Modality::Image, &f)]];
    for h in ck.encoders().iter().filter(|h| h.modality() != Modality::Image) {
        queries.push(vec![(h.modality(), h)]);
        queries.push(vec![(Modality::Image, &f), (h.modality(), h)]);
    }
    let mut csv = String::from("query,accuracy,num_samples\n");
    for q in &queries {
        let name = q.iter().map(|(m, _)| m.name()).collect::<Vec<_>>().join("+");
        let n = test
            .iter()
            .filter(|s| q.iter().all(|(m, _)| s.record(*m).is_some()))
            .count();
        let acc = combined_zero_shot_accuracy(q, &protos, &test)?;
        writeln!(csv, "{name},{acc},{n}").unwrap();
    }
    std::fs::write(out.join("zeroshot.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn eval_retrieval(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path, q: Modality, g: Modality) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let ck = load_ckpt(ckpt)?;
    let test = ds.subset(&splits.test);
    let rows = emergent_recall_rows(ck.require(q)?, ck.require(g)?, &test, &RETRIEVAL_KS)?;
    let csv = retrieval_report_csv(&rows);
    std::fs::write(out.join("retrieval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn random_retrieval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let n = cfg.retrieval.random_gallery_size;
    let d = cfg.experiment.model.embed_dim;
    let root = SeededRng::new(cfg.retrieval.seed).fork_named("random-baseline");
    let queries = random_unit_embeddings(n, d, &mut root.fork(0));
    let gallery = Gallery::indexed(random_unit_embeddings(n, d, &mut root.fork(1)))?;
    let gt: Vec<Option<u64>> = (0..n as u64).map(Some).collect();
    let ks: Vec<usize> = RETRIEVAL_KS.iter().map(|&k| k.min(n)).collect();
    let recall = recall_curve(&queries, &gallery, &gt, &ks)?;
    let rows: Vec<RetrievalRow> = ks
        .iter()
        .zip(recall)
        .map(|(&k, recall)| RetrievalRow {
            k,
            recall,
            num_queries: n,
            gallery_size: n,
        })
        .collect();
    let csv = retrieval_report_csv(&rows);
    std::fs::write(out.join("retrieval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn range(cfg: &RunConfig, out: &Path, data: &Path, ckpt: &Path, sample: Option<usize>) -> Result<()> {
    let (ds, splits) = load_data(cfg, data)?;
    let ck = load_ckpt(ckpt)?;
    let f = ck.require(Modality::Image)?;
    let loc = ck.require(Modality::Location)?;
    let index = match sample {
        Some(i) => i,
        None => *splits
            .test
            .first()
            .ok_or_else(|| Error::Data("test split is empty".into()))?,
    };
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| Error::Data(format!("sample {index} out of range ({} samples)", ds.len())))?;
    let query = f.encode(&s.record(Modality::Image).expect("image is always present"))?;
    let world;
    let sat: Option<(&EncoderHandle, &dyn SatelliteProvider)> = if cfg.range_combine {
        world = World::new(&cfg.experiment.world)?;
        Some((ck.require(Modality::Satellite)?, &world))
    } else {
        None
    };
    let grid = range_map(&query, &cfg.range, loc, sat, cfg.range_combine)?;
    grid.write_files(&out.join("range.csv"), &out.join("range.pgm"))?;
    println!("query sample = {index} species = {}", s.species_id);
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cases = gradcheck_suite(cfg.gradcheck.seed, cfg.gradcheck.batches)?;
    let mut csv = String::from("index,n,d,temperature,max_rel_error\n");
    for c in &cases {
        writeln!(csv, "{},{},{},{},{:e}", c.index, c.n, c.d, c.temperature, c.max_rel_error).unwrap();
    }
    let worst = if cases.iter().any(|c| c.max_rel_error.is_nan()) {
        f64::NAN
    } else {
        cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    };
    std::fs::write(out.join("gradcheck.csv"), csv)?;
    println!("max relative error = {worst:e} over {} batches", cases.len());
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(Error::Verification(format!(
            "max relative gradient error {worst:e} >= {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
