//! End-to-end runs on the synthetic world: pretraining, sequential and
//! parallel patching, and the test-split metrics they are compared on.

use std::collections::BTreeMap;

use crate::encoders::{EncoderHandle, LocationEncoderSpec, MlpSpec, Modality, PrototypeTable, Record};
use crate::error::{Error, Result};
use crate::inference::{combined_zero_shot_accuracy, recall_curve, zero_shot_accuracy, Gallery, RetrievalRow};
use crate::numcore::{ParamVector, SeededRng};
use crate::patching::{
    eval_patch_task, parallel_patch, sequential_patch, single_modality_patch, ModalityData, PatchPlan, PatchResult,
    PatchTask,
};
use crate::synthdata::{split_stratified, Dataset, DatasetSplits, FeatureDims, MultimodalSample, SplitRatios, World, WorldConfig};
use crate::training::{locked_tune, pretrain_binding, unlocked_tune, PairedData, PretrainOutput, TrainConfig};

/// Encoder sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub modality_hidden: usize,
    pub env_blocks: usize,
    pub rff_count: usize,
    pub rff_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            image_hidden: 64,
            modality_hidden: 64,
            env_blocks: 4,
            rff_count: 32,
            rff_scale: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.image_hidden == 0 || self.modality_hidden == 0 || self.env_blocks == 0 {
            return Err(Error::Config("model sizes must be >= 1".into()));
        }
        LocationEncoderSpec::new(self.rff_count, self.rff_scale, vec![self.modality_hidden], self.embed_dim).validate()
    }

    pub fn image_encoder(&self, dims: &FeatureDims, rng: &mut SeededRng) -> Result<EncoderHandle> {
        EncoderHandle::mlp(
            Modality::Image,
            MlpSpec::new(dims.image, vec![self.image_hidden], self.embed_dim),
            rng,
        )
    }

    /// Fresh encoder for a non-binding modality.
    pub fn modality_encoder(&self, m: Modality, dims: &FeatureDims, rng: &mut SeededRng) -> Result<EncoderHandle> {
        let h = self.modality_hidden;
        let d = self.embed_dim;
        match m {
            Modality::Location => EncoderHandle::location(LocationEncoderSpec::new(self.rff_count, self.rff_scale, vec![h], d), rng),
            Modality::Env => EncoderHandle::mlp(m, MlpSpec::residual(dims.env, h, self.env_blocks, d), rng),
            Modality::Satellite => EncoderHandle::mlp(m, MlpSpec::new(dims.sat, vec![h], d), rng),
            Modality::Audio => EncoderHandle::mlp(m, MlpSpec::new(dims.audio, vec![h], d), rng),
            Modality::Image | Modality::Text => Err(Error::Config(format!("{m} is not a patchable modality"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    pub plan: PatchPlan,
}

/// Learning rate used by the experiment stages.
pub const EXPERIMENT_LEARNING_RATE: f64 = 3e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            learning_rate: EXPERIMENT_LEARNING_RATE,
            ..TrainConfig::default()
        };
        Self {
            world: WorldConfig::default(),
            split: SplitRatios::default(),
            split_seed: 0,
            model: ModelConfig::default(),
            pretrain: train.clone(),
            tune: train,
            plan: PatchPlan::default(),
        }
    }
}

impl ExperimentConfig {
    /// Same configuration with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.world.seed = seed;
        c.split_seed = seed;
        c.pretrain.seed = seed;
        c.tune.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        self.plan.validate()
    }
}

/// Initialization stream for one encoder, independent of the others.
pub fn init_rng(seed: u64, m: Modality) -> SeededRng {
    SeededRng::new(seed).fork_named(&format!("init.{m}"))
}

pub fn pretrain_stage(cfg: &ExperimentConfig, ds: &Dataset, splits: &DatasetSplits) -> Result<PretrainOutput> {
    let image = cfg.model.image_encoder(&ds.dims, &mut init_rng(cfg.pretrain.seed, Modality::Image))?;
    let table = PrototypeTable::random(
        ds.species_count,
        cfg.model.embed_dim,
        &mut init_rng(cfg.pretrain.seed, Modality::Text),
    )?;
    pretrain_binding(
        image,
        table,
        &ds.subset(&splits.train),
        &ds.subset(&splits.val),
        &cfg.pretrain,
    )
}

pub fn modality_data(ds: &Dataset, splits: &DatasetSplits, m: Modality) -> ModalityData {
    ModalityData {
        train: PairedData::from_samples(ds.subset(&splits.train), Modality::Image, m),
        val: PairedData::from_samples(ds.subset(&splits.val), Modality::Image, m),
    }
}

pub fn initial_encoders(cfg: &ExperimentConfig, dims: &FeatureDims) -> Result<BTreeMap<Modality, EncoderHandle>> {
    cfg.plan
        .order
        .iter()
        .map(|&m| Ok((m, cfg.model.modality_encoder(m, dims, &mut init_rng(cfg.tune.seed, m))?)))
        .collect()
}

pub fn patch_task(ds: &Dataset, splits: &DatasetSplits, prototypes: &PrototypeTable) -> Result<PatchTask> {
    PatchTask::new(
        ds.subset(&splits.val).into_iter().cloned().collect(),
        prototypes.clone(),
    )
}

/// Unlocked binding parameters per planned modality, each tuned against the
/// original `f` after locked tuning of that modality's encoder.
pub fn unlocked_bindings(
    f: &EncoderHandle,
    initial: &BTreeMap<Modality, EncoderHandle>,
    datasets: &BTreeMap<Modality, ModalityData>,
    plan: &PatchPlan,
    cfg: &TrainConfig,
) -> Result<Vec<(Modality, ParamVector)>> {
    plan.order
        .iter()
        .map(|&m| {
            let (Some(h0), Some(data)) = (initial.get(&m), datasets.get(&m)) else {
                return Err(Error::Plan(format!("no encoder or dataset for planned modality {m}")));
            };
            let (h_star, _) = locked_tune(f, h0.clone(), &data.train, &data.val, cfg)?;
            let start = if cfg.unlocked_init_from_locked { h_star } else { h0.clone() };
            let (f_star, _, _) = unlocked_tune(f, start, &data.train, &data.val, cfg)?;
            Ok((m, f_star.params().clone()))
        })
        .collect()
}

/// Test-split numbers for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub seed: u64,
    pub pretrain_val_accuracy: f64,
    /// Image zero-shot with the unpatched binding encoder (locked-only).
    pub locked_only: f64,
    pub sequential: f64,
    pub parallel: f64,
    pub single: Vec<(Modality, f64)>,
    /// Patched binding encoder alone and combined with patched encoders.
    pub image_only: f64,
    pub image_location: f64,
    pub image_satellite: f64,
    /// sat -> env R@1, R@5, R@10 on the test split with patched encoders.
    pub sat_env_recall: [f64; 3],
    pub gallery_size: usize,
    pub alphas: Vec<(Modality, f64)>,
    pub betas: Vec<(Modality, f64)>,
    /// Patching-task accuracy before the first step and after each step.
    pub task_accuracy: Vec<f64>,
}

impl Outcome {
    pub fn random_r1(&self) -> f64 {
        1.0 / self.gallery_size as f64
    }

    pub fn best_single(&self) -> f64 {
        self.single.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Everything produced by one full run.
pub struct Run {
    pub dataset: Dataset,
    pub splits: DatasetSplits,
    pub pretrain: PretrainOutput,
    pub patch: PatchResult,
    pub parallel_binding: ParamVector,
    pub single_bindings: Vec<(Modality, ParamVector)>,
    pub outcome: Outcome,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Run> {
    cfg.validate()?;
    let world = World::new(&cfg.world)?;
    let dataset = world.dataset();
    let splits = split_stratified(&dataset, cfg.split, cfg.split_seed)?;
    let pre = pretrain_stage(cfg, &dataset, &splits)?;
    let f = pre.image.clone();
    let task = patch_task(&dataset, &splits, &pre.prototypes)?;

    let datasets: BTreeMap<Modality, ModalityData> = cfg
        .plan
        .order
        .iter()
        .map(|&m| (m, modality_data(&dataset, &splits, m)))
        .collect();
    let initial = initial_encoders(cfg, &dataset.dims)?;
    let patch = sequential_patch(&f, &initial, &datasets, &cfg.plan, &task, &cfg.tune)?;

    let single_bindings: Vec<(Modality, ParamVector)> = patch
        .steps
        .iter()
        .map(|s| Ok((s.modality, single_modality_patch(&f, &s.unlocked_binding, &task, &cfg.plan.alpha_grid)?)))
        .collect::<Result<_>>()?;
    let parallel_binding = if single_bindings.is_empty() {
        f.params().clone()
    } else {
        let sets: Vec<ParamVector> = single_bindings.iter().map(|s| s.1.clone()).collect();
        parallel_patch(&f, &sets, &task, &cfg.plan.alpha_grid)?.0
    };

    let test = dataset.subset(&splits.test);
    let protos = &pre.prototypes;
    let image_acc = |p: &ParamVector| -> Result<f64> { zero_shot_accuracy(&f.with_params(p.clone())?, protos, &test, Modality::Image) };

    let locked_only = image_acc(f.params())?;
    let sequential = image_acc(patch.binding.params())?;
    let parallel = image_acc(&parallel_binding)?;
    let single = single_bindings
        .iter()
        .map(|(m, p)| Ok((*m, image_acc(p)?)))
        .collect::<Result<Vec<_>>>()?;

    let patched = |m: Modality| patch.encoders.iter().find(|e| e.modality() == m);
    let with = |m: Modality| -> Result<f64> {
        match patched(m) {
            Some(h) => combined_zero_shot_accuracy(&[(Modality::Image, &patch.binding), (m, h)], protos, &test),
            None => Ok(f64::NAN),
        }
    };
    let image_location = with(Modality::Location)?;
    let image_satellite = with(Modality::Satellite)?;

    let (sat_env_recall, gallery_size) = match (patched(Modality::Satellite), patched(Modality::Env)) {
        (Some(sat), Some(env)) => emergent_recall(sat, env, &test)?,
        _ => ([f64::NAN; 3], test.len()),
    };

    let mut task_accuracy = Vec::new();
    if let Some(first) = patch.steps.first() {
        task_accuracy.push(first.accuracy_before);
    } else {
        task_accuracy.push(eval_patch_task(&f, f.params(), &task)?);
    }
    task_accuracy.extend(patch.steps.iter().map(|s| s.accuracy_after));

    let outcome = Outcome {
        seed: cfg.world.seed,
        pretrain_val_accuracy: pre.val_accuracy.unwrap_or(f64::NAN),
        locked_only,
        sequential,
        parallel,
        single,
        image_only: sequential,
        image_location,
        image_satellite,
        sat_env_recall,
        gallery_size,
        alphas: patch.steps.iter().map(|s| (s.modality, s.alpha)).collect(),
        betas: patch.steps.iter().map(|s| (s.modality, s.beta)).collect(),
        task_accuracy,
    };
    Ok(Run {
        dataset,
        splits,
        pretrain: pre,
        patch,
        parallel_binding,
        single_bindings,
        outcome,
    })
}

/// Query encoder `a` against a gallery built with encoder `b` over the same
/// samples; sample `i` is the ground truth of query `i`. `k` is capped at the
/// gallery size.
pub fn emergent_recall_rows(
    a: &EncoderHandle,
    b: &EncoderHandle,
    samples: &[&MultimodalSample],
    ks: &[usize],
) -> Result<Vec<RetrievalRow>> {
    let pairs: Vec<(Record, Record)> = samples
        .iter()
        .filter_map(|s| Some((s.record(a.modality())?, s.record(b.modality())?)))
        .collect();
    let (qa, gb): (Vec<Record>, Vec<Record>) = pairs.into_iter().unzip();
    let queries = a.encode_all(&qa)?;
    let gallery = Gallery::indexed(b.encode_all(&gb)?)?;
    let gt: Vec<Option<u64>> = (0..queries.len() as u64).map(Some).collect();
    let ks: Vec<usize> = ks.iter().map(|&k| k.min(gallery.len())).collect();
    let r = recall_curve(&queries, &gallery, &gt, &ks)?;
    Ok(ks
        .iter()
        .zip(r)
        .map(|(&k, recall)| RetrievalRow {
            k,
            recall,
            num_queries: queries.len(),
            gallery_size: gallery.len(),
        })
        .collect())
}

/// R@1, R@5, R@10 and the gallery size.
pub fn emergent_recall(a: &EncoderHandle, b: &EncoderHandle, samples: &[&MultimodalSample]) -> Result<([f64; 3], usize)> {
    let rows = emergent_recall_rows(a, b, samples, &[1, 5, 10])?;
    Ok(([rows[0].recall, rows[1].recall, rows[2].recall], rows[0].gallery_size))
}
