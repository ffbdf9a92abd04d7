//! Multimodal patching: weight interpolation between locked and unlocked
//! tuning results, with mixing coefficients picked on a zero-shot task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::encoders::{EncoderHandle, Modality, PrototypeTable};
use crate::error::{Error, Result};
use crate::inference::accuracy_of;
use crate::numcore::ParamVector;
use crate::synthdata::MultimodalSample;
use crate::training::{locked_tune, unlocked_tune, PairedData, TrainConfig};

/// `(1 - w) a + w b`. Exact at both endpoints.
pub fn interpolate(a: &ParamVector, b: &ParamVector, w: f64) -> Result<ParamVector> {
    a.ensure_same_layout(b)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("interpolation weight {w} outside [0, 1]")));
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    for (o, bv) in out.values_mut().iter_mut().zip(b.values()) {
        *o = (1.0 - w) * *o + w * bv;
    }
    Ok(out)
}

/// `0, step, 2 step, ..., 1`.
pub fn uniform_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} must be in (0, 1]")));
    }
    let n = (1.0 / step).round();
    if ((n * step) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

fn validate_grid(grid: &[f64], name: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} is empty")));
    }
    if let Some(w) = grid.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Config(format!("{name} value {w} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchEvaluator {
    /// Top-1 classification of encoder embeddings against text prototypes.
    ZeroShotText,
}

/// Held-out samples and prototypes used to score candidate parameters.
#[derive(Debug, Clone)]
pub struct PatchTask {
    samples: Vec<MultimodalSample>,
    prototypes: PrototypeTable,
    normalized: Vec<Vec<f64>>,
    pub evaluator: PatchEvaluator,
}

impl PatchTask {
    pub fn new(samples: Vec<MultimodalSample>, prototypes: PrototypeTable) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Size("patching task has no samples".into()));
        }
        let normalized = prototypes.normalized()?;
        Ok(Self {
            samples,
            prototypes,
            normalized,
            evaluator: PatchEvaluator::ZeroShotText,
        })
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn prototypes(&self) -> &PrototypeTable {
        &self.prototypes
    }
}

/// Zero-shot accuracy of `template`'s architecture run with `params` on the
/// task samples of the template's modality.
pub fn eval_patch_task(template: &EncoderHandle, params: &ParamVector, task: &PatchTask) -> Result<f64> {
    let enc = template.with_params(params.clone())?;
    let m = enc.modality();
    let (records, labels): (Vec<_>, Vec<_>) = task
        .samples
        .iter()
        .filter_map(|s| s.record(m).map(|r| (r, s.label())))
        .unzip();
    if records.is_empty() {
        return Err(Error::Size(format!("patching task has no {m} records")));
    }
    let embeddings = enc.encode_all(&records)?;
    accuracy_of(&embeddings, &labels, &task.normalized)
}

/// Best grid point for `interpolate(base, tuned, w)`; ties go to the
/// smallest `w`. Returns `(w*, accuracy per grid point)`.
pub fn select_coefficient(
    template: &EncoderHandle,
    base: &ParamVector,
    tuned: &ParamVector,
    task: &PatchTask,
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    validate_grid(grid, "grid")?;
    base.ensure_same_layout(tuned)?;
    let trace: Vec<f64> = grid
        .par_iter()
        .map(|&w| eval_patch_task(template, &interpolate(base, tuned, w)?, task))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..grid.len() {
        if trace[i] > trace[best] || (trace[i] == trace[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok((grid[best], trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub order: Vec<Modality>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Run locked/unlocked tuning against the accumulated binding encoder
    /// instead of the original one.
    pub tune_against_accumulated: bool,
}

impl Default for PatchPlan {
    fn default() -> Self {
        let grid = uniform_grid(0.05).unwrap();
        Self {
            order: vec![Modality::Location, Modality::Satellite, Modality::Env, Modality::Audio],
            alpha_grid: grid.clone(),
            beta_grid: grid,
            tune_against_accumulated: false,
        }
    }
}

impl PatchPlan {
    /// Both grids must contain 0 so that the accumulated encoder can never
    /// get worse on the task.
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.alpha_grid, "alpha grid")?;
        validate_grid(&self.beta_grid, "beta grid")?;
        if !self.alpha_grid.contains(&0.0) || !self.beta_grid.contains(&0.0) {
            return Err(Error::Config("alpha and beta grids must contain 0".into()));
        }
        for (i, m) in self.order.iter().enumerate() {
            if matches!(m, Modality::Image | Modality::Text) {
                return Err(Error::Config(format!("{m} cannot be patched in")));
            }
            if self.order[..i].contains(m) {
                return Err(Error::Config(format!("{m} appears twice in the patch order")));
            }
        }
        Ok(())
    }
}

/// Training and validation pairs of (image, modality) records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModalityData {
    pub train: PairedData,
    pub val: PairedData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchStep {
    pub modality: Modality,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_trace: Vec<f64>,
    pub beta_trace: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Binding parameters after unlocked tuning for this modality.
    pub unlocked_binding: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult {
    pub steps: Vec<PatchStep>,
    /// Patched binding encoder.
    pub binding: EncoderHandle,
    /// Patched modality encoders, in plan order.
    pub encoders: Vec<EncoderHandle>,
    /// Locked-tuning results, in plan order.
    pub locked: Vec<EncoderHandle>,
}

impl PatchResult {
    /// `modality,w,accuracy` rows of the alpha search, one per grid point
    /// per step.
    pub fn alpha_trace_csv(&self, plan: &PatchPlan) -> String {
        trace_csv(self.steps.iter().map(|s| (s.modality, &s.alpha_trace)), &plan.alpha_grid)
    }

    /// Same layout for the beta search.
    pub fn beta_trace_csv(&self, plan: &PatchPlan) -> String {
        trace_csv(self.steps.iter().map(|s| (s.modality, &s.beta_trace)), &plan.beta_grid)
    }
}

fn trace_csv<'a>(rows: impl Iterator<Item = (Modality, &'a Vec<f64>)>, grid: &[f64]) -> String {
    let mut s = String::from("modality,w,accuracy\n");
    for (m, trace) in rows {
        for (w, a) in grid.iter().zip(trace) {
            writeln!(s, "{m},{w},{a}").unwrap();
        }
    }
    s
}

/// Sequential patching of the binding encoder `f` across the planned
/// modalities. `initial` supplies a freshly initialized encoder per planned
/// modality.
pub fn sequential_patch(
    f: &EncoderHandle,
    initial: &BTreeMap<Modality, EncoderHandle>,
    datasets: &BTreeMap<Modality, ModalityData>,
    plan: &PatchPlan,
    task: &PatchTask,
    cfg: &TrainConfig,
) -> Result<PatchResult> {
    plan.validate()?;
    for m in &plan.order {
        if !datasets.contains_key(m) {
            return Err(Error::Plan(format!("no paired dataset for planned modality {m}")));
        }
        if !initial.contains_key(m) {
            return Err(Error::Plan(format!("no initial encoder for planned modality {m}")));
        }
    }

    let mut theta_z = f.params().clone();
    let mut acc_z = if plan.order.is_empty() {
        0.0
    } else {
        eval_patch_task(f, &theta_z, task)?
    };
    let mut steps = Vec::new();
    let mut encoders = Vec::new();
    let mut locked = Vec::new();

    for &m in &plan.order {
        let data = &datasets[&m];
        let h0 = initial[&m].clone();
        if h0.modality() != m {
            return Err(Error::Plan(format!("initial encoder for {m} is a {} encoder", h0.modality())));
        }
        let teacher = if plan.tune_against_accumulated {
            f.with_params(theta_z.clone())?
        } else {
            f.clone()
        };

        let (h_star, _) = locked_tune(&teacher, h0.clone(), &data.train, &data.val, cfg)?;
        let h_start = if cfg.unlocked_init_from_locked { h_star.clone() } else { h0 };
        let (f_star, h_dagger, _) = unlocked_tune(&teacher, h_start, &data.train, &data.val, cfg)?;

        let (alpha, alpha_trace) = select_coefficient(f, &theta_z, f_star.params(), task, &plan.alpha_grid)?;
        let (beta, beta_trace) = select_coefficient(&h_star, h_star.params(), h_dagger.params(), task, &plan.beta_grid)?;

        theta_z = interpolate(&theta_z, f_star.params(), alpha)?;
        let h_patched = h_star.with_params(interpolate(h_star.params(), h_dagger.params(), beta)?)?;

        let acc_after = eval_patch_task(f, &theta_z, task)?;
        if acc_after < acc_z {
            return Err(Error::Verification(format!(
                "patching {m} lowered task accuracy from {acc_z} to {acc_after}"
            )));
        }
        log::info!("patched {m}: alpha {alpha} beta {beta} task accuracy {acc_z:.4} -> {acc_after:.4}");
        steps.push(PatchStep {
            modality: m,
            alpha,
            beta,
            alpha_trace,
            beta_trace,
            accuracy_before: acc_z,
            accuracy_after: acc_after,
            unlocked_binding: f_star.params().clone(),
        });
        acc_z = acc_after;
        encoders.push(h_patched);
        locked.push(h_star);
    }

    Ok(PatchResult {
        steps,
        binding: f.with_params(theta_z)?,
        encoders,
        locked,
    })
}

/// Elementwise mean, computed as offsets from the first set so identical
/// inputs reproduce it exactly.
pub fn mean_params(sets: &[ParamVector]) -> Result<ParamVector> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Size("need at least one parameter set".into()))?;
    for s in sets {
        first.ensure_same_layout(s)?;
    }
    let n = sets.len() as f64;
    let mut out = first.clone();
    for (i, o) in out.values_mut().iter_mut().enumerate() {
        let d: f64 = sets[1..].iter().map(|s| s.values()[i] - first.values()[i]).sum();
        *o += d / n;
    }
    Ok(out)
}

/// Averages single-modality patched binding parameters, then interpolates
/// from `f` toward the average. Returns `(params, w*, trace)`.
pub fn parallel_patch(
    f: &EncoderHandle,
    patched: &[ParamVector],
    task: &PatchTask,
    grid: &[f64],
) -> Result<(ParamVector, f64, Vec<f64>)> {
    let avg = mean_params(patched)?;
    let (w, trace) = select_coefficient(f, f.params(), &avg, task, grid)?;
    Ok((interpolate(f.params(), &avg, w)?, w, trace))
}

/// Patching `f` with one modality alone: `f*` interpolated from `f`.
pub fn single_modality_patch(f: &EncoderHandle, f_star: &ParamVector, task: &PatchTask, grid: &[f64]) -> Result<ParamVector> {
    let (w, _) = select_coefficient(f, f.params(), f_star, task, grid)?;
    interpolate(f.params(), f_star, w)
}
