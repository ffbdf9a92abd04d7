//! Modality encoders into the shared unit-norm embedding space.

pub mod geo;
pub mod mlp;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{flatten_params, l2_normalize, norm, DenseMatrix, NamedTensor, ParamVector, SeededRng, NORM_EPS};

pub use geo::{eep_project, eep_project_unit, rff_transform};
pub use mlp::{init_params, Activation, Mlp, MlpSpec, MlpTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Image,
    Location,
    Satellite,
    Env,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Image,
        Modality::Location,
        Modality::Satellite,
        Modality::Env,
        Modality::Audio,
        Modality::Text,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Location => 1,
            Modality::Satellite => 2,
            Modality::Env => 3,
            Modality::Audio => 4,
            Modality::Text => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Location => "location",
            Modality::Satellite => "satellite",
            Modality::Env => "env",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "image" | "img" => Ok(Modality::Image),
            "location" | "loc" => Ok(Modality::Location),
            "satellite" | "sat" => Ok(Modality::Satellite),
            "env" | "environment" => Ok(Modality::Env),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// One observation of a single modality, as fed to an encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Features(Vec<f64>),
    Location { lat: f64, lon: f64 },
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationEncoderSpec {
    pub rff_count: usize,
    pub rff_scale: f64,
    /// Rescale projected coordinates to [-1, 1] per axis before the
    /// Fourier features.
    pub rescale: bool,
    pub mlp: MlpSpec,
}

impl LocationEncoderSpec {
    pub fn new(rff_count: usize, rff_scale: f64, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            rff_count,
            rff_scale,
            rescale: true,
            mlp: MlpSpec::new(2 * rff_count, hidden, output_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rff_count == 0 {
            return Err(Error::Config("rff_count must be >= 1".into()));
        }
        if !(self.rff_scale > 0.0) {
            return Err(Error::Config("rff_scale must be > 0".into()));
        }
        if self.mlp.input_dim != 2 * self.rff_count {
            return Err(Error::Config(format!(
                "location MLP input {} must equal 2 x rff_count = {}",
                self.mlp.input_dim,
                2 * self.rff_count
            )));
        }
        self.mlp.validate()
    }
}

/// Per-species text embeddings standing in for a text tower.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    classes: usize,
    dim: usize,
    params: ParamVector,
}

pub const PROTOTYPE_SEGMENT: &str = "prototypes";

impl PrototypeTable {
    pub fn random(classes: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| scale * rng.normal()).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 {
            return Err(Error::Size("prototype table needs at least one class".into()));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("prototype rows must share a non-zero dimension".into()));
        }
        let params = flatten_params(&[NamedTensor {
            name: PROTOTYPE_SEGMENT.into(),
            shape: vec![classes, dim],
            values: rows.concat(),
        }])?;
        Ok(Self { classes, dim, params })
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        match params.layout() {
            [seg] if seg.name == PROTOTYPE_SEGMENT && seg.shape.len() == 2 => Ok(Self {
                classes: seg.shape[0],
                dim: seg.shape[1],
                params,
            }),
            _ => Err(Error::Layout("not a prototype table layout".into())),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.params.values()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn embedding(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.classes {
            return Err(Error::Domain(format!(
                "class {k} outside prototype table of {} classes",
                self.classes
            )));
        }
        l2_normalize(self.row(k))
    }

    /// All rows, unit-normalized.
    pub fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.classes).map(|k| self.embedding(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderKind {
    Mlp(MlpSpec),
    Location {
        spec: LocationEncoderSpec,
        freqs: DenseMatrix,
    },
    Prototype { classes: usize, dim: usize },
}

/// A modality tag, an architecture and its current parameters.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    modality: Modality,
    kind: EncoderKind,
    params: ParamVector,
    net: Option<Mlp>,
}

impl PartialEq for EncoderHandle {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality && self.kind == other.kind && self.params == other.params
    }
}

/// Cached forward state of one record, consumed by [`EncoderHandle::backward`].
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    embedding: Vec<f64>,
    pre_norm: f64,
    inner: TraceInner,
}

#[derive(Debug, Clone)]
enum TraceInner {
    Mlp(MlpTrace),
    Row(usize),
}

impl EncodeTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

impl EncoderHandle {
    /// Feature-vector encoder (image, satellite, env, audio).
    pub fn mlp(modality: Modality, spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        let params = init_params(&spec, rng)?;
        Self::from_parts(modality, EncoderKind::Mlp(spec), params)
    }

    pub fn location(spec: LocationEncoderSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let freqs = geo::sample_frequencies(spec.rff_count, spec.rff_scale, &mut rng.fork_named("rff"));
        let params = init_params(&spec.mlp, rng)?;
        Self::from_parts(Modality::Location, EncoderKind::Location { spec, freqs }, params)
    }

    pub fn text(table: &PrototypeTable) -> Self {
        Self {
            modality: Modality::Text,
            kind: EncoderKind::Prototype {
                classes: table.classes,
                dim: table.dim,
            },
            params: table.params.clone(),
            net: None,
        }
    }

    pub fn from_parts(modality: Modality, kind: EncoderKind, params: ParamVector) -> Result<Self> {
        let net = match &kind {
            EncoderKind::Mlp(spec) => Some(Mlp::new(spec)?),
            EncoderKind::Location { spec, freqs } => {
                spec.validate()?;
                if freqs.rows() != spec.rff_count || freqs.cols() != 2 {
                    return Err(Error::Shape("frequency matrix must be rff_count x 2".into()));
                }
                Some(Mlp::new(&spec.mlp)?)
            }
            EncoderKind::Prototype { .. } => None,
        };
        let expected = match &kind {
            EncoderKind::Mlp(spec) => init_params(spec, &mut SeededRng::new(0))?.layout().to_vec(),
            EncoderKind::Location { spec, .. } => init_params(&spec.mlp, &mut SeededRng::new(0))?.layout().to_vec(),
            EncoderKind::Prototype { classes, dim } => {
                PrototypeTable::from_rows(&vec![vec![0.0; *dim]; *classes])?.params.layout().to_vec()
            }
        };
        if params.layout() != expected.as_slice() {
            return Err(Error::Layout(format!(
                "parameters do not match the {} encoder architecture",
                modality
            )));
        }
        if matches!(kind, EncoderKind::Prototype { .. }) != (modality == Modality::Text) {
            return Err(Error::TypeMismatch(format!(
                "{modality} cannot use this encoder kind"
            )));
        }
        if matches!(kind, EncoderKind::Location { .. }) != (modality == Modality::Location) {
            return Err(Error::TypeMismatch(format!(
                "{modality} cannot use this encoder kind"
            )));
        }
        Ok(Self {
            modality,
            kind,
            params,
            net,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            EncoderKind::Mlp(s) => s.output_dim,
            EncoderKind::Location { spec, .. } => spec.mlp.output_dim,
            EncoderKind::Prototype { dim, .. } => *dim,
        }
    }

    /// Same architecture with other parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        self.params.ensure_same_layout(&params)?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn prototype_table(&self) -> Option<PrototypeTable> {
        match self.kind {
            EncoderKind::Prototype { .. } => PrototypeTable::from_params(self.params.clone()).ok(),
            _ => None,
        }
    }

    fn network_input(&self, record: &Record) -> Result<Vec<f64>> {
        match (&self.kind, record) {
            (EncoderKind::Mlp(spec), Record::Features(x)) => {
                if x.len() != spec.input_dim {
                    return Err(Error::Shape(format!(
                        "{} encoder expects {} features, got {}",
                        self.modality,
                        spec.input_dim,
                        x.len()
                    )));
                }
                Ok(x.clone())
            }
            (EncoderKind::Location { spec, freqs }, Record::Location { lat, lon }) => {
                let xy = if spec.rescale {
                    eep_project_unit(*lat, *lon)?
                } else {
                    eep_project(*lat, *lon)?
                };
                Ok(rff_transform(xy, freqs))
            }
            _ => Err(Error::TypeMismatch(format!(
                "{} encoder cannot take {:?}",
                self.modality,
                record_kind(record)
            ))),
        }
    }

    fn class_index(&self, record: &Record) -> Result<usize> {
        match (&self.kind, record) {
            (EncoderKind::Prototype { classes, .. }, Record::Class(k)) => {
                if k >= classes {
                    Err(Error::Domain(format!("class {k} outside {classes} prototypes")))
                } else {
                    Ok(*k)
                }
            }
            _ => Err(Error::TypeMismatch(format!(
                "{} encoder cannot take {:?}",
                self.modality,
                record_kind(record)
            ))),
        }
    }

    /// Raw (pre-normalization) output.
    pub fn raw_output(&self, record: &Record) -> Result<Vec<f64>> {
        match &self.net {
            Some(net) => net.forward(self.params.values(), &self.network_input(record)?),
            None => {
                let k = self.class_index(record)?;
                let d = self.output_dim();
                Ok(self.params.values()[k * d..(k + 1) * d].to_vec())
            }
        }
    }

    /// Unit-norm embedding of one record.
    pub fn encode(&self, record: &Record) -> Result<Vec<f64>> {
        l2_normalize(&self.raw_output(record)?)
    }

    pub fn encode_all(&self, records: &[Record]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        records.par_iter().map(|r| self.encode(r)).collect()
    }

    pub fn forward_trace(&self, record: &Record) -> Result<EncodeTrace> {
        let (raw, inner) = match &self.net {
            Some(net) => {
                let (out, t) = net.forward_trace(self.params.values(), &self.network_input(record)?)?;
                (out, TraceInner::Mlp(t))
            }
            None => {
                let k = self.class_index(record)?;
                let d = self.output_dim();
                (self.params.values()[k * d..(k + 1) * d].to_vec(), TraceInner::Row(k))
            }
        };
        let n = norm(&raw);
        if !(n > NORM_EPS) {
            return Err(Error::Degenerate { norm: n, eps: NORM_EPS });
        }
        Ok(EncodeTrace {
            embedding: raw.iter().map(|v| v / n).collect(),
            pre_norm: n,
            inner,
        })
    }

    /// Adds dL/dparams into `grad` given dL/dembedding for a traced record.
    pub fn backward(&self, trace: &EncodeTrace, grad_embedding: &[f64], grad: &mut [f64]) {
        let e = &trace.embedding;
        let proj: f64 = e.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
        let g_raw: Vec<f64> = grad_embedding
            .iter()
            .zip(e)
            .map(|(g, ev)| (g - ev * proj) / trace.pre_norm)
            .collect();
        match (&trace.inner, &self.net) {
            (TraceInner::Mlp(t), Some(net)) => {
                net.backward(self.params.values(), t, &g_raw, grad, false);
            }
            (TraceInner::Row(k), None) => {
                let d = g_raw.len();
                for (acc, g) in grad[k * d..(k + 1) * d].iter_mut().zip(&g_raw) {
                    *acc += g;
                }
            }
            _ => unreachable!("trace produced by a different encoder"),
        }
    }
}

fn record_kind(r: &Record) -> &'static str {
    match r {
        Record::Features(_) => "feature vector",
        Record::Location { .. } => "location",
        Record::Class(_) => "class id",
    }
}
