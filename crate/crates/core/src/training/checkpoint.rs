//! `BNDK` checkpoint files.
//!
//! ```text
//! "BNDK" | u16 version | u64 config_hash
//! | u32 history_len | f32 history[..]
//! | u32 encoder_count | encoder[..]
//! | u8 has_prototypes | param_block (if present)
//!
//! encoder     = u8 modality | u8 kind | spec | param_block
//! spec (mlp)  = mlp_spec
//! spec (loc)  = u32 rff_count | f64 rff_scale | u8 rescale | f32 freqs[rff_count * 2] | mlp_spec
//! spec (text) = u32 classes | u32 dim
//! mlp_spec    = u32 input | u32 hidden_count | u32 hidden[..] | u32 output | u8 activation | u8 residual
//! param_block = u32 segment_count
//!               | per segment: u16 name_len | name | u32 ndims | u32 dims[..]
//!               | f32 values[sum of segment lengths]
//! ```
//! Little-endian throughout. Parameters are held at `f32` precision in
//! memory as soon as they enter a [`Checkpoint`], so a loaded checkpoint
//! runs forward passes bit-identical to the one that was saved.

use std::path::Path;

use crate::encoders::{Activation, EncoderHandle, EncoderKind, LocationEncoderSpec, MlpSpec, Modality, PrototypeTable};
use crate::error::{Error, Result};
use crate::numcore::{DenseMatrix, ParamVector, Segment};
use crate::synthdata::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BNDK";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_MLP: u8 = 0;
const KIND_LOCATION: u8 = 1;
const KIND_PROTOTYPE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    encoders: Vec<EncoderHandle>,
    prototypes: Option<PrototypeTable>,
    pub config_hash: u64,
    pub history: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        encoders: Vec<EncoderHandle>,
        prototypes: Option<PrototypeTable>,
        config_hash: u64,
        history: Vec<f64>,
    ) -> Result<Self> {
        let mut seen = Vec::new();
        let mut rounded = Vec::with_capacity(encoders.len());
        for e in encoders {
            if seen.contains(&e.modality()) {
                return Err(Error::Config(format!("checkpoint holds two {} encoders", e.modality())));
            }
            seen.push(e.modality());
            let p = e.params().to_f32_precision();
            rounded.push(e.with_params(p)?);
        }
        let prototypes = match prototypes {
            Some(t) => Some(PrototypeTable::from_params(t.params().to_f32_precision())?),
            None => None,
        };
        Ok(Self {
            encoders: rounded,
            prototypes,
            config_hash,
            history: history.into_iter().map(|v| v as f32 as f64).collect(),
        })
    }

    pub fn encoders(&self) -> &[EncoderHandle] {
        &self.encoders
    }

    pub fn encoder(&self, modality: Modality) -> Option<&EncoderHandle> {
        self.encoders.iter().find(|e| e.modality() == modality)
    }

    pub fn require(&self, modality: Modality) -> Result<&EncoderHandle> {
        self.encoder(modality)
            .ok_or_else(|| Error::Data(format!("checkpoint has no {modality} encoder")))
    }

    pub fn prototypes(&self) -> Option<&PrototypeTable> {
        self.prototypes.as_ref()
    }

    pub fn require_prototypes(&self) -> Result<&PrototypeTable> {
        self.prototypes
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint has no prototype table".into()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.0.extend_from_slice(&self.config_hash.to_le_bytes());
        w.u32(self.history.len() as u32);
        for v in &self.history {
            w.f32(*v as f32);
        }
        w.u32(self.encoders.len() as u32);
        for e in &self.encoders {
            w.u8(e.modality().tag());
            match e.kind() {
                EncoderKind::Mlp(spec) => {
                    w.u8(KIND_MLP);
                    w.mlp_spec(spec);
                }
                EncoderKind::Location { spec, freqs } => {
                    w.u8(KIND_LOCATION);
                    w.u32(spec.rff_count as u32);
                    w.0.extend_from_slice(&spec.rff_scale.to_le_bytes());
                    w.u8(spec.rescale as u8);
                    for v in freqs.data() {
                        w.f32(*v as f32);
                    }
                    w.mlp_spec(&spec.mlp);
                }
                EncoderKind::Prototype { classes, dim } => {
                    w.u8(KIND_PROTOTYPE);
                    w.u32(*classes as u32);
                    w.u32(*dim as u32);
                }
            }
            w.params(e.params());
        }
        match &self.prototypes {
            Some(t) => {
                w.u8(1);
                w.params(t.params());
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected BNDK"));
        }
        let at = r.offset();
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let config_hash = r.u64()?;
        let n = r.u32()? as usize;
        let history = r.f32s(n)?.into_iter().map(f64::from).collect();
        let count = r.u32()? as usize;
        let mut encoders = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let tag = r.u8()?;
            let modality = Modality::from_tag(tag).ok_or_else(|| Error::format(at, format!("bad modality tag {tag}")))?;
            let at = r.offset();
            let kind = match r.u8()? {
                KIND_MLP => EncoderKind::Mlp(read_mlp_spec(&mut r)?),
                KIND_LOCATION => {
                    let rff_count = r.u32()? as usize;
                    let rff_scale = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    let rescale = read_bool(&mut r)?;
                    let at = r.offset();
                    let f = r.f32s(rff_count.saturating_mul(2))?;
                    let freqs = DenseMatrix::new(rff_count, 2, f.into_iter().map(f64::from).collect())
                        .map_err(|e| Error::format(at, e.to_string()))?;
                    let mlp = read_mlp_spec(&mut r)?;
                    EncoderKind::Location {
                        spec: LocationEncoderSpec {
                            rff_count,
                            rff_scale,
                            rescale,
                            mlp,
                        },
                        freqs,
                    }
                }
                KIND_PROTOTYPE => EncoderKind::Prototype {
                    classes: r.u32()? as usize,
                    dim: r.u32()? as usize,
                },
                k => return Err(Error::format(at, format!("bad encoder kind {k}"))),
            };
            let at = r.offset();
            let params = read_params(&mut r)?;
            let handle = EncoderHandle::from_parts(modality, kind, params).map_err(|e| Error::format(at, e.to_string()))?;
            encoders.push(handle);
        }
        let prototypes = if read_bool(&mut r)? {
            let at = r.offset();
            let p = read_params(&mut r)?;
            Some(PrototypeTable::from_params(p).map_err(|e| Error::format(at, e.to_string()))?)
        } else {
            None
        };
        if !r.is_done() {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        Ok(Self {
            encoders,
            prototypes,
            config_hash,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn mlp_spec(&mut self, s: &MlpSpec) {
        self.u32(s.input_dim as u32);
        self.u32(s.hidden_dims.len() as u32);
        for h in &s.hidden_dims {
            self.u32(*h as u32);
        }
        self.u32(s.output_dim as u32);
        self.u8(s.activation.tag());
        self.u8(s.residual as u8);
    }

    fn params(&mut self, p: &ParamVector) {
        self.u32(p.layout().len() as u32);
        for s in p.layout() {
            self.u16(s.name.len() as u16);
            self.0.extend_from_slice(s.name.as_bytes());
            self.u32(s.shape.len() as u32);
            for d in &s.shape {
                self.u32(*d as u32);
            }
        }
        for v in p.values() {
            self.f32(*v as f32);
        }
    }
}

fn read_bool(r: &mut ByteReader) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(Error::format(at, format!("bad flag byte {b}"))),
    }
}

fn read_mlp_spec(r: &mut ByteReader) -> Result<MlpSpec> {
    let input_dim = r.u32()? as usize;
    let at = r.offset();
    let n = r.u32()? as usize;
    if n > 1 << 16 {
        return Err(Error::format(at, format!("implausible hidden layer count {n}")));
    }
    let hidden_dims = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let output_dim = r.u32()? as usize;
    let at = r.offset();
    let tag = r.u8()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::format(at, format!("bad activation tag {tag}")))?;
    let residual = read_bool(r)?;
    Ok(MlpSpec {
        input_dim,
        hidden_dims,
        output_dim,
        activation,
        residual,
    })
}

fn read_params(r: &mut ByteReader) -> Result<ParamVector> {
    let start = r.offset();
    let count = r.u32()? as usize;
    let mut layout = Vec::new();
    let mut offset = 0usize;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at, "segment name is not UTF-8"))?
            .to_string();
        let ndims = r.u32()? as usize;
        if ndims > 8 {
            return Err(Error::format(at, format!("segment '{name}' has {ndims} dims")));
        }
        let shape: Vec<usize> = (0..ndims).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let seg_len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(at, "segment size overflow"))?;
        layout.push(Segment {
            name,
            offset,
            len: seg_len,
            shape,
        });
        offset = offset
            .checked_add(seg_len)
            .ok_or_else(|| Error::format(at, "segment size overflow"))?;
    }
    let values = r.f32s(offset)?.into_iter().map(f64::from).collect();
    ParamVector::from_parts(values, layout).map_err(|e| Error::format(start, e.to_string()))
}
