//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OODKIT"  u32 version  u8 kind
//! u32 n_layers  (n_layers + 1) × u32 widths  n_layers × u8 activation tags
//! kind descriptor
//! f32 parameters: per layer weight (row-major, in × out) then bias,
//!                 then for classifiers the head weight (row-major) and bias
//! ```
//!
//! Classifier descriptor: `u8 loss tag, f64 margin, f64 scale, u8 learnable,
//! u32 classes`. Denoiser descriptor: `u32 data_dim, u32 classes,
//! u32 time_freqs, u32 steps, steps × f64 betas, data_dim × f64 mean,
//! f64 scale`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::classifier::Classifier;
use crate::diffusion::{DenoiserModel, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::losses::{LossKind, MetricHead};
use crate::nn::{Activation, Dense, MlpModel, RealMatrix};

pub const MAGIC: &[u8; 6] = b"OODKIT";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CLASSIFIER: u8 = 1;
const KIND_DENOISER: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Classifier(Classifier),
    Denoiser(DenoiserModel),
}

impl Checkpoint {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Checkpoint::Classifier(_) => "classifier",
            Checkpoint::Denoiser(_) => "denoiser",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        match self {
            Checkpoint::Classifier(c) => {
                w.u8(KIND_CLASSIFIER);
                w.architecture(&c.encoder);
                let h = &c.head;
                w.u8(h.kind.tag());
                w.f64(h.margin);
                w.f64(h.scale);
                w.u8(u8::from(h.scale_learnable));
                w.u32(h.classes() as u32);
                w.mlp_params(&c.encoder);
                w.matrix(&h.weight);
                w.f32s(h.bias.iter());
            }
            Checkpoint::Denoiser(d) => {
                w.u8(KIND_DENOISER);
                w.architecture(&d.net);
                w.u32(d.data_dim as u32);
                w.u32(d.classes as u32);
                w.u32(d.time_freqs as u32);
                w.u32(d.schedule.steps() as u32);
                for &b in d.schedule.betas() {
                    w.f64(b);
                }
                for &m in &d.data_mean {
                    w.f64(m);
                }
                w.f64(d.data_scale);
                w.mlp_params(&d.net);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("missing OODKIT magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = r.u8()?;
        let (widths, activations) = r.architecture()?;
        let out = match kind {
            KIND_CLASSIFIER => {
                let tag = r.u8()?;
                let loss = LossKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown loss tag {tag}")))?;
                let margin = r.f64()?;
                let scale = r.f64()?;
                let learnable = r.u8()? != 0;
                let classes = r.u32()? as usize;
                let encoder = r.mlp(&widths, &activations)?;
                let d = encoder.feature_dim();
                let weight = r.matrix(d, classes)?;
                let bias = DVector::from_vec(r.f32s(classes)?);
                let head = MetricHead {
                    weight,
                    bias,
                    kind: loss,
                    margin,
                    scale,
                    scale_learnable: learnable,
                };
                head.validate()?;
                Checkpoint::Classifier(Classifier::from_parts(encoder, head)?)
            }
            KIND_DENOISER => {
                let data_dim = r.u32()? as usize;
                let classes = r.u32()? as usize;
                let time_freqs = r.u32()? as usize;
                let steps = r.u32()? as usize;
                let betas = (0..steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let data_mean = (0..data_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let data_scale = r.f64()?;
                let net = r.mlp(&widths, &activations)?;
                let model = DenoiserModel {
                    net,
                    schedule: DiffusionSchedule::from_betas(betas)?,
                    data_dim,
                    classes,
                    time_freqs,
                    data_mean,
                    data_scale,
                };
                model.validate()?;
                Checkpoint::Denoiser(model)
            }
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn into_classifier(self) -> Result<Classifier> {
        match self {
            Checkpoint::Classifier(c) => Ok(c),
            other => Err(Error::Checkpoint(format!("expected a classifier, found a {}", other.kind_name()))),
        }
    }

    pub fn into_denoiser(self) -> Result<DenoiserModel> {
        match self {
            Checkpoint::Denoiser(d) => Ok(d),
            other => Err(Error::Checkpoint(format!("expected a denoiser, found a {}", other.kind_name()))),
        }
    }

    /// The same model after a save/load cycle, i.e. with parameters rounded to
    /// `f32`. Evaluating this keeps in-process results equal to results
    /// computed from the file.
    pub fn rounded(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes())
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s<'a>(&mut self, values: impl Iterator<Item = &'a f64>) {
        for &v in values {
            self.bytes(&(v as f32).to_le_bytes());
        }
    }
    fn matrix(&mut self, m: &RealMatrix) {
        for i in 0..m.nrows() {
            self.f32s(m.row(i).iter());
        }
    }
    fn architecture(&mut self, net: &MlpModel) {
        self.u32(net.layers().len() as u32);
        for w in net.widths() {
            self.u32(w as u32);
        }
        for l in net.layers() {
            self.u8(l.activation.tag());
        }
    }
    fn mlp_params(&mut self, net: &MlpModel) {
        for l in net.layers() {
            self.matrix(&l.weight);
            self.f32s(l.bias.iter());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<RealMatrix> {
        let v = self.f32s(rows * cols)?;
        Ok(RealMatrix::from_row_slice(rows, cols, &v))
    }
    fn architecture(&mut self) -> Result<(Vec<usize>, Vec<Activation>)> {
        let n = self.u32()? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let widths = (0..=n).map(|_| self.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let acts = (0..n)
            .map(|_| {
                let t = self.u8()?;
                Activation::from_tag(t).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((widths, acts))
    }
    fn mlp(&mut self, widths: &[usize], activations: &[Activation]) -> Result<MlpModel> {
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                Ok(Dense {
                    weight: self.matrix(w[0], w[1])?,
                    bias: DVector::from_vec(self.f32s(w[1])?),
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpModel::from_layers(layers)
    }
}
