//! Binary model files, little-endian throughout.
//!
//! `LARN` holds a training-time model:
//!
//! ```text
//! "LARN" u32:version descriptor u8:stage
//! per layer: u8:weights { blob | blob blob | blob }
//!            u8:has_bias [blob]
//!            u8:has_bn [gamma beta mean var f32:momentum f32:eps u64:tracked]
//! ```
//!
//! `LARP` holds an exported discrete model:
//!
//! ```text
//! "LARP" u32:version descriptor
//! per layer: u8:weights { blob | u32:rows u32:cols u64[rows·wpr]:plus u64[rows·wpr]:minus }
//!            u8:output { u32:n (f32 bias mean scale beta)ⁿ | table | table table }
//! ```
//!
//! A `blob` is `u32:len` followed by `len` f32 values, a `table` is `u32:n`
//! followed by `n` pairs of f64 threshold and u8 flip. The descriptor is
//!
//! ```text
//! u32:rank u32[rank]:input_shape u32:classes f64:sign_noise u32:layers
//! per layer: u8:kind (0 linear: u32 in, out | 1 conv: u32 in, out, kernel, stride, padding)
//!            u8:weights (0 real, 1 ternary, 2 binary) u8:flags (1 bn, 2 bias, 4 residual, 8 sign)
//! ```

use std::io::Write;
use std::path::Path;

use crate::distributions::WeightDistribution;
use crate::error::{Error, Result};
use crate::inference::{
    ChannelAffine, FoldedThreshold, PackedLayer, PackedModel, PackedOutput, PackedTernaryMatrix, PackedWeights,
};
use crate::layers::{BatchNormState, LayerKind};
use crate::model::{Activation, Architecture, LarModel, LayerParams, LayerSpec, LayerWeights, Stage, WeightKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"LARN";
pub const PACKED_MAGIC: &[u8; 4] = b"LARP";
pub const MODEL_VERSION: u32 = 1;
pub const PACKED_VERSION: u32 = 1;

const FLAG_BN: u8 = 1;
const FLAG_BIAS: u8 = 2;
const FLAG_RESIDUAL: u8 = 4;
const FLAG_SIGN: u8 = 8;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid("model_io", format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn blob<T: Scalar>(&mut self, values: &[T]) -> Result<()> {
        self.u32(values.len())?;
        values.iter().for_each(|v| self.f32(v.as_f64() as f32));
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn error(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.display().to_string(), offset: at as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.error(
                self.pos,
                format!("truncated file: {field} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(field)?) as usize)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(field)?))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }

    fn flag(&mut self, field: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.error(at, format!("{field}: expected 0 or 1, found {v}"))),
        }
    }

    fn u64s(&mut self, n: usize, field: &str) -> Result<Vec<u64>> {
        let bytes = self.take(n.saturating_mul(8), field)?;
        Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    /// A length-prefixed f32 blob that must hold exactly `expected` values.
    fn blob<T: Scalar>(&mut self, expected: usize, field: &str) -> Result<Vec<T>> {
        let at = self.pos;
        let n = self.u32(field)?;
        if n != expected {
            return Err(self.error(at, format!("{field}: declared length {n}, expected {expected}")));
        }
        let bytes = self.take(n * 4, field)?;
        Ok(bytes.chunks_exact(4).map(|c| T::c(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect())
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if &found != magic {
            return Err(self.error(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let v = u32::from_le_bytes(self.array("version")?);
        if v != version {
            return Err(Error::UnsupportedVersion { found: v, expected: version });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_descriptor(w: &mut Writer, arch: &Architecture) -> Result<()> {
    w.u32(arch.input_shape.len())?;
    for &d in &arch.input_shape {
        w.u32(d)?;
    }
    w.u32(arch.num_classes)?;
    w.f64(arch.sign_noise);
    w.u32(arch.layers.len())?;
    for spec in &arch.layers {
        match spec.kind {
            LayerKind::Linear { in_features, out_features } => {
                w.u8(0);
                w.u32(in_features)?;
                w.u32(out_features)?;
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                w.u8(1);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    w.u32(v)?;
                }
            }
        }
        w.u8(match spec.weights {
            WeightKind::FullPrecision => 0,
            WeightKind::Ternary => 1,
            WeightKind::Binary => 2,
        });
        let mut flags = 0;
        for (on, bit) in [
            (spec.batch_norm, FLAG_BN),
            (spec.bias, FLAG_BIAS),
            (spec.residual, FLAG_RESIDUAL),
            (spec.activation == Activation::Sign, FLAG_SIGN),
        ] {
            if on {
                flags |= bit;
            }
        }
        w.u8(flags);
    }
    Ok(())
}

fn read_descriptor(r: &mut Reader<'_>) -> Result<Architecture> {
    let rank = r.u32("descriptor.rank")?;
    if rank == 0 || rank > 3 {
        return Err(r.error(r.pos - 4, format!("descriptor.rank: {rank} is not 1..=3")));
    }
    let input_shape = (0..rank).map(|_| r.u32("descriptor.input_shape")).collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32("descriptor.num_classes")?;
    let sign_noise = r.f64("descriptor.sign_noise")?;
    let count = r.u32("descriptor.layers")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let at = r.pos;
        let field = |name: &str| format!("layer {i} {name}");
        let kind = match r.u8(&field("kind"))? {
            0 => LayerKind::Linear {
                in_features: r.u32(&field("in_features"))?,
                out_features: r.u32(&field("out_features"))?,
            },
            1 => LayerKind::Conv2d {
                in_channels: r.u32(&field("in_channels"))?,
                out_channels: r.u32(&field("out_channels"))?,
                kernel: r.u32(&field("kernel"))?,
                stride: r.u32(&field("stride"))?,
                padding: r.u32(&field("padding"))?,
            },
            v => return Err(r.error(at, format!("layer {i} kind: unknown tag {v}"))),
        };
        let at = r.pos;
        let weights = match r.u8(&field("weights"))? {
            0 => WeightKind::FullPrecision,
            1 => WeightKind::Ternary,
            2 => WeightKind::Binary,
            v => return Err(r.error(at, format!("layer {i} weights: unknown tag {v}"))),
        };
        let at = r.pos;
        let flags = r.u8(&field("flags"))?;
        if flags & !(FLAG_BN | FLAG_BIAS | FLAG_RESIDUAL | FLAG_SIGN) != 0 {
            return Err(r.error(at, format!("layer {i} flags: unknown bits {flags:#04x}")));
        }
        layers.push(LayerSpec {
            kind,
            weights,
            batch_norm: flags & FLAG_BN != 0,
            bias: flags & FLAG_BIAS != 0,
            residual: flags & FLAG_RESIDUAL != 0,
            activation: if flags & FLAG_SIGN != 0 { Activation::Sign } else { Activation::Identity },
        });
    }
    let arch = Architecture { input_shape, num_classes, layers, sign_noise };
    arch.validate()?;
    Ok(arch)
}

fn stage_tag(stage: Stage) -> u8 {
    match stage {
        Stage::Pretrained => 0,
        Stage::Lr => 1,
        Stage::Lar => 2,
    }
}

/// Serializes a training-time model; values are stored as f32.
pub fn encode_model<T: Scalar>(model: &LarModel<T>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize)?;
    write_descriptor(&mut w, &model.arch)?;
    w.u8(stage_tag(model.stage));
    for layer in &model.layers {
        match &layer.weights {
            LayerWeights::Real(t) => {
                w.u8(0);
                w.blob(t.data())?;
            }
            LayerWeights::Distribution(d) => match d.zero_logits() {
                Some(z) => {
                    w.u8(1);
                    w.blob(z.data())?;
                    w.blob(d.sign_logits().data())?;
                }
                None => {
                    w.u8(2);
                    w.blob(d.sign_logits().data())?;
                }
            },
        }
        w.u8(u8::from(layer.bias.is_some()));
        if let Some(b) = &layer.bias {
            w.blob(b.data())?;
        }
        w.u8(u8::from(layer.bn.is_some()));
        if let Some(bn) = &layer.bn {
            w.blob(bn.gamma.data())?;
            w.blob(bn.beta.data())?;
            w.blob(&bn.running_mean)?;
            w.blob(&bn.running_var)?;
            w.f32(bn.momentum.as_f64() as f32);
            w.f32(bn.eps.as_f64() as f32);
            w.u64(bn.tracked);
        }
    }
    Ok(w.buf)
}

pub fn decode_model<T: Scalar>(bytes: &[u8], path: &Path) -> Result<LarModel<T>> {
    let mut r = Reader::new(bytes, path);
    r.header(MODEL_MAGIC, MODEL_VERSION)?;
    let arch = read_descriptor(&mut r)?;
    let at = r.pos;
    let stage = match r.u8("stage")? {
        0 => Stage::Pretrained,
        1 => Stage::Lr,
        2 => Stage::Lar,
        v => return Err(r.error(at, format!("stage: unknown tag {v}"))),
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let shape = spec.kind.weight_shape();
        let n: usize = shape.iter().product();
        let channels = spec.kind.out_channels();
        let field = |name: &str| format!("layer {i} {name}");
        let at = r.pos;
        let tag = r.u8(&field("weights tag"))?;
        let weights = match tag {
            0 => LayerWeights::Real(Tensor::new(shape, r.blob(n, &field("weights"))?)?),
            1 => {
                let z = Tensor::new(shape.clone(), r.blob(n, &field("zero logits"))?)?;
                let s = Tensor::new(shape, r.blob(n, &field("sign logits"))?)?;
                LayerWeights::Distribution(WeightDistribution::ternary(z, s)?)
            }
            2 => LayerWeights::Distribution(WeightDistribution::binary(Tensor::new(
                shape,
                r.blob(n, &field("sign logits"))?,
            )?)),
            v => return Err(r.error(at, format!("layer {i} weights tag: unknown value {v}"))),
        };
        let expected_tag = match (spec.weights, stage) {
            (WeightKind::FullPrecision, _) | (_, Stage::Pretrained) => 0,
            (WeightKind::Ternary, _) => 1,
            (WeightKind::Binary, _) => 2,
        };
        if tag != expected_tag {
            return Err(r.error(
                at,
                format!("layer {i} weights tag: {tag} does not match the descriptor (expected {expected_tag})"),
            ));
        }
        let at = r.pos;
        let bias = if r.flag(&field("has_bias"))? {
            Some(Tensor::new(vec![channels], r.blob(channels, &field("bias"))?)?)
        } else {
            None
        };
        if bias.is_some() != spec.bias {
            return Err(r.error(at, format!("layer {i} has_bias disagrees with the descriptor")));
        }
        let at = r.pos;
        let bn = if r.flag(&field("has_bn"))? {
            Some(BatchNormState {
                gamma: Tensor::new(vec![channels], r.blob(channels, &field("bn gamma"))?)?,
                beta: Tensor::new(vec![channels], r.blob(channels, &field("bn beta"))?)?,
                running_mean: r.blob(channels, &field("bn running_mean"))?,
                running_var: r.blob(channels, &field("bn running_var"))?,
                momentum: T::c(f64::from(r.f32(&field("bn momentum"))?)),
                eps: T::c(f64::from(r.f32(&field("bn eps"))?)),
                tracked: r.u64(&field("bn tracked"))?,
            })
        } else {
            None
        };
        if bn.is_some() != spec.batch_norm {
            return Err(r.error(at, format!("layer {i} has_bn disagrees with the descriptor")));
        }
        layers.push(LayerParams { weights, bias, bn });
    }
    r.finish()?;
    Ok(LarModel { arch, stage, layers })
}

pub fn encode_packed(model: &PackedModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(PACKED_MAGIC);
    w.u32(PACKED_VERSION as usize)?;
    write_descriptor(&mut w, &model.arch)?;
    let table = |w: &mut Writer, t: &[FoldedThreshold]| -> Result<()> {
        w.u32(t.len())?;
        for th in t {
            w.f64(th.threshold);
            w.u8(u8::from(th.flip));
        }
        Ok(())
    };
    for layer in &model.layers {
        match &layer.weights {
            PackedWeights::Real(v) => {
                w.u8(0);
                w.blob(v)?;
            }
            PackedWeights::Ternary(m) => {
                w.u8(1);
                w.u32(m.rows())?;
                w.u32(m.cols())?;
                m.plus().iter().for_each(|&x| w.u64(x));
                m.minus().iter().for_each(|&x| w.u64(x));
            }
        }
        match &layer.output {
            PackedOutput::Scores(affine) => {
                w.u8(0);
                w.u32(affine.len())?;
                for a in affine {
                    for v in [a.bias, a.mean, a.scale, a.beta] {
                        w.f32(v);
                    }
                }
            }
            PackedOutput::Sign(t) => {
                w.u8(1);
                table(&mut w, t)?;
            }
            PackedOutput::ResidualSign(neg, pos) => {
                w.u8(2);
                table(&mut w, neg)?;
                table(&mut w, pos)?;
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_packed(bytes: &[u8], path: &Path) -> Result<PackedModel> {
    let mut r = Reader::new(bytes, path);
    r.header(PACKED_MAGIC, PACKED_VERSION)?;
    let arch = read_descriptor(&mut r)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let n = spec.kind.weight_shape().iter().product();
        let channels = spec.kind.out_channels();
        let field = |name: &str| format!("layer {i} {name}");
        let at = r.pos;
        let weights = match r.u8(&field("weights tag"))? {
            0 if spec.weights == WeightKind::FullPrecision => PackedWeights::Real(r.blob(n, &field("weights"))?),
            1 if spec.weights != WeightKind::FullPrecision => {
                let at = r.pos;
                let (rows, cols) = (r.u32(&field("rows"))?, r.u32(&field("cols"))?);
                if (rows, cols) != (channels, spec.kind.fan_in()) {
                    return Err(r.error(
                        at,
                        format!("layer {i} planes: declared {rows}×{cols}, expected {channels}×{}", spec.kind.fan_in()),
                    ));
                }
                let words = rows * cols.div_ceil(64);
                let plus = r.u64s(words, &field("plus plane"))?;
                let minus = r.u64s(words, &field("minus plane"))?;
                PackedWeights::Ternary(
                    PackedTernaryMatrix::from_planes(rows, cols, plus, minus)
                        .map_err(|e| r.error(at, format!("layer {i}: {e}")))?,
                )
            }
            v => return Err(r.error(at, format!("layer {i} weights tag: {v} does not match the descriptor"))),
        };
        let table = |r: &mut Reader<'_>, name: &str| -> Result<Vec<FoldedThreshold>> {
            let at = r.pos;
            let len = r.u32(&field(name))?;
            if len != channels {
                return Err(r.error(at, format!("layer {i} {name}: declared length {len}, expected {channels}")));
            }
            (0..len)
                .map(|_| Ok(FoldedThreshold { threshold: r.f64(&field(name))?, flip: r.flag(&field(name))? }))
                .collect()
        };
        let at = r.pos;
        let output = match r.u8(&field("output tag"))? {
            0 if spec.activation == Activation::Identity => {
                let at = r.pos;
                let len = r.u32(&field("affine"))?;
                if len != channels {
                    return Err(r.error(at, format!("layer {i} affine: declared length {len}, expected {channels}")));
                }
                let affine = (0..len)
                    .map(|_| {
                        Ok(ChannelAffine {
                            bias: r.f32(&field("affine"))?,
                            mean: r.f32(&field("affine"))?,
                            scale: r.f32(&field("affine"))?,
                            beta: r.f32(&field("affine"))?,
                        })
                    })
                    .collect::<Result<_>>()?;
                PackedOutput::Scores(affine)
            }
            1 if spec.activation == Activation::Sign && !spec.residual => {
                PackedOutput::Sign(table(&mut r, "thresholds")?)
            }
            2 if spec.activation == Activation::Sign && spec.residual => {
                PackedOutput::ResidualSign(table(&mut r, "thresholds[-1]")?, table(&mut r, "thresholds[+1]")?)
            }
            v => return Err(r.error(at, format!("layer {i} output tag: {v} does not match the descriptor"))),
        };
        layers.push(PackedLayer { weights, output });
    }
    r.finish()?;
    Ok(PackedModel { arch, layers })
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_model<T: Scalar>(model: &LarModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model)?)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<LarModel<T>> {
    let path = path.as_ref();
    decode_model(&read(path)?, path)
}

pub fn save_packed(model: &PackedModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_packed(model)?)
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedModel> {
    let path = path.as_ref();
    decode_packed(&read(path)?, path)
}

/// Which format a file holds, judged by its magic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Model,
    Packed,
}

pub fn sniff(path: impl AsRef<Path>) -> Result<FileKind> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::Read::read_exact(&mut f, &mut magic).map_err(|e| Error::io(path, e))?;
    match &magic {
        m if m == MODEL_MAGIC => Ok(FileKind::Model),
        m if m == PACKED_MAGIC => Ok(FileKind::Packed),
        _ => Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        }),
    }
}

/// Bytes of `(model, packed)` spent on the weights of interior (ternary) layers.
pub fn interior_weight_bytes<T: Scalar>(model: &LarModel<T>, packed: &PackedModel) -> (usize, usize) {
    let float = model
        .layers
        .iter()
        .map(|l| match &l.weights {
            LayerWeights::Distribution(d) => 4 * d.logits().iter().map(|t| t.len()).sum::<usize>(),
            LayerWeights::Real(_) => 0,
        })
        .sum();
    let bits = packed
        .layers
        .iter()
        .map(|l| match &l.weights {
            PackedWeights::Ternary(m) => 8 + 8 * (m.plus().len() + m.minus().len()),
            PackedWeights::Real(_) => 0,
        })
        .sum();
    (float, bits)
}
