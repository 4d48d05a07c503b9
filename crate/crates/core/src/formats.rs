//! On-disk formats: FQW float models and FQQ quantized models.
//!
//! Both start with a 4-byte magic, a little-endian `u32` manifest length and
//! a UTF-8 JSON manifest, followed by binary payloads. Floats are binary64
//! little-endian, matrices row-major.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Frame, FrameKind, Permutation};
use crate::network::{Activation, Layer, Model, QuantizedLayer, QuantizedModel};
use crate::quantizer::{Mode, QuantizedMatrix};
use crate::sigma_delta::{bits_for_levels, Alphabet};

pub const FQW_MAGIC: &[u8; 4] = b"FQW1";
pub const FQQ_MAGIC: &[u8; 4] = b"FQQ1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FloatLayerKind {
    Affine,
    Residual,
}

#[derive(Debug, Serialize, Deserialize)]
struct FloatLayerEntry {
    kind: FloatLayerKind,
    #[serde(rename = "in")]
    in_dim: usize,
    out: usize,
    has_bias: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct FqwManifest {
    version: u32,
    activation: Activation,
    layers: Vec<FloatLayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum QuantLayerKind {
    Affine,
    ResidualW1,
    ResidualW2,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum FrameEntry {
    Harmonic {
        d: usize,
        #[serde(rename = "N")]
        n: usize,
    },
    Explicit {
        d: usize,
        #[serde(rename = "N")]
        n: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum PermutationEntry {
    Named(String),
    Order(Vec<usize>),
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantLayerEntry {
    kind: QuantLayerKind,
    rows: usize,
    cols: usize,
    mode: Mode,
    #[serde(rename = "K")]
    levels: u32,
    delta: f64,
    frame: FrameEntry,
    permutation: PermutationEntry,
    bias_folded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct FqqManifest {
    version: u32,
    activation: Activation,
    layers: Vec<QuantLayerEntry>,
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], manifest: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest exceeds 4 GiB".into()))?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

fn write_f64s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    // nalgebra is column-major; emit row-major.
    for r in 0..m.nrows() {
        write_f64s(out, m.row(r).iter());
    }
}

/// Sequential reader over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what: what(),
                expected: n,
                actual: available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: impl FnOnce() -> String) -> Result<DMatrix<f64>> {
        let bytes = self.take(rows * cols * 8, what)?;
        Ok(DMatrix::from_row_iterator(
            rows,
            cols,
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_header<'a, T: serde::de::DeserializeOwned>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(T, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, || "magic".into())?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(r.take(4, || "manifest length".into())?.try_into().unwrap()) as usize;
    let json = r.take(len, || "manifest".into())?;
    let manifest = serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    Ok((manifest, r))
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

/// Serializes a float model to FQW bytes.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let layers = model
        .layers()
        .iter()
        .map(|l| FloatLayerEntry {
            kind: match l {
                Layer::Affine { .. } => FloatLayerKind::Affine,
                Layer::Residual { .. } => FloatLayerKind::Residual,
            },
            in_dim: l.in_dim(),
            out: l.out_dim(),
            has_bias: l.has_bias(),
        })
        .collect();
    let manifest = FqwManifest {
        version: FORMAT_VERSION,
        activation: model.activation(),
        layers,
        metadata: model.metadata().cloned(),
    };
    let mut out = Vec::new();
    write_header(&mut out, FQW_MAGIC, &manifest)?;
    for l in model.layers() {
        match l {
            Layer::Affine { weight, bias } => {
                write_matrix(&mut out, weight);
                if let Some(b) = bias {
                    write_f64s(&mut out, b.iter());
                }
            }
            Layer::Residual { first, second, bias } => {
                write_matrix(&mut out, first);
                write_matrix(&mut out, second);
                if let Some(b) = bias {
                    write_f64s(&mut out, b.iter());
                }
            }
        }
    }
    Ok(out)
}

/// Parses FQW bytes.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (manifest, mut r): (FqwManifest, _) = read_header(bytes, FQW_MAGIC)?;
    check_version(manifest.version)?;
    if manifest.layers.is_empty() {
        return Err(Error::Format("model has no layers".into()));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let what = |part: &'static str| move || format!("layer {i} {part}");
        let bias = |r: &mut Reader| -> Result<Option<DVector<f64>>> {
            if !e.has_bias {
                return Ok(None);
            }
            let b = r.matrix(e.out, 1, what("bias"))?;
            Ok(Some(b.column(0).into_owned()))
        };
        let layer = match e.kind {
            FloatLayerKind::Affine => {
                let weight = r.matrix(e.out, e.in_dim, what("weight"))?;
                Layer::affine(weight, bias(&mut r)?)
            }
            FloatLayerKind::Residual => {
                if e.in_dim != e.out {
                    return Err(Error::DimensionMismatch {
                        context: "residual block must be square".into(),
                        expected: e.out,
                        actual: e.in_dim,
                    }
                    .in_layer(i));
                }
                let first = r.matrix(e.out, e.in_dim, what("first weight"))?;
                let second = r.matrix(e.out, e.out, what("second weight"))?;
                Layer::residual(first, second, bias(&mut r)?)
            }
        };
        layers.push(layer);
    }
    r.finish()?;
    Ok(Model::new(layers, manifest.activation)?.with_metadata(manifest.metadata))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Packs codes at `bits` bits each, least significant bit first.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`] for `count` codes.
pub fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut c = 0u32;
        for b in 0..bits {
            c |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << b;
            pos += 1;
        }
        out.push(c);
    }
    out
}

fn quant_entry(kind: QuantLayerKind, m: &QuantizedMatrix) -> QuantLayerEntry {
    let f = m.frame();
    let (d, n) = (f.dim(), f.len());
    QuantLayerEntry {
        kind,
        rows: m.rows(),
        cols: m.cols(),
        mode: m.mode(),
        levels: m.alphabet().levels(),
        delta: m.alphabet().step(),
        frame: match f.kind() {
            FrameKind::Harmonic => FrameEntry::Harmonic { d, n },
            FrameKind::Explicit => FrameEntry::Explicit { d, n },
        },
        permutation: if m.permutation().is_identity() {
            PermutationEntry::Named("identity".into())
        } else {
            PermutationEntry::Order(m.permutation().order().to_vec())
        },
        bias_folded: m.bias_folded(),
    }
}

/// Serializes a quantized model to FQQ bytes.
pub fn encode_quantized(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut matrices = Vec::new();
    for l in qm.layers() {
        match l {
            QuantizedLayer::Affine(m) => {
                entries.push(quant_entry(QuantLayerKind::Affine, m));
                matrices.push(m);
            }
            QuantizedLayer::Residual { first, second } => {
                entries.push(quant_entry(QuantLayerKind::ResidualW1, first));
                entries.push(quant_entry(QuantLayerKind::ResidualW2, second));
                matrices.extend([first, second]);
            }
        }
    }
    let manifest = FqqManifest {
        version: FORMAT_VERSION,
        activation: qm.activation(),
        layers: entries,
    };
    let mut out = Vec::new();
    write_header(&mut out, FQQ_MAGIC, &manifest)?;
    for m in matrices {
        if m.frame().kind() == FrameKind::Explicit {
            write_matrix(&mut out, m.frame().vectors());
        }
        out.extend(pack_codes(m.codes(), m.alphabet().bits_per_code()));
    }
    Ok(out)
}

fn decode_matrix(e: &QuantLayerEntry, i: usize, r: &mut Reader) -> Result<QuantizedMatrix> {
    let alphabet = Alphabet::new(e.levels, e.delta)?;
    let frame = match e.frame {
        FrameEntry::Harmonic { d, n } => Frame::harmonic(d, n)?,
        FrameEntry::Explicit { d, n } => {
            Frame::explicit(r.matrix(n, d, || format!("layer {i} frame"))?)?
        }
    };
    let n = frame.len();
    let permutation = match &e.permutation {
        PermutationEntry::Named(s) if s == "identity" => Permutation::identity(n),
        PermutationEntry::Named(s) => return Err(Error::Format(format!("unknown permutation {s:?}"))),
        PermutationEntry::Order(order) => Permutation::explicit(order.clone())?,
    };
    let count = e.mode.vector_count(e.rows, e.cols) * n;
    let bits = bits_for_levels(e.levels);
    let bytes = r.take((count * bits as usize).div_ceil(8), || format!("layer {i} codes"))?;
    let codes = unpack_codes(bytes, bits, count);
    QuantizedMatrix::from_parts(
        codes,
        alphabet,
        Arc::new(frame),
        permutation,
        e.mode,
        e.rows,
        e.cols,
        e.bias_folded,
    )
}

/// Parses FQQ bytes. Errors inside a layer name the manifest layer index.
pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let (manifest, mut r): (FqqManifest, _) = read_header(bytes, FQQ_MAGIC)?;
    check_version(manifest.version)?;
    if manifest.layers.is_empty() {
        return Err(Error::Format("model has no layers".into()));
    }
    let mut layers = Vec::new();
    let mut pending_first: Option<QuantizedMatrix> = None;
    for (i, e) in manifest.layers.iter().enumerate() {
        let m = decode_matrix(e, i, &mut r).map_err(|err| err.in_layer(i))?;
        match (e.kind, pending_first.take()) {
            (QuantLayerKind::Affine, None) => layers.push(QuantizedLayer::Affine(m)),
            (QuantLayerKind::ResidualW1, None) => pending_first = Some(m),
            (QuantLayerKind::ResidualW2, Some(first)) => {
                layers.push(QuantizedLayer::Residual { first, second: m })
            }
            _ => {
                return Err(Error::Format(
                    "residual_w1 must be immediately followed by residual_w2".into(),
                )
                .in_layer(i))
            }
        }
    }
    if pending_first.is_some() {
        return Err(Error::Format("residual_w1 without residual_w2".into()).in_layer(manifest.layers.len() - 1));
    }
    r.finish()?;
    QuantizedModel::new(layers, manifest.activation)
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_quantized(qm)?).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    decode_quantized(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
