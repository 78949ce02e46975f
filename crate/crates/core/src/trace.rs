//! Activation traces and the AVTRACE v1 container.
//!
//! Layout of an `.avtrace` file, all integers least-significant-byte-first:
//!
//! ```text
//! magic            4 bytes   "AVTR"
//! version          u32       1
//! header_json_len  u64
//! header_json      UTF-8 JSON metadata (model id, layer count, per-layer dims, dtype, ...)
//! payload          per-layer raw buffers in layer order, N*D values of `dtype` each
//! ```
//!
//! The payload length must equal the sum of the declared buffer sizes exactly.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"AVTR";
pub const VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "avtrace";

/// Bytes before the JSON header: magic, version, header length.
const PREAMBLE_LEN: u64 = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Usage(format!("unknown dtype `{other}` (expected f32 or f64)"))),
        }
    }
}

/// Which tensor of a transformer block was captured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPoint {
    /// Residual stream after the whole block.
    #[default]
    BlockOutput,
    /// MLP sublayer output, before it is added into the residual stream.
    MlpOutput,
    /// Attention sublayer output, before it is added into the residual stream.
    AttentionOutput,
    /// What the block adds to the residual stream: block output minus block input.
    BlockUpdate,
}

impl ActivationPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationPoint::BlockOutput => "block_output",
            ActivationPoint::MlpOutput => "mlp_output",
            ActivationPoint::AttentionOutput => "attention_output",
            ActivationPoint::BlockUpdate => "block_update",
        }
    }
}

impl FromStr for ActivationPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "block_output" => Ok(ActivationPoint::BlockOutput),
            "mlp_output" => Ok(ActivationPoint::MlpOutput),
            "attention_output" => Ok(ActivationPoint::AttentionOutput),
            "block_update" => Ok(ActivationPoint::BlockUpdate),
            _ => Err(Error::Usage(format!(
                "unknown activation point `{s}` (expected block-output, block-update, mlp-output or attention-output)"
            ))),
        }
    }
}

/// Raw activation samples of one layer in their stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum TraceValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TraceValues {
    pub fn dtype(&self) -> Dtype {
        match self {
            TraceValues::F32(_) => Dtype::F32,
            TraceValues::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TraceValues::F32(v) => v.len(),
            TraceValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples widened to f64.
    pub fn iter(&self) -> Samples<'_> {
        match self {
            TraceValues::F32(v) => Samples::F32(v.iter()),
            TraceValues::F64(v) => Samples::F64(v.iter()),
        }
    }

    /// Bitwise equality, so that `-0.0 != 0.0` and identical NaN payloads compare equal.
    pub fn bit_eq(&self, other: &TraceValues) -> bool {
        match (self, other) {
            (TraceValues::F32(a), TraceValues::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TraceValues::F64(a), TraceValues::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            TraceValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TraceValues::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn decode(dtype: Dtype, bytes: &[u8]) -> TraceValues {
        match dtype {
            Dtype::F32 => TraceValues::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TraceValues::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone)]
pub enum Samples<'a> {
    F32(std::slice::Iter<'a, f32>),
    F64(std::slice::Iter<'a, f64>),
}

impl Iterator for Samples<'_> {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        match self {
            Samples::F32(it) => it.next().map(|&x| x as f64),
            Samples::F64(it) => it.next().copied(),
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        match self {
            Samples::F32(it) => it.size_hint(),
            Samples::F64(it) => it.size_hint(),
        }
    }
}

impl ExactSizeIterator for Samples<'_> {}

/// Captured output of one layer: `samples` inputs times `width` scalar elements,
/// flattened row-major. Every scalar element counts as one activation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    /// N: number of inputs (tokens) captured.
    pub samples: usize,
    /// D: scalar elements per input.
    pub width: usize,
    pub values: TraceValues,
}

impl LayerTrace {
    pub fn from_f64(layer_index: usize, samples: usize, width: usize, values: Vec<f64>) -> Self {
        LayerTrace {
            layer_index,
            samples,
            width,
            values: TraceValues::F64(values),
        }
    }

    pub fn from_f32(layer_index: usize, samples: usize, width: usize, values: Vec<f32>) -> Self {
        LayerTrace {
            layer_index,
            samples,
            width,
            values: TraceValues::F32(values),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> Samples<'_> {
        self.values.iter()
    }
}

/// Per-layer traces of one model, in depth order.
///
/// Fields are public so that fixtures (including invalid ones) can be built
/// directly; [`TraceSet::new`] is the checked constructor.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub model_id: String,
    pub activation_point: ActivationPoint,
    pub dtype: Dtype,
    pub layers: Vec<LayerTrace>,
    pub creator: String,
    /// Creation time in seconds since the Unix epoch. Zero when the producer
    /// wants byte-reproducible files.
    pub created_unix: u64,
}

impl TraceSet {
    pub fn new(
        model_id: impl Into<String>,
        activation_point: ActivationPoint,
        dtype: Dtype,
        layers: Vec<LayerTrace>,
    ) -> Result<Self> {
        let set = TraceSet {
            model_id: model_id.into(),
            activation_point,
            dtype,
            layers,
            creator: default_creator(),
            created_unix: 0,
        };
        let violations = validate_trace(&set);
        if violations.is_empty() {
            Ok(set)
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// M, the number of layers.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Size in bytes of the raw payload section of the encoded file.
    pub fn payload_len(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.samples * l.width * self.dtype.width()) as u64)
            .sum()
    }

    /// Bitwise equality of metadata and every payload value.
    pub fn bit_eq(&self, other: &TraceSet) -> bool {
        self.model_id == other.model_id
            && self.activation_point == other.activation_point
            && self.dtype == other.dtype
            && self.creator == other.creator
            && self.created_unix == other.created_unix
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.layer_index == b.layer_index
                    && a.samples == b.samples
                    && a.width == b.width
                    && a.values.bit_eq(&b.values)
            })
    }
}

pub fn default_creator() -> String {
    format!("avss {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    DtypeMismatch,
    EmptyDims,
    EmptySet,
    LayerIndex,
    NonFinite,
    SampleCount,
    ValueLength,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::DtypeMismatch => "dtype_mismatch",
            Check::EmptyDims => "empty_dims",
            Check::EmptySet => "empty_set",
            Check::LayerIndex => "layer_index",
            Check::NonFinite => "non_finite",
            Check::SampleCount => "sample_count",
            Check::ValueLength => "value_length",
        }
    }
}

/// One broken invariant. `layer` is `None` for set-level problems.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub check: Check,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(layer) => write!(f, "layer {layer}: {}: {}", self.check.name(), self.detail),
            None => write!(f, "set: {}: {}", self.check.name(), self.detail),
        }
    }
}

/// Checks every trace invariant. An empty result means the set is valid.
///
/// Violations are ordered by layer position (set-level first), then by check name.
pub fn validate_trace(set: &TraceSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if set.layers.is_empty() {
        out.push(Violation {
            layer: None,
            check: Check::EmptySet,
            detail: "trace set has no layers".into(),
        });
    }
    let reference_samples = set.layers.first().map(|l| l.samples);
    for (position, layer) in set.layers.iter().enumerate() {
        let at = Some(position);
        if layer.layer_index != position {
            out.push(Violation {
                layer: at,
                check: Check::LayerIndex,
                detail: format!("declared index {} at position {position}", layer.layer_index),
            });
        }
        if layer.samples == 0 || layer.width == 0 {
            out.push(Violation {
                layer: at,
                check: Check::EmptyDims,
                detail: format!("dims ({}, {}) must both be >= 1", layer.samples, layer.width),
            });
        }
        if let Some(n) = reference_samples {
            if layer.samples != n {
                out.push(Violation {
                    layer: at,
                    check: Check::SampleCount,
                    detail: format!("sample count {} differs from layer 0 ({n})", layer.samples),
                });
            }
        }
        if layer.values.dtype() != set.dtype {
            out.push(Violation {
                layer: at,
                check: Check::DtypeMismatch,
                detail: format!(
                    "values are {} but the set declares {}",
                    layer.values.dtype().as_str(),
                    set.dtype.as_str()
                ),
            });
        }
        let expected = layer.samples.checked_mul(layer.width);
        if expected != Some(layer.values.len()) {
            out.push(Violation {
                layer: at,
                check: Check::ValueLength,
                detail: format!(
                    "{} values, expected {} x {}",
                    layer.values.len(),
                    layer.samples,
                    layer.width
                ),
            });
        }
        let mut bad = layer.iter().enumerate().filter(|(_, x)| !x.is_finite());
        if let Some((offset, value)) = bad.next() {
            let count = 1 + bad.count();
            out.push(Violation {
                layer: at,
                check: Check::NonFinite,
                detail: format!("element {offset} is {value} ({count} non-finite values)"),
            });
        }
    }
    out.sort_by(|a, b| (a.layer, a.check.name()).cmp(&(b.layer, b.check.name())));
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderJson {
    model_id: String,
    layer_count: usize,
    dtype: Dtype,
    activation_point: ActivationPoint,
    creator: String,
    created_unix: u64,
    layers: Vec<LayerDims>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDims {
    index: usize,
    samples: usize,
    width: usize,
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        // write_all may partially succeed; count what the sink accepted
        let mut rest = bytes;
        while !rest.is_empty() {
            match self.inner.write(rest) {
                Ok(0) => {
                    return Err(Error::Io {
                        offset: self.written,
                        source: std::io::ErrorKind::WriteZero.into(),
                    })
                }
                Ok(n) => {
                    self.written += n as u64;
                    rest = &rest[n..];
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(Error::Io {
                        offset: self.written,
                        source,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Encodes `set` as AVTRACE v1 and returns the number of bytes written.
pub fn write_trace<W: Write>(set: &TraceSet, destination: W) -> Result<u64> {
    let violations = validate_trace(set);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let header = HeaderJson {
        model_id: set.model_id.clone(),
        layer_count: set.layer_count(),
        dtype: set.dtype,
        activation_point: set.activation_point,
        creator: set.creator.clone(),
        created_unix: set.created_unix,
        layers: set
            .layers
            .iter()
            .map(|l| LayerDims {
                index: l.layer_index,
                samples: l.samples,
                width: l.width,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = CountingWriter {
        inner: destination,
        written: 0,
    };
    out.put(&MAGIC)?;
    out.put(&VERSION.to_le_bytes())?;
    out.put(&(json.len() as u64).to_le_bytes())?;
    out.put(&json)?;
    let mut buf = Vec::new();
    for layer in &set.layers {
        buf.clear();
        layer.values.encode_into(&mut buf);
        out.put(&buf)?;
    }
    out.inner.flush().map_err(|source| Error::Io {
        offset: out.written,
        source,
    })?;
    Ok(out.written)
}

/// Decodes and validates an AVTRACE v1 stream.
pub fn read_trace<R: Read>(mut source: R) -> Result<TraceSet> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|source| Error::Io {
            offset: 0,
            source,
        })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<TraceSet> {
    let actual = bytes.len() as u64;
    let prefix = &bytes[..bytes.len().min(4)];
    if prefix != &MAGIC[..prefix.len()] || bytes.is_empty() {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"AVTR\"",
            String::from_utf8_lossy(prefix)
        )));
    }
    if actual < PREAMBLE_LEN {
        return Err(Error::Corruption {
            expected: PREAMBLE_LEN,
            actual,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = PREAMBLE_LEN
        .checked_add(json_len)
        .ok_or_else(|| Error::Format("header length overflows".into()))?;
    if payload_start > actual {
        return Err(Error::Corruption {
            expected: payload_start,
            actual,
        });
    }
    let header: HeaderJson = serde_json::from_slice(&bytes[PREAMBLE_LEN as usize..payload_start as usize])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.layer_count != header.layers.len() {
        return Err(Error::Format(format!(
            "header declares {} layers but lists {}",
            header.layer_count,
            header.layers.len()
        )));
    }

    let width = header.dtype.width() as u64;
    let mut sizes = Vec::with_capacity(header.layers.len());
    let mut expected = payload_start;
    for dims in &header.layers {
        let size = (dims.samples as u64)
            .checked_mul(dims.width as u64)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Format(format!("layer {} size overflows", dims.index)))?;
        expected = expected
            .checked_add(size)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        sizes.push(size as usize);
    }
    if expected != actual {
        return Err(Error::Corruption { expected, actual });
    }

    let mut offset = payload_start as usize;
    let layers = header
        .layers
        .iter()
        .zip(sizes)
        .map(|(dims, size)| {
            let values = TraceValues::decode(header.dtype, &bytes[offset..offset + size]);
            offset += size;
            LayerTrace {
                layer_index: dims.index,
                samples: dims.samples,
                width: dims.width,
                values,
            }
        })
        .collect();
    let set = TraceSet {
        model_id: header.model_id,
        activation_point: header.activation_point,
        dtype: header.dtype,
        layers,
        creator: header.creator,
        created_unix: header.created_unix,
    };
    let violations = validate_trace(&set);
    if violations.is_empty() {
        Ok(set)
    } else {
        Err(Error::Validation(violations))
    }
}

pub fn write_trace_file(set: &TraceSet, path: &std::path::Path) -> Result<u64> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    write_trace(set, std::io::BufWriter::new(file))
}

pub fn read_trace_file(path: &std::path::Path) -> Result<TraceSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_trace(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(i: usize, n: usize, d: usize) -> LayerTrace {
        LayerTrace::from_f64(i, n, d, (0..n * d).map(|k| (k as f64) * 0.5 - 1.0).collect())
    }

    fn set_of(layers: Vec<LayerTrace>) -> TraceSet {
        TraceSet {
            model_id: "fixture".into(),
            activation_point: ActivationPoint::BlockOutput,
            dtype: Dtype::F64,
            layers,
            creator: "test".into(),
            created_unix: 0,
        }
    }

    fn encode(set: &TraceSet) -> Vec<u8> {
        let mut out = Vec::new();
        write_trace(set, &mut out).unwrap();
        out
    }

    #[test]
    fn minimal_container_is_header_plus_one_f32() {
        let set = TraceSet::new(
            "m",
            ActivationPoint::BlockOutput,
            Dtype::F32,
            vec![LayerTrace::from_f32(0, 1, 1, vec![0.0])],
        )
        .unwrap();
        let bytes = encode(&set);
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(bytes.len() as u64, 16 + json_len + 4);
        assert_eq!(&bytes[..4], b"AVTR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert!(read_trace(&bytes[..]).unwrap().bit_eq(&set));
    }

    #[test]
    fn payload_region_matches_declared_dims() {
        let set = set_of(vec![layer(0, 3, 2), layer(1, 3, 2)]);
        let bytes = encode(&set);
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(bytes.len() as u64 - 16 - json_len, 96);
        assert_eq!(set.payload_len(), 96);
    }

    #[test]
    fn write_returns_byte_count() {
        let set = set_of(vec![layer(0, 2, 2)]);
        let mut out = Vec::new();
        let n = write_trace(&set, &mut out).unwrap();
        assert_eq!(n, out.len() as u64);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode(&set_of(vec![layer(0, 2, 2)]));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_trace(&bytes[..]), Err(Error::Format(_))));
        assert!(matches!(read_trace(&b"XXXX"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_a_format_error() {
        let mut bytes = encode(&set_of(vec![layer(0, 2, 2)]));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_trace(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_expected_and_actual() {
        let bytes = encode(&set_of(vec![layer(0, 3, 2), layer(1, 3, 2)]));
        let cut = bytes.len() - 13;
        match read_trace(&bytes[..cut]) {
            Err(Error::Corruption { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut as u64);
            }
            other => panic!("expected corruption, got {other:?}"),
        }
        // trailing garbage is also a size mismatch
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_trace(&long[..]), Err(Error::Corruption { .. })));
        // cut inside the preamble
        assert!(matches!(read_trace(&bytes[..10]), Err(Error::Corruption { expected: 16, actual: 10 })));
    }

    #[test]
    fn nan_in_payload_names_layer_and_offset() {
        let mut set = set_of(vec![layer(0, 2, 2), layer(1, 2, 2)]);
        let bytes = encode(&set);
        // patch element 3 of layer 1 to NaN directly in the file
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let at = 16 + json_len + 4 * 8 + 3 * 8;
        let mut patched = bytes.clone();
        patched[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        match read_trace(&patched[..]) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].layer, Some(1));
                assert_eq!(v[0].check, Check::NonFinite);
                assert!(v[0].detail.contains("element 3"), "{}", v[0].detail);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        // writing a non-finite set is refused
        if let TraceValues::F64(v) = &mut set.layers[0].values {
            v[0] = f64::INFINITY;
        }
        assert!(matches!(write_trace(&set, Vec::new()), Err(Error::Validation(_))));
    }

    #[test]
    fn valid_set_has_no_violations() {
        assert!(validate_trace(&set_of(vec![layer(0, 4, 3), layer(1, 4, 3)])).is_empty());
    }

    #[test]
    fn single_nan_in_layer_three() {
        let mut layers: Vec<_> = (0..5).map(|i| layer(i, 2, 3)).collect();
        if let TraceValues::F64(v) = &mut layers[3].values {
            v[4] = f64::NAN;
        }
        let report = validate_trace(&set_of(layers));
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].layer, Some(3));
        assert_eq!(report[0].check, Check::NonFinite);
    }

    #[test]
    fn mismatched_sample_counts_flag_each_offender() {
        let layers = vec![layer(0, 4, 2), layer(1, 3, 2), layer(2, 4, 2), layer(3, 5, 1)];
        let report = validate_trace(&set_of(layers));
        let got: Vec<_> = report.iter().map(|v| (v.layer, v.check)).collect();
        assert_eq!(
            got,
            vec![(Some(1), Check::SampleCount), (Some(3), Check::SampleCount)]
        );
    }

    #[test]
    fn violations_sorted_by_layer_then_check_name() {
        let mut bad = layer(7, 3, 2);
        bad.values = TraceValues::F32(vec![f32::NAN; 5]);
        let layers = vec![layer(0, 2, 2), bad];
        let report = validate_trace(&set_of(layers));
        let got: Vec<_> = report.iter().map(|v| (v.layer, v.check.name())).collect();
        assert_eq!(
            got,
            vec![
                (Some(1), "dtype_mismatch"),
                (Some(1), "layer_index"),
                (Some(1), "non_finite"),
                (Some(1), "sample_count"),
                (Some(1), "value_length"),
            ]
        );
        assert_eq!(validate_trace(&set_of(vec![])).len(), 1);
    }

    #[test]
    fn validation_is_pure() {
        let mut layers = vec![layer(0, 2, 2), layer(2, 3, 2)];
        layers[0].values = TraceValues::F64(vec![f64::NAN, 1.0, 2.0]);
        let set = set_of(layers);
        assert_eq!(validate_trace(&set), validate_trace(&set));
    }

    #[test]
    fn activation_point_parses_both_spellings() {
        assert_eq!("mlp-output".parse::<ActivationPoint>().unwrap(), ActivationPoint::MlpOutput);
        assert_eq!(
            "attention_output".parse::<ActivationPoint>().unwrap(),
            ActivationPoint::AttentionOutput
        );
        assert!("residual".parse::<ActivationPoint>().is_err());
    }
}
