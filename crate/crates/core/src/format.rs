//! Trace file I/O.
//!
//! Two encodings share one data model:
//!
//! * **Text** (canonical): a JSON document
//!   `{"format_version":1,"header":{"L","H","n","T","modality_labels"},"prefill":…,"decode":…}`.
//!   `prefill` is indexed `[layer][head][row]` and row `i` carries only its
//!   `i + 1` causal entries. `decode` is indexed `[step][layer][head]`. Field
//!   order is fixed and floats use the shortest round-trip decimal, so equal
//!   traces always serialize to identical bytes.
//! * **Binary**: magic `MKVT`, `u32` LE version, `L H n T` as `u32` LE,
//!   labels as packed bits (LSB first, `1` = visual), then every score as an
//!   `f32` LE in the same index order as the text form.
//!
//! [`load_trace`] sniffs the magic bytes and accepts either form.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, Modality, TraceHeader};

pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 4] = b"MKVT";

/// Reads a trace in either encoding and validates it.
pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes)
}

/// Decodes trace bytes in either encoding.
pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(bytes)
    } else {
        decode_text(bytes)
    }
}

/// Writes the canonical text encoding.
pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_text(trace))
}

/// Writes the compact binary encoding. Scores are narrowed to `f32`.
pub fn save_trace_binary(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_binary(trace))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

// ---------------------------------------------------------------------------
// text encoding

struct TextTrace<'a>(&'a AttentionTrace);
struct TextHeader<'a>(&'a TraceHeader);
struct PrefillView<'a>(&'a AttentionTrace);
struct HeadRows<'a>(&'a AttentionTrace, usize);
struct LayerRows<'a>(&'a AttentionTrace, usize, usize);
struct DecodeView<'a>(&'a AttentionTrace);
struct DecodeStep<'a>(&'a AttentionTrace, usize);
struct DecodeLayer<'a>(&'a AttentionTrace, usize, usize);

impl Serialize for TextTrace<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(4))?;
        m.serialize_entry("format_version", &FORMAT_VERSION)?;
        m.serialize_entry("header", &TextHeader(self.0.header()))?;
        m.serialize_entry("prefill", &PrefillView(self.0))?;
        m.serialize_entry("decode", &DecodeView(self.0))?;
        m.end()
    }
}

impl Serialize for TextHeader<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let h = self.0;
        let mut m = s.serialize_map(Some(5))?;
        m.serialize_entry("L", &h.num_layers)?;
        m.serialize_entry("H", &h.num_heads)?;
        m.serialize_entry("n", &h.prompt_len)?;
        m.serialize_entry("T", &h.num_decode_steps)?;
        m.serialize_entry("modality_labels", &h.modality_labels)?;
        m.end()
    }
}

impl Serialize for PrefillView<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.num_layers()))?;
        for layer in 0..self.0.num_layers() {
            seq.serialize_element(&HeadRows(self.0, layer))?;
        }
        seq.end()
    }
}

impl Serialize for HeadRows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.num_heads()))?;
        for head in 0..self.0.num_heads() {
            seq.serialize_element(&LayerRows(self.0, self.1, head))?;
        }
        seq.end()
    }
}

impl Serialize for LayerRows<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let n = self.0.prompt_len();
        let mut seq = s.serialize_seq(Some(n))?;
        for row in 0..n {
            seq.serialize_element(self.0.prefill_row(self.1, self.2, row))?;
        }
        seq.end()
    }
}

impl Serialize for DecodeView<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let steps = self.0.num_decode_steps();
        let mut seq = s.serialize_seq(Some(steps))?;
        for step in 1..=steps {
            seq.serialize_element(&DecodeStep(self.0, step))?;
        }
        seq.end()
    }
}

impl Serialize for DecodeStep<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.num_layers()))?;
        for layer in 0..self.0.num_layers() {
            seq.serialize_element(&DecodeLayer(self.0, self.1, layer))?;
        }
        seq.end()
    }
}

impl Serialize for DecodeLayer<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.num_heads()))?;
        for head in 0..self.0.num_heads() {
            seq.serialize_element(self.0.decode_row(self.1, self.2, head))?;
        }
        seq.end()
    }
}

/// Canonical text bytes of a trace, newline-terminated.
pub fn encode_text(trace: &AttentionTrace) -> Vec<u8> {
    let mut out = serde_json::to_vec(&TextTrace(trace)).expect("trace serialization is infallible");
    out.push(b'\n');
    out
}

fn decode_text(bytes: &[u8]) -> Result<AttentionTrace> {
    let doc: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::format("<document>", e.to_string()))?;
    let root = doc
        .as_object()
        .ok_or_else(|| Error::format("<document>", "expected an object"))?;

    let version = field(root, "format_version", "format_version")?;
    match version.as_u64() {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        _ => {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ))
        }
    }

    let header_obj = field(root, "header", "header")?
        .as_object()
        .ok_or_else(|| Error::format("header", "expected an object"))?;
    let dim = |key: &str| -> Result<usize> {
        let path = format!("header.{key}");
        field(header_obj, key, &path)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(path, "expected a non-negative integer"))
    };
    let (l_count, h_count, n, t_count) = (dim("L")?, dim("H")?, dim("n")?, dim("T")?);
    let labels = array(
        field(header_obj, "modality_labels", "header.modality_labels")?,
        "header.modality_labels",
        None,
    )?
    .iter()
    .enumerate()
    .map(|(i, v)| match v.as_str() {
        Some("text") => Ok(Modality::Text),
        Some("visual") => Ok(Modality::Visual),
        _ => Err(Error::format(
            format!("header.modality_labels[{i}]"),
            format!("expected \"text\" or \"visual\", found {v}"),
        )),
    })
    .collect::<Result<Vec<_>>>()?;
    let header = TraceHeader {
        num_layers: l_count,
        num_heads: h_count,
        prompt_len: n,
        num_decode_steps: t_count,
        modality_labels: labels,
    };
    header.validate()?;

    let prefill_val = field(root, "prefill", "prefill")?;
    let mut prefill = Vec::with_capacity(l_count);
    for (l, layer) in array(prefill_val, "prefill", Some(l_count))?
        .iter()
        .enumerate()
    {
        let path = format!("prefill[{l}]");
        let mut heads = Vec::with_capacity(h_count);
        for (h, head) in array(layer, &path, Some(h_count))?.iter().enumerate() {
            let path = format!("prefill[{l}][{h}]");
            let mut tri = Vec::with_capacity(n * (n + 1) / 2);
            for (i, row) in array(head, &path, Some(n))?.iter().enumerate() {
                let path = format!("prefill[{l}][{h}][{i}]");
                numbers(row, &path, i + 1, &mut tri)?;
            }
            heads.push(tri);
        }
        prefill.push(heads);
    }

    let decode_val = field(root, "decode", "decode")?;
    let mut decode = Vec::with_capacity(t_count);
    for (t, step) in array(decode_val, "decode", Some(t_count))?
        .iter()
        .enumerate()
    {
        let mut layers = Vec::with_capacity(l_count);
        for (l, layer) in array(step, &format!("decode[{t}]"), Some(l_count))?
            .iter()
            .enumerate()
        {
            let mut heads = Vec::with_capacity(h_count);
            for (h, head) in array(layer, &format!("decode[{t}][{l}]"), Some(h_count))?
                .iter()
                .enumerate()
            {
                let mut row = Vec::with_capacity(n + t);
                numbers(head, &format!("decode[{t}][{l}][{h}]"), n + t, &mut row)?;
                heads.push(row);
            }
            layers.push(heads);
        }
        decode.push(layers);
    }

    AttentionTrace::new(header, prefill, decode)
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::format(path, "missing field"))
}

fn array<'a>(v: &'a Value, path: &str, expected_len: Option<usize>) -> Result<&'a Vec<Value>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::format(path, "expected an array"))?;
    if let Some(len) = expected_len {
        if arr.len() != len {
            return Err(Error::format(
                path,
                format!("expected {len} entries, found {}", arr.len()),
            ));
        }
    }
    Ok(arr)
}

fn numbers(v: &Value, path: &str, expected_len: usize, out: &mut Vec<f64>) -> Result<()> {
    for (j, x) in array(v, path, Some(expected_len))?.iter().enumerate() {
        out.push(
            x.as_f64()
                .ok_or_else(|| Error::format(format!("{path}[{j}]"), "expected a number"))?,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// binary encoding

pub fn encode_binary(trace: &AttentionTrace) -> Vec<u8> {
    let h = trace.header();
    let n = h.prompt_len;
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [h.num_layers, h.num_heads, n, h.num_decode_steps] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, m) in h.modality_labels.iter().enumerate() {
        if *m == Modality::Visual {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    let mut push = |row: &[f64]| {
        for &x in row {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for layer in 0..h.num_layers {
        for head in 0..h.num_heads {
            push(trace.prefill_triangle(layer, head));
        }
    }
    for step in 1..=h.num_decode_steps {
        for layer in 0..h.num_layers {
            for head in 0..h.num_heads {
                push(trace.decode_row(step, layer, head));
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(what, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn decode_binary(bytes: &[u8]) -> Result<AttentionTrace> {
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let l_count = cur.u32("header.L")? as usize;
    let h_count = cur.u32("header.H")? as usize;
    let n = cur.u32("header.n")? as usize;
    let t_count = cur.u32("header.T")? as usize;
    let bits = cur.take(n.div_ceil(8), "header.modality_labels")?;
    let labels = (0..n)
        .map(|i| {
            if bits[i / 8] >> (i % 8) & 1 == 1 {
                Modality::Visual
            } else {
                Modality::Text
            }
        })
        .collect();
    let header = TraceHeader {
        num_layers: l_count,
        num_heads: h_count,
        prompt_len: n,
        num_decode_steps: t_count,
        modality_labels: labels,
    };
    header.validate()?;

    let tri = header.triangle_len();
    let mut prefill = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let mut heads = Vec::with_capacity(h_count);
        for h in 0..h_count {
            heads.push(cur.f32s(tri, &format!("prefill[{l}][{h}]"))?);
        }
        prefill.push(heads);
    }
    let mut decode = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut layers = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let mut heads = Vec::with_capacity(h_count);
            for h in 0..h_count {
                heads.push(cur.f32s(n + t, &format!("decode[{t}][{l}][{h}]"))?);
            }
            layers.push(heads);
        }
        decode.push(layers);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            "<document>",
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    AttentionTrace::new(header, prefill, decode)
}
