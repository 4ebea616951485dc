//! NPY array files and JSON checkpoint manifests.
//!
//! Arrays are read from NPY v1.0/v2.0 files holding a 2-D `f4` or `f8`
//! array (either byte order, C or Fortran layout) and always widened to
//! `f64`. Arrays are written as NPY v1.0, `<f8`, C order, so a write/read
//! cycle is bitwise lossless.
//!
//! A checkpoint is a directory holding one NPY file per layer plus a manifest:
//!
//! ```json
//! {"layers":[{"name":"fc1","file":"fc1.npy","kind":"dense","out_dim":4,"in_dim":3}],
//!  "adjacency":[["fc1","fc2"]]}
//! ```
//!
//! Convolution weights are expected pre-flattened to
//! `[out_channels, in_channels*kh*kw]`; `kind` is informational only.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FloatDescr {
    endian: Endian,
    width: usize,
}

struct NpyHeader {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Reads a 2-D floating point NPY file.
pub fn read_array(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| read_error(path, e))?;
    parse_npy(path, &bytes)
}

/// Writes `w` as NPY v1.0 little-endian `f64`, C order.
///
/// The file is written to a temporary sibling and renamed into place.
pub fn write_array(w: &WeightMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            reason: format!("refusing to write empty {}x{} array", w.rows(), w.cols()),
        });
    }
    write_atomic(path, &encode_npy(w))
}

fn read_error(path: &Path, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::NotFound {
        Error::NotFound(path.to_path_buf())
    } else {
        Error::Read {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

pub(crate) fn encode_npy(w: &WeightMatrix) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        w.rows(),
        w.cols()
    );
    // magic(6) + version(2) + len(2) + dict + padding + '\n'
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    let header_len = dict.len() + pad + 1;

    let mut out = Vec::with_capacity(unpadded + pad + w.data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    for v in w.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn parse_npy(path: &Path, bytes: &[u8]) -> Result<WeightMatrix> {
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(format_err("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(format_err("truncated v2.0 preamble".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        _ => return Err(format_err(format!("unsupported NPY version {major}.{minor}"))),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(format_err("header runs past end of file".into()));
    }
    let header_text = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| format_err("header is not valid text".into()))?;
    let header = parse_header(header_text).map_err(format_err)?;

    let descr = float_descr(&header.descr).ok_or_else(|| Error::UnsupportedShape {
        path: path.to_path_buf(),
        reason: format!("unsupported dtype '{}'", header.descr),
    })?;
    if header.shape.len() != 2 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            reason: format!("expected a 2-D array, got shape {:?}", header.shape),
        });
    }
    let (rows, cols) = (header.shape[0], header.shape[1]);
    if rows == 0 || cols == 0 {
        return Err(Error::UnsupportedShape {
            path: path.to_path_buf(),
            reason: format!("empty shape ({rows}, {cols})"),
        });
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err("shape overflows".into()))?;
    let width = descr.width;
    let payload = &bytes[data_start..];
    if payload.len() != count * width {
        return Err(format_err(format!(
            "payload has {} bytes, shape ({rows}, {cols}) needs {}",
            payload.len(),
            count * width
        )));
    }

    let mut values: Vec<f64> = payload
        .chunks_exact(width)
        .map(|c| decode_float(c, descr))
        .collect();
    if header.fortran_order {
        let mut c_order = vec![0.0; count];
        for j in 0..cols {
            for i in 0..rows {
                c_order[i * cols + j] = values[j * rows + i];
            }
        }
        values = c_order;
    }
    WeightMatrix::new(rows, cols, values).map_err(|e| match e {
        Error::InvalidValue(msg) => Error::InvalidValue(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode_float(chunk: &[u8], descr: FloatDescr) -> f64 {
    match (descr.width, descr.endian) {
        (8, Endian::Little) => f64::from_le_bytes(chunk.try_into().unwrap()),
        (8, Endian::Big) => f64::from_be_bytes(chunk.try_into().unwrap()),
        (4, Endian::Little) => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
        (4, Endian::Big) => f32::from_be_bytes(chunk.try_into().unwrap()) as f64,
        _ => unreachable!("descr validated on parse"),
    }
}

/// Minimal parser for the Python dict literal in an NPY header.
fn parse_header(text: &str) -> std::result::Result<NpyHeader, String> {
    let mut p = DictParser {
        s: text.trim_end_matches(['\n', ' ', '\0']).as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;

    p.expect(b'{')?;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => fortran_order = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err(format!("unexpected header key '{other}'")),
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }

    Ok(NpyHeader {
        descr: descr.ok_or("header lacks 'descr'")?,
        fortran_order: fortran_order.ok_or("header lacks 'fortran_order'")?,
        shape: shape.ok_or("header lacks 'shape'")?,
    })
}

fn float_descr(descr: &str) -> Option<FloatDescr> {
    let (endian, width) = match descr {
        "<f8" | "=f8" => (Endian::Little, 8),
        ">f8" => (Endian::Big, 8),
        "<f4" | "=f4" => (Endian::Little, 4),
        ">f4" => (Endian::Big, 4),
        _ => return None,
    };
    Some(FloatDescr { endian, width })
}

struct DictParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl DictParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(format!("expected '{}' at header offset {}", c as char, self.pos))
        }
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let quote = match self.s.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(format!("expected string at header offset {}", self.pos)),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err("unterminated string in header".into());
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn boolean(&mut self) -> std::result::Result<bool, String> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(format!("expected True/False at header offset {}", self.pos))
        }
    }

    fn tuple(&mut self) -> std::result::Result<Vec<usize>, String> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(format!("expected dimension at header offset {}", self.pos));
            }
            let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
            dims.push(text.parse().map_err(|_| format!("bad dimension '{text}'"))?);
            // python long suffix from very old writers
            self.eat(b'L');
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let write_err = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| write_err(io::Error::new(io::ErrorKind::InvalidInput, "no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);

    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(write_err(e));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    ConvFlattened,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub file: String,
    pub kind: LayerKind,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub adjacency: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub file: String,
    pub kind: LayerKind,
    pub weights: WeightMatrix,
}

/// Layers in manifest order plus the compressible (layer, successor) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<Layer>,
    pub adjacency: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            layers: self
                .layers
                .iter()
                .map(|l| LayerEntry {
                    name: l.name.clone(),
                    file: l.file.clone(),
                    kind: l.kind,
                    out_dim: l.weights.rows(),
                    in_dim: l.weights.cols(),
                })
                .collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    /// Adjacency pairs resolved to layer indices, with the dimension
    /// contract checked.
    pub fn resolved_adjacency(&self) -> Result<Vec<(usize, usize)>> {
        let mut sources = HashSet::new();
        let mut targets = HashSet::new();
        let mut out = Vec::with_capacity(self.adjacency.len());
        for (a, b) in &self.adjacency {
            let ia = self
                .index_of(a)
                .ok_or_else(|| Error::Topology(format!("adjacency names unknown layer '{a}'")))?;
            let ib = self
                .index_of(b)
                .ok_or_else(|| Error::Topology(format!("adjacency names unknown layer '{b}'")))?;
            if ia == ib {
                return Err(Error::Topology(format!("layer '{a}' paired with itself")));
            }
            if !sources.insert(ia) {
                return Err(Error::Topology(format!(
                    "layer '{a}' has more than one successor"
                )));
            }
            if !targets.insert(ib) {
                return Err(Error::Topology(format!(
                    "layer '{b}' has more than one predecessor"
                )));
            }
            let (out_dim, in_dim) = (self.layers[ia].weights.rows(), self.layers[ib].weights.cols());
            if out_dim != in_dim {
                return Err(Error::Topology(format!(
                    "'{a}' has out_dim {out_dim} but successor '{b}' has in_dim {in_dim}"
                )));
            }
            out.push((ia, ib));
        }
        Ok(out)
    }
}

/// Loads every layer named by the manifest and checks shapes and topology.
pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<Checkpoint> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| read_error(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    for entry in &manifest.layers {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::ManifestInconsistency(format!(
                "duplicate layer name '{}'",
                entry.name
            )));
        }
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let weights = read_array(base.join(&entry.file))?;
        if weights.shape() != (entry.out_dim, entry.in_dim) {
            return Err(Error::ManifestInconsistency(format!(
                "layer '{}' declares {}x{} but {} holds {}x{}",
                entry.name,
                entry.out_dim,
                entry.in_dim,
                entry.file,
                weights.rows(),
                weights.cols()
            )));
        }
        layers.push(Layer {
            name: entry.name.clone(),
            file: entry.file.clone(),
            kind: entry.kind,
            weights,
        });
    }

    let ckpt = Checkpoint {
        layers,
        adjacency: manifest.adjacency,
    };
    ckpt.resolved_adjacency()?;
    Ok(ckpt)
}

/// Writes every layer and `manifest.json` into `dir`, returning the manifest path.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    ckpt.resolved_adjacency()?;
    let mut files = HashMap::new();
    for layer in &ckpt.layers {
        let rel = Path::new(&layer.file);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(Error::ManifestInconsistency(format!(
                "layer '{}' file '{}' must be a plain relative path",
                layer.name, layer.file
            )));
        }
        if let Some(other) = files.insert(rel.to_path_buf(), &layer.name) {
            return Err(Error::ManifestInconsistency(format!(
                "layers '{other}' and '{}' share file '{}'",
                layer.name, layer.file
            )));
        }
    }

    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    for layer in &ckpt.layers {
        let path = dir.join(&layer.file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| Error::Write {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        write_array(&layer.weights, &path)?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, ckpt.manifest().to_json().as_bytes())?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_bytes(descr: &str, fortran: bool, shape: &str, payload: &[u8]) -> Vec<u8> {
        let dict = format!(
            "{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape}, }}\n",
            if fortran { "True" } else { "False" }
        );
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f64_le(vals: &[f64]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn reads_small_matrix() {
        let bytes = npy_bytes("<f8", false, "(2, 2)", &f64_le(&[1.0, 2.0, 3.0, 4.0]));
        let w = parse_npy(Path::new("t.npy"), &bytes).unwrap();
        assert_eq!(w.shape(), (2, 2));
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn widens_f32_and_handles_fortran_and_big_endian() {
        let payload: Vec<u8> = [1.5f32, -2.25, 3.0, 0.1]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let w = parse_npy(Path::new("t"), &npy_bytes("<f4", false, "(2, 2)", &payload)).unwrap();
        assert_eq!(w.data(), &[1.5, -2.25, 3.0, 0.1f32 as f64]);

        // column-major [[1,2],[3,4]] is stored 1,3,2,4
        let w = parse_npy(
            Path::new("t"),
            &npy_bytes("<f8", true, "(2, 2)", &f64_le(&[1.0, 3.0, 2.0, 4.0])),
        )
        .unwrap();
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0]);

        let be: Vec<u8> = [7.0f64, 8.0].iter().flat_map(|v| v.to_be_bytes()).collect();
        let w = parse_npy(Path::new("t"), &npy_bytes(">f8", false, "(1, 2)", &be)).unwrap();
        assert_eq!(w.data(), &[7.0, 8.0]);
    }

    #[test]
    fn rejects_three_dimensional() {
        let bytes = npy_bytes("<f8", false, "(1, 2, 2)", &f64_le(&[0.0; 4]));
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::UnsupportedShape { .. })
        ));
        let bytes = npy_bytes("<f8", false, "(4,)", &f64_le(&[0.0; 4]));
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::UnsupportedShape { .. })
        ));
    }

    #[test]
    fn rejects_integer_dtype() {
        let bytes = npy_bytes("<i8", false, "(1, 1)", &[0u8; 8]);
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::UnsupportedShape { .. })
        ));
    }

    #[test]
    fn rejects_malformed_header() {
        assert!(matches!(
            parse_npy(Path::new("t"), b"not an npy file"),
            Err(Error::Format { .. })
        ));
        let bytes = npy_bytes("<f8", false, "(2, 2", &f64_le(&[0.0; 4]));
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::Format { .. })
        ));
        // truncated payload
        let bytes = npy_bytes("<f8", false, "(2, 2)", &f64_le(&[0.0; 3]));
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_nan_entries() {
        let bytes = npy_bytes("<f8", false, "(1, 2)", &f64_le(&[1.0, f64::NAN]));
        assert!(matches!(
            parse_npy(Path::new("t"), &bytes),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn header_is_aligned_and_canonical() {
        let w = WeightMatrix::from_rows(&[[0.0]]).unwrap();
        let bytes = encode_npy(&w);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1), }"));
        assert!(header.ends_with('\n'));
        assert_eq!(bytes.len(), 10 + header_len + 8);
    }
}
