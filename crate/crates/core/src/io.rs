//! Raw volume files: a small JSON header `<name>.vjson` next to a
//! little-endian payload `<name>.vraw` in x-fastest order.
//!
//! Writes go to a temporary file in the destination directory followed by a
//! rename, so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::easr::LabelMap;
use crate::error::{Error, Result};
use crate::volume::{Dims, VectorField, Volume};

/// Version of the `.vjson` header layout.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "scalar")]
    Scalar,
    #[serde(rename = "vector3")]
    Vector3,
    #[serde(rename = "labels-u16")]
    LabelsU16,
}

/// Header stored in `<name>.vjson`. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dtype: String,
    pub order: String,
    pub kind: Kind,
}

impl Header {
    fn new(dims: Dims, kind: Kind) -> Self {
        let dtype = match kind {
            Kind::LabelsU16 => "u16",
            Kind::Scalar | Kind::Vector3 => "f32",
        };
        Self {
            nx: dims.nx,
            ny: dims.ny,
            nz: dims.nz,
            dtype: dtype.into(),
            order: "x-fastest".into(),
            kind,
        }
    }

    fn dims(&self) -> Result<Dims> {
        Dims::new(self.nx, self.ny, self.nz)
    }

    fn check(&self, kind: Kind) -> Result<Dims> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected kind {kind:?}, found {:?}", self.kind)));
        }
        if self.order != "x-fastest" {
            return Err(Error::Format(format!("unsupported order {:?}", self.order)));
        }
        let expected = Header::new(Dims { nx: 2, ny: 2, nz: 2 }, kind).dtype;
        if self.dtype != expected {
            return Err(Error::Format(format!("unsupported dtype {:?} for {kind:?}", self.dtype)));
        }
        self.dims()
    }
}

/// Strips a `.vjson`/`.vraw` extension so either file (or the bare stem) can
/// name a volume.
pub fn stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vjson") | Some("vraw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(file_err(&tmp))?;
        f.write_all(bytes).map_err(file_err(&tmp))?;
        f.sync_all().map_err(file_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let stem = stem(path);
    write_atomic(&with_ext(&stem, "vraw"), payload)?;
    write_atomic(&with_ext(&stem, "vjson"), serde_json::to_string(header)?.as_bytes())
}

fn read_pair(path: &Path, kind: Kind, elem_bytes: usize) -> Result<(Dims, Vec<u8>)> {
    let stem = stem(path);
    let header_path = with_ext(&stem, "vjson");
    let text = fs::read_to_string(&header_path).map_err(file_err(&header_path))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", with_ext(&stem, "vjson").display())))?;
    let dims = header.check(kind)?;
    let payload_path = with_ext(&stem, "vraw");
    let payload = fs::read(&payload_path).map_err(file_err(&payload_path))?;
    let expected = dims.len() * elem_bytes;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {expected}",
            with_ext(&stem, "vraw").display(),
            payload.len()
        )));
    }
    Ok((dims, payload))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let header_path = with_ext(&stem(path), "vjson");
    let text = fs::read_to_string(&header_path).map_err(file_err(&header_path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_pair(path, &Header::new(v.dims(), Kind::Scalar), &buf)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (dims, raw) = read_pair(path, Kind::Scalar, 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

/// Writes a vector field as interleaved f32 triplets.
pub fn write_field(path: &Path, f: &VectorField) -> Result<()> {
    let mut buf = Vec::with_capacity(f.data().len() * 12);
    for v in f.data() {
        for c in v {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    write_pair(path, &Header::new(f.dims(), Kind::Vector3), &buf)
}

pub fn read_field(path: &Path) -> Result<VectorField> {
    let (dims, raw) = read_pair(path, Kind::Vector3, 12)?;
    let comp = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let data = raw
        .chunks_exact(12)
        .map(|b| [comp(&b[0..4]), comp(&b[4..8]), comp(&b[8..12])])
        .collect();
    VectorField::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    let mut buf = Vec::with_capacity(l.labels().len() * 2);
    for x in l.labels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_pair(path, &Header::new(l.dims(), Kind::LabelsU16), &buf)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (dims, raw) = read_pair(path, Kind::LabelsU16, 2)?;
    let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    LabelMap::new(dims, labels)
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(3, 2, 2).unwrap();
        let p = dir.path().join("img");
        write_volume(&p, &Volume::from_fn(dims, |x, y, z| (x + y + z) as f32)).unwrap();
        let text = fs::read_to_string(dir.path().join("img.vjson")).unwrap();
        assert_eq!(
            text,
            r#"{"nx":3,"ny":2,"nz":2,"dtype":"f32","order":"x-fastest","kind":"scalar"}"#
        );
        let raw = fs::read(dir.path().join("img.vraw")).unwrap();
        assert_eq!(raw.len(), 12 * 4);
        assert_eq!(&raw[4..8], &1.0f32.to_le_bytes());

        let f = VectorField::constant(dims, [1.0, -2.0, 0.5]);
        write_field(&dir.path().join("u"), &f).unwrap();
        let raw = fs::read(dir.path().join("u.vraw")).unwrap();
        assert_eq!(&raw[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&raw[4..8], &(-2.0f32).to_le_bytes());
        assert!(fs::read_to_string(dir.path().join("u.vjson")).unwrap().contains(r#""kind":"vector3""#));
    }

    #[test]
    fn kind_mismatch_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 2, 2).unwrap();
        let p = dir.path().join("v.vjson");
        write_volume(&p, &Volume::zeros(dims)).unwrap();
        assert!(matches!(read_field(&p), Err(Error::Format(_))));
        fs::write(dir.path().join("v.vraw"), [0u8; 5]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn files_roundtrip(vals in proptest::collection::vec(-1e6f32..1e6, 24),
                           labels in proptest::collection::vec(0u16..7, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let dims = Dims::new(2, 3, 4).unwrap();
            let v = Volume::new(dims, vals.clone()).unwrap();
            write_volume(&dir.path().join("a"), &v).unwrap();
            prop_assert_eq!(read_volume(&dir.path().join("a.vraw")).unwrap(), v);

            let f = VectorField::new(dims, vals.iter().map(|&x| [x as f64, -(x as f64), 0.5]).collect()).unwrap();
            write_field(&dir.path().join("f"), &f).unwrap();
            prop_assert_eq!(read_field(&dir.path().join("f")).unwrap(), f);

            let l = LabelMap::new(dims, labels).unwrap();
            write_labels(&dir.path().join("l"), &l).unwrap();
            prop_assert_eq!(read_labels(&dir.path().join("l")).unwrap(), l);
        }
    }
}
