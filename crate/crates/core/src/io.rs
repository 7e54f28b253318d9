//! Binary file formats: tensors, checkpoints, and portable pixmaps.
//!
//! Tensor files ("ANWT"): magic, format version (u32), rank (u32), one u64
//! per shape entry, then the raw little-endian f32 payload in row-major
//! order.
//!
//! Checkpoint files ("ANWC"): magic, format version (u32), manifest byte
//! length (u32) and UTF-8 `key = value` manifest lines, tensor count (u32),
//! then per tensor a u32 name length, the UTF-8 name, and an embedded ANWT
//! blob. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"ANWT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"ANWC";
const FORMAT_VERSION: u32 = 1;

// ── Tensor files ───────────────────────────────────────────────────────────

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_into(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r, path)?;
    expect_eof(&mut r, path)?;
    Ok(t)
}

fn write_tensor_into<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &dim in tensor.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    // One pass through a byte buffer keeps writes large and endian-fixed.
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_tensor_from<R: Read>(r: &mut R, path: &Path) -> Result<Tensor> {
    let fmt = |reason: String| Error::format(path, reason);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(format!("reading magic: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}, expected {TENSOR_MAGIC:?}")));
    }
    let version = read_u32(r, path)?;
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported tensor format version {version}")));
    }
    let rank = read_u32(r, path)? as usize;
    if rank > 8 {
        return Err(fmt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| fmt(format!("reading shape: {e}")))?;
        let dim = u64::from_le_bytes(b);
        if dim > u32::MAX as u64 {
            return Err(fmt(format!("implausible dimension {dim}")));
        }
        shape.push(dim as usize);
        len = len.saturating_mul(dim as usize);
    }
    if len > (1usize << 31) {
        return Err(fmt(format!("tensor too large: {len} elements")));
    }
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes).map_err(|e| fmt(format!("reading {len} f32 values: {e}")))?;
    let data: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(&shape, data)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::format(path, format!("reading u32: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::format(path, "trailing bytes after payload".to_string())),
    }
}

// ── Checkpoints ────────────────────────────────────────────────────────────

/// Named parameter tensors plus a small `key = value` manifest. Order is
/// preserved on both, and parameter order is part of the architecture
/// signature contract.
pub struct Checkpoint {
    pub manifest: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn manifest_get(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut manifest = String::new();
    for (k, v) in &ckpt.manifest {
        assert!(!k.contains('\n') && !v.contains('\n'), "manifest entries must be single-line");
        manifest.push_str(k);
        manifest.push_str(" = ");
        manifest.push_str(v);
        manifest.push('\n');
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor_into(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let fmt = |reason: String| Error::format(path, reason);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(format!("reading magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported checkpoint format version {version}")));
    }
    let manifest_len = read_u32(&mut r, path)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(|e| fmt(format!("reading manifest: {e}")))?;
    let manifest_text = String::from_utf8(manifest_bytes)
        .map_err(|e| fmt(format!("manifest is not UTF-8: {e}")))?;
    let mut manifest = Vec::new();
    for line in manifest_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt(format!("manifest line without '=': {line:?}")))?;
        manifest.push((k.trim().to_string(), v.trim().to_string()));
    }
    let count = read_u32(&mut r, path)? as usize;
    if count > 4096 {
        return Err(fmt(format!("implausible tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(fmt(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| fmt(format!("reading tensor name: {e}")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| fmt(format!("tensor name is not UTF-8: {e}")))?;
        let tensor = read_tensor_from(&mut r, path)?;
        tensors.push((name, tensor));
    }
    expect_eof(&mut r, path)?;
    Ok(Checkpoint { manifest, tensors })
}

// ── Portable pixmaps ───────────────────────────────────────────────────────

/// Writes an (H, W, 3) frame with values in [0, 1] as a binary P6 pixmap,
/// maxval 255. Values are clamped, scaled, and rounded to nearest.
pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!("write_ppm expects (H, W, 3), got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a binary P6 pixmap back into an (H, W, 3) tensor with values v/255.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let fmt = |reason: String| Error::format(path, reason);
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    // Header: "P6", whitespace-separated width, height, maxval, then a single
    // whitespace byte before the payload.
    if !bytes.starts_with(b"P6") {
        return Err(fmt("not a P6 pixmap".to_string()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt("malformed pixmap header".to_string()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = text.parse().map_err(|e| fmt(format!("bad header field: {e}")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fmt(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(fmt(format!("payload truncated: need {need} bytes")));
    }
    let data: Vec<f32> = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::{sample_standard_normal, RngState};

    #[test]
    fn tensor_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.anwt");
        let mut rng = RngState::seed(5);
        let t = sample_standard_normal(&[3, 4, 2], &mut rng);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tensor_roundtrip_zero_sized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.anwt");
        let t = Tensor::zeros(&[0, 7]);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), &[0, 7]);
        assert!(back.data().is_empty());
    }

    #[test]
    fn tensor_read_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.anwt");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert!(read_tensor(&bad).is_err());

        let path = dir.path().join("trunc.anwt");
        write_tensor(&path, &Tensor::filled(&[4, 4], 1.0)).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        assert!(read_tensor(&path).is_err());

        let trailing = dir.path().join("trail.anwt");
        let mut with_extra = full.clone();
        with_extra.push(0);
        std::fs::write(&trailing, &with_extra).unwrap();
        assert!(read_tensor(&trailing).is_err());
    }

    #[test]
    fn tensor_header_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.anwt");
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"ANWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2); // rank
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_order_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.anwc");
        let ckpt = Checkpoint {
            manifest: vec![
                ("signature".to_string(), "demo/1".to_string()),
                ("step".to_string(), "42".to_string()),
            ],
            tensors: vec![
                ("b.weight".to_string(), Tensor::filled(&[2, 3], 0.5)),
                ("a.bias".to_string(), Tensor::filled(&[3], -1.0)),
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.manifest_get("signature"), Some("demo/1"));
        assert_eq!(back.manifest_get("step"), Some("42"));
        assert_eq!(back.manifest_get("missing"), None);
        // Insertion order survives, names first.
        assert_eq!(back.tensors[0].0, "b.weight");
        assert_eq!(back.tensors[1].0, "a.bias");
        assert_eq!(back.tensors[0].1.data(), ckpt.tensors[0].1.data());
        assert_eq!(back.tensor("a.bias").unwrap().shape(), &[3]);
    }

    #[test]
    fn checkpoint_rejects_tensor_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.anwc");
        write_tensor(&path, &Tensor::zeros(&[1])).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn ppm_header_and_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        // 1x2 frame: black pixel, then a pixel that exercises clamping and
        // round-to-nearest.
        let frame =
            Tensor::from_vec(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.5, 0.5, -0.25]).unwrap();
        write_ppm(&path, &frame).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..], b"P6\n2 1\n255\n\x00\x00\x00\xff\x80\x00");
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ppm");
        let mut rng = RngState::seed(9);
        let frame = Tensor::from_vec(
            &[5, 7, 3],
            (0..5 * 7 * 3).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        write_ppm(&path, &frame).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), frame.shape());
        let err = back.max_abs_diff(&frame).unwrap();
        assert!(err <= 0.5 / 255.0 + 1e-6, "quantization error {err}");
    }

    #[test]
    fn ppm_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_ppm(&dir.path().join("x.ppm"), &Tensor::zeros(&[4, 4])).is_err());
    }
}
