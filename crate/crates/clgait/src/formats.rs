//! On-disk encodings: CLGW tensor archives, ASCII PLY point clouds and binary PGM
//! images. Encoders and decoders work on byte buffers; the `read_*`/`write_*`
//! wrappers add file IO and attach paths to errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clgait_core::geometry::{DepthImage, PointCloud, SilhouetteFrame};
use clgait_core::Tensor;

use crate::error::{io_err, DecodeError, Result};

const CLGW_MAGIC: &[u8; 4] = b"CLGW";
const CLGW_VERSION: u32 = 1;

/// Named f32 tensors in file order.
pub type TensorList = Vec<(String, Tensor<f32>)>;

/// Little-endian layout: magic, u32 version, u32 count, then per tensor a u32 name
/// length, the UTF-8 name, u32 rank, u64 dims and the f32 data.
pub fn encode_clgw<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CLGW_MAGIC);
    out.extend_from_slice(&CLGW_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DecodeError(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_clgw(buf: &[u8]) -> std::result::Result<TensorList, DecodeError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CLGW_MAGIC {
        return Err(DecodeError("not a CLGW file".into()));
    }
    let version = r.u32()?;
    if version != CLGW_VERSION {
        return Err(DecodeError(format!("unsupported CLGW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| DecodeError("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(DecodeError(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| DecodeError(format!("tensor {name} is too large")))?;
        let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| DecodeError(e.to_string()))?;
        out.push((name.to_string(), t));
    }
    if r.pos != buf.len() {
        return Err(DecodeError(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn read_clgw(path: &Path) -> Result<TensorList> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_clgw(&buf).map_err(|e| e.at(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut s = String::with_capacity(64 + cloud.len() * 30);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    s.into_bytes()
}

/// Reads ASCII PLY files whose vertex element starts with float `x y z`. Further
/// vertex properties are ignored.
pub fn decode_ply(buf: &[u8]) -> std::result::Result<PointCloud, DecodeError> {
    let text = std::str::from_utf8(buf).map_err(|_| DecodeError("PLY is not UTF-8 text".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(DecodeError("missing ply magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or_else(|| DecodeError("missing end_header".into()))?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(DecodeError(format!("unsupported PLY format {other}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| DecodeError(format!("bad vertex count {n:?}")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(DecodeError(format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| DecodeError("no vertex element".into()))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(DecodeError("vertex properties must start with x y z".into()));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines.next().ok_or_else(|| DecodeError(format!("expected {count} vertices, found {i}")))?;
        let mut it = line.split_whitespace();
        let mut p = [0.0; 3];
        for c in &mut p {
            let w = it.next().ok_or_else(|| DecodeError(format!("vertex {i} has fewer than 3 values")))?;
            *c = w.parse::<f32>().map_err(|_| DecodeError(format!("vertex {i}: bad number {w:?}")))? as f64;
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

/// A decoded binary PGM. 8-bit samples are widened to u16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn encode_pgm(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval < 256 {
        out.extend(img.samples.iter().map(|&s| s as u8));
    } else {
        // 16-bit PGM samples are big-endian
        for s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn decode_pgm(buf: &[u8]) -> std::result::Result<Pgm, DecodeError> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, DecodeError> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DecodeError("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(DecodeError("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> std::result::Result<usize, DecodeError> {
        let t = token()?;
        t.parse().map_err(|_| DecodeError(format!("bad PGM {what} {t:?}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(DecodeError(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &buf[(pos + 1).min(buf.len())..];
    let n = width * height;
    let samples: Vec<u16> = if maxval < 256 {
        if data.len() != n {
            return Err(DecodeError(format!("expected {n} bytes of 8-bit raster, found {}", data.len())));
        }
        data.iter().map(|&b| b as u16).collect()
    } else {
        if data.len() != 2 * n {
            return Err(DecodeError(format!("expected {} bytes of 16-bit raster, found {}", 2 * n, data.len())));
        }
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(DecodeError(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pgm { width, height, maxval: maxval as u16, samples })
}

pub fn silhouette_to_pgm(sil: &SilhouetteFrame) -> Pgm {
    let samples = sil.mask.iter().map(|&m| (m.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
    Pgm { width: sil.width, height: sil.height, maxval: 255, samples }
}

pub fn pgm_to_silhouette(img: &Pgm) -> SilhouetteFrame {
    let scale = img.maxval as f32;
    let mask = img.samples.iter().map(|&s| s as f32 / scale).collect();
    SilhouetteFrame { width: img.width, height: img.height, mask }
}

/// Depth in meters to 16-bit millimeters, clamped to the representable range.
pub fn depth_to_pgm(depth: &DepthImage) -> Pgm {
    let samples = depth.depth.iter().map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
    Pgm { width: depth.width, height: depth.height, maxval: 65535, samples }
}

pub fn pgm_to_depth(img: &Pgm) -> DepthImage {
    let depth = img.samples.iter().map(|&s| s as f64 / 1000.0).collect();
    DepthImage { width: img.width, height: img.height, depth }
}

/// Rounds depths to whole millimeters, the precision of the 16-bit encoding.
pub fn quantize_depth(depth: &DepthImage) -> DepthImage {
    pgm_to_depth(&depth_to_pgm(depth))
}

/// Rounds coordinates to f32, the precision of the PLY encoding.
pub fn quantize_cloud(cloud: &PointCloud) -> PointCloud {
    PointCloud { points: cloud.points.iter().map(|p| p.map(|c| c as f32 as f64)).collect() }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_ply(&buf).map_err(|e| e.at(path))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&buf).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clgw_round_trip_and_layout() {
        let a = Tensor::new(&[2, 1], vec![1.5f32, -0.25]).unwrap();
        let b = Tensor::scalar(7.0f32);
        let bytes = encode_clgw([("a", &a), ("bias", &b)]);
        assert_eq!(&bytes[..4], b"CLGW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let back = decode_clgw(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("bias".to_string(), b)]);
        assert!(decode_clgw(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_clgw(&bad).is_err());
    }

    #[test]
    fn ply_round_trip_is_exact_for_f32_points() {
        let cloud = quantize_cloud(&PointCloud { points: vec![[0.1, -2.5, 3.3333333], [1e-7, 4.0, 5.5]] });
        assert_eq!(decode_ply(&encode_ply(&cloud)).unwrap(), cloud);
        assert_eq!(decode_ply(&encode_ply(&PointCloud::default())).unwrap().len(), 0);
    }

    #[test]
    fn ply_with_extra_properties_and_comments() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n";
        assert_eq!(decode_ply(text.as_bytes()).unwrap().points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn pgm_round_trips() {
        let img8 = Pgm { width: 3, height: 2, maxval: 255, samples: vec![0, 255, 10, 20, 30, 40] };
        assert_eq!(decode_pgm(&encode_pgm(&img8)).unwrap(), img8);
        let img16 = Pgm { width: 2, height: 1, maxval: 65535, samples: vec![1234, 65535] };
        let bytes = encode_pgm(&img16);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x04, 0xd2, 0xff, 0xff]);
        assert_eq!(decode_pgm(&bytes).unwrap(), img16);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn depth_quantization_is_idempotent() {
        let d = DepthImage::new(2, 1, vec![4.12345, 0.0]).unwrap();
        let q = quantize_depth(&d);
        assert_eq!(q.depth, vec![4.123, 0.0]);
        assert_eq!(quantize_depth(&q), q);
    }
}
