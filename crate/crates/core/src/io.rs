//! On-disk containers.
//!
//! QBS (binary stack), 20-byte header, all little-endian:
//!
//! | offset | size | field                    |
//! |--------|------|--------------------------|
//! | 0      | 4    | magic `QBS1`             |
//! | 4      | 2    | version (1)              |
//! | 6      | 2    | reserved (0)             |
//! | 8      | 4    | t                        |
//! | 12     | 4    | h                        |
//! | 16     | 4    | w                        |
//!
//! followed by `ceil(t*h*w / 8)` payload bytes: the packed bitstream of
//! [`BitVolume`], LSB-first, frames not individually padded.
//!
//! QDS (dense stack) uses the same layout with magic `QDS1` and the reserved
//! field replaced by a dtype code (0 = f32 LE), followed by `t*h*w` f32
//! values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{copy_bits, BitVolume, DenseVolume, Shape3};

pub const QBS_MAGIC: [u8; 4] = *b"QBS1";
pub const QDS_MAGIC: [u8; 4] = *b"QDS1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const DTYPE_F32: u16 = 0;

struct Header {
    magic: [u8; 4],
    version: u16,
    code: u16,
    shape: Shape3,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&self.magic);
        h[4..6].copy_from_slice(&self.version.to_le_bytes());
        h[6..8].copy_from_slice(&self.code.to_le_bytes());
        let dims = [self.shape.t, self.shape.h, self.shape.w];
        for (i, d) in dims.iter().enumerate() {
            h[8 + 4 * i..12 + 4 * i].copy_from_slice(&(*d as u32).to_le_bytes());
        }
        h
    }

    fn decode(bytes: &[u8], expected: [u8; 4]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != expected {
            return Err(Error::BadMagic {
                expected,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let code = u16::from_le_bytes([bytes[6], bytes[7]]);
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape3::new(dim(0), dim(1), dim(2))?;
        Ok(Self {
            magic,
            version,
            code,
            shape,
        })
    }
}

fn check_u32_dims(shape: Shape3) -> Result<()> {
    for d in [shape.t, shape.h, shape.w] {
        if u32::try_from(d).is_err() {
            return Err(Error::InvalidArgument(format!(
                "dimension {d} does not fit the u32 header field"
            )));
        }
    }
    Ok(())
}

pub fn encode_qbs(v: &BitVolume) -> Result<Vec<u8>> {
    check_u32_dims(v.shape())?;
    let header = Header {
        magic: QBS_MAGIC,
        version: FORMAT_VERSION,
        code: 0,
        shape: v.shape(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + v.as_bytes().len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(v.as_bytes());
    Ok(out)
}

pub fn decode_qbs(bytes: &[u8]) -> Result<BitVolume> {
    let header = Header::decode(bytes, QBS_MAGIC)?;
    BitVolume::from_bytes(header.shape, bytes[HEADER_LEN..].to_vec())
}

pub fn encode_qds(v: &DenseVolume) -> Result<Vec<u8>> {
    check_u32_dims(v.shape())?;
    let header = Header {
        magic: QDS_MAGIC,
        version: FORMAT_VERSION,
        code: DTYPE_F32,
        shape: v.shape(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.values().len());
    out.extend_from_slice(&header.encode());
    for x in v.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_qds(bytes: &[u8]) -> Result<DenseVolume> {
    let header = Header::decode(bytes, QDS_MAGIC)?;
    if header.code != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header.code));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = header.shape.len() * 4;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingData(payload.len() - expected));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseVolume::from_vec(header.shape, values)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_qbs(v: &BitVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_qbs(v)?)
}

pub fn read_qbs(path: impl AsRef<Path>) -> Result<BitVolume> {
    decode_qbs(&read_file(path.as_ref())?)
}

pub fn write_qds(v: &DenseVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_qds(v)?)
}

pub fn read_qds(path: impl AsRef<Path>) -> Result<DenseVolume> {
    decode_qds(&read_file(path.as_ref())?)
}

/// Shape stored in a QBS file, reading only the header.
pub fn qbs_shape(path: impl AsRef<Path>) -> Result<Shape3> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    let n = read_up_to(&mut f, &mut buf).map_err(|e| Error::io(path, e))?;
    Ok(Header::decode(&buf[..n], QBS_MAGIC)?.shape)
}

/// Reads frames `[start, end)` of a QBS file without loading the rest.
/// Frame `r` starts at bit `r*h*w` of the payload; the covering bytes are
/// read and re-aligned in memory.
pub fn read_qbs_frames(path: impl AsRef<Path>, start: usize, end: usize) -> Result<BitVolume> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let f = File::open(path).map_err(io_err)?;
    let file_len = f.metadata().map_err(io_err)?.len() as usize;
    let mut f = BufReader::new(f);
    let mut buf = [0u8; HEADER_LEN];
    let n = read_up_to(&mut f, &mut buf).map_err(io_err)?;
    let shape = Header::decode(&buf[..n], QBS_MAGIC)?.shape;
    let payload_len = shape.len().div_ceil(8);
    if file_len - HEADER_LEN < payload_len {
        return Err(Error::Truncated {
            expected: payload_len,
            found: file_len - HEADER_LEN,
        });
    }
    if start >= end || end > shape.t {
        return Err(Error::InvalidArgument(format!(
            "frame range {start}..{end} invalid for {} frames",
            shape.t
        )));
    }
    let out_shape = Shape3::new(end - start, shape.h, shape.w)?;
    let first_bit = start * shape.frame_len();
    let nbits = out_shape.len();
    let first_byte = first_bit / 8;
    let last_byte = (first_bit + nbits).div_ceil(8);
    let mut raw = vec![0u8; last_byte - first_byte];
    f.seek(SeekFrom::Start((HEADER_LEN + first_byte) as u64))
        .map_err(io_err)?;
    f.read_exact(&mut raw).map_err(io_err)?;
    let mut bits = vec![0u8; nbits.div_ceil(8)];
    copy_bits(&raw, first_bit % 8, &mut bits, 0, nbits);
    BitVolume::from_bytes(out_shape, bits)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

// ---------------------------------------------------------------- PGM (P5)

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Pgm(format!("bad number {:?}", String::from_utf8_lossy(tok))))
}

/// Decoded P5 frame: dimensions and pixels scaled to [0, 1] by maxval.
pub struct PgmFrame {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub values: Vec<f32>,
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmFrame> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::Pgm("not a binary (P5) PGM".into()));
    }
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    if width == 0 || height == 0 {
        return Err(Error::Pgm("zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < n * bpp {
        return Err(Error::Truncated {
            expected: n * bpp,
            found: raster.len(),
        });
    }
    let scale = 1.0 / maxval as f32;
    let values = if bpp == 1 {
        raster[..n].iter().map(|&b| f32::from(b) * scale).collect()
    } else {
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) * scale)
            .collect()
    };
    Ok(PgmFrame {
        width,
        height,
        maxval: maxval as u16,
        values,
    })
}

/// Values are clamped to [0, 1] and quantized to `maxval` levels.
pub fn encode_pgm(values: &[f32], width: usize, height: usize, maxval: u16) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", width * height),
            found: format!("{} pixels", values.len()),
        });
    }
    if maxval == 0 {
        return Err(Error::InvalidArgument("maxval must be >= 1".into()));
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    let quant = |v: f32| (v.clamp(0.0, 1.0) * f32::from(maxval)).round() as u16;
    if maxval < 256 {
        out.extend(values.iter().map(|&v| quant(v) as u8));
    } else {
        for &v in values {
            out.extend_from_slice(&quant(v).to_be_bytes());
        }
    }
    Ok(out)
}

/// Stacks P5 frames, in path order, into a volume.
pub fn import_pgm_sequence<P: AsRef<Path>>(paths: &[P]) -> Result<DenseVolume> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no PGM frames given".into()));
    }
    let mut values = Vec::new();
    let mut dims = None;
    for p in paths {
        let frame = decode_pgm(&read_file(p.as_ref())?)?;
        match dims {
            None => dims = Some((frame.height, frame.width)),
            Some(d) if d != (frame.height, frame.width) => {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}", d.0, d.1),
                    found: format!("{}x{}", frame.height, frame.width),
                })
            }
            _ => {}
        }
        values.extend(frame.values);
    }
    let (h, w) = dims.expect("at least one frame");
    DenseVolume::from_vec(Shape3::new(paths.len(), h, w)?, values)
}

pub fn export_pgm_frame(v: &DenseVolume, t: usize, path: impl AsRef<Path>, maxval: u16) -> Result<()> {
    let s = v.shape();
    if t >= s.t {
        return Err(Error::IndexOutOfRange {
            t,
            y: 0,
            x: 0,
            shape: s.to_string(),
        });
    }
    write_file(path.as_ref(), &encode_pgm(v.frame(t), s.w, s.h, maxval)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use rand::Rng;

    fn shape(t: usize, h: usize, w: usize) -> Shape3 {
        Shape3::new(t, h, w).unwrap()
    }

    #[test]
    fn qbs_round_trip_random() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.qbs");
        let mut rng = RandomSource::new(3).rng();
        let v = BitVolume::from_fn(shape(16, 32, 32), |_, _, _| rng.gen::<f64>() < 0.1);
        write_qbs(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 16 * 32 * 32 / 8);
        let back = read_qbs(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_qbs(&back).unwrap(), bytes);
    }

    #[test]
    fn single_voxel_file_size() {
        let v = BitVolume::zeros(shape(1, 1, 1));
        assert_eq!(encode_qbs(&v).unwrap().len(), HEADER_LEN + 1);
    }

    #[test]
    fn qbs_golden_layout() {
        let mut v = BitVolume::zeros(shape(1, 2, 5));
        v.set(0, 0, 0, true).unwrap();
        v.set(0, 1, 4, true).unwrap();
        let bytes = encode_qbs(&v).unwrap();
        #[rustfmt::skip]
        let golden: [u8; 22] = [
            b'Q', b'B', b'S', b'1', 1, 0, 0, 0,
            1, 0, 0, 0, 2, 0, 0, 0, 5, 0, 0, 0,
            0b0000_0001, 0b0000_0010,
        ];
        assert_eq!(bytes, golden);
    }

    #[test]
    fn qbs_error_kinds() {
        let v = BitVolume::ones(shape(1, 1, 3));
        let good = encode_qbs(&v).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_qbs(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_qbs(&good[..HEADER_LEN]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_qbs(&good[..10]), Err(Error::Truncated { .. })));
        let mut pad = good.clone();
        pad[HEADER_LEN] |= 0b1000;
        assert!(matches!(decode_qbs(&pad), Err(Error::NonzeroPadding)));
        let mut ver = good;
        ver[4] = 2;
        assert!(matches!(decode_qbs(&ver), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn qds_round_trip_and_errors() {
        let mut rng = RandomSource::new(4).rng();
        let v = DenseVolume::from_fn(shape(3, 4, 5), |_, _, _| rng.gen::<f32>() * 10.0 - 5.0).unwrap();
        let bytes = encode_qds(&v).unwrap();
        let back = decode_qds(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_qds(&back).unwrap(), bytes);

        let mut dtype = bytes.clone();
        dtype[6] = 1;
        assert!(matches!(decode_qds(&dtype), Err(Error::UnsupportedDtype(1))));

        let mut nan = bytes.clone();
        nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_qds(&nan), Err(Error::NonFinite(0))));

        assert!(matches!(decode_qds(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_qbs(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn qds_golden_layout() {
        let v = DenseVolume::from_vec(shape(1, 1, 2), vec![1.0, -2.5]).unwrap();
        let bytes = encode_qds(&v).unwrap();
        let mut golden = b"QDS1".to_vec();
        golden.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        golden.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
        assert_eq!(bytes, golden);
    }

    #[test]
    fn frame_range_read_matches_crop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.qbs");
        let mut rng = RandomSource::new(5).rng();
        // 3x5 frames: frame boundaries fall mid-byte
        let v = BitVolume::from_fn(shape(11, 3, 5), |_, _, _| rng.gen::<bool>());
        write_qbs(&v, &path).unwrap();
        assert_eq!(qbs_shape(&path).unwrap(), v.shape());
        for (a, b) in [(0, 11), (1, 2), (3, 9), (10, 11)] {
            assert_eq!(read_qbs_frames(&path, a, b).unwrap(), v.frames(a, b).unwrap());
        }
        assert!(read_qbs_frames(&path, 4, 4).is_err());
        assert!(read_qbs_frames(&path, 0, 12).is_err());
    }

    #[test]
    fn pgm_decode_definition() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let f = decode_pgm(&bytes).unwrap();
        assert_eq!((f.width, f.height, f.maxval), (2, 2, 255));
        assert_eq!(f.values, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_sequence_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        let c = dir.path().join("c.pgm");
        let d = dir.path().join("d.pgm");
        std::fs::write(&a, encode_pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2, 255).unwrap()).unwrap();
        std::fs::write(&b, encode_pgm(&[1.0, 1.0, 0.0, 0.0], 2, 2, 1000).unwrap()).unwrap();
        std::fs::write(&c, encode_pgm(&[0.0; 6], 3, 2, 255).unwrap()).unwrap();
        std::fs::write(&d, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        let v = import_pgm_sequence(&[&a, &b]).unwrap();
        assert_eq!(v.shape(), shape(2, 2, 2));
        assert_eq!(v.frame(1), &[1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(import_pgm_sequence(&[&a, &c]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(import_pgm_sequence(&[&d]), Err(Error::Pgm(_))));
    }

    #[test]
    fn pgm_export_import_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RandomSource::new(6).rng();
        let v = DenseVolume::from_fn(shape(2, 7, 9), |_, _, _| rng.gen::<f32>()).unwrap();
        for maxval in [255u16, 4095, 65535] {
            let p = dir.path().join(format!("x{maxval}.pgm"));
            export_pgm_frame(&v, 1, &p, maxval).unwrap();
            let back = import_pgm_sequence(&[&p]).unwrap();
            let bound = 1.0 / (2.0 * f32::from(maxval)) + 1e-6;
            for (a, b) in back.values().iter().zip(v.frame(1)) {
                assert!((a - b).abs() <= bound, "{a} {b} {maxval}");
            }
        }
        assert!(export_pgm_frame(&v, 2, dir.path().join("z.pgm"), 255).is_err());
    }
}
