//! Raw float volumes with a text sidecar, and binary PGM frames.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{format_shortest, parse_error, path_label, read_bytes, read_text, KeyValues};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::image::GrayImage;
use crate::recon::{Compounding, VoxelVolume};

pub const VOLUME_ELEMENT_TYPE: &str = "f32-le";
const VOLUME_FORMAT_VERSION: u32 = 1;

/// A volume read back from disk. Per-voxel weights are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVolume {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: Point3,
    pub compounding: Compounding,
    pub data: Vec<f32>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn volume_meta_string(volume: &VoxelVolume) -> String {
    let [nx, ny, nz] = volume.dims;
    let o = volume.origin;
    let mut s = String::new();
    let _ = writeln!(s, "format_version = {VOLUME_FORMAT_VERSION}");
    let _ = writeln!(s, "dims = {nx} {ny} {nz}");
    let _ = writeln!(s, "spacing_mm = {}", format_shortest(volume.spacing));
    let _ = writeln!(
        s,
        "origin_mm = {} {} {}",
        format_shortest(o.x),
        format_shortest(o.y),
        format_shortest(o.z)
    );
    let _ = writeln!(s, "compounding = {}", volume.compounding);
    let _ = writeln!(s, "element_type = {VOLUME_ELEMENT_TYPE}");
    let _ = writeln!(s, "order = x-fastest");
    s
}

/// Writes `<prefix>.meta` and `<prefix>.raw`; returns both paths.
pub fn save_volume(volume: &VoxelVolume, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let meta = with_suffix(prefix, ".meta");
    let raw = with_suffix(prefix, ".raw");
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&meta, volume_meta_string(volume))?;
    std::fs::write(&raw, payload)?;
    Ok((meta, raw))
}

pub fn load_volume(prefix: &Path) -> Result<StoredVolume> {
    let meta_path = with_suffix(prefix, ".meta");
    let raw_path = with_suffix(prefix, ".raw");
    let label = path_label(&meta_path);
    let mut kv = KeyValues::parse(&read_text(&meta_path)?, &label)?;
    kv.expect_version(VOLUME_FORMAT_VERSION)?;
    let (dline, dtext) = kv.take("dims")?;
    let dims: Vec<usize> = dtext
        .split_whitespace()
        .map(|t| super::parse_uint(&label, dline, "dims", t))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims.contains(&0) {
        return Err(parse_error(
            &label,
            dline,
            "dims: expected three positive integers",
        ));
    }
    let spacing = kv.take_f64("spacing_mm")?;
    if spacing <= 0.0 {
        return Err(parse_error(&label, 0, "spacing_mm must be positive"));
    }
    let (_, o) = kv.take_f64s("origin_mm", 3)?;
    let (cline, ctext) = kv.take("compounding")?;
    let compounding = ctext
        .parse::<Compounding>()
        .map_err(|e| parse_error(&label, cline, e.to_string()))?;
    let (eline, etype) = kv.take("element_type")?;
    if etype != VOLUME_ELEMENT_TYPE {
        return Err(parse_error(
            &label,
            eline,
            format!("unsupported element type {etype:?}"),
        ));
    }
    let (oline, order) = kv.take("order")?;
    if order != "x-fastest" {
        return Err(parse_error(
            &label,
            oline,
            format!("unsupported order {order:?}"),
        ));
    }
    kv.finish()?;

    let bytes = read_bytes(&raw_path)?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != 4 * n {
        return Err(parse_error(
            &path_label(&raw_path),
            0,
            format!("payload is {} bytes, expected {}", bytes.len(), 4 * n),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(StoredVolume {
        dims: [dims[0], dims[1], dims[2]],
        spacing,
        origin: Point3::new(o[0], o[1], o[2]),
        compounding,
        data,
    })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Binary 8-bit PGM. Header comments are allowed; values are not rescaled
/// when maxval is below 255.
pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<GrayImage> {
    let bad = |msg: &str| parse_error(path, 0, format!("PGM: {msg}"));
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image size"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(bad("only 8-bit images are supported"));
    }
    let pixels = &bytes[pos..];
    if pixels.len() != width * height {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            width * height,
            pixels.len()
        )));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?, &path_label(path))
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    if image.pixels.len() != image.width * image.height {
        return Err(Error::InvalidParameter(
            "image pixel count does not match its size".into(),
        ));
    }
    Ok(std::fs::write(path, encode_pgm(image))?)
}
