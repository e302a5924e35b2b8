//! On-disk formats for depth maps and intrinsics.
//!
//! Depth: raw little-endian f32, row-major, with a text sidecar
//! (`key: value` lines) giving width, height, and units. Intrinsics: a
//! text key-value file with fx, fy, cx, cy, width, height.

use super::{CameraIntrinsics, DepthMap, GeometryError};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(':') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, GeometryError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| GeometryError::Parse(format!("missing field '{key}'")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T, GeometryError> {
    s.parse()
        .map_err(|_| GeometryError::Parse(format!("bad value for '{key}': {s}")))
}

/// Sidecar path for a raw depth file: `<file>.meta`.
pub fn depth_meta_path(depth_path: &Path) -> std::path::PathBuf {
    let mut os = depth_path.as_os_str().to_owned();
    os.push(".meta");
    os.into()
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), GeometryError> {
    let mut bytes = Vec::with_capacity(depth.width() * depth.height() * 4);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let z = if depth.is_valid(y, x) {
                depth.values()[[y, x]] as f32
            } else {
                0.0f32 // invalid pixels round-trip through the <=0 rule
            };
            bytes.extend_from_slice(&z.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    let meta = format!(
        "width: {}\nheight: {}\nunits: meters\n",
        depth.width(),
        depth.height()
    );
    fs::write(depth_meta_path(path), meta)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap, GeometryError> {
    let meta_text = fs::read_to_string(depth_meta_path(path))?;
    let meta = parse_kv(&meta_text);
    let width: usize = parse_num(field(&meta, "width")?, "width")?;
    let height: usize = parse_num(field(&meta, "height")?, "height")?;
    let units = field(&meta, "units")?;
    if units != "meters" {
        return Err(GeometryError::Parse(format!(
            "unsupported depth units '{units}'"
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != width * height * 4 {
        return Err(GeometryError::InvalidDepth(format!(
            "depth file {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            width * height * 4
        )));
    }
    let mut values = Array2::<f64>::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let off = (y * width + x) * 4;
            let z = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            values[[y, x]] = z as f64;
        }
    }
    DepthMap::from_values(values)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), GeometryError> {
    let text = format!(
        "fx: {}\nfy: {}\ncx: {}\ncy: {}\nwidth: {}\nheight: {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, GeometryError> {
    let map = parse_kv(&fs::read_to_string(path)?);
    CameraIntrinsics::new(
        parse_num(field(&map, "fx")?, "fx")?,
        parse_num(field(&map, "fy")?, "fy")?,
        parse_num(field(&map, "cx")?, "cx")?,
        parse_num(field(&map, "cy")?, "cy")?,
        parse_num(field(&map, "width")?, "width")?,
        parse_num(field(&map, "height")?, "height")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_roundtrip_preserves_values_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("00000.f32");
        let mut values = Array2::from_elem((3, 4), 2.5);
        values[[1, 2]] = 0.0; // invalid
        let depth = DepthMap::from_values(values).unwrap();
        write_depth(&path, &depth).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back.width(), 4);
        assert_eq!(back.height(), 3);
        assert!(!back.is_valid(1, 2));
        assert_eq!(back.at(0, 0), Some(2.5));
    }

    #[test]
    fn intrinsics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.txt");
        let k = CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
        write_intrinsics(&path, &k).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), k);
    }

    #[test]
    fn corrupt_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        std::fs::write(&path, [0u8; 7]).unwrap();
        std::fs::write(depth_meta_path(&path), "width: 2\nheight: 2\nunits: meters\n").unwrap();
        assert!(read_depth(&path).is_err());
    }
}
