//! ASCII PLY (`x y z [nx ny nz]`) and a flat little-endian binary format.
//!
//! Binary layout: magic `TCPC`, `u64` point count, `u32` flags (bit 0 =
//! normals present), then per point `x y z [nx ny nz]` as `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{CoreError, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"TCPC";
const FLAG_NORMALS: u32 = 1;

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property double {p}")?;
    }
    if cloud.normals().is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(out, "property double {p}")?;
        }
    }
    writeln!(out, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        write!(out, "{:e} {:e} {:e}", p[0], p[1], p[2])?;
        if let Some(n) = cloud.normals() {
            write!(out, " {:e} {:e} {:e}", n[i][0], n[i][1], n[i][2])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| CoreError::Parse("unexpected end of PLY file".into()))?
            .map_err(CoreError::from)
    };
    if next()?.trim() != "ply" {
        return Err(CoreError::Parse("missing `ply` magic line".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(CoreError::Parse(format!("unsupported PLY format `{fmt}`")));
            }
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|e| CoreError::Parse(format!("vertex count: {e}")))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| CoreError::Parse("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let xyz = [col("x"), col("y"), col("z")];
    let nxyz = [col("nx"), col("ny"), col("nz")];
    let [Some(x), Some(y), Some(z)] = xyz else {
        return Err(CoreError::Parse("vertex element lacks x/y/z".into()));
    };
    let has_normals = nxyz.iter().all(Option::is_some);
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(if has_normals { count } else { 0 });
    for _ in 0..count {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| CoreError::Parse(format!("`{t}`: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() < props.len() {
            return Err(CoreError::Parse(format!("short vertex line `{line}`")));
        }
        points.push([vals[x], vals[y], vals[z]]);
        if has_normals {
            let n: Point = [
                vals[nxyz[0].unwrap()],
                vals[nxyz[1].unwrap()],
                vals[nxyz[2].unwrap()],
            ];
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            normals.push([n[0] / l, n[1] / l, n[2] / l]);
        }
    }
    let cloud = PointCloud::new(points)?;
    if has_normals {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

pub fn write_binary(path: &Path, cloud: &PointCloud) -> Result<()> {
    let per = if cloud.normals().is_some() { 6 } else { 3 };
    let mut buf = Vec::with_capacity(16 + cloud.len() * per * 8);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    let flags = if cloud.normals().is_some() { FLAG_NORMALS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for (i, p) in cloud.points().iter().enumerate() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(n) = cloud.normals() {
            for v in n[i] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(CoreError::Parse("not a binary cloud file".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let flags = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let has_normals = flags & FLAG_NORMALS != 0;
    let per = if has_normals { 6 } else { 3 };
    let body = &bytes[16..];
    if body.len() != n * per * 8 {
        return Err(CoreError::Parse(format!(
            "expected {} body bytes, found {}",
            n * per * 8,
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let points = vals.chunks_exact(per).map(|c| [c[0], c[1], c[2]]).collect();
    let cloud = PointCloud::new(points)?;
    if has_normals {
        cloud.with_normals(vals.chunks_exact(per).map(|c| [c[3], c[4], c[5]]).collect())
    } else {
        Ok(cloud)
    }
}

/// Dispatches on extension: `.ply` is ASCII PLY, anything else binary.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        read_ply(path)
    } else {
        read_binary(path)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        write_ply(path, cloud)
    } else {
        write_binary(path, cloud)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, ShapeKind};
    use tokcomm_tensor::RandomSource;

    #[test]
    fn ply_round_trip_keeps_values_and_normals() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = synth_shape(ShapeKind::Torus, 32, &mut RandomSource::new(1)).unwrap();
        let path = dir.path().join("a.ply");
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points(), cloud.points());
        for (a, b) in back.normals().unwrap().iter().zip(cloud.normals().unwrap()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = synth_shape(ShapeKind::Sphere, 40, &mut RandomSource::new(1)).unwrap();
        let path = dir.path().join("a.bin");
        write_binary(&path, &cloud).unwrap();
        assert_eq!(read_binary(&path).unwrap(), cloud);
        let bare = cloud.without_normals();
        write_binary(&path, &bare).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 40 * 24);
        assert_eq!(read_binary(&path).unwrap(), bare);
    }

    #[test]
    fn ply_without_header_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(&path, "hello\n").unwrap();
        assert!(matches!(read_ply(&path), Err(CoreError::Parse(_))));
    }
}
