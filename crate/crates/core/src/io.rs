//! Point cloud file formats and atomic file output.
//!
//! Scans are PLY (binary little-endian or ASCII) with `x y z intensity` and an
//! optional per-point `time` in seconds, or plain text with one
//! `x y z intensity` row per line. Maps and registered frames are written as
//! binary PLY with float32 positions and uint8 colors.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::Point;
use crate::color::Rgb;
use crate::error::{Error, Result};
use crate::map::MapPoint;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex table of a PLY file, one column per property.
#[derive(Debug, Clone, Default)]
pub struct PlyTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn read_ply(path: &Path) -> Result<PlyTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes).map_err(|reason| Error::malformed("ply", path, reason))
}

fn parse_ply(bytes: &[u8]) -> std::result::Result<PlyTable, String> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<&[u8]>| -> std::result::Result<String, String> {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => Err("unexpected end of header".to_string()),
            Ok(_) => Ok(line.trim().to_string()),
            Err(e) => Err(e.to_string()),
        }
    };
    if next_line(&mut reader)? != "ply" {
        return Err("missing 'ply' magic".into());
    }
    let mut binary = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut reader)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", "ascii", _] => binary = Some(false),
            ["format", other, _] => return Err(format!("unsupported format {other}")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err("duplicate vertex element".into());
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|e| format!("vertex count: {e}"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err("list properties on vertices are not supported".into())
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(format!("bad header line '{l}'")),
        }
    }
    let binary = binary.ok_or("missing format line")?;
    let count = count.ok_or("missing vertex element")?;
    let names: Vec<String> = props.iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::with_capacity(count.min(1 << 24));
    if binary {
        let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| e.to_string())?;
        if body.len() < stride * count {
            return Err(format!(
                "body holds {} bytes, expected {}",
                body.len(),
                stride * count
            ));
        }
        for rec in body.chunks_exact(stride.max(1)).take(count) {
            let mut off = 0;
            let mut row = Vec::with_capacity(props.len());
            for (_, s) in &props {
                row.push(s.read_le(&rec[off..off + s.size()]));
                off += s.size();
            }
            rows.push(row);
        }
    } else {
        let mut body = String::new();
        reader
            .read_to_string(&mut body)
            .map_err(|e| e.to_string())?;
        for (i, l) in body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .take(count)
            .enumerate()
        {
            let row: std::result::Result<Vec<f64>, _> =
                l.split_whitespace().map(str::parse::<f64>).collect();
            let row = row.map_err(|e| format!("vertex {i}: {e}"))?;
            if row.len() < props.len() {
                return Err(format!(
                    "vertex {i}: {} values, expected {}",
                    row.len(),
                    props.len()
                ));
            }
            rows.push(row[..props.len()].to_vec());
        }
        if rows.len() < count {
            return Err(format!("{} vertices, expected {count}", rows.len()));
        }
    }
    Ok(PlyTable { names, rows })
}

/// Reads a LiDAR scan. Files starting with `ply` are parsed as PLY, anything
/// else as whitespace-separated `x y z intensity` text. Points get
/// `timestamp_ns` unless the file carries a per-point `time` in seconds.
pub fn read_scan(path: &Path, timestamp_ns: i64) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = if bytes.starts_with(b"ply") {
        let t = parse_ply(&bytes).map_err(|r| Error::malformed("scan", path, r))?;
        let col = |n: &str| {
            t.column(n)
                .ok_or_else(|| Error::malformed("scan", path, format!("missing property '{n}'")))
        };
        let (x, y, z, i) = (col("x")?, col("y")?, col("z")?, col("intensity")?);
        let time = t.column("time");
        t.rows
            .iter()
            .map(|r| {
                let mut p = Point::new(Vector3::new(r[x], r[y], r[z]), r[i]);
                p.timestamp_ns = time.map_or(timestamp_ns, |c| (r[c] * 1e9).round() as i64);
                p
            })
            .collect::<Vec<_>>()
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::malformed("scan", path, "not PLY and not UTF-8 text"))?;
        let mut pts = Vec::new();
        for (ln, l) in text.lines().enumerate() {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let v: std::result::Result<Vec<f64>, _> =
                l.split_whitespace().map(str::parse::<f64>).collect();
            match v {
                Ok(v) if v.len() >= 4 => {
                    let mut p = Point::new(Vector3::new(v[0], v[1], v[2]), v[3]);
                    p.timestamp_ns = timestamp_ns;
                    pts.push(p);
                }
                _ => {
                    return Err(Error::malformed(
                        "scan",
                        path,
                        format!("line {}: expected 'x y z intensity'", ln + 1),
                    ))
                }
            }
        }
        pts
    };
    if let Some(bad) = points
        .iter()
        .position(|p| !p.position.iter().all(|c| c.is_finite()))
    {
        return Err(Error::malformed(
            "scan",
            path,
            format!("non-finite coordinate at point {bad}"),
        ));
    }
    Ok(points)
}

/// Encodes a scan as binary PLY (`x y z intensity` float32, `time` float64 seconds).
pub fn encode_scan_ply(points: &[Point]) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nproperty double time\nend_header\n",
        points.len()
    )
    .into_bytes();
    for p in points {
        for c in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&(p.timestamp_ns as f64 * 1e-9).to_le_bytes());
    }
    out
}

pub fn write_scan_ply(path: &Path, points: &[Point]) -> Result<()> {
    write_atomic(path, &encode_scan_ply(points))
}

/// Encodes colored points as binary PLY (`x y z` float32, `red green blue` uint8).
/// Uncolored points are written black.
pub fn encode_colored_ply(points: &[MapPoint]) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .into_bytes();
    for p in points {
        for c in p.position.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color.unwrap_or_default().to_array());
    }
    out
}

pub fn write_colored_ply(path: &Path, points: &[MapPoint]) -> Result<()> {
    write_atomic(path, &encode_colored_ply(points))
}

/// Reads positions (and colors when present) from any PLY vertex table.
pub fn read_colored_ply(path: &Path) -> Result<Vec<MapPoint>> {
    let t = read_ply(path)?;
    let col = |n: &str| {
        t.column(n)
            .ok_or_else(|| Error::malformed("ply", path, format!("missing property '{n}'")))
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let rgb = match (t.column("red"), t.column("green"), t.column("blue")) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    Ok(t.rows
        .iter()
        .map(|r| {
            let color = rgb.map(|(cr, cg, cb)| Rgb::new(r[cr] as u8, r[cg] as u8, r[cb] as u8));
            MapPoint::new(Vector3::new(r[x], r[y], r[z]), color)
        })
        .collect())
}
