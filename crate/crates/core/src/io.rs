//! Readers and writers for PLY (ASCII / binary little-endian), KITTI
//! velodyne `.bin` and plain `x,y,z` CSV.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::cloud::{Point3, PointCloud};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: usize, reason: String },
    #[error("truncated record at byte {offset}")]
    TruncatedRecord { offset: usize },
    #[error("no points (data starts at byte {offset})")]
    NoPoints { offset: usize },
    #[error("unknown point cloud format '{0}'")]
    UnknownFormat(String),
    #[error(transparent)]
    Os(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    PlyAscii,
    PlyBinaryLe,
    KittiBin,
    CsvXyz,
}

impl Format {
    /// Guess from the file extension; `.ply` defaults to binary.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(Format::PlyBinaryLe),
            "bin" => Some(Format::KittiBin),
            "csv" | "xyz" | "txt" => Some(Format::CsvXyz),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = IoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ply_ascii" => Ok(Format::PlyAscii),
            "ply_binary_le" | "ply" => Ok(Format::PlyBinaryLe),
            "kitti_bin" | "kitti" => Ok(Format::KittiBin),
            "csv_xyz" | "csv" => Ok(Format::CsvXyz),
            other => Err(IoError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::PlyAscii => "ply_ascii",
            Format::PlyBinaryLe => "ply_binary_le",
            Format::KittiBin => "kitti_bin",
            Format::CsvXyz => "csv_xyz",
        })
    }
}

pub fn load_pointcloud(path: &Path, format: Format) -> Result<PointCloud, IoError> {
    let bytes = std::fs::read(path)?;
    let mut pc = parse_pointcloud(&bytes, format)?;
    pc.source_id = path.display().to_string();
    Ok(pc)
}

pub fn write_pointcloud(path: &Path, pc: &PointCloud, format: Format) -> Result<(), IoError> {
    std::fs::write(path, encode_pointcloud(pc, format))?;
    Ok(())
}

pub fn parse_pointcloud(bytes: &[u8], format: Format) -> Result<PointCloud, IoError> {
    let (coords, data_start) = match format {
        Format::PlyAscii | Format::PlyBinaryLe => parse_ply(bytes, format)?,
        Format::KittiBin => (parse_kitti(bytes)?, 0),
        Format::CsvXyz => (parse_csv(bytes)?, 0),
    };
    if coords.is_empty() {
        return Err(IoError::NoPoints { offset: data_start });
    }
    PointCloud::new(coords, "memory").map_err(|e| IoError::MalformedRecord {
        offset: data_start,
        reason: e.to_string(),
    })
}

pub fn encode_pointcloud(pc: &PointCloud, format: Format) -> Vec<u8> {
    match format {
        Format::PlyAscii => {
            let mut s = ply_header("ascii", pc.len());
            for p in pc.coords() {
                s.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
            }
            s.into_bytes()
        }
        Format::PlyBinaryLe => {
            let mut out = ply_header("binary_little_endian", pc.len()).into_bytes();
            out.reserve(12 * pc.len());
            for p in pc.coords() {
                for c in p {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            out
        }
        Format::KittiBin => {
            let mut out = Vec::with_capacity(16 * pc.len());
            for p in pc.coords() {
                for c in p {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
                out.extend_from_slice(&0f32.to_le_bytes());
            }
            out
        }
        Format::CsvXyz => {
            let mut s = String::new();
            for p in pc.coords() {
                s.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
            }
            s.into_bytes()
        }
    }
}

fn ply_header(format: &str, n: usize) -> String {
    format!(
        "ply\nformat {format} 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    )
}

fn parse_kitti(bytes: &[u8]) -> Result<Vec<Point3>, IoError> {
    const RECORD: usize = 16;
    if bytes.len() % RECORD != 0 {
        return Err(IoError::TruncatedRecord {
            offset: bytes.len() / RECORD * RECORD,
        });
    }
    Ok(bytes
        .chunks_exact(RECORD)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect())
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<Point3>, IoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IoError::MalformedRecord {
        offset: e.valid_up_to(),
        reason: "not valid UTF-8".into(),
    })?;
    let mut coords = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(IoError::MalformedRecord {
                offset: start,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            p[a] = parse_finite(f).ok_or_else(|| IoError::MalformedRecord {
                offset: start,
                reason: format!("bad number '{f}'"),
            })?;
        }
        coords.push(p);
    }
    Ok(coords)
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    /// (name, type); `None` marks a list property.
    properties: Vec<(String, Option<Scalar>)>,
}

fn header_err(offset: usize, reason: impl Into<String>) -> IoError {
    IoError::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

fn parse_ply(bytes: &[u8], format: Format) -> Result<(Vec<Point3>, usize), IoError> {
    let mut offset = 0;
    let next_line = |offset: &mut usize| -> Result<(usize, String), IoError> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(start, "unterminated header line"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| header_err(start, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (start, magic) = next_line(&mut offset)?;
    if magic.trim() != "ply" {
        return Err(header_err(start, "missing 'ply' magic"));
    }
    let mut file_format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (start, line) = next_line(&mut offset)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first().copied() {
            Some("format") => {
                let f = match tokens.get(1).copied() {
                    Some("ascii") => Format::PlyAscii,
                    Some("binary_little_endian") => Format::PlyBinaryLe,
                    Some(other) => {
                        return Err(header_err(start, format!("unsupported format '{other}'")))
                    }
                    None => return Err(header_err(start, "format line without a value")),
                };
                file_format = Some(f);
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(header_err(start, "element line needs a name and count"));
                }
                let count = tokens[2]
                    .parse()
                    .map_err(|_| header_err(start, "element count is not an integer"))?;
                elements.push(Element {
                    name: tokens[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(start, "property before any element"))?;
                match tokens.as_slice() {
                    ["property", "list", _, _, name] => {
                        element.properties.push((name.to_string(), None))
                    }
                    ["property", ty, name] => {
                        let scalar = Scalar::parse(ty).ok_or_else(|| {
                            header_err(start, format!("unknown property type '{ty}'"))
                        })?;
                        element.properties.push((name.to_string(), Some(scalar)));
                    }
                    _ => return Err(header_err(start, "malformed property line")),
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(header_err(start, format!("unexpected keyword '{other}'")))
            }
            None => return Err(header_err(start, "empty header line")),
        }
    }
    let data_start = offset;
    let file_format = file_format.ok_or_else(|| header_err(0, "missing format line"))?;
    if file_format != format {
        return Err(header_err(
            0,
            format!("file is {file_format}, caller asked for {format}"),
        ));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err(0, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    let mut axis_cols = [usize::MAX; 3];
    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
        axis_cols[a] = vertex
            .properties
            .iter()
            .position(|(n, _)| n == axis)
            .ok_or_else(|| header_err(0, format!("vertex element lacks property '{axis}'")))?;
    }
    if vertex.count == 0 {
        return Err(IoError::NoPoints { offset: data_start });
    }

    match format {
        Format::PlyAscii => {
            let text = &bytes[data_start..];
            let mut lines = LineCursor::new(text, data_start);
            for e in &elements[..vertex_pos] {
                for _ in 0..e.count {
                    lines
                        .next()
                        .ok_or(IoError::TruncatedRecord { offset: lines.pos })?;
                }
            }
            let mut coords = Vec::with_capacity(vertex.count);
            for _ in 0..vertex.count {
                let record_start = lines.pos;
                let line = lines
                    .next()
                    .ok_or(IoError::TruncatedRecord {
                        offset: record_start,
                    })?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < vertex.properties.len() {
                    return Err(IoError::TruncatedRecord {
                        offset: record_start,
                    });
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = parse_finite(fields[axis_cols[a]]).ok_or_else(|| {
                        IoError::MalformedRecord {
                            offset: record_start,
                            reason: format!("bad number '{}'", fields[axis_cols[a]]),
                        }
                    })?;
                }
                coords.push(p);
            }
            Ok((coords, data_start))
        }
        _ => {
            let mut pos = data_start;
            for e in &elements[..vertex_pos] {
                let size = fixed_size(e).ok_or_else(|| {
                    header_err(0, format!("cannot skip list-valued element '{}'", e.name))
                })?;
                pos += size * e.count;
            }
            let record = fixed_size(vertex)
                .ok_or_else(|| header_err(0, "vertex element has list properties"))?;
            let mut col_offsets = Vec::with_capacity(vertex.properties.len());
            let mut acc = 0;
            for (_, ty) in &vertex.properties {
                col_offsets.push(acc);
                acc += ty.unwrap().size();
            }
            let mut coords = Vec::with_capacity(vertex.count);
            for _ in 0..vertex.count {
                if pos + record > bytes.len() {
                    return Err(IoError::TruncatedRecord { offset: pos });
                }
                let r = &bytes[pos..pos + record];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let col = axis_cols[a];
                    let ty = vertex.properties[col].1.unwrap();
                    p[a] = ty.read_le(&r[col_offsets[col]..]);
                    if !p[a].is_finite() {
                        return Err(IoError::MalformedRecord {
                            offset: pos,
                            reason: "non-finite coordinate".into(),
                        });
                    }
                }
                coords.push(p);
                pos += record;
            }
            Ok((coords, data_start))
        }
    }
}

fn fixed_size(e: &Element) -> Option<usize> {
    e.properties
        .iter()
        .map(|(_, ty)| ty.map(Scalar::size))
        .sum()
}

struct LineCursor<'a> {
    text: &'a [u8],
    base: usize,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a [u8], base: usize) -> Self {
        Self {
            text,
            base,
            pos: base,
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        loop {
            let rel = self.pos - self.base;
            if rel >= self.text.len() {
                return None;
            }
            let rest = &self.text[rel..];
            let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
            self.pos += (end + 1).min(rest.len());
            let line = std::str::from_utf8(&rest[..end]).ok()?.trim();
            if !line.is_empty() {
                return Some(line);
            }
        }
    }
}
