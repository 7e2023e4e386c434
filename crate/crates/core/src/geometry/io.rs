//! PLY / OBJ point-cloud files and LSCT occupancy grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GeometryError, OccupancyGrid, PointCloud};
use crate::diffcore::{lsct, Array};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lsct(#[from] lsct::LsctError),
    #[error("unsupported file extension for {0}")]
    UnknownFormat(String),
}

fn parse_err(offset: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        offset,
        message: message.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    let mut pos = 0usize;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let line_start = pos;
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(pos, "header not terminated by end_header"));
        };
        let raw = &bytes[pos..pos + nl];
        pos += nl + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(line_start, "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        if first {
            if line != "ply" {
                return Err(parse_err(line_start, "missing 'ply' magic"));
            }
            first = false;
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                encoding = Some(match tok.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    other => return Err(parse_err(line_start, format!("unsupported format {other:?}"))),
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(line_start, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(line_start, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_start, "property before any element"))?;
                let t = tok.next().ok_or_else(|| parse_err(line_start, "property without type"))?;
                let prop = if t == "list" {
                    let count = tok.next().and_then(Scalar::parse);
                    let item = tok.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(count), Some(item)) if count.is_integer() => Property::List { count, item },
                        _ => return Err(parse_err(line_start, "malformed list property")),
                    }
                } else {
                    let ty = Scalar::parse(t).ok_or_else(|| parse_err(line_start, format!("unknown type {t}")))?;
                    let name = tok.next().ok_or_else(|| parse_err(line_start, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                elem.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(line_start, format!("unexpected header keyword {other}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(0, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        body_start: pos,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    label: Option<usize>,
}

fn vertex_layout(elem: &Element) -> Result<VertexLayout, IoError> {
    let find = |names: &[&str]| {
        elem.props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if names.contains(&name.as_str())))
    };
    let axis = |n: &str| find(&[n]).ok_or_else(|| parse_err(0, format!("vertex element lacks property {n}")));
    let xyz = [axis("x")?, axis("y")?, axis("z")?];
    let label = find(&["part", "label"]);
    if let Some(i) = label {
        if let Property::Scalar { ty, .. } = elem.props[i] {
            if !ty.is_integer() {
                return Err(parse_err(0, "part label property must be an integer type"));
            }
        }
    }
    Ok(VertexLayout { xyz, label })
}

fn collect_cloud(rows: Vec<Vec<f64>>, layout: &VertexLayout) -> Result<PointCloud, IoError> {
    let points = rows.iter().map(|r| layout.xyz.map(|i| r[i])).collect();
    match layout.label {
        Some(li) => {
            let labels = rows.iter().map(|r| r[li] as u32).collect();
            Ok(PointCloud::with_labels(points, labels)?)
        }
        None => Ok(PointCloud::new(points)?),
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(0, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_idx])?;
    let mut vertices = None;
    match header.encoding {
        PlyEncoding::Ascii => {
            let mut pos = header.body_start;
            for (ei, elem) in header.elements.iter().enumerate() {
                let mut rows = Vec::with_capacity(if ei == vertex_idx { elem.count } else { 0 });
                for _ in 0..elem.count {
                    let (line, start) = next_line(bytes, &mut pos)
                        .ok_or_else(|| parse_err(pos, format!("expected {} {} rows", elem.count, elem.name)))?;
                    let row = parse_ascii_row(line, elem, start)?;
                    if ei == vertex_idx {
                        rows.push(row);
                    }
                }
                if ei == vertex_idx {
                    vertices = Some(rows);
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut pos = header.body_start;
            for (ei, elem) in header.elements.iter().enumerate() {
                let mut rows = Vec::with_capacity(if ei == vertex_idx { elem.count } else { 0 });
                for _ in 0..elem.count {
                    let row = parse_binary_row(bytes, &mut pos, elem)?;
                    if ei == vertex_idx {
                        rows.push(row);
                    }
                }
                if ei == vertex_idx {
                    vertices = Some(rows);
                }
            }
        }
    }
    let rows = vertices.unwrap_or_default();
    if rows.is_empty() {
        return Err(parse_err(header.body_start, "vertex element is empty"));
    }
    collect_cloud(rows, &layout)
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<(&'a str, usize)> {
    loop {
        if *pos >= bytes.len() {
            return None;
        }
        let start = *pos;
        let end = bytes[start..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |n| start + n);
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end]).ok()?.trim();
        if !line.is_empty() {
            return Some((line, start));
        }
    }
}

fn parse_ascii_row(line: &str, elem: &Element, offset: usize) -> Result<Vec<f64>, IoError> {
    let mut tok = line.split_whitespace();
    let mut next = |what: &str| -> Result<f64, IoError> {
        tok.next()
            .ok_or_else(|| parse_err(offset, format!("missing {what} in {} row", elem.name)))?
            .parse::<f64>()
            .map_err(|_| parse_err(offset, format!("malformed {what} in {} row", elem.name)))
    };
    let mut row = Vec::with_capacity(elem.props.len());
    for p in &elem.props {
        match p {
            Property::Scalar { name, .. } => row.push(next(name)?),
            Property::List { .. } => {
                let n = next("list count")?;
                if n < 0.0 || n.fract() != 0.0 {
                    return Err(parse_err(offset, "invalid list count"));
                }
                for _ in 0..n as usize {
                    next("list item")?;
                }
                row.push(f64::NAN);
            }
        }
    }
    Ok(row)
}

fn parse_binary_row(bytes: &[u8], pos: &mut usize, elem: &Element) -> Result<Vec<f64>, IoError> {
    let mut take = |ty: Scalar| -> Result<f64, IoError> {
        let n = ty.size();
        if *pos + n > bytes.len() {
            return Err(parse_err(*pos, format!("truncated {} data", elem.name)));
        }
        let v = ty.decode(&bytes[*pos..*pos + n]);
        *pos += n;
        Ok(v)
    };
    let mut row = Vec::with_capacity(elem.props.len());
    for p in &elem.props {
        match *p {
            Property::Scalar { ty, .. } => row.push(take(ty)?),
            Property::List { count, item } => {
                let n = take(count)?;
                if n < 0.0 {
                    return Err(parse_err(*pos, "negative list count"));
                }
                for _ in 0..n as usize {
                    take(item)?;
                }
                row.push(f64::NAN);
            }
        }
    }
    Ok(row)
}

pub fn encode_ply(pc: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", pc.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if pc.labels().is_some() {
        header.push_str("property uint part\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    let labels = pc.labels();
    match encoding {
        PlyEncoding::Ascii => {
            let mut body = String::new();
            for (i, p) in pc.points().iter().enumerate() {
                let _ = write!(body, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
                if let Some(l) = labels {
                    let _ = write!(body, " {}", l[i]);
                }
                body.push('\n');
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyEncoding::BinaryLittleEndian => {
            for (i, p) in pc.points().iter().enumerate() {
                for c in p {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
                if let Some(l) = labels {
                    out.extend_from_slice(&l[i].to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    parse_ply(&read_bytes(path)?)
}

pub fn write_ply(path: &Path, pc: &PointCloud, encoding: PlyEncoding) -> Result<(), IoError> {
    write_bytes(path, &encode_ply(pc, encoding))
}

/// Result of importing an OBJ file; only vertex lines contribute points.
#[derive(Debug)]
pub struct ObjImport {
    pub cloud: PointCloud,
    pub skipped_faces: usize,
}

pub fn parse_obj(bytes: &[u8]) -> Result<ObjImport, IoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(e.valid_up_to(), "OBJ is not valid UTF-8"))?;
    let mut points = Vec::new();
    let mut skipped_faces = 0usize;
    let mut offset = 0usize;
    for raw in text.split_inclusive('\n') {
        let line = raw.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    *c = tok
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| parse_err(offset, "malformed vertex line"))?;
                }
                points.push(p);
            }
            Some("f") => skipped_faces += 1,
            _ => {}
        }
        offset += raw.len();
    }
    if skipped_faces > 0 {
        log::warn!("OBJ import ignored {skipped_faces} face line(s)");
    }
    if points.is_empty() {
        return Err(parse_err(bytes.len(), "no vertex lines"));
    }
    Ok(ObjImport {
        cloud: PointCloud::new(points)?,
        skipped_faces,
    })
}

pub fn read_obj(path: &Path) -> Result<ObjImport, IoError> {
    parse_obj(&read_bytes(path)?)
}

pub fn encode_obj(pc: &PointCloud) -> Vec<u8> {
    let mut s = String::new();
    for p in pc.points() {
        let _ = writeln!(s, "v {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    s.into_bytes()
}

/// Quad mesh of the exposed faces of voxels at or above `threshold`.
pub fn encode_voxel_mesh(grid: &OccupancyGrid, threshold: f64) -> Vec<u8> {
    let n = grid.resolution();
    let h = 1.0 / n as f64;
    let occ = |i: isize, j: isize, k: isize| {
        let inside = |v: isize| v >= 0 && (v as usize) < n;
        inside(i) && inside(j) && inside(k) && grid.get(i as usize, j as usize, k as usize) >= threshold
    };
    let mut verts = String::new();
    let mut faces = String::new();
    let mut count = 0usize;
    // (neighbor offset, four corner offsets in counter-clockwise order seen from outside)
    const FACES: [([isize; 3], [[u8; 3]; 4]); 6] = [
        ([-1, 0, 0], [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
        ([1, 0, 0], [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
        ([0, -1, 0], [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
        ([0, 1, 0], [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
        ([0, 0, -1], [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
        ([0, 0, 1], [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
    ];
    for i in 0..n as isize {
        for j in 0..n as isize {
            for k in 0..n as isize {
                if !occ(i, j, k) {
                    continue;
                }
                for (d, corners) in FACES {
                    if occ(i + d[0], j + d[1], k + d[2]) {
                        continue;
                    }
                    for c in corners {
                        let _ = writeln!(
                            verts,
                            "v {} {} {}",
                            ((i + c[0] as isize) as f64 * h) as f32,
                            ((j + c[1] as isize) as f64 * h) as f32,
                            ((k + c[2] as isize) as f64 * h) as f32
                        );
                    }
                    let _ = writeln!(faces, "f {} {} {} {}", count + 1, count + 2, count + 3, count + 4);
                    count += 4;
                }
            }
        }
    }
    verts.push_str(&faces);
    verts.into_bytes()
}

pub fn save_grid(path: &Path, grid: &OccupancyGrid) -> Result<(), IoError> {
    let n = grid.resolution();
    let arr = Array::new(vec![n, n, n], grid.values().to_vec()).expect("grid shape");
    Ok(lsct::save(path, &arr)?)
}

pub fn load_grid(path: &Path) -> Result<OccupancyGrid, IoError> {
    let arr = lsct::load(path)?;
    match *arr.shape() {
        [a, b, c] if a == b && b == c => Ok(OccupancyGrid::from_values(a, arr.into_data())?),
        _ => Err(parse_err(8, format!("expected a cubic rank-3 grid, got {:?}", arr.shape()))),
    }
}

/// Reads a point cloud, choosing the parser from the file extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    match extension(path).as_deref() {
        Some("ply") => read_ply(path),
        Some("obj") => Ok(read_obj(path)?.cloud),
        _ => Err(IoError::UnknownFormat(path.display().to_string())),
    }
}

pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<(), IoError> {
    match extension(path).as_deref() {
        Some("ply") => write_ply(path, pc, PlyEncoding::BinaryLittleEndian),
        Some("obj") => write_bytes(path, &encode_obj(pc)),
        _ => Err(IoError::UnknownFormat(path.display().to_string())),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_ply_with_three_vertices() {
        let text = b"ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";
        let pc = parse_ply(text).unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.points()[2], [0.0, 1.0, 0.5]);
        assert!(pc.labels().is_none());
    }

    #[test]
    fn ply_with_faces_and_labels() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty int part\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 3\n1 1 1 0 4\n3 0 1 1\n";
        let pc = parse_ply(text).unwrap();
        assert_eq!(pc.labels(), Some(&[3, 4][..]));
    }

    #[test]
    fn truncated_ply_reports_offset() {
        let pc = PointCloud::with_labels(vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], vec![1, 2]).unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let bytes = encode_ply(&pc, enc);
            for cut in 0..bytes.len() - 1 {
                let r = parse_ply(&bytes[..cut]);
                assert!(r.is_err(), "{enc:?} cut at {cut} parsed");
            }
        }
    }

    #[test]
    fn bad_element_count_is_rejected() {
        let text = b"ply\nformat ascii 1.0\nelement vertex many\nproperty float x\nend_header\n";
        match parse_ply(text) {
            Err(IoError::Parse { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn obj_vertex_lines_only() {
        let text = b"# cube corner\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1 2 3\n";
        let imp = parse_obj(text).unwrap();
        assert_eq!(imp.cloud.len(), 3);
        assert_eq!(imp.skipped_faces, 1);
        assert!(parse_obj(b"v 1 2\n").is_err());
    }

    #[test]
    fn voxel_mesh_of_single_cell_has_six_quads() {
        let mut g = OccupancyGrid::empty(2);
        g.set(0, 0, 0, 1.0);
        let text = String::from_utf8(encode_voxel_mesh(&g, 0.5)).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 24);
    }
}
