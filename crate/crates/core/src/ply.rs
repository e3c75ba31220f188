//! Splat PLY reading and writing.
//!
//! Reads `binary_little_endian` (and, for plain point lists, `ascii`) PLY
//! files with scalar properties. Splat files follow the usual 3DGS layout:
//! log scales, logit opacities, `rot_0` = w, and `f_rest_*` grouped
//! channel-major.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{sh_basis_count, GaussianObject};

const OPACITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    BinaryLe,
    Ascii,
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

struct ElementDef {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
}

/// Scalar columns of the `vertex` element, keyed by property name.
pub struct VertexTable {
    pub count: usize,
    columns: HashMap<String, Vec<f64>>,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MalformedPly(format!("missing {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedPly(msg.into())
}

/// Reads the `vertex` element of a PLY file.
pub fn read_vertex_table(path: &Path) -> Result<VertexTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (format, elements) = read_header(&mut reader).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    let mut vertex = None;
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let table = read_element(&mut reader, format, el).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })?;
        if is_vertex {
            vertex = Some(table);
            break;
        }
    }
    vertex.ok_or_else(|| malformed("missing vertex"))
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<(Format, Vec<ElementDef>)> {
    let mut line = String::new();
    let next_line = |reader: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::io("", e))?;
        if n == 0 {
            return Err(malformed("unexpected end of header"));
        }
        Ok(())
    };
    next_line(reader, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(malformed("missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    loop {
        next_line(reader, &mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", other, _] => return Err(malformed(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(ElementDef {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return Err(malformed("list properties are not supported")),
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| malformed(format!("unknown type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(malformed(format!("unexpected header line {:?}", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| malformed("missing format"))?;
    Ok((format, elements))
}

fn read_element<R: BufRead>(reader: &mut R, format: Format, el: &ElementDef) -> Result<VertexTable> {
    let mut columns: Vec<Vec<f64>> = el.props.iter().map(|_| Vec::with_capacity(el.count)).collect();
    match format {
        Format::BinaryLe => {
            let stride: usize = el.props.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for _ in 0..el.count {
                reader.read_exact(&mut buf).map_err(|e| Error::io("", e))?;
                let mut off = 0;
                for ((_, ty), col) in el.props.iter().zip(columns.iter_mut()) {
                    col.push(ty.decode(&buf[off..]));
                    off += ty.size();
                }
            }
        }
        Format::Ascii => {
            let mut line = String::new();
            for _ in 0..el.count {
                line.clear();
                if reader.read_line(&mut line).map_err(|e| Error::io("", e))? == 0 {
                    return Err(malformed("truncated ascii body"));
                }
                let mut toks = line.split_whitespace();
                for col in columns.iter_mut() {
                    let v = toks
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| malformed("bad ascii value"))?;
                    col.push(v);
                }
            }
        }
    }
    Ok(VertexTable {
        count: el.count,
        columns: el.props.iter().map(|(n, _)| n.clone()).zip(columns).collect(),
    })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Loads a splat PLY and applies the activations (logistic opacity, exp
/// scale, normalized rotation).
pub fn load_gaussian_ply(path: &Path) -> Result<GaussianObject> {
    let table = read_vertex_table(path)?;
    if table.count == 0 {
        return Err(Error::EmptyObject);
    }
    let mut n_rest = 0;
    while table.has(&format!("f_rest_{n_rest}")) {
        n_rest += 1;
    }
    let basis = n_rest / 3 + 1;
    let degree = (0..=3)
        .find(|&d| sh_basis_count(d) == basis && n_rest % 3 == 0)
        .ok_or_else(|| malformed(format!("{n_rest} f_rest properties do not match an SH degree")))?;

    let col = |name: &str| table.column(name);
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let rest: Vec<&[f64]> = (0..n_rest)
        .map(|k| col(&format!("f_rest_{k}")))
        .collect::<Result<_>>()?;
    let opacity = col("opacity")?;
    let scale = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];

    let n = table.count;
    let mut means = Vec::with_capacity(n);
    let mut orientations = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut opacities = Vec::with_capacity(n);
    let mut sh = Vec::with_capacity(n * 3 * basis);
    for i in 0..n {
        let raw = [
            x[i], y[i], z[i], opacity[i], scale[0][i], scale[1][i], scale[2][i], rot[0][i], rot[1][i],
            rot[2][i], rot[3][i],
        ];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteField);
        }
        means.push(Vector3::new(x[i], y[i], z[i]));
        opacities.push(logistic(opacity[i]));
        scales.push(Vector3::new(scale[0][i].exp(), scale[1][i].exp(), scale[2][i].exp()));
        let q = [rot[0][i], rot[1][i], rot[2][i], rot[3][i]];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn > 0.0) {
            return Err(Error::DegenerateQuaternion);
        }
        orientations.push(q.map(|v| v / qn));
        for c in 0..3 {
            sh.push(dc[c][i]);
            for j in 1..basis {
                sh.push(rest[c * (basis - 1) + (j - 1)][i]);
            }
        }
    }
    if sh.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteField);
    }
    GaussianObject::new(means, orientations, scales, opacities, sh, degree)
}

/// Writes `obj` as a binary little-endian splat PLY with inverse activations.
pub fn save_gaussian_ply(obj: &GaussianObject, path: &Path) -> Result<()> {
    if obj.is_empty() {
        return Err(Error::EmptyObject);
    }
    obj.validate()?;
    let basis = obj.basis_count();
    let n_rest = 3 * (basis - 1);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", obj.len());
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..n_rest).map(|k| format!("f_rest_{k}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    for name in &names {
        header += &format!("property float {name}\n");
    }
    header += "end_header\n";

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut row: Vec<f32> = Vec::with_capacity(names.len());
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut w, header.as_bytes())?;
    for i in 0..obj.len() {
        row.clear();
        let m = obj.means[i];
        row.extend([m.x, m.y, m.z, 0.0, 0.0, 0.0].map(|v| v as f32));
        let sh = obj.sh(i);
        row.extend((0..3).map(|c| sh[c * basis] as f32));
        for c in 0..3 {
            row.extend((1..basis).map(|j| sh[c * basis + j] as f32));
        }
        row.push(logit(obj.opacities[i]) as f32);
        row.extend(obj.scales[i].iter().map(|s| s.ln() as f32));
        row.extend(obj.orientations[i].iter().map(|&v| v as f32));
        for v in &row {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `x, y, z` of every vertex (model points for evaluation).
pub fn load_ply_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let table = read_vertex_table(path)?;
    let (x, y, z) = (table.column("x")?, table.column("y")?, table.column("z")?);
    let pts: Vec<_> = (0..table.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect();
    if pts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteField);
    }
    Ok(pts)
}
