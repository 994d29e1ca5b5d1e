//! ASCII PLY reading and writing.
//!
//! Meshes carry `vertex (x y z)` and `face (list vertex_indices)`. Point
//! clouds carry `vertex (x y z [level])`. Coordinates are printed in the
//! shortest form that parses back to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::{LabeledPointCloud, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriMesh;

pub fn format_mesh(mesh: &TriMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 48 + mesh.faces.len() * 24 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn format_cloud(points: &[Vec3], labels: Option<&[u8]>) -> String {
    let mut s = String::with_capacity(points.len() * 48 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if labels.is_some() {
        s.push_str("property int level\n");
    }
    s.push_str("end_header\n");
    for (i, v) in points.iter().enumerate() {
        match labels {
            Some(l) => {
                let _ = writeln!(s, "{} {} {} {}", v.x, v.y, v.z, l[i]);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
            }
        }
    }
    s
}

fn write_text(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_text(path, format_mesh(mesh))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, format_cloud(&cloud.points, None))
}

pub fn write_labeled_cloud(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    write_text(path, format_cloud(&cloud.points, Some(&cloud.labels)))
}

/// Raw contents of a parsed PLY file.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub levels: Option<Vec<u8>>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

#[derive(Debug)]
enum Prop {
    Scalar(String),
    List,
}

pub fn parse(text: &str, path: &Path) -> Result<PlyData> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, other)) => return Err(err(n, format!("expected 'ply' magic, found {other:?}"))),
        None => return Err(err(1, "empty file".into())),
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(err(0, "missing end_header".into()));
        };
        let toks: Vec<&str> = line.split_ascii_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => saw_format = true,
            ["format", fmt, ..] => {
                return Err(err(n, format!("unsupported format {fmt:?}, only ascii")));
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| err(n, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: (*name).to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", _, _, _] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element".into()))?;
                el.props.push(Prop::List);
            }
            ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element".into()))?;
                el.props.push(Prop::Scalar((*name).to_string()));
            }
            ["end_header"] => break,
            _ => return Err(err(n, format!("unrecognized header line {line:?}"))),
        }
    }
    if !saw_format {
        return Err(err(0, "missing format line".into()));
    }

    let mut data = PlyData::default();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let col = |name: &str| {
                    el.props
                        .iter()
                        .position(|p| matches!(p, Prop::Scalar(s) if s == name))
                };
                let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
                    return Err(err(0, "vertex element lacks x/y/z".into()));
                };
                let il = col("level");
                if el.props.iter().any(|p| matches!(p, Prop::List)) {
                    return Err(err(0, "list properties on vertices are not supported".into()));
                }
                let mut levels = il.map(|_| Vec::with_capacity(el.count));
                data.vertices.reserve(el.count);
                for k in 0..el.count {
                    let (n, line) = lines
                        .next()
                        .ok_or_else(|| err(0, format!("file ends before vertex {k}")))?;
                    let toks: Vec<&str> = line.split_ascii_whitespace().collect();
                    if toks.len() != el.props.len() {
                        return Err(err(
                            n,
                            format!("vertex {k}: expected {} values, found {}", el.props.len(), toks.len()),
                        ));
                    }
                    let num = |i: usize| -> Result<f64> {
                        toks[i]
                            .parse::<f64>()
                            .map_err(|_| err(n, format!("vertex {k}: bad number {:?}", toks[i])))
                    };
                    data.vertices.push(Vec3::new(num(ix)?, num(iy)?, num(iz)?));
                    if let (Some(levels), Some(il)) = (levels.as_mut(), il) {
                        let l: u8 = toks[il]
                            .parse()
                            .map_err(|_| err(n, format!("vertex {k}: bad level {:?}", toks[il])))?;
                        levels.push(l);
                    }
                }
                data.levels = levels;
            }
            "face" => {
                if el.props.len() != 1 || !matches!(el.props[0], Prop::List) {
                    return Err(err(0, "face element must have a single list property".into()));
                }
                data.faces.reserve(el.count);
                for k in 0..el.count {
                    let (n, line) = lines
                        .next()
                        .ok_or_else(|| err(0, format!("file ends before face {k}")))?;
                    let toks: Vec<&str> = line.split_ascii_whitespace().collect();
                    if toks.first() != Some(&"3") || toks.len() != 4 {
                        return Err(err(n, format!("face {k}: only triangles are supported")));
                    }
                    let mut f = [0u32; 3];
                    for (slot, t) in f.iter_mut().zip(&toks[1..]) {
                        *slot = t
                            .parse()
                            .map_err(|_| err(n, format!("face {k}: bad index {t:?}")))?;
                        if *slot as usize >= data.vertices.len() {
                            return Err(err(
                                n,
                                format!(
                                    "face {k}: vertex index {} out of range ({} vertices)",
                                    slot,
                                    data.vertices.len()
                                ),
                            ));
                        }
                    }
                    data.faces.push(f);
                }
            }
            other => {
                // skip unknown elements
                for _ in 0..el.count {
                    lines
                        .next()
                        .ok_or_else(|| err(0, format!("file ends inside element {other}")))?;
                }
            }
        }
    }
    Ok(data)
}

pub fn read(path: &Path) -> Result<PlyData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn read_mesh(path: &Path) -> Result<TriMesh> {
    let d = read(path)?;
    Ok(TriMesh {
        vertices: d.vertices,
        faces: d.faces,
    })
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::new(read(path)?.vertices)
}

pub fn read_labeled_cloud(path: &Path) -> Result<LabeledPointCloud> {
    let d = read(path)?;
    let n = d.vertices.len();
    LabeledPointCloud::new(d.vertices, d.levels.unwrap_or_else(|| vec![0; n]))
}
