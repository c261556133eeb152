//! ASCII PLY and OBJ mesh ingestion (vertex positions and triangle faces only).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::geometry::ObjectModel;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("expected a number, found {tok:?}")))
}

/// Reads a mesh, choosing the format from the file extension.
pub fn load_mesh(path: &Path) -> Result<ObjectModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ply") => parse_ply(&text),
        Some("obj") => parse_obj(&text),
        _ => Err(Error::invalid(format!(
            "{}: unsupported mesh extension (expected .ply or .obj)",
            path.display()
        ))),
    }
}

/// ASCII PLY with `element vertex` (x y z first) and optional `element face`
/// lists. Polygons are fan-triangulated; extra vertex properties are ignored.
pub fn parse_ply(text: &str) -> Result<ObjectModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing 'ply' magic")),
    }

    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(parse_err(ln, "only ascii PLY is supported"));
                }
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(parse_err(ln, "malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad element count {:?}", toks[2])))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(ln, "property before any element"))?;
                let name = toks
                    .last()
                    .filter(|_| toks.len() >= 3)
                    .ok_or_else(|| parse_err(ln, "malformed property line"))?;
                el.props.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(parse_err(ln, format!("unexpected header keyword {other:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(text.lines().count(), "missing end_header"));
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(text.lines().count(), format!("truncated {} data", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let pos = |axis: &str| {
                        el.props
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| parse_err(ln, format!("vertex element lacks {axis}")))
                    };
                    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
                    if toks.len() < el.props.len() {
                        return Err(parse_err(ln, "too few vertex values"));
                    }
                    vertices.push(Point3::new(
                        parse_f64(toks[ix], ln)?,
                        parse_f64(toks[iy], ln)?,
                        parse_f64(toks[iz], ln)?,
                    ));
                }
                "face" => {
                    let count: usize = toks
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(ln, "face line lacks a vertex count"))?;
                    if toks.len() < count + 1 || count < 3 {
                        return Err(parse_err(ln, "malformed face"));
                    }
                    let idx = toks[1..=count]
                        .iter()
                        .map(|t| {
                            t.parse::<usize>()
                                .map_err(|_| parse_err(ln, format!("bad face index {t:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for k in 1..count - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    ObjectModel::new(vertices, faces)
}

/// OBJ `v` and `f` records; `f` entries may use `v/vt/vn` syntax and negative indices.
pub fn parse_obj(text: &str) -> Result<ObjectModel> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(ln, "vertex needs three coordinates"));
                }
                vertices.push(Point3::new(
                    parse_f64(c[0], ln)?,
                    parse_f64(c[1], ln)?,
                    parse_f64(c[2], ln)?,
                ));
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let v: i64 = head
                            .parse()
                            .map_err(|_| parse_err(ln, format!("bad face index {t:?}")))?;
                        let resolved = if v < 0 { vertices.len() as i64 + v } else { v - 1 };
                        if resolved < 0 || v == 0 {
                            return Err(parse_err(ln, format!("face index {v} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(ln, "face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    ObjectModel::new(vertices, faces)
}

/// Serializes a model as ASCII PLY.
pub fn to_ply(model: &ObjectModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ply\nformat ascii 1.0");
    let _ = writeln!(out, "element vertex {}", model.len());
    let _ = writeln!(out, "property float x\nproperty float y\nproperty float z");
    let _ = writeln!(out, "element face {}", model.faces().len());
    let _ = writeln!(out, "property list uchar int vertex_indices\nend_header");
    for v in model.vertices() {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    for f in model.faces() {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TETRA_PLY: &str = "ply
format ascii 1.0
comment toy
element vertex 4
property float x
property float y
property float z
property uchar red
element face 2
property list uchar int vertex_indices
end_header
0 0 0 255
1 0 0 255
0 1 0 255
0 0 1 255
3 0 1 2
4 0 1 3 2
";

    #[test]
    fn parses_ply_with_extra_properties_and_quads() {
        let m = parse_ply(TETRA_PLY).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 1, 3], [0, 3, 2]]);
        assert!((m.diameter() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ply_errors_carry_line_numbers() {
        let bad = TETRA_PLY.replace("1 0 0 255", "1 zero 0 255");
        assert_eq!(
            parse_ply(&bad).unwrap_err(),
            Error::Parse { line: 13, message: "expected a number, found \"zero\"".into() }
        );
        let truncated: String = TETRA_PLY.lines().take(14).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_ply(&truncated), Err(Error::Parse { .. })));
        assert!(matches!(parse_ply("ply\nformat binary_little_endian 1.0\n"), Err(Error::Parse { line: 2, .. })));
        let out_of_range = TETRA_PLY.replace("3 0 1 2", "3 0 1 9");
        assert!(matches!(parse_ply(&out_of_range), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn parses_obj() {
        let obj = "# cube corner\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1\nf -4 -3 -1\n";
        let m = parse_obj(obj).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 1, 3]]);
        assert_eq!(
            parse_obj("v 0 0 0\nv 1 1\n").unwrap_err(),
            Error::Parse { line: 2, message: "vertex needs three coordinates".into() }
        );
        assert!(matches!(parse_obj("v 0 0 0\nf 1 2 0\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ply_writer_roundtrips() {
        let m = parse_ply(TETRA_PLY).unwrap();
        assert_eq!(parse_ply(&to_ply(&m)).unwrap(), m);
    }
}
