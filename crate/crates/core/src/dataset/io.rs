use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Writes one `x y z [nx ny nz]` row per point.
pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write_rows(path.as_ref(), cloud, None)
}

/// Like [`write_xyz`] with three trailing color channels in `[0, 1]`.
pub fn write_xyz_colored(path: impl AsRef<Path>, cloud: &PointCloud, colors: &[[f64; 3]]) -> Result<()> {
    if colors.len() != cloud.len() {
        return Err(Error::invalid(format!(
            "{} colors for {} points",
            colors.len(),
            cloud.len()
        )));
    }
    write_rows(path.as_ref(), cloud, Some(colors))
}

fn write_rows(path: &Path, cloud: &PointCloud, colors: Option<&[[f64; 3]]>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let normals = cloud.normals();
    for (i, p) in cloud.points().iter().enumerate() {
        let mut line = format!("{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
        if let Some(ns) = normals {
            let n = ns[i];
            line.push_str(&format!(" {:.16e} {:.16e} {:.16e}", n.x, n.y, n.z));
        }
        if let Some(cs) = colors {
            let c = cs[i];
            line.push_str(&format!(" {:.6} {:.6} {:.6}", c[0], c[1], c[2]));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `x y z` or `x y z nx ny nz` rows. Blank lines and `#` comments are
/// skipped; every data row must have the same width.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("invalid number `{t}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(parse_err(
                lineno,
                format!("expected 3 or 6 fields, found {}", values.len()),
            ));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {w} fields like earlier rows, found {}", values.len()),
                ))
            }
            _ => {}
        }
        points.push(Vec3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            normals.push(Vec3::new(values[3], values[4], values[5]));
        }
    }
    if points.is_empty() {
        return Err(parse_err(0, "no points".into()));
    }
    if normals.is_empty() {
        PointCloud::new(points)
    } else {
        PointCloud::with_normals(points, normals)
    }
}

/// Reads `.ply` (vertex positions and optional normals) or `.xyz` by extension.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => read_xyz(path),
    }
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
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

    fn decode(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().expect("sized slice");
                (if little { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

/// Binary (either endianness) PLY reader for vertex positions and normals.
/// Other vertex properties are skipped; the vertex element must come first.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let err = |line: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };

    let mut little = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut lineno = 0;
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        lineno += 1;
        if n == 0 {
            return Err(err(lineno, "unexpected end of header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(err(1, "missing `ply` magic")),
            ["format", "binary_little_endian", _] => little = Some(true),
            ["format", "binary_big_endian", _] => little = Some(false),
            ["format", other, _] => return Err(err(lineno, &format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(err(lineno, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| err(lineno, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(err(lineno, "vertex element must come first"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err(lineno, "list properties on vertices are unsupported"))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| err(lineno, &format!("unknown type `{ty}`")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(err(lineno, "unrecognized header line")),
        }
    }
    let little = little.ok_or_else(|| err(lineno, "missing format line"))?;
    let count = count.ok_or_else(|| err(lineno, "missing vertex element"))?;
    let find = |name: &str| props.iter().position(|(n, _)| n == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(err(lineno, "vertex element lacks x/y/z")),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some((x, y, z)),
        _ => None,
    };
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let value = |row: &[u8], i: usize| props[i].1.decode(&row[offsets[i]..], little);

    let mut row = vec![0u8; stride];
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::new();
    for _ in 0..count {
        reader
            .read_exact(&mut row)
            .map_err(|_| err(lineno, "truncated vertex data"))?;
        points.push(Vec3::new(value(&row, xi), value(&row, yi), value(&row, zi)));
        if let Some((a, b, c)) = normal_idx {
            let n = Vec3::new(value(&row, a), value(&row, b), value(&row, c));
            // Single-precision normals are renormalized to meet the unit invariant.
            normals.push(n.try_normalize(0.0).unwrap_or_else(Vec3::z));
        }
    }
    if normal_idx.is_some() {
        PointCloud::with_normals(points, normals)
    } else {
        PointCloud::new(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random::<f64>() * 100.0 - 50.0, rng.random(), rng.random::<f64>() * 1e-3))
            .collect();
        let nrm: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.3).normalize())
            .collect();
        let cloud = PointCloud::with_normals(pts, nrm).unwrap();
        write_xyz(&path, &cloud).unwrap();
        let back = read_xyz(&path).unwrap();
        let worst = cloud
            .points()
            .iter()
            .zip(back.points())
            .chain(cloud.normals().unwrap().iter().zip(back.normals().unwrap()))
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "{worst}");
    }

    #[test]
    fn three_fields_mean_no_normals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xyz");
        std::fs::write(&path, "0 0 0\n1 2 3\n").unwrap();
        let c = read_xyz(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.normals().is_none());
    }

    #[test]
    fn five_fields_is_a_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.xyz");
        std::fs::write(&path, "0 0 0\n1 2 3 4 5\n").unwrap();
        match read_xyz(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_ply_with_extra_property() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 2\n\
property float x\nproperty float y\nproperty float z\nproperty uchar red\n\
property double nx\nproperty double ny\nproperty double nz\nelement face 0\n\
property list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for (p, n) in [([1.0f32, 2.0, 3.0], [0.0f64, 0.0, 1.0]), ([-1.0, 0.5, 0.25], [1.0, 0.0, 0.0])] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(200);
            for v in n {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&path, bytes).unwrap();
        let c = read_point_cloud(&path).unwrap();
        assert_eq!(c.points()[1], Vec3::new(-1.0, 0.5, 0.25));
        assert_eq!(c.normals().unwrap()[1], Vec3::x());
    }
}
