//! Generated corpora on disk: clean/noisy `.xyz` pairs plus a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{add_gaussian_noise, generate_shape, read_xyz, write_xyz, NoisySample, ShapeKind, ShapeSpec};
use crate::error::{Error, Result};
use crate::seed::derive;

pub const MANIFEST_FORMAT: &str = "# pcdnf-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "shape,noise_level,shape_seed,noise_seed,clean,noisy";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub shape: ShapeKind,
    pub noise_level: f64,
    pub shape_seed: u64,
    pub noise_seed: u64,
    /// Relative to the manifest's directory.
    pub clean: String,
    pub noisy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n_points: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn shape_index(kind: ShapeKind) -> u64 {
    ShapeKind::ALL.iter().position(|&k| k == kind).expect("listed kind") as u64
}

/// Seed of the clean sampling of `kind`; independent of which other shapes
/// are generated alongside.
pub fn shape_seed(seed: u64, kind: ShapeKind) -> u64 {
    derive(seed, &[0, shape_index(kind)])
}

pub fn noise_seed(seed: u64, kind: ShapeKind, level: f64) -> u64 {
    derive(seed, &[1, shape_index(kind), level.to_bits()])
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_FORMAT}").expect("string write");
        writeln!(s, "# n_points = {}", self.n_points).expect("string write");
        writeln!(s, "# seed = {}", self.seed).expect("string write");
        writeln!(s, "{MANIFEST_HEADER}").expect("string write");
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                e.shape, e.noise_level, e.shape_seed, e.noise_seed, e.clean, e.noisy
            )
            .expect("string write");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_FORMAT => {}
            _ => return Err(err(1, format!("expected {MANIFEST_FORMAT:?}"))),
        }
        let mut n_points = None;
        let mut seed = None;
        let mut entries = Vec::new();
        let mut header = false;
        for (i, raw) in lines {
            let line = raw.trim();
            let no = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    match k.trim() {
                        "n_points" => n_points = Some(v.trim().parse().map_err(|_| err(no, "bad n_points".into()))?),
                        "seed" => seed = Some(v.trim().parse().map_err(|_| err(no, "bad seed".into()))?),
                        _ => {}
                    }
                }
                continue;
            }
            if !header {
                if line != MANIFEST_HEADER {
                    return Err(err(no, format!("expected header {MANIFEST_HEADER:?}")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(no, format!("expected 6 fields, found {}", f.len())));
            }
            entries.push(ManifestEntry {
                shape: f[0].parse().map_err(|e: Error| err(no, e.to_string()))?,
                noise_level: f[1].parse().map_err(|_| err(no, format!("bad noise level {:?}", f[1])))?,
                shape_seed: f[2].parse().map_err(|_| err(no, format!("bad seed {:?}", f[2])))?,
                noise_seed: f[3].parse().map_err(|_| err(no, format!("bad seed {:?}", f[3])))?,
                clean: f[4].to_string(),
                noisy: f[5].to_string(),
            });
        }
        Ok(Manifest {
            n_points: n_points.ok_or_else(|| err(1, "missing n_points".into()))?,
            seed: seed.ok_or_else(|| err(1, "missing seed".into()))?,
            entries,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// In-memory corpus: every shape at every noise level.
pub fn generate_corpus(shapes: &[ShapeKind], n_points: usize, levels: &[f64], seed: u64) -> Result<Vec<(ShapeKind, NoisySample)>> {
    let mut out = Vec::with_capacity(shapes.len() * levels.len());
    for &kind in shapes {
        let clean = generate_shape(&ShapeSpec::new(kind, n_points, shape_seed(seed, kind)))?;
        for &level in levels {
            out.push((kind, add_gaussian_noise(&clean, level, noise_seed(seed, kind, level))?));
        }
    }
    Ok(out)
}

/// Writes the corpus under `dir` and returns its manifest (also written as
/// [`MANIFEST_FILE`]).
pub fn write_corpus(dir: impl AsRef<Path>, shapes: &[ShapeKind], n_points: usize, levels: &[f64], seed: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for &kind in shapes {
        let clean = generate_shape(&ShapeSpec::new(kind, n_points, shape_seed(seed, kind)))?;
        let clean_name = format!("clean_{kind}.xyz");
        write_xyz(dir.join(&clean_name), &clean)?;
        for &level in levels {
            let ns = noise_seed(seed, kind, level);
            let sample = add_gaussian_noise(&clean, level, ns)?;
            let noisy_name = format!("noisy_{kind}_{level}.xyz");
            write_xyz(dir.join(&noisy_name), &sample.noisy)?;
            entries.push(ManifestEntry {
                shape: kind,
                noise_level: level,
                shape_seed: shape_seed(seed, kind),
                noise_seed: ns,
                clean: clean_name.clone(),
                noisy: noisy_name,
            });
        }
    }
    let manifest = Manifest { n_points, seed, entries };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every sample listed in a manifest. `path` may name the manifest or
/// its directory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Manifest, Vec<(ShapeKind, NoisySample)>)> {
    let path = path.as_ref();
    let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::read(&manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let clean = read_xyz(dir.join(&e.clean))?;
        let noisy = read_xyz(dir.join(&e.noisy))?;
        if clean.normals().is_none() || noisy.normals().is_none() {
            return Err(Error::invalid(format!("{} / {}: corpus files need normals", e.clean, e.noisy)));
        }
        if clean.len() != noisy.len() {
            return Err(Error::invalid(format!("{} and {} differ in length", e.clean, e.noisy)));
        }
        samples.push((
            e.shape,
            NoisySample {
                noisy,
                clean,
                noise_level: e.noise_level,
            },
        ));
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let shapes = [ShapeKind::Sphere, ShapeKind::DihedralWedge];
        let levels = [0.0, 0.01];
        let m = write_corpus(dir.path(), &shapes, 150, &levels, 4).unwrap();
        assert_eq!(m.entries.len(), 4);
        let (m2, loaded) = load_corpus(dir.path()).unwrap();
        assert_eq!(m, m2);
        let mem = generate_corpus(&shapes, 150, &levels, 4).unwrap();
        for ((ka, a), (kb, b)) in loaded.iter().zip(&mem) {
            assert_eq!(ka, kb);
            assert_eq!(a.noisy.points(), b.noisy.points());
            assert_eq!(a.clean.normals(), b.clean.normals());
        }
        assert_eq!(loaded[0].1.noisy.points(), loaded[0].1.clean.points());
    }

    #[test]
    fn seeds_do_not_depend_on_selection() {
        let a = generate_corpus(&[ShapeKind::Torus], 120, &[0.01], 9).unwrap();
        let b = generate_corpus(&[ShapeKind::Cube, ShapeKind::Torus], 120, &[0.005, 0.01], 9).unwrap();
        assert_eq!(a[0].1.noisy.points(), b[3].1.noisy.points());
    }

    #[test]
    fn manifest_parse_errors_carry_lines() {
        let p = Path::new("m.csv");
        assert!(Manifest::parse("nope\n", p).is_err());
        let text = format!("{MANIFEST_FORMAT}\n# n_points = 5\n# seed = 1\n{MANIFEST_HEADER}\ncube,0.01,1\n");
        match Manifest::parse(&text, p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }
}
