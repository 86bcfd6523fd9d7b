use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Linear, Mlp};
use super::NetConfig;
use crate::error::{Error, Result};

pub const EDGE_WIDTH: usize = 64;
pub const FEATURE_WIDTH: usize = 128;
pub const REFINED_WIDTH: usize = 3 * FEATURE_WIDTH;
pub const PRIOR_WIDTH: usize = 32;
pub const SELECTOR_FEATURE_WIDTH: usize = 64;
pub const SELECTOR_HIDDEN: usize = 64;
pub const NORMAL_HEAD_WIDTH: usize = 256;
pub const NORMAL_HEAD_BLOCKS: usize = 3;

pub const CHECKPOINT_FORMAT: &str = "pcdnf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-stream multiscale extractor: two Euclidean-graph EdgeConvs, a merge
/// MLP, one feature-space EdgeConv and a closing MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub edge_near: Mlp,
    pub edge_far: Mlp,
    pub merge: Mlp,
    pub edge_feature: Mlp,
    pub post: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub angle: Linear,
    pub distance: Linear,
    pub point: Linear,
    pub normal: Linear,
    pub hidden: Linear,
    pub score: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementHead {
    pub hidden: Mlp,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalHead {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub out: Linear,
}

/// Every learnable weight of the network. The same type doubles as the
/// gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub point_extractor: Extractor,
    pub normal_extractor: Extractor,
    pub selector: Selector,
    pub point_augment: Linear,
    pub normal_augment: Linear,
    pub displacement: DisplacementHead,
    pub normal: NormalHead,
}

fn extractor(make_mlp: &mut impl FnMut(&[usize]) -> Mlp) -> Extractor {
    Extractor {
        edge_near: make_mlp(&[6, EDGE_WIDTH, EDGE_WIDTH]),
        edge_far: make_mlp(&[6, EDGE_WIDTH, EDGE_WIDTH]),
        merge: make_mlp(&[2 * EDGE_WIDTH, FEATURE_WIDTH]),
        edge_feature: make_mlp(&[2 * FEATURE_WIDTH, FEATURE_WIDTH, FEATURE_WIDTH]),
        post: make_mlp(&[FEATURE_WIDTH, FEATURE_WIDTH]),
    }
}

impl NetworkParams {
    fn build(mut lin: impl FnMut(usize, usize) -> Linear) -> Self {
        let mut mlp = |w: &[usize]| Mlp {
            layers: w.windows(2).map(|p| lin(p[0], p[1])).collect(),
        };
        let point_extractor = extractor(&mut mlp);
        let normal_extractor = extractor(&mut mlp);
        let displacement_hidden = mlp(&[REFINED_WIDTH, 256, 128]);
        let mut lin = |i, o| mlp(&[i, o]).layers.pop().expect("one layer");
        NetworkParams {
            point_extractor,
            normal_extractor,
            selector: Selector {
                angle: lin(1, PRIOR_WIDTH),
                distance: lin(1, PRIOR_WIDTH),
                point: lin(FEATURE_WIDTH, SELECTOR_FEATURE_WIDTH),
                normal: lin(FEATURE_WIDTH, SELECTOR_FEATURE_WIDTH),
                hidden: lin(2 * PRIOR_WIDTH + 2 * SELECTOR_FEATURE_WIDTH, SELECTOR_HIDDEN),
                score: lin(SELECTOR_HIDDEN, 1),
            },
            point_augment: lin(FEATURE_WIDTH, FEATURE_WIDTH),
            normal_augment: lin(FEATURE_WIDTH, FEATURE_WIDTH),
            displacement: DisplacementHead {
                hidden: displacement_hidden,
                out: lin(128, 3),
            },
            normal: NormalHead {
                input: lin(REFINED_WIDTH, NORMAL_HEAD_WIDTH),
                blocks: (0..NORMAL_HEAD_BLOCKS)
                    .map(|_| ResidualBlock {
                        first: lin(NORMAL_HEAD_WIDTH, NORMAL_HEAD_WIDTH),
                        second: lin(NORMAL_HEAD_WIDTH, NORMAL_HEAD_WIDTH),
                    })
                    .collect(),
                out: lin(NORMAL_HEAD_WIDTH, 3),
            },
        }
    }

    /// Fresh weights drawn from `seed`.
    pub fn init(_cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(|i, o| Linear::init(i, o, &mut rng))
    }

    /// All-zero buffer with the network's shapes.
    pub fn zeros() -> Self {
        Self::build(Linear::zeros)
    }

    /// Visits every dense layer with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Linear)) {
        let mlp = |prefix: &str, m: &'a Mlp, f: &mut dyn FnMut(String, &'a Linear)| {
            for (i, l) in m.layers.iter().enumerate() {
                f(format!("{prefix}.{i}"), l);
            }
        };
        for (name, e) in [("point_extractor", &self.point_extractor), ("normal_extractor", &self.normal_extractor)] {
            mlp(&format!("{name}.edge_near"), &e.edge_near, f);
            mlp(&format!("{name}.edge_far"), &e.edge_far, f);
            mlp(&format!("{name}.merge"), &e.merge, f);
            mlp(&format!("{name}.edge_feature"), &e.edge_feature, f);
            mlp(&format!("{name}.post"), &e.post, f);
        }
        let s = &self.selector;
        f("selector.angle".into(), &s.angle);
        f("selector.distance".into(), &s.distance);
        f("selector.point".into(), &s.point);
        f("selector.normal".into(), &s.normal);
        f("selector.hidden".into(), &s.hidden);
        f("selector.score".into(), &s.score);
        f("point_augment".into(), &self.point_augment);
        f("normal_augment".into(), &self.normal_augment);
        mlp("displacement.hidden", &self.displacement.hidden, f);
        f("displacement.out".into(), &self.displacement.out);
        f("normal.input".into(), &self.normal.input);
        for (i, b) in self.normal.blocks.iter().enumerate() {
            f(format!("normal.block{i}.first"), &b.first);
            f(format!("normal.block{i}.second"), &b.second);
        }
        f("normal.out".into(), &self.normal.out);
    }

    /// Mutable layers in the same order as [`NetworkParams::visit`].
    pub fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        for e in [&mut self.point_extractor, &mut self.normal_extractor] {
            for m in [&mut e.edge_near, &mut e.edge_far, &mut e.merge, &mut e.edge_feature, &mut e.post] {
                out.extend(m.layers.iter_mut());
            }
        }
        let s = &mut self.selector;
        out.extend([&mut s.angle, &mut s.distance, &mut s.point, &mut s.normal, &mut s.hidden, &mut s.score]);
        out.push(&mut self.point_augment);
        out.push(&mut self.normal_augment);
        out.extend(self.displacement.hidden.layers.iter_mut());
        out.push(&mut self.displacement.out);
        out.push(&mut self.normal.input);
        for b in self.normal.blocks.iter_mut() {
            out.push(&mut b.first);
            out.push(&mut b.second);
        }
        out.push(&mut self.normal.out);
        out
    }

    pub fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        self.visit(&mut |n, l| out.push((n, l)));
        out
    }

    /// Flat views of every array as `(name, shape, values)`.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.layers() {
            out.push((
                format!("{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.shape().to_vec(),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    /// Mutable flat views in [`NetworkParams::named_arrays`] order.
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers_mut() {
            let Linear { weight, bias } = l;
            out.push(weight.as_slice_mut().expect("standard layout"));
            out.push(bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_arrays().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        let src = other.named_arrays();
        for (dst, (_, _, s)) in self.arrays_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for a in self.arrays_mut() {
            a.fill(value);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, cfg: &NetConfig) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            format_version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            arrays: self
                .named_arrays()
                .into_iter()
                .map(|(name, shape, data)| NamedArray {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(NetworkParams, NetConfig)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", ckpt.format)));
        }
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ckpt.format_version
            )));
        }
        let mut params = NetworkParams::zeros();
        let expected: Vec<(String, Vec<usize>)> = params
            .named_arrays()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != ckpt.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                ckpt.arrays.len()
            )));
        }
        for ((dst, (name, shape)), src) in params.arrays_mut().into_iter().zip(&expected).zip(&ckpt.arrays) {
            if &src.name != name || &src.shape != shape || src.data.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` {:?} does not match expected `{name}` {shape:?}",
                    src.name, src.shape
                )));
            }
            dst.copy_from_slice(&src.data);
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite weights".into()));
        }
        Ok((params, ckpt.config))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    format_version: u32,
    config: NetConfig,
    arrays: Vec<NamedArray>,
}

pub(crate) fn row_vector(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(ndarray::Axis(0)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_mut_views_line_up() {
        let mut p = NetworkParams::init(&NetConfig::default(), 1);
        let lens: Vec<usize> = p.named_arrays().iter().map(|(_, _, v)| v.len()).collect();
        let mut_lens: Vec<usize> = p.arrays_mut().iter().map(|v| v.len()).collect();
        assert_eq!(lens, mut_lens);
        let names: Vec<String> = p.named_arrays().into_iter().map(|(n, _, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let cfg = NetConfig::default();
        let p = NetworkParams::init(&cfg, 7);
        p.save(&path, &cfg).unwrap();
        let (q, c) = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(c, cfg);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let cfg = NetConfig::default();
        NetworkParams::init(&cfg, 7).save(&path, &cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":9", 1)).unwrap();
        assert!(matches!(NetworkParams::load(&path), Err(Error::Checkpoint(_))));
    }
}
