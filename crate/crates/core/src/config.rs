//! Flat `key = value` run configuration covering the network, loss and
//! training settings.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::NetConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Every recognised key.
    pub const KEYS: [&'static str; 22] = [
        "patch_size",
        "top_k",
        "k1",
        "k2",
        "k3",
        "k4",
        "radius_fraction",
        "init_seed",
        "lambda_point",
        "lambda_normal",
        "lambda_ortho",
        "alpha",
        "theta_angle_deg",
        "sigma_phi_rel",
        "epochs",
        "lr_start",
        "lr_end",
        "momentum",
        "batch_size",
        "centers_per_cloud",
        "seed",
        "checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "patch_size" => self.net.patch_size = parse(key, v)?,
            "top_k" => self.net.top_k = parse(key, v)?,
            "k1" => self.net.extractor.k1 = parse(key, v)?,
            "k2" => self.net.extractor.k2 = parse(key, v)?,
            "k3" => self.net.extractor.k3 = parse(key, v)?,
            "k4" => self.net.k4 = parse(key, v)?,
            "radius_fraction" => self.net.radius_fraction = parse(key, v)?,
            "init_seed" => self.net.init_seed = parse(key, v)?,
            "lambda_point" => self.loss.lambda_point = parse(key, v)?,
            "lambda_normal" => self.loss.lambda_normal = parse(key, v)?,
            "lambda_ortho" => self.loss.lambda_ortho = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "theta_angle_deg" => self.loss.theta_angle_deg = parse(key, v)?,
            "sigma_phi_rel" => self.loss.sigma_phi_rel = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "lr_start" => self.train.lr_start = parse(key, v)?,
            "lr_end" => self.train.lr_end = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "centers_per_cloud" => self.train.centers_per_cloud = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Resolved values in [`RunConfig::KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let n = &self.net;
        let l = &self.loss;
        let t = &self.train;
        let values = [
            n.patch_size.to_string(),
            n.top_k.to_string(),
            n.extractor.k1.to_string(),
            n.extractor.k2.to_string(),
            n.extractor.k3.to_string(),
            n.k4.to_string(),
            n.radius_fraction.to_string(),
            n.init_seed.to_string(),
            l.lambda_point.to_string(),
            l.lambda_normal.to_string(),
            l.lambda_ortho.to_string(),
            l.alpha.to_string(),
            l.theta_angle_deg.to_string(),
            l.sigma_phi_rel.to_string(),
            t.epochs.to_string(),
            t.lr_start.to_string(),
            t.lr_end.to_string(),
            t.momentum.to_string(),
            t.batch_size.to_string(),
            t.centers_per_cloud.to_string(),
            t.seed.to_string(),
            t.checkpoint_every.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs = 3\n# comment\nlr_start=0.001 # inline\n\nk4 = 6\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_start, 1e-3);
        assert_eq!(cfg.net.k4, 6);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("epochs = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = cfg.apply_text("epochs = three\n").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("epochs"), "{e}");
        assert!(cfg.apply_text("epochs 3\n").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().pairs().len(), RunConfig::KEYS.len());
    }
}
