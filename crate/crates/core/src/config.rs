//! Run configuration shared by the command line and the experiment drivers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MotifSet, ShapesConfig};
use crate::deploy::Profile;
use crate::distill::{KdHyper, TrainHyper};
use crate::dream::DreamHyper;
use crate::error::{Error, Result};
use crate::nonn::NoNNHyper;
use crate::zoo::{plain_cnn, plain_cnn_bn, InputShape, ModelSpec, WrnConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub motifs: MotifSet,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { motifs: MotifSet::Primary, classes: 10, train_per_class: 500, test_per_class: 100, noise: 0.1, size: 32 }
    }
}

impl DatasetSection {
    pub fn input(&self) -> InputShape {
        InputShape::new(3, self.size, self.size)
    }

    /// Generator settings for the training (`test = false`) or test split.
    pub fn shapes(&self, seed: u64, test: bool) -> ShapesConfig {
        let n = if test { self.test_per_class } else { self.train_per_class };
        let mut c = ShapesConfig::new(self.motifs, self.classes, n, self.noise, seed.wrapping_add(u64::from(test)));
        c.size = self.size;
        c
    }
}

/// A network given either as a plain conv stack or a wide residual net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    Plain { convs: Vec<(usize, usize)>, batch_norm: bool },
    Wrn { depth: usize, width: usize },
}

impl Arch {
    pub fn spec(&self, input: InputShape, classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            Arch::Plain { convs, batch_norm: true } => plain_cnn_bn(input, classes, convs),
            Arch::Plain { convs, batch_norm: false } => plain_cnn(input, classes, convs),
            Arch::Wrn { depth, width } => WrnConfig::new(*depth, *width)?.spec(input, classes),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub arch: Arch,
    #[serde(default)]
    pub train: TrainHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DreamSection {
    /// Share of the training set the teacher's features are summarised from.
    pub fraction: f64,
    pub k: usize,
    pub p: usize,
    #[serde(flatten)]
    pub hyper: DreamHyper,
}

impl Default for DreamSection {
    fn default() -> Self {
        Self { fraction: 0.1, k: 10, p: 8, hyper: DreamHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanSection {
    pub resolution: f64,
    pub k_devices: usize,
    /// Filters per device; `None` means `⌈live filters / k⌉`.
    pub budget_filters: Option<usize>,
}

impl Default for FanSection {
    fn default() -> Self {
        Self { resolution: 1.0, k_devices: 2, budget_filters: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub teacher: NetSection,
    pub student: NetSection,
    pub kd: KdHyper,
    pub dream: DreamSection,
    pub fan: FanSection,
    pub nonn: NoNNHyper,
    pub devices: Profile,
    pub seed: u64,
}

fn desk_train(epochs: usize, decay: usize) -> TrainHyper {
    TrainHyper { epochs, batch: 32, lr: 0.05, decay_epochs: vec![decay], ..TrainHyper::default() }
}

impl Default for RunConfig {
    /// Desk-scale settings: 32×32 shapes, a three-stage BN teacher with 64
    /// final filters and a student at half its width.
    fn default() -> Self {
        let student_train = desk_train(30, 20);
        Self {
            dataset: DatasetSection::default(),
            teacher: NetSection {
                arch: Arch::Plain { convs: vec![(16, 2), (32, 2), (64, 1)], batch_norm: true },
                train: desk_train(6, 4),
            },
            student: NetSection {
                arch: Arch::Plain { convs: vec![(8, 2), (16, 2), (32, 1)], batch_norm: true },
                train: student_train.clone(),
            },
            kd: KdHyper::default(),
            dream: DreamSection::default(),
            fan: FanSection::default(),
            nonn: NoNNHyper { train: student_train, ..NoNNHyper::default() },
            devices: Profile::rpi_like(2),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.shapes(self.seed, false).validate()?;
        if self.dataset.train_per_class == 0 || self.dataset.test_per_class == 0 {
            return Err(Error::InvalidConfig("both splits need images".into()));
        }
        let input = self.dataset.input();
        self.teacher.arch.spec(input, self.dataset.classes)?;
        self.student.arch.spec(input, self.dataset.classes)?;
        self.teacher.train.validate()?;
        self.student.train.validate()?;
        self.kd.validate()?;
        self.nonn.validate()?;
        self.devices.validate()?;
        let d = &self.dream;
        if !(d.fraction > 0.0 && d.fraction <= 1.0) || d.k == 0 || d.hyper.n_per_cluster == 0 {
            return Err(Error::InvalidConfig("dream needs fraction in (0,1], k > 0 and n_per_cluster > 0".into()));
        }
        if self.fan.k_devices == 0 || !(self.fan.resolution > 0.0) {
            return Err(Error::InvalidConfig("fan needs k_devices > 0 and a positive resolution".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        crate::codec::hex(&Sha256::digest(json))[..16].to_string()
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        self.teacher.arch.spec(self.dataset.input(), self.dataset.classes)
    }

    pub fn student_spec(&self) -> Result<ModelSpec> {
        self.student.arch.spec(self.dataset.input(), self.dataset.classes)
    }

    /// Training settings with the run seed folded in.
    pub fn seeded(&self, h: &TrainHyper, salt: u64) -> TrainHyper {
        TrainHyper { seed: self.seed.wrapping_mul(1000).wrapping_add(salt), ..h.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "kd": {"tau": 2.0}}"#).unwrap();
        assert_eq!((c.seed, c.kd.tau, c.kd.alpha), (7, 2.0, 0.9));
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"kd": {"temperature": 2.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dream": {"kk": 2}}"#).is_err());
    }
}
