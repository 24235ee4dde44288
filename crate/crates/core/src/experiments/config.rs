//! Study configuration: a TOML file plus dotted-path overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::phantom::PhantomKind;
use crate::error::{Error, Result};
use crate::quantizers::QuantizerSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    CtrBaseline,
    #[default]
    Dadmm,
    DadmmK,
    DadmmJ,
    KSweep,
    NoiseLadder,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::CtrBaseline => "ctr-baseline",
            StudyKind::Dadmm => "dadmm",
            StudyKind::DadmmK => "dadmm-k",
            StudyKind::DadmmJ => "dadmm-j",
            StudyKind::KSweep => "k-sweep",
            StudyKind::NoiseLadder => "noise-ladder",
        }
    }
}

/// A step length given explicitly or derived from the operator norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum StepSize {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Auto => s.serialize_str("auto"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = StepSize;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"auto\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<StepSize, E> {
                match v {
                    "auto" => Ok(StepSize::Auto),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    pub side: usize,
    pub path: Option<PathBuf>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            kind: PhantomKind::ThreeLevel,
            side: 128,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub angles: usize,
    /// Defaults to enough bins to cover the grid diagonal.
    pub detectors: Option<usize>,
    pub spacing: f64,
    /// Embed the image in a zero border so every ray crosses the full object.
    pub pad: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            angles: 180,
            detectors: None,
            spacing: 1.0,
            pad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub nodes: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { nodes: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSection {
    pub rho: f64,
    pub eta1: StepSize,
    pub eta2: f64,
    pub inner_u: usize,
    pub inner_x: usize,
    pub outer: usize,
    pub stop_tol: f64,
}

impl Default for AdmmSection {
    fn default() -> Self {
        AdmmSection {
            rho: 1.0,
            eta1: StepSize::Auto,
            eta2: 0.2,
            inner_u: 10,
            inner_x: 10,
            outer: 1000,
            stop_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrSection {
    pub learning_rate: StepSize,
    /// Defaults to `admm.outer × admm.inner_u`, the dADMM gradient budget.
    pub iterations: Option<usize>,
    pub stop_tol: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Percent of `x_peak`.
    pub nsd: f64,
    pub seed: u64,
    /// Defaults to the noiseless sinogram maximum.
    pub x_peak: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub k: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k: (2..=6).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSection {
    pub nsd: Vec<f64>,
    pub methods: Vec<StudyKind>,
}

impl Default for LadderSection {
    fn default() -> Self {
        LadderSection {
            nsd: vec![0.0, 0.24, 0.77, 2.43],
            methods: vec![StudyKind::DadmmK, StudyKind::DadmmJ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// PSNR peak; defaults to the ground-truth maximum.
    pub i_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub pgm: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: None, pgm: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub phantom: PhantomConfig,
    pub geometry: GeometryConfig,
    pub partition: PartitionConfig,
    pub admm: AdmmSection,
    pub ctr: CtrSection,
    pub quantizer: QuantizerSpec,
    pub noise: NoiseSection,
    pub sweep: SweepSection,
    pub ladder: LadderSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string so `quantizer.kind=kmeans` needs no quoting.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let (last, parents) = keys.split_last().expect("split yields a key");
    let mut cur = table;
    for (i, key) in parents.iter().enumerate() {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {path}: {} is not a section", keys[..=i].join(".")))
        })?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl StudyConfig {
    /// Parses TOML text, applies overrides in order, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: StudyConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| {
                let at = e.path().to_string();
                Error::Config(format!("{at}: {}", e.into_inner()))
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phantom.kind == super::PhantomKind::File && self.phantom.path.is_none() {
            return bad("phantom.path is required for kind = \"file\"".into());
        }
        if self.phantom.side < super::MIN_SIDE {
            return bad(format!("phantom.side must be at least {}", super::MIN_SIDE));
        }
        if self.geometry.angles == 0 {
            return bad("geometry.angles must be positive".into());
        }
        if !(self.geometry.spacing > 0.0 && self.geometry.spacing.is_finite()) {
            return bad("geometry.spacing must be positive".into());
        }
        if self.partition.nodes == 0 || self.partition.nodes > self.geometry.angles {
            return bad(format!(
                "partition.nodes must lie in 1..={}",
                self.geometry.angles
            ));
        }
        for (key, step) in [("admm.eta1", self.admm.eta1), ("ctr.learning_rate", self.ctr.learning_rate)] {
            if let StepSize::Fixed(v) = step {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{key} must be positive or \"auto\", got {v}"));
                }
            }
        }
        if self.ctr.iterations == Some(0) {
            return bad("ctr.iterations must be positive".into());
        }
        if !(self.noise.nsd >= 0.0 && self.noise.nsd.is_finite()) {
            return bad("noise.nsd must be non-negative".into());
        }
        if self.noise.x_peak.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return bad("noise.x_peak must be positive".into());
        }
        if self.metrics.i_max.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return bad("metrics.i_max must be positive".into());
        }
        if self.sweep.k.len() < 3 || self.sweep.k.windows(2).any(|w| w[1] <= w[0]) || self.sweep.k[0] == 0 {
            return bad("sweep.k must hold at least 3 strictly increasing positive counts".into());
        }
        if self.ladder.nsd.is_empty() || self.ladder.nsd.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("ladder.nsd must be a non-empty list of non-negative levels".into());
        }
        if self
            .ladder
            .methods
            .iter()
            .any(|m| !matches!(m, StudyKind::Dadmm | StudyKind::DadmmK | StudyKind::DadmmJ | StudyKind::CtrBaseline))
        {
            return bad("ladder.methods may only name single-run studies".into());
        }
        self.quantizer
            .validate()
            .map_err(|e| Error::Config(format!("quantizer: {e}")))?;
        self.admm_config(1.0).validate()
    }

    /// Solver settings with the local step resolved to `eta1`.
    pub fn admm_config(&self, eta1: f64) -> crate::solvers::AdmmConfig {
        crate::solvers::AdmmConfig {
            rho: self.admm.rho,
            eta1,
            eta2: self.admm.eta2,
            inner_u: self.admm.inner_u,
            inner_x: self.admm.inner_x,
            outer: self.admm.outer,
            stop_tol: self.admm.stop_tol,
            quantizer: self.quantizer.clone(),
        }
    }

    pub fn ctr_iterations(&self) -> usize {
        self.ctr
            .iterations
            .unwrap_or(self.admm.outer * self.admm.inner_u)
    }
}
