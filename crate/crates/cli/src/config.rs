//! The run configuration file.
//!
//! A TOML document with five optional tables; every key has a default, so
//! an empty file is a valid configuration. Flags given on the command line
//! override the file.
//!
//! ```toml
//! [model]
//! family = "tensor2"        # tensor2 | tensor4 | sh
//! order = 1                 # SH order n (degrees 0, 2, ..., 2n); sh only
//!
//! [sampler]
//! cycles = 2000
//! burn_in = "auto"          # "auto" or a number of cycles
//! thin = 10
//! block_radius = 2
//! seed = 1
//! positivity = "constrained" # constrained | counting
//! workers = 1
//! double_scoring = true
//! inflation = 1.0
//! theta0_every_cycle = false
//! burn_in_window = 500
//! theta0_prior = { kind = "flat" }            # or { kind = "intrinsic", rho = 0.5 }
//! hyper = { kind = "estimated" }              # or { kind = "fixed", values = [...] }
//!
//! [simulate]
//! sigma = 50.0
//! seed = 1
//! shells = [500.0, 1000.0, 2000.0]
//! # quantize = 50.0
//!
//! [init]
//! b_max = 5000.0
//!
//! [paths]
//! data = "phantom"          # dataset stem (.hdr/.scheme/.f32)
//! init = "init.json"
//! run = "run"               # fit output directory
//! export = "maps"
//! ```
//!
//! Fixed hyperparameter values are given in the order printed by `fit`:
//! `(eta, lambda)` for tensor2, `(eta, lambda, gamma)` for tensor4 and
//! `a_0^2, a_2^2, ...` for SH.

use std::path::{Path, PathBuf};

use ricefield::data_io::STANDARD_SHELLS;
use ricefield::design::ModelSpec;
use ricefield::priors::{Hyper, IsoPrecision2, IsoPrecision4, PowerSpectrum};
use ricefield::sampler::{BurnIn, HyperMode, PositivityMode, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub simulate: SimulateSection,
    pub init: InitSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Tensor2,
    Tensor4,
    Sh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
    pub order: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { family: FamilyName::Tensor2, order: 1 }
    }
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        match self.family {
            FamilyName::Tensor2 => ModelSpec::tensor2(),
            FamilyName::Tensor4 => ModelSpec::tensor4(),
            FamilyName::Sh => ModelSpec::sh(self.order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoWord {
    #[serde(rename = "auto")]
    Auto,
}

/// `"auto"` or a cycle count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BurnInSetting {
    Cycles(u64),
    Word(AutoWord),
}

impl BurnInSetting {
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Word(AutoWord::Auto));
        }
        s.parse().map(Self::Cycles).map_err(|_| format!("burn-in must be 'auto' or a cycle count, got '{s}'"))
    }

    fn to_sampler(self) -> BurnIn {
        match self {
            Self::Cycles(n) => BurnIn::Fixed(n),
            Self::Word(AutoWord::Auto) => BurnIn::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Theta0Prior {
    Flat,
    /// Pairwise-difference prior on `θ₀` with precision `rho`.
    Intrinsic { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HyperPrior {
    Estimated,
    /// Held at `values`; an empty list keeps the initial values.
    Fixed {
        #[serde(default)]
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub cycles: u64,
    pub burn_in: BurnInSetting,
    pub thin: u64,
    pub block_radius: usize,
    pub seed: u64,
    pub positivity: PositivityMode,
    pub workers: usize,
    pub double_scoring: bool,
    pub inflation: f64,
    pub theta0_every_cycle: bool,
    pub burn_in_window: u64,
    pub theta0_prior: Theta0Prior,
    pub hyper: HyperPrior,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            cycles: d.cycles,
            burn_in: BurnInSetting::Word(AutoWord::Auto),
            thin: d.thin,
            block_radius: d.block_radius,
            seed: d.seed,
            positivity: d.positivity,
            workers: d.workers,
            double_scoring: d.double_scoring,
            inflation: d.inflation,
            theta0_every_cycle: d.theta0_every_cycle,
            burn_in_window: d.burn_in_window,
            theta0_prior: Theta0Prior::Flat,
            hyper: HyperPrior::Estimated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub sigma: f64,
    pub seed: u64,
    pub shells: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantize: Option<f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { sigma: 50.0, seed: 1, shells: STANDARD_SHELLS.to_vec(), quantize: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub b_max: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { b_max: 5000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub init: PathBuf,
    pub run: PathBuf,
    pub export: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "phantom".into(),
            init: "init.json".into(),
            run: "run".into(),
            export: "maps".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.model.family == FamilyName::Sh && self.model.order == 0 {
            return bad("model.order must be >= 1 for sh".into());
        }
        let s = &self.sampler;
        if s.thin == 0 {
            return bad("sampler.thin must be >= 1".into());
        }
        if s.workers == 0 {
            return bad("sampler.workers must be >= 1".into());
        }
        if !(s.inflation.is_finite() && s.inflation > 0.0) {
            return bad("sampler.inflation must be > 0".into());
        }
        if let Theta0Prior::Intrinsic { rho } = s.theta0_prior {
            if !(rho.is_finite() && rho > 0.0) {
                return bad("sampler.theta0_prior.rho must be > 0".into());
            }
        }
        if !(self.simulate.sigma.is_finite() && self.simulate.sigma >= 0.0) {
            return bad("simulate.sigma must be >= 0".into());
        }
        if self.simulate.shells.is_empty() {
            return bad("simulate.shells must not be empty".into());
        }
        if !(self.init.b_max > 0.0) {
            return bad("init.b_max must be > 0".into());
        }
        let p = &self.paths;
        let all = [&p.data, &p.init, &p.run, &p.export];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i] == all[j] {
                    return bad(format!("paths must be distinct; '{}' appears twice", all[i].display()));
                }
            }
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            cycles: s.cycles,
            burn_in: s.burn_in.to_sampler(),
            thin: s.thin,
            block_radius: s.block_radius,
            positivity: s.positivity,
            rho: match s.theta0_prior {
                Theta0Prior::Flat => 0.0,
                Theta0Prior::Intrinsic { rho } => rho,
            },
            hyper_mode: match s.hyper {
                HyperPrior::Estimated => HyperMode::Estimated,
                HyperPrior::Fixed { .. } => HyperMode::Fixed,
            },
            workers: s.workers,
            double_scoring: s.double_scoring,
            inflation: s.inflation,
            theta0_every_cycle: s.theta0_every_cycle,
            seed: s.seed,
            burn_in_window: s.burn_in_window,
            ..SamplerConfig::default()
        }
    }

    /// Fixed hyperparameters, if configured with explicit values.
    pub fn fixed_hyper(&self) -> Result<Option<Hyper>, CliError> {
        let HyperPrior::Fixed { values } = &self.sampler.hyper else { return Ok(None) };
        if values.is_empty() {
            return Ok(None);
        }
        let want = |n: usize| {
            if values.len() == n {
                Ok(())
            } else {
                Err(CliError::Usage(format!("sampler.hyper.values needs {n} entries, got {}", values.len())))
            }
        };
        let h = match self.model.family {
            FamilyName::Tensor2 => {
                want(2)?;
                Hyper::Iso2(IsoPrecision2::new(values[0], values[1])?)
            }
            FamilyName::Tensor4 => {
                want(3)?;
                Hyper::Iso4(IsoPrecision4::new(values[0], values[1], values[2])?)
            }
            FamilyName::Sh => {
                want(self.model.order + 1)?;
                Hyper::Spectrum(PowerSpectrum::new(values.clone(), 0.0)?)
            }
        };
        Ok(Some(h))
    }
}
