use std::path::{Path, PathBuf};

use omnicond::ablate::{AblationSettings, CellSpec};
use omnicond::eval::EvalSettings;
use omnicond::model::ModelConfig;
use omnicond::synth::SynthConfig;
use omnicond::train::{default_schedule, TrainPlan};
use omnicond::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub clips: usize,
    /// Written to `<data>/heldout`.
    pub heldout: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            clips: 2000,
            heldout: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub seeds: Vec<u64>,
    /// Empty means the full standard grid.
    pub cells: Vec<CellSpec>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            cells: Vec::new(),
        }
    }
}

/// Everything a run needs, as read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub stages: Vec<TrainPlan>,
    pub train: TrainSection,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            dataset: DatasetSection::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            stages: default_schedule([1000, 4000, 2000]),
            train: TrainSection::default(),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
            grid: GridSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Digest of the canonical form: keys sorted, so the order they were
    /// written in does not matter.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let d = Sha256::digest(v.to_string().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {e}"));
        }
        if self.stages.is_empty() {
            errs.push("stages: at least one stage is required".into());
        }
        for (i, p) in self.stages.iter().enumerate() {
            if let Err(e) = p.validate() {
                errs.push(format!("stages[{i}]: {e}"));
            }
        }
        for (name, r) in [
            ("synth.lipsync_rate", self.synth.lipsync_rate),
            ("synth.pose_rate", self.synth.pose_rate),
            ("synth.aesthetic_rate", self.synth.aesthetic_rate),
            ("synth.silent_rate", self.synth.silent_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                errs.push(format!("{name} = {r} outside [0, 1]"));
            }
        }
        if self.synth.frames < 2 {
            errs.push("synth.frames must be >= 2".into());
        }
        if self.eval.steps == 0 {
            errs.push("eval.steps must be >= 1".into());
        }
        if let Err(e) = self.ablation.model.validate() {
            errs.push(format!("ablation.model: {e}"));
        }
        if self.grid.seeds.is_empty() {
            errs.push("grid.seeds must not be empty".into());
        }
        for (i, c) in self.grid.cells.iter().enumerate() {
            let bad = match *c {
                CellSpec::TData { fraction } => !(0.0..=1.0).contains(&fraction),
                CellSpec::Ratio { audio, pose } => {
                    !(0.0..=1.0).contains(&audio) || !(0.0..=1.0).contains(&pose)
                }
                CellSpec::Order { .. } => false,
            };
            if bad {
                errs.push(format!("grid.cells[{i}]: value outside [0, 1]"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Stage plans with seeds drawn from the run seed.
    pub fn plans(&self) -> Vec<TrainPlan> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, p)| TrainPlan {
                seed: derive_seed(self.seed, &format!("stage{i}")).wrapping_add(p.seed),
                ..p.clone()
            })
            .collect()
    }
}

/// Every random stream of a run is keyed by (run seed, purpose).
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{purpose}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
