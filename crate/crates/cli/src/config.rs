use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltcast_core::data::CsvSchema;
use voltcast_core::eval::Units;
use voltcast_core::hybrid::PipelineConfig;
use voltcast_core::synth::SynthSpec;
use voltcast_core::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    Single,
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSettings {
    pub horizon: usize,
    pub mode: ForecastMode,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            horizon: 24,
            mode: ForecastMode::Iterative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub stride: usize,
    pub ar_order: usize,
    pub units: Units,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            stride: 1,
            ar_order: 24,
            units: Units::Standardized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            lengths: vec![128, 256, 512, 1024],
            d_model: 8,
            repeats: 9,
        }
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Input CSV; the synthetic corpus described by `synth` when absent.
    pub data: Option<PathBuf>,
    pub schema: CsvSchema,
    pub synth: SynthSpec,
    pub pipeline: PipelineConfig,
    /// Overrides both `synth.seed` and `pipeline.seed` when set.
    pub seed: Option<u64>,
    pub forecast: ForecastSettings,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
    pub out: PathBuf,
    pub verbosity: Verbosity,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            schema: CsvSchema::default(),
            synth: SynthSpec::default(),
            pipeline: PipelineConfig::default(),
            seed: None,
            forecast: ForecastSettings::default(),
            eval: EvalSettings::default(),
            bench: BenchSettings::default(),
            out: PathBuf::from("voltcast-out"),
            verbosity: Verbosity::Normal,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Pushes the master seed into the sub-configs that consume it.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.pipeline.seed = seed;
        }
    }

    pub fn threads(&mut self, threads: usize) {
        self.pipeline.dat_training.threads = threads;
        self.pipeline.asm_training.threads = threads;
    }
}

/// Worker threads from `VOLTCAST_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("VOLTCAST_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::usage(format!("VOLTCAST_THREADS: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::usage(format!(
                "VOLTCAST_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}
