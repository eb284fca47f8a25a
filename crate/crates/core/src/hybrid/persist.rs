use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::HybridModel;
use crate::asm::AsmModel;
use crate::dat::DatModel;
use crate::data::StandardizationParams;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const NORMAL_FILE: &str = "normal.bin";
const EXTREME_FILE: &str = "extreme.bin";
const ASM_FILE: &str = "asm.bin";
const STANDARDIZER_FILE: &str = "standardizer.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub normal: String,
    pub extreme: Option<String>,
    pub extreme_absent_reason: Option<String>,
    pub asm: String,
    pub standardizer: String,
    pub blend_weight: f64,
    #[serde(with = "crate::util::f64_or_inf")]
    pub threshold: f64,
    pub seed: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Checks that a manifest entry is a bare file name inside the directory.
fn member(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = Path::new(name);
    if p.components().count() != 1 || p.file_name().is_none() {
        return Err(Error::format(format!(
            "manifest entry `{name}` is not a plain file name"
        )));
    }
    Ok(dir.join(p))
}

impl HybridModel {
    /// Writes the checkpoint directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.normal.save(&dir.join(NORMAL_FILE))?;
        self.asm.save(&dir.join(ASM_FILE))?;
        let extreme_path = dir.join(EXTREME_FILE);
        match &self.extreme {
            Some(e) => e.save(&extreme_path)?,
            None if extreme_path.exists() => fs::remove_file(&extreme_path).map_err(|e| Error::io(&extreme_path, e))?,
            None => {}
        }
        write_text(&dir.join(STANDARDIZER_FILE), &self.standardizer.to_json())?;
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            normal: NORMAL_FILE.into(),
            extreme: self.extreme.as_ref().map(|_| EXTREME_FILE.into()),
            extreme_absent_reason: self.extreme_absent_reason.clone(),
            asm: ASM_FILE.into(),
            standardizer: STANDARDIZER_FILE.into(),
            blend_weight: self.blend_weight,
            threshold: self.threshold,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_text(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_str(&read_text(&manifest_path)?)
            .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "checkpoint manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        let normal = DatModel::load(&member(dir, &manifest.normal)?)?;
        let extreme = match &manifest.extreme {
            Some(name) => Some(DatModel::load(&member(dir, name)?)?),
            None => None,
        };
        let asm = AsmModel::load(&member(dir, &manifest.asm)?)?;
        let standardizer = StandardizationParams::from_json(&read_text(&member(dir, &manifest.standardizer)?)?)?;
        HybridModel::from_parts(
            normal,
            extreme,
            manifest.extreme_absent_reason,
            asm,
            manifest.threshold,
            standardizer,
            manifest.blend_weight,
            manifest.seed,
        )
        .map_err(|e| Error::format(format!("{}: inconsistent checkpoint: {e}", dir.display())))
    }
}
