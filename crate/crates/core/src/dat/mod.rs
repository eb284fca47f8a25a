//! Distilled attention transformer: importance attention, per-layer
//! sequence halving, and a generative decoder.

mod attention;
mod config;
mod model;

pub use attention::{attention, importance_scores, kept_queries, sampled_keys, select_queries, AttentionKind};
pub use config::DatConfig;
pub use model::{positional_encoding, DatMeta, DatModel, EncoderOutput, Pass};

use std::path::Path;

use crate::checkpoint;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "dat";

impl DatModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).expect("config serializes");
        checkpoint::write(path, CHECKPOINT_KIND, &meta, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read_kind(path, CHECKPOINT_KIND)?;
        let meta: DatMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::format(format!("{}: DAT metadata: {e}", path.display())))?;
        DatModel::from_parts(meta, &ck.params)
    }
}
