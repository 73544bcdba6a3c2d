//! Resumable training state: the learned kernel and data plus the level
//! history, tied to the generating config by a fingerprint.
//!
//! Refitting is deterministic in the kernel and data, so a reloaded model
//! reproduces the saved one's predictions bit for bit; nothing derived from
//! the factorization needs to be stored.

use std::fs;
use std::io;
use std::path::Path;

use gpclf::episodic::{EpisodeRecord, RoAEstimate};
use gpclf::gp::{GpError, GpModel, TrainingSet};
use gpclf::kernels::AdpKernel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Fingerprint of the (config text, effective seed) pair that produced
    /// this state; see [`config_fingerprint`].
    pub config_sha256: String,
    pub kernel: AdpKernel,
    pub data: TrainingSet,
    pub roa: RoAEstimate,
    pub records: Vec<EpisodeRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string(self).map_err(io::Error::other)?;
        fs::write(path, text)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| io::Error::other(format!("checkpoint {} is corrupt: {e}", path.display())))
    }

    pub fn rebuild_model(&self) -> Result<GpModel, GpError> {
        GpModel::fit(self.kernel.clone(), self.data.clone())
    }
}

/// SHA-256 over the raw config text and the effective seed. The seed enters
/// separately because `--seed` overrides the file without editing it.
pub fn config_fingerprint(config_text: &str, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    hasher.update(b"\0seed=");
    hasher.update(seed.to_le_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
