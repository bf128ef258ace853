//! Stage records: what each stage read and wrote, under which manifest and
//! seed. A stage whose record still matches its inputs and outputs is
//! skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::pipeline::manifest::hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub schema_version: u32,
    pub manifest_hash: String,
    pub seed: u64,
    pub version: String,
    /// Relative path to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Hashes of `paths`, keyed by their path relative to `root`.
pub fn hash_files(root: &Path, paths: &[String]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.clone(), file_hash(&root.join(p))?)))
        .collect()
}

impl Provenance {
    /// True when the recorded run used the same inputs and every output is
    /// still on disk unchanged.
    pub fn is_current(&self, root: &Path, manifest_hash: &str, seed: u64, inputs: &BTreeMap<String, String>) -> bool {
        self.manifest_hash == manifest_hash
            && self.seed == seed
            && &self.inputs == inputs
            && self
                .outputs
                .iter()
                .all(|(p, h)| file_hash(&root.join(p)).is_ok_and(|cur| &cur == h))
    }
}
