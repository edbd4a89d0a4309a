//! Stack checkpoints: a JSON manifest plus one `FTR1` file per tensor,
//! named `block{i}.{param_name}.ftr`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{FeatERBlockParams, ParamKind, VanillaBlockParams};
use super::stack::{Architecture, StackParams};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub depth: usize,
    pub heads: usize,
    pub blocks: Vec<ManifestBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBlock {
    pub index: usize,
    /// parameter name → file name relative to the manifest
    pub tensors: BTreeMap<String, String>,
}

fn tensor_file(block: usize, name: &str) -> String {
    format!("block{block}.{name}.ftr")
}

/// Writes the manifest and tensor files into `dir` (created if missing) and
/// returns every path written.
pub fn save_checkpoint(dir: &Path, params: &StackParams) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let named: Vec<(usize, Vec<(&'static str, ParamKind, &Tensor)>)> = match params {
        StackParams::Vanilla(b) => b.iter().map(|p| (p.heads, p.named())).collect(),
        StackParams::Feater(b) => b.iter().map(|p| (p.heads, p.named())).collect(),
    };
    let mut written = Vec::new();
    let mut blocks = Vec::with_capacity(named.len());
    for (i, (_, tensors)) in named.iter().enumerate() {
        let mut files = BTreeMap::new();
        for (name, _, t) in tensors {
            let file = tensor_file(i, name);
            let path = dir.join(&file);
            write_tensor(BufWriter::new(File::create(&path)?), t)?;
            written.push(path);
            files.insert((*name).to_owned(), file);
        }
        blocks.push(ManifestBlock {
            index: i,
            tensors: files,
        });
    }
    let manifest = CheckpointManifest {
        architecture: params.architecture(),
        depth: params.depth(),
        heads: named.first().map_or(1, |(h, _)| *h),
        blocks,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    written.push(path);
    Ok(written)
}

pub fn load_checkpoint(dir: &Path) -> Result<StackParams> {
    let manifest: CheckpointManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.blocks.len() != manifest.depth {
        return Err(Error::Format(format!(
            "manifest lists {} blocks for depth {}",
            manifest.blocks.len(),
            manifest.depth
        )));
    }
    fn lookup<'a>(dir: &'a Path, block: &'a ManifestBlock) -> impl FnMut(&str) -> Result<Tensor> + 'a {
        move |name| {
            let file = block.tensors.get(name).ok_or_else(|| {
                Error::Format(format!("block {} is missing tensor {name}", block.index))
            })?;
            read_tensor(BufReader::new(File::open(dir.join(file))?))
        }
    }
    let mut blocks = manifest.blocks.clone();
    blocks.sort_by_key(|b| b.index);
    Ok(match manifest.architecture {
        Architecture::Vanilla => StackParams::Vanilla(
            blocks
                .iter()
                .map(|b| VanillaBlockParams::from_named(manifest.heads, lookup(dir, b)))
                .collect::<Result<_>>()?,
        ),
        Architecture::Feater => StackParams::Feater(
            blocks
                .iter()
                .map(|b| FeatERBlockParams::from_named(manifest.heads, lookup(dir, b)))
                .collect::<Result<_>>()?,
        ),
    })
}
