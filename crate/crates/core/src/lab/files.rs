//! Episodes stored as a directory of feature and mask files:
//!
//! ```text
//! episode.txt            category = ..., support_ids = 0, 1, ...
//! query.fts              query_mask.pgm
//! support_000.fts        support_000_mask.pgm
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::segmenter::{Episode, FeatureProvider, SupportItem};

use super::config::KvConfig;
use super::fts::{read_features, write_features};
use super::pgm::{read_mask, write_mask};

fn support_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("support_{i:03}.fts")),
        dir.join(format!("support_{i:03}_mask.pgm")),
    )
}

pub fn write_episode(dir: &Path, e: &Episode) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if e.category.contains('\n') {
        return Err(Error::contract("category labels are single-line"));
    }
    write_features(&dir.join("query.fts"), &e.query)?;
    write_mask(&dir.join("query_mask.pgm"), &e.query_truth)?;
    for (i, s) in e.supports.iter().enumerate() {
        let (f, m) = support_paths(dir, i);
        write_features(&f, &s.layers)?;
        write_mask(&m, &s.mask)?;
    }
    let ids: Vec<String> = e.supports.iter().map(|s| s.id.to_string()).collect();
    let meta = format!(
        "category = {}\nsupport_ids = {}\n",
        e.category,
        ids.join(", ")
    );
    std::fs::write(dir.join("episode.txt"), meta)?;
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let mut meta = KvConfig::load(&dir.join("episode.txt"))?;
    let category: String = meta.take("category")?.unwrap_or_default();
    let ids: Vec<u32> = meta
        .take_list("support_ids")?
        .ok_or_else(|| Error::Config("episode.txt lacks support_ids".into()))?;
    meta.finish()?;
    let query = read_features(&dir.join("query.fts"))?;
    let truth = read_mask(&dir.join("query_mask.pgm"))?;
    let supports = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let (f, m) = support_paths(dir, i);
            SupportItem::new(id, read_features(&f)?, read_mask(&m)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Episode::new(query, truth, supports, category)
}

/// Reads an episode directory on demand.
#[derive(Debug, Clone)]
pub struct EpisodeDir(pub PathBuf);

impl FeatureProvider for EpisodeDir {
    fn episode(&self) -> Result<Episode> {
        read_episode(&self.0)
    }
}
