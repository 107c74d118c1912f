//! Manifest JSON and review-folder export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsir_core::dataset::ReviewFolder;
use fsir_core::{BenchmarkManifest, EmbeddingCorpus};

use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::fsem;

/// A manifest with its corpus, validated against each other.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub manifest: BenchmarkManifest,
    pub corpus: EmbeddingCorpus,
    pub corpus_path: PathBuf,
}

pub fn parse(bytes: &[u8]) -> Result<BenchmarkManifest> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn to_json(manifest: &BenchmarkManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(manifest)? + "\n")
}

/// Resolves the manifest's corpus path relative to the manifest file.
pub fn corpus_path(manifest_path: &Path, manifest: &BenchmarkManifest) -> PathBuf {
    let p = Path::new(&manifest.corpus);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn read(path: &Path) -> Result<BenchmarkManifest> {
    parse(&read_file(path)?)
}

pub fn write(manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    write_file(path, to_json(manifest)?.as_bytes())
}

/// Reads a manifest and its corpus and validates them.
pub fn load(path: &Path) -> Result<Benchmark> {
    let manifest = read(path)?;
    let corpus_path = corpus_path(path, &manifest);
    let corpus = fsem::read(&corpus_path)?;
    manifest.validate(&corpus)?;
    Ok(Benchmark {
        manifest,
        corpus,
        corpus_path,
    })
}

/// JSON object mapping item ids to image file paths.
pub fn read_image_paths(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn write_listing(dir: &Path, ids: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    write_file(&dir.join("manifest.txt"), text.as_bytes())
}

/// Writes `<out>/<query>/{true,false}/manifest.txt`. With `copy`, every listed
/// image file is copied next to its listing; each id then needs a path.
pub fn export_review_folders(
    folders: &[ReviewFolder],
    out: &Path,
    image_paths: Option<&BTreeMap<String, PathBuf>>,
    copy: bool,
) -> Result<()> {
    if copy {
        let ids = folders.iter().flat_map(|f| f.true_ids.iter().chain(&f.false_ids));
        for id in ids {
            if !image_paths.is_some_and(|p| p.contains_key(id)) {
                return Err(Error::MissingImagePath(id.clone()));
            }
        }
    }
    for f in folders {
        for (side, ids) in [("true", &f.true_ids), ("false", &f.false_ids)] {
            let dir = out.join(&f.query_id).join(side);
            write_listing(&dir, ids)?;
            if let (true, Some(paths)) = (copy, image_paths) {
                for id in ids {
                    let src = &paths[id];
                    let name = src.file_name().map_or_else(|| id.into(), |n| n.to_os_string());
                    let dst = dir.join(name);
                    std::fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
                }
            }
        }
    }
    Ok(())
}
