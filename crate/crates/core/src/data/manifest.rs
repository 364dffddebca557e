use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::pnm::{read_pnm, write_pnm};
use super::{generate_dataset, ConditionSample, CLASS_NAMES, NUM_CLASSES};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCount {
    pub name: String,
    pub count: usize,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub image: String,
    pub edge: String,
    pub depth: String,
    pub normal: String,
    pub hed: String,
    pub sketch: String,
    pub class: usize,
}

impl SampleEntry {
    fn files(&self) -> [&str; 6] {
        [
            &self.image,
            &self.edge,
            &self.depth,
            &self.normal,
            &self.hed,
            &self.sketch,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    /// Class histogram.
    pub classes: Vec<ClassCount>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Manifest(format!("{}: missing integer field \"version\"", path.display()))
        })?;
        if found != MANIFEST_VERSION as u64 {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: MANIFEST_VERSION,
                found: found as u32,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks counts and that every listed file exists and parses.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.count != self.samples.len() {
            return Err(Error::Manifest(format!(
                "count {} disagrees with {} listed samples",
                self.count,
                self.samples.len()
            )));
        }
        let mut missing = Vec::new();
        for entry in &self.samples {
            if entry.class >= NUM_CLASSES {
                return Err(Error::Manifest(format!(
                    "{}: class {} out of range",
                    entry.image, entry.class
                )));
            }
            for rel in entry.files() {
                let p = root.join(rel);
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Manifest(format!("missing files: {}", missing.join(", "))));
        }
        for entry in &self.samples {
            load_sample(root, entry)?;
        }
        Ok(())
    }
}

/// Writes one sample's six rasters under `root` with a shared file stem.
pub fn save_sample(root: &Path, stem: &str, sample: &ConditionSample) -> Result<SampleEntry> {
    let name = |kind: &str, ext: &str| format!("{stem}_{kind}.{ext}");
    let entry = SampleEntry {
        image: name("image", "ppm"),
        edge: name("edge", "pgm"),
        depth: name("depth", "pgm"),
        normal: name("normal", "ppm"),
        hed: name("hed", "pgm"),
        sketch: name("sketch", "pgm"),
        class: sample.class,
    };
    let maps = [
        &sample.image,
        &sample.edge,
        &sample.depth,
        &sample.normal,
        &sample.hed,
        &sample.sketch,
    ];
    for (rel, img) in entry.files().into_iter().zip(maps) {
        let p = root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_pnm(&p, img)?;
    }
    Ok(entry)
}

pub fn load_sample(root: &Path, entry: &SampleEntry) -> Result<ConditionSample> {
    let load = |rel: &str, channels: usize| -> Result<_> {
        let p: PathBuf = root.join(rel);
        let img = read_pnm(&p)?;
        if img.channels != channels {
            return Err(Error::MalformedHeader {
                path: p,
                msg: format!("expected {channels} channel(s), found {}", img.channels),
            });
        }
        Ok(img)
    };
    Ok(ConditionSample {
        class: entry.class,
        image: load(&entry.image, 3)?,
        edge: load(&entry.edge, 1)?,
        depth: load(&entry.depth, 1)?,
        normal: load(&entry.normal, 3)?,
        hed: load(&entry.hed, 1)?,
        sketch: load(&entry.sketch, 1)?,
    })
}

/// Generates `count` samples and writes them with a manifest into `root`.
pub fn save_dataset(root: &Path, count: usize, seed: u64) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let samples = generate_dataset(count, seed);
    let mut hist = [0usize; NUM_CLASSES];
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        hist[s.class] += 1;
        entries.push(save_sample(root, &format!("samples/{i:05}"), s)?);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        count,
        classes: CLASS_NAMES
            .iter()
            .zip(hist)
            .map(|(n, c)| ClassCount {
                name: n.to_string(),
                count: c,
            })
            .collect(),
        samples: entries,
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<ConditionSample>)> {
    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    manifest.validate(root)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| load_sample(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
