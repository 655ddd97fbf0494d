//! `.dym` motion files, JSON sidecars and the corpus manifest.
//!
//! A `.dym` file is the 4 magic bytes `DYMO`, five little-endian `u32` fields
//! (version, fps, frames, joints, persons), then `persons · frames · joints · 3`
//! little-endian `f32` values, person-major, then frame, then joint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DyadicSample, MotionSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DYM_MAGIC: &[u8; 4] = b"DYMO";
pub const DYM_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 5 * 4;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const PERSONS: u32 = 2;
const MOTION_DIR: &str = "motions";

/// Serializes the motion of a sample. Coordinates are stored as `f32`.
pub fn encode_dym(sample: &DyadicSample) -> Vec<u8> {
    let (len, joints) = (sample.len(), sample.a.joints());
    let mut out = Vec::with_capacity(HEADER_BYTES + 2 * len * joints * 3 * 4);
    out.extend_from_slice(DYM_MAGIC);
    for v in [DYM_VERSION, sample.fps(), len as u32, joints as u32, PERSONS] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for seq in [&sample.a, &sample.b] {
        for &v in seq.positions().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses `.dym` bytes into a sample with the given id and no texts.
pub fn decode_dym(bytes: &[u8], id: &str) -> Result<DyadicSample> {
    if bytes.len() < 4 || &bytes[..4] != DYM_MAGIC {
        return Err(Error::BadMagic { expected: "DYMO" });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, fps, len, joints, persons) = (field(0), field(1), field(2) as usize, field(3) as usize, field(4));
    if version != DYM_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DYM_VERSION,
        });
    }
    if persons != PERSONS {
        return Err(Error::Corrupt(format!("expected {PERSONS} persons, found {persons}")));
    }
    if fps == 0 || len == 0 || joints == 0 {
        return Err(Error::Corrupt(format!(
            "empty dimensions fps={fps} frames={len} joints={joints}"
        )));
    }
    let per_person = len * joints * 3;
    let expected = HEADER_BYTES + 2 * per_person * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, expected {}",
            bytes.len() - HEADER_BYTES,
            expected - HEADER_BYTES
        )));
    }
    let values: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corrupt("non-finite coordinate".into()));
    }
    let person = |k: usize| -> Result<MotionSequence> {
        let data = values[k * per_person..(k + 1) * per_person].to_vec();
        MotionSequence::new(Tensor::new(&[len, joints, 3], data)?, fps)
    };
    DyadicSample::new(id, person(0)?, person(1)?)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: String,
    template: String,
    texts: Vec<String>,
}

/// `x.dym` → `x.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the motion file and its sidecar.
pub fn write_motion(path: &Path, sample: &DyadicSample) -> Result<()> {
    fs::write(path, encode_dym(sample))?;
    let meta = Sidecar {
        id: sample.id.clone(),
        template: sample.template.clone(),
        texts: sample.texts.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

/// Reads a motion file and, when present, its sidecar.
pub fn read_motion(path: &Path) -> Result<DyadicSample> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut sample = decode_dym(&fs::read(path)?, stem)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", side.display())))?;
        sample.id = meta.id;
        sample.template = meta.template;
        sample.texts = meta.texts;
    }
    Ok(sample)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Motion file path relative to the corpus directory.
    pub path: String,
    pub frames: usize,
    pub template: String,
}

impl ManifestRecord {
    fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}\n", self.id, self.path, self.frames, self.template)
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Corrupt(format!(
                "manifest line {lineno}: expected 4 fields, got {}",
                f.len()
            )));
        }
        let frames = f[2]
            .parse()
            .map_err(|_| Error::Corrupt(format!("manifest line {lineno}: bad frame count {:?}", f[2])))?;
        Ok(ManifestRecord {
            id: f[0].to_string(),
            path: f[1].to_string(),
            frames,
            template: f[3].to_string(),
        })
    }
}

/// A corpus loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<DyadicSample>,
}

/// Writes every sample under `dir/motions/` plus `dir/manifest.tsv`; returns the manifest path.
pub fn write_corpus(dir: &Path, samples: &[DyadicSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join(MOTION_DIR))?;
    let mut manifest = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::invalid(format!(
                "sample id {:?} cannot be used as a file name",
                s.id
            )));
        }
        let rel = format!("{MOTION_DIR}/{}.dym", s.id);
        write_motion(&dir.join(&rel), s)?;
        manifest.push_str(
            &ManifestRecord {
                id: s.id.clone(),
                path: rel,
                frames: s.len(),
                template: s.template.clone(),
            }
            .line(),
        );
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    fs::read_to_string(dir.join(MANIFEST_FILE))?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ManifestRecord::parse(l, i + 1))
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let records = read_manifest(dir)?;
    let samples = records
        .iter()
        .map(|r| {
            let s = read_motion(&dir.join(&r.path))?;
            if s.len() != r.frames {
                return Err(Error::Corrupt(format!(
                    "{}: {} frames, manifest says {}",
                    r.path,
                    s.len(),
                    r.frames
                )));
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { records, samples })
}

/// SHA-256 over the manifest and every listed file with its sidecar, in manifest order.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_FILE))?);
    for r in read_manifest(dir)? {
        let path = dir.join(&r.path);
        h.update(fs::read(&path)?);
        let side = sidecar_path(&path);
        if side.exists() {
            h.update(fs::read(side)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
