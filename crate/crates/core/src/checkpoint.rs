//! Checkpoints: a binary file of named parameter arrays and optimizer moments,
//! plus a TOML manifest that is enough to rebuild the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::denoiser::DenoiserParams;
use crate::diffusion::{Adam, Trainer};
use crate::error::{Error, Result};
use crate::motion::PoseStats;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DYCK";
pub const WEIGHTS_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub param_count: usize,
    /// Hash of the training corpus directory.
    pub data_hash: String,
    /// SHA-256 of the weights file.
    pub weights_sha256: String,
    /// Mean training loss of each completed epoch.
    pub losses: Vec<f64>,
    pub pose_stats: PoseStats,
    pub run: RunConfig,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: DenoiserParams,
    pub adam: Adam,
}

impl Checkpoint {
    /// Rebuilds a trainer positioned after the last saved epoch.
    pub fn into_trainer(self) -> Result<Trainer> {
        let run = &self.manifest.run;
        let mut trainer = Trainer::new(self.params, run.schedule()?, run.train.clone(), run.seed)?;
        trainer.adam = self.adam;
        trainer.epoch = self.manifest.epoch;
        Ok(trainer)
    }
}

pub fn weights_path(dir: &Path) -> PathBuf {
    dir.join(WEIGHTS_FILE)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters (by name) and the optimizer state.
pub fn encode_weights(params: &DenoiserParams, adam: &Adam) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    put_u32(&mut out, params.store.len() as u32);
    for (name, t) in params.store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out.extend_from_slice(&adam.t.to_le_bytes());
    for t in adam.m.iter().chain(&adam.v) {
        put_tensor(&mut out, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("weights file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::Corrupt(format!("tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n <= self.bytes.len() / 8)
            .ok_or_else(|| Error::Corrupt("tensor too large".into()))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

/// Loads stored arrays into `params` (matched by name and shape) and returns the optimizer.
pub fn decode_weights(bytes: &[u8], params: &mut DenoiserParams) -> Result<Adam> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::BadMagic { expected: "DYCK" });
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != params.store.len() {
        return Err(Error::Corrupt(format!(
            "{count} stored arrays, model has {}",
            params.store.len()
        )));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("parameter name".into()))?;
        let id = params
            .store
            .id(name)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter {name}")))?;
        let t = r.tensor()?;
        if t.shape() != params.store.get(id).shape() {
            return Err(Error::Corrupt(format!("parameter {name} has shape {:?}", t.shape())));
        }
        params.store.set(id, t)?;
    }
    let mut adam = Adam::new(params);
    adam.t = r.u64()?;
    let expected: Vec<Vec<usize>> = params.store.iter().map(|(_, t)| t.shape().to_vec()).collect();
    for slot in 0..2 * count {
        let t = r.tensor()?;
        if t.shape() != expected[slot % count].as_slice() {
            return Err(Error::Corrupt("optimizer moment shape".into()));
        }
        if slot < count {
            adam.m[slot] = t;
        } else {
            adam.v[slot - count] = t;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes in weights file".into()));
    }
    Ok(adam)
}

/// Writes `weights.bin` and `manifest.toml` into `dir`, creating it if needed.
pub fn save(
    dir: &Path,
    trainer: &Trainer,
    run: &RunConfig,
    pose_stats: &PoseStats,
    data_hash: &str,
    losses: &[f64],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let weights = encode_weights(&trainer.params, &trainer.adam);
    let manifest = CheckpointManifest {
        format_version: WEIGHTS_VERSION,
        epoch: trainer.epoch,
        param_count: trainer.params.num_params(),
        data_hash: data_hash.to_string(),
        weights_sha256: hex::encode(Sha256::digest(&weights)),
        losses: losses.to_vec(),
        pose_stats: pose_stats.clone(),
        run: run.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(weights_path(dir), &weights)?;
    fs::write(manifest_path(dir), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(manifest_path(dir))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Corrupt(format!("checkpoint manifest: {e}")))?;
    manifest.run.validate()?;
    Ok(manifest)
}

/// Reads a checkpoint, verifying the weights hash and the parameter count.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(weights_path(dir))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(Error::Corrupt("weights file does not match the manifest hash".into()));
    }
    let mut params = DenoiserParams::init(manifest.run.denoiser_config(), manifest.run.seed)?;
    if params.num_params() != manifest.param_count {
        return Err(Error::Corrupt(format!(
            "manifest records {} parameters, config builds {}",
            manifest.param_count,
            params.num_params()
        )));
    }
    let adam = decode_weights(&bytes, &mut params)?;
    Ok(Checkpoint { manifest, params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small_run() -> RunConfig {
        let mut run = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        run.model.n_blocks = Some(1);
        run.model.latent_dim = Some(8);
        run.model.d_text = 4;
        run.model.d_state = 2;
        run.diffusion.steps = 20;
        run.diffusion.ddim_steps = 5;
        run
    }

    fn trainer(run: &RunConfig) -> Trainer {
        let params = DenoiserParams::init(run.denoiser_config(), run.seed).unwrap();
        let mut t = Trainer::new(params, run.schedule().unwrap(), run.train.clone(), run.seed).unwrap();
        let mut r = crate::rng::stream(0, "perturb");
        let ids: Vec<_> = t.params.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let shape = t.params.store.get(id).shape().to_vec();
            t.params.store.set(id, Tensor::randn(&shape, 1.0, &mut r)).unwrap();
            t.adam.m[i] = Tensor::randn(&shape, 1.0, &mut r);
            t.adam.v[i] = Tensor::filled(&shape, 0.25);
        }
        t.adam.t = 17;
        t.epoch = 3;
        t
    }

    #[test]
    fn save_then_load_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let run = small_run();
        let t = trainer(&run);
        let stats = PoseStats::identity(crate::motion::D_POSE);
        save(dir.path(), &t, &run, &stats, "abc", &[2.0, 1.5, 1.25]).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.params.store, t.params.store);
        assert_eq!(ck.adam, t.adam);
        assert_eq!(ck.manifest.run, run);
        assert_eq!(ck.manifest.pose_stats, stats);
        assert_eq!(ck.manifest.losses, vec![2.0, 1.5, 1.25]);
        let resumed = ck.into_trainer().unwrap();
        assert_eq!(resumed.epoch, 3);
        assert_eq!(resumed.adam.t, 17);
    }

    #[test]
    fn tampered_or_truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = small_run();
        let t = trainer(&run);
        save(dir.path(), &t, &run, &PoseStats::identity(15), "abc", &[]).unwrap();
        let mut bytes = fs::read(weights_path(dir.path())).unwrap();
        bytes[40] ^= 1;
        fs::write(weights_path(dir.path()), &bytes).unwrap();
        assert_eq!(load(dir.path()).unwrap_err().kind(), crate::ErrorKind::Io);

        let good = encode_weights(&t.params, &t.adam);
        let mut params = DenoiserParams::init(run.denoiser_config(), 0).unwrap();
        assert!(decode_weights(&good[..good.len() - 3], &mut params).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_weights(&bad_magic, &mut params),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let run = small_run();
        let t = trainer(&run);
        let bytes = encode_weights(&t.params, &t.adam);
        let mut other = run.clone();
        other.model.latent_dim = Some(10);
        let mut params = DenoiserParams::init(other.denoiser_config(), 0).unwrap();
        assert!(decode_weights(&bytes, &mut params).is_err());
    }
}
