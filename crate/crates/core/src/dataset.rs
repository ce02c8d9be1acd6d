//! Trajectory datasets and their on-disk format.
//!
//! File layout (little-endian): `b"CINDM1"`, `u16` version, `u64` n_sims,
//! `u32` frames, `u32` bodies, `u32` features (= 4), `f64` dt_record,
//! `u64` seed, 32-byte SHA-256 config digest, `u32` config JSON length, the
//! config JSON, then `f32` values in `[sim][frame][body][feature]` order.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{rollout, sample_initial, SimConfig, Trajectory, FEATURES};

pub const MAGIC: &[u8; 6] = b"CINDM1";
pub const VERSION: u16 = 1;

/// In-memory dataset of equally shaped trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub n_sims: usize,
    pub n_frames: usize,
    pub n_bodies: usize,
    pub dt_record: f64,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_sims: usize,
    pub n_frames: usize,
    pub n_bodies: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// SHA-256 of the canonical JSON form of a serializable config.
pub fn config_digest<C: Serialize>(config: &C) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn frame_width(&self) -> usize {
        self.n_bodies * FEATURES
    }

    pub fn sim(&self, i: usize) -> &[f32] {
        let n = self.n_frames * self.frame_width();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn trajectory(&self, i: usize) -> Result<Trajectory> {
        Trajectory::new(
            self.n_frames,
            self.n_bodies,
            self.dt_record,
            self.sim(i).iter().map(|&v| v as f64).collect(),
        )
    }

    /// Runs `n_sims` simulations; simulation `i` uses its own RNG stream
    /// derived from `(config.seed, i)`.
    pub fn generate(config: &SimConfig, n_sims: usize) -> Result<Self> {
        config.validate()?;
        let trajs: Vec<Trajectory> = (0..n_sims)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(config.seed, i as u64);
                let init = sample_initial(config, &mut r)?;
                rollout(&init, config)
            })
            .collect::<Result<_>>()?;
        let data = trajs.iter().flat_map(|t| t.data.iter().map(|&v| v as f32)).collect();
        Ok(Self {
            config: config.clone(),
            n_sims,
            n_frames: config.n_frames(),
            n_bodies: config.n_bodies,
            dt_record: config.dt_record(),
            data,
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            n_sims: self.n_sims,
            n_frames: self.n_frames,
            n_bodies: self.n_bodies,
            seed: self.config.seed,
            config_digest: hex(&config_digest(&self.config)),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n_sims as u64).to_le_bytes())?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_bodies as u32).to_le_bytes())?;
        w.write_all(&(FEATURES as u32).to_le_bytes())?;
        w.write_all(&self.dt_record.to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        w.write_all(&config_digest(&self.config))?;
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_arr(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n_sims = u64::from_le_bytes(read_arr(&mut r)?) as usize;
        let n_frames = u32::from_le_bytes(read_arr(&mut r)?) as usize;
        let n_bodies = u32::from_le_bytes(read_arr(&mut r)?) as usize;
        let features = u32::from_le_bytes(read_arr(&mut r)?) as usize;
        if features != FEATURES {
            return Err(Error::Format(format!("expected {FEATURES} features, found {features}")));
        }
        let dt_record = f64::from_le_bytes(read_arr(&mut r)?);
        let seed = u64::from_le_bytes(read_arr(&mut r)?);
        let digest: [u8; 32] = read_arr(&mut r)?;
        let json_len = u32::from_le_bytes(read_arr(&mut r)?) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let config: SimConfig = serde_json::from_slice(&json)?;
        if config_digest(&config) != digest || config.seed != seed {
            return Err(Error::Format("config digest does not match header".into()));
        }
        let count = n_sims * n_frames * n_bodies * features;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            config,
            n_sims,
            n_frames,
            n_bodies,
            dt_record,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_arr<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Generates and writes a dataset, returning its summary.
pub fn generate_dataset(config: &SimConfig, n_sims: usize, out: &Path) -> Result<DatasetSummary> {
    let ds = Dataset::generate(config, n_sims)?;
    ds.save(out)?;
    Ok(ds.summary())
}
