//! Checkpoints: one `DTNS` file per parameter tensor (spectral weights
//! gathered to their global `ky` extent) plus a `manifest.txt` of
//! `key=value` lines describing the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{shard_ky, Activation, DistributedFno, FnoConfig, FnoError, FnoParams, Result};
use crate::comm::Communicator;
use crate::tensor::{tensor_read, tensor_write, Dense, Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(msg: impl Into<String>) -> FnoError {
    FnoError::Checkpoint(msg.into())
}

impl Manifest {
    pub fn from_config(config: &FnoConfig, dtype: &str) -> Self {
        let mut m = Manifest::default();
        m.set("format", "dfno-checkpoint-1");
        m.set("dtype", dtype);
        m.set("batch", config.batch);
        m.set("grid", join(&config.grid));
        m.set("in_channels", config.in_channels);
        m.set("out_channels", config.out_channels);
        m.set("width", config.width);
        m.set("num_blocks", config.num_blocks);
        m.set("modes", join(&config.modes));
        m.set("activation", config.activation);
        m.set("num_ranks", config.num_ranks);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| bad(format!("manifest lacks `{key}`")))
    }

    fn number(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| bad(format!("`{key}` = `{v}` is not a count")))
    }

    fn quad(&self, key: &str) -> Result<[usize; 4]> {
        let v = self.require(key)?;
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("`{key}` = `{v}` is not a list of counts")))?;
        parts.try_into().map_err(|_| bad(format!("`{key}` needs four entries, got `{v}`")))
    }

    pub fn config(&self) -> Result<FnoConfig> {
        let activation: Activation = self.require("activation")?.parse().map_err(bad)?;
        let config = FnoConfig {
            batch: self.number("batch")?,
            grid: self.quad("grid")?,
            in_channels: self.number("in_channels")?,
            out_channels: self.number("out_channels")?,
            width: self.number("width")?,
            num_blocks: self.number("num_blocks")?,
            modes: self.quad("modes")?,
            activation,
            num_ranks: self.number("num_ranks")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn write_tensor<E: crate::tensor::Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    tensor_write(&t.clone().into_dense(), &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_tensor<E: crate::tensor::Element>(path: &Path) -> Result<Tensor<E>> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?);
    Ok(Tensor::from_dense(tensor_read(&mut r)?)?)
}

/// Collective. Gathers each block's spectral shards onto rank 0, which writes
/// the checkpoint into `dir`; `extra` entries are added to the manifest.
pub fn save_checkpoint<T: Real>(
    comm: &mut Communicator,
    model: &DistributedFno<T>,
    dir: &Path,
    extra: &[(&str, String)],
) -> Result<()> {
    let ky = model.layout().ky_part.clone();
    let mut full = Vec::with_capacity(model.params().spectral.len());
    for w in &model.params().spectral {
        full.push(comm.gather(0, w, &ky)?);
    }
    if comm.rank() != 0 {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    let p = model.params();
    write_tensor(&dir.join("encoder.dtns"), &p.encoder)?;
    write_tensor(&dir.join("decoder.dtns"), &p.decoder)?;
    for (i, w) in full.into_iter().enumerate() {
        write_tensor(&dir.join(format!("spectral_{i}.dtns")), &w.expect("root receives the gather"))?;
    }
    let mut manifest = Manifest::from_config(model.config(), T::DTYPE.name());
    for (k, v) in extra {
        manifest.set(k, v);
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(())
}

/// Reads a checkpoint and returns `rank`'s parameters for `num_ranks` ranks
/// (which may differ from the rank count it was written with).
pub fn load_checkpoint<T: Real>(dir: &Path, num_ranks: usize, rank: usize) -> Result<(FnoConfig, FnoParams<T>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = Manifest::parse(&text)?;
    let dtype = manifest.require("dtype")?;
    if dtype != T::DTYPE.name() {
        return Err(bad(format!("checkpoint holds {dtype}, requested {}", T::DTYPE.name())));
    }
    let config = FnoConfig { num_ranks, ..manifest.config()? };
    config.validate()?;
    let ky = config.ky_partition()?;
    let encoder = read_tensor(&dir.join("encoder.dtns"))?;
    let decoder = read_tensor(&dir.join("decoder.dtns"))?;
    let mut spectral = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let w = read_tensor(&dir.join(format!("spectral_{i}.dtns")))?;
        if w.shape() != &config.spectral_weight_shape() {
            return Err(bad(format!("spectral_{i} has shape {}", w.shape())));
        }
        spectral.push(shard_ky(&w, &ky, rank));
    }
    let params = FnoParams { encoder, decoder, spectral };
    // shape validation
    DistributedFno::new(config.clone(), params.clone(), rank)?;
    Ok((config, params))
}
