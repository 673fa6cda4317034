use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use dfno_core::fno::{Activation, FnoConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum TransportKind {
    /// One thread per rank.
    Inproc,
    /// One child process per rank, connected over loopback sockets.
    Proc,
}

/// `a,b,c,d`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quad(pub [usize; 4]);

impl FromStr for Quad {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a non-negative integer")))
            .collect::<Result<_, _>>()?;
        let arr: [usize; 4] = parts.try_into().map_err(|v: Vec<usize>| format!("expected 4 comma-separated values, got {}", v.len()))?;
        Ok(Quad(arr))
    }
}

/// Comma-separated list of counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountList(pub Vec<usize>);

impl FromStr for CountList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a non-negative integer")))
            .collect::<Result<_, _>>()?;
        if v.is_empty() {
            return Err("empty list".into());
        }
        Ok(CountList(v))
    }
}

/// Flags shared by the model commands.
#[derive(Debug, Clone, Args)]
pub struct CommonOpts {
    /// Rank count P.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Global extents Nx,Ny,Nz,Nt.
    #[arg(long, default_value = "16,16,16,8")]
    pub grid: Quad,
    /// Input, hidden and output channel count.
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    /// Retained modes mx,my,mz,mt per axis.
    #[arg(long, default_value = "4,4,4,3")]
    pub modes: Quad,
    /// Number of FNO blocks.
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub dtype: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TransportKind::Inproc)]
    pub transport: TransportKind,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "gelu", value_parser = parse_activation)]
    pub activation: Activation,
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse()
}

impl CommonOpts {
    pub fn config(&self, batch: usize) -> FnoConfig {
        FnoConfig {
            batch,
            grid: self.grid.0,
            in_channels: self.channels,
            out_channels: self.channels,
            width: self.channels,
            num_blocks: self.blocks,
            modes: self.modes.0,
            activation: self.activation,
            num_ranks: self.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse() {
        assert_eq!("1, 2,3,4".parse::<Quad>().unwrap(), Quad([1, 2, 3, 4]));
        assert!("1,2,3".parse::<Quad>().is_err());
        assert!("1,x,3,4".parse::<Quad>().is_err());
        assert_eq!("16,32".parse::<CountList>().unwrap(), CountList(vec![16, 32]));
    }
}
