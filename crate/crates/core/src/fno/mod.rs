//! Model-parallel FNO: encoder, `num_blocks` distributed spectral blocks and a
//! decoder, with reverse-mode gradients built from operator adjoints.

mod checkpoint;
mod model;
mod serial;
mod train;

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::comm::CommError;
use crate::partition::{Partition, PartitionError};
use crate::spectral::{retained_extent, select_axis, ModeSpec, SpectralError};
use crate::tensor::{DimLabel, Real, Shape, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use model::{block_backward, block_forward, BlockLayout, DistributedFno, ForwardCache};
pub use serial::{serial_block_forward, serial_fno_forward};
pub use train::{mse_loss, Adam, TrainState};

#[derive(Debug, Error)]
pub enum FnoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("replicated weights diverged: {0}")]
    Replication(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FnoError> = std::result::Result<T, E>;

/// Point-wise nonlinearity σ. Every kind satisfies σ(0) = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Identity,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Identity => v,
            Activation::Gelu => {
                let x = v.as_f64();
                T::of(0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)))
            }
        }
    }

    pub fn derivative<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
            Activation::Gelu => {
                let x = v.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
                T::of(cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FnoConfig {
    pub batch: usize,
    /// `[N_x, N_y, N_z, N_t]`
    pub grid: [usize; 4],
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden channel width.
    pub width: usize,
    pub num_blocks: usize,
    /// Retained mode counts `[m_x, m_y, m_z, m_t]`.
    pub modes: [usize; 4],
    pub activation: Activation,
    pub num_ranks: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        FnoConfig {
            batch: 1,
            grid: [16, 16, 16, 8],
            in_channels: 2,
            out_channels: 2,
            width: 2,
            num_blocks: 4,
            modes: [4, 4, 4, 3],
            activation: Activation::Gelu,
            num_ranks: 1,
        }
    }
}

impl FnoConfig {
    /// Retained extents `r_d = min(2·m_d, N_d)`.
    pub fn retained(&self) -> [usize; 4] {
        std::array::from_fn(|d| retained_extent(self.grid[d], self.modes[d]))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.batch, self.in_channels, self.out_channels, self.width, self.num_ranks];
        if positive.contains(&0) || self.grid.contains(&0) || self.modes.contains(&0) {
            return Err(FnoError::Config(format!("extents, channels, modes and rank count must be positive: {self:?}")));
        }
        if self.num_blocks == 0 {
            return Err(FnoError::Config("num_blocks must be at least 1".into()));
        }
        self.x_partition()?;
        self.ky_partition()?;
        Ok(())
    }

    pub fn x_partition(&self) -> Result<Partition> {
        Ok(Partition::block(DimLabel::X, self.grid[0], self.num_ranks)?)
    }

    pub fn ky_partition(&self) -> Result<Partition> {
        Ok(Partition::block(DimLabel::Ky, self.retained()[1], self.num_ranks)?)
    }

    pub fn mode_spec(&self) -> ModeSpec {
        ModeSpec::new(DimLabel::SPECTRAL.into_iter().zip(self.modes))
    }

    fn spatial_shape(&self, channels: usize) -> Shape {
        let [nx, ny, nz, nt] = self.grid;
        use DimLabel::*;
        Shape::new([(B, self.batch), (C, channels), (X, nx), (Y, ny), (Z, nz), (T, nt)]).expect("valid labels")
    }

    /// Global input shape `[b, c_in, x, y, z, t]`.
    pub fn input_shape(&self) -> Shape {
        self.spatial_shape(self.in_channels)
    }

    pub fn output_shape(&self) -> Shape {
        self.spatial_shape(self.out_channels)
    }

    /// Global spectral weight shape `[c, co, kx, ky, kz, kt]` over retained modes.
    pub fn spectral_weight_shape(&self) -> Shape {
        let [rx, ry, rz, rt] = self.retained();
        use DimLabel::*;
        Shape::new([(C, self.width), (Co, self.width), (Kx, rx), (Ky, ry), (Kz, rz), (Kt, rt)]).expect("valid labels")
    }

    /// Total number of output elements across all ranks.
    pub fn output_volume(&self) -> usize {
        self.output_shape().volume()
    }
}

/// Encoder/decoder channel-mixing weights (replicated) and the rank-local
/// `ky` shards of each block's spectral weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoParams<T: Real> {
    /// `[c: c_in, co: width]`
    pub encoder: Tensor<T>,
    /// `[c: width, co: c_out]`
    pub decoder: Tensor<T>,
    /// Per block `[c, co, kx, ky_local, kz, kt]`.
    pub spectral: Vec<Tensor<Complex<T>>>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let shape = Shape::new([(DimLabel::C, fan_in), (DimLabel::Co, fan_out)]).expect("valid labels");
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound))).expect("volume matches")
}

/// Deterministic parameters for `rank`. Weights are drawn globally in a fixed
/// order (encoder, decoder, then each block's full spectral tensor) and the
/// spectral tensors are then sliced to the rank's `ky` block, so shards from
/// different rank counts tile the same global weights.
pub fn init_params<T: Real>(config: &FnoConfig, seed: u64, rank: usize) -> Result<FnoParams<T>> {
    config.validate()?;
    let ky = config.ky_partition()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = glorot(&mut rng, config.in_channels, config.width);
    let decoder = glorot(&mut rng, config.width, config.out_channels);
    let scale = 1.0 / (config.width * config.width) as f64;
    let spectral = (0..config.num_blocks)
        .map(|_| {
            let global = Tensor::from_fn(config.spectral_weight_shape(), |_| {
                let re = scale * rng.gen::<f64>();
                let im = scale * rng.gen::<f64>();
                Complex::new(T::of(re), T::of(im))
            })
            .expect("volume matches");
            shard_ky(&global, &ky, rank)
        })
        .collect();
    Ok(FnoParams { encoder, decoder, spectral })
}

/// Slices a global spectral weight tensor to `rank`'s `ky` block.
pub fn shard_ky<T: Real>(global: &Tensor<Complex<T>>, ky: &Partition, rank: usize) -> Tensor<Complex<T>> {
    let axis = global.shape().axis(DimLabel::Ky).expect("spectral weights have ky");
    let r = ky.range(rank);
    let idx: Vec<usize> = (r.start..r.stop).collect();
    select_axis(global, axis, &idx)
}

impl<T: Real> FnoParams<T> {
    pub fn zeros_like(&self) -> FnoParams<T> {
        FnoParams {
            encoder: Tensor::zeros(self.encoder.shape().clone()).expect("shape valid"),
            decoder: Tensor::zeros(self.decoder.shape().clone()).expect("shape valid"),
            spectral: self.spectral.iter().map(|w| Tensor::zeros(w.shape().clone()).expect("shape valid")).collect(),
        }
    }

    /// Flattens every real component in a fixed order: encoder, decoder, then
    /// each spectral shard as interleaved `(re, im)`.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_components());
        out.extend_from_slice(self.encoder.data());
        out.extend_from_slice(self.decoder.data());
        for w in &self.spectral {
            out.extend(w.data().iter().flat_map(|c| [c.re, c.im]));
        }
        out
    }

    pub fn num_components(&self) -> usize {
        self.encoder.len() + self.decoder.len() + self.spectral.iter().map(|w| 2 * w.len()).sum::<usize>()
    }

    /// Inverse of [`FnoParams::flatten`] using `self` as the shape template.
    pub fn unflatten(&self, flat: &[T]) -> FnoParams<T> {
        assert_eq!(flat.len(), self.num_components(), "flat parameter length");
        let (enc, rest) = flat.split_at(self.encoder.len());
        let (dec, mut rest) = rest.split_at(self.decoder.len());
        let spectral = self
            .spectral
            .iter()
            .map(|w| {
                let (mine, tail) = rest.split_at(2 * w.len());
                rest = tail;
                Tensor::new(w.shape().clone(), mine.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect())
                    .expect("shape valid")
            })
            .collect();
        FnoParams {
            encoder: Tensor::new(self.encoder.shape().clone(), enc.to_vec()).expect("shape valid"),
            decoder: Tensor::new(self.decoder.shape().clone(), dec.to_vec()).expect("shape valid"),
            spectral,
        }
    }

    /// Real inner product over all components.
    pub fn dot(&self, other: &FnoParams<T>) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    }
}

/// Elements moved by each re-partition of one FNO block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockVolume {
    /// Off-rank elements of the truncated `x -> ky` re-partition, summed over ranks.
    pub truncated: u64,
    /// Off-rank elements if the full `[b, c, x, y, z, t]` tensor were re-partitioned `x -> y`.
    pub untruncated: u64,
    /// `(N_y·N_z·N_t) / (r_y·r_z·r_t)`.
    pub ratio: f64,
}

/// Predicted communication volume per re-partition. Equals
/// `b·c·N_x·r_y·r_z·r_t·(P−1)/P` when `P` divides `N_x` and `r_y`; in general
/// it is `b·c·r_z·r_t·(N_x·r_y − Σ_p |x_p|·|ky_p|)`, the exact off-rank count.
pub fn predicted_block_volume(config: &FnoConfig) -> Result<BlockVolume> {
    config.validate()?;
    let [nx, ny, nz, nt] = config.grid;
    let [_, ry, rz, rt] = config.retained();
    let bc = (config.batch * config.width) as u64;
    let xp = config.x_partition()?;
    let off_rank = |other: &Partition, other_extent: usize| -> u64 {
        let kept: usize = xp.ranges().iter().zip(other.ranges()).map(|(a, b)| a.len() * b.len()).sum();
        (nx * other_extent - kept) as u64
    };
    let truncated = bc * (rz * rt) as u64 * off_rank(&config.ky_partition()?, ry);
    let untruncated = match Partition::block(DimLabel::Y, ny, config.num_ranks) {
        Ok(yp) => bc * (nz * nt) as u64 * off_rank(&yp, ny),
        Err(_) => 0,
    };
    let ratio = (ny * nz * nt) as f64 / (ry * rz * rt) as f64;
    Ok(BlockVolume { truncated, untruncated, ratio })
}
