use num_complex::Complex;

use super::{Activation, FnoConfig, FnoError, FnoParams, Result};
use crate::comm::Communicator;
use crate::partition::Partition;
use crate::spectral::{
    fft_adjoint_dims, fft_dims, ifft_adjoint_dims, ifft_dims, pad_modes, truncate_modes, ModeSpec,
};
use crate::tensor::{einsum_channel_mix, einsum_spectral, DimLabel, Element, Real, Tensor};

use DimLabel::*;

const YZT: [DimLabel; 3] = [Y, Z, T];
const K_YZT: [DimLabel; 3] = [Ky, Kz, Kt];

/// Rank-local geometry of a distributed FNO block.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub x_part: Partition,
    pub ky_part: Partition,
    pub grid: [usize; 4],
    modes_yzt: ModeSpec,
    modes_x: ModeSpec,
}

impl BlockLayout {
    pub fn new(config: &FnoConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.mode_spec();
        Ok(BlockLayout {
            x_part: config.x_partition()?,
            ky_part: config.ky_partition()?,
            grid: config.grid,
            modes_yzt: spec.only(&K_YZT),
            modes_x: spec.only(&[Kx]),
        })
    }

    fn full_yzt(&self) -> [(DimLabel, usize); 3] {
        [(Ky, self.grid[1]), (Kz, self.grid[2]), (Kt, self.grid[3])]
    }

    fn full_x(&self) -> [(DimLabel, usize); 1] {
        [(Kx, self.grid[0])]
    }
}

/// One distributed FNO block on an `x`-partitioned real input.
///
/// `ℱ_yzt → 𝒮_yzt → ℛ_{x→ky} → ℱ_x → 𝒮_x → spectral weights → 𝒮ᵀ_x → ℱ⁻¹_x →
/// ℛ_{ky→x} → 𝒮ᵀ_yzt → ℱ⁻¹_yzt → Re`. Returns the output and the truncated
/// spectral input (needed for the weight gradient).
pub fn block_forward<T: Real>(
    comm: &mut Communicator,
    layout: &BlockLayout,
    x: &Tensor<T>,
    weights: &Tensor<Complex<T>>,
) -> Result<(Tensor<T>, Tensor<Complex<T>>)> {
    let f = fft_dims(&x.to_complex(), &YZT)?;
    let s = truncate_modes(&f, &layout.modes_yzt)?;
    let r = comm.repartition(&s, &layout.x_part, &layout.ky_part)?;
    let z = truncate_modes(&fft_dims(&r, &[X])?, &layout.modes_x)?;
    let y = einsum_spectral(&z, weights)?;
    let back = ifft_dims(&pad_modes(&y, &layout.modes_x, &layout.full_x())?, &[Kx])?;
    let back = comm.repartition(&back, &layout.ky_part, &layout.x_part)?;
    let out = ifft_dims(&pad_modes(&back, &layout.modes_yzt, &layout.full_yzt())?, &K_YZT)?;
    Ok((out.re()?, z))
}

/// Adjoint of [`block_forward`] with respect to its input and weights.
/// `spectral_input` is the second value `block_forward` returned.
pub fn block_backward<T: Real>(
    comm: &mut Communicator,
    layout: &BlockLayout,
    grad_out: &Tensor<T>,
    spectral_input: &Tensor<Complex<T>>,
    weights: &Tensor<Complex<T>>,
) -> Result<(Tensor<T>, Tensor<Complex<T>>)> {
    // adjoint of the synthesis half: Re → ℱ⁻¹_yzt → 𝒮ᵀ_yzt → ℛ_{ky→x} → ℱ⁻¹_x → 𝒮ᵀ_x
    let a = ifft_adjoint_dims(&grad_out.to_complex(), &YZT)?;
    let a = truncate_modes(&a, &layout.modes_yzt)?;
    let a = comm.repartition(&a, &layout.x_part, &layout.ky_part)?;
    let grad_y = truncate_modes(&ifft_adjoint_dims(&a, &[X])?, &layout.modes_x)?;

    let grad_w = spectral_weight_grad(spectral_input, &grad_y)?;
    let grad_z = spectral_input_grad(&grad_y, weights)?;

    // adjoint of the analysis half: 𝒮_x → ℱ_x → ℛ_{x→ky} → 𝒮_yzt → ℱ_yzt → embed
    let a = fft_adjoint_dims(&pad_modes(&grad_z, &layout.modes_x, &layout.full_x())?, &[Kx])?;
    let a = comm.repartition(&a, &layout.ky_part, &layout.x_part)?;
    let a = fft_adjoint_dims(&pad_modes(&a, &layout.modes_yzt, &layout.full_yzt())?, &K_YZT)?;
    Ok((a.re()?, grad_w))
}

/// `gW[ci, co, k] = Σ_b conj(Z[b, ci, k]) · gY[b, co, k]`
fn spectral_weight_grad<T: Real>(z: &Tensor<Complex<T>>, gy: &Tensor<Complex<T>>) -> Result<Tensor<Complex<T>>> {
    let ext = z.shape().extents();
    let (b, ci, co) = (ext[0], ext[1], gy.shape().extents()[1]);
    let k: usize = ext[2..].iter().product();
    let mut out = vec![Complex::new(T::zero(), T::zero()); ci * co * k];
    for bi in 0..b {
        for i in 0..ci {
            let zrow = &z.data()[(bi * ci + i) * k..(bi * ci + i + 1) * k];
            for o in 0..co {
                let grow = &gy.data()[(bi * co + o) * k..(bi * co + o + 1) * k];
                let dst = &mut out[(i * co + o) * k..(i * co + o + 1) * k];
                for ((d, zv), gv) in dst.iter_mut().zip(zrow).zip(grow) {
                    *d += zv.conj() * gv;
                }
            }
        }
    }
    let mut dims = z.shape().dims().to_vec();
    dims[0] = (C, ci);
    dims[1] = (Co, co);
    Ok(Tensor::from_dims(&dims, out)?)
}

/// `gZ[b, ci, k] = Σ_co conj(W[ci, co, k]) · gY[b, co, k]`
fn spectral_input_grad<T: Real>(gy: &Tensor<Complex<T>>, w: &Tensor<Complex<T>>) -> Result<Tensor<Complex<T>>> {
    let ext = w.shape().extents();
    let (ci, co) = (ext[0], ext[1]);
    let b = gy.shape().extents()[0];
    let k: usize = ext[2..].iter().product();
    let mut out = vec![Complex::new(T::zero(), T::zero()); b * ci * k];
    for bi in 0..b {
        for i in 0..ci {
            let dst = &mut out[(bi * ci + i) * k..(bi * ci + i + 1) * k];
            for o in 0..co {
                let wrow = &w.data()[(i * co + o) * k..(i * co + o + 1) * k];
                let grow = &gy.data()[(bi * co + o) * k..(bi * co + o + 1) * k];
                for ((d, wv), gv) in dst.iter_mut().zip(wrow).zip(grow) {
                    *d += wv.conj() * gv;
                }
            }
        }
    }
    Ok(Tensor::new(gy.shape().with_extent(1, ci), out)?)
}

/// `gW[ci, co] = Σ X[.., ci, ..] · gY[.., co, ..]` over every non-channel index.
fn channel_weight_grad<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let ext = x.shape().extents();
    let (b, ci, co) = (ext[0], ext[1], gy.shape().extents()[1]);
    let inner: usize = ext[2..].iter().product();
    let mut out = vec![T::zero(); ci * co];
    for bi in 0..b {
        for i in 0..ci {
            let xrow = &x.data()[(bi * ci + i) * inner..(bi * ci + i + 1) * inner];
            for o in 0..co {
                let grow = &gy.data()[(bi * co + o) * inner..(bi * co + o + 1) * inner];
                out[i * co + o] += xrow.iter().zip(grow).map(|(&p, &q)| p * q).sum::<T>();
            }
        }
    }
    Ok(Tensor::from_dims(&[(C, ci), (Co, co)], out)?)
}

/// `[c: a, co: b]` to `[c: b, co: a]`.
fn transpose_weights<E: Element>(w: &Tensor<E>) -> Result<Tensor<E>> {
    let t = w.permute(&[1, 0])?;
    let [(_, a), (_, b)] = [t.shape().dims()[0], t.shape().dims()[1]];
    Ok(Tensor::from_dims(&[(C, a), (Co, b)], t.into_data())?)
}

fn activate<T: Real>(act: Activation, h: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(h.map(|v| act.apply(v))?)
}

fn activation_backward<T: Real>(act: Activation, pre: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(grad.zip_map(pre, |g, h| g * act.derivative(h))?)
}

struct BlockCache<T: Real> {
    spectral_input: Tensor<Complex<T>>,
    pre_activation: Tensor<T>,
}

/// Activations retained by [`DistributedFno::forward`] for the backward pass.
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    encoder: Tensor<T>,
    decoder: Tensor<T>,
    encoder_pre: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    decoder_input: Tensor<T>,
    decoder_pre: Tensor<T>,
}

/// The FNO as seen from one rank: configuration, geometry and this rank's
/// parameters (replicated encoder/decoder, local spectral shards).
#[derive(Debug, Clone)]
pub struct DistributedFno<T: Real> {
    config: FnoConfig,
    rank: usize,
    layout: BlockLayout,
    params: FnoParams<T>,
}

impl<T: Real> DistributedFno<T> {
    pub fn new(config: FnoConfig, params: FnoParams<T>, rank: usize) -> Result<Self> {
        let layout = BlockLayout::new(&config)?;
        if params.spectral.len() != config.num_blocks {
            return Err(FnoError::Config(format!(
                "{} spectral weight tensors for {} blocks",
                params.spectral.len(),
                config.num_blocks
            )));
        }
        let expected = layout.ky_part.local_shape(&config.spectral_weight_shape(), rank)?;
        if let Some(w) = params.spectral.iter().find(|w| w.shape() != &expected) {
            return Err(FnoError::Config(format!("spectral shard {} on rank {rank}, expected {expected}", w.shape())));
        }
        Ok(DistributedFno { config, rank, layout, params })
    }

    pub fn config(&self) -> &FnoConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn params(&self) -> &FnoParams<T> {
        &self.params
    }

    pub fn set_params(&mut self, params: FnoParams<T>) {
        self.params = params;
    }

    /// Shape of this rank's block of a global `[b, c, x, y, z, t]` tensor.
    pub fn local_shape(&self, global: &crate::tensor::Shape) -> Result<crate::tensor::Shape> {
        Ok(self.layout.x_part.local_shape(global, self.rank)?)
    }

    /// Collective forward pass on this rank's `x` block.
    pub fn forward(&self, comm: &mut Communicator, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let act = self.config.activation;
        comm.set_layer(0);
        let encoder = comm.broadcast(0, &self.params.encoder)?;
        let encoder_pre = einsum_channel_mix(x, &encoder)?;
        let mut a = activate(act, &encoder_pre)?;
        let mut blocks = Vec::with_capacity(self.config.num_blocks);
        for (i, w) in self.params.spectral.iter().enumerate() {
            comm.set_layer(i as u16 + 1);
            let (u, spectral_input) = block_forward(comm, &self.layout, &a, w)?;
            a = activate(act, &u)?;
            blocks.push(BlockCache { spectral_input, pre_activation: u });
        }
        comm.set_layer(self.config.num_blocks as u16 + 1);
        let decoder = comm.broadcast(0, &self.params.decoder)?;
        let decoder_pre = einsum_channel_mix(&a, &decoder)?;
        let out = activate(act, &decoder_pre)?;
        let cache = ForwardCache {
            input: x.clone(),
            encoder,
            decoder,
            encoder_pre,
            blocks,
            decoder_input: a,
            decoder_pre,
        };
        Ok((out, cache))
    }

    /// Collective backward pass. Spectral gradients stay rank-local; the
    /// encoder/decoder gradients are sum-reduced onto rank 0 (the adjoint of
    /// the forward broadcast) and are zero on every other rank.
    pub fn backward(
        &self,
        comm: &mut Communicator,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, FnoParams<T>)> {
        let act = self.config.activation;
        let g = activation_backward(act, &cache.decoder_pre, grad_out)?;
        let grad_decoder = channel_weight_grad(&cache.decoder_input, &g)?;
        let mut g = einsum_channel_mix(&g, &transpose_weights(&cache.decoder)?)?;
        let mut grad_spectral = Vec::with_capacity(cache.blocks.len());
        for (i, (bc, w)) in cache.blocks.iter().zip(&self.params.spectral).enumerate().rev() {
            comm.set_layer(i as u16 + 1);
            let gu = activation_backward(act, &bc.pre_activation, &g)?;
            let (gx, gw) = block_backward(comm, &self.layout, &gu, &bc.spectral_input, w)?;
            g = gx;
            grad_spectral.push(gw);
        }
        grad_spectral.reverse();
        let g = activation_backward(act, &cache.encoder_pre, &g)?;
        let grad_encoder = channel_weight_grad(&cache.input, &g)?;
        let grad_x = einsum_channel_mix(&g, &transpose_weights(&cache.encoder)?)?;

        comm.set_layer(self.config.num_blocks as u16 + 1);
        let grad_decoder = comm.reduce_sum(0, &grad_decoder)?;
        comm.set_layer(0);
        let grad_encoder = comm.reduce_sum(0, &grad_encoder)?;
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().clone());
        let grads = FnoParams {
            encoder: match grad_encoder {
                Some(t) => t,
                None => zeros(&self.params.encoder)?,
            },
            decoder: match grad_decoder {
                Some(t) => t,
                None => zeros(&self.params.decoder)?,
            },
            spectral: grad_spectral,
        };
        Ok((grad_x, grads))
    }
}
