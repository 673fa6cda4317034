//! Single-rank reference FNO on fully assembled tensors. Each block runs one
//! 4-D FFT over `xyzt`, truncates all four axes at once, applies the full
//! spectral weights, pads and inverts; no re-partitioning is involved.

use num_complex::Complex;

use super::{FnoConfig, FnoParams, Result};
use crate::spectral::{fft_dims, ifft_dims, pad_modes, truncate_modes};
use crate::tensor::{einsum_channel_mix, einsum_spectral, DimLabel, Real, Tensor};

use DimLabel::*;

pub fn serial_block_forward<T: Real>(
    config: &FnoConfig,
    x: &Tensor<T>,
    weights: &Tensor<Complex<T>>,
) -> Result<Tensor<T>> {
    let spec = config.mode_spec();
    let [nx, ny, nz, nt] = config.grid;
    // the axis order of the 4-D transform is fixed so a one-rank run of the
    // distributed block reproduces this result bit for bit
    let f = fft_dims(&x.to_complex(), &[Y, Z, T, X])?;
    let y = einsum_spectral(&truncate_modes(&f, &spec)?, weights)?;
    let padded = pad_modes(&y, &spec, &[(Kx, nx), (Ky, ny), (Kz, nz), (Kt, nt)])?;
    Ok(ifft_dims(&padded, &[Kx, Ky, Kz, Kt])?.re()?)
}

/// `params` must hold the full (single-rank) spectral weights.
pub fn serial_fno_forward<T: Real>(config: &FnoConfig, params: &FnoParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let act = config.activation;
    let mut a = einsum_channel_mix(x, &params.encoder)?.map(|v| act.apply(v))?;
    for w in &params.spectral {
        a = serial_block_forward(config, &a, w)?.map(|v| act.apply(v))?;
    }
    Ok(einsum_channel_mix(&a, &params.decoder)?.map(|v| act.apply(v))?)
}
