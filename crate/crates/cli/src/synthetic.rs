//! Synthetic operator-learning data whose targets are produced by a fixed
//! random FNO (the "teacher"), so the map is exactly representable by a
//! student with the same architecture.

use dfno_core::fno::{init_params, FnoConfig, FnoParams};
use dfno_core::spectral::{fft_dims, ifft_dims, pad_modes, truncate_modes, ModeSpec};
use dfno_core::tensor::{DimLabel::*, Real, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Seed offset separating the teacher's weights from the student's.
pub const TEACHER_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    /// Single-sample configuration (`batch = 1`).
    pub config: FnoConfig,
    pub seed: u64,
    /// Factor applied to the teacher's spectral weights.
    pub teacher_gain: f64,
    /// Modes kept per spatial axis when smoothing input noise.
    pub input_modes: usize,
    pub samples: usize,
}

impl SyntheticProblem {
    fn sample_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
    }

    /// Global input `[1, c_in, x, y, z, t]` of sample `index`: low-pass
    /// filtered uniform noise over `xyz` with unit RMS, repeated along `t`.
    pub fn input<T: Real>(&self, index: usize) -> Result<Tensor<T>> {
        let [nx, ny, nz, nt] = self.config.grid;
        let c = self.config.in_channels;
        let shape = Shape::new([(B, 1), (C, c), (X, nx), (Y, ny), (Z, nz), (T, 1)]).expect("distinct labels");
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed(index));
        let noise: Tensor<f64> = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))?;
        let m = self.input_modes;
        let spec = ModeSpec::new([(Kx, m), (Ky, m), (Kz, m)]);
        let f = truncate_modes(&fft_dims(&noise.to_complex(), &[X, Y, Z])?, &spec)?;
        let smooth = ifft_dims(&pad_modes(&f, &spec, &[(Kx, nx), (Ky, ny), (Kz, nz)])?, &[Kx, Ky, Kz])?.re()?;
        let rms = (smooth.norm_sq() / smooth.len() as f64).sqrt().max(f64::MIN_POSITIVE);
        let data: Vec<T> = smooth.data().iter().flat_map(|&v| std::iter::repeat(T::of(v / rms)).take(nt)).collect();
        Ok(Tensor::new(self.config.input_shape(), data)?)
    }

    /// The teacher's parameters as held by `rank`.
    pub fn teacher_params<T: Real>(&self, rank: usize) -> Result<FnoParams<T>> {
        let p: FnoParams<T> = init_params(&self.config, self.seed.wrapping_add(TEACHER_SEED_OFFSET), rank)?;
        let gain = T::of(self.teacher_gain);
        let spectral = p.spectral.iter().map(|w| w.scale(gain)).collect();
        Ok(FnoParams { spectral, ..p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(seed: u64) -> SyntheticProblem {
        let config = FnoConfig { grid: [8, 6, 4, 3], in_channels: 2, ..FnoConfig::default() };
        SyntheticProblem { config, seed, teacher_gain: 8.0, input_modes: 2, samples: 4 }
    }

    #[test]
    fn inputs_are_reproducible_and_normalized() {
        let a = problem(3).input::<f64>(1).unwrap();
        let b = problem(3).input::<f64>(1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, problem(3).input::<f64>(2).unwrap());
        assert_ne!(a, problem(4).input::<f64>(1).unwrap());
        let rms = (a.norm_sq() / a.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        // constant along t
        for chunk in a.data().chunks(3) {
            assert!(chunk.iter().all(|&v| v == chunk[0]));
        }
    }

    #[test]
    fn teacher_differs_from_student_init() {
        let p = problem(0);
        let teacher = p.teacher_params::<f64>(0).unwrap();
        let student: FnoParams<f64> = init_params(&p.config, 0, 0).unwrap();
        assert_ne!(teacher.flatten(), student.flatten());
    }
}
