#![allow(dead_code)]

use dfno_core::comm::{run_inproc, Communicator};
use dfno_core::fno::{init_params, serial_fno_forward, DistributedFno, FnoConfig, FnoParams};
use dfno_core::tensor::{Real, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0))).unwrap()
}

/// `max |a - b| / max |b|`
pub fn rel_err<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let num = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max);
    let den = b.data().iter().map(|y| y.as_f64().abs()).fold(0.0, f64::max);
    num / den.max(f64::MIN_POSITIVE)
}

pub fn distributed_forward<T: Real>(cfg: &FnoConfig, seed: u64, x: &Tensor<T>) -> Tensor<T> {
    let outs = run_inproc(cfg.num_ranks, |comm: &mut Communicator| {
        let rank = comm.rank();
        let model = DistributedFno::new(cfg.clone(), init_params::<T>(cfg, seed, rank).unwrap(), rank).unwrap();
        let part = model.layout().x_part.clone();
        let (out, _) = model.forward(comm, &part.local_block(x, rank).unwrap()).unwrap();
        comm.gather(0, &out, &part).unwrap()
    })
    .unwrap();
    outs.into_iter().next().unwrap().unwrap()
}

pub fn serial_forward<T: Real>(cfg: &FnoConfig, seed: u64, x: &Tensor<T>) -> Tensor<T> {
    let single = FnoConfig { num_ranks: 1, ..cfg.clone() };
    let params: FnoParams<T> = init_params(&single, seed, 0).unwrap();
    serial_fno_forward(&single, &params, x).unwrap()
}

pub fn random_complex(shape: Shape, seed: u64) -> Tensor<dfno_core::Complex<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| dfno_core::Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).unwrap()
}

/// `|a - b| / max(|a|, |b|)`
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
