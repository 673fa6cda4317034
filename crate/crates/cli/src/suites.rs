//! The four verification suites behind `dfno parity`. Each runs collectively;
//! only rank 0 returns records.

use dfno_core::comm::{Communicator, Primitive};
use dfno_core::fno::{
    block_backward, block_forward, init_params, predicted_block_volume, serial_fno_forward, shard_ky, BlockLayout,
    DistributedFno, FnoConfig, FnoParams,
};
use dfno_core::partition::Partition;
use dfno_core::spectral::{fft_adjoint_dims, fft_dims, ifft_adjoint_dims, ifft_dims, pad_modes, truncate_modes};
use dfno_core::tensor::{DimLabel, DimLabel::*, Real, Shape, Tensor};
use dfno_core::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::launch::ConfigSpec;
use crate::opts::Precision;
use crate::report::fmt_f64;
use crate::Result;

pub const PAIRS: u64 = 20;
pub const ADJOINT_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

pub fn parity_tolerance(dtype: Precision) -> f64 {
    match dtype {
        Precision::F64 => 1e-10,
        Precision::F32 => 1e-4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Suite {
    Parity,
    Adjoint,
    Gradient,
    Volume,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Parity, Suite::Adjoint, Suite::Gradient, Suite::Volume];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Parity => "parity",
            Suite::Adjoint => "adjoint",
            Suite::Gradient => "gradient",
            Suite::Volume => "volume",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteJob {
    pub config: ConfigSpec,
    pub dtype: Precision,
    pub seed: u64,
    pub suites: Vec<Suite>,
}

/// One checked quantity. `value` and `tolerance` are preformatted so the CSV
/// is byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub suite: String,
    pub case: String,
    pub metric: String,
    pub value: String,
    pub tolerance: String,
    pub pass: bool,
}

pub const CSV_HEADER: [&str; 6] = ["suite", "case", "metric", "value", "tolerance", "pass"];

impl CaseRecord {
    fn below(suite: Suite, case: &str, metric: &str, value: f64, tol: f64) -> Self {
        CaseRecord {
            suite: suite.name().into(),
            case: case.into(),
            metric: metric.into(),
            value: fmt_f64(value),
            tolerance: format!("< {}", fmt_f64(tol)),
            pass: value < tol,
        }
    }

    fn equal(suite: Suite, case: &str, metric: &str, value: u64, expected: u64) -> Self {
        CaseRecord {
            suite: suite.name().into(),
            case: case.into(),
            metric: metric.into(),
            value: value.to_string(),
            tolerance: format!("= {expected}"),
            pass: value == expected,
        }
    }
}

pub fn run(comm: &mut Communicator, job: &SuiteJob) -> Result<Vec<CaseRecord>> {
    let cfg = job.config.config()?;
    crate::check_feasible(&cfg)?;
    let mut out = Vec::new();
    for &s in &job.suites {
        let mut records = match s {
            Suite::Parity => match job.dtype {
                Precision::F64 => parity::<f64>(comm, &cfg, job.seed, parity_tolerance(job.dtype))?,
                Precision::F32 => parity::<f32>(comm, &cfg, job.seed, parity_tolerance(job.dtype))?,
            },
            Suite::Adjoint => adjoint(comm, &cfg, job.seed)?,
            Suite::Gradient => gradient(comm, &cfg, job.seed)?,
            Suite::Volume => volume(comm, &cfg, job.seed)?,
        };
        if comm.rank() == 0 {
            out.append(&mut records);
        }
    }
    Ok(out)
}

pub fn random_real<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0))).expect("shape volume matches")
}

pub fn random_complex(shape: Shape, seed: u64) -> Tensor<Complex<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).expect("shape volume matches")
}

/// `max |a − b| / max |b|`
pub fn rel_err<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let num = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max);
    let den = b.data().iter().map(|y| y.as_f64().abs()).fold(0.0, f64::max);
    if a.shape() != b.shape() || num.is_nan() {
        return f64::INFINITY;
    }
    num / den.max(f64::MIN_POSITIVE)
}

/// `|a − b| / max(|a|, |b|)`
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn parity<T: Real>(comm: &mut Communicator, cfg: &FnoConfig, seed: u64, tol: f64) -> Result<Vec<CaseRecord>> {
    let rank = comm.rank();
    let x = random_real::<T>(cfg.input_shape(), seed.wrapping_add(1));
    let model = DistributedFno::new(cfg.clone(), init_params::<T>(cfg, seed, rank)?, rank)?;
    let part = model.layout().x_part.clone();
    let (out, _) = model.forward(comm, &part.local_block(&x, rank)?)?;
    let Some(gathered) = comm.gather(0, &out, &part)? else { return Ok(Vec::new()) };
    let single = FnoConfig { num_ranks: 1, ..cfg.clone() };
    let serial = serial_fno_forward(&single, &init_params::<T>(&single, seed, 0)?, &x)?;
    let case = format!("{}_P{}", T::DTYPE.name(), cfg.num_ranks);
    Ok(vec![CaseRecord::below(Suite::Parity, &case, "max_rel_err_vs_serial", rel_err(&gathered, &serial), tol)])
}

fn spectral_shape(b: usize, c: usize, grid: [usize; 4]) -> Shape {
    Shape::new([(B, b), (C, c), (Kx, grid[0]), (Ky, grid[1]), (Kz, grid[2]), (Kt, grid[3])]).expect("distinct labels")
}

fn spatial_shape(b: usize, c: usize, grid: [usize; 4]) -> Shape {
    Shape::new([(B, b), (C, c), (X, grid[0]), (Y, grid[1]), (Z, grid[2]), (T, grid[3])]).expect("distinct labels")
}

/// Worst relative mismatch of `⟨Lx, y⟩` vs `⟨x, Lᵀy⟩` over [`PAIRS`] draws;
/// `pair` returns this rank's contributions, which are summed over ranks.
fn worst_pair(comm: &mut Communicator, mut pair: impl FnMut(&mut Communicator, u64) -> Result<(f64, f64)>) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..PAIRS {
        let (l, r) = pair(comm, i)?;
        let (l, r) = (comm.allreduce_sum(l)?, comm.allreduce_sum(r)?);
        let d = rel_diff(l, r);
        worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
    }
    Ok(worst)
}

fn adjoint(comm: &mut Communicator, cfg: &FnoConfig, seed: u64) -> Result<Vec<CaseRecord>> {
    let s = seed.wrapping_mul(1_000_003);
    let (b, c, grid) = (cfg.batch, cfg.width, cfg.grid);
    let spec = cfg.mode_spec();
    let original: Vec<(DimLabel, usize)> = [Kx, Ky, Kz, Kt].into_iter().zip(grid).collect();
    let lead = comm.rank() == 0;
    let mut rec = Vec::new();

    // serial stages are evaluated on rank 0 only; the allreduce adds zeros elsewhere
    let full = spectral_shape(b, c, grid);
    let worst = worst_pair(comm, |_, i| {
        if !lead {
            return Ok((0.0, 0.0));
        }
        let x = random_complex(full.clone(), s + 2 * i);
        let sx = truncate_modes(&x, &spec)?;
        let y = random_complex(sx.shape().clone(), s + 2 * i + 1);
        Ok((sx.dot(&y)?, x.dot(&pad_modes(&y, &spec, &original)?)?))
    })?;
    rec.push(CaseRecord::below(Suite::Adjoint, "truncate/pad", "max_rel_diff", worst, ADJOINT_TOL));

    for (name, dims) in [("fft_yzt", &[Y, Z, T][..]), ("fft_x", &[X][..]), ("fft_xyzt", &[X, Y, Z, T][..])] {
        let kdims: Vec<DimLabel> = dims.iter().map(|d| d.to_spectral().expect("spatial label")).collect();
        let sp = spatial_shape(b, c, grid);
        let worst_f = worst_pair(comm, |_, i| {
            if !lead {
                return Ok((0.0, 0.0));
            }
            let x = random_complex(sp.clone(), s + 100 + 2 * i);
            let fx = fft_dims(&x, dims)?;
            let y = random_complex(fx.shape().clone(), s + 101 + 2 * i);
            Ok((fx.dot(&y)?, x.dot(&fft_adjoint_dims(&y, &kdims)?)?))
        })?;
        rec.push(CaseRecord::below(Suite::Adjoint, name, "max_rel_diff", worst_f, ADJOINT_TOL));
        let worst_i = worst_pair(comm, |_, i| {
            if !lead {
                return Ok((0.0, 0.0));
            }
            let x = random_complex(sp.clone(), s + 200 + 2 * i);
            let y = random_complex(fft_dims(&x, dims)?.shape().clone(), s + 201 + 2 * i);
            let iy = ifft_dims(&y, &kdims)?;
            Ok((iy.dot(&x)?, y.dot(&ifft_adjoint_dims(&x, dims)?)?))
        })?;
        rec.push(CaseRecord::below(Suite::Adjoint, &format!("i{name}"), "max_rel_diff", worst_i, ADJOINT_TOL));
    }

    let layout = BlockLayout::new(cfg)?;
    let [_, ry, rz, rt] = cfg.retained();
    let mixed = Shape::new([(B, b), (C, c), (X, grid[0]), (Ky, ry), (Kz, rz), (Kt, rt)]).expect("distinct labels");
    let worst = worst_pair(comm, |comm, i| {
        let r = comm.rank();
        let xg = random_complex(mixed.clone(), s + 300 + i);
        let yg = random_complex(mixed.clone(), s + 400 + i);
        let x = layout.x_part.local_block(&xg, r)?;
        let y = layout.ky_part.local_block(&yg, r)?;
        let rx = comm.repartition(&x, &layout.x_part, &layout.ky_part)?;
        let ry = comm.repartition(&y, &layout.ky_part, &layout.x_part)?;
        Ok((rx.dot(&y)?, x.dot(&ry)?))
    })?;
    rec.push(CaseRecord::below(Suite::Adjoint, "repartition_x_ky", "max_rel_diff", worst, ADJOINT_TOL));

    let wshape = Shape::new([(C, cfg.in_channels), (Co, cfg.width)]).expect("distinct labels");
    let worst = worst_pair(comm, |comm, i| {
        let r = comm.rank();
        let w = random_complex(wshape.clone(), s + 500 + i);
        let y = random_complex(wshape.clone(), s + 600 + 1000 * (r as u64 + 1) + i);
        // non-root ranks pass a placeholder; broadcast ignores it
        let input = if r == 0 { w.clone() } else { random_complex(wshape.clone(), 7) };
        let bw = comm.broadcast(0, &input)?;
        let reduced = comm.reduce_sum(0, &y)?;
        let rhs = match reduced {
            Some(sum) => w.dot(&sum)?,
            None => 0.0,
        };
        Ok((bw.dot(&y)?, rhs))
    })?;
    rec.push(CaseRecord::below(Suite::Adjoint, "broadcast/reduce_sum", "max_rel_diff", worst, ADJOINT_TOL));

    let wg = random_complex(cfg.spectral_weight_shape(), s + 700);
    let hidden = spatial_shape(b, c, grid);
    let worst = worst_pair(comm, |comm, i| {
        let r = comm.rank();
        let w = layout.ky_part.local_block(&wg, r)?;
        let x = layout.x_part.local_block(&random_real::<f64>(hidden.clone(), s + 800 + i), r)?;
        let y = layout.x_part.local_block(&random_real::<f64>(hidden.clone(), s + 900 + i), r)?;
        let (fx, z) = block_forward(comm, &layout, &x, &w)?;
        let (gy, _) = block_backward(comm, &layout, &y, &z, &w)?;
        Ok((fx.dot(&y)?, x.dot(&gy)?))
    })?;
    rec.push(CaseRecord::below(Suite::Adjoint, "fno_block", "max_rel_diff", worst, ADJOINT_TOL));
    Ok(rec)
}

/// A random direction in global parameter space, sharded for `rank`.
fn direction(cfg: &FnoConfig, seed: u64, rank: usize) -> Result<FnoParams<f64>> {
    let single = FnoConfig { num_ranks: 1, ..cfg.clone() };
    let template: FnoParams<f64> = init_params(&single, 0, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..template.num_components()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let global = template.unflatten(&flat);
    let ky = cfg.ky_partition()?;
    Ok(FnoParams { spectral: global.spectral.iter().map(|w| shard_ky(w, &ky, rank)).collect(), ..global })
}

fn axpy(p: &FnoParams<f64>, a: f64, d: &FnoParams<f64>) -> FnoParams<f64> {
    let flat: Vec<f64> = p.flatten().iter().zip(d.flatten()).map(|(x, y)| x + a * y).collect();
    p.unflatten(&flat)
}

/// Backward against central differences of `½‖fno_forward(X)‖²`, whose
/// upstream gradient is the output itself.
fn gradient(comm: &mut Communicator, cfg: &FnoConfig, seed: u64) -> Result<Vec<CaseRecord>> {
    let rank = comm.rank();
    let x = random_real::<f64>(cfg.input_shape(), seed.wrapping_add(11));
    let params = init_params::<f64>(cfg, seed.wrapping_add(13), rank)?;
    let model = DistributedFno::new(cfg.clone(), params.clone(), rank)?;
    let xl = model.layout().x_part.local_block(&x, rank)?;
    let (out, cache) = model.forward(comm, &xl)?;
    let (_, grads) = model.backward(comm, &cache, &out)?;
    let half_norm = |comm: &mut Communicator, p: FnoParams<f64>| -> Result<f64> {
        let m = DistributedFno::new(cfg.clone(), p, rank)?;
        let (o, _) = m.forward(comm, &xl)?;
        Ok(comm.allreduce_sum(0.5 * o.norm_sq())?)
    };
    let mut worst = 0.0f64;
    for k in 0..PAIRS {
        let d = direction(cfg, seed.wrapping_add(100 + k), rank)?;
        let fd = (half_norm(comm, axpy(&params, FD_STEP, &d))? - half_norm(comm, axpy(&params, -FD_STEP, &d))?) / (2.0 * FD_STEP);
        // encoder/decoder gradients live on rank 0 only, so the plain sum is exact
        let analytic = comm.allreduce_sum(grads.dot(&d))?;
        let e = rel_diff(fd, analytic);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(vec![CaseRecord::below(Suite::Gradient, "parameter_directions", "max_rel_err_vs_central_diff", worst, GRADIENT_TOL)])
}

/// Sums a per-rank count over ranks (exact below 2⁵³).
fn total(comm: &mut Communicator, v: u64) -> Result<u64> {
    Ok(comm.allreduce_sum(v as f64)? as u64)
}

fn volume(comm: &mut Communicator, cfg: &FnoConfig, seed: u64) -> Result<Vec<CaseRecord>> {
    let rank = comm.rank();
    let p = cfg.num_ranks as u64;
    let predicted = predicted_block_volume(cfg)?;
    let layout = BlockLayout::new(cfg)?;
    let hidden = spatial_shape(cfg.batch, cfg.width, cfg.grid);
    let mut rec = Vec::new();

    let xg = random_real::<f64>(hidden.clone(), seed.wrapping_add(21));
    let single = FnoConfig { num_ranks: 1, ..cfg.clone() };
    let wg = init_params::<f64>(&single, seed, 0)?.spectral.remove(0);
    let x = layout.x_part.local_block(&xg, rank)?;
    let before = comm.report();
    block_forward(comm, &layout, &x, &layout.ky_part.local_block(&wg, rank)?)?;
    let stats = comm.report().since(&before).get(Primitive::Repartition);
    let elements = total(comm, stats.elements)?;
    let per_call = elements / 2;
    let off = total(comm, u64::from(stats.calls != 2))?;
    rec.push(CaseRecord::equal(Suite::Volume, "one_block", "repartition_elements_per_call", per_call, predicted.truncated));
    rec.push(CaseRecord::equal(Suite::Volume, "one_block", "repartition_elements_total", elements, 2 * predicted.truncated));
    rec.push(CaseRecord::equal(Suite::Volume, "one_block", "ranks_without_2_repartitions", off, 0));

    let model = DistributedFno::new(cfg.clone(), init_params::<f64>(cfg, seed, rank)?, rank)?;
    let xin = random_real::<f64>(cfg.input_shape(), seed.wrapping_add(22));
    let before = comm.report();
    model.forward(comm, &layout.x_part.local_block(&xin, rank)?)?;
    let stats = comm.report().since(&before).get(Primitive::Repartition);
    let blocks = cfg.num_blocks as u64;
    let elements_fwd = total(comm, stats.elements)?;
    let off = total(comm, u64::from(stats.calls != 2 * blocks))?;
    rec.push(CaseRecord::equal(Suite::Volume, "forward", "repartition_elements", elements_fwd, 2 * blocks * predicted.truncated));
    rec.push(CaseRecord::equal(Suite::Volume, "forward", "ranks_without_2_per_block", off, 0));

    // the same re-partition applied to the untruncated hidden tensor (x -> y)
    if let Ok(yp) = Partition::block(Y, cfg.grid[1], cfg.num_ranks) {
        let before = comm.report();
        comm.repartition(&x, &layout.x_part, &yp)?;
        let untr = total(comm, comm.report().since(&before).get(Primitive::Repartition).elements)?;
        rec.push(CaseRecord::equal(Suite::Volume, "untruncated", "repartition_elements", untr, predicted.untruncated));
        let [nx, ny, ..] = cfg.grid;
        let ry = cfg.retained()[1];
        let even = nx as u64 % p == 0 && ny as u64 % p == 0 && ry as u64 % p == 0;
        if even && p > 1 {
            let measured = untr as f64 / per_call as f64;
            let mut r = CaseRecord::below(Suite::Volume, "untruncated", "ratio_rel_err", rel_diff(measured, predicted.ratio), 1e-12);
            r.metric = format!("ratio_rel_err(measured {measured}, NyNzNt/ryrzrt {})", predicted.ratio);
            rec.push(r);
        }
    }

    // retention of 4 modes out of 20 on every truncated axis
    let example = FnoConfig { grid: [8, 20, 20, 20], modes: [2, 2, 2, 2], width: 2, num_blocks: 1, num_ranks: 4, ..FnoConfig::default() };
    let v = predicted_block_volume(&example)?;
    rec.push(CaseRecord::equal(Suite::Volume, "retention_20pct", "untruncated_over_truncated", v.untruncated / v.truncated.max(1), 125));
    rec.push(CaseRecord::equal(Suite::Volume, "retention_20pct", "untruncated_mod_truncated", v.untruncated % v.truncated.max(1), 0));
    Ok(rec)
}
