//! Teacher–student training on [`SyntheticProblem`] data.

use std::path::PathBuf;
use std::time::Instant;

use dfno_core::comm::Communicator;
use dfno_core::fno::{init_params, save_checkpoint, DistributedFno, FnoConfig, TrainState};
use dfno_core::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::launch::ConfigSpec;
use crate::opts::Precision;
use crate::report::{fmt_f64, median};
use crate::synthetic::SyntheticProblem;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainJob {
    /// `batch` is the optimizer batch size.
    pub config: ConfigSpec,
    pub dtype: Precision,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub teacher_gain: f64,
    pub input_modes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub checkpoint: Option<PathBuf>,
}

/// One metrics row; epoch 0 is the untrained model and has no training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss_median: String,
    pub test_mse: String,
    pub test_mae: String,
    pub test_r2: String,
}

pub const CSV_HEADER: [&str; 5] = ["epoch", "train_loss_median", "test_mse", "test_mae", "test_r2"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    /// Per-epoch numeric values, parallel to `rows` (training loss is NaN at epoch 0).
    pub train_loss: Vec<f64>,
    pub r2: Vec<f64>,
    pub seconds: Vec<f64>,
}

pub fn run(comm: &mut Communicator, job: &TrainJob) -> Result<TrainOutcome> {
    let cfg = job.config.config()?;
    crate::check_feasible(&cfg)?;
    match job.dtype {
        Precision::F64 => train::<f64>(comm, &cfg, job),
        Precision::F32 => train::<f32>(comm, &cfg, job),
    }
}

/// Concatenates single-sample blocks along the (leading) batch axis.
fn stack<T: Real>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = items[0].shape().with_extent(0, items.len());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

struct Metrics {
    mse: f64,
    mae: f64,
    r2: f64,
}

/// MSE, MAE and R² (around the global target mean) over the whole test split.
fn evaluate<T: Real>(
    comm: &mut Communicator,
    model: &DistributedFno<T>,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
) -> Result<Metrics> {
    let mut sums = [0.0f64; 5]; // sse, sae, Σt, Σt², n
    for (x, y) in inputs.iter().zip(targets) {
        let (out, _) = model.forward(comm, x)?;
        for (&o, &t) in out.data().iter().zip(y.data()) {
            let (o, t) = (o.as_f64(), t.as_f64());
            sums[0] += (o - t) * (o - t);
            sums[1] += (o - t).abs();
            sums[2] += t;
            sums[3] += t * t;
            sums[4] += 1.0;
        }
    }
    let mut g = [0.0; 5];
    for (gi, s) in g.iter_mut().zip(sums) {
        *gi = comm.allreduce_sum(s)?;
    }
    let [sse, sae, st, stt, n] = g;
    let ss_tot = stt - st * st / n;
    Ok(Metrics { mse: sse / n, mae: sae / n, r2: 1.0 - sse / ss_tot })
}

fn train<T: Real>(comm: &mut Communicator, cfg: &FnoConfig, job: &TrainJob) -> Result<TrainOutcome> {
    let rank = comm.rank();
    let lead = rank == 0;
    let single = FnoConfig { batch: 1, ..cfg.clone() };
    let problem = SyntheticProblem {
        config: single.clone(),
        seed: job.seed,
        teacher_gain: job.teacher_gain,
        input_modes: job.input_modes,
        samples: job.train_samples + job.test_samples,
    };
    let t0 = Instant::now();
    let teacher = DistributedFno::new(single.clone(), problem.teacher_params::<T>(rank)?, rank)?;
    let part = teacher.layout().x_part.clone();
    let mut xs = Vec::with_capacity(problem.samples);
    let mut ys = Vec::with_capacity(problem.samples);
    for i in 0..problem.samples {
        let x = part.local_block(&problem.input::<T>(i)?, rank)?;
        let (y, _) = teacher.forward(comm, &x)?;
        xs.push(x);
        ys.push(y);
    }
    if lead {
        eprintln!("generated {} samples in {:.1} s", problem.samples, t0.elapsed().as_secs_f64());
    }
    let (test_x, test_y) = (&xs[job.train_samples..], &ys[job.train_samples..]);

    let mut state = TrainState::new(DistributedFno::new(cfg.clone(), init_params::<T>(cfg, job.seed, rank)?, rank)?);
    let eval = |comm: &mut Communicator, state: &TrainState<T>| -> Result<Metrics> {
        let m = DistributedFno::new(single.clone(), state.model.params().clone(), rank)?;
        evaluate(comm, &m, test_x, test_y)
    };
    let mut out = TrainOutcome { rows: Vec::new(), train_loss: Vec::new(), r2: Vec::new(), seconds: Vec::new() };
    let mut record = |epoch: usize, loss: f64, m: &Metrics, secs: f64| {
        out.rows.push(EpochRow {
            epoch,
            train_loss_median: if epoch == 0 { String::new() } else { fmt_f64(loss) },
            test_mse: fmt_f64(m.mse),
            test_mae: fmt_f64(m.mae),
            test_r2: fmt_f64(m.r2),
        });
        out.train_loss.push(loss);
        out.r2.push(m.r2);
        out.seconds.push(secs);
        if lead {
            eprintln!("epoch {epoch:>3}: train median {loss:.4e}  test mse {:.4e}  mae {:.4e}  r2 {:.4}  ({secs:.1} s)", m.mse, m.mae, m.r2);
        }
    };
    record(0, f64::NAN, &eval(comm, &state)?, 0.0);

    let global_count = cfg.output_volume();
    let mut order: Vec<usize> = (0..job.train_samples).collect();
    for epoch in 1..=job.epochs {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed.wrapping_add(epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len() / cfg.batch);
        for batch in order.chunks_exact(cfg.batch) {
            let x = stack(&batch.iter().map(|&i| &xs[i]).collect::<Vec<_>>())?;
            let y = stack(&batch.iter().map(|&i| &ys[i]).collect::<Vec<_>>())?;
            losses.push(state.step(comm, &x, &y, global_count, job.lr)?);
        }
        let m = eval(comm, &state)?;
        record(epoch, median(&losses), &m, t.elapsed().as_secs_f64());
    }

    if let Some(dir) = &job.checkpoint {
        let extra = [
            ("seed", job.seed.to_string()),
            ("epochs", job.epochs.to_string()),
            ("teacher_gain", job.teacher_gain.to_string()),
            ("lr", job.lr.to_string()),
        ];
        save_checkpoint(comm, &state.model, dir, &extra)?;
    }
    Ok(out)
}
