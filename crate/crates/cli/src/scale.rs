//! Weak and strong scaling measurements.

use std::time::Instant;

use dfno_core::comm::{Communicator, Primitive};
use dfno_core::fno::{init_params, predicted_block_volume, DistributedFno, FnoConfig};
use dfno_core::tensor::Real;
use serde::{Deserialize, Serialize};

use crate::launch::{ConfigSpec, Launcher, RankJob, RankOutput};
use crate::opts::Precision;
use crate::report::{fmt_f64, median};
use crate::suites::random_real;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Per-rank problem size fixed: `N_x` and `m_x` grow with P.
    Weak,
    /// Global problem size fixed.
    Strong,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleJob {
    pub config: ConfigSpec,
    pub dtype: Precision,
    pub seed: u64,
    pub iterations: usize,
}

/// Rank 0's view of one timed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSample {
    pub t_forward: Vec<f64>,
    pub t_forward_backward: Vec<f64>,
    /// Off-rank re-partition elements over the timed forward passes, all ranks.
    pub repartition_elements: u64,
    pub repartition_bytes: u64,
    pub local_extents: Vec<usize>,
}

pub fn run(comm: &mut Communicator, job: &ScaleJob) -> Result<ScaleSample> {
    let cfg = job.config.config()?;
    crate::check_feasible(&cfg)?;
    match job.dtype {
        Precision::F64 => timed::<f64>(comm, &cfg, job),
        Precision::F32 => timed::<f32>(comm, &cfg, job),
    }
}

fn timed<T: Real>(comm: &mut Communicator, cfg: &FnoConfig, job: &ScaleJob) -> Result<ScaleSample> {
    let rank = comm.rank();
    let model = DistributedFno::new(cfg.clone(), init_params::<T>(cfg, job.seed, rank)?, rank)?;
    let local_shape = model.local_shape(&cfg.input_shape())?;
    let x = random_real::<T>(local_shape.clone(), job.seed.wrapping_add(1 + rank as u64));

    // warm-up, discarded
    let (out, cache) = model.forward(comm, &x)?;
    model.backward(comm, &cache, &out)?;

    let mut t_forward = Vec::with_capacity(job.iterations);
    let mut rep = dfno_core::comm::PrimitiveStats::default();
    for _ in 0..job.iterations {
        comm.barrier()?;
        let before = comm.report();
        let t0 = Instant::now();
        model.forward(comm, &x)?;
        let s = comm.report().since(&before).get(Primitive::Repartition);
        comm.barrier()?;
        t_forward.push(t0.elapsed().as_secs_f64());
        rep.elements += s.elements;
        rep.bytes += s.bytes;
        rep.calls += s.calls;
    }
    let mut t_forward_backward = Vec::with_capacity(job.iterations);
    for _ in 0..job.iterations {
        comm.barrier()?;
        let t0 = Instant::now();
        let (out, cache) = model.forward(comm, &x)?;
        model.backward(comm, &cache, &out)?;
        comm.barrier()?;
        t_forward_backward.push(t0.elapsed().as_secs_f64());
    }
    let elements = comm.allreduce_sum(rep.elements as f64)? as u64;
    let bytes = comm.allreduce_sum(rep.bytes as f64)? as u64;
    Ok(ScaleSample { t_forward, t_forward_backward, repartition_elements: elements, repartition_bytes: bytes, local_extents: local_shape.extents() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: String,
    pub workers: usize,
    /// Rank 0's input block `b×c×x×y×z×t`.
    pub local_extents: String,
    pub t_forward_s: String,
    pub t_forward_backward_s: String,
    pub repartition_elements: u64,
    /// `predicted_block_volume × 2 re-partitions × blocks × iterations`.
    pub predicted_elements: u64,
    pub bytes: u64,
    pub efficiency: String,
}

pub const CSV_HEADER: [&str; 9] = [
    "mode",
    "workers",
    "local_extents",
    "t_forward_s",
    "t_forward_backward_s",
    "repartition_elements",
    "predicted_elements",
    "bytes",
    "efficiency",
];

/// Configuration measured at `p` ranks.
pub fn scaled_config(base: &FnoConfig, mode: ScaleMode, p: usize) -> FnoConfig {
    let mut c = FnoConfig { num_ranks: p, ..base.clone() };
    if mode == ScaleMode::Weak {
        c.grid[0] = base.grid[0] * p;
        c.modes[0] = base.modes[0] * p;
    }
    c
}

pub fn efficiency(mode: ScaleMode, p: usize, t1: f64, tp: f64) -> f64 {
    match mode {
        ScaleMode::Strong => t1 / (p as f64 * tp),
        _ => t1 / tp,
    }
}

/// Runs every mode and worker count; P = 1 is always measured since it is
/// the efficiency baseline.
pub fn scale(
    launcher: &Launcher,
    base: &FnoConfig,
    dtype: Precision,
    seed: u64,
    mode: ScaleMode,
    workers: &[usize],
    iterations: usize,
) -> Result<Vec<BenchRecord>> {
    if iterations < 5 {
        return Err(CliError::Usage(format!("at least 5 timed iterations are required, got {iterations}")));
    }
    let modes: &[ScaleMode] = match mode {
        ScaleMode::Both => &[ScaleMode::Weak, ScaleMode::Strong],
        ScaleMode::Weak => &[ScaleMode::Weak],
        ScaleMode::Strong => &[ScaleMode::Strong],
    };
    let mut counts: Vec<usize> = workers.to_vec();
    counts.push(1);
    counts.sort_unstable();
    counts.dedup();
    for &m in modes {
        for &p in &counts {
            crate::check_feasible(&scaled_config(base, m, p))?;
        }
    }
    let mut rows = Vec::new();
    for &m in modes {
        let mut t1 = None;
        for &p in &counts {
            let cfg = scaled_config(base, m, p);
            let job = ScaleJob { config: ConfigSpec::from(&cfg), dtype, seed, iterations };
            let RankOutput::Scale(s) = launcher.run(p, &RankJob::Scale(job))? else {
                return Err(CliError::Rank("unexpected output kind".into()));
            };
            let tf = median(&s.t_forward);
            let tfb = median(&s.t_forward_backward);
            let base_t = *t1.get_or_insert(tfb);
            let predicted = predicted_block_volume(&cfg)?.truncated * 2 * cfg.num_blocks as u64 * iterations as u64;
            let extents = s.local_extents.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
            rows.push(BenchRecord {
                mode: if m == ScaleMode::Weak { "weak" } else { "strong" }.into(),
                workers: p,
                local_extents: extents,
                t_forward_s: fmt_f64(tf),
                t_forward_backward_s: fmt_f64(tfb),
                repartition_elements: s.repartition_elements,
                predicted_elements: predicted,
                bytes: s.repartition_bytes,
                efficiency: fmt_f64(efficiency(m, p, base_t, tfb)),
            });
            crate::report::print_flush(&format!(
                "{:>6} P={p}: forward {:.4} s, forward+backward {:.4} s, efficiency {:.3}",
                rows.last().expect("pushed").mode,
                tf,
                tfb,
                efficiency(m, p, base_t, tfb)
            ));
        }
    }
    Ok(rows)
}
