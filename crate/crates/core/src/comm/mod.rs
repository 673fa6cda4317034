//! Rank-based message transport and the collectives the model-parallel FNO
//! uses: broadcast, its adjoint sum-reduction, re-partition, a scalar
//! all-reduce and a gather for assembling results.
//!
//! Collectives are blocking and every rank must call them in the same order.
//! Each call draws a fresh tag from a per-communicator sequence counter, so a
//! rank that skips or reorders a collective surfaces as a tag mismatch or a
//! receive timeout instead of silently wrong data.

mod inproc;
mod socket;
mod stats;

use std::time::Duration;

use thiserror::Error;

use crate::partition::{region_volume, repartition_plan, BlockRange, Partition, PartitionError};
use crate::tensor::{
    decode_elements, decode_tensor, encode_elements, encode_tensor, extract_region, insert_region, Dense, Element,
    Tensor, TensorError,
};

pub use inproc::{run_inproc, run_inproc_with_timeout, InProcTransport};
pub use socket::{Rendezvous, SocketTransport};
pub use stats::{CommStats, Primitive, PrimitiveStats};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum CommError {
    #[error("timed out waiting for rank {src} (tag {tag:#x})")]
    Timeout { src: usize, tag: u64 },
    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),
    #[error("peer {0} disconnected")]
    Disconnected(usize),
    #[error("invalid rank {rank} for world size {world}")]
    InvalidRank { rank: usize, world: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CommError> = std::result::Result<T, E>;

/// Point-to-point byte transport. Messages between a fixed `(src, dst)` pair
/// arrive in send order; sends never block on the receiver.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send(&mut self, dst: usize, tag: u64, payload: Vec<u8>) -> Result<()>;
    /// Next message from `src`; fails if its tag is not `tag`.
    fn recv(&mut self, src: usize, tag: u64) -> Result<Vec<u8>>;
}

/// A rank's handle on the transport plus its communication counters.
pub struct Communicator {
    transport: Box<dyn Transport>,
    stats: CommStats,
    seq: u64,
    layer: u16,
}

const SEQ_BITS: u32 = 40;

impl Communicator {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Communicator { transport: Box::new(transport), stats: CommStats::default(), seq: 0, layer: 0 }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn size(&self) -> usize {
        self.transport.world_size()
    }

    /// Layer id folded into subsequent tags.
    pub fn set_layer(&mut self, layer: u16) {
        self.layer = layer;
    }

    /// Snapshot of this rank's counters.
    pub fn report(&self) -> CommStats {
        self.stats.clone()
    }

    fn next_tag(&mut self, p: Primitive) -> u64 {
        let tag = ((p.index() as u64) << 56) | ((self.layer as u64) << SEQ_BITS) | (self.seq & ((1 << SEQ_BITS) - 1));
        self.seq += 1;
        self.stats.record_call(p);
        tag
    }

    fn check_root(&self, root: usize) -> Result<()> {
        if root >= self.size() {
            return Err(CommError::InvalidRank { rank: root, world: self.size() });
        }
        Ok(())
    }

    /// Replicates the root's `value` on every rank. Non-root ranks pass a
    /// tensor of the expected shape (its contents are ignored); a shape or
    /// dtype disagreement is a collective mismatch.
    pub fn broadcast<E: Element>(&mut self, root: usize, value: &Tensor<E>) -> Result<Tensor<E>>
    where
        Tensor<E>: Dense,
    {
        self.check_root(root)?;
        let tag = self.next_tag(Primitive::Broadcast);
        if self.rank() == root {
            let bytes = encode_tensor(value);
            for dst in (0..self.size()).filter(|&r| r != root) {
                self.transport.send(dst, tag, bytes.clone())?;
                self.stats.record_send(Primitive::Broadcast, value.len(), E::DTYPE.size_bytes());
            }
            Ok(value.clone())
        } else {
            let bytes = self.transport.recv(root, tag)?;
            let got: Tensor<E> = decode_tensor(&bytes)
                .map_err(|e| CommError::CollectiveMismatch(format!("broadcast payload: {e}")))?;
            if got.shape() != value.shape() {
                return Err(CommError::CollectiveMismatch(format!(
                    "broadcast shape {} on root, {} on rank {}",
                    got.shape(),
                    value.shape(),
                    self.rank()
                )));
            }
            Ok(got)
        }
    }

    /// Element-wise sum over ranks, delivered on `root` (other ranks get `None`).
    /// The root accumulates in rank order.
    pub fn reduce_sum<E: Element>(&mut self, root: usize, value: &Tensor<E>) -> Result<Option<Tensor<E>>>
    where
        Tensor<E>: Dense,
    {
        self.check_root(root)?;
        let tag = self.next_tag(Primitive::ReduceSum);
        if self.rank() != root {
            self.transport.send(root, tag, encode_tensor(value))?;
            self.stats.record_send(Primitive::ReduceSum, value.len(), E::DTYPE.size_bytes());
            return Ok(None);
        }
        let mut acc: Option<Vec<E>> = None;
        for src in 0..self.size() {
            let part = if src == root {
                value.clone()
            } else {
                let bytes = self.transport.recv(src, tag)?;
                let t: Tensor<E> = decode_tensor(&bytes)
                    .map_err(|e| CommError::CollectiveMismatch(format!("reduce payload from {src}: {e}")))?;
                if t.shape() != value.shape() {
                    return Err(CommError::CollectiveMismatch(format!(
                        "reduce shape {} from rank {src}, {} on root",
                        t.shape(),
                        value.shape()
                    )));
                }
                t
            };
            match acc.as_mut() {
                None => acc = Some(part.into_data()),
                Some(a) => a.iter_mut().zip(part.data()).for_each(|(x, &y)| *x += y),
            }
        }
        Ok(Some(Tensor::new(value.shape().clone(), acc.expect("world size >= 1"))?))
    }

    /// Moves `local` (this rank's block under `src`) to this rank's block under
    /// `dst`. Only off-rank elements are counted.
    pub fn repartition<E: Element>(&mut self, local: &Tensor<E>, src: &Partition, dst: &Partition) -> Result<Tensor<E>> {
        if src.num_ranks() != self.size() {
            return Err(CommError::CollectiveMismatch(format!(
                "partition over {} ranks on a world of {}",
                src.num_ranks(),
                self.size()
            )));
        }
        let rank = self.rank();
        let tag = self.next_tag(Primitive::Repartition);
        let plan = repartition_plan(src, dst, local.shape(), rank)?;
        let src_ext = plan.src_local.extents();
        let dst_ext = plan.dst_local.extents();
        for e in plan.entries.iter().filter(|e| e.peer != rank) {
            let values = extract_region(local.data(), &src_ext, &e.send);
            let mut bytes = Vec::new();
            encode_elements(&values, &mut bytes);
            self.transport.send(e.peer, tag, bytes)?;
            self.stats.record_send(Primitive::Repartition, values.len(), E::DTYPE.size_bytes());
        }
        let mut out = vec![E::zeroed(); plan.dst_local.volume()];
        let own = &plan.entries[rank];
        insert_region(&mut out, &dst_ext, &own.recv, &extract_region(local.data(), &src_ext, &own.send));
        for e in plan.entries.iter().filter(|e| e.peer != rank) {
            let bytes = self.transport.recv(e.peer, tag)?;
            let expected = region_volume(&e.recv) * E::DTYPE.size_bytes();
            if bytes.len() != expected {
                return Err(CommError::CollectiveMismatch(format!(
                    "repartition block from rank {} has {} bytes, expected {expected}",
                    e.peer,
                    bytes.len()
                )));
            }
            insert_region(&mut out, &dst_ext, &e.recv, &decode_elements::<E>(&bytes));
        }
        Ok(Tensor::new(plan.dst_local, out)?)
    }

    /// Scalar sum over all ranks, identical on every rank (reduced in rank order
    /// on rank 0, then sent back).
    pub fn allreduce_sum(&mut self, value: f64) -> Result<f64> {
        let tag = self.next_tag(Primitive::AllReduce);
        let root = 0;
        if self.rank() != root {
            self.transport.send(root, tag, value.to_le_bytes().to_vec())?;
            self.stats.record_send(Primitive::AllReduce, 1, 8);
            let back = self.transport.recv(root, tag)?;
            return scalar(&back);
        }
        let mut total = value;
        for src in 1..self.size() {
            total += scalar(&self.transport.recv(src, tag)?)?;
        }
        for dst in 1..self.size() {
            self.transport.send(dst, tag, total.to_le_bytes().to_vec())?;
            self.stats.record_send(Primitive::AllReduce, 1, 8);
        }
        Ok(total)
    }

    /// Assembles the global tensor on `root` from blocks partitioned by `part`.
    pub fn gather<E: Element>(&mut self, root: usize, local: &Tensor<E>, part: &Partition) -> Result<Option<Tensor<E>>>
    where
        Tensor<E>: Dense,
    {
        self.check_root(root)?;
        let tag = self.next_tag(Primitive::Gather);
        if self.rank() != root {
            self.transport.send(root, tag, encode_tensor(local))?;
            self.stats.record_send(Primitive::Gather, local.len(), E::DTYPE.size_bytes());
            return Ok(None);
        }
        let axis = local.shape().require_axis(part.dim())?;
        let global_shape = local.shape().with_extent(axis, part.global_extent());
        let ext = global_shape.extents();
        let mut out = vec![E::zeroed(); global_shape.volume()];
        for src in 0..self.size() {
            let block = if src == root {
                local.clone()
            } else {
                decode_tensor::<E>(&self.transport.recv(src, tag)?)
                    .map_err(|e| CommError::CollectiveMismatch(format!("gather payload from {src}: {e}")))?
            };
            let expected = part.local_shape(&global_shape, src)?;
            if block.shape() != &expected {
                return Err(CommError::CollectiveMismatch(format!(
                    "gather block {} from rank {src}, expected {expected}",
                    block.shape()
                )));
            }
            let mut region: Vec<BlockRange> = ext.iter().map(|&n| BlockRange::new(0, n)).collect();
            region[axis] = part.range(src);
            insert_region(&mut out, &ext, &region, block.data());
        }
        Ok(Some(Tensor::new(global_shape, out)?))
    }

    /// Blocks until every rank has reached the barrier.
    pub fn barrier(&mut self) -> Result<()> {
        self.allreduce_sum(0.0).map(|_| ())
    }
}

fn scalar(bytes: &[u8]) -> Result<f64> {
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| CommError::CollectiveMismatch(format!("scalar payload of {} bytes", bytes.len())))?;
    Ok(f64::from_le_bytes(arr))
}
