//! One-dimensional block decomposition of a tensor axis over a linear rank set,
//! and the intersection routing that drives re-partitioning.

use thiserror::Error;

use crate::tensor::{DimLabel, Element, Shape, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot split extent {extent} over {ranks} ranks without empty blocks")]
    Infeasible { extent: usize, ranks: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {rank} out of range for {ranks} ranks")]
    RankOutOfRange { rank: usize, ranks: usize },
}

/// Half-open index range `[start, stop)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockRange {
    pub start: usize,
    pub stop: usize,
}

impl BlockRange {
    pub fn new(start: usize, stop: usize) -> Self {
        assert!(start <= stop, "block range [{start}, {stop}) is inverted");
        BlockRange { start, stop }
    }

    pub fn len(&self) -> usize {
        self.stop - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.stop
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.stop
    }
}

/// `None` when the ranges do not overlap (touching half-open ranges included).
pub fn range_intersection(a: BlockRange, b: BlockRange) -> Option<BlockRange> {
    let start = a.start.max(b.start);
    let stop = a.stop.min(b.stop);
    (start < stop).then_some(BlockRange { start, stop })
}

/// Splits `global_extent` into `num_ranks` contiguous blocks whose sizes differ by
/// at most one; the first `global_extent % num_ranks` ranks get the larger size.
pub fn block_decompose(global_extent: usize, num_ranks: usize) -> Result<Vec<BlockRange>, PartitionError> {
    if num_ranks == 0 || num_ranks > global_extent {
        return Err(PartitionError::Infeasible { extent: global_extent, ranks: num_ranks });
    }
    let base = global_extent / num_ranks;
    let extra = global_extent % num_ranks;
    let mut start = 0;
    Ok((0..num_ranks)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let range = BlockRange::new(start, start + len);
            start += len;
            range
        })
        .collect())
}

/// Block decomposition of one labeled axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    dim: DimLabel,
    global_extent: usize,
    ranges: Vec<BlockRange>,
}

impl Partition {
    pub fn block(dim: DimLabel, global_extent: usize, num_ranks: usize) -> Result<Self, PartitionError> {
        Ok(Partition { dim, global_extent, ranges: block_decompose(global_extent, num_ranks)? })
    }

    pub fn dim(&self) -> DimLabel {
        self.dim
    }

    pub fn global_extent(&self) -> usize {
        self.global_extent
    }

    pub fn num_ranks(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, rank: usize) -> BlockRange {
        self.ranges[rank]
    }

    pub fn ranges(&self) -> &[BlockRange] {
        &self.ranges
    }

    pub fn owner(&self, index: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(index))
    }

    /// Same partition applied to a relabeled axis (e.g. `x` after a transform to `kx`).
    pub fn relabeled(&self, dim: DimLabel) -> Partition {
        Partition { dim, ..self.clone() }
    }

    /// Local block shape of `rank` given the global shape.
    pub fn local_shape(&self, global: &Shape, rank: usize) -> Result<Shape, PartitionError> {
        let axis = global
            .axis(self.dim)
            .ok_or_else(|| PartitionError::ShapeMismatch(format!("no `{}` axis in {global}", self.dim)))?;
        if global.dims()[axis].1 != self.global_extent {
            return Err(PartitionError::ShapeMismatch(format!(
                "`{}` has extent {} but the partition covers {}",
                self.dim,
                global.dims()[axis].1,
                self.global_extent
            )));
        }
        Ok(global.with_extent(axis, self.range(rank).len()))
    }

    /// `rank`'s block of a fully assembled tensor.
    pub fn local_block<E: Element>(
        &self,
        global: &Tensor<E>,
        rank: usize,
    ) -> Result<Tensor<E>, PartitionError> {
        self.local_shape(global.shape(), rank)?;
        let axis = global.shape().axis(self.dim).expect("checked by local_shape");
        let r = self.range(rank);
        let idx: Vec<usize> = (r.start..r.stop).collect();
        Ok(crate::spectral::select_axis(global, axis, &idx))
    }
}

/// Hyper-rectangle in a rank's local coordinates, one range per axis.
pub type Region = Vec<BlockRange>;

pub fn region_volume(region: &[BlockRange]) -> usize {
    region.iter().map(BlockRange::len).product()
}

/// One exchange with a peer: what this rank sends from its source block, and
/// where the peer's contribution lands in this rank's destination block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub peer: usize,
    pub send: Region,
    pub recv: Region,
}

/// Routing for a re-partition of `rank`'s local block from `src` (axis a) to
/// `dst` (axis b). Entries are ordered by peer; the entry with `peer == rank`
/// is the local copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepartitionPlan {
    pub rank: usize,
    pub src_local: Shape,
    pub dst_local: Shape,
    pub entries: Vec<PlanEntry>,
}

impl RepartitionPlan {
    /// Elements this rank sends to other ranks.
    pub fn off_rank_send_volume(&self) -> usize {
        self.entries.iter().filter(|e| e.peer != self.rank).map(|e| region_volume(&e.send)).sum()
    }
}

pub fn repartition_plan(
    src: &Partition,
    dst: &Partition,
    src_local: &Shape,
    rank: usize,
) -> Result<RepartitionPlan, PartitionError> {
    let p = src.num_ranks();
    if dst.num_ranks() != p {
        return Err(PartitionError::ShapeMismatch(format!(
            "source has {p} ranks, destination has {}",
            dst.num_ranks()
        )));
    }
    if rank >= p {
        return Err(PartitionError::RankOutOfRange { rank, ranks: p });
    }
    if src.dim == dst.dim {
        return Err(PartitionError::ShapeMismatch(format!("both partitions split `{}`", src.dim)));
    }
    let find = |label: DimLabel| {
        src_local
            .axis(label)
            .ok_or_else(|| PartitionError::ShapeMismatch(format!("no `{label}` axis in {src_local}")))
    };
    let (a, b) = (find(src.dim)?, find(dst.dim)?);
    let ext = src_local.extents();
    if ext[a] != src.range(rank).len() {
        return Err(PartitionError::ShapeMismatch(format!(
            "local `{}` extent {} does not match rank {rank}'s block {:?}",
            src.dim,
            ext[a],
            src.range(rank)
        )));
    }
    if ext[b] != dst.global_extent {
        return Err(PartitionError::ShapeMismatch(format!(
            "`{}` extent {} does not match destination global extent {}",
            dst.dim, ext[b], dst.global_extent
        )));
    }
    let dst_local = src_local.with_extent(a, src.global_extent).with_extent(b, dst.range(rank).len());
    let full = |n: usize| BlockRange::new(0, n);
    let entries = (0..p)
        .map(|peer| {
            // my a-slab ∩ peer's b-slab, in my source coordinates
            let mut send: Region = ext.iter().map(|&n| full(n)).collect();
            send[b] = dst.range(peer);
            // peer's a-slab ∩ my b-slab, in my destination coordinates
            let mut recv: Region = dst_local.extents().iter().map(|&n| full(n)).collect();
            recv[a] = src.range(peer);
            PlanEntry { peer, send, recv }
        })
        .collect();
    Ok(RepartitionPlan { rank, src_local: src_local.clone(), dst_local, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DimLabel::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn remainder_first() {
        let ext: Vec<_> = block_decompose(10, 4).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(ext, vec![3, 3, 2, 2]);
        assert_eq!(block_decompose(8, 1).unwrap(), vec![BlockRange::new(0, 8)]);
        assert_eq!(block_decompose(3, 4), Err(PartitionError::Infeasible { extent: 3, ranks: 4 }));
        assert!(block_decompose(3, 0).is_err());
    }

    #[test]
    fn intersections() {
        let r = BlockRange::new;
        assert_eq!(range_intersection(r(2, 5), r(4, 9)), Some(r(4, 5)));
        assert_eq!(range_intersection(r(0, 2), r(2, 4)), None);
        assert_eq!(range_intersection(r(3, 7), r(3, 7)), Some(r(3, 7)));
    }

    fn global_8x8(p: usize) -> (Partition, Partition, Shape) {
        let src = Partition::block(X, 8, p).unwrap();
        let dst = Partition::block(Y, 8, p).unwrap();
        (src, dst, Shape::new([(X, 8), (Y, 8)]).unwrap())
    }

    #[test]
    fn plan_8x8_four_ranks() {
        let (src, dst, global) = global_8x8(4);
        for rank in 0..4 {
            let local = src.local_shape(&global, rank).unwrap();
            let plan = repartition_plan(&src, &dst, &local, rank).unwrap();
            let local_entry = &plan.entries[rank];
            assert_eq!(region_volume(&local_entry.send), 4);
            let off: Vec<_> = plan.entries.iter().filter(|e| e.peer != rank).map(|e| region_volume(&e.send)).collect();
            assert_eq!(off, vec![4, 4, 4]);
            assert_eq!(plan.off_rank_send_volume(), 12);
            assert_eq!(plan.dst_local.extents(), vec![8, 2]);
        }
    }

    #[test]
    fn single_rank_plan_is_local_copy() {
        let (src, dst, global) = global_8x8(1);
        let plan = repartition_plan(&src, &dst, &global, 0).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].peer, 0);
        assert_eq!(plan.off_rank_send_volume(), 0);
    }

    #[test]
    fn plan_errors() {
        let (src, dst, global) = global_8x8(2);
        assert!(repartition_plan(&src, &src, &src.local_shape(&global, 0).unwrap(), 0).is_err());
        // global extent disagreement
        let wrong = Partition::block(Y, 6, 2).unwrap();
        assert!(matches!(
            repartition_plan(&src, &wrong, &src.local_shape(&global, 0).unwrap(), 0),
            Err(PartitionError::ShapeMismatch(_))
        ));
        // local block inconsistent with the source partition
        assert!(repartition_plan(&src, &dst, &global, 0).is_err());
    }

    /// Brute-force: map every global index to (src owner, src local offset) and
    /// (dst owner, dst local offset), then check the plans move each exactly once.
    fn check_tiling(shape: &[usize], a: usize, b: usize, p: usize) {
        let labels = [X, Y, Z, T];
        let global = Shape::new(labels.iter().copied().zip(shape.iter().copied())).unwrap();
        let src = Partition::block(labels[a], shape[a], p).unwrap();
        let dst = Partition::block(labels[b], shape[b], p).unwrap();
        let plans: Vec<_> = (0..p)
            .map(|r| repartition_plan(&src, &dst, &src.local_shape(&global, r).unwrap(), r).unwrap())
            .collect();
        let mut moved: HashMap<Vec<usize>, usize> = HashMap::new();
        for (rank, plan) in plans.iter().enumerate() {
            for e in &plan.entries {
                let peer_plan = &plans[e.peer];
                let mirror = &peer_plan.entries[rank];
                // symmetry: what I send equals what the peer expects from me
                assert_eq!(region_volume(&e.send), region_volume(&mirror.recv));
                let sext: Vec<usize> = e.send.iter().map(BlockRange::len).collect();
                let rext: Vec<usize> = mirror.recv.iter().map(BlockRange::len).collect();
                assert_eq!(sext, rext);
                enumerate(&e.send, &mut |idx| {
                    let mut g = idx.to_vec();
                    g[a] += src.range(rank).start;
                    // lands at g on dst rank e.peer
                    assert_eq!(dst.owner(g[b]), Some(e.peer));
                    *moved.entry(g).or_default() += 1;
                });
            }
        }
        assert_eq!(moved.len(), global.volume());
        assert!(moved.values().all(|&c| c == 1));
    }

    fn enumerate(region: &[BlockRange], f: &mut impl FnMut(&[usize])) {
        let mut idx: Vec<usize> = region.iter().map(|r| r.start).collect();
        if region.iter().any(BlockRange::is_empty) {
            return;
        }
        loop {
            f(&idx);
            let mut ax = region.len();
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < region[ax].stop {
                    break;
                }
                idx[ax] = region[ax].start;
            }
        }
    }

    #[test]
    fn tiling_examples() {
        check_tiling(&[8, 8], 0, 1, 4);
        check_tiling(&[7, 5, 3], 0, 1, 3);
        check_tiling(&[5, 9, 2], 1, 0, 5);
    }

    proptest! {
        #[test]
        fn decomposition_balanced(extent in 1usize..200, p in 1usize..32) {
            prop_assume!(p <= extent);
            let r = block_decompose(extent, p).unwrap();
            let lens: Vec<_> = r.iter().map(|b| b.len()).collect();
            prop_assert_eq!(lens.iter().sum::<usize>(), extent);
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            prop_assert!(lens.iter().all(|&n| n > 0));
            prop_assert_eq!(r[0].start, 0);
            prop_assert!(r.windows(2).all(|w| w[0].stop == w[1].start));
        }

        #[test]
        fn plans_tile_global_index_set(
            shape in prop::collection::vec(1usize..=16, 2..=3),
            p in 1usize..=8,
            axes in (0usize..3, 0usize..3),
        ) {
            let (a, b) = (axes.0 % shape.len(), axes.1 % shape.len());
            prop_assume!(a != b && p <= shape[a] && p <= shape[b] && shape.iter().product::<usize>() <= 512);
            check_tiling(&shape, a, b, p);
        }
    }
}
