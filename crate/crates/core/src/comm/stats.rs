use std::fmt;

/// The collectives whose traffic is accounted separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Broadcast,
    ReduceSum,
    Repartition,
    AllReduce,
    Gather,
}

impl Primitive {
    pub const ALL: [Primitive; 5] =
        [Primitive::Broadcast, Primitive::ReduceSum, Primitive::Repartition, Primitive::AllReduce, Primitive::Gather];

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Broadcast => "broadcast",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::Repartition => "repartition",
            Primitive::AllReduce => "allreduce",
            Primitive::Gather => "gather",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counters for one primitive. Elements and bytes count off-rank payload only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrimitiveStats {
    pub calls: u64,
    pub elements: u64,
    pub bytes: u64,
}

impl PrimitiveStats {
    fn add(&mut self, other: &PrimitiveStats) {
        self.calls += other.calls;
        self.elements += other.elements;
        self.bytes += other.bytes;
    }
}

/// Per-rank communication counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    per_primitive: [PrimitiveStats; 5],
}

impl CommStats {
    pub fn get(&self, p: Primitive) -> PrimitiveStats {
        self.per_primitive[p.index()]
    }

    pub(crate) fn record_call(&mut self, p: Primitive) {
        self.per_primitive[p.index()].calls += 1;
    }

    pub(crate) fn record_send(&mut self, p: Primitive, elements: usize, elem_bytes: usize) {
        let s = &mut self.per_primitive[p.index()];
        s.elements += elements as u64;
        s.bytes += (elements * elem_bytes) as u64;
    }

    pub fn total_bytes(&self) -> u64 {
        self.per_primitive.iter().map(|s| s.bytes).sum()
    }

    /// Sum of several ranks' counters. `calls` is summed too, so divide by the
    /// rank count for per-rank call counts.
    pub fn sum<'a>(stats: impl IntoIterator<Item = &'a CommStats>) -> CommStats {
        let mut out = CommStats::default();
        for s in stats {
            for (acc, v) in out.per_primitive.iter_mut().zip(&s.per_primitive) {
                acc.add(v);
            }
        }
        out
    }

    /// `self - earlier`, for measuring one region of a run.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        let mut out = self.clone();
        for (o, e) in out.per_primitive.iter_mut().zip(&earlier.per_primitive) {
            o.calls -= e.calls;
            o.elements -= e.elements;
            o.bytes -= e.bytes;
        }
        out
    }
}
