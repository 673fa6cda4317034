use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{CommError, Communicator, Result, Transport, DEFAULT_TIMEOUT};

type Message = (u64, Vec<u8>);

/// In-process transport: one ordered unbounded queue per `(src, dst)` pair.
pub struct InProcTransport {
    rank: usize,
    to: Vec<Sender<Message>>,
    from: Vec<Receiver<Message>>,
    timeout: Duration,
}

impl InProcTransport {
    /// Creates the `world` connected endpoints, indexed by rank.
    pub fn group(world: usize, timeout: Duration) -> Vec<InProcTransport> {
        // channels[src][dst]
        let channels: Vec<Vec<(Sender<Message>, Receiver<Message>)>> =
            (0..world).map(|_| (0..world).map(|_| unbounded()).collect()).collect();
        (0..world)
            .map(|rank| InProcTransport {
                rank,
                to: (0..world).map(|dst| channels[rank][dst].0.clone()).collect(),
                from: (0..world).map(|src| channels[src][rank].1.clone()).collect(),
                timeout,
            })
            .collect()
    }
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.to.len()
    }

    fn send(&mut self, dst: usize, tag: u64, payload: Vec<u8>) -> Result<()> {
        let world = self.world_size();
        let chan = self.to.get(dst).ok_or(CommError::InvalidRank { rank: dst, world })?;
        chan.send((tag, payload)).map_err(|_| CommError::Disconnected(dst))
    }

    fn recv(&mut self, src: usize, tag: u64) -> Result<Vec<u8>> {
        let world = self.world_size();
        let chan = self.from.get(src).ok_or(CommError::InvalidRank { rank: src, world })?;
        match chan.recv_timeout(self.timeout) {
            Ok((got, payload)) if got == tag => Ok(payload),
            Ok((got, _)) => Err(CommError::CollectiveMismatch(format!(
                "rank {} expected tag {tag:#x} from rank {src}, got {got:#x}",
                self.rank
            ))),
            Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout { src, tag }),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::Disconnected(src)),
        }
    }
}

/// Runs `f` once per rank on `world` threads sharing an in-process transport
/// and returns the per-rank results in rank order.
pub fn run_inproc<R, F>(world: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut Communicator) -> R + Sync,
{
    run_inproc_with_timeout(world, DEFAULT_TIMEOUT, f)
}

pub fn run_inproc_with_timeout<R, F>(world: usize, timeout: Duration, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut Communicator) -> R + Sync,
{
    if world == 0 {
        return Err(CommError::InvalidRank { rank: 0, world });
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = InProcTransport::group(world, timeout)
            .into_iter()
            .map(|t| {
                std::thread::Builder::new()
                    .name(format!("rank-{}", t.rank))
                    .stack_size(32 << 20)
                    .spawn_scoped(scope, move || {
                        let mut comm = Communicator::new(t);
                        f(&mut comm)
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        Ok(handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect())
    })
}
