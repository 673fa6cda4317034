//! Multi-process transport over loopback TCP.
//!
//! Frame layout: `u32` payload length (little-endian), `u64` tag
//! (little-endian), then the payload bytes. Ranks find each other through a
//! [`Rendezvous`] server run by the launcher: each rank binds an ephemeral
//! listener, reports `(rank: u32, port: u16)` and receives every rank's port
//! back. Rank `r` then connects to all lower ranks (sending its rank as a
//! `u32` hello) and accepts connections from all higher ranks.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};

use super::{CommError, Result, Transport};

type Message = (u64, Vec<u8>);

pub fn write_frame<W: Write>(w: &mut W, tag: u64, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame larger than 4 GiB"))?;
    let mut header = [0u8; 12];
    header[..4].copy_from_slice(&len.to_le_bytes());
    header[4..].copy_from_slice(&tag.to_le_bytes());
    w.write_all(&header)?;
    w.write_all(payload)
}

pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<(u64, Vec<u8>)> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    let tag = u64::from_le_bytes(header[4..].try_into().expect("8 bytes"));
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((tag, payload))
}

pub struct SocketTransport {
    rank: usize,
    world: usize,
    writers: Vec<Option<TcpStream>>,
    readers: Vec<Option<Receiver<Message>>>,
    timeout: Duration,
}

impl SocketTransport {
    pub fn connect(rank: usize, world: usize, rendezvous: SocketAddr, timeout: Duration) -> Result<Self> {
        if rank >= world {
            return Err(CommError::InvalidRank { rank, world });
        }
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let port = listener.local_addr()?.port();
        let mut rv = connect_retry(rendezvous, timeout)?;
        rv.write_all(&(rank as u32).to_le_bytes())?;
        rv.write_all(&port.to_le_bytes())?;
        let mut ports = vec![0u8; 2 * world];
        rv.set_read_timeout(Some(timeout))?;
        rv.read_exact(&mut ports)?;
        let ports: Vec<u16> = ports.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();

        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        for (peer, &peer_port) in ports.iter().enumerate().take(rank) {
            let mut s = connect_retry(SocketAddr::from(([127, 0, 0, 1], peer_port)), timeout)?;
            s.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(s);
        }
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut pending = world - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    let mut hello = [0u8; 4];
                    s.read_exact(&mut hello)?;
                    let peer = u32::from_le_bytes(hello) as usize;
                    if peer <= rank || peer >= world || streams[peer].is_some() {
                        return Err(CommError::CollectiveMismatch(format!("unexpected hello from rank {peer}")));
                    }
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(CommError::Timeout { src: world, tag: 0 });
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let mut writers = Vec::with_capacity(world);
        let mut readers = Vec::with_capacity(world);
        for (peer, stream) in streams.into_iter().enumerate() {
            match stream {
                None => {
                    writers.push(None);
                    readers.push(None);
                }
                Some(s) => {
                    s.set_nodelay(true)?;
                    let mut read_half = s.try_clone()?;
                    let (tx, rx) = unbounded();
                    std::thread::Builder::new()
                        .name(format!("rank{rank}-from{peer}"))
                        .spawn(move || {
                            while let Ok(frame) = read_frame(&mut read_half) {
                                if tx.send(frame).is_err() {
                                    break;
                                }
                            }
                        })?;
                    writers.push(Some(s));
                    readers.push(Some(rx));
                }
            }
        }
        Ok(SocketTransport { rank, world, writers, readers, timeout })
    }
}

fn connect_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                let _ = e;
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&mut self, dst: usize, tag: u64, payload: Vec<u8>) -> Result<()> {
        let world = self.world;
        let stream = self
            .writers
            .get_mut(dst)
            .and_then(Option::as_mut)
            .ok_or(CommError::InvalidRank { rank: dst, world })?;
        write_frame(stream, tag, &payload).map_err(|_| CommError::Disconnected(dst))
    }

    fn recv(&mut self, src: usize, tag: u64) -> Result<Vec<u8>> {
        let world = self.world;
        let chan = self
            .readers
            .get(src)
            .and_then(Option::as_ref)
            .ok_or(CommError::InvalidRank { rank: src, world })?;
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

/// Port-exchange server for [`SocketTransport::connect`].
pub struct Rendezvous {
    listener: TcpListener,
}

impl Rendezvous {
    pub fn bind() -> Result<Self> {
        Ok(Rendezvous { listener: TcpListener::bind("127.0.0.1:0")? })
    }

    pub fn addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Collects `world` registrations, then answers each with the port table.
    pub fn serve(self, world: usize, timeout: Duration) -> Result<()> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut ports = vec![None; world];
        let mut conns = Vec::with_capacity(world);
        while conns.len() < world {
            match self.listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(timeout))?;
                    let mut buf = [0u8; 6];
                    s.read_exact(&mut buf)?;
                    let rank = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
                    let port = u16::from_le_bytes([buf[4], buf[5]]);
                    if rank >= world || ports[rank].is_some() {
                        return Err(CommError::CollectiveMismatch(format!("bad rendezvous registration {rank}")));
                    }
                    ports[rank] = Some(port);
                    conns.push(s);
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(CommError::Timeout { src: world, tag: 0 });
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let table: Vec<u8> = ports.iter().flat_map(|p| p.expect("all registered").to_le_bytes()).collect();
        for mut s in conns {
            s.write_all(&table)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::Communicator;
    use crate::partition::Partition;
    use crate::tensor::{DimLabel::*, Shape, Tensor};

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 0xdead_beef, b"hello").unwrap();
        assert_eq!(&buf[..4], &5u32.to_le_bytes());
        assert_eq!(&buf[4..12], &0xdead_beefu64.to_le_bytes());
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), (0xdead_beef, b"hello".to_vec()));
    }

    #[test]
    fn socket_collectives_match_inproc() {
        let world = 3;
        let rv = Rendezvous::bind().unwrap();
        let addr = rv.addr().unwrap();
        let timeout = Duration::from_secs(20);
        let server = std::thread::spawn(move || rv.serve(world, timeout));
        let global = Shape::new([(X, 6), (Y, 5)]).unwrap();
        let full = Tensor::from_fn(global.clone(), |i| i as f64).unwrap();
        let handles: Vec<_> = (0..world)
            .map(|rank| {
                let full = full.clone();
                std::thread::spawn(move || {
                    let mut comm = Communicator::new(SocketTransport::connect(rank, world, addr, timeout).unwrap());
                    let xp = Partition::block(X, 6, world).unwrap();
                    let yp = Partition::block(Y, 5, world).unwrap();
                    let local = crate::comm::tests::slab(&full, &xp, rank);
                    let moved = comm.repartition(&local, &xp, &yp).unwrap();
                    let back = comm.repartition(&moved, &yp, &xp).unwrap();
                    let total = comm.allreduce_sum(rank as f64).unwrap();
                    (back == local, moved == crate::comm::tests::slab(&full, &yp, rank), total)
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), (true, true, 3.0));
        }
        server.join().unwrap().unwrap();
    }
}
