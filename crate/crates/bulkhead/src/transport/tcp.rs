//! TCP transport: length-prefixed frames over plain sockets.
//!
//! Frame on the wire: `u32` big-endian length, then the encoded
//! [`Frame`](super::Frame). The first frame on every connection is a
//! [`Frame::Hello`] naming the sender; authentication stays message-level,
//! so connections themselves carry no trust.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use super::{Addr, Frame};

const MAX_FRAME: u32 = 64 * 1024 * 1024;

pub fn write_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    let bytes = frame.encode();
    stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
    stream.write_all(&bytes)?;
    Ok(())
}

pub fn read_frame(stream: &mut TcpStream) -> std::io::Result<Frame> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut buf = vec![0u8; len as usize];
    stream.read_exact(&mut buf)?;
    Frame::decode(&buf)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// Inbound frame with its claimed origin (from the connection's Hello; the
/// protocol trusts signatures, not this label).
pub struct Inbound {
    pub from: Addr,
    pub frame: Frame,
}

/// One endpoint of the mesh: accepts connections, fans inbound frames into
/// a single channel, and connects outbound lazily.
pub struct TcpEndpoint {
    me: Addr,
    peers: BTreeMap<Addr, SocketAddr>,
    conns: BTreeMap<Addr, TcpStream>,
    rx: Receiver<Inbound>,
    _tx: Sender<Inbound>,
}

impl TcpEndpoint {
    pub fn bind(
        me: Addr,
        listen: SocketAddr,
        peers: BTreeMap<Addr, SocketAddr>,
    ) -> std::io::Result<TcpEndpoint> {
        let listener = TcpListener::bind(listen)?;
        let (tx, rx) = channel::<Inbound>();
        let accept_tx = tx.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let tx = accept_tx.clone();
                thread::spawn(move || {
                    let from = match read_frame(&mut stream) {
                        Ok(Frame::Hello { from }) => from,
                        _ => return, // no hello, no service
                    };
                    while let Ok(frame) = read_frame(&mut stream) {
                        if tx.send(Inbound { from, frame }).is_err() {
                            return;
                        }
                    }
                });
            }
        });
        Ok(TcpEndpoint {
            me,
            peers,
            conns: BTreeMap::new(),
            rx,
            _tx: tx,
        })
    }

    pub fn send(&mut self, to: Addr, frame: &Frame) {
        let Some(sock) = self.peers.get(&to).copied() else {
            return;
        };
        for _attempt in 0..2 {
            if !self.conns.contains_key(&to) {
                match TcpStream::connect(sock) {
                    Ok(mut stream) => {
                        if write_frame(&mut stream, &Frame::Hello { from: self.me }).is_err() {
                            return;
                        }
                        self.conns.insert(to, stream);
                    }
                    // Peer down; message-level retransmission covers it.
                    Err(_) => return,
                }
            }
            let stream = self.conns.get_mut(&to).unwrap();
            if write_frame(stream, frame).is_ok() {
                return;
            }
            self.conns.remove(&to);
        }
    }

    pub fn broadcast_replicas(&mut self, n: u32, frame: &Frame) {
        for r in 0..n {
            let addr = Addr::Replica(r);
            if addr != self.me {
                self.send(addr, frame);
            }
        }
    }

    /// Block up to `timeout` for the next inbound frame.
    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Option<Inbound> {
        self.rx.recv_timeout(timeout).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_cross_a_socket() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            read_frame(&mut stream).unwrap()
        });
        let mut stream = TcpStream::connect(addr).unwrap();
        write_frame(&mut stream, &Frame::SnapshotRequest { n: 42 }).unwrap();
        match handle.join().unwrap() {
            Frame::SnapshotRequest { n } => assert_eq!(n, 42),
            other => panic!("wrong frame {other:?}"),
        }
    }

    #[test]
    fn endpoint_mesh_exchanges_frames() {
        let l0 = TcpListener::bind("127.0.0.1:0").unwrap();
        let a0 = l0.local_addr().unwrap();
        let l1 = TcpListener::bind("127.0.0.1:0").unwrap();
        let a1 = l1.local_addr().unwrap();
        drop((l0, l1));

        let peers0: BTreeMap<Addr, SocketAddr> = [(Addr::Replica(1), a1)].into();
        let peers1: BTreeMap<Addr, SocketAddr> = [(Addr::Replica(0), a0)].into();
        let mut e0 = TcpEndpoint::bind(Addr::Replica(0), a0, peers0).unwrap();
        let e1 = TcpEndpoint::bind(Addr::Replica(1), a1, peers1).unwrap();

        e0.send(Addr::Replica(1), &Frame::SnapshotRequest { n: 7 });
        let inbound = e1
            .recv_timeout(std::time::Duration::from_secs(5))
            .expect("frame arrives");
        assert_eq!(inbound.from, Addr::Replica(0));
        assert!(matches!(inbound.frame, Frame::SnapshotRequest { n: 7 }));
    }

    #[test]
    fn oversized_frame_rejected() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            read_frame(&mut stream).is_err()
        });
        let mut stream = TcpStream::connect(addr).unwrap();
        stream.write_all(&u32::MAX.to_be_bytes()).unwrap();
        stream.write_all(&[0u8; 16]).unwrap();
        drop(stream);
        assert!(handle.join().unwrap());
    }
}
