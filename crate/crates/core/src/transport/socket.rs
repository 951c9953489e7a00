use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;

use super::codec::{read_frame, write_frame, Message};
use super::{CommLedger, Reply, Responder, Transport, Upload, UploadKind};
use crate::error::{Error, Result};

struct Link {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// TCP backend: one connection per learner, frames as in [`super::codec`].
pub struct SocketTransport {
    links: Vec<Link>,
    ledger: CommLedger,
    workers: Vec<JoinHandle<Result<()>>>,
    /// Encoded sizes of the broadcast and upload frames actually written and read.
    pub wire_bytes_down: u64,
    pub wire_bytes_up: u64,
}

impl SocketTransport {
    /// Accepts `learners` connections on `listener`. Each learner introduces itself with an
    /// acknowledgement frame carrying its 1-based id.
    pub fn accept(listener: &TcpListener, learners: usize) -> Result<Self> {
        let mut slots: Vec<Option<Link>> = (0..learners).map(|_| None).collect();
        for _ in 0..learners {
            let (stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let id = match read_frame(&mut reader)? {
                Some(Message::Ack { learner_id, .. }) => learner_id as usize,
                other => return Err(Error::Protocol(format!("expected HELLO, got {other:?}"))),
            };
            let slot = id
                .checked_sub(1)
                .and_then(|i| slots.get_mut(i))
                .ok_or_else(|| Error::Protocol(format!("learner id {id} outside 1..={learners}")))?;
            if slot.is_some() {
                return Err(Error::Protocol(format!("learner {id} connected twice")));
            }
            *slot = Some(Link {
                reader,
                writer: BufWriter::new(stream),
            });
        }
        Ok(SocketTransport {
            links: slots.into_iter().map(|l| l.expect("every slot filled")).collect(),
            ledger: CommLedger::new(learners),
            workers: Vec::new(),
            wire_bytes_down: 0,
            wire_bytes_up: 0,
        })
    }

    /// Runs every responder as a learner client on its own thread, connected over loopback.
    pub fn spawn_local(responders: Vec<Box<dyn Responder>>) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let count = responders.len();
        let workers: Vec<_> = responders
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                std::thread::spawn(move || run_learner_client(addr, (i + 1) as u16, r.as_mut()))
            })
            .collect();
        let mut transport = Self::accept(&listener, count)?;
        transport.workers = workers;
        Ok(transport)
    }

    fn collect(&mut self, index: usize, iteration: u32) -> Result<Reply> {
        let id = index as u16 + 1;
        let mut upload = None;
        loop {
            let msg = read_frame(&mut self.links[index].reader)?
                .ok_or_else(|| Error::Protocol(format!("learner {id} disconnected")))?;
            if msg.learner_id() != id || msg.iteration() != iteration {
                return Err(Error::Protocol(format!(
                    "frame from learner {} for iteration {} on the link of learner {id} at iteration {iteration}",
                    msg.learner_id(),
                    msg.iteration()
                )));
            }
            let frame_len = msg.frame_len() as u64;
            let (kind, vector, sigma2) = match msg {
                Message::Ack { payload, .. } => {
                    let objective_estimate = *payload
                        .first()
                        .ok_or_else(|| Error::Protocol("acknowledgement without telemetry".into()))?;
                    return Ok(Reply {
                        upload,
                        objective_estimate,
                    });
                }
                Message::UploadDelta { delta, sigma2, .. } => (UploadKind::Delta, delta, sigma2),
                Message::UploadFull { grad, sigma2, .. } => (UploadKind::Full, grad, sigma2),
                Message::Broadcast { .. } => {
                    return Err(Error::Protocol("learner sent a broadcast".into()))
                }
            };
            self.ledger.record_upload(index, iteration, vector.len())?;
            self.wire_bytes_up += frame_len;
            upload = Some(Upload {
                kind,
                vector,
                sigma2,
            });
        }
    }

    fn shutdown(&mut self) -> Result<()> {
        for link in &mut self.links {
            let _ = link.writer.flush();
            let _ = link.writer.get_ref().shutdown(Shutdown::Both);
        }
        self.links.clear();
        let mut first_err = None;
        for handle in self.workers.drain(..) {
            let outcome = handle
                .join()
                .unwrap_or_else(|_| Err(Error::Protocol("learner thread panicked".into())));
            if let (Err(e), None) = (outcome, &first_err) {
                first_err = Some(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    /// Closes every link and joins local learner threads, surfacing the first learner error.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }
}

impl Transport for SocketTransport {
    fn learners(&self) -> usize {
        self.links.len()
    }

    fn exchange(&mut self, iteration: u32, theta: &[f64]) -> Result<Vec<Reply>> {
        if self.links.is_empty() {
            return Ok(Vec::new());
        }
        let frame = Message::Broadcast {
            iteration,
            theta: theta.to_vec(),
        };
        for link in &mut self.links {
            self.wire_bytes_down += write_frame(&mut link.writer, &frame)? as u64;
            link.writer.flush()?;
        }
        self.ledger.record_broadcast(theta.len());
        (0..self.links.len()).map(|i| self.collect(i, iteration)).collect()
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Learner side of the socket backend: connects, sends HELLO, then answers broadcasts until
/// the controller closes the connection.
pub fn run_learner_client<A: ToSocketAddrs>(
    addr: A,
    learner_id: u16,
    responder: &mut dyn Responder,
) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    write_frame(
        &mut writer,
        &Message::Ack {
            learner_id,
            iteration: 0,
            payload: Vec::new(),
        },
    )?;
    writer.flush()?;
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => return Ok(()),
            // the controller tearing the link down mid-read is a normal shutdown
            Err(Error::Transport(e)) if is_disconnect(&e) => return Ok(()),
            Err(e) => return Err(e),
        };
        let Message::Broadcast { iteration, theta } = msg else {
            return Err(Error::Protocol(format!("learner {learner_id} expected a broadcast")));
        };
        let reply = responder.respond(iteration, &theta)?;
        if let Some(up) = reply.upload {
            let frame = match up.kind {
                UploadKind::Delta => Message::UploadDelta {
                    learner_id,
                    iteration,
                    delta: up.vector,
                    sigma2: up.sigma2,
                },
                UploadKind::Full => Message::UploadFull {
                    learner_id,
                    iteration,
                    grad: up.vector,
                    sigma2: up.sigma2,
                },
            };
            write_frame(&mut writer, &frame)?;
        }
        write_frame(
            &mut writer,
            &Message::Ack {
                learner_id,
                iteration,
                payload: vec![reply.objective_estimate],
            },
        )?;
        writer.flush()?;
    }
}

fn is_disconnect(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(e.kind(), ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof)
}
