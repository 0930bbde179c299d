//! The admin protocol: one command per line, space separated; every
//! command gets exactly one line back, `OK` with an optional payload or
//! `ERR <message>`.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::UdpError;

/// How often blocked admin threads look at the shutdown flag.
const POLL: Duration = Duration::from_millis(20);

pub type Handler = Arc<dyn Fn(&str) -> Result<String, String> + Send + Sync>;

pub fn format_reply(r: &Result<String, String>) -> String {
    match r {
        Ok(p) if p.is_empty() => "OK".to_string(),
        Ok(p) => format!("OK {p}"),
        Err(e) => format!("ERR {}", e.replace('\n', " ")),
    }
}

pub fn parse_reply(line: &str) -> Result<Result<String, String>, UdpError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line == "OK" {
        Ok(Ok(String::new()))
    } else if let Some(p) = line.strip_prefix("OK ") {
        Ok(Ok(p.to_string()))
    } else if let Some(e) = line.strip_prefix("ERR") {
        Ok(Err(e.trim_start().to_string()))
    } else {
        Err(UdpError::AdminProtocol(format!("unexpected reply {line:?}")))
    }
}

pub fn bind_listener(addr: SocketAddr) -> Result<TcpListener, UdpError> {
    let l = TcpListener::bind(addr).map_err(|source| UdpError::BindFailure { addr, source })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

/// Accepts connections until `stop` is set, serving each on its own thread.
pub fn serve(listener: TcpListener, handler: Handler, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut conns = Vec::new();
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let (h, stop) = (handler.clone(), stop.clone());
                    conns.push(thread::spawn(move || serve_conn(stream, h, stop)));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("admin accept: {e}");
                    thread::sleep(POLL);
                }
            }
            conns.retain(|c: &JoinHandle<()>| !c.is_finished());
        }
        for c in conns {
            let _ = c.join();
        }
    })
}

fn serve_conn(stream: TcpStream, handler: Handler, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(POLL));
    let Ok(mut out) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                let cmd = line.trim();
                if !cmd.is_empty() {
                    log::debug!("admin <- {cmd}");
                    let reply = format_reply(&handler(cmd));
                    if writeln!(out, "{reply}").is_err() {
                        return;
                    }
                }
                line.clear();
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                // a partial line stays in `line` until the rest arrives
                if stop.load(Ordering::Relaxed) {
                    return;
                }
            }
            Err(_) => return,
        }
    }
}

/// Client side of the admin protocol. Keeps one connection open and
/// reconnects once if it broke.
#[derive(Debug)]
pub struct AdminClient {
    addr: SocketAddr,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
}

impl AdminClient {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        AdminClient { addr, timeout, conn: None }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn connect(&mut self) -> Result<&mut (BufReader<TcpStream>, TcpStream), UdpError> {
        if self.conn.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_nodelay(true)?;
            let w = s.try_clone()?;
            self.conn = Some((BufReader::new(s), w));
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn exchange(&mut self, line: &str) -> Result<String, UdpError> {
        let (r, w) = self.connect()?;
        writeln!(w, "{line}")?;
        let mut reply = String::new();
        if r.read_line(&mut reply)? == 0 {
            return Err(UdpError::AdminProtocol("connection closed".into()));
        }
        Ok(reply)
    }

    /// Sends one command. `Ok(Err(msg))` is an `ERR` reply.
    pub fn request(&mut self, line: &str) -> Result<Result<String, String>, UdpError> {
        let had_conn = self.conn.is_some();
        let reply = match self.exchange(line) {
            Ok(r) => r,
            // a reused connection may have been closed by the far side;
            // a timeout is not retried since the command may have run
            Err(UdpError::Io(e)) if had_conn && !matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                self.conn = None;
                self.exchange(line).inspect_err(|_| self.conn = None)?
            }
            Err(UdpError::AdminProtocol(_)) if had_conn => {
                self.conn = None;
                self.exchange(line).inspect_err(|_| self.conn = None)?
            }
            Err(e) => {
                self.conn = None;
                return Err(e);
            }
        };
        parse_reply(&reply)
    }

    /// Sends one command and turns an `ERR` reply into an error.
    pub fn call(&mut self, line: &str) -> Result<String, UdpError> {
        self.request(line)?.map_err(UdpError::AdminProtocol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{Ipv4Addr, SocketAddrV4};

    #[test]
    fn reply_lines_round_trip() {
        for r in [Ok(String::new()), Ok("a b".to_string()), Err("bad thing".to_string())] {
            assert_eq!(parse_reply(&format_reply(&r)).unwrap(), r);
        }
        assert!(parse_reply("HUH").is_err());
    }

    #[test]
    fn server_answers_each_line() {
        let addr = SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::new(127, 0, 0, 1), 0));
        let l = bind_listener(addr).unwrap();
        let addr = l.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Handler = Arc::new(|cmd: &str| match cmd {
            "ping" => Ok("pong".into()),
            other => Err(format!("unknown {other}")),
        });
        let server = serve(l, handler, stop.clone());
        let mut c = AdminClient::new(addr, Duration::from_secs(2));
        assert_eq!(c.call("ping").unwrap(), "pong");
        assert_eq!(c.request("nope").unwrap(), Err("unknown nope".into()));
        assert_eq!(c.call("ping").unwrap(), "pong");
        stop.store(true, Ordering::Relaxed);
        drop(c);
        server.join().unwrap();
    }
}
