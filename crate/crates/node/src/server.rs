//! TCP listener for inter-site frames.

use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mammofed_core::federation::{read_frame, write_frame};

use crate::node::Node;

/// Idle connections are closed after this long.
const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

/// A running listener; dropping it stops accepting connections.
#[derive(Debug)]
pub struct NodeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl NodeServer {
    /// Binds `addr` (port 0 picks a free port) and serves `node` on it.
    pub fn bind(node: Arc<Node>, addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = std::thread::Builder::new()
            .name(format!("accept-{}", node.site_id()))
            .spawn(move || {
                for conn in listener.incoming() {
                    if flag.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let node = Arc::clone(&node);
                    std::thread::spawn(move || serve_connection(&node, stream));
                }
            })?;
        Ok(NodeServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept so it sees the flag.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for NodeServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(node: &Node, mut stream: TcpStream) {
    let _ = stream.set_read_timeout(Some(IDLE_TIMEOUT));
    let _ = stream.set_nodelay(true);
    loop {
        let body = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::InvalidData => {
                // Oversized or malformed length prefix: answer once, then hang up.
                let _ = write_frame(&mut stream, &node.handle_frame(&[]));
                return;
            }
            Err(_) => return,
        };
        let reply = node.handle_frame(&body);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}
