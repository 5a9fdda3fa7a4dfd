//! End-to-end check of the packaged daemon binary: it starts, reports its
//! listen addresses, and answers on them.

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use flowtrace_core::proto::{self, P2mRequest, P2mResponse};

struct DaemonGuard(Child);

impl Drop for DaemonGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn daemon_starts_and_answers() {
    let child = Command::new(env!("CARGO_BIN_EXE_flowtraced"))
        .args([
            "--node",
            "smoke-1",
            "--p2m",
            "127.0.0.1:0",
            "--m2m",
            "127.0.0.1:0",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("daemon binary spawns");
    let mut daemon = DaemonGuard(child);

    let stdout = daemon.0.stdout.take().unwrap();
    let mut lines = BufReader::new(stdout).lines();
    let mut p2m_addr = None;
    for line in lines.by_ref() {
        let line = line.unwrap();
        if let Some(addr) = line.strip_prefix("p2m=") {
            p2m_addr = Some(addr.to_string());
            break;
        }
    }
    let p2m_addr = p2m_addr.expect("daemon printed its p2m address");

    let mut conn = TcpStream::connect(&p2m_addr).expect("daemon accepts connections");
    conn.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    proto::write_frame(&mut conn, &P2mRequest::NodeInfo).unwrap();
    let response: P2mResponse = proto::read_frame(&mut conn).unwrap();
    match response {
        P2mResponse::NodeInfo { node } => assert_eq!(node, "smoke-1"),
        other => panic!("expected node info, got {other:?}"),
    }
}

#[test]
fn daemon_rejects_bad_peer_syntax() {
    let output = Command::new(env!("CARGO_BIN_EXE_flowtraced"))
        .args(["--node", "x", "--peer", "nonsense"])
        .output()
        .expect("daemon binary runs");
    assert!(!output.status.success());
}
