#![allow(dead_code)]

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::PathBuf;

use netchain::placement::Ring;
use netchain::udprt::{Cluster, ClusterOptions, Ports};

/// Fields of a golden fixture, in order, named by their trailing comment.
pub fn fixture_fields(name: &str) -> Vec<(String, Vec<u8>)> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (hex_part, name) = l.split_once('#').expect("field name comment");
            (name.trim().to_string(), hex::decode(hex_part.trim()).expect("hex"))
        })
        .collect()
}

pub fn fixture_bytes(name: &str) -> Vec<u8> {
    join(&fixture_fields(name))
}

pub fn join(fields: &[(String, Vec<u8>)]) -> Vec<u8> {
    fields.iter().flat_map(|(_, b)| b.iter().copied()).collect()
}

pub fn set_field(fields: &mut [(String, Vec<u8>)], name: &str, value: &[u8]) {
    let f = fields.iter_mut().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no field {name}"));
    assert_eq!(f.1.len(), value.len(), "width of {name}");
    f.1 = value.to_vec();
}

/// Switch `i` (from 1) of a test's private loopback block.
pub fn sw(block: u8, i: u8) -> Ipv4Addr {
    Ipv4Addr::new(127, 0, block, i)
}

pub fn client_ip(block: u8, i: u8) -> Ipv4Addr {
    Ipv4Addr::new(127, 2, block, i)
}

/// A cluster on `127.0.<block>.*` with its ports shifted by `block`, so
/// tests can run side by side.
pub fn start_cluster(block: u8, chain: &[Ipv4Addr], spares: &[Ipv4Addr]) -> Cluster {
    let ring = Ring::single_chain(chain, 4, 1, 0).unwrap().with_spares(spares);
    let ports = ports(block);
    let options = ClusterOptions {
        ports,
        controller: SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::new(127, 0, block, 200), ports.admin)),
        store_capacity: 64,
        drain_us: 2_000,
    };
    Cluster::start(ring, options).unwrap()
}

pub fn ports(block: u8) -> Ports {
    Ports::offset(1000 + block as u16)
}
