//! Wire format for coordination queries carried as UDP payloads.
//!
//! All multi-byte integers are big-endian. The layout is fixed:
//!
//! ```text
//! offset  size     field
//! 0       2        magic 0x4E 0x43 ("NC")
//! 2       1        op (low nibble: opcode, high nibble: reply flags)
//! 3       4        client_id
//! 7       4        req_id
//! 11      2        session
//! 13      4        seq
//! 17      1        sc (number of chain entries, <= 8)
//! 18      4*sc     chain (IPv4 addresses)
//! 18+4sc  16       key
//! 34+4sc  1        val_len (<= 128)
//! 35+4sc  val_len  value
//! ```
//!
//! Total length is `35 + 4*sc + val_len`.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x4E, 0x43];
pub const KEY_LEN: usize = 16;
pub const MAX_CHAIN: usize = 8;
pub const MAX_VALUE: usize = 128;
/// Length of a packet with an empty chain and an empty value.
pub const MIN_LEN: usize = 35;

const OFF_OP: usize = 2;
const OFF_CLIENT: usize = 3;
const OFF_REQ: usize = 7;
const OFF_SESSION: usize = 11;
const OFF_SEQ: usize = 13;
const OFF_SC: usize = 17;
const OFF_CHAIN: usize = 18;

/// A 16-byte opaque key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Key(pub [u8; KEY_LEN]);

impl Key {
    /// Builds a key from arbitrary bytes: shorter inputs are zero padded,
    /// longer inputs are truncated.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut k = [0u8; KEY_LEN];
        let n = bytes.len().min(KEY_LEN);
        k[..n].copy_from_slice(&bytes[..n]);
        Key(k)
    }

    /// Key derived from an integer index, used by workloads.
    pub fn from_index(i: u64) -> Self {
        let mut k = [0u8; KEY_LEN];
        k[..4].copy_from_slice(b"key-");
        k[8..].copy_from_slice(&i.to_be_bytes());
        Key(k)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let v = hex::decode(s).ok()?;
        (v.len() == KEY_LEN).then(|| Key::from_bytes(&v))
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", self.to_hex())
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Write ordering tag. Ordering is lexicographic on `(session, seq)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Version {
    pub session: u16,
    pub seq: u32,
}

impl Version {
    pub const ZERO: Version = Version { session: 0, seq: 0 };

    pub fn new(session: u16, seq: u32) -> Self {
        Version { session, seq }
    }

    pub fn is_zero(&self) -> bool {
        *self == Version::ZERO
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.session, self.seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum OpCode {
    Read = 0x01,
    Write = 0x02,
    Reply = 0x03,
    Insert = 0x04,
    Delete = 0x05,
    Cas = 0x06,
}

impl OpCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => OpCode::Read,
            0x02 => OpCode::Write,
            0x03 => OpCode::Reply,
            0x04 => OpCode::Insert,
            0x05 => OpCode::Delete,
            0x06 => OpCode::Cas,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpCode::Read => "READ",
            OpCode::Write => "WRITE",
            OpCode::Reply => "REPLY",
            OpCode::Insert => "INSERT",
            OpCode::Delete => "DELETE",
            OpCode::Cas => "CAS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "READ" => OpCode::Read,
            "WRITE" => OpCode::Write,
            "REPLY" => OpCode::Reply,
            "INSERT" => OpCode::Insert,
            "DELETE" => OpCode::Delete,
            "CAS" => OpCode::Cas,
            _ => return None,
        })
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reply status bits stored in the high nibble of the op byte.
pub mod flags {
    pub const NOT_FOUND: u8 = 0x10;
    pub const CAS_FAIL: u8 = 0x20;
    pub const ALL: u8 = NOT_FOUND | CAS_FAIL;
}

/// One coordination message. `sc` and `val_len` on the wire are the lengths
/// of `chain` and `value`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Packet {
    pub op: OpCode,
    pub flags: u8,
    pub client_id: u32,
    pub req_id: u32,
    pub session: u16,
    pub seq: u32,
    pub chain: Vec<Ipv4Addr>,
    pub key: Key,
    pub value: Vec<u8>,
}

impl Packet {
    pub fn new(op: OpCode, key: Key) -> Self {
        Packet {
            op,
            flags: 0,
            client_id: 0,
            req_id: 0,
            session: 0,
            seq: 0,
            chain: Vec::new(),
            key,
            value: Vec::new(),
        }
    }

    pub fn version(&self) -> Version {
        Version::new(self.session, self.seq)
    }

    pub fn set_version(&mut self, v: Version) {
        self.session = v.session;
        self.seq = v.seq;
    }

    pub fn sc(&self) -> usize {
        self.chain.len()
    }

    pub fn not_found(&self) -> bool {
        self.flags & flags::NOT_FOUND != 0
    }

    pub fn cas_failed(&self) -> bool {
        self.flags & flags::CAS_FAIL != 0
    }

    /// Checks the structural invariants that `encode` relies on.
    pub fn is_well_formed(&self) -> bool {
        self.chain.len() <= MAX_CHAIN
            && self.value.len() <= MAX_VALUE
            && self.flags & !flags::ALL == 0
    }

    pub fn encoded_len(&self) -> usize {
        MIN_LEN + 4 * self.chain.len() + self.value.len()
    }

    /// Serializes into a fresh buffer.
    ///
    /// Panics if the packet violates the chain or value length caps.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut buf);
        buf
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        assert!(self.is_well_formed(), "packet violates wire invariants");
        buf.extend_from_slice(&MAGIC);
        buf.push(self.op as u8 | self.flags);
        buf.extend_from_slice(&self.client_id.to_be_bytes());
        buf.extend_from_slice(&self.req_id.to_be_bytes());
        buf.extend_from_slice(&self.session.to_be_bytes());
        buf.extend_from_slice(&self.seq.to_be_bytes());
        buf.push(self.chain.len() as u8);
        for ip in &self.chain {
            buf.extend_from_slice(&ip.octets());
        }
        buf.extend_from_slice(&self.key.0);
        buf.push(self.value.len() as u8);
        buf.extend_from_slice(&self.value);
    }

    pub fn decode(buf: &[u8]) -> Result<Packet, DecodeError> {
        if buf.len() < MIN_LEN {
            return Err(DecodeError::LengthMismatch {
                offset: buf.len(),
                expected: MIN_LEN,
                actual: buf.len(),
            });
        }
        if buf[..2] != MAGIC {
            return Err(DecodeError::BadMagic { offset: 0 });
        }
        let op_byte = buf[OFF_OP];
        let op = OpCode::from_u8(op_byte & 0x0F)
            .filter(|_| op_byte & 0xF0 & !flags::ALL == 0)
            .ok_or(DecodeError::BadOp {
                offset: OFF_OP,
                byte: op_byte,
            })?;
        let sc = buf[OFF_SC] as usize;
        if sc > MAX_CHAIN {
            return Err(DecodeError::ChainTooLong { offset: OFF_SC, sc });
        }
        let off_key = OFF_CHAIN + 4 * sc;
        let off_vlen = off_key + KEY_LEN;
        if buf.len() <= off_vlen {
            return Err(DecodeError::LengthMismatch {
                offset: buf.len(),
                expected: off_vlen + 1,
                actual: buf.len(),
            });
        }
        let val_len = buf[off_vlen] as usize;
        if val_len > MAX_VALUE {
            return Err(DecodeError::ValueTooLong {
                offset: off_vlen,
                len: val_len,
            });
        }
        let total = off_vlen + 1 + val_len;
        if buf.len() != total {
            return Err(DecodeError::LengthMismatch {
                offset: off_vlen,
                expected: total,
                actual: buf.len(),
            });
        }

        let chain = buf[OFF_CHAIN..off_key]
            .chunks_exact(4)
            .map(|c| Ipv4Addr::new(c[0], c[1], c[2], c[3]))
            .collect();
        Ok(Packet {
            op,
            flags: op_byte & 0xF0,
            client_id: be_u32(&buf[OFF_CLIENT..]),
            req_id: be_u32(&buf[OFF_REQ..]),
            session: u16::from_be_bytes([buf[OFF_SESSION], buf[OFF_SESSION + 1]]),
            seq: be_u32(&buf[OFF_SEQ..]),
            chain,
            key: Key::from_bytes(&buf[off_key..off_vlen]),
            value: buf[off_vlen + 1..].to_vec(),
        })
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("bad op byte {byte:#04x} at offset {offset}")]
    BadOp { offset: usize, byte: u8 },
    #[error("length mismatch at offset {offset}: expected {expected} bytes, got {actual}")]
    LengthMismatch {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("chain too long at offset {offset}: sc={sc}")]
    ChainTooLong { offset: usize, sc: usize },
    #[error("value too long at offset {offset}: val_len={len}")]
    ValueTooLong { offset: usize, len: usize },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::BadMagic { offset }
            | DecodeError::BadOp { offset, .. }
            | DecodeError::LengthMismatch { offset, .. }
            | DecodeError::ChainTooLong { offset, .. }
            | DecodeError::ValueTooLong { offset, .. } => offset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key_k() -> Key {
        Key::from_bytes(b"K")
    }

    #[test]
    fn write_with_empty_chain_and_four_byte_value() {
        let mut p = Packet::new(OpCode::Write, key_k());
        p.value = vec![1, 2, 3, 4];
        assert_eq!(p.encode().len(), 39);
    }

    #[test]
    fn truncated_buffer_is_length_mismatch() {
        let err = Packet::decode(&[0x4E, 0x43, 1, 0, 0, 0, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, DecodeError::LengthMismatch { .. }), "{err:?}");
    }

    #[test]
    fn op_out_of_range_is_bad_op() {
        let mut bytes = Packet::new(OpCode::Read, key_k()).encode();
        bytes[2] = 0x09;
        assert_eq!(
            Packet::decode(&bytes),
            Err(DecodeError::BadOp { offset: 2, byte: 0x09 })
        );
        bytes[2] = 0x00;
        assert!(matches!(Packet::decode(&bytes), Err(DecodeError::BadOp { .. })));
        // unknown flag bit
        bytes[2] = 0x81;
        assert!(matches!(Packet::decode(&bytes), Err(DecodeError::BadOp { .. })));
    }

    #[test]
    fn flags_share_the_op_byte() {
        let mut p = Packet::new(OpCode::Reply, key_k());
        p.flags = flags::NOT_FOUND;
        let bytes = p.encode();
        assert_eq!(bytes[2], 0x13);
        assert!(Packet::decode(&bytes).unwrap().not_found());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Packet::new(OpCode::Read, key_k()).encode();
        bytes[1] = 0;
        assert_eq!(Packet::decode(&bytes), Err(DecodeError::BadMagic { offset: 0 }));
    }

    #[test]
    fn chain_and_value_caps() {
        let mut bytes = Packet::new(OpCode::Read, key_k()).encode();
        bytes[17] = 9;
        assert_eq!(
            Packet::decode(&bytes),
            Err(DecodeError::ChainTooLong { offset: 17, sc: 9 })
        );
        let mut bytes = Packet::new(OpCode::Read, key_k()).encode();
        bytes[34] = 129;
        bytes.extend(std::iter::repeat_n(0, 129));
        assert_eq!(
            Packet::decode(&bytes),
            Err(DecodeError::ValueTooLong { offset: 34, len: 129 })
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Packet::new(OpCode::Read, key_k()).encode();
        bytes.push(0);
        assert!(matches!(
            Packet::decode(&bytes),
            Err(DecodeError::LengthMismatch { .. })
        ));
    }

    pub(crate) fn arb_packet() -> impl Strategy<Value = Packet> {
        (
            1u8..=6,
            prop_oneof![Just(0u8), Just(flags::NOT_FOUND), Just(flags::CAS_FAIL)],
            any::<u32>(),
            any::<u32>(),
            any::<u16>(),
            any::<u32>(),
            proptest::collection::vec(any::<u32>(), 0..=MAX_CHAIN),
            any::<[u8; KEY_LEN]>(),
            proptest::collection::vec(any::<u8>(), 0..=MAX_VALUE),
        )
            .prop_map(|(op, fl, client_id, req_id, session, seq, chain, key, value)| Packet {
                op: OpCode::from_u8(op).unwrap(),
                flags: fl,
                client_id,
                req_id,
                session,
                seq,
                chain: chain.into_iter().map(Ipv4Addr::from).collect(),
                key: Key(key),
                value,
            })
    }

    proptest! {
        #[test]
        fn round_trip(p in arb_packet()) {
            let bytes = p.encode();
            prop_assert_eq!(bytes.len(), MIN_LEN + 4 * p.chain.len() + p.value.len());
            prop_assert_eq!(Packet::decode(&bytes).unwrap(), p);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            if let Ok(p) = Packet::decode(&bytes) {
                prop_assert_eq!(p.encode(), bytes);
            }
        }

        #[test]
        fn decode_of_mutated_valid_packet(p in arb_packet(), idx in any::<prop::sample::Index>(), b in any::<u8>()) {
            let mut bytes = p.encode();
            let i = idx.index(bytes.len());
            bytes[i] = b;
            if let Ok(q) = Packet::decode(&bytes) {
                prop_assert_eq!(q.encode(), bytes);
            }
        }
    }
}
