//! Flow records and the small vocabulary of types built on them.
//!
//! The pipeline consumes unidirectional flows that have already been
//! aggregated to one record per (src, dst, proto) with average
//! bytes-per-packet in each direction. Raw byte/packet counts can be
//! quantized into that shape on ingest.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Header of the canonical (already quantized) flow CSV schema.
pub const FLOW_CSV_HEADER: &str = "src_ip,dst_ip,proto,bpp_out,bpp_in";

/// Header of the raw flow CSV schema carrying byte and packet counts.
pub const RAW_FLOW_CSV_HEADER: &str = "src_ip,dst_ip,proto,bytes_out,pkts_out,bytes_in,pkts_in";

/// An IPv4 host address. Ordering and equality follow the numeric address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(Ipv4Addr);

impl HostId {
    pub fn new(ip: Ipv4Addr) -> Self {
        HostId(ip)
    }

    pub fn from_u32(v: u32) -> Self {
        HostId(Ipv4Addr::from(v))
    }

    pub fn to_u32(self) -> u32 {
        u32::from(self.0)
    }

    pub fn ip(self) -> Ipv4Addr {
        self.0
    }

    /// The /16 network prefix, used as the unit of destination diversity.
    pub fn prefix16(self) -> Prefix16 {
        Prefix16((self.to_u32() >> 16) as u16)
    }
}

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HostId({})", self.0)
    }
}

impl FromStr for HostId {
    type Err = std::net::AddrParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(HostId(s.parse()?))
    }
}

impl Serialize for HostId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for HostId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// The upper 16 bits of an IPv4 address, i.e. its /16 network.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Prefix16(pub u16);

impl fmt::Display for Prefix16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 >> 8, self.0 & 0xff)
    }
}

/// Transport protocol of a flow.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("tcp"),
            Protocol::Udp => f.write_str("udp"),
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("tcp") {
            Ok(Protocol::Tcp)
        } else if s.eq_ignore_ascii_case("udp") {
            Ok(Protocol::Udp)
        } else {
            Err(format!("unknown protocol '{s}'"))
        }
    }
}

/// The traffic pattern of a flow: protocol plus the quantized
/// bytes-per-packet in each direction. Hosts that speak the same P2P
/// protocol tend to share patterns.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct FlowPattern {
    pub proto: Protocol,
    pub bpp_out: u64,
    pub bpp_in: u64,
}

/// Grouping key for flow clustering: source host plus its traffic pattern.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct FlowKey {
    pub src: HostId,
    pub proto: Protocol,
    pub bpp_out: u64,
    pub bpp_in: u64,
}

impl FlowKey {
    pub fn pattern(&self) -> FlowPattern {
        FlowPattern {
            proto: self.proto,
            bpp_out: self.bpp_out,
            bpp_in: self.bpp_in,
        }
    }
}

/// One aggregated flow record.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct FlowRecord {
    pub src: HostId,
    pub dst: HostId,
    pub proto: Protocol,
    pub bpp_out: u64,
    pub bpp_in: u64,
}

impl FlowRecord {
    /// Builds a record, rejecting flows from a host to itself.
    pub fn new(
        src: HostId,
        dst: HostId,
        proto: Protocol,
        bpp_out: u64,
        bpp_in: u64,
    ) -> Result<Self> {
        if src == dst {
            return Err(Error::Config(format!("flow src equals dst ({src})")));
        }
        Ok(FlowRecord {
            src,
            dst,
            proto,
            bpp_out,
            bpp_in,
        })
    }

    pub fn key(&self) -> FlowKey {
        FlowKey {
            src: self.src,
            proto: self.proto,
            bpp_out: self.bpp_out,
            bpp_in: self.bpp_in,
        }
    }

    pub fn pattern(&self) -> FlowPattern {
        FlowPattern {
            proto: self.proto,
            bpp_out: self.bpp_out,
            bpp_in: self.bpp_in,
        }
    }
}

/// One flow record before bytes-per-packet quantization.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RawFlowRecord {
    pub src: HostId,
    pub dst: HostId,
    pub proto: Protocol,
    pub bytes_out: u64,
    pub pkts_out: u64,
    pub bytes_in: u64,
    pub pkts_in: u64,
}

/// Integer average bytes-per-packet. A direction that carried no packets
/// quantizes to 0.
pub fn quantize_bpp(bytes: u64, pkts: u64) -> u64 {
    if pkts == 0 {
        0
    } else {
        bytes / pkts
    }
}

impl RawFlowRecord {
    /// Collapses the byte/packet counts into a quantized [`FlowRecord`].
    pub fn quantize(&self) -> FlowRecord {
        FlowRecord {
            src: self.src,
            dst: self.dst,
            proto: self.proto,
            bpp_out: quantize_bpp(self.bytes_out, self.pkts_out),
            bpp_in: quantize_bpp(self.bytes_in, self.pkts_in),
        }
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_ip(field: &str, which: &str, line: usize) -> Result<HostId> {
    field
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {which} address '{field}'")))
}

fn parse_count(field: &str, which: &str, line: usize) -> Result<u64> {
    field
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {which} '{field}': expected a nonnegative integer")))
}

fn split_fields(line: &str, expected: usize, line_no: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != expected {
        return Err(parse_err(
            line_no,
            format!("expected {expected} fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn check_header(actual: &str, expected: &str) -> Result<()> {
    if actual.trim() != expected {
        return Err(parse_err(
            1,
            format!("expected header '{expected}', got '{}'", actual.trim()),
        ));
    }
    Ok(())
}

/// Parses the canonical flow CSV schema (see [`FLOW_CSV_HEADER`]).
///
/// Errors name the offending 1-based line. Blank lines are skipped.
pub fn parse_flow_csv<R: BufRead>(reader: R) -> Result<Vec<FlowRecord>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty input, expected a header line"))??;
    check_header(&header, FLOW_CSV_HEADER)?;

    let mut flows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(&line, 5, line_no)?;
        let src = parse_ip(f[0], "source IP", line_no)?;
        let dst = parse_ip(f[1], "destination IP", line_no)?;
        if src == dst {
            return Err(parse_err(line_no, format!("src equals dst ({src})")));
        }
        let proto: Protocol = f[2].parse().map_err(|e| parse_err(line_no, e))?;
        let bpp_out = parse_count(f[3], "bpp_out", line_no)?;
        let bpp_in = parse_count(f[4], "bpp_in", line_no)?;
        flows.push(FlowRecord {
            src,
            dst,
            proto,
            bpp_out,
            bpp_in,
        });
    }
    Ok(flows)
}

/// Parses the raw flow CSV schema (see [`RAW_FLOW_CSV_HEADER`]).
///
/// A direction reporting bytes without packets is rejected.
pub fn parse_raw_flow_csv<R: BufRead>(reader: R) -> Result<Vec<RawFlowRecord>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty input, expected a header line"))??;
    check_header(&header, RAW_FLOW_CSV_HEADER)?;

    let mut flows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(&line, 7, line_no)?;
        let src = parse_ip(f[0], "source IP", line_no)?;
        let dst = parse_ip(f[1], "destination IP", line_no)?;
        if src == dst {
            return Err(parse_err(line_no, format!("src equals dst ({src})")));
        }
        let proto: Protocol = f[2].parse().map_err(|e| parse_err(line_no, e))?;
        let bytes_out = parse_count(f[3], "bytes_out", line_no)?;
        let pkts_out = parse_count(f[4], "pkts_out", line_no)?;
        let bytes_in = parse_count(f[5], "bytes_in", line_no)?;
        let pkts_in = parse_count(f[6], "pkts_in", line_no)?;
        if pkts_out == 0 && bytes_out > 0 {
            return Err(parse_err(line_no, "bytes_out > 0 with pkts_out = 0"));
        }
        if pkts_in == 0 && bytes_in > 0 {
            return Err(parse_err(line_no, "bytes_in > 0 with pkts_in = 0"));
        }
        flows.push(RawFlowRecord {
            src,
            dst,
            proto,
            bytes_out,
            pkts_out,
            bytes_in,
            pkts_in,
        });
    }
    Ok(flows)
}

/// Reads a flow CSV in either schema, sniffing the header, and returns
/// quantized records.
pub fn load_flow_csv<R: BufRead>(mut reader: R) -> Result<Vec<FlowRecord>> {
    let mut header = String::new();
    if reader.read_line(&mut header)? == 0 {
        return Err(parse_err(1, "empty input, expected a header line"));
    }
    let trimmed = header.trim();
    if trimmed == FLOW_CSV_HEADER {
        parse_flow_csv(ChainedHeader::new(header.clone(), reader))
    } else if trimmed == RAW_FLOW_CSV_HEADER {
        let raw = parse_raw_flow_csv(ChainedHeader::new(header.clone(), reader))?;
        Ok(raw.iter().map(RawFlowRecord::quantize).collect())
    } else {
        Err(parse_err(
            1,
            format!("unrecognized header '{trimmed}', expected '{FLOW_CSV_HEADER}' or '{RAW_FLOW_CSV_HEADER}'"),
        ))
    }
}

/// BufRead adapter that replays an already-consumed header line before the
/// rest of the stream.
struct ChainedHeader<R> {
    header: std::io::Cursor<Vec<u8>>,
    rest: R,
}

impl<R: BufRead> ChainedHeader<R> {
    fn new(header: String, rest: R) -> Self {
        ChainedHeader {
            header: std::io::Cursor::new(header.into_bytes()),
            rest,
        }
    }
}

impl<R: BufRead> std::io::Read for ChainedHeader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.header.read(buf)?;
        if n > 0 {
            return Ok(n);
        }
        self.rest.read(buf)
    }
}

impl<R: BufRead> BufRead for ChainedHeader<R> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        let pos = self.header.position() as usize;
        if pos < self.header.get_ref().len() {
            return Ok(&self.header.get_ref()[pos..]);
        }
        self.rest.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        let pos = self.header.position() as usize;
        let remaining = self.header.get_ref().len() - pos;
        if remaining > 0 {
            let take = amt.min(remaining);
            self.header.set_position((pos + take) as u64);
            if amt > take {
                self.rest.consume(amt - take);
            }
        } else {
            self.rest.consume(amt);
        }
    }
}

/// Writes flows in the canonical CSV schema. Round-trips with
/// [`parse_flow_csv`].
pub fn render_flow_csv<W: Write>(flows: &[FlowRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FLOW_CSV_HEADER}")?;
    for f in flows {
        writeln!(w, "{},{},{},{},{}", f.src, f.dst, f.proto, f.bpp_out, f.bpp_in)?;
    }
    Ok(())
}

/// An IPv4 CIDR block used to mark which hosts count as internal.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Cidr {
    base: u32,
    prefix_len: u8,
}

impl Cidr {
    /// Builds a block from a base address and prefix length, masking off
    /// any host bits.
    pub fn new(base: Ipv4Addr, prefix_len: u8) -> Result<Self> {
        if prefix_len > 32 {
            return Err(Error::Config(format!(
                "CIDR prefix length {prefix_len} out of range 0..=32"
            )));
        }
        let mask = Self::mask(prefix_len);
        Ok(Cidr {
            base: u32::from(base) & mask,
            prefix_len,
        })
    }

    fn mask(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - prefix_len)
        }
    }

    pub fn contains(&self, host: HostId) -> bool {
        host.to_u32() & Self::mask(self.prefix_len) == self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", Ipv4Addr::from(self.base), self.prefix_len)
    }
}

impl FromStr for Cidr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("invalid CIDR '{s}': expected addr/len")))?;
        let base: Ipv4Addr = addr
            .parse()
            .map_err(|_| Error::Config(format!("invalid CIDR base address '{addr}'")))?;
        let prefix_len: u8 = len
            .parse()
            .map_err(|_| Error::Config(format!("invalid CIDR prefix length '{len}'")))?;
        Cidr::new(base, prefix_len)
    }
}

impl Serialize for Cidr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// True when the host falls inside any of the given blocks.
pub fn is_internal(host: HostId, cidrs: &[Cidr]) -> bool {
    cidrs.iter().any(|c| c.contains(host))
}

/// Distinct /16 prefixes covered by a set of hosts.
pub fn distinct_prefixes<'a, I: IntoIterator<Item = &'a HostId>>(hosts: I) -> BTreeSet<Prefix16> {
    hosts.into_iter().map(|h| h.prefix16()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn host(s: &str) -> HostId {
        s.parse().unwrap()
    }

    #[test]
    fn parses_canonical_rows() {
        let input = "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,udp,120,310\n";
        let flows = parse_flow_csv(input.as_bytes()).unwrap();
        assert_eq!(
            flows,
            vec![FlowRecord {
                src: host("10.0.0.1"),
                dst: host("8.8.8.8"),
                proto: Protocol::Udp,
                bpp_out: 120,
                bpp_in: 310,
            }]
        );
    }

    #[test]
    fn header_only_gives_empty_set() {
        let flows = parse_flow_csv("src_ip,dst_ip,proto,bpp_out,bpp_in\n".as_bytes()).unwrap();
        assert!(flows.is_empty());
    }

    #[test]
    fn rejects_wrong_header() {
        let err = parse_flow_csv("src,dst,proto,a,b\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_self_flow_with_line_number() {
        let input = "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,tcp,1,1\n10.0.0.2,10.0.0.2,tcp,1,1\n";
        let err = parse_flow_csv(input.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("src equals dst"), "{reason}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_malformed_fields() {
        let cases = [
            "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,tcp,1\n",
            "src_ip,dst_ip,proto,bpp_out,bpp_in\nnot-an-ip,8.8.8.8,tcp,1,1\n",
            "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,icmp,1,1\n",
            "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,tcp,-5,1\n",
            "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,tcp,1.5,1\n",
        ];
        for input in cases {
            let err = parse_flow_csv(input.as_bytes()).unwrap_err();
            assert!(matches!(err, Error::Parse { line: 2, .. }), "{input:?} -> {err}");
        }
    }

    #[test]
    fn quantizes_raw_counts_with_floor() {
        let input = "src_ip,dst_ip,proto,bytes_out,pkts_out,bytes_in,pkts_in\n\
                     10.0.0.1,8.8.8.8,udp,1000,7,300,3\n\
                     10.0.0.2,8.8.8.8,tcp,0,0,64,1\n";
        let raw = parse_raw_flow_csv(input.as_bytes()).unwrap();
        let flows: Vec<FlowRecord> = raw.iter().map(RawFlowRecord::quantize).collect();
        assert_eq!(flows[0].bpp_out, 142);
        assert_eq!(flows[0].bpp_in, 100);
        assert_eq!(flows[1].bpp_out, 0);
        assert_eq!(flows[1].bpp_in, 64);
    }

    #[test]
    fn rejects_bytes_without_packets() {
        let input = "src_ip,dst_ip,proto,bytes_out,pkts_out,bytes_in,pkts_in\n\
                     10.0.0.1,8.8.8.8,udp,500,0,0,0\n";
        let err = parse_raw_flow_csv(input.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_sniffs_both_schemas() {
        let canonical = "src_ip,dst_ip,proto,bpp_out,bpp_in\n10.0.0.1,8.8.8.8,udp,142,100\n";
        let raw = "src_ip,dst_ip,proto,bytes_out,pkts_out,bytes_in,pkts_in\n10.0.0.1,8.8.8.8,udp,1000,7,300,3\n";
        let a = load_flow_csv(canonical.as_bytes()).unwrap();
        let b = load_flow_csv(raw.as_bytes()).unwrap();
        assert_eq!(a, b);

        let err = load_flow_csv("nope\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn prefix16_takes_upper_octets() {
        assert_eq!(host("131.204.7.9").prefix16(), host("131.204.200.1").prefix16());
        assert_ne!(host("131.204.7.9").prefix16(), host("131.205.7.9").prefix16());
        assert_eq!(host("131.204.7.9").prefix16().to_string(), "131.204");
    }

    #[test]
    fn cidr_membership() {
        let c: Cidr = "10.0.0.0/8".parse().unwrap();
        assert!(c.contains(host("10.255.1.2")));
        assert!(!c.contains(host("11.0.0.1")));

        let narrow: Cidr = "192.168.1.128/25".parse().unwrap();
        assert!(narrow.contains(host("192.168.1.200")));
        assert!(!narrow.contains(host("192.168.1.100")));

        let all: Cidr = "0.0.0.0/0".parse().unwrap();
        assert!(all.contains(host("8.8.8.8")));

        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
        assert!("10.0.0.0".parse::<Cidr>().is_err());

        let masked: Cidr = "10.1.2.3/8".parse().unwrap();
        assert_eq!(masked.to_string(), "10.0.0.0/8");
    }

    #[test]
    fn protocol_parse_is_case_insensitive() {
        assert_eq!("TCP".parse::<Protocol>().unwrap(), Protocol::Tcp);
        assert_eq!("Udp".parse::<Protocol>().unwrap(), Protocol::Udp);
        assert!("sctp".parse::<Protocol>().is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(rows in proptest::collection::vec(
            (any::<u32>(), any::<u32>(), any::<bool>(), 0u64..10_000, 0u64..10_000),
            0..50,
        )) {
            let flows: Vec<FlowRecord> = rows
                .into_iter()
                .filter(|(s, d, ..)| s != d)
                .map(|(s, d, tcp, bo, bi)| FlowRecord {
                    src: HostId::from_u32(s),
                    dst: HostId::from_u32(d),
                    proto: if tcp { Protocol::Tcp } else { Protocol::Udp },
                    bpp_out: bo,
                    bpp_in: bi,
                })
                .collect();
            let mut buf = Vec::new();
            render_flow_csv(&flows, &mut buf).unwrap();
            let parsed = parse_flow_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed, flows);
        }

        #[test]
        fn prefix16_matches_upper_bits(a in any::<u32>(), b in any::<u32>()) {
            let same = HostId::from_u32(a).prefix16() == HostId::from_u32(b).prefix16();
            prop_assert_eq!(same, a >> 16 == b >> 16);
        }

        #[test]
        fn quantize_never_exceeds_bytes(bytes in any::<u64>(), pkts in any::<u64>()) {
            let bpp = quantize_bpp(bytes, pkts);
            prop_assert!(bpp <= bytes);
            if pkts > 0 {
                prop_assert_eq!(bpp, bytes / pkts);
            }
        }
    }
}
