//! Packet and flow data model, the trace-CSV interchange format, the
//! synthetic device-trace generator, and byte-rate series.
//!
//! Timestamps are integer microseconds since the trace epoch throughout.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

/// Header line of the trace-CSV format.
pub const TRACE_HEADER: &str =
    "timestamp_us,src_addr,dst_addr,src_port,dst_port,protocol,size,direction,dns_query,src_hw";

const TRACE_FIELDS: usize = 10;

/// Default NetFlow-style inactivity timeout, in seconds.
pub const DEFAULT_FLOW_TIMEOUT_SECS: u64 = 60;

pub(crate) const MICROS_PER_SEC: u64 = 1_000_000;

pub(crate) fn secs_to_micros(secs: f64) -> u64 {
    (secs * MICROS_PER_SEC as f64).round().max(0.0) as u64
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace document is missing the header line")]
    MissingHeader,
    #[error("unexpected header: {0:?}")]
    BadHeader(String),
    #[error("line {line}: expected {TRACE_FIELDS} fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: malformed {field}: {value:?}")]
    Malformed {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {field} out of range: {value}")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: timestamp {found} precedes previous timestamp {previous}")]
    TimestampRegression {
        line: usize,
        previous: u64,
        found: u64,
    },
    #[error("line {line}: {reason}")]
    InvalidLine { line: usize, reason: &'static str },
    #[error("record {index}: timestamp precedes the previous record")]
    Unsorted { index: usize },
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: &'static str },
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("event {label:?} at {time_us} us lies outside [0, {duration_us}) us")]
    EventOutOfRange {
        label: String,
        time_us: u64,
        duration_us: u64,
    },
    #[error("archetype {archetype:?} has no event {label:?}")]
    UnknownEvent { archetype: String, label: String },
    #[error("invalid archetype {archetype:?}: {reason}")]
    InvalidArchetype {
        archetype: String,
        reason: &'static str,
    },
    #[error("archetype catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    fn as_str(self) -> &'static str {
        match self {
            Direction::Upload => "UP",
            Direction::Download => "DOWN",
        }
    }
}

/// A 6-byte hardware address in textual colon form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HwAddr(pub [u8; 6]);

#[derive(Debug, Error, PartialEq)]
#[error("malformed hardware address: {0:?}")]
pub struct HwAddrError(pub String);

impl HwAddr {
    /// The organizationally unique identifier: the first three bytes.
    pub fn oui(&self) -> [u8; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }
}

pub(crate) fn parse_hex_octets<const N: usize>(s: &str) -> Option<[u8; N]> {
    let mut out = [0u8; N];
    let mut parts = s.split(':');
    for slot in out.iter_mut() {
        let part = parts.next()?;
        if part.len() != 2 {
            return None;
        }
        *slot = u8::from_str_radix(part, 16).ok()?;
    }
    parts.next().is_none().then_some(out)
}

impl FromStr for HwAddr {
    type Err = HwAddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex_octets::<6>(s)
            .map(HwAddr)
            .ok_or_else(|| HwAddrError(s.to_string()))
    }
}

impl fmt::Display for HwAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02X}:{:02X}:{:02X}:{:02X}:{:02X}:{:02X}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

/// One observed packet's metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp_us: u64,
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    /// Bytes on the wire.
    pub size: u32,
    pub direction: Direction,
    pub dns_query: Option<String>,
    pub src_hw: Option<HwAddr>,
}

fn text_field_ok(s: &str) -> bool {
    !s.is_empty() && !s.contains([',', '\n', '\r'])
}

impl PacketRecord {
    pub fn flow_key(&self) -> FlowKey {
        FlowKey {
            src_addr: self.src_addr.clone(),
            dst_addr: self.dst_addr.clone(),
            src_port: self.src_port,
            dst_port: self.dst_port,
            protocol: self.protocol,
        }
    }

    pub fn is_dns(&self) -> bool {
        self.protocol == Protocol::Udp && (self.dst_port == 53 || self.src_port == 53)
    }

    /// Checks the per-record invariants that the CSV grammar cannot express.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.size == 0 {
            return Err("size must be at least 1");
        }
        if !text_field_ok(&self.src_addr) || !text_field_ok(&self.dst_addr) {
            return Err("addresses must be non-empty and free of commas and line breaks");
        }
        if let Some(q) = &self.dns_query {
            if !self.is_dns() {
                return Err("dns_query is only allowed on UDP port-53 records");
            }
            if !text_field_ok(q) {
                return Err("dns_query must be non-empty and free of commas and line breaks");
            }
        }
        Ok(())
    }
}

/// The 5-tuple. Unidirectional: the two legs of a conversation are distinct keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub key: FlowKey,
    pub packets: Vec<PacketRecord>,
    pub first_ts: u64,
    pub last_ts: u64,
}

impl Flow {
    pub fn total_bytes(&self) -> u64 {
        self.packets.iter().map(|p| u64::from(p.size)).sum()
    }
}

fn parse_port(line: usize, field: &'static str, value: &str) -> Result<u16, TraceError> {
    let n: u64 = value.parse().map_err(|_| TraceError::Malformed {
        line,
        field,
        value: value.to_string(),
    })?;
    u16::try_from(n).map_err(|_| TraceError::OutOfRange {
        line,
        field,
        value: value.to_string(),
    })
}

fn parse_line(line: usize, text: &str) -> Result<PacketRecord, TraceError> {
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != TRACE_FIELDS {
        return Err(TraceError::FieldCount {
            line,
            found: fields.len(),
        });
    }
    let malformed = |field: &'static str, value: &str| TraceError::Malformed {
        line,
        field,
        value: value.to_string(),
    };

    let timestamp_us = fields[0]
        .parse::<u64>()
        .map_err(|_| malformed("timestamp_us", fields[0]))?;
    let protocol = match fields[5] {
        "TCP" => Protocol::Tcp,
        "UDP" => Protocol::Udp,
        other => {
            return Err(TraceError::OutOfRange {
                line,
                field: "protocol",
                value: other.to_string(),
            })
        }
    };
    let direction = match fields[7] {
        "UP" => Direction::Upload,
        "DOWN" => Direction::Download,
        other => return Err(malformed("direction", other)),
    };
    let size = fields[6]
        .parse::<u32>()
        .map_err(|_| malformed("size", fields[6]))?;
    let src_hw = match fields[9] {
        "" => None,
        hw => Some(hw.parse::<HwAddr>().map_err(|_| malformed("src_hw", hw))?),
    };
    let record = PacketRecord {
        timestamp_us,
        src_addr: fields[1].to_string(),
        dst_addr: fields[2].to_string(),
        src_port: parse_port(line, "src_port", fields[3])?,
        dst_port: parse_port(line, "dst_port", fields[4])?,
        protocol,
        size,
        direction,
        dns_query: (!fields[8].is_empty()).then(|| fields[8].to_string()),
        src_hw,
    };
    record
        .validate()
        .map_err(|reason| TraceError::InvalidLine { line, reason })?;
    Ok(record)
}

/// Parses a trace-CSV document. Line numbers in errors are 1-based and count
/// the header.
pub fn parse_trace(text: &str) -> Result<Vec<PacketRecord>, TraceError> {
    let mut lines = text.split('\n');
    match lines.next() {
        None | Some("") => return Err(TraceError::MissingHeader),
        Some(h) if h != TRACE_HEADER => return Err(TraceError::BadHeader(h.to_string())),
        Some(_) => {}
    }
    let body: Vec<&str> = lines.collect();
    let mut records = Vec::with_capacity(body.len());
    let mut previous = 0u64;
    for (i, raw) in body.iter().enumerate() {
        let line = i + 2;
        if raw.is_empty() {
            // Only the final LF may produce an empty trailing piece.
            if i + 1 == body.len() {
                break;
            }
            return Err(TraceError::InvalidLine {
                line,
                reason: "empty line",
            });
        }
        let record = parse_line(line, raw)?;
        if record.timestamp_us < previous {
            return Err(TraceError::TimestampRegression {
                line,
                previous,
                found: record.timestamp_us,
            });
        }
        previous = record.timestamp_us;
        records.push(record);
    }
    Ok(records)
}

/// Serializes records to a trace-CSV document (header plus one LF-terminated
/// line per record).
pub fn emit_trace(records: &[PacketRecord]) -> Result<String, TraceError> {
    let mut out = String::with_capacity(TRACE_HEADER.len() + 1 + records.len() * 64);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    let mut previous = 0u64;
    for (index, r) in records.iter().enumerate() {
        if r.timestamp_us < previous {
            return Err(TraceError::Unsorted { index });
        }
        previous = r.timestamp_us;
        r.validate()
            .map_err(|reason| TraceError::InvalidRecord { index, reason })?;
        use fmt::Write;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.timestamp_us,
            r.src_addr,
            r.dst_addr,
            r.src_port,
            r.dst_port,
            r.protocol.as_str(),
            r.size,
            r.direction.as_str(),
            r.dns_query.as_deref().unwrap_or(""),
            r.src_hw.map(|h| h.to_string()).unwrap_or_default(),
        );
    }
    Ok(out)
}

/// Groups records into unidirectional flows. A key's flow is closed when the
/// gap since its previous packet exceeds `timeout_us`. Flows are returned in
/// order of their first packet.
pub fn split_flows(records: &[PacketRecord], timeout_us: u64) -> Vec<Flow> {
    let mut flows: Vec<Flow> = Vec::new();
    let mut open: HashMap<FlowKey, usize> = HashMap::new();
    for r in records {
        let key = r.flow_key();
        match open.get(&key).copied() {
            Some(idx) if r.timestamp_us - flows[idx].last_ts <= timeout_us => {
                let flow = &mut flows[idx];
                flow.last_ts = r.timestamp_us;
                flow.packets.push(r.clone());
            }
            _ => {
                open.insert(key.clone(), flows.len());
                flows.push(Flow {
                    key,
                    packets: vec![r.clone()],
                    first_ts: r.timestamp_us,
                    last_ts: r.timestamp_us,
                });
            }
        }
    }
    flows
}

/// Queried domain names, grouped by source address and deduplicated.
pub fn extract_dns(records: &[PacketRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        if let Some(q) = &r.dns_query {
            out.entry(r.src_addr.clone()).or_default().insert(q.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    Combined,
    UploadOnly,
    DownloadOnly,
}

impl Scope {
    pub fn admits(self, direction: Direction) -> bool {
        match self {
            Scope::Combined => true,
            Scope::UploadOnly => direction == Direction::Upload,
            Scope::DownloadOnly => direction == Direction::Download,
        }
    }
}

/// Bytes per consecutive `sample_seconds` bin, aligned at `origin_us`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSeries {
    pub sample_seconds: u32,
    pub samples: Vec<u64>,
    pub origin_us: u64,
    pub scope: Scope,
}

impl RateSeries {
    /// Bins in-scope packets into `len` samples starting at `origin_us`.
    /// Packets outside the covered span are ignored.
    ///
    /// # Panics
    /// If `sample_seconds` is zero.
    pub fn aligned(
        packets: &[PacketRecord],
        sample_seconds: u32,
        scope: Scope,
        origin_us: u64,
        len: usize,
    ) -> RateSeries {
        assert!(sample_seconds >= 1, "sample interval must be at least 1 s");
        let width = u64::from(sample_seconds) * MICROS_PER_SEC;
        let mut samples = vec![0u64; len];
        for p in packets.iter().filter(|p| scope.admits(p.direction)) {
            if p.timestamp_us < origin_us {
                continue;
            }
            let bin = ((p.timestamp_us - origin_us) / width) as usize;
            if let Some(slot) = samples.get_mut(bin) {
                *slot += u64::from(p.size);
            }
        }
        RateSeries {
            sample_seconds,
            samples,
            origin_us,
            scope,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.samples.iter().sum()
    }

    pub fn sample_width_us(&self) -> u64 {
        u64::from(self.sample_seconds) * MICROS_PER_SEC
    }

    pub fn sample_start_us(&self, index: usize) -> u64 {
        self.origin_us + index as u64 * self.sample_width_us()
    }

    pub fn end_us(&self) -> u64 {
        self.sample_start_us(self.samples.len())
    }

    /// Sample `index` expressed in bytes per second.
    pub fn rate_at(&self, index: usize) -> f64 {
        self.samples[index] as f64 / f64::from(self.sample_seconds)
    }

    /// Returns a copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> RateSeries {
        RateSeries {
            samples: self.samples.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Rate series over `packets`, aligned to the first packet. The bin count is
/// the smallest that covers the last packet; scope filtering does not move
/// the origin, so complementary scopes sum to the combined series.
pub fn rate_series(packets: &[PacketRecord], sample_seconds: u32, scope: Scope) -> RateSeries {
    let (Some(first), Some(last)) = (packets.first(), packets.last()) else {
        return RateSeries {
            sample_seconds,
            samples: Vec::new(),
            origin_us: 0,
            scope,
        };
    };
    let width = u64::from(sample_seconds.max(1)) * MICROS_PER_SEC;
    let len = ((last.timestamp_us - first.timestamp_us) / width + 1) as usize;
    RateSeries::aligned(packets, sample_seconds, scope, first.timestamp_us, len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceKind {
    SleepMonitor,
    StreamingCamera,
    MotionCamera,
    SmartPlug,
    VoiceAssistant,
}

impl DeviceKind {
    pub fn is_camera(self) -> bool {
        matches!(self, DeviceKind::StreamingCamera | DeviceKind::MotionCamera)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown device type {0:?}")]
pub struct UnknownDeviceKind(pub String);

impl FromStr for DeviceKind {
    type Err = UnknownDeviceKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "SleepMonitor" => DeviceKind::SleepMonitor,
            "StreamingCamera" => DeviceKind::StreamingCamera,
            "MotionCamera" => DeviceKind::MotionCamera,
            "SmartPlug" => DeviceKind::SmartPlug,
            "VoiceAssistant" => DeviceKind::VoiceAssistant,
            _ => return Err(UnknownDeviceKind(s.to_string())),
        })
    }
}

/// A kind of traffic burst a device emits when its state changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventProfile {
    pub label: String,
    pub burst_bytes: u64,
    /// Seconds; the burst is centred on the event time.
    pub burst_duration: f64,
}

/// Parameters of one synthetic device model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceArchetype {
    pub name: String,
    pub kind: DeviceKind,
    pub device_label: String,
    /// Bytes per second outside of bursts.
    pub baseline_rate: f64,
    pub packet_bytes: u32,
    /// Relative half-width of the uniform packet-size jitter.
    pub size_jitter: f64,
    /// Relative half-width of the uniform send-time jitter.
    pub interval_jitter: f64,
    pub upload_fraction: f64,
    pub burst_packet_bytes: u32,
    pub hw_prefix: String,
    pub server_addr: String,
    pub server_port: u16,
    pub noise_seed_salt: u64,
    pub domains: Vec<String>,
    pub events: Vec<EventProfile>,
}

impl DeviceArchetype {
    pub fn event(&self, label: &str) -> Option<&EventProfile> {
        self.events.iter().find(|e| e.label == label)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason| SynthError::InvalidArchetype {
            archetype: self.name.clone(),
            reason,
        };
        if !(self.baseline_rate >= 0.0 && self.baseline_rate.is_finite()) {
            return Err(bad("baseline_rate must be finite and non-negative"));
        }
        if self.packet_bytes == 0 || self.burst_packet_bytes == 0 {
            return Err(bad("packet sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.size_jitter) || !(0.0..0.5).contains(&self.interval_jitter) {
            return Err(bad("jitter out of range"));
        }
        if !(0.0..=1.0).contains(&self.upload_fraction) {
            return Err(bad("upload_fraction must lie in [0, 1]"));
        }
        if self.events.iter().any(|e| e.burst_bytes == 0) {
            return Err(bad("every event needs positive burst bytes"));
        }
        if self
            .events
            .iter()
            .any(|e| !(e.burst_duration > 0.0 && e.burst_duration.is_finite()))
        {
            return Err(bad("burst durations must be positive"));
        }
        if parse_hex_octets::<3>(&self.hw_prefix).is_none() {
            return Err(bad("hw_prefix must be three hex octets"));
        }
        Ok(())
    }
}

/// The versioned archetype document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeCatalog {
    pub version: u32,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<DeviceArchetype>,
}

const DEFAULT_ARCHETYPES: &str = include_str!("../config/archetypes.toml");

impl ArchetypeCatalog {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let catalog: ArchetypeCatalog =
            toml::from_str(text).map_err(|e| SynthError::Catalog(e.to_string()))?;
        for a in &catalog.archetypes {
            a.validate()?;
        }
        Ok(catalog)
    }

    /// The packaged catalog.
    pub fn packaged() -> Self {
        Self::from_toml(DEFAULT_ARCHETYPES).expect("packaged archetype catalog is valid")
    }

    pub fn get(&self, name: &str) -> Option<&DeviceArchetype> {
        self.archetypes.iter().find(|a| a.name == name)
    }
}

/// A ground-truth event to plant in a synthetic trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub time_us: u64,
    pub label: String,
}

impl PlantedEvent {
    pub fn at_secs(secs: f64, label: &str) -> Self {
        PlantedEvent {
            time_us: secs_to_micros(secs),
            label: label.to_string(),
        }
    }
}

/// Network identity a generated device is given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceHost {
    pub addr: String,
    pub port: u16,
    pub hw: Option<HwAddr>,
    pub resolver_addr: String,
}

impl DeviceHost {
    /// Host `index` of a home LAN: 192.168.1.(10+index), with a hardware
    /// address under the archetype's prefix.
    pub fn lan(index: u8, archetype: &DeviceArchetype) -> Self {
        let prefix = parse_hex_octets::<3>(&archetype.hw_prefix).unwrap_or([2, 0, 0]);
        DeviceHost {
            addr: format!("192.168.1.{}", 10 + u32::from(index)),
            port: 40000 + u16::from(index),
            hw: Some(HwAddr([prefix[0], prefix[1], prefix[2], 0x10, 0x00, index])),
            resolver_addr: "192.168.1.1".to_string(),
        }
    }
}

struct Emitter<'a> {
    archetype: &'a DeviceArchetype,
    host: &'a DeviceHost,
    rng: ChaCha8Rng,
    out: Vec<PacketRecord>,
}

impl Emitter<'_> {
    fn push(&mut self, timestamp_us: u64, size: u32) {
        let upload = self.rng.random_bool(self.archetype.upload_fraction);
        let a = self.archetype;
        let h = self.host;
        let record = if upload {
            PacketRecord {
                timestamp_us,
                src_addr: h.addr.clone(),
                dst_addr: a.server_addr.clone(),
                src_port: h.port,
                dst_port: a.server_port,
                protocol: Protocol::Tcp,
                size,
                direction: Direction::Upload,
                dns_query: None,
                src_hw: h.hw,
            }
        } else {
            PacketRecord {
                timestamp_us,
                src_addr: a.server_addr.clone(),
                dst_addr: h.addr.clone(),
                src_port: a.server_port,
                dst_port: h.port,
                protocol: Protocol::Tcp,
                size,
                direction: Direction::Download,
                dns_query: None,
                src_hw: None,
            }
        };
        self.out.push(record);
    }
}

/// Generates a deterministic labeled packet trace for one device.
///
/// The trace opens with one DNS query per archetype domain (the first at
/// t = 0), carries jittered periodic baseline packets at `baseline_rate`, and
/// adds one evenly spread burst centred on each planted event.
pub fn synth_device_trace(
    archetype: &DeviceArchetype,
    host: &DeviceHost,
    duration_secs: u64,
    events: &[PlantedEvent],
    seed: u64,
) -> Result<Vec<PacketRecord>, SynthError> {
    archetype.validate()?;
    let duration_us = duration_secs * MICROS_PER_SEC;
    for e in events {
        if archetype.event(&e.label).is_none() {
            return Err(SynthError::UnknownEvent {
                archetype: archetype.name.clone(),
                label: e.label.clone(),
            });
        }
        if e.time_us >= duration_us {
            return Err(SynthError::EventOutOfRange {
                label: e.label.clone(),
                time_us: e.time_us,
                duration_us,
            });
        }
    }

    let rng_seed = derive_seed(
        seed,
        &format!("synth/{}/{}", archetype.name, archetype.noise_seed_salt),
    );
    let mut em = Emitter {
        archetype,
        host,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        out: Vec::new(),
    };

    for (i, domain) in archetype.domains.iter().enumerate() {
        let t = i as u64 * 1000;
        if t >= duration_us {
            break;
        }
        em.out.push(PacketRecord {
            timestamp_us: t,
            src_addr: host.addr.clone(),
            dst_addr: host.resolver_addr.clone(),
            src_port: 53000 + i as u16,
            dst_port: 53,
            protocol: Protocol::Udp,
            size: 40 + domain.len() as u32,
            direction: Direction::Upload,
            dns_query: Some(domain.clone()),
            src_hw: host.hw,
        });
    }

    if archetype.baseline_rate > 0.0 {
        let period =
            f64::from(archetype.packet_bytes) / archetype.baseline_rate * MICROS_PER_SEC as f64;
        let (ij, sj) = (archetype.interval_jitter, archetype.size_jitter);
        for k in 0u64.. {
            let nominal = (k as f64 + 0.5) * period;
            if nominal >= duration_us as f64 {
                break;
            }
            let jitter = if ij > 0.0 {
                em.rng.random_range(-ij..=ij) * period
            } else {
                0.0
            };
            let t = (nominal + jitter).round().max(0.0) as u64;
            let scale = if sj > 0.0 {
                1.0 + em.rng.random_range(-sj..=sj)
            } else {
                1.0
            };
            let size = (f64::from(archetype.packet_bytes) * scale).round().max(1.0) as u32;
            if t < duration_us {
                em.push(t, size);
            }
        }
    }

    for e in events {
        let profile = archetype.event(&e.label).expect("checked above");
        let n = profile
            .burst_bytes
            .div_ceil(u64::from(archetype.burst_packet_bytes));
        let span = profile.burst_duration * MICROS_PER_SEC as f64;
        let start = e.time_us as f64 - span / 2.0;
        let spacing = span / n as f64;
        let (base, extra) = (profile.burst_bytes / n, profile.burst_bytes % n);
        for i in 0..n {
            let t = (start + (i as f64 + 0.5) * spacing)
                .round()
                .clamp(0.0, (duration_us - 1) as f64) as u64;
            let size = base + u64::from(i < extra);
            em.push(t, size as u32);
        }
    }

    let mut out = em.out;
    out.sort_by_key(|r| r.timestamp_us);
    Ok(out)
}
