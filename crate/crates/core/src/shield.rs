//! Independent link padding: packets are cut or padded into fixed-size
//! cells and released on a workload-independent schedule of departure
//! opportunities. At each opportunity the oldest queued device cell leaves,
//! or a cover cell when the device queue is empty.
//!
//! Opportunities are either evenly spaced (CIT, a leaky bucket holding one
//! token) or spaced by seeded normal draws (VIT). All times are integer
//! microseconds; the device queue is unbounded.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;
use crate::trace::{Direction, PacketRecord, Protocol, MICROS_PER_SEC};

#[derive(Debug, Error, PartialEq)]
pub enum ShieldError {
    #[error("invalid shaping config: {0}")]
    InvalidConfig(&'static str),
    #[error("cell {index} arrives before its predecessor")]
    UnsortedCells { index: usize },
    #[error("horizon {horizon_us} us ends before the last arrival at {last_arrival_us} us")]
    HorizonTooShort {
        horizon_us: u64,
        last_arrival_us: u64,
    },
    #[error("span must be positive")]
    NonPositiveSpan,
    #[error("{0} must be positive")]
    NonPositiveCapacity(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discipline {
    Cit,
    Vit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub cell_size: u32,
    /// Shaped rate in bytes per second; sets the CIT interval cell_size / rate.
    pub rate: u64,
    pub discipline: Discipline,
    /// Mean VIT interval, seconds.
    pub vit_mean: f64,
    /// Standard deviation of the VIT interval, seconds.
    pub vit_stddev: f64,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            cell_size: 512,
            rate: 512,
            discipline: Discipline::Cit,
            vit_mean: 1.0,
            vit_stddev: 0.010,
            seed: 0,
            direction: Direction::Upload,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<(), ShieldError> {
        if self.cell_size == 0 {
            return Err(ShieldError::InvalidConfig("cell_size must be positive"));
        }
        match self.discipline {
            Discipline::Cit => {
                if self.rate == 0 {
                    return Err(ShieldError::InvalidConfig("rate must be positive"));
                }
                if u64::from(self.cell_size) * MICROS_PER_SEC < self.rate {
                    return Err(ShieldError::InvalidConfig(
                        "rate too high: interval below one microsecond",
                    ));
                }
            }
            Discipline::Vit => {
                if !(self.vit_stddev >= 0.0 && self.vit_stddev.is_finite()) {
                    return Err(ShieldError::InvalidConfig(
                        "vit_stddev must be non-negative",
                    ));
                }
                if !(self.vit_mean > 4.0 * self.vit_stddev && self.vit_mean.is_finite()) {
                    return Err(ShieldError::InvalidConfig(
                        "vit_mean must exceed four standard deviations",
                    ));
                }
                if self.vit_mean * 1e6 < 10.0 {
                    return Err(ShieldError::InvalidConfig(
                        "vit_mean below ten microseconds",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Long-run wire rate in bytes per second.
    pub fn effective_rate(&self) -> f64 {
        match self.discipline {
            Discipline::Cit => self.rate as f64,
            Discipline::Vit => f64::from(self.cell_size) / self.vit_mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Device,
    Cover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub arrival_us: u64,
    pub origin: Origin,
    /// Real bytes carried; zero for cover.
    pub payload_bytes: u32,
    /// Index of the originating packet in the cellified trace.
    pub source_packet: Option<usize>,
}

impl Cell {
    pub fn cover(at_us: u64) -> Self {
        Cell {
            arrival_us: at_us,
            origin: Origin::Cover,
            payload_bytes: 0,
            source_packet: None,
        }
    }
}

/// Splits each packet into ceil(size / cell_size) cells sharing its arrival
/// time. Every cell but the last is full.
pub fn cellify(packets: &[PacketRecord], cell_size: u32) -> Vec<Cell> {
    assert!(cell_size > 0, "cell size must be positive");
    let mut out = Vec::new();
    for (i, p) in packets.iter().enumerate() {
        let mut remaining = p.size;
        while remaining > 0 {
            let payload = remaining.min(cell_size);
            out.push(Cell {
                arrival_us: p.timestamp_us,
                origin: Origin::Device,
                payload_bytes: payload,
                source_packet: Some(i),
            });
            remaining -= payload;
        }
    }
    out
}

enum Clock {
    Cit {
        k: u64,
        interval_numer: u128,
        rate: u128,
    },
    Vit {
        next_us: u64,
        rng: Box<ChaCha8Rng>,
        normal: Normal<f64>,
        floor_s: f64,
    },
}

impl Clock {
    fn new(cfg: &ShapingConfig) -> Self {
        match cfg.discipline {
            Discipline::Cit => Clock::Cit {
                k: 0,
                interval_numer: u128::from(cfg.cell_size) * u128::from(MICROS_PER_SEC),
                rate: u128::from(cfg.rate),
            },
            Discipline::Vit => Clock::Vit {
                next_us: 0,
                rng: Box::new(ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    "vit-intervals",
                ))),
                normal: Normal::new(cfg.vit_mean, cfg.vit_stddev).expect("validated parameters"),
                floor_s: cfg.vit_mean / 10.0,
            },
        }
    }

    fn next_opportunity(&mut self) -> u64 {
        match self {
            Clock::Cit {
                k,
                interval_numer,
                rate,
            } => {
                let t = (u128::from(*k) * *interval_numer / *rate) as u64;
                *k += 1;
                t
            }
            Clock::Vit {
                next_us,
                rng,
                normal,
                floor_s,
            } => {
                let t = *next_us;
                let draw = loop {
                    let d = normal.sample(rng);
                    if d >= *floor_s {
                        break d;
                    }
                };
                *next_us += ((draw * MICROS_PER_SEC as f64).round() as u64).max(1);
                t
            }
        }
    }
}

/// Draws `n` consecutive VIT intervals (seconds) exactly as the shaper would.
pub fn vit_intervals(cfg: &ShapingConfig, n: usize) -> Result<Vec<f64>, ShieldError> {
    let cfg = ShapingConfig {
        discipline: Discipline::Vit,
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut clock = Clock::new(&cfg);
    let mut prev = clock.next_opportunity();
    Ok((0..n)
        .map(|_| {
            let t = clock.next_opportunity();
            let d = (t - prev) as f64 / MICROS_PER_SEC as f64;
            prev = t;
            d
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Departure {
    pub time_us: u64,
    pub cell: Cell,
}

/// Lazily produces departures through the horizon (inclusive).
pub struct Shaper<'a> {
    cells: &'a [Cell],
    next: usize,
    clock: Clock,
    horizon_us: u64,
    done: bool,
}

impl Shaper<'_> {
    /// Device cells not yet sent.
    pub fn backlog(&self) -> usize {
        self.cells.len() - self.next
    }
}

impl Iterator for Shaper<'_> {
    type Item = Departure;

    fn next(&mut self) -> Option<Departure> {
        if self.done {
            return None;
        }
        let t = self.clock.next_opportunity();
        if t > self.horizon_us {
            self.done = true;
            return None;
        }
        let cell = match self.cells.get(self.next) {
            Some(c) if c.arrival_us <= t => {
                self.next += 1;
                c.clone()
            }
            _ => Cell::cover(t),
        };
        Some(Departure { time_us: t, cell })
    }
}

fn check_cells(cells: &[Cell], horizon_us: u64) -> Result<(), ShieldError> {
    if let Some(index) = cells
        .windows(2)
        .position(|w| w[1].arrival_us < w[0].arrival_us)
    {
        return Err(ShieldError::UnsortedCells { index: index + 1 });
    }
    match cells.last() {
        Some(last) if last.arrival_us > horizon_us => Err(ShieldError::HorizonTooShort {
            horizon_us,
            last_arrival_us: last.arrival_us,
        }),
        _ => Ok(()),
    }
}

/// Streaming form of [`shape`], for horizons too long to hold in memory.
pub fn shape_iter<'a>(
    cells: &'a [Cell],
    cfg: &ShapingConfig,
    horizon_us: u64,
) -> Result<Shaper<'a>, ShieldError> {
    cfg.validate()?;
    check_cells(cells, horizon_us)?;
    Ok(Shaper {
        cells,
        next: 0,
        clock: Clock::new(cfg),
        horizon_us,
        done: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapedSchedule {
    pub departures: Vec<Departure>,
    pub config: ShapingConfig,
    pub horizon_us: u64,
    /// Device cells still queued at the horizon.
    pub backlog: usize,
}

/// Runs the shaper over `cells` (sorted by arrival) through `horizon_us`.
pub fn shape(
    cells: &[Cell],
    cfg: &ShapingConfig,
    horizon_us: u64,
) -> Result<ShapedSchedule, ShieldError> {
    let mut shaper = shape_iter(cells, cfg, horizon_us)?;
    let departures: Vec<Departure> = shaper.by_ref().collect();
    Ok(ShapedSchedule {
        departures,
        config: cfg.clone(),
        horizon_us,
        backlog: shaper.backlog(),
    })
}

/// Shapes several devices' cell streams through one shared queue. Equal
/// arrivals keep stream order.
pub fn shape_home(
    device_cell_streams: &[Vec<Cell>],
    cfg: &ShapingConfig,
    horizon_us: u64,
) -> Result<ShapedSchedule, ShieldError> {
    let mut merged: Vec<Cell> = device_cell_streams.iter().flatten().cloned().collect();
    for s in device_cell_streams {
        check_cells(s, horizon_us)?;
    }
    merged.sort_by_key(|c| c.arrival_us);
    shape(&merged, cfg, horizon_us)
}

impl ShapedSchedule {
    /// What an observer of the link sees: (departure time, wire size).
    pub fn visible(&self) -> Vec<(u64, u32)> {
        self.departures
            .iter()
            .map(|d| (d.time_us, self.config.cell_size))
            .collect()
    }

    /// Flat `departure_us,origin,payload_bytes` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCHEDULE_CSV_HEADER);
        out.push('\n');
        for d in &self.departures {
            push_csv_row(&mut out, d);
        }
        out
    }

    /// The link as packet records between two tunnel endpoints.
    pub fn observed_packets(&self, home_addr: &str, tunnel_addr: &str) -> Vec<PacketRecord> {
        observed_packets(
            &self.visible(),
            self.config.direction,
            home_addr,
            tunnel_addr,
        )
    }
}

pub const SCHEDULE_CSV_HEADER: &str = "departure_us,origin,payload_bytes";

pub fn push_csv_row(out: &mut String, d: &Departure) {
    let origin = match d.cell.origin {
        Origin::Device => "DEVICE",
        Origin::Cover => "COVER",
    };
    let _ = writeln!(out, "{},{},{}", d.time_us, origin, d.cell.payload_bytes);
}

/// Packet records for a visible schedule, as carried by a UDP tunnel.
pub fn observed_packets(
    visible: &[(u64, u32)],
    direction: Direction,
    home_addr: &str,
    tunnel_addr: &str,
) -> Vec<PacketRecord> {
    let (src, dst, sport, dport) = match direction {
        Direction::Upload => (home_addr, tunnel_addr, 50000, 1194),
        Direction::Download => (tunnel_addr, home_addr, 1194, 50000),
    };
    visible
        .iter()
        .map(|&(t, size)| PacketRecord {
            timestamp_us: t,
            src_addr: src.to_string(),
            dst_addr: dst.to_string(),
            src_port: sport,
            dst_port: dport,
            protocol: Protocol::Udp,
            size,
            direction,
            dns_query: None,
            src_hw: None,
        })
        .collect()
}

const SECONDS_PER_MONTH: f64 = 86_400.0 * 30.0;

/// Data volume of a constant overhead rate over a 30-day month, in GB (10^9 bytes).
pub fn gb_per_month(rate_bytes_per_sec: f64) -> f64 {
    rate_bytes_per_sec * SECONDS_PER_MONTH / 1e9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostContext {
    pub capacity_fraction: f64,
    pub cap_fraction: f64,
}

/// Overhead as a share of upload capacity (bytes/s) and of a monthly data cap (bytes).
pub fn cost_context(
    rate: f64,
    upload_capacity: f64,
    data_cap: f64,
) -> Result<CostContext, ShieldError> {
    if upload_capacity.is_nan() || upload_capacity <= 0.0 {
        return Err(ShieldError::NonPositiveCapacity("upload capacity"));
    }
    if data_cap.is_nan() || data_cap <= 0.0 {
        return Err(ShieldError::NonPositiveCapacity("data cap"));
    }
    Ok(CostContext {
        capacity_fraction: rate / upload_capacity,
        cap_fraction: rate * SECONDS_PER_MONTH / data_cap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub device_bytes: u64,
    pub cover_bytes: u64,
    pub padding_bytes: u64,
    pub device_cells: u64,
    pub cover_cells: u64,
    /// Seconds, over departed device cells; absent without any.
    pub avg_latency: Option<f64>,
    pub max_latency: Option<f64>,
    /// Largest latency of an original packet (the max over its cells).
    pub max_packet_latency: Option<f64>,
    /// (cover + padding) bytes per second of span.
    pub overhead_rate: f64,
    pub gb_per_month: f64,
    pub backlog_cells: u64,
}

/// Folds departures into an [`OverheadReport`] without storing them.
#[derive(Debug, Clone, Default)]
pub struct OverheadAccumulator {
    cell_size: u64,
    device_bytes: u64,
    cover_cells: u64,
    device_cells: u64,
    latency_sum_us: u128,
    latency_max_us: u64,
    packet_latency: HashMap<usize, u64>,
}

impl OverheadAccumulator {
    pub fn new(cell_size: u32) -> Self {
        OverheadAccumulator {
            cell_size: u64::from(cell_size),
            ..Default::default()
        }
    }

    pub fn push(&mut self, d: &Departure) {
        match d.cell.origin {
            Origin::Cover => self.cover_cells += 1,
            Origin::Device => {
                let latency = d.time_us - d.cell.arrival_us;
                self.device_cells += 1;
                self.device_bytes += u64::from(d.cell.payload_bytes);
                self.latency_sum_us += u128::from(latency);
                self.latency_max_us = self.latency_max_us.max(latency);
                if let Some(p) = d.cell.source_packet {
                    let e = self.packet_latency.entry(p).or_default();
                    *e = (*e).max(latency);
                }
            }
        }
    }

    pub fn finish(self, span_secs: f64, backlog: usize) -> Result<OverheadReport, ShieldError> {
        if span_secs.is_nan() || span_secs <= 0.0 {
            return Err(ShieldError::NonPositiveSpan);
        }
        let secs = |us: f64| us / MICROS_PER_SEC as f64;
        let cover_bytes = self.cover_cells * self.cell_size;
        let padding_bytes = self.device_cells * self.cell_size - self.device_bytes;
        let overhead_rate = (cover_bytes + padding_bytes) as f64 / span_secs;
        let any = self.device_cells > 0;
        Ok(OverheadReport {
            device_bytes: self.device_bytes,
            cover_bytes,
            padding_bytes,
            device_cells: self.device_cells,
            cover_cells: self.cover_cells,
            avg_latency: any.then(|| secs(self.latency_sum_us as f64) / self.device_cells as f64),
            max_latency: any.then(|| secs(self.latency_max_us as f64)),
            max_packet_latency: self
                .packet_latency
                .values()
                .max()
                .map(|&us| secs(us as f64)),
            overhead_rate,
            gb_per_month: gb_per_month(overhead_rate),
            backlog_cells: backlog as u64,
        })
    }
}

pub fn overhead_report(
    schedule: &ShapedSchedule,
    span_secs: f64,
) -> Result<OverheadReport, ShieldError> {
    let mut acc = OverheadAccumulator::new(schedule.config.cell_size);
    for d in &schedule.departures {
        acc.push(d);
    }
    acc.finish(span_secs, schedule.backlog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(ts: u64, size: u32) -> PacketRecord {
        PacketRecord {
            timestamp_us: ts,
            src_addr: "a".into(),
            dst_addr: "b".into(),
            src_port: 1,
            dst_port: 2,
            protocol: Protocol::Tcp,
            size,
            direction: Direction::Upload,
            dns_query: None,
            src_hw: None,
        }
    }

    fn device(at: u64) -> Cell {
        Cell {
            arrival_us: at,
            origin: Origin::Device,
            payload_bytes: 512,
            source_packet: None,
        }
    }

    const SEC: u64 = 1_000_000;

    #[test]
    fn cellify_cases() {
        let one = cellify(&[pkt(0, 512)], 512);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].payload_bytes, 512);

        let three = cellify(&[pkt(7, 1300)], 512);
        assert_eq!(
            three.iter().map(|c| c.payload_bytes).collect::<Vec<_>>(),
            vec![512, 512, 276]
        );
        let padding: u32 = three.iter().map(|c| 512 - c.payload_bytes).sum();
        assert_eq!(padding, 236);
        assert!(three
            .iter()
            .all(|c| c.arrival_us == 7 && c.source_packet == Some(0)));

        assert!(cellify(&[], 512).is_empty());
    }

    #[test]
    fn cit_burst_of_three() {
        let cells = vec![device(0), device(0), device(0)];
        let s = shape(&cells, &ShapingConfig::default(), 2 * SEC).unwrap();
        let times: Vec<_> = s
            .departures
            .iter()
            .map(|d| (d.time_us, d.cell.origin))
            .collect();
        assert_eq!(
            times,
            vec![
                (0, Origin::Device),
                (SEC, Origin::Device),
                (2 * SEC, Origin::Device)
            ]
        );
        let r = overhead_report(&s, 3.0).unwrap();
        assert_eq!(r.avg_latency, Some(1.0));
        assert_eq!(r.max_latency, Some(2.0));
    }

    #[test]
    fn pure_cover() {
        let s = shape(&[], &ShapingConfig::default(), 5 * SEC).unwrap();
        assert_eq!(s.departures.len(), 6);
        assert!(s.departures.iter().all(|d| d.cell.origin == Origin::Cover));
        assert_eq!(s.departures[5].time_us, 5 * SEC);
        let r = overhead_report(&s, 5.0).unwrap();
        assert_eq!(r.avg_latency, None);
        assert_eq!(r.max_packet_latency, None);
        assert_eq!(r.cover_bytes, 6 * 512);
    }

    #[test]
    fn mid_interval_arrival_waits_for_next_opportunity() {
        let s = shape(&[device(SEC / 2)], &ShapingConfig::default(), 2 * SEC).unwrap();
        assert_eq!(s.departures[0].cell.origin, Origin::Cover);
        assert_eq!(s.departures[1].time_us, SEC);
        assert_eq!(s.departures[1].cell.origin, Origin::Device);
        assert_eq!(overhead_report(&s, 2.0).unwrap().max_latency, Some(0.5));
    }

    #[test]
    fn backlog_is_reported() {
        let cells = vec![device(0); 5];
        let s = shape(&cells, &ShapingConfig::default(), 2 * SEC).unwrap();
        assert_eq!(s.backlog, 2);
        assert_eq!(overhead_report(&s, 2.0).unwrap().backlog_cells, 2);
    }

    #[test]
    fn config_validation() {
        let c = ShapingConfig {
            rate: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ShapingConfig {
            cell_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ShapingConfig {
            discipline: Discipline::Vit,
            vit_mean: 0.04,
            vit_stddev: 0.01,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ShapingConfig {
            discipline: Discipline::Vit,
            vit_stddev: -0.1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_preconditions() {
        let cfg = ShapingConfig::default();
        assert_eq!(
            shape(&[device(5), device(1)], &cfg, 10).unwrap_err(),
            ShieldError::UnsortedCells { index: 1 }
        );
        assert!(matches!(
            shape(&[device(11)], &cfg, 10),
            Err(ShieldError::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn non_integral_cit_interval_stays_on_grid() {
        let cfg = ShapingConfig {
            rate: 7500,
            ..Default::default()
        };
        let s = shape(&[], &cfg, 10 * SEC).unwrap();
        // 512 / 7500 s = 68266.67 us
        for w in s.departures.windows(2) {
            let d = w[1].time_us - w[0].time_us;
            assert!(d == 68266 || d == 68267, "{d}");
        }
        assert_eq!(s.departures[75].time_us, 75 * 512 * SEC / 7500);
    }

    #[test]
    fn cost_context_cases() {
        let c = cost_context(0.0, 1.0, 1.0).unwrap();
        assert_eq!((c.capacity_fraction, c.cap_fraction), (0.0, 0.0));
        assert!(cost_context(1.0, 0.0, 1.0).is_err());
        assert!(cost_context(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn schedule_csv() {
        let s = shape(&[device(0)], &ShapingConfig::default(), SEC).unwrap();
        assert_eq!(
            s.to_csv(),
            "departure_us,origin,payload_bytes\n0,DEVICE,512\n1000000,COVER,0\n"
        );
    }

    #[test]
    fn span_must_be_positive() {
        let s = shape(&[], &ShapingConfig::default(), SEC).unwrap();
        assert_eq!(overhead_report(&s, 0.0), Err(ShieldError::NonPositiveSpan));
    }
}
