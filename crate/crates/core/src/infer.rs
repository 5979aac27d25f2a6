//! Activity inference from rate series: spike detection against a rolling
//! median, camera mode classification, device-type specific mapping of
//! spikes to user activities, and the aggregate seen through a tunnel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{DeviceKind, EventProfile, PlantedEvent, RateSeries, MICROS_PER_SEC};

#[derive(Debug, Error, PartialEq)]
pub enum InferError {
    #[error("series of {len} samples is too short for a {window}-sample baseline")]
    SeriesTooShort { len: usize, window: usize },
    #[error("invalid detector config: {0}")]
    InvalidConfig(&'static str),
    #[error("tunnel needs at least one member")]
    EmptyTunnel,
    #[error("member {label:?} is sampled differently from the first member")]
    MismatchedSampling { label: String },
}

/// Stream-rate threshold used when no camera baseline is configured:
/// ten times the packaged streaming camera's idle rate.
pub const DEFAULT_STREAM_RATE_THRESHOLD: f64 = 4000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventDetectorConfig {
    /// Samples in the rolling-median baseline.
    pub baseline_window: usize,
    pub spike_multiplier: f64,
    /// Spiking samples at most this many seconds apart form one event.
    pub min_gap_secs: u32,
    /// Bytes per second above which a camera is taken to be streaming.
    pub stream_rate_threshold: f64,
}

impl Default for EventDetectorConfig {
    fn default() -> Self {
        EventDetectorConfig {
            baseline_window: 30,
            spike_multiplier: 5.0,
            min_gap_secs: 30,
            stream_rate_threshold: DEFAULT_STREAM_RATE_THRESHOLD,
        }
    }
}

impl EventDetectorConfig {
    /// Sets the streaming threshold to ten times a camera's idle rate.
    pub fn with_camera_baseline(mut self, baseline_rate: f64) -> Self {
        self.stream_rate_threshold = 10.0 * baseline_rate;
        self
    }

    pub fn validate(&self) -> Result<(), InferError> {
        if self.spike_multiplier.is_nan() || self.spike_multiplier <= 1.0 {
            return Err(InferError::InvalidConfig("spike_multiplier must exceed 1"));
        }
        if self.baseline_window < 3 {
            return Err(InferError::InvalidConfig(
                "baseline_window must be at least 3",
            ));
        }
        if self.stream_rate_threshold.is_nan() || self.stream_rate_threshold < 0.0 {
            return Err(InferError::InvalidConfig(
                "stream_rate_threshold must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A rate spike: timed at the start of its peak sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectedSpike {
    pub time_us: u64,
    pub sample_index: usize,
    /// Peak sample bytes above the rolling baseline.
    pub magnitude: f64,
}

fn median(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Flags samples exceeding `spike_multiplier` times the median of the
/// preceding `baseline_window` samples (the first window's median serves the
/// warm-up region) and merges runs of flagged samples separated by at most
/// `min_gap_secs` into one event at the run's peak.
pub fn detect_events(
    series: &RateSeries,
    cfg: &EventDetectorConfig,
) -> Result<Vec<DetectedSpike>, InferError> {
    cfg.validate()?;
    let w = cfg.baseline_window;
    let samples = &series.samples;
    if samples.len() <= w {
        return Err(InferError::SeriesTooShort {
            len: samples.len(),
            window: w,
        });
    }
    let warmup = median(&samples[..w]);
    let mut spikes: Vec<(usize, f64)> = Vec::new();
    for (i, &v) in samples.iter().enumerate() {
        let reference = if i < w {
            warmup
        } else {
            median(&samples[i - w..i])
        };
        if v as f64 > cfg.spike_multiplier * reference {
            spikes.push((i, reference));
        }
    }

    let gap_samples = (cfg.min_gap_secs / series.sample_seconds.max(1)) as usize;
    let mut events = Vec::new();
    let mut run: Vec<(usize, f64)> = Vec::new();
    let mut flush = |run: &mut Vec<(usize, f64)>| {
        if run.is_empty() {
            return;
        }
        let mut peak = run[0];
        for &(i, r) in run.iter() {
            if samples[i] > samples[peak.0] {
                peak = (i, r);
            }
        }
        events.push(DetectedSpike {
            time_us: series.sample_start_us(peak.0),
            sample_index: peak.0,
            magnitude: samples[peak.0] as f64 - peak.1,
        });
        run.clear();
    };
    for s in spikes {
        if let Some(&(last, _)) = run.last() {
            if s.0 - last > gap_samples {
                flush(&mut run);
            }
        }
        run.push(s);
    }
    flush(&mut run);
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraMode {
    LiveStreaming,
    MotionDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeInterval {
    pub start_us: u64,
    pub end_us: u64,
    pub mode: CameraMode,
    /// Largest sample inside the interval, in bytes.
    pub peak_bytes: u64,
}

/// Labels each sample LiveStreaming when its rate strictly exceeds the
/// threshold, MotionDetection otherwise, and merges equal-mode runs.
pub fn classify_camera_mode(series: &RateSeries, cfg: &EventDetectorConfig) -> Vec<ModeInterval> {
    let mut out: Vec<ModeInterval> = Vec::new();
    for (i, &v) in series.samples.iter().enumerate() {
        let mode = if series.rate_at(i) > cfg.stream_rate_threshold {
            CameraMode::LiveStreaming
        } else {
            CameraMode::MotionDetection
        };
        let end_us = series.sample_start_us(i + 1);
        match out.last_mut() {
            Some(last) if last.mode == mode => {
                last.end_us = end_us;
                last.peak_bytes = last.peak_bytes.max(v);
            }
            _ => out.push(ModeInterval {
                start_us: series.sample_start_us(i),
                end_us,
                mode,
                peak_bytes: v,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivityKind {
    Toggle,
    Interaction,
    SleepTransition,
    MotionDetected,
    StreamStart,
    StreamStop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivityEvent {
    pub time_us: u64,
    #[serde(rename = "device")]
    pub device_label: String,
    pub kind: ActivityKind,
    pub magnitude: f64,
}

/// Maps detected spikes (and, for cameras, mode edges) to user activities.
pub fn infer_activities(
    device_label: &str,
    device_type: DeviceKind,
    events: &[DetectedSpike],
    mode_intervals: &[ModeInterval],
) -> Vec<ActivityEvent> {
    let activity = |time_us, kind, magnitude| ActivityEvent {
        time_us,
        device_label: device_label.to_string(),
        kind,
        magnitude,
    };
    let simple = |kind| {
        events
            .iter()
            .map(|e| activity(e.time_us, kind, e.magnitude))
            .collect::<Vec<_>>()
    };
    match device_type {
        DeviceKind::SmartPlug => simple(ActivityKind::Toggle),
        DeviceKind::VoiceAssistant => simple(ActivityKind::Interaction),
        DeviceKind::SleepMonitor => simple(ActivityKind::SleepTransition),
        DeviceKind::StreamingCamera | DeviceKind::MotionCamera => {
            let mut out = Vec::new();
            for e in events {
                let inside = mode_intervals
                    .iter()
                    .find(|m| m.start_us <= e.time_us && e.time_us < m.end_us);
                if matches!(inside, Some(m) if m.mode == CameraMode::MotionDetection) {
                    out.push(activity(
                        e.time_us,
                        ActivityKind::MotionDetected,
                        e.magnitude,
                    ));
                }
            }
            for pair in mode_intervals.windows(2) {
                let (prev, next) = (&pair[0], &pair[1]);
                match (prev.mode, next.mode) {
                    (CameraMode::MotionDetection, CameraMode::LiveStreaming) => out.push(activity(
                        next.start_us,
                        ActivityKind::StreamStart,
                        next.peak_bytes as f64,
                    )),
                    (CameraMode::LiveStreaming, CameraMode::MotionDetection) => out.push(activity(
                        next.start_us,
                        ActivityKind::StreamStop,
                        prev.peak_bytes as f64,
                    )),
                    _ => {}
                }
            }
            out.sort_by_key(|a| a.time_us);
            out
        }
    }
}

/// Serializes activities as JSON lines with fields time_us, device, kind, magnitude.
pub fn activities_to_jsonl(events: &[ActivityEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("activity serializes"));
        out.push('\n');
    }
    out
}

/// What an observer sees of a tunnel: one aggregate series. Member labels are
/// kept only as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TunnelTrace {
    pub member_devices: Vec<String>,
    pub aggregate: RateSeries,
}

/// Element-wise sum of equally sampled, equally aligned member series.
/// Shorter members are treated as silent past their end.
pub fn aggregate_tunnel(members: &[(String, RateSeries)]) -> Result<TunnelTrace, InferError> {
    let (_, first) = members.first().ok_or(InferError::EmptyTunnel)?;
    let len = members.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
    let mut samples = vec![0u64; len];
    for (label, s) in members {
        if s.sample_seconds != first.sample_seconds
            || s.origin_us != first.origin_us
            || s.scope != first.scope
        {
            return Err(InferError::MismatchedSampling {
                label: label.clone(),
            });
        }
        for (acc, v) in samples.iter_mut().zip(&s.samples) {
            *acc += v;
        }
    }
    Ok(TunnelTrace {
        member_devices: members.iter().map(|(l, _)| l.clone()).collect(),
        aggregate: RateSeries {
            samples,
            ..first.clone()
        },
    })
}

/// Span of a planted burst: centred on the event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub start_us: u64,
    pub end_us: u64,
}

impl EventWindow {
    pub fn of(event: &PlantedEvent, profile: &EventProfile) -> Self {
        let half = (profile.burst_duration * MICROS_PER_SEC as f64 / 2.0).round() as u64;
        EventWindow {
            start_us: event.time_us.saturating_sub(half),
            end_us: event.time_us + half,
        }
    }

    fn contains(&self, t: u64, slack_us: u64) -> bool {
        self.start_us.saturating_sub(slack_us) <= t && t <= self.end_us + slack_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionScore {
    pub detected: usize,
    pub planted: usize,
    pub true_detections: usize,
    pub recovered: usize,
    /// Absent when nothing was detected.
    pub precision: Option<f64>,
    /// Absent when nothing was planted.
    pub recall: Option<f64>,
}

impl DetectionScore {
    pub fn merge(&self, other: &DetectionScore) -> DetectionScore {
        DetectionScore::from_counts(
            self.detected + other.detected,
            self.planted + other.planted,
            self.true_detections + other.true_detections,
            self.recovered + other.recovered,
        )
    }

    fn from_counts(
        detected: usize,
        planted: usize,
        true_detections: usize,
        recovered: usize,
    ) -> Self {
        DetectionScore {
            detected,
            planted,
            true_detections,
            recovered,
            precision: (detected > 0).then(|| true_detections as f64 / detected as f64),
            recall: (planted > 0).then(|| recovered as f64 / planted as f64),
        }
    }
}

/// A detection is true when it falls inside some planted window widened by
/// `slack_us`; a planted event is recovered when some detection falls inside it.
pub fn score_detections(
    detected: &[u64],
    planted: &[EventWindow],
    slack_us: u64,
) -> DetectionScore {
    let true_detections = detected
        .iter()
        .filter(|&&t| planted.iter().any(|w| w.contains(t, slack_us)))
        .count();
    let recovered = planted
        .iter()
        .filter(|w| detected.iter().any(|&t| w.contains(t, slack_us)))
        .count();
    DetectionScore::from_counts(detected.len(), planted.len(), true_detections, recovered)
}
