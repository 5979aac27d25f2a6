//! End-to-end evaluation: build a synthetic home from an experiment spec,
//! attack its raw, tunneled and shaped traffic, and report accuracy,
//! event recovery and shaping cost.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identify::{
    class_prior, dns_identify, knn_train, stratified_cv, unique_top_match, window_features,
    DnsFingerprintDb, IdentifyError, KnnModel, OuiTable, WindowFeature,
};
use crate::infer::{
    aggregate_tunnel, classify_camera_mode, detect_events, infer_activities, score_detections,
    ActivityEvent, DetectionScore, EventDetectorConfig, EventWindow, InferError,
};
use crate::seed::derive_seed;
use crate::shield::{
    cellify, observed_packets, overhead_report, push_csv_row, shape, shape_home, shape_iter,
    Discipline, OverheadAccumulator, OverheadReport, ShapedSchedule, ShapingConfig, ShieldError,
    SCHEDULE_CSV_HEADER,
};
use crate::trace::{
    emit_trace, parse_trace, split_flows, synth_device_trace, ArchetypeCatalog, DeviceArchetype,
    DeviceHost, DeviceKind, Direction, PacketRecord, PlantedEvent, RateSeries, Scope, SynthError,
    TraceError, MICROS_PER_SEC,
};

pub const SPEC_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const DEFAULT_SPEC: &str = include_str!("../config/default_experiment.toml");

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("malformed spec: {0}")]
    Malformed(String),
    #[error("unsupported schema_version {0} (expected {SPEC_SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("device roster is empty")]
    EmptyRoster,
    #[error("unknown archetype {0:?}")]
    UnknownArchetype(String),
    #[error("duplicate device label {0:?}")]
    DuplicateLabel(String),
    #[error("duration {duration} s does not exceed the {window} s window")]
    DurationTooShort { duration: u64, window: u32 },
    #[error("invalid attack parameters: {0}")]
    Attack(String),
    #[error("shaping config {name:?}: {source}")]
    Shaping { name: String, source: ShieldError },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Trace { path: String, source: TraceError },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error("malformed ground truth: {0}")]
    GroundTruth(String),
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    /// Process exit status: 3 for input parse failures, 4 for spec
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Trace { .. } | HarnessError::GroundTruth(_) => 3,
            HarnessError::Spec(_) => 4,
            _ => 1,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> HarnessError {
        let context = context.into();
        move |source| HarnessError::Io { context, source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    pub sample_seconds: u32,
    pub window_seconds: u32,
    pub k: usize,
    pub folds: usize,
    /// Flow inactivity timeout, seconds.
    pub flow_timeout: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            sample_seconds: 1,
            window_seconds: 60,
            k: 3,
            folds: 10,
            flow_timeout: crate::trace::DEFAULT_FLOW_TIMEOUT_SECS,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Attack(m.to_string()));
        if self.sample_seconds == 0 {
            return bad("sample_seconds must be positive");
        }
        if !self.window_seconds.is_multiple_of(self.sample_seconds)
            || self.window_seconds / self.sample_seconds < 2
        {
            return bad("window_seconds must be a multiple of at least two samples");
        }
        if self.k == 0 || self.k.is_multiple_of(2) {
            return bad("k must be odd");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.flow_timeout == 0 {
            return bad("flow_timeout must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Seconds from the start of the trace.
    pub time: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub archetype: String,
    /// Defaults to the archetype's device label.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingSweepEntry {
    pub name: String,
    pub discipline: Discipline,
    #[serde(default = "default_rate")]
    pub rate: u64,
    #[serde(default = "default_cell")]
    pub cell_size: u32,
    #[serde(default = "default_vit_mean")]
    pub vit_mean: f64,
    #[serde(default = "default_vit_stddev")]
    pub vit_stddev: f64,
}

fn default_rate() -> u64 {
    512
}
fn default_cell() -> u32 {
    512
}
fn default_vit_mean() -> f64 {
    1.0
}
fn default_vit_stddev() -> f64 {
    0.010
}

impl ShapingSweepEntry {
    /// Shaping config for one direction; the seed depends only on the
    /// master seed and the entry name, never on the device.
    pub fn config(&self, master_seed: u64, direction: Direction) -> ShapingConfig {
        ShapingConfig {
            cell_size: self.cell_size,
            rate: self.rate,
            discipline: self.discipline,
            vit_mean: self.vit_mean,
            vit_stddev: self.vit_stddev,
            seed: derive_seed(master_seed, &format!("shape/{}", self.name)),
            direction,
        }
    }
}

/// A versioned experiment description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    /// Seconds.
    pub duration: u64,
    #[serde(default)]
    pub attack: AttackParams,
    #[serde(default)]
    pub detector: EventDetectorConfig,
    #[serde(rename = "device", default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(rename = "shaping", default)]
    pub shaping: Vec<ShapingSweepEntry>,
    /// Extra or overriding archetypes, merged over the packaged catalog by name.
    #[serde(rename = "archetype", default)]
    pub archetypes: Vec<DeviceArchetype>,
}

/// A parsed spec together with the hash of its source text.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl LoadedSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| SpecError::Malformed(e.to_string()))?;
        spec.validate()?;
        Ok(LoadedSpec {
            spec,
            hash: sha256_hex(text.as_bytes()),
        })
    }

    pub fn packaged_default() -> Self {
        Self::parse(DEFAULT_SPEC).expect("packaged experiment spec is valid")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
        Ok(Self::parse(&text)?)
    }
}

/// Command-line replacements for attack parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackOverrides {
    pub sample_seconds: Option<u32>,
    pub window_seconds: Option<u32>,
    pub k: Option<usize>,
    pub folds: Option<usize>,
}

impl AttackOverrides {
    pub fn is_empty(&self) -> bool {
        *self == AttackOverrides::default()
    }
}

impl LoadedSpec {
    /// Applies overrides and revalidates. The hash then covers the file
    /// and the overrides, so reports stay distinguishable.
    pub fn with_overrides(mut self, o: &AttackOverrides) -> Result<Self, SpecError> {
        if o.is_empty() {
            return Ok(self);
        }
        let a = &mut self.spec.attack;
        a.sample_seconds = o.sample_seconds.unwrap_or(a.sample_seconds);
        a.window_seconds = o.window_seconds.unwrap_or(a.window_seconds);
        a.k = o.k.unwrap_or(a.k);
        a.folds = o.folds.unwrap_or(a.folds);
        self.spec.validate()?;
        let a = &self.spec.attack;
        let tag = format!(
            "{}|attack:s={},w={},k={},folds={}",
            self.hash, a.sample_seconds, a.window_seconds, a.k, a.folds
        );
        self.hash = sha256_hex(tag.as_bytes());
        Ok(self)
    }
}

impl ExperimentSpec {
    pub fn catalog(&self) -> ArchetypeCatalog {
        let mut catalog = ArchetypeCatalog::packaged();
        for a in &self.archetypes {
            match catalog.archetypes.iter_mut().find(|x| x.name == a.name) {
                Some(slot) => *slot = a.clone(),
                None => catalog.archetypes.push(a.clone()),
            }
        }
        catalog
    }

    pub fn device_label(&self, device: &DeviceSpec, catalog: &ArchetypeCatalog) -> String {
        device.label.clone().unwrap_or_else(|| {
            catalog
                .get(&device.archetype)
                .map(|a| a.device_label.clone())
                .unwrap_or_else(|| device.archetype.clone())
        })
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.schema_version != SPEC_SCHEMA_VERSION {
            return Err(SpecError::SchemaVersion(self.schema_version));
        }
        if self.devices.is_empty() {
            return Err(SpecError::EmptyRoster);
        }
        self.attack.validate()?;
        if self.duration <= u64::from(self.attack.window_seconds) {
            return Err(SpecError::DurationTooShort {
                duration: self.duration,
                window: self.attack.window_seconds,
            });
        }
        self.detector
            .validate()
            .map_err(|e| SpecError::Attack(e.to_string()))?;
        for a in &self.archetypes {
            a.validate()?;
        }
        let catalog = self.catalog();
        let mut labels = BTreeSet::new();
        let duration_us = self.duration * MICROS_PER_SEC;
        for d in &self.devices {
            let arch = catalog
                .get(&d.archetype)
                .ok_or_else(|| SpecError::UnknownArchetype(d.archetype.clone()))?;
            let label = self.device_label(d, &catalog);
            if !labels.insert(label.clone()) {
                return Err(SpecError::DuplicateLabel(label));
            }
            for e in &d.events {
                let planted = PlantedEvent::at_secs(e.time, &e.label);
                if arch.event(&e.label).is_none() {
                    return Err(SynthError::UnknownEvent {
                        archetype: arch.name.clone(),
                        label: e.label.clone(),
                    }
                    .into());
                }
                if e.time < 0.0 || planted.time_us >= duration_us {
                    return Err(SynthError::EventOutOfRange {
                        label: e.label.clone(),
                        time_us: planted.time_us,
                        duration_us,
                    }
                    .into());
                }
            }
        }
        for s in &self.shaping {
            s.config(0, Direction::Upload)
                .validate()
                .map_err(|source| SpecError::Shaping {
                    name: s.name.clone(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// One generated device with its ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedDevice {
    pub label: String,
    pub archetype: DeviceArchetype,
    pub host: DeviceHost,
    pub events: Vec<PlantedEvent>,
    pub packets: Vec<PacketRecord>,
}

impl GeneratedDevice {
    pub fn event_windows(&self) -> Vec<EventWindow> {
        self.events
            .iter()
            .map(|e| EventWindow::of(e, self.archetype.event(&e.label).expect("validated label")))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub duration_secs: u64,
    pub devices: Vec<GeneratedDevice>,
}

impl Corpus {
    pub fn duration_us(&self) -> u64 {
        self.duration_secs * MICROS_PER_SEC
    }
}

/// Generates every roster device. With `with_events` false the planted
/// events are omitted (an idle reference capture).
pub fn generate_corpus(
    spec: &ExperimentSpec,
    seed: u64,
    with_events: bool,
) -> Result<Corpus, SpecError> {
    let catalog = spec.catalog();
    let mut devices = Vec::with_capacity(spec.devices.len());
    for (i, d) in spec.devices.iter().enumerate() {
        let archetype = catalog
            .get(&d.archetype)
            .ok_or_else(|| SpecError::UnknownArchetype(d.archetype.clone()))?
            .clone();
        let label = spec.device_label(d, &catalog);
        let host = DeviceHost::lan(i as u8, &archetype);
        let events: Vec<PlantedEvent> = if with_events {
            d.events
                .iter()
                .map(|e| PlantedEvent::at_secs(e.time, &e.label))
                .collect()
        } else {
            Vec::new()
        };
        let packets = synth_device_trace(
            &archetype,
            &host,
            spec.duration,
            &events,
            derive_seed(seed, &format!("generate/{label}")),
        )?;
        devices.push(GeneratedDevice {
            label,
            archetype,
            host,
            events,
            packets,
        });
    }
    Ok(Corpus {
        duration_secs: spec.duration,
        devices,
    })
}

pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub time_us: u64,
    pub label: String,
    pub window: EventWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDevice {
    pub label: String,
    pub archetype: String,
    pub kind: DeviceKind,
    pub address: String,
    pub trace_file: String,
    pub events: Vec<TruthEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub spec_hash: String,
    pub duration: u64,
    pub devices: Vec<TruthDevice>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent.display().to_string()))?;
    }
    fs::write(path, contents).map_err(HarnessError::io(path.display().to_string()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Writes `traces/<device>.csv` for each roster device and `ground_truth.json`.
pub fn cmd_generate(spec: &LoadedSpec, seed: u64, out: &Path) -> Result<GroundTruth, HarnessError> {
    let corpus = generate_corpus(&spec.spec, seed, true)?;
    let mut devices = Vec::new();
    for d in &corpus.devices {
        let file = format!("traces/{}.csv", slug(&d.label));
        let text = emit_trace(&d.packets).map_err(|source| HarnessError::Trace {
            path: file.clone(),
            source,
        })?;
        write_file(&out.join(&file), text.as_bytes())?;
        devices.push(TruthDevice {
            label: d.label.clone(),
            archetype: d.archetype.name.clone(),
            kind: d.archetype.kind,
            address: d.host.addr.clone(),
            trace_file: file,
            events: d
                .events
                .iter()
                .zip(d.event_windows())
                .map(|(e, window)| TruthEvent {
                    time_us: e.time_us,
                    label: e.label.clone(),
                    window,
                })
                .collect(),
        });
    }
    let truth = GroundTruth {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: spec.spec.scenario.clone(),
        seed,
        spec_hash: spec.hash.clone(),
        duration: spec.spec.duration,
        devices,
    };
    write_file(&out.join("ground_truth.json"), to_json(&truth).as_bytes())?;
    Ok(truth)
}

/// Ground truth attached to one observed endpoint.
#[derive(Debug, Clone, Default)]
pub struct EndpointTruth {
    pub label: Option<String>,
    pub events: Vec<EventWindow>,
}

/// One traffic stream the observer can tell apart from the others.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub name: String,
    pub packets: Vec<PacketRecord>,
    pub truth: EndpointTruth,
}

/// What the adversary learned in their own lab: a k-NN model over idle
/// traffic of every known device, and each device's type and idle rate.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    pub knn: KnnModel<f64>,
    pub devices: BTreeMap<String, (DeviceKind, f64)>,
}

fn device_series(packets: &[PacketRecord], s: u32, duration_us: u64) -> RateSeries {
    let width = u64::from(s) * MICROS_PER_SEC;
    RateSeries::aligned(
        packets,
        s,
        Scope::Combined,
        0,
        duration_us.div_ceil(width) as usize,
    )
}

fn labeled_windows(
    packets: &[PacketRecord],
    label: &str,
    params: &AttackParams,
    duration_us: u64,
) -> Result<Vec<WindowFeature<f64>>, IdentifyError> {
    let series = device_series(packets, params.sample_seconds, duration_us);
    Ok(window_features::<f64>(&series, params.window_seconds)?
        .into_iter()
        .map(|f| f.labeled(label))
        .collect())
}

impl ReferenceModel {
    pub fn train(corpus: &Corpus, params: &AttackParams) -> Result<Self, IdentifyError> {
        let mut features = Vec::new();
        let mut devices = BTreeMap::new();
        for d in &corpus.devices {
            features.extend(labeled_windows(
                &d.packets,
                &d.label,
                params,
                corpus.duration_us(),
            )?);
            devices.insert(
                d.label.clone(),
                (d.archetype.kind, d.archetype.baseline_rate),
            );
        }
        Ok(ReferenceModel {
            knn: knn_train(&features, params.k)?,
            devices,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IdMethod {
    Dns,
    RateFingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointResult {
    pub endpoint: String,
    pub flows: usize,
    pub manufacturer: Option<String>,
    pub identified_as: Option<String>,
    pub method: Option<IdMethod>,
    pub truth: Option<String>,
    pub correct: Option<bool>,
    pub activities: usize,
    pub events: DetectionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackOutcome {
    /// Cross-validated accuracy of rate fingerprinting over labeled windows.
    pub classifier_accuracy: Option<f64>,
    /// Majority-class share of those windows.
    pub class_prior: Option<f64>,
    pub windows: usize,
    pub endpoints: Vec<EndpointResult>,
    pub events: DetectionScore,
    pub detected_activities: usize,
    #[serde(skip)]
    pub activities: Vec<ActivityEvent>,
}

fn majority(labels: &[&str]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l.to_string())
}

/// Runs both attack steps on every endpoint: identify (hardware prefix for a
/// manufacturer hint, DNS, then rate fingerprint) and infer activities with
/// the identified device's behavior model.
pub fn run_attack(
    endpoints: &[Endpoint],
    params: &AttackParams,
    detector: &EventDetectorConfig,
    reference: &ReferenceModel,
    duration_us: u64,
    cv_seed: u64,
) -> Result<AttackOutcome, HarnessError> {
    let dns_db = DnsFingerprintDb::packaged();
    let oui = OuiTable::packaged();
    let slack_us = u64::from(params.sample_seconds) * MICROS_PER_SEC;
    let mut results = Vec::new();
    let mut all_windows: Vec<WindowFeature<f64>> = Vec::new();
    let mut total = DetectionScore {
        detected: 0,
        planted: 0,
        true_detections: 0,
        recovered: 0,
        precision: None,
        recall: None,
    };
    let mut activities = Vec::new();

    for ep in endpoints {
        let flows = split_flows(&ep.packets, params.flow_timeout * MICROS_PER_SEC).len();
        let manufacturer = ep
            .packets
            .iter()
            .find_map(|p| p.src_hw)
            .and_then(|hw| oui.get(&hw).map(str::to_string));
        let queries: BTreeSet<String> = ep
            .packets
            .iter()
            .filter_map(|p| p.dns_query.clone())
            .collect();
        let dns = dns_identify(&queries, &dns_db);

        let series = device_series(&ep.packets, params.sample_seconds, duration_us);
        let windows = window_features::<f64>(&series, params.window_seconds)?;
        if let Some(label) = &ep.truth.label {
            all_windows.extend(windows.iter().cloned().map(|w| w.labeled(label)));
        }

        let (identified_as, method) = match unique_top_match(&dns) {
            Some(m) => (Some(m.label.clone()), Some(IdMethod::Dns)),
            None => {
                let votes: Vec<&str> = windows.iter().map(|w| reference.knn.classify(w)).collect();
                let label = majority(&votes);
                let method = label.as_ref().map(|_| IdMethod::RateFingerprint);
                (label, method)
            }
        };

        let mut found = Vec::new();
        if let Some((kind, baseline)) = identified_as
            .as_ref()
            .and_then(|l| reference.devices.get(l))
        {
            let cfg = if kind.is_camera() {
                detector.clone().with_camera_baseline(*baseline)
            } else {
                detector.clone()
            };
            if series.len() > cfg.baseline_window {
                let spikes = detect_events(&series, &cfg)?;
                let modes = if kind.is_camera() {
                    classify_camera_mode(&series, &cfg)
                } else {
                    Vec::new()
                };
                found = infer_activities(
                    identified_as.as_deref().unwrap_or_default(),
                    *kind,
                    &spikes,
                    &modes,
                );
            }
        }
        let times: Vec<u64> = found.iter().map(|a| a.time_us).collect();
        let score = score_detections(&times, &ep.truth.events, slack_us);
        total = total.merge(&score);

        results.push(EndpointResult {
            endpoint: ep.name.clone(),
            flows,
            manufacturer,
            correct: ep
                .truth
                .label
                .as_ref()
                .map(|t| identified_as.as_ref() == Some(t)),
            identified_as,
            method,
            truth: ep.truth.label.clone(),
            activities: found.len(),
            events: score,
        });
        activities.extend(found);
    }

    let distinct: BTreeSet<&str> = all_windows
        .iter()
        .filter_map(|w| w.device_label.as_deref())
        .collect();
    let classifier_accuracy = if distinct.len() >= 2 {
        Some(stratified_cv(
            &all_windows,
            params.k,
            params.folds,
            cv_seed,
        )?)
    } else {
        None
    };
    activities.sort_by(|a: &ActivityEvent, b| {
        a.time_us
            .cmp(&b.time_us)
            .then(a.device_label.cmp(&b.device_label))
    });
    Ok(AttackOutcome {
        classifier_accuracy,
        class_prior: (!all_windows.is_empty()).then(|| class_prior(&all_windows)),
        windows: all_windows.len(),
        endpoints: results,
        detected_activities: activities.len(),
        events: total,
        activities,
    })
}

/// Raw condition: each device's own traffic is a separate endpoint.
pub fn raw_endpoints(corpus: &Corpus) -> Vec<Endpoint> {
    corpus
        .devices
        .iter()
        .map(|d| Endpoint {
            name: d.host.addr.clone(),
            packets: d.packets.clone(),
            truth: EndpointTruth {
                label: Some(d.label.clone()),
                events: d.event_windows(),
            },
        })
        .collect()
}

fn merge_sorted(streams: Vec<Vec<PacketRecord>>) -> Vec<PacketRecord> {
    let mut all: Vec<PacketRecord> = streams.into_iter().flatten().collect();
    all.sort_by_key(|p| p.timestamp_us);
    all
}

/// Per-device shaping of both directions: what the observer sees per
/// device, plus the combined overhead of that device's two schedules.
pub fn shape_device(
    packets: &[PacketRecord],
    entry: &ShapingSweepEntry,
    master_seed: u64,
    horizon_us: u64,
    tunnel_addr: &str,
) -> Result<(Vec<PacketRecord>, OverheadReport), ShieldError> {
    let mut visible = Vec::new();
    let mut acc = OverheadAccumulator::new(entry.cell_size);
    let mut backlog = 0;
    for direction in [Direction::Upload, Direction::Download] {
        let cfg = entry.config(master_seed, direction);
        let dir_packets: Vec<PacketRecord> = packets
            .iter()
            .filter(|p| p.direction == direction)
            .cloned()
            .collect();
        let cells = cellify(&dir_packets, cfg.cell_size);
        let schedule = shape(&cells, &cfg, horizon_us)?;
        schedule.departures.iter().for_each(|d| acc.push(d));
        backlog += schedule.backlog;
        visible.push(schedule.observed_packets("home-gateway", tunnel_addr));
    }
    let report = acc.finish(horizon_us as f64 / MICROS_PER_SEC as f64, backlog)?;
    Ok((merge_sorted(visible), report))
}

/// Whole-home shaping of both directions through shared queues.
pub fn shape_whole_home(
    corpus: &Corpus,
    entry: &ShapingSweepEntry,
    master_seed: u64,
) -> Result<OverheadReport, ShieldError> {
    let horizon_us = corpus.duration_us();
    let mut acc = OverheadAccumulator::new(entry.cell_size);
    let mut backlog = 0;
    for direction in [Direction::Upload, Direction::Download] {
        let cfg = entry.config(master_seed, direction);
        let streams: Vec<_> = corpus
            .devices
            .iter()
            .map(|d| {
                let p: Vec<PacketRecord> = d
                    .packets
                    .iter()
                    .filter(|p| p.direction == direction)
                    .cloned()
                    .collect();
                cellify(&p, cfg.cell_size)
            })
            .collect();
        let schedule = shape_home(&streams, &cfg, horizon_us)?;
        schedule.departures.iter().for_each(|d| acc.push(d));
        backlog += schedule.backlog;
    }
    acc.finish(horizon_us as f64 / MICROS_PER_SEC as f64, backlog)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapingOverhead {
    pub per_device: BTreeMap<String, OverheadReport>,
    pub whole_home: OverheadReport,
    pub max_individual_cover_bytes: u64,
    /// Whole-home cover does not exceed the largest single-device cover.
    pub sublinear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    #[serde(flatten)]
    pub attack: AttackOutcome,
    /// Share of each device's planted events recovered from this condition's
    /// traffic, by device label.
    pub per_device_recall: BTreeMap<String, Option<f64>>,
    pub overhead: Option<ShapingOverhead>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub scenario: String,
    pub spec_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub conditions: BTreeMap<String, ConditionReport>,
}

fn per_device_recall(
    corpus: &Corpus,
    detections: &[u64],
    slack_us: u64,
) -> BTreeMap<String, Option<f64>> {
    corpus
        .devices
        .iter()
        .map(|d| {
            let s = score_detections(detections, &d.event_windows(), slack_us);
            (d.label.clone(), s.recall)
        })
        .collect()
}

/// Runs the whole comparison: raw, tunneled, and every shaping config.
pub fn cmd_evaluate(spec: &LoadedSpec, seed: u64) -> Result<EvaluationReport, HarnessError> {
    let es = &spec.spec;
    let params = &es.attack;
    let corpus = generate_corpus(es, seed, true)?;
    let lab = generate_corpus(es, derive_seed(seed, "attack/reference"), false)?;
    let reference = ReferenceModel::train(&lab, params)?;
    let duration_us = corpus.duration_us();
    let slack_us = u64::from(params.sample_seconds) * MICROS_PER_SEC;
    let mut conditions = BTreeMap::new();

    let raw = run_attack(
        &raw_endpoints(&corpus),
        params,
        &es.detector,
        &reference,
        duration_us,
        seed,
    )?;
    let recall = corpus
        .devices
        .iter()
        .zip(&raw.endpoints)
        .map(|(d, e)| (d.label.clone(), e.events.recall))
        .collect();
    conditions.insert(
        "raw".to_string(),
        ConditionReport {
            attack: raw,
            per_device_recall: recall,
            overhead: None,
        },
    );

    // Tunnel: one aggregate stream; the observer cannot split devices, so
    // spikes are scored against every device's planted events.
    let members: Vec<(String, RateSeries)> = corpus
        .devices
        .iter()
        .map(|d| {
            (
                d.label.clone(),
                device_series(&d.packets, params.sample_seconds, duration_us),
            )
        })
        .collect();
    let tunnel = aggregate_tunnel(&members)?;
    let spikes = detect_events(&tunnel.aggregate, &es.detector)?;
    let times: Vec<u64> = spikes.iter().map(|s| s.time_us).collect();
    let all_windows: Vec<EventWindow> = corpus
        .devices
        .iter()
        .flat_map(|d| d.event_windows())
        .collect();
    let tunnel_score = score_detections(&times, &all_windows, slack_us);
    conditions.insert(
        "tunneled".to_string(),
        ConditionReport {
            attack: AttackOutcome {
                classifier_accuracy: None,
                class_prior: None,
                windows: 0,
                endpoints: Vec::new(),
                detected_activities: spikes.len(),
                events: tunnel_score,
                activities: Vec::new(),
            },
            per_device_recall: per_device_recall(&corpus, &times, slack_us),
            overhead: None,
        },
    );

    for entry in &es.shaping {
        let mut endpoints = Vec::new();
        let mut per_device = BTreeMap::new();
        for (i, d) in corpus.devices.iter().enumerate() {
            let tunnel_addr = format!("tunnel-{i}");
            let (visible, report) =
                shape_device(&d.packets, entry, seed, duration_us, &tunnel_addr)?;
            per_device.insert(d.label.clone(), report);
            endpoints.push(Endpoint {
                name: tunnel_addr,
                packets: visible,
                truth: EndpointTruth {
                    label: Some(d.label.clone()),
                    events: d.event_windows(),
                },
            });
        }
        let outcome = run_attack(
            &endpoints,
            params,
            &es.detector,
            &reference,
            duration_us,
            seed,
        )?;
        let recall = corpus
            .devices
            .iter()
            .zip(&outcome.endpoints)
            .map(|(d, e)| (d.label.clone(), e.events.recall))
            .collect();
        let whole_home = shape_whole_home(&corpus, entry, seed)?;
        let max_individual_cover_bytes = per_device
            .values()
            .map(|r| r.cover_bytes)
            .max()
            .unwrap_or(0);
        conditions.insert(
            format!("shaped:{}", entry.name),
            ConditionReport {
                attack: outcome,
                per_device_recall: recall,
                overhead: Some(ShapingOverhead {
                    sublinear: whole_home.cover_bytes <= max_individual_cover_bytes,
                    per_device,
                    whole_home,
                    max_individual_cover_bytes,
                }),
            },
        );
    }

    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        provenance: Provenance {
            scenario: es.scenario.clone(),
            spec_hash: spec.hash.clone(),
            seed,
            tool_version: TOOL_VERSION.to_string(),
        },
        conditions,
    })
}

/// Writes `report.json` into `out` and returns its path.
pub fn write_report<T: Serialize>(
    report: &T,
    out: &Path,
    name: &str,
) -> Result<PathBuf, HarnessError> {
    let path = out.join(name);
    write_file(&path, to_json(report).as_bytes())?;
    Ok(path)
}

/// Reads a trace-CSV file.
pub fn read_trace(path: &Path) -> Result<Vec<PacketRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
    parse_trace(&text).map_err(|source| HarnessError::Trace {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::GroundTruth(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub outcome: AttackOutcome,
}

/// Attacks trace files. With ground truth, endpoints are the truth's trace
/// files (resolved against `truth_dir`) and results are scored; otherwise
/// each file in `traces` is an unlabeled endpoint.
pub fn cmd_attack(
    spec: &LoadedSpec,
    seed: u64,
    traces: &[PathBuf],
    truth: Option<(&GroundTruth, &Path)>,
) -> Result<(AttackReport, String), HarnessError> {
    let es = &spec.spec;
    let params = &es.attack;
    let mut endpoints = Vec::new();
    let mut duration_us = es.duration * MICROS_PER_SEC;
    match truth {
        Some((gt, dir)) => {
            duration_us = gt.duration * MICROS_PER_SEC;
            for d in &gt.devices {
                endpoints.push(Endpoint {
                    name: d.trace_file.clone(),
                    packets: read_trace(&dir.join(&d.trace_file))?,
                    truth: EndpointTruth {
                        label: Some(d.label.clone()),
                        events: d.events.iter().map(|e| e.window).collect(),
                    },
                });
            }
        }
        None => {
            if traces.is_empty() {
                return Err(HarnessError::Usage("no trace files given".into()));
            }
            for path in traces {
                let packets = read_trace(path)?;
                if let Some(last) = packets.last() {
                    duration_us = duration_us.max(last.timestamp_us + 1);
                }
                endpoints.push(Endpoint {
                    name: path.display().to_string(),
                    packets,
                    truth: EndpointTruth::default(),
                });
            }
        }
    }
    let lab = generate_corpus(es, derive_seed(seed, "attack/reference"), false)?;
    let reference = ReferenceModel::train(&lab, params)?;
    let outcome = run_attack(
        &endpoints,
        params,
        &es.detector,
        &reference,
        duration_us,
        seed,
    )?;
    let jsonl = crate::infer::activities_to_jsonl(&outcome.activities);
    Ok((
        AttackReport {
            schema_version: REPORT_SCHEMA_VERSION,
            provenance: Provenance {
                scenario: es.scenario.clone(),
                spec_hash: spec.hash.clone(),
                seed,
                tool_version: TOOL_VERSION.to_string(),
            },
            outcome,
        },
        jsonl,
    ))
}

/// Shapes the packets of `cfg.direction` through `horizon_us`, streaming the
/// schedule CSV into `csv` when given. The report's span is the horizon.
pub fn cmd_shape<W: Write>(
    packets: &[PacketRecord],
    cfg: &ShapingConfig,
    horizon_us: u64,
    mut csv: Option<&mut W>,
) -> Result<OverheadReport, HarnessError> {
    if let Some(last) = packets.last() {
        if last.timestamp_us > horizon_us {
            return Err(ShieldError::HorizonTooShort {
                horizon_us,
                last_arrival_us: last.timestamp_us,
            }
            .into());
        }
    }
    let selected: Vec<PacketRecord> = packets
        .iter()
        .filter(|p| p.direction == cfg.direction)
        .cloned()
        .collect();
    let cells = cellify(&selected, cfg.cell_size);
    let mut shaper = shape_iter(&cells, cfg, horizon_us)?;
    let mut acc = OverheadAccumulator::new(cfg.cell_size);
    let mut buf = String::new();
    if let Some(w) = csv.as_deref_mut() {
        writeln!(w, "{SCHEDULE_CSV_HEADER}").map_err(HarnessError::io("schedule csv"))?;
    }
    for d in shaper.by_ref() {
        acc.push(&d);
        if let Some(w) = csv.as_deref_mut() {
            buf.clear();
            push_csv_row(&mut buf, &d);
            w.write_all(buf.as_bytes())
                .map_err(HarnessError::io("schedule csv"))?;
        }
    }
    let backlog = shaper.backlog();
    Ok(acc.finish(horizon_us as f64 / MICROS_PER_SEC as f64, backlog)?)
}

/// Full in-memory schedule for `packets`, for JSON export.
pub fn shape_schedule(
    packets: &[PacketRecord],
    cfg: &ShapingConfig,
    horizon_us: u64,
) -> Result<(ShapedSchedule, OverheadReport), HarnessError> {
    let selected: Vec<PacketRecord> = packets
        .iter()
        .filter(|p| p.direction == cfg.direction)
        .cloned()
        .collect();
    let schedule = shape(&cellify(&selected, cfg.cell_size), cfg, horizon_us)?;
    let report = overhead_report(&schedule, horizon_us as f64 / MICROS_PER_SEC as f64)?;
    Ok((schedule, report))
}

/// The observer's packets for an already shaped schedule.
pub fn schedule_packets(schedule: &ShapedSchedule) -> Vec<PacketRecord> {
    observed_packets(
        &schedule.visible(),
        schedule.config.direction,
        "home-gateway",
        "tunnel",
    )
}
