use std::fs;
use std::io;

use homeshield::harness::{
    cmd_attack, cmd_evaluate, cmd_generate, cmd_shape, read_ground_truth, read_trace,
    AttackOverrides, HarnessError, LoadedSpec, SpecError,
};
use homeshield::shield::{Discipline, ShapingConfig, ShieldError};
use homeshield::trace::{Direction, SynthError};

const DEFAULT: &str = include_str!("../config/default_experiment.toml");

fn dominating_spec() -> String {
    r#"
schema_version = 1
scenario = "dominating-camera"
seed = 4
duration = 3600

[[device]]
archetype = "bigcam"
events = [
  { time = 300.0, label = "motion" }, { time = 600.0, label = "motion" },
  { time = 900.0, label = "motion" }, { time = 1200.0, label = "motion" },
  { time = 1500.0, label = "motion" }, { time = 1800.0, label = "motion" },
  { time = 2100.0, label = "motion" }, { time = 2400.0, label = "motion" },
  { time = 2700.0, label = "motion" }, { time = 3000.0, label = "motion" },
]

[[device]]
archetype = "smallplug"
events = [{ time = 450.0, label = "toggle" }, { time = 2000.0, label = "toggle" }]

[[archetype]]
name = "bigcam"
kind = "MotionCamera"
device_label = "Big Camera"
baseline_rate = 10000.0
packet_bytes = 500
size_jitter = 0.0
interval_jitter = 0.05
upload_fraction = 0.9
burst_packet_bytes = 1000
hw_prefix = "02:AA:01"
server_addr = "52.9.0.1"
server_port = 443
noise_seed_salt = 1
domains = []
events = [{ label = "motion", burst_bytes = 200000, burst_duration = 2.0 }]

[[archetype]]
name = "smallplug"
kind = "SmartPlug"
device_label = "Small Plug"
baseline_rate = 50.0
packet_bytes = 25
size_jitter = 0.0
interval_jitter = 0.1
upload_fraction = 0.5
burst_packet_bytes = 200
hw_prefix = "02:AA:02"
server_addr = "52.9.0.2"
server_port = 443
noise_seed_salt = 2
domains = []
events = [{ label = "toggle", burst_bytes = 2000, burst_duration = 2.0 }]
"#
    .to_string()
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let spec = LoadedSpec::packaged_default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = cmd_generate(&spec, 0, a.path()).unwrap();
    cmd_generate(&spec, 0, b.path()).unwrap();
    assert_eq!(ta.devices.len(), 6);
    for d in &ta.devices {
        let x = fs::read(a.path().join(&d.trace_file)).unwrap();
        let y = fs::read(b.path().join(&d.trace_file)).unwrap();
        assert_eq!(x, y, "{}", d.trace_file);
        let recs = read_trace(&a.path().join(&d.trace_file)).unwrap();
        let span = recs.last().unwrap().timestamp_us - recs[0].timestamp_us;
        assert!(span > 7100 * 1_000_000);
    }
    assert_eq!(
        fs::read(a.path().join("ground_truth.json")).unwrap(),
        fs::read(b.path().join("ground_truth.json")).unwrap()
    );
    let gt = read_ground_truth(&a.path().join("ground_truth.json")).unwrap();
    assert_eq!(gt, ta);
    assert_eq!(gt.devices.iter().map(|d| d.events.len()).sum::<usize>(), 19);
}

#[test]
fn invalid_specs_are_rejected() {
    let empty = "schema_version = 1\nscenario = \"none\"\nduration = 7200\n";
    assert!(matches!(
        LoadedSpec::parse(empty),
        Err(SpecError::EmptyRoster)
    ));
    let late = DEFAULT.replace("time = 4500.0", "time = 7300.0");
    assert!(matches!(
        LoadedSpec::parse(&late),
        Err(SpecError::Synth(SynthError::EventOutOfRange { .. }))
    ));
    let err = HarnessError::from(LoadedSpec::parse("schema_version = ").unwrap_err());
    assert_eq!(err.exit_code(), 4);
    let spec = LoadedSpec::packaged_default();
    let bad = spec.with_overrides(&AttackOverrides {
        sample_seconds: Some(7),
        ..Default::default()
    });
    assert!(bad.is_err());
}

#[test]
fn evaluation_separates_raw_from_shaped() {
    let spec = LoadedSpec::packaged_default();
    let r = cmd_evaluate(&spec, 0).unwrap();
    let names: Vec<&str> = r.conditions.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        ["raw", "shaped:cit-10k", "shaped:vit-10k", "tunneled"]
    );
    let raw = &r.conditions["raw"];
    assert!(raw.attack.classifier_accuracy.unwrap() > 0.95);
    assert!(raw.attack.events.recall.unwrap() >= 0.9);
    assert!(raw.attack.events.precision.unwrap() >= 0.9);
    assert!(raw.attack.endpoints.iter().all(|e| e.correct == Some(true)));
    for name in ["shaped:cit-10k", "shaped:vit-10k"] {
        let c = &r.conditions[name];
        let acc = c.attack.classifier_accuracy.unwrap();
        let prior = c.attack.class_prior.unwrap();
        assert!(acc <= prior + 0.1, "{name}: {acc} vs {prior}");
        assert_eq!(c.attack.events.detected, 0);
        let o = c.overhead.as_ref().unwrap();
        assert!(o.sublinear);
        assert!(o.whole_home.cover_bytes <= o.max_individual_cover_bytes);
    }
    assert_eq!(r.provenance.spec_hash, spec.hash);
    assert_eq!(r.provenance.seed, 0);

    let again = cmd_evaluate(&spec, 0).unwrap();
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
}

#[test]
fn tunneled_dominating_device_leaks_its_events() {
    let spec = LoadedSpec::parse(&dominating_spec()).unwrap();
    let r = cmd_evaluate(&spec, spec.spec.seed).unwrap();
    let t = &r.conditions["tunneled"];
    assert!(
        t.per_device_recall["Big Camera"].unwrap() >= 0.9,
        "{:?}",
        t.per_device_recall
    );
}

#[test]
fn attack_on_generated_files_matches_ground_truth() {
    let spec = LoadedSpec::packaged_default();
    let dir = tempfile::tempdir().unwrap();
    let gt = cmd_generate(&spec, 0, dir.path()).unwrap();
    let (report, jsonl) = cmd_attack(&spec, 0, &[], Some((&gt, dir.path()))).unwrap();
    assert!(report
        .outcome
        .endpoints
        .iter()
        .all(|e| e.correct == Some(true)));
    assert!(report.outcome.events.recall.unwrap() >= 0.9);
    assert_eq!(jsonl.lines().count(), report.outcome.detected_activities);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    for key in ["time_us", "device", "kind", "magnitude"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    // Unlabeled files still get identified.
    let paths: Vec<_> = gt
        .devices
        .iter()
        .map(|d| dir.path().join(&d.trace_file))
        .collect();
    let (blind, _) = cmd_attack(&spec, 0, &paths, None).unwrap();
    let ids: Vec<_> = blind
        .outcome
        .endpoints
        .iter()
        .map(|e| e.identified_as.clone().unwrap())
        .collect();
    let labels: Vec<_> = gt.devices.iter().map(|d| d.label.clone()).collect();
    assert_eq!(ids, labels);
    assert!(blind.outcome.classifier_accuracy.is_none());
}

#[test]
fn attack_reports_parse_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "not,a,trace\n").unwrap();
    let spec = LoadedSpec::packaged_default();
    let err = cmd_attack(&spec, 0, &[p], None).unwrap_err();
    assert!(matches!(err, HarnessError::Trace { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn thirty_days_of_pure_cover() {
    let cfg = ShapingConfig {
        rate: 7500,
        cell_size: 512,
        ..Default::default()
    };
    let horizon = 30 * 86_400 * 1_000_000;
    let r = cmd_shape::<io::Sink>(&[], &cfg, horizon, None).unwrap();
    assert_eq!(format!("{:.2}", r.gb_per_month), "19.44");
    assert_eq!(r.device_cells, 0);
}

#[test]
fn shape_is_reproducible_and_checks_the_horizon() {
    let spec = LoadedSpec::packaged_default();
    let dir = tempfile::tempdir().unwrap();
    let gt = cmd_generate(&spec, 0, dir.path()).unwrap();
    let recs = read_trace(&dir.path().join(&gt.devices[4].trace_file)).unwrap();
    let cfg = ShapingConfig {
        rate: 512,
        cell_size: 128,
        discipline: Discipline::Vit,
        vit_mean: 0.25,
        vit_stddev: 0.01,
        seed: 9,
        direction: Direction::Upload,
    };
    let h = 7200 * 1_000_000;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let ra = cmd_shape(&recs, &cfg, h, Some(&mut a)).unwrap();
    let rb = cmd_shape(&recs, &cfg, h, Some(&mut b)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(String::from_utf8(a)
        .unwrap()
        .starts_with("departure_us,origin,payload_bytes\n"));
    let err = cmd_shape::<io::Sink>(&recs, &cfg, 1_000_000, None).unwrap_err();
    assert!(matches!(
        err,
        HarnessError::Shield(ShieldError::HorizonTooShort { .. })
    ));
}
