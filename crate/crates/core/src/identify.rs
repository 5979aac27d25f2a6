//! Device identification: hardware-address prefix lookup, DNS fingerprint
//! matching, and traffic-rate fingerprinting with a k-nearest-neighbors
//! classifier over per-window (mean, standard deviation) features.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::trace::{parse_hex_octets, HwAddr, HwAddrError, RateSeries};

#[derive(Debug, Error, PartialEq)]
pub enum IdentifyError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("window of {window_secs} s is not a positive multiple of the {sample_secs} s sample interval")]
    WindowNotMultiple { window_secs: u32, sample_secs: u32 },
    #[error("window of {window_secs} s holds fewer than two {sample_secs} s samples")]
    WindowTooShort { window_secs: u32, sample_secs: u32 },
    #[error("k must be odd and at least 1, got {0}")]
    InvalidK(usize),
    #[error("need at least {needed} labeled points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("training data holds a single class")]
    SingleClass,
    #[error("feature {0} has no label")]
    Unlabeled(usize),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("class {label:?} has {size} members, fewer than {folds} folds")]
    ClassTooSmall {
        label: String,
        size: usize,
        folds: usize,
    },
}

fn config_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn split_pair(line: usize, text: &str) -> Result<(&str, &str), IdentifyError> {
    match text.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => Ok((a.trim(), b.trim())),
        _ => Err(IdentifyError::Config {
            line,
            reason: format!("expected two comma-separated fields: {text:?}"),
        }),
    }
}

/// Hardware-address prefix to manufacturer table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OuiTable {
    entries: BTreeMap<[u8; 3], String>,
}

const PACKAGED_OUI: &str = include_str!("../config/oui.csv");
const PACKAGED_DNS: &str = include_str!("../config/dns_fingerprints.csv");

impl OuiTable {
    /// Parses `prefix,manufacturer` lines. Blank lines and `#` comments are skipped.
    pub fn from_config(text: &str) -> Result<Self, IdentifyError> {
        let mut entries = BTreeMap::new();
        for (line, l) in config_lines(text) {
            let (prefix, name) = split_pair(line, l)?;
            let key = parse_hex_octets::<3>(prefix).ok_or_else(|| IdentifyError::Config {
                line,
                reason: format!("malformed prefix {prefix:?}"),
            })?;
            if entries.insert(key, name.to_string()).is_some() {
                return Err(IdentifyError::Config {
                    line,
                    reason: format!("duplicate prefix {prefix}"),
                });
            }
        }
        Ok(OuiTable { entries })
    }

    pub fn packaged() -> Self {
        Self::from_config(PACKAGED_OUI).expect("packaged OUI table is valid")
    }

    pub fn get(&self, hw: &HwAddr) -> Option<&str> {
        self.entries.get(&hw.oui()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Manufacturer for a textual hardware address, if its prefix is known.
pub fn oui_lookup<'t>(hw: &str, table: &'t OuiTable) -> Result<Option<&'t str>, HwAddrError> {
    let hw: HwAddr = hw.parse()?;
    Ok(table.get(&hw))
}

/// Device label to the set of domains that device queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DnsFingerprintDb {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl DnsFingerprintDb {
    /// Parses `device_label,domain` lines; repeated labels accumulate domains.
    pub fn from_config(text: &str) -> Result<Self, IdentifyError> {
        let mut entries: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (line, l) in config_lines(text) {
            let (label, domain) = split_pair(line, l)?;
            entries
                .entry(label.to_string())
                .or_default()
                .insert(domain.to_string());
        }
        Ok(DnsFingerprintDb { entries })
    }

    /// Seven-device table from a representative smart-home capture.
    pub fn packaged() -> Self {
        Self::from_config(PACKAGED_DNS).expect("packaged DNS table is valid")
    }

    pub fn insert(&mut self, label: &str, domains: impl IntoIterator<Item = String>) {
        self.entries
            .entry(label.to_string())
            .or_default()
            .extend(domains);
    }

    pub fn domains(&self, label: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DnsMatch {
    pub label: String,
    /// Fraction of the device's known domains present in the query set.
    pub score: f64,
}

/// Scores each known device by containment of its domain set in `queries`.
/// Only positive scores are returned, best first, ties by label.
pub fn dns_identify(queries: &BTreeSet<String>, db: &DnsFingerprintDb) -> Vec<DnsMatch> {
    let mut out: Vec<DnsMatch> = db
        .entries
        .iter()
        .filter(|(_, domains)| !domains.is_empty())
        .filter_map(|(label, domains)| {
            let hits = domains.intersection(queries).count();
            (hits > 0).then(|| DnsMatch {
                label: label.clone(),
                score: hits as f64 / domains.len() as f64,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.label.cmp(&b.label))
    });
    out
}

/// The best DNS match when it is strictly better than the runner-up.
pub fn unique_top_match(matches: &[DnsMatch]) -> Option<&DnsMatch> {
    match matches {
        [] => None,
        [only] => Some(only),
        [first, second, ..] => (first.score > second.score).then_some(first),
    }
}

/// Mean and population standard deviation of one window of rate samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowFeature<T> {
    pub device_label: Option<String>,
    pub mean: T,
    pub stddev: T,
    pub window_start_us: u64,
}

impl<T: Scalar> WindowFeature<T> {
    pub fn new(mean: T, stddev: T) -> Self {
        WindowFeature {
            device_label: None,
            mean,
            stddev,
            window_start_us: 0,
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.device_label = Some(label.to_string());
        self
    }

    fn point(&self) -> [T; 2] {
        [self.mean, self.stddev]
    }
}

/// Splits `series` into non-overlapping windows of `window_secs` and returns
/// each window's (mean, population stddev). A trailing partial window is
/// dropped.
pub fn window_features<T: Scalar>(
    series: &RateSeries,
    window_secs: u32,
) -> Result<Vec<WindowFeature<T>>, IdentifyError> {
    let s = series.sample_seconds;
    if window_secs == 0 || s == 0 || !window_secs.is_multiple_of(s) {
        return Err(IdentifyError::WindowNotMultiple {
            window_secs,
            sample_secs: s,
        });
    }
    let per_window = (window_secs / s) as usize;
    if per_window < 2 {
        return Err(IdentifyError::WindowTooShort {
            window_secs,
            sample_secs: s,
        });
    }
    let n = T::of_usize(per_window);
    Ok(series
        .samples
        .chunks_exact(per_window)
        .enumerate()
        .map(|(i, chunk)| {
            let mean = chunk.iter().map(|&v| T::of_u64(v)).sum::<T>() / n;
            let var = chunk
                .iter()
                .map(|&v| {
                    let d = T::of_u64(v) - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            WindowFeature {
                device_label: None,
                mean,
                stddev: var.sqrt(),
                window_start_us: series.sample_start_us(i * per_window),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Standardizer<T> {
    pub mean: T,
    /// Training stddev, or one when the feature is constant.
    pub scale: T,
}

impl<T: Scalar> Standardizer<T> {
    fn fit(values: impl Iterator<Item = T> + Clone) -> Self {
        let n = T::of_usize(values.clone().count());
        let mean = values.clone().sum::<T>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / n;
        let sd = var.sqrt();
        Standardizer {
            mean,
            scale: if sd > T::zero() { sd } else { T::one() },
        }
    }

    pub fn apply(&self, v: T) -> T {
        (v - self.mean) / self.scale
    }
}

/// A trained k-NN classifier over z-scored (mean, stddev) features.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel<T> {
    k: usize,
    labels: Vec<String>,
    points: Vec<[T; 2]>,
    scaling: [Standardizer<T>; 2],
}

/// Number of neighbors used when none is specified.
pub const DEFAULT_K: usize = 3;

/// Fits z-score parameters on `features` and stores the standardized points.
pub fn knn_train<T: Scalar>(
    features: &[WindowFeature<T>],
    k: usize,
) -> Result<KnnModel<T>, IdentifyError> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(IdentifyError::InvalidK(k));
    }
    if features.len() < k {
        return Err(IdentifyError::TooFewPoints {
            needed: k,
            found: features.len(),
        });
    }
    let labels = features
        .iter()
        .enumerate()
        .map(|(i, f)| f.device_label.clone().ok_or(IdentifyError::Unlabeled(i)))
        .collect::<Result<Vec<_>, _>>()?;
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(IdentifyError::SingleClass);
    }
    let scaling = [
        Standardizer::fit(features.iter().map(|f| f.mean)),
        Standardizer::fit(features.iter().map(|f| f.stddev)),
    ];
    let points = features
        .iter()
        .map(|f| {
            let p = f.point();
            [scaling[0].apply(p[0]), scaling[1].apply(p[1])]
        })
        .collect();
    Ok(KnnModel {
        k,
        labels,
        points,
        scaling,
    })
}

impl<T: Scalar> KnnModel<T> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaling(&self) -> &[Standardizer<T>; 2] {
        &self.scaling
    }

    /// Majority label of the k nearest training points. Equal distances keep
    /// training order; tied votes go to the smaller summed distance, then the
    /// lexicographically smaller label.
    pub fn classify(&self, feature: &WindowFeature<T>) -> &str {
        let q = feature.point();
        let q = [self.scaling[0].apply(q[0]), self.scaling[1].apply(q[1])];
        let mut dist: Vec<(T, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (a, b) = (p[0] - q[0], p[1] - q[1]);
                ((a * a + b * b).sqrt(), i)
            })
            .collect();
        dist.sort_by(|x, y| {
            x.0.partial_cmp(&y.0)
                .expect("finite distances")
                .then(x.1.cmp(&y.1))
        });

        let mut votes: BTreeMap<&str, (usize, T)> = BTreeMap::new();
        for &(d, i) in dist.iter().take(self.k) {
            let e = votes
                .entry(self.labels[i].as_str())
                .or_insert((0, T::zero()));
            e.0 += 1;
            e.1 = e.1 + d;
        }
        // BTreeMap iterates labels in ascending order, so strict comparisons
        // keep the lexicographically smallest label among full ties.
        let mut best: Option<(&str, usize, T)> = None;
        for (label, (count, sum)) in votes {
            let better = match best {
                None => true,
                Some((_, bc, bs)) => count > bc || (count == bc && sum < bs),
            };
            if better {
                best = Some((label, count, sum));
            }
        }
        best.expect("k >= 1").0
    }
}

/// Share of the most frequent label: the accuracy of always guessing it.
pub fn class_prior<T>(features: &[WindowFeature<T>]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for f in features {
        if let Some(l) = &f.device_label {
            *counts.entry(l).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    match counts.values().max() {
        Some(&m) if total > 0 => m as f64 / total as f64,
        _ => 0.0,
    }
}

/// Stratified k-fold cross-validated accuracy of a k-NN classifier.
///
/// Within each class (in label order) the member indices are shuffled by a
/// generator seeded from `seed` and dealt round-robin to the folds. Each fold
/// is classified by a model trained on the remaining points in their
/// original order.
pub fn stratified_cv<T: Scalar>(
    features: &[WindowFeature<T>],
    k_neighbors: usize,
    folds: usize,
    seed: u64,
) -> Result<f64, IdentifyError> {
    if folds < 2 {
        return Err(IdentifyError::TooFewFolds(folds));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, f) in features.iter().enumerate() {
        let label = f
            .device_label
            .as_deref()
            .ok_or(IdentifyError::Unlabeled(i))?;
        by_class.entry(label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(IdentifyError::SingleClass);
    }
    if let Some((label, members)) = by_class.iter().find(|(_, m)| m.len() < folds) {
        return Err(IdentifyError::ClassTooSmall {
            label: label.to_string(),
            size: members.len(),
            folds,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stratified-cv"));
    let mut fold_of = vec![0usize; features.len()];
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for (j, &idx) in members.iter().enumerate() {
            fold_of[idx] = j % folds;
        }
    }

    let mut correct = 0usize;
    for fold in 0..folds {
        let train: Vec<WindowFeature<T>> = features
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f != fold)
            .map(|(x, _)| x.clone())
            .collect();
        let model = knn_train(&train, k_neighbors)?;
        correct += features
            .iter()
            .zip(&fold_of)
            .filter(|(_, &f)| f == fold)
            .filter(|(x, _)| Some(model.classify(x)) == x.device_label.as_deref())
            .count();
    }
    Ok(correct as f64 / features.len() as f64)
}
