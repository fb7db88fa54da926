//! Balanced split assignment and manifest persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Label, PatchSample, Split};

/// First token of a manifest header line.
pub const MANIFEST_HEADER: &str = "#pavecrack-manifest v1";

/// Reference to a labeled patch on disk, with tiling provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    /// Path of the patch file, relative to the manifest location.
    pub path: String,
    pub source_frame_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub transform_tag: String,
}

impl SampleRef {
    /// Bare reference with no tiling provenance.
    pub fn from_path(path: impl Into<String>) -> Self {
        let path = path.into();
        let frame = path.clone();
        SampleRef {
            path,
            source_frame_id: frame,
            grid_row: 0,
            grid_col: 0,
            transform_tag: super::IDENTITY_TAG.to_string(),
        }
    }
}

/// One manifest line: a labeled sample assigned to a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub source_frame_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub transform_tag: String,
}

/// Persisted record of a split, balanced patch dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Per-split entry totals, indexed train/val/test.
    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for e in &self.entries {
            counts[e.split.index()] += 1;
        }
        counts
    }

    /// Positive fraction per split; `None` for an empty split.
    pub fn balance(&self) -> [Option<f64>; 3] {
        let mut pos = [0usize; 3];
        let mut total = [0usize; 3];
        for e in &self.entries {
            total[e.split.index()] += 1;
            if e.label == Label::Positive {
                pos[e.split.index()] += 1;
            }
        }
        let frac = |i: usize| {
            if total[i] == 0 {
                None
            } else {
                Some(pos[i] as f64 / total[i] as f64)
            }
        };
        [frac(0), frac(1), frac(2)]
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Write the tab-separated manifest file.
    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let mut file = std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?;
        let mut buf = String::new();
        buf.push_str(&format!("{MANIFEST_HEADER} seed={}\n", self.seed));
        for e in &self.entries {
            buf.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path, e.label, e.split, e.source_frame_id, e.grid_row, e.grid_col, e.transform_tag
            ));
        }
        file.write_all(buf.as_bytes())
            .map_err(|e| DatasetError::io(path, e))
    }

    /// Read a manifest file written by [`DatasetManifest::write`].
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
        let reader = BufReader::new(file);
        let parse_err = |line: usize, msg: String| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries = Vec::new();
        let mut seed = 0u64;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DatasetError::io(path, e))?;
            if idx == 0 {
                if !line.starts_with(MANIFEST_HEADER) {
                    return Err(parse_err(1, format!("missing '{MANIFEST_HEADER}' header")));
                }
                if let Some(s) = line.split("seed=").nth(1) {
                    seed = s
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(1, format!("bad seed '{s}'")))?;
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(parse_err(
                    idx + 1,
                    format!("expected 7 tab-separated fields, got {}", fields.len()),
                ));
            }
            let label = Label::parse(fields[1])
                .ok_or_else(|| parse_err(idx + 1, format!("bad label '{}'", fields[1])))?;
            let split = Split::parse(fields[2])
                .ok_or_else(|| parse_err(idx + 1, format!("bad split '{}'", fields[2])))?;
            let grid_row = fields[4]
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad grid_row '{}'", fields[4])))?;
            let grid_col = fields[5]
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad grid_col '{}'", fields[5])))?;
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                label,
                split,
                source_frame_id: fields[3].to_string(),
                grid_row,
                grid_col,
                transform_tag: fields[6].to_string(),
            });
        }
        Ok(DatasetManifest { entries, seed })
    }
}

/// Knobs for [`build_manifest`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Keep every patch of one source frame inside a single split.
    /// Prevents near-duplicate leakage between train and test.
    pub frame_separation: bool,
    /// Requested total manifest size (must be even). `None` uses
    /// `2 * min(|positives|, |negatives|)`.
    pub total_size: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            frame_separation: true,
            total_size: None,
        }
    }
}

/// Largest-remainder apportionment of `total` over `fractions`.
/// Ties go to the earlier split.
fn largest_remainder(total: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fracs = [fractions.0, fractions.1, fractions.2];
    let exact: Vec<f64> = fracs.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Group samples of one class for split assignment. With frame
/// separation each group is all samples of one source frame; otherwise
/// every sample stands alone.
fn class_groups(samples: &[SampleRef], frame_separation: bool) -> Vec<Vec<SampleRef>> {
    if !frame_separation {
        return samples.iter().map(|s| vec![s.clone()]).collect();
    }
    let mut by_frame: BTreeMap<&str, Vec<SampleRef>> = BTreeMap::new();
    for s in samples {
        by_frame
            .entry(s.source_frame_id.as_str())
            .or_default()
            .push(s.clone());
    }
    by_frame.into_values().collect()
}

/// Assign shuffled groups to splits, greedily filling the largest
/// remaining deficit. Groups left over once every target is met are
/// dropped. With singleton groups the targets are hit exactly.
fn assign_groups(
    groups: Vec<Vec<SampleRef>>,
    targets: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> [Vec<SampleRef>; 3] {
    let mut groups = groups;
    groups.shuffle(rng);
    let mut assigned: [Vec<SampleRef>; 3] = Default::default();
    let mut filled = [0usize; 3];
    for group in groups {
        let deficits: Vec<i64> = (0..3)
            .map(|i| targets[i] as i64 - filled[i] as i64)
            .collect();
        let (best, &best_deficit) = deficits
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .unwrap();
        if best_deficit <= 0 {
            break;
        }
        filled[best] += group.len();
        assigned[best].extend(group);
    }
    assigned
}

/// Build a balanced, split dataset manifest.
///
/// Deterministic for fixed inputs-as-multisets, fractions and seed:
/// samples are canonically sorted by path before any seeded shuffling,
/// so permuting the input order changes nothing. Split sizes follow
/// largest-remainder apportionment of the total; within each split the
/// two classes are balanced exactly wherever the arithmetic divides.
pub fn build_manifest(
    positives: &[SampleRef],
    negatives: &[SampleRef],
    fractions: (f64, f64, f64),
    seed: u64,
    options: &BuildOptions,
) -> Result<DatasetManifest, DatasetError> {
    let (ft, fv, fe) = fractions;
    let sum = ft + fv + fe;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(ft, fv, fe));
    }

    let per_class = match options.total_size {
        Some(total) => {
            if total % 2 != 0 {
                return Err(DatasetError::OddTotal(total));
            }
            total / 2
        }
        None => positives.len().min(negatives.len()),
    };
    for (class, available) in [
        (Label::Positive, positives.len()),
        (Label::Negative, negatives.len()),
    ] {
        if available < per_class.max(1) {
            return Err(DatasetError::Capacity {
                class,
                needed: per_class.max(1),
                available,
            });
        }
    }

    let total = per_class * 2;
    let split_totals = largest_remainder(total, fractions);

    // Canonical order before anything seeded.
    let mut pos: Vec<SampleRef> = positives.to_vec();
    let mut neg: Vec<SampleRef> = negatives.to_vec();
    pos.sort_by(|a, b| a.path.cmp(&b.path).then(a.transform_tag.cmp(&b.transform_tag)));
    neg.sort_by(|a, b| a.path.cmp(&b.path).then(a.transform_tag.cmp(&b.transform_tag)));

    // Positive targets by largest remainder over the class count; the
    // negative class fills whatever capacity each split has left, which
    // keeps the split totals exact even when per-split halves are odd.
    let pos_targets = largest_remainder(per_class, fractions);
    let neg_targets = [
        split_totals[0] - pos_targets[0],
        split_totals[1] - pos_targets[1],
        split_totals[2] - pos_targets[2],
    ];

    let mut rng_pos = ChaCha8Rng::seed_from_u64(seed ^ 0x706f73);
    let mut rng_neg = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6567);
    let pos_assigned = assign_groups(
        class_groups(&pos, options.frame_separation),
        pos_targets,
        &mut rng_pos,
    );
    let neg_assigned = assign_groups(
        class_groups(&neg, options.frame_separation),
        neg_targets,
        &mut rng_neg,
    );

    let mut entries = Vec::with_capacity(total);
    for split in Split::ALL {
        let i = split.index();
        let mut split_entries: Vec<ManifestEntry> = Vec::new();
        for (refs, label) in [
            (&pos_assigned[i], Label::Positive),
            (&neg_assigned[i], Label::Negative),
        ] {
            for r in refs {
                split_entries.push(ManifestEntry {
                    path: r.path.clone(),
                    label,
                    split,
                    source_frame_id: r.source_frame_id.clone(),
                    grid_row: r.grid_row,
                    grid_col: r.grid_col,
                    transform_tag: r.transform_tag.clone(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 + 1));
        split_entries.shuffle(&mut rng);
        entries.extend(split_entries);
    }

    Ok(DatasetManifest { entries, seed })
}

/// Severity of a validation finding. A report passes when it contains
/// no `Error` findings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FindingKind {
    EmptySplit(Split),
    Imbalance(Split),
    CrossSplitDuplicate(String),
    DuplicateReference(String),
    MissingFile(String),
    FrameLeakage(String),
}

#[derive(Debug, Clone)]
pub struct Finding {
    pub severity: Severity,
    pub kind: FindingKind,
    pub message: String,
}

/// Outcome of [`validate_manifest`]: summary numbers plus findings.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub split_counts: [usize; 3],
    pub balance: [Option<f64>; 3],
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.severity != Severity::Error)
    }
}

/// Options for [`validate_manifest`].
#[derive(Debug, Clone, Default)]
pub struct ValidateOptions {
    /// Base directory against which sample paths are checked for
    /// existence. `None` skips file checks.
    pub check_files: Option<PathBuf>,
}

/// Check every manifest invariant and report findings.
///
/// Failures are findings, not errors: an unusable manifest still yields
/// a report describing exactly what is wrong.
pub fn validate_manifest(manifest: &DatasetManifest, options: &ValidateOptions) -> ValidationReport {
    let mut findings = Vec::new();
    let split_counts = manifest.split_counts();
    let balance = manifest.balance();

    for split in Split::ALL {
        let i = split.index();
        if split_counts[i] == 0 {
            findings.push(Finding {
                severity: Severity::Error,
                kind: FindingKind::EmptySplit(split),
                message: format!("empty split: {split}"),
            });
            continue;
        }
        let pos = manifest
            .split_entries(split)
            .filter(|e| e.label == Label::Positive)
            .count();
        let neg = split_counts[i] - pos;
        if pos.abs_diff(neg) > 1 {
            findings.push(Finding {
                severity: Severity::Error,
                kind: FindingKind::Imbalance(split),
                message: format!(
                    "split {split} is unbalanced: {pos} positive vs {neg} negative"
                ),
            });
        }
    }

    let mut seen: HashMap<&str, (Split, usize)> = HashMap::new();
    let mut reported: HashSet<&str> = HashSet::new();
    for e in &manifest.entries {
        match seen.get(e.path.as_str()) {
            None => {
                seen.insert(e.path.as_str(), (e.split, 1));
            }
            Some(&(first_split, _)) => {
                if reported.insert(e.path.as_str()) {
                    if first_split != e.split {
                        findings.push(Finding {
                            severity: Severity::Error,
                            kind: FindingKind::CrossSplitDuplicate(e.path.clone()),
                            message: format!(
                                "sample {} appears in both {first_split} and {}",
                                e.path, e.split
                            ),
                        });
                    } else {
                        findings.push(Finding {
                            severity: Severity::Error,
                            kind: FindingKind::DuplicateReference(e.path.clone()),
                            message: format!("sample {} listed more than once", e.path),
                        });
                    }
                }
            }
        }
    }

    let mut frame_splits: HashMap<&str, Split> = HashMap::new();
    let mut leaked: HashSet<&str> = HashSet::new();
    for e in &manifest.entries {
        if e.source_frame_id.is_empty() {
            continue;
        }
        match frame_splits.get(e.source_frame_id.as_str()) {
            None => {
                frame_splits.insert(e.source_frame_id.as_str(), e.split);
            }
            Some(&s) if s != e.split => {
                if leaked.insert(e.source_frame_id.as_str()) {
                    findings.push(Finding {
                        severity: Severity::Warning,
                        kind: FindingKind::FrameLeakage(e.source_frame_id.clone()),
                        message: format!(
                            "frame {} has patches in multiple splits",
                            e.source_frame_id
                        ),
                    });
                }
            }
            _ => {}
        }
    }

    if let Some(base) = &options.check_files {
        for e in &manifest.entries {
            if !base.join(&e.path).is_file() {
                findings.push(Finding {
                    severity: Severity::Error,
                    kind: FindingKind::MissingFile(e.path.clone()),
                    message: format!("missing sample file: {}", e.path),
                });
            }
        }
    }

    ValidationReport {
        split_counts,
        balance,
        findings,
    }
}

/// Streaming loader over one split of a manifest. Yields samples in
/// manifest order, decoding each patch file lazily.
pub struct SplitLoader<'a> {
    entries: Vec<&'a ManifestEntry>,
    base: PathBuf,
    next: usize,
}

impl<'a> SplitLoader<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<'a> Iterator for SplitLoader<'a> {
    type Item = Result<PatchSample, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.get(self.next)?;
        self.next += 1;
        let path = self.base.join(&entry.path);
        let sample = grid_decode(&path).map(|pixels| PatchSample {
            pixels,
            label: Some(entry.label),
            source_frame_id: entry.source_frame_id.clone(),
            grid_row: entry.grid_row,
            grid_col: entry.grid_col,
            transform_tag: entry.transform_tag.clone(),
        });
        Some(sample)
    }
}

fn grid_decode(path: &Path) -> Result<image::RgbImage, DatasetError> {
    let dynamic = image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    // Patches are stored as 8-bit RGB PNG; tolerate grayscale re-encodes
    // by expanding, but reject alpha.
    match dynamic {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        image::DynamicImage::ImageLuma8(l) => Ok(image::DynamicImage::ImageLuma8(l).to_rgb8()),
        other => Err(DatasetError::FrameFormat {
            found: other.color(),
        }),
    }
}

/// Iterate one split of a manifest, labels attached.
pub fn load_split<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    base_dir: &Path,
) -> SplitLoader<'a> {
    SplitLoader {
        entries: manifest.split_entries(split).collect(),
        base: base_dir.to_path_buf(),
        next: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(class: &str, n: usize) -> Vec<SampleRef> {
        (0..n)
            .map(|i| SampleRef::from_path(format!("{class}_{i:05}.png")))
            .collect()
    }

    #[test]
    fn default_fractions_produce_published_split_sizes() {
        let m = build_manifest(
            &refs("pos", 7000),
            &refs("neg", 7000),
            (0.8, 0.1, 0.1),
            42,
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(m.split_counts(), [11200, 1400, 1400]);
        for b in m.balance() {
            assert_eq!(b, Some(0.5));
        }
    }

    #[test]
    fn smallest_balanced_case() {
        let m = build_manifest(
            &refs("pos", 2),
            &refs("neg", 2),
            (0.5, 0.25, 0.25),
            1,
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(m.split_counts(), [2, 1, 1]);
        // Train is divisible, so it must be balanced exactly.
        assert_eq!(m.balance()[0], Some(0.5));
    }

    #[test]
    fn permuted_input_yields_identical_manifest() {
        let pos = refs("pos", 40);
        let neg = refs("neg", 40);
        let mut pos_rev = pos.clone();
        pos_rev.reverse();
        let mut neg_rev = neg.clone();
        neg_rev.reverse();
        let a = build_manifest(&pos, &neg, (0.8, 0.1, 0.1), 9, &BuildOptions::default()).unwrap();
        let b =
            build_manifest(&pos_rev, &neg_rev, (0.8, 0.1, 0.1), 9, &BuildOptions::default())
                .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_error_states_shortfall() {
        let err = build_manifest(
            &refs("pos", 3),
            &refs("neg", 10),
            (0.8, 0.1, 0.1),
            0,
            &BuildOptions {
                total_size: Some(10),
                ..BuildOptions::default()
            },
        )
        .unwrap_err();
        match err {
            DatasetError::Capacity {
                class: Label::Positive,
                needed: 5,
                available: 3,
            } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let err = build_manifest(
            &refs("pos", 4),
            &refs("neg", 4),
            (0.8, 0.3, 0.1),
            0,
            &BuildOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::BadFractions(..)));
    }

    #[test]
    fn frame_separation_keeps_frames_whole() {
        // 20 frames x 5 patches per class.
        let mk = |class: &str| -> Vec<SampleRef> {
            (0..100)
                .map(|i| SampleRef {
                    path: format!("{class}_{i:04}.png"),
                    source_frame_id: format!("{class}_frame_{}", i / 5),
                    grid_row: 0,
                    grid_col: (i % 5) as u32,
                    transform_tag: super::super::IDENTITY_TAG.to_string(),
                })
                .collect()
        };
        let m = build_manifest(
            &mk("pos"),
            &mk("neg"),
            (0.6, 0.2, 0.2),
            5,
            &BuildOptions::default(),
        )
        .unwrap();
        let mut frame_split: HashMap<String, Split> = HashMap::new();
        for e in &m.entries {
            let prev = frame_split.insert(e.source_frame_id.clone(), e.split);
            if let Some(s) = prev {
                assert_eq!(s, e.split, "frame {} split across splits", e.source_frame_id);
            }
        }
    }

    #[test]
    fn empty_manifest_fails_with_three_empty_split_findings() {
        let report = validate_manifest(
            &DatasetManifest {
                entries: vec![],
                seed: 0,
            },
            &ValidateOptions::default(),
        );
        assert!(!report.passed());
        let empties = report
            .findings
            .iter()
            .filter(|f| matches!(f.kind, FindingKind::EmptySplit(_)))
            .count();
        assert_eq!(empties, 3);
    }

    #[test]
    fn cross_split_duplicate_is_reported_by_reference() {
        let mut m = build_manifest(
            &refs("pos", 10),
            &refs("neg", 10),
            (0.8, 0.1, 0.1),
            3,
            &BuildOptions::default(),
        )
        .unwrap();
        // Duplicate one train entry into test.
        let mut dup = m
            .entries
            .iter()
            .find(|e| e.split == Split::Train)
            .unwrap()
            .clone();
        let dup_path = dup.path.clone();
        dup.split = Split::Test;
        m.entries.push(dup);
        let report = validate_manifest(&m, &ValidateOptions::default());
        assert!(!report.passed());
        assert!(report.findings.iter().any(|f| matches!(
            &f.kind,
            FindingKind::CrossSplitDuplicate(p) if *p == dup_path
        )));
    }

    #[test]
    fn manifest_roundtrip() {
        let m = build_manifest(
            &refs("pos", 12),
            &refs("neg", 12),
            (0.5, 0.25, 0.25),
            77,
            &BuildOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(m, back);
    }
}
