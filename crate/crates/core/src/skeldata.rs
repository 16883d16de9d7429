//! Skeleton datasets: JSONL ingestion, synthetic generation, normalization
//! and evaluation splits.
//!
//! One sample per line:
//!
//! ```text
//! {"label": "wave", "subject": 3, "frames": [[[x, y, z], ...J joints], ...V frames]}
//! ```
//!
//! A frame may also be given as a flat list of `3 * J` numbers. Frame counts
//! are trimmed down to the largest multiple of 4; joint 0 is the root.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use diffcore::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{contract, CoreError, Result};

/// A `V x (3J)` trajectory of joint coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSignal {
    frames: Tensor,
    joints: usize,
    pub class_label: Option<usize>,
}

impl ActionSignal {
    pub fn new(frames: Tensor, joints: usize, class_label: Option<usize>) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != 3 * joints || joints == 0 {
            return Err(contract(
                "action_signal",
                format!("frames {:?} do not hold {joints} joints", frames.shape()),
            ));
        }
        if frames.rows() % 4 != 0 {
            return Err(contract(
                "action_signal",
                format!("frame count {} is not a multiple of 4", frames.rows()),
            ));
        }
        if !frames.all_finite() {
            return Err(contract("action_signal", "coordinates must be finite"));
        }
        Ok(Self {
            frames,
            joints,
            class_label,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkeletonDataset {
    pub samples: Vec<ActionSignal>,
    pub class_names: Vec<String>,
    pub subject_ids: Vec<u32>,
}

impl SkeletonDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.class_label.expect("labelled sample"))
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i]).collect(),
        }
    }

    /// Applies [`normalize`] to every sample.
    pub fn normalized(&self) -> Result<Self> {
        let samples = self.samples.iter().map(normalize).collect::<Result<_>>()?;
        Ok(Self {
            samples,
            class_names: self.class_names.clone(),
            subject_ids: self.subject_ids.clone(),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (s, subject) in self.samples.iter().zip(&self.subject_ids) {
            let frames: Vec<Vec<[f64; 3]>> = (0..s.len())
                .map(|v| {
                    s.frames
                        .row(v)
                        .chunks(3)
                        .map(|c| [c[0], c[1], c[2]])
                        .collect()
                })
                .collect();
            let label = s
                .class_label
                .map(|l| self.class_names[l].clone())
                .unwrap_or_default();
            let rec = serde_json::json!({ "label": label, "subject": subject, "frames": frames });
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn parse_frame(v: &Value) -> std::result::Result<Vec<f64>, String> {
    let arr = v.as_array().ok_or("frame is not an array")?;
    let mut out = Vec::new();
    for item in arr {
        match item {
            Value::Array(xyz) => {
                if xyz.len() != 3 {
                    return Err(format!("joint has {} coordinates, expected 3", xyz.len()));
                }
                for c in xyz {
                    out.push(c.as_f64().ok_or("non-numeric coordinate")?);
                }
            }
            Value::Number(n) => out.push(n.as_f64().ok_or("non-numeric coordinate")?),
            _ => return Err("non-numeric coordinate".into()),
        }
    }
    if out.is_empty() || out.len() % 3 != 0 {
        return Err(format!(
            "frame holds {} values, not a multiple of 3",
            out.len()
        ));
    }
    Ok(out)
}

struct RawSample {
    label: String,
    subject: u32,
    joints: usize,
    frames: Vec<Vec<f64>>,
}

fn parse_line(line: &str) -> std::result::Result<RawSample, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let label = v
        .get("label")
        .and_then(Value::as_str)
        .ok_or("missing string field 'label'")?;
    let subject = v
        .get("subject")
        .and_then(Value::as_u64)
        .ok_or("missing integer field 'subject'")?;
    let frames = v
        .get("frames")
        .and_then(Value::as_array)
        .ok_or("missing array field 'frames'")?;
    let frames = frames
        .iter()
        .map(parse_frame)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let width = frames.first().map(Vec::len).ok_or("no frames")?;
    if frames.iter().any(|f| f.len() != width) {
        return Err("frames have differing joint counts".into());
    }
    if frames.iter().flatten().any(|c| !c.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    let keep = frames.len() / 4 * 4;
    if keep == 0 {
        return Err(format!(
            "{} frames leave none after trimming to a multiple of 4",
            frames.len()
        ));
    }
    let subject = u32::try_from(subject).map_err(|_| "subject id out of range")?;
    Ok(RawSample {
        label: label.to_string(),
        subject,
        joints: width / 3,
        frames: frames.into_iter().take(keep).collect(),
    })
}

/// Reads a JSONL skeleton file. Every malformed line is reported, with its
/// 1-based line number, in a single ingestion error.
pub fn load_skeletons(path: &Path) -> Result<SkeletonDataset> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut problems = Vec::new();
    let mut raws = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(r) => raws.push(r),
            Err(msg) => problems.push((i + 1, msg)),
        }
    }
    if let Some(first) = raws.first() {
        let j = first.joints;
        if raws.iter().any(|r| r.joints != j) {
            problems.push((0, "samples have differing joint counts".into()));
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Ingest(problems));
    }
    let mut ds = SkeletonDataset::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in raws {
        let label = *index.entry(r.label.clone()).or_insert_with(|| {
            ds.class_names.push(r.label.clone());
            ds.class_names.len() - 1
        });
        let v = r.frames.len();
        let data = r.frames.into_iter().flatten().collect();
        let t = Tensor::new(vec![v, 3 * r.joints], data)?;
        ds.samples
            .push(ActionSignal::new(t, r.joints, Some(label))?);
        ds.subject_ids.push(r.subject);
    }
    Ok(ds)
}

/// Translates so the root joint of frame 0 sits at the origin, then scales
/// so the mean joint distance from the origin is 1.
pub fn normalize(signal: &ActionSignal) -> Result<ActionSignal> {
    let f = &signal.frames;
    let root = [f.data()[0], f.data()[1], f.data()[2]];
    let mut out = f.clone();
    for joint in out.data_mut().chunks_mut(3) {
        for (c, r) in joint.iter_mut().zip(&root) {
            *c -= r;
        }
    }
    let n = out.len() / 3;
    let mean = out
        .data()
        .chunks(3)
        .map(|j| (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt())
        .sum::<f64>()
        / n as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(contract("normalize", "signal is degenerate (zero extent)"));
    }
    out.data_mut().iter_mut().for_each(|c| *c /= mean);
    ActionSignal::new(out, signal.joints, signal.class_label)
}

/// Parameters of the synthetic sinusoid generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub joints: usize,
    pub frames: usize,
    pub per_class: usize,
    pub noise_scale: f64,
    pub subjects: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            joints: 8,
            frames: 64,
            per_class: 100,
            noise_scale: 0.05,
            subjects: 10,
            seed: 7,
        }
    }
}

/// Names handed out to synthetic classes, in order.
pub const ACTION_NAMES: &[&str] = &[
    "wave hand",
    "kick",
    "jump up",
    "sit down",
    "stand up",
    "clap",
    "throw",
    "bow",
    "drink water",
    "wipe face",
    "punch",
    "walk forward",
];

/// Per-class motion parameters: for each joint and axis an amplitude,
/// an integer frequency (cycles per clip) and a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMotion {
    pub amplitude: Vec<f64>,
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
}

fn rest_pose(joints: usize) -> Vec<f64> {
    // A vertical chain with alternating lateral offsets.
    (0..joints)
        .flat_map(|j| {
            let side = if j % 2 == 0 { 1.0 } else { -1.0 };
            [0.15 * side * (j as f64).min(1.0), 0.2 * j as f64, 0.0]
        })
        .collect()
}

fn class_motions(spec: &SynthSpec) -> Vec<ClassMotion> {
    // Class structure depends only on the class count and joint layout, so
    // different seeds share it and differ only in noise.
    let mut rng = SeededRng::new(0x5EED_CA55);
    (0..spec.classes)
        .map(|_| {
            let n = 3 * spec.joints;
            ClassMotion {
                amplitude: (0..n).map(|_| 0.05 + 0.25 * rng.uniform()).collect(),
                frequency: (0..n).map(|_| (1 + rng.below(3)) as f64).collect(),
                phase: (0..n)
                    .map(|_| std::f64::consts::TAU * rng.uniform())
                    .collect(),
            }
        })
        .collect()
}

/// Generates `classes * per_class` samples of class-specific sinusoids with
/// additive Gaussian noise. Samples are class-major; the subject id cycles
/// through `0..subjects`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SkeletonDataset> {
    if spec.frames == 0 || spec.frames % 4 != 0 {
        return Err(contract(
            "synth_generate",
            format!(
                "frame count {} must be a positive multiple of 4",
                spec.frames
            ),
        ));
    }
    if spec.classes == 0 || spec.joints == 0 || spec.subjects == 0 {
        return Err(contract(
            "synth_generate",
            "classes, joints and subjects must be positive",
        ));
    }
    let names = class_names(spec.classes);
    let motions = class_motions(spec);
    let rest = rest_pose(spec.joints);
    let mut rng = SeededRng::new(spec.seed);
    let c = 3 * spec.joints;
    let mut ds = SkeletonDataset {
        class_names: names,
        ..Default::default()
    };
    for (k, m) in motions.iter().enumerate() {
        for i in 0..spec.per_class {
            let mut data = Vec::with_capacity(spec.frames * c);
            for v in 0..spec.frames {
                let t = v as f64 / spec.frames as f64;
                for ch in 0..c {
                    let clean = rest[ch]
                        + m.amplitude[ch]
                            * (std::f64::consts::TAU * m.frequency[ch] * t + m.phase[ch]).sin();
                    data.push(clean + spec.noise_scale * rng.normal());
                }
            }
            let frames = Tensor::new(vec![spec.frames, c], data)?;
            ds.samples
                .push(ActionSignal::new(frames, spec.joints, Some(k))?);
            ds.subject_ids.push(i as u32 % spec.subjects);
        }
    }
    Ok(ds)
}

/// Class names for `k` synthetic classes; beyond the fixed list names are
/// numbered.
pub fn class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| match ACTION_NAMES.get(i) {
            Some(n) => n.to_string(),
            None => format!("action {i}"),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SubjectSplit,
    RandomSplit,
    UnseenClass,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SubjectSplit => "subject-split",
            Protocol::RandomSplit => "random-split",
            Protocol::UnseenClass => "unseen-class",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject-split" => Ok(Protocol::SubjectSplit),
            "random-split" => Ok(Protocol::RandomSplit),
            "unseen-class" => Ok(Protocol::UnseenClass),
            other => Err(CoreError::Config(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: SkeletonDataset,
    pub test: SkeletonDataset,
    /// Held-out class indices under the unseen-class protocol.
    pub unseen_classes: Vec<usize>,
    /// Samples belonging to neither side.
    pub dropped: usize,
}

pub const UNSEEN_CLASS_COUNT: usize = 3;
const TEST_FRACTION: f64 = 0.2;

/// Splits a dataset. Subject and random splits partition it exactly. The
/// unseen-class protocol first makes a random split, then keeps only seen
/// classes in training and only the held-out classes in test; the rest is
/// counted as dropped.
pub fn split(ds: &SkeletonDataset, protocol: Protocol, seed: u64) -> Result<Split> {
    let mut rng = SeededRng::new(seed);
    let n = ds.len();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = match protocol {
        Protocol::SubjectSplit => {
            let subjects: Vec<u32> = ds
                .subject_ids
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if subjects.len() < 2 {
                return Err(contract(
                    "split",
                    "subject split needs at least two subjects",
                ));
            }
            let mut order = subjects.clone();
            rng.shuffle(&mut order);
            let k = ((subjects.len() as f64 * TEST_FRACTION).round() as usize)
                .clamp(1, subjects.len() - 1);
            let held: BTreeSet<u32> = order[..k].iter().copied().collect();
            (0..n).partition(|&i| !held.contains(&ds.subject_ids[i]))
        }
        Protocol::RandomSplit | Protocol::UnseenClass => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let k = (n as f64 * TEST_FRACTION).round() as usize;
            let mut test: Vec<usize> = order[..k].to_vec();
            let mut train: Vec<usize> = order[k..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            (train, test)
        }
    };
    if protocol != Protocol::UnseenClass {
        return Ok(Split {
            train: ds.subset(&train_idx),
            test: ds.subset(&test_idx),
            unseen_classes: Vec::new(),
            dropped: 0,
        });
    }
    let k = ds.class_names.len();
    if k < UNSEEN_CLASS_COUNT + 1 {
        return Err(contract(
            "split",
            format!("unseen-class protocol needs at least 4 classes, got {k}"),
        ));
    }
    let mut classes: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut classes);
    let mut unseen = classes[..UNSEEN_CLASS_COUNT].to_vec();
    unseen.sort_unstable();
    let is_unseen = |i: usize| unseen.contains(&ds.samples[i].class_label.unwrap_or(usize::MAX));
    let train: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| !is_unseen(i))
        .collect();
    let test: Vec<usize> = test_idx.iter().copied().filter(|&i| is_unseen(i)).collect();
    let dropped = n - train.len() - test.len();
    Ok(Split {
        train: ds.subset(&train),
        test: ds.subset(&test),
        unseen_classes: unseen,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            classes: 5,
            joints: 4,
            frames: 16,
            per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SynthSpec {
            frames: 16,
            ..Default::default()
        };
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, synth_generate(&spec).unwrap());
    }

    #[test]
    fn noiseless_samples_of_a_class_coincide() {
        let spec = SynthSpec {
            noise_scale: 0.0,
            ..small_spec()
        };
        let ds = synth_generate(&spec).unwrap();
        assert_eq!(ds.samples[0].frames(), ds.samples[1].frames());
        assert_ne!(ds.samples[0].frames(), ds.samples[10].frames());
    }

    #[test]
    fn seeds_change_noise_not_structure() {
        let a = synth_generate(&small_spec()).unwrap();
        let b = synth_generate(&SynthSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.samples[0].frames(), b.samples[0].frames());
        let clean = |s| {
            synth_generate(&SynthSpec {
                noise_scale: 0.0,
                seed: s,
                ..small_spec()
            })
            .unwrap()
        };
        assert_eq!(clean(1), clean(2));
    }

    #[test]
    fn rejects_bad_frame_count() {
        assert!(synth_generate(&SynthSpec {
            frames: 10,
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn normalize_properties() {
        let ds = synth_generate(&small_spec()).unwrap();
        let s = &ds.samples[3];
        let n = normalize(s).unwrap();
        let mean = n
            .frames()
            .data()
            .chunks(3)
            .map(|j| (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt())
            .sum::<f64>()
            / (n.len() * n.joints()) as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        let again = normalize(&n).unwrap();
        for (a, b) in again.frames().data().iter().zip(n.frames().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted =
            ActionSignal::new(s.frames().map(|v| v + 3.5), s.joints(), s.class_label).unwrap();
        let ns = normalize(&shifted).unwrap();
        for (a, b) in ns.frames().data().iter().zip(n.frames().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_signal() {
        let s = ActionSignal::new(Tensor::zeros(&[4, 6]), 2, None).unwrap();
        assert!(normalize(&s).is_err());
    }

    #[test]
    fn subject_split_is_a_partition() {
        let ds = synth_generate(&small_spec()).unwrap();
        let sp = split(&ds, Protocol::SubjectSplit, 1).unwrap();
        assert_eq!(sp.train.len() + sp.test.len(), ds.len());
        let tr: BTreeSet<_> = sp.train.subject_ids.iter().collect();
        assert!(sp.test.subject_ids.iter().all(|s| !tr.contains(s)));
    }

    #[test]
    fn unseen_split_is_disjoint_in_labels() {
        let ds = synth_generate(&small_spec()).unwrap();
        let sp = split(&ds, Protocol::UnseenClass, 4).unwrap();
        assert_eq!(sp.unseen_classes.len(), 3);
        let tr: BTreeSet<_> = sp.train.labels().into_iter().collect();
        assert!(sp
            .test
            .labels()
            .iter()
            .all(|l| !tr.contains(l) && sp.unseen_classes.contains(l)));
        assert_eq!(sp.train.len() + sp.test.len() + sp.dropped, ds.len());
        let small = synth_generate(&SynthSpec {
            classes: 3,
            ..small_spec()
        })
        .unwrap();
        assert!(split(&small, Protocol::UnseenClass, 0).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [
            Protocol::SubjectSplit,
            Protocol::RandomSplit,
            Protocol::UnseenClass,
        ] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
    }
}
