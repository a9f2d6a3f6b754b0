//! Task evaluation: IoU-scored referring-expression accuracy over parsed
//! generations, normalized exact-match QA scoring, a random-box chance
//! floor, and line-oriented reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::codec::parse_spatial;
use crate::rng::rng_for;
use crate::scene::BBox;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Intersection over union of two axis-aligned boxes; disjoint or degenerate
/// boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1).max(0.0) * (a.y2 - a.y1).max(0.0);
    let area_b = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Case-fold, trim, collapse internal whitespace, strip terminal
/// punctuation, then compare. No numeral or synonym normalization.
pub fn exact_match(prediction: &str, answer: &str) -> bool {
    normalize(prediction) == normalize(answer)
}

fn normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped = lowered.trim().trim_end_matches(['.', '!', '?', ',', ';', ':']);
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scene_id: String,
    pub prediction: String,
    pub target: String,
    pub score: f64,
}

/// Task accuracy with per-example records; the accuracy is always the mean
/// of the record scores, so reports are recomputable from their own records.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub n_examples: usize,
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

impl EvalReport {
    pub fn from_records(
        task: &str,
        records: Vec<EvalRecord>,
        config_fingerprint: &str,
        checkpoint_fingerprint: &str,
    ) -> EvalReport {
        let n = records.len();
        let accuracy = if n == 0 { 0.0 } else { records.iter().map(|r| r.score).sum::<f64>() / n as f64 };
        EvalReport {
            task: task.to_string(),
            n_examples: n,
            accuracy,
            records,
            config_fingerprint: config_fingerprint.to_string(),
            checkpoint_fingerprint: checkpoint_fingerprint.to_string(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "task\t{}", self.task).unwrap();
        writeln!(s, "examples\t{}", self.n_examples).unwrap();
        writeln!(s, "accuracy\t{}", self.accuracy).unwrap();
        writeln!(s, "config\t{}", self.config_fingerprint).unwrap();
        writeln!(s, "checkpoint\t{}", self.checkpoint_fingerprint).unwrap();
        s
    }

    /// One JSON record per line, same self-describing convention as the
    /// scene files.
    pub fn write(&self, summary_path: &Path, records_path: &Path) -> Result<(), EvalError> {
        fs::write(summary_path, self.summary())
            .map_err(|source| EvalError::Io { path: summary_path.display().to_string(), source })?;
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "{{\"scene_id\":{},\"prediction\":{},\"target\":{},\"score\":{}}}",
                serde_json::to_string(&r.scene_id).unwrap(),
                serde_json::to_string(&r.prediction).unwrap(),
                serde_json::to_string(&r.target).unwrap(),
                r.score
            )
            .unwrap();
        }
        fs::write(records_path, out)
            .map_err(|source| EvalError::Io { path: records_path.display().to_string(), source })
    }
}

/// Scores generations against target boxes: the first parsed spatial block
/// counts, a missing or unparseable block scores 0, and a box is correct
/// only with IoU strictly above 0.5. Tag correctness is not required.
pub fn rec_accuracy(
    generations: &[(String, String, BBox)],
    config_fingerprint: &str,
    checkpoint_fingerprint: &str,
) -> EvalReport {
    let records = generations
        .iter()
        .map(|(scene_id, generation, target)| {
            let (objs, _diags) = parse_spatial(generation);
            let score = match objs.first() {
                Some(obj) if iou(&obj.bbox, target) > 0.5 => 1.0,
                _ => 0.0,
            };
            EvalRecord {
                scene_id: scene_id.clone(),
                prediction: generation.clone(),
                target: format!(
                    "({:.2}, {:.2}),({:.2}, {:.2})",
                    target.x1, target.y1, target.x2, target.y2
                ),
                score,
            }
        })
        .collect();
    EvalReport::from_records("rec", records, config_fingerprint, checkpoint_fingerprint)
}

/// Exact-match accuracy for answer-style tasks.
pub fn match_accuracy(
    task: &str,
    items: &[(String, String, String)],
    config_fingerprint: &str,
    checkpoint_fingerprint: &str,
) -> EvalReport {
    let records = items
        .iter()
        .map(|(scene_id, prediction, answer)| EvalRecord {
            scene_id: scene_id.clone(),
            prediction: prediction.clone(),
            target: answer.clone(),
            score: if exact_match(prediction, answer) { 1.0 } else { 0.0 },
        })
        .collect();
    EvalReport::from_records(task, records, config_fingerprint, checkpoint_fingerprint)
}

/// Chance floor: accuracy of uniformly random valid boxes against the target
/// set, cycling through targets. Deterministic in the seed.
pub fn random_box_baseline(targets: &[BBox], trials: usize, seed: u64) -> f64 {
    assert!(trials >= 1000, "baseline needs at least 1000 trials, got {trials}");
    assert!(!targets.is_empty(), "baseline needs at least one target");
    let mut rng = rng_for(&[seed, 0xba5e]);
    let mut hits = 0usize;
    for trial in 0..trials {
        let target = &targets[trial % targets.len()];
        let (a, b): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (c, d): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let sample = BBox { x1: a.min(b), y1: c.min(d), x2: a.max(b), y2: c.max(d) };
        if iou(&sample, target) > 0.5 {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// Short stable fingerprint of arbitrary bytes for report headers.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
