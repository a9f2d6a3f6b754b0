//! Deterministic stand-in for the frozen image encoder and visual refiner.
//!
//! Scenes carry ground-truth tagged boxes, a template caption and QA pairs.
//! A simulated detector jitters and scores the boxes, a threshold filter
//! keeps the confident ones, and the feature renderer turns the result into
//! the global/local feature sequences the model consumes.

use rand::Rng;
use thiserror::Error;

use crate::rng::{hash_str, mix, normal, rng_for, round6, weighted_choice};

mod features;
mod io;

pub use features::{blank_features, AblationFlags, Encoder, FeatureBundle, Stage};
pub use io::{read_scenes, scene_from_line, scene_to_line, write_scenes, SceneIoError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("tag vocabulary is empty")]
    EmptyTagVocabulary,
    #[error("invalid object count range {0}..={1}")]
    BadObjectRange(usize, usize),
    #[error("max_objects {0} exceeds the count-word vocabulary ({1})")]
    TooManyObjects(usize, usize),
}

/// Axis-aligned box, coordinates normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualObject {
    pub tag: String,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub answer_box: Option<BBox>,
}

/// Ground-truth synthetic image surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<VisualObject>,
    pub distractors: Vec<VisualObject>,
    pub caption: String,
    pub qa: Vec<QaPair>,
}

pub const COUNT_WORDS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub tags: Vec<String>,
    pub tag_weights: Vec<f64>,
    pub colors: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub distractor_rate: f64,
    pub jitter_sigma: f64,
    pub duplicate_rate: f64,
    /// Detections survive only with confidence strictly above this.
    pub detect_threshold: f64,
    /// Global feature rows (paper-scale analogue 257).
    pub s_g: usize,
    /// Global feature width (paper-scale analogue 1024).
    pub d_enc: usize,
    /// Local feature width after projection (paper-scale analogue 768).
    pub d_q: usize,
    /// Seed for the frozen encoder weights; independent of per-scene seeds.
    pub encoder_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            tags: ["cat", "dog", "car", "tree", "man", "woman", "bird", "boat", "house", "ball", "chair", "horse"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            tag_weights: vec![1.5, 1.2, 1.0, 1.0, 1.2, 1.0, 0.8, 0.7, 0.9, 1.1, 0.8, 0.8],
            colors: ["red", "blue", "green", "yellow", "black", "white", "gray", "brown"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_objects: 2,
            max_objects: 4,
            distractor_rate: 0.3,
            jitter_sigma: 0.02,
            duplicate_rate: 0.15,
            detect_threshold: 0.25,
            s_g: 16,
            d_enc: 48,
            d_q: 32,
            encoder_seed: 7_777,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.tags.is_empty() {
            return Err(SceneError::EmptyTagVocabulary);
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(SceneError::BadObjectRange(self.min_objects, self.max_objects));
        }
        if self.max_objects > COUNT_WORDS.len() {
            return Err(SceneError::TooManyObjects(self.max_objects, COUNT_WORDS.len()));
        }
        Ok(())
    }

    /// Color assigned to a tag; fixed by config so QA answers stay derivable
    /// from ground truth.
    pub fn color_of(&self, tag: &str) -> &str {
        let idx = self.tags.iter().position(|t| t == tag).unwrap_or(0);
        &self.colors[idx % self.colors.len()]
    }
}

/// Grid cell of a box center, rendered as "top left", "middle center", ...
pub fn location_phrase(b: &BBox) -> String {
    let (cx, cy) = b.center();
    let col = if cx < 1.0 / 3.0 {
        "left"
    } else if cx < 2.0 / 3.0 {
        "center"
    } else {
        "right"
    };
    let row = if cy < 1.0 / 3.0 {
        "top"
    } else if cy < 2.0 / 3.0 {
        "middle"
    } else {
        "bottom"
    };
    format!("{row} {col}")
}

fn sample_box(rng: &mut rand_chacha::ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.15..0.45);
    let h = rng.gen_range(0.15..0.45);
    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
    BBox {
        x1: round6(cx - w / 2.0),
        y1: round6(cy - h / 2.0),
        x2: round6(cx + w / 2.0),
        y2: round6(cy + h / 2.0),
    }
}

/// Builds the deterministic scene for a seed: objects, caption, QA.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = rng_for(&[seed, 0x5ce0]);
    let n = rng.gen_range(config.min_objects..=config.max_objects);

    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let tag = config.tags[weighted_choice(&mut rng, &config.tag_weights)].clone();
        objects.push(VisualObject { tag, bbox: sample_box(&mut rng), confidence: 1.0 });
    }

    let mut distractors = Vec::new();
    for _ in 0..2 {
        if rng.gen_bool(config.distractor_rate.clamp(0.0, 1.0) / 2.0) {
            let tag = config.tags[weighted_choice(&mut rng, &config.tag_weights)].clone();
            let confidence = round6(rng.gen_range(0.02..config.detect_threshold * 0.8));
            distractors.push(VisualObject { tag, bbox: sample_box(&mut rng), confidence });
        }
    }

    let caption = build_caption(&objects, config);
    let qa = build_qa(&objects, config, &mut rng);

    Ok(Scene { id: format!("scene-{seed:08x}"), objects, distractors, caption, qa })
}

fn build_caption(objects: &[VisualObject], config: &SceneConfig) -> String {
    // Group by tag in first-appearance order.
    let mut groups: Vec<(&str, usize)> = Vec::new();
    for o in objects {
        match groups.iter_mut().find(|(t, _)| *t == o.tag) {
            Some((_, c)) => *c += 1,
            None => groups.push((&o.tag, 1)),
        }
    }
    let phrases: Vec<String> = groups
        .iter()
        .map(|(tag, count)| format!("{} {} {}", COUNT_WORDS[count - 1], config.color_of(tag), tag))
        .collect();
    let mut caption = String::from("a photo of ");
    match phrases.len() {
        1 => caption.push_str(&phrases[0]),
        2 => caption.push_str(&format!("{} and {}", phrases[0], phrases[1])),
        _ => {
            let head = phrases[..phrases.len() - 1].join(", ");
            caption.push_str(&format!("{} and {}", head, phrases[phrases.len() - 1]));
        }
    }
    if objects.len() >= 2 && objects[0].tag != objects[1].tag {
        let (ax, ay) = objects[0].bbox.center();
        let (bx, by) = objects[1].bbox.center();
        let rel = if (ax - bx).abs() >= (ay - by).abs() {
            if ax < bx {
                "left of"
            } else {
                "right of"
            }
        } else if ay < by {
            "above"
        } else {
            "below"
        };
        caption.push_str(&format!(", the {} is {} the {}", objects[0].tag, rel, objects[1].tag));
    }
    caption
}

fn build_qa(objects: &[VisualObject], config: &SceneConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<QaPair> {
    let mut qa = Vec::new();
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| objects[rng.gen_range(0..objects.len())].tag.clone();

    let count_tag = pick(rng);
    let count = objects.iter().filter(|o| o.tag == count_tag).count();
    qa.push(QaPair {
        question: format!("how many {count_tag} are in the image?"),
        answer: COUNT_WORDS[count - 1].to_string(),
        answer_box: None,
    });

    let color_tag = pick(rng);
    qa.push(QaPair {
        question: format!("what color is the {color_tag}?"),
        answer: config.color_of(&color_tag).to_string(),
        answer_box: None,
    });

    let loc_tag = pick(rng);
    let first = objects.iter().find(|o| o.tag == loc_tag).unwrap();
    qa.push(QaPair {
        question: format!("where is the {loc_tag} in the image?"),
        answer: location_phrase(&first.bbox),
        answer_box: Some(first.bbox),
    });

    // Presence question, absent tag half the time when one exists.
    let absent: Vec<&String> = config.tags.iter().filter(|t| objects.iter().all(|o| &o.tag != *t)).collect();
    if !absent.is_empty() && rng.gen_bool(0.5) {
        let tag = absent[rng.gen_range(0..absent.len())];
        qa.push(QaPair {
            question: format!("is there a {tag} in the image?"),
            answer: "no".to_string(),
            answer_box: None,
        });
    } else {
        let tag = pick(rng);
        qa.push(QaPair {
            question: format!("is there a {tag} in the image?"),
            answer: "yes".to_string(),
            answer_box: None,
        });
    }
    qa
}

/// Detector simulation: jittered true boxes with near-one confidence,
/// occasional duplicate boxes per object, then the sub-threshold distractors.
/// Jitter sigma and duplicate rate come from the config.
pub fn simulate_detections(scene: &Scene, config: &SceneConfig, noise_seed: u64) -> Vec<VisualObject> {
    let mut rng = rng_for(&[noise_seed, hash_str(&scene.id), 0xde7e]);
    let mut out = Vec::new();
    for obj in &scene.objects {
        out.push(VisualObject {
            tag: obj.tag.clone(),
            bbox: jitter_box(&obj.bbox, config.jitter_sigma, &mut rng),
            confidence: round6(rng.gen_range(0.85..1.0)),
        });
        if rng.gen_bool(config.duplicate_rate.clamp(0.0, 1.0)) {
            out.push(VisualObject {
                tag: obj.tag.clone(),
                bbox: jitter_box(&obj.bbox, config.jitter_sigma, &mut rng),
                confidence: round6(rng.gen_range(0.85..1.0)),
            });
        }
    }
    for d in &scene.distractors {
        out.push(VisualObject {
            tag: d.tag.clone(),
            bbox: jitter_box(&d.bbox, config.jitter_sigma, &mut rng),
            confidence: d.confidence,
        });
    }
    out
}

fn jitter_box(b: &BBox, sigma: f64, rng: &mut rand_chacha::ChaCha8Rng) -> BBox {
    let mut c = [
        b.x1 + sigma * normal(rng),
        b.y1 + sigma * normal(rng),
        b.x2 + sigma * normal(rng),
        b.y2 + sigma * normal(rng),
    ];
    for v in &mut c {
        *v = round6(v.clamp(0.0, 1.0));
    }
    // Keep a positive extent after clamping.
    if c[2] <= c[0] {
        c[2] = round6((c[0] + 0.01).min(1.0));
        c[0] = round6(c[2] - 0.01);
    }
    if c[3] <= c[1] {
        c[3] = round6((c[1] + 0.01).min(1.0));
        c[1] = round6(c[3] - 0.01);
    }
    BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] }
}

/// Keeps detections with confidence strictly above the threshold, preserving
/// input order.
pub fn filter_detections(dets: &[VisualObject], threshold: f64) -> Vec<VisualObject> {
    dets.iter().filter(|d| d.confidence > threshold).cloned().collect()
}

/// Stable per-scene seed for detection noise, derived from the run seed.
pub fn detection_seed(run_seed: u64, scene_id: &str) -> u64 {
    mix(&[run_seed, hash_str(scene_id), 0xd00d])
}

#[cfg(test)]
mod tests;
