//! Frozen-encoder feature rendering.
//!
//! The "image encoder" is a fixed random projection of a per-tag summary of
//! the ground-truth objects; the "visual refiner" contributes one detection
//! row (tag embedding plus box encoding) and one segmentation row (pure
//! geometry) per surviving detection, all projected to the query width.
//! Weights derive from `encoder_seed` only, so every scene passes through the
//! same frozen function.

use crate::rng::{hash_str, normal, rng_for};

use super::{SceneConfig, Scene, VisualObject};

const TAG_DIM: usize = 16;
const BOX_DIM: usize = 9;
const SEG_DIM: usize = 8;

/// Which simulator stage produced a local feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Detection,
    Segmentation,
}

/// Frozen encoder outputs for one scene. `local` holds all detection rows
/// followed by all segmentation rows; `provenance` labels each local row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub global: Vec<f64>,
    pub s_g: usize,
    pub d_enc: usize,
    pub local: Vec<f64>,
    pub local_rows: usize,
    pub d_q: usize,
    pub provenance: Vec<Stage>,
}

impl FeatureBundle {
    pub fn global_row(&self, r: usize) -> &[f64] {
        &self.global[r * self.d_enc..(r + 1) * self.d_enc]
    }

    pub fn local_row(&self, r: usize) -> &[f64] {
        &self.local[r * self.d_q..(r + 1) * self.d_q]
    }
}

/// Which encoder stages are replaced by blank input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_vit: bool,
    pub no_odm: bool,
    pub no_ssm: bool,
}

impl AblationFlags {
    pub const NONE: AblationFlags = AblationFlags { no_vit: false, no_odm: false, no_ssm: false };

    /// Removing the whole visual refiner blanks both of its modules.
    pub fn without_vr() -> Self {
        AblationFlags { no_vit: false, no_odm: true, no_ssm: true }
    }

    pub fn is_no_vr(&self) -> bool {
        self.no_odm && self.no_ssm
    }
}

/// Fixed projection weights shared by every scene.
pub struct Encoder {
    config: SceneConfig,
    tag_embeddings: Vec<Vec<f64>>,
    global_proj: Vec<f64>,
    det_proj: Vec<f64>,
    seg_proj: Vec<f64>,
}

impl Encoder {
    pub fn new(config: &SceneConfig) -> Self {
        let bag_dim = 4 * config.tags.len();
        let mut tag_embeddings = Vec::with_capacity(config.tags.len());
        for (i, _) in config.tags.iter().enumerate() {
            let mut rng = rng_for(&[config.encoder_seed, 0x7a9, i as u64]);
            tag_embeddings.push((0..TAG_DIM).map(|_| normal(&mut rng)).collect());
        }
        let mut grng = rng_for(&[config.encoder_seed, 0x91]);
        let global_proj = random_matrix(&mut grng, config.s_g * config.d_enc, bag_dim);
        let mut drng = rng_for(&[config.encoder_seed, 0x92]);
        let det_proj = random_matrix(&mut drng, config.d_q, TAG_DIM + BOX_DIM);
        let mut srng = rng_for(&[config.encoder_seed, 0x93]);
        let seg_proj = random_matrix(&mut srng, config.d_q, SEG_DIM);
        Encoder { config: config.clone(), tag_embeddings, global_proj, det_proj, seg_proj }
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Renders global and local features for a scene whose detections have
    /// already been filtered. Zero detections yield zero local rows.
    pub fn render_features(&self, scene: &Scene, detections: &[VisualObject], seed: u64) -> FeatureBundle {
        let cfg = &self.config;
        let bag = self.bag_encoding(scene);
        let mut global = mat_vec(&self.global_proj, &bag, cfg.s_g * cfg.d_enc);
        let mut nrng = rng_for(&[seed, hash_str(&scene.id), 0x61]);
        for v in &mut global {
            *v += 0.05 * normal(&mut nrng);
        }

        let k = detections.len();
        let mut local = Vec::with_capacity(2 * k * cfg.d_q);
        let mut provenance = Vec::with_capacity(2 * k);
        for det in detections {
            let x = self.det_input(det);
            let mut row = mat_vec(&self.det_proj, &x, cfg.d_q);
            for v in &mut row {
                *v += 0.01 * normal(&mut nrng);
            }
            local.extend_from_slice(&row);
            provenance.push(Stage::Detection);
        }
        for det in detections {
            let s = seg_input(det);
            let mut row = mat_vec(&self.seg_proj, &s, cfg.d_q);
            for v in &mut row {
                *v += 0.01 * normal(&mut nrng);
            }
            local.extend_from_slice(&row);
            provenance.push(Stage::Segmentation);
        }

        FeatureBundle {
            global,
            s_g: cfg.s_g,
            d_enc: cfg.d_enc,
            local,
            local_rows: 2 * k,
            d_q: cfg.d_q,
            provenance,
        }
    }

    /// Per-tag (count, mean cx, mean cy, mean area) over ground-truth objects.
    fn bag_encoding(&self, scene: &Scene) -> Vec<f64> {
        let cfg = &self.config;
        let mut bag = vec![0.0; 4 * cfg.tags.len()];
        for obj in &scene.objects {
            let Some(idx) = cfg.tags.iter().position(|t| *t == obj.tag) else { continue };
            let (cx, cy) = obj.bbox.center();
            bag[4 * idx] += 1.0;
            bag[4 * idx + 1] += cx;
            bag[4 * idx + 2] += cy;
            bag[4 * idx + 3] += obj.bbox.area();
        }
        for chunk in bag.chunks_mut(4) {
            let n = chunk[0];
            if n > 0.0 {
                chunk[1] /= n;
                chunk[2] /= n;
                chunk[3] /= n;
                chunk[0] = n / cfg.max_objects as f64;
            }
        }
        bag
    }

    fn det_input(&self, det: &VisualObject) -> Vec<f64> {
        let idx = self.config.tags.iter().position(|t| *t == det.tag).unwrap_or(0);
        let mut x = self.tag_embeddings[idx].clone();
        let b = &det.bbox;
        let (cx, cy) = b.center();
        x.extend_from_slice(&[b.x1, b.y1, b.x2, b.y2, cx, cy, b.width(), b.height(), det.confidence]);
        x
    }
}

fn seg_input(det: &VisualObject) -> Vec<f64> {
    let b = &det.bbox;
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let area = b.area();
    vec![area, area.sqrt(), cx, cy, w, h, w / (h + 1e-6), 2.0 * (w + h)]
}

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| scale * normal(rng)).collect()
}

fn mat_vec(m: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Zeroes feature rows per ablation flags, using row provenance: `no_vit`
/// blanks every global row, `no_odm` the detection rows, `no_ssm` the
/// segmentation rows.
pub fn blank_features(bundle: &FeatureBundle, flags: AblationFlags) -> FeatureBundle {
    let mut out = bundle.clone();
    if flags.no_vit {
        out.global.iter_mut().for_each(|v| *v = 0.0);
    }
    for (r, stage) in out.provenance.iter().enumerate() {
        let blank = match stage {
            Stage::Detection => flags.no_odm,
            Stage::Segmentation => flags.no_ssm,
        };
        if blank {
            out.local[r * out.d_q..(r + 1) * out.d_q].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

