use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{tokenize, tokenize_spatial, Segment, TokenSequence, Vocabulary};
use crate::scene::{filter_detections, generate_scene, simulate_detections, Encoder, SceneConfig};
use crate::tensor::Tape;

use super::*;

/// Independent rule oracle: literal pair tables per objective, written
/// against the group of each (row, col) position.
fn oracle_allowed(objective: Objective, layout: Layout, r: usize, c: usize) -> bool {
    #[derive(PartialEq, Clone, Copy)]
    enum G {
        Vq,
        Gq,
        Sp,
        Ca,
    }
    let classify = |p: usize| {
        if p < layout.n_vq {
            G::Vq
        } else if p < layout.n_vq + layout.n_gq {
            G::Gq
        } else if p < layout.n_vq + layout.n_gq + layout.len_spatial {
            G::Sp
        } else {
            G::Ca
        }
    };
    let (gr, gc) = (classify(r), classify(c));
    match objective {
        Objective::Itc => matches!(
            (gr, gc),
            (G::Vq | G::Gq, G::Vq | G::Gq) | (G::Sp | G::Ca, G::Sp | G::Ca)
        ),
        Objective::Itm => matches!(
            (gr, gc),
            (G::Vq, G::Vq)
                | (G::Gq, G::Gq)
                | (G::Sp, G::Sp)
                | (G::Ca, G::Ca)
                | (G::Vq, G::Ca)
                | (G::Ca, G::Vq)
                | (G::Gq, G::Sp)
                | (G::Sp, G::Gq)
        ),
        Objective::Icg => match (gr, gc) {
            (G::Vq | G::Gq, G::Vq | G::Gq) => true,
            (G::Ca, G::Vq | G::Gq) => true,
            (G::Ca, G::Ca) => c <= r,
            _ => false,
        },
        Objective::Msp => matches!((gr, gc), (G::Vq | G::Gq | G::Sp, G::Vq | G::Gq | G::Sp)),
    }
}

#[test]
fn itc_mask_is_two_solid_blocks() {
    let m = build_mask(Objective::Itc, Layout::new(2, 2, 3, 3));
    for r in 0..10 {
        for c in 0..10 {
            let expect = (r < 4) == (c < 4);
            assert_eq!(m.mask.allowed(r, c), expect, "({r},{c})");
        }
    }
}

#[test]
fn icg_mask_is_causal_over_caption_with_spatial_blocked() {
    let layout = Layout::new(2, 2, 3, 3);
    let m = build_mask(Objective::Icg, layout);
    for r in 7..10 {
        for c in 0..10 {
            let expect = c < 4 || (c >= 7 && c <= r);
            assert_eq!(m.mask.allowed(r, c), expect, "caption row {r} col {c}");
        }
    }
    // Spatial rows and columns entirely blocked.
    for p in 4..7 {
        for q in 0..10 {
            assert!(!m.mask.allowed(p, q));
            assert!(!m.mask.allowed(q, p));
        }
    }
}

#[test]
fn masks_match_the_brute_force_oracle_on_random_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..100 {
        let layout = Layout::new(
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(0..8),
            rng.gen_range(0..8),
        );
        for objective in Objective::ALL {
            let m = build_mask(objective, layout);
            let s = layout.total();
            for r in 0..s {
                for c in 0..s {
                    assert_eq!(
                        m.mask.allowed(r, c),
                        oracle_allowed(objective, layout, r, c),
                        "{objective:?} layout {layout:?} at ({r},{c})"
                    );
                }
            }
        }
    }
}

#[test]
fn mask_symmetry_and_diagonal_properties() {
    let layout = Layout::new(3, 2, 4, 5);
    let s = layout.total();
    for objective in Objective::ALL {
        let m = build_mask(objective, layout);
        let symmetric = !matches!(objective, Objective::Icg);
        for r in 0..s {
            for c in 0..s {
                if symmetric {
                    assert_eq!(m.mask.allowed(r, c), m.mask.allowed(c, r), "{objective:?}");
                }
            }
            // Diagonal true except for the fully blocked group's rows.
            let blocked = matches!(
                (objective, layout.group(r)),
                (Objective::Icg, Group::Spatial) | (Objective::Msp, Group::Caption)
            );
            assert_eq!(m.mask.allowed(r, r), !blocked, "{objective:?} diag {r}");
        }
    }
}

#[test]
fn xavier_bound_and_determinism() {
    let config = tiny_config();
    let d = config.d_model;
    let a = init_params(&config, 5);
    let b = init_params(&config, 5);
    assert_eq!(a, b);
    let c = init_params(&config, 6);
    assert_ne!(a, c);

    let bound = (6.0 / (d + d) as f64).sqrt();
    let w = &a.get("mqf.l0.attn.wq").data;
    assert!(w.iter().all(|v| v.abs() < bound));
}

#[test]
fn xavier_variance_close_to_formula_at_d64() {
    let config = MQFormerConfig { vocab_size: 50, ..Default::default() };
    let p = init_params(&config, 11);
    for name in ["mqf.l0.attn.wq", "mqf.l2.ffn_q.w1", "mqf.l1.cross_v.wk"] {
        let e = p.get(name);
        let (fi, fo) = (e.shape[0], e.shape[1]);
        let expect = 2.0 / (fi + fo) as f64;
        let mean: f64 = e.data.iter().sum::<f64>() / e.data.len() as f64;
        let var: f64 = e.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e.data.len() as f64;
        assert!(
            (var - expect).abs() / expect < 0.10,
            "{name}: sample var {var:.3e} vs {expect:.3e}"
        );
    }
}

fn tiny_config() -> MQFormerConfig {
    let vocab = Vocabulary::build(&SceneConfig::default());
    MQFormerConfig {
        n_visual_queries: 3,
        n_grounding_queries: 3,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_enc: 48,
        d_q: 32,
        max_text_len: 160,
        vocab_size: vocab.len(),
        ln_eps: 1e-6,
    }
}

struct Fixture {
    config: MQFormerConfig,
    vocab: Vocabulary,
    scene_config: SceneConfig,
}

impl Fixture {
    fn new() -> Fixture {
        Fixture {
            config: tiny_config(),
            vocab: Vocabulary::build(&SceneConfig::default()),
            scene_config: SceneConfig::default(),
        }
    }

    fn sequence(&self, seed: u64) -> (TokenSequence, crate::scene::FeatureBundle) {
        let scene = generate_scene(seed, &self.scene_config).unwrap();
        let dets = filter_detections(
            &simulate_detections(&scene, &self.scene_config, seed),
            self.scene_config.detect_threshold,
        );
        let encoder = Encoder::new(&self.scene_config);
        let features = encoder.render_features(&scene, &dets, seed);

        let mut seq = TokenSequence::empty();
        seq.push(self.vocab.bos(), Segment::Spatial);
        seq.extend(tokenize_spatial(&self.vocab, &scene.objects));
        seq.push(self.vocab.cls(), Segment::Caption);
        seq.extend(tokenize(&self.vocab, &scene.caption, Segment::Caption));
        (seq, features)
    }

    fn layout(&self, seq: &TokenSequence) -> Layout {
        let sp = seq.segments.iter().filter(|s| matches!(s, Segment::Spatial)).count();
        Layout::new(
            self.config.n_visual_queries,
            self.config.n_grounding_queries,
            sp,
            seq.len() - sp,
        )
    }
}

#[test]
fn forward_runs_with_zero_local_rows() {
    let fx = Fixture::new();
    let params = init_params(&fx.config, 1);
    let (seq, mut features) = fx.sequence(0);
    features.local.clear();
    features.local_rows = 0;
    features.provenance.clear();
    let mask = build_mask(Objective::Itc, fx.layout(&seq));
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let out = forward(&tape, &bound, &fx.config, &features, &seq, &mask);
    assert_eq!(out.query_states.shape(), vec![6, 16]);
    assert!(out.query_states.value().iter().all(|v| v.is_finite()));
}

#[test]
fn itc_mask_blocks_text_to_query_leakage() {
    let fx = Fixture::new();
    let params = init_params(&fx.config, 2);
    let (seq, features) = fx.sequence(3);
    let mask = build_mask(Objective::Itc, fx.layout(&seq));

    let run = |seq: &TokenSequence| {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let out = forward(&tape, &bound, &fx.config, &features, seq, &mask);
        (out.query_states.value(), out.h_i.value())
    };
    let (q0, h0) = run(&seq);
    let mut perturbed = seq.clone();
    let cap_start = seq.segments.iter().position(|s| matches!(s, Segment::Caption)).unwrap();
    perturbed.ids[cap_start + 1] = fx.vocab.id("yellow").unwrap();
    let (q1, h1) = run(&perturbed);
    assert_eq!(q0, q1, "caption perturbation leaked into query states");
    assert_eq!(h0, h1);
}

#[test]
fn icg_mask_is_causal_in_the_forward_pass() {
    let fx = Fixture::new();
    let params = init_params(&fx.config, 4);
    let (mut seq, features) = fx.sequence(5);
    // Switch the caption anchor to the generation token, as ICG does.
    let cap_start = seq.segments.iter().position(|s| matches!(s, Segment::Caption)).unwrap();
    seq.ids[cap_start] = fx.vocab.dec();
    let mask = build_mask(Objective::Icg, fx.layout(&seq));

    let run = |seq: &TokenSequence| {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let out = forward(&tape, &bound, &fx.config, &features, seq, &mask);
        out.text_states.value()
    };
    let t0 = run(&seq);
    let mut perturbed = seq.clone();
    let j = cap_start + 3;
    perturbed.ids[j] = fx.vocab.id("blue").unwrap();
    let t1 = run(&perturbed);
    let d = fx.config.d_model;
    for row in 0..j {
        assert_eq!(&t0[row * d..(row + 1) * d], &t1[row * d..(row + 1) * d], "row {row} changed");
    }
    assert_ne!(t0, t1, "perturbation must reach later positions");
}

#[test]
fn query_state_size_is_independent_of_feature_lengths() {
    let fx = Fixture::new();
    let params = init_params(&fx.config, 6);
    let (seq, features) = fx.sequence(7);
    let mask = build_mask(Objective::Msp, fx.layout(&seq));
    for extra in [0usize, 3, 9] {
        let mut f = features.clone();
        // Stretch the local sequence with copies; the compressed query count
        // must not change.
        for _ in 0..extra {
            let row: Vec<f64> = f.local[..f.d_q.min(f.local.len())].to_vec();
            if row.len() < f.d_q {
                break;
            }
            f.local.extend_from_slice(&row);
            f.local_rows += 1;
            f.provenance.push(crate::scene::Stage::Detection);
        }
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let out = forward(&tape, &bound, &fx.config, &f, &seq, &mask);
        assert_eq!(out.query_states.shape(), vec![fx.config.n_queries(), fx.config.d_model]);
        assert_eq!(out.h_i.len(), 2 * fx.config.d_model);
    }
}

#[test]
fn pooled_similarity_cases() {
    let tape = Tape::new();
    let a = tape.leaf(vec![0.3, -0.4, 0.5, 0.1], &[4]);
    let tau = tape.leaf(vec![1.0], &[1]);
    assert!((pooled_similarity(a, a, tau).scalar() - 1.0).abs() < 1e-12);

    let e1 = tape.leaf(vec![1.0, 0.0], &[2]);
    let e2 = tape.leaf(vec![0.0, 1.0], &[2]);
    assert_eq!(pooled_similarity(e1, e2, tau).scalar(), 0.0);

    // Zero vector: similarity defined as 0.
    let z = tape.leaf(vec![0.0, 0.0], &[2]);
    assert_eq!(pooled_similarity(z, e1, tau).scalar(), 0.0);

    // Arithmetic oracle on a random pair with temperature.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let av: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ta = tape.leaf(av.clone(), &[6]);
    let tb = tape.leaf(bv.clone(), &[6]);
    let tau2 = tape.leaf(vec![0.07], &[1]);
    let got = pooled_similarity(ta, tb, tau2).scalar();
    let dot: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
    let na: f64 = av.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
    let expect = dot / (na * nb) / 0.07;
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn render_mask_shows_block_structure() {
    let text = render_mask(&build_mask(Objective::Itc, Layout::new(2, 2, 3, 3)));
    assert!(text.contains("##|##|...|..."));
    let icg = render_mask(&build_mask(Objective::Icg, Layout::new(2, 2, 3, 3)));
    assert!(icg.contains("#.."), "lower-triangular caption block missing:\n{icg}");
}
