use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{generate_scene, BBox, SceneConfig, VisualObject};

use super::*;

fn vocab() -> Vocabulary {
    Vocabulary::build(&SceneConfig::default())
}

fn man_object() -> VisualObject {
    VisualObject { tag: "man".into(), bbox: BBox::new(0.34, 0.33, 0.64, 0.73), confidence: 1.0 }
}

const MAN_BLOCK: &str = "\u{27e8}br\u{27e9}\u{27e8}T\u{27e9} man \u{27e8}/T\u{27e9}\u{27e8}Bbox\u{27e9}(0.34, 0.33),(0.64, 0.73)\u{27e8}/Box\u{27e9}\u{27e8}/br\u{27e9}";

#[test]
fn serializes_the_canonical_block() {
    assert_eq!(serialize_spatial(&[man_object()]), MAN_BLOCK);
    assert_eq!(serialize_spatial(&[]), "");
}

#[test]
fn parses_the_canonical_block() {
    let (objs, diags) = parse_spatial(MAN_BLOCK);
    assert!(diags.is_empty());
    assert_eq!(objs.len(), 1);
    assert_eq!(objs[0].tag, "man");
    assert_eq!(objs[0].bbox, BBox::new(0.34, 0.33, 0.64, 0.73));
}

#[test]
fn parse_accepts_the_symmetric_close_tag_and_loose_whitespace() {
    let text = "\u{27e8}br\u{27e9} \u{27e8}T\u{27e9}cat\u{27e8}/T\u{27e9} \u{27e8}Bbox\u{27e9} ( 0.10 , 0.20 ) , ( 0.30 , 0.40 ) \u{27e8}/Bbox\u{27e9} \u{27e8}/br\u{27e9}";
    let (objs, diags) = parse_spatial(text);
    assert!(diags.is_empty(), "{diags:?}");
    assert_eq!(objs.len(), 1);
    assert_eq!(objs[0].tag, "cat");
}

#[test]
fn plain_text_yields_nothing_and_no_diagnostics() {
    let (objs, diags) = parse_spatial("no boxes here");
    assert!(objs.is_empty() && diags.is_empty());
}

#[test]
fn truncated_block_is_reported_not_parsed() {
    let (objs, diags) = parse_spatial("\u{27e8}br\u{27e9}\u{27e8}T\u{27e9} cat \u{27e8}/T\u{27e9}\u{27e8}Bbox\u{27e9}(0.1, 0.2)");
    assert!(objs.is_empty());
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0].byte_range.0, 0);
}

#[test]
fn parse_survives_a_fuzz_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let alphabet: Vec<char> =
        "\u{27e8}\u{27e9}brTBox/(),.0123456789 manxyz\t\n\u{1F600}\u{FFFD}".chars().collect();
    for _ in 0..10_000 {
        let len = rng.gen_range(0..120);
        let s: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        let _ = parse_spatial(&s);
    }
}

#[test]
fn quantization_rounds_decimal_halves_up() {
    assert_eq!(coord_string(quantize_coord(0.344).0), "0.34");
    assert_eq!(coord_string(quantize_coord(0.345).0), "0.35");
    assert_eq!(coord_string(quantize_coord(1.0).0), "1.00");
    assert_eq!(coord_string(quantize_coord(0.0).0), "0.00");
    let (bin, clamped) = quantize_coord(1.7);
    assert!(clamped);
    assert_eq!(bin, 100);
}

#[test]
fn dequantize_stays_within_half_a_bin() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let x: f64 = rng.gen_range(0.0..=1.0);
        let (bin, _) = quantize_coord(x);
        assert!((dequantize_coord(bin) - x).abs() <= 0.005 + 1e-9, "x={x}");
    }
}

#[test]
fn tokenize_matches_the_token_table() {
    let v = vocab();
    let seq = tokenize(&v, "(0.34, 0.33)", Segment::Spatial);
    let expect = vec![
        v.id("(").unwrap(),
        v.coord_id(34),
        v.id(",").unwrap(),
        v.coord_id(33),
        v.id(")").unwrap(),
    ];
    assert_eq!(seq.ids, expect);
    assert!(tokenize(&v, "", Segment::Caption).ids.is_empty());
}

#[test]
fn unknown_words_become_unk_with_diagnostics() {
    let v = vocab();
    let seq = tokenize(&v, "a zeppelin", Segment::Caption);
    assert_eq!(seq.ids[1], v.unk());
    assert_eq!(seq.diagnostics.len(), 1);
}

#[test]
fn caption_round_trip_over_a_generated_corpus() {
    let config = SceneConfig::default();
    let v = Vocabulary::build(&config);
    for seed in 0..1000 {
        let scene = generate_scene(seed, &config).unwrap();
        let seq = tokenize(&v, &scene.caption, Segment::Caption);
        assert!(seq.diagnostics.is_empty(), "{:?} on {:?}", seq.diagnostics, scene.caption);
        assert_eq!(detokenize(&v, &seq.ids), scene.caption);
        for qa in &scene.qa {
            let q = tokenize(&v, &qa.question, Segment::Instruction);
            assert!(q.diagnostics.is_empty(), "{:?}", qa.question);
            assert_eq!(detokenize(&v, &q.ids), qa.question);
            let a = tokenize(&v, &qa.answer, Segment::Response);
            assert_eq!(detokenize(&v, &a.ids), qa.answer);
        }
    }
}

#[test]
fn spatial_round_trip_through_tokens() {
    let v = vocab();
    let objs = vec![man_object(), VisualObject { tag: "cat".into(), bbox: BBox::new(0.1, 0.2, 0.3, 0.4), confidence: 1.0 }];
    let text = serialize_spatial(&objs);
    let seq = tokenize(&v, &text, Segment::Spatial);
    assert!(seq.diagnostics.is_empty());
    assert_eq!(detokenize(&v, &seq.ids), text);
}

#[test]
fn masking_the_man_block_keeps_the_framing() {
    let v = vocab();
    let seq = tokenize_spatial(&v, &[man_object()]);
    assert_eq!(seq.object_spans, vec![(0, 18, 0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (masked, targets) = mask_whole_object(&v, &seq, 1.0, true, &mut rng);

    let m = v.mask();
    let ids: Vec<u32> = vec![
        v.id("\u{27e8}br\u{27e9}").unwrap(),
        v.id("\u{27e8}T\u{27e9}").unwrap(),
        m,
        v.id("\u{27e8}/T\u{27e9}").unwrap(),
        v.id("\u{27e8}Bbox\u{27e9}").unwrap(),
        v.id("(").unwrap(),
        m,
        v.id(",").unwrap(),
        m,
        v.id(")").unwrap(),
        v.id(",").unwrap(),
        v.id("(").unwrap(),
        m,
        v.id(",").unwrap(),
        m,
        v.id(")").unwrap(),
        v.id("\u{27e8}/Box\u{27e9}").unwrap(),
        v.id("\u{27e8}/br\u{27e9}").unwrap(),
    ];
    assert_eq!(masked.ids, ids);
    assert_eq!(targets.len(), 5);
    assert_eq!(targets[&2], v.id("man").unwrap());
    assert_eq!(targets[&6], v.coord_id(34));
    assert_eq!(targets[&8], v.coord_id(33));
    assert_eq!(targets[&12], v.coord_id(64));
    assert_eq!(targets[&14], v.coord_id(73));
    // Segments and spans are untouched.
    assert_eq!(masked.segments, seq.segments);
    assert_eq!(masked.object_spans, seq.object_spans);
}

#[test]
fn zero_probability_without_force_is_identity() {
    let v = vocab();
    let seq = tokenize_spatial(&v, &[man_object()]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (masked, targets) = mask_whole_object(&v, &seq, 0.0, false, &mut rng);
    assert_eq!(masked, seq);
    assert!(targets.is_empty());
}

#[test]
fn force_select_guarantees_a_target() {
    let v = vocab();
    let seq = tokenize_spatial(&v, &[man_object()]);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, targets) = mask_whole_object(&v, &seq, 0.15, true, &mut rng);
        assert!(!targets.is_empty());
    }
}

#[test]
fn selection_rate_concentrates_at_the_configured_probability() {
    let v = vocab();
    let config = SceneConfig::default();
    let mut spans = 0usize;
    let mut selected = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut seed = 0;
    while spans < 10_000 {
        let scene = generate_scene(seed, &config).unwrap();
        seed += 1;
        let seq = tokenize_spatial(&v, &scene.objects);
        let (_, targets) = mask_whole_object(&v, &seq, 0.15, false, &mut rng);
        spans += seq.object_spans.len();
        // Each selected span contributes exactly one tag plus four coords.
        assert_eq!(targets.len() % 5, 0);
        selected += targets.len() / 5;
    }
    let rate = selected as f64 / spans as f64;
    assert!((0.14..=0.16).contains(&rate), "selection rate {rate}");
}

#[test]
fn vocabulary_save_load_round_trips_bit_exactly() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    let loaded = Vocabulary::load(&path).unwrap();
    assert_eq!(v, loaded);
    let path2 = dir.path().join("vocab2.txt");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    // Ids stable: spot-check a few classes.
    assert_eq!(loaded.id("[MASK]"), Some(v.mask()));
    assert_eq!(loaded.id("0.34"), Some(v.coord_id(34)));
    assert_eq!(loaded.id("cat"), v.id("cat"));
}

#[test]
fn template_words_are_all_in_vocabulary() {
    let v = vocab();
    for task in crate::templates::Task::ALL {
        for t in crate::templates::templates_for(task) {
            let stripped: String = {
                let mut rest = *t;
                let mut clean = String::new();
                while let Some(open) = rest.find('{') {
                    clean.push_str(&rest[..open]);
                    rest = &rest[open + rest[open..].find('}').unwrap() + 1..];
                }
                clean.push_str(rest);
                clean
            };
            let seq = tokenize(&v, &stripped, Segment::Instruction);
            assert!(seq.diagnostics.is_empty(), "template {t:?}: {:?}", seq.diagnostics);
        }
    }
}

proptest! {
    #[test]
    fn grammar_round_trip_is_identity_after_quantization(
        raw in proptest::collection::vec((0usize..12, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 0..6)
    ) {
        let config = SceneConfig::default();
        let objs: Vec<VisualObject> = raw
            .iter()
            .map(|(t, a, b, c, d)| VisualObject {
                tag: config.tags[*t].clone(),
                bbox: BBox::new(*a, *b, *c, *d),
                confidence: 1.0,
            })
            .collect();
        let (parsed, diags) = parse_spatial(&serialize_spatial(&objs));
        prop_assert!(diags.is_empty());
        prop_assert_eq!(parsed.len(), objs.len());
        for (p, o) in parsed.iter().zip(&objs) {
            prop_assert_eq!(&p.tag, &o.tag);
            for (pc, oc) in p.bbox.coords().iter().zip(o.bbox.coords()) {
                prop_assert_eq!(*pc, dequantize_coord(quantize_coord(oc).0));
            }
        }
    }

    #[test]
    fn parse_never_panics(s in "\\PC*") {
        let _ = parse_spatial(&s);
    }

    #[test]
    fn masking_changes_exactly_the_selected_content_positions(seed in 0u64..500) {
        let config = SceneConfig::default();
        let v = Vocabulary::build(&config);
        let scene = generate_scene(seed, &config).unwrap();
        let seq = tokenize_spatial(&v, &scene.objects);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (masked, targets) = mask_whole_object(&v, &seq, 0.5, true, &mut rng);
        prop_assert_eq!(&masked.segments, &seq.segments);
        prop_assert_eq!(&masked.object_spans, &seq.object_spans);
        for (pos, (a, b)) in masked.ids.iter().zip(&seq.ids).enumerate() {
            if targets.contains_key(&pos) {
                prop_assert_eq!(*a, v.mask());
                prop_assert_eq!(targets[&pos], *b);
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }
}
