//! The four pre-training objectives and their sum: in-batch contrastive
//! alignment (ITC), matched/mismatched classification (ITM), caption
//! generation from queries alone (ICG) and masked spatial prediction (MSP).
//! Each objective runs its own forward pass under its own mask; the total is
//! the plain sum of the four.

use rayon::prelude::*;

use crate::codec::{mask_whole_object, tokenize, tokenize_spatial, Segment, TokenSequence, Vocabulary};
use crate::model::{build_mask, forward, forward_at, Layout, MQFormerConfig, MaskMatrix, Objective};
use crate::params::{BoundParams, GradStore, ParamStore};
use crate::rng::{hash_str, rng_for};
use crate::scene::{
    blank_features, filter_detections, simulate_detections, AblationFlags, Encoder, FeatureBundle, Scene,
};
use crate::tensor::{Tape, Var};

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Whole-object masking probability for MSP.
    pub msp_mask_prob: f64,
    /// Guarantee at least one masked object per sequence.
    pub msp_force_one: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { msp_mask_prob: 0.15, msp_force_one: true }
    }
}

/// Scene turned into model inputs: rendered (possibly ablated) features plus
/// tokenized spatial representation and caption.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub scene_id: String,
    pub features: FeatureBundle,
    pub spatial: TokenSequence,
    pub caption: TokenSequence,
}

/// Runs the simulated refiner pipeline for one scene: detect, filter, render,
/// ablate, serialize. `noise_seed` drives detection jitter and feature noise.
pub fn encode_scene(
    vocab: &Vocabulary,
    encoder: &Encoder,
    scene: &Scene,
    flags: AblationFlags,
    noise_seed: u64,
) -> EncodedScene {
    let config = encoder.config();
    let dets = simulate_detections(scene, config, noise_seed);
    let kept = filter_detections(&dets, config.detect_threshold);
    let features = blank_features(&encoder.render_features(scene, &kept, noise_seed), flags);
    let spatial = tokenize_spatial(vocab, &kept);
    let caption = tokenize(vocab, &scene.caption, Segment::Caption);
    EncodedScene { scene_id: scene.id.clone(), features, spatial, caption }
}

/// Full text sequence for one objective: spatial anchor + spatial blocks +
/// caption anchor + caption tokens.
fn assemble(anchor_sp: u32, spatial: &TokenSequence, anchor_ca: u32, caption: &TokenSequence) -> TokenSequence {
    let mut seq = TokenSequence::empty();
    seq.push(anchor_sp, Segment::Spatial);
    seq.extend(spatial.clone());
    seq.push(anchor_ca, Segment::Caption);
    seq.extend(caption.clone());
    seq
}

fn layout_of(config: &MQFormerConfig, seq: &TokenSequence) -> Layout {
    let sp = seq.segments.iter().filter(|s| matches!(s, Segment::Spatial)).count();
    Layout::new(config.n_visual_queries, config.n_grounding_queries, sp, seq.len() - sp)
}

/// Mask for the sequence with padding positions excluded from visibility.
fn mask_for(config: &MQFormerConfig, vocab: &Vocabulary, objective: Objective, seq: &TokenSequence) -> MaskMatrix {
    let mut m = build_mask(objective, layout_of(config, seq));
    let nq = config.n_queries();
    let pads: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == vocab.pad())
        .map(|(i, _)| nq + i)
        .collect();
    if !pads.is_empty() {
        m.mask = m.mask.block_positions(&pads);
    }
    m
}

/// Tied-embedding logits over the vocabulary for every text position.
fn lm_logits<'t>(params: &BoundParams<'t>, text_states: Var<'t>) -> Var<'t> {
    text_states.matmul(params.var("mqf.tok_emb").transpose())
}

/// In-batch contrastive loss over pooled pairs: identity-matched rows of the
/// temperature-scaled cosine similarity matrix, both directions averaged.
/// A single-pair batch has one candidate per row and scores exactly zero.
pub fn itc_loss<'t>(tape: &'t Tape, h_is: &[Var<'t>], h_ts: &[Var<'t>], temperature: Var<'t>) -> Var<'t> {
    assert!(!h_is.is_empty() && h_is.len() == h_ts.len(), "itc batch is empty or unpaired");
    let a = tape.stack_rows(h_is).normalize_rows();
    let b = tape.stack_rows(h_ts).normalize_rows();
    let sim = a.matmul(b.transpose()).scale_by(temperature.recip());
    let targets: Vec<i64> = (0..h_is.len() as i64).collect();
    let i2t = sim.cross_entropy_logits(&targets, -1);
    let t2i = sim.transpose().cross_entropy_logits(&targets, -1);
    i2t.add(t2i).scale(0.5)
}

/// Two-way matching head on one joint input: the matched/mismatched
/// cross-entropies of (H_v, H_ic) and (H_g, H_sp), averaged.
pub fn itm_pair_loss<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    h_v: Var<'t>,
    h_ic: Var<'t>,
    h_g: Var<'t>,
    h_sp: Var<'t>,
    matched: bool,
) -> Var<'t> {
    let target = [if matched { 1 } else { 0 }];
    let head = |a: Var<'t>, b: Var<'t>| {
        let x = tape.concat(&[a, b], 0);
        let d = x.len();
        let h = x.reshape(&[1, d]).matmul(params.var("head.itm.w1")).add_bias(params.var("head.itm.b1")).relu();
        let logits = h.matmul(params.var("head.itm.w2")).add_bias(params.var("head.itm.b2"));
        logits.cross_entropy_logits(&target, -1)
    };
    head(h_v, h_ic).add(head(h_g, h_sp)).scale(0.5)
}

/// Prefix-LM caption loss: the generation anchor predicts the first caption
/// token, each caption token the next, the last one the end marker. Spatial
/// positions are ignore-indexed (their mask rows are fully blocked anyway).
/// Returns the loss and the number of supervised positions.
pub fn icg_loss<'t>(
    params: &BoundParams<'t>,
    vocab: &Vocabulary,
    seq: &TokenSequence,
    text_states: Var<'t>,
) -> (Var<'t>, usize) {
    let logits = lm_logits(params, text_states);
    let mut targets = vec![-1i64; seq.len()];
    // Caption region: anchor first, then real tokens (skip padding).
    let cap: Vec<usize> = (0..seq.len())
        .filter(|&i| matches!(seq.segments[i], Segment::Caption) && seq.ids[i] != vocab.pad())
        .collect();
    let mut supervised = 0;
    for w in cap.windows(2) {
        targets[w[0]] = seq.ids[w[1]] as i64;
        supervised += 1;
    }
    if let Some(&last) = cap.last() {
        targets[last] = vocab.eos() as i64;
        supervised += 1;
    }
    // A caption of only the anchor still predicts the end marker; an entirely
    // missing caption yields zero supervised rows and a zero loss.
    (logits.cross_entropy_logits(&targets, -1), supervised)
}

/// Masked-position restoration loss over the target map produced by
/// whole-object masking.
pub fn msp_loss<'t>(
    params: &BoundParams<'t>,
    seq_len: usize,
    target_map: &std::collections::BTreeMap<usize, u32>,
    text_states: Var<'t>,
) -> (Var<'t>, usize) {
    let logits = lm_logits(params, text_states);
    let mut targets = vec![-1i64; seq_len];
    for (&pos, &id) in target_map {
        targets[pos] = id as i64;
    }
    (logits.cross_entropy_logits(&targets, -1), target_map.len())
}

/// Loss values and per-loss counts for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_itc: f64,
    pub l_itm: f64,
    pub l_icg: f64,
    pub l_msp: f64,
    pub total: f64,
    pub pairs: usize,
    pub masked_tokens: usize,
    pub caption_tokens: usize,
}

/// One example's contribution to the per-example losses (everything except
/// ITC, which couples the batch).
#[allow(clippy::too_many_arguments)]
fn example_losses(
    params: &ParamStore,
    mconfig: &MQFormerConfig,
    oconfig: &ObjectiveConfig,
    vocab: &Vocabulary,
    item: &EncodedScene,
    negative_text: &(TokenSequence, TokenSequence),
    step_seed: u64,
    frozen: &(impl Fn(&str) -> bool + Sync),
    batch_size: usize,
    compute_grads: bool,
) -> (f64, f64, f64, usize, usize, GradStore) {
    let tape = Tape::new();
    let bound = params.bind(&tape, frozen);

    // ITM: the positive pair and one in-batch negative (same features,
    // another example's whole text).
    let itm_of = |seq: &TokenSequence, matched: bool| {
        let mask = mask_for(mconfig, vocab, Objective::Itm, seq);
        let out = forward(&tape, &bound, mconfig, &item.features, seq, &mask);
        itm_pair_loss(
            &tape,
            &bound,
            out.h_v,
            out.h_ic.expect("itm needs a caption anchor"),
            out.h_g,
            out.h_sp.expect("itm needs a spatial anchor"),
            matched,
        )
    };
    let pos_seq = assemble(vocab.bos(), &item.spatial, vocab.cls(), &item.caption);
    let neg_seq = assemble(vocab.bos(), &negative_text.0, vocab.cls(), &negative_text.1);
    let itm = itm_of(&pos_seq, true).add(itm_of(&neg_seq, false)).scale(0.5);

    // ICG: generation anchor, causal caption mask. The spatial rows and
    // columns are fully blocked, so the forward drops them outright and
    // keeps the caption's original position indices; every remaining state
    // is identical to the full-sequence pass.
    let spatial_len = item.spatial.len() + 1;
    let mut icg_seq = TokenSequence::empty();
    icg_seq.push(vocab.dec(), Segment::Caption);
    icg_seq.extend(item.caption.clone());
    let icg_mask = mask_for(mconfig, vocab, Objective::Icg, &icg_seq);
    let icg_out = forward_at(&tape, &bound, mconfig, &item.features, &icg_seq, &icg_mask, spatial_len);
    let (icg, caption_tokens) = icg_loss(&bound, vocab, &icg_seq, icg_out.text_states);

    // MSP: whole-object masking, restoration from local features. Caption
    // rows and columns are fully blocked, so the sequence carries only the
    // spatial side.
    let mut msp_base = TokenSequence::empty();
    msp_base.push(vocab.mlm(), Segment::Spatial);
    msp_base.extend(item.spatial.clone());
    let mut rng = rng_for(&[step_seed, hash_str(&item.scene_id), 0x3a5b]);
    let (msp_seq, target_map) =
        mask_whole_object(vocab, &msp_base, oconfig.msp_mask_prob, oconfig.msp_force_one, &mut rng);
    let msp_mask = mask_for(mconfig, vocab, Objective::Msp, &msp_seq);
    let msp_out = forward(&tape, &bound, mconfig, &item.features, &msp_seq, &msp_mask);
    let (msp, masked_tokens) = msp_loss(&bound, msp_seq.len(), &target_map, msp_out.text_states);

    let (itm_v, icg_v, msp_v) = (itm.scalar(), icg.scalar(), msp.scalar());
    let mut grads = GradStore::new();
    if compute_grads {
        let contribution = itm.add(icg).add(msp).scale(1.0 / batch_size as f64);
        let g = tape.backward(contribution);
        bound.accumulate(&g, &mut grads);
    }
    (itm_v, icg_v, msp_v, masked_tokens, caption_tokens, grads)
}

/// Runs all four objectives over a batch: per-example forwards for ITM, ICG
/// and MSP (parallel, reduced in batch order), then one shared contrastive
/// pass over the whole batch. Returns the loss breakdown and, when
/// requested, the summed parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    params: &ParamStore,
    mconfig: &MQFormerConfig,
    oconfig: &ObjectiveConfig,
    vocab: &Vocabulary,
    batch: &[EncodedScene],
    step_seed: u64,
    frozen: &(impl Fn(&str) -> bool + Sync),
    compute_grads: bool,
) -> (LossBreakdown, GradStore) {
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len();

    // ITM negatives: rotate the whole texts one position (an in-batch
    // derangement). A batch of one falls back to a corrupted-spatial
    // negative with its tags and coordinates scrambled.
    let negatives: Vec<(TokenSequence, TokenSequence)> = if b > 1 {
        (0..b)
            .map(|i| {
                let j = (i + 1) % b;
                (batch[j].spatial.clone(), batch[j].caption.clone())
            })
            .collect()
    } else {
        vec![(corrupt_spatial(vocab, &batch[0].spatial, step_seed), batch[0].caption.clone())]
    };

    let per_example: Vec<_> = batch
        .par_iter()
        .zip(&negatives)
        .map(|(item, neg)| {
            example_losses(params, mconfig, oconfig, vocab, item, neg, step_seed, frozen, b, compute_grads)
        })
        .collect();

    let mut grads = GradStore::new();
    let (mut l_itm, mut l_icg, mut l_msp) = (0.0, 0.0, 0.0);
    let (mut masked_tokens, mut caption_tokens) = (0, 0);
    for (itm, icg, msp, masked, captoks, g) in &per_example {
        l_itm += itm / b as f64;
        l_icg += icg / b as f64;
        l_msp += msp / b as f64;
        masked_tokens += masked;
        caption_tokens += captoks;
        grads.merge(g);
    }

    // Contrastive pass: per-example forwards on their own tapes (parallel),
    // the batch-coupled loss on a small head tape over copied pooled vectors,
    // then seeded reverse sweeps pushing the head gradients back through each
    // example, reduced in batch order.
    struct ItcArm {
        tape: Tape,
        h_i: usize,
        h_t: usize,
        h_i_val: Vec<f64>,
        h_t_val: Vec<f64>,
        param_ids: Vec<(String, usize)>,
    }
    let arms: Vec<ItcArm> = batch
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            let bound = params.bind(&tape, frozen);
            let seq = assemble(vocab.bos(), &item.spatial, vocab.cls(), &item.caption);
            let mask = mask_for(mconfig, vocab, Objective::Itc, &seq);
            let out = forward(&tape, &bound, mconfig, &item.features, &seq, &mask);
            let h_t = out.h_t.expect("pre-training sequences always carry both anchors");
            ItcArm {
                h_i: out.h_i.id(),
                h_t: h_t.id(),
                h_i_val: out.h_i.value(),
                h_t_val: h_t.value(),
                param_ids: bound.ids(),
                tape,
            }
        })
        .collect();

    let head = Tape::new();
    let head_bound = params.bind(&head, frozen);
    let h_is: Vec<Var<'_>> = arms.iter().map(|a| head.leaf(a.h_i_val.clone(), &[a.h_i_val.len()])).collect();
    let h_ts: Vec<Var<'_>> = arms.iter().map(|a| head.leaf(a.h_t_val.clone(), &[a.h_t_val.len()])).collect();
    let itc = itc_loss(&head, &h_is, &h_ts, head_bound.var("itc.temperature"));
    let l_itc = itc.scalar();
    if compute_grads {
        let head_grads = head.backward(itc);
        head_bound.accumulate(&head_grads, &mut grads);
        let seed_vals: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
            .map(|i| (head_grads.wrt_or_zeros(h_is[i]), head_grads.wrt_or_zeros(h_ts[i])))
            .collect();
        let arm_stores: Vec<GradStore> = arms
            .into_par_iter()
            .zip(seed_vals)
            .map(|(arm, (gi, gt))| {
                let seeds = vec![
                    (Var { tape: &arm.tape, id: arm.h_i }, gi),
                    (Var { tape: &arm.tape, id: arm.h_t }, gt),
                ];
                let g = arm.tape.backward_seeded(&seeds);
                let mut store = GradStore::new();
                for (name, id) in &arm.param_ids {
                    if let Some(buf) = g.buffers[*id].as_deref() {
                        store.add(name, buf);
                    }
                }
                store
            })
            .collect();
        for store in &arm_stores {
            grads.merge(store);
        }
    }

    let total = l_itc + l_itm + l_icg + l_msp;
    (
        LossBreakdown { l_itc, l_itm, l_icg, l_msp, total, pairs: b, masked_tokens, caption_tokens },
        grads,
    )
}

/// Deterministically scrambles the tag and coordinate tokens of a spatial
/// representation so a single-example batch still has a mismatched negative.
fn corrupt_spatial(vocab: &Vocabulary, spatial: &TokenSequence, step_seed: u64) -> TokenSequence {
    let mut rng = rng_for(&[step_seed, 0xc0_44]);
    let mut out = spatial.clone();
    for id in &mut out.ids {
        if vocab.is_content(*id) || vocab.is_coord(*id) {
            *id = vocab.coord_id(rng.gen_range(0..crate::codec::N_COORDS));
        }
    }
    out
}
