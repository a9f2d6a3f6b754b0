//! Vision-to-language generative stage: query outputs are projected to soft
//! visual tokens and prepended to a small frozen causal language model whose
//! attention query/value projections are adapted with low-rank factors.
//! The dual-query model, the projection and the adapters train; the base
//! language model stays frozen.

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{tokenize, Segment, TokenSequence, Vocabulary};
use crate::model::{build_mask, forward, Layout, MQFormerConfig, Objective};
use crate::params::{BoundParams, GradStore, ParamStore};
use crate::rng::{hash_str, mix, rng_for};
use crate::scene::{FeatureBundle, Scene};
use crate::tensor::{masked_attention, AttnMask, Tape, Var};
use crate::trainer::{adamw_step, clip_gradients, cosine_lr, AdamState, TrainConfig, TrainError};

mod expand;

pub use expand::{expand_template, expand_template_with, InstructionRecord};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("scene {scene} lacks data required by task {task}: {what}")]
    MissingSceneData { scene: String, task: &'static str, what: &'static str },
    #[error("instruction record has an empty response")]
    EmptyResponse,
    #[error("LoRA rank {rank} must be below min({d_in}, {d_out})")]
    RankTooLarge { rank: usize, d_in: usize, d_out: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLMConfig {
    pub n_layers: usize,
    pub d_lm: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
}

impl Default for TinyLMConfig {
    fn default() -> Self {
        TinyLMConfig { n_layers: 4, d_lm: 128, n_heads: 4, vocab_size: 0, max_seq: 192, ln_eps: 1e-6 }
    }
}

impl TinyLMConfig {
    pub fn validate(&self) {
        assert!(self.d_lm % self.n_heads == 0, "d_lm {} not divisible by heads {}", self.d_lm, self.n_heads);
        assert!(self.vocab_size > 0, "vocab_size must be set");
    }
}

/// Rank and scaling of the additive low-rank update `(alpha / r) * B * A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Registers the language model's own arrays under the `lm.` prefix.
pub fn init_lm_params(config: &TinyLMConfig, seed: u64) -> ParamStore {
    config.validate();
    let d = config.d_lm;
    let mut p = ParamStore::new();
    p.insert_gaussian("lm.tok_emb", &[config.vocab_size, d], seed);
    p.insert_gaussian("lm.pos_emb", &[config.max_seq, d], seed);
    for i in 0..config.n_layers {
        let l = format!("lm.l{i}");
        p.insert_ones(&format!("{l}.ln_attn.gain"), &[d]);
        p.insert_zeros(&format!("{l}.ln_attn.bias"), &[d]);
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert_xavier(&format!("{l}.attn.{w}"), d, d, seed);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            p.insert_zeros(&format!("{l}.attn.{b}"), &[d]);
        }
        p.insert_ones(&format!("{l}.ln_ffn.gain"), &[d]);
        p.insert_zeros(&format!("{l}.ln_ffn.bias"), &[d]);
        p.insert_xavier(&format!("{l}.ffn.w1"), d, 4 * d, seed);
        p.insert_zeros(&format!("{l}.ffn.b1"), &[4 * d]);
        p.insert_xavier(&format!("{l}.ffn.w2"), 4 * d, d, seed);
        p.insert_zeros(&format!("{l}.ffn.b2"), &[d]);
    }
    p.insert_ones("lm.ln_final.gain", &[d]);
    p.insert_zeros("lm.ln_final.bias", &[d]);
    p
}

/// Adds the trainable stage-2 arrays: the query projection and one adapter
/// pair per attention query/value matrix, A Gaussian, B zero so the initial
/// update vanishes.
pub fn init_stage2_params(
    params: &mut ParamStore,
    mq: &MQFormerConfig,
    lm: &TinyLMConfig,
    lora: &LoraConfig,
    seed: u64,
) -> Result<(), GenError> {
    if lora.rank >= lm.d_lm {
        return Err(GenError::RankTooLarge { rank: lora.rank, d_in: lm.d_lm, d_out: lm.d_lm });
    }
    params.insert_xavier("proj.w", mq.d_model, lm.d_lm, seed);
    params.insert_zeros("proj.b", &[lm.d_lm]);
    for i in 0..lm.n_layers {
        for target in ["wq", "wv"] {
            params.insert_gaussian(&format!("lora/l{i}.{target}.a"), &[lora.rank, lm.d_lm], seed);
            params.insert_zeros(&format!("lora/l{i}.{target}.b"), &[lm.d_lm, lora.rank]);
        }
    }
    Ok(())
}

/// Number of trainable adapter values: r*d_in + d_out*r per adapted matrix.
pub fn lora_param_count(lm: &TinyLMConfig, lora: &LoraConfig) -> usize {
    lm.n_layers * 2 * (lora.rank * lm.d_lm + lm.d_lm * lora.rank)
}

/// Adapter-aware linear: `x W + b + scaling * (x A^T) B^T`, never
/// materializing the merged matrix.
pub fn lora_forward<'t>(
    x: Var<'t>,
    w: Var<'t>,
    bias: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    scaling: f64,
) -> Var<'t> {
    let base = x.matmul(w).add_bias(bias);
    let delta = x.matmul(a.transpose()).matmul(b.transpose()).scale(scaling);
    base.add(delta)
}

/// Dense merged matrix `W + scaling * (B A)^T` in the `[in, out]` layout.
pub fn lora_merge(w: &[f64], a: &[f64], b: &[f64], d_in: usize, d_out: usize, rank: usize, scaling: f64) -> Vec<f64> {
    assert!(rank < d_in.min(d_out), "rank {rank} must be below min({d_in}, {d_out})");
    let mut merged = w.to_vec();
    for i in 0..d_in {
        for o in 0..d_out {
            let mut s = 0.0;
            for r in 0..rank {
                s += a[r * d_in + i] * b[o * rank + r];
            }
            merged[i * d_out + o] += scaling * s;
        }
    }
    merged
}

/// Projects query outputs into the language model's embedding space: one
/// soft token per query, independent of the feature sequence lengths.
pub fn project_queries<'t>(params: &BoundParams<'t>, query_states: Var<'t>) -> Var<'t> {
    query_states.matmul(params.var("proj.w")).add_bias(params.var("proj.b"))
}

/// Causal language model pass over `[soft tokens | text]`. When `lora` is
/// set, each layer's query/value projections carry their adapter.
pub fn lm_forward<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &TinyLMConfig,
    lora: Option<&LoraConfig>,
    soft: Option<Var<'t>>,
    ids: &[u32],
) -> Var<'t> {
    let n_soft = soft.map_or(0, |s| s.shape()[0]);
    let text = tape.embedding_lookup(params.var("lm.tok_emb"), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    let mut x = match soft {
        Some(s) => tape.concat(&[s, text], 0),
        None => text,
    };
    let seq = n_soft + ids.len();
    assert!(seq <= config.max_seq, "sequence {seq} exceeds max_seq {}", config.max_seq);
    x = x.add(params.var("lm.pos_emb").slice_rows(0, seq));

    let mut bits = vec![false; seq * seq];
    for r in 0..seq {
        for c in 0..=r {
            bits[r * seq + c] = true;
        }
    }
    let causal = AttnMask::new(seq, seq, bits);

    for i in 0..config.n_layers {
        let l = format!("lm.l{i}");
        let xn = x.layer_norm(params.var(&format!("{l}.ln_attn.gain")), params.var(&format!("{l}.ln_attn.bias")), config.ln_eps);
        let linear = |w: &str, b: &str| xn.matmul(params.var(w)).add_bias(params.var(b));
        let adapted = |target: &str, b: &str| match lora {
            Some(cfg) => lora_forward(
                xn,
                params.var(&format!("{l}.attn.{target}")),
                params.var(b),
                params.var(&format!("lora/l{i}.{target}.a")),
                params.var(&format!("lora/l{i}.{target}.b")),
                cfg.scaling(),
            ),
            None => linear(&format!("{l}.attn.{target}"), b),
        };
        let q = adapted("wq", &format!("{l}.attn.bq"));
        let k = linear(&format!("{l}.attn.wk"), &format!("{l}.attn.bk"));
        let v = adapted("wv", &format!("{l}.attn.bv"));
        let att = masked_attention(q, k, v, &causal, config.n_heads);
        let out = att.matmul(params.var(&format!("{l}.attn.wo"))).add_bias(params.var(&format!("{l}.attn.bo")));
        x = x.add(out);

        let xf = x.layer_norm(params.var(&format!("{l}.ln_ffn.gain")), params.var(&format!("{l}.ln_ffn.bias")), config.ln_eps);
        let h = xf.matmul(params.var(&format!("{l}.ffn.w1"))).add_bias(params.var(&format!("{l}.ffn.b1"))).relu();
        let out = h.matmul(params.var(&format!("{l}.ffn.w2"))).add_bias(params.var(&format!("{l}.ffn.b2")));
        x = x.add(out);
    }
    let x = x.layer_norm(params.var("lm.ln_final.gain"), params.var("lm.ln_final.bias"), config.ln_eps);
    // Tied head over every position.
    x.matmul(params.var("lm.tok_emb").transpose())
}

/// Freeze predicate for stage 2: only the base language model stays fixed.
pub fn stage2_frozen(name: &str) -> bool {
    name.starts_with("lm.")
}

/// Soft tokens for one scene: a query-only pass (empty text side) through
/// the dual-query model, then the projection.
pub fn soft_tokens_for<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    mq: &MQFormerConfig,
    features: &FeatureBundle,
) -> Var<'t> {
    let empty = TokenSequence::empty();
    let mask = build_mask(Objective::Itc, Layout::new(mq.n_visual_queries, mq.n_grounding_queries, 0, 0));
    let out = forward(tape, params, mq, features, &empty, &mask);
    project_queries(params, out.query_states)
}

/// Next-token targets supervised on the response region only; every
/// instruction and soft-token position is ignore-indexed. The final response
/// position predicts the end marker.
fn response_targets(vocab: &Vocabulary, seq_len: usize, n_prefix: usize, instr_len: usize, response: &[u32]) -> Vec<i64> {
    let mut targets = vec![-1i64; seq_len];
    let first_resp = n_prefix + instr_len;
    for (j, &tok) in response.iter().enumerate() {
        targets[first_resp + j - 1] = tok as i64;
    }
    targets[first_resp + response.len() - 1] = vocab.eos() as i64;
    targets
}

/// One instruction-tuning example: loss on the response tokens, gradients
/// flowing through the adapters, the projection and the dual-query model.
#[allow(clippy::too_many_arguments)]
pub fn finetune_example_loss<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    mq: &MQFormerConfig,
    lm: &TinyLMConfig,
    lora: &LoraConfig,
    vocab: &Vocabulary,
    features: &FeatureBundle,
    record: &InstructionRecord,
) -> Result<Var<'t>, GenError> {
    let instr = tokenize(vocab, &record.instruction, Segment::Instruction);
    let resp = tokenize(vocab, &record.response, Segment::Response);
    if resp.ids.is_empty() {
        return Err(GenError::EmptyResponse);
    }
    let soft = soft_tokens_for(tape, params, mq, features);
    let n_soft = soft.shape()[0];
    let ids: Vec<u32> = instr.ids.iter().chain(&resp.ids).copied().collect();
    let logits = lm_forward(tape, params, lm, Some(lora), Some(soft), &ids);
    let targets = response_targets(vocab, n_soft + ids.len(), n_soft, instr.ids.len(), &resp.ids);
    Ok(logits.cross_entropy_logits(&targets, -1))
}

/// Plain causal-LM pre-training of the base model on template-grammar text:
/// captions, serialized spatial blocks and question-answer lines. The spec
/// corpus stands in for a pretrained backbone, so the model is trained from
/// scratch and then frozen.
pub fn lm_corpus(vocab: &Vocabulary, scenes: &[Scene]) -> Vec<Vec<u32>> {
    let mut lines = Vec::new();
    for scene in scenes {
        lines.push(tokenize(vocab, &scene.caption, Segment::Caption).ids);
        let spatial = crate::codec::serialize_spatial(&scene.objects);
        lines.push(tokenize(vocab, &spatial, Segment::Spatial).ids);
        for qa in &scene.qa {
            let line = format!("{} {}", qa.question, qa.answer);
            lines.push(tokenize(vocab, &line, Segment::Instruction).ids);
        }
    }
    lines.retain(|l| !l.is_empty());
    lines
}

/// Mean next-token loss of one line (next token at each position, end marker
/// last).
fn line_loss<'t>(tape: &'t Tape, params: &BoundParams<'t>, lm: &TinyLMConfig, vocab: &Vocabulary, ids: &[u32]) -> Var<'t> {
    let logits = lm_forward(tape, params, lm, None, None, ids);
    let mut targets = vec![-1i64; ids.len()];
    for t in 0..ids.len() - 1 {
        targets[t] = ids[t + 1] as i64;
    }
    targets[ids.len() - 1] = vocab.eos() as i64;
    logits.cross_entropy_logits(&targets, -1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_lines: usize,
    pub peak_lr: f64,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig { steps: 1200, batch_lines: 4, peak_lr: 1e-3, seed: 11 }
    }
}

/// Trains the base language model from scratch on the corpus and returns its
/// parameter store (the caller freezes it afterwards). Deterministic in the
/// config seed.
pub fn pretrain_lm(
    lm: &TinyLMConfig,
    vocab: &Vocabulary,
    corpus: &[Vec<u32>],
    config: &LmPretrainConfig,
) -> Result<ParamStore, GenError> {
    assert!(!corpus.is_empty(), "empty pre-training corpus");
    let mut params = init_lm_params(lm, config.seed);
    let mut adam = AdamState::default();
    let sched = TrainConfig {
        peak_lr: config.peak_lr,
        total_steps: config.steps,
        warmup_ratio: 0.15,
        weight_decay: 0.05,
        seed: config.seed,
        ..Default::default()
    };
    for step in 0..config.steps {
        let mut rng = rng_for(&[config.seed, 0x1a0, step as u64]);
        let lines: Vec<&Vec<u32>> = (0..config.batch_lines)
            .map(|_| &corpus[rand::Rng::gen_range(&mut rng, 0..corpus.len())])
            .collect();
        let results: Vec<(f64, GradStore)> = lines
            .par_iter()
            .map(|ids| {
                let tape = Tape::new();
                let bound = params.bind(&tape, |_| false);
                let loss = line_loss(&tape, &bound, lm, vocab, ids).scale(1.0 / config.batch_lines as f64);
                let grads = tape.backward(loss);
                let mut store = GradStore::new();
                bound.accumulate(&grads, &mut store);
                (loss.scalar(), store)
            })
            .collect();
        let mut grads = GradStore::new();
        for (_, g) in &results {
            grads.merge(g);
        }
        clip_gradients(&mut grads, 1.0);
        adamw_step(&mut params, &grads, &mut adam, cosine_lr(step, &sched), &sched)?;
    }
    Ok(params)
}

/// Mean per-token negative log-likelihood of held-out lines; exp of it is
/// the perplexity.
pub fn lm_heldout_nll(params: &ParamStore, lm: &TinyLMConfig, vocab: &Vocabulary, lines: &[Vec<u32>]) -> f64 {
    let totals: Vec<(f64, usize)> = lines
        .par_iter()
        .map(|ids| {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| true);
            let loss = line_loss(&tape, &bound, lm, vocab, ids);
            (loss.scalar() * ids.len() as f64, ids.len())
        })
        .collect();
    let (sum, count) = totals.iter().fold((0.0, 0), |(s, c), (l, n)| (s + l, c + n));
    sum / count as f64
}

/// Deterministic greedy decoding: argmax until the end marker or the budget.
#[allow(clippy::too_many_arguments)]
pub fn greedy_generate(
    params: &ParamStore,
    mq: &MQFormerConfig,
    lm: &TinyLMConfig,
    lora: &LoraConfig,
    vocab: &Vocabulary,
    features: &FeatureBundle,
    instruction: &str,
    max_new: usize,
) -> String {
    let instr = tokenize(vocab, instruction, Segment::Instruction);
    let mut generated: Vec<u32> = Vec::new();
    while generated.len() < max_new {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let soft = soft_tokens_for(&tape, &bound, mq, features);
        let ids: Vec<u32> = instr.ids.iter().chain(&generated).copied().collect();
        let logits = lm_forward(&tape, &bound, lm, Some(lora), Some(soft), &ids);
        let shape = logits.shape();
        let data = logits.data_ref();
        let last = &data[(shape[0] - 1) * shape[1]..];
        let next = last
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0 as u32;
        if next == vocab.eos() {
            break;
        }
        generated.push(next);
    }
    crate::codec::detokenize(vocab, &generated)
}

/// One stage-2 batch step over instruction records: response-token loss,
/// clipped AdamW over the trainable set.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    params: &mut ParamStore,
    adam: &mut AdamState,
    mq: &MQFormerConfig,
    lm: &TinyLMConfig,
    lora: &LoraConfig,
    vocab: &Vocabulary,
    batch: &[(&InstructionRecord, &FeatureBundle)],
    lr: f64,
    tconfig: &TrainConfig,
) -> Result<f64, GenError> {
    assert!(!batch.is_empty(), "empty finetune batch");
    let shared: &ParamStore = params;
    let results: Vec<Result<(f64, GradStore), GenError>> = batch
        .par_iter()
        .map(|(record, features)| {
            let tape = Tape::new();
            let bound = shared.bind(&tape, stage2_frozen);
            let loss = finetune_example_loss(&tape, &bound, mq, lm, lora, vocab, features, record)?
                .scale(1.0 / batch.len() as f64);
            let grads = tape.backward(loss);
            let mut store = GradStore::new();
            bound.accumulate(&grads, &mut store);
            Ok((loss.scalar(), store))
        })
        .collect();
    let mut grads = GradStore::new();
    let mut total = 0.0;
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.merge(&g);
    }
    clip_gradients(&mut grads, tconfig.grad_clip);
    adamw_step(params, &grads, adam, lr, tconfig)?;
    Ok(total)
}

/// Stable per-record seed for template sampling.
pub fn record_seed(seed: u64, scene_id: &str, slot: u64) -> u64 {
    mix(&[seed, hash_str(scene_id), slot, 0x9e37])
}

#[cfg(test)]
mod tests;
