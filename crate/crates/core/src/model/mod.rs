//! The dual-query transformer: visual and grounding queries share one
//! self-attention layer with the text stream, cross-attend into the global
//! and local feature sequences through independent weights in every layer,
//! and pass through a query-shared feed-forward network, with a separate one
//! for text. Pre-norm residual blocks throughout.

use crate::codec::{Segment, TokenSequence};
use crate::params::{BoundParams, ParamStore};
use crate::scene::FeatureBundle;
use crate::tensor::{masked_attention, AttnMask, Tape, Var};

mod masks;

pub use masks::{build_mask, render_mask, Group, Layout, MaskMatrix, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct MQFormerConfig {
    pub n_visual_queries: usize,
    pub n_grounding_queries: usize,
    /// Hidden width (768 at paper scale, 64 at desk scale).
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the global feature rows the visual queries attend to.
    pub d_enc: usize,
    /// Width of the local feature rows the grounding queries attend to.
    pub d_q: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
}

impl Default for MQFormerConfig {
    fn default() -> Self {
        MQFormerConfig {
            n_visual_queries: 32,
            n_grounding_queries: 32,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_enc: 48,
            d_q: 32,
            max_text_len: 160,
            vocab_size: 0,
            ln_eps: 1e-6,
        }
    }
}

impl MQFormerConfig {
    pub fn n_queries(&self) -> usize {
        self.n_visual_queries + self.n_grounding_queries
    }

    pub fn validate(&self) {
        assert!(self.n_visual_queries >= 1 && self.n_grounding_queries >= 1, "query counts must be >= 1");
        assert!(
            self.d_model % self.n_heads == 0,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        assert!(self.vocab_size > 0, "vocab_size must be set");
    }
}

/// Registers every trainable array of the model, the matching head and the
/// contrastive temperature: weight matrices Xavier-uniform, biases zero,
/// embeddings Gaussian sigma 0.02, deterministic per (seed, name).
pub fn init_params(config: &MQFormerConfig, seed: u64) -> ParamStore {
    config.validate();
    let d = config.d_model;
    let mut p = ParamStore::new();
    p.insert_gaussian("mqf.tok_emb", &[config.vocab_size, d], seed);
    p.insert_gaussian("mqf.pos_emb", &[config.max_text_len, d], seed);
    p.insert_gaussian("mqf.query_emb", &[config.n_queries(), d], seed);
    for i in 0..config.n_layers {
        let l = format!("mqf.l{i}");
        for (ln, attn, d_kv) in [
            ("ln_attn", "attn", d),
            ("ln_cross_v", "cross_v", config.d_enc),
            ("ln_cross_g", "cross_g", config.d_q),
        ] {
            p.insert_ones(&format!("{l}.{ln}.gain"), &[d]);
            p.insert_zeros(&format!("{l}.{ln}.bias"), &[d]);
            p.insert_xavier(&format!("{l}.{attn}.wq"), d, d, seed);
            p.insert_xavier(&format!("{l}.{attn}.wk"), d_kv, d, seed);
            p.insert_xavier(&format!("{l}.{attn}.wv"), d_kv, d, seed);
            p.insert_xavier(&format!("{l}.{attn}.wo"), d, d, seed);
            for b in ["bq", "bk", "bv", "bo"] {
                p.insert_zeros(&format!("{l}.{attn}.{b}"), &[d]);
            }
        }
        for ffn in ["ffn_q", "ffn_t"] {
            p.insert_ones(&format!("{l}.ln_{ffn}.gain"), &[d]);
            p.insert_zeros(&format!("{l}.ln_{ffn}.bias"), &[d]);
            p.insert_xavier(&format!("{l}.{ffn}.w1"), d, 4 * d, seed);
            p.insert_zeros(&format!("{l}.{ffn}.b1"), &[4 * d]);
            p.insert_xavier(&format!("{l}.{ffn}.w2"), 4 * d, d, seed);
            p.insert_zeros(&format!("{l}.{ffn}.b2"), &[d]);
        }
    }
    p.insert_ones("mqf.ln_final.gain", &[d]);
    p.insert_zeros("mqf.ln_final.bias", &[d]);
    p.insert("itc.temperature", &[1], vec![0.07]);
    p.insert_xavier("head.itm.w1", 2 * d, d, seed);
    p.insert_zeros("head.itm.b1", &[d]);
    p.insert_xavier("head.itm.w2", d, 2, seed);
    p.insert_zeros("head.itm.b2", &[2]);
    p
}

/// Pooled and per-position outputs of one forward pass. `h_sp` / `h_ic`
/// are the states at the spatial and caption anchor tokens and exist only
/// when the segment does.
pub struct MQFormerOutput<'t> {
    pub query_states: Var<'t>,
    pub text_states: Var<'t>,
    pub h_v: Var<'t>,
    pub h_g: Var<'t>,
    pub h_i: Var<'t>,
    pub h_sp: Option<Var<'t>>,
    pub h_ic: Option<Var<'t>>,
    pub h_t: Option<Var<'t>>,
}

fn linear<'t>(x: Var<'t>, p: &BoundParams<'t>, w: &str, b: &str) -> Var<'t> {
    x.matmul(p.var(w)).add_bias(p.var(b))
}

fn layer_norm<'t>(x: Var<'t>, p: &BoundParams<'t>, prefix: &str, eps: f64) -> Var<'t> {
    x.layer_norm(p.var(&format!("{prefix}.gain")), p.var(&format!("{prefix}.bias")), eps)
}

fn attention_block<'t>(
    x: Var<'t>,
    kv: Var<'t>,
    p: &BoundParams<'t>,
    ln: &str,
    attn: &str,
    mask: &AttnMask,
    heads: usize,
    eps: f64,
) -> Var<'t> {
    let xn = layer_norm(x, p, ln, eps);
    let q = linear(xn, p, &format!("{attn}.wq"), &format!("{attn}.bq"));
    let k = linear(kv, p, &format!("{attn}.wk"), &format!("{attn}.bk"));
    let v = linear(kv, p, &format!("{attn}.wv"), &format!("{attn}.bv"));
    let att = masked_attention(q, k, v, mask, heads);
    let out = linear(att, p, &format!("{attn}.wo"), &format!("{attn}.bo"));
    x.add(out)
}

fn ffn_block<'t>(x: Var<'t>, p: &BoundParams<'t>, ln: &str, ffn: &str, eps: f64) -> Var<'t> {
    let xn = layer_norm(x, p, ln, eps);
    let h = linear(xn, p, &format!("{ffn}.w1"), &format!("{ffn}.b1")).relu();
    let out = linear(h, p, &format!("{ffn}.w2"), &format!("{ffn}.b2"));
    x.add(out)
}

/// One full pass over [queries | spatial | caption] under the objective's
/// self-attention mask. The text side may be empty (generative-stage use);
/// zero local feature rows run fine and leave the grounding cross-attention
/// at zero by the empty-attention convention.
pub fn forward<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &MQFormerConfig,
    features: &FeatureBundle,
    tokens: &TokenSequence,
    mask: &MaskMatrix,
) -> MQFormerOutput<'t> {
    forward_at(tape, params, config, features, tokens, mask, 0)
}

/// [`forward`] with text position embeddings starting at `pos_offset`.
/// A sequence whose fully blocked group was dropped outright computes the
/// same states for every remaining position as the full sequence would,
/// as long as the kept tokens retain their original position indices.
#[allow(clippy::too_many_arguments)]
pub fn forward_at<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &MQFormerConfig,
    features: &FeatureBundle,
    tokens: &TokenSequence,
    mask: &MaskMatrix,
    pos_offset: usize,
) -> MQFormerOutput<'t> {
    let (n_vq, n_gq) = (config.n_visual_queries, config.n_grounding_queries);
    let nq = n_vq + n_gq;
    let text_len = tokens.ids.len();
    assert!(
        pos_offset + text_len <= config.max_text_len,
        "text length {text_len} at offset {pos_offset} exceeds max {}",
        config.max_text_len
    );
    let len_spatial = tokens.segments.iter().filter(|s| matches!(s, Segment::Spatial)).count();
    let len_caption = text_len - len_spatial;
    assert_eq!(
        mask.layout,
        Layout::new(n_vq, n_gq, len_spatial, len_caption),
        "mask layout does not match the sequence"
    );

    let s_total = nq + text_len;
    assert_eq!(mask.mask.rows, s_total, "mask size {} vs sequence {s_total}", mask.mask.rows);

    // Input states: learned query embeddings, then token + position embeddings.
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    let tok = tape.embedding_lookup(params.var("mqf.tok_emb"), &ids);
    let pos = params.var("mqf.pos_emb").slice_rows(pos_offset, pos_offset + text_len);
    let text = tok.add(pos);
    let mut x = tape.concat(&[params.var("mqf.query_emb"), text], 0);

    let global = tape.constant(features.global.clone(), &[features.s_g, features.d_enc]);
    let local = tape.constant(features.local.clone(), &[features.local_rows, features.d_q]);
    let cross_v_mask = AttnMask::all_true(n_vq, features.s_g);
    let cross_g_mask = AttnMask::all_true(n_gq, features.local_rows);

    for i in 0..config.n_layers {
        let l = format!("mqf.l{i}");
        // Shared self-attention over the whole sequence.
        x = attention_block(
            x,
            x,
            params,
            &format!("{l}.ln_attn"),
            &format!("{l}.attn"),
            &mask.mask,
            config.n_heads,
            config.ln_eps,
        );
        // Independent cross-attentions for the two query groups, every layer.
        let xv = x.slice_rows(0, n_vq);
        let xg = x.slice_rows(n_vq, nq);
        let xv = attention_block(
            xv,
            global,
            params,
            &format!("{l}.ln_cross_v"),
            &format!("{l}.cross_v"),
            &cross_v_mask,
            config.n_heads,
            config.ln_eps,
        );
        let xg = attention_block(
            xg,
            local,
            params,
            &format!("{l}.ln_cross_g"),
            &format!("{l}.cross_g"),
            &cross_g_mask,
            config.n_heads,
            config.ln_eps,
        );
        // Shared query FFN, separate text FFN.
        let xq = tape.concat(&[xv, xg], 0);
        let xq = ffn_block(xq, params, &format!("{l}.ln_ffn_q"), &format!("{l}.ffn_q"), config.ln_eps);
        if text_len > 0 {
            let xt = x.slice_rows(nq, s_total);
            let xt = ffn_block(xt, params, &format!("{l}.ln_ffn_t"), &format!("{l}.ffn_t"), config.ln_eps);
            x = tape.concat(&[xq, xt], 0);
        } else {
            x = xq;
        }
    }
    let x = layer_norm(x, params, "mqf.ln_final", config.ln_eps);

    let query_states = x.slice_rows(0, nq);
    let text_states = x.slice_rows(nq, s_total);
    let h_v = x.slice_rows(0, n_vq).mean_pool(0);
    let h_g = x.slice_rows(n_vq, nq).mean_pool(0);
    let h_i = tape.concat(&[h_v, h_g], 0);
    let h_sp = (len_spatial > 0).then(|| text_states.row(0));
    let h_ic = (len_caption > 0).then(|| text_states.row(len_spatial));
    let h_t = match (h_sp, h_ic) {
        (Some(sp), Some(ic)) => Some(tape.concat(&[sp, ic], 0)),
        _ => None,
    };

    MQFormerOutput { query_states, text_states, h_v, h_g, h_i, h_sp, h_ic, h_t }
}

/// Temperature-scaled cosine similarity of two pooled vectors. A zero vector
/// normalizes to zero, so the similarity is defined as 0 there.
pub fn pooled_similarity<'t>(h_i: Var<'t>, h_t: Var<'t>, temperature: Var<'t>) -> Var<'t> {
    let d = h_i.len();
    assert_eq!(d, h_t.len(), "pooled vectors differ in length");
    let a = h_i.reshape(&[1, d]).normalize_rows();
    let b = h_t.reshape(&[1, d]).normalize_rows();
    a.mul(b).sum_all().scale_by(temperature.recip())
}

#[cfg(test)]
mod tests;
