//! Whole-object masking for masked spatial prediction: a selected object
//! block keeps its structural framing while the tag and all four coordinate
//! tokens become `[MASK]`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{TokenSequence, Vocabulary};

/// Independently selects each object span with probability `prob` and masks
/// its tag and coordinate tokens. When nothing gets selected and `force_one`
/// is set, one span is drawn uniformly so the objective is always defined.
/// Returns the masked sequence and position -> original id targets.
pub fn mask_whole_object(
    vocab: &Vocabulary,
    seq: &TokenSequence,
    prob: f64,
    force_one: bool,
    rng: &mut ChaCha8Rng,
) -> (TokenSequence, BTreeMap<usize, u32>) {
    let mut selected: Vec<usize> = (0..seq.object_spans.len())
        .filter(|_| rng.gen_bool(prob.clamp(0.0, 1.0)))
        .collect();
    if selected.is_empty() && force_one && !seq.object_spans.is_empty() {
        selected.push(rng.gen_range(0..seq.object_spans.len()));
    }

    let mut masked = seq.clone();
    let mut targets = BTreeMap::new();
    for si in selected {
        let (start, end, _) = seq.object_spans[si];
        for pos in start..end {
            let id = seq.ids[pos];
            if vocab.is_coord(id) || vocab.is_content(id) {
                targets.insert(pos, id);
                masked.ids[pos] = vocab.mask();
            }
        }
    }
    (masked, targets)
}
