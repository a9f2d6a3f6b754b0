//! Objective-specific self-attention visibility over the layout
//! [visual queries | grounding queries | spatial | caption].

use crate::tensor::AttnMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Itc,
    Itm,
    Icg,
    Msp,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Itc, Objective::Itm, Objective::Icg, Objective::Msp];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Itc => "itc",
            Objective::Itm => "itm",
            Objective::Icg => "icg",
            Objective::Msp => "msp",
        }
    }

    pub fn from_name(name: &str) -> Option<Objective> {
        Objective::ALL.iter().copied().find(|o| o.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_vq: usize,
    pub n_gq: usize,
    pub len_spatial: usize,
    pub len_caption: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    VisualQuery,
    GroundingQuery,
    Spatial,
    Caption,
}

impl Layout {
    pub fn new(n_vq: usize, n_gq: usize, len_spatial: usize, len_caption: usize) -> Self {
        Layout { n_vq, n_gq, len_spatial, len_caption }
    }

    pub fn total(&self) -> usize {
        self.n_vq + self.n_gq + self.len_spatial + self.len_caption
    }

    pub fn n_queries(&self) -> usize {
        self.n_vq + self.n_gq
    }

    pub fn group(&self, pos: usize) -> Group {
        if pos < self.n_vq {
            Group::VisualQuery
        } else if pos < self.n_vq + self.n_gq {
            Group::GroundingQuery
        } else if pos < self.n_vq + self.n_gq + self.len_spatial {
            Group::Spatial
        } else {
            debug_assert!(pos < self.total());
            Group::Caption
        }
    }

    /// Index of a caption position within the caption segment.
    fn caption_index(&self, pos: usize) -> usize {
        pos - self.n_vq - self.n_gq - self.len_spatial
    }
}

/// Boolean visibility matrix for one objective, with its layout attached.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub layout: Layout,
    pub objective: Objective,
    pub mask: AttnMask,
}

/// Builds the visibility rules of one pre-training objective:
///
/// * ITC: queries and text are mutually masked transformers — two solid
///   blocks, no cross-modal visibility.
/// * ITM: regionalized bi-directional mask — every group sees itself, visual
///   queries pair with the caption, grounding queries with the spatial
///   representation; the remaining pairs are blocked.
/// * ICG: queries see queries; caption tokens see the queries plus earlier
///   caption positions (causal); spatial rows and columns are fully blocked.
/// * MSP: queries and spatial tokens are mutually visible in every
///   combination; caption rows and columns are fully blocked.
pub fn build_mask(objective: Objective, layout: Layout) -> MaskMatrix {
    let s = layout.total();
    let mut bits = vec![false; s * s];
    for r in 0..s {
        for c in 0..s {
            bits[r * s + c] = allowed(objective, layout, r, c);
        }
    }
    MaskMatrix { layout, objective, mask: AttnMask::new(s, s, bits) }
}

fn allowed(objective: Objective, layout: Layout, r: usize, c: usize) -> bool {
    use Group::*;
    let (gr, gc) = (layout.group(r), layout.group(c));
    let is_query = |g: Group| matches!(g, VisualQuery | GroundingQuery);
    match objective {
        Objective::Itc => (is_query(gr) && is_query(gc)) || (!is_query(gr) && !is_query(gc)),
        Objective::Itm => {
            gr == gc
                || matches!((gr, gc), (VisualQuery, Caption) | (Caption, VisualQuery))
                || matches!((gr, gc), (GroundingQuery, Spatial) | (Spatial, GroundingQuery))
        }
        Objective::Icg => match gr {
            VisualQuery | GroundingQuery => is_query(gc),
            Spatial => false,
            Caption => match gc {
                VisualQuery | GroundingQuery => true,
                Spatial => false,
                Caption => layout.caption_index(c) <= layout.caption_index(r),
            },
        },
        Objective::Msp => {
            let in_scope = |g: Group| !matches!(g, Caption);
            in_scope(gr) && in_scope(gc)
        }
    }
}

/// Renders the matrix as a character grid with group separators; rows and
/// columns follow the [VQ | GQ | SP | CA] layout.
pub fn render_mask(m: &MaskMatrix) -> String {
    let layout = m.layout;
    let s = layout.total();
    let boundaries = [layout.n_vq, layout.n_vq + layout.n_gq, layout.n_vq + layout.n_gq + layout.len_spatial];
    let mut out = String::new();
    out.push_str(&format!(
        "{} mask, layout vq={} gq={} sp={} ca={}\n",
        m.objective.name(),
        layout.n_vq,
        layout.n_gq,
        layout.len_spatial,
        layout.len_caption
    ));
    let hline = |out: &mut String| {
        for c in 0..s {
            if boundaries.contains(&c) {
                out.push('+');
            }
            out.push('-');
        }
        out.push('\n');
    };
    for r in 0..s {
        if boundaries.contains(&r) {
            hline(&mut out);
        }
        for c in 0..s {
            if boundaries.contains(&c) {
                out.push('|');
            }
            out.push(if m.mask.allowed(r, c) { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}
