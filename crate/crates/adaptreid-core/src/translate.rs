//! Attention-guided translation: the final mapping blends the raw generator
//! output with the input image through the attention mask,
//!
//! `composed = (1 - A(x)) .* G(E(x)) + A(x) .* x`
//!
//! so the mask selects which pixels keep their original (foreground) values
//! and which take the restyled (background) values. Cycle reconstruction
//! chains the raw generators by default; a flag cycles the composed images
//! instead for ablation.

use crate::error::Result;
use crate::model::{DomainModelSet, Side};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

/// All intermediate images of one translation.
#[derive(Debug, Clone, Copy)]
pub struct TranslationOutput {
    /// G(E(x)): the generator's full restyling of the input.
    pub raw_translation: NodeId,
    /// A(x); an all-zero mask when attention is disabled, which makes
    /// `composed` equal the raw translation.
    pub foreground_mask: NodeId,
    /// x_b = (1 - A(x)) .* raw_translation
    pub background_composite: NodeId,
    /// x_f = A(x) .* x
    pub foreground_composite: NodeId,
    /// x_b + x_f
    pub composed: NodeId,
}

/// The blend itself, shared by both directions.
pub fn compose(
    t: &mut Tape,
    mask: NodeId,
    x: NodeId,
    raw: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let fg = t.mul_bcast_channel(mask, x)?;
    let inv = t.one_minus(mask);
    let bg = t.mul_bcast_channel(inv, raw)?;
    let composed = t.add(bg, fg)?;
    Ok((bg, fg, composed))
}

fn translate_dir(
    models: &DomainModelSet,
    t: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    from: Side,
) -> Result<TranslationOutput> {
    let feat = models.encode(t, store, from, x)?;
    let raw = models.decode(t, store, from, feat)?;
    let mask = if models.nets(from).attn.is_some() {
        models.forward_attention(t, store, from, x)?
    } else {
        let (n, _, h, w) = t.value(x).dims4()?;
        t.leaf(Tensor::zeros(&[n, 1, h, w]))
    };
    let (bg, fg, composed) = compose(t, mask, x, raw)?;
    Ok(TranslationOutput {
        raw_translation: raw,
        foreground_mask: mask,
        background_composite: bg,
        foreground_composite: fg,
        composed,
    })
}

/// Source image to target style.
pub fn translate_s2t(
    models: &DomainModelSet,
    t: &mut Tape,
    store: &ParamStore,
    x: NodeId,
) -> Result<TranslationOutput> {
    translate_dir(models, t, store, x, Side::Source)
}

/// Target image to source style.
pub fn translate_t2s(
    models: &DomainModelSet,
    t: &mut Tape,
    store: &ParamStore,
    x: NodeId,
) -> Result<TranslationOutput> {
    translate_dir(models, t, store, x, Side::Target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleDirection {
    /// source -> target -> source
    S2t2s,
    /// target -> source -> target
    T2s2t,
}

/// One hop of the cycle chain: raw generator output of a side.
pub trait ImageMap {
    fn apply(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId>;
}

pub struct RawTranslation<'m> {
    pub models: &'m DomainModelSet,
    pub side: Side,
}

impl ImageMap for RawTranslation<'_> {
    fn apply(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let feat = self.models.encode(t, store, self.side, x)?;
        self.models.decode(t, store, self.side, feat)
    }
}

/// `second(first(x))`: the whole cycle is just this composition.
pub fn chain(
    t: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    first: &dyn ImageMap,
    second: &dyn ImageMap,
) -> Result<NodeId> {
    let mid = first.apply(t, store, x)?;
    second.apply(t, store, mid)
}

/// Round-trip reconstruction for the cycle loss. With `cycle_composed` the
/// attention-composed image re-enters the chain instead of the raw one.
pub fn cycle_reconstruct(
    models: &DomainModelSet,
    t: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    direction: CycleDirection,
    cycle_composed: bool,
) -> Result<NodeId> {
    let (from, to) = match direction {
        CycleDirection::S2t2s => (Side::Source, Side::Target),
        CycleDirection::T2s2t => (Side::Target, Side::Source),
    };
    let mid = if cycle_composed {
        translate_dir(models, t, store, x, from)?.composed
    } else {
        RawTranslation { models, side: from }.apply(t, store, x)?
    };
    RawTranslation { models, side: to }.apply(t, store, mid)
}

/// Values of every panel of one image's translation, evaluation mode.
pub fn translation_panels(
    models: &DomainModelSet,
    store: &ParamStore,
    image: &Tensor,
    from: Side,
) -> Result<Vec<(&'static str, Tensor)>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(crate::error::Error::Shape(format!("expected (3,H,W), got {:?}", image.shape()))),
    };
    let mut t = Tape::new(false);
    let x = t.leaf(image.reshape(&[1, c, h, w])?);
    let out = translate_dir(models, &mut t, store, x, from)?;
    let squeeze3 = |v: &Tensor| v.reshape(&[3, h, w]).expect("image-shaped");
    // mask rendered as a gray image in [-1,1]
    let mask = t.value(out.foreground_mask).reshape(&[h * w])?;
    let mut gray = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        gray.extend(mask.data().iter().map(|&m| m * 2.0 - 1.0));
    }
    Ok(vec![
        ("input", squeeze3(t.value(x))),
        ("mask", Tensor::from_vec(&[3, h, w], gray)),
        ("raw", squeeze3(t.value(out.raw_translation))),
        ("x_b", squeeze3(t.value(out.background_composite))),
        ("x_f", squeeze3(t.value(out.foreground_composite))),
        ("composed", squeeze3(t.value(out.composed))),
    ])
}

/// Side-by-side PNG: input | mask | raw | x_b | x_f | composed.
pub fn export_translation_grid(
    models: &DomainModelSet,
    store: &ParamStore,
    image: &Tensor,
    from: Side,
    path: &std::path::Path,
) -> Result<()> {
    use image::{Rgb, RgbImage};
    let panels = translation_panels(models, store, image, from)?;
    let (h, w) = match panels[0].1.shape() {
        [_, h, w] => (*h, *w),
        _ => unreachable!(),
    };
    const GAP: usize = 2;
    let mut canvas = RgbImage::from_pixel(
        (panels.len() * (w + GAP) - GAP) as u32,
        h as u32,
        Rgb([255, 255, 255]),
    );
    for (i, (_, panel)) in panels.iter().enumerate() {
        let x0 = i * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([0, 1, 2].map(|ch| {
                    let v = panel.data()[ch * h * w + y * w + x];
                    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
                }));
                canvas.put_pixel((x0 + x) as u32, y as u32, px);
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| crate::error::Error::io(parent, e))?;
    }
    canvas
        .save(path)
        .map_err(|e| crate::error::Error::Image { path: path.to_path_buf(), source: e })
}
