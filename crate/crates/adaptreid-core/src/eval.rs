//! Retrieval evaluation under the single-query protocol, attention quality
//! against ground-truth masks, foreground preservation, and file exports
//! (metrics CSV, embeddings CSV, ranking grids).
//!
//! Protocol: gallery entries sharing a query's identity AND camera are junk
//! and are skipped entirely during scoring; entries with the same identity
//! from another camera are good; everything else is a miss. Distances are
//! squared Euclidean; ties break by gallery index.

use crate::data::{stack_images, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{DomainModelSet, ReidNet};
use crate::nn::params::ParamStore;
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;
use image::{Rgb, RgbImage};
use std::fs;
use std::path::Path;

/// Anything that turns images into embedding rows in evaluation mode.
pub trait Embedder {
    fn embed_images(&self, store: &ParamStore, images: &[&LabeledImage]) -> Result<Tensor>;
}

fn embed_batched(
    images: &[&LabeledImage],
    mut f: impl FnMut(Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    const BATCH: usize = 32;
    if images.is_empty() {
        return Err(Error::Data("no images to embed".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for chunk in images.chunks(BATCH) {
        let batch = stack_images(chunk)?;
        let emb = f(batch)?;
        let (_, d) = emb.dims2()?;
        dim = d;
        rows.extend_from_slice(emb.data());
    }
    Ok(Tensor::from_vec(&[images.len(), dim], rows))
}

impl Embedder for DomainModelSet {
    fn embed_images(&self, store: &ParamStore, images: &[&LabeledImage]) -> Result<Tensor> {
        embed_batched(images, |batch| {
            let mut t = Tape::new(false);
            let x = t.leaf(batch);
            let e = self.embed(&mut t, store, x)?;
            Ok(t.value(e).clone())
        })
    }
}

impl Embedder for ReidNet {
    fn embed_images(&self, store: &ParamStore, images: &[&LabeledImage]) -> Result<Tensor> {
        embed_batched(images, |batch| {
            let mut t = Tape::new(false);
            let x = t.leaf(batch);
            let e = self.embed(&mut t, store, x)?;
            Ok(t.value(e).clone())
        })
    }
}

/// One embedding row per image, deterministic in evaluation mode.
pub fn extract_embeddings(
    embedder: &dyn Embedder,
    store: &ParamStore,
    images: &[&LabeledImage],
) -> Result<Tensor> {
    embedder.embed_images(store, images)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdCam {
    pub identity: u32,
    pub camera: u32,
}

impl From<&LabeledImage> for IdCam {
    fn from(img: &LabeledImage) -> Self {
        IdCam { identity: img.identity, camera: img.camera }
    }
}

/// Per-query ordered gallery with good/junk flags.
#[derive(Debug, Clone)]
pub struct QueryRanking {
    /// Gallery indices sorted by ascending distance, ties by index.
    pub order: Vec<usize>,
    /// Same identity, different camera (aligned with gallery indices).
    pub good: Vec<bool>,
    /// Same identity and camera: excluded from scoring.
    pub junk: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rank every gallery entry for every query.
pub fn rank_queries(
    query_emb: &Tensor,
    query_meta: &[IdCam],
    gallery_emb: &Tensor,
    gallery_meta: &[IdCam],
) -> Result<RankingResult> {
    let (nq, dq) = query_emb.dims2()?;
    let (ng, dg) = gallery_emb.dims2()?;
    if dq != dg {
        return Err(Error::Shape(format!("embedding dims differ: {dq} vs {dg}")));
    }
    if nq != query_meta.len() || ng != gallery_meta.len() {
        return Err(Error::Shape("metadata length mismatch".into()));
    }
    if ng == 0 {
        return Err(Error::Data("empty gallery".into()));
    }
    let mut queries = Vec::with_capacity(nq);
    for qi in 0..nq {
        let qrow = &query_emb.data()[qi * dq..(qi + 1) * dq];
        let mut order: Vec<usize> = (0..ng).collect();
        let dists: Vec<f64> = (0..ng)
            .map(|gi| sq_dist(qrow, &gallery_emb.data()[gi * dg..(gi + 1) * dg]))
            .collect();
        order.sort_by(|&a, &b| {
            dists[a].partial_cmp(&dists[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let q = query_meta[qi];
        let good = gallery_meta
            .iter()
            .map(|g| g.identity == q.identity && g.camera != q.camera)
            .collect();
        let junk = gallery_meta
            .iter()
            .map(|g| g.identity == q.identity && g.camera == q.camera)
            .collect();
        queries.push(QueryRanking { order, good, junk });
    }
    Ok(RankingResult { queries })
}

#[derive(Debug, Clone)]
pub struct CmcOutcome {
    pub values: Vec<f64>,
    /// Queries without a single good gallery entry, skipped with a warning.
    pub excluded_queries: usize,
}

/// CMC(k): fraction of scoreable queries whose first good match appears
/// within the top k non-junk entries.
pub fn cmc(rankings: &RankingResult, ks: &[usize]) -> Result<CmcOutcome> {
    if rankings.queries.is_empty() {
        return Err(Error::Data("no queries to score".into()));
    }
    let mut excluded = 0usize;
    let mut first_good_ranks = Vec::new();
    for q in &rankings.queries {
        if !q.good.iter().any(|&g| g) {
            excluded += 1;
            continue;
        }
        let mut position = 0usize;
        let mut hit = None;
        for &gi in &q.order {
            if q.junk[gi] {
                continue;
            }
            position += 1;
            if q.good[gi] {
                hit = Some(position);
                break;
            }
        }
        first_good_ranks.push(hit.expect("a good entry exists"));
    }
    if first_good_ranks.is_empty() {
        return Err(Error::Data("every query lacks a good gallery entry".into()));
    }
    let n = first_good_ranks.len() as f64;
    let values = ks
        .iter()
        .map(|&k| first_good_ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    Ok(CmcOutcome { values, excluded_queries: excluded })
}

#[derive(Debug, Clone, Copy)]
pub struct MapOutcome {
    pub value: f64,
    pub excluded_queries: usize,
}

/// Mean average precision over scoreable queries, junk removed.
pub fn map_score(rankings: &RankingResult) -> Result<MapOutcome> {
    if rankings.queries.is_empty() {
        return Err(Error::Data("no queries to score".into()));
    }
    let mut aps = Vec::new();
    let mut excluded = 0usize;
    for q in &rankings.queries {
        let total_good = q.good.iter().filter(|&&g| g).count();
        if total_good == 0 {
            excluded += 1;
            continue;
        }
        let mut position = 0usize;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for &gi in &q.order {
            if q.junk[gi] {
                continue;
            }
            position += 1;
            if q.good[gi] {
                hits += 1;
                ap += hits as f64 / position as f64;
            }
        }
        aps.push(ap / total_good as f64);
    }
    if aps.is_empty() {
        return Err(Error::Data("every query lacks a good gallery entry".into()));
    }
    Ok(MapOutcome { value: aps.iter().sum::<f64>() / aps.len() as f64, excluded_queries: excluded })
}

/// Mean IoU between thresholded attention maps and binary ground truth.
pub fn attention_iou(maps: &Tensor, gt_masks: &Tensor, threshold: f64) -> Result<f64> {
    maps.check_same_shape(gt_masks)?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("IoU threshold must be in (0,1), got {threshold}")));
    }
    let (n, c, h, w) = maps.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("attention maps must be single-channel, got {c}")));
    }
    let hw = h * w;
    let mut total = 0.0;
    for i in 0..n {
        let mut inter = 0usize;
        let mut union = 0usize;
        for p in 0..hw {
            let pred = maps.data()[i * hw + p] >= threshold;
            let gt = gt_masks.data()[i * hw + p] >= 0.5;
            if pred && gt {
                inter += 1;
            }
            if pred || gt {
                union += 1;
            }
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / n as f64)
}

/// Mean absolute error between input and composed image over ground-truth
/// foreground pixels (all channels).
pub fn foreground_preservation(input: &Tensor, composed: &Tensor, gt_mask: &Tensor) -> Result<f64> {
    input.check_same_shape(composed)?;
    let (n, c, h, w) = input.dims4()?;
    let (mn, mc, mh, mw) = gt_mask.dims4()?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask shape {:?} incompatible with images {:?}",
            gt_mask.shape(),
            input.shape()
        )));
    }
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for p in 0..hw {
            if gt_mask.data()[i * hw + p] >= 0.5 {
                for ch in 0..c {
                    let idx = (i * c + ch) * hw + p;
                    total += (input.data()[idx] - composed.data()[idx]).abs();
                }
                count += c;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("foreground preservation: ground-truth mask is empty".into()));
    }
    Ok(total / count as f64)
}

const BORDER: usize = 2;
const GAP: usize = 2;

fn blit(canvas: &mut RgbImage, img: &Tensor, x0: usize, y0: usize, border: Rgb<u8>) -> Result<()> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Shape("expected (3,H,W) thumbnail".into())),
    };
    if c != 3 {
        return Err(Error::Shape("expected 3-channel thumbnail".into()));
    }
    for y in 0..h + 2 * BORDER {
        for x in 0..w + 2 * BORDER {
            let inside =
                y >= BORDER && y < h + BORDER && x >= BORDER && x < w + BORDER;
            let px = if inside {
                let (iy, ix) = (y - BORDER, x - BORDER);
                Rgb([0, 1, 2].map(|ch| {
                    let v = img.data()[ch * h * w + iy * w + ix];
                    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
                }))
            } else {
                border
            };
            canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, px);
        }
    }
    Ok(())
}

/// One row per query: the probe (gray border) followed by the top-k non-junk
/// gallery entries, green border for a good match and red otherwise.
pub fn export_ranking_grid(
    queries: &[&LabeledImage],
    rankings: &RankingResult,
    gallery: &[&LabeledImage],
    top_k: usize,
    path: &Path,
) -> Result<()> {
    if queries.len() != rankings.queries.len() {
        return Err(Error::Shape("query/ranking count mismatch".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries to export".into()));
    }
    let (h, w) = queries[0].hw();
    let cell_w = w + 2 * BORDER + GAP;
    let cell_h = h + 2 * BORDER + GAP;
    let cols = top_k + 1;
    let mut canvas = RgbImage::from_pixel(
        (cols * cell_w - GAP) as u32,
        (queries.len() * cell_h - GAP) as u32,
        Rgb([255, 255, 255]),
    );
    for (row, (query, ranking)) in queries.iter().zip(&rankings.queries).enumerate() {
        blit(&mut canvas, &query.image, 0, row * cell_h, Rgb([128, 128, 128]))?;
        let mut col = 1usize;
        for &gi in &ranking.order {
            if ranking.junk[gi] {
                continue;
            }
            if col > top_k {
                break;
            }
            let color = if ranking.good[gi] { Rgb([0, 200, 0]) } else { Rgb([220, 0, 0]) };
            blit(&mut canvas, &gallery[gi].image, col * cell_w, row * cell_h, color)?;
            col += 1;
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    canvas.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// `image_path,identity,camera,e0..e(d-1)` rows.
pub fn write_embeddings_csv(
    path: &Path,
    images: &[&LabeledImage],
    embeddings: &Tensor,
) -> Result<()> {
    let (n, d) = embeddings.dims2()?;
    if n != images.len() {
        return Err(Error::Shape("embedding row count does not match images".into()));
    }
    let mut out = String::from("image_path,identity,camera");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (i, img) in images.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}",
            img.path.as_deref().unwrap_or(""),
            img.identity,
            img.camera
        ));
        for j in 0..d {
            out.push_str(&format!(",{}", embeddings.data()[i * d + j]));
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `metric,k,value` rows; `k` is empty for scalar metrics.
pub fn write_metrics_csv(path: &Path, rows: &[(String, Option<usize>, f64)]) -> Result<()> {
    let mut out = String::from("metric,k,value\n");
    for (metric, k, value) in rows {
        match k {
            Some(k) => out.push_str(&format!("{metric},{k},{value}\n")),
            None => out.push_str(&format!("{metric},,{value}\n")),
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
