//! Identity-aware batch construction. A quartet is (anchor, positive,
//! negative, second negative): the positive shares the anchor's identity
//! but is a different image; the two negatives carry two further distinct
//! identities, so the second difference term compares a pure inter-class
//! pair. Domain pair batches are independent with-replacement draws for the
//! unpaired translation losses.

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Indices into the training set for one quartet batch.
#[derive(Debug, Clone)]
pub struct QuartetBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub second_negatives: Vec<usize>,
}

impl QuartetBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Groups a dataset by identity once so repeated sampling is cheap.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    by_identity: BTreeMap<u32, Vec<usize>>,
}

impl IdentityIndex {
    pub fn build(dataset: &[LabeledImage]) -> Self {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, img) in dataset.iter().enumerate() {
            by_identity.entry(img.identity).or_default().push(i);
        }
        IdentityIndex { by_identity }
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_identity.keys().copied()
    }

    fn anchor_eligible(&self) -> Vec<u32> {
        self.by_identity
            .iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Sample one quartet batch. Anchor identities are drawn uniformly from the
/// identities that own at least two images; each negative identity is drawn
/// uniformly from the remaining ones.
pub fn sample_quartet_batch(
    index: &IdentityIndex,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QuartetBatch> {
    if index.num_identities() < 3 {
        return Err(Error::Data(format!(
            "quartet sampling requires >= 3 identities, dataset has {}",
            index.num_identities()
        )));
    }
    let eligible = index.anchor_eligible();
    if eligible.is_empty() {
        return Err(Error::Data(
            "quartet sampling requires at least one identity with two or more images".into(),
        ));
    }
    let all_ids: Vec<u32> = index.identities().collect();
    let mut batch = QuartetBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
        second_negatives: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let anchor_id = eligible[rng.random_range(0..eligible.len())];
        let anchor_imgs = &index.by_identity[&anchor_id];
        let a = anchor_imgs[rng.random_range(0..anchor_imgs.len())];
        let p = loop {
            let cand = anchor_imgs[rng.random_range(0..anchor_imgs.len())];
            if cand != a {
                break cand;
            }
        };
        let neg_id = loop {
            let cand = all_ids[rng.random_range(0..all_ids.len())];
            if cand != anchor_id {
                break cand;
            }
        };
        let neg2_id = loop {
            let cand = all_ids[rng.random_range(0..all_ids.len())];
            if cand != anchor_id && cand != neg_id {
                break cand;
            }
        };
        let negs = &index.by_identity[&neg_id];
        let negs2 = &index.by_identity[&neg2_id];
        batch.anchors.push(a);
        batch.positives.push(p);
        batch.negatives.push(negs[rng.random_range(0..negs.len())]);
        batch.second_negatives.push(negs2[rng.random_range(0..negs2.len())]);
    }
    Ok(batch)
}

/// Independent with-replacement draws from each domain.
pub fn sample_domain_pair_batch(
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::Data("domain pair sampling from an empty set".into()));
    }
    let src = (0..batch_size).map(|_| rng.random_range(0..source_len)).collect();
    let tgt = (0..batch_size).map(|_| rng.random_range(0..target_len)).collect();
    Ok((src, tgt))
}
