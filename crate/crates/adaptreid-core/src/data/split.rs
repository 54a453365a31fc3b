//! Identity-disjoint train/test partitioning and query/gallery construction
//! for the single-query protocol. Gallery entries sharing a query's identity
//! and camera are "junk" and excluded from scoring at evaluation time; the
//! split only guarantees that every query identity exists in the gallery.

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::rng_derived;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Fraction of identities that go to training.
    pub train_identity_fraction: f64,
    pub queries_per_identity: usize,
    pub split_seed: u64,
    /// Restrict queries to one camera (gallery takes the other views), the
    /// "camera X as query" style of protocol.
    pub query_camera: Option<u32>,
    /// Restrict the gallery to one camera.
    pub gallery_camera: Option<u32>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            train_identity_fraction: 0.5,
            queries_per_identity: 2,
            split_seed: 0,
            query_camera: None,
            gallery_camera: None,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_identity_fraction) {
            return Err(Error::Config(format!(
                "eval.train_identity_fraction must be in [0,1], got {}",
                self.train_identity_fraction
            )));
        }
        if self.queries_per_identity == 0 {
            return Err(Error::Config("eval.queries_per_identity must be >= 1".into()));
        }
        Ok(())
    }

    /// The identity partition, deterministic in the seed. Returned as
    /// (train_ids, test_ids); the same identity set always splits the same
    /// way, so per-domain datasets of a synthetic pair partition coherently.
    pub fn partition_identities(&self, mut ids: Vec<u32>) -> (Vec<u32>, Vec<u32>) {
        ids.sort_unstable();
        ids.dedup();
        let mut rng = rng_derived(self.split_seed, &[0x5117]);
        ids.shuffle(&mut rng);
        let train_count = (self.train_identity_fraction * ids.len() as f64).round() as usize;
        let test = ids.split_off(train_count.min(ids.len()));
        (ids, test)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitWarnings {
    /// Identities with one image: kept as gallery distractors, never queried.
    pub single_image_identities: usize,
    /// Identities seen from one camera only: their matches are all junk under
    /// the protocol, so their queries will be excluded at scoring time.
    pub single_camera_identities: usize,
    /// Test identities dropped because a camera restriction left them without
    /// a query/gallery pair.
    pub dropped_identities: usize,
}

#[derive(Debug)]
pub struct DatasetSplits {
    pub train: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    pub gallery: Vec<LabeledImage>,
    pub warnings: SplitWarnings,
}

/// Split one dataset by identity into train and test, then build
/// query/gallery lists from the test identities.
pub fn split_train_query_gallery(
    dataset: &[LabeledImage],
    config: &ProtocolConfig,
) -> Result<DatasetSplits> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let ids: Vec<u32> = dataset.iter().map(|i| i.identity).collect();
    let (train_ids, test_ids) = config.partition_identities(ids);
    split_with_partition(dataset, config, &train_ids, &test_ids)
}

/// Same as [`split_train_query_gallery`] with an explicit identity partition
/// (used to apply one partition coherently across the two domains).
pub fn split_with_partition(
    dataset: &[LabeledImage],
    config: &ProtocolConfig,
    train_ids: &[u32],
    test_ids: &[u32],
) -> Result<DatasetSplits> {
    let train: Vec<LabeledImage> = dataset
        .iter()
        .filter(|i| train_ids.contains(&i.identity))
        .cloned()
        .collect();

    let mut by_id: BTreeMap<u32, Vec<&LabeledImage>> = BTreeMap::new();
    for img in dataset.iter().filter(|i| test_ids.contains(&i.identity)) {
        by_id.entry(img.identity).or_default().push(img);
    }

    let mut warnings = SplitWarnings::default();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (_, mut images) in by_id {
        images.sort_by_key(|i| (i.camera, i.path.clone()));
        if images.len() == 1 {
            warnings.single_image_identities += 1;
            gallery.push(images[0].clone());
            continue;
        }
        let cameras: Vec<u32> = {
            let mut c: Vec<u32> = images.iter().map(|i| i.camera).collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        if cameras.len() == 1 {
            warnings.single_camera_identities += 1;
        }
        let q_cam = match config.query_camera {
            Some(c) if cameras.contains(&c) => c,
            Some(_) => {
                warnings.dropped_identities += 1;
                gallery.extend(images.iter().map(|i| (*i).clone()));
                continue;
            }
            None => cameras[0],
        };
        let mut q_count = 0usize;
        let mut id_queries = Vec::new();
        let mut id_gallery = Vec::new();
        for img in &images {
            if img.camera == q_cam && q_count < config.queries_per_identity {
                id_queries.push((*img).clone());
                q_count += 1;
            } else {
                id_gallery.push((*img).clone());
            }
        }
        if id_gallery.is_empty() {
            // keep at least one image on the gallery side
            id_gallery.push(id_queries.pop().expect("len >= 2"));
        }
        if let Some(gc) = config.gallery_camera {
            id_gallery.retain(|i| i.camera == gc);
            if id_gallery.is_empty() {
                warnings.dropped_identities += 1;
                gallery.extend(images.iter().map(|i| (*i).clone()));
                continue;
            }
        }
        query.extend(id_queries);
        gallery.extend(id_gallery);
    }

    // invariant: every query identity appears in the gallery
    for q in &query {
        debug_assert!(gallery.iter().any(|g| g.identity == q.identity));
    }
    Ok(DatasetSplits { train, query, gallery, warnings })
}

/// Training pools and evaluation splits for a two-domain dataset.
///
/// When the two domains share identities (synthetic pairs) one partition is
/// applied to both, so an identity is never seen in training on one side and
/// tested on the other. Disjoint identity spaces (separate real datasets)
/// are partitioned independently.
#[derive(Debug)]
pub struct DomainPools {
    /// Labeled source-domain training images.
    pub source_train: Vec<LabeledImage>,
    /// Unlabeled-use target-domain training pool for the translation losses.
    pub target_train: Vec<LabeledImage>,
    /// Target-domain retrieval splits of the held-out identities.
    pub target_query: Vec<LabeledImage>,
    pub target_gallery: Vec<LabeledImage>,
    /// Source-domain images of the held-out identities (for translation
    /// quality measurements on unseen identities).
    pub source_test: Vec<LabeledImage>,
    pub warnings: SplitWarnings,
}

pub fn build_domain_pools(
    source: &[LabeledImage],
    target: &[LabeledImage],
    config: &ProtocolConfig,
) -> Result<DomainPools> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("both domains must be non-empty to build pools".into()));
    }
    let src_ids: Vec<u32> = source.iter().map(|i| i.identity).collect();
    let (train_ids, test_ids) = config.partition_identities(src_ids);
    let shared = target.iter().any(|i| train_ids.contains(&i.identity) || test_ids.contains(&i.identity));
    let (tgt_train_ids, tgt_test_ids) = if shared {
        (train_ids.clone(), test_ids.clone())
    } else {
        config.partition_identities(target.iter().map(|i| i.identity).collect())
    };
    let src_split = split_with_partition(source, config, &train_ids, &test_ids)?;
    let tgt_split = split_with_partition(target, config, &tgt_train_ids, &tgt_test_ids)?;
    let mut source_test = src_split.query;
    source_test.extend(src_split.gallery);
    Ok(DomainPools {
        source_train: src_split.train,
        target_train: tgt_split.train,
        target_query: tgt_split.query,
        target_gallery: tgt_split.gallery,
        source_test,
        warnings: tgt_split.warnings,
    })
}
