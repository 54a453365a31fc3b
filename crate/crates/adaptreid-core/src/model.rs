//! Per-domain networks and the shared re-ID heads.
//!
//! Architecture (scaled for short-side images, all sizes divisible by 4):
//! - encoder: 7x7 stride-1 conv to `base_channels`, two stride-2 convs
//!   doubling channels each time, then residual blocks at 4x channels;
//! - decoder: two stride-2 transposed convs back to `base_channels`, a 7x7
//!   conv to 3 channels, tanh;
//! - attention net: same encoder-decoder shape with a 1-channel sigmoid head;
//! - discriminator: three stride-2 convs then a 1-channel logit map
//!   (patch-level real/fake scores);
//! - embedding head: global average pool, one fully connected layer to a
//!   128-dim vector, optionally L2-normalized;
//! - classifier head: fully connected to 128, batch norm, dropout, ReLU,
//!   fully connected to the identity logits.
//!
//! Generator and attention networks use instance normalization; only the
//! classifier head uses batch normalization. Both re-ID heads read the
//! source-domain encoder's feature map, never raw pixels.

use crate::error::{Error, Result};
use crate::nn::layers::{
    conv_in_relu, BatchNorm1d, Conv2d, ConvTranspose2d, ForwardCtx, Linear, ResidualBlock,
    INSTANCE_NORM_EPS,
};
use crate::nn::params::{ParamGroup, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::rng::rng_from_seed;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub embedding_dim: usize,
    /// Number of training identities; set by the trainer before building.
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub normalize_embeddings: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            num_residual_blocks: 3,
            image_height: 64,
            image_width: 32,
            embedding_dim: 128,
            num_classes: 1,
            dropout_rate: 0.5,
            normalize_embeddings: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "network.base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if self.image_height % DOWNSAMPLE_FACTOR != 0 || self.image_width % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Config(format!(
                "network image size {}x{} must be divisible by the downsampling factor {DOWNSAMPLE_FACTOR}",
                self.image_height, self.image_width
            )));
        }
        if self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("embedding_dim and num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "network.dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.base_channels * 4
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, 3, h, w] if *h == self.image_height && *w == self.image_width => Ok(()),
            other => Err(Error::Shape(format!(
                "expected (N,3,{},{}) input, got {:?}",
                self.image_height, self.image_width, other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res: Vec<ResidualBlock>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        cfg: &NetworkConfig,
    ) -> Self {
        let c = cfg.base_channels;
        Encoder {
            stem: Conv2d::new(store, rng, group, &format!("{name}.stem"), 3, c, 7, 1, 3),
            down1: Conv2d::new(store, rng, group, &format!("{name}.down1"), c, 2 * c, 3, 2, 1),
            down2: Conv2d::new(store, rng, group, &format!("{name}.down2"), 2 * c, 4 * c, 3, 2, 1),
            res: (0..cfg.num_residual_blocks)
                .map(|i| ResidualBlock::new(store, rng, group, &format!("{name}.res{i}"), 4 * c))
                .collect(),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut y = conv_in_relu(t, store, &self.stem, x)?;
        y = conv_in_relu(t, store, &self.down1, y)?;
        y = conv_in_relu(t, store, &self.down2, y)?;
        for block in &self.res {
            y = block.forward(t, store, y)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    out: Conv2d,
    activation: OutputActivation,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        cfg: &NetworkConfig,
        out_channels: usize,
        activation: OutputActivation,
    ) -> Self {
        let c = cfg.base_channels;
        Decoder {
            up1: ConvTranspose2d::new(store, rng, group, &format!("{name}.up1"), 4 * c, 2 * c, 3, 2, 1, 1),
            up2: ConvTranspose2d::new(store, rng, group, &format!("{name}.up2"), 2 * c, c, 3, 2, 1, 1),
            out: Conv2d::new(store, rng, group, &format!("{name}.out"), c, out_channels, 7, 1, 3),
            activation,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, feat: NodeId) -> Result<NodeId> {
        let mut y = self.up1.forward(t, store, feat)?;
        y = t.instance_norm(y, INSTANCE_NORM_EPS)?;
        y = t.relu(y);
        y = self.up2.forward(t, store, y)?;
        y = t.instance_norm(y, INSTANCE_NORM_EPS)?;
        y = t.relu(y);
        y = self.out.forward(t, store, y)?;
        Ok(match self.activation {
            OutputActivation::Tanh => t.tanh(y),
            OutputActivation::Sigmoid => t.sigmoid(y),
        })
    }
}

/// Attention network: encoder-decoder with a single-channel sigmoid output.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    enc: Encoder,
    dec: Decoder,
}

impl AttentionNet {
    /// The output bias starts positive so the initial mask is close to one:
    /// early composed images stay near the input, and the adversarial hue
    /// pressure then pushes the mask down exactly where the input betrays its
    /// source domain (the background), while foreground pixels stay claimed.
    const OUTPUT_BIAS_INIT: f64 = 2.0;

    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        cfg: &NetworkConfig,
    ) -> Self {
        let net = AttentionNet {
            enc: Encoder::new(store, rng, group, &format!("{name}.enc"), cfg),
            dec: Decoder::new(store, rng, group, &format!("{name}.dec"), cfg, 1, OutputActivation::Sigmoid),
        };
        let bias = store.value_mut(net.dec.out.b);
        for v in bias.data_mut() {
            *v = Self::OUTPUT_BIAS_INIT;
        }
        net
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let feat = self.enc.forward(t, store, x)?;
        self.dec.forward(t, store, feat)
    }
}

/// Patch discriminator: logit map, one score per receptive patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    out: Conv2d,
}

impl Discriminator {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        cfg: &NetworkConfig,
    ) -> Self {
        let c = cfg.base_channels;
        Discriminator {
            c1: Conv2d::new(store, rng, group, &format!("{name}.c1"), 3, c, 4, 2, 1),
            c2: Conv2d::new(store, rng, group, &format!("{name}.c2"), c, 2 * c, 4, 2, 1),
            c3: Conv2d::new(store, rng, group, &format!("{name}.c3"), 2 * c, 4 * c, 4, 2, 1),
            out: Conv2d::new(store, rng, group, &format!("{name}.out"), 4 * c, 1, 3, 1, 1),
        }
    }

    /// Raw logits; apply sigmoid to get scores. Plain convolutions: any
    /// normalization here would strip the channel statistics that carry the
    /// domain's color signature.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut y = self.c1.forward(t, store, x)?;
        y = t.leaky_relu(y, 0.2);
        y = self.c2.forward(t, store, y)?;
        y = t.leaky_relu(y, 0.2);
        y = self.c3.forward(t, store, y)?;
        y = t.leaky_relu(y, 0.2);
        self.out.forward(t, store, y)
    }

    /// Sigmoid scores in (0,1).
    pub fn score(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let logits = self.forward(t, store, x)?;
        Ok(t.sigmoid(logits))
    }
}

#[derive(Debug, Clone)]
pub struct EmbedHead {
    fc: Linear,
    normalize: bool,
}

impl EmbedHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        EmbedHead {
            fc: Linear::new(
                store,
                rng,
                ParamGroup::EmbedHead,
                "embed_head.fc",
                cfg.feature_channels(),
                cfg.embedding_dim,
            ),
            normalize: cfg.normalize_embeddings,
        }
    }

    /// Feature map (N,4c,h,w) -> embedding matrix (N,embedding_dim).
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, feat: NodeId) -> Result<NodeId> {
        let pooled = t.global_avg_pool(feat)?;
        let emb = self.fc.forward(t, store, pooled)?;
        if self.normalize {
            t.l2_normalize_rows(emb)
        } else {
            Ok(emb)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    fc1: Linear,
    bn: BatchNorm1d,
    fc2: Linear,
    dropout_rate: f64,
}

impl ClassifierHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        ClassifierHead {
            fc1: Linear::new(
                store,
                rng,
                ParamGroup::ClassifierHead,
                "class_head.fc1",
                cfg.feature_channels(),
                cfg.embedding_dim,
            ),
            bn: BatchNorm1d::new(store, ParamGroup::ClassifierHead, "class_head.bn", cfg.embedding_dim),
            fc2: Linear::new(
                store,
                rng,
                ParamGroup::ClassifierHead,
                "class_head.fc2",
                cfg.embedding_dim,
                cfg.num_classes,
            ),
            dropout_rate: cfg.dropout_rate,
        }
    }

    /// Feature map -> identity logits (N,num_classes).
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        feat: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let pooled = t.global_avg_pool(feat)?;
        let mut y = self.fc1.forward(t, store, pooled)?;
        y = self.bn.forward(t, store, y, ctx.training)?;
        y = t.dropout(y, self.dropout_rate, ctx.training, ctx.rng);
        y = t.relu(y);
        self.fc2.forward(t, store, y)
    }
}

/// One domain's networks. `attn` is absent in no-attention ablations.
#[derive(Debug, Clone)]
pub struct DomainNets {
    pub enc: Encoder,
    pub dec: Decoder,
    pub disc: Discriminator,
    pub attn: Option<AttentionNet>,
}

/// The full bundle: both domains plus the re-ID heads bound to the
/// source-domain encoder.
#[derive(Debug, Clone)]
pub struct DomainModelSet {
    pub config: NetworkConfig,
    pub src: DomainNets,
    pub tgt: DomainNets,
    pub embed_head: EmbedHead,
    pub class_head: ClassifierHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Build all networks with seeded initialization. Source and target halves
/// are architecturally identical; parameter values differ because draws are
/// sequential.
pub fn build_domain_models(
    config: &NetworkConfig,
    with_attention: bool,
    seed: u64,
) -> Result<(DomainModelSet, ParamStore)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(seed);
    let build_side = |store: &mut ParamStore, rng: &mut ChaCha8Rng, side: &str| -> DomainNets {
        let (ge, gg, gd, ga) = match side {
            "s" => (
                ParamGroup::EncoderSrc,
                ParamGroup::GeneratorSrc,
                ParamGroup::DiscriminatorSrc,
                ParamGroup::AttentionSrc,
            ),
            _ => (
                ParamGroup::EncoderTgt,
                ParamGroup::GeneratorTgt,
                ParamGroup::DiscriminatorTgt,
                ParamGroup::AttentionTgt,
            ),
        };
        DomainNets {
            enc: Encoder::new(store, rng, ge, &format!("enc_{side}"), config),
            dec: Decoder::new(store, rng, gg, &format!("gen_{side}"), config, 3, OutputActivation::Tanh),
            disc: Discriminator::new(store, rng, gd, &format!("disc_{side}"), config),
            attn: with_attention.then(|| AttentionNet::new(store, rng, ga, &format!("attn_{side}"), config)),
        }
    };
    let src = build_side(&mut store, &mut rng, "s");
    let tgt = build_side(&mut store, &mut rng, "t");
    let embed_head = EmbedHead::new(&mut store, &mut rng, config);
    let class_head = ClassifierHead::new(&mut store, &mut rng, config);
    Ok((DomainModelSet { config: config.clone(), src, tgt, embed_head, class_head }, store))
}

/// Stripped-down re-ID model: encoder plus both heads. Used by the
/// two-stage ablation's second stage and by the no-adaptation baseline.
#[derive(Debug, Clone)]
pub struct ReidNet {
    pub config: NetworkConfig,
    pub enc: Encoder,
    pub embed_head: EmbedHead,
    pub class_head: ClassifierHead,
}

pub fn build_reid_net(config: &NetworkConfig, seed: u64) -> Result<(ReidNet, ParamStore)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(seed);
    let enc = Encoder::new(&mut store, &mut rng, ParamGroup::EncoderSrc, "enc_s", config);
    let embed_head = EmbedHead::new(&mut store, &mut rng, config);
    let class_head = ClassifierHead::new(&mut store, &mut rng, config);
    Ok((ReidNet { config: config.clone(), enc, embed_head, class_head }, store))
}

impl ReidNet {
    pub fn embed(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        let feat = self.enc.forward(t, store, x)?;
        self.embed_head.forward(t, store, feat)
    }

    pub fn classify(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        let feat = self.enc.forward(t, store, x)?;
        self.class_head.forward(t, store, feat, ctx)
    }
}

impl DomainModelSet {
    pub fn nets(&self, side: Side) -> &DomainNets {
        match side {
            Side::Source => &self.src,
            Side::Target => &self.tgt,
        }
    }

    /// A(x): per-pixel foreground mask in [0,1].
    pub fn forward_attention(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        side: Side,
        x: NodeId,
    ) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        let attn = self
            .nets(side)
            .attn
            .as_ref()
            .ok_or_else(|| Error::Config("attention network is disabled in this model".into()))?;
        attn.forward(t, store, x)
    }

    pub fn encode(&self, t: &mut Tape, store: &ParamStore, side: Side, x: NodeId) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        self.nets(side).enc.forward(t, store, x)
    }

    pub fn decode(&self, t: &mut Tape, store: &ParamStore, side: Side, feat: NodeId) -> Result<NodeId> {
        self.nets(side).dec.forward(t, store, feat)
    }

    pub fn discriminate_score(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        side: Side,
        x: NodeId,
    ) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        self.nets(side).disc.score(t, store, x)
    }

    /// 128-dim embedding of an image through the source encoder.
    pub fn embed(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        let feat = self.src.enc.forward(t, store, x)?;
        self.embed_head.forward(t, store, feat)
    }

    /// Identity logits of an image through the source encoder.
    pub fn classify(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        self.config.check_image(t.value(x).shape())?;
        let feat = self.src.enc.forward(t, store, x)?;
        self.class_head.forward(t, store, feat, ctx)
    }

    /// Both heads from one encoder pass.
    pub fn reid_outputs(
        &self,
        t: &mut Tape,
        store: &mut ParamStore,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, NodeId)> {
        self.config.check_image(t.value(x).shape())?;
        let feat = self.src.enc.forward(t, store, x)?;
        let emb = self.embed_head.forward(t, store, feat)?;
        let logits = self.class_head.forward(t, store, feat, ctx)?;
        Ok((emb, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: 8,
            num_residual_blocks: 1,
            image_height: 16,
            image_width: 8,
            num_classes: 5,
            ..Default::default()
        }
    }

    fn rand_image(cfg: &NetworkConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let numel = n * 3 * cfg.image_height * cfg.image_width;
        Tensor::from_vec(
            &[n, 3, cfg.image_height, cfg.image_width],
            (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn encoder_decoder_restores_shape_and_range() {
        let cfg = small_config();
        let (models, store) = build_domain_models(&cfg, true, 1).unwrap();
        let mut t = Tape::new(false);
        let x = t.leaf(rand_image(&cfg, 1, 2));
        let feat = models.encode(&mut t, &store, Side::Source, x).unwrap();
        assert_eq!(t.value(feat).shape(), &[1, 32, 4, 2]);
        let img = models.decode(&mut t, &store, Side::Source, feat).unwrap();
        assert_eq!(t.value(img).shape(), &[1, 3, 16, 8]);
        assert!(t.value(img).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn attention_map_is_unit_interval_single_channel() {
        let cfg = small_config();
        let (models, store) = build_domain_models(&cfg, true, 1).unwrap();
        let mut t = Tape::new(false);
        let x = t.leaf(rand_image(&cfg, 2, 3));
        let a = models.forward_attention(&mut t, &store, Side::Source, x).unwrap();
        assert_eq!(t.value(a).shape(), &[2, 1, 16, 8]);
        assert!(t.value(a).data().iter().all(|v| (0.0..=1.0).contains(v)));
        // complement sums to exactly one per pixel
        let comp = t.one_minus(a);
        let s = t.add(a, comp).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let cfg = small_config();
        let (models, store) = build_domain_models(&cfg, true, 1).unwrap();
        let mut t = Tape::new(false);
        let x = t.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(models.forward_attention(&mut t, &store, Side::Source, x).is_err());
        assert!(models.embed(&mut t, &store, x).is_err());
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let cfg = small_config();
        let (_, s1) = build_domain_models(&cfg, true, 42).unwrap();
        let (_, s2) = build_domain_models(&cfg, true, 42).unwrap();
        let (_, s3) = build_domain_models(&cfg, true, 43).unwrap();
        assert_eq!(s1.len(), s2.len());
        let mut any_diff = false;
        for id in s1.ids() {
            assert_eq!(s1.value(id), s2.value(id), "{}", s1.get(id).name);
            if s1.value(id) != s3.value(id) {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds must differ somewhere");
    }

    #[test]
    fn source_and_target_halves_are_structurally_identical() {
        let cfg = small_config();
        let (_, store) = build_domain_models(&cfg, true, 7).unwrap();
        for (a, b) in [
            (ParamGroup::EncoderSrc, ParamGroup::EncoderTgt),
            (ParamGroup::GeneratorSrc, ParamGroup::GeneratorTgt),
            (ParamGroup::DiscriminatorSrc, ParamGroup::DiscriminatorTgt),
            (ParamGroup::AttentionSrc, ParamGroup::AttentionTgt),
        ] {
            assert_eq!(store.scalar_count(a), store.scalar_count(b));
            assert!(store.scalar_count(a) > 0);
        }
    }

    #[test]
    fn no_attention_build_omits_attention_params() {
        let cfg = small_config();
        let (models, store) = build_domain_models(&cfg, false, 7).unwrap();
        assert_eq!(store.scalar_count(ParamGroup::AttentionSrc), 0);
        let mut t = Tape::new(false);
        let x = t.leaf(rand_image(&cfg, 1, 2));
        assert!(models.forward_attention(&mut t, &store, Side::Source, x).is_err());
    }

    #[test]
    fn embedding_contract() {
        let cfg = small_config();
        let (models, store) = build_domain_models(&cfg, true, 5).unwrap();
        let mut t = Tape::new(false);
        let x = t.leaf(rand_image(&cfg, 3, 9));
        let e1 = models.embed(&mut t, &store, x).unwrap();
        let e2 = models.embed(&mut t, &store, x).unwrap();
        assert_eq!(t.value(e1).shape(), &[3, 128]);
        assert_eq!(t.value(e1).data(), t.value(e2).data());
        for i in 0..3 {
            let norm: f64 =
                t.value(e1).data()[i * 128..(i + 1) * 128].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn classifier_contract_dropout_and_softmax() {
        let cfg = small_config();
        let (models, mut store) = build_domain_models(&cfg, true, 5).unwrap();
        let x_val = rand_image(&cfg, 4, 10);
        let mut rng = rng_from_seed(77);

        // training mode: dropout makes repeated passes differ
        let mut t = Tape::new(false);
        let x = t.leaf(x_val.clone());
        let mut ctx = ForwardCtx::train(&mut rng);
        let l1 = models.classify(&mut t, &mut store, x, &mut ctx).unwrap();
        let l2 = models.classify(&mut t, &mut store, x, &mut ctx).unwrap();
        assert_eq!(t.value(l1).shape(), &[4, 5]);
        assert_ne!(t.value(l1).data(), t.value(l2).data());

        // eval mode: identical passes, softmax rows sum to one
        let mut t = Tape::new(false);
        let x = t.leaf(x_val);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let l1 = models.classify(&mut t, &mut store, x, &mut ctx).unwrap();
        let l2 = models.classify(&mut t, &mut store, x, &mut ctx).unwrap();
        assert_eq!(t.value(l1).data(), t.value(l2).data());
        let probs = crate::nn::softmax_rows(t.value(l1)).unwrap();
        for i in 0..4 {
            let s: f64 = probs.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    /// Gradient of mean(A(x)) with respect to sampled attention parameters
    /// matches central finite differences.
    #[test]
    fn attention_gradient_matches_finite_differences() {
        let cfg = NetworkConfig {
            base_channels: 8,
            num_residual_blocks: 1,
            image_height: 8,
            image_width: 8,
            num_classes: 2,
            ..Default::default()
        };
        let (models, mut store) = build_domain_models(&cfg, true, 33).unwrap();
        let x_val = rand_image(&cfg, 1, 44);

        let loss_value = |store: &ParamStore| -> f64 {
            let mut t = Tape::new(false);
            let x = t.leaf(x_val.clone());
            let a = models.forward_attention(&mut t, store, Side::Source, x).unwrap();
            let m = t.mean_all(a);
            t.value(m).item()
        };

        let mut t = Tape::new(true);
        let x = t.leaf(x_val.clone());
        let a = models.forward_attention(&mut t, &store, Side::Source, x).unwrap();
        let m = t.mean_all(a);
        let grads = t.backward(m).unwrap();

        let attn_params = store.trainable_in(|g| g == ParamGroup::AttentionSrc);
        let mut rng = rng_from_seed(55);
        let mut checked = 0;
        for _ in 0..6 {
            let pid = attn_params[rng.random_range(0..attn_params.len())];
            let idx = rng.random_range(0..store.value(pid).numel());
            let analytic = t.param_grad(&grads, pid).map(|g| g.data()[idx]).unwrap_or(0.0);
            let h = 1e-4;
            let orig = store.value(pid).data()[idx];
            store.value_mut(pid).data_mut()[idx] = orig + h;
            let up = loss_value(&store);
            store.value_mut(pid).data_mut()[idx] = orig - h;
            let down = loss_value(&store);
            store.value_mut(pid).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3 || (numeric - analytic).abs() < 1e-9,
                "param {:?} idx {idx}: numeric {numeric} vs analytic {analytic}",
                store.get(pid).name
            );
            checked += 1;
        }
        assert_eq!(checked, 6);
    }
}
