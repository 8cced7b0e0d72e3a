//! The four-part 2D U-Net: encoder, decoder, classifier head and adversary
//! head, with block-level freezing, head weight copying and checkpointing.

mod checkpoint;

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ops::{self, NormCache};
use crate::nn::{ParamArena, ParamId, Part};

pub use checkpoint::{load_checkpoint, read_checkpoint_header, CheckpointHeader};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown block: {0}")]
    UnknownBlock(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Geometry and width of the U-Net backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub input_size: (usize, usize),
    /// Instance normalization after each 3x3 convolution. Off by default.
    #[serde(default)]
    pub instance_norm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 64,
            depth: 5,
            input_size: (256, 256),
            instance_norm: false,
        }
    }
}

impl UNetConfig {
    /// Laptop-scale profile used by the test suites and the `desk` preset.
    pub fn desk() -> Self {
        UNetConfig {
            base_width: 16,
            depth: 4,
            input_size: (64, 64),
            // at this scale the trunk needs normalization: without it the
            // minimax updates inflate feature scale and training collapses
            instance_norm: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.base_width < 1 || self.depth < 2 {
            return Err(ModelError::InvalidConfig(
                "base_width must be >= 1 and depth >= 2".into(),
            ));
        }
        let div = 1usize << (self.depth - 1);
        let (h, w) = self.input_size;
        if h % div != 0 || w % div != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input size {h}x{w} not divisible by 2^(depth-1) = {div}"
            )));
        }
        Ok(())
    }

    /// Channel width of the feature map consumed by both heads.
    pub fn penultimate_channels(&self) -> usize {
        2 * self.base_width
    }
}

/// A block: the convolution layers sharing one feature-map size, delimited by
/// max-pool or up-convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockId {
    pub part: Part,
    pub index: usize,
}

impl BlockId {
    pub fn encoder(index: usize) -> Self {
        BlockId { part: Part::Encoder, index }
    }
    pub fn decoder(index: usize) -> Self {
        BlockId { part: Part::Decoder, index }
    }
}

#[derive(Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    pad: usize,
    relu: bool,
    norm: bool,
}

#[derive(Clone, Copy)]
struct UpLayer {
    w: ParamId,
    b: ParamId,
}

struct EncBlock {
    convs: Vec<ConvLayer>,
}

struct DecBlock {
    up: UpLayer,
    convs: Vec<ConvLayer>, // empty for the top block (up-conv only)
}

struct Head {
    convs: Vec<ConvLayer>, // conv3, conv3, final 1x1
}

/// The split U-Net with all parameters in one arena.
pub struct ModelSplit {
    pub config: UNetConfig,
    pub seed: u64,
    arena: ParamArena,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    classifier: Head,
    adversary: Head,
    frozen_blocks: Vec<BlockId>,
}

pub struct ConvCache {
    x: Array4<f32>,
    out: Option<Array4<f32>>, // post-ReLU output, for ReLU layers
    norm: Option<NormCache>,
}

/// Everything needed to backpropagate through `psi` = decoder ∘ encoder.
pub struct PsiCache {
    enc: Vec<Vec<ConvCache>>,
    pools: Vec<Array4<u8>>,
    ups: Vec<Array4<f32>>,
    dec_convs: Vec<Vec<ConvCache>>,
    concat_c0: Vec<usize>,
}

pub struct HeadCache {
    convs: Vec<ConvCache>,
}

struct Builder<'a> {
    arena: &'a mut ParamArena,
    rng: ChaCha20Rng,
    norm: bool,
}

impl<'a> Builder<'a> {
    fn conv(&mut self, part: Part, block: usize, layer: usize, ic: usize, oc: usize, k: usize, relu: bool) -> ConvLayer {
        // Kaiming fan-in scaling, uniform variant: bounded tails avoid the
        // occasional outsized draw that a normal can produce in small layers
        let bound = (6.0 / (ic * k * k) as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        let w = ArrayD::from_shape_simple_fn(vec![oc, ic, k, k], || dist.sample(&mut self.rng) as f32);
        let b = ArrayD::zeros(vec![oc]);
        let wid = self.arena.push(format!("{part}.{block}.{layer}.weight"), part, block, w);
        let bid = self.arena.push(format!("{part}.{block}.{layer}.bias"), part, block, b);
        ConvLayer {
            w: wid,
            b: bid,
            pad: (k - 1) / 2,
            relu,
            // normalize the trunk only: the heads must be free to scale their
            // logits, otherwise the classifier can never become confident
            norm: self.norm && k > 1 && matches!(part, Part::Encoder | Part::Decoder),
        }
    }

    fn upconv(&mut self, part: Part, block: usize, layer: usize, ic: usize, oc: usize) -> UpLayer {
        let bound = (6.0 / ic as f64).sqrt();
        let dist = Uniform::new(-bound, bound);
        let w = ArrayD::from_shape_simple_fn(vec![ic, oc, 2, 2], || dist.sample(&mut self.rng) as f32);
        let b = ArrayD::zeros(vec![oc]);
        let wid = self.arena.push(format!("{part}.{block}.{layer}.weight"), part, block, w);
        let bid = self.arena.push(format!("{part}.{block}.{layer}.bias"), part, block, b);
        UpLayer { w: wid, b: bid }
    }
}

fn build_head(b: &mut Builder, part: Part, base: usize, num_classes: usize) -> Head {
    let convs = vec![
        b.conv(part, 0, 0, 2 * base, base, 3, true),
        b.conv(part, 0, 1, base, base, 3, true),
        b.conv(part, 0, 2, base, num_classes, 1, false),
    ];
    Head { convs }
}

/// Deterministically initialize a four-part U-Net.
pub fn build_model(config: UNetConfig, seed: u64) -> Result<ModelSplit, ModelError> {
    config.validate()?;
    let depth = config.depth;
    let base = config.base_width;
    let mut arena = ParamArena::new();
    let mut b = Builder {
        arena: &mut arena,
        rng: ChaCha20Rng::seed_from_u64(seed),
        norm: config.instance_norm,
    };

    let mut enc = Vec::with_capacity(depth);
    let mut prev = config.in_channels;
    for i in 0..depth {
        let c = base << i;
        let convs = vec![
            b.conv(Part::Encoder, i, 0, prev, c, 3, true),
            b.conv(Part::Encoder, i, 1, c, c, 3, true),
        ];
        enc.push(EncBlock { convs });
        prev = c;
    }

    // decoder block j lifts level depth-1-j to depth-2-j; the last block is
    // the top up-convolution alone (its convolutions belong to the heads)
    let mut dec = Vec::with_capacity(depth - 1);
    for j in 0..depth - 1 {
        let cin = base << (depth - 1 - j);
        let cout = base << (depth - 2 - j);
        let up = b.upconv(Part::Decoder, j, 0, cin, cout);
        let convs = if j < depth - 2 {
            vec![
                b.conv(Part::Decoder, j, 1, 2 * cout, cout, 3, true),
                b.conv(Part::Decoder, j, 2, cout, cout, 3, true),
            ]
        } else {
            Vec::new()
        };
        dec.push(DecBlock { up, convs });
    }

    let classifier = build_head(&mut b, Part::Classifier, base, config.num_classes);
    let adversary = build_head(&mut b, Part::Adversary, base, config.num_classes);

    Ok(ModelSplit {
        config,
        seed,
        arena,
        enc,
        dec,
        classifier,
        adversary,
        frozen_blocks: Vec::new(),
    })
}

impl ModelSplit {
    pub fn arena(&self) -> &ParamArena {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut ParamArena {
        &mut self.arena
    }

    pub fn frozen_blocks(&self) -> &[BlockId] {
        &self.frozen_blocks
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        let (eh, ew) = self.config.input_size;
        if c != self.config.in_channels || h != eh || w != ew {
            return Err(ModelError::ShapeMismatch(format!(
                "expected (B, {}, {eh}, {ew}), got {:?}",
                self.config.in_channels,
                x.dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::ShapeMismatch("input contains non-finite values".into()));
        }
        Ok(())
    }

    fn conv_apply(&self, layer: &ConvLayer, x: Array4<f32>) -> (Array4<f32>, ConvCache) {
        let w4 = view4(self.arena.value(layer.w));
        let b1 = view1(self.arena.value(layer.b));
        let mut y = ops::conv2d_forward(&x, &w4, &b1, layer.pad);
        let norm = if layer.norm {
            let (yn, cache) = ops::instance_norm_forward(&y);
            y = yn;
            Some(cache)
        } else {
            None
        };
        let out = if layer.relu {
            ops::relu_forward(&mut y);
            Some(y.clone())
        } else {
            None
        };
        (y, ConvCache { x, out, norm })
    }

    fn conv_backward(&mut self, layer: &ConvLayer, cache: &ConvCache, mut dout: Array4<f32>) -> Array4<f32> {
        if let Some(out) = &cache.out {
            ops::relu_backward(&mut dout, out);
        }
        if let Some(nc) = &cache.norm {
            dout = ops::instance_norm_backward(&dout, nc);
        }
        let w4 = view4(self.arena.value(layer.w)).to_owned();
        let (dx, dw, db) = ops::conv2d_backward(&cache.x, &w4, &dout, layer.pad);
        self.arena.accum_grad(layer.w, &dw.into_dyn());
        self.arena.accum_grad(layer.b, &db.into_dyn());
        dx
    }

    fn conv_chain(&self, layers: &[ConvLayer], mut z: Array4<f32>) -> (Array4<f32>, Vec<ConvCache>) {
        let mut caches = Vec::with_capacity(layers.len());
        for l in layers {
            let (y, c) = self.conv_apply(l, z);
            caches.push(c);
            z = y;
        }
        (z, caches)
    }

    fn conv_chain_backward(&mut self, layers: &[ConvLayer], caches: &[ConvCache], mut d: Array4<f32>) -> Array4<f32> {
        for (l, c) in layers.iter().zip(caches.iter()).rev() {
            d = self.conv_backward(l, c, d);
        }
        d
    }

    /// psi(x): encoder then decoder, returning the full-resolution feature map
    /// consumed by both heads, plus the cache for the backward pass.
    pub fn forward_features_cached(&self, x: &Array4<f32>) -> Result<(Array4<f32>, PsiCache), ModelError> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth - 1);
        let mut skips = Vec::with_capacity(depth - 1);
        let mut z = x.clone();
        for i in 0..depth {
            let (y, caches) = self.conv_chain(&self.enc[i].convs, z);
            enc_caches.push(caches);
            if i < depth - 1 {
                skips.push(y.clone());
                let (p, arg) = ops::maxpool2_forward(&y);
                pools.push(arg);
                z = p;
            } else {
                z = y;
            }
        }
        let mut ups = Vec::with_capacity(depth - 1);
        let mut dec_convs = Vec::with_capacity(depth - 1);
        let mut concat_c0 = Vec::with_capacity(depth - 1);
        for j in 0..depth - 1 {
            let up = &self.dec[j];
            ups.push(z.clone());
            let w4 = view4(self.arena.value(up.up.w));
            let b1 = view1(self.arena.value(up.up.b));
            let y = ops::convt2_forward(&z, &w4, &b1);
            concat_c0.push(y.dim().1);
            let cat = ops::concat_channels(&y, &skips[depth - 2 - j]);
            let (out, caches) = self.conv_chain(&up.convs, cat);
            dec_convs.push(caches);
            z = out;
        }
        Ok((
            z,
            PsiCache {
                enc: enc_caches,
                pools,
                ups,
                dec_convs,
                concat_c0,
            },
        ))
    }

    /// Evaluation-mode psi forward.
    pub fn forward_features(&self, x: &Array4<f32>) -> Result<Array4<f32>, ModelError> {
        Ok(self.forward_features_cached(x)?.0)
    }

    fn head(&self, part: Part) -> Result<&Head, ModelError> {
        match part {
            Part::Classifier => Ok(&self.classifier),
            Part::Adversary => Ok(&self.adversary),
            other => Err(ModelError::UnknownBlock(format!("{other} is not a head"))),
        }
    }

    /// Score a feature batch with the classifier or adversary head.
    pub fn forward_head_cached(&self, part: Part, feats: &Array4<f32>) -> Result<(Array4<f32>, HeadCache), ModelError> {
        let head = self.head(part)?;
        let cpen = self.config.penultimate_channels();
        if feats.dim().1 != cpen {
            return Err(ModelError::ShapeMismatch(format!(
                "head expects {cpen} feature channels, got {}",
                feats.dim().1
            )));
        }
        let (scores, convs) = self.conv_chain(&head.convs, feats.clone());
        Ok((scores, HeadCache { convs }))
    }

    pub fn forward_head(&self, part: Part, feats: &Array4<f32>) -> Result<Array4<f32>, ModelError> {
        Ok(self.forward_head_cached(part, feats)?.0)
    }

    /// Full eval-mode forward: psi then head.
    pub fn forward_scores(&self, part: Part, x: &Array4<f32>) -> Result<Array4<f32>, ModelError> {
        let feats = self.forward_features(x)?;
        self.forward_head(part, &feats)
    }

    /// Backpropagate through a head, accumulating parameter gradients and
    /// returning the gradient with respect to the features.
    pub fn backward_head(&mut self, part: Part, cache: &HeadCache, dscores: Array4<f32>) -> Result<Array4<f32>, ModelError> {
        let layers = self.head(part)?.convs.clone();
        Ok(self.conv_chain_backward(&layers, &cache.convs, dscores))
    }

    /// Backpropagate through psi from a feature gradient.
    pub fn backward_features(&mut self, cache: &PsiCache, dfeats: Array4<f32>) -> Array4<f32> {
        let depth = self.config.depth;
        let mut dskips: Vec<Option<Array4<f32>>> = vec![None; depth - 1];
        let mut d = dfeats;
        for j in (0..depth - 1).rev() {
            let block_convs = self.dec[j].convs.clone();
            if !block_convs.is_empty() {
                d = self.conv_chain_backward(&block_convs, &cache.dec_convs[j], d);
            }
            let (d_up, d_skip) = ops::split_channels(&d, cache.concat_c0[j]);
            let lvl = depth - 2 - j;
            dskips[lvl] = Some(match dskips[lvl].take() {
                Some(acc) => acc + &d_skip,
                None => d_skip,
            });
            let up = self.dec[j].up;
            let w4 = view4(self.arena.value(up.w)).to_owned();
            let (dx, dw, db) = ops::convt2_backward(&cache.ups[j], &w4, &d_up);
            self.arena.accum_grad(up.w, &dw.into_dyn());
            self.arena.accum_grad(up.b, &db.into_dyn());
            d = dx;
        }
        for i in (0..depth).rev() {
            if i < depth - 1 {
                d = ops::maxpool2_backward(&d, &cache.pools[i]);
                if let Some(ds) = &dskips[i] {
                    d += ds;
                }
            }
            let block_convs = self.enc[i].convs.clone();
            d = self.conv_chain_backward(&block_convs, &cache.enc[i], d);
        }
        d
    }

    /// Value-copy the classifier parameters into the adversary.
    pub fn copy_head(&mut self) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .classifier
            .convs
            .iter()
            .zip(self.adversary.convs.iter())
            .flat_map(|(c, a)| [(c.w, a.w), (c.b, a.b)])
            .collect();
        for (src, dst) in pairs {
            let v = self.arena.value(src).clone();
            self.arena.get_mut(dst).value = v;
        }
    }

    fn block_count(&self, part: Part) -> usize {
        match part {
            Part::Encoder => self.enc.len(),
            Part::Decoder => self.dec.len(),
            Part::Classifier | Part::Adversary => 1,
        }
    }

    /// Freeze exactly the listed blocks; everything else becomes trainable.
    pub fn set_frozen(&mut self, blocks: &[BlockId]) -> Result<(), ModelError> {
        for b in blocks {
            if b.index >= self.block_count(b.part) {
                return Err(ModelError::UnknownBlock(format!(
                    "{}.{} (part has {} blocks)",
                    b.part,
                    b.index,
                    self.block_count(b.part)
                )));
            }
        }
        for (_, p) in self.arena.iter_mut() {
            p.frozen = false;
        }
        for b in blocks {
            for (_, p) in self.arena.iter_mut() {
                if p.part == b.part && p.block == b.index {
                    p.frozen = true;
                }
            }
        }
        self.frozen_blocks = blocks.to_vec();
        Ok(())
    }

    /// The four disjoint trainable parameter groups; frozen parameters excluded.
    pub fn parameter_groups(&self) -> Vec<(Part, Vec<ParamId>)> {
        [Part::Encoder, Part::Decoder, Part::Classifier, Part::Adversary]
            .into_iter()
            .map(|part| {
                let ids = self
                    .arena
                    .iter()
                    .filter(|(_, p)| p.part == part && !p.frozen)
                    .map(|(id, _)| id)
                    .collect();
                (part, ids)
            })
            .collect()
    }
}

/// Per-pixel argmax with lowest-class-index tie-breaking.
pub fn predict(scores: &Array4<f32>) -> Result<Array3<u8>, ModelError> {
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(ModelError::ShapeMismatch("scores contain non-finite values".into()));
    }
    Ok(ops::argmax_classes(scores))
}

fn view4(a: &ArrayD<f32>) -> Array4<f32> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("parameter is not 4-d")
        .to_owned()
}

fn view1(a: &ArrayD<f32>) -> Array1<f32> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("parameter is not 1-d")
        .to_owned()
}
