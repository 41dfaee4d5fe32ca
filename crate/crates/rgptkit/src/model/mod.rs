//! The full region-conditioned pipeline: image encoder, feature refiner,
//! pooling, connector, and text decoder wired together for training and
//! decoding.
//!
//! The split of responsibilities is deliberate. [`Decoder`] only ever sees a
//! matrix of embedding rows; everything about images, regions, placeholders
//! and chat layout is resolved here, by [`PipelineModel`], which turns a
//! [`Conversation`] plus pixels into that matrix and routes gradients back
//! out to whichever components the active [`StagePlan`] marks trainable. The
//! image backbone is never in that set and no gradient is ever applied to it.

pub mod decoder;
pub mod optim;

pub use decoder::{Decoder, DecoderConfig};
pub use optim::{AdamW, Component, OptimConfig, Schedule, Stage, StagePlan};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap, Image, ImageProvider};
use crate::error::{Error, Result};
use crate::features::{
    adaptive_pool, adaptive_pool_backward, mask_pool, mask_pool_backward, Connector,
    ConnectorConfig, RefineCache, RefinementConfig, Refiner,
};
use crate::nn::{self, Activation, Parameterized};
use crate::region::{rasterize_region, RegionGrid};
use crate::seed::sub_rng;
use crate::sequence::{build_sequence, ChatFormat, Conversation, Element, MixedSequence};
use crate::tokenize::{Tokenize, WordTokenizer, EOS_ID};

/// Everything needed to rebuild the model architecture (weights aside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub refine: RefinementConfig,
    /// Grid the refined feature map is pooled down to before entering the
    /// sequence; one image slot per cell.
    pub pool_target: (usize, usize),
    pub connector_hidden: usize,
    /// Decoder embedding width; also the connector output width.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub chat: ChatFormat,
    /// Default generation budget for the assistant interface.
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Full-size layout: 336px inputs in 14px patches, refined 4x and pooled
    /// to 24x24, giving 576 image slots ahead of the text.
    pub fn default_desk() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            refine: RefinementConfig::default(),
            pool_target: (24, 24),
            connector_hidden: 256,
            embed_dim: 128,
            layers: 2,
            heads: 4,
            max_len: 1024,
            chat: ChatFormat::default(),
            max_new_tokens: 64,
            seed: 0,
        }
    }

    /// Miniature layout for tests: 48px inputs in 16px patches (3x3 grid,
    /// refined to 12x12, pooled to 2x2) and a one-layer decoder.
    pub fn tiny(seed: u64) -> Self {
        let mut backbone = BackboneConfig::default();
        backbone.input_size = 48;
        backbone.patch_size = 16;
        backbone.feature_dim = 16;
        backbone.seed = seed;
        let mut refine = RefinementConfig::default();
        refine.seed = seed;
        PipelineConfig {
            backbone,
            refine,
            pool_target: (2, 2),
            connector_hidden: 24,
            embed_dim: 32,
            layers: 1,
            heads: 2,
            max_len: 160,
            chat: ChatFormat::default(),
            max_new_tokens: 24,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.refine.validate()?;
        self.chat.validate()?;
        if self.pool_target.0 == 0 || self.pool_target.1 == 0 {
            return Err(Error::Config("pool_target sides must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be positive and divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Image slots each conversation consumes under this layout.
    pub fn image_slots(&self) -> usize {
        self.pool_target.0 * self.pool_target.1
    }
}

/// How [`PipelineModel::generate`] picks each next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    /// Highest-probability token, lowest id on ties. Deterministic.
    Greedy,
    /// Temperature-scaled sampling from the softmax, seeded so a given
    /// (seed, prompt) pair always yields the same text.
    Sample { temperature: f64, seed: u64 },
}

/// Visual-path activations for one image, kept for the backward pass.
pub struct VisualState {
    refine_cache: RefineCache,
    refined_h: usize,
    refined_w: usize,
    conn_cache: crate::features::ConnectorCache,
    /// Connector outputs for the pooled grid cells, row-major.
    image_rows: Array2<f64>,
    /// Connector outputs per declared region, in declaration order.
    region_rows: Array2<f64>,
    region_order: Vec<u32>,
    masks: Vec<RegionGrid>,
}

/// One conversation fully lowered to decoder inputs.
pub struct PreparedSample {
    pub seq: MixedSequence,
    pub rows: Array2<f64>,
    visual: VisualState,
}

pub struct PipelineModel {
    cfg: PipelineConfig,
    backbone: Backbone,
    refiner: Refiner,
    connector: Connector,
    decoder: Decoder,
    tokenizer: WordTokenizer,
    stage: Stage,
}

impl PipelineModel {
    pub fn new(cfg: PipelineConfig, tokenizer: WordTokenizer) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let refiner = Refiner::new(cfg.refine.clone(), cfg.backbone.feature_dim)?;
        let connector = Connector::new(ConnectorConfig {
            in_dim: refiner.out_dim(),
            hidden_dim: cfg.connector_hidden,
            out_dim: cfg.embed_dim,
            activation: Activation::Silu,
            seed: cfg.seed,
        })?;
        let decoder = Decoder::new(DecoderConfig {
            vocab_size: tokenizer.vocab_size(),
            embed_dim: cfg.embed_dim,
            layers: cfg.layers,
            heads: cfg.heads,
            max_len: cfg.max_len,
            seed: cfg.seed,
        })?;
        Ok(PipelineModel {
            cfg,
            backbone,
            refiner,
            connector,
            decoder,
            tokenizer,
            stage: Stage::Pretrain,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    /// Checksum of the frozen image encoder; stable across the model's life.
    pub fn backbone_checksum(&self) -> u64 {
        use crate::backbone::ImageEncoder;
        self.backbone.frozen_checksum()
    }

    /// Checksum over one trainable component's parameters.
    pub fn component_checksum(&mut self, c: Component) -> u64 {
        match c {
            Component::Refinement => nn::param_checksum(&mut self.refiner),
            Component::Connector => nn::param_checksum(&mut self.connector),
            Component::Decoder => nn::param_checksum(&mut self.decoder),
        }
    }

    /// Visits every learnable parameter, refiner first, then connector,
    /// then decoder. Checkpointing relies on this order being stable.
    pub fn for_each_param_all(&mut self, f: &mut dyn FnMut(nn::ParamSlot<'_>)) {
        self.refiner.for_each_param(f);
        self.connector.for_each_param(f);
        self.decoder.for_each_param(f);
    }

    /// Overwrites one named parameter tensor, checking the shape.
    pub fn load_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let mut found = false;
        let mut err: Option<Error> = None;
        self.for_each_param_all(&mut |slot| {
            if slot.name == name {
                found = true;
                if slot.shape != shape {
                    err = Some(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?} but the model expects {:?}",
                        shape, slot.shape
                    )));
                } else if data.len() != slot.value.len() {
                    err = Some(Error::Checkpoint(format!(
                        "tensor '{name}' carries {} values, expected {}",
                        data.len(),
                        slot.value.len()
                    )));
                } else {
                    slot.value.copy_from_slice(data);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !found {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' does not exist in this architecture"
            )));
        }
        Ok(())
    }

    /// Runs the visual path: encode, refine, pool to the slot grid, pool each
    /// declared region, and project everything through the connector.
    pub fn encode_visuals(&self, image: &Image, conv: &Conversation) -> Result<VisualState> {
        let feat = self.backbone.prepare_and_encode(image)?;
        let (refined, refine_cache) = self.refiner.forward_cached(&feat)?;
        let (rh, rw) = (refined.height(), refined.width());
        let pooled = adaptive_pool(&refined, self.cfg.pool_target)?;
        let (th, tw) = (pooled.height(), pooled.width());
        let dr = refined.dim();
        let slots = th * tw;

        let mut masks = Vec::with_capacity(conv.regions.len());
        let mut region_order = Vec::with_capacity(conv.regions.len());
        let mut stacked = Array2::zeros((slots + conv.regions.len(), dr));
        for i in 0..th {
            for j in 0..tw {
                stacked
                    .row_mut(i * tw + j)
                    .assign(&pooled.grid.slice(ndarray::s![i, j, ..]));
            }
        }
        for (r, spec) in conv.regions.iter().enumerate() {
            let mask = rasterize_region(spec, rh, rw, self.cfg.backbone.input_size)?;
            let vec = mask_pool(&refined, &mask)?;
            stacked.row_mut(slots + r).assign(&vec);
            masks.push(mask);
            region_order.push(spec.id);
        }

        let (out, conn_cache) = self.connector.forward_cached(&stacked)?;
        let image_rows = out.slice(ndarray::s![..slots, ..]).to_owned();
        let region_rows = out.slice(ndarray::s![slots.., ..]).to_owned();
        Ok(VisualState {
            refine_cache,
            refined_h: rh,
            refined_w: rw,
            conn_cache,
            image_rows,
            region_rows,
            region_order,
            masks,
        })
    }

    /// Lowers a conversation to the decoder input matrix: token rows from the
    /// embedding table, image slots from the pooled grid, region slots from
    /// their mask-pooled features.
    pub fn prepare(&self, conv: &Conversation, image: &Image) -> Result<PreparedSample> {
        let visual = self.encode_visuals(image, conv)?;
        let seq = build_sequence(conv, self.cfg.image_slots(), &self.cfg.chat, &self.tokenizer)?;
        let rows = self.rows_for(&seq, &visual)?;
        Ok(PreparedSample { seq, rows, visual })
    }

    fn rows_for(&self, seq: &MixedSequence, visual: &VisualState) -> Result<Array2<f64>> {
        let mut rows = Array2::zeros((seq.len(), self.cfg.embed_dim));
        for (i, el) in seq.elements.iter().enumerate() {
            match el {
                Element::Token(id) => rows.row_mut(i).assign(&self.decoder.embed_token(*id)?),
                Element::ImageSlot(s) => {
                    if *s >= visual.image_rows.nrows() {
                        return Err(Error::Sequence(format!(
                            "image slot {s} out of range for {} pooled cells",
                            visual.image_rows.nrows()
                        )));
                    }
                    rows.row_mut(i).assign(&visual.image_rows.row(*s));
                }
                Element::RegionSlot(id) => {
                    let r = visual
                        .region_order
                        .iter()
                        .position(|x| x == id)
                        .ok_or_else(|| {
                            Error::Sequence(format!("region {id} has no pooled features"))
                        })?;
                    rows.row_mut(i).assign(&visual.region_rows.row(r));
                }
            }
        }
        Ok(rows)
    }

    /// Mean cross-entropy over supervised positions. The token at position
    /// `i` is predicted by the logits at `i - 1`, so the returned gradient is
    /// nonzero only on rows immediately preceding a supervised position and
    /// exactly zero everywhere else.
    pub fn masked_cross_entropy(
        logits: &Array2<f64>,
        seq: &MixedSequence,
    ) -> Result<(f64, Array2<f64>)> {
        seq.check_invariants()?;
        if logits.nrows() != seq.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for a sequence of length {}",
                logits.nrows(),
                seq.len()
            )));
        }
        let m = seq.masked_count();
        if m == 0 {
            return Err(Error::NoSupervisedTokens);
        }
        let scale = 1.0 / m as f64;
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for i in 0..seq.len() {
            if !seq.loss_mask[i] {
                continue;
            }
            let target = seq.targets[i].expect("mask implies target") as usize;
            let row = logits.row(i - 1);
            let lse = nn::log_sum_exp(row.as_slice().unwrap());
            loss += (lse - row[target]) * scale;
            let mut drow = dlogits.row_mut(i - 1);
            for (j, &l) in row.iter().enumerate() {
                drow[j] += ((l - lse).exp() - if j == target { 1.0 } else { 0.0 }) * scale;
            }
        }
        Ok((loss, dlogits))
    }

    /// Forward pass and loss for one conversation, no gradients.
    pub fn loss(&self, conv: &Conversation, image: &Image) -> Result<f64> {
        let prep = self.prepare(conv, image)?;
        let (logits, _) = self.decoder.forward_rows(&prep.rows)?;
        let (loss, _) = Self::masked_cross_entropy(&logits, &prep.seq)?;
        Ok(loss)
    }

    /// Backward pass for one prepared sample. `dlogits` is consumed through
    /// the decoder; row gradients are then scattered to the embedding table
    /// (token rows) and back through connector, pooling and refiner (slot
    /// rows). Gradients accumulate into each component's buffers.
    fn backward_sample(
        &mut self,
        prep: &PreparedSample,
        cache: &decoder::DecoderCache,
        dlogits: &Array2<f64>,
    ) -> Result<()> {
        let drows = self.decoder.backward_rows(cache, dlogits);

        let visual = &prep.visual;
        let slots = visual.image_rows.nrows();
        let regions = visual.region_rows.nrows();
        let mut dstacked_out = Array2::zeros((slots + regions, self.cfg.embed_dim));
        for (i, el) in prep.seq.elements.iter().enumerate() {
            match el {
                Element::Token(id) => {
                    self.decoder.accumulate_embed_grad(*id, drows.row(i));
                }
                Element::ImageSlot(s) => {
                    let mut row = dstacked_out.row_mut(*s);
                    row += &drows.row(i);
                }
                Element::RegionSlot(id) => {
                    let r = visual
                        .region_order
                        .iter()
                        .position(|x| x == id)
                        .expect("validated during prepare");
                    let mut row = dstacked_out.row_mut(slots + r);
                    row += &drows.row(i);
                }
            }
        }

        let dstacked_in = self.connector.backward(&visual.conn_cache, &dstacked_out);
        let (rh, rw) = (visual.refined_h, visual.refined_w);
        let (th, tw) = self.cfg.pool_target;
        let dr = dstacked_in.ncols();
        let mut dpooled = Array3::zeros((th, tw, dr));
        for i in 0..th {
            for j in 0..tw {
                dpooled
                    .slice_mut(ndarray::s![i, j, ..])
                    .assign(&dstacked_in.row(i * tw + j));
            }
        }
        let mut drefined = adaptive_pool_backward(&dpooled, rh, rw);
        for (r, mask) in visual.masks.iter().enumerate() {
            let dvec = dstacked_in.row(slots + r).to_owned();
            drefined += &mask_pool_backward(&dvec, mask, rh, rw);
        }
        // The gradient that falls out of the refiner would belong to the
        // backbone; it is dropped because the backbone has no trainable state.
        let _ = self.refiner.backward(&visual.refine_cache, &drefined);
        Ok(())
    }

    /// One optimizer step over a batch: averages the per-sample losses,
    /// accumulates gradients for every component, then lets the optimizer
    /// update only the components listed in `plan`. Returns the batch loss.
    pub fn train_step(
        &mut self,
        batch: &[(&Conversation, &Image)],
        plan: &StagePlan,
        opt: &mut AdamW,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("training batch is empty".into()));
        }
        self.refiner.zero_grads();
        self.connector.zero_grads();
        self.decoder.zero_grads();

        let bscale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (conv, image) in batch {
            let prep = self.prepare(conv, image)?;
            let (logits, cache) = self.decoder.forward_rows(&prep.rows)?;
            let (loss, mut dlogits) = Self::masked_cross_entropy(&logits, &prep.seq)?;
            total += loss * bscale;
            dlogits *= bscale;
            self.backward_sample(&prep, &cache, &dlogits)?;
        }

        let PipelineModel {
            refiner,
            connector,
            decoder,
            ..
        } = self;
        let mut modules: Vec<&mut dyn Parameterized> = Vec::new();
        if plan.trains(Component::Refinement) {
            modules.push(refiner);
        }
        if plan.trains(Component::Connector) {
            modules.push(connector);
        }
        if plan.trains(Component::Decoder) {
            modules.push(decoder);
        }
        opt.step(&mut modules)?;
        self.stage = plan.stage;
        Ok(total)
    }

    /// Decoder input for a prompt: the assembled conversation followed by the
    /// assistant tag, ready for next-token prediction.
    fn prompt_rows(&self, conv: &Conversation, image: &Image) -> Result<Array2<f64>> {
        match conv.turns.last() {
            Some(t) if !t.is_target() => {}
            _ => {
                return Err(Error::Generation(
                    "prompt conversation must end with a user turn".into(),
                ))
            }
        }
        let prep = self.prepare(conv, image)?;
        let mut rows = prep.rows;
        for id in self.tokenizer.encode(&self.cfg.chat.assistant_tag) {
            rows.push_row(self.decoder.embed_token(id)?)
                .expect("row width fixed");
        }
        Ok(rows)
    }

    /// Autoregressive decoding. Stops at the end-of-sequence token, after
    /// `max_new` tokens, or when the context window fills, whichever comes
    /// first. `max_new` must be positive.
    pub fn generate(
        &self,
        conv: &Conversation,
        image: &Image,
        strategy: DecodeStrategy,
        max_new: usize,
    ) -> Result<String> {
        if max_new == 0 {
            return Err(Error::Generation(
                "generation budget must be at least one token".into(),
            ));
        }
        if let DecodeStrategy::Sample { temperature, .. } = strategy {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Generation(format!(
                    "sampling temperature must be positive and finite, got {temperature}"
                )));
            }
        }
        let mut rows = self.prompt_rows(conv, image)?;
        let mut rng = match strategy {
            DecodeStrategy::Sample { seed, .. } => Some(sub_rng(seed, &["sample"])),
            DecodeStrategy::Greedy => None,
        };
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_new {
            let (logits, _) = self.decoder.forward_rows(&rows)?;
            let last = logits.row(logits.nrows() - 1);
            let id = match strategy {
                DecodeStrategy::Greedy => argmax_lowest(last.as_slice().unwrap()),
                DecodeStrategy::Sample { temperature, .. } => sample_scaled(
                    last.as_slice().unwrap(),
                    temperature,
                    rng.as_mut().expect("sampling rng"),
                ),
            };
            if id == EOS_ID {
                break;
            }
            out.push(id);
            if rows.nrows() >= self.cfg.max_len {
                break;
            }
            rows.push_row(self.decoder.embed_token(id)?)
                .expect("row width fixed");
        }
        Ok(self.tokenizer.decode(&out))
    }

    /// Length-normalized log-likelihood of each candidate continuation after
    /// the assistant tag. Higher is more likely; with a fresh (uniform)
    /// decoder every candidate scores exactly `ln(1/V)`.
    pub fn score_candidates(
        &self,
        conv: &Conversation,
        image: &Image,
        candidates: &[String],
    ) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Eval("no candidates to score".into()));
        }
        let prefix = self.prompt_rows(conv, image)?;
        let mut scores = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let ids = self.tokenizer.encode(cand);
            if ids.is_empty() {
                return Err(Error::Eval(format!("candidate '{cand}' has no tokens")));
            }
            let mut rows = prefix.clone();
            for &id in &ids {
                rows.push_row(self.decoder.embed_token(id)?)
                    .expect("row width fixed");
            }
            let (logits, _) = self.decoder.forward_rows(&rows)?;
            let start = prefix.nrows();
            let mut total = 0.0;
            for (k, &id) in ids.iter().enumerate() {
                let row = logits.row(start + k - 1);
                let lse = nn::log_sum_exp(row.as_slice().unwrap());
                total += row[id as usize] - lse;
            }
            scores.push(total / ids.len() as f64);
        }
        Ok(scores)
    }

    /// Borrowing view that resolves image references through a provider and
    /// exposes the model behind [`RegionAssistant`].
    pub fn assistant<'a>(
        &'a self,
        provider: &'a dyn ImageProvider,
        strategy: DecodeStrategy,
    ) -> PipelineAssistant<'a> {
        PipelineAssistant {
            model: self,
            provider,
            strategy,
        }
    }

    /// Feature map of the refined grid for one image, exposed for tools that
    /// inspect the visual path in isolation.
    pub fn refined_features(&self, image: &Image) -> Result<FeatureMap> {
        let feat = self.backbone.prepare_and_encode(image)?;
        self.refiner.forward_cached(&feat).map(|(m, _)| m)
    }
}

fn argmax_lowest(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_scaled(row: &[f64], temperature: f64, rng: &mut impl Rng) -> u32 {
    let mut probs: Vec<f64> = row.iter().map(|&l| l / temperature).collect();
    nn::softmax_inplace(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Anything that can answer region-grounded conversations. Evaluation
/// protocols are written against this trait so they run identically over the
/// real pipeline and over scripted stand-ins.
pub trait RegionAssistant {
    /// Free-form reply to a conversation ending in a user turn.
    fn reply(&self, conv: &Conversation) -> Result<String>;
    /// Length-normalized log-likelihood per candidate reply.
    fn score_candidates(&self, conv: &Conversation, candidates: &[String]) -> Result<Vec<f64>>;
}

pub struct PipelineAssistant<'a> {
    model: &'a PipelineModel,
    provider: &'a dyn ImageProvider,
    strategy: DecodeStrategy,
}

impl RegionAssistant for PipelineAssistant<'_> {
    fn reply(&self, conv: &Conversation) -> Result<String> {
        let image = self.provider.load_image(&conv.image_ref)?;
        self.model
            .generate(conv, &image, self.strategy, self.model.cfg.max_new_tokens)
    }

    fn score_candidates(&self, conv: &Conversation, candidates: &[String]) -> Result<Vec<f64>> {
        let image = self.provider.load_image(&conv.image_ref)?;
        self.model.score_candidates(conv, &image, candidates)
    }
}
