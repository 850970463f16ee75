use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::data_model::{Modality, TabularSchema};
use crate::nn::{
    self, BlockCache, FeatureTokenizer, LayerNorm, LayerNormCache, Linear, Params,
    TransformerBlock,
};
use crate::patching::{MaskPlan, TokenSequence};
use crate::{Error, Result};

/// Pre-norm ViT-style encoder with a learned [CLS] token and fixed
/// sinusoidal positional encodings indexed by original token positions.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    /// Input projection `token_dim -> embed_dim`; tabular tokens arrive
    /// already embedded, so it is absent there.
    pub proj: Option<Linear>,
    pub cls: Array2<f64>,
    pos: Array2<f64>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

/// `tokens` row 0 is the [CLS] output, rows 1.. the encoded input tokens.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub tokens: Array2<f64>,
    pub cls: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    selected_tokens: Array2<f64>,
    selected_rows: Vec<usize>,
    pub block_caches: Vec<BlockCache>,
    norm_cache: LayerNormCache,
}

impl EncodeCache {
    /// Row indices of the original sequence that were encoded.
    pub fn selected_rows(&self) -> &[usize] {
        &self.selected_rows
    }
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let proj = match cfg.modality {
            Modality::Tabular => None,
            _ => Some(Linear::new(cfg.token_dim, cfg.embed_dim, rng)),
        };
        let init = Normal::new(0.0, 0.02).expect("positive std");
        Encoder {
            proj,
            cls: Array2::from_shape_fn((1, cfg.embed_dim), |_| init.sample(rng)),
            pos: nn::sinusoidal_positions(cfg.num_positions, cfg.embed_dim),
            blocks: (0..cfg.depth)
                .map(|_| TransformerBlock::new(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(cfg.embed_dim),
            cfg: cfg.clone(),
        }
    }

    /// Encodes the visible subset (or the full sequence when `mask` is
    /// `None`), prepending the [CLS] token.
    pub fn encode(
        &self,
        seq: &TokenSequence,
        mask: Option<&MaskPlan>,
    ) -> Result<(EncoderOutput, EncodeCache)> {
        let expected_dim = self.proj.as_ref().map_or(self.cfg.embed_dim, Linear::in_dim);
        if seq.token_dim() != expected_dim {
            return Err(Error::Shape(format!(
                "token dim {} does not match encoder input {expected_dim}",
                seq.token_dim()
            )));
        }
        let selected_rows: Vec<usize> = match mask {
            Some(plan) => {
                if plan.num_tokens != seq.num_tokens() {
                    return Err(Error::Shape(format!(
                        "mask over {} tokens applied to sequence of {}",
                        plan.num_tokens,
                        seq.num_tokens()
                    )));
                }
                plan.visible_idx.clone()
            }
            None => (0..seq.num_tokens()).collect(),
        };

        let embed = self.cfg.embed_dim;
        let mut selected_tokens = Array2::zeros((selected_rows.len(), seq.token_dim()));
        for (i, &row) in selected_rows.iter().enumerate() {
            selected_tokens.row_mut(i).assign(&seq.tokens.row(row));
        }

        let projected = match &self.proj {
            Some(p) => p.forward(&selected_tokens),
            None => selected_tokens.clone(),
        };

        let mut x = Array2::zeros((selected_rows.len() + 1, embed));
        x.row_mut(0).assign(&self.cls.row(0));
        for (i, &row) in selected_rows.iter().enumerate() {
            let position = seq.positions[row];
            if position >= self.cfg.num_positions {
                return Err(Error::Shape(format!(
                    "position {position} exceeds encoder table {}",
                    self.cfg.num_positions
                )));
            }
            let encoded = &projected.row(i) + &self.pos.row(position);
            x.row_mut(i + 1).assign(&encoded);
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x);
            x = next;
            block_caches.push(cache);
        }
        let (out, norm_cache) = self.norm.forward(&x);
        let cls = out.row(0).to_owned();
        Ok((
            EncoderOutput { tokens: out, cls },
            EncodeCache { selected_tokens, selected_rows, block_caches, norm_cache },
        ))
    }

    /// Backpropagates through the encoder, accumulating into `g`; returns
    /// the gradient w.r.t. the selected (visible) input token rows.
    pub fn backward(
        &self,
        cache: &EncodeCache,
        d_tokens_out: &Array2<f64>,
        g: &mut Encoder,
    ) -> Array2<f64> {
        let mut d = self.norm.backward(&cache.norm_cache, d_tokens_out, &mut g.norm);
        for (idx, (block, bcache)) in
            self.blocks.iter().zip(&cache.block_caches).enumerate().rev()
        {
            d = block.backward(bcache, &d, &mut g.blocks[idx]);
        }
        g.cls.row_mut(0).scaled_add(1.0, &d.row(0));
        let d_embedded = d.slice(s![1.., ..]).to_owned();
        match &self.proj {
            Some(p) => p.backward(
                &cache.selected_tokens,
                &d_embedded,
                g.proj.as_mut().expect("grad store matches model"),
            ),
            None => d_embedded,
        }
    }
}

impl Params for Encoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v.push(self.cls.as_slice().expect("standard layout"));
        v.extend(self.blocks.params());
        v.extend(self.norm.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if let Some(p) = &mut self.proj {
            v.extend(p.params_mut());
        }
        v.push(self.cls.as_slice_mut().expect("standard layout"));
        v.extend(self.blocks.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}

/// Output head of the decoder.
#[derive(Debug, Clone)]
pub enum DecoderHead {
    /// Linear projection back to the raw token dimension (images, ECG).
    Dense(Linear),
    /// Shared scalar head for numeric features plus one logit head per
    /// categorical feature (full-sequence tabular reconstruction).
    Tabular { numeric: Linear, categorical: Vec<Linear> },
}

/// Lightweight reconstruction decoder: shared mask token, re-added
/// positional encodings, `decoder_depth` blocks.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: Array2<f64>,
    pos: Array2<f64>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: DecoderHead,
    num_positions: usize,
}

/// Reconstruction targets/predictions for one sample.
#[derive(Debug, Clone)]
pub enum Reconstruction {
    /// Predictions at masked positions only, `[n_masked, token_dim]`,
    /// rows in ascending masked-position order.
    Dense(Array2<f64>),
    /// Full-sequence tabular reconstruction: numeric scalar predictions
    /// (schema order) and per-categorical-feature logits.
    Tabular { numeric: Vec<f64>, logits: Vec<Array1<f64>> },
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    enc_tokens: Array2<f64>,
    block_caches: Vec<BlockCache>,
    norm_cache: LayerNormCache,
    normed: Array2<f64>,
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl Decoder {
    pub fn new(cfg: &EncoderConfig, schema: Option<&TabularSchema>, rng: &mut impl Rng) -> Self {
        let init = Normal::new(0.0, 0.02).expect("positive std");
        let head = match cfg.modality {
            Modality::Tabular => {
                let schema = schema.expect("tabular decoder needs a schema");
                DecoderHead::Tabular {
                    numeric: Linear::new(cfg.decoder_dim, 1, rng),
                    categorical: schema
                        .categorical
                        .iter()
                        .map(|c| Linear::new(cfg.decoder_dim, c.cardinality, rng))
                        .collect(),
                }
            }
            _ => DecoderHead::Dense(Linear::new(cfg.decoder_dim, cfg.token_dim, rng)),
        };
        Decoder {
            embed: Linear::new(cfg.embed_dim, cfg.decoder_dim, rng),
            mask_token: Array2::from_shape_fn((1, cfg.decoder_dim), |_| init.sample(rng)),
            pos: nn::sinusoidal_positions(cfg.num_positions, cfg.decoder_dim),
            blocks: (0..cfg.decoder_depth)
                .map(|_| TransformerBlock::new(cfg.decoder_dim, cfg.num_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(cfg.decoder_dim),
            head,
            num_positions: cfg.num_positions,
        }
    }

    /// Fills masked positions with the shared mask token and reconstructs.
    pub fn reconstruct(
        &self,
        enc: &EncoderOutput,
        mask: &MaskPlan,
    ) -> Result<(Reconstruction, DecoderCache)> {
        if mask.num_tokens != self.num_positions {
            return Err(Error::Shape(format!(
                "mask covers {} positions, decoder expects {}",
                mask.num_tokens, self.num_positions
            )));
        }
        if enc.tokens.nrows() != mask.visible_idx.len() + 1 {
            return Err(Error::Shape(format!(
                "latent sequence has {} tokens, mask implies {} visible (+1 cls)",
                enc.tokens.nrows(),
                mask.visible_idx.len()
            )));
        }
        let dec_dim = self.embed.out_dim();
        let z = self.embed.forward(&enc.tokens);

        let mut assembled = Array2::zeros((1 + self.num_positions, dec_dim));
        assembled.row_mut(0).assign(&z.row(0));
        for (rank, &p) in mask.visible_idx.iter().enumerate() {
            let with_pos = &z.row(rank + 1) + &self.pos.row(p);
            assembled.row_mut(1 + p).assign(&with_pos);
        }
        for &p in &mask.masked_idx {
            let with_pos = &self.mask_token.row(0) + &self.pos.row(p);
            assembled.row_mut(1 + p).assign(&with_pos);
        }

        let mut x = assembled;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x);
            x = next;
            block_caches.push(cache);
        }
        let (normed, norm_cache) = self.norm.forward(&x);

        let recon = match &self.head {
            DecoderHead::Dense(out) => {
                let mut masked_rows = Array2::zeros((mask.masked_idx.len(), dec_dim));
                for (i, &p) in mask.masked_idx.iter().enumerate() {
                    masked_rows.row_mut(i).assign(&normed.row(1 + p));
                }
                Reconstruction::Dense(out.forward(&masked_rows))
            }
            DecoderHead::Tabular { numeric, categorical } => {
                let n_num = self.num_positions - categorical.len();
                let feature_rows = normed.slice(s![1.., ..]).to_owned();
                let numeric_pred = numeric
                    .forward(&feature_rows.slice(s![..n_num, ..]).to_owned())
                    .column(0)
                    .to_vec();
                let logits = categorical
                    .iter()
                    .enumerate()
                    .map(|(j, head)| {
                        head.forward(&feature_rows.slice(s![n_num + j..n_num + j + 1, ..]).to_owned())
                            .row(0)
                            .to_owned()
                    })
                    .collect();
                Reconstruction::Tabular { numeric: numeric_pred, logits }
            }
        };
        Ok((
            recon,
            DecoderCache {
                enc_tokens: enc.tokens.clone(),
                block_caches,
                norm_cache,
                normed,
                visible: mask.visible_idx.clone(),
                masked: mask.masked_idx.clone(),
            },
        ))
    }

    /// Backward from reconstruction gradients to the encoder latents.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_recon: &Reconstruction,
        g: &mut Decoder,
    ) -> Array2<f64> {
        let dec_dim = self.embed.out_dim();
        let total = 1 + self.num_positions;
        let mut d_normed = Array2::zeros((total, dec_dim));

        match (&self.head, d_recon) {
            (DecoderHead::Dense(out), Reconstruction::Dense(d_pred)) => {
                let g_out = match &mut g.head {
                    DecoderHead::Dense(l) => l,
                    _ => unreachable!("grad store shape matches model"),
                };
                let mut masked_rows = Array2::zeros((cache.masked.len(), dec_dim));
                for (i, &p) in cache.masked.iter().enumerate() {
                    masked_rows.row_mut(i).assign(&cache.normed.row(1 + p));
                }
                let d_masked = out.backward(&masked_rows, d_pred, g_out);
                for (i, &p) in cache.masked.iter().enumerate() {
                    d_normed.row_mut(1 + p).assign(&d_masked.row(i));
                }
            }
            (
                DecoderHead::Tabular { numeric, categorical },
                Reconstruction::Tabular { numeric: d_num, logits: d_logits },
            ) => {
                let (g_num, g_cats) = match &mut g.head {
                    DecoderHead::Tabular { numeric, categorical } => (numeric, categorical),
                    _ => unreachable!("grad store shape matches model"),
                };
                let n_num = self.num_positions - categorical.len();
                for (i, &dv) in d_num.iter().enumerate() {
                    let x = cache.normed.slice(s![1 + i..2 + i, ..]).to_owned();
                    let dy = Array2::from_elem((1, 1), dv);
                    let dx = numeric.backward(&x, &dy, g_num);
                    d_normed.row_mut(1 + i).assign(&dx.row(0));
                }
                for (j, d_logit) in d_logits.iter().enumerate() {
                    let row = 1 + n_num + j;
                    let x = cache.normed.slice(s![row..row + 1, ..]).to_owned();
                    let dy = d_logit.clone().insert_axis(Axis(0));
                    let dx = categorical[j].backward(&x, &dy, &mut g_cats[j]);
                    d_normed.row_mut(row).assign(&dx.row(0));
                }
            }
            _ => unreachable!("reconstruction kind matches decoder head"),
        }

        let mut d = self.norm.backward(&cache.norm_cache, &d_normed, &mut g.norm);
        for (idx, (block, bcache)) in
            self.blocks.iter().zip(&cache.block_caches).enumerate().rev()
        {
            d = block.backward(bcache, &d, &mut g.blocks[idx]);
        }

        // scatter back: visible rows flow to the encoder, masked rows to
        // the shared mask token (positional encodings pass gradient through)
        let mut d_z = Array2::zeros((cache.visible.len() + 1, dec_dim));
        d_z.row_mut(0).assign(&d.row(0));
        for (rank, &p) in cache.visible.iter().enumerate() {
            d_z.row_mut(rank + 1).assign(&d.row(1 + p));
        }
        for &p in &cache.masked {
            g.mask_token.row_mut(0).scaled_add(1.0, &d.row(1 + p));
        }
        self.embed.backward(&cache.enc_tokens, &d_z, &mut g.embed)
    }
}

impl Params for Decoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.embed.params();
        v.push(self.mask_token.as_slice().expect("standard layout"));
        v.extend(self.blocks.params());
        v.extend(self.norm.params());
        match &self.head {
            DecoderHead::Dense(l) => v.extend(l.params()),
            DecoderHead::Tabular { numeric, categorical } => {
                v.extend(numeric.params());
                v.extend(categorical.params());
            }
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.embed.params_mut();
        v.push(self.mask_token.as_slice_mut().expect("standard layout"));
        v.extend(self.blocks.params_mut());
        v.extend(self.norm.params_mut());
        match &mut self.head {
            DecoderHead::Dense(l) => v.extend(l.params_mut()),
            DecoderHead::Tabular { numeric, categorical } => {
                v.extend(numeric.params_mut());
                v.extend(categorical.params_mut());
            }
        }
        v
    }
}

/// Encoder plus (for tabular) its feature tokenizer: the unit that flows
/// between pipeline stages.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub encoder: Encoder,
    pub tokenizer: Option<FeatureTokenizer>,
}

impl ModalityEncoder {
    pub fn new(cfg: &EncoderConfig, schema: Option<&TabularSchema>, rng: &mut impl Rng) -> Self {
        let tokenizer = match cfg.modality {
            Modality::Tabular => {
                let schema = schema.expect("tabular encoder needs a schema");
                let cards: Vec<usize> =
                    schema.categorical.iter().map(|c| c.cardinality).collect();
                Some(FeatureTokenizer::new(schema.numeric.len(), &cards, cfg.embed_dim, rng))
            }
            _ => None,
        };
        ModalityEncoder { encoder: Encoder::new(cfg, rng), tokenizer }
    }

    pub fn modality(&self) -> Modality {
        self.encoder.cfg.modality
    }
}

impl Params for ModalityEncoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        if let Some(t) = &self.tokenizer {
            v.extend(t.params());
        }
        v.extend(self.encoder.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if let Some(t) = &mut self.tokenizer {
            v.extend(t.params_mut());
        }
        v.extend(self.encoder.params_mut());
        v
    }
}

/// Full Stage-I model: encoder (+tokenizer) and reconstruction decoder.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    pub base: ModalityEncoder,
    pub decoder: Decoder,
}

/// One prepared training sample for Stage I.
#[derive(Debug, Clone)]
pub enum TrainSample {
    /// Raw patch tokens (localizer/CMR stacks, ECG).
    Dense(TokenSequence),
    /// Normalized numeric values and categorical indices; they are both
    /// the tokenizer input and the reconstruction target.
    Tabular { numeric: Vec<f64>, categorical: Vec<usize> },
}

impl TrainSample {
    pub fn num_tokens(&self) -> usize {
        match self {
            TrainSample::Dense(seq) => seq.num_tokens(),
            TrainSample::Tabular { numeric, categorical } => numeric.len() + categorical.len(),
        }
    }
}

impl MaskedAutoencoder {
    pub fn new(cfg: &EncoderConfig, schema: Option<&TabularSchema>, rng: &mut impl Rng) -> Self {
        MaskedAutoencoder {
            base: ModalityEncoder::new(cfg, schema, rng),
            decoder: Decoder::new(cfg, schema, rng),
        }
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.base.encoder.cfg
    }

    /// Masked-reconstruction loss for one sample; when `g` is given the
    /// gradients are accumulated into it.
    pub fn sample_loss(
        &self,
        sample: &TrainSample,
        mask: &MaskPlan,
        mut g: Option<&mut MaskedAutoencoder>,
    ) -> Result<f64> {
        match sample {
            TrainSample::Dense(seq) => {
                let (enc, enc_cache) = self.base.encoder.encode(seq, Some(mask))?;
                let (recon, dec_cache) = self.decoder.reconstruct(&enc, mask)?;
                let pred = match &recon {
                    Reconstruction::Dense(pred) => pred,
                    _ => unreachable!("dense modality"),
                };
                let mut target = Array2::zeros(pred.raw_dim());
                for (i, &p) in mask.masked_idx.iter().enumerate() {
                    target.row_mut(i).assign(&seq.tokens.row(p));
                }
                let (loss, d_pred) = mae_loss_dense(pred, &target);
                if let Some(g) = g.as_deref_mut() {
                    let d_enc = self.decoder.backward(
                        &dec_cache,
                        &Reconstruction::Dense(d_pred),
                        &mut g.decoder,
                    );
                    self.base.encoder.backward(&enc_cache, &d_enc, &mut g.base.encoder);
                }
                Ok(loss)
            }
            TrainSample::Tabular { numeric, categorical } => {
                let tokenizer = self.base.tokenizer.as_ref().expect("tabular model");
                let (tokens, tok_cache) = tokenizer.forward(numeric, categorical)?;
                let n = tokens.nrows();
                let seq = TokenSequence::new(tokens, (0..n).collect(), Modality::Tabular)?;
                let (enc, enc_cache) = self.base.encoder.encode(&seq, Some(mask))?;
                let (recon, dec_cache) = self.decoder.reconstruct(&enc, mask)?;
                let (num_pred, logits) = match &recon {
                    Reconstruction::Tabular { numeric, logits } => (numeric, logits),
                    _ => unreachable!("tabular modality"),
                };
                let (loss, d_num, d_logits) =
                    mae_loss_tabular(num_pred, numeric, logits, categorical);
                if let Some(g) = g.as_deref_mut() {
                    let d_enc = self.decoder.backward(
                        &dec_cache,
                        &Reconstruction::Tabular { numeric: d_num, logits: d_logits },
                        &mut g.decoder,
                    );
                    let d_visible =
                        self.base.encoder.backward(&enc_cache, &d_enc, &mut g.base.encoder);
                    // scatter visible-row gradients back to all feature slots
                    let mut d_tokens = Array2::zeros((n, seq.token_dim()));
                    for (i, &row) in enc_cache.selected_rows().iter().enumerate() {
                        d_tokens.row_mut(row).assign(&d_visible.row(i));
                    }
                    tokenizer.backward(
                        &tok_cache,
                        &d_tokens,
                        g.base.tokenizer.as_mut().expect("grad store matches"),
                    );
                }
                Ok(loss)
            }
        }
    }
}

impl Params for MaskedAutoencoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.base.params();
        v.extend(self.decoder.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.base.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }
}

/// Mean squared error over masked tokens only; returns the gradient
/// w.r.t. the predictions.
pub fn mae_loss_dense(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(pred.dim(), target.dim(), "prediction/target shape mismatch");
    let count = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.mapv(|v| v * v).sum() / count;
    let d_pred = diff.mapv(|v| 2.0 * v / count);
    (loss, d_pred)
}

/// Full-sequence tabular loss: mean squared error over numeric features
/// plus mean cross-entropy over categorical features, equal weight.
pub fn mae_loss_tabular(
    numeric_pred: &[f64],
    numeric_truth: &[f64],
    logits: &[Array1<f64>],
    categorical_truth: &[usize],
) -> (f64, Vec<f64>, Vec<Array1<f64>>) {
    assert_eq!(numeric_pred.len(), numeric_truth.len());
    assert_eq!(logits.len(), categorical_truth.len());
    let n_num = numeric_pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut d_num = Vec::with_capacity(numeric_pred.len());
    for (&p, &t) in numeric_pred.iter().zip(numeric_truth) {
        loss += (p - t) * (p - t) / n_num;
        d_num.push(2.0 * (p - t) / n_num);
    }

    let n_cat = logits.len().max(1) as f64;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (logit, &truth) in logits.iter().zip(categorical_truth) {
        let lse = nn::log_sum_exp(logit.view());
        loss += (lse - logit[truth]) / n_cat;
        let mut d = logit.mapv(|v| (v - lse).exp() / n_cat);
        d[truth] -= 1.0 / n_cat;
        d_logits.push(d);
    }
    (loss, d_num, d_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_grad, max_relative_error};
    use crate::patching::sample_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_dense_cfg() -> EncoderConfig {
        EncoderConfig {
            modality: Modality::Ecg,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.5,
            mlp_ratio: 2,
            patch_size: 6,
            num_positions: 4,
            token_dim: 6,
        }
    }

    fn random_seq(cfg: &EncoderConfig, rng: &mut ChaCha20Rng) -> TokenSequence {
        let tokens = Array2::from_shape_fn((cfg.num_positions, cfg.token_dim), |_| {
            rng.gen_range(-1.0..1.0)
        });
        TokenSequence::new(tokens, (0..cfg.num_positions).collect(), cfg.modality).unwrap()
    }


    #[test]
    fn encode_shapes_with_reference_localizer_config() {
        let cfg = EncoderConfig::reference(Modality::Localizer);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let encoder = Encoder::new(&cfg, &mut rng);
        let cohort = crate::synthetic::generate_cohort_in_memory(1, 42).unwrap();
        let seq = crate::patching::patchify_image(
            cohort.subjects[0].localizer.as_ref().unwrap(),
            16,
        )
        .unwrap();
        let mask = sample_mask(196, 0.75, &mut rng).unwrap();
        let (out, _) = encoder.encode(&seq, Some(&mask)).unwrap();
        assert_eq!(out.tokens.dim(), (50, 768), "49 visible + [CLS]");
        assert_eq!(out.cls.len(), 768);

        // same input, same weights -> identical outputs
        let (again, _) = encoder.encode(&seq, Some(&mask)).unwrap();
        assert_eq!(out.tokens, again.tokens);
    }

    #[test]
    fn cls_is_invariant_to_visible_order_with_positions_carried() {
        let cfg = tiny_dense_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let encoder = Encoder::new(&cfg, &mut rng);
        let seq = random_seq(&cfg, &mut rng);
        let (out, _) = encoder.encode(&seq, None).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut tokens = Array2::zeros((4, cfg.token_dim));
        let mut positions = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            tokens.row_mut(i).assign(&seq.tokens.row(p));
            positions[i] = seq.positions[p];
        }
        let permuted = TokenSequence { tokens, positions, modality: cfg.modality };
        let (out_p, _) = encoder.encode(&permuted, None).unwrap();
        for (a, b) in out.cls.iter().zip(out_p.cls.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruct_shapes_and_finiteness() {
        let cfg = tiny_dense_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mae = MaskedAutoencoder::new(&cfg, None, &mut rng);
        let seq = random_seq(&cfg, &mut rng);
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let (enc, _) = mae.base.encoder.encode(&seq, Some(&mask)).unwrap();
        let (recon, _) = mae.decoder.reconstruct(&enc, &mask).unwrap();
        match recon {
            Reconstruction::Dense(pred) => {
                assert_eq!(pred.dim(), (2, 6));
                assert!(pred.iter().all(|v| v.is_finite()));
            }
            _ => panic!("dense head expected"),
        }

        // inconsistent mask (wrong visible count) is rejected
        let bad = MaskPlan {
            visible_idx: vec![0],
            masked_idx: vec![1, 2, 3],
            num_tokens: 4,
        };
        assert!(mae.decoder.reconstruct(&enc, &bad).is_err());
    }

    #[test]
    fn mae_loss_identities() {
        let a = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 * 0.1);
        let (loss, grad) = mae_loss_dense(&a, &a);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let b = a.mapv(|v| v + 1.0);
        let (loss, _) = mae_loss_dense(&b, &a);
        assert!((loss - 1.0).abs() < 1e-12);

        let logits = vec![Array1::zeros(4)];
        let (loss, _, _) = mae_loss_tabular(&[], &[], &logits, &[2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12, "uniform logits give ln 4");
    }

    #[test]
    fn dense_mae_gradients_match_finite_differences() {
        let cfg = tiny_dense_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut mae = MaskedAutoencoder::new(&cfg, None, &mut rng);
        let seq = random_seq(&cfg, &mut rng);
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let sample = TrainSample::Dense(seq);

        let mut g = mae.clone();
        g.zero();
        mae.sample_loss(&sample, &mask, Some(&mut g)).unwrap();
        let fd = finite_difference_grad(&mut mae, 1e-4, |m| {
            m.sample_loss(&sample, &mask, None).unwrap()
        });
        let err = max_relative_error(&g.flat(), &fd);
        assert!(err < 1e-4, "max relative error {err:.2e}");
    }

    #[test]
    fn tabular_mae_gradients_match_finite_differences() {
        let schema = TabularSchema {
            numeric: vec![
                crate::data_model::NumericFeature { name: "a".into(), mean: 0.0, std: 1.0 },
                crate::data_model::NumericFeature { name: "b".into(), mean: 0.0, std: 1.0 },
            ],
            categorical: vec![
                crate::data_model::CategoricalFeature { name: "c".into(), cardinality: 3 },
                crate::data_model::CategoricalFeature { name: "d".into(), cardinality: 2 },
            ],
            phenotype_names: crate::synthetic::phenotype_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            inject_phenotypes: false,
        };
        let cfg = EncoderConfig {
            modality: Modality::Tabular,
            embed_dim: 12,
            depth: 2,
            num_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            mask_ratio: 0.5,
            mlp_ratio: 2,
            patch_size: 0,
            num_positions: 4,
            token_dim: 12,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut mae = MaskedAutoencoder::new(&cfg, Some(&schema), &mut rng);
        let sample = TrainSample::Tabular { numeric: vec![0.4, -1.2], categorical: vec![2, 0] };
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();

        let mut g = mae.clone();
        g.zero();
        mae.sample_loss(&sample, &mask, Some(&mut g)).unwrap();
        let fd = finite_difference_grad(&mut mae, 1e-4, |m| {
            m.sample_loss(&sample, &mask, None).unwrap()
        });
        let err = max_relative_error(&g.flat(), &fd);
        assert!(err < 1e-4, "max relative error {err:.2e}");
    }

    #[test]
    fn masked_only_supervision_ignores_visible_targets() {
        // The loss reads targets only at masked positions: recomputing it
        // against a sequence whose *visible* entries were perturbed (with
        // the encoding held fixed) gives the identical value.
        let cfg = tiny_dense_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mae = MaskedAutoencoder::new(&cfg, None, &mut rng);
        let seq = random_seq(&cfg, &mut rng);
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();

        let (enc, _) = mae.base.encoder.encode(&seq, Some(&mask)).unwrap();
        let (recon, _) = mae.decoder.reconstruct(&enc, &mask).unwrap();
        let pred = match recon {
            Reconstruction::Dense(p) => p,
            _ => unreachable!(),
        };
        let target_from = |s: &TokenSequence| {
            let mut target = Array2::zeros(pred.raw_dim());
            for (i, &p) in mask.masked_idx.iter().enumerate() {
                target.row_mut(i).assign(&s.tokens.row(p));
            }
            target
        };
        let mut perturbed = seq.clone();
        for &v in &mask.visible_idx {
            perturbed.tokens.row_mut(v).mapv_inplace(|x| x + 3.5);
        }
        let (base, _) = mae_loss_dense(&pred, &target_from(&seq));
        let (with_perturbed_visible, _) = mae_loss_dense(&pred, &target_from(&perturbed));
        assert_eq!(base, with_perturbed_visible);
    }
}
