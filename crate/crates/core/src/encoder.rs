//! Deterministic forward-only MAE-style encoder.
//!
//! Weights are drawn from seeded uniform distributions, so the encoder needs
//! no checkpoint. The forward pass records every layer's tokens together with
//! each head's post-softmax attention and value matrices.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Error, Result};
use crate::image::{Image, MAX_VALUE};
use crate::seed::{derive_seed, round_half_away};
use crate::store::{TensorArchive, TensorRecord};

const LAYER_NORM_EPS: f64 = 1e-6;
/// Models whose block weights exceed this many scalars regenerate them per call.
const WEIGHT_CACHE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub masking_ratio: f64,
    /// Seeds the weights, the CLS vector, and nothing else.
    pub seed: u64,
    /// Seeds the visible-patch selection.
    pub mask_seed: u64,
    pub include_cls: bool,
}

impl EncoderConfig {
    /// ViT-Base geometry: 224x224 input, 16-pixel patches, 12 layers of 12
    /// heads over a 768-wide embedding, 75% masking.
    pub fn vit_base() -> Self {
        EncoderConfig {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            masking_ratio: 0.75,
            seed: 0,
            mask_seed: 0,
            include_cls: true,
        }
    }

    /// Small geometry for fast end-to-end runs: 64 patches of 8 pixels,
    /// 16 visible, 4 layers of 4 heads.
    pub fn desk() -> Self {
        EncoderConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            masking_ratio: 0.75,
            seed: 0,
            mask_seed: 0,
            include_cls: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn num_visible(&self) -> usize {
        visible_count(self.num_patches(), self.masking_ratio)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(config("image and patch sizes must be positive"));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(config("2-D sinusoidal positions need embed_dim divisible by 4"));
        }
        if self.num_layers == 0 {
            return Err(config("num_layers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.masking_ratio) {
            return Err(config(format!("masking ratio {} outside [0, 1)", self.masking_ratio)));
        }
        if self.num_visible() == 0 && !self.include_cls {
            return Err(config("masking leaves no tokens"));
        }
        Ok(())
    }
}

/// Splits an `H x W x 3` image into `(H/n)(W/n)` flattened `n x n x 3`
/// patches in raster order; each patch is flattened row, column, channel.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Vec<f64>>> {
    if patch_size == 0 || image.height() % patch_size != 0 || image.width() % patch_size != 0 {
        return Err(config(format!(
            "image {}x{} is not divisible by patch size {patch_size}",
            image.height(),
            image.width()
        )));
    }
    let (rows, cols, ch) = (image.height() / patch_size, image.width() / patch_size, image.channels());
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut p = Vec::with_capacity(patch_size * patch_size * ch);
            for y in pr * patch_size..(pr + 1) * patch_size {
                for x in pc * patch_size..(pc + 1) * patch_size {
                    for c in 0..ch {
                        p.push(image.get(y, x, c));
                    }
                }
            }
            patches.push(p);
        }
    }
    Ok(patches)
}

pub fn visible_count(num_patches: usize, masking_ratio: f64) -> usize {
    round_half_away(num_patches as f64 * (1.0 - masking_ratio))
}

/// Uniformly samples `round(N(1 - ratio))` patch indices without replacement,
/// returned ascending.
pub fn mask_select(num_patches: usize, masking_ratio: f64, seed: u64) -> Vec<usize> {
    let keep = visible_count(num_patches, masking_ratio).min(num_patches);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4D41_534B));
    let mut idx = index::sample(&mut rng, num_patches, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Multiplies one head's attention by its values, `O = A V`.
pub fn head_output(attention: &DMatrix<f64>, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !attention.is_square() || attention.ncols() != values.nrows() {
        return Err(contract(format!(
            "attention {}x{} does not conform with values {}x{}",
            attention.nrows(),
            attention.ncols(),
            values.nrows(),
            values.ncols()
        )));
    }
    Ok(attention * values)
}

/// Mean of the patch-token rows, skipping row 0 when it holds the CLS token.
pub fn mean_patch(tokens: &DMatrix<f64>, has_cls: bool) -> Result<DVector<f64>> {
    let start = usize::from(has_cls);
    let n = tokens.nrows().saturating_sub(start);
    if n == 0 {
        return Err(contract("mean patch embedding needs at least one visible patch token"));
    }
    let mut sum = DVector::zeros(tokens.ncols());
    for r in start..tokens.nrows() {
        sum += tokens.row(r).transpose();
    }
    Ok(sum / n as f64)
}

/// Block weights; every map is `y = x W` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub qkv: DMatrix<f64>,
    pub out_proj: DMatrix<f64>,
    pub fc1: DMatrix<f64>,
    pub fc2: DMatrix<f64>,
}

fn xavier_uniform(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)))
}

impl BlockWeights {
    fn generate(cfg: &EncoderConfig, layer: usize) -> Self {
        let d = cfg.embed_dim;
        let stream = |slot: u64| derive_seed(cfg.seed, ((layer as u64) << 8) | slot);
        BlockWeights {
            qkv: xavier_uniform(d, 3 * d, stream(1)),
            out_proj: xavier_uniform(d, d, stream(2)),
            fc1: xavier_uniform(d, 4 * d, stream(3)),
            fc2: xavier_uniform(4 * d, d, stream(4)),
        }
    }
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let d = x.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.apply(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Row softmax with max subtraction.
pub fn softmax_rows(scores: &mut DMatrix<f64>) {
    for mut row in scores.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.apply(|v| *v /= sum);
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Fixed 2-D sine-cosine embedding for one grid cell: the first half of the
/// vector encodes the row, the second half the column.
fn sincos_2d(dim: usize, row: usize, col: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for pos in [row as f64, col as f64] {
        let omegas: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
        out.extend(omegas.iter().map(|w| (pos * w).sin()));
        out.extend(omegas.iter().map(|w| (pos * w).cos()));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    /// `T x T`, row-stochastic.
    pub attention: DMatrix<f64>,
    /// `T x d_h`.
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `T x D` block output.
    pub tokens: DMatrix<f64>,
    pub heads: Vec<HeadTrace>,
}

/// Activations of one image through every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// Grid index of each patch token, in token-slot order.
    pub visible_indices: Vec<usize>,
    pub has_cls: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub layers: Vec<LayerTrace>,
    pub metadata: BTreeMap<String, String>,
}

pub fn tokens_name(layer: usize) -> String {
    format!("z/layer{layer}")
}

pub fn attention_name(layer: usize, head: usize) -> String {
    format!("attn/layer{layer}/head{head}")
}

pub fn values_name(layer: usize, head: usize) -> String {
    format!("value/layer{layer}/head{head}")
}

pub const VISIBLE_INDICES_NAME: &str = "visible_idx";

/// Metadata keys derived from the trace shape itself.
const STRUCTURAL_KEYS: [&str; 6] = ["has_cls", "image_height", "image_width", "patch_size", "num_layers", "num_heads"];

fn matrix_record(name: String, m: &DMatrix<f64>) -> TensorRecord {
    let data: Vec<f64> = m.transpose().as_slice().to_vec();
    TensorRecord::f64(name, &[m.nrows(), m.ncols()], data).expect("matrix buffer matches its shape")
}

fn matrix_from_archive(archive: &TensorArchive, name: &str) -> Result<DMatrix<f64>> {
    let r = archive.get(name).ok_or_else(|| contract(format!("missing record `{name}`")))?;
    match r.shape.as_slice() {
        &[rows, cols] => Ok(DMatrix::from_row_slice(rows as usize, cols as usize, &r.to_f64_vec())),
        other => Err(contract(format!("record `{name}` has shape {other:?}, expected a matrix"))),
    }
}

fn parse_meta<T: std::str::FromStr>(archive: &TensorArchive, key: &str) -> Result<T> {
    archive
        .meta(key)
        .ok_or_else(|| contract(format!("missing metadata key `{key}`")))?
        .parse()
        .map_err(|_| contract(format!("metadata key `{key}` is malformed")))
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn num_tokens(&self) -> usize {
        self.visible_indices.len() + usize::from(self.has_cls)
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.tokens.ncols())
    }

    pub fn head_dim(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.heads.first())
            .map_or(0, |h| h.values.ncols())
    }

    /// 1-based layer access.
    pub fn layer(&self, layer: usize) -> Result<&LayerTrace> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| contract(format!("layer {layer} outside 1..={}", self.layers.len())))
    }

    /// Patch-token rows of layer `layer`, CLS dropped.
    pub fn patch_tokens(&self, layer: usize) -> Result<DMatrix<f64>> {
        let tokens = &self.layer(layer)?.tokens;
        let start = usize::from(self.has_cls);
        Ok(tokens.rows(start, tokens.nrows() - start).into_owned())
    }

    pub fn mean_patch(&self, layer: usize) -> Result<DVector<f64>> {
        mean_patch(&self.layer(layer)?.tokens, self.has_cls)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        archive.metadata = self.metadata.clone();
        archive.set_meta("has_cls", self.has_cls.to_string());
        archive.set_meta("image_height", self.image_height.to_string());
        archive.set_meta("image_width", self.image_width.to_string());
        archive.set_meta("patch_size", self.patch_size.to_string());
        archive.set_meta("num_layers", self.num_layers().to_string());
        archive.set_meta("num_heads", self.num_heads().to_string());

        let idx: Vec<i64> = self.visible_indices.iter().map(|&i| i as i64).collect();
        archive
            .push(TensorRecord::i64(VISIBLE_INDICES_NAME, &[idx.len()], idx).unwrap())
            .unwrap();
        for (li, layer) in self.layers.iter().enumerate() {
            let l = li + 1;
            archive.push(matrix_record(tokens_name(l), &layer.tokens)).unwrap();
            for (hi, head) in layer.heads.iter().enumerate() {
                archive.push(matrix_record(attention_name(l, hi + 1), &head.attention)).unwrap();
                archive.push(matrix_record(values_name(l, hi + 1), &head.values)).unwrap();
            }
        }
        archive
    }

    /// Rebuilds a trace, checking that every layer/head record is present and
    /// that shapes agree across layers.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let idx = archive
            .get(VISIBLE_INDICES_NAME)
            .ok_or_else(|| contract(format!("missing record `{VISIBLE_INDICES_NAME}`")))?;
        let visible_indices = idx
            .to_f64_vec()
            .into_iter()
            .map(|v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(v) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|v| contract(format!("`{VISIBLE_INDICES_NAME}` holds invalid index {v}")))?;
        let num_layers: usize = parse_meta(archive, "num_layers")?;
        let num_heads: usize = parse_meta(archive, "num_heads")?;
        let patch_size: usize = parse_meta(archive, "patch_size")?;
        let image_height: usize = parse_meta(archive, "image_height")?;
        let image_width: usize = parse_meta(archive, "image_width")?;
        let has_cls: bool = parse_meta(archive, "has_cls")?;
        let t = visible_indices.len() + usize::from(has_cls);

        let mut layers = Vec::with_capacity(num_layers);
        let mut dims: Option<(usize, usize)> = None;
        for l in 1..=num_layers {
            let name = tokens_name(l);
            let tokens = matrix_from_archive(archive, &name)?;
            if tokens.nrows() != t {
                return Err(contract(format!("record `{name}` has {} rows, expected {t}", tokens.nrows())));
            }
            let mut heads = Vec::with_capacity(num_heads);
            for h in 1..=num_heads {
                let (an, vn) = (attention_name(l, h), values_name(l, h));
                let attention = matrix_from_archive(archive, &an)?;
                let values = matrix_from_archive(archive, &vn)?;
                if attention.shape() != (t, t) {
                    return Err(contract(format!("record `{an}` is {:?}, expected ({t}, {t})", attention.shape())));
                }
                if values.nrows() != t {
                    return Err(contract(format!("record `{vn}` has {} rows, expected {t}", values.nrows())));
                }
                let expect = (tokens.ncols(), values.ncols());
                match dims {
                    None => dims = Some(expect),
                    Some(d) if d != expect => {
                        return Err(contract(format!("layer {l} dimensions {expect:?} differ from {d:?}")));
                    }
                    _ => {}
                }
                heads.push(HeadTrace { attention, values });
            }
            layers.push(LayerTrace { tokens, heads });
        }
        Ok(ActivationTrace {
            visible_indices,
            has_cls,
            image_height,
            image_width,
            patch_size,
            layers,
            metadata: archive
                .metadata
                .iter()
                .filter(|(k, _)| !STRUCTURAL_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        })
    }
}

/// The toy encoder: a fixed patch embedding, CLS vector, and positional table,
/// plus per-layer block weights that are cached only for small models.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: EncoderConfig,
    patch_embed: DMatrix<f64>,
    cls_token: DVector<f64>,
    /// `N x D`, one row per grid patch.
    pos_embed: DMatrix<f64>,
    blocks: Option<Vec<BlockWeights>>,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_embed = xavier_uniform(config.patch_dim(), d, derive_seed(config.seed, 0xE0));
        let a = (6.0 / (1 + d) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC1));
        let cls_token = DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-a..a)));
        let cols = config.grid_cols();
        let rows: Vec<Vec<f64>> = (0..config.num_patches()).map(|p| sincos_2d(d, p / cols, p % cols)).collect();
        let pos_embed = DMatrix::from_fn(config.num_patches(), d, |p, j| rows[p][j]);

        let per_layer = 12 * d * d;
        let blocks = (per_layer * config.num_layers <= WEIGHT_CACHE_LIMIT)
            .then(|| (1..=config.num_layers).map(|l| BlockWeights::generate(&config, l)).collect());
        Ok(ToyEncoder { config, patch_embed, cls_token, pos_embed, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Weights of 1-based `layer`.
    pub fn block_weights(&self, layer: usize) -> BlockWeights {
        match &self.blocks {
            Some(b) => b[layer - 1].clone(),
            None => BlockWeights::generate(&self.config, layer),
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if image.height() != c.image_height || image.width() != c.image_width || image.channels() != 3 {
            return Err(config(format!(
                "image is {}x{}x{}, encoder expects {}x{}x3",
                image.height(),
                image.width(),
                image.channels(),
                c.image_height,
                c.image_width
            )));
        }
        Ok(())
    }

    /// Input token matrix `[cls; E_p(x_v)] + E_pos` for the given visible
    /// patches, in the given slot order. The CLS slot gets no position.
    pub fn embed(&self, image: &Image, visible: &[usize]) -> Result<DMatrix<f64>> {
        self.check_image(image)?;
        let n = self.config.num_patches();
        if let Some(&bad) = visible.iter().find(|&&i| i >= n) {
            return Err(contract(format!("visible index {bad} outside grid of {n} patches")));
        }
        let patches = patchify(image, self.config.patch_size)?;
        let d = self.config.embed_dim;
        let cls = usize::from(self.config.include_cls);
        let pixels = DMatrix::from_fn(visible.len(), self.config.patch_dim(), |r, j| patches[visible[r]][j] / MAX_VALUE);
        let projected = pixels * &self.patch_embed;
        Ok(DMatrix::from_fn(visible.len() + cls, d, |r, j| {
            if r < cls {
                self.cls_token[j]
            } else {
                let slot = r - cls;
                projected[(slot, j)] + self.pos_embed[(visible[slot], j)]
            }
        }))
    }

    /// Runs the encoder with the visible set drawn from `config.mask_seed`.
    pub fn forward(&self, image: &Image) -> Result<ActivationTrace> {
        let visible = mask_select(self.config.num_patches(), self.config.masking_ratio, self.config.mask_seed);
        self.forward_visible(image, &visible)
    }

    /// Runs the encoder on an explicit visible set, kept in the given order.
    pub fn forward_visible(&self, image: &Image, visible: &[usize]) -> Result<ActivationTrace> {
        let cfg = &self.config;
        let mut x = self.embed(image, visible)?;
        if x.nrows() == 0 {
            return Err(contract("encoder input has no tokens"));
        }
        let (t, dh) = (x.nrows(), cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 1..=cfg.num_layers {
            let w = self.block_weights(l);
            let qkv = layer_norm(&x) * &w.qkv;
            let mut concat = DMatrix::zeros(t, cfg.embed_dim);
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let off = h * dh;
                let q = qkv.columns(off, dh);
                let k = qkv.columns(cfg.embed_dim + off, dh);
                let values = qkv.columns(2 * cfg.embed_dim + off, dh).into_owned();
                let mut attention = (q * k.transpose()) * scale;
                softmax_rows(&mut attention);
                concat.columns_mut(off, dh).copy_from(&(&attention * &values));
                heads.push(HeadTrace { attention, values });
            }
            x += concat * &w.out_proj;
            let hidden = (layer_norm(&x) * &w.fc1).map(gelu);
            x += hidden * &w.fc2;

            if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    detail: format!("token {} feature {}", pos % t, pos / t),
                });
            }
            layers.push(LayerTrace { tokens: x.clone(), heads });
        }

        let mut metadata = BTreeMap::new();
        metadata.insert("producer".into(), "rscope-toy-encoder".into());
        metadata.insert("norm_order".into(), "pre-norm".into());
        metadata.insert("seed".into(), cfg.seed.to_string());
        metadata.insert("mask_seed".into(), cfg.mask_seed.to_string());
        metadata.insert("masking_ratio".into(), cfg.masking_ratio.to_string());
        metadata.insert("embed_dim".into(), cfg.embed_dim.to_string());
        Ok(ActivationTrace {
            visible_indices: visible.to_vec(),
            has_cls: cfg.include_cls,
            image_height: cfg.image_height,
            image_width: cfg.image_width,
            patch_size: cfg.patch_size,
            layers,
            metadata,
        })
    }
}

/// Convenience wrapper: build the encoder for `config` and run it once.
pub fn forward(config: &EncoderConfig, image: &Image) -> Result<ActivationTrace> {
    ToyEncoder::new(config.clone())?.forward(image)
}
