//! Contrastive imitation learning with tiny from-scratch encoders.
//!
//! Text: tokens hashed into [`TEXT_BUCKETS`] embedding rows, averaged, passed
//! through a linear head. Image: per-patch channel means of an 8x8 patch grid,
//! linearly projected. The context for an observation and instruction is the
//! normalized sum of the image embedding and the prompted-instruction
//! embedding; it is scored against supervision embeddings with a sigmoid of
//! the raw cosine.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{primitive_to_action, LowLevelAction, PrimitiveVocabulary};
use crate::sim_world::{Observation, IMAGE_SIZE, RASTER_BYTES};
use crate::teleop::Transition;

pub const TEXT_BUCKETS: usize = 1024;
pub const PATCH: usize = 8;
pub const PATCHES: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);
pub const IMAGE_FEATURES: usize = PATCHES * 3;
pub const DEFAULT_DIM: usize = 64;
pub const CHECKPOINT_VERSION: u32 = 1;

const PROMPT_PREFIX: &str = "What motion should the robot arm perform to complete the instruction ";

#[derive(Debug, Error)]
pub enum CilError {
    #[error("empty text")]
    EmptyText,
    #[error("observation must be {RASTER_BYTES} bytes, got {0}")]
    RasterSize(usize),
    #[error("degenerate context")]
    DegenerateContext,
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("non-finite value in loss")]
    NonFinite,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Action(#[from] crate::action_space::ActionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wraps an instruction in the fixed question used at train and test time.
pub fn prompt_instruction(instruction: &str) -> String {
    format!("{PROMPT_PREFIX}{}?", instruction.trim())
}

/// Lowercased runs of alphanumerics and underscores.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// FNV-1a (64 bit) of the token, reduced to a bucket.
pub fn token_bucket(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % TEXT_BUCKETS as u64) as usize
}

/// All trainable weights; gradients use the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dim: usize,
    /// `TEXT_BUCKETS x dim`, row-major.
    pub text_embed: Vec<f64>,
    /// `dim x dim`, row-major; `g = h * text_head + text_bias`.
    pub text_head: Vec<f64>,
    pub text_bias: Vec<f64>,
    /// `IMAGE_FEATURES x dim`, row-major.
    pub image_proj: Vec<f64>,
    pub image_bias: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(dim: usize) -> Self {
        EncoderParams {
            dim,
            text_embed: vec![0.0; TEXT_BUCKETS * dim],
            text_head: vec![0.0; dim * dim],
            text_bias: vec![0.0; dim],
            image_proj: vec![0.0; IMAGE_FEATURES * dim],
            image_bias: vec![0.0; dim],
        }
    }

    /// Uniform initialization; the text head starts near identity and the image
    /// projection small enough that early contexts are instruction-led.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim);
        let mut fill = |v: &mut [f64], a: f64| {
            for x in v {
                *x = rng.random_range(-a..a);
            }
        };
        fill(&mut p.text_embed, 1.0);
        fill(&mut p.text_head, (3.0 / dim as f64).sqrt() * 0.1);
        fill(&mut p.text_bias, 0.01);
        fill(&mut p.image_proj, 0.3);
        fill(&mut p.image_bias, 0.01);
        for i in 0..dim {
            p.text_head[i * dim + i] += 1.0;
        }
        p
    }

    pub fn parts(&self) -> [&[f64]; 5] {
        [
            &self.text_embed,
            &self.text_head,
            &self.text_bias,
            &self.image_proj,
            &self.image_bias,
        ]
    }

    pub fn parts_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.text_embed,
            &mut self.text_head,
            &mut self.text_bias,
            &mut self.image_proj,
            &mut self.image_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access across all parts, in `parts()` order.
    pub fn get(&self, mut i: usize) -> f64 {
        for p in self.parts() {
            if i < p.len() {
                return p[i];
            }
            i -= p.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for p in self.parts_mut() {
            if i < p.len() {
                p[i] = v;
                return;
            }
            i -= p.len();
        }
        panic!("parameter index out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backpropagates through `u = v / |v|`.
fn normalize_backward(u: &[f64], v_norm: f64, du: &[f64]) -> Vec<f64> {
    let proj = dot(u, du);
    u.iter().zip(du).map(|(ui, dui)| (dui - ui * proj) / v_norm).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Token buckets of a text with their occurrence counts, in first-seen order.
fn bag(text: &str) -> Result<Vec<(usize, f64)>, CilError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(CilError::EmptyText);
    }
    let mut order: Vec<(usize, f64)> = Vec::new();
    for t in &tokens {
        let b = token_bucket(t);
        match order.iter_mut().find(|(x, _)| *x == b) {
            Some(e) => e.1 += 1.0,
            None => order.push((b, 1.0)),
        }
    }
    let n = tokens.len() as f64;
    for e in &mut order {
        e.1 /= n;
    }
    Ok(order)
}

struct TextForward {
    bag: Vec<(usize, f64)>,
    h: Vec<f64>,
    g: Vec<f64>,
}

fn text_forward(text: &str, p: &EncoderParams) -> Result<TextForward, CilError> {
    let d = p.dim;
    let bag = bag(text)?;
    let mut h = vec![0.0; d];
    for &(b, w) in &bag {
        for (hk, e) in h.iter_mut().zip(&p.text_embed[b * d..(b + 1) * d]) {
            *hk += w * e;
        }
    }
    let mut g = p.text_bias.clone();
    for (j, hj) in h.iter().enumerate() {
        for (gk, w) in g.iter_mut().zip(&p.text_head[j * d..(j + 1) * d]) {
            *gk += hj * w;
        }
    }
    Ok(TextForward { bag, h, g })
}

fn text_backward(fw: &TextForward, dg: &[f64], p: &EncoderParams, grad: &mut EncoderParams) {
    let d = p.dim;
    for (j, hj) in fw.h.iter().enumerate() {
        for k in 0..d {
            grad.text_head[j * d + k] += hj * dg[k];
        }
    }
    for k in 0..d {
        grad.text_bias[k] += dg[k];
    }
    let dh: Vec<f64> = (0..d)
        .map(|j| dot(&p.text_head[j * d..(j + 1) * d], dg))
        .collect();
    for &(b, w) in &fw.bag {
        for (ge, dhj) in grad.text_embed[b * d..(b + 1) * d].iter_mut().zip(&dh) {
            *ge += w * dhj;
        }
    }
}

/// Pre-normalization text embedding.
pub fn text_embedding(text: &str, p: &EncoderParams) -> Result<Vec<f64>, CilError> {
    Ok(text_forward(text, p)?.g)
}

fn unit(v: Vec<f64>, err: CilError) -> Result<Vec<f64>, CilError> {
    let n = norm(&v);
    if n.is_nan() || n <= 1e-12 || !n.is_finite() {
        return Err(err);
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

pub fn encode_text(text: &str, p: &EncoderParams) -> Result<Vec<f64>, CilError> {
    unit(text_embedding(text, p)?, CilError::DegenerateEmbedding)
}

/// Per-patch channel means scaled to [0, 1], patch-major then channel.
pub fn image_features(obs: &Observation) -> Result<Vec<f64>, CilError> {
    if obs.pixels.len() != RASTER_BYTES {
        return Err(CilError::RasterSize(obs.pixels.len()));
    }
    let side = IMAGE_SIZE / PATCH;
    let mut out = vec![0.0; IMAGE_FEATURES];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let patch = (row / PATCH) * side + col / PATCH;
            let px = &obs.pixels[(row * IMAGE_SIZE + col) * 3..][..3];
            for c in 0..3 {
                out[patch * 3 + c] += f64::from(px[c]);
            }
        }
    }
    let scale = 1.0 / (255.0 * (PATCH * PATCH) as f64);
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Pre-normalization image embedding from patch features.
pub fn image_embedding(features: &[f64], p: &EncoderParams) -> Vec<f64> {
    let d = p.dim;
    let mut f = p.image_bias.clone();
    for (i, x) in features.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (fk, w) in f.iter_mut().zip(&p.image_proj[i * d..(i + 1) * d]) {
            *fk += x * w;
        }
    }
    f
}

pub fn encode_image(obs: &Observation, p: &EncoderParams) -> Result<Vec<f64>, CilError> {
    unit(image_embedding(&image_features(obs)?, p), CilError::DegenerateEmbedding)
}

/// Context from precomputed patch features.
pub fn context_from_features(features: &[f64], instruction: &str, p: &EncoderParams) -> Result<Vec<f64>, CilError> {
    let f = image_embedding(features, p);
    let g = text_embedding(&prompt_instruction(instruction), p)?;
    unit(f.iter().zip(&g).map(|(a, b)| a + b).collect(), CilError::DegenerateContext)
}

pub fn context(obs: &Observation, instruction: &str, p: &EncoderParams) -> Result<Vec<f64>, CilError> {
    context_from_features(&image_features(obs)?, instruction, p)
}

/// One training triplet with its executed action.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub instruction: String,
    pub supervision: String,
    /// Table action of the sample's primitive; defines positives.
    pub action: LowLevelAction,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

/// `y[i][j]` is 1 iff the two samples' actions are equal componentwise.
pub fn label_matrix(batch: &Batch) -> Vec<Vec<f64>> {
    let s = &batch.samples;
    s.iter()
        .map(|a| s.iter().map(|b| if a.action == b.action { 1.0 } else { 0.0 }).collect())
        .collect()
}

struct Forward {
    f: Vec<Vec<f64>>,
    instr: Vec<TextForward>,
    c_hat: Vec<Vec<f64>>,
    c_norm: Vec<f64>,
    sup: Vec<TextForward>,
    z_hat: Vec<Vec<f64>>,
    z_norm: Vec<f64>,
}

fn forward(batch: &Batch, p: &EncoderParams) -> Result<Forward, CilError> {
    let mut fw = Forward {
        f: Vec::new(),
        instr: Vec::new(),
        c_hat: Vec::new(),
        c_norm: Vec::new(),
        sup: Vec::new(),
        z_hat: Vec::new(),
        z_norm: Vec::new(),
    };
    for s in &batch.samples {
        let f = image_embedding(&s.features, p);
        let t = text_forward(&prompt_instruction(&s.instruction), p)?;
        let c: Vec<f64> = f.iter().zip(&t.g).map(|(a, b)| a + b).collect();
        let n = norm(&c);
        if n.is_nan() || n <= 1e-12 {
            return Err(CilError::DegenerateContext);
        }
        fw.c_hat.push(c.iter().map(|x| x / n).collect());
        fw.c_norm.push(n);
        fw.f.push(f);
        fw.instr.push(t);
        let z = text_forward(&s.supervision, p)?;
        let zn = norm(&z.g);
        if zn.is_nan() || zn <= 1e-12 {
            return Err(CilError::DegenerateEmbedding);
        }
        fw.z_hat.push(z.g.iter().map(|x| x / zn).collect());
        fw.z_norm.push(zn);
        fw.sup.push(z);
    }
    Ok(fw)
}

fn loss_from(fw: &Forward, y: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), CilError> {
    let m = fw.c_hat.len();
    let scale = 1.0 / (m * m) as f64;
    let mut loss = 0.0;
    let mut dl_ds = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let s = dot(&fw.c_hat[i], &fw.z_hat[j]);
            let sig = sigmoid(s);
            // log(1 - sigmoid(s)) = log sigmoid(-s)
            let term = y[i][j] * sigmoid(s).ln() + (1.0 - y[i][j]) * sigmoid(-s).ln();
            loss -= term;
            dl_ds[i][j] = (sig - y[i][j]) * scale;
        }
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(CilError::NonFinite);
    }
    Ok((loss, dl_ds))
}

pub fn cil_loss(batch: &Batch, p: &EncoderParams) -> Result<f64, CilError> {
    if batch.samples.is_empty() {
        return Err(CilError::EmptyBatch);
    }
    let fw = forward(batch, p)?;
    Ok(loss_from(&fw, &label_matrix(batch))?.0)
}

/// Loss and its exact gradient.
pub fn cil_grad(batch: &Batch, p: &EncoderParams) -> Result<(f64, EncoderParams), CilError> {
    if batch.samples.is_empty() {
        return Err(CilError::EmptyBatch);
    }
    let fw = forward(batch, p)?;
    let (loss, g) = loss_from(&fw, &label_matrix(batch))?;
    let m = fw.c_hat.len();
    let d = p.dim;
    let mut grad = EncoderParams::zeros(d);
    for i in 0..m {
        // dL/dc_hat_i = sum_j g_ij z_hat_j ; dL/dz_hat_i = sum_j g_ji c_hat_j
        let mut dc = vec![0.0; d];
        let mut dz = vec![0.0; d];
        for j in 0..m {
            for k in 0..d {
                dc[k] += g[i][j] * fw.z_hat[j][k];
                dz[k] += g[j][i] * fw.c_hat[j][k];
            }
        }
        let dc_raw = normalize_backward(&fw.c_hat[i], fw.c_norm[i], &dc);
        let dz_raw = normalize_backward(&fw.z_hat[i], fw.z_norm[i], &dz);
        // c = f + g(instruction): both branches receive dc_raw.
        let s = &batch.samples[i];
        for (fi, x) in s.features.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for k in 0..d {
                grad.image_proj[fi * d + k] += x * dc_raw[k];
            }
        }
        for k in 0..d {
            grad.image_bias[k] += dc_raw[k];
        }
        text_backward(&fw.instr[i], &dc_raw, p, &mut grad);
        text_backward(&fw.sup[i], &dz_raw, p, &mut grad);
    }
    debug_assert_eq!(fw.f.len(), m);
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// Natural-language supervisions with paraphrases.
    Language,
    /// Opaque per-primitive tokens.
    ActionToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Samples of one primitive kept together in a batch; 0 shuffles freely.
    pub group_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub text_mode: TextMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: DEFAULT_DIM,
            seed: 0,
            batch_size: 4,
            group_size: 2,
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 200,
            text_mode: TextMode::Language,
        }
    }
}

/// A transition reduced to what training needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub features: Vec<f64>,
    pub instruction: String,
    pub supervision: String,
    pub primitive: usize,
}

impl TrainingExample {
    pub fn from_transition(t: &Transition) -> Result<Self, CilError> {
        Ok(TrainingExample {
            features: image_features(&t.observation)?,
            instruction: t.instruction.clone(),
            supervision: t.supervision.clone(),
            primitive: t.primitive,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: EncoderParams,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Texts the policy scores against, in primitive order.
    pub vocabulary: PrimitiveVocabulary,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CilError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string(self).map_err(|e| CilError::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CilError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CilError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CilError::Checkpoint(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CilError::Version(version));
        }
        let mut ck: Checkpoint =
            serde_json::from_value(v).map_err(|e| CilError::Checkpoint(e.to_string()))?;
        ck.vocabulary = ck.vocabulary.reindexed()?;
        Ok(ck)
    }
}

/// Replaces every primitive text with an opaque token whose hash bucket is
/// unique; paraphrases are dropped.
pub fn action_token_variant(vocab: &PrimitiveVocabulary) -> PrimitiveVocabulary {
    let mut used = HashMap::new();
    let mut texts = Vec::with_capacity(vocab.len());
    for id in 0..vocab.len() {
        let mut text = format!("tok_{id:02}");
        let mut n = 0;
        while used.contains_key(&token_bucket(&text)) {
            n += 1;
            text = format!("tok_{id:02}_{n}");
        }
        used.insert(token_bucket(&text), id);
        texts.push(text);
    }
    vocab.with_texts(texts).expect("opaque tokens are unique")
}

/// Texts a sample's supervision may be drawn from in one epoch.
fn text_pool<'a>(ex: &'a TrainingExample, vocab: &'a PrimitiveVocabulary, mode: TextMode) -> Vec<&'a str> {
    let p = vocab.get(ex.primitive).expect("example primitives are in range");
    match mode {
        TextMode::ActionToken => vec![p.canonical_text.as_str()],
        TextMode::Language => {
            let mut pool = vec![ex.supervision.as_str(), p.canonical_text.as_str()];
            pool.extend(vocab.paraphrases(ex.primitive).iter().map(String::as_str));
            pool
        }
    }
}

/// Batches for one epoch. With grouping, each primitive's samples are cut
/// into runs of `group` and a batch holds `bs / group` runs of distinct
/// primitives.
fn epoch_order(data: &[TrainingExample], group: usize, bs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    if group == 0 {
        return order.chunks(bs).map(<[usize]>::to_vec).collect();
    }
    let mut by_primitive: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        by_primitive.entry(data[i].primitive).or_default().push(i);
    }
    let mut runs: Vec<(usize, Vec<usize>)> = by_primitive
        .into_iter()
        .flat_map(|(p, idx)| idx.chunks(group).map(|c| (p, c.to_vec())).collect::<Vec<_>>())
        .collect();
    runs.shuffle(rng);
    let per_batch = (bs / group).max(2);
    let mut batches = Vec::new();
    while !runs.is_empty() {
        let mut batch = Vec::new();
        let mut used = Vec::new();
        let mut k = 0;
        while k < runs.len() && used.len() < per_batch {
            if used.contains(&runs[k].0) {
                k += 1;
                continue;
            }
            let (p, idx) = runs.remove(k);
            used.push(p);
            batch.extend(idx);
        }
        batches.push(batch);
    }
    batches
}

/// Mini-batch SGD with momentum. `vocab` must already be in the form the
/// policy will score (see [`action_token_variant`]).
pub fn train(
    data: &[TrainingExample],
    vocab: &PrimitiveVocabulary,
    config: &TrainConfig,
) -> Result<Checkpoint, CilError> {
    train_with(data, vocab, config, EncoderParams::init(config.dim, config.seed))
}

/// Like [`train`] from given initial parameters.
pub fn train_with(
    data: &[TrainingExample],
    vocab: &PrimitiveVocabulary,
    config: &TrainConfig,
    mut params: EncoderParams,
) -> Result<Checkpoint, CilError> {
    if data.is_empty() {
        return Err(CilError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut velocity = EncoderParams::zeros(config.dim);
    let mut trace = Vec::with_capacity(config.epochs);
    let bs = config.batch_size.max(2);
    for epoch in 0..config.epochs {
        let order = epoch_order(data, config.group_size, bs, &mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.iter().enumerate() {
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let samples = chunk
                .iter()
                .map(|&i| {
                    let ex = &data[i];
                    let pool = text_pool(ex, vocab, config.text_mode);
                    Ok(Sample {
                        features: ex.features.clone(),
                        instruction: ex.instruction.clone(),
                        supervision: pool.choose(&mut rng).expect("pool is non-empty").to_string(),
                        action: primitive_to_action(ex.primitive)?,
                    })
                })
                .collect::<Result<Vec<_>, CilError>>()?;
            let (loss, grad) = cil_grad(&Batch { samples }, &params)
                .map_err(|_| CilError::Diverged { epoch, batch: bi })?;
            for (v, (p, g)) in velocity
                .parts_mut()
                .into_iter()
                .zip(params.parts_mut().into_iter().zip(grad.parts()))
            {
                for ((vi, pi), gi) in v.iter_mut().zip(p.iter_mut()).zip(g) {
                    *vi = config.momentum * *vi - config.learning_rate * gi;
                    *pi += *vi;
                }
            }
            if !params.all_finite() {
                return Err(CilError::Diverged { epoch, batch: bi });
            }
            total += loss;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params,
        loss_trace: trace,
        vocabulary: vocab.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::{canonical_vocabulary, default_vocabulary};
    use crate::sim_world::{init_world, render, TaskSpec};

    fn random_sample(rng: &mut ChaCha8Rng, words: &[&str], action: LowLevelAction) -> Sample {
        Sample {
            features: (0..IMAGE_FEATURES).map(|_| rng.random_range(0.0..1.0)).collect(),
            instruction: format!("pick the {}", words.choose(rng).unwrap()),
            supervision: format!("{} {}", words.choose(rng).unwrap(), words.choose(rng).unwrap()),
            action,
        }
    }

    #[test]
    fn tokenizer_and_hash() {
        assert_eq!(tokenize("Move arm, to the LEFT by 5cm!"), ["move", "arm", "to", "the", "left", "by", "5cm"]);
        assert_eq!(tokenize("tok_07"), ["tok_07"]);
        assert_ne!(token_bucket("left"), token_bucket("right"));
    }

    #[test]
    fn text_encoding_properties() {
        let p = EncoderParams::init(16, 0);
        let a = encode_text("move left", &p).unwrap();
        assert_eq!(a, encode_text("move left", &p).unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        let b = encode_text("move right", &p).unwrap();
        assert!(dot(&a, &b) < 1.0);
        assert!(matches!(encode_text("  ?! ", &p), Err(CilError::EmptyText)));
    }

    #[test]
    fn image_encoding_properties() {
        let p = EncoderParams::init(16, 0);
        let black = Observation::new(vec![0; RASTER_BYTES]).unwrap();
        let e = encode_image(&black, &p).unwrap();
        let nb = norm(&p.image_bias);
        for (x, b) in e.iter().zip(&p.image_bias) {
            assert!((x - b / nb).abs() < 1e-12);
        }
        let world = init_world(&TaskSpec::pick(), 0).unwrap();
        let obs = render(&world);
        let v = encode_image(&obs, &p).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-6);
        let mut moved = world.clone();
        moved.objects[0].position[1] += 0.1;
        assert_ne!(encode_image(&render(&moved), &p).unwrap(), v);
        let bad = Observation { pixels: vec![0; 10] };
        assert!(matches!(encode_image(&bad, &p), Err(CilError::RasterSize(10))));
    }

    #[test]
    fn context_properties() {
        let p = EncoderParams::init(16, 0);
        let w = init_world(&TaskSpec::pick(), 0).unwrap();
        let c = context(&render(&w), &w.instruction, &p).unwrap();
        assert!((norm(&c) - 1.0).abs() < 1e-6);
        let mut w2 = w.clone();
        w2.pose.y += 0.1;
        assert_ne!(context(&render(&w2), &w.instruction, &p).unwrap(), c);

        // Image embedding exactly cancelling the instruction embedding.
        let mut q = p.clone();
        q.image_proj.iter_mut().for_each(|x| *x = 0.0);
        let g = text_embedding(&prompt_instruction("x"), &q).unwrap();
        q.image_bias = g.iter().map(|v| -v).collect();
        let black = Observation::new(vec![0; RASTER_BYTES]).unwrap();
        assert!(matches!(context(&black, "x", &q), Err(CilError::DegenerateContext)));
    }

    #[test]
    fn label_matrix_examples() {
        let vocab = default_vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = vocab.lookup("raise arm up by 5cm").unwrap();
        let batch = Batch {
            samples: vec![
                random_sample(&mut rng, &["a"], vocab.lookup("move upwards by 5cm").unwrap()),
                random_sample(&mut rng, &["a"], up),
                random_sample(&mut rng, &["a"], vocab.lookup("move arm back by 5cm").unwrap()),
            ],
        };
        let y = label_matrix(&batch);
        assert_eq!(y, vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let distinct = Batch {
            samples: (0..5).map(|i| random_sample(&mut rng, &["a"], primitive_to_action(i).unwrap())).collect(),
        };
        let y = label_matrix(&distinct);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(y[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn loss_is_positive_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(8, 1);
        let words = ["left", "right", "up", "down", "red", "block"];
        let samples: Vec<Sample> = (0..5)
            .map(|i| random_sample(&mut rng, &words, primitive_to_action(i % 3).unwrap()))
            .collect();
        let l = cil_loss(&Batch { samples: samples.clone() }, &p).unwrap();
        assert!(l > 0.0);
        let mut rev = samples;
        rev.reverse();
        let l2 = cil_loss(&Batch { samples: rev }, &p).unwrap();
        assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn unused_buckets_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(8, 2);
        let batch = Batch {
            samples: (0..3)
                .map(|i| random_sample(&mut rng, &["left", "right"], primitive_to_action(i).unwrap()))
                .collect(),
        };
        let (_, g) = cil_grad(&batch, &p).unwrap();
        let mut used: Vec<usize> = Vec::new();
        for s in &batch.samples {
            for t in tokenize(&s.supervision).iter().chain(&tokenize(&prompt_instruction(&s.instruction))) {
                used.push(token_bucket(t));
            }
        }
        let unused = (0..TEXT_BUCKETS).find(|b| !used.contains(b)).unwrap();
        assert!(g.text_embed[unused * 8..(unused + 1) * 8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_primitive_toy_set_is_learned() {
        // Left half bright means "left", right half bright means "right".
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..20 {
            let left = k % 2 == 0;
            let mut features = vec![0.2; IMAGE_FEATURES];
            for patch in 0..PATCHES {
                let col = patch % 8;
                if (col < 4) == left {
                    for c in 0..3 {
                        features[patch * 3 + c] = rng.random_range(0.6..0.9);
                    }
                }
            }
            data.push(TrainingExample {
                features,
                instruction: "point at the red disk".into(),
                supervision: if left { "move left" } else { "move right" }.into(),
                primitive: if left { 13 } else { 10 },
            });
        }
        let vocab = default_vocabulary();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let ck = train(&data, &vocab, &cfg).unwrap();
        assert!(ck.loss_trace.iter().all(|l| l.is_finite()));
        assert!(ck.loss_trace.last() <= ck.loss_trace.first());
        let texts: Vec<Vec<f64>> = vocab
            .primitives()
            .iter()
            .map(|p| encode_text(&p.canonical_text, &ck.params).unwrap())
            .collect();
        for ex in &data {
            let c = context_from_features(&ex.features, &ex.instruction, &ck.params).unwrap();
            let best = (0..texts.len())
                .max_by(|&a, &b| dot(&c, &texts[a]).total_cmp(&dot(&c, &texts[b])).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(best, ex.primitive);
        }
        let again = train(&data, &vocab, &cfg).unwrap();
        assert_eq!(again.params, ck.params);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let vocab = canonical_vocabulary();
        assert!(matches!(
            train(&[], &vocab, &TrainConfig::default()),
            Err(CilError::EmptyDataset)
        ));
    }

    #[test]
    fn action_tokens_are_opaque() {
        let v = action_token_variant(&default_vocabulary());
        assert_eq!(v.len(), 58);
        let mut buckets = std::collections::HashSet::new();
        for p in v.primitives() {
            assert!(v.paraphrases(p.id).is_empty());
            let toks = tokenize(&p.canonical_text);
            assert_eq!(toks.len(), 1);
            assert!(buckets.insert(token_bucket(&toks[0])));
        }
        assert_eq!(v.primitives()[7].canonical_text.split('_').nth(1), Some("07"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let vocab = action_token_variant(&canonical_vocabulary());
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: TrainConfig::default(),
            params: EncoderParams::init(8, 3),
            loss_trace: vec![0.7, 0.6],
            vocabulary: vocab,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.vocabulary.find("tok_03").unwrap().id, 3);
        let text = fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(CilError::Version(9))));
    }
}
