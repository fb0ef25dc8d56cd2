//! Desk-scale transformer encoder with maskable projection matrices.
//!
//! Each encoder layer owns six prunable matrices (attention Q, K, V, O and
//! the feed-forward up/down projections). Weights are stored `[out, in]`,
//! so a linear layer computes `x · (W ⊙ M)ᵀ + b` on row-major activations.
//! Embeddings, biases, layer norms and the classifier head are frozen and
//! never masked.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use crate::util::Fnv1a;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Activation used in the feed-forward block, echoed into run reports.
pub const ACTIVATION: &str = "gelu(tanh approximation)";

/// Weight initialization scheme, echoed into run reports.
pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights, biases and embeddings; layer norm gamma=1 beta=0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub fn short(self) -> &'static str {
        match self {
            MatrixKind::Query => "q",
            MatrixKind::Key => "k",
            MatrixKind::Value => "v",
            MatrixKind::Output => "o",
            MatrixKind::Up => "u",
            MatrixKind::Down => "d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.short() == s)
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Identifies one prunable matrix in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatrixId {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl MatrixId {
    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.kind)
    }

    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("layer")?;
        let (layer, kind) = rest.split_once('.')?;
        Some(MatrixId {
            layer: layer.parse().ok()?,
            kind: MatrixKind::parse(kind)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_labels: usize,
    pub cls_token_id: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 64,
            max_seq_len: 32,
            num_labels: 2,
            cls_token_id: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.cls_token_id >= self.vocab_size {
            return Err(Error::Config(format!(
                "cls_token_id {} outside vocabulary of {}",
                self.cls_token_id, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// `[out, in]` shape of a prunable matrix.
    pub fn matrix_shape(&self, kind: MatrixKind) -> (usize, usize) {
        let d = self.hidden_dim;
        match kind {
            MatrixKind::Up => (self.ffn_dim, d),
            MatrixKind::Down => (d, self.ffn_dim),
            _ => (d, d),
        }
    }

    /// All prunable matrices in canonical order: layer-major, then Q K V O U D.
    pub fn matrix_ids(&self) -> Vec<MatrixId> {
        (0..self.num_layers)
            .flat_map(|layer| {
                MatrixKind::ALL
                    .into_iter()
                    .map(move |kind| MatrixId { layer, kind })
            })
            .collect()
    }

    pub fn prunable_params(&self) -> usize {
        self.matrix_ids()
            .iter()
            .map(|id| {
                let (r, c) = self.matrix_shape(id.kind);
                r * c
            })
            .sum()
    }

    /// Canonical little-endian encoding used for fingerprints and file headers.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
            self.num_labels,
            self.cls_token_id,
        ]
        .iter()
        .flat_map(|&v| (v as u32).to_le_bytes())
        .collect()
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 32 {
            return None;
        }
        let v: Vec<usize> = bytes
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Some(ModelConfig {
            num_layers: v[0],
            hidden_dim: v[1],
            num_heads: v[2],
            ffn_dim: v[3],
            vocab_size: v[4],
            max_seq_len: v[5],
            num_labels: v[6],
            cls_token_id: v[7],
        })
    }

    /// 64-bit FNV-1a hash of [`Self::canonical_bytes`].
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&self.canonical_bytes());
        h.finish()
    }
}

/// A frozen weight matrix with learnable importance scores and its current
/// binary mask. The bias is dense and never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub scores: Tensor,
    pub mask: Mask,
}

impl MaskedLinear {
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        MaskedLinear {
            weight: uniform(&[rows, cols], bound, rng),
            bias: uniform(&[rows], bound, rng),
            scores: Tensor::zeros(&[rows, cols]),
            mask: Mask::ones(rows, cols),
        }
    }

    /// `W ⊙ M` as a plain tensor.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.weight.clone();
        for (v, keep) in w.data_mut().iter_mut().zip(self.mask.bits()) {
            if !keep {
                *v = 0.0;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: MaskedLinear,
    pub key: MaskedLinear,
    pub value: MaskedLinear,
    pub output: MaskedLinear,
    pub up: MaskedLinear,
    pub down: MaskedLinear,
    pub attn_norm: LayerNormParams,
    pub ffn_norm: LayerNormParams,
}

impl EncoderLayer {
    pub fn matrix(&self, kind: MatrixKind) -> &MaskedLinear {
        match kind {
            MatrixKind::Query => &self.query,
            MatrixKind::Key => &self.key,
            MatrixKind::Value => &self.value,
            MatrixKind::Output => &self.output,
            MatrixKind::Up => &self.up,
            MatrixKind::Down => &self.down,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut MaskedLinear {
        match kind {
            MatrixKind::Query => &mut self.query,
            MatrixKind::Key => &mut self.key,
            MatrixKind::Value => &mut self.value,
            MatrixKind::Output => &mut self.output,
            MatrixKind::Up => &mut self.up,
            MatrixKind::Down => &mut self.down,
        }
    }
}

/// Frozen classification head: one row per label, copied from the token
/// embeddings of that label's word.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub label_token_ids: Vec<usize>,
    pub rows: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub head: ClassifierHead,
}

/// Which tensors of the prunable matrices participate in gradient
/// computation during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Nothing is trainable (evaluation).
    None,
    /// Frozen weights, straight-through scores.
    Scores,
    /// Trainable weights behind a fixed mask.
    Weights,
    /// Trainable weights and straight-through scores.
    WeightsAndScores,
}

/// Tape handles of one prunable matrix bound during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundMatrix {
    pub id: MatrixId,
    pub weight: Var,
    pub scores: Option<Var>,
    /// `W ⊙ M` as used by the layer.
    pub effective: Var,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub bound: Vec<BoundMatrix>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Default label words: the token ids right after the CLS token.
pub fn default_label_token_ids(config: &ModelConfig) -> Vec<usize> {
    (0..config.num_labels)
        .map(|k| config.cls_token_id + 1 + k)
        .collect()
}

impl EncoderModel {
    /// Deterministic model from `(config, seed)`: all masks full, all scores
    /// zero, head copied from the default label-word embeddings.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let labels = default_label_token_ids(&config);
        if labels.iter().any(|&id| id >= config.vocab_size) {
            return Err(Error::Config(format!(
                "vocabulary of {} is too small for {} label words after the CLS token",
                config.vocab_size, config.num_labels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let token_embeddings = uniform(&[config.vocab_size, d], emb_bound, &mut rng);
        let position_embeddings = uniform(&[config.max_seq_len, d], emb_bound, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| {
                let mut mk = |kind| {
                    let (r, c) = config.matrix_shape(kind);
                    MaskedLinear::init(r, c, &mut rng)
                };
                EncoderLayer {
                    query: mk(MatrixKind::Query),
                    key: mk(MatrixKind::Key),
                    value: mk(MatrixKind::Value),
                    output: mk(MatrixKind::Output),
                    up: mk(MatrixKind::Up),
                    down: mk(MatrixKind::Down),
                    attn_norm: LayerNormParams::new(d),
                    ffn_norm: LayerNormParams::new(d),
                }
            })
            .collect();
        let mut model = EncoderModel {
            config,
            token_embeddings,
            position_embeddings,
            layers,
            head: ClassifierHead {
                label_token_ids: vec![],
                rows: Tensor::zeros(&[1, d]),
            },
        };
        model.head = model.init_head_from_label_words(&labels)?;
        Ok(model)
    }

    /// Head whose rows are exact copies of the embeddings of `label_token_ids`.
    pub fn init_head_from_label_words(&self, label_token_ids: &[usize]) -> Result<ClassifierHead> {
        if label_token_ids.len() != self.config.num_labels {
            return Err(Error::Config(format!(
                "expected {} label words, got {}",
                self.config.num_labels,
                label_token_ids.len()
            )));
        }
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(label_token_ids.len() * d);
        for (i, &id) in label_token_ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::Config(format!("label word {id} outside vocabulary")));
            }
            if label_token_ids[..i].contains(&id) {
                return Err(Error::Config(format!("duplicate label word {id}")));
            }
            data.extend_from_slice(self.token_embeddings.row(id));
        }
        Ok(ClassifierHead {
            label_token_ids: label_token_ids.to_vec(),
            rows: Tensor::new(vec![label_token_ids.len(), d], data)?,
        })
    }

    pub fn matrix(&self, id: MatrixId) -> &MaskedLinear {
        self.layers[id.layer].matrix(id.kind)
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> &mut MaskedLinear {
        self.layers[id.layer].matrix_mut(id.kind)
    }

    pub fn matrix_ids(&self) -> Vec<MatrixId> {
        self.config.matrix_ids()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.matrix_ids()
            .into_iter()
            .map(|id| self.matrix(id).mask.clone())
            .collect()
    }

    pub fn set_masks(&mut self, masks: &[Mask]) -> Result<()> {
        let ids = self.matrix_ids();
        if masks.len() != ids.len() {
            return Err(Error::Contract(format!(
                "expected {} masks, got {}",
                ids.len(),
                masks.len()
            )));
        }
        for (id, m) in ids.iter().zip(masks) {
            let w = &self.matrix(*id).weight;
            if m.shape() != (w.rows(), w.cols()) {
                return Err(Error::shape(
                    "set_masks",
                    &[w.shape(), &[m.rows(), m.cols()]],
                ));
            }
        }
        for (id, m) in ids.into_iter().zip(masks) {
            self.matrix_mut(id).mask = m.clone();
        }
        Ok(())
    }

    /// Checksum over every tensor except the importance scores and masks.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (_, t) in self.frozen_tensors() {
            h.write_f64s(t.data());
        }
        h.finish()
    }

    /// Checksum over the prunable weight matrices only.
    pub fn weight_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for id in self.matrix_ids() {
            h.write_f64s(self.matrix(id).weight.data());
        }
        h.finish()
    }

    /// Named non-score tensors in canonical order.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embeddings".to_string(), &self.token_embeddings),
            ("position_embeddings".to_string(), &self.position_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for kind in MatrixKind::ALL {
                let m = layer.matrix(kind);
                let name = MatrixId { layer: l, kind }.name();
                out.push((format!("{name}.weight"), &m.weight));
                out.push((format!("{name}.bias"), &m.bias));
            }
            out.push((format!("layer{l}.attn_norm.gamma"), &layer.attn_norm.gamma));
            out.push((format!("layer{l}.attn_norm.beta"), &layer.attn_norm.beta));
            out.push((format!("layer{l}.ffn_norm.gamma"), &layer.ffn_norm.gamma));
            out.push((format!("layer{l}.ffn_norm.beta"), &layer.ffn_norm.beta));
        }
        out.push(("head".to_string(), &self.head.rows));
        out
    }

    fn check_sequence(&self, tokens: &[usize]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > c.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        if tokens[0] != c.cls_token_id {
            return Err(Error::Contract(format!(
                "sequence must start with CLS token {}, found {}",
                c.cls_token_id, tokens[0]
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Domain {
                op: "forward",
                msg: format!("token {bad} outside vocabulary of {}", c.vocab_size),
            });
        }
        Ok(())
    }

    /// Records the forward pass for a batch of sequences; returns `[B, C]`
    /// logits and the tape handles of every prunable matrix.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &[&[usize]],
        trainable: Trainable,
    ) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for seq in batch {
            self.check_sequence(seq)?;
        }
        let c = &self.config;
        let dh = c.head_dim();

        let tok_table = tape.constant(self.token_embeddings.clone());
        let pos_table = tape.constant(self.position_embeddings.clone());
        let token_ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let pos_ids: Vec<usize> = batch.iter().flat_map(|s| 0..s.len()).collect();
        let mut offsets = Vec::with_capacity(batch.len());
        let mut acc = 0;
        for s in batch {
            offsets.push((acc, s.len()));
            acc += s.len();
        }
        let tok = tape.embedding_lookup(tok_table, &token_ids)?;
        let pos = tape.embedding_lookup(pos_table, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        let mut bound = Vec::with_capacity(c.num_layers * 6);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut linears = [None; 6];
            for (i, kind) in MatrixKind::ALL.into_iter().enumerate() {
                let (wt, b) = bind_matrix(
                    tape,
                    layer.matrix(kind),
                    MatrixId { layer: l, kind },
                    trainable,
                    &mut bound,
                )?;
                linears[i] = Some((wt, b));
            }
            let [q, k, v, o, u, dn] = linears.map(|x| x.expect("bound"));

            let qx = linear(tape, x, q)?;
            let kx = linear(tape, x, k)?;
            let vx = linear(tape, x, v)?;
            let mut per_sample = Vec::with_capacity(batch.len());
            for &(start, len) in &offsets {
                let rows = start..start + len;
                let mut heads = Vec::with_capacity(c.num_heads);
                for h in 0..c.num_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = tape.slice(qx, rows.clone(), cols.clone())?;
                    let kh = tape.slice(kx, rows.clone(), cols.clone())?;
                    let vh = tape.slice(vx, rows.clone(), cols)?;
                    let kt = tape.transpose(kh)?;
                    let logits = tape.matmul(qh, kt)?;
                    let logits = tape.scale(logits, inv_sqrt);
                    let attn = tape.softmax(logits)?;
                    heads.push(tape.matmul(attn, vh)?);
                }
                per_sample.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    tape.concat_cols(&heads)?
                });
            }
            let ctx = if per_sample.len() == 1 {
                per_sample[0]
            } else {
                tape.concat_rows(&per_sample)?
            };
            let attn_out = linear(tape, ctx, o)?;
            let res = tape.add(x, attn_out)?;
            x = layer_norm(tape, res, &layer.attn_norm)?;

            let hidden = linear(tape, x, u)?;
            let hidden = tape.gelu(hidden);
            let ffn_out = linear(tape, hidden, dn)?;
            let res = tape.add(x, ffn_out)?;
            x = layer_norm(tape, res, &layer.ffn_norm)?;
        }

        let cls_rows: Vec<usize> = offsets.iter().map(|&(s, _)| s).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let head = tape.constant(self.head.rows.clone());
        let head_t = tape.transpose(head)?;
        let logits = tape.matmul(cls, head_t)?;
        Ok(ForwardPass { logits, bound })
    }

    /// Logits for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, &[tokens], Trainable::None)?;
        Ok(tape.value(pass.logits).data().to_vec())
    }

    /// Logits for a batch of sequences, one `Vec` per sequence.
    pub fn forward_many(&self, batch: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pass = self.forward_batch(&mut tape, batch, Trainable::None)?;
        let out = tape.value(pass.logits);
        Ok((0..batch.len()).map(|r| out.row(r).to_vec()).collect())
    }
}

fn bind_matrix(
    tape: &mut Tape,
    m: &MaskedLinear,
    id: MatrixId,
    trainable: Trainable,
    bound: &mut Vec<BoundMatrix>,
) -> Result<(Var, Var)> {
    let mask = m.mask.to_tensor();
    let train_w = matches!(trainable, Trainable::Weights | Trainable::WeightsAndScores);
    let train_s = matches!(trainable, Trainable::Scores | Trainable::WeightsAndScores);
    let weight = tape.leaf(m.weight.clone(), train_w);
    let scores = train_s.then(|| tape.leaf(m.scores.clone(), true));
    let effective = match (train_w, scores) {
        (false, Some(s)) => tape.ste_mask_apply(weight, &mask, s)?,
        (_, s) => tape.mask_apply(weight, &mask, s)?,
    };
    bound.push(BoundMatrix {
        id,
        weight,
        scores,
        effective,
    });
    let wt = tape.transpose(effective)?;
    let bias = tape.constant(m.bias.clone());
    Ok((wt, bias))
}

fn linear(tape: &mut Tape, x: Var, (wt, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, wt)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, p: &LayerNormParams) -> Result<Var> {
    let g = tape.constant(p.gamma.clone());
    let b = tape.constant(p.beta.clone());
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}
