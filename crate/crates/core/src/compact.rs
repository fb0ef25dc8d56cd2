//! Structural compaction of a masked encoder into smaller dense matrices.
//!
//! Feed-forward units whose `W_U` row keeps fewer than `k` weights (only
//! empty rows when `k = 0`) are dropped together with the paired `W_D`
//! column and `b_U` entry. A dropped unit still emitted the constant
//! `gelu(b_U[i])`, so `W_D[:, i] · gelu(b_U[i])` is folded into `b_D`; for an
//! empty row this makes removal exact. Units whose `W_D` column is fully
//! pruned contribute nothing and are always dropped.
//!
//! Attention heads are removed only whole: the head's `W_Q`, `W_K`, `W_V`
//! row blocks and its `W_O` column block must all be empty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gelu, softmax_row};
use crate::checkpoint::{Checkpoint, LABEL_IDS_MAP};
use crate::error::{Error, FormatError, Result};
use crate::mask::Mask;
use crate::model::{EncoderModel, LayerNormParams, MatrixKind, ModelConfig, LAYER_NORM_EPS};
use crate::tensor::{matmul_nt_into, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CompactedAttention {
    /// Original indices of the kept heads.
    pub heads: Vec<usize>,
    pub query: Tensor,
    pub query_bias: Tensor,
    pub key: Tensor,
    pub key_bias: Tensor,
    pub value: Tensor,
    pub value_bias: Tensor,
    /// `[d, kept_heads · head_dim]`.
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactedFfn {
    /// Original indices of the kept hidden units.
    pub units: Vec<usize>,
    pub up: Tensor,
    pub up_bias: Tensor,
    pub down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactedLayer {
    pub attention: Option<CompactedAttention>,
    pub output_bias: Tensor,
    pub ffn: Option<CompactedFfn>,
    /// `b_D` plus the folded contribution of removed units.
    pub down_bias: Tensor,
    pub attn_norm: LayerNormParams,
    pub ffn_norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactedModel {
    pub config: ModelConfig,
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<CompactedLayer>,
    pub head: Tensor,
    pub label_token_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CompactionReport {
    pub model: CompactedModel,
    pub min_row_weights: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub removed_units: usize,
    pub removed_heads: usize,
    /// Largest absolute logit difference against the masked model on the probe batch.
    pub max_deviation: f64,
}

/// Entries of the six projection matrices and their biases of a dense model.
pub fn prunable_param_count(config: &ModelConfig) -> usize {
    let biases: usize = MatrixKind::ALL
        .iter()
        .map(|&k| config.matrix_shape(k).0)
        .sum();
    config.prunable_params() + config.num_layers * biases
}

fn rows_of(t: &Tensor, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    rows.flat_map(|r| t.row(r).iter().copied()).collect()
}

fn cols_of(t: &Tensor, cols: &[usize]) -> Vec<f64> {
    (0..t.rows())
        .flat_map(|r| cols.iter().map(move |&c| t.get2(r, c)))
        .collect()
}

fn tensor_or_none(shape: [usize; 2], data: Vec<f64>) -> Option<Tensor> {
    (shape[0] > 0 && shape[1] > 0).then(|| Tensor::new(shape.to_vec(), data).expect("shape"))
}

pub fn compact(
    model: &EncoderModel,
    masks: &[Mask],
    min_row_weights: usize,
    probe: &[Vec<usize>],
) -> Result<CompactionReport> {
    let mut masked = model.clone();
    masked.set_masks(masks).map_err(|e| match e {
        Error::Shape { shapes, .. } => Error::Shape {
            op: "compact",
            shapes,
        },
        other => other,
    })?;
    let c = model.config;
    let dh = c.head_dim();
    let threshold = min_row_weights.max(1);
    let (mut removed_units, mut removed_heads) = (0, 0);
    let mut layers = Vec::with_capacity(c.num_layers);
    for layer in &masked.layers {
        let (u_mask, d_mask) = (&layer.up.mask, &layer.down.mask);
        if u_mask.rows() != d_mask.cols() || u_mask.cols() != d_mask.rows() {
            return Err(Error::shape(
                "compact",
                &[
                    &[u_mask.rows(), u_mask.cols()],
                    &[d_mask.rows(), d_mask.cols()],
                ],
            ));
        }
        let w = |k: MatrixKind| layer.matrix(k).effective_weight();
        let (wq, wk, wv, wo, wu, wd) = (
            w(MatrixKind::Query),
            w(MatrixKind::Key),
            w(MatrixKind::Value),
            w(MatrixKind::Output),
            w(MatrixKind::Up),
            w(MatrixKind::Down),
        );

        let heads: Vec<usize> = (0..c.num_heads)
            .filter(|&h| {
                let block = h * dh..(h + 1) * dh;
                let rows_empty = [&layer.query.mask, &layer.key.mask, &layer.value.mask]
                    .iter()
                    .all(|m| block.clone().all(|r| m.row_count(r) == 0));
                let cols_empty = block
                    .clone()
                    .all(|col| layer.output.mask.col_count(col) == 0);
                !(rows_empty && cols_empty)
            })
            .collect();
        removed_heads += c.num_heads - heads.len();
        let feat: Vec<usize> = heads.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
        let attention = if heads.is_empty() {
            None
        } else {
            let pick = |t: &Tensor| {
                Tensor::new(vec![feat.len(), t.cols()], rows_of(t, feat.iter().copied())).unwrap()
            };
            let pick_bias = |t: &Tensor| {
                Tensor::new(
                    vec![feat.len()],
                    feat.iter().map(|&i| t.data()[i]).collect(),
                )
                .unwrap()
            };
            Some(CompactedAttention {
                heads: heads.clone(),
                query: pick(&wq),
                query_bias: pick_bias(&layer.query.bias),
                key: pick(&wk),
                key_bias: pick_bias(&layer.key.bias),
                value: pick(&wv),
                value_bias: pick_bias(&layer.value.bias),
                output: Tensor::new(vec![c.hidden_dim, feat.len()], cols_of(&wo, &feat)).unwrap(),
            })
        };

        let mut down_bias = layer.down.bias.clone();
        let mut units = Vec::new();
        for i in 0..c.ffn_dim {
            let dead_out = d_mask.col_count(i) == 0;
            if u_mask.row_count(i) < threshold || dead_out {
                let act = gelu(layer.up.bias.data()[i]);
                for (r, b) in down_bias.data_mut().iter_mut().enumerate() {
                    *b += wd.get2(r, i) * act;
                }
            } else {
                units.push(i);
            }
        }
        removed_units += c.ffn_dim - units.len();
        let ffn = tensor_or_none(
            [units.len(), c.hidden_dim],
            rows_of(&wu, units.iter().copied()),
        )
        .map(|up| CompactedFfn {
            up,
            up_bias: Tensor::new(
                vec![units.len()],
                units.iter().map(|&i| layer.up.bias.data()[i]).collect(),
            )
            .unwrap(),
            down: Tensor::new(vec![c.hidden_dim, units.len()], cols_of(&wd, &units)).unwrap(),
            units: units.clone(),
        });

        layers.push(CompactedLayer {
            attention,
            output_bias: layer.output.bias.clone(),
            ffn,
            down_bias,
            attn_norm: layer.attn_norm.clone(),
            ffn_norm: layer.ffn_norm.clone(),
        });
    }
    let compacted = CompactedModel {
        config: c,
        token_embeddings: model.token_embeddings.clone(),
        position_embeddings: model.position_embeddings.clone(),
        layers,
        head: model.head.rows.clone(),
        label_token_ids: model.head.label_token_ids.clone(),
    };
    let mut max_deviation: f64 = 0.0;
    for chunk in probe.chunks(64) {
        let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        let expected = masked.forward_many(&refs)?;
        for (seq, exp) in chunk.iter().zip(expected) {
            let got = compacted.forward(seq)?;
            for (a, b) in got.iter().zip(&exp) {
                max_deviation = max_deviation.max((a - b).abs());
            }
        }
    }
    Ok(CompactionReport {
        params_before: prunable_param_count(&c),
        params_after: compacted.param_count(),
        model: compacted,
        min_row_weights,
        removed_units,
        removed_heads,
        max_deviation,
    })
}

/// Seeded random sequences (CLS first) covering every length up to the limit.
pub fn probe_batch(config: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=config.max_seq_len);
            let mut seq = vec![config.cls_token_id];
            seq.extend((1..len).map(|_| rng.gen_range(0..config.vocab_size)));
            seq
        })
        .collect()
}

fn linear(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.rows(), w.cols());
    let mut y = vec![0.0; n * out];
    matmul_nt_into(x, w.data(), &mut y, n, inp, out);
    for row in y.chunks_mut(out) {
        row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
    }
    y
}

fn layer_norm_rows(x: &mut [f64], m: usize, p: &LayerNormParams) {
    for row in x.chunks_mut(m) {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * p.gamma.data()[c] + p.beta.data()[c];
        }
    }
}

impl CompactedModel {
    pub fn param_count(&self) -> usize {
        let d = self.config.hidden_dim;
        self.layers
            .iter()
            .map(|l| {
                let attn = l.attention.as_ref().map_or(0, |a| {
                    a.query.numel()
                        + a.key.numel()
                        + a.value.numel()
                        + a.output.numel()
                        + 3 * a.query.rows()
                });
                let ffn = l
                    .ffn
                    .as_ref()
                    .map_or(0, |f| f.up.numel() + f.down.numel() + f.up_bias.numel());
                attn + ffn + 2 * d
            })
            .sum()
    }

    /// Logits for one sequence, computed without the autodiff tape.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.max_seq_len || tokens[0] != c.cls_token_id {
            return Err(Error::Contract(
                "invalid token sequence for compacted forward".into(),
            ));
        }
        if tokens.iter().any(|&t| t >= c.vocab_size) {
            return Err(Error::Domain {
                op: "forward",
                msg: "token outside vocabulary".into(),
            });
        }
        let (n, d, dh) = (tokens.len(), c.hidden_dim, c.head_dim());
        let mut x: Vec<f64> = tokens
            .iter()
            .enumerate()
            .flat_map(|(p, &t)| {
                self.token_embeddings
                    .row(t)
                    .iter()
                    .zip(self.position_embeddings.row(p))
                    .map(|(a, b)| a + b)
                    .collect::<Vec<_>>()
            })
            .collect();
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let attn_out = match &layer.attention {
                None => layer.output_bias.data().repeat(n),
                Some(a) => {
                    let q = linear(&x, n, &a.query, &a.query_bias);
                    let k = linear(&x, n, &a.key, &a.key_bias);
                    let v = linear(&x, n, &a.value, &a.value_bias);
                    let width = a.heads.len() * dh;
                    let mut ctx = vec![0.0; n * width];
                    let mut logits = vec![0.0; n];
                    let mut probs = vec![0.0; n];
                    for h in 0..a.heads.len() {
                        let off = h * dh;
                        for i in 0..n {
                            for j in 0..n {
                                logits[j] = (0..dh)
                                    .map(|e| q[i * width + off + e] * k[j * width + off + e])
                                    .sum::<f64>()
                                    * scale;
                            }
                            softmax_row(&logits, &mut probs);
                            for (j, &p) in probs.iter().enumerate() {
                                for e in 0..dh {
                                    ctx[i * width + off + e] += p * v[j * width + off + e];
                                }
                            }
                        }
                    }
                    linear(&ctx, n, &a.output, &layer.output_bias)
                }
            };
            x.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);
            layer_norm_rows(&mut x, d, &layer.attn_norm);

            let ffn_out = match &layer.ffn {
                None => layer.down_bias.data().repeat(n),
                Some(f) => {
                    let mut hdn = linear(&x, n, &f.up, &f.up_bias);
                    hdn.iter_mut().for_each(|v| *v = gelu(*v));
                    linear(&hdn, n, &f.down, &layer.down_bias)
                }
            };
            x.iter_mut().zip(&ffn_out).for_each(|(a, b)| *a += b);
            layer_norm_rows(&mut x, d, &layer.ffn_norm);
        }
        let cls = &x[..d];
        Ok((0..self.head.rows())
            .map(|k| cls.iter().zip(self.head.row(k)).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Checkpoint with compacted tensor shapes and kept-index sidecar maps.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = vec![
            (
                "token_embeddings".to_string(),
                self.token_embeddings.clone(),
            ),
            (
                "position_embeddings".to_string(),
                self.position_embeddings.clone(),
            ),
        ];
        let mut index_maps = vec![(
            LABEL_IDS_MAP.to_string(),
            self.label_token_ids.iter().map(|&v| v as u32).collect(),
        )];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{l}");
            let mut heads = vec![];
            if let Some(a) = &layer.attention {
                heads = a.heads.iter().map(|&h| h as u32).collect();
                for (name, t) in [
                    ("q.weight", &a.query),
                    ("q.bias", &a.query_bias),
                    ("k.weight", &a.key),
                    ("k.bias", &a.key_bias),
                    ("v.weight", &a.value),
                    ("v.bias", &a.value_bias),
                    ("o.weight", &a.output),
                ] {
                    tensors.push((format!("{p}.{name}"), t.clone()));
                }
            }
            tensors.push((format!("{p}.o.bias"), layer.output_bias.clone()));
            let mut units = vec![];
            if let Some(f) = &layer.ffn {
                units = f.units.iter().map(|&u| u as u32).collect();
                tensors.push((format!("{p}.u.weight"), f.up.clone()));
                tensors.push((format!("{p}.u.bias"), f.up_bias.clone()));
                tensors.push((format!("{p}.d.weight"), f.down.clone()));
            }
            tensors.push((format!("{p}.d.bias"), layer.down_bias.clone()));
            tensors.push((
                format!("{p}.attn_norm.gamma"),
                layer.attn_norm.gamma.clone(),
            ));
            tensors.push((format!("{p}.attn_norm.beta"), layer.attn_norm.beta.clone()));
            tensors.push((format!("{p}.ffn_norm.gamma"), layer.ffn_norm.gamma.clone()));
            tensors.push((format!("{p}.ffn_norm.beta"), layer.ffn_norm.beta.clone()));
            index_maps.push((format!("{p}.heads"), heads));
            index_maps.push((format!("{p}.ffn_units"), units));
        }
        tensors.push(("head".to_string(), self.head.clone()));
        Checkpoint {
            config: self.config,
            tensors,
            index_maps,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let t = |name: &str| ckpt.tensor(name).cloned();
        let map = |name: &str| -> Result<Vec<usize>> {
            ckpt.index_map(name)
                .map(|v| v.iter().map(|&x| x as usize).collect())
                .ok_or_else(|| {
                    FormatError::Malformed(format!("checkpoint lacks index map {name}")).into()
                })
        };
        let mut layers = Vec::new();
        for l in 0..ckpt.config.num_layers {
            let p = format!("layer{l}");
            let heads = map(&format!("{p}.heads"))?;
            let attention = if heads.is_empty() {
                None
            } else {
                Some(CompactedAttention {
                    heads,
                    query: t(&format!("{p}.q.weight"))?,
                    query_bias: t(&format!("{p}.q.bias"))?,
                    key: t(&format!("{p}.k.weight"))?,
                    key_bias: t(&format!("{p}.k.bias"))?,
                    value: t(&format!("{p}.v.weight"))?,
                    value_bias: t(&format!("{p}.v.bias"))?,
                    output: t(&format!("{p}.o.weight"))?,
                })
            };
            let units = map(&format!("{p}.ffn_units"))?;
            let ffn = if units.is_empty() {
                None
            } else {
                Some(CompactedFfn {
                    units,
                    up: t(&format!("{p}.u.weight"))?,
                    up_bias: t(&format!("{p}.u.bias"))?,
                    down: t(&format!("{p}.d.weight"))?,
                })
            };
            layers.push(CompactedLayer {
                attention,
                output_bias: t(&format!("{p}.o.bias"))?,
                ffn,
                down_bias: t(&format!("{p}.d.bias"))?,
                attn_norm: LayerNormParams {
                    gamma: t(&format!("{p}.attn_norm.gamma"))?,
                    beta: t(&format!("{p}.attn_norm.beta"))?,
                },
                ffn_norm: LayerNormParams {
                    gamma: t(&format!("{p}.ffn_norm.gamma"))?,
                    beta: t(&format!("{p}.ffn_norm.beta"))?,
                },
            });
        }
        Ok(CompactedModel {
            config: ckpt.config,
            token_embeddings: t("token_embeddings")?,
            position_embeddings: t("position_embeddings")?,
            layers,
            head: t("head")?,
            label_token_ids: map(LABEL_IDS_MAP)?,
        })
    }
}
