//! Remaining-weight distributions over layers, matrix types and attention
//! heads.
//!
//! Head blocks are contiguous groups of `hidden_dim / num_heads` output
//! features. With the `[out, in]` weight layout used here that is a block of
//! rows of `W_Q`, `W_K` and `W_V` spanning every input column.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{MatrixKind, ModelConfig};

/// The matrix a density row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Matrix(MatrixKind),
    /// All six matrices of a layer together.
    Overall,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Matrix(k) => write!(f, "{k}"),
            Component::Overall => f.write_str("overall"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "overall" {
            return Ok(Component::Overall);
        }
        MatrixKind::parse(s)
            .map(Component::Matrix)
            .ok_or_else(|| Error::Contract(format!("unknown density component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub layer: usize,
    pub component: Component,
    pub head: Option<usize>,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensityTable {
    pub rows: Vec<DensityRow>,
}

impl DensityTable {
    pub fn get(&self, layer: usize, component: Component, head: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.component == component && r.head == head)
            .map(|r| r.density)
    }

    pub fn densities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.density).collect()
    }

    pub fn extend(&mut self, other: DensityTable) {
        self.rows.extend(other.rows);
    }
}

fn check_masks(masks: &[Mask], config: &ModelConfig) -> Result<()> {
    let ids = config.matrix_ids();
    if masks.len() != ids.len() {
        return Err(Error::Contract(format!(
            "expected {} masks for this config, got {}",
            ids.len(),
            masks.len()
        )));
    }
    for (id, m) in ids.iter().zip(masks) {
        let (r, c) = config.matrix_shape(id.kind);
        if m.shape() != (r, c) {
            return Err(Error::shape(
                "density analysis",
                &[&[r, c], &[m.rows(), m.cols()]],
            ));
        }
    }
    Ok(())
}

/// Density of every (layer, matrix) plus one `overall` row per layer.
/// Masks are in [`ModelConfig::matrix_ids`] order.
pub fn layer_distribution(masks: &[Mask], config: &ModelConfig) -> Result<DensityTable> {
    check_masks(masks, config)?;
    let mut rows = Vec::new();
    for (layer, chunk) in masks.chunks(MatrixKind::ALL.len()).enumerate() {
        let (mut kept, mut total) = (0usize, 0usize);
        for (kind, m) in MatrixKind::ALL.iter().zip(chunk) {
            kept += m.count_ones();
            total += m.len();
            rows.push(DensityRow {
                layer,
                component: Component::Matrix(*kind),
                head: None,
                density: m.density(),
            });
        }
        rows.push(DensityRow {
            layer,
            component: Component::Overall,
            head: None,
            density: kept as f64 / total as f64,
        });
    }
    Ok(DensityTable { rows })
}

/// Per-head density of the Q, K and V matrices.
pub fn head_distribution(masks: &[Mask], config: &ModelConfig) -> Result<DensityTable> {
    check_masks(masks, config)?;
    if config.num_heads == 0 || !config.hidden_dim.is_multiple_of(config.num_heads) {
        return Err(Error::Config(format!(
            "hidden_dim {} cannot be split into {} heads",
            config.hidden_dim, config.num_heads
        )));
    }
    let dh = config.head_dim();
    let mut rows = Vec::new();
    for (layer, chunk) in masks.chunks(MatrixKind::ALL.len()).enumerate() {
        for (kind, m) in MatrixKind::ALL.iter().zip(chunk) {
            if !matches!(
                kind,
                MatrixKind::Query | MatrixKind::Key | MatrixKind::Value
            ) {
                continue;
            }
            for h in 0..config.num_heads {
                let kept: usize = (h * dh..(h + 1) * dh).map(|r| m.row_count(r)).sum();
                rows.push(DensityRow {
                    layer,
                    component: Component::Matrix(*kind),
                    head: Some(h),
                    density: kept as f64 / (dh * m.cols()) as f64,
                });
            }
        }
    }
    Ok(DensityTable { rows })
}

/// Population standard deviation (Welford).
pub fn std_dev(values: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    if values.is_empty() {
        0.0
    } else {
        (m2 / values.len() as f64).sqrt()
    }
}

/// Dispersion of per-head densities for one matrix type.
pub fn head_density_std(table: &DensityTable, kind: MatrixKind) -> f64 {
    let v: Vec<f64> = table
        .rows
        .iter()
        .filter(|r| r.head.is_some() && r.component == Component::Matrix(kind))
        .map(|r| r.density)
        .collect();
    std_dev(&v)
}

pub const ANALYSIS_HEADER: [&str; 4] = ["layer", "type", "head", "density"];

pub fn analysis_to_csv(table: &DensityTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv encoding: {e}"));
    w.write_record(ANALYSIS_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.layer.to_string(),
            r.component.to_string(),
            r.head.map(|h| h.to_string()).unwrap_or_default(),
            format!("{:.6}", r.density),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn analysis_from_csv(text: &str) -> Result<DensityTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |msg: String| Error::Dataset(format!("analysis csv: {msg}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ANALYSIS_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let layer = rec[0]
            .parse()
            .map_err(|_| bad(format!("layer {:?}", &rec[0])))?;
        let component = rec[1].parse()?;
        let head = if rec[2].is_empty() {
            None
        } else {
            Some(
                rec[2]
                    .parse()
                    .map_err(|_| bad(format!("head {:?}", &rec[2])))?,
            )
        };
        let density = rec[3]
            .parse()
            .map_err(|_| bad(format!("density {:?}", &rec[3])))?;
        rows.push(DensityRow {
            layer,
            component,
            head,
            density,
        });
    }
    Ok(DensityTable { rows })
}

pub fn export_analysis(table: &DensityTable, path: &Path) -> Result<()> {
    write_atomic(path, analysis_to_csv(table)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 4,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 8,
            num_labels: 2,
            cls_token_id: 1,
        }
    }

    fn ones(c: &ModelConfig) -> Vec<Mask> {
        c.matrix_ids()
            .iter()
            .map(|id| {
                let (r, k) = c.matrix_shape(id.kind);
                Mask::ones(r, k)
            })
            .collect()
    }

    #[test]
    fn dense_masks_are_fully_dense() {
        let c = cfg();
        let t = layer_distribution(&ones(&c), &c).unwrap();
        assert!(t.densities().iter().all(|&d| d == 1.0));
        assert_eq!(t.rows.len(), 7);
        let h = head_distribution(&ones(&c), &c).unwrap();
        assert_eq!(h.rows.len(), 12);
    }

    #[test]
    fn half_matrix_and_single_head() {
        let c = cfg();
        let mut m = ones(&c);
        let q = &mut m[0];
        for r in 0..8 {
            for col in 0..8 {
                q.set(r, col, r < 2);
            }
        }
        let v = &mut m[2];
        for col in 0..8 {
            v.set(0, col, false);
            v.set(1, col, false);
        }
        let h = head_distribution(&m, &c).unwrap();
        let qd: Vec<f64> = (0..4)
            .map(|i| {
                h.get(0, Component::Matrix(MatrixKind::Query), Some(i))
                    .unwrap()
            })
            .collect();
        assert_eq!(qd, vec![1.0, 0.0, 0.0, 0.0]);
        let t = layer_distribution(&m, &c).unwrap();
        assert_eq!(
            t.get(0, Component::Matrix(MatrixKind::Value), None),
            Some(0.75)
        );
    }

    #[test]
    fn wrong_shapes_rejected() {
        let c = cfg();
        let mut m = ones(&c);
        m[3] = Mask::ones(3, 3);
        assert!(layer_distribution(&m, &c).is_err());
        assert!(layer_distribution(&m[..2], &c).is_err());
    }

    #[test]
    fn csv_format() {
        let empty = analysis_to_csv(&DensityTable::default()).unwrap();
        assert_eq!(empty, "layer,type,head,density\n");
        let t = DensityTable {
            rows: vec![
                DensityRow {
                    layer: 1,
                    component: Component::Overall,
                    head: None,
                    density: 1.0 / 3.0,
                },
                DensityRow {
                    layer: 0,
                    component: Component::Matrix(MatrixKind::Key),
                    head: Some(2),
                    density: 0.5,
                },
            ],
        };
        let text = analysis_to_csv(&t).unwrap();
        assert_eq!(
            text,
            "layer,type,head,density\n1,overall,,0.333333\n0,k,2,0.500000\n"
        );
        let back = analysis_from_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1], t.rows[1]);
        assert!((back.rows[0].density - t.rows[0].density).abs() < 1e-6);
    }

    #[test]
    fn std_dev_matches_two_pass() {
        let v = [0.1, 0.4, 0.35, 0.9, 0.0];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((std_dev(&v) - var.sqrt()).abs() < 1e-15);
        assert_eq!(std_dev(&[]), 0.0);
    }
}
