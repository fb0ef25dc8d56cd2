use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary keep/prune mask over a row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || bits.len() != rows * cols {
            return Err(Error::shape("mask", &[&[rows, cols], &[bits.len()]]));
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Interprets a tensor of exact 0/1 values as a mask.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if !t.is_matrix() {
            return Err(Error::shape("mask", &[t.shape()]));
        }
        let mut bits = Vec::with_capacity(t.numel());
        for &v in t.data() {
            match v {
                0.0 => bits.push(false),
                1.0 => bits.push(true),
                _ => {
                    return Err(Error::Domain {
                        op: "mask",
                        msg: format!("non-binary mask value {v}"),
                    })
                }
            }
        }
        Mask::new(t.rows(), t.cols(), bits)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask extents")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.bits[r * self.cols + c] = keep;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    /// Number of kept entries in row `r`.
    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b).count()
    }

    pub fn col_count(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    /// Number of entries that differ between two same-shaped masks.
    pub fn hamming(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}
