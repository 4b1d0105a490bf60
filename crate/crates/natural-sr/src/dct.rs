//! Blockwise orthonormal 2-D DCT-II.
//!
//! Images are processed in non-overlapping `block x block` tiles per
//! channel. The orthonormal scaling makes the transform an isometry, so a
//! constant tile of value `c` has DC coefficient `block * c` and Parseval
//! holds exactly up to rounding.

use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone)]
pub struct DctLayout {
    block: usize,
    /// basis[u * block + x] = c_u * cos((2x+1) u pi / (2 block))
    basis: Vec<f64>,
}

impl DctLayout {
    pub fn new(block: usize) -> Result<DctLayout> {
        if block < 2 {
            return Err(Error::Config(format!("DCT block must be >= 2, got {}", block)));
        }
        let n = block as f64;
        let mut basis = vec![0.0; block * block];
        for u in 0..block {
            let cu = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for x in 0..block {
                basis[u * block + x] =
                    cu * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * n)).cos();
            }
        }
        Ok(DctLayout { block, basis })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    fn check_extents(&self, img: &Image, op: &'static str) -> Result<()> {
        if img.height() % self.block != 0 || img.width() % self.block != 0 {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} not divisible by block {}",
                    img.height(),
                    img.width(),
                    self.block
                ),
            ));
        }
        Ok(())
    }

    /// C = B X B^T per tile: `tile` is row-major `block x block`, replaced
    /// by its coefficients.
    fn transform_tile(&self, tile: &mut [f64], inverse: bool) {
        let n = self.block;
        let mut tmp = vec![0.0; n * n];
        // Rows: tmp = tile * B^T (forward) or tile * B (inverse).
        for i in 0..n {
            for u in 0..n {
                let mut acc = 0.0;
                for x in 0..n {
                    let b = if inverse { self.basis[x * n + u] } else { self.basis[u * n + x] };
                    acc += tile[i * n + x] * b;
                }
                tmp[i * n + u] = acc;
            }
        }
        // Columns.
        for j in 0..n {
            for u in 0..n {
                let mut acc = 0.0;
                for x in 0..n {
                    let b = if inverse { self.basis[x * n + u] } else { self.basis[u * n + x] };
                    acc += tmp[x * n + j] * b;
                }
                tile[u * n + j] = acc;
            }
        }
    }

    fn apply(&self, img: &Image, inverse: bool) -> Result<Image> {
        self.check_extents(img, if inverse { "idct" } else { "dct" })?;
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let n = self.block;
        let mut out = Image::zeros(h, w, c);
        let mut tile = vec![0.0; n * n];
        for ch in 0..c {
            for by in (0..h).step_by(n) {
                for bx in (0..w).step_by(n) {
                    for y in 0..n {
                        for x in 0..n {
                            tile[y * n + x] = img.at(by + y, bx + x, ch);
                        }
                    }
                    self.transform_tile(&mut tile, inverse);
                    for y in 0..n {
                        for x in 0..n {
                            *out.at_mut(by + y, bx + x, ch) = tile[y * n + x];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward blockwise DCT; output holds coefficients in tile layout.
    pub fn forward(&self, img: &Image) -> Result<Image> {
        self.apply(img, false)
    }

    /// Inverse blockwise DCT.
    pub fn inverse(&self, coefs: &Image) -> Result<Image> {
        self.apply(coefs, true)
    }

    /// Coefficient coordinates of the last row and last column of a tile:
    /// the injection sites for synthetic high-frequency noise. For block 8
    /// that is 15 of the 64 coefficients.
    pub fn last_row_col_mask(&self) -> Vec<(usize, usize)> {
        let n = self.block;
        let mut mask = Vec::with_capacity(2 * n - 1);
        for x in 0..n {
            mask.push((n - 1, x));
        }
        for y in 0..n - 1 {
            mask.push((y, n - 1));
        }
        mask
    }
}
