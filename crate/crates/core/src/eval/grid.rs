use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Cells of equal `[C×H×W]` images laid out row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    /// `[rows·cols × C×H×W]`, cell `(i, j)` at index `i·cols + j`.
    pub cells: Tensor,
}

impl ImageGrid {
    pub fn new(rows: usize, cols: usize, cells: Tensor) -> Result<Self> {
        if cells.rank() != 4 || cells.shape()[0] != rows * cols {
            return Err(contract(format!(
                "{rows}×{cols} grid needs [{}×C×H×W] cells, got {:?}",
                rows * cols,
                cells.shape()
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn cell(&self, i: usize, j: usize) -> Tensor {
        self.cells.index_leading(i * self.cols + j)
    }

    pub fn channels(&self) -> usize {
        self.cells.shape()[1]
    }

    /// Pixel extent of the assembled image: `(rows·H, cols·W)`.
    pub fn pixel_dims(&self) -> (usize, usize) {
        let s = self.cells.shape();
        (self.rows * s[2], self.cols * s[3])
    }

    /// Channel-interleaved pixels of the assembled image, row by row.
    pub fn assemble(&self) -> Vec<f64> {
        let s = self.cells.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let (height, width) = self.pixel_dims();
        let mut out = vec![0.0; height * width * c];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let cell = self.cells.row(i * self.cols + j);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (py, px) = (i * h + y, j * w + x);
                            out[(py * width + px) * c + ch] = cell[(ch * h + y) * w + x];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Writes the grid as binary 8-bit PGM (one channel) or PPM (three channels).
/// Values are clamped to `[0, 1]` before quantisation.
pub fn write_pnm(path: &Path, grid: &ImageGrid) -> Result<()> {
    let magic = match grid.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(contract(format!(
                "PGM/PPM output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let (height, width) = grid.pixel_dims();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = grid
        .assemble()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
