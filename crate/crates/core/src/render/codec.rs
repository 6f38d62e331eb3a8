use alloc::vec::Vec;

use super::RenderError;
use crate::Pos;

/// Discretization of the unit field into `cols x rows` cells, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { cols: 24, rows: 16 }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.cols * self.rows
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        1.0 / self.rows as f64
    }

    /// Cell containing `pos`; the right/bottom edges are closed so 1.0 lands
    /// in the last column/row.
    pub fn discretize(&self, pos: Pos) -> Result<usize, RenderError> {
        if !in_unit(pos) {
            return Err(RenderError::OutOfField { x: pos[0], y: pos[1] });
        }
        let col = ((pos[0] * self.cols as f64) as usize).min(self.cols - 1);
        let row = ((pos[1] * self.rows as f64) as usize).min(self.rows - 1);
        Ok(row * self.cols + col)
    }

    pub fn cell_center(&self, cell: usize) -> Pos {
        let (row, col) = (cell / self.cols, cell % self.cols);
        [(col as f64 + 0.5) / self.cols as f64, (row as f64 + 0.5) / self.rows as f64]
    }

    /// Probability-weighted mean of cell centers.
    pub fn heatmap_to_coords(&self, heat: &[f64]) -> Pos {
        let mut acc = [0.0, 0.0];
        let mut total = 0.0;
        for (cell, &p) in heat.iter().enumerate() {
            let c = self.cell_center(cell);
            acc[0] += p * c[0];
            acc[1] += p * c[1];
            total += p;
        }
        [acc[0] / total, acc[1] / total]
    }

    pub fn one_hot(&self, cell: usize) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.cells()];
        v[cell] = 1.0;
        v
    }
}

pub(crate) fn in_unit(p: Pos) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

/// Per-agent probability vector over grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefHeatmap(pub Vec<f64>);

impl BeliefHeatmap {
    pub fn uniform(cells: usize) -> Self {
        BeliefHeatmap(alloc::vec![1.0 / cells as f64; cells])
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.0.iter().all(|&p| p >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Most probable cell; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}
