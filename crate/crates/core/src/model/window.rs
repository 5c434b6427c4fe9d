use std::sync::Arc;

use crate::error::{Error, Result};

/// Partition of the `N x N` pair grid, padded to `padded_n`, into
/// non-overlapping `S x S` windows.
///
/// Cells are addressed in two orders: the dense pair order `i * N + j`
/// (valid cells only) and the windowed order `window * S^2 + position`,
/// where windows are row-major over the window grid and positions are
/// row-major inside a window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    n: usize,
    s: usize,
    padded_n: usize,
}

impl WindowLayout {
    /// Pads to the next multiple of `s`.
    pub fn new(n: usize, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        Self::with_padding(n, s, n.div_ceil(s).max(1) * s)
    }

    pub fn with_padding(n: usize, s: usize, padded_n: usize) -> Result<Self> {
        if s == 0 || padded_n < n || padded_n % s != 0 {
            return Err(Error::Config(format!(
                "padded size {padded_n} must be a multiple of {s} and at least {n}"
            )));
        }
        Ok(WindowLayout { n, s, padded_n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn window(&self) -> usize {
        self.s
    }

    pub fn padded_n(&self) -> usize {
        self.padded_n
    }

    pub fn windows_per_side(&self) -> usize {
        self.padded_n / self.s
    }

    pub fn n_windows(&self) -> usize {
        self.windows_per_side().pow(2)
    }

    pub fn cells_per_window(&self) -> usize {
        self.s * self.s
    }

    pub fn n_valid(&self) -> usize {
        self.n * self.n
    }

    pub fn n_padded_cells(&self) -> usize {
        self.padded_n * self.padded_n - self.n_valid()
    }

    /// Grid coordinates `(row, col)` of `position` inside `window`.
    pub fn coords(&self, window: usize, position: usize) -> (usize, usize) {
        let per_side = self.windows_per_side();
        let (wr, wc) = (window / per_side, window % per_side);
        (wr * self.s + position / self.s, wc * self.s + position % self.s)
    }

    /// Dense pair index of a windowed cell, or `None` for padding.
    pub fn pair_index(&self, window: usize, position: usize) -> Option<usize> {
        let (r, c) = self.coords(window, position);
        (r < self.n && c < self.n).then_some(r * self.n + c)
    }

    pub fn window_valid_count(&self, window: usize) -> usize {
        (0..self.cells_per_window())
            .filter(|&p| self.pair_index(window, p).is_some())
            .count()
    }

    /// Windows holding at least one valid cell.
    pub fn active_windows(&self) -> Vec<usize> {
        (0..self.n_windows())
            .filter(|&w| self.window_valid_count(w) > 0)
            .collect()
    }

    /// Row selection that lays the listed windows out cell by cell.
    pub fn gather_rows(&self, windows: &[usize]) -> Arc<[Option<usize>]> {
        windows
            .iter()
            .flat_map(|&w| (0..self.cells_per_window()).map(move |p| self.pair_index(w, p)))
            .collect()
    }

    /// Inverse of [`WindowLayout::gather_rows`]: for every valid pair, its
    /// row in the windowed layout of `windows`.
    pub fn scatter_rows(&self, windows: &[usize]) -> Arc<[Option<usize>]> {
        let mut rows = vec![None; self.n_valid()];
        for (slot, &w) in windows.iter().enumerate() {
            for p in 0..self.cells_per_window() {
                if let Some(idx) = self.pair_index(w, p) {
                    rows[idx] = Some(slot * self.cells_per_window() + p);
                }
            }
        }
        rows.into()
    }
}
