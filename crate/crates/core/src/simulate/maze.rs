//! Perfect mazes by randomized depth-first search, rasterised onto a pixel grid.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cell grid plus the set of carved passages between neighbouring cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Maze {
    rows: usize,
    cols: usize,
    /// `open_right[r][c]`: passage between (r, c) and (r, c + 1).
    open_right: Vec<Vec<bool>>,
    /// `open_down[r][c]`: passage between (r, c) and (r + 1, c).
    open_down: Vec<Vec<bool>>,
}

impl Maze {
    pub fn generate(rows: usize, cols: usize, seed: u64) -> Self {
        assert!(rows > 0 && cols > 0, "maze needs at least one cell");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut open_right = vec![vec![false; cols]; rows];
        let mut open_down = vec![vec![false; cols]; rows];
        let mut visited = vec![vec![false; cols]; rows];
        let mut stack = vec![(0usize, 0usize)];
        visited[0][0] = true;

        while let Some(&(r, c)) = stack.last() {
            let mut next = Vec::with_capacity(4);
            if r > 0 && !visited[r - 1][c] {
                next.push((r - 1, c));
            }
            if r + 1 < rows && !visited[r + 1][c] {
                next.push((r + 1, c));
            }
            if c > 0 && !visited[r][c - 1] {
                next.push((r, c - 1));
            }
            if c + 1 < cols && !visited[r][c + 1] {
                next.push((r, c + 1));
            }
            match next.choose(&mut rng) {
                None => {
                    stack.pop();
                }
                Some(&(nr, nc)) => {
                    if nr == r {
                        open_right[r][c.min(nc)] = true;
                    } else {
                        open_down[r.min(nr)][c] = true;
                    }
                    visited[nr][nc] = true;
                    stack.push((nr, nc));
                }
            }
        }
        Self {
            rows,
            cols,
            open_right,
            open_down,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Whether the wall on the left side of cell (r, c) is present.
    pub fn wall_left(&self, r: usize, c: usize) -> bool {
        c == 0 || !self.open_right[r][c - 1]
    }

    /// Whether the wall on the top side of cell (r, c) is present.
    pub fn wall_top(&self, r: usize, c: usize) -> bool {
        r == 0 || !self.open_down[r - 1][c]
    }

    pub fn passage_count(&self) -> usize {
        self.open_right.iter().flatten().filter(|&&o| o).count()
            + self.open_down.iter().flatten().filter(|&&o| o).count()
    }

    /// Rasterise with `cell_px` pixels per cell and `wall_px` wide walls.
    ///
    /// Each cell owns its top and left wall strips and the top-left post;
    /// cells on the last row/column additionally carry the outer border.
    /// The result is `rows·cell_px × cols·cell_px`, `true` on walls.
    pub fn render(&self, cell_px: usize, wall_px: usize) -> Array2<bool> {
        assert!(wall_px >= 1 && wall_px < cell_px, "wall must be thinner than a cell");
        let shape = (self.rows * cell_px, self.cols * cell_px);
        Array2::from_shape_fn(shape, |(y, x)| {
            let (r, c) = (y / cell_px, x / cell_px);
            let (u, v) = (y % cell_px, x % cell_px);
            (u < wall_px && v < wall_px)
                || (v < wall_px && self.wall_left(r, c))
                || (u < wall_px && self.wall_top(r, c))
                || (c + 1 == self.cols && v >= cell_px - wall_px)
                || (r + 1 == self.rows && u >= cell_px - wall_px)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spanning_tree_has_cells_minus_one_passages() {
        for seed in 0..5 {
            let m = Maze::generate(9, 13, seed);
            assert_eq!(m.passage_count(), 9 * 13 - 1);
        }
    }

    #[test]
    fn every_cell_reachable() {
        let m = Maze::generate(12, 7, 42);
        let mut seen = vec![vec![false; 7]; 12];
        let mut stack = vec![(0, 0)];
        seen[0][0] = true;
        while let Some((r, c)) = stack.pop() {
            let mut visit = |nr: usize, nc: usize, stack: &mut Vec<(usize, usize)>| {
                if !seen[nr][nc] {
                    seen[nr][nc] = true;
                    stack.push((nr, nc));
                }
            };
            if c + 1 < 7 && !m.wall_left(r, c + 1) {
                visit(r, c + 1, &mut stack);
            }
            if c > 0 && !m.wall_left(r, c) {
                visit(r, c - 1, &mut stack);
            }
            if r + 1 < 12 && !m.wall_top(r + 1, c) {
                visit(r + 1, c, &mut stack);
            }
            if r > 0 && !m.wall_top(r, c) {
                visit(r - 1, c, &mut stack);
            }
        }
        assert!(seen.iter().flatten().all(|&s| s));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(Maze::generate(10, 10, 7), Maze::generate(10, 10, 7));
        assert_ne!(Maze::generate(10, 10, 7), Maze::generate(10, 10, 8));
    }
}
