//! Grid graph derived from maze walls, BFS solving and step collapsing.

use std::collections::VecDeque;

use crate::geom::{Segment, Vec2};
use crate::world::{MazeGrid, WorldGeometry};

pub type Cell = (usize, usize);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MazeError {
    #[error("geometry has no maze grid")]
    NoGrid,
    #[error("END cell {end:?} is not reachable from START {start:?}")]
    NoPath { start: Cell, end: Cell },
}

const DIRS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Cell adjacency of a maze. Two cells sharing an edge are adjacent unless a
/// wall segment covers the midpoint of that edge. Boundary edges are tracked
/// separately so leaks to the exterior can be found.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeGraph {
    pub cols: usize,
    pub rows: usize,
    pub start: Cell,
    pub end: Cell,
    // open[idx][d] for d in DIRS order; an open edge leaving the grid is a leak
    open: Vec<[bool; 4]>,
}

impl MazeGraph {
    pub fn from_geometry(geom: &WorldGeometry) -> Result<Self, MazeError> {
        let grid = geom.maze.as_ref().ok_or(MazeError::NoGrid)?;
        Ok(Self::from_walls(grid, &geom.walls))
    }

    pub fn from_walls(grid: &MazeGrid, walls: &[Segment]) -> Self {
        let blocked = |mid: Vec2| {
            walls
                .iter()
                .any(|w| w.distance_to(mid) <= 1e-6 * grid.cell_mm.max(1.0))
        };
        let mut open = vec![[false; 4]; grid.cols * grid.rows];
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let c = grid.cell_center((col, row));
                let h = grid.cell_mm / 2.0;
                for (d, (dx, dy)) in DIRS.iter().enumerate() {
                    let mid = c + Vec2::new(*dx as f64 * h, *dy as f64 * h);
                    open[row * grid.cols + col][d] = !blocked(mid);
                }
            }
        }
        Self {
            cols: grid.cols,
            rows: grid.rows,
            start: grid.start_cell(),
            end: grid.end_cell(),
            open,
        }
    }

    /// Builds a graph directly from an open-edge predicate; used for tests and
    /// procedurally generated mazes. `is_open(a, b)` is queried for every pair
    /// of grid neighbours and must be symmetric.
    pub fn from_fn(
        cols: usize,
        rows: usize,
        start: Cell,
        end: Cell,
        mut is_open: impl FnMut(Cell, Cell) -> bool,
    ) -> Self {
        let mut open = vec![[false; 4]; cols * rows];
        for row in 0..rows {
            for col in 0..cols {
                for (d, (dx, dy)) in DIRS.iter().enumerate() {
                    let (nc, nr) = (col as isize + dx, row as isize + dy);
                    if nc >= 0 && nr >= 0 && (nc as usize) < cols && (nr as usize) < rows {
                        open[row * cols + col][d] = is_open((col, row), (nc as usize, nr as usize));
                    }
                }
            }
        }
        Self {
            cols,
            rows,
            start,
            end,
            open,
        }
    }

    fn index(&self, c: Cell) -> usize {
        c.1 * self.cols + c.0
    }

    /// Neighbours reachable through open interior edges, in a fixed order
    /// (+x, -x, +y, -y).
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let open = self.open[self.index(c)];
        DIRS.iter().enumerate().filter_map(move |(d, (dx, dy))| {
            let (nc, nr) = (c.0 as isize + dx, c.1 as isize + dy);
            let inside =
                nc >= 0 && nr >= 0 && (nc as usize) < self.cols && (nr as usize) < self.rows;
            (inside && open[d]).then_some((nc as usize, nr as usize))
        })
    }

    pub fn is_adjacent(&self, a: Cell, b: Cell) -> bool {
        self.neighbors(a).any(|n| n == b)
    }

    /// First cell reachable from START that has an open edge to the outside
    /// of the grid, if any.
    pub fn leak_from_start(&self) -> Option<Cell> {
        let mut seen = vec![false; self.cols * self.rows];
        let mut queue = VecDeque::from([self.start]);
        seen[self.index(self.start)] = true;
        while let Some(c) = queue.pop_front() {
            let open = self.open[self.index(c)];
            let leaks = (c.0 + 1 == self.cols && open[0])
                || (c.0 == 0 && open[1])
                || (c.1 + 1 == self.rows && open[2])
                || (c.1 == 0 && open[3]);
            if leaks {
                return Some(c);
            }
            for n in self.neighbors(c) {
                let i = self.index(n);
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Shortest START→END cell path (inclusive) by breadth-first search.
    pub fn shortest_path(&self) -> Result<Vec<Cell>, MazeError> {
        let mut prev: Vec<Option<Cell>> = vec![None; self.cols * self.rows];
        let mut seen = vec![false; self.cols * self.rows];
        let mut queue = VecDeque::from([self.start]);
        seen[self.index(self.start)] = true;
        while let Some(c) = queue.pop_front() {
            if c == self.end {
                let mut path = vec![c];
                let mut cur = c;
                while let Some(p) = prev[self.index(cur)] {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Ok(path);
            }
            for n in self.neighbors(c) {
                let i = self.index(n);
                if !seen[i] {
                    seen[i] = true;
                    prev[i] = Some(c);
                    queue.push_back(n);
                }
            }
        }
        Err(MazeError::NoPath {
            start: self.start,
            end: self.end,
        })
    }
}

/// Collapses a cell path into straight steps: each returned cell is the end
/// of one straight run. A single-cell path yields no steps.
pub fn collapse_steps(path: &[Cell]) -> Vec<Cell> {
    let mut steps = Vec::new();
    let dir = |a: Cell, b: Cell| (b.0 as isize - a.0 as isize, b.1 as isize - a.1 as isize);
    for i in 1..path.len() {
        let d = dir(path[i - 1], path[i]);
        let last = i + 1 == path.len();
        if last || dir(path[i], path[i + 1]) != d {
            steps.push(path[i]);
        }
    }
    steps
}

/// BFS shortest path with collinear runs collapsed into waypoints.
pub fn solve_maze(graph: &MazeGraph) -> Result<Vec<Cell>, MazeError> {
    if graph.start == graph.end {
        return Ok(Vec::new());
    }
    Ok(collapse_steps(&graph.shortest_path()?))
}
