//! Oracles shared by the integration tests.

use std::collections::HashSet;

use fluorotwin::maze::MazeGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shortest path length by exhaustive depth-first enumeration of simple
/// paths with iterative deepening.
pub fn exhaustive_shortest(g: &MazeGraph) -> Option<usize> {
    let reach = {
        let mut seen = HashSet::from([g.start]);
        let mut stack = vec![g.start];
        while let Some(c) = stack.pop() {
            for n in g.neighbors(c) {
                if seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen
    };
    if !reach.contains(&g.end) {
        return None;
    }
    fn manhattan(a: (usize, usize), b: (usize, usize)) -> usize {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
    }
    fn dfs(
        g: &MazeGraph,
        c: (usize, usize),
        len: usize,
        limit: usize,
        on_path: &mut HashSet<(usize, usize)>,
    ) -> bool {
        if c == g.end {
            return true;
        }
        if len + manhattan(c, g.end) > limit {
            return false;
        }
        let next: Vec<_> = g.neighbors(c).collect();
        for n in next {
            if on_path.insert(n) {
                let found = dfs(g, n, len + 1, limit, on_path);
                on_path.remove(&n);
                if found {
                    return true;
                }
            }
        }
        false
    }
    (manhattan(g.start, g.end)..g.cols * g.rows).find(|&limit| {
        let mut on_path = HashSet::from([g.start]);
        dfs(g, g.start, 0, limit, &mut on_path)
    })
}

pub fn random_maze(seed: u64, cols: usize, rows: usize, p_open: f64) -> MazeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // spanning tree by randomized DFS, then extra random openings
    let mut open = HashSet::new();
    let mut seen = HashSet::from([(0usize, 0usize)]);
    let mut stack = vec![(0usize, 0usize)];
    while let Some(&c) = stack.last() {
        let mut nbrs: Vec<(usize, usize)> = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .filter_map(|(dx, dy)| {
                let (x, y) = (c.0 as isize + dx, c.1 as isize + dy);
                (x >= 0 && y >= 0 && (x as usize) < cols && (y as usize) < rows)
                    .then_some((x as usize, y as usize))
            })
            .filter(|n| !seen.contains(n))
            .collect();
        if nbrs.is_empty() {
            stack.pop();
            continue;
        }
        let n = nbrs.swap_remove(rng.gen_range(0..nbrs.len()));
        seen.insert(n);
        open.insert((c.min(n), c.max(n)));
        stack.push(n);
    }
    let mut extra = HashSet::new();
    let mut closed = HashSet::new();
    for x in 0..cols {
        for y in 0..rows {
            for n in [(x + 1, y), (x, y + 1)] {
                if n.0 < cols && n.1 < rows {
                    let e = ((x, y), n);
                    if rng.gen_bool(p_open) {
                        extra.insert(e);
                    } else if rng.gen_bool(0.02) {
                        closed.insert(e);
                    }
                }
            }
        }
    }
    let start = (rng.gen_range(0..cols), rng.gen_range(0..rows));
    let end = (rng.gen_range(0..cols), rng.gen_range(0..rows));
    MazeGraph::from_fn(cols, rows, start, end, |a, b| {
        let e = (a.min(b), a.max(b));
        (open.contains(&e) || extra.contains(&e)) && !closed.contains(&e)
    })
}
