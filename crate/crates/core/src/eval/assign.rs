use ndarray::Array2;
use ordered_float::OrderedFloat;
use pathfinding::prelude::{kuhn_munkres, Matrix};

/// Sizes up to this are solved by enumerating every permutation.
pub const EXHAUSTIVE_MAX: usize = 8;

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n)
            .rev()
            .find(|&j| p[j] > p[i - 1])
            .expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// One-to-one assignment `row -> column` maximizing the summed score.
pub fn max_assignment(score: &Array2<f64>) -> Vec<usize> {
    let d = score.nrows();
    assert_eq!(d, score.ncols(), "square score matrix expected");
    if d <= EXHAUSTIVE_MAX {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for p in permutations(d) {
            let s: f64 = p.iter().enumerate().map(|(i, &j)| score[[i, j]]).sum();
            if s > best.0 {
                best = (s, p);
            }
        }
        best.1
    } else {
        let m = Matrix::from_fn(d, d, |(i, j)| OrderedFloat(score[[i, j]]));
        kuhn_munkres(&m).1
    }
}
