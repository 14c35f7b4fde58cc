//! Exact dynamic program for the path-structured selection problem.
//!
//! Objective over one choice j_i per frame:
//!
//! ```text
//!   J = sum_{i<n-1} ||p_i - p_{i+1}||_2  -  lambda * sum_i S_i
//! ```
//!
//! The path structure admits an O(n t^2) suffix DP; ties resolve to the
//! lexicographically smallest assignment by (frame, candidate index).

use super::{CandidateSequence, TrajectoryPrediction};

/// Default meters of path length traded per unit of similarity.
pub const DEFAULT_LAMBDA: f64 = 50.0;

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn point(seq: &CandidateSequence, i: usize, j: usize) -> (f64, f64) {
    (seq.sets[i][j].utm_x, seq.sets[i][j].utm_y)
}

/// Evaluate the objective of a full assignment.
pub fn objective(seq: &CandidateSequence, choices: &[usize], lambda: f64) -> f64 {
    assert_eq!(choices.len(), seq.frames());
    let mut total = 0.0;
    for i in 0..seq.frames() {
        total -= lambda * seq.sets[i][choices[i]].sim as f64;
        if i + 1 < seq.frames() {
            total += dist(point(seq, i, choices[i]), point(seq, i + 1, choices[i + 1]));
        }
    }
    total
}

/// Exact optimum via suffix DP.
pub fn dp_oracle(seq: &CandidateSequence, lambda: f64) -> TrajectoryPrediction {
    let n = seq.frames();
    let t = seq.width();

    // best[i][j]: optimal cost of the suffix starting by choosing j at i.
    let mut best = vec![vec![0.0f64; t]; n];
    for j in 0..t {
        best[n - 1][j] = -lambda * seq.sets[n - 1][j].sim as f64;
    }
    for i in (0..n - 1).rev() {
        for j in 0..t {
            let pj = point(seq, i, j);
            let mut m = f64::INFINITY;
            for k in 0..t {
                let c = dist(pj, point(seq, i + 1, k)) + best[i + 1][k];
                if c < m {
                    m = c;
                }
            }
            best[i][j] = -lambda * seq.sets[i][j].sim as f64 + m;
        }
    }

    // Forward reconstruction, preferring the smallest candidate index on ties
    // so the result is the lexicographically smallest optimum.
    let mut choices = Vec::with_capacity(n);
    let mut first = 0usize;
    for j in 1..t {
        if best[0][j] < best[0][first] {
            first = j;
        }
    }
    choices.push(first);
    for i in 0..n - 1 {
        let pj = point(seq, i, choices[i]);
        let mut next = 0usize;
        let mut best_cost = f64::INFINITY;
        for k in 0..t {
            let c = dist(pj, point(seq, i + 1, k)) + best[i + 1][k];
            if c < best_cost {
                best_cost = c;
                next = k;
            }
        }
        choices.push(next);
    }
    TrajectoryPrediction::from_choices(seq, choices, lambda)
}
