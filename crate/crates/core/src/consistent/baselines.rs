//! Per-frame nearest neighbor and the dominant-sets heuristic.

use super::{CandidateSequence, TrajectoryPrediction};

/// Default affinity length scale in meters.
pub const DEFAULT_SIGMA: f64 = 100.0;

const REPLICATOR_TOL: f64 = 1e-8;
const REPLICATOR_MAX_ITERS: usize = 10_000;

/// Pick each frame's highest-similarity candidate, ignoring geometry.
/// Ties break to the lowest candidate index.
pub fn nn_baseline(seq: &CandidateSequence, lambda: f64) -> TrajectoryPrediction {
    let choices = seq
        .sets
        .iter()
        .map(|set| {
            let mut best = 0usize;
            for (j, tok) in set.iter().enumerate() {
                if tok.sim > set[best].sim {
                    best = j;
                }
            }
            best
        })
        .collect();
    TrajectoryPrediction::from_choices(seq, choices, lambda)
}

/// Dominant-sets selection via replicator dynamics.
///
/// Affinity between candidates of different frames combines spatial proximity
/// and similarity mass: `exp(-d/sigma) * (S_p + S_q + 2) / 4`; candidates of
/// the same frame get zero affinity. After convergence each frame takes its
/// maximum-support candidate; frames with no support fall back to NN.
pub fn dominant_sets_baseline(
    seq: &CandidateSequence,
    sigma: f64,
    lambda: f64,
) -> TrajectoryPrediction {
    let n = seq.frames();
    let t = seq.width();
    if n == 1 {
        return nn_baseline(seq, lambda);
    }
    let total = n * t;
    let mut affinity = vec![0.0f64; total * total];
    for fi in 0..n {
        for j in 0..t {
            let a = fi * t + j;
            let pa = (seq.sets[fi][j].utm_x, seq.sets[fi][j].utm_y);
            let sa = seq.sets[fi][j].sim as f64;
            for gi in 0..n {
                if gi == fi {
                    continue;
                }
                for k in 0..t {
                    let b = gi * t + k;
                    let pb = (seq.sets[gi][k].utm_x, seq.sets[gi][k].utm_y);
                    let sb = seq.sets[gi][k].sim as f64;
                    let d = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
                    affinity[a * total + b] = (-d / sigma).exp() * (sa + sb + 2.0) / 4.0;
                }
            }
        }
    }

    let x = replicator_dynamics(&affinity, total);

    let nn = nn_baseline(seq, lambda);
    let choices = (0..n)
        .map(|fi| {
            let support = &x[fi * t..(fi + 1) * t];
            let mut best = 0usize;
            let mut best_val = support[0];
            for (j, &v) in support.iter().enumerate().skip(1) {
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            if best_val <= 1e-12 {
                nn.choices[fi]
            } else {
                best
            }
        })
        .collect();
    TrajectoryPrediction::from_choices(seq, choices, lambda)
}

/// Replicator iterate x <- x .* (Ax) / (x' A x), run to convergence.
/// The iterate stays on the probability simplex throughout.
pub fn replicator_dynamics(affinity: &[f64], total: usize) -> Vec<f64> {
    let mut x = vec![1.0 / total as f64; total];
    let mut ax = vec![0.0f64; total];
    for _ in 0..REPLICATOR_MAX_ITERS {
        for (i, slot) in ax.iter_mut().enumerate() {
            let row = &affinity[i * total..(i + 1) * total];
            *slot = row.iter().zip(&x).map(|(&a, &v)| a * v).sum();
        }
        let denom: f64 = x.iter().zip(&ax).map(|(&v, &a)| v * a).sum();
        if denom <= f64::MIN_POSITIVE {
            break;
        }
        let mut delta = 0.0;
        for i in 0..total {
            let next = x[i] * ax[i] / denom;
            delta += (next - x[i]).abs();
            x[i] = next;
        }
        if delta < REPLICATOR_TOL {
            break;
        }
    }
    x
}
