//! Synthetic noisy-candidate benchmark.
//!
//! Each instance follows a smooth ground-truth path. Every frame's candidate
//! set holds one candidate near the true position plus decoys scattered over
//! a wide box, with similarity scores corrupted enough that the per-frame
//! argmax is frequently wrong while the temporally consistent choice is not.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CandidateSequence, CandidateToken, TrajectoryPrediction};

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub frames: usize,
    pub candidates: usize,
    /// True path step length per frame, meters.
    pub step_m: f64,
    /// Noise of the true candidate around the true position, meters.
    pub true_jitter_m: f64,
    /// Decoys scatter uniformly within this half-width box, meters.
    pub decoy_spread_m: f64,
    /// When nonzero, the first decoy of each frame sits near the true
    /// position at this gaussian radius, so even the oracle is imperfect.
    pub near_decoy_m: f64,
    pub sim_true_mean: f64,
    pub sim_true_std: f64,
    pub sim_decoy_mean: f64,
    pub sim_decoy_std: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            candidates: 4,
            step_m: 18.0,
            true_jitter_m: 4.0,
            decoy_spread_m: 700.0,
            near_decoy_m: 0.0,
            sim_true_mean: 0.70,
            sim_true_std: 0.10,
            sim_decoy_mean: 0.58,
            sim_decoy_std: 0.14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    pub seq: CandidateSequence,
    /// True position per frame (local meters).
    pub truth: Vec<(f64, f64)>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one instance. Candidate order within each set is shuffled, so the
/// correct index varies; labels mark the candidate closest to the truth.
pub fn generate_instance(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> BenchmarkInstance {
    // Anchored in plausible UTM magnitudes so nothing depends on small inputs.
    let base_x = 500_000.0 + rng.random_range(-50_000.0..50_000.0);
    let base_y = 4_500_000.0 + rng.random_range(-50_000.0..50_000.0);
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pos = (base_x, base_y);
    let mut truth = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        truth.push(pos);
        heading += rng.random_range(-0.5..0.5);
        pos = (pos.0 + spec.step_m * heading.cos(), pos.1 + spec.step_m * heading.sin());
    }

    let clamp_sim = |v: f64| v.clamp(-1.0, 1.0) as f32;
    let mut sets = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for (fi, &(tx, ty)) in truth.iter().enumerate() {
        let mut cands = Vec::with_capacity(spec.candidates);
        // True candidate.
        cands.push(CandidateToken {
            id: format!("f{fi}_true"),
            lat: 0.0,
            lon: 0.0,
            utm_x: tx + gauss(rng) * spec.true_jitter_m,
            utm_y: ty + gauss(rng) * spec.true_jitter_m,
            sim: clamp_sim(spec.sim_true_mean + gauss(rng) * spec.sim_true_std),
        });
        for d in 1..spec.candidates {
            let (dx, dy) = if d == 1 && spec.near_decoy_m > 0.0 {
                (tx + gauss(rng) * spec.near_decoy_m, ty + gauss(rng) * spec.near_decoy_m)
            } else {
                (
                    base_x + rng.random_range(-spec.decoy_spread_m..spec.decoy_spread_m),
                    base_y + rng.random_range(-spec.decoy_spread_m..spec.decoy_spread_m),
                )
            };
            cands.push(CandidateToken {
                id: format!("f{fi}_d{d}"),
                lat: 0.0,
                lon: 0.0,
                utm_x: dx,
                utm_y: dy,
                sim: clamp_sim(spec.sim_decoy_mean + gauss(rng) * spec.sim_decoy_std),
            });
        }
        // Shuffle so the correct index is not constant.
        for i in (1..cands.len()).rev() {
            let j = rng.random_range(0..=i);
            cands.swap(i, j);
        }
        let label = cands
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.utm_x - tx).powi(2) + (a.utm_y - ty).powi(2);
                let db = (b.utm_x - tx).powi(2) + (b.utm_y - ty).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        sets.push(cands);
        labels.push(label);
    }
    let seq = CandidateSequence::new(sets, Some(labels)).expect("generated sequence is valid");
    BenchmarkInstance { seq, truth }
}

pub fn generate_instances(
    spec: &BenchmarkSpec,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Vec<BenchmarkInstance> {
    (0..count).map(|_| generate_instance(spec, rng)).collect()
}

/// Fraction of frames where the prediction picked the labeled candidate.
pub fn frame_accuracy(pred: &TrajectoryPrediction, seq: &CandidateSequence) -> f64 {
    let labels = seq.labels.as_ref().expect("benchmark sequences carry labels");
    let hits = pred.choices.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}
