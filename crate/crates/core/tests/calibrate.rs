//! Manual calibration probes, all ignored. Run with:
//!   cargo test --release -p crossview-core --test calibrate -- --ignored --nocapture

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossview_core::consistent::benchmark::{
    frame_accuracy, generate_instances, BenchmarkSpec,
};
use crossview_core::consistent::{baselines, dp, transretriever};

#[test]
#[ignore = "calibration probe"]
fn probe_method_accuracies() {
    let spec = BenchmarkSpec::default();
    for sigma in [50.0, 100.0, 200.0] {
        for seed in 0..3u64 {
            let instances =
                generate_instances(&spec, &mut ChaCha8Rng::seed_from_u64(seed), 80);
            let (mut nn, mut ds, mut dpo) = (0.0, 0.0, 0.0);
            for inst in &instances {
                nn += frame_accuracy(&baselines::nn_baseline(&inst.seq, 50.0), &inst.seq);
                ds += frame_accuracy(
                    &baselines::dominant_sets_baseline(&inst.seq, sigma, 50.0),
                    &inst.seq,
                );
                dpo += frame_accuracy(&dp::dp_oracle(&inst.seq, 50.0), &inst.seq);
            }
            let n = instances.len() as f64;
            println!(
                "sigma {:>5} seed {}: NN {:.3}  DS {:.3}  DP {:.3}",
                sigma,
                seed,
                nn / n,
                ds / n,
                dpo / n
            );
        }
    }
}

#[test]
#[ignore = "calibration probe"]
fn probe_retriever_training_time() {
    let spec = BenchmarkSpec::default();
    let train: Vec<_> = generate_instances(&spec, &mut ChaCha8Rng::seed_from_u64(999), 10)
        .into_iter()
        .map(|i| i.seq)
        .collect();
    let mut model = transretriever::TransRetriever::init(
        transretriever::RetrieverConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    let hist = transretriever::train_retriever(&mut model, &train, 20, 1e-3, 0).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "20 epochs x {} seqs (n={}, t={}): {:.1}s -> per 500 epochs {:.1}s; loss {:.3} -> {:.3}",
        train.len(),
        spec.frames,
        spec.candidates,
        dt,
        dt * 25.0,
        hist[0],
        hist.last().unwrap()
    );

    // Greedy decode timing on one instance.
    let eval: Vec<_> = generate_instances(&spec, &mut ChaCha8Rng::seed_from_u64(1000), 10)
        .into_iter()
        .map(|i| i.seq)
        .collect();
    let t0 = std::time::Instant::now();
    let mut acc = 0.0;
    for seq in &eval {
        let pred = transretriever::greedy_decode(&model, seq, 50.0).unwrap();
        acc += frame_accuracy(&pred, seq);
    }
    println!("decode 10 instances: {:.2}s, acc(20-epoch model) {:.3}", t0.elapsed().as_secs_f64(), acc / 10.0);
}
