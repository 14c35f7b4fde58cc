//! Fused scaled dot-product attention over heads.
//!
//! One tape node covers every head's score/softmax/mix chain, with a
//! hand-derived backward. The op is finite-difference checked like every
//! other primitive.

use crate::tensor::{NodeId, Tape, Tensor};

/// Multi-head attention on already-projected q/k/v of shape [tokens, dim].
///
/// Splits columns into `heads`, attends per head with 1/sqrt(dh) scaling,
/// and concatenates the heads back to [q_tokens, dim]. `mask`, when present,
/// is added to the attention logits (masked positions carry large negative
/// values) and must have shape [q_tokens, k_tokens].
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let dim = tape.value(q).cols();
    assert!(
        heads > 0 && dim % heads == 0,
        "attention: dim {} not divisible by heads {}",
        dim,
        heads
    );
    let nq = tape.value(q).rows();
    let nk = tape.value(k).rows();
    assert_eq!(tape.value(k).cols(), dim, "attention: k dim");
    assert_eq!(tape.value(v).cols(), dim, "attention: v dim");
    assert_eq!(nk, tape.value(v).rows(), "attention: k/v token count");
    if let Some(m) = mask {
        assert_eq!(tape.value(m).shape(), &[nq, nk], "attention: mask shape");
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let mask_data: Option<Vec<f32>> = mask.map(|m| tape.value(m).data().to_vec());
    let qv = tape.value(q).data();
    let kv = tape.value(k).data();
    let vv = tape.value(v).data();

    // Forward: per-head softmax(QKᵀ/√dh + mask)·V, heads side by side.
    let mut out = vec![0.0f32; nq * dim];
    let mut probs = vec![0.0f32; heads * nq * nk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..nq {
            let p_row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut max = f32::NEG_INFINITY;
            for j in 0..nk {
                let mut dot = 0.0f64;
                for d in 0..dh {
                    dot += qv[i * dim + c0 + d] as f64 * kv[j * dim + c0 + d] as f64;
                }
                let mut logit = (dot as f32) * scale;
                if let Some(m) = &mask_data {
                    logit += m[i * nk + j];
                }
                p_row[j] = logit;
                max = max.max(logit);
            }
            let mut denom = 0.0f64;
            for j in 0..nk {
                let e = ((p_row[j] - max) as f64).exp();
                p_row[j] = e as f32;
                denom += e;
            }
            for j in 0..nk {
                p_row[j] = (p_row[j] as f64 / denom) as f32;
            }
            for d in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..nk {
                    acc += p_row[j] as f64 * vv[j * dim + c0 + d] as f64;
                }
                out[i * dim + c0 + d] = acc as f32;
            }
        }
    }
    tape.add_flops((heads * nq * nk * dh * 2 + heads * nq * nk * 4) as u64);

    let out = Tensor::new(&[nq, dim], out).unwrap();
    let parents = match mask {
        Some(m) => vec![q, k, v, m],
        None => vec![q, k, v],
    };
    tape.push_op(
        out,
        parents,
        Box::new(move |args| {
            let qv = args.parents[0].data();
            let kv = args.parents[1].data();
            let vv = args.parents[2].data();
            let grad = args.grad;
            let mut dq = vec![0.0f32; nq * dim];
            let mut dk = vec![0.0f32; nk * dim];
            let mut dv = vec![0.0f32; nk * dim];
            let mut dmask = if args.parents.len() == 4 && args.wants[3] {
                Some(vec![0.0f32; nq * nk])
            } else {
                None
            };
            let mut ds_row = vec![0.0f64; nk];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..nq {
                    let p_row = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                    // dP = dOut · Vᵀ, then dS = P ⊙ (dP − Σ dP⊙P).
                    let mut dot_sum = 0.0f64;
                    for (j, slot) in ds_row.iter_mut().enumerate() {
                        let mut dp = 0.0f64;
                        for d in 0..dh {
                            dp += grad[i * dim + c0 + d] as f64 * vv[j * dim + c0 + d] as f64;
                        }
                        *slot = dp;
                        dot_sum += dp * p_row[j] as f64;
                    }
                    for (j, slot) in ds_row.iter_mut().enumerate() {
                        *slot = p_row[j] as f64 * (*slot - dot_sum);
                    }
                    for (j, &ds) in ds_row.iter().enumerate() {
                        if let Some(dm) = dmask.as_mut() {
                            dm[i * nk + j] += ds as f32;
                        }
                        let ds_scaled = ds * scale as f64;
                        for d in 0..dh {
                            dq[i * dim + c0 + d] += (ds_scaled * kv[j * dim + c0 + d] as f64) as f32;
                            dk[j * dim + c0 + d] += (ds_scaled * qv[i * dim + c0 + d] as f64) as f32;
                        }
                        let p = p_row[j] as f64;
                        for d in 0..dh {
                            dv[j * dim + c0 + d] += (p * grad[i * dim + c0 + d] as f64) as f32;
                        }
                    }
                }
            }
            let mut outs = vec![Some(dq), Some(dk), Some(dv)];
            if args.parents.len() == 4 {
                outs.push(dmask.map(|d| d.to_vec()));
            }
            outs
        }),
    )
}
