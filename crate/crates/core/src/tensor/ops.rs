//! Differentiable op constructors.
//!
//! Each method records one node: the forward value plus a closure mapping the
//! incoming gradient to per-parent gradients. Reductions run in f64.

pub(crate) mod attention;

use super::tape::{NodeId, Tape};
use super::Tensor;

impl Tape<'_> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops(out.numel() as u64);
        self.push_op(
            out,
            vec![a, b],
            Box::new(|args| {
                vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]
            }),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops(out.numel() as u64);
        self.push_op(
            out,
            vec![a, b],
            Box::new(|args| {
                let neg = args.grad.iter().map(|g| -g).collect();
                vec![Some(args.grad.to_vec()), Some(neg)]
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops(out.numel() as u64);
        self.push_op(
            out,
            vec![a, b],
            Box::new(|args| {
                let da = args.grad.iter().zip(args.parents[1].data()).map(|(g, y)| g * y).collect();
                let db = args.grad.iter().zip(args.parents[0].data()).map(|(g, x)| g * x).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops(out.numel() as u64);
        self.push_op(
            out,
            vec![a],
            Box::new(move |args| vec![Some(args.grad.iter().map(|g| g * c).collect())]),
        )
    }

    /// Broadcast-add a length-n vector to every row of an [m, n] tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        assert_eq!(tb.numel(), n, "add_bias: bias length {} vs cols {}", tb.numel(), n);
        let m = tx.rows();
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops(out.numel() as u64);
        self.push_op(
            out,
            vec![x, bias],
            Box::new(move |args| {
                let db = if args.wants[1] {
                    let mut db = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += args.grad[i * n + j] as f64;
                        }
                    }
                    Some(db.into_iter().map(|v| v as f32).collect())
                } else {
                    None
                };
                vec![Some(args.grad.to_vec()), db]
            }),
        )
    }

    /// C[m,n] = A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul: inner dims {} vs {}", k, kb);
        let out = Tensor::new(&[m, n], matmul_raw(ta.data(), tb.data(), m, k, n)).unwrap();
        self.add_flops((m * k * n) as u64);
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |args| {
                let (av, bv) = (args.parents[0].data(), args.parents[1].data());
                let da = if args.wants[0] {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += args.grad[i * n + j] as f64 * bv[p * n + j] as f64;
                            }
                            da[i * k + p] = acc as f32;
                        }
                    }
                    Some(da)
                } else {
                    None
                };
                let db = if args.wants[1] {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p] as f64;
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * args.grad[i * n + j] as f64;
                            }
                        }
                    }
                    Some(db.into_iter().map(|v| v as f32).collect())
                } else {
                    None
                };
                vec![da, db]
            }),
        )
    }

    /// Fused y = x·W + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], data).unwrap();
        self.push_op(
            out,
            vec![a],
            Box::new(move |args| {
                let mut dx = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = args.grad[j * m + i];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops(out.numel() as u64 * 8);
        self.push_op(
            out,
            vec![a],
            Box::new(|args| {
                let dx = args.parents[0]
                    .data()
                    .iter()
                    .zip(args.grad)
                    .map(|(&x, &g)| g * gelu_grad(x))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - max) as f64).exp();
                data[i * n + j] = e as f32;
                denom += e;
            }
            for j in 0..n {
                data[i * n + j] = (data[i * n + j] as f64 / denom) as f32;
            }
        }
        let out = Tensor::new(ta.shape(), data).unwrap();
        self.add_flops((m * n) as u64 * 4);
        self.push_op(
            out,
            vec![a],
            Box::new(move |args| {
                let y = args.output.data();
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += args.grad[i * n + j] as f64 * y[i * n + j] as f64;
                    }
                    for j in 0..n {
                        let idx = i * n + j;
                        dx[idx] = (y[idx] as f64 * (args.grad[idx] as f64 - dot)) as f32;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), n, "layer_norm: gamma length");
        assert_eq!(tb.numel(), n, "layer_norm: beta length");
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..n {
                let xn = ((row[j] as f64 - mean) * rstd) as f32;
                data[i * n + j] = xn * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops((m * n) as u64 * 6);
        self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let xv = args.parents[0].data();
                let gv = args.parents[1].data();
                let mut dx = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let (mean, rstd) = row_stats(row, eps);
                    // dy through the affine, then the normalization itself.
                    let mut sum_dxn = 0.0f64;
                    let mut sum_dxn_xn = 0.0f64;
                    let mut xn = vec![0.0f64; n];
                    let mut dxn = vec![0.0f64; n];
                    for j in 0..n {
                        let g = args.grad[i * n + j] as f64;
                        xn[j] = (row[j] as f64 - mean) * rstd;
                        dxn[j] = g * gv[j] as f64;
                        dgamma[j] += g * xn[j];
                        dbeta[j] += g;
                        sum_dxn += dxn[j];
                        sum_dxn_xn += dxn[j] * xn[j];
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        dx[i * n + j] =
                            (rstd * (dxn[j] - sum_dxn * inv_n - xn[j] * sum_dxn_xn * inv_n)) as f32;
                    }
                }
                vec![
                    Some(dx),
                    if args.wants[1] {
                        Some(dgamma.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                    if args.wants[2] {
                        Some(dbeta.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                ]
            }),
        )
    }

    /// Batch-style normalization: each column of an [m, n] tensor is
    /// normalized over the m rows. Returns the node plus the batch mean and
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm_cols(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> (NodeId, Vec<f32>, Vec<f32>) {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), n, "batch_norm: gamma length");
        assert_eq!(tb.numel(), n, "batch_norm: beta length");
        let mut mean = vec![0.0f64; n];
        let mut var = vec![0.0f64; n];
        for j in 0..n {
            let mut s = 0.0f64;
            for i in 0..m {
                s += tx.data()[i * n + j] as f64;
            }
            mean[j] = s / m as f64;
            let mut v = 0.0f64;
            for i in 0..m {
                let d = tx.data()[i * n + j] as f64 - mean[j];
                v += d * d;
            }
            var[j] = v / m as f64;
        }
        let mut data = vec![0.0f32; m * n];
        for j in 0..n {
            let rstd = 1.0 / (var[j] + eps as f64).sqrt();
            for i in 0..m {
                let xn = ((tx.data()[i * n + j] as f64 - mean[j]) * rstd) as f32;
                data[i * n + j] = xn * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops((m * n) as u64 * 6);
        let mean_f32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let var_f32: Vec<f32> = var.iter().map(|&v| v as f32).collect();
        let id = self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let xv = args.parents[0].data();
                let gv = args.parents[1].data();
                let mut dx = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                let inv_m = 1.0 / m as f64;
                for j in 0..n {
                    let mut mu = 0.0f64;
                    for i in 0..m {
                        mu += xv[i * n + j] as f64;
                    }
                    mu *= inv_m;
                    let mut v = 0.0f64;
                    for i in 0..m {
                        let d = xv[i * n + j] as f64 - mu;
                        v += d * d;
                    }
                    v *= inv_m;
                    let rstd = 1.0 / (v + eps as f64).sqrt();
                    let mut sum_dxn = 0.0f64;
                    let mut sum_dxn_xn = 0.0f64;
                    let mut xn = vec![0.0f64; m];
                    let mut dxn = vec![0.0f64; m];
                    for i in 0..m {
                        let g = args.grad[i * n + j] as f64;
                        xn[i] = (xv[i * n + j] as f64 - mu) * rstd;
                        dxn[i] = g * gv[j] as f64;
                        dgamma[j] += g * xn[i];
                        dbeta[j] += g;
                        sum_dxn += dxn[i];
                        sum_dxn_xn += dxn[i] * xn[i];
                    }
                    for i in 0..m {
                        dx[i * n + j] =
                            (rstd * (dxn[i] - sum_dxn * inv_m - xn[i] * sum_dxn_xn * inv_m)) as f32;
                    }
                }
                vec![
                    Some(dx),
                    if args.wants[1] {
                        Some(dgamma.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                    if args.wants[2] {
                        Some(dbeta.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                ]
            }),
        );
        (id, mean_f32, var_f32)
    }

    /// Inference-mode normalization with fixed statistics.
    pub fn affine_norm_cols(
        &mut self,
        x: NodeId,
        mean: Vec<f32>,
        var: Vec<f32>,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(mean.len(), n);
        assert_eq!(var.len(), n);
        let rstd: Vec<f32> =
            var.iter().map(|&v| (1.0 / ((v as f64 + eps as f64).sqrt())) as f32).collect();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let xn = (tx.data()[i * n + j] - mean[j]) * rstd[j];
                data[i * n + j] = xn * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops((m * n) as u64 * 3);
        let mean_c = mean;
        self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let xv = args.parents[0].data();
                let gv = args.parents[1].data();
                let mut dx = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        let g = args.grad[i * n + j];
                        dx[i * n + j] = g * gv[j] * rstd[j];
                        let xn = (xv[i * n + j] - mean_c[j]) * rstd[j];
                        dgamma[j] += (g * xn) as f64;
                        dbeta[j] += g as f64;
                    }
                }
                vec![
                    Some(dx),
                    if args.wants[1] {
                        Some(dgamma.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                    if args.wants[2] {
                        Some(dbeta.into_iter().map(|v| v as f32).collect())
                    } else {
                        None
                    },
                ]
            }),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert!(r0 < r1 && r1 <= m, "slice_rows: {}..{} of {}", r0, r1, m);
        let data = tx.data()[r0 * n..r1 * n].to_vec();
        let out = Tensor::new(&[r1 - r0, n], data).unwrap();
        self.push_op(
            out,
            vec![x],
            Box::new(move |args| {
                let mut dx = vec![0.0f32; m * n];
                dx[r0 * n..r1 * n].copy_from_slice(args.grad);
                vec![Some(dx)]
            }),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert!(c0 < c1 && c1 <= n, "slice_cols: {}..{} of {}", c0, c1, n);
        let w = c1 - c0;
        let mut data = vec![0.0f32; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&tx.data()[i * n + c0..i * n + c1]);
        }
        let out = Tensor::new(&[m, w], data).unwrap();
        self.push_op(
            out,
            vec![x],
            Box::new(move |args| {
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + c0..i * n + c1].copy_from_slice(&args.grad[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let n = self.value(parts[0]).cols();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows: column mismatch");
            rows.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = rows.iter().sum();
        let out = Tensor::new(&[total, n], data).unwrap();
        self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |args| {
                let mut offset = 0;
                rows.iter()
                    .map(|&r| {
                        let g = args.grad[offset..offset + r * n].to_vec();
                        offset += r * n;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols: row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; m * total];
        let mut c = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            let w = widths[idx];
            for i in 0..m {
                data[i * total + c..i * total + c + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            c += w;
        }
        let out = Tensor::new(&[m, total], data).unwrap();
        self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |args| {
                let mut outputs = Vec::with_capacity(widths.len());
                let mut c = 0;
                for &w in &widths {
                    let mut g = vec![0.0f32; m * w];
                    for i in 0..m {
                        g[i * w..(i + 1) * w]
                            .copy_from_slice(&args.grad[i * total + c..i * total + c + w]);
                    }
                    outputs.push(Some(g));
                    c += w;
                }
                outputs
            }),
        )
    }

    /// Mean over axis 0: [m, n] -> [n].
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            for j in 0..n {
                acc[j] += tx.data()[i * n + j] as f64;
            }
        }
        let data: Vec<f32> = acc.into_iter().map(|v| (v / m as f64) as f32).collect();
        let out = Tensor::new(&[n], data).unwrap();
        self.add_flops((m * n) as u64);
        self.push_op(
            out,
            vec![x],
            Box::new(move |args| {
                let inv = 1.0 / m as f32;
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = args.grad[j] * inv;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let numel = tx.numel();
        self.add_flops(numel as u64);
        self.push_op(
            Tensor::scalar(s as f32),
            vec![x],
            Box::new(move |args| vec![Some(vec![args.grad[0]; numel])]),
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let numel = tx.numel();
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        self.add_flops(numel as u64);
        self.push_op(
            Tensor::scalar((s / numel as f64) as f32),
            vec![x],
            Box::new(move |args| vec![Some(vec![args.grad[0] / numel as f32; numel])]),
        )
    }

    /// Normalize every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f32) -> NodeId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let norm = (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + eps as f64).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] as f64 / norm) as f32;
            }
        }
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops((m * n) as u64 * 2);
        self.push_op(
            out,
            vec![x],
            Box::new(move |args| {
                let xv = args.parents[0].data();
                let yv = args.output.data();
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let norm =
                        (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + eps as f64).sqrt();
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += args.grad[i * n + j] as f64 * yv[i * n + j] as f64;
                    }
                    for j in 0..n {
                        let idx = i * n + j;
                        dx[idx] = ((args.grad[idx] as f64 - yv[idx] as f64 * dot) / norm) as f32;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scalar L2 distance between two same-shape tensors.
    pub fn l2_distance(&mut self, a: NodeId, b: NodeId, eps: f32) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "l2_distance: shape mismatch");
        let sq: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let d = (sq + eps as f64).sqrt();
        self.add_flops(ta.numel() as u64 * 3);
        self.push_op(
            Tensor::scalar(d as f32),
            vec![a, b],
            Box::new(move |args| {
                let g = args.grad[0] as f64 / d;
                let da: Vec<f32> = args.parents[0]
                    .data()
                    .iter()
                    .zip(args.parents[1].data())
                    .map(|(&x, &y)| (g * (x - y) as f64) as f32)
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Numerically stable log(1 + exp(x)), elementwise.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| softplus_fwd(v)).collect();
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.add_flops(out.numel() as u64 * 4);
        self.push_op(
            out,
            vec![x],
            Box::new(|args| {
                let dx = args.parents[0]
                    .data()
                    .iter()
                    .zip(args.grad)
                    .map(|(&x, &g)| {
                        let s = 1.0 / (1.0 + (-x as f64).exp());
                        (g as f64 * s) as f32
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let tl = self.value(logits);
        let (m, n) = (tl.rows(), tl.cols());
        assert_eq!(labels.len(), m, "cross_entropy: label count");
        assert!(labels.iter().all(|&l| l < n), "cross_entropy: label out of range");
        let mut probs = vec![0.0f32; m * n];
        let mut loss = 0.0f64;
        for i in 0..m {
            let row = &tl.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - max) as f64).exp();
                probs[i * n + j] = e as f32;
                denom += e;
            }
            for j in 0..n {
                probs[i * n + j] = (probs[i * n + j] as f64 / denom) as f32;
            }
            loss -= ((row[labels[i]] - max) as f64 - denom.ln()) / m as f64;
        }
        let labels = labels.to_vec();
        self.add_flops((m * n) as u64 * 4);
        self.push_op(
            Tensor::scalar(loss as f32),
            vec![logits],
            Box::new(move |args| {
                let g = args.grad[0] / m as f32;
                let mut dx: Vec<f32> = probs.iter().map(|&p| p * g).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * n + l] -= g;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean_scalars: empty");
        let k = parts.len();
        let s: f64 = parts.iter().map(|&p| self.value(p).data()[0] as f64).sum();
        self.push_op(
            Tensor::scalar((s / k as f64) as f32),
            parts.to_vec(),
            Box::new(move |args| {
                let g = args.grad[0] / k as f32;
                (0..k).map(|_| Some(vec![g])).collect()
            }),
        )
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += aip * bv as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

fn row_stats(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

pub(crate) fn gelu_fwd(x: f32) -> f32 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let x = x as f64;
    (0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    const C: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

fn softplus_fwd(x: f32) -> f32 {
    let x = x as f64;
    if x > 0.0 {
        (x + (-x).exp().ln_1p()) as f32
    } else {
        (x.exp().ln_1p()) as f32
    }
}
