use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `softmax_rows(V1 · V2)`.
pub fn adaptive_adjacency(tape: &mut Tape, v1: Var, v2: Var) -> Var {
    let logits = tape.matmul(v1, v2);
    tape.softmax_rows(logits)
}

/// `row_normalize(A ⊙ weights ⊙ mask + I)` with rows divided by their absolute
/// sum. All three inputs are `[T*N, N]`; `A` is usually the clip adjacency
/// tiled over frames.
pub fn effective_adjacency(tape: &mut Tape, adjacency: Var, weights: Var, mask: Var) -> Var {
    let (rows, n) = tape.value(adjacency).shape();
    let weighted = tape.mul(adjacency, weights);
    let masked = tape.mul(weighted, mask);
    let eye = tape.constant(tiled_identity(rows / n, n));
    let support = tape.add(masked, eye);
    tape.row_norm_abs(support)
}

pub(crate) fn tiled_identity(blocks: usize, n: usize) -> Matrix {
    let mut m = Matrix::zeros(blocks * n, n);
    for b in 0..blocks {
        for i in 0..n {
            m.set(b * n + i, i, 1.0);
        }
    }
    m
}

/// `ReLU(Ã · H · W)` per frame. With `adjacency = None` the graph step is
/// skipped, giving a per-node linear map.
pub fn gcn_layer(tape: &mut Tape, h: Var, adjacency: Option<Var>, w: Var) -> Var {
    let mixed = match adjacency {
        Some(a) => tape.block_matmul(a, h),
        None => h,
    };
    let lin = tape.matmul(mixed, w);
    tape.relu(lin)
}

/// LSTM over the rows of `x` (gate order i, f, g, o), zero initial state.
/// Returns the hidden state for every row.
pub fn lstm_sequence(tape: &mut Tape, x: Var, wx: Var, wh: Var, b: Var) -> Var {
    let t_len = tape.value(x).rows;
    let hidden = tape.value(wh).rows;
    let xw = tape.matmul(x, wx);
    let xproj = tape.add_row(xw, b);
    let mut h = tape.constant(Matrix::zeros(1, hidden));
    let mut c = tape.constant(Matrix::zeros(1, hidden));
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = tape.slice_rows(xproj, t, 1);
        let hw = tape.matmul(h, wh);
        let gates = tape.add(xt, hw);
        let i_pre = tape.slice_cols(gates, 0, hidden);
        let f_pre = tape.slice_cols(gates, hidden, hidden);
        let g_pre = tape.slice_cols(gates, 2 * hidden, hidden);
        let o_pre = tape.slice_cols(gates, 3 * hidden, hidden);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep, write);
        let ct = tape.tanh(c);
        h = tape.mul(o, ct);
        outputs.push(h);
    }
    tape.stack_rows(&outputs)
}

/// Masked mean over the `n` node rows of each frame followed by an LSTM over
/// frames. `pool_weights[t*n + i]` is `1/present(t)` for present slots and 0
/// otherwise.
pub fn spatial_recurrence(
    tape: &mut Tape,
    graph_feats: Var,
    pool_weights: Vec<f64>,
    n: usize,
    wx: Var,
    wh: Var,
    b: Var,
) -> Var {
    let pooled = tape.row_pool(graph_feats, pool_weights, n);
    lstm_sequence(tape, pooled, wx, wh, b)
}

/// `ReLU([graph_hidden, frame_feat] · W + b)`.
pub fn fuse(tape: &mut Tape, graph_hidden: Var, frame_feat: Var, w: Var, b: Var) -> Var {
    let cat = tape.concat_cols(graph_hidden, frame_feat);
    let lin = tape.matmul(cat, w);
    let biased = tape.add_row(lin, b);
    tape.relu(biased)
}

/// Causal dilated convolutions with ReLU after every layer:
/// `Y_i(t) = Σ_k X(t - r_i k) · W_i[k]`, zero-padded on the left.
pub fn dilated_stack(tape: &mut Tape, x: Var, kernels: &[Vec<Var>], dilations: &[usize]) -> Var {
    let mut cur = x;
    for (taps, &r) in kernels.iter().zip(dilations) {
        let mut acc: Option<Var> = None;
        for (k, &w) in taps.iter().enumerate() {
            let shifted = if k == 0 {
                cur
            } else {
                tape.shift_rows(cur, r * k)
            };
            let term = tape.matmul(shifted, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        cur = tape.relu(acc.expect("kernel_size >= 1"));
    }
    cur
}

/// `LayerNorm(dilated_stack(X) + X)` with a learned gain and bias.
pub fn dilated_block(
    tape: &mut Tape,
    x: Var,
    kernels: &[Vec<Var>],
    dilations: &[usize],
    gain: Var,
    bias: Var,
) -> Var {
    let conv = dilated_stack(tape, x, kernels, dilations);
    let res = tape.add(conv, x);
    layer_norm_affine(tape, res, gain, bias)
}

pub(crate) fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let normed = tape.layer_norm(x, LAYER_NORM_EPS);
    let scaled = tape.mul_row(normed, gain);
    tape.add_row(scaled, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn adjacency_from_zero_product_is_uniform() {
        let mut tape = Tape::new();
        let v1 = tape.constant(Matrix::zeros(5, 5));
        let v2 = tape.constant(Matrix::zeros(5, 5));
        let a = adaptive_adjacency(&mut tape, v1, v2);
        assert!(tape.value(a).data.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn adjacency_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let v1 = tape.constant(rand_matrix(&mut rng, 19, 19).map(|x| 4.0 * x));
            let v2 = tape.constant(rand_matrix(&mut rng, 19, 19));
            let a = adaptive_adjacency(&mut tape, v1, v2);
            for i in 0..19 {
                let s: f64 = tape.value(a).row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn adjacency_large_logit_is_nearly_one_hot() {
        // V1 = I so the product equals V2; row 0 gets a single logit of 50
        let n = 4;
        let mut v2 = Matrix::zeros(n, n);
        v2.set(0, 2, 50.0);
        let mut tape = Tape::new();
        let v1 = tape.constant(Matrix::identity(n));
        let v2 = tape.constant(v2);
        let a = adaptive_adjacency(&mut tape, v1, v2);
        let row = tape.value(a).row(0).to_vec();
        // closed form: e^50 / (e^50 + 3)
        let expected = 1.0 / (1.0 + 3.0 * (-50f64).exp());
        assert!((row[2] - expected).abs() < 1e-15);
        for j in [0, 1, 3] {
            assert!(row[j] < 1e-21);
        }
    }

    fn eff(a: Matrix, w: Matrix, mask: Matrix) -> Matrix {
        let mut tape = Tape::new();
        let a = tape.constant(a);
        let w = tape.constant(w);
        let m = tape.constant(mask);
        let out = effective_adjacency(&mut tape, a, w, m);
        tape.value(out).clone()
    }

    #[test]
    fn effective_adjacency_cases() {
        let n = 4;
        let uniform = Matrix::filled(n, n, 0.25);
        let e = eff(
            uniform.clone(),
            Matrix::filled(n, n, 1.0),
            Matrix::filled(n, n, 1.0),
        );
        for i in 0..n {
            assert!((e.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let e = eff(uniform, Matrix::filled(n, n, 1.0), Matrix::zeros(n, n));
        assert_eq!(e, Matrix::identity(n));
    }

    #[test]
    fn effective_adjacency_property_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let t = rng.random_range(1..4);
            let a = Matrix::from_vec(
                t * n,
                n,
                (0..t * n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
            );
            let w = Matrix::from_vec(
                t * n,
                n,
                (0..t * n * n).map(|_| rng.random_range(0.0..2.0)).collect(),
            );
            let m = Matrix::from_vec(
                t * n,
                n,
                (0..t * n * n)
                    .map(|_| f64::from(rng.random_bool(0.6) as u8))
                    .collect(),
            );
            let e = eff(a, w, m);
            for i in 0..t * n {
                assert!((e.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                assert!(e.row(i).iter().all(|&x| x >= 0.0));
            }
        }
        // negative weights keep absolute row sums at one
        let a = Matrix::filled(2, 2, 0.5);
        let w = Matrix::from_vec(2, 2, vec![1.0, -6.0, -6.0, 1.0]);
        let e = eff(a, w, Matrix::filled(2, 2, 1.0));
        for i in 0..2 {
            assert!((e.row(i).iter().map(|x| x.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_matrix(&mut rng, 6, 3);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let a = tape.constant(tiled_identity(2, 3));
        let w = tape.constant(Matrix::identity(3));
        let out = gcn_layer(&mut tape, hv, Some(a), w);
        assert_eq!(tape.value(out), &h.map(|x| x.max(0.0)));

        let hpos = h.map(f64::abs);
        let hv = tape.constant(hpos.clone());
        let out = gcn_layer(&mut tape, hv, Some(a), w);
        assert_eq!(tape.value(out), &hpos);
    }

    #[test]
    fn gcn_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, n, f, o) = (2, 4, 3, 5);
        let a = rand_matrix(&mut rng, t * n, n);
        let h = rand_matrix(&mut rng, t * n, f);
        let w = rand_matrix(&mut rng, f, o);
        let mut tape = Tape::new();
        let (av, hv, wv) = (
            tape.constant(a.clone()),
            tape.constant(h.clone()),
            tape.constant(w.clone()),
        );
        let out = gcn_layer(&mut tape, hv, Some(av), wv);
        for b in 0..t {
            for i in 0..n {
                for c in 0..o {
                    let mut s = 0.0;
                    for j in 0..n {
                        for k in 0..f {
                            s += a.get(b * n + i, j) * h.get(b * n + j, k) * w.get(k, c);
                        }
                    }
                    assert!((tape.value(out).get(b * n + i, c) - s.max(0.0)).abs() <= 1e-12);
                }
            }
        }
    }

    /// Per-element reference LSTM cell.
    fn reference_cell(
        x: &[f64],
        h: &[f64],
        c: &[f64],
        wx: &Matrix,
        wh: &Matrix,
        b: &Matrix,
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let gate = |g: usize, j: usize| {
            let col = g * hd + j;
            let mut s = b.get(0, col);
            for (k, xv) in x.iter().enumerate() {
                s += xv * wx.get(k, col);
            }
            for (k, hv) in h.iter().enumerate() {
                s += hv * wh.get(k, col);
            }
            s
        };
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for j in 0..hd {
            let i = sigmoid(gate(0, j));
            let f = sigmoid(gate(1, j));
            let g = gate(2, j).tanh();
            let o = sigmoid(gate(3, j));
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_matches_reference_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, inp, hd) = (5, 3, 4);
        let x = rand_matrix(&mut rng, t, inp);
        let wx = rand_matrix(&mut rng, inp, 4 * hd);
        let wh = rand_matrix(&mut rng, hd, 4 * hd);
        let b = rand_matrix(&mut rng, 1, 4 * hd);
        let mut tape = Tape::new();
        let vars = [x.clone(), wx.clone(), wh.clone(), b.clone()].map(|m| tape.constant(m));
        let out = lstm_sequence(&mut tape, vars[0], vars[1], vars[2], vars[3]);
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for step in 0..t {
            (h, c) = reference_cell(x.row(step), &h, &c, &wx, &wh, &b);
            for j in 0..hd {
                assert!((tape.value(out).get(step, j) - h[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn recurrence_zero_in_zero_out() {
        let mut tape = Tape::new();
        let feats = tape.constant(Matrix::zeros(3 * 4, 5));
        let wx = tape.constant(Matrix::zeros(5, 20));
        let wh = tape.constant(Matrix::zeros(5, 20));
        let b = tape.constant(Matrix::zeros(1, 20));
        let out = spatial_recurrence(&mut tape, feats, vec![0.25; 12], 4, wx, wh, b);
        assert_eq!(tape.value(out).shape(), (3, 5));
        assert!(tape.value(out).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, h, f) = (4, 3, 2);
        let g = rand_matrix(&mut rng, t, h).map(f64::abs);
        let fr = rand_matrix(&mut rng, t, f);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let fv = tape.constant(fr);
        let zero_w = tape.constant(Matrix::zeros(h + f, h));
        let zero_b = tape.constant(Matrix::zeros(1, h));
        let out = fuse(&mut tape, gv, fv, zero_w, zero_b);
        assert!(tape.value(out).data.iter().all(|&x| x == 0.0));
        // identity block on the graph part, zeros on the frame part
        let mut w = Matrix::zeros(h + f, h);
        for i in 0..h {
            w.set(i, i, 1.0);
        }
        let wv = tape.constant(w);
        let out = fuse(&mut tape, gv, fv, wv, zero_b);
        assert_eq!(tape.value(out), &g);
        assert_eq!(tape.value(out).shape(), (t, h));
    }

    fn conv_inputs(
        tape: &mut Tape,
        h: usize,
        value: f64,
        k: usize,
        layers: usize,
    ) -> Vec<Vec<Var>> {
        (0..layers)
            .map(|_| {
                (0..k)
                    .map(|_| tape.constant(Matrix::filled(h, h, value)))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_kernels_reduce_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(&mut rng, 9, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kernels = conv_inputs(&mut tape, 4, 0.0, 2, 3);
        let g = tape.constant(Matrix::filled(1, 4, 1.0));
        let b = tape.constant(Matrix::zeros(1, 4));
        let z = dilated_block(&mut tape, xv, &kernels, &[1, 2, 4], g, b);
        for t in 0..9 {
            let row = x.row(t);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let expected = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((tape.value(z).get(t, j) - expected).abs() < 1e-12);
            }
        }
    }

    /// Enumerates which input frames reach each output frame through taps
    /// `{0, r}` per layer.
    fn reachable(t: usize, dilations: &[usize]) -> Vec<usize> {
        let mut set = vec![t];
        for &r in dilations {
            let mut next = Vec::new();
            for &s in &set {
                next.push(s);
                if s >= r {
                    next.push(s - r);
                }
            }
            next.sort_unstable();
            next.dedup();
            set = next;
        }
        set
    }

    #[test]
    fn impulse_support_is_eight_frames() {
        let t_len = 20;
        let mut x = Matrix::zeros(t_len, 1);
        x.set(0, 0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let kernels = conv_inputs(&mut tape, 1, 1.0, 2, 3);
        let y = dilated_stack(&mut tape, xv, &kernels, &[1, 2, 4]);
        let support: Vec<usize> = (0..t_len)
            .filter(|&t| tape.value(y).get(t, 0) != 0.0)
            .collect();
        let expected: Vec<usize> = (0..t_len)
            .filter(|&t| reachable(t, &[1, 2, 4]).contains(&0))
            .collect();
        assert_eq!(support, expected);
        assert_eq!(support, (0..8).collect::<Vec<_>>());
        // all-ones kernels: every path has weight one, one path per reachable offset
        assert!((0..8).all(|t| tape.value(y).get(t, 0) == 1.0));
    }

    #[test]
    fn dilated_block_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 12, 3);
        let ks: Vec<Vec<Matrix>> = (0..3)
            .map(|_| (0..2).map(|_| rand_matrix(&mut rng, 3, 3)).collect())
            .collect();
        let run = |x: &Matrix| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kernels: Vec<Vec<Var>> = ks
                .iter()
                .map(|l| l.iter().map(|m| tape.constant(m.clone())).collect())
                .collect();
            let g = tape.constant(Matrix::filled(1, 3, 1.0));
            let b = tape.constant(Matrix::zeros(1, 3));
            let z = dilated_block(&mut tape, xv, &kernels, &[1, 2, 4], g, b);
            tape.value(z).clone()
        };
        let base = run(&x);
        for t in 0..11 {
            let mut y = x.clone();
            for j in 0..3 {
                y.set(t + 1, j, 100.0);
            }
            let out = run(&y);
            assert_eq!(&out.data[..(t + 1) * 3], &base.data[..(t + 1) * 3]);
        }
    }
}
