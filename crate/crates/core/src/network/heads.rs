//! Causal sequence heads mapping `[T, hidden]` to per-frame logits `[T, 2]`.

use serde::{Deserialize, Serialize};

use super::layers::{layer_norm_affine, lstm_sequence};
use super::params::{BoundParams, Init};
use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Gru,
    Lstm,
    Transformer,
    Tcn,
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gru" => Ok(HeadKind::Gru),
            "lstm" => Ok(HeadKind::Lstm),
            "transformer" => Ok(HeadKind::Transformer),
            "tcn" => Ok(HeadKind::Tcn),
            other => Err(crate::Error::Invalid(format!(
                "unknown temporal head {other}"
            ))),
        }
    }
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Gru,
        HeadKind::Lstm,
        HeadKind::Transformer,
        HeadKind::Tcn,
    ];
}

const TCN_DILATIONS: [usize; 2] = [1, 2];

pub(crate) fn param_shapes(kind: HeadKind, h: usize) -> Vec<(String, usize, usize, Init)> {
    let p = |name: &str, r, c, init| (format!("head.{name}"), r, c, init);
    match kind {
        HeadKind::Gru => vec![
            p("wx", h, 3 * h, Init::Glorot),
            p("wh", h, 3 * h, Init::Glorot),
            p("bx", 1, 3 * h, Init::Zeros),
            p("bh", 1, 3 * h, Init::Zeros),
        ],
        HeadKind::Lstm => vec![
            p("wx", h, 4 * h, Init::Glorot),
            p("wh", h, 4 * h, Init::Glorot),
            p("b", 1, 4 * h, Init::Zeros),
        ],
        HeadKind::Transformer => vec![
            p("wq", h, h, Init::Glorot),
            p("wk", h, h, Init::Glorot),
            p("wv", h, h, Init::Glorot),
            p("wo", h, h, Init::Glorot),
            p("ln1_gain", 1, h, Init::Ones),
            p("ln1_bias", 1, h, Init::Zeros),
            p("ff1_w", h, h, Init::Glorot),
            p("ff1_b", 1, h, Init::Zeros),
            p("ff2_w", h, h, Init::Glorot),
            p("ff2_b", 1, h, Init::Zeros),
            p("ln2_gain", 1, h, Init::Ones),
            p("ln2_bias", 1, h, Init::Zeros),
        ],
        HeadKind::Tcn => TCN_DILATIONS
            .iter()
            .enumerate()
            .flat_map(|(i, _)| {
                vec![
                    p(&format!("{i}.k0"), h, h, Init::Glorot),
                    p(&format!("{i}.k1"), h, h, Init::Glorot),
                    p(&format!("{i}.b"), 1, h, Init::Zeros),
                ]
            })
            .collect(),
    }
}

/// GRU over the rows of `x` (gate order r, z, n), zero initial state.
pub fn gru_sequence(tape: &mut Tape, x: Var, wx: Var, wh: Var, bx: Var, bh: Var) -> Var {
    let t_len = tape.value(x).rows;
    let hidden = tape.value(wh).rows;
    let xw = tape.matmul(x, wx);
    let xproj = tape.add_row(xw, bx);
    let mut h = tape.constant(Matrix::zeros(1, hidden));
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = tape.slice_rows(xproj, t, 1);
        let hw = tape.matmul(h, wh);
        let hproj = tape.add(hw, bh);
        let xr = tape.slice_cols(xt, 0, hidden);
        let xz = tape.slice_cols(xt, hidden, hidden);
        let xn = tape.slice_cols(xt, 2 * hidden, hidden);
        let hr = tape.slice_cols(hproj, 0, hidden);
        let hz = tape.slice_cols(hproj, hidden, hidden);
        let hn = tape.slice_cols(hproj, 2 * hidden, hidden);
        let r_pre = tape.add(xr, hr);
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(xz, hz);
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, hn);
        let n_pre = tape.add(xn, gated);
        let n = tape.tanh(n_pre);
        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = tape.sub(h, n);
        let carry = tape.mul(z, diff);
        h = tape.add(n, carry);
        outputs.push(h);
    }
    tape.stack_rows(&outputs)
}

fn positional_encoding(t_len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(t_len, dim);
    for t in 0..t_len {
        for j in 0..dim {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = t as f64 / rate;
            m.set(t, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Single-layer, single-head causal self-attention encoder (post-norm).
fn transformer(tape: &mut Tape, z: Var, p: &BoundParams) -> Var {
    let (t_len, dim) = tape.value(z).shape();
    let pe = tape.constant(positional_encoding(t_len, dim));
    let x = tape.add(z, pe);
    let q = tape.matmul(x, p.var("head.wq"));
    let k = tape.matmul(x, p.var("head.wk"));
    let v = tape.matmul(x, p.var("head.wv"));
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = tape.causal_softmax(scaled);
    let ctx = tape.matmul(attn, v);
    let proj = tape.matmul(ctx, p.var("head.wo"));
    let res1 = tape.add(x, proj);
    let x1 = layer_norm_affine(tape, res1, p.var("head.ln1_gain"), p.var("head.ln1_bias"));
    let f1 = tape.matmul(x1, p.var("head.ff1_w"));
    let f1b = tape.add_row(f1, p.var("head.ff1_b"));
    let f1r = tape.relu(f1b);
    let f2 = tape.matmul(f1r, p.var("head.ff2_w"));
    let f2b = tape.add_row(f2, p.var("head.ff2_b"));
    let res2 = tape.add(x1, f2b);
    layer_norm_affine(tape, res2, p.var("head.ln2_gain"), p.var("head.ln2_bias"))
}

/// Residual causal convolution blocks, kernel 2.
fn tcn(tape: &mut Tape, z: Var, p: &BoundParams) -> Var {
    let mut x = z;
    for (i, &d) in TCN_DILATIONS.iter().enumerate() {
        let now = tape.matmul(x, p.var(&format!("head.{i}.k0")));
        let past = tape.shift_rows(x, d);
        let before = tape.matmul(past, p.var(&format!("head.{i}.k1")));
        let sum = tape.add(now, before);
        let biased = tape.add_row(sum, p.var(&format!("head.{i}.b")));
        let y = tape.relu(biased);
        x = tape.add(x, y);
    }
    x
}

/// Sequence model (or identity when `use_head` is off) followed by the
/// linear classifier to two logits per frame.
pub(crate) fn head_logits(
    tape: &mut Tape,
    z: Var,
    kind: HeadKind,
    use_head: bool,
    p: &BoundParams,
) -> Var {
    let out = if use_head {
        match kind {
            HeadKind::Gru => gru_sequence(
                tape,
                z,
                p.var("head.wx"),
                p.var("head.wh"),
                p.var("head.bx"),
                p.var("head.bh"),
            ),
            HeadKind::Lstm => {
                lstm_sequence(tape, z, p.var("head.wx"), p.var("head.wh"), p.var("head.b"))
            }
            HeadKind::Transformer => transformer(tape, z, p),
            HeadKind::Tcn => tcn(tape, z, p),
        }
    } else {
        z
    };
    let logits = tape.matmul(out, p.var("cls.w"));
    tape.add_row(logits, p.var("cls.b"))
}

/// Per-frame logits for `z` under the head stored in `params`.
pub fn temporal_head(
    z: &Matrix,
    kind: HeadKind,
    params: &super::ModelParams,
) -> crate::Result<Matrix> {
    let hidden = z.cols;
    let expected = param_shapes(kind, hidden);
    for (name, r, c, _) in &expected {
        match params.get(name) {
            Some(m) if m.shape() == (*r, *c) => {}
            _ => {
                return Err(crate::Error::Shape(format!(
                    "parameters do not hold a {kind:?} head of width {hidden} ({name})"
                )))
            }
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let logits = head_logits(&mut tape, zv, kind, true, &bound);
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, ModelParams};
    use crate::tensor::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: HeadKind, hidden: usize) -> (ModelParams, Matrix) {
        let cfg = ModelConfig {
            hidden_dim: hidden,
            feature_dim: hidden,
            num_objects: 3,
            temporal_head: kind,
            init_seed: 17,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Matrix::from_vec(
            12,
            hidden,
            (0..12 * hidden)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        (params, z)
    }

    #[test]
    fn zero_classifier_gives_half() {
        for kind in HeadKind::ALL {
            let (mut params, z) = setup(kind, 6);
            for name in ["cls.w", "cls.b"] {
                let m = params.get_mut(name).unwrap();
                *m = Matrix::zeros(m.rows, m.cols);
            }
            let logits = temporal_head(&z, kind, &params).unwrap();
            assert!(logits.data.iter().all(|&x| x == 0.0));
            let p = sigmoid(logits.get(0, 1) - logits.get(0, 0));
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn gru_single_step_matches_cell() {
        let h = 4;
        let (params, z) = setup(HeadKind::Gru, h);
        let z1 = Matrix::from_vec(1, h, z.row(0).to_vec());
        let logits = temporal_head(&z1, HeadKind::Gru, &params).unwrap();
        let wx = params.get("head.wx").unwrap();
        let bx = params.get("head.bx").unwrap();
        let bh = params.get("head.bh").unwrap();
        // h_prev = 0, so the recurrent projection is just bh
        let pre = |g: usize, j: usize| {
            let col = g * h + j;
            let mut s = bx.get(0, col);
            for k in 0..h {
                s += z1.get(0, k) * wx.get(k, col);
            }
            s
        };
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let r = sigmoid(pre(0, j) + bh.get(0, j));
            let zg = sigmoid(pre(1, j) + bh.get(0, h + j));
            let n = (pre(2, j) + r * bh.get(0, 2 * h + j)).tanh();
            hidden[j] = (1.0 - zg) * n;
        }
        let w = params.get("cls.w").unwrap();
        let b = params.get("cls.b").unwrap();
        for c in 0..2 {
            let mut s = b.get(0, c);
            for k in 0..h {
                s += hidden[k] * w.get(k, c);
            }
            assert!((logits.get(0, c) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_consistency_for_every_head() {
        for kind in HeadKind::ALL {
            let (params, z) = setup(kind, 5);
            let full = temporal_head(&z, kind, &params).unwrap();
            for t in 1..=z.rows {
                let prefix = Matrix::from_vec(t, z.cols, z.data[..t * z.cols].to_vec());
                let part = temporal_head(&prefix, kind, &params).unwrap();
                for (a, b) in part.data.iter().zip(&full.data[..t * 2]) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{kind:?} prefix {t}");
                }
            }
        }
    }

    #[test]
    fn unknown_kind_is_error() {
        assert!("rnn".parse::<HeadKind>().is_err());
        assert_eq!("tcn".parse::<HeadKind>().unwrap(), HeadKind::Tcn);
        let (params, z) = setup(HeadKind::Gru, 4);
        assert!(temporal_head(&z, HeadKind::Lstm, &params).is_err());
    }
}
