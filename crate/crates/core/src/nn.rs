//! Neural building blocks: multi-head attention, position-wise feed-forward,
//! GRU cell, embeddings with sinusoidal positions, dropout, and the attention
//! masks. All functions record onto a [`Tape`](crate::tape::Tape) and are
//! stateless given their parameter handles.

use std::rc::Rc;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Tensor;

/// Projection weights of one attention model. No biases; the head count
/// lives in the model config and must divide `d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

#[derive(Debug, Clone)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Gated recurrent cell parameters. `w_*` act on the new input, `u_*` on the
/// carried state; everything is square in `d_model`.
#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub w_z: T,
    pub u_z: T,
    pub b_z: T,
    pub w_r: T,
    pub u_r: T,
    pub b_r: T,
    pub w_h: T,
    pub u_h: T,
    pub b_h: T,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> AttentionParams<T> {
    pub fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
        }
    }
}

impl<T> FfnParams<T> {
    pub fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&format!("{prefix}.w1"), &self.w1),
            b1: f(&format!("{prefix}.b1"), &self.b1),
            w2: f(&format!("{prefix}.w2"), &self.w2),
            b2: f(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl<T> GruParams<T> {
    pub fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> GruParams<U> {
        GruParams {
            w_z: f(&format!("{prefix}.w_z"), &self.w_z),
            u_z: f(&format!("{prefix}.u_z"), &self.u_z),
            b_z: f(&format!("{prefix}.b_z"), &self.b_z),
            w_r: f(&format!("{prefix}.w_r"), &self.w_r),
            u_r: f(&format!("{prefix}.u_r"), &self.u_r),
            b_r: f(&format!("{prefix}.b_r"), &self.b_r),
            w_h: f(&format!("{prefix}.w_h"), &self.w_h),
            u_h: f(&format!("{prefix}.u_h"), &self.u_h),
            b_h: f(&format!("{prefix}.b_h"), &self.b_h),
        }
    }
}

impl<T> LayerNormParams<T> {
    pub fn map_named<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }
}

/// Scaled dot-product multi-head attention.
///
/// Inputs are (batch, len, d_model); the mask broadcasts over heads. Returns
/// the projected output and the attention weights (batch, heads, t_q, t_k),
/// captured before attention dropout so analysis sees proper distributions.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<Rc<Mask>>,
    p: &AttentionParams<Var>,
    heads: usize,
    dropout: Option<(&mut Rng, f64)>,
) -> (Var, Var) {
    let (b, t_q, d) = dims3(tape.shape(q_in));
    let (_, t_k, _) = dims3(tape.shape(k_in));
    assert!(t_k > 0, "attention needs at least one key position");
    assert_eq!(d % heads, 0, "d_model {} not divisible by heads {}", d, heads);
    let dh = d / heads;

    let q = tape.matmul(q_in, p.w_q);
    let k = tape.matmul(k_in, p.w_k);
    let v = tape.matmul(v_in, p.w_v);

    let qh = split_heads(tape, q, b, t_q, heads, dh);
    let kh = split_heads(tape, k, b, t_k, heads, dh);
    let vh = split_heads(tape, v, b, t_k, heads, dh);

    let scores = tape.matmul_bt(qh, kh);
    let scaled = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
    let weights = tape.softmax(scaled, 3, mask);

    let attended = match dropout {
        Some((rng, rate)) if rate > 0.0 => {
            let dropped = apply_dropout(tape, weights, rng, rate);
            tape.matmul(dropped, vh)
        }
        _ => tape.matmul(weights, vh),
    };

    let merged = tape.permute(attended, &[0, 2, 1, 3]);
    let flat = tape.reshape(merged, &[b, t_q, d]);
    let out = tape.matmul(flat, p.w_o);
    (out, weights)
}

fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, b: usize, t: usize, h: usize, dh: usize) -> Var {
    let r = tape.reshape(x, &[b, t, h, dh]);
    tape.permute(r, &[0, 2, 1, 3])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (batch, len, d) tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

/// Position-wise feed-forward: relu(x W1 + b1) W2 + b2.
pub fn ffn<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &FfnParams<Var>) -> Var {
    let h = tape.matmul(x, p.w1);
    let h = tape.add(h, p.b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, p.w2);
    tape.add(out, p.b2)
}

/// GRU cell applied position-wise: the recurrence runs over block index, not
/// time, so every position carries its own state of the same (b, t, d) shape.
pub fn gru_cell<S: Scalar>(tape: &mut Tape<S>, c: Var, x: Var, p: &GruParams<Var>) -> Var {
    assert_eq!(tape.shape(c), tape.shape(x), "gru state shape {:?} vs input shape {:?}", tape.shape(c), tape.shape(x));
    let z = gru_gate(tape, x, p.w_z, c, p.u_z, p.b_z);
    let z = tape.sigmoid(z);
    let r = gru_gate(tape, x, p.w_r, c, p.u_r, p.b_r);
    let r = tape.sigmoid(r);
    let rc = tape.mul(r, c);
    let h = gru_gate(tape, x, p.w_h, rc, p.u_h, p.b_h);
    let h = tape.tanh(h);
    // c' = (1 - z) * c + z * h
    let keep = one_minus(tape, z);
    let kept = tape.mul(keep, c);
    let new = tape.mul(z, h);
    tape.add(kept, new)
}

fn gru_gate<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, s: Var, u: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    let su = tape.matmul(s, u);
    let lin = tape.add(xw, su);
    tape.add(lin, b)
}

/// 1 - x.
pub fn one_minus<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let neg = tape.scale(x, S::from_f64(-1.0));
    tape.add_scalar(neg, S::one())
}

/// Sinusoidal positional encoding table of shape (len, d).
pub fn positional_encoding<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut values = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            values.push(S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], values)
}

/// Token embedding: lookup scaled by sqrt(d) plus the sinusoidal positions.
/// `ids` is a flattened (b, t) index matrix into the shared table.
pub fn embed<S: Scalar>(tape: &mut Tape<S>, table: Var, ids: &[usize], b: usize, t: usize) -> Var {
    assert_eq!(ids.len(), b * t, "embed got {} ids for a {}x{} batch", ids.len(), b, t);
    let d = tape.shape(table)[1];
    let rows = tape.gather(table, Rc::new(ids.to_vec()));
    let shaped = tape.reshape(rows, &[b, t, d]);
    let scaled = tape.scale(shaped, S::from_f64((d as f64).sqrt()));
    let pe = tape.constant(positional_encoding(t, d));
    tape.add(scaled, pe)
}

/// Inverted dropout: elementwise multiply by a 0 / (1-rate)^-1 mask.
/// Rate 0 is the identity and draws nothing from the stream.
pub fn apply_dropout<S: Scalar>(tape: &mut Tape<S>, x: Var, rng: &mut Rng, rate: f64) -> Var {
    if rate <= 0.0 {
        return x;
    }
    assert!(rate < 1.0, "dropout rate must be in [0, 1), got {}", rate);
    let shape = tape.shape(x).to_vec();
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let mask_vals: Vec<S> = (0..tape.value(x).numel())
        .map(|_| if rng.uniform() < rate { S::zero() } else { keep_scale })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_vals));
    tape.mul(x, mask)
}

/// Key-padding mask of shape (b, 1, 1, t): pad positions are excluded as keys
/// for every query.
pub fn key_padding_mask(ids: &[usize], b: usize, t: usize, pad: usize) -> Mask {
    let keep = ids.iter().map(|&id| id != pad).collect();
    Mask::new(vec![b, 1, 1, t], keep)
}

/// Causal + key-padding mask of shape (b, 1, t, t) for decoder self-attention:
/// query j may attend key i iff i <= j and key i is not padding.
pub fn causal_padding_mask(ids: &[usize], b: usize, t: usize, pad: usize) -> Mask {
    let mut keep = Vec::with_capacity(b * t * t);
    for row in 0..b {
        for q in 0..t {
            for k in 0..t {
                keep.push(k <= q && ids[row * t + k] != pad);
            }
        }
    }
    Mask::new(vec![b, 1, t, t], keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    type T64 = Tensor<f64>;

    fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
        let n: usize = shape.iter().product();
        T64::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect())
    }

    fn attn_params(tape: &mut Tape<f64>, rng: &mut Rng, d: usize) -> AttentionParams<Var> {
        AttentionParams {
            w_q: tape.constant(rand_tensor(rng, &[d, d], -0.5, 0.5)),
            w_k: tape.constant(rand_tensor(rng, &[d, d], -0.5, 0.5)),
            w_v: tape.constant(rand_tensor(rng, &[d, d], -0.5, 0.5)),
            w_o: tape.constant(rand_tensor(rng, &[d, d], -0.5, 0.5)),
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[2, 1, 4], -1.0, 1.0));
        let p = attn_params(&mut tape, &mut rng, 4);
        let (_, w) = multi_head_attention(&mut tape, x, x, x, None, &p, 2, None);
        for v in &tape.value(w).values {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn zero_query_key_projections_give_uniform_weights() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 5, 4], -1.0, 1.0));
        let zero = tape.constant(T64::zeros(&[4, 4]));
        let p = AttentionParams {
            w_q: zero,
            w_k: zero,
            w_v: tape.constant(rand_tensor(&mut rng, &[4, 4], -0.5, 0.5)),
            w_o: tape.constant(rand_tensor(&mut rng, &[4, 4], -0.5, 0.5)),
        };
        let (_, w) = multi_head_attention(&mut tape, x, x, x, None, &p, 2, None);
        for v in &tape.value(w).values {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_per_head_reference() {
        // Independent oracle: run each head separately through plain scalar
        // loops and compose with the output projection by hand.
        let (b, t, d, heads) = (2, 3, 4, 2);
        let dh = d / heads;
        let mut rng = Rng::new(3);
        let xq = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let xk = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let xv = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let wq = rand_tensor(&mut rng, &[d, d], -0.7, 0.7);
        let wk = rand_tensor(&mut rng, &[d, d], -0.7, 0.7);
        let wv = rand_tensor(&mut rng, &[d, d], -0.7, 0.7);
        let wo = rand_tensor(&mut rng, &[d, d], -0.7, 0.7);

        let mut tape = Tape::new();
        let q_in = tape.constant(xq.clone());
        let k_in = tape.constant(xk.clone());
        let v_in = tape.constant(xv.clone());
        let p = AttentionParams {
            w_q: tape.constant(wq.clone()),
            w_k: tape.constant(wk.clone()),
            w_v: tape.constant(wv.clone()),
            w_o: tape.constant(wo.clone()),
        };
        let (out, _) = multi_head_attention(&mut tape, q_in, k_in, v_in, None, &p, heads, None);
        let got = &tape.value(out).values;

        let project = |x: &T64, w: &T64, row: usize, col: usize, bi: usize, ti: usize| -> f64 {
            let _ = row;
            (0..d).map(|i| x.values[(bi * t + ti) * d + i] * w.values[i * d + col]).sum()
        };
        let mut expect = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                // per-head projections
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                for ti in 0..t {
                    for c in 0..dh {
                        qh[ti * dh + c] = project(&xq, &wq, 0, h * dh + c, bi, ti);
                        kh[ti * dh + c] = project(&xk, &wk, 0, h * dh + c, bi, ti);
                        vh[ti * dh + c] = project(&xv, &wv, 0, h * dh + c, bi, ti);
                    }
                }
                for ti in 0..t {
                    let mut scores = vec![0.0; t];
                    for tj in 0..t {
                        let dot: f64 = (0..dh).map(|c| qh[ti * dh + c] * kh[tj * dh + c]).sum();
                        scores[tj] = dot / (dh as f64).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for c in 0..dh {
                        let ctx: f64 =
                            (0..t).map(|tj| exps[tj] / z * vh[tj * dh + c]).sum();
                        // scatter through W_o: concat position is h*dh + c
                        for oc in 0..d {
                            expect[(bi * t + ti) * d + oc] += ctx * wo.values[(h * dh + c) * d + oc];
                        }
                    }
                }
            }
        }
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10, "got {} want {}", g, e);
        }
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight_and_rows_sum_to_one() {
        let mut rng = Rng::new(4);
        let (b, t, d) = (2, 4, 4);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0));
        let p = attn_params(&mut tape, &mut rng, d);
        // Last key of every row is padding.
        let ids = vec![5, 5, 5, 0, 5, 5, 5, 0];
        let mask = Rc::new(key_padding_mask(&ids, b, t, 0));
        let (_, w) = multi_head_attention(&mut tape, x, x, x, Some(mask), &p, 2, None);
        let wt = tape.value(w);
        for row in wt.values.chunks(t) {
            assert_eq!(row[t - 1], 0.0);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_zero_weights_output_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut Rng::new(5), &[2, 3, 4], -1.0, 1.0));
        let p = FfnParams {
            w1: tape.constant(T64::zeros(&[4, 8])),
            b1: tape.constant(T64::zeros(&[8])),
            w2: tape.constant(T64::zeros(&[8, 4])),
            b2: tape.constant(T64::from_f64(&[4], &[0.1, -0.2, 0.3, 0.4])),
        };
        let y = ffn(&mut tape, x, &p);
        for row in tape.value(y).values.chunks(4) {
            assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn ffn_is_position_wise() {
        // Permuting positions permutes the output identically.
        let mut rng = Rng::new(6);
        let (t, d) = (4, 3);
        let x = rand_tensor(&mut rng, &[1, t, d], -1.0, 1.0);
        let mut xp = x.clone();
        // rotate positions by one
        xp.values.rotate_left(d);

        let run = |input: T64, rng: &mut Rng| -> Vec<f64> {
            let mut rng2 = Rng::new(7);
            let _ = rng;
            let mut tape = Tape::new();
            let xi = tape.constant(input);
            let p = FfnParams {
                w1: tape.constant(rand_tensor(&mut rng2, &[d, 6], -0.5, 0.5)),
                b1: tape.constant(rand_tensor(&mut rng2, &[6], -0.5, 0.5)),
                w2: tape.constant(rand_tensor(&mut rng2, &[6, d], -0.5, 0.5)),
                b2: tape.constant(rand_tensor(&mut rng2, &[d], -0.5, 0.5)),
            };
            let y = ffn(&mut tape, xi, &p);
            tape.value(y).values.clone()
        };
        let mut y = run(x, &mut rng);
        let yp = run(xp, &mut rng);
        y.rotate_left(d);
        for (a, b) in y.iter().zip(&yp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_matches_primitive_composition() {
        let mut rng = Rng::new(8);
        let (b, t, d, h) = (2, 3, 4, 6);
        let x = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[d, h], -0.5, 0.5);
        let b1 = rand_tensor(&mut rng, &[h], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, &[h, d], -0.5, 0.5);
        let b2 = rand_tensor(&mut rng, &[d], -0.5, 0.5);

        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let p = FfnParams {
            w1: tape.constant(w1.clone()),
            b1: tape.constant(b1.clone()),
            w2: tape.constant(w2.clone()),
            b2: tape.constant(b2.clone()),
        };
        let y = ffn(&mut tape, xi, &p);

        // hand-composed chain on a second tape
        let mut tape2 = Tape::new();
        let xi2 = tape2.constant(x);
        let w1v = tape2.constant(w1);
        let b1v = tape2.constant(b1);
        let w2v = tape2.constant(w2);
        let b2v = tape2.constant(b2);
        let m = tape2.matmul(xi2, w1v);
        let m = tape2.add(m, b1v);
        let m = tape2.relu(m);
        let m = tape2.matmul(m, w2v);
        let m = tape2.add(m, b2v);
        assert_eq!(tape.value(y).values, tape2.value(m).values);
    }

    fn gru_zero_params(tape: &mut Tape<f64>, d: usize) -> GruParams<Var> {
        let z = tape.constant(T64::zeros(&[d, d]));
        let b = tape.constant(T64::zeros(&[d]));
        GruParams { w_z: z, u_z: z, b_z: b, w_r: z, u_r: z, b_r: b, w_h: z, u_h: z, b_h: b }
    }

    #[test]
    fn gru_all_zero_params_halves_state() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::new();
        let c = rand_tensor(&mut rng, &[1, 2, 3], -1.0, 1.0);
        let cv = tape.constant(c.clone());
        let xv = tape.constant(rand_tensor(&mut rng, &[1, 2, 3], -1.0, 1.0));
        let p = gru_zero_params(&mut tape, 3);
        let out = gru_cell(&mut tape, cv, xv, &p);
        for (o, ci) in tape.value(out).values.iter().zip(&c.values) {
            assert!((o - 0.5 * ci).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_saturated_update_gate_returns_candidate() {
        // b_z = 30 drives z to 1, so c' ~ tanh branch.
        let mut rng = Rng::new(10);
        let d = 3;
        let mut tape = Tape::new();
        let c = tape.constant(rand_tensor(&mut rng, &[1, 2, d], -1.0, 1.0));
        let x = rand_tensor(&mut rng, &[1, 2, d], -1.0, 1.0);
        let xv = tape.constant(x.clone());
        let mut p = gru_zero_params(&mut tape, d);
        p.b_z = tape.constant(T64::full(&[d], 30.0));
        let wh = rand_tensor(&mut rng, &[d, d], -0.5, 0.5);
        p.w_h = tape.constant(wh.clone());
        let out = gru_cell(&mut tape, c, xv, &p);
        // candidate = tanh(x @ w_h) since u_h = 0, b_h = 0
        for (pos, o) in tape.value(out).values.iter().enumerate() {
            let (row, col) = (pos / d, pos % d);
            let pre: f64 = (0..d).map(|i| x.values[row * d + i] * wh.values[i * d + col]).sum();
            assert!((o - pre.tanh()).abs() < 1e-9, "got {} want {}", o, pre.tanh());
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        // Scalar reference of the three-gate equations, element by element.
        let mut rng = Rng::new(11);
        let (b, t, d) = (2, 2, 3);
        let c = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[b, t, d], -1.0, 1.0);
        let mats: Vec<T64> = (0..6).map(|_| rand_tensor(&mut rng, &[d, d], -0.6, 0.6)).collect();
        let biases: Vec<T64> = (0..3).map(|_| rand_tensor(&mut rng, &[d], -0.3, 0.3)).collect();

        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let xv = tape.constant(x.clone());
        let p = GruParams {
            w_z: tape.constant(mats[0].clone()),
            u_z: tape.constant(mats[1].clone()),
            b_z: tape.constant(biases[0].clone()),
            w_r: tape.constant(mats[2].clone()),
            u_r: tape.constant(mats[3].clone()),
            b_r: tape.constant(biases[1].clone()),
            w_h: tape.constant(mats[4].clone()),
            u_h: tape.constant(mats[5].clone()),
            b_h: tape.constant(biases[2].clone()),
        };
        let out = gru_cell(&mut tape, cv, xv, &p);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lin = |xrow: &[f64], w: &T64, srow: &[f64], u: &T64, bias: &T64, col: usize| -> f64 {
            let xa: f64 = (0..d).map(|i| xrow[i] * w.values[i * d + col]).sum();
            let sa: f64 = (0..d).map(|i| srow[i] * u.values[i * d + col]).sum();
            xa + sa + bias.values[col]
        };
        for pos in 0..b * t {
            let xrow = &x.values[pos * d..(pos + 1) * d];
            let crow = &c.values[pos * d..(pos + 1) * d];
            for col in 0..d {
                let z = sig(lin(xrow, &mats[0], crow, &mats[1], &biases[0], col));
                let r_full: Vec<f64> = (0..d)
                    .map(|cc| sig(lin(xrow, &mats[2], crow, &mats[3], &biases[1], cc)))
                    .collect();
                let rc: Vec<f64> = (0..d).map(|i| r_full[i] * crow[i]).collect();
                let h = lin(xrow, &mats[4], &rc, &mats[5], &biases[2], col).tanh();
                let want = (1.0 - z) * crow[col] + z * h;
                let got = tape.value(out).values[pos * d + col];
                assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
            }
        }
    }

    #[test]
    fn gru_output_is_convex_combination_of_state_and_candidate() {
        // Each output component lies between the matching components of c and
        // the tanh candidate (which is itself in [-1, 1]).
        let mut rng = Rng::new(12);
        let d = 4;
        for _ in 0..20 {
            let mut tape = Tape::new();
            let c = rand_tensor(&mut rng, &[1, 3, d], -2.0, 2.0);
            let cv = tape.constant(c.clone());
            let xv = tape.constant(rand_tensor(&mut rng, &[1, 3, d], -2.0, 2.0));
            let p = GruParams {
                w_z: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                u_z: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                b_z: tape.constant(rand_tensor(&mut rng, &[d], -1.0, 1.0)),
                w_r: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                u_r: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                b_r: tape.constant(rand_tensor(&mut rng, &[d], -1.0, 1.0)),
                w_h: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                u_h: tape.constant(rand_tensor(&mut rng, &[d, d], -1.0, 1.0)),
                b_h: tape.constant(rand_tensor(&mut rng, &[d], -1.0, 1.0)),
            };
            let out = gru_cell(&mut tape, cv, xv, &p);
            for (o, ci) in tape.value(out).values.iter().zip(&c.values) {
                let lo = ci.min(-1.0) - 1e-12;
                let hi = ci.max(1.0) + 1e-12;
                assert!(*o >= lo && *o <= hi, "{} outside [{}, {}]", o, lo, hi);
            }
        }
    }

    #[test]
    fn embed_zero_table_leaves_positional_encoding() {
        let mut tape = Tape::new();
        let table = tape.constant(T64::zeros(&[6, 4]));
        let e = embed(&mut tape, table, &[0], 1, 1);
        let pe = positional_encoding::<f64>(1, 4);
        assert_eq!(tape.value(e).values, pe.values);
    }

    #[test]
    fn same_token_differs_only_by_position_term() {
        let mut rng = Rng::new(13);
        let mut tape = Tape::new();
        let table = tape.constant(rand_tensor(&mut rng, &[6, 4], -1.0, 1.0));
        let e = embed(&mut tape, table, &[5, 5], 1, 2);
        let v = &tape.value(e).values;
        let pe = positional_encoding::<f64>(2, 4);
        for i in 0..4 {
            let diff = v[4 + i] - v[i];
            let pe_diff = pe.values[4 + i] - pe.values[i];
            assert!((diff - pe_diff).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_closed_form() {
        // pos = 1, d = 4: dims 0 and 1 use the divisor 10000^0 = 1.
        let pe = positional_encoding::<f64>(2, 4);
        assert!((pe.values[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.values[5] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "position 1 exceeds")]
    fn embed_rejects_out_of_vocab_id() {
        let mut tape = Tape::new();
        let table = tape.constant(T64::zeros(&[6, 4]));
        embed(&mut tape, table, &[0, 9], 1, 2);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_draws_nothing() {
        let mut rng = Rng::new(14);
        let before = rng.clone();
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut Rng::new(15), &[2, 3], -1.0, 1.0));
        let y = apply_dropout(&mut tape, x, &mut rng, 0.0);
        assert_eq!(y, x);
        let mut b2 = before;
        assert_eq!(rng.next_u64(), b2.next_u64());
    }

    #[test]
    fn dropout_scales_kept_positions() {
        let mut rng = Rng::new(16);
        let mut tape = Tape::new();
        let x = tape.constant(T64::full(&[100], 1.0));
        let y = apply_dropout(&mut tape, x, &mut rng, 0.5);
        for v in &tape.value(y).values {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_shape_and_rule() {
        let m = causal_padding_mask(&[5, 5, 0], 1, 3, 0);
        assert_eq!(m.shape, vec![1, 1, 3, 3]);
        // query 1 sees keys 0 and 1; key 2 is both future and padding.
        assert_eq!(
            m.keep,
            vec![true, false, false, true, true, false, true, true, false]
        );
    }
}
