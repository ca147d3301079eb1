//! Recurrent encoder: a single-layer LSTM that consumes one word vector per
//! step and emits the hidden state fed to the image generator.
//!
//! Gate equations (no peepholes):
//!   i = sigmoid(W_xi x + W_hi h + b_i)
//!   f = sigmoid(W_xf x + W_hf h + b_f)
//!   g = tanh   (W_xc x + W_hc h + b_c)
//!   c' = f * c + i * g
//!   o = sigmoid(W_xo x + W_ho h + b_o)
//!   h' = o * tanh(c')

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Gate weights and biases. `w_x*` are `[Z,E]`, `w_h*` are `[Z,Z]`, biases
/// `[Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
}

/// Recurrent state pair; both `[N,Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden_dim: usize) -> LstmState {
        LstmState {
            h: Tensor::zeros(&[batch, hidden_dim]),
            c: Tensor::zeros(&[batch, hidden_dim]),
        }
    }
}

/// Uniform `[-init_scale, init_scale]` weights; zero biases except the forget
/// bias, which starts at one so early training does not wipe the cell state.
pub fn init_lstm(
    embedding_dim: usize,
    hidden_dim: usize,
    seed: u64,
    init_scale: f64,
) -> Result<LstmParams> {
    if embedding_dim == 0 || hidden_dim == 0 {
        return Err(Error::arg(format!(
            "lstm dims must be positive, got E={embedding_dim} Z={hidden_dim}"
        )));
    }
    if init_scale <= 0.0 {
        return Err(Error::arg(format!("init_scale must be > 0, got {init_scale}")));
    }
    let mut r = rng::stream(seed, "lstm-init", 0);
    let (e, z) = (embedding_dim, hidden_dim);
    let mut wx = || Tensor::new(vec![z, e], rng::uniform_vec(&mut r, z * e, init_scale)).unwrap();
    let w_xi = wx();
    let w_xf = wx();
    let w_xo = wx();
    let w_xc = wx();
    let mut wh = || Tensor::new(vec![z, z], rng::uniform_vec(&mut r, z * z, init_scale)).unwrap();
    let w_hi = wh();
    let w_hf = wh();
    let w_ho = wh();
    let w_hc = wh();
    Ok(LstmParams {
        embedding_dim: e,
        hidden_dim: z,
        w_xi,
        w_hi,
        b_i: Tensor::zeros(&[z]),
        w_xf,
        w_hf,
        b_f: Tensor::new(vec![z], vec![1.0; z]).unwrap(),
        w_xo,
        w_ho,
        b_o: Tensor::zeros(&[z]),
        w_xc,
        w_hc,
        b_c: Tensor::zeros(&[z]),
    })
}

impl LstmParams {
    /// Named trainable tensors in checkpoint order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_xi".into(), &self.w_xi),
            ("w_hi".into(), &self.w_hi),
            ("b_i".into(), &self.b_i),
            ("w_xf".into(), &self.w_xf),
            ("w_hf".into(), &self.w_hf),
            ("b_f".into(), &self.b_f),
            ("w_xo".into(), &self.w_xo),
            ("w_ho".into(), &self.w_ho),
            ("b_o".into(), &self.b_o),
            ("w_xc".into(), &self.w_xc),
            ("w_hc".into(), &self.w_hc),
            ("b_c".into(), &self.b_c),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_xi".into(), &mut self.w_xi),
            ("w_hi".into(), &mut self.w_hi),
            ("b_i".into(), &mut self.b_i),
            ("w_xf".into(), &mut self.w_xf),
            ("w_hf".into(), &mut self.w_hf),
            ("b_f".into(), &mut self.b_f),
            ("w_xo".into(), &mut self.w_xo),
            ("w_ho".into(), &mut self.w_ho),
            ("b_o".into(), &mut self.b_o),
            ("w_xc".into(), &mut self.w_xc),
            ("w_hc".into(), &mut self.w_hc),
            ("b_c".into(), &mut self.b_c),
        ]
    }

    /// Registers every gate matrix on `tape` (tracked or not) and caches the
    /// transposed views used by batched steps.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<LstmBinding> {
        let mut reg = |t: &Tensor| tape.leaf_tensor(t, track);
        let ids = [
            reg(&self.w_xi),
            reg(&self.w_hi),
            reg(&self.b_i),
            reg(&self.w_xf),
            reg(&self.w_hf),
            reg(&self.b_f),
            reg(&self.w_xo),
            reg(&self.w_ho),
            reg(&self.b_o),
            reg(&self.w_xc),
            reg(&self.w_hc),
            reg(&self.b_c),
        ];
        let gate = |tape: &mut Tape, wx: TensorId, wh: TensorId, b: TensorId| -> Result<GateBinding> {
            Ok(GateBinding {
                wx_t: tape.transpose(wx)?,
                wh_t: tape.transpose(wh)?,
                b,
            })
        };
        Ok(LstmBinding {
            param_ids: ids.to_vec(),
            input: gate(tape, ids[0], ids[1], ids[2])?,
            forget: gate(tape, ids[3], ids[4], ids[5])?,
            output: gate(tape, ids[6], ids[7], ids[8])?,
            cell: gate(tape, ids[9], ids[10], ids[11])?,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
        })
    }
}

struct GateBinding {
    wx_t: TensorId, // [E,Z]
    wh_t: TensorId, // [Z,Z]
    b: TensorId,    // [Z]
}

/// On-tape handles for one forward pass of the LSTM.
pub struct LstmBinding {
    param_ids: Vec<TensorId>,
    input: GateBinding,
    forget: GateBinding,
    output: GateBinding,
    cell: GateBinding,
    hidden_dim: usize,
    embedding_dim: usize,
}

impl LstmBinding {
    /// Leaf ids in the same order as [`LstmParams::trainable`].
    pub fn param_ids(&self) -> &[TensorId] {
        &self.param_ids
    }

    /// Builds a binding from already-registered leaves (in
    /// [`LstmParams::trainable`] order); dimensions are read off the tape.
    pub fn from_leaves(tape: &mut Tape, ids: &[TensorId]) -> Result<LstmBinding> {
        if ids.len() != 12 {
            return Err(Error::arg(format!(
                "lstm binding needs 12 leaves, got {}",
                ids.len()
            )));
        }
        let shape = tape.shape(ids[0]).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("w_xi must be 2-d, got {shape:?}")));
        }
        let (hidden_dim, embedding_dim) = (shape[0], shape[1]);
        let gate = |tape: &mut Tape, wx: TensorId, wh: TensorId, b: TensorId| -> Result<GateBinding> {
            Ok(GateBinding {
                wx_t: tape.transpose(wx)?,
                wh_t: tape.transpose(wh)?,
                b,
            })
        };
        Ok(LstmBinding {
            param_ids: ids.to_vec(),
            input: gate(tape, ids[0], ids[1], ids[2])?,
            forget: gate(tape, ids[3], ids[4], ids[5])?,
            output: gate(tape, ids[6], ids[7], ids[8])?,
            cell: gate(tape, ids[9], ids[10], ids[11])?,
            hidden_dim,
            embedding_dim,
        })
    }

    fn pre_activation(
        &self,
        tape: &mut Tape,
        gate: &GateBinding,
        x: TensorId,
        h: TensorId,
    ) -> Result<TensorId> {
        let xs = tape.matmul(x, gate.wx_t)?;
        let hs = tape.matmul(h, gate.wh_t)?;
        let sum = tape.add(xs, hs)?;
        tape.add(sum, gate.b)
    }
}

/// One recurrent step over a batch: `x` is `[N,E]`, `h`/`c` are `[N,Z]`.
/// Returns `(h_next, c_next)` on the tape.
pub fn lstm_step(
    tape: &mut Tape,
    binding: &LstmBinding,
    x: TensorId,
    h: TensorId,
    c: TensorId,
) -> Result<(TensorId, TensorId)> {
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != binding.embedding_dim {
        return Err(Error::shape(format!(
            "lstm_step input must be [N,{}], got {:?}",
            binding.embedding_dim, xs
        )));
    }
    let hs = tape.shape(h).to_vec();
    if hs.len() != 2 || hs[1] != binding.hidden_dim || tape.shape(c) != hs {
        return Err(Error::shape(format!(
            "lstm_step state must be [N,{}], got h {:?} c {:?}",
            binding.hidden_dim,
            hs,
            tape.shape(c)
        )));
    }

    let i_pre = binding.pre_activation(tape, &binding.input, x, h)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = binding.pre_activation(tape, &binding.forget, x, h)?;
    let f = tape.sigmoid(f_pre)?;
    let o_pre = binding.pre_activation(tape, &binding.output, x, h)?;
    let o = tape.sigmoid(o_pre)?;
    let g_pre = binding.pre_activation(tape, &binding.cell, x, h)?;
    let g = tape.tanh(g_pre)?;

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Unrolls the recurrence over a word sequence starting from the zero state.
/// Returns every hidden state `[h_1 .. h_n]`; gradients flow through all
/// steps.
pub fn lstm_unroll(
    tape: &mut Tape,
    binding: &LstmBinding,
    inputs: &[TensorId],
) -> Result<Vec<TensorId>> {
    if inputs.is_empty() {
        return Err(Error::arg("lstm_unroll needs at least one input".to_string()));
    }
    let batch = tape.shape(inputs[0])[0];
    let mut h = tape.filled(&[batch, binding.hidden_dim], 0.0);
    let mut c = tape.filled(&[batch, binding.hidden_dim], 0.0);
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (hn, cn) = lstm_step(tape, binding, x, h, c)?;
        h = hn;
        c = cn;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Forward-only unroll on a private untracked tape; returns the hidden-state
/// values.
pub fn unroll_values(params: &LstmParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false)?;
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|x| tape.leaf_tensor(x, false))
        .collect();
    let hs = lstm_unroll(&mut tape, &binding, &ids)?;
    Ok(hs.into_iter().map(|id| tape.to_tensor(id)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_values(params: &LstmParams, x: &Tensor, state: &LstmState) -> (Tensor, LstmState) {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape, false).unwrap();
        let xid = tape.leaf_tensor(x, false);
        let hid = tape.leaf_tensor(&state.h, false);
        let cid = tape.leaf_tensor(&state.c, false);
        let (h, c) = lstm_step(&mut tape, &binding, xid, hid, cid).unwrap();
        (
            tape.to_tensor(h),
            LstmState {
                h: tape.to_tensor(h),
                c: tape.to_tensor(c),
            },
        )
    }

    fn zeroed(e: usize, z: usize) -> LstmParams {
        let mut p = init_lstm(e, z, 0, 0.1).unwrap();
        for (_, t) in p.trainable_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn init_is_deterministic_with_stated_biases() {
        let a = init_lstm(4, 8, 42, 0.08).unwrap();
        let b = init_lstm(4, 8, 42, 0.08).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w_xi.shape(), &[8, 4]);
        assert_eq!(a.w_hi.shape(), &[8, 8]);
        assert!(a.b_f.data().iter().all(|&v| v == 1.0));
        assert!(a.b_i.data().iter().all(|&v| v == 0.0));
        let c = init_lstm(4, 8, 43, 0.08).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        // sigma(0)=0.5, tanh(0)=0 -> c'=0, h=0
        let p = zeroed(3, 2);
        let x = Tensor::new(vec![1, 3], vec![0.7, -0.3, 2.0]).unwrap();
        let (h, st) = step_values(&p, &x, &LstmState::zeros(1, 2));
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(st.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_with_unit_cell() {
        // c' = 0.5*1 + 0.5*0 = 0.5, h = 0.5*tanh(0.5)
        let p = zeroed(3, 2);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let state = LstmState {
            h: Tensor::zeros(&[1, 2]),
            c: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        };
        let (h, st) = step_values(&p, &x, &state);
        let want_h = 0.5 * (0.5f64).tanh();
        for &v in st.c.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        for &v in h.data() {
            assert!((v - want_h).abs() < 1e-15, "{v} vs {want_h}");
        }
        assert!((want_h - 0.23106).abs() < 1e-5);
    }

    /// Independent scalar recurrence used as the unit-level oracle.
    fn scalar_oracle(
        p: &LstmParams,
        xs: &[f64],
    ) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut out = Vec::new();
        for &x in xs {
            let i = sig(p.w_xi.data()[0] * x + p.w_hi.data()[0] * h + p.b_i.data()[0]);
            let f = sig(p.w_xf.data()[0] * x + p.w_hf.data()[0] * h + p.b_f.data()[0]);
            let o = sig(p.w_xo.data()[0] * x + p.w_ho.data()[0] * h + p.b_o.data()[0]);
            let g = (p.w_xc.data()[0] * x + p.w_hc.data()[0] * h + p.b_c.data()[0]).tanh();
            c = f * c + i * g;
            h = o * c.tanh();
            out.push(h);
        }
        out
    }

    #[test]
    fn scalar_case_matches_independent_recurrence() {
        let p = init_lstm(1, 1, 99, 0.9).unwrap();
        let xs = [0.3, -1.1, 0.8, 2.0, -0.4];
        let want = scalar_oracle(&p, &xs);
        let inputs: Vec<Tensor> = xs
            .iter()
            .map(|&x| Tensor::new(vec![1, 1], vec![x]).unwrap())
            .collect();
        let hs = unroll_values(&p, &inputs).unwrap();
        for (got, want) in hs.iter().zip(&want) {
            assert!(
                (got.data()[0] - want).abs() < 1e-12,
                "{} vs {}",
                got.data()[0],
                want
            );
        }
    }

    #[test]
    fn unroll_matches_manual_chain_and_rejects_empty() {
        let p = init_lstm(3, 4, 7, 0.2).unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|i| {
                Tensor::new(
                    vec![2, 3],
                    (0..6).map(|j| ((i * 6 + j) as f64 * 0.13).sin()).collect(),
                )
                .unwrap()
            })
            .collect();
        let hs = unroll_values(&p, &xs).unwrap();
        assert_eq!(hs.len(), 3);

        // manual chain
        let mut state = LstmState::zeros(2, 4);
        for (t, x) in xs.iter().enumerate() {
            let (h, next) = step_values(&p, x, &state);
            assert_eq!(h, hs[t], "step {t} differs from unroll");
            state = next;
        }

        assert!(unroll_values(&p, &[]).is_err());
    }

    #[test]
    fn hidden_state_bounded_by_one() {
        let p = init_lstm(4, 6, 3, 1.5).unwrap();
        let mut r = crate::rng::stream(5, "lstm-bound", 0);
        let mut state = LstmState::zeros(2, 6);
        for _ in 0..200 {
            let x = Tensor::new(vec![2, 4], crate::rng::normal_vec(&mut r, 8, 3.0)).unwrap();
            let (h, next) = step_values(&p, &x, &state);
            assert!(h.data().iter().all(|&v| v.abs() <= 1.0));
            state = next;
        }
    }
}
