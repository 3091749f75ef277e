//! Neural-network building blocks on top of the autodiff tape: a parameter
//! store, linear/MLP/attention/LSTM layers, and the AdamW optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};

pub type ParamId = usize;

/// Flat registry of named trainable parameters.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate param {}",
            name
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.frozen.push(false);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id] = frozen;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.values.len()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Bind parameter `id` onto the tape. Frozen parameters become plain
    /// constant leaves so their exported gradient stays exactly zero.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        if self.frozen[id] {
            tape.leaf(self.values[id].clone())
        } else {
            tape.param_leaf(id, self.values[id].clone())
        }
    }

    pub fn to_named(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                (
                    n.clone(),
                    vec![v.nrows(), v.ncols()],
                    v.iter().cloned().collect(),
                )
            })
            .collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> crate::Result<()> {
        for (name, shape, data) in entries {
            let id = self.id_of(name).ok_or_else(|| {
                crate::Error::Data(format!("checkpoint has unknown parameter {}", name))
            })?;
            let arr = Array2::from_shape_vec((shape[0], shape[1]), data.clone())
                .map_err(|e| crate::Error::Data(format!("parameter {}: {}", name, e)))?;
            if arr.dim() != self.values[id].dim() {
                return Err(crate::Error::Shape(format!(
                    "parameter {}: checkpoint {:?} vs model {:?}",
                    name,
                    arr.dim(),
                    self.values[id].dim()
                )));
            }
            self.values[id] = arr;
        }
        Ok(())
    }
}

/// Xavier-uniform init.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_elem((rows, cols), 1.0)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        Linear {
            w: ps.add(&format!("{}.w", name), xavier(rng, din, dout)),
            b: ps.add(&format!("{}.b", name), zeros(1, dout)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = ps.var(tape, self.w);
        let b = ps.var(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Two-layer MLP with ReLU.
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{}.fc1", name), din, hidden),
            fc2: Linear::new(ps, rng, &format!("{}.fc2", name), hidden, dout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, ps, x);
        let h = tape.relu(h);
        self.fc2.forward(tape, ps, h)
    }
}

#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: ps.add(&format!("{}.gain", name), ones(1, d)),
            bias: ps.add(&format!("{}.bias", name), zeros(1, d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let g = ps.var(tape, self.gain);
        let b = ps.var(tape, self.bias);
        tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Multi-head attention. Queries may differ from keys/values (cross-attention).
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0, "model dim must divide head count");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{}.q", name), d, d),
            wk: Linear::new(ps, rng, &format!("{}.k", name), d, d),
            wv: Linear::new(ps, rng, &format!("{}.v", name), d, d),
            wo: Linear::new(ps, rng, &format!("{}.o", name), d, d),
            heads,
            dim: d,
        }
    }

    /// `causal` adds a lower-triangular mask (requires query len == key len).
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        queries: Var,
        keys_values: Var,
        causal: bool,
    ) -> Var {
        let q = self.wq.forward(tape, ps, queries);
        let k = self.wk.forward(tape, ps, keys_values);
        let v = self.wv.forward(tape, ps, keys_values);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nq = tape.value(q).nrows();
        let nk = tape.value(k).nrows();
        let mask = if causal {
            assert_eq!(nq, nk, "causal attention needs square score matrix");
            let mut m = Array2::zeros((nq, nk));
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m[[i, j]] = -1e30;
                }
            }
            Some(tape.leaf(m))
        } else {
            None
        };
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => tape.add(scores, m),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(attn, vh));
        }
        let mut cat = head_outs[0];
        for &h in &head_outs[1..] {
            cat = tape.concat_cols(cat, h);
        }
        self.wo.forward(tape, ps, cat)
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + ffn(ln(x)).
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        TransformerBlock {
            attn: MultiHeadAttention::new(ps, rng, &format!("{}.attn", name), d, heads),
            ln1: LayerNorm::new(ps, &format!("{}.ln1", name), d),
            ln2: LayerNorm::new(ps, &format!("{}.ln2", name), d),
            ffn: Mlp::new(ps, rng, &format!("{}.ffn", name), d, d * ffn_mult, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var, causal: bool) -> Var {
        let n = self.ln1.forward(tape, ps, x);
        let a = self.attn.forward(tape, ps, n, n, causal);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ps, x);
        let f = self.ffn.forward(tape, ps, n);
        tape.add(x, f)
    }

    /// Cross-attention variant: queries attend over `context`.
    pub fn forward_cross(&self, tape: &mut Tape, ps: &ParamStore, x: Var, context: Var) -> Var {
        let n = self.ln1.forward(tape, ps, x);
        let a = self.attn.forward(tape, ps, n, context, false);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ps, x);
        let f = self.ffn.forward(tape, ps, n);
        tape.add(x, f)
    }
}

/// Standard LSTM cell over batched rows.
#[derive(Clone, Copy, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, hidden: usize) -> Self {
        LstmCell {
            wx: ps.add(&format!("{}.wx", name), xavier(rng, din, 4 * hidden)),
            wh: ps.add(&format!("{}.wh", name), xavier(rng, hidden, 4 * hidden)),
            b: ps.add(&format!("{}.b", name), zeros(1, 4 * hidden)),
            hidden,
        }
    }

    /// One step: returns (h, c). Gate order i, f, g, o.
    pub fn step(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let wx = ps.var(tape, self.wx);
        let wh = ps.var(tape, self.wh);
        let b = ps.var(tape, self.b);
        let gx = tape.matmul(x, wx);
        let gh = tape.matmul(h, wh);
        let gates = tape.add(gx, gh);
        let gates = tape.add_row(gates, b);
        let hsz = self.hidden;
        let i = tape.slice_cols(gates, 0, hsz);
        let f = tape.slice_cols(gates, hsz, 2 * hsz);
        let g = tape.slice_cols(gates, 2 * hsz, 3 * hsz);
        let o = tape.slice_cols(gates, 3 * hsz, 4 * hsz);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }
}

/// Sinusoidal positional signal, N rows of dimension d.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            out[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: ps
                .ids()
                .map(|i| vec![0.0; ps.value(i).len()])
                .collect(),
            v: ps
                .ids()
                .map(|i| vec![0.0; ps.value(i).len()])
                .collect(),
        }
    }

    pub fn apply(&mut self, ps: &mut ParamStore, grads: &HashMap<ParamId, Array2<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&id, g) in sorted(grads) {
            if ps.is_frozen(id) {
                continue;
            }
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let w = ps.value_mut(id);
            for (k, (&gk, wk)) in g.iter().zip(w.iter_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *wk -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *wk);
            }
        }
    }
}

// Deterministic iteration order over the gradient map.
fn sorted(grads: &HashMap<ParamId, Array2<f64>>) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
    let mut v: Vec<_> = grads.iter().collect();
    v.sort_by_key(|(id, _)| **id);
    v.into_iter()
}
