//! Parameter storage, layer primitives, and optimization.
//!
//! Parameters live in a [`ParamStore`] (named `f64` matrices in a fixed
//! order) and are bound into a fresh [`Graph`] once per forward pass.
//! Everything here is deterministic: initialization draws from named
//! [`rng_stream`]s and updates run on a single logical thread.

use crate::graph::{Graph, Gradients, NodeId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type ParamId = usize;

/// An independent, reproducible RNG derived from `(seed, tag, index)`.
/// Distinct tags never share a stream, so adding a consumer somewhere
/// cannot shift the draws seen by another.
pub fn rng_stream(seed: u64, tag: &str, index: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}

/// One standard Gumbel draw: `-ln(-ln(u))`, `u` in `(0, 1)`.
pub fn gumbel_noise(rng: &mut impl Rng) -> f64 {
    let mut u: f64 = rng.gen();
    if u <= 0.0 {
        u = f64::MIN_POSITIVE;
    }
    -(-u.ln()).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Replace the value of an existing parameter; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.entries[id].1.dim(), value.dim());
        self.entries[id].1 = value;
    }

    /// Bind every parameter into the graph. Trainable bindings become
    /// gradient-carrying variables; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|(_, v)| {
                if trainable {
                    g.var(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Binding { node_ids: ids }
    }

    /// SHA-256 over names, shapes, and little-endian raw bytes, in
    /// storage order. Identical parameters always produce identical
    /// digests.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.nrows() as u64).to_le_bytes());
            h.update((value.ncols() as u64).to_le_bytes());
            for &x in value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Graph nodes corresponding to one [`ParamStore::bind`] call.
pub struct Binding {
    node_ids: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.node_ids[id]
    }
}

/// Uniform init in `[-bound, bound)` with an explicit fill order.
pub fn uniform_init(rng: &mut ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            a[[i, j]] = rng.gen_range(-bound..bound);
        }
    }
    a
}

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(&format!("{prefix}.w"), uniform_init(rng, in_dim, out_dim, bound));
        let b = store.add(&format!("{prefix}.b"), Array2::zeros((1, out_dim)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let wx = g.matmul(x, bind.node(self.w));
        g.add_row(wx, bind.node(self.b))
    }
}

/// Single-layer LSTM cell with gate order `[input, forget, cell, output]`
/// and the forget-gate bias initialized to one.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let wx = store.add(
            &format!("{prefix}.wx"),
            uniform_init(rng, input_dim, 4 * hidden_dim, bound),
        );
        let wh = store.add(
            &format!("{prefix}.wh"),
            uniform_init(rng, hidden_dim, 4 * hidden_dim, bound),
        );
        let mut bias = Array2::zeros((1, 4 * hidden_dim));
        for j in hidden_dim..2 * hidden_dim {
            bias[[0, j]] = 1.0;
        }
        let b = store.add(&format!("{prefix}.b"), bias);
        Self {
            wx,
            wh,
            b,
            input_dim,
            hidden_dim,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (NodeId, NodeId) {
        let h = g.constant(Array2::zeros((batch, self.hidden_dim)));
        let c = g.constant(Array2::zeros((batch, self.hidden_dim)));
        (h, c)
    }

    /// One step. With a `mask` column (`1.0` active, `0.0` finished) the
    /// state of finished rows is carried through unchanged.
    pub fn step(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        state: (NodeId, NodeId),
        mask: Option<NodeId>,
    ) -> (NodeId, NodeId) {
        let (h_prev, c_prev) = state;
        let hd = self.hidden_dim;
        let zx = g.matmul(x, bind.node(self.wx));
        let zh = g.matmul(h_prev, bind.node(self.wh));
        let z = g.add(zx, zh);
        let z = g.add_row(z, bind.node(self.b));
        let i_gate = g.slice_cols(z, 0, hd);
        let f_gate = g.slice_cols(z, hd, 2 * hd);
        let c_cand = g.slice_cols(z, 2 * hd, 3 * hd);
        let o_gate = g.slice_cols(z, 3 * hd, 4 * hd);
        let i_gate = g.sigmoid(i_gate);
        let f_gate = g.sigmoid(f_gate);
        let c_cand = g.tanh(c_cand);
        let o_gate = g.sigmoid(o_gate);
        let fc = g.mul(f_gate, c_prev);
        let ic = g.mul(i_gate, c_cand);
        let c_new = g.add(fc, ic);
        let ct = g.tanh(c_new);
        let h_new = g.mul(o_gate, ct);
        match mask {
            None => (h_new, c_new),
            Some(m) => {
                let keep = {
                    let ones = g.constant(Array2::ones(g.value(m).dim()));
                    g.sub(ones, m)
                };
                let h_m = g.mul_col(h_new, m);
                let h_k = g.mul_col(h_prev, keep);
                let c_m = g.mul_col(c_new, m);
                let c_k = g.mul_col(c_prev, keep);
                (g.add(h_m, h_k), g.add(c_m, c_k))
            }
        }
    }
}

/// Adam with bias correction. Moment buffers are addressed by `ParamId`,
/// so the optimizer state can be checkpointed alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| Array2::zeros(p.dim())).collect();
        let v = store.iter().map(|(_, p)| Array2::zeros(p.dim())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for id in 0..store.len() {
            let Some(grad) = grads.get(binding.node(id)) else {
                continue;
            };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            *m *= self.beta1;
            *m += &(grad * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(&(grad * grad) * (1.0 - self.beta2));
            let p = store.get_mut(id);
            for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_streams_are_reproducible_and_independent() {
        let mut a1 = rng_stream(7, "init", 0);
        let mut a2 = rng_stream(7, "init", 0);
        let mut b = rng_stream(7, "batch", 0);
        let xs1: Vec<f64> = (0..4).map(|_| a1.gen()).collect();
        let xs2: Vec<f64> = (0..4).map(|_| a2.gen()).collect();
        let ys: Vec<f64> = (0..4).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn digest_tracks_content() {
        let mut rng = rng_stream(3, "p", 0);
        let mut store = ParamStore::new();
        let w = store.add("w", uniform_init(&mut rng, 2, 3, 0.5));
        let d1 = store.content_digest();
        assert_eq!(d1, store.content_digest());
        store.get_mut(w)[[0, 0]] += 1e-12;
        assert_ne!(d1, store.content_digest());
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Array2::from_elem((1, 3), 4.0));
        let mut adam = Adam::new(0.1, &store);
        let loss_of = |store: &ParamStore| -> f64 {
            store.get(p).iter().map(|x| x * x).sum::<f64>()
        };
        let initial = loss_of(&store);
        for _ in 0..200 {
            let mut g = Graph::new();
            let bind = store.bind(&mut g, true);
            let sq = g.square(bind.node(p));
            let s = g.sum_rows(sq);
            let loss = g.mean_all(s);
            let grads = g.backward(loss);
            adam.step(&mut store, &bind, &grads);
        }
        assert!(loss_of(&store) < initial * 1e-3);
    }

    #[test]
    fn lstm_step_shapes_and_masking() {
        let mut rng = rng_stream(11, "lstm", 0);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut rng, "enc", 4, 6);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.constant(uniform_init(&mut rng, 3, 4, 1.0));
        let state = lstm.zero_state(&mut g, 3);
        let (h1, c1) = lstm.step(&mut g, &bind, x, state, None);
        assert_eq!(g.value(h1).dim(), (3, 6));

        // Row 1 is masked out: its state must stay exactly at (h1, c1).
        let mut mask = Array2::ones((3, 1));
        mask[[1, 0]] = 0.0;
        let m = g.constant(mask);
        let x2 = g.constant(uniform_init(&mut rng, 3, 4, 1.0));
        let (h2, c2) = lstm.step(&mut g, &bind, x2, (h1, c1), Some(m));
        for j in 0..6 {
            assert_eq!(g.value(h2)[[1, j]], g.value(h1)[[1, j]]);
            assert_eq!(g.value(c2)[[1, j]], g.value(c1)[[1, j]]);
            assert_ne!(g.value(h2)[[0, j]], g.value(h1)[[0, j]]);
        }
    }
}
