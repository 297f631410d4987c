//! Transformer building blocks over stacked sequences.
//!
//! Every layer works on a matrix whose rows are the positions of one or more
//! sequences laid end to end; masks keep the sequences apart.

use rand::Rng;

use super::{glorot, uniform, Graph, Mask, ParamId, ParamStore, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, d_out)));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, d, T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, d));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        mask: &Mask,
    ) -> Var {
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let a = g.attention(q, k, v, self.heads, mask);
        self.o.forward(g, store, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm residual layer: self-attention, optional cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Shapes shared by every layer of a stack.
#[derive(Debug, Clone, Copy)]
pub struct LayerDims {
    pub d: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: LayerDims,
        cross: bool,
    ) -> Self {
        let LayerDims { d, hidden, heads } = dims;
        TransformerLayer {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads),
            cross: cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.norm_cross"), d),
                    MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
                )
            }),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        self_mask: &Mask,
        memory: Option<(Var, &Mask)>,
    ) -> Var {
        let h = self.norm_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, self_mask);
        let mut x = g.add(x, a);
        if let Some((norm, attn)) = &self.cross {
            let (mem, mask) = memory.expect("cross-attention layer needs a memory");
            let h = norm.forward(g, store, x);
            let a = attn.forward(g, store, h, mem, mask);
            x = g.add(x, a);
        }
        let h = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        g.add(x, f)
    }
}

/// Layers followed by a final norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

impl TransformerStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: LayerDims,
        n_layers: usize,
        cross: bool,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| TransformerLayer::new(store, rng, &format!("{name}.{i}"), dims, cross))
            .collect();
        TransformerStack { layers, norm: LayerNorm::new(store, &format!("{name}.norm"), dims.d) }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        self_mask: &Mask,
        memory: Option<(Var, &Mask)>,
    ) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, store, x, self_mask, memory);
        }
        self.norm.forward(g, store, x)
    }
}

/// Strided 1-D convolution applied independently to each stacked segment.
#[derive(Debug, Clone)]
pub struct Conv1d {
    proj: Linear,
    kernel: usize,
    stride: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        Conv1d { proj: Linear::new(store, rng, name, kernel * d, d, true), kernel, stride }
    }

    pub fn out_len(&self, len: usize) -> usize {
        super::conv_out_len(len, self.kernel, self.stride, self.kernel / 2)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, lens: &[usize]) -> Var {
        let cols = g.im2col(x, lens, self.kernel, self.stride, self.kernel / 2);
        self.proj.forward(g, store, cols)
    }
}

/// Embedding table scaled by `sqrt(d)` on lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    d: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        n: usize,
        d: usize,
    ) -> Self {
        let table = store.add(name.to_string(), uniform(rng, n, d, (3.0 / d as f64).sqrt()));
        Embedding { table, d }
    }

    pub fn id(&self) -> ParamId {
        self.table
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let table = g.param(store, self.table);
        let rows = g.gather(table, ids);
        g.scale(rows, T::of((self.d as f64).sqrt()))
    }
}

/// Sinusoidal position codes for stacked segments; positions restart at 0 in each.
pub fn positions<T: Scalar>(lens: &[usize], d: usize) -> Tensor<T> {
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    for &n in lens {
        for pos in 0..n {
            for c in 0..d {
                let rate = 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
                let angle = pos as f64 / rate;
                data.push(T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
    }
    Tensor::from_rows(total, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positions_restart_per_segment() {
        let p = positions::<f64>(&[3, 2], 8);
        assert_eq!(p.rows(), 5);
        assert_eq!(p.row(0), p.row(3));
        assert_eq!(p.row(1), p.row(4));
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), 1.0);
    }

    #[test]
    fn conv_halves_each_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv1d::new(&mut store, &mut rng, "c", 4, 3, 2);
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, 11, 4, 1.0));
        let y = conv.forward(&mut g, &store, x, &[10, 1]);
        assert_eq!(g.value(y).rows(), 5 + 1);
        assert_eq!(conv.out_len(10), 5);
        assert_eq!(conv.out_len(1), 1);
    }
}
