//! Discrete bottleneck: nearest-neighbor codebook with EMA updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform, Graph, ShapeError, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub decay: f64,
    pub eps: f64,
    pub beta: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { decay: 0.99, eps: 1e-5, beta: 0.25 }
    }
}

/// `K x D` code table maintained by exponential moving averages, never by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub config: VqConfig,
    embeddings: Tensor<T>,
    ema_counts: Vec<T>,
    ema_sums: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    /// Rows uniform in `[-1/K, 1/K]`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, config: VqConfig) -> Self {
        assert!(k >= 2, "a codebook needs at least two codes");
        let embeddings = uniform(rng, k, d, 1.0 / k as f64);
        Codebook { config, ema_counts: vec![T::zero(); k], ema_sums: Tensor::zeros(k, d), embeddings }
    }

    pub fn from_parts(config: VqConfig, embeddings: Tensor<T>, ema_counts: Vec<T>, ema_sums: Tensor<T>) -> Result<Self, ShapeError> {
        let (k, d) = (embeddings.rows(), embeddings.cols());
        if k < 2 || ema_counts.len() != k || ema_sums.rows() != k || ema_sums.cols() != d {
            return Err(ShapeError(format!(
                "codebook parts disagree: {k}x{d} embeddings, {} counts, {:?} sums",
                ema_counts.len(),
                ema_sums.shape()
            )));
        }
        Ok(Codebook { config, embeddings, ema_counts, ema_sums })
    }

    pub fn k(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn d(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn ema_counts(&self) -> &[T] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Tensor<T> {
        &self.ema_sums
    }

    pub fn row(&self, k: usize) -> &[T] {
        self.embeddings.row(k)
    }

    /// Nearest row by Euclidean distance; ties go to the lowest index.
    pub fn quantize(&self, e: &[T]) -> (usize, &[T]) {
        assert_eq!(e.len(), self.d(), "vector width does not match the codebook");
        let mut best = (0, T::infinity());
        for k in 0..self.k() {
            let dist: T = self.row(k).iter().zip(e).map(|(&c, &x)| (c - x) * (c - x)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        (best.0, self.row(best.0))
    }

    /// Quantizes each row; returns the ids and the stacked code rows.
    pub fn quantize_rows(&self, e: &Tensor<T>) -> (Vec<usize>, Tensor<T>) {
        let mut ids = Vec::with_capacity(e.rows());
        let mut data = Vec::with_capacity(e.len());
        for r in 0..e.rows() {
            let (k, c) = self.quantize(e.row(r));
            ids.push(k);
            data.extend_from_slice(c);
        }
        (ids, Tensor::from_rows(e.rows(), self.d(), data))
    }

    /// Code rows for the given ids.
    pub fn lookup(&self, ids: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ids.len() * self.d());
        for &k in ids {
            data.extend_from_slice(self.row(k));
        }
        Tensor::from_rows(ids.len(), self.d(), data)
    }

    /// Quantized rows of `e` in the forward pass, gradient copied straight to `e`.
    pub fn straight_through(&self, g: &mut Graph<T>, e: Var) -> (Var, Vec<usize>) {
        let (ids, q) = self.quantize_rows(g.value(e));
        (g.straight_through(e, q), ids)
    }

    /// `beta` times the mean over rows of the squared distance to the stopped code rows.
    pub fn commitment_loss(&self, g: &mut Graph<T>, e: Var, ids: &[usize]) -> Var {
        let rows = g.value(e).rows();
        assert!(rows > 0 && rows == ids.len(), "commitment loss needs one id per row");
        let c = g.constant(self.lookup(ids));
        let diff = g.sub(e, c);
        let sq = g.sum_squares(diff);
        g.scale(sq, T::of(self.config.beta / rows as f64))
    }

    /// `probs (S x K) * codebook`; the codebook enters as a constant.
    pub fn soft_mix(&self, g: &mut Graph<T>, probs: Var) -> Var {
        assert_eq!(g.value(probs).cols(), self.k(), "soft_mix needs one probability per code");
        let c = g.constant(self.embeddings.clone());
        g.matmul(probs, c)
    }

    /// One EMA step from encoder rows `e` and their assigned ids. Rows that have never
    /// been assigned keep their initial value.
    pub fn ema_update(&mut self, e: &Tensor<T>, ids: &[usize]) {
        assert_eq!(e.rows(), ids.len(), "one id per encoded row");
        if ids.is_empty() {
            return;
        }
        let (k, d) = (self.k(), self.d());
        let gamma = T::of(self.config.decay);
        let rest = T::one() - gamma;
        let mut counts = vec![T::zero(); k];
        let mut sums = vec![T::zero(); k * d];
        for (r, &id) in ids.iter().enumerate() {
            counts[id] += T::one();
            for (s, &x) in sums[id * d..(id + 1) * d].iter_mut().zip(e.row(r)) {
                *s += x;
            }
        }
        let eps = T::of(self.config.eps);
        for j in 0..k {
            self.ema_counts[j] = gamma * self.ema_counts[j] + rest * counts[j];
            let acc = self.ema_sums.row_mut(j);
            for (a, &s) in acc.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *a = gamma * *a + rest * s;
            }
            if self.ema_counts[j] >= eps {
                let n = self.ema_counts[j];
                let sum_row = self.ema_sums.row(j).to_vec();
                for (c, s) in self.embeddings.row_mut(j).iter_mut().zip(sum_row) {
                    *c = s / n;
                }
            }
        }
    }
}

/// Shannon entropy (nats) of the code usage histogram.
pub fn usage_entropy(ids: &[usize], k: usize) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &i in ids {
        counts[i] += 1;
    }
    let n = ids.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f64]]) -> Codebook<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let k = rows.len();
        Codebook::from_parts(VqConfig::default(), Tensor::from_rows(k, d, data), vec![0.0; k], Tensor::zeros(k, d)).unwrap()
    }

    #[test]
    fn nearest_neighbor_and_ties() {
        let c = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(c.quantize(&[0.9, 0.8]).0, 1);
        assert_eq!(c.quantize(&[0.5, 0.5]).0, 0);
        let c = book(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.0], &[3.0, -1.0]]);
        let (k, row) = c.quantize(&[3.0, -1.0]);
        assert_eq!((k, row), (3, &[3.0, -1.0][..]));
    }

    #[test]
    fn init_is_small() {
        let c = Codebook::<f64>::new(&mut ChaCha8Rng::seed_from_u64(0), 10, 16, VqConfig::default());
        assert!(c.embeddings().data().iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let c = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let mut g = Graph::new();
        let e = g.variable(Tensor::from_f64(2, 2, &[0.9, 0.8, -0.1, 0.2]));
        let (q, ids) = c.straight_through(&mut g, e);
        assert_eq!(ids, vec![1, 0]);
        assert_eq!(g.value(q).data(), &[1.0, 1.0, 0.0, 0.0]);
        let w = g.constant(Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.mul(q, w);
        let s = g.sum_squares(y);
        let grads = g.backward(s);
        // d/dq of sum (q*w)^2 is 2 q w^2, passed to e unchanged.
        assert_eq!(grads.get(e).unwrap().data(), &[2.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_matches_finite_differences_with_frozen_cell() {
        use crate::nn::{analytic_grads, compare_numeric, CheckConfig, ParamId, ParamStore};
        let c = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let mut store = ParamStore::new();
        let e0 = Tensor::from_f64(2, 2, &[0.9, 0.8, -0.1, 0.2]);
        store.add("e", e0.clone());
        let (_, frozen) = c.quantize_rows(&e0);
        let w = Tensor::from_f64(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let head = |g: &mut Graph<f64>, q: Var| {
            let wv = g.constant(w.clone());
            let y = g.mul(q, wv);
            g.sum_squares(y)
        };
        let mut through = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let e = g.param(s, ParamId(0));
            let (q, _) = c.straight_through(g, e);
            head(g, q)
        };
        // Holding the cell fixed, the quantizer acts as e + (c - e0).
        let offset = Tensor::from_rows(2, 2, frozen.data().iter().zip(e0.data()).map(|(a, b)| a - b).collect());
        let mut frozen_cell = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let e = g.param(s, ParamId(0));
            let o = g.constant(offset.clone());
            let q = g.add(e, o);
            head(g, q)
        };
        let grads = analytic_grads(&mut store, &mut through);
        let err = compare_numeric(&mut store, &mut frozen_cell, &grads, CheckConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn ema_finds_two_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = Codebook::<f64>::new(&mut rng, 2, 4, VqConfig::default());
        // Centers placed along the line through the two initial rows so each row owns one.
        let mid: Vec<f64> = (0..4).map(|j| (c.row(0)[j] + c.row(1)[j]) / 2.0).collect();
        let dir: Vec<f64> = (0..4).map(|j| c.row(1)[j] - c.row(0)[j]).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let centers: Vec<Vec<f64>> = [-3.0, 3.0].iter().map(|s| (0..4).map(|j| mid[j] + s * dir[j] / norm).collect()).collect();
        for _ in 0..500 {
            let mut data = Vec::new();
            for center in &centers {
                for _ in 0..16 {
                    data.extend(center.iter().map(|&m| m + rng.gen_range(-0.1..0.1)));
                }
            }
            let e = Tensor::from_rows(32, 4, data);
            let (ids, _) = c.quantize_rows(&e);
            c.ema_update(&e, &ids);
        }
        for (k, center) in centers.iter().enumerate() {
            for j in 0..4 {
                assert!((c.row(k)[j] - center[j]).abs() < 1e-2, "row {k}: {:?} vs {center:?}", c.row(k));
            }
        }
    }

    #[test]
    fn commitment_cases() {
        let c = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let mut g = Graph::new();
        let on = g.variable(Tensor::from_f64(1, 2, &[1.0, 1.0]));
        let l = c.commitment_loss(&mut g, on, &[1]);
        assert_eq!(g.value(l).item(), 0.0);
        let off = g.variable(Tensor::from_f64(1, 2, &[0.3, 0.4]));
        let l = c.commitment_loss(&mut g, off, &[0]);
        assert!((g.value(l).item() - 0.25 * 0.25).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Codebook::<f64>::new(&mut rng, 5, 3, VqConfig::default());
        let e = uniform::<f64, _>(&mut rng, 7, 3, 0.3);
        let (ids, _) = cb.quantize_rows(&e);
        let ev = g.variable(e.clone());
        let l = cb.commitment_loss(&mut g, ev, &ids);
        let mut want = 0.0;
        for r in 0..7 {
            for j in 0..3 {
                want += (e.get(r, j) - cb.row(ids[r])[j]).powi(2);
            }
        }
        assert!((g.value(l).item() - 0.25 * want / 7.0).abs() < 1e-6);
        let grads = g.backward(l);
        assert!(grads.get(ev).is_some());
    }

    #[test]
    fn ema_converges_to_repeated_vector() {
        let mut c = Codebook::<f64>::new(&mut ChaCha8Rng::seed_from_u64(1), 4, 3, VqConfig::default());
        let v = Tensor::from_f64(1, 3, &[0.7, -1.2, 2.0]);
        let mut k = 0;
        for _ in 0..500 {
            let (ids, _) = c.quantize_rows(&v);
            k = ids[0];
            c.ema_update(&v, &ids);
        }
        assert!(c.row(k).iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let mut c = Codebook::<f64>::new(&mut ChaCha8Rng::seed_from_u64(1), 4, 3, VqConfig::default());
        let before = c.clone();
        c.ema_update(&Tensor::zeros(0, 3), &[]);
        assert_eq!(c, before);
    }

    #[test]
    fn ema_matches_formula_for_assigned_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Codebook::<f64>::new(&mut rng, 3, 2, VqConfig::default());
        for _ in 0..20 {
            let e = uniform::<f64, _>(&mut rng, 6, 2, 1.0);
            let (ids, _) = c.quantize_rows(&e);
            c.ema_update(&e, &ids);
            for k in 0..3 {
                if c.ema_counts()[k] >= 1e-5 {
                    for j in 0..2 {
                        assert!((c.row(k)[j] - c.ema_sums().get(k, j) / c.ema_counts()[k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn soft_mix_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Codebook::<f64>::new(&mut rng, 4, 3, VqConfig::default());
        let mut g = Graph::new();
        let onehot = g.constant(Tensor::from_f64(2, 4, &[0., 0., 1., 0., 1., 0., 0., 0.]));
        let mixed = c.soft_mix(&mut g, onehot);
        assert_eq!(g.value(mixed), &c.lookup(&[2, 0]));
        let uni = g.constant(Tensor::filled(1, 4, 0.25));
        let mean = c.soft_mix(&mut g, uni);
        for j in 0..3 {
            let want: f64 = (0..4).map(|k| c.row(k)[j]).sum::<f64>() / 4.0;
            assert!((g.value(mean).data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_of_usage() {
        assert_eq!(usage_entropy(&[1, 1, 1], 4), 0.0);
        assert!((usage_entropy(&[0, 1, 2, 3], 4) - 4f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantized_rows_are_codebook_rows(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Codebook::<f32>::new(&mut rng, 6, 4, VqConfig::default());
            let e = uniform::<f32, _>(&mut rng, n, 4, 2.0);
            let (ids, q) = c.quantize_rows(&e);
            for (r, &k) in ids.iter().enumerate() {
                prop_assert_eq!(q.row(r), c.row(k));
                let best = (0..6).map(|j| c.row(j).iter().zip(e.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
                    .fold(f32::INFINITY, f32::min);
                let got: f32 = c.row(k).iter().zip(e.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                prop_assert_eq!(got, best);
            }
        }

        #[test]
        fn soft_mix_one_hot_equals_lookup(seed in 0u64..1000, k in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Codebook::<f32>::new(&mut rng, 6, 5, VqConfig::default());
            let mut p = Tensor::zeros(1, 6);
            p.data_mut()[k] = 1.0;
            let mut g = Graph::new();
            let pv = g.constant(p);
            let m = c.soft_mix(&mut g, pv);
            prop_assert_eq!(g.value(m), &c.lookup(&[k]));
        }
    }
}
