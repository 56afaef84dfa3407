//! Topological graph refinement.
//!
//! Each heatmap is a graph node whose features are its flattened pixels;
//! the collinear landmark pairs are the edges. Graph convolutions over the
//! normalized adjacency refine the heatmaps and feed the class head.

use std::collections::HashSet;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Node count and undirected edges (1-based landmark indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySpec {
    pub nodes: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self { nodes: 6, pairs: vec![(1, 2), (3, 4), (5, 6)] }
    }
}

impl TopologySpec {
    /// Pairs must be in range, non-degenerate and mutually disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &(a, b) in &self.pairs {
            if a == 0 || b == 0 || a > self.nodes || b > self.nodes || a == b {
                return Err(Error::Config(format!("invalid topology pair ({a}, {b}) for {} nodes", self.nodes)));
            }
            for v in [a, b] {
                if !seen.insert(v) {
                    return Err(Error::Config(format!("topology pairs overlap at node {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric 0/1 adjacency with zero diagonal.
pub fn build_adjacency<T: Element>(spec: &TopologySpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let k = spec.nodes;
    let mut a = Tensor::zeros(&[k, k]);
    for &(i, j) in &spec.pairs {
        a.data_mut()[(i - 1) * k + (j - 1)] = T::one();
        a.data_mut()[(j - 1) * k + (i - 1)] = T::one();
    }
    Ok(a)
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *a.shape() {
        [r, c] if r == c => r,
        _ => return Err(Error::dim(format!("adjacency must be square, got {:?}", a.shape()))),
    };
    let d = a.data();
    for i in 0..k {
        for j in 0..i {
            if d[i * k + j] != d[j * k + i] {
                return Err(Error::Contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let tilde = |i: usize, j: usize| d[i * k + j] + if i == j { T::one() } else { T::zero() };
    let degree: Vec<T> = (0..k).map(|i| (0..k).map(|j| tilde(i, j)).sum()).collect();
    // sqrt of the degree product keeps equal-degree graphs exact
    Ok(Tensor::from_fn(&[k, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        tilde(i, j) / (degree[i] * degree[j]).sqrt()
    }))
}

/// Flattens a `k x h x w` heatmap stack to `k x (h*w)` node features.
pub fn build_node_features<T: Element>(tape: &mut Tape<T>, heatmaps: Var, k: usize) -> Result<Var> {
    match *tape.shape(heatmaps) {
        [c, h, w] if c == k => tape.reshape(heatmaps, &[k, h * w]),
        ref s => Err(Error::dim(format!("expected a {k} x h x w heatmap stack, got {s:?}"))),
    }
}

/// Inverse of [`build_node_features`].
pub fn unflatten_nodes<T: Element>(tape: &mut Tape<T>, g: Var, h: usize, w: usize) -> Result<Var> {
    let k = tape.shape(g)[0];
    tape.reshape(g, &[k, h, w])
}

/// `Â G W` without activation.
pub fn gcn_propagate<T: Element>(tape: &mut Tape<T>, g: Var, a_hat: Var, w: Var) -> Result<Var> {
    let mixed = tape.matmul(a_hat, g)?;
    tape.matmul(mixed, w)
}

/// `relu(Â G W)`; node count and feature width are preserved when `W` is square.
pub fn gcn_layer<T: Element>(tape: &mut Tape<T>, g: Var, a_hat: Var, w: Var) -> Result<Var> {
    let z = gcn_propagate(tape, g, a_hat, w)?;
    Ok(tape.relu(z))
}

/// Sigmoid of the node rows reshaped to `k x h x w`.
pub fn refine_heatmaps<T: Element>(tape: &mut Tape<T>, g_last: Var, h: usize, w: usize) -> Result<Var> {
    let maps = unflatten_nodes(tape, g_last, h, w)?;
    Ok(tape.sigmoid(maps))
}

/// Per-node projection `d -> d_m -> d_c` then mean over nodes.
/// `w0` is `d_m x d`, `w1` is `d_c x d_m`; returns a `d_c`-vector of logits.
pub fn classify<T: Element>(tape: &mut Tape<T>, g_last: Var, w0: Var, w1: Var) -> Result<Var> {
    let hidden = tape.matmul_nt(g_last, w0)?;
    let out = tape.matmul_nt(hidden, w1)?;
    let k = tape.shape(out)[0];
    let summed = tape.sum_axis(out, 0)?;
    Ok(tape.scale(summed, T::of(1.0 / k as f64)))
}

/// Hyperparameters of the graph subnetwork.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TgcnConfig {
    pub layers: usize,
    pub class_hidden: usize,
    pub topology: TopologySpec,
}

impl Default for TgcnConfig {
    fn default() -> Self {
        Self { layers: 2, class_hidden: 64, topology: TopologySpec::default() }
    }
}

/// Graph refinement and class head.
#[derive(Debug, Clone)]
pub struct Tgcn {
    a_hat: Tensor<f64>,
    pub layers: Vec<ParamId>,
    pub w0: ParamId,
    pub w1: ParamId,
    height: usize,
    width: usize,
}

/// Outputs of one graph pass.
#[derive(Debug, Clone, Copy)]
pub struct TgcnOutput {
    /// Final node features `k x d` (linear last layer).
    pub nodes: Var,
    /// Refined heatmaps `k x h x w`.
    pub refined: Var,
    /// Scalar abnormality logit.
    pub logit: Var,
}

impl Tgcn {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        config: &TgcnConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if config.layers == 0 || config.class_hidden == 0 {
            return Err(Error::Config("graph layers and class width must be positive".into()));
        }
        let a_hat = normalize_adjacency(&build_adjacency::<f64>(&config.topology)?)?;
        let d = height * width;
        let layers = (0..config.layers)
            .map(|l| store.add(format!("tgcn.layer{l}.weight"), init.xavier(&[d, d], d, d)))
            .collect();
        let dm = config.class_hidden;
        let w0 = store.add("tgcn.class0.weight", init.xavier(&[dm, d], d, dm));
        let w1 = store.add("tgcn.class1.weight", init.xavier(&[1, dm], dm, 1));
        Ok(Self { a_hat, layers, w0, w1, height, width })
    }

    pub fn nodes(&self) -> usize {
        self.a_hat.shape()[0]
    }

    /// Node features are the ICF heatmaps; the last layer is linear and its
    /// output is added to the ICF logits before the refining sigmoid.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        icf_logits: Var,
        icf_heatmaps: Var,
    ) -> Result<TgcnOutput> {
        let k = self.nodes();
        let a_hat = tape.constant(self.a_hat.cast());
        let mut g = build_node_features(tape, icf_heatmaps, k)?;
        let last = self.layers.len() - 1;
        for (l, &w) in self.layers.iter().enumerate() {
            g = if l < last {
                gcn_layer(tape, g, a_hat, p.var(w))?
            } else {
                gcn_propagate(tape, g, a_hat, p.var(w))?
            };
        }
        let base = build_node_features(tape, icf_logits, k)?;
        let residual = tape.add(base, g)?;
        let refined = refine_heatmaps(tape, residual, self.height, self.width)?;
        let logit = classify(tape, g, p.var(self.w0), p.var(self.w1))?;
        Ok(TgcnOutput { nodes: g, refined, logit })
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracles index like the formulas they mirror
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn default_adjacency_has_six_entries() {
        let a = build_adjacency::<f64>(&TopologySpec::default()).unwrap();
        let mut expect = [0.0; 36];
        for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2), (4, 5), (5, 4)] {
            expect[i * 6 + j] = 1.0;
        }
        assert_eq!(a.data(), &expect);
        for i in 0..6 {
            assert_eq!((0..6).map(|j| a.at(&[i, j])).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn overlapping_pairs_are_rejected() {
        let spec = TopologySpec { nodes: 6, pairs: vec![(1, 2), (2, 3)] };
        assert!(matches!(build_adjacency::<f32>(&spec), Err(Error::Config(_))));
        let spec = TopologySpec { nodes: 6, pairs: vec![(1, 7)] };
        assert!(matches!(build_adjacency::<f32>(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_default_zero_and_random() {
        let a = build_adjacency::<f64>(&TopologySpec::default()).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j || i / 2 == j / 2 { 0.5 } else { 0.0 };
                assert_eq!(n.at(&[i, j]), expect);
            }
        }
        let eye = normalize_adjacency(&Tensor::<f64>::zeros(&[4, 4])).unwrap();
        assert_eq!(eye.data(), Tensor::from_fn(&[4, 4], |k| if k % 5 == 0 { 1.0 } else { 0.0 }).data());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..i {
                let v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let t = Tensor::new(vec![4, 4], a.iter().flatten().copied().collect()).unwrap();
        let n = normalize_adjacency(&t).unwrap();
        let deg: Vec<f64> = (0..4).map(|i| 1.0 + a[i].iter().sum::<f64>()).collect();
        for i in 0..4 {
            for j in 0..4 {
                let at = a[i][j] + if i == j { 1.0 } else { 0.0 };
                let expect = at / (deg[i].sqrt() * deg[j].sqrt());
                assert!((n.at(&[i, j]) - expect).abs() < 1e-7);
            }
        }
    }

    fn layer(g: &Tensor<f64>, a: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (g, a, w) = (tape.constant(g.clone()), tape.constant(a.clone()), tape.constant(w.clone()));
        let out = gcn_layer(&mut tape, g, a, w).unwrap();
        tape.tensor(out)
    }

    #[test]
    fn gcn_identity_and_pair_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Tensor::from_fn(&[6, 5], |_| rng.gen_range(0.0..1.0));
        let eye = |n: usize| Tensor::from_fn(&[n, n], |k| if k % (n + 1) == 0 { 1.0 } else { 0.0 });
        assert_eq!(layer(&g, &eye(6), &eye(5)).data(), g.data());

        let a_hat = normalize_adjacency(&build_adjacency(&TopologySpec::default()).unwrap()).unwrap();
        let mut tape = Tape::new();
        let (gv, av, wv) = (tape.constant(g.clone()), tape.constant(a_hat), tape.constant(eye(5)));
        let pre = gcn_propagate(&mut tape, gv, av, wv).unwrap();
        for c in 0..5 {
            let expect = (g.at(&[0, c]) + g.at(&[1, c])) / 2.0;
            assert!((tape.value(pre)[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_hat = normalize_adjacency(&build_adjacency(&TopologySpec::default()).unwrap()).unwrap();
        let g = rand_tensor(&mut rng, &[6, 8]);
        let w = rand_tensor(&mut rng, &[8, 8]);
        let base = layer(&g, &a_hat, &w);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let pg = Tensor::from_fn(&[6, 8], |k| g.at(&[perm[k / 8], k % 8]));
            let pa = Tensor::from_fn(&[6, 6], |k| a_hat.at(&[perm[k / 6], perm[k % 6]]));
            let out = layer(&pg, &pa, &w);
            let expect = Tensor::from_fn(&[6, 8], |k| base.at(&[perm[k / 8], k % 8]));
            assert!(out.max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn node_features_round_trip() {
        let mut tape = Tape::<f64>::new();
        let stack = Tensor::from_fn(&[6, 4, 4], |k| if k < 16 { 1.0 } else { 0.0 });
        let h = tape.constant(stack.clone());
        let g = build_node_features(&mut tape, h, 6).unwrap();
        assert_eq!(tape.shape(g), &[6, 16]);
        assert!(tape.value(g)[..16].iter().all(|&v| v == 1.0));
        assert!(tape.value(g)[16..].iter().all(|&v| v == 0.0));
        let back = unflatten_nodes(&mut tape, g, 4, 4).unwrap();
        assert_eq!(tape.tensor(back).data(), stack.data());
        let bad = tape.constant(Tensor::zeros(&[5, 4, 4]));
        assert!(matches!(build_node_features(&mut tape, bad, 6), Err(Error::Dimension(_))));
    }

    #[test]
    fn refine_zero_weights_and_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = rand_tensor(&mut rng, &[6, 16]);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let a = tape.constant(normalize_adjacency(&build_adjacency(&TopologySpec::default()).unwrap()).unwrap());
        let zero = tape.constant(Tensor::zeros(&[16, 16]));
        let out = gcn_layer(&mut tape, gv, a, zero).unwrap();
        let refined = refine_heatmaps(&mut tape, out, 4, 4).unwrap();
        assert_eq!(tape.shape(refined), &[6, 4, 4]);
        assert!(tape.value(refined).iter().all(|&v| v == 0.5));

        let eye_k = tape.constant(Tensor::from_fn(&[6, 6], |k| if k % 7 == 0 { 1.0 } else { 0.0 }));
        let eye_d = tape.constant(Tensor::from_fn(&[16, 16], |k| if k % 17 == 0 { 1.0 } else { 0.0 }));
        let out = gcn_layer(&mut tape, gv, eye_k, eye_d).unwrap();
        let refined = refine_heatmaps(&mut tape, out, 4, 4).unwrap();
        for (r, &x) in tape.value(refined).iter().zip(g.data()) {
            let expect = 1.0 / (1.0 + (-x.max(0.0)).exp());
            assert!((r - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = rand_tensor(&mut rng, &[6, 8]);
        let w0 = rand_tensor(&mut rng, &[4, 8]);
        let w1 = rand_tensor(&mut rng, &[1, 4]);
        let mut tape = Tape::new();
        let (gv, w0v, w1v) = (tape.constant(g.clone()), tape.constant(w0.clone()), tape.constant(w1.clone()));
        let logit = classify(&mut tape, gv, w0v, w1v).unwrap();
        let mut expect = 0.0;
        for k in 0..6 {
            for m in 0..4 {
                let h: f64 = (0..8).map(|t| g.at(&[k, t]) * w0.at(&[m, t])).sum();
                expect += h * w1.at(&[0, m]);
            }
        }
        expect /= 6.0;
        assert!((tape.scalar_value(logit) - expect).abs() < 1e-6);

        let z = tape.constant(Tensor::zeros(&[4, 8]));
        let logit = classify(&mut tape, gv, z, w1v).unwrap();
        assert_eq!(tape.scalar_value(logit), 0.0);

        let row = rand_tensor(&mut rng, &[1, 8]);
        let same = Tensor::from_fn(&[6, 8], |k| row.data()[k % 8]);
        let (sv, rv) = (tape.constant(same), tape.constant(row));
        let pooled = classify(&mut tape, sv, w0v, w1v).unwrap();
        let single = classify(&mut tape, rv, w0v, w1v).unwrap();
        assert!((tape.scalar_value(pooled) - tape.scalar_value(single)).abs() < 1e-12);
    }
}
