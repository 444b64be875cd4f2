//! Graph structural feature extraction: stacked graph convolutions over a
//! labeled subgraph followed by SortPooling to a fixed `K x d` matrix.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, SparseMatrix, Tape, Tensor, Var};

/// Dense `D^-1/2 (A + I) D^-1/2` for a symmetric 0/1 adjacency with zero diagonal.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let n = adjacency.rows();
    if adjacency.shape() != [n, n] {
        return Err(Error::Shape { op: "normalize_adjacency", left: adjacency.shape().to_vec(), right: vec![n, n] });
    }
    for i in 0..n {
        if adjacency.get(i, i) != 0.0 {
            return Err(Error::Contract(format!("adjacency has a self-loop at {i}")));
        }
        for j in i + 1..n {
            if adjacency.get(i, j) != adjacency.get(j, i) {
                return Err(Error::Contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + adjacency.row(i).iter().sum::<f64>()).sqrt())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let a_hat = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, inv_sqrt[i] * a_hat * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// Sparse `D^-1/2 (A + I) D^-1/2` from local neighbor lists.
pub fn normalized_adjacency(adjacency: &[Vec<usize>]) -> SparseMatrix {
    let n = adjacency.len();
    let inv_sqrt: Vec<f64> = adjacency.iter().map(|ns| 1.0 / ((ns.len() + 1) as f64).sqrt()).collect();
    let rows = adjacency
        .iter()
        .enumerate()
        .map(|(i, ns)| {
            let mut row: Vec<(usize, f64)> = ns.iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])).collect();
            row.push((i, inv_sqrt[i] * inv_sqrt[i]));
            row.sort_unstable_by_key(|&(j, _)| j);
            row
        })
        .collect();
    SparseMatrix::from_rows(n, rows).expect("neighbor indices are local")
}

/// One graph convolution `relu(A_norm X W)`.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayer {
    pub weight: ParamId,
}

impl GcnLayer {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, a_norm: &Arc<SparseMatrix>) -> Result<Var> {
        let w = tape.param(self.weight);
        let xw = tape.matmul(x, w)?;
        let agg = tape.sparse_matmul(a_norm.clone(), xw)?;
        tape.relu(agg)
    }
}

/// Runs the layers in sequence and concatenates every layer's output along
/// the feature axis.
pub fn stack_layers(tape: &mut Tape<'_>, x: Var, a_norm: &Arc<SparseMatrix>, layers: &[GcnLayer]) -> Result<Var> {
    let mut outputs = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers {
        h = layer.forward(tape, h, a_norm)?;
        outputs.push(h);
    }
    tape.concat_cols(&outputs)
}

/// SortPooling readout with a learned scoring projection.
#[derive(Debug, Clone, Copy)]
pub struct SortPool {
    pub k: usize,
    /// `d x 1` scoring projection.
    pub scorer: ParamId,
}

/// Node order by descending score, ties broken by ascending index.
pub fn sort_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

impl SortPool {
    /// Scores nodes with `sigmoid(A_norm H W1)`, keeps the top `k` rows of
    /// `H` in score order (each scaled by its score) and zero-pads to `k`
    /// rows. The order itself is a constant for differentiation.
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, a_norm: &Arc<SparseMatrix>) -> Result<Var> {
        let w1 = tape.param(self.scorer);
        let hw = tape.matmul(h, w1)?;
        let agg = tape.sparse_matmul(a_norm.clone(), hw)?;
        let scores = tape.sigmoid(agg)?;

        let order = sort_order(tape.value(scores).data());
        tape.note_branch(order.iter().map(|&i| i as u64));
        let rows: Vec<Option<usize>> = (0..self.k).map(|r| order.get(r).copied()).collect();

        let top = tape.gather_rows(h, rows.clone())?;
        let top_scores = tape.gather_rows(scores, rows)?;
        tape.scale_rows(top, top_scores)
    }
}

/// Smallest `K` such that at least `ceil(rate * M)` of the `M` sizes are
/// `>= K`, i.e. the `ceil(rate * M)`-th largest size, never below 2.
pub fn determine_k(sizes: &[usize], rate: f64) -> Result<usize> {
    if sizes.is_empty() {
        return Err(Error::Config("no subgraph sizes to derive K from".into()));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("sortpool rate must be in (0, 1], got {rate}")));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let rank = ((rate * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1].max(2))
}

/// Full per-snapshot encoder: features -> GCN stack -> SortPooling.
#[derive(Debug, Clone)]
pub struct Gsfe {
    pub layers: Vec<GcnLayer>,
    pub pool: SortPool,
}

impl Gsfe {
    /// Encodes one subgraph given its one-hot node features and local
    /// adjacency. Returns a `k x d` feature.
    pub fn forward(&self, tape: &mut Tape<'_>, features: Tensor, adjacency: &[Vec<usize>]) -> Result<Var> {
        if features.rows() != adjacency.len() {
            return Err(Error::Shape {
                op: "gsfe",
                left: features.shape().to_vec(),
                right: vec![adjacency.len(), adjacency.len()],
            });
        }
        let a_norm = Arc::new(normalized_adjacency(adjacency));
        let x = tape.constant(features);
        let h = stack_layers(tape, x, &a_norm, &self.layers)?;
        self.pool.forward(tape, h, &a_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::ParamStore;

    fn approx(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        approx(normalize_adjacency(&Tensor::zeros(&[1, 1])).unwrap().data(), &[1.0]);
        let edge = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        approx(normalize_adjacency(&edge).unwrap().data(), &[0.5; 4]);
        let tri = Tensor::from_rows(&[vec![0., 1., 1.], vec![1., 0., 1.], vec![1., 1., 0.]]).unwrap();
        approx(normalize_adjacency(&tri).unwrap().data(), &[1.0 / 3.0; 9]);
        let asym = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_adjacency(&asym), Err(Error::Contract(_))));
    }

    #[test]
    fn sparse_matches_dense() {
        let adj = vec![vec![1, 2], vec![0], vec![0, 3], vec![2], vec![]];
        let mut dense = Tensor::zeros(&[5, 5]);
        for (i, ns) in adj.iter().enumerate() {
            for &j in ns {
                dense.set(i, j, 1.0);
            }
        }
        approx(normalized_adjacency(&adj).to_dense().data(), normalize_adjacency(&dense).unwrap().data());
    }

    fn identity_layer(store: &mut ParamStore, n: usize) -> GcnLayer {
        GcnLayer { weight: store.add("w", Tensor::identity(n)) }
    }

    #[test]
    fn gcn_examples() {
        let mut store = ParamStore::new();
        let layer = identity_layer(&mut store, 2);
        let zero = GcnLayer { weight: store.add("z", Tensor::zeros(&[2, 2])) };

        let mut tape = Tape::new(&store);
        let single = Arc::new(normalized_adjacency(&[vec![]]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let out = layer.forward(&mut tape, x, &single).unwrap();
        approx(tape.value(out).data(), &[1.0, 0.0]);

        let pair = Arc::new(normalized_adjacency(&[vec![1], vec![0]]));
        let x = tape.constant(Tensor::identity(2));
        let out = layer.forward(&mut tape, x, &pair).unwrap();
        approx(tape.value(out).data(), &[0.5; 4]);

        let out = zero.forward(&mut tape, x, &pair).unwrap();
        approx(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn stack_of_zero_layers_is_zero() {
        let mut store = ParamStore::new();
        let layers = [
            GcnLayer { weight: store.add("0", Tensor::zeros(&[4, 32])) },
            GcnLayer { weight: store.add("1", Tensor::zeros(&[32, 32])) },
            GcnLayer { weight: store.add("2", Tensor::zeros(&[32, 32])) },
        ];
        let mut tape = Tape::new(&store);
        let a = Arc::new(normalized_adjacency(&[vec![1], vec![0], vec![]]));
        let x = tape.constant(Tensor::identity(3).matmul(&Tensor::filled(&[3, 4], 0.25)).unwrap());
        let h = stack_layers(&mut tape, x, &a, &layers).unwrap();
        assert_eq!(tape.shape(h), &[3, 96]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

        let bad = [GcnLayer { weight: store.add("bad", Tensor::zeros(&[5, 32])) }];
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(stack_layers(&mut tape, x, &a, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_node_stack_composes_relu_products() {
        let mut store = ParamStore::new();
        let w0 = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let w1 = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 1.0]]).unwrap();
        let layers = [GcnLayer { weight: store.add("0", w0.clone()) }, GcnLayer { weight: store.add("1", w1.clone()) }];
        let mut tape = Tape::new(&store);
        let a = Arc::new(normalized_adjacency(&[vec![]]));
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let h = stack_layers(&mut tape, x, &a, &layers).unwrap();
        // layer 1: relu([2.0, 0.25]); layer 2: relu([2.0 - 0.125, 1.0 + 0.25])
        approx(tape.value(h).data(), &[2.0, 0.25, 1.875, 1.25]);
    }

    #[test]
    fn sort_order_rules() {
        assert_eq!(&sort_order(&[0.9, 0.1, 0.5])[..2], &[0, 2]);
        assert_eq!(sort_order(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
    }

    #[test]
    fn sortpool_pads_with_zero_rows() {
        let mut store = ParamStore::new();
        let scorer = store.add("s", Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap());
        let pool = SortPool { k: 5, scorer };
        let mut tape = Tape::new(&store);
        let a = Arc::new(normalized_adjacency(&[vec![], vec![], vec![]]));
        let h = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let out = pool.forward(&mut tape, h, &a).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[5, 2]);
        // scores: sigmoid(-1), sigmoid(3), sigmoid(0) -> order 1, 2, 0
        let s = crate::tensor::sigmoid;
        approx(v.row(0), &[3.0 * s(3.0), 0.0]);
        approx(v.row(1), &[0.5, 0.5]);
        approx(v.row(2), &[0.0, s(-1.0)]);
        approx(v.row(3), &[0.0, 0.0]);
        approx(v.row(4), &[0.0, 0.0]);
    }

    #[test]
    fn k_selection() {
        assert_eq!(determine_k(&[3, 5, 7, 9, 11], 0.6).unwrap(), 7);
        assert_eq!(determine_k(&[4, 4, 4, 4], 0.3).unwrap(), 4);
        assert_eq!(determine_k(&[2], 1.0).unwrap(), 2);
        assert_eq!(determine_k(&[1, 1], 0.5).unwrap(), 2);
        assert!(matches!(determine_k(&[], 0.6), Err(Error::Config(_))));
        assert!(determine_k(&[3], 0.0).is_err());
    }

    fn random_adjacency(n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
        prop::collection::vec((0..n, 0..n), 0..3 * n).prop_map(move |pairs| {
            let mut adj = vec![Vec::new(); n];
            for (a, b) in pairs {
                if a != b && !adj[a].contains(&b) {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
            adj
        })
    }

    proptest! {
        #[test]
        fn normalized_adjacency_is_symmetric_with_unit_spectral_radius(adj in random_adjacency(10)) {
            let a = normalized_adjacency(&adj).to_dense();
            let n = adj.len();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
                }
            }
            // The normalized matrix is similar to a stochastic matrix, so its
            // largest eigenvalue magnitude is exactly 1.
            let mut v = Tensor::filled(&[n, 1], 1.0);
            let mut radius = 0.0;
            for _ in 0..500 {
                let next = a.matmul(&v).unwrap();
                radius = next.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                v = Tensor::new(vec![n, 1], next.data().iter().map(|x| x / radius).collect()).unwrap();
            }
            prop_assert!(radius <= 1.0 + 1e-9 && radius > 1.0 - 1e-6, "radius {radius}");
        }

        #[test]
        fn sortpool_rows_are_scaled_rows_of_the_input(
            adj in random_adjacency(7),
            seed in 0u64..1000,
            k in 1usize..10,
        ) {
            let n = adj.len();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut draw = |rows: usize, cols: usize| {
                let data = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
                Tensor::new(vec![rows, cols], data).unwrap()
            };
            let mut store = ParamStore::new();
            let h_val = draw(n, 3);
            let scorer = store.add("w", draw(3, 1));
            let pool = SortPool { k, scorer };
            let a = Arc::new(normalized_adjacency(&adj));
            let mut tape = Tape::new(&store);
            let h = tape.constant(h_val.clone());
            let out = pool.forward(&mut tape, h, &a).unwrap();
            let out = tape.value(out);
            prop_assert_eq!(out.shape(), &[k, 3]);
            for r in 0..k {
                let row = out.row(r);
                if r >= n {
                    prop_assert!(row.iter().all(|&v| v == 0.0));
                    continue;
                }
                let matched = (0..n).any(|i| {
                    let src = h_val.row(i);
                    let scale = row.iter().zip(src).find(|(_, s)| s.abs() > 1e-9).map(|(o, s)| o / s);
                    scale.is_some_and(|c| c > 0.0 && c < 1.0 && row.iter().zip(src).all(|(o, s)| (o - c * s).abs() < 1e-12))
                });
                prop_assert!(matched, "row {r} is not a scaled input row");
            }
        }
    }
}
