//! The assembled network: per-snapshot encoder, GRU and classifier head,
//! with all weights in one [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsfe::{GcnLayer, Gsfe, SortPool};
use crate::subgraph::{encode_features, EnclosingSubgraphWindow};
use crate::tdn::{bce_loss, ClassifierHead, Dense, GruCell, TemporalNetwork, PROB_EPS};
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// One-hot width of node labels.
    pub label_width: usize,
    /// Output channels of each graph convolution layer.
    pub gcn_channels: Vec<usize>,
    /// Rows kept by SortPooling.
    pub k: usize,
    pub gru_hidden: usize,
    /// Hidden widths of the classifier head; empty means a single linear layer.
    pub head_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn new(label_width: usize, k: usize) -> Self {
        Self { label_width, gcn_channels: vec![32, 32, 32], k, gru_hidden: 256, head_hidden: vec![] }
    }

    /// Width of a node embedding after concatenating every GCN layer.
    pub fn feature_dim(&self) -> usize {
        self.gcn_channels.iter().sum()
    }

    pub fn gru_input(&self) -> usize {
        self.k * self.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_width < 2 {
            return Err(Error::Config("label_width must be >= 2".into()));
        }
        if self.gcn_channels.is_empty() || self.gcn_channels.contains(&0) {
            return Err(Error::Config("gcn_channels must be non-empty and positive".into()));
        }
        if self.k == 0 || self.gru_hidden == 0 || self.head_hidden.contains(&0) {
            return Err(Error::Config("k, gru_hidden and head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Model inputs for one snapshot: one-hot node features and local adjacency.
#[derive(Debug, Clone)]
pub struct SnapshotInput {
    pub features: Tensor,
    pub adjacency: Vec<Vec<usize>>,
}

/// A window converted to model inputs.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub snapshots: Vec<SnapshotInput>,
    pub label: u8,
}

impl PreparedWindow {
    pub fn from_window(window: &EnclosingSubgraphWindow, label_width: usize) -> Result<Self> {
        let snapshots = window
            .subgraphs
            .iter()
            .map(|s| {
                Ok(SnapshotInput { features: encode_features(&s.labels, label_width)?, adjacency: s.adjacency.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Self { snapshots, label: window.candidate.label })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub score: f64,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    gsfe: Gsfe,
    gru: GruCell,
    head: ClassifierHead,
}

/// Parameter names and shapes in canonical order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_dim = config.label_width;
    for (i, &c) in config.gcn_channels.iter().enumerate() {
        out.push((format!("gcn.{i}.weight"), vec![in_dim, c]));
        in_dim = c;
    }
    out.push(("sortpool.scorer".into(), vec![config.feature_dim(), 1]));
    let (x, h) = (config.gru_input(), config.gru_hidden);
    for gate in ["z", "r", "h"] {
        out.push((format!("gru.w_{gate}"), vec![x, h]));
        out.push((format!("gru.u_{gate}"), vec![h, h]));
        out.push((format!("gru.b_{gate}"), vec![1, h]));
    }
    let mut in_dim = h;
    for (i, &c) in config.head_hidden.iter().enumerate() {
        out.push((format!("head.{i}.weight"), vec![in_dim, c]));
        out.push((format!("head.{i}.bias"), vec![1, c]));
        in_dim = c;
    }
    out.push(("head.out.weight".into(), vec![in_dim, 1]));
    out.push(("head.out.bias".into(), vec![1, 1]));
    out
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let value = if name.contains(".b_") || name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-bound..=bound)).collect();
                Tensor::new(shape, data)?
            };
            params.add(name, value);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(params.iter()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let id = |name: &str| params.find(name).expect("layout checked");
        let gsfe = Gsfe {
            layers: (0..config.gcn_channels.len()).map(|i| GcnLayer { weight: id(&format!("gcn.{i}.weight")) }).collect(),
            pool: SortPool { k: config.k, scorer: id("sortpool.scorer") },
        };
        let gru = GruCell {
            hidden: config.gru_hidden,
            w_z: id("gru.w_z"),
            u_z: id("gru.u_z"),
            b_z: id("gru.b_z"),
            w_r: id("gru.w_r"),
            u_r: id("gru.u_r"),
            b_r: id("gru.b_r"),
            w_h: id("gru.w_h"),
            u_h: id("gru.u_h"),
            b_h: id("gru.b_h"),
        };
        let head = ClassifierHead {
            hidden: (0..config.head_hidden.len())
                .map(|i| Dense { weight: id(&format!("head.{i}.weight")), bias: id(&format!("head.{i}.bias")) })
                .collect(),
            output: Dense { weight: id("head.out.weight"), bias: id("head.out.bias") },
        };
        Ok(Self { config, params, gsfe, gru, head })
    }

    pub fn gsfe(&self) -> &Gsfe {
        &self.gsfe
    }

    pub fn gru(&self) -> &GruCell {
        &self.gru
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Records the forward pass on `tape`; returns `(score, final hidden)`.
    pub fn forward(&self, tape: &mut Tape<'_>, window: &PreparedWindow) -> Result<(Var, Var)> {
        self.forward_batch(tape, &[window])
    }

    /// Forward pass over several windows at once. Row `i` of the returned
    /// `b x 1` scores and `b x hidden` states belongs to `windows[i]`; rows
    /// never mix, the batch only shares the recurrent matrix products.
    pub fn forward_batch(&self, tape: &mut Tape<'_>, windows: &[&PreparedWindow]) -> Result<(Var, Var)> {
        let steps = windows.first().map_or(0, |w| w.snapshots.len());
        if windows.iter().any(|w| w.snapshots.len() != steps) {
            return Err(Error::Contract("windows in a batch must have equal length".into()));
        }
        let mut inputs = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut rows = Vec::with_capacity(windows.len());
            for window in windows {
                let snap = &window.snapshots[step];
                let pooled = self.gsfe.forward(tape, snap.features.clone(), &snap.adjacency)?;
                rows.push(tape.reshape(pooled, &[1, self.config.gru_input()])?);
            }
            inputs.push(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? });
        }
        let hidden = self.gru.run(tape, &inputs)?;
        let score = self.head.classify(tape, hidden)?;
        Ok((score, hidden))
    }

    pub fn loss(&self, tape: &mut Tape<'_>, window: &PreparedWindow) -> Result<Var> {
        let (score, _) = self.forward(tape, window)?;
        bce_loss(tape, score, window.label)
    }

    /// Summed loss over a batch of windows.
    pub fn loss_batch(&self, tape: &mut Tape<'_>, windows: &[&PreparedWindow]) -> Result<Var> {
        let (scores, _) = self.forward_batch(tape, windows)?;
        let targets = windows.iter().map(|w| f64::from(w.label)).collect();
        tape.bce_sum(scores, targets, PROB_EPS)
    }

    /// Adds `scale * dLoss/dθ` into `grads` and returns the unscaled loss.
    pub fn accumulate_gradients(&self, window: &PreparedWindow, scale: f64, grads: &mut Gradients) -> Result<f64> {
        self.accumulate_batch_gradients(&[window], scale, grads)
    }

    /// Adds `scale * d(sum of losses)/dθ` into `grads` and returns the summed loss.
    pub fn accumulate_batch_gradients(&self, windows: &[&PreparedWindow], scale: f64, grads: &mut Gradients) -> Result<f64> {
        if windows.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new(&self.params);
        let loss = self.loss_batch(&mut tape, windows)?;
        tape.backward_scaled(loss, scale, grads)?;
        Ok(tape.value(loss).data()[0])
    }

    pub fn predict(&self, window: &PreparedWindow) -> Result<WindowPrediction> {
        Ok(self.predict_batch(&[window])?.remove(0))
    }

    pub fn predict_batch(&self, windows: &[&PreparedWindow]) -> Result<Vec<WindowPrediction>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let (scores, hidden) = self.forward_batch(&mut tape, windows)?;
        let (scores, hidden) = (tape.value(scores), tape.value(hidden));
        Ok((0..windows.len())
            .map(|i| WindowPrediction { score: scores.data()[i], hidden: hidden.row(i).to_vec() })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { label_width: 4, gcn_channels: vec![3, 3], k: 3, gru_hidden: 5, head_hidden: vec![] }
    }

    fn window(label: u8) -> PreparedWindow {
        let snap = |labels: &[u32], adjacency: Vec<Vec<usize>>| SnapshotInput {
            features: encode_features(labels, 4).unwrap(),
            adjacency,
        };
        PreparedWindow {
            snapshots: vec![
                snap(&[1, 1, 2], vec![vec![2], vec![2], vec![0, 1]]),
                snap(&[0, 0], vec![vec![], vec![]]),
                snap(&[1, 1, 2, 3], vec![vec![1, 2], vec![0, 2, 3], vec![0, 1], vec![1]]),
            ],
            label,
        }
    }

    #[test]
    fn parameter_layout() {
        let m = Model::new(ModelConfig::new(5, 7), 1).unwrap();
        let names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[..4], ["gcn.0.weight", "gcn.1.weight", "gcn.2.weight", "sortpool.scorer"]);
        assert_eq!(m.params.get(m.gru.w_z).value.shape(), &[7 * 96, 256]);
        assert_eq!(m.params.get(m.gru.u_h).value.shape(), &[256, 256]);
        assert_eq!(*names.last().unwrap(), "head.out.bias");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(tiny(), 9).unwrap();
        let b = Model::new(tiny(), 9).unwrap();
        let c = Model::new(tiny(), 10).unwrap();
        let flat = |m: &Model| m.params.iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn prediction_is_a_probability_and_deterministic() {
        let m = Model::new(tiny(), 3).unwrap();
        let p = m.predict(&window(0)).unwrap();
        assert!(p.score > 0.0 && p.score < 1.0);
        assert_eq!(p.hidden.len(), 5);
        assert_eq!(m.predict(&window(0)).unwrap(), p);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = Model::new(ModelConfig { gcn_channels: vec![8, 8], head_hidden: vec![4], ..tiny() }, 4).unwrap();
        let mut grads = m.params.gradients();
        m.accumulate_gradients(&window(1), 1.0, &mut grads).unwrap();
        for (p, g) in m.params.iter().zip(grads.iter()) {
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient", p.name);
        }
    }

    #[test]
    fn batched_rows_match_single_windows() {
        let m = Model::new(tiny(), 5).unwrap();
        let (a, b) = (window(0), window(1));
        let batch = m.predict_batch(&[&a, &b, &a]).unwrap();
        assert_eq!(batch[0], m.predict(&a).unwrap());
        assert_eq!(batch[1], m.predict(&b).unwrap());
        assert_eq!(batch[2], batch[0]);

        let mut single = m.params.gradients();
        let la = m.accumulate_gradients(&a, 1.0, &mut single).unwrap();
        let lb = m.accumulate_gradients(&b, 1.0, &mut single).unwrap();
        let mut joint = m.params.gradients();
        let l = m.accumulate_batch_gradients(&[&a, &b], 1.0, &mut joint).unwrap();
        assert!((l - (la + lb)).abs() < 1e-12);
        for (x, y) in single.iter().zip(joint.iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_params_rejects_mismatched_layout() {
        let m = Model::new(tiny(), 3).unwrap();
        let other = ModelConfig { k: 4, ..tiny() };
        assert!(matches!(Model::from_params(other, m.params.clone()), Err(Error::Checkpoint(_))));
    }
}
