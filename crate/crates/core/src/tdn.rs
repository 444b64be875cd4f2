//! Temporal detection network: a GRU folded over the window's snapshot
//! features, a fully connected classifier on the last hidden state, and the
//! binary cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Var};

/// Clamp applied to predicted probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// A recurrent model over per-snapshot feature vectors.
pub trait TemporalNetwork {
    /// Folds `inputs` oldest-first and returns the final hidden state.
    fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var>;

    fn hidden_size(&self) -> usize;
}

/// GRU cell with the update gate weighting the previous state:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// h' = tanh(x Wh + (r * h) Uh + bh)
/// h  = z * h_prev + (1 - z) * h'
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    fn gate(&self, tape: &mut Tape<'_>, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
        let (w, u, b) = (tape.param(w), tape.param(u), tape.param(b));
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let sum = tape.add(xw, hu)?;
        tape.add_row_bias(sum, b)
    }

    /// One step from `h_prev` (`b x hidden`) given input `x` (`b x in`); rows are independent sequences.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h_prev: Var) -> Result<Var> {
        let z = self.gate(tape, x, h_prev, self.w_z, self.u_z, self.b_z)?;
        let z = tape.sigmoid(z)?;
        let r = self.gate(tape, x, h_prev, self.w_r, self.u_r, self.b_r)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let cand = self.gate(tape, x, rh, self.w_h, self.u_h, self.b_h)?;
        let cand = tape.tanh(cand)?;

        let keep = tape.mul(z, h_prev)?;
        let one_minus_z = tape.affine(z, -1.0, 1.0)?;
        let update = tape.mul(one_minus_z, cand)?;
        tape.add(keep, update)
    }
}

impl TemporalNetwork for GruCell {
    fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract("GRU needs at least one input".into()));
        }
        let rows = tape.shape(inputs[0])[0];
        let mut h = tape.constant(crate::tensor::Tensor::zeros(&[rows, self.hidden]));
        for &x in inputs {
            h = self.step(tape, x, h)?;
        }
        Ok(h)
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        let xw = tape.matmul(x, w)?;
        tape.add_row_bias(xw, b)
    }
}

/// Fully connected head: optional relu hidden layers, then one output unit
/// through a sigmoid.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl ClassifierHead {
    /// Anomaly probability in `(0, 1)`.
    pub fn classify(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let mut x = h;
        for layer in &self.hidden {
            x = layer.forward(tape, x)?;
            x = tape.relu(x)?;
        }
        let logit = self.output.forward(tape, x)?;
        tape.sigmoid(logit)
    }
}

/// Binary cross-entropy of `score` against label `y` (1 = anomalous).
pub fn bce_loss(tape: &mut Tape<'_>, score: Var, y: u8) -> Result<Var> {
    tape.bce(score, f64::from(y), PROB_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn cell(store: &mut ParamStore, input: usize, hidden: usize, mut fill: impl FnMut(&[usize]) -> Tensor) -> GruCell {
        let mut p = |name: &str, shape: &[usize]| store.add(name, fill(shape));
        GruCell {
            hidden,
            w_z: p("w_z", &[input, hidden]),
            u_z: p("u_z", &[hidden, hidden]),
            b_z: p("b_z", &[1, hidden]),
            w_r: p("w_r", &[input, hidden]),
            u_r: p("u_r", &[hidden, hidden]),
            b_r: p("b_r", &[1, hidden]),
            w_h: p("w_h", &[input, hidden]),
            u_h: p("u_h", &[hidden, hidden]),
            b_h: p("b_h", &[1, hidden]),
        }
    }

    fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut store = ParamStore::new();
        let gru = cell(&mut store, 3, 4, zeros);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let v = vec![0.8, -0.4, 0.0, 2.0];
        let h = tape.constant(Tensor::from_rows(std::slice::from_ref(&v)).unwrap());
        let out = gru.step(&mut tape, x, h).unwrap();
        let expected: Vec<f64> = v.iter().map(|a| 0.5 * a).collect();
        assert_eq!(tape.value(out).data(), expected.as_slice());

        let h0 = tape.constant(Tensor::zeros(&[1, 4]));
        let out = gru.step(&mut tape, x, h0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut store = ParamStore::new();
        let gru = cell(&mut store, 2, 3, |s| Tensor::filled(s, 0.3));
        store.get_mut(gru.b_z).value.fill(50.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let h = tape.constant(Tensor::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap());
        let out = gru.step(&mut tape, x, h).unwrap();
        for (a, b) in tape.value(out).data().iter().zip([0.1, -0.2, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_rules() {
        let mut store = ParamStore::new();
        let gru = cell(&mut store, 2, 3, zeros);
        let mut tape = Tape::new(&store);
        assert!(matches!(gru.run(&mut tape, &[]), Err(Error::Contract(_))));
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h = gru.run(&mut tape, &[x, x, x]).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 3]);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let mut store = ParamStore::new();
        let gru = cell(&mut store, 2, 3, zeros);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(gru.run(&mut tape, &[x]), Err(Error::Shape { .. })));
    }

    #[test]
    fn classifier_examples() {
        let mut store = ParamStore::new();
        let head = ClassifierHead {
            hidden: vec![],
            output: Dense { weight: store.add("w", Tensor::zeros(&[3, 1])), bias: store.add("b", Tensor::zeros(&[1, 1])) },
        };
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let s = head.classify(&mut tape, h).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);

        store.get_mut(head.output.weight).value = Tensor::from_rows(&[vec![0.1], vec![-0.2], vec![0.05]]).unwrap();
        store.get_mut(head.output.bias).value = Tensor::scalar(0.3);
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let s = head.classify(&mut tape, h).unwrap();
        // 0.1 - 0.4 + 0.15 + 0.3 = 0.15
        let expected = 1.0 / (1.0 + (-0.15f64).exp());
        assert!((tape.value(s).data()[0] - expected).abs() < 1e-15);

        store.get_mut(head.output.bias).value = Tensor::scalar(60.0);
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let s = head.classify(&mut tape, h).unwrap();
        assert!(tape.value(s).data()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn bce_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let hi = tape.constant(Tensor::scalar(1.0 - PROB_EPS));
        let lo = tape.constant(Tensor::scalar(PROB_EPS));
        let half = tape.constant(Tensor::scalar(0.5));
        let l = bce_loss(&mut tape, hi, 1).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
        let l = bce_loss(&mut tape, lo, 0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
        let l = bce_loss(&mut tape, half, 1).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn gru_state_stays_in_unit_box(
            seed in 0u64..500,
            steps in 1usize..8,
            scale in 0.1f64..20.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mut draw = |shape: &[usize]| {
                let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-scale..scale)).collect();
                Tensor::new(shape.to_vec(), data).unwrap()
            };
            let c = cell(&mut store, 3, 4, &mut draw);
            let inputs: Vec<Tensor> = (0..steps).map(|_| draw(&[2, 3])).collect();
            let mut tape = Tape::new(&store);
            let xs: Vec<Var> = inputs.into_iter().map(|t| tape.constant(t)).collect();
            let h = c.run(&mut tape, &xs).unwrap();
            proptest::prop_assert!(tape.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
