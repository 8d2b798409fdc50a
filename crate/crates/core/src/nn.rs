//! Parameter storage and the layer building blocks shared by every model
//! component: affine maps, multilayer perceptrons and GRU layers.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed;
use crate::tape::{Gradients, Mat, Tape, Var};

/// Which optimiser owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Model,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter matrices with their owning [`Group`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Registers every parameter on `tape`; groups in `trainable` become
    /// gradient-carrying leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.groups)
            .map(|(v, g)| {
                if trainable.contains(g) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Re-registers the current values of `group` as constants, e.g. after
    /// that group was updated mid-step.
    pub fn rebind_constants(&mut self, tape: &mut Tape, store: &ParamStore, group: Group) {
        for id in store.ids() {
            if store.group(id) == group {
                self.vars[id.0] = tape.constant(store.get(id).clone());
            }
        }
    }

    /// Collects per-parameter gradients, `None` where no gradient flowed.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Mat>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(rows: usize, cols: usize, rng: &mut seed::Rng) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// A random `n x n` orthogonal matrix (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal(n: usize, rng: &mut seed::Rng) -> Mat {
    let mut q: Mat = Array2::from_shape_fn((n, n), |_| rng.sample(StandardNormal));
    for j in 0..n {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    q
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, input: usize, output: usize, rng: &mut seed::Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), group, fan_in_uniform(input, output, rng));
        let bias = store.add(format!("{name}.bias"), group, Array2::zeros((1, output)));
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        tape.add_row(y, p.var(self.bias))
    }
}

/// Affine layers with an activation between consecutive layers and none
/// after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        widths: &[usize],
        activation: Activation,
        rng: &mut seed::Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

/// One direction of one GRU layer. Gate blocks are ordered reset, update,
/// candidate along the column axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut seed::Rng) -> Self {
        let w_input = store.add(format!("{name}.w_input"), Group::Model, fan_in_uniform(input, 3 * hidden, rng));
        let mut wh = Array2::zeros((hidden, 3 * hidden));
        for gate in 0..3 {
            wh.slice_mut(s![.., gate * hidden..(gate + 1) * hidden])
                .assign(&orthogonal(hidden, rng));
        }
        let w_hidden = store.add(format!("{name}.w_hidden"), Group::Model, wh);
        let b_input = store.add(format!("{name}.b_input"), Group::Model, Array2::zeros((1, 3 * hidden)));
        let b_hidden = store.add(format!("{name}.b_hidden"), Group::Model, Array2::zeros((1, 3 * hidden)));
        Self { w_input, w_hidden, b_input, b_hidden, input, hidden }
    }

    /// Runs the layer over `xs` (`steps * batch` rows, row `t * batch + b`).
    ///
    /// Returns the per-step states in time order (same row layout) and the
    /// state after the last processed step.
    pub fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        xs: Var,
        steps: usize,
        batch: usize,
        h0: Option<Var>,
        reverse: bool,
    ) -> (Var, Var) {
        let projected = tape.matmul(xs, p.var(self.w_input));
        let projected = tape.add_row(projected, p.var(self.b_input));
        let mut h = h0.unwrap_or_else(|| tape.constant(Array2::zeros((batch, self.hidden))));
        let mut outputs = vec![h; steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let gi = tape.rows(projected, t * batch, batch);
            let gh = tape.matmul(h, p.var(self.w_hidden));
            let gh = tape.add_row(gh, p.var(self.b_hidden));
            h = tape.gru_cell(gi, gh, h);
            outputs[t] = h;
        }
        (tape.concat_rows(&outputs), h)
    }
}
