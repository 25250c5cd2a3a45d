//! Small layer library on top of the tape. Layers only remember parameter
//! names and sizes; the tensors themselves live in a [`ParamStore`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::params::ParamStore;
use super::tape::{concat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = 1.0 / (self.input as f64).sqrt();
        store.init_uniform(&format!("{}.weight", self.name), &[self.input, self.output], bound, rng);
        store.init_const(&format!("{}.bias", self.name), &[self.output], 0.0);
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, &format!("{}.weight", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        x.matmul(w) + b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_const(&format!("{}.gain", self.name), &[self.dim], 1.0);
        store.init_const(&format!("{}.bias", self.name), &[self.dim], 0.0);
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let last = x.shape().len() - 1;
        let mean = x.mean_keepdim(last);
        let centered = x - mean;
        let var = centered.square().mean_keepdim(last);
        let normed = centered / var.add_scalar(1e-5).sqrt();
        let g = tape.param(store, &format!("{}.gain", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        normed * g + b
    }
}

/// 1-D convolution over the time axis of `[B, T, C]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        name: impl Into<String>,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.into(),
            input,
            output,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.input * self.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.init_uniform(&format!("{}.weight", self.name), &[fan_in, self.output], bound, rng);
        store.init_const(&format!("{}.bias", self.name), &[self.output], 0.0);
    }

    pub fn output_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let w = tape.param(store, &format!("{}.weight", self.name));
        let b = tape.param(store, &format!("{}.bias", self.name));
        x.unfold_time(self.kernel, self.stride, self.pad).matmul(w) + b
    }
}

/// Gated recurrent unit returning the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h3 = 3 * self.hidden;
        store.init_uniform(&format!("{}.w_ih", self.name), &[self.input, h3], bound, rng);
        store.init_uniform(&format!("{}.w_hh", self.name), &[self.hidden, h3], bound, rng);
        store.init_const(&format!("{}.b_ih", self.name), &[h3], 0.0);
        store.init_const(&format!("{}.b_hh", self.name), &[h3], 0.0);
    }

    /// `[B, T, input] -> [B, hidden]`, starting from a zero state.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let (batch, steps) = (shape[0], shape[1]);
        let h = self.hidden;
        let w_ih = tape.param(store, &format!("{}.w_ih", self.name));
        let w_hh = tape.param(store, &format!("{}.w_hh", self.name));
        let b_ih = tape.param(store, &format!("{}.b_ih", self.name));
        let b_hh = tape.param(store, &format!("{}.b_hh", self.name));

        let projected = x.matmul(w_ih) + b_ih;
        let mut state = tape.constant(ArrayD::zeros(IxDyn(&[batch, h])));
        for t in 0..steps {
            let xt = projected.narrow(1, t, 1).reshape(&[batch, 3 * h]);
            let ht = state.matmul(w_hh) + b_hh;
            let r = (xt.narrow(1, 0, h) + ht.narrow(1, 0, h)).sigmoid();
            let z = (xt.narrow(1, h, h) + ht.narrow(1, h, h)).sigmoid();
            let n = (xt.narrow(1, 2 * h, h) + r * ht.narrow(1, 2 * h, h)).tanh();
            // h' = n + z * (h - n)
            state = n + z * (state - n);
        }
        state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(name: &str, sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, mut x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x);
            if i < last {
                x = match self.activation {
                    Activation::Relu => x.relu(),
                    Activation::Tanh => x.tanh(),
                };
            }
        }
        x
    }
}

/// Inverted dropout with an explicit random source; `None` disables it.
pub fn dropout<'t>(x: Var<'t>, p: f64, rng: Option<&mut dyn rand::RngCore>) -> Var<'t> {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let mask = ArrayD::from_shape_fn(IxDyn(&x.shape()), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    x * x.tape().constant(mask)
}

/// Stack `[B, T, C]` tensors along a new leading axis via concatenation.
pub fn stack<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let expanded: Vec<_> = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect();
    concat(&expanded, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check_params(
        store: &ParamStore,
        f: impl for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
    ) {
        let tape = Tape::new();
        let y = f(&tape, store);
        let grads = tape.backward(y).params(store);
        let h = 1e-6;
        for (name, g) in &grads {
            for i in 0..g.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
                let tp = Tape::new();
                let tm = Tape::new();
                let numeric = (f(&tp, &plus).item() - f(&tm, &minus).item()) / (2.0 * h);
                let a = g.as_slice().unwrap()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{name}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn gru_conv_layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let conv = Conv1d::new("conv", 3, 4, 3, 2);
        let norm = LayerNorm::new("ln", 4);
        let gru = Gru::new("gru", 4, 3);
        conv.init(&mut store, &mut rng);
        norm.init(&mut store);
        gru.init(&mut store, &mut rng);
        // Perturb the norm so its parameters are not at a symmetric point.
        store.init_uniform("ln.gain", &[4], 1.5, &mut rng);
        store.init_uniform("ln.bias", &[4], 0.5, &mut rng);
        let input = ArrayD::from_shape_fn(IxDyn(&[2, 7, 3]), |_| rng.random_range(-1.0..1.0));
        fd_check_params(&store, |tape, store| {
            let x = tape.constant(input.clone());
            let y = conv.forward(tape, store, x).relu();
            let y = norm.forward(tape, store, y);
            gru.forward(tape, store, y).square().sum_all()
        });
    }

    #[test]
    fn conv_output_length() {
        let c = Conv1d::new("c", 1, 1, 3, 2);
        assert_eq!(c.output_len(32), 16);
        assert_eq!(c.output_len(7), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut rng);
        let tape = Tape::new();
        let y = c.forward(&tape, &store, tape.constant(ArrayD::zeros(IxDyn(&[2, 7, 1]))));
        assert_eq!(y.shape(), vec![2, 4, 1]);
    }

    #[test]
    fn dropout_without_rng_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 2.0));
        let y = dropout(x, 0.5, None);
        assert_eq!(y.id(), x.id());
    }
}
