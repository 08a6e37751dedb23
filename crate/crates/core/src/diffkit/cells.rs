//! Feed-forward, gated-recurrent and vanilla-recurrent cells.
//!
//! Each cell owns its tensors. `bind` registers them on a graph and returns a
//! handle of [`Var`]s in the same order as [`Parameterized::tensors`], which is
//! how gradients are mapped back onto parameters.

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything with an ordered list of learnable tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Glorot-uniform weight matrix `[rows, cols]`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

/// Gradients for `vars`, shaped like `like`, zero where unreachable.
pub fn collect_grads(grads: &Gradients, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(v, t)| grads.tensor_or_zero(*v, t.shape()))
        .collect()
}

fn bind_all(g: &mut Graph, tensors: &[&Tensor]) -> Result<Vec<Var>> {
    tensors.iter().map(|t| g.param(t)).collect()
}

fn width_error(op: &'static str, expected: usize, got: usize) -> Error {
    Error::Dimension {
        op,
        left: vec![expected],
        right: vec![got],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(output, input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Alternating affine + activation layers; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn glorot(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(Dense::output_width).unwrap_or(0)
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundMlp> {
        let vars = bind_all(g, &self.tensors())?;
        Ok(BoundMlp {
            vars,
            activation: self.activation,
            input_width: self.input_width(),
        })
    }
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
    activation: Activation,
    input_width: usize,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn mlp_forward(g: &mut Graph, mlp: &BoundMlp, x: Var) -> Result<Var> {
    let width = g.shape(x)?;
    if width != [mlp.input_width] {
        return Err(width_error("mlp input", mlp.input_width, width.iter().product()));
    }
    let layers = mlp.vars.len() / 2;
    let mut h = x;
    for (i, pair) in mlp.vars.chunks(2).enumerate() {
        h = g.linear(pair[0], h, pair[1])?;
        if i + 1 < layers {
            h = match mlp.activation {
                Activation::Tanh => g.tanh(h)?,
                Activation::Relu => g.relu(h)?,
            };
        }
    }
    Ok(h)
}

/// Gated recurrent cell:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl Gru {
    pub fn glorot(width: usize, rng: &mut impl Rng) -> Self {
        let mut m = || glorot(width, width, rng);
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (m(), m(), m(), m(), m(), m());
        let b = || Tensor::zeros(&[width]);
        Self {
            w_z,
            u_z,
            b_z: b(),
            w_r,
            u_r,
            b_r: b(),
            w_h,
            u_h,
            b_h: b(),
        }
    }

    pub fn zeros(width: usize) -> Self {
        let m = || Tensor::zeros(&[width, width]);
        let b = || Tensor::zeros(&[width]);
        Self {
            w_z: m(),
            u_z: m(),
            b_z: b(),
            w_r: m(),
            u_r: m(),
            b_r: b(),
            w_h: m(),
            u_h: m(),
            b_h: b(),
        }
    }

    pub fn width(&self) -> usize {
        self.b_z.len()
    }
}

impl Parameterized for Gru {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

/// Vanilla recurrent cell `h' = tanh(W_hh h + W_ih x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vrnn {
    pub w_hh: Tensor,
    pub w_ih: Tensor,
    pub b: Tensor,
}

/// Small constant used for the non-identity VRNN parameters at init.
pub const VRNN_INIT_EPS: f64 = 1e-3;

impl Vrnn {
    /// Identity on the hidden path, ε everywhere else, so a fresh cell
    /// passes its hidden state (the agent's own latent) through.
    pub fn identity_init(width: usize) -> Self {
        Self {
            w_hh: Tensor::identity(width),
            w_ih: Tensor::filled(&[width, width], VRNN_INIT_EPS),
            b: Tensor::filled(&[width], VRNN_INIT_EPS),
        }
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }
}

impl Parameterized for Vrnn {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_hh, &self.w_ih, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_hh, &mut self.w_ih, &mut self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Vrnn,
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Self::Gru),
            "vrnn" => Ok(Self::Vrnn),
            other => Err(format!("unknown cell kind `{other}` (expected gru or vrnn)")),
        }
    }
}

impl CellKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Gru => "gru",
            Self::Vrnn => "vrnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecurrentCell {
    Gru(Gru),
    Vrnn(Vrnn),
}

impl RecurrentCell {
    pub fn new(kind: CellKind, width: usize, rng: &mut impl Rng) -> Self {
        match kind {
            CellKind::Gru => Self::Gru(Gru::glorot(width, rng)),
            CellKind::Vrnn => Self::Vrnn(Vrnn::identity_init(width)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Self::Gru(_) => CellKind::Gru,
            Self::Vrnn(_) => CellKind::Vrnn,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::Gru(c) => c.width(),
            Self::Vrnn(c) => c.width(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundCell> {
        let vars = bind_all(g, &self.tensors())?;
        Ok(BoundCell {
            kind: self.kind(),
            vars,
            width: self.width(),
        })
    }
}

impl Parameterized for RecurrentCell {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Self::Gru(c) => c.tensors(),
            Self::Vrnn(c) => c.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Gru(c) => c.tensors_mut(),
            Self::Vrnn(c) => c.tensors_mut(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundCell {
    kind: CellKind,
    vars: Vec<Var>,
    width: usize,
}

impl BoundCell {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step(&self, g: &mut Graph, h: Var, x: Var) -> Result<Var> {
        match self.kind {
            CellKind::Gru => gru_step(g, self, h, x),
            CellKind::Vrnn => vrnn_step(g, self, h, x),
        }
    }
}

fn check_widths(g: &Graph, cell: &BoundCell, h: Var, x: Var, op: &'static str) -> Result<()> {
    for v in [h, x] {
        let shape = g.shape(v)?;
        if shape != [cell.width] {
            return Err(width_error(op, cell.width, shape.iter().product()));
        }
    }
    Ok(())
}

pub fn gru_step(g: &mut Graph, cell: &BoundCell, h: Var, x: Var) -> Result<Var> {
    if cell.kind != CellKind::Gru {
        return Err(Error::Contract("gru_step on a non-GRU cell".into()));
    }
    check_widths(g, cell, h, x, "gru_step")?;
    let p = &cell.vars;
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hidden: Var| -> Result<Var> {
        let wx = g.linear(w, x, b)?;
        let uh = g.matmul(u, hidden)?;
        g.add(wx, uh)
    };
    let z_pre = gate(g, p[0], p[1], p[2], h)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, p[3], p[4], p[5], h)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let c_pre = gate(g, p[6], p[7], p[8], rh)?;
    let candidate = g.tanh(c_pre)?;
    // h + z ⊙ (h̃ − h) == (1 − z) ⊙ h + z ⊙ h̃
    let diff = g.sub(candidate, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

pub fn vrnn_step(g: &mut Graph, cell: &BoundCell, h: Var, x: Var) -> Result<Var> {
    if cell.kind != CellKind::Vrnn {
        return Err(Error::Contract("vrnn_step on a non-VRNN cell".into()));
    }
    check_widths(g, cell, h, x, "vrnn_step")?;
    let p = &cell.vars;
    let input = g.linear(p[1], x, p[2])?;
    let hidden = g.matmul(p[0], h)?;
    let pre = g.add(hidden, input)?;
    g.tanh(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_gives_zero_output() {
        let mlp = Mlp::zeros(&[3, 4, 2], Activation::Tanh);
        let mut g = Graph::new();
        let b = mlp.bind(&mut g).unwrap();
        let x = g.vector(&[1.0, -2.0, 0.5]).unwrap();
        let y = mlp_forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::glorot(&[3, 2], Activation::Tanh, &mut rng);
        mlp.layers[0].bias = Tensor::from_vec(vec![0.25, -1.0]);
        let mut g = Graph::new();
        let b = mlp.bind(&mut g).unwrap();
        let xs = [0.3, -0.7, 1.1];
        let x = g.vector(&xs).unwrap();
        let y = mlp_forward(&mut g, &b, x).unwrap();
        let w = mlp.layers[0].weight.data();
        for (i, out) in g.value(y).unwrap().iter().enumerate() {
            let expected: f64 =
                (0..3).map(|j| w[i * 3 + j] * xs[j]).sum::<f64>() + mlp.layers[0].bias.data()[i];
            assert!((out - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_width_mismatch() {
        let mlp = Mlp::zeros(&[3, 2], Activation::Tanh);
        let mut g = Graph::new();
        let b = mlp.bind(&mut g).unwrap();
        let x = g.vector(&[1.0, 2.0]).unwrap();
        assert!(matches!(mlp_forward(&mut g, &b, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_gru_halves_hidden_state() {
        let cell = RecurrentCell::Gru(Gru::zeros(3));
        let mut g = Graph::new();
        let b = cell.bind(&mut g).unwrap();
        let h = g.vector(&[0.4, -1.2, 2.0]).unwrap();
        let x = g.vector(&[5.0, 5.0, 5.0]).unwrap();
        let out = b.step(&mut g, h, x).unwrap();
        assert_eq!(g.value(out).unwrap(), &[0.2, -0.6, 1.0]);
    }

    #[test]
    fn closed_update_gate_carries_hidden_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gru = Gru::glorot(4, &mut rng);
        gru.b_z = Tensor::filled(&[4], -60.0);
        let cell = RecurrentCell::Gru(gru);
        let mut g = Graph::new();
        let b = cell.bind(&mut g).unwrap();
        let hv = [0.1, -0.3, 0.5, 0.9];
        let h = g.vector(&hv).unwrap();
        let x = g.zeros(4).unwrap();
        let out = b.step(&mut g, h, x).unwrap();
        for (o, e) in g.value(out).unwrap().iter().zip(hv) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn vrnn_identity_init_echoes_hidden() {
        let cell = RecurrentCell::Vrnn(Vrnn::identity_init(3));
        let mut g = Graph::new();
        let b = cell.bind(&mut g).unwrap();
        let hv = [0.01, -0.02, 0.005];
        let h = g.vector(&hv).unwrap();
        let x = g.zeros(3).unwrap();
        let out = b.step(&mut g, h, x).unwrap();
        for (o, e) in g.value(out).unwrap().iter().zip(hv) {
            // tanh(h + ε) ≈ h for small h
            assert!((o - e).abs() < 2e-3);
        }
    }

    #[test]
    fn vrnn_input_sensitivity_is_epsilon() {
        // First-order: ∂h'_i/∂x_j = (1 − h'_i²)·ε, so a δ shift on every input
        // coordinate moves each output by ≈ D·ε·δ·(1 − h'²).
        let cell = RecurrentCell::Vrnn(Vrnn::identity_init(2));
        let eval = |xs: [f64; 2]| {
            let mut g = Graph::new();
            let b = cell.bind(&mut g).unwrap();
            let h = g.vector(&[0.1, 0.2]).unwrap();
            let x = g.vector(&xs).unwrap();
            let out = b.step(&mut g, h, x).unwrap();
            g.value(out).unwrap().to_vec()
        };
        let delta = 1e-3;
        let base = eval([0.0, 0.0]);
        let moved = eval([delta, 0.0]);
        for (b, m) in base.iter().zip(&moved) {
            let expected = VRNN_INIT_EPS * delta * (1.0 - b * b);
            assert!(((m - b) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn gru_width_mismatch() {
        let cell = RecurrentCell::Gru(Gru::zeros(3));
        let mut g = Graph::new();
        let b = cell.bind(&mut g).unwrap();
        let h = g.vector(&[0.0, 0.0, 0.0]).unwrap();
        let x = g.vector(&[0.0, 0.0]).unwrap();
        assert!(matches!(b.step(&mut g, h, x), Err(Error::Dimension { .. })));
    }
}
