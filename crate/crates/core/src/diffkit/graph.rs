//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep. A graph lives for
//! one episode; once released every further operation on it fails.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn graph_id(&self) -> u64 {
        self.graph
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    rows: usize,
    cols: usize,
    rank: u8,
}

impl Shape {
    fn vector(n: usize) -> Self {
        Self {
            rows: n,
            cols: 1,
            rank: 1,
        }
    }

    fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n] => Ok(Self::vector(n)),
            [r, c] => Ok(Self {
                rows: r,
                cols: c,
                rank: 2,
            }),
            _ => contract(format!("graph tensors are rank 1 or 2, got {dims:?}")),
        }
    }

    fn dims(&self) -> Vec<usize> {
        if self.rank == 1 {
            vec![self.rows]
        } else {
            vec![self.rows, self.cols]
        }
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which side of a binary op (if any) is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Left,
    Right,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { w: usize, x: usize, b: usize },
    Binary { kind: Binary, a: usize, b: usize, bc: Broadcast },
    Unary { kind: Unary, a: usize },
    LogFloor { a: usize, floor: f64 },
    Scale { a: usize, factor: f64 },
    Offset { a: usize },
    Square { a: usize },
    Softmax { a: usize },
    Sum { a: usize },
    Mean { parts: Vec<usize> },
    Pick { a: usize, at: usize },
    Slice { a: usize, start: usize },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    released: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(1024),
            released: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Drops all nodes; the graph rejects further use.
    pub fn release(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.released = true;
    }

    fn check_live(&self) -> Result<()> {
        if self.released {
            contract(format!("graph {} was already released", self.id))
        } else {
            Ok(())
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.check_live()?;
        if v.graph != self.id {
            return contract(format!(
                "variable from graph {} used with graph {}",
                v.graph, self.id
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", v.index)))
    }

    pub fn owns(&self, v: Var) -> bool {
        !self.released && v.graph == self.id && v.index < self.nodes.len()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.node(v)?.value)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return contract(format!("expected scalar, got shape {:?}", n.shape.dims()));
        }
        Ok(n.value[0])
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.node(v)?.shape.dims())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.needs_grad)
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.dims(), n.value.clone())
    }

    /// Records a constant input; constants never receive gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.check_live()?;
        check_finite("constant", t.data())?;
        let shape = Shape::from_dims(t.shape())?;
        Ok(self.push(shape, t.data().to_vec(), Op::Constant, false))
    }

    pub fn vector(&mut self, values: &[f64]) -> Result<Var> {
        self.constant(&Tensor::from_vec(values.to_vec()))
    }

    pub fn zeros(&mut self, n: usize) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(Shape::vector(n), vec![0.0; n], Op::Constant, false))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.check_live()?;
        check_finite("param", t.data())?;
        let shape = Shape::from_dims(t.shape())?;
        Ok(self.push(shape, t.data().to_vec(), Op::Param, true))
    }

    /// `a[m×k] · b[k×n]`; a rank-1 `b` is treated as a column and the result
    /// stays rank 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape, self.node(b)?.shape);
        if sa.rank != 2 || sa.cols != sb.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.dims(),
                right: sb.dims(),
            });
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let av = &self.nodes[a.index].value;
        let bv = &self.nodes[b.index].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for (o, bj) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += aip * bj;
                }
            }
        }
        let shape = if sb.rank == 1 {
            Shape::vector(m)
        } else {
            Shape {
                rows: m,
                cols: n,
                rank: 2,
            }
        };
        let needs = self.nodes[a.index].needs_grad || self.nodes[b.index].needs_grad;
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.index,
                b: b.index,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Fused affine map `w·x + b` for a vector `x`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (sw, sx, sb) = (self.node(w)?.shape, self.node(x)?.shape, self.node(b)?.shape);
        if sw.rank != 2 || sx.rank != 1 || sw.cols != sx.rows {
            return Err(Error::Dimension {
                op: "linear",
                left: sw.dims(),
                right: sx.dims(),
            });
        }
        if sb.rank != 1 || sb.rows != sw.rows {
            return Err(Error::Dimension {
                op: "linear bias",
                left: sw.dims(),
                right: sb.dims(),
            });
        }
        let (m, n) = (sw.rows, sw.cols);
        let wv = &self.nodes[w.index].value;
        let xv = &self.nodes[x.index].value;
        let mut out = self.nodes[b.index].value.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        let needs = self.nodes[w.index].needs_grad
            || self.nodes[x.index].needs_grad
            || self.nodes[b.index].needs_grad;
        Ok(self.push(
            Shape::vector(m),
            out,
            Op::Linear {
                w: w.index,
                x: x.index,
                b: b.index,
            },
            needs,
        ))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (na.shape, nb.shape);
        let bc = if sa == sb {
            Broadcast::None
        } else if sa.len() == 1 {
            Broadcast::Left
        } else if sb.len() == 1 {
            Broadcast::Right
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                left: sa.dims(),
                right: sb.dims(),
            });
        };
        check_finite("elementwise", &na.value)?;
        check_finite("elementwise", &nb.value)?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let (out, shape) = match bc {
            Broadcast::None => (
                na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect(),
                sa,
            ),
            Broadcast::Left => {
                let x = na.value[0];
                (nb.value.iter().map(|y| f(x, *y)).collect(), sb)
            }
            Broadcast::Right => {
                let y = nb.value[0];
                (na.value.iter().map(|x| f(*x, y)).collect(), sa)
            }
        };
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(
            shape,
            out,
            Op::Binary {
                kind,
                a: a.index,
                b: b.index,
                bc,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        check_finite("elementwise", &na.value)?;
        if kind == Unary::Log {
            if let Some(bad) = na.value.iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out: Vec<f64> = match kind {
            Unary::Tanh => na.value.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => na.value.iter().map(|v| sigmoid(*v)).collect(),
            Unary::Relu => na.value.iter().map(|v| v.max(0.0)).collect(),
            Unary::Log => na.value.iter().map(|v| v.ln()).collect(),
            Unary::Exp => na.value.iter().map(|v| v.exp()).collect(),
        };
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::Unary { kind, a: a.index }, needs))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// `ln(max(a, floor))`; gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return contract("log floor must be positive");
        }
        let na = self.node(a)?;
        check_finite("log_floor", &na.value)?;
        let out = na.value.iter().map(|v| v.max(floor).ln()).collect();
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::LogFloor { a: a.index, floor }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|v| v * factor).collect();
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::Scale { a: a.index, factor }, needs))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|v| v + c).collect();
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::Offset { a: a.index }, needs))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|v| v * v).collect();
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::Square { a: a.index }, needs))
    }

    /// Numerically stable softmax of a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        if na.shape.rank != 1 || na.value.is_empty() {
            return contract(format!("softmax expects a non-empty vector, got {:?}", na.shape.dims()));
        }
        check_finite("softmax", &na.value)?;
        let out = softmax_values(&na.value);
        let (shape, needs) = (na.shape, na.needs_grad);
        Ok(self.push(shape, out, Op::Softmax { a: a.index }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let s = na.value.iter().sum();
        let needs = na.needs_grad;
        Ok(self.push(Shape::vector(1), vec![s], Op::Sum { a: a.index }, needs))
    }

    /// Sum of scalars (or equal-shape tensors) as one node.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mean = self.mean(parts)?;
        self.scale(mean, parts.len() as f64)
    }

    /// Elementwise mean of equal-shape nodes, accumulated in the given order.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("mean of an empty list");
        };
        let shape = self.node(first)?.shape;
        let mut acc = vec![0.0; shape.len()];
        let mut needs = false;
        for &p in parts {
            let np = self.node(p)?;
            if np.shape != shape {
                return Err(Error::Dimension {
                    op: "mean",
                    left: shape.dims(),
                    right: np.shape.dims(),
                });
            }
            acc.iter_mut().zip(&np.value).for_each(|(a, v)| *a += v);
            needs |= np.needs_grad;
        }
        let inv = 1.0 / parts.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let parts = parts.iter().map(|p| p.index).collect();
        Ok(self.push(shape, acc, Op::Mean { parts }, needs))
    }

    /// Element `at` of a vector as a scalar node.
    pub fn pick(&mut self, a: Var, at: usize) -> Result<Var> {
        let na = self.node(a)?;
        let Some(&v) = na.value.get(at) else {
            return contract(format!("index {at} out of range for {:?}", na.shape.dims()));
        };
        let needs = na.needs_grad;
        Ok(self.push(Shape::vector(1), vec![v], Op::Pick { a: a.index, at }, needs))
    }

    /// Contiguous sub-vector `a[start..start+len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a)?;
        if na.shape.rank != 1 || start + len > na.value.len() || len == 0 {
            return contract(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                na.shape.dims()
            ));
        }
        let out = na.value[start..start + len].to_vec();
        let needs = na.needs_grad;
        Ok(self.push(Shape::vector(len), out, Op::Slice { a: a.index, start }, needs))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.shape.dims()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        grads[root.index] = Some(vec![1.0]);

        for idx in (0..=root.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, idx: usize, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Constant | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if nodes[a].needs_grad {
                    // dA = G · Bᵀ
                    let bv = &nodes[b].value;
                    let da = accum(grads, a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let row = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if nodes[b].needs_grad {
                    // dB = Aᵀ · G
                    let av = &nodes[a].value;
                    let db = accum(grads, b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            &Op::Linear { w, x, b } => {
                let n = nodes[x].value.len();
                if nodes[w].needs_grad {
                    let xv = &nodes[x].value;
                    let dw = accum(grads, w, g.len() * n);
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (d, xj) in dw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *d += gi * xj;
                        }
                    }
                }
                if nodes[x].needs_grad {
                    let wv = &nodes[w].value;
                    let dx = accum(grads, x, n);
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (d, wij) in dx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *d += gi * wij;
                        }
                    }
                }
                if nodes[b].needs_grad {
                    let db = accum(grads, b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::Binary { kind, a, b, bc } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let at = |v: &Vec<f64>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
                for (side, target) in [(0, a), (1, b)] {
                    if !nodes[target].needs_grad {
                        continue;
                    }
                    let scalar_side = matches!((side, bc), (0, Broadcast::Left) | (1, Broadcast::Right));
                    let len = nodes[target].value.len();
                    let local = |i: usize| -> f64 {
                        match (kind, side) {
                            (Binary::Add, _) => 1.0,
                            (Binary::Sub, 0) => 1.0,
                            (Binary::Sub, _) => -1.0,
                            (Binary::Mul, 0) => at(bv, i),
                            (Binary::Mul, _) => at(av, i),
                        }
                    };
                    let d = accum(grads, target, len);
                    if scalar_side {
                        d[0] += g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum::<f64>();
                    } else {
                        d.iter_mut()
                            .zip(g)
                            .enumerate()
                            .for_each(|(i, (dv, gi))| *dv += gi * local(i));
                    }
                }
            }
            &Op::Unary { kind, a } => {
                if !nodes[a].needs_grad {
                    return;
                }
                let (x, y) = (&nodes[a].value, &node.value);
                let d = accum(grads, a, x.len());
                for i in 0..x.len() {
                    let local = match kind {
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Log => 1.0 / x[i],
                        Unary::Exp => y[i],
                    };
                    d[i] += g[i] * local;
                }
            }
            &Op::LogFloor { a, floor } => {
                if !nodes[a].needs_grad {
                    return;
                }
                let x = &nodes[a].value;
                let d = accum(grads, a, x.len());
                for i in 0..x.len() {
                    if x[i] > floor {
                        d[i] += g[i] / x[i];
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if nodes[a].needs_grad {
                    let d = accum(grads, a, g.len());
                    d.iter_mut().zip(g).for_each(|(dv, gi)| *dv += gi * factor);
                }
            }
            &Op::Offset { a } => {
                if nodes[a].needs_grad {
                    let d = accum(grads, a, g.len());
                    d.iter_mut().zip(g).for_each(|(dv, gi)| *dv += gi);
                }
            }
            &Op::Square { a } => {
                if nodes[a].needs_grad {
                    let x = &nodes[a].value;
                    let d = accum(grads, a, g.len());
                    for i in 0..g.len() {
                        d[i] += 2.0 * x[i] * g[i];
                    }
                }
            }
            &Op::Softmax { a } => {
                if nodes[a].needs_grad {
                    // J^T g = y ⊙ (g − ⟨g, y⟩)
                    let y = &node.value;
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    let d = accum(grads, a, y.len());
                    for i in 0..y.len() {
                        d[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            &Op::Sum { a } => {
                if nodes[a].needs_grad {
                    let len = nodes[a].value.len();
                    let d = accum(grads, a, len);
                    d.iter_mut().for_each(|dv| *dv += g[0]);
                }
            }
            Op::Mean { parts } => {
                let inv = 1.0 / parts.len() as f64;
                for &p in parts {
                    if nodes[p].needs_grad {
                        let d = accum(grads, p, g.len());
                        d.iter_mut().zip(g).for_each(|(dv, gi)| *dv += gi * inv);
                    }
                }
            }
            &Op::Pick { a, at } => {
                if nodes[a].needs_grad {
                    let len = nodes[a].value.len();
                    accum(grads, a, len)[at] += g[0];
                }
            }
            &Op::Slice { a, start } => {
                if nodes[a].needs_grad {
                    let len = nodes[a].value.len();
                    let d = accum(grads, a, len);
                    d[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(dv, gi)| *dv += gi);
                }
            }
        }
        debug_assert!(idx < grads.len());
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Result of one backward sweep. Nodes the sweep never reached have no entry.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given shape when unreachable.
    pub fn tensor_or_zero(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i2 = g.constant(&Tensor::identity(2)).unwrap();
        let m = g
            .constant(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projector_matmul() {
        let mut g = Graph::new();
        let p = g
            .constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let col = g
            .constant(&Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap())
            .unwrap();
        let out = g.matmul(p, col).unwrap();
        assert_eq!(g.value(out).unwrap(), &[5.0, 0.0]);
        assert_eq!(g.shape(out).unwrap(), vec![2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.vector(&[-0.5, 0.0, 2.0]).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).unwrap(), &[0.0, 0.0, 2.0]);
        let z = g.vector(&[0.0]).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).unwrap(), &[0.5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.vector(&[1.0, 0.0]).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.0])).unwrap();
        let t = g.scale(x, f64::INFINITY).unwrap();
        let bad = g.offset(t, f64::NEG_INFINITY).unwrap();
        assert!(matches!(g.tanh(bad), Err(Error::Numeric { .. })));
    }

    #[test]
    fn binary_requires_equal_shapes_or_scalar() {
        let mut g = Graph::new();
        let a = g.vector(&[1.0, 2.0]).unwrap();
        let b = g.vector(&[1.0, 2.0, 3.0]).unwrap();
        assert!(g.add(a, b).is_err());
        let s = g.vector(&[3.0]).unwrap();
        let out = g.mul(s, b).unwrap();
        assert_eq!(g.value(out).unwrap(), &[3.0, 6.0, 9.0]);
    }

    #[test]
    fn tanh_gradient_matches_closed_form() {
        // 1 - tanh(0.3)^2 = 0.9151369618...
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![0.3])).unwrap();
        let y = g.tanh(x).unwrap();
        let grads = g.backward(y).unwrap();
        let fd = ((0.3f64 + 1e-5).tanh() - (0.3f64 - 1e-5).tanh()) / 2e-5;
        assert!(close(grads.get(x).unwrap()[0], 0.915137, 1e-6));
        assert!(close(grads.get(x).unwrap()[0], fd, 1e-9));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let a = g.vector(&[0.0, 0.0]).unwrap();
        let sa = g.softmax(a).unwrap();
        assert_eq!(g.value(sa).unwrap(), &[0.5, 0.5]);

        let b = g.vector(&[1000.0, 1000.0, 1000.0]).unwrap();
        let sb = g.softmax(b).unwrap();
        for v in g.value(sb).unwrap() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }

        // exp(k)/(e + e^2 + e^3), evaluated at high precision:
        // 0.0900305731703805, 0.2447284710547976, 0.6652409557748219
        let c = g.vector(&[1.0, 2.0, 3.0]).unwrap();
        let sc = g.softmax(c).unwrap();
        let expected = [0.0900305731703805, 0.2447284710547976, 0.6652409557748219];
        for (v, e) in g.value(sc).unwrap().iter().zip(expected) {
            assert!(close(*v, e, 1e-14));
        }
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap()).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn constant_root_gives_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let c = g.vector(&[4.0]).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.tensor_or_zero(p, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn released_graph_rejects_use() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::from_vec(vec![1.0])).unwrap();
        g.release();
        assert!(g.tanh(p).is_err());
        assert!(!g.owns(p));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let p = g1.param(&Tensor::from_vec(vec![1.0])).unwrap();
        assert!(g2.tanh(p).is_err());
    }
}
