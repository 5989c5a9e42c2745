//! Reverse-mode gradient engine with first-class forward tangents.
//!
//! The tape records vector-valued nodes over a batch of samples. Every
//! node value is a "jet": a primal plus `k` tangent components, one per
//! seeded input direction. Tangents propagate forward through every
//! primitive, and the backward pass differentiates through them, so the
//! parameter gradient of an input derivative (e.g. ∂ρ̂/∂x inside a PDE
//! residual) comes out of the same reverse sweep as any other scalar.
//!
//! Value layout per node: `[sample][component][jet]`, jet index 0 is the
//! primal and 1..=k are the tangents.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("backward requires a scalar output node, got dim {0} x batch {1}")]
    NonScalarOutput(usize, usize),
    #[error("shape mismatch between nodes: {0} vs {1}")]
    ShapeMismatch(String, String),
    #[error("tangent seed index {0} out of range (k = {1})")]
    BadTangentIndex(usize, usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A single jet value: primal plus tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub primal: f64,
    pub tangents: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    Param { offset: usize },
    Affine { x: NodeId, w: NodeId, b: NodeId, in_dim: usize, out_dim: usize },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise division. The denominator primal is floored at `floor`
    /// (0.0 means no floor); when the floor is active the derivative
    /// through the denominator is zero.
    Div { num: NodeId, den: NodeId, floor: f64 },
    Square(NodeId),
    Powi(NodeId, i32),
    Scale(NodeId, f64),
    /// Mean over all samples and components; produces a scalar jet.
    MeanAll(NodeId),
    /// Extracts tangent component `seed` as a new primal; its own
    /// tangents are zero.
    Tangent(NodeId, usize),
}

struct Node {
    op: Op,
    dim: usize,
    batch: usize,
    value: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// Number of seeded tangent directions carried by every node.
    n_tangents: usize,
    /// Length of the full parameter vector gradients are reported over.
    param_len: usize,
}

impl Tape {
    pub fn new(param_len: usize, n_tangents: usize) -> Self {
        Tape { nodes: Vec::new(), n_tangents, param_len }
    }

    pub fn n_tangents(&self) -> usize {
        self.n_tangents
    }

    fn jets(&self) -> usize {
        self.n_tangents + 1
    }

    fn push(&mut self, op: Op, dim: usize, batch: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), dim * batch * self.jets());
        self.nodes.push(Node { op, dim, batch, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.dim, n.batch)
    }

    /// Raw jet storage of a node: `[sample][component][jet]`.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Primal of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        debug_assert_eq!(n.dim * n.batch, 1);
        n.value[0]
    }

    /// Primal values of one sample across components.
    pub fn primals(&self, id: NodeId, sample: usize) -> Vec<f64> {
        let n = &self.nodes[id.0];
        let j = self.jets();
        (0..n.dim).map(|i| n.value[(sample * n.dim + i) * j]).collect()
    }

    pub fn jet(&self, id: NodeId, sample: usize, component: usize) -> DualValue {
        let n = &self.nodes[id.0];
        let j = self.jets();
        let base = (sample * n.dim + component) * j;
        DualValue {
            primal: n.value[base],
            tangents: n.value[base + 1..base + j].to_vec(),
        }
    }

    /// Batched input with zero tangents. `primal` is `[sample][component]`.
    pub fn input(&mut self, primal: &[f64], dim: usize, batch: usize) -> NodeId {
        let j = self.jets();
        let mut v = vec![0.0; dim * batch * j];
        for (slot, p) in primal.iter().enumerate() {
            v[slot * j] = *p;
        }
        self.push(Op::Input, dim, batch, v)
    }

    /// Batched input with seeded tangents. `tangents[a]` has the same
    /// `[sample][component]` layout as `primal`.
    pub fn input_with_tangents(
        &mut self,
        primal: &[f64],
        tangents: &[&[f64]],
        dim: usize,
        batch: usize,
    ) -> Result<NodeId, AdError> {
        if tangents.len() != self.n_tangents {
            return Err(AdError::BadTangentIndex(tangents.len(), self.n_tangents));
        }
        let j = self.jets();
        let mut v = vec![0.0; dim * batch * j];
        for slot in 0..dim * batch {
            v[slot * j] = primal[slot];
            for (a, t) in tangents.iter().enumerate() {
                v[slot * j + 1 + a] = t[slot];
            }
        }
        Ok(self.push(Op::Input, dim, batch, v))
    }

    pub fn constant(&mut self, primal: &[f64], dim: usize, batch: usize) -> NodeId {
        let j = self.jets();
        let mut v = vec![0.0; dim * batch * j];
        for (slot, p) in primal.iter().enumerate() {
            v[slot * j] = *p;
        }
        self.push(Op::Const, dim, batch, v)
    }

    /// Registers a slice of the full parameter vector. Gradients from
    /// [`Tape::backward`] land at `offset`; untouched positions stay
    /// zero, which is what makes per-objective gradients full-length.
    pub fn param(&mut self, theta: &[f64], offset: usize, len: usize) -> NodeId {
        let j = self.jets();
        let mut v = vec![0.0; len * j];
        for i in 0..len {
            v[i * j] = theta[offset + i];
        }
        self.push(Op::Param { offset }, len, 1, v)
    }

    fn unary_shape(&self, x: NodeId) -> (usize, usize) {
        self.shape(x)
    }

    fn binary_shape(&self, a: NodeId, b: NodeId) -> Result<(usize, usize), AdError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AdError::ShapeMismatch(format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (dim, batch) = self.binary_shape(a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), dim, batch, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (dim, batch) = self.binary_shape(a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), dim, batch, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (dim, batch) = self.binary_shape(a, b)?;
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            let u = &self.nodes[a.0].value[s * j..(s + 1) * j];
            let w = &self.nodes[b.0].value[s * j..(s + 1) * j];
            v[s * j] = u[0] * w[0];
            for c in 1..j {
                v[s * j + c] = u[c] * w[0] + u[0] * w[c];
            }
        }
        Ok(self.push(Op::Mul(a, b), dim, batch, v))
    }

    pub fn div(&mut self, num: NodeId, den: NodeId, floor: f64) -> Result<NodeId, AdError> {
        let (dim, batch) = self.binary_shape(num, den)?;
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            let u = &self.nodes[num.0].value[s * j..(s + 1) * j];
            let w = &self.nodes[den.0].value[s * j..(s + 1) * j];
            let d = if floor > 0.0 { w[0].max(floor) } else { w[0] };
            let g = if floor > 0.0 && w[0] <= floor { 0.0 } else { 1.0 };
            v[s * j] = u[0] / d;
            for c in 1..j {
                v[s * j + c] = u[c] / d - u[0] * g * w[c] / (d * d);
            }
        }
        Ok(self.push(Op::Div { num, den, floor }, dim, batch, v))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (dim, batch) = self.unary_shape(x);
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
            let y = u[0].tanh();
            let sech2 = 1.0 - y * y;
            v[s * j] = y;
            for c in 1..j {
                v[s * j + c] = sech2 * u[c];
            }
        }
        self.push(Op::Tanh(x), dim, batch, v)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let (dim, batch) = self.unary_shape(x);
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
            v[s * j] = u[0] * u[0];
            for c in 1..j {
                v[s * j + c] = 2.0 * u[0] * u[c];
            }
        }
        self.push(Op::Square(x), dim, batch, v)
    }

    pub fn powi(&mut self, x: NodeId, n: i32) -> NodeId {
        let (dim, batch) = self.unary_shape(x);
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
            v[s * j] = u[0].powi(n);
            let dp = f64::from(n) * u[0].powi(n - 1);
            for c in 1..j {
                v[s * j + c] = dp * u[c];
            }
        }
        self.push(Op::Powi(x, n), dim, batch, v)
    }

    pub fn scale_node(&mut self, x: NodeId, c: f64) -> NodeId {
        let (dim, batch) = self.unary_shape(x);
        let v: Vec<f64> = self.nodes[x.0].value.iter().map(|u| c * u).collect();
        self.push(Op::Scale(x, c), dim, batch, v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let (dim, batch) = self.unary_shape(x);
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; j];
        for s in 0..slots {
            for c in 0..j {
                v[c] += self.nodes[x.0].value[s * j + c];
            }
        }
        for c in 0..j {
            v[c] /= slots as f64;
        }
        self.push(Op::MeanAll(x), 1, 1, v)
    }

    /// New node whose primal is tangent component `seed` of `x`.
    pub fn tangent(&mut self, x: NodeId, seed: usize) -> Result<NodeId, AdError> {
        if seed >= self.n_tangents {
            return Err(AdError::BadTangentIndex(seed, self.n_tangents));
        }
        let (dim, batch) = self.unary_shape(x);
        let j = self.jets();
        let slots = dim * batch;
        let mut v = vec![0.0; slots * j];
        for s in 0..slots {
            v[s * j] = self.nodes[x.0].value[s * j + 1 + seed];
        }
        Ok(self.push(Op::Tangent(x, seed), dim, batch, v))
    }

    /// Affine layer y = Wx + b over the batch. `w` is a param/const node
    /// of dim `out_dim * in_dim` (row-major), `b` of dim `out_dim`.
    pub fn affine(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<NodeId, AdError> {
        let (xd, batch) = self.shape(x);
        let (wd, wb) = self.shape(w);
        let (bd, bb) = self.shape(b);
        if xd != in_dim || wd != out_dim * in_dim || bd != out_dim || wb != 1 || bb != 1 {
            return Err(AdError::ShapeMismatch(
                format!("x {xd}, w {wd}, b {bd}"),
                format!("in {in_dim}, out {out_dim}"),
            ));
        }
        let j = self.jets();
        let mut v = vec![0.0; out_dim * batch * j];
        // W and b carry no tangents (parameters are not seeded), so the
        // tangent of y is W times the tangent of x.
        for s in 0..batch {
            for o in 0..out_dim {
                let out_base = (s * out_dim + o) * j;
                v[out_base] = self.nodes[b.0].value[o * j];
                for i in 0..in_dim {
                    let wv = self.nodes[w.0].value[(o * in_dim + i) * j];
                    let in_base = (s * in_dim + i) * j;
                    for c in 0..j {
                        v[out_base + c] += wv * self.nodes[x.0].value[in_base + c];
                    }
                }
            }
        }
        Ok(self.push(Op::Affine { x, w, b, in_dim, out_dim }, out_dim, batch, v))
    }

    /// Mean of squared differences between two nodes — the MSE building
    /// block used by every loss.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AdError> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from a scalar output. Returns ∂output/∂θ over the
    /// full parameter vector; parameters never touched by this tape get
    /// zeros.
    pub fn backward(&self, output: NodeId) -> Result<Vec<f64>, AdError> {
        let (od, ob) = self.shape(output);
        if od != 1 || ob != 1 {
            return Err(AdError::NonScalarOutput(od, ob));
        }
        let j = self.jets();
        let mut adjoints: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.dim * n.batch * j])
            .collect();
        adjoints[output.0][0] = 1.0;

        let mut grad = vec![0.0; self.param_len];

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let adj = std::mem::take(&mut adjoints[idx]);
            if adj.iter().all(|a| *a == 0.0) {
                continue;
            }
            match node.op {
                Op::Input | Op::Const => {}
                Op::Param { offset } => {
                    for i in 0..node.dim {
                        grad[offset + i] += adj[i * j];
                    }
                }
                Op::Add(a, b) => {
                    for (x, y) in adjoints[a.0].iter_mut().zip(&adj) {
                        *x += y;
                    }
                    for (x, y) in adjoints[b.0].iter_mut().zip(&adj) {
                        *x += y;
                    }
                }
                Op::Sub(a, b) => {
                    for (x, y) in adjoints[a.0].iter_mut().zip(&adj) {
                        *x += y;
                    }
                    for (x, y) in adjoints[b.0].iter_mut().zip(&adj) {
                        *x -= y;
                    }
                }
                Op::Mul(a, b) => {
                    let slots = node.dim * node.batch;
                    for s in 0..slots {
                        let u = &self.nodes[a.0].value[s * j..(s + 1) * j];
                        let w = &self.nodes[b.0].value[s * j..(s + 1) * j];
                        let ys = &adj[s * j..(s + 1) * j];
                        let ua = &mut adjoints[a.0][s * j..(s + 1) * j];
                        ua[0] += ys[0] * w[0];
                        for c in 1..j {
                            ua[0] += ys[c] * w[c];
                            ua[c] += ys[c] * w[0];
                        }
                        let wa = &mut adjoints[b.0][s * j..(s + 1) * j];
                        wa[0] += ys[0] * u[0];
                        for c in 1..j {
                            wa[0] += ys[c] * u[c];
                            wa[c] += ys[c] * u[0];
                        }
                    }
                }
                Op::Div { num, den, floor } => {
                    let slots = node.dim * node.batch;
                    for s in 0..slots {
                        let u = &self.nodes[num.0].value[s * j..(s + 1) * j];
                        let w = &self.nodes[den.0].value[s * j..(s + 1) * j];
                        let d = if floor > 0.0 { w[0].max(floor) } else { w[0] };
                        let g = if floor > 0.0 && w[0] <= floor { 0.0 } else { 1.0 };
                        let d2 = d * d;
                        let ys = &adj[s * j..(s + 1) * j];
                        {
                            let ua = &mut adjoints[num.0][s * j..(s + 1) * j];
                            ua[0] += ys[0] / d;
                            for c in 1..j {
                                ua[0] += ys[c] * (-g * w[c] / d2);
                                ua[c] += ys[c] / d;
                            }
                        }
                        {
                            let wa = &mut adjoints[den.0][s * j..(s + 1) * j];
                            wa[0] += ys[0] * (-u[0] * g / d2);
                            for c in 1..j {
                                wa[0] += ys[c] * g * (-u[c] / d2 + 2.0 * u[0] * g * w[c] / (d2 * d));
                                wa[c] += ys[c] * (-u[0] * g / d2);
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    let slots = node.dim * node.batch;
                    for s in 0..slots {
                        let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
                        let y0 = node.value[s * j];
                        let sech2 = 1.0 - y0 * y0;
                        let ys = &adj[s * j..(s + 1) * j];
                        let ua = &mut adjoints[x.0][s * j..(s + 1) * j];
                        ua[0] += ys[0] * sech2;
                        for c in 1..j {
                            ua[0] += ys[c] * (-2.0 * y0 * sech2) * u[c];
                            ua[c] += ys[c] * sech2;
                        }
                    }
                }
                Op::Square(x) => {
                    let slots = node.dim * node.batch;
                    for s in 0..slots {
                        let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
                        let ys = &adj[s * j..(s + 1) * j];
                        let ua = &mut adjoints[x.0][s * j..(s + 1) * j];
                        ua[0] += ys[0] * 2.0 * u[0];
                        for c in 1..j {
                            ua[0] += ys[c] * 2.0 * u[c];
                            ua[c] += ys[c] * 2.0 * u[0];
                        }
                    }
                }
                Op::Powi(x, n) => {
                    let slots = node.dim * node.batch;
                    let nf = f64::from(n);
                    for s in 0..slots {
                        let u = &self.nodes[x.0].value[s * j..(s + 1) * j];
                        let dp = nf * u[0].powi(n - 1);
                        let ddp = nf * (nf - 1.0) * u[0].powi(n - 2);
                        let ys = &adj[s * j..(s + 1) * j];
                        let ua = &mut adjoints[x.0][s * j..(s + 1) * j];
                        ua[0] += ys[0] * dp;
                        for c in 1..j {
                            ua[0] += ys[c] * ddp * u[c];
                            ua[c] += ys[c] * dp;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    for (xa, y) in adjoints[x.0].iter_mut().zip(&adj) {
                        *xa += c * y;
                    }
                }
                Op::MeanAll(x) => {
                    let slots = self.nodes[x.0].dim * self.nodes[x.0].batch;
                    let inv = 1.0 / slots as f64;
                    for s in 0..slots {
                        for c in 0..j {
                            adjoints[x.0][s * j + c] += adj[c] * inv;
                        }
                    }
                }
                Op::Tangent(x, seed) => {
                    let slots = node.dim * node.batch;
                    for s in 0..slots {
                        adjoints[x.0][s * j + 1 + seed] += adj[s * j];
                    }
                }
                Op::Affine { x, w, b, in_dim, out_dim } => {
                    let batch = node.batch;
                    for s in 0..batch {
                        for o in 0..out_dim {
                            let ys = &adj[(s * out_dim + o) * j..(s * out_dim + o + 1) * j];
                            adjoints[b.0][o * j] += ys[0];
                            for i in 0..in_dim {
                                let wv = self.nodes[w.0].value[(o * in_dim + i) * j];
                                let in_base = (s * in_dim + i) * j;
                                let mut wsum = 0.0;
                                for c in 0..j {
                                    let xv = self.nodes[x.0].value[in_base + c];
                                    wsum += ys[c] * xv;
                                    adjoints[x.0][in_base + c] += wv * ys[c];
                                }
                                adjoints[w.0][(o * in_dim + i) * j] += wsum;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}
