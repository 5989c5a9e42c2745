//! Multilayer perceptrons: specs, deterministic initialization,
//! parameter flattening, plain and tape-recorded forward passes.
//!
//! All hidden activations are tanh, outputs are linear. Networks address
//! their weights through offsets into a shared flat parameter vector, so
//! several networks (e.g. a density predictor plus a fundamental-diagram
//! learner) can live in one vector and receive full-length gradients.

use crate::autodiff::{NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input dim {got} does not match spec dim {want}")]
    InputDim { want: usize, got: usize },
    #[error("non-finite output at layer {0}")]
    NonFinite(usize),
    #[error("parameter vector length {got}, layout expects {want}")]
    BadLength { want: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        assert!(input_dim >= 1 && output_dim >= 1);
        assert!(hidden_layers == 0 || hidden_width >= 1);
        MlpSpec { input_dim, output_dim, hidden_layers, hidden_width }
    }

    /// Layer dims from input to output, e.g. 2→1 with 8x20 hidden gives
    /// [2, 20, ..., 20, 1].
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        let dims = self.layer_dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

/// Flat trainable parameters with their tensor layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-tensor views in layout order.
    pub fn unflatten(&self) -> Vec<(&str, (usize, usize), &[f64])> {
        self.layout
            .iter()
            .map(|e| {
                let n = e.shape.0 * e.shape.1;
                (e.name.as_str(), e.shape, &self.values[e.offset..e.offset + n])
            })
            .collect()
    }

    /// Rebuilds a flat vector from per-tensor slices; inverse of
    /// [`ParameterVector::unflatten`].
    pub fn flatten(layout: &[LayoutEntry], tensors: &[&[f64]]) -> Result<Self, NetError> {
        let total: usize = layout.iter().map(|e| e.shape.0 * e.shape.1).sum();
        let mut values = vec![0.0; total];
        for (e, t) in layout.iter().zip(tensors) {
            let n = e.shape.0 * e.shape.1;
            if t.len() != n {
                return Err(NetError::BadLength { want: n, got: t.len() });
            }
            values[e.offset..e.offset + n].copy_from_slice(t);
        }
        Ok(ParameterVector { values, layout: layout.to_vec() })
    }
}

/// An MLP bound to a region of a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub name: String,
    /// Offset of this network's first parameter in the full vector.
    pub base_offset: usize,
}

impl Mlp {
    /// (weight_offset, bias_offset, in_dim, out_dim) per layer.
    pub(crate) fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let dims = self.spec.layer_dims();
        let mut off = self.base_offset;
        let mut out = Vec::new();
        for w in dims.windows(2) {
            let (i, o) = (w[0], w[1]);
            out.push((off, off + i * o, i, o));
            off += i * o + o;
        }
        out
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        for (li, (woff, boff, i, o)) in self.layer_offsets().into_iter().enumerate() {
            entries.push(LayoutEntry {
                name: format!("{}.w{}", self.name, li),
                shape: (o, i),
                offset: woff,
            });
            entries.push(LayoutEntry {
                name: format!("{}.b{}", self.name, li),
                shape: (o, 1),
                offset: boff,
            });
        }
        entries
    }

    /// Plain forward pass, checking for NaN per layer.
    pub fn forward(&self, theta: &[f64], input: &[f64]) -> Result<Vec<f64>, NetError> {
        if input.len() != self.spec.input_dim {
            return Err(NetError::InputDim { want: self.spec.input_dim, got: input.len() });
        }
        let offsets = self.layer_offsets();
        let last = offsets.len() - 1;
        let mut x = input.to_vec();
        for (li, (woff, boff, i, o)) in offsets.into_iter().enumerate() {
            let mut y = vec![0.0; o];
            for r in 0..o {
                let mut acc = theta[boff + r];
                for c in 0..i {
                    acc += theta[woff + r * i + c] * x[c];
                }
                y[r] = if li < last { acc.tanh() } else { acc };
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite(li));
            }
            x = y;
        }
        Ok(x)
    }

    /// Records the forward pass on a tape. `x` is a batched input node
    /// of dim `input_dim`; returns the output node.
    pub fn forward_on_tape(&self, tape: &mut Tape, theta: &[f64], x: NodeId) -> NodeId {
        let offsets = self.layer_offsets();
        let last = offsets.len() - 1;
        let mut cur = x;
        for (li, (woff, boff, i, o)) in offsets.into_iter().enumerate() {
            let w = tape.param(theta, woff, o * i);
            let b = tape.param(theta, boff, o);
            cur = tape.affine(cur, w, b, i, o).expect("layer shapes are consistent");
            if li < last {
                cur = tape.tanh(cur);
            }
        }
        cur
    }

    /// Network output plus its derivatives with respect to each input
    /// coordinate, via forward tangents.
    pub fn forward_with_input_derivatives(
        &self,
        theta: &[f64],
        input: &[f64],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), NetError> {
        if input.len() != self.spec.input_dim {
            return Err(NetError::InputDim { want: self.spec.input_dim, got: input.len() });
        }
        let k = self.spec.input_dim;
        let mut tape = Tape::new(0, k);
        let seeds: Vec<Vec<f64>> = (0..k)
            .map(|a| (0..k).map(|i| if i == a { 1.0 } else { 0.0 }).collect())
            .collect();
        let seed_refs: Vec<&[f64]> = seeds.iter().map(|s| s.as_slice()).collect();
        let xin = tape
            .input_with_tangents(input, &seed_refs, k, 1)
            .expect("seed count matches tape");
        let out = self.forward_on_tape(&mut tape, theta, xin);
        let mut values = Vec::new();
        let mut derivs = vec![Vec::new(); k];
        for c in 0..self.spec.output_dim {
            let jet = tape.jet(out, 0, c);
            values.push(jet.primal);
            for a in 0..k {
                derivs[a].push(jet.tangents[a]);
            }
        }
        Ok((values, derivs))
    }
}

/// Builds a network at `base_offset` inside a (possibly larger) flat
/// vector and returns its Xavier/Glorot-initialized parameters. The RNG
/// stream is ChaCha8 seeded directly with `seed`; biases start at zero.
pub fn build_network(spec: &MlpSpec, name: &str, base_offset: usize, seed: u64) -> (Mlp, ParameterVector) {
    let net = Mlp { spec: *spec, name: name.to_string(), base_offset };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    let dims = spec.layer_dims();
    let mut off = 0;
    for w in dims.windows(2) {
        let (i, o) = (w[0], w[1]);
        let limit = (6.0 / (i + o) as f64).sqrt();
        for v in values.iter_mut().skip(off).take(i * o) {
            *v = rng.gen_range(-limit..limit);
        }
        off += i * o + o; // biases stay zero
    }
    let mut layout = net.layout();
    for e in &mut layout {
        e.offset -= base_offset;
    }
    (net, ParameterVector { values, layout })
}
