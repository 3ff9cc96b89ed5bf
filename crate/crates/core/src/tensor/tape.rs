use std::cell::{Ref, RefCell};
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Position of a node on its tape.
pub type NodeId = usize;

/// Recorded operation with the ids of its inputs. The local gradient rule of
/// each variant lives in [`Tape::backward`].
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    /// `x` is `[n_in]` or `[rows, n_in]`, `w` is `[n_out, n_in]`, `b` is `[n_out]`.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// `x` is `[rows, c]`; `scale` and `shift` are `[c]`.
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    Relu(NodeId),
    Softmax(NodeId),
    CrossEntropy { probs: NodeId, target: usize },
    /// Input is `[c, ...]`, reduced over everything after the channel axis.
    ChannelMean(NodeId),
    ChannelVar(NodeId),
    L1(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// `[rows, k]` -> `[k]`.
    MeanRows(NodeId),
    /// Each input is `[c, n_i]` (any trailing shape); output is `[c, sum n_i]`.
    ConcatChannels(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that is never reported as a parameter.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn var(&self, id: NodeId) -> Result<Var<'_>> {
        if id < self.len() {
            Ok(Var { tape: self, id })
        } else {
            Err(Error::Contract(format!("node {id} is not on this tape")))
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, trainable: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, trainable });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar node. The seed gradient is 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let Some(root) = nodes.get(loss) else {
            return Err(Error::Contract(format!("node {loss} is not on this tape")));
        };
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &nodes, |ga| add_into(ga, &g));
                    accumulate(&mut grads, *b, &nodes, |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &nodes, |ga| add_into(ga, &g));
                    accumulate(&mut grads, *b, &nodes, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(d, s)| *d -= s)
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                    accumulate(&mut grads, *b, &nodes, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(d, v)| *d += s * v)
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    accumulate(&mut grads, *a, &nodes, |ga| ga.iter_mut().for_each(|d| *d += g0));
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = nodes[*w].value.data();
                    let n_in = *xv.shape().last().unwrap();
                    let n_out = nodes[*b].value.len();
                    let rows = xv.len() / n_in;
                    let xd = xv.data();
                    accumulate(&mut grads, *x, &nodes, |gx| {
                        for r in 0..rows {
                            let go = &g[r * n_out..(r + 1) * n_out];
                            let gxr = &mut gx[r * n_in..(r + 1) * n_in];
                            for (i, &gi) in go.iter().enumerate() {
                                let wr = &wv[i * n_in..(i + 1) * n_in];
                                for j in 0..n_in {
                                    gxr[j] += gi * wr[j];
                                }
                            }
                        }
                    });
                    accumulate(&mut grads, *w, &nodes, |gw| {
                        for r in 0..rows {
                            let go = &g[r * n_out..(r + 1) * n_out];
                            let xr = &xd[r * n_in..(r + 1) * n_in];
                            for (i, &gi) in go.iter().enumerate() {
                                let gwr = &mut gw[i * n_in..(i + 1) * n_in];
                                for j in 0..n_in {
                                    gwr[j] += gi * xr[j];
                                }
                            }
                        }
                    });
                    accumulate(&mut grads, *b, &nodes, |gb| {
                        for r in 0..rows {
                            for i in 0..n_out {
                                gb[i] += g[r * n_out + i];
                            }
                        }
                    });
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xd = nodes[*x].value.data();
                    let sd = nodes[*scale].value.data();
                    let c = sd.len();
                    accumulate(&mut grads, *x, &nodes, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * sd[i % c];
                        }
                    });
                    accumulate(&mut grads, *scale, &nodes, |gs| {
                        for i in 0..g.len() {
                            gs[i % c] += g[i] * xd[i];
                        }
                    });
                    accumulate(&mut grads, *shift, &nodes, |gb| {
                        for i in 0..g.len() {
                            gb[i % c] += g[i];
                        }
                    });
                }
                Op::Relu(a) => {
                    let ad = nodes[*a].value.data();
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for i in 0..ga.len() {
                            if ad[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let p = out.data();
                    let dot: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += p[i] * (g[i] - dot);
                        }
                    });
                }
                Op::CrossEntropy { probs, target } => {
                    let p = nodes[*probs].value.data()[*target];
                    let g0 = g[0];
                    accumulate(&mut grads, *probs, &nodes, |gp| {
                        gp[*target] -= g0 / (p + super::ops::CE_FLOOR);
                    });
                }
                Op::ChannelMean(a) => {
                    let c = out.len();
                    let n = nodes[*a].value.len() / c;
                    let inv = 1.0 / n as f64;
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for ch in 0..c {
                            let gc = g[ch] * inv;
                            ga[ch * n..(ch + 1) * n].iter_mut().for_each(|d| *d += gc);
                        }
                    });
                }
                Op::ChannelVar(a) => {
                    let ad = nodes[*a].value.data();
                    let c = out.len();
                    let n = ad.len() / c;
                    let inv = 1.0 / n as f64;
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for ch in 0..c {
                            let row = &ad[ch * n..(ch + 1) * n];
                            let mean = row.iter().sum::<f64>() * inv;
                            let k = 2.0 * g[ch] * inv;
                            for (d, &x) in ga[ch * n..(ch + 1) * n].iter_mut().zip(row) {
                                *d += k * (x - mean);
                            }
                        }
                    });
                }
                Op::L1(a, b) => {
                    let ad = nodes[*a].value.data();
                    let bd = nodes[*b].value.data();
                    let g0 = g[0];
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g0 * sign(ad[i] - bd[i]);
                        }
                    });
                    accumulate(&mut grads, *b, &nodes, |gb| {
                        for i in 0..gb.len() {
                            gb[i] -= g0 * sign(ad[i] - bd[i]);
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[1], out.shape()[0]);
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, *a, &nodes, |ga| add_into(ga, &g));
                }
                Op::MeanRows(a) => {
                    let k = out.len();
                    let rows = nodes[*a].value.len() / k;
                    let inv = 1.0 / rows as f64;
                    accumulate(&mut grads, *a, &nodes, |ga| {
                        for r in 0..rows {
                            for j in 0..k {
                                ga[r * k + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::ConcatChannels(parts) => {
                    let c = out.shape()[0];
                    let total = out.len() / c;
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len() / c;
                        accumulate(&mut grads, p, &nodes, |gp| {
                            for ch in 0..c {
                                let src = &g[ch * total + offset..ch * total + offset + n];
                                add_into(&mut gp[ch * n..(ch + 1) * n], src);
                            }
                        });
                        offset += n;
                    }
                }
            }
            grads[id] = Some(g);
        }

        let trainable = nodes.iter().map(|n| n.trainable).collect();
        Ok(Gradients { grads, trainable })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    nodes: &[Node],
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient for a node; nodes the loss does not depend on get zeros.
    pub fn get(&self, var: Var<'_>) -> Vec<f64> {
        self.get_id(var.id, var.value().len())
    }

    pub fn get_id(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.trainable.get(id).copied().unwrap_or(false)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }
}
