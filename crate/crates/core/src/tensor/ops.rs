//! Differentiable operations. Each function computes its forward value and
//! records a node whose gradient rule is applied by [`Tape::backward`].
//!
//! [`Tape::backward`]: super::Tape::backward

use super::tape::Op;
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to the target probability inside [`cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    a.same_tape(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "add")?;
    let out = {
        let (av, bv) = (a.value(), b.value());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    };
    Ok(a.tape().push(out, Op::Add(a.id(), b.id()), false))
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "sub")?;
    let out = {
        let (av, bv) = (a.value(), b.value());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    };
    Ok(a.tape().push(out, Op::Sub(a.id(), b.id()), false))
}

/// Elementwise product.
pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "mul")?;
    let out = {
        let (av, bv) = (a.value(), b.value());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    };
    Ok(a.tape().push(out, Op::Mul(a.id(), b.id()), false))
}

pub fn scale(a: Var<'_>, factor: f64) -> Var<'_> {
    let out = {
        let av = a.value();
        Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect())
    };
    a.tape().push(out, Op::Scale(a.id(), factor), false)
}

pub fn sum(a: Var<'_>) -> Var<'_> {
    let total = a.value().data().iter().sum();
    a.tape().push(Tensor::scalar(total), Op::Sum(a.id()), false)
}

/// Affine map `y = W x + b`.
///
/// `x` may be a vector `[n_in]` or a batch of rows `[rows, n_in]`; the same
/// weights apply to every row.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.same_tape(&w)?;
    x.same_tape(&b)?;
    let out = {
        let (xv, wv, bv) = (x.value(), w.value(), b.value());
        let ws = wv.shape();
        if ws.len() != 2 {
            return Err(Error::Dimension(format!("linear: weight must be 2-D, got {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if bv.shape() != [n_out] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?} does not match {n_out} outputs",
                bv.shape()
            )));
        }
        let xs = xv.shape();
        let rows = match xs {
            [n] if *n == n_in => 1,
            [r, n] if *n == n_in => *r,
            _ => {
                return Err(Error::Dimension(format!(
                    "linear: input shape {xs:?} does not match weight {ws:?}"
                )))
            }
        };
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut data = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            for i in 0..n_out {
                let wr = &wd[i * n_in..(i + 1) * n_in];
                let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                data.push(dot + bd[i]);
            }
        }
        let shape = if xs.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        Tensor::from_parts(shape, data)
    };
    Ok(x.tape().push(out, Op::Linear { x: x.id(), w: w.id(), b: b.id() }, false))
}

/// Per-channel `y[r, c] = x[r, c] * scale[c] + shift[c]` on a `[rows, c]` input.
pub fn channel_affine<'t>(x: Var<'t>, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    x.same_tape(&scale)?;
    x.same_tape(&shift)?;
    let out = {
        let (xv, sv, bv) = (x.value(), scale.value(), shift.value());
        let c = sv.len();
        if xv.shape().len() != 2 || xv.shape()[1] != c || bv.len() != c {
            return Err(Error::Dimension(format!(
                "channel_affine: input {:?}, scale {:?}, shift {:?}",
                xv.shape(),
                sv.shape(),
                bv.shape()
            )));
        }
        let (sd, bd) = (sv.data(), bv.data());
        let data = xv.data().iter().enumerate().map(|(i, v)| v * sd[i % c] + bd[i % c]).collect();
        Tensor::from_parts(xv.shape().to_vec(), data)
    };
    Ok(x.tape().push(
        out,
        Op::ChannelAffine { x: x.id(), scale: scale.id(), shift: shift.id() },
        false,
    ))
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu(x: Var<'_>) -> Var<'_> {
    let out = {
        let xv = x.value();
        Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect())
    };
    x.tape().push(out, Op::Relu(x.id()), false)
}

/// Max-shifted softmax over a vector of logits.
pub fn softmax(logits: Var<'_>) -> Result<Var<'_>> {
    let out = {
        let lv = logits.value();
        if lv.shape().len() != 1 {
            return Err(Error::Dimension(format!("softmax expects a vector, got {:?}", lv.shape())));
        }
        Tensor::vector(softmax_values(lv.data()))
    };
    Ok(logits.tape().push(out, Op::Softmax(logits.id()), false))
}

pub(crate) fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-ln(probs[target] + 1e-12)`.
pub fn cross_entropy(probs: Var<'_>, target: usize) -> Result<Var<'_>> {
    let value = {
        let pv = probs.value();
        if pv.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects a probability vector, got {:?}",
                pv.shape()
            )));
        }
        if target >= pv.len() {
            return Err(Error::Index(format!("target {target} out of range for {} classes", pv.len())));
        }
        -(pv.data()[target] + CE_FLOOR).ln()
    };
    Ok(probs.tape().push(Tensor::scalar(value), Op::CrossEntropy { probs: probs.id(), target }, false))
}

/// Per-channel mean and population variance of a `[c, t, h, w]` tensor,
/// reduced over every axis after the first.
pub fn mean_var(x: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let (means, vars) = {
        let xv = x.value();
        let shape = xv.shape();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("mean_var needs a channel axis plus reduction axes, got {shape:?}")));
        }
        channel_moments(xv.data(), shape[0])
    };
    let tape = x.tape();
    let m = tape.push(Tensor::vector(means), Op::ChannelMean(x.id()), false);
    let v = tape.push(Tensor::vector(vars), Op::ChannelVar(x.id()), false);
    Ok((m, v))
}

/// Two-pass per-channel moments over a channel-major buffer.
pub(crate) fn channel_moments(data: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() / channels;
    let inv = 1.0 / n as f64;
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for row in data.chunks_exact(n) {
        let mean = row.iter().sum::<f64>() * inv;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// `sum_i |a_i - b_i|`; the subgradient at ties is 0.
pub fn l1_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "l1_distance")?;
    let value = {
        let (av, bv) = (a.value(), b.value());
        av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum()
    };
    Ok(a.tape().push(Tensor::scalar(value), Op::L1(a.id(), b.id()), false))
}

/// Transpose of a 2-D tensor.
pub fn transpose(x: Var<'_>) -> Result<Var<'_>> {
    let out = {
        let xv = x.value();
        let [r, c] = xv.shape() else {
            return Err(Error::Dimension(format!("transpose expects 2-D, got {:?}", xv.shape())));
        };
        let (r, c) = (*r, *c);
        let d = xv.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], data)
    };
    Ok(x.tape().push(out, Op::Transpose(x.id()), false))
}

pub fn reshape(x: Var<'_>, shape: Vec<usize>) -> Result<Var<'_>> {
    let out = x.value().reshaped(shape)?;
    Ok(x.tape().push(out, Op::Reshape(x.id()), false))
}

/// Average over the rows of a `[rows, k]` tensor.
pub fn mean_rows(x: Var<'_>) -> Result<Var<'_>> {
    let out = {
        let xv = x.value();
        let [rows, k] = xv.shape() else {
            return Err(Error::Dimension(format!("mean_rows expects 2-D, got {:?}", xv.shape())));
        };
        let (rows, k) = (*rows, *k);
        let mut acc = vec![0.0; k];
        for row in xv.data().chunks_exact(k) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / rows as f64;
        Tensor::vector(acc.into_iter().map(|v| v * inv).collect())
    };
    Ok(x.tape().push(out, Op::MeanRows(x.id()), false))
}

/// Joins channel-major tensors along their non-channel extent:
/// `[c, n_1..] ++ [c, n_2..] -> [c, n_1 + n_2]`.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let c = first.shape()[0];
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p)?;
        let s = p.shape();
        if s[0] != c || s.len() < 2 {
            return Err(Error::Dimension(format!("concat_channels: shape {s:?} vs {c} channels")));
        }
        sizes.push(p.value().len() / c);
    }
    let total: usize = sizes.iter().sum();
    let mut data = vec![0.0; c * total];
    let mut offset = 0;
    for (p, &n) in parts.iter().zip(&sizes) {
        let pv = p.value();
        for ch in 0..c {
            data[ch * total + offset..ch * total + offset + n]
                .copy_from_slice(&pv.data()[ch * n..(ch + 1) * n]);
        }
        offset += n;
    }
    let ids = parts.iter().map(|p| p.id()).collect();
    Ok(first.tape().push(Tensor::from_parts(vec![c, total], data), Op::ConcatChannels(ids), false))
}
