//! Reverse-mode gradient computation over the recorded op graph.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{kernels, Op, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar loss w.r.t. trainable parameters, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: String, grad: Vec<f64>) {
        self.map.insert(name, grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Elementwise accumulate another gradient map into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, grad) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grad) {
                        *a += g;
                    }
                }
                None => {
                    self.map.insert(name.clone(), grad.clone());
                }
            }
        }
    }
}

fn parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
        Op::Affine { x, .. } => vec![x],
        Op::Transpose(x)
        | Op::Relu(x)
        | Op::SpatialMean(x)
        | Op::MeanAll(x)
        | Op::SumAll(x)
        | Op::L2NormalizeRows(x) => vec![x],
        Op::Conv2d { x, kernel } => vec![x, kernel],
        Op::ChannelBias { x, bias } => vec![x, bias],
        Op::GroupMeanNorm { x, .. } => vec![x],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        Op::GatherMeanRows { table, .. } => vec![table],
        Op::ConcatRows(rows) => rows.iter().collect(),
    }
}

/// Post-order DFS over tracked nodes, iterative to keep the stack flat.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, expanded) pairs
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in parents(node.op()) {
            if p.is_tracked() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Compute gradients of a scalar `loss` w.r.t. every trainable parameter
/// in `params`. Frozen parameters receive no entry.
pub fn backward(loss: &Tensor, params: &ParamSet) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    if loss.is_tracked() {
        let order = topo_order(loss);
        grads.insert(loss.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(gout) = grads.remove(&node.id()) else { continue };
            accumulate_parent_grads(node, &gout, &mut grads);
            if matches!(node.op(), Op::Leaf) {
                // keep leaf grads for parameter collection
                grads.insert(node.id(), gout);
            }
        }
    }

    let mut out = Gradients::default();
    for (name, param) in params.iter() {
        if !param.trainable {
            continue;
        }
        let grad = grads
            .remove(&param.tensor.id())
            .unwrap_or_else(|| vec![0.0; param.tensor.numel()]);
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}

fn add_into(acc: &mut Vec<f64>, src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn push_grad(grads: &mut HashMap<u64, Vec<f64>>, target: &Tensor, grad: Vec<f64>) {
    if !target.is_tracked() {
        return;
    }
    match grads.get_mut(&target.id()) {
        Some(acc) => add_into(acc, &grad),
        None => {
            grads.insert(target.id(), grad);
        }
    }
}

fn accumulate_parent_grads(node: &Tensor, gout: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push_grad(grads, a, gout.to_vec());
            push_grad(grads, b, gout.to_vec());
        }
        Op::Sub(a, b) => {
            push_grad(grads, a, gout.to_vec());
            push_grad(grads, b, gout.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            if a.is_tracked() {
                let ga = gout.iter().zip(b.data()).map(|(g, bv)| g * bv).collect();
                push_grad(grads, a, ga);
            }
            if b.is_tracked() {
                let gb = gout.iter().zip(a.data()).map(|(g, av)| g * av).collect();
                push_grad(grads, b, gb);
            }
        }
        Op::Affine { x, scale } => {
            push_grad(grads, x, gout.iter().map(|g| g * scale).collect());
        }
        Op::Matmul(a, b) => {
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let m = b.shape()[1];
            if a.is_tracked() {
                // dA = G * B^T
                let mut bt = vec![0.0; k * m];
                kernels::transpose(b.data(), k, m, &mut bt);
                let mut ga = vec![0.0; n * k];
                kernels::matmul(gout, &bt, n, m, k, &mut ga);
                push_grad(grads, a, ga);
            }
            if b.is_tracked() {
                // dB = A^T * G
                let mut at = vec![0.0; n * k];
                kernels::transpose(a.data(), n, k, &mut at);
                let mut gb = vec![0.0; k * m];
                kernels::matmul(&at, gout, k, n, m, &mut gb);
                push_grad(grads, b, gb);
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (node.shape()[0], node.shape()[1]);
            let mut gx = vec![0.0; m * n];
            kernels::transpose(gout, m, n, &mut gx);
            push_grad(grads, x, gx);
        }
        Op::Conv2d { x, kernel } => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let f = kernel.shape()[0];
            if x.is_tracked() {
                let mut gx = vec![0.0; c * h * w];
                kernels::conv2d_grad_input(gout, kernel.data(), c, h, w, f, &mut gx);
                push_grad(grads, x, gx);
            }
            if kernel.is_tracked() {
                let mut gk = vec![0.0; f * c * 9];
                kernels::conv2d_grad_kernel(gout, x.data(), c, h, w, f, &mut gk);
                push_grad(grads, kernel, gk);
            }
        }
        Op::ChannelBias { x, bias } => {
            if x.is_tracked() {
                push_grad(grads, x, gout.to_vec());
            }
            if bias.is_tracked() {
                let plane = x.shape()[1] * x.shape()[2];
                let gb: Vec<f64> = (0..bias.numel())
                    .map(|c| gout[c * plane..(c + 1) * plane].iter().sum())
                    .collect();
                push_grad(grads, bias, gb);
            }
        }
        Op::Relu(x) => {
            let gx = gout
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            push_grad(grads, x, gx);
        }
        Op::GroupMeanNorm { x, groups } => {
            // y = x - mean_g(x), so dy/dx = g - mean_g(g) per group
            let group_len = x.numel() / groups;
            let mut gx = gout.to_vec();
            for g in 0..*groups {
                let chunk = &mut gx[g * group_len..(g + 1) * group_len];
                let mean = chunk.iter().sum::<f64>() / group_len as f64;
                for v in chunk.iter_mut() {
                    *v -= mean;
                }
            }
            push_grad(grads, x, gx);
        }
        Op::SpatialMean(x) => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let plane = h * w;
            let inv = 1.0 / plane as f64;
            let mut gx = vec![0.0; c * plane];
            for ci in 0..c {
                let g = gout[ci] * inv;
                for v in &mut gx[ci * plane..(ci + 1) * plane] {
                    *v = g;
                }
            }
            push_grad(grads, x, gx);
        }
        Op::MeanAll(x) => {
            let g = gout[0] / x.numel() as f64;
            push_grad(grads, x, vec![g; x.numel()]);
        }
        Op::SumAll(x) => {
            push_grad(grads, x, vec![gout[0]; x.numel()]);
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let scale = gout[0] / n as f64;
            let mut gx = logits.data().to_vec();
            for (i, &t) in targets.iter().enumerate() {
                let row = &mut gx[i * k..(i + 1) * k];
                kernels::softmax_row(row);
                row[t] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            push_grad(grads, logits, gx);
        }
        Op::L2NormalizeRows(x) => {
            // y = x / |x|; dx = (g - (g . y) y) / |x|
            let (n, e) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![0.0; n * e];
            for i in 0..n {
                let xrow = &x.data()[i * e..(i + 1) * e];
                let yrow = &node.data()[i * e..(i + 1) * e];
                let grow = &gout[i * e..(i + 1) * e];
                let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for j in 0..e {
                    gx[i * e + j] = (grow[j] - dot * yrow[j]) / norm;
                }
            }
            push_grad(grads, x, gx);
        }
        Op::GatherMeanRows { table, lists } => {
            let e = table.shape()[1];
            let mut gt = vec![0.0; table.numel()];
            for (i, list) in lists.iter().enumerate() {
                let inv = 1.0 / list.len() as f64;
                let grow = &gout[i * e..(i + 1) * e];
                for &r in list {
                    for (t, g) in gt[r * e..(r + 1) * e].iter_mut().zip(grow) {
                        *t += g * inv;
                    }
                }
            }
            push_grad(grads, table, gt);
        }
        Op::ConcatRows(rows) => {
            let e = rows[0].numel();
            for (i, row) in rows.iter().enumerate() {
                if row.is_tracked() {
                    push_grad(grads, row, gout[i * e..(i + 1) * e].to_vec());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_set(entries: &[(&str, Tensor, bool)]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, t, trainable) in entries {
            ps.insert(name, t.clone(), *trainable).unwrap();
        }
        ps
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x=3 -> grad 6
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let ps = param_set(&[("x", x.clone(), true)]);
        let loss = ps.get("x").unwrap().mul(ps.get("x").unwrap()).unwrap().sum_all().unwrap();
        let grads = backward(&loss, &ps).unwrap();
        assert_eq!(grads.get("x").unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let ps = param_set(&[("x", x.clone(), true)]);
        let y = ps.get("x").unwrap().relu().unwrap();
        assert!(matches!(backward(&y, &ps), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_param_absent_from_gradient_map() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::param(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("w", w, false).unwrap();
        ps.insert("v", v, true).unwrap();
        let loss = ps
            .get("v")
            .unwrap()
            .matmul(ps.get("w").unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = backward(&loss, &ps).unwrap();
        assert!(grads.contains("v"));
        assert!(!grads.contains("w"));
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        // f(W) = sum(v * W); central finite differences with h = 1e-5
        let mut rng = crate::rng::SplitMix64::new(11);
        let w_data: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let v_data: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[3, 4], w_data.clone()).unwrap(), true).unwrap();
        ps.insert("v", Tensor::from_vec(&[1, 3], v_data).unwrap(), false).unwrap();

        let loss_of = |ps: &ParamSet| -> f64 {
            ps.get("v")
                .unwrap()
                .matmul(ps.get("w").unwrap())
                .unwrap()
                .sum_all()
                .unwrap()
                .item()
                .unwrap()
        };
        let loss = ps
            .get("v")
            .unwrap()
            .matmul(ps.get("w").unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = backward(&loss, &ps).unwrap();
        let analytic = grads.get("w").unwrap().to_vec();

        let h = 1e-5;
        for i in 0..12 {
            let mut plus = w_data.clone();
            plus[i] += h;
            let mut minus = w_data.clone();
            minus[i] -= h;
            let mut ps_p = ps.clone();
            ps_p.set_data("w", plus).unwrap();
            let mut ps_m = ps.clone();
            ps_m.set_data("w", minus).unwrap();
            let numeric = (loss_of(&ps_p) - loss_of(&ps_m)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "coord {i}: analytic {} vs numeric {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(x) + sum(x) -> grad 2 per element
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let ps = param_set(&[("x", x, true)]);
        let s1 = ps.get("x").unwrap().sum_all().unwrap();
        let s2 = ps.get("x").unwrap().sum_all().unwrap();
        let loss = s1.add(&s2).unwrap();
        let grads = backward(&loss, &ps).unwrap();
        assert_eq!(grads.get("x").unwrap(), &[2.0, 2.0, 2.0]);
    }
}
