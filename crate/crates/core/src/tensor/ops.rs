//! Op constructors: shape checks, forward evaluation, graph recording.

use super::kernels;
use super::{Op, Tensor};
use crate::error::{Error, Result};

fn tracked_any(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.is_tracked())
}

fn make(shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Tensor {
    if tracked {
        Tensor::new(shape, data, op, true)
    } else {
        Tensor::new(shape, data, Op::Leaf, false)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{what} needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
            tracked_any(&[self, other]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
            tracked_any(&[self, other]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
            tracked_any(&[self, other]),
        ))
    }

    /// scale * x + shift with scalar constants.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| scale * v + shift).collect();
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::Affine { x: self.clone(), scale },
            self.is_tracked(),
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dim(format!(
                "matmul needs rank-2 tensors, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = vec![0.0; n * m];
        kernels::matmul(self.data(), other.data(), n, k, m, &mut data);
        Ok(make(
            vec![n, m],
            data,
            Op::Matmul(self.clone(), other.clone()),
            tracked_any(&[self, other]),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dim(format!("transpose needs rank 2, got {:?}", self.shape())));
        }
        let (n, m) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![0.0; n * m];
        kernels::transpose(self.data(), n, m, &mut data);
        Ok(make(vec![m, n], data, Op::Transpose(self.clone()), self.is_tracked()))
    }

    /// 3x3 convolution (cross-correlation), zero padding 1, stride 1.
    /// Input `[C, H, W]`, kernel `[F, C, 3, 3]`, output `[F, H, W]`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Dim(format!("conv2d input must be rank 3, got {:?}", self.shape())));
        }
        if kernel.rank() != 4 || kernel.shape()[2] != 3 || kernel.shape()[3] != 3 {
            return Err(Error::Dim(format!(
                "conv2d kernel must be [F, C, 3, 3], got {:?}",
                kernel.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let f = kernel.shape()[0];
        if kernel.shape()[1] != c {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input {:?} vs kernel {:?}",
                self.shape(),
                kernel.shape()
            )));
        }
        let mut data = vec![0.0; f * h * w];
        kernels::conv2d(self.data(), kernel.data(), c, h, w, f, &mut data);
        Ok(make(
            vec![f, h, w],
            data,
            Op::Conv2d { x: self.clone(), kernel: kernel.clone() },
            tracked_any(&[self, kernel]),
        ))
    }

    /// Add a per-channel bias vector `[C]` to a `[C, H, W]` tensor.
    pub fn channel_bias_add(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || bias.rank() != 1 || bias.shape()[0] != self.shape()[0] {
            return Err(Error::Dim(format!(
                "channel_bias_add needs [C,H,W] + [C], got {:?} + {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let plane = self.shape()[1] * self.shape()[2];
        let mut data = self.data().to_vec();
        for (c, &b) in bias.data().iter().enumerate() {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::ChannelBias { x: self.clone(), bias: bias.clone() },
            tracked_any(&[self, bias]),
        ))
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Ok(make(self.shape().to_vec(), data, Op::Relu(self.clone()), self.is_tracked()))
    }

    /// Subtract the mean over each channel group of a `[C, H, W]` tensor.
    /// `groups` must divide C.
    pub fn group_mean_norm(&self, groups: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Dim(format!("group_mean_norm needs rank 3, got {:?}", self.shape())));
        }
        let c = self.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("groups {groups} must divide channels {c}")));
        }
        let plane = self.shape()[1] * self.shape()[2];
        let group_len = (c / groups) * plane;
        let mut data = self.data().to_vec();
        for g in 0..groups {
            let chunk = &mut data[g * group_len..(g + 1) * group_len];
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            for v in chunk.iter_mut() {
                *v -= mean;
            }
        }
        Ok(make(
            self.shape().to_vec(),
            data,
            Op::GroupMeanNorm { x: self.clone(), groups },
            self.is_tracked(),
        ))
    }

    /// Global average pool: `[C, H, W]` -> `[1, C]` row vector.
    pub fn spatial_mean(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Dim(format!("spatial_mean needs rank 3, got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let plane = h * w;
        let data: Vec<f64> = (0..c)
            .map(|ci| self.data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(make(vec![1, c], data, Op::SpatialMean(self.clone()), self.is_tracked()))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let mean = self.data().iter().sum::<f64>() / self.numel() as f64;
        Ok(make(vec![1], vec![mean], Op::MeanAll(self.clone()), self.is_tracked()))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let sum = self.data().iter().sum::<f64>();
        Ok(make(vec![1], vec![sum], Op::SumAll(self.clone()), self.is_tracked()))
    }

    /// Mean over rows of -log softmax(logits)[target], max-stabilized.
    /// `logits` is `[n, k]`; `targets` holds n class indices below k.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dim(format!("cross-entropy needs [n, k] logits, got {:?}", self.shape())));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if targets.len() != n {
            return Err(Error::Contract(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target {bad} out of range for {k} classes")));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += log_sum - (row[t] - max);
        }
        Ok(make(
            vec![1],
            vec![total / n as f64],
            Op::SoftmaxCrossEntropy { logits: self.clone(), targets: targets.to_vec() },
            self.is_tracked(),
        ))
    }

    /// Scale each row of an `[n, e]` tensor to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dim(format!("l2_normalize_rows needs rank 2, got {:?}", self.shape())));
        }
        let (n, e) = (self.shape()[0], self.shape()[1]);
        let mut data = self.data().to_vec();
        for i in 0..n {
            let row = &mut data[i * e..(i + 1) * e];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Contract(format!("cannot L2-normalize zero row {i}")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(make(vec![n, e], data, Op::L2NormalizeRows(self.clone()), self.is_tracked()))
    }

    /// For each index list, average the selected rows of this `[V, e]`
    /// table; output is `[lists.len(), e]`. Used as an embedding mean-pool.
    pub fn gather_mean_rows(&self, lists: &[Vec<usize>]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dim(format!("gather_mean_rows needs a [V, e] table, got {:?}", self.shape())));
        }
        let (v, e) = (self.shape()[0], self.shape()[1]);
        if lists.is_empty() {
            return Err(Error::Contract("gather_mean_rows needs at least one list".into()));
        }
        let mut data = vec![0.0; lists.len() * e];
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Contract(format!("empty index list {i}")));
            }
            if let Some(&bad) = list.iter().find(|&&r| r >= v) {
                return Err(Error::Contract(format!("row {bad} out of range for table height {v}")));
            }
            let out = &mut data[i * e..(i + 1) * e];
            for &r in list {
                for (o, &x) in out.iter_mut().zip(&self.data()[r * e..(r + 1) * e]) {
                    *o += x;
                }
            }
            let inv = 1.0 / list.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        Ok(make(
            vec![lists.len(), e],
            data,
            Op::GatherMeanRows { table: self.clone(), lists: lists.to_vec() },
            self.is_tracked(),
        ))
    }

    /// Stack `[1, e]` rows into an `[n, e]` matrix.
    pub fn concat_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one row".into()));
        }
        let e = rows[0].numel();
        for r in rows {
            if r.rank() != 2 || r.shape()[0] != 1 || r.numel() != e {
                return Err(Error::Dim(format!(
                    "concat_rows needs [1, {e}] rows, got {:?}",
                    r.shape()
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * e);
        for r in rows {
            data.extend_from_slice(r.data());
        }
        let tracked = rows.iter().any(|r| r.is_tracked());
        Ok(make(vec![rows.len(), e], data, Op::ConcatRows(rows.to_vec()), tracked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = i2.matmul(&b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "should name both shapes: {msg}");
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(x.conv2d(&k), Err(crate::error::Error::Dim(_))));
    }

    #[test]
    fn softmax_ce_closed_forms() {
        // logits (0,0), target 0 -> ln 2
        let l = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let loss = l.softmax_cross_entropy(&[0]).unwrap().item().unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // uniform logits over k classes -> ln k
        for k in [3usize, 7, 10] {
            let l = Tensor::full(&[1, k], 0.37);
            let loss = l.softmax_cross_entropy(&[k - 1]).unwrap().item().unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_margin_monotone() {
        // one-hot logits with growing margin -> loss decreases toward 0
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let l = Tensor::from_vec(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let loss = l.softmax_cross_entropy(&[0]).unwrap().item().unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn softmax_ce_target_out_of_range() {
        let l = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            l.softmax_cross_entropy(&[3]),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let x = Tensor::from_vec(&[2, 3], vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        for i in 0..2 {
            let norm: f64 = y.data()[i * 3..(i + 1) * 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn group_mean_norm_zero_mean() {
        let x = Tensor::from_vec(&[4, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = x.group_mean_norm(2).unwrap();
        for g in 0..2 {
            let chunk = &y.data()[g * 8..(g + 1) * 8];
            assert!(chunk.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
