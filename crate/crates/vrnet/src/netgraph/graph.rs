//! Reverse-mode computation graph, define-by-run: every builder computes its
//! value eagerly and records the op; `backward` walks the tape in reverse and
//! accumulates exact adjoints into the parameter store.

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;

use super::conv;
use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{Mat, EXPM_PADE_COEFFS, EXPM_SQUARINGS};
use crate::microgen::mode_tables;

pub type NodeId = usize;

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Precomputed cosine/sine tables for the differentiable renderer at one
/// (mode grid, raster) size.
#[derive(Debug)]
pub struct RenderTables {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    c1: Vec<f64>,
    s1: Vec<f64>,
    c2: Vec<f64>,
    s2: Vec<f64>,
}

impl RenderTables {
    pub fn new(k: usize, width: usize, height: usize) -> Self {
        let half = (k as i64 - 1) / 2;
        let (c1, s1) = mode_tables(half, width);
        let (c2, s2) = mode_tables(half, height);
        RenderTables { k, width, height, c1, s1, c2, s2 }
    }
}

enum Op {
    Const,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    AddRowVec { x: NodeId, v: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    AvgPool2 { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, inv_std: Vec<f64>, spatial: bool, training: bool },
    Relu(NodeId),
    Selu(NodeId),
    TanhOp(NodeId),
    SigmoidOp(NodeId),
    Mixed { x: NodeId },
    Concat1(NodeId, NodeId),
    Flatten { x: NodeId },
    SliceRow { x: NodeId, row: usize },
    SliceFlat { x: NodeId, start: usize },
    SumAll { x: NodeId },
    FrobNorm { x: NodeId },
    AbsOp(NodeId),
    Stack1(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    StackImages(Vec<NodeId>),
    MatInv { x: NodeId },
    TransposeSq { x: NodeId },
    DiagFromVec { x: NodeId },
    SkewFromVec { x: NodeId },
    CosField { a: NodeId, tables: Arc<RenderTables> },
    RangeNorm { x: NodeId, lo_idx: usize, hi_idx: usize, span: f64, degenerate: bool },
    SoftThreshold { field: NodeId, tau: NodeId, temperature: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// parameter ids whose gradients are not needed (frozen network weights
    /// during inverse design); backward skips work feeding only into these
    frozen: HashSet<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn freeze_params(&mut self, params: impl IntoIterator<Item = usize>) {
        self.frozen.extend(params);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Tensor::scalar(v), Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, pid: usize) -> NodeId {
        self.push(store.value(pid).clone(), Op::Param(pid))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a].value.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a].value.shape(), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a].value.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    /// Scalar division a / b for [1]-shaped nodes.
    pub fn div_scalar(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.numel(), 1);
        assert_eq!(self.nodes[b].value.numel(), 1);
        let v = self.nodes[a].value.item() / self.nodes[b].value.item();
        self.push(Tensor::scalar(v), Op::DivScalar(a, b))
    }

    /// Elementwise scale * x + shift.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let t = self.nodes[x].value.map(|v| scale * v + shift);
        self.push(t, Op::Affine { x, scale })
    }

    /// Broadcast-add a [F] vector to every row of a [B, F] matrix.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        let f = *xs.last().unwrap();
        assert_eq!(self.nodes[v].value.shape(), &[f]);
        let vd = self.nodes[v].value.data().to_vec();
        let data = self.nodes[x]
            .value
            .data()
            .chunks(f)
            .flat_map(|row| row.iter().zip(&vd).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(&xs, data);
        self.push(t, Op::AddRowVec { x, v })
    }

    /// [M, K] x [K, N] -> [M, N].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dimension");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let ad = self.nodes[a].value.data();
        let bd = self.nodes[b].value.data();
        matmul_into(ad, bd, m, k, n, &mut out);
        self.push(Tensor::from_vec(&[m, n], out), Op::Matmul { a, b })
    }

    /// Fully connected layer x W + b.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row_vec(y, b)
    }

    /// Periodic same-size convolution of [B, Ci, H, W] with [Co, Ci, k, k].
    pub fn conv2d_periodic(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv input must be [B,C,H,W]");
        assert_eq!(ws, vec![ws[0], xs[1], k, k], "kernel must be [Co,Ci,k,k]");
        assert_eq!(self.nodes[b].value.shape(), &[ws[0]]);
        let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let mut out = vec![0.0; batch * co * h * wd];
        conv::conv2d_periodic_forward(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
            batch,
            ci,
            co,
            h,
            wd,
            k,
            &mut out,
        );
        self.push(Tensor::from_vec(&[batch, co, h, wd], out), Op::Conv2d { x, w, b, k })
    }

    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut out = vec![0.0; planes * (h / 2) * (w / 2)];
        conv::avgpool2_forward(self.nodes[x].value.data(), planes, h, w, &mut out);
        self.push(Tensor::from_vec(&[xs[0], xs[1], h / 2, w / 2], out), Op::AvgPool2 { x })
    }

    /// Batch normalization over the batch (and spatial dims for 4D input).
    /// Training mode uses batch statistics and updates the running ones;
    /// eval mode requires initialized statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        training: bool,
    ) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let spatial = xs.len() == 4;
        let channels = if spatial { xs[1] } else { xs[1] };
        assert!(xs.len() == 2 || xs.len() == 4, "batchnorm input must be 2D or 4D");
        assert_eq!(self.nodes[gamma].value.shape(), &[channels]);
        assert_eq!(self.nodes[beta].value.shape(), &[channels]);
        assert_eq!(state.running_mean.len(), channels);

        let (mean, var) = if training {
            let (mean, var) = batch_moments(self.nodes[x].value.data(), &xs, spatial);
            for c in 0..channels {
                if state.initialized {
                    state.running_mean[c] =
                        (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
                    state.running_var[c] =
                        (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
                } else {
                    state.running_mean[c] = mean[c];
                    state.running_var[c] = var[c];
                }
            }
            state.initialized = true;
            (mean, var)
        } else {
            if !state.initialized {
                return Err(Error::InvalidArgument(
                    "batchnorm eval mode before any training statistics exist".into(),
                ));
            }
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.nodes[gamma].value.data().to_vec();
        let bta = self.nodes[beta].value.data().to_vec();
        let xd = self.nodes[x].value.data();
        let mut data = vec![0.0; xd.len()];
        let apply = |c: usize, out: &mut [f64], input: &[f64]| {
            let (scale, shift) = (inv_std[c] * g[c], bta[c] - mean[c] * inv_std[c] * g[c]);
            for (o, v) in out.iter_mut().zip(input) {
                *o = scale * v + shift;
            }
        };
        if spatial && xd.len() >= super::tensor::PAR_THRESHOLD {
            let plane = xs[2] * xs[3];
            data.par_chunks_mut(plane).enumerate().for_each(|(i, out)| {
                apply(i % channels, out, &xd[i * plane..(i + 1) * plane]);
            });
        } else {
            channel_runs(&xs, spatial, |c, start, len| {
                let (head, tail) = data.split_at_mut(start);
                let _ = head;
                apply(c, &mut tail[..len], &xd[start..start + len]);
            });
        }
        let t = Tensor::from_vec(&xs, data);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, mean, inv_std, spatial, training }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(|v| {
            if v > 0.0 {
                SELU_LAMBDA * v
            } else {
                SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
            }
        });
        self.push(t, Op::Selu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(f64::tanh);
        self.push(t, Op::TanhOp(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(sigmoid);
        self.push(t, Op::SigmoidOp(x))
    }

    /// Identity activation; present for completeness of the activation set.
    pub fn identity(&mut self, x: NodeId) -> NodeId {
        x
    }

    /// Mixed activation on [B, F]: four contiguous feature blocks through
    /// SELU, tanh, sigmoid and identity; the remainder block is identity.
    pub fn mixed_activation(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 2);
        let f = xs[1];
        let q = f / 4;
        let data = self.nodes[x]
            .value
            .data()
            .chunks(f)
            .flat_map(|row| {
                row.iter().enumerate().map(|(j, &v)| mixed_forward(j, q, v)).collect::<Vec<_>>()
            })
            .collect();
        let t = Tensor::from_vec(&xs, data);
        self.push(t, Op::Mixed { x })
    }

    /// Concatenates two [B, F1] and [B, F2] matrices along the feature axis.
    pub fn concat1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sa[0], sb[0]);
        let (rows, fa, fb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (fa + fb));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a].value.data()[r * fa..(r + 1) * fa]);
            data.extend_from_slice(&self.nodes[b].value.data()[r * fb..(r + 1) * fb]);
        }
        self.push(Tensor::from_vec(&[rows, fa + fb], data), Op::Concat1(a, b))
    }

    /// [B, C, H, W] -> [B, C*H*W].
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 4);
        let t = self.nodes[x].value.reshaped(&[xs[0], xs[1] * xs[2] * xs[3]]);
        self.push(t, Op::Flatten { x })
    }

    /// Extracts row `row` of a [B, F] matrix as an [F] vector.
    pub fn slice_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 2);
        let f = xs[1];
        let data = self.nodes[x].value.data()[row * f..(row + 1) * f].to_vec();
        self.push(Tensor::from_vec(&[f], data), Op::SliceRow { x, row })
    }

    /// Contiguous slice of the flat data as a [len] vector.
    pub fn slice_flat(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let data = self.nodes[x].value.data()[start..start + len].to_vec();
        self.push(Tensor::from_vec(&[len], data), Op::SliceFlat { x, start })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data().iter().sum();
        self.push(Tensor::scalar(v), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn frobenius_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        self.push(Tensor::scalar(v), Op::FrobNorm { x })
    }

    /// Elementwise absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x].value.map(f64::abs);
        self.push(t, Op::AbsOp(x))
    }

    /// Stacks scalars into an [n] vector.
    pub fn stack1(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts.iter().map(|&p| self.nodes[p].value.item()).collect();
        self.push(Tensor::from_vec(&[parts.len()], data), Op::Stack1(parts.to_vec()))
    }

    /// Stacks [F] vectors into a [B, F] matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let f = self.nodes[parts[0]].value.numel();
        let mut data = Vec::with_capacity(parts.len() * f);
        for &p in parts {
            assert_eq!(self.nodes[p].value.numel(), f);
            data.extend_from_slice(self.nodes[p].value.data());
        }
        self.push(Tensor::from_vec(&[parts.len(), f], data), Op::StackRows(parts.to_vec()))
    }

    /// Stacks [H, W] images into a [B, 1, H, W] batch.
    pub fn stack_images(&mut self, parts: &[NodeId]) -> NodeId {
        let shape = self.nodes[parts[0]].value.shape().to_vec();
        assert_eq!(shape.len(), 2);
        let mut data = Vec::with_capacity(parts.len() * shape[0] * shape[1]);
        for &p in parts {
            assert_eq!(self.nodes[p].value.shape(), &shape[..]);
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let t = Tensor::from_vec(&[parts.len(), 1, shape[0], shape[1]], data);
        self.push(t, Op::StackImages(parts.to_vec()))
    }

    /// Inverse of a small square matrix.
    pub fn matinv(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0], xs[1]);
        let m = Mat::from_vec(xs[0], xs[1], self.nodes[x].value.data().to_vec());
        let inv = m.inverse().expect("graph matinv on well-conditioned input");
        self.push(Tensor::from_vec(&xs, inv.data().to_vec()), Op::MatInv { x })
    }

    pub fn transpose_sq(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.shape().to_vec();
        assert_eq!(xs[0], xs[1]);
        let n = xs[0];
        let xd = self.nodes[x].value.data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = xd[i * n + j];
            }
        }
        self.push(Tensor::from_vec(&xs, data), Op::TransposeSq { x })
    }

    /// [m] vector to diagonal [m, m] matrix.
    pub fn diag_from_vec(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x].value.numel();
        let mut data = vec![0.0; m * m];
        for (i, &v) in self.nodes[x].value.data().iter().enumerate() {
            data[i * m + i] = v;
        }
        self.push(Tensor::from_vec(&[m, m], data), Op::DiagFromVec { x })
    }

    /// [m(m-1)/2] upper-triangle entries (row-major) to the skew-symmetric
    /// [m, m] matrix with S[i,j] = v_k, S[j,i] = -v_k.
    pub fn skew_from_vec(&mut self, x: NodeId) -> NodeId {
        let len = self.nodes[x].value.numel();
        let m = (1 + ((1.0 + 8.0 * len as f64).sqrt() as usize)) / 2;
        assert_eq!(m * (m - 1) / 2, len, "not a skew triangle length");
        let mut data = vec![0.0; m * m];
        let mut k = 0;
        for i in 0..m {
            for j in (i + 1)..m {
                let v = self.nodes[x].value.data()[k];
                data[i * m + j] = v;
                data[j * m + i] = -v;
                k += 1;
            }
        }
        self.push(Tensor::from_vec(&[m, m], data), Op::SkewFromVec { x })
    }

    /// Matrix exponential by the same fixed-order Pade scheme as the plain
    /// implementation; smooth in the input, so gradients flow through.
    pub fn expm_pade(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.shape()[0];
        let b = EXPM_PADE_COEFFS;
        let eye = |g: &mut Graph, s: f64| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = s;
            }
            g.constant(Tensor::from_vec(&[n, n], d))
        };
        let xs = self.affine(x, 0.5_f64.powi(EXPM_SQUARINGS as i32), 0.0);
        let x2 = self.matmul(xs, xs);
        let x4 = self.matmul(x2, x2);
        let x6 = self.matmul(x4, x2);
        let mut u_inner = eye(self, b[1]);
        for (pow, coef) in [(x2, b[3]), (x4, b[5]), (x6, b[7])] {
            let scaled = self.affine(pow, coef, 0.0);
            u_inner = self.add(u_inner, scaled);
        }
        let u = self.matmul(xs, u_inner);
        let mut v = eye(self, b[0]);
        for (pow, coef) in [(x2, b[2]), (x4, b[4]), (x6, b[6])] {
            let scaled = self.affine(pow, coef, 0.0);
            v = self.add(v, scaled);
        }
        let num = self.add(v, u);
        let den = self.sub(v, u);
        let den_inv = self.matinv(den);
        let mut f = self.matmul(den_inv, num);
        for _ in 0..EXPM_SQUARINGS {
            f = self.matmul(f, f);
        }
        f
    }

    /// Differentiable cosine-field render of a [K, K] amplitude matrix on the
    /// tables' raster; output [H, W].
    pub fn cos_field(&mut self, a: NodeId, tables: &Arc<RenderTables>) -> NodeId {
        let k = tables.k;
        assert_eq!(self.nodes[a].value.shape(), &[k, k]);
        let (w, h) = (tables.width, tables.height);
        let ad = self.nodes[a].value.data();
        // u[p][row] = sum_q A_pq c2[q][row]; wsum likewise with s2
        let mut u = vec![0.0; k * h];
        let mut wsum = vec![0.0; k * h];
        for mp in 0..k {
            for mq in 0..k {
                let av = ad[mp * k + mq];
                if av == 0.0 {
                    continue;
                }
                let c2row = &tables.c2[mq * h..(mq + 1) * h];
                let s2row = &tables.s2[mq * h..(mq + 1) * h];
                for r in 0..h {
                    u[mp * h + r] += av * c2row[r];
                    wsum[mp * h + r] += av * s2row[r];
                }
            }
        }
        let mut values = vec![0.0; w * h];
        for row in 0..h {
            let out = &mut values[row * w..(row + 1) * w];
            for mp in 0..k {
                let (uv, wv) = (u[mp * h + row], wsum[mp * h + row]);
                let c1row = &tables.c1[mp * w..(mp + 1) * w];
                let s1row = &tables.s1[mp * w..(mp + 1) * w];
                for ((o, c), s) in out.iter_mut().zip(c1row).zip(s1row) {
                    *o += uv * c - wv * s;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[h, w], values),
            Op::CosField { a, tables: Arc::clone(tables) },
        )
    }

    /// Range normalization to [0,1] by the raster extrema (subgradients flow
    /// to the first attaining pixels); constant fields become 0.5 with zero
    /// gradient.
    pub fn range_normalize(&mut self, x: NodeId) -> NodeId {
        let xd = self.nodes[x].value.data();
        let mut lo_idx = 0;
        let mut hi_idx = 0;
        for (i, &v) in xd.iter().enumerate() {
            if v < xd[lo_idx] {
                lo_idx = i;
            }
            if v > xd[hi_idx] {
                hi_idx = i;
            }
        }
        let (lo, hi) = (xd[lo_idx], xd[hi_idx]);
        let span = hi - lo;
        let degenerate = !(span > f64::EPSILON * hi.abs().max(lo.abs()).max(1.0));
        let t = if degenerate {
            Tensor::from_vec(self.nodes[x].value.shape(), vec![0.5; xd.len()])
        } else {
            self.nodes[x].value.map(|v| (v - lo) / span)
        };
        self.push(t, Op::RangeNorm { x, lo_idx, hi_idx, span, degenerate })
    }

    /// sigmoid((field - tau) / T) with tau a scalar node.
    pub fn soft_threshold(&mut self, field: NodeId, tau: NodeId, temperature: f64) -> NodeId {
        assert!(temperature > 0.0);
        assert_eq!(self.nodes[tau].value.numel(), 1);
        let tv = self.nodes[tau].value.item();
        let t = self.nodes[field].value.map(|v| sigmoid((v - tv) / temperature));
        self.push(t, Op::SoftThreshold { field, tau, temperature })
    }

    /// Reverse pass from a scalar loss; accumulates parameter gradients into
    /// the store. Work feeding only into constants or frozen parameters is
    /// skipped.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) {
        assert_eq!(self.nodes[loss].value.numel(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for id in 0..n {
            needs[id] = match &self.nodes[id].op {
                Op::Const => false,
                Op::Param(pid) => !self.frozen.contains(pid),
                op => parents_of(op).iter().any(|&p| needs[p]),
            };
        }
        if !needs[loss] {
            return;
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            if !needs[id] || grads[id].is_none() {
                continue;
            }
            let dy = grads[id].take().unwrap();
            self.backprop_node(id, &dy, &mut grads, &needs, store);
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        needs: &[bool],
        target: NodeId,
        delta: Tensor,
    ) {
        if !needs[target] {
            return;
        }
        match &mut grads[target] {
            Some(g) => {
                if g.numel() >= super::tensor::PAR_THRESHOLD {
                    g.data_mut()
                        .par_iter_mut()
                        .zip(delta.data())
                        .for_each(|(gv, dv)| *gv += dv);
                } else {
                    for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                        *gv += dv;
                    }
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        id: NodeId,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        needs: &[bool],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Const => {}
            Op::Param(pid) => store.accumulate_grad(*pid, dy),
            Op::Add(a, b) => {
                self.accumulate(grads, needs, *a, dy.clone());
                self.accumulate(grads, needs, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, needs, *a, dy.clone());
                self.accumulate(grads, needs, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs[*a] {
                    let d = elementwise(dy, &self.nodes[*b].value, |x, y| x * y);
                    self.accumulate(grads, needs, *a, d);
                }
                if needs[*b] {
                    let d = elementwise(dy, &self.nodes[*a].value, |x, y| x * y);
                    self.accumulate(grads, needs, *b, d);
                }
            }
            Op::DivScalar(a, b) => {
                let bv = self.nodes[*b].value.item();
                let av = self.nodes[*a].value.item();
                let g = dy.item();
                self.accumulate(grads, needs, *a, Tensor::scalar(g / bv));
                self.accumulate(grads, needs, *b, Tensor::scalar(-g * av / (bv * bv)));
            }
            Op::Affine { x, scale, .. } => {
                self.accumulate(grads, needs, *x, dy.map(|v| v * scale));
            }
            Op::AddRowVec { x, v } => {
                self.accumulate(grads, needs, *x, dy.clone());
                if needs[*v] {
                    let f = self.nodes[*v].value.numel();
                    let mut dv = vec![0.0; f];
                    for row in dy.data().chunks(f) {
                        for (d, r) in dv.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, needs, *v, Tensor::from_vec(&[f], dv));
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if needs[*a] {
                    // dA = dY B^T
                    let mut da = vec![0.0; m * k];
                    let bd = self.nodes[*b].value.data();
                    for i in 0..m {
                        for j in 0..nn {
                            let d = dy.data()[i * nn + j];
                            if d == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += d * bd[kk * nn + j];
                            }
                        }
                    }
                    self.accumulate(grads, needs, *a, Tensor::from_vec(&[m, k], da));
                }
                if needs[*b] {
                    // dB = A^T dY
                    let mut db = vec![0.0; k * nn];
                    let ad = self.nodes[*a].value.data();
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let dr = &dy.data()[i * nn..(i + 1) * nn];
                            let out = &mut db[kk * nn..(kk + 1) * nn];
                            for (o, d) in out.iter_mut().zip(dr) {
                                *o += av * d;
                            }
                        }
                    }
                    self.accumulate(grads, needs, *b, Tensor::from_vec(&[k, nn], db));
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (batch, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = ws[0];
                let mut dx = needs[*x].then(|| vec![0.0; batch * ci * h * wd]);
                let mut dw = needs[*w].then(|| vec![0.0; co * ci * k * k]);
                let mut db = needs[*b].then(|| vec![0.0; co]);
                conv::conv2d_periodic_backward(
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    dy.data(),
                    batch,
                    ci,
                    co,
                    h,
                    wd,
                    *k,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, needs, *x, Tensor::from_vec(&[batch, ci, h, wd], dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, needs, *w, Tensor::from_vec(&[co, ci, *k, *k], dw));
                }
                if let Some(db) = db {
                    self.accumulate(grads, needs, *b, Tensor::from_vec(&[co], db));
                }
            }
            Op::AvgPool2 { x } => {
                let xs = self.nodes[*x].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; planes * h * w];
                conv::avgpool2_backward(dy.data(), planes, h, w, &mut dx);
                self.accumulate(grads, needs, *x, Tensor::from_vec(xs, dx));
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, spatial, training } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let xd = self.nodes[*x].value.data();
                let dyd = dy.data();
                let g = self.nodes[*gamma].value.data();
                let channels = mean.len();
                let per_channel = xd.len() / channels;
                let channel_of = |start: usize| -> usize {
                    if *spatial {
                        (start / (xs[2] * xs[3])) % channels
                    } else {
                        start % channels
                    }
                };
                let s1 = per_channel_reduce(&xs, *spatial, |start, len| {
                    dyd[start..start + len].iter().sum::<f64>()
                });
                let s2 = per_channel_reduce(&xs, *spatial, |start, len| {
                    let c = channel_of(start);
                    let (mu, istd) = (mean[c], inv_std[c]);
                    dyd[start..start + len]
                        .iter()
                        .zip(&xd[start..start + len])
                        .map(|(d, v)| d * (v - mu) * istd)
                        .sum::<f64>()
                });
                if needs[*beta] {
                    self.accumulate(grads, needs, *beta, Tensor::from_vec(&[channels], s1.clone()));
                }
                if needs[*gamma] {
                    self.accumulate(
                        grads,
                        needs,
                        *gamma,
                        Tensor::from_vec(&[channels], s2.clone()),
                    );
                }
                if needs[*x] {
                    let mut dx = vec![0.0; xd.len()];
                    let nf = per_channel as f64;
                    let fill = |c: usize, seg: &mut [f64], dseg: &[f64], xseg: &[f64]| {
                        let (mu, istd, gc) = (mean[c], inv_std[c], g[c]);
                        if *training {
                            let (m1, m2) = (s1[c] / nf, s2[c] / nf);
                            for ((o, d), v) in seg.iter_mut().zip(dseg).zip(xseg) {
                                let xhat = (v - mu) * istd;
                                *o = gc * istd * (d - m1 - xhat * m2);
                            }
                        } else {
                            for (o, d) in seg.iter_mut().zip(dseg) {
                                *o = gc * istd * d;
                            }
                        }
                    };
                    if *spatial && xd.len() >= super::tensor::PAR_THRESHOLD {
                        let plane = xs[2] * xs[3];
                        dx.par_chunks_mut(plane).enumerate().for_each(|(i, seg)| {
                            fill(
                                i % channels,
                                seg,
                                &dyd[i * plane..(i + 1) * plane],
                                &xd[i * plane..(i + 1) * plane],
                            );
                        });
                    } else {
                        channel_runs(&xs, *spatial, |c, start, len| {
                            let (_, tail) = dx.split_at_mut(start);
                            fill(c, &mut tail[..len], &dyd[start..start + len], &xd[start..start + len]);
                        });
                    }
                    self.accumulate(grads, needs, *x, Tensor::from_vec(&xs, dx));
                }
            }
            Op::Relu(x) => {
                let d = elementwise(dy, &self.nodes[*x].value, |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, needs, *x, d);
            }
            Op::Selu(x) => {
                let d = elementwise(dy, &self.nodes[*x].value, |g, v| {
                    if v > 0.0 {
                        g * SELU_LAMBDA
                    } else {
                        g * SELU_LAMBDA * SELU_ALPHA * v.exp()
                    }
                });
                self.accumulate(grads, needs, *x, d);
            }
            Op::TanhOp(x) => {
                let d = elementwise(dy, &node.value, |g, y| g * (1.0 - y * y));
                self.accumulate(grads, needs, *x, d);
            }
            Op::SigmoidOp(x) => {
                let d = elementwise(dy, &node.value, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, needs, *x, d);
            }
            Op::Mixed { x } => {
                let xs = self.nodes[*x].value.shape();
                let f = xs[1];
                let q = f / 4;
                let xd = self.nodes[*x].value.data();
                let yd = node.value.data();
                let mut dx = vec![0.0; xd.len()];
                for (i, d) in dx.iter_mut().enumerate() {
                    let j = i % f;
                    *d = dy.data()[i] * mixed_derivative(j, q, xd[i], yd[i]);
                }
                self.accumulate(grads, needs, *x, Tensor::from_vec(xs, dx));
            }
            Op::Concat1(a, b) => {
                let (fa, fb) =
                    (self.nodes[*a].value.shape()[1], self.nodes[*b].value.shape()[1]);
                let rows = self.nodes[*a].value.shape()[0];
                if needs[*a] {
                    let mut da = Vec::with_capacity(rows * fa);
                    for r in 0..rows {
                        da.extend_from_slice(&dy.data()[r * (fa + fb)..r * (fa + fb) + fa]);
                    }
                    self.accumulate(grads, needs, *a, Tensor::from_vec(&[rows, fa], da));
                }
                if needs[*b] {
                    let mut db = Vec::with_capacity(rows * fb);
                    for r in 0..rows {
                        db.extend_from_slice(
                            &dy.data()[r * (fa + fb) + fa..(r + 1) * (fa + fb)],
                        );
                    }
                    self.accumulate(grads, needs, *b, Tensor::from_vec(&[rows, fb], db));
                }
            }
            Op::Flatten { x } => {
                let xs = self.nodes[*x].value.shape();
                self.accumulate(grads, needs, *x, dy.reshaped(xs));
            }
            Op::SliceRow { x, row } => {
                let xs = self.nodes[*x].value.shape();
                let f = xs[1];
                let mut dx = vec![0.0; xs[0] * f];
                dx[row * f..(row + 1) * f].copy_from_slice(dy.data());
                self.accumulate(grads, needs, *x, Tensor::from_vec(xs, dx));
            }
            Op::SliceFlat { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                dx[*start..start + dy.numel()].copy_from_slice(dy.data());
                self.accumulate(grads, needs, *x, Tensor::from_vec(xs, dx));
            }
            Op::SumAll { x } => {
                let g = dy.item();
                let xs = self.nodes[*x].value.shape();
                self.accumulate(
                    grads,
                    needs,
                    *x,
                    Tensor::from_vec(xs, vec![g; self.nodes[*x].value.numel()]),
                );
            }
            Op::FrobNorm { x } => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let g = dy.item() / norm;
                    let d = self.nodes[*x].value.map(|v| g * v);
                    self.accumulate(grads, needs, *x, d);
                }
            }
            Op::AbsOp(x) => {
                let d = elementwise(dy, &self.nodes[*x].value, |g, v| g * sign0(v));
                self.accumulate(grads, needs, *x, d);
            }
            Op::Stack1(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, needs, p, Tensor::scalar(dy.data()[i]));
                }
            }
            Op::StackRows(parts) => {
                let f = self.nodes[parts[0]].value.numel();
                for (i, &p) in parts.iter().enumerate() {
                    if needs[p] {
                        let d = dy.data()[i * f..(i + 1) * f].to_vec();
                        let shape = self.nodes[p].value.shape().to_vec();
                        self.accumulate(grads, needs, p, Tensor::from_vec(&shape, d));
                    }
                }
            }
            Op::StackImages(parts) => {
                let hw = self.nodes[parts[0]].value.numel();
                for (i, &p) in parts.iter().enumerate() {
                    if needs[p] {
                        let d = dy.data()[i * hw..(i + 1) * hw].to_vec();
                        let shape = self.nodes[p].value.shape().to_vec();
                        self.accumulate(grads, needs, p, Tensor::from_vec(&shape, d));
                    }
                }
            }
            Op::MatInv { x } => {
                // d(A^-1) adjoint: dA = -Y^T dY Y^T with Y = A^-1 (cached value)
                let n = node.value.shape()[0];
                let y = Mat::from_vec(n, n, node.value.data().to_vec());
                let dym = Mat::from_vec(n, n, dy.data().to_vec());
                let yt = y.transpose();
                let da = yt.matmul(&dym).matmul(&yt).scale(-1.0);
                self.accumulate(grads, needs, *x, Tensor::from_vec(&[n, n], da.data().to_vec()));
            }
            Op::TransposeSq { x } => {
                let n = node.value.shape()[0];
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        dx[j * n + i] = dy.data()[i * n + j];
                    }
                }
                self.accumulate(grads, needs, *x, Tensor::from_vec(&[n, n], dx));
            }
            Op::DiagFromVec { x } => {
                let m = self.nodes[*x].value.numel();
                let d: Vec<f64> = (0..m).map(|i| dy.data()[i * m + i]).collect();
                self.accumulate(grads, needs, *x, Tensor::from_vec(&[m], d));
            }
            Op::SkewFromVec { x } => {
                let len = self.nodes[*x].value.numel();
                let m = (1 + ((1.0 + 8.0 * len as f64).sqrt() as usize)) / 2;
                let mut d = vec![0.0; len];
                let mut k = 0;
                for i in 0..m {
                    for j in (i + 1)..m {
                        d[k] = dy.data()[i * m + j] - dy.data()[j * m + i];
                        k += 1;
                    }
                }
                self.accumulate(grads, needs, *x, Tensor::from_vec(&[len], d));
            }
            Op::CosField { a, tables } => {
                let k = tables.k;
                let (w, h) = (tables.width, tables.height);
                let mut da = vec![0.0; k * k];
                // dA[p,q] = sum_r c2[q,r] t_c[p,r] - s2[q,r] t_s[p,r]
                for mp in 0..k {
                    let c1row = &tables.c1[mp * w..(mp + 1) * w];
                    let s1row = &tables.s1[mp * w..(mp + 1) * w];
                    let mut tc = vec![0.0; h];
                    let mut ts = vec![0.0; h];
                    for r in 0..h {
                        let dyrow = &dy.data()[r * w..(r + 1) * w];
                        let mut accc = 0.0;
                        let mut accs = 0.0;
                        for ((d, c), s) in dyrow.iter().zip(c1row).zip(s1row) {
                            accc += d * c;
                            accs += d * s;
                        }
                        tc[r] = accc;
                        ts[r] = accs;
                    }
                    for mq in 0..k {
                        let c2row = &tables.c2[mq * h..(mq + 1) * h];
                        let s2row = &tables.s2[mq * h..(mq + 1) * h];
                        let mut acc = 0.0;
                        for r in 0..h {
                            acc += c2row[r] * tc[r] - s2row[r] * ts[r];
                        }
                        da[mp * k + mq] = acc;
                    }
                }
                self.accumulate(grads, needs, *a, Tensor::from_vec(&[k, k], da));
            }
            Op::RangeNorm { x, lo_idx, hi_idx, span, degenerate } => {
                if *degenerate {
                    return;
                }
                let xd = self.nodes[*x].value.data();
                let (lo, hi) = (xd[*lo_idx], xd[*hi_idx]);
                let mut dx: Vec<f64> = dy.data().iter().map(|g| g / span).collect();
                let mut s_lo = 0.0;
                let mut s_hi = 0.0;
                for (g, &v) in dy.data().iter().zip(xd) {
                    s_lo += g * (v - hi);
                    s_hi += g * (v - lo);
                }
                dx[*lo_idx] += s_lo / (span * span);
                dx[*hi_idx] -= s_hi / (span * span);
                self.accumulate(
                    grads,
                    needs,
                    *x,
                    Tensor::from_vec(self.nodes[*x].value.shape(), dx),
                );
            }
            Op::SoftThreshold { field, tau, temperature } => {
                let yd = node.value.data();
                if needs[*field] {
                    let d: Vec<f64> = dy
                        .data()
                        .iter()
                        .zip(yd)
                        .map(|(g, y)| g * y * (1.0 - y) / temperature)
                        .collect();
                    self.accumulate(
                        grads,
                        needs,
                        *field,
                        Tensor::from_vec(self.nodes[*field].value.shape(), d),
                    );
                }
                if needs[*tau] {
                    let mut acc = 0.0;
                    for (g, y) in dy.data().iter().zip(yd) {
                        acc -= g * y * (1.0 - y) / temperature;
                    }
                    self.accumulate(grads, needs, *tau, Tensor::scalar(acc));
                }
            }
        }
    }
}

fn parents_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Const | Op::Param(_) => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::DivScalar(a, b)
        | Op::Concat1(a, b) => vec![*a, *b],
        Op::Affine { x, .. }
        | Op::AvgPool2 { x }
        | Op::Flatten { x }
        | Op::SliceRow { x, .. }
        | Op::SliceFlat { x, .. }
        | Op::SumAll { x }
        | Op::FrobNorm { x }
        | Op::MatInv { x }
        | Op::TransposeSq { x }
        | Op::DiagFromVec { x }
        | Op::SkewFromVec { x }
        | Op::Mixed { x }
        | Op::RangeNorm { x, .. } => vec![*x],
        Op::Relu(x) | Op::Selu(x) | Op::TanhOp(x) | Op::SigmoidOp(x) | Op::AbsOp(x) => vec![*x],
        Op::AddRowVec { x, v } => vec![*x, *v],
        Op::Matmul { a, b } => vec![*a, *b],
        Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Stack1(parts) | Op::StackRows(parts) | Op::StackImages(parts) => parts.clone(),
        Op::CosField { a, .. } => vec![*a],
        Op::SoftThreshold { field, tau, .. } => vec![*field, *tau],
    }
}

/// Iterates the contiguous runs belonging to each channel: for [B,C,H,W]
/// layouts a run is one (batch, channel) plane, for [B,F] a single element.
/// Runs are visited in a fixed order, so reductions stay deterministic.
fn channel_runs(shape: &[usize], spatial: bool, mut f: impl FnMut(usize, usize, usize)) {
    if spatial {
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        for bi in 0..b {
            for ci in 0..c {
                f(ci, (bi * c + ci) * plane, plane);
            }
        }
    } else {
        let (b, c) = (shape[0], shape[1]);
        for bi in 0..b {
            for ci in 0..c {
                f(ci, bi * c + ci, 1);
            }
        }
    }
}

/// Per-channel reduction over the channel's runs; parallel across channels
/// (each channel reduces its batch planes sequentially, so the result does
/// not depend on the schedule).
fn per_channel_reduce(
    shape: &[usize],
    spatial: bool,
    f: impl Fn(usize, usize) -> f64 + Sync,
) -> Vec<f64> {
    let channels = shape[1];
    let reduce_channel = |c: usize| -> f64 {
        if spatial {
            let (b, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let mut acc = 0.0;
            for bi in 0..b {
                acc += f((bi * ch + c) * plane, plane);
            }
            acc
        } else {
            let (b, ch) = (shape[0], shape[1]);
            let mut acc = 0.0;
            for bi in 0..b {
                acc += f(bi * ch + c, 1);
            }
            acc
        }
    };
    let total: usize = shape.iter().product();
    if spatial && total >= super::tensor::PAR_THRESHOLD {
        (0..channels).into_par_iter().map(reduce_channel).collect()
    } else {
        (0..channels).map(reduce_channel).collect()
    }
}

/// Per-channel mean and biased variance over batch (and spatial dims).
fn batch_moments(data: &[f64], shape: &[usize], spatial: bool) -> (Vec<f64>, Vec<f64>) {
    let channels = shape[1];
    let count = (data.len() / channels) as f64;
    let mut mean = per_channel_reduce(shape, spatial, |start, len| {
        data[start..start + len].iter().sum::<f64>()
    });
    for m in &mut mean {
        *m /= count;
    }
    let mean_ref = &mean;
    let mut var = {
        let channels_of = |start: usize| -> usize {
            if spatial {
                (start / (shape[2] * shape[3])) % shape[1]
            } else {
                start % shape[1]
            }
        };
        per_channel_reduce(shape, spatial, |start, len| {
            let mu = mean_ref[channels_of(start)];
            data[start..start + len].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>()
        })
    };
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mixed_forward(j: usize, q: usize, v: f64) -> f64 {
    match j / q.max(1) {
        0 if j < q => {
            if v > 0.0 {
                SELU_LAMBDA * v
            } else {
                SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
            }
        }
        1 if j < 2 * q => v.tanh(),
        2 if j < 3 * q => sigmoid(v),
        _ => v,
    }
}

fn mixed_derivative(j: usize, q: usize, x: f64, y: f64) -> f64 {
    match j / q.max(1) {
        0 if j < q => {
            if x > 0.0 {
                SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp()
            }
        }
        1 if j < 2 * q => 1.0 - y * y,
        2 if j < 3 * q => y * (1.0 - y),
        _ => 1.0,
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    let data = if a.numel() >= super::tensor::PAR_THRESHOLD {
        a.data().par_iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::from_vec(b.shape(), data)
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let body = |i: usize, row: &mut [f64]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m >= 32 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::optim::fan_in_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on every parameter entry against the
    /// analytic gradient; `build` must be a pure function of the store.
    fn check_gradients(
        shapes: &[Vec<usize>],
        seed: u64,
        tol: f64,
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in shapes {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
            store.add(Tensor::from_vec(s, data), false);
        }
        let eval = |store: &ParamStore| -> (f64, Graph, Vec<NodeId>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = (0..store.len()).map(|p| g.param(store, p)).collect();
            let out = build(&mut g, &ids);
            (g.value(out).item(), g, vec![out])
        };
        store.zero_grads();
        let (_, graph, outs) = eval(&store);
        graph.backward(outs[0], &mut store);
        let grads: Vec<Vec<f64>> =
            (0..store.len()).map(|p| store.grad(p).data().to_vec()).collect();

        let h = 1e-6;
        for p in 0..store.len() {
            for i in 0..store.value(p).numel() {
                let orig = store.value(p).data()[i];
                store.value_mut(p).data_mut()[i] = orig + h;
                let (fp, _, _) = eval(&store);
                store.value_mut(p).data_mut()[i] = orig - h;
                let (fm, _, _) = eval(&store);
                store.value_mut(p).data_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let got = grads[p][i];
                let denom = fd.abs().max(1.0);
                assert!(
                    (got - fd).abs() <= tol * denom,
                    "param {p} entry {i}: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn sigmoid_value_and_local_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        // derivative via a parameter
        let mut store = ParamStore::new();
        let pid = store.add(Tensor::scalar(0.0), false);
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let y = g.sigmoid(x);
        g.backward(y, &mut store);
        assert!((store.grad(pid).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn elementwise_and_scalar_op_gradients() {
        check_gradients(&[vec![2, 3], vec![2, 3]], 1, 1e-6, |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let m = g.mul(s, ids[1]);
            let d = g.sub(m, ids[0]);
            let a = g.affine(d, 1.7, -0.3);
            g.sum_all(a)
        });
        check_gradients(&[vec![1], vec![1]], 2, 1e-6, |g, ids| {
            let q = g.div_scalar(ids[0], ids[1]);
            let r = g.abs(q);
            g.sum_all(r)
        });
    }

    #[test]
    fn activation_gradients() {
        for (seed, which) in [(3u64, 0usize), (4, 1), (5, 2), (6, 3)] {
            check_gradients(&[vec![3, 4]], seed, 1e-6, move |g, ids| {
                let y = match which {
                    0 => g.relu(ids[0]),
                    1 => g.selu(ids[0]),
                    2 => g.tanh(ids[0]),
                    _ => g.sigmoid(ids[0]),
                };
                let w = g.affine(y, 0.9, 0.1);
                let m = g.mul(w, y);
                g.sum_all(m)
            });
        }
        check_gradients(&[vec![2, 9]], 7, 1e-6, |g, ids| {
            let y = g.mixed_activation(ids[0]);
            g.sum_all(y)
        });
    }

    #[test]
    fn matmul_dense_concat_gradients() {
        check_gradients(&[vec![3, 4], vec![4, 2], vec![2]], 8, 1e-6, |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2]);
            let t = g.tanh(y);
            g.sum_all(t)
        });
        check_gradients(&[vec![2, 3], vec![2, 2]], 9, 1e-6, |g, ids| {
            let c = g.concat1(ids[0], ids[1]);
            let s = g.sigmoid(c);
            g.sum_all(s)
        });
        check_gradients(&[vec![2, 6]], 10, 1e-6, |g, ids| {
            let r = g.slice_row(ids[0], 1);
            let s = g.slice_flat(r, 2, 3);
            let n = g.frobenius_norm(s);
            g.sum_all(n)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        check_gradients(&[vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]], 11, 1e-6, |g, ids| {
            let y = g.conv2d_periodic(ids[0], ids[1], ids[2], 3);
            let p = g.avgpool2(y);
            let r = g.relu(p);
            g.sum_all(r)
        });
        // 1x1 kernel of value 1 acts as the identity map
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|i| i as f64).collect()));
        let w = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = g.constant(Tensor::from_vec(&[1], vec![0.0]));
        let y = g.conv2d_periodic(x, w, b, 1);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn batchnorm_gradients_and_modes() {
        check_gradients(&[vec![4, 3], vec![3], vec![3]], 12, 1e-5, |g, ids| {
            let mut st = BnState::new(3);
            let y = g.batchnorm(ids[0], ids[1], ids[2], &mut st, true).unwrap();
            let t = g.tanh(y);
            g.sum_all(t)
        });
        check_gradients(&[vec![2, 2, 2, 2], vec![2], vec![2]], 13, 1e-5, |g, ids| {
            let mut st = BnState::new(2);
            let y = g.batchnorm(ids[0], ids[1], ids[2], &mut st, true).unwrap();
            g.sum_all(y)
        });
        // eval mode before statistics exist is an error
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gamma = g.constant(Tensor::from_vec(&[3], vec![1.0; 3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut st = BnState::new(3);
        assert!(g.batchnorm(x, gamma, beta, &mut st, false).is_err());
        // eval mode is a deterministic affine map once stats are frozen
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut st = BnState::new(3);
        let data = fan_in_init(&mut rng, &[4, 3], 3);
        let mut g = Graph::new();
        let x = g.constant(data);
        let gamma = g.constant(Tensor::from_vec(&[3], vec![2.0; 3]));
        let beta = g.constant(Tensor::from_vec(&[3], vec![0.5; 3]));
        g.batchnorm(x, gamma, beta, &mut st, true).unwrap();
        assert!(st.initialized);
        let probe = Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]);
        let mut g1 = Graph::new();
        let x1 = g1.constant(probe.clone());
        let gamma1 = g1.constant(Tensor::from_vec(&[3], vec![2.0; 3]));
        let beta1 = g1.constant(Tensor::from_vec(&[3], vec![0.5; 3]));
        let y1 = g1.batchnorm(x1, gamma1, beta1, &mut st, false).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(probe);
        let gamma2 = g2.constant(Tensor::from_vec(&[3], vec![2.0; 3]));
        let beta2 = g2.constant(Tensor::from_vec(&[3], vec![0.5; 3]));
        let y2 = g2.batchnorm(x2, gamma2, beta2, &mut st, false).unwrap();
        assert_eq!(g1.value(y1).data(), g2.value(y2).data());
    }

    #[test]
    fn matrix_op_gradients() {
        check_gradients(&[vec![3, 3]], 15, 1e-5, |g, ids| {
            // keep the matrix well conditioned: X + 3I
            let mut d = vec![0.0; 9];
            for i in 0..3 {
                d[i * 3 + i] = 3.0;
            }
            let shift = g.constant(Tensor::from_vec(&[3, 3], d));
            let a = g.add(ids[0], shift);
            let inv = g.matinv(a);
            let t = g.transpose_sq(inv);
            let m = g.matmul(inv, t);
            g.frobenius_norm(m)
        });
        check_gradients(&[vec![3]], 16, 1e-6, |g, ids| {
            let d = g.diag_from_vec(ids[0]);
            g.frobenius_norm(d)
        });
        check_gradients(&[vec![3]], 17, 1e-6, |g, ids| {
            let s = g.skew_from_vec(ids[0]);
            let e = g.expm_pade(s);
            let c = g.constant(Tensor::from_vec(&[3, 3], (0..9).map(|i| 0.1 * i as f64).collect()));
            let m = g.mul(e, c);
            g.sum_all(m)
        });
    }

    #[test]
    fn expm_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for m in [3usize, 6] {
            let len = m * (m - 1) / 2;
            let xi: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..0.95)).collect();
            let q_plain = crate::specnorm::orthogonal_from_params(&xi).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(&[len], xi));
            let w = g.affine(x, 2.0 * std::f64::consts::PI, -std::f64::consts::PI);
            let s = g.skew_from_vec(w);
            let e = g.expm_pade(s);
            let diff: f64 = g
                .value(e)
                .data()
                .iter()
                .zip(q_plain.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-13, "graph expm deviates from plain by {diff}");
        }
    }

    #[test]
    fn renderer_op_gradients() {
        let tables = Arc::new(RenderTables::new(3, 8, 8));
        let t2 = Arc::clone(&tables);
        check_gradients(&[vec![3, 3], vec![1]], 19, 1e-5, move |g, ids| {
            let field = g.cos_field(ids[0], &t2);
            let norm = g.range_normalize(field);
            let tau = g.sigmoid(ids[1]); // keep tau inside (0,1)
            let chi = g.soft_threshold(norm, tau, 0.05);
            g.mean_all(chi)
        });
        // the rendered graph field must match the plain renderer
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let grid = crate::microgen::AmplitudeGrid::sample(&mut rng, 3, 3).unwrap();
        let spec = crate::microgen::MicroSpec::new(&grid, 0.4, 1e-2).unwrap();
        let plain = crate::microgen::field(&spec, 8, 8).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[3, 3], grid.data().to_vec()));
        let f = g.cos_field(a, &tables);
        for (a, b) in g.value(f).data().iter().zip(plain.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_and_pool_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]));
        let b = g.constant(Tensor::from_vec(&[2, 2], vec![5., 6., 7., 8.]));
        let st = g.stack_images(&[a, b]);
        assert_eq!(g.value(st).shape(), &[2, 1, 2, 2]);
        let s1 = g.scalar(1.0);
        let s2 = g.scalar(2.0);
        let v = g.stack1(&[s1, s2]);
        assert_eq!(g.value(v).data(), &[1.0, 2.0]);
        let rows = g.stack_rows(&[v, v]);
        assert_eq!(g.value(rows).shape(), &[2, 2]);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add(Tensor::scalar(2.0), false);
        let b = store.add(Tensor::scalar(3.0), false);
        let mut g = Graph::new();
        g.freeze_params([b]);
        let na = g.param(&store, a);
        let nb = g.param(&store, b);
        let m = g.mul(na, nb);
        g.backward(m, &mut store);
        assert_eq!(store.grad(a).item(), 3.0);
        assert_eq!(store.grad(b).item(), 0.0);
    }

    #[test]
    fn gradient_determinism_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let x = store.add(fan_in_init(&mut rng, &[4, 2, 8, 8], 128), false);
        let w = store.add(fan_in_init(&mut rng, &[3, 2, 5, 5], 50), true);
        let b = store.add(Tensor::zeros(&[3]), false);
        let run = |store: &mut ParamStore| -> Vec<f64> {
            store.zero_grads();
            let mut g = Graph::new();
            let xn = g.param(store, x);
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let y = g.conv2d_periodic(xn, wn, bn, 5);
            let s = g.sigmoid(y);
            let l = g.sum_all(s);
            g.backward(l, store);
            store.grad(w).data().to_vec()
        };
        let g1 = run(&mut store);
        let g2 = run(&mut store);
        assert_eq!(g1, g2, "parallel conv backward must be bitwise deterministic");
    }
}
