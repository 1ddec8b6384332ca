//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward computation as an ordered list of
//! operation records; record parents always precede the record itself, so
//! insertion order is a topological order. [`Tape::backward`] seeds the
//! loss gradient and walks the records exactly once in reverse,
//! accumulating vector-Jacobian products into parent gradients. Gradients
//! add across multiple uses of a variable.

use super::linalg::{
    col2im_accumulate, gather_weights, gemm_nn, gemm_nt, gemm_tn, im2col, scatter_weight_grad,
    transpose_into, ConvGeom,
};
use super::{Result, Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel batch statistics observed by a batch-mode normalization,
/// reported back so the owner can fold them into running statistics.
#[derive(Debug, Clone)]
pub struct BnObserved {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        c: f64,
    },
    ScalarAdd {
        x: Var,
    },
    Sum {
        x: Var,
    },
    ColMean {
        x: Var,
    },
    GroupColMean {
        x: Var,
        lengths: Vec<usize>,
    },
    SliceRow {
        x: Var,
        row: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Differentiation graph: one forward computation, one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes a tensor onto the tape as an input with no parents.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a scalar (single-element) variable.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ---- forward operations ------------------------------------------

    /// C = A(m×k) · B(k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.nodes[a.0].data, &self.nodes[b.0].data, &mut out);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }))
    }

    /// Cross-correlation of a batch of images with a filter bank.
    ///
    /// `x` is `[n, c_in, h, w]` (or `[c_in, h, w]` for a single image),
    /// `w` is `[c_out, c_in, kh, kw]`; zero padding, no kernel flip.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (batched, n, ci, h, wd) = split_image_shape(&self.nodes[x.0].shape).ok_or_else(|| {
            TensorError::Dimension {
                op: "conv2d",
                detail: "input must be [n,c,h,w] or [c,h,w]".into(),
                shape: self.nodes[x.0].shape.clone(),
            }
        })?;
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 4 || ws[1] != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: ws.clone(),
            });
        }
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let geom = ConvGeom::new(ci, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            TensorError::Dimension {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} with stride {stride:?} pad {pad:?} does not fit {h}x{wd} input"
                ),
                shape: self.nodes[x.0].shape.clone(),
            }
        })?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let positions = geom.col_cols();
        let rows = geom.col_rows();
        let total = n * positions;

        let mut wg = vec![0.0; co * rows];
        gather_weights(&geom, co, &self.nodes[w.0].data, &mut wg);
        // All images share one im2col matrix so the batch runs as a
        // single product.
        let mut cols = vec![0.0; rows * total];
        let image = ci * h * wd;
        for i in 0..n {
            im2col(
                &geom,
                &self.nodes[x.0].data[i * image..(i + 1) * image],
                &mut cols,
                total,
                i * positions,
            );
        }
        let mut out_cm = vec![0.0; co * total];
        gemm_nn(co, rows, total, &wg, &cols, &mut out_cm);
        // Reorder channel-major (co × n·positions) into per-image layout.
        let mut out = vec![0.0; n * co * positions];
        for i in 0..n {
            for ch in 0..co {
                let src = ch * total + i * positions;
                let dst = (i * co + ch) * positions;
                out[dst..dst + positions].copy_from_slice(&out_cm[src..src + positions]);
            }
        }
        let shape = if batched {
            vec![n, co, oh, ow]
        } else {
            vec![co, oh, ow]
        };
        Ok(self.push(shape, out, Op::Conv2d { x, w, stride, pad }))
    }

    /// Adds a per-channel bias to `[n, c, h, w]` (or `[c, h, w]`) data.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n, c, h, w) = split_image_shape(&self.nodes[x.0].shape).ok_or_else(|| {
            TensorError::Dimension {
                op: "channel_bias",
                detail: "input must be [n,c,h,w] or [c,h,w]".into(),
                shape: self.nodes[x.0].shape.clone(),
            }
        })?;
        if self.nodes[b.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let spatial = h * w;
        let mut out = self.nodes[x.0].data.clone();
        for i in 0..n {
            for ch in 0..c {
                let bias = self.nodes[b.0].data[ch];
                let base = (i * c + ch) * spatial;
                for v in &mut out[base..base + spatial] {
                    *v += bias;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::ChannelBias { x, b }))
    }

    /// Max pooling with exact window coverage; gradient routes to each
    /// window's first maximum in row-major order (lowest flat index).
    pub fn maxpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (batched, n, c, h, w) = split_image_shape(&self.nodes[x.0].shape).ok_or_else(|| {
            TensorError::Dimension {
                op: "maxpool2d",
                detail: "input must be [n,c,h,w] or [c,h,w]".into(),
                shape: self.nodes[x.0].shape.clone(),
            }
        })?;
        let (wh, ww) = window;
        let (sh, sw) = stride;
        let tiles = |dim: usize, win: usize, st: usize| -> Option<usize> {
            if win == 0 || st == 0 || win > dim || (dim - win) % st != 0 {
                None
            } else {
                Some((dim - win) / st + 1)
            }
        };
        let (oh, ow) = match (tiles(h, wh, sh), tiles(w, ww, sw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::Dimension {
                    op: "maxpool2d",
                    detail: format!("window {window:?} stride {stride:?} does not tile {h}x{w}"),
                    shape: self.nodes[x.0].shape.clone(),
                })
            }
        };
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let data = &self.nodes[x.0].data;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let idx = base + (oy * sh + dy) * w + (ox * sw + dx);
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (i * c + ch) * oh * ow + oy * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        Ok(self.push(shape, out, Op::MaxPool2d { x, argmax }))
    }

    /// Batch-mode normalization over `[n, c, h, w]`: per-channel statistics
    /// across all images and positions (biased variance), then affine.
    /// Returns the observed statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnObserved)> {
        let (n, c, h, w) = self.check_bn_shapes("batch_norm", x, gamma, beta)?;
        let m = (n * h * w) as f64;
        let spatial = h * w;
        let data = &self.nodes[x.0].data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &v in &data[base..base + spatial] {
                    acc += v;
                }
            }
            mean[ch] = acc / m;
            let mut acc2 = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &v in &data[base..base + spatial] {
                    let d = v - mean[ch];
                    acc2 += d * d;
                }
            }
            var[ch] = acc2 / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_affine(x, gamma, beta, &mean, &inv_std, n, c, spatial);
        let observed = BnObserved {
            mean: mean.clone(),
            var: var.clone(),
        };
        let v = self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((v, observed))
    }

    /// Normalization with fixed (running) statistics; deterministic and
    /// independent across images.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.check_bn_shapes("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Dimension {
                op: "batch_norm",
                detail: format!("running statistics length {} != channels {c}", running_mean.len()),
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_affine(x, gamma, beta, &mean, &inv_std, n, c, h * w);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn check_bn_shapes(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(TensorError::Dimension {
                op,
                detail: "input must be [n,c,h,w]".into(),
                shape: s.clone(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: s.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        Ok((n, c, h, w))
    }

    fn bn_affine(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        spatial: usize,
    ) -> Vec<f64> {
        let data = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (mu, istd) = (mean[ch], inv_std[ch]);
                let (gc, bc) = (g[ch], b[ch]);
                for j in base..base + spatial {
                    out[j] = gc * (data[j] - mu) * istd + bc;
                }
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Sigmoid { x })
    }

    /// Natural log; callers clamp first so arguments stay positive.
    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Log { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.clamp(lo, hi))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Clamp { x, lo, hi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::ScalarMul { x, c })
    }

    pub fn scalar_add(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v + c).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::ScalarAdd { x })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![total], Op::Sum { x })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s = self.sum(x);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Column means of an `[m, n]` matrix: output `[n]`, entry j is the
    /// arithmetic mean of column j.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "col_mean",
                detail: "input must be [m,n]".into(),
                shape: s.clone(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.nodes[x.0].data[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        Ok(self.push(vec![n], out, Op::ColMean { x }))
    }

    /// Per-group column means of an `[m, n]` matrix whose rows are
    /// partitioned into consecutive groups of the given lengths: output
    /// `[groups, n]`, row g is the column mean over group g's rows.
    pub fn group_col_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "group_col_mean",
                detail: "input must be [m,n]".into(),
                shape: s.clone(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let total: usize = lengths.iter().sum();
        if total != m || lengths.iter().any(|&l| l == 0) {
            return Err(TensorError::Dimension {
                op: "group_col_mean",
                detail: format!("group lengths {lengths:?} do not tile {m} rows"),
                shape: s.clone(),
            });
        }
        let b = lengths.len();
        let mut out = vec![0.0; b * n];
        let data = &self.nodes[x.0].data;
        let mut row = 0;
        for (g, &len) in lengths.iter().enumerate() {
            let dst = &mut out[g * n..(g + 1) * n];
            for _ in 0..len {
                for (d, v) in dst.iter_mut().zip(&data[row * n..(row + 1) * n]) {
                    *d += v;
                }
                row += 1;
            }
            let inv = 1.0 / len as f64;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        Ok(self.push(
            vec![b, n],
            out,
            Op::GroupColMean {
                x,
                lengths: lengths.to_vec(),
            },
        ))
    }

    /// One row of an `[m, n]` matrix as an `[n]` vector.
    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || row >= s[0] {
            return Err(TensorError::Dimension {
                op: "slice_row",
                detail: format!("row {row} of shape {s:?}"),
                shape: s.clone(),
            });
        }
        let n = s[1];
        let data = self.nodes[x.0].data[row * n..(row + 1) * n].to_vec();
        Ok(self.push(vec![n], data, Op::SliceRow { x, row }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                detail: "input must be [m,n]".into(),
                shape: s.clone(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.nodes[x.0].data[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x }))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a scalar loss. Every record is visited exactly
    /// once, in reverse topological (= insertion) order; records that do
    /// not lead to the loss receive no gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if self.spent {
            return Err(TensorError::BadVar { op: "backward (tape already consumed)" });
        }
        self.spent = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[id].grad.take().expect("checked above");
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.propagate(id, &grad, op);
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: Vec<f64>) {
        debug_assert_eq!(contrib.len(), self.nodes[v.0].data.len());
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[v.0].grad = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, dy: &[f64], op: Op) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, dy, &self.nodes[b.0].data, &mut da);
                self.accum(a, da);
                let mut db = vec![0.0; k * n];
                gemm_tn(k, m, n, &self.nodes[a.0].data, dy, &mut db);
                self.accum(b, db);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (_, n, ci, h, wd) = split_image_shape(&self.nodes[x.0].shape).expect("checked");
                let ws = &self.nodes[w.0].shape;
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let geom =
                    ConvGeom::new(ci, h, wd, kh, kw, stride, pad).expect("validated at forward");
                let rows = geom.col_rows();
                let positions = geom.col_cols();
                let total = n * positions;
                let image = ci * h * wd;

                // Rebuild the batched im2col matrix and reorder dY into
                // the matching channel-major layout.
                let mut cols = vec![0.0; rows * total];
                for i in 0..n {
                    im2col(
                        &geom,
                        &self.nodes[x.0].data[i * image..(i + 1) * image],
                        &mut cols,
                        total,
                        i * positions,
                    );
                }
                let mut dy_cm = vec![0.0; co * total];
                for i in 0..n {
                    for ch in 0..co {
                        let src = (i * co + ch) * positions;
                        let dst = ch * total + i * positions;
                        dy_cm[dst..dst + positions].copy_from_slice(&dy[src..src + positions]);
                    }
                }

                // dW = dY · colsᵀ, run in axpy form over a materialized
                // transpose so the inner loops stay vectorized.
                let mut cols_t = vec![0.0; total * rows];
                transpose_into(rows, total, &cols, &mut cols_t);
                let mut dwg = vec![0.0; co * rows];
                gemm_nn(co, total, rows, &dy_cm, &cols_t, &mut dwg);
                let mut dw = vec![0.0; self.nodes[w.0].data.len()];
                scatter_weight_grad(&geom, co, &dwg, &mut dw);

                // dX = fold(Wᵀ · dY) back through the patch map.
                let mut wg = vec![0.0; co * rows];
                gather_weights(&geom, co, &self.nodes[w.0].data, &mut wg);
                let mut dcols = vec![0.0; rows * total];
                gemm_tn(rows, co, total, &wg, &dy_cm, &mut dcols);
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for i in 0..n {
                    col2im_accumulate(
                        &geom,
                        &dcols,
                        &mut dx[i * image..(i + 1) * image],
                        total,
                        i * positions,
                    );
                }
                self.accum(x, dx);
                self.accum(w, dw);
            }
            Op::ChannelBias { x, b } => {
                let (_, n, c, h, w) = split_image_shape(&self.nodes[x.0].shape).expect("checked");
                let spatial = h * w;
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for &g in &dy[base..base + spatial] {
                            db[ch] += g;
                        }
                    }
                }
                self.accum(x, dy.to_vec());
                self.accum(b, db);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[o];
                }
                self.accum(x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let s = &self.nodes[x.0].shape;
                let (n, c, spatial) = (s[0], s[1], s[2] * s[3]);
                let m = (n * spatial) as f64;
                let xd = &self.nodes[x.0].data;
                let g = &self.nodes[gamma.0].data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for ch in 0..c {
                    let (mu, istd) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            let xhat = (xd[j] - mu) * istd;
                            sum_dy += dy[j];
                            sum_dy_xhat += dy[j] * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * istd;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            if batch_stats {
                                let xhat = (xd[j] - mu) * istd;
                                dx[j] = scale * (dy[j] - sum_dy / m - xhat * sum_dy_xhat / m);
                            } else {
                                dx[j] = scale * dy[j];
                            }
                        }
                    }
                }
                self.accum(x, dx);
                self.accum(gamma, dgamma);
                self.accum(beta, dbeta);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(x, dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = self.nodes[id]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                self.accum(x, dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| g / v)
                    .collect();
                self.accum(x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v >= lo && v <= hi { g } else { 0.0 })
                    .collect();
                self.accum(x, dx);
            }
            Op::Add { a, b } => {
                self.accum(a, dy.to_vec());
                self.accum(b, dy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accum(a, dy.to_vec());
                self.accum(b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = self.nodes[b.0].data.iter().zip(dy).map(|(&v, &g)| g * v).collect();
                let db: Vec<f64> = self.nodes[a.0].data.iter().zip(dy).map(|(&v, &g)| g * v).collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::ScalarMul { x, c } => {
                self.accum(x, dy.iter().map(|g| g * c).collect());
            }
            Op::ScalarAdd { x } => {
                self.accum(x, dy.to_vec());
            }
            Op::Sum { x } => {
                let g = dy[0];
                self.accum(x, vec![g; self.nodes[x.0].data.len()]);
            }
            Op::ColMean { x } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let inv = 1.0 / m as f64;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[j] * inv;
                    }
                }
                self.accum(x, dx);
            }
            Op::GroupColMean { x, lengths } => {
                let n = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                let mut row = 0;
                for (g, &len) in lengths.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for _ in 0..len {
                        for (d, g_val) in dx[row * n..(row + 1) * n]
                            .iter_mut()
                            .zip(&dy[g * n..(g + 1) * n])
                        {
                            *d = g_val * inv;
                        }
                        row += 1;
                    }
                }
                self.accum(x, dx);
            }
            Op::SliceRow { x, row } => {
                let n = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                dx[row * n..(row + 1) * n].copy_from_slice(dy);
                self.accum(x, dx);
            }
            Op::Transpose { x } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                self.accum(x, dx);
            }
            Op::Reshape { x } => {
                self.accum(x, dy.to_vec());
            }
        }
    }
}

/// Interprets a shape as `[n, c, h, w]`, accepting `[c, h, w]` as n = 1.
/// Returns `(batched, n, c, h, w)`.
fn split_image_shape(shape: &[usize]) -> Option<(bool, usize, usize, usize, usize)> {
    match shape.len() {
        4 => Some((true, shape[0], shape[1], shape[2], shape[3])),
        3 => Some((false, 1, shape[0], shape[1], shape[2])),
        _ => None,
    }
}
