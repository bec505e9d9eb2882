//! A small reverse-mode differentiation tape over dense `f64` arrays.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Values are stored row-major; shapes are carried only for bookkeeping and
//! for the accessors. Parameter leaves borrow their storage so binding a
//! large weight matrix to a tape is free.
//!
//! `requires_grad` propagates from leaves: a node needs a gradient iff any of
//! its inputs does. Backward never visits subgraphs hanging off frozen leaves.

use std::borrow::Cow;
use std::rc::Rc;

/// Sentinel in a gather index meaning "emit 0.0".
pub const ZERO_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    Scale(Var, f64),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>),
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        plane: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        training: bool,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
    },
    DotConst(Var, Rc<Vec<f64>>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::AddBroadcast(a, b) => vec![*a, *b],
            Op::AddConst(x)
            | Op::MulConst(x, _)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::LeakyRelu(x, _)
            | Op::Softmax(x, _)
            | Op::Gather(x, _)
            | Op::DotConst(x, _) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Concat(parts) => parts.clone(),
            Op::MeanRows { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Bce { logits, .. } => vec![*logits],
        }
    }
}

/// Geometry of a stride-1, zero-padded 2-D convolution over `[batch, cin, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kernel
    }
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

pub enum NormMode<'s> {
    Train { eps: f64 },
    Infer {
        running_mean: &'s [f64],
        running_var: &'s [f64],
        eps: f64,
    },
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `c = op(a) · op(b) + beta·c` for one matrix. Strides are in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover every strided element addressed
    // for the given dims; the asserts below check the extents.
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Label-free, overflow-safe `-[t·ln σ(z) + (1-t)·ln(1-σ(z))]`.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar");
        val[0]
    }

    fn push_leaf(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, requires_grad: bool) -> Var {
        assert_eq!(value.len(), numel(&shape), "leaf value does not match shape {shape:?}");
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), shape.to_vec(), requires_grad)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        self.leaf(value, shape, false)
    }

    /// Binds borrowed storage (typically a model parameter) as a leaf.
    pub fn borrowed(&mut self, value: &'a [f64], shape: &[usize], requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), shape.to_vec(), requires_grad)
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Plain 2-D product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let v = self.bmm(a, b, 1, sa[0], sa[1], sb[1], false, false);
        self.nodes[v.0].shape = vec![sa[0], sb[1]];
        v
    }

    /// Batched product; `a` holds `batch` matrices of `op(a)` = m×k and `b`
    /// holds `batch` matrices of `op(b)` = k×n. Output is `[batch, m, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn bmm(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) -> Var {
        assert_eq!(self.value(a).len(), batch * m * k, "bmm lhs size");
        assert_eq!(self.value(b).len(), batch * k * n, "bmm rhs size");
        let mut out = vec![0.0; batch * m * n];
        let sa = if ta { (1, m) } else { (k, 1) };
        let sb = if tb { (1, k) } else { (n, 1) };
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    sa,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    sb,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                );
            }
        }
        self.push(
            out,
            vec![batch, m, n],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add(a, b))
    }

    /// `a + b` with `b` tiled over `a`'s leading elements (`len(a) % len(b) == 0`).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(!bv.is_empty() && av.len() % bv.len() == 0, "broadcast mismatch");
        let out: Vec<f64> = av
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddBroadcast(a, b))
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        assert_eq!(self.value(a).len(), c.len());
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Var {
        assert_eq!(self.value(a).len(), c.len());
        let out: Vec<f64> = self.value(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Softmax over contiguous rows of length `cols`. Entries equal to
    /// `-inf` receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, cols: usize) -> Var {
        let av = self.value(a);
        assert!(cols > 0 && av.len() % cols == 0);
        let mut out = vec![0.0; av.len()];
        for (row, dst) in av.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Softmax(a, cols))
    }

    /// Normalizes each row of length `cols` (biased variance), then applies
    /// the per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let cols = self.value(gamma).len();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert!(xv.len() % cols == 0 && bv.len() == cols);
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            },
        )
    }

    /// `out[i] = x[index[i]]`, or 0 where `index[i] == ZERO_INDEX`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), numel(shape));
        let xv = self.value(x);
        let out: Vec<f64> = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { xv[i] })
            .collect();
        self.push(out, shape.to_vec(), Op::Gather(x, index))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n = numel(shape);
        assert_eq!(n, self.value(x).len());
        self.gather(x, Rc::new((0..n).collect()), shape)
    }

    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let mut out = Vec::with_capacity(numel(shape));
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        assert_eq!(out.len(), numel(shape));
        self.push(out, shape.to_vec(), Op::Concat(parts.to_vec()))
    }

    /// Column means of a `[rows, cols]` view.
    pub fn mean_rows(&mut self, x: Var, cols: usize) -> Var {
        let xv = self.value(x);
        assert!(cols > 0 && xv.len() % cols == 0 && !xv.is_empty());
        let rows = xv.len() / cols;
        let mut out = vec![0.0; cols];
        for row in xv.chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        self.push(out, vec![cols], Op::MeanRows { x, rows, cols })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            kernel,
            pad,
        } = geom;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.len(), batch * cin * h * wd);
        assert_eq!(wv.len(), cout * cin * kernel * kernel);
        assert_eq!(bv.len(), cout);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; batch * cout * oh * ow];
        for n in 0..batch {
            for co in 0..cout {
                let dst = &mut out[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
                dst.iter_mut().for_each(|d| *d = bv[co]);
                for ci in 0..cin {
                    let src = &xv[(n * cin + ci) * h * wd..(n * cin + ci + 1) * h * wd];
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wt = wv[((co * cin + ci) * kernel + ky) * kernel + kx];
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let srow = &src[(iy - pad) * wd..(iy - pad + 1) * wd];
                                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    let ix = ox + kx;
                                    if ix >= pad && ix - pad < wd {
                                        *d += wt * srow[ix - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(out, vec![batch, cout, oh, ow], Op::Conv2d { x, w, b, geom })
    }

    /// Batch normalization over `[batch, channels, plane]`. In training mode
    /// the batch statistics are also returned for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        mode: NormMode<'_>,
    ) -> (Var, Option<BatchStats>) {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(gv.len(), channels);
        assert_eq!(bv.len(), channels);
        assert!(batch > 0 && xv.len() % (batch * channels) == 0);
        let plane = xv.len() / (batch * channels);
        let count = (batch * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut rstd = vec![0.0; channels];
        let mut stats = None;
        let training = matches!(mode, NormMode::Train { .. });
        match mode {
            NormMode::Train { eps } => {
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for n in 0..batch {
                        s += xv[(n * channels + c) * plane..(n * channels + c + 1) * plane]
                            .iter()
                            .sum::<f64>();
                    }
                    mean[c] = s / count;
                    let mut q = 0.0;
                    for n in 0..batch {
                        q += xv[(n * channels + c) * plane..(n * channels + c + 1) * plane]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                    var[c] = q / count;
                    rstd[c] = 1.0 / (var[c] + eps).sqrt();
                }
                let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * correction).collect(),
                });
            }
            NormMode::Infer {
                running_mean,
                running_var,
                eps,
            } => {
                assert_eq!(running_mean.len(), channels);
                mean.copy_from_slice(running_mean);
                for c in 0..channels {
                    rstd[c] = 1.0 / (running_var[c] + eps).sqrt();
                }
            }
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    let h = (xv[i] - mean[c]) * rstd[c];
                    xhat[i] = h;
                    out[i] = h * gv[c] + bv[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            out,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch,
                channels,
                plane,
                xhat,
                rstd,
                training,
            },
        );
        (v, stats)
    }

    /// Mean binary cross-entropy of `logits` against soft `targets`.
    pub fn bce_mean(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        assert!(!targets.is_empty());
        let loss = lv
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| bce_with_logit(z, t))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(vec![loss], vec![1], Op::Bce { logits, targets })
    }

    /// Scalar `Σ x·c`.
    pub fn dot_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Var {
        assert_eq!(self.value(x).len(), c.len());
        let s = self.value(x).iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        self.push(vec![s], vec![1], Op::DotConst(x, c))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        self.backward_with(root, vec![1.0])
    }

    /// Reverse sweep seeded with `d(loss)/d(root) = seed`.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(root).len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let sa = if ta { (1, m) } else { (k, 1) };
                let sb = if tb { (1, k) } else { (n, 1) };
                if self.wants(a) {
                    let bv = self.value(b);
                    let ga = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        // d op(a) = G · op(b)^T, written through op(a)'s strides
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &bv[bi * k * n..(bi + 1) * k * n],
                            (sb.1, sb.0),
                            1.0,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            sa,
                        );
                    }
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let gb = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            (sa.1, sa.0),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            1.0,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            sb,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.wants(b) {
                    let len = self.value(b).len();
                    let gb = slot(grads, b, len);
                    for chunk in g.chunks(len) {
                        add_into(gb, chunk);
                    }
                }
            }
            &Op::AddConst(a) => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((d, gi), ci) in ga.iter_mut().zip(g).zip(c.iter()) {
                        *d += gi * ci;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    for (d, gi) in slot(grads, a, g.len()).iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = slot(grads, a, g.len());
                    for ((d, gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d += gi * gelu(x).1;
                    }
                }
            }
            &Op::LeakyRelu(a, slope) => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = slot(grads, a, g.len());
                    for ((d, gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d += if x > 0.0 { *gi } else { slope * gi };
                    }
                }
            }
            &Op::Softmax(a, cols) => {
                if self.wants(a) {
                    let y = &node.value;
                    let ga = slot(grads, a, g.len());
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; cols];
                    for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            dh[c] = gr[c] * gv[c];
                            m1 += dh[c];
                            m2 += dh[c] * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += rstd[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::Gather(x, index) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let gx = slot(grads, *x, len);
                    for (&i, &gi) in index.iter().zip(g) {
                        if i != ZERO_INDEX {
                            gx[i] += gi;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        add_into(slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::MeanRows { x, rows, cols } => {
                if self.wants(x) {
                    let gx = slot(grads, x, rows * cols);
                    let inv = 1.0 / rows as f64;
                    for row in gx.chunks_mut(cols) {
                        for (d, gi) in row.iter_mut().zip(g) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom } => self.conv2d_backward(x, w, b, geom, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch,
                channels,
                plane,
                xhat,
                rstd,
                training,
            } => {
                let (batch, channels, plane) = (*batch, *channels, *plane);
                let gv = self.value(*gamma);
                let mut sum_g = vec![0.0; channels];
                let mut sum_gh = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * plane;
                        for i in base..base + plane {
                            sum_g[c] += g[i];
                            sum_gh[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*gamma) {
                    add_into(slot(grads, *gamma, channels), &sum_gh);
                }
                if self.wants(*beta) {
                    add_into(slot(grads, *beta, channels), &sum_g);
                }
                if self.wants(*x) {
                    let count = (batch * plane) as f64;
                    let gx = slot(grads, *x, g.len());
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let scale = gv[c] * rstd[c];
                            for i in base..base + plane {
                                gx[i] += if *training {
                                    scale * (g[i] - sum_g[c] / count - xhat[i] * sum_gh[c] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let inv = g[0] / targets.len() as f64;
                    let gl = slot(grads, *logits, lv.len());
                    for ((d, &z), &t) in gl.iter_mut().zip(lv).zip(targets) {
                        *d += (sigmoid(z) - t) * inv;
                    }
                }
            }
            Op::DotConst(x, c) => {
                if self.wants(*x) {
                    for (d, ci) in slot(grads, *x, c.len()).iter_mut().zip(c.iter()) {
                        *d += g[0] * ci;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            kernel,
            pad,
        } = geom;
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (xv, wv) = (self.value(x), self.value(w));
        if self.wants(b) {
            let gb = slot(grads, b, cout);
            for n in 0..batch {
                for (co, d) in gb.iter_mut().enumerate() {
                    *d += g[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow]
                        .iter()
                        .sum::<f64>();
                }
            }
        }
        let want_w = self.wants(w);
        let want_x = self.wants(x);
        let mut gw = if want_w { Some(vec![0.0; wv.len()]) } else { None };
        let mut gx = if want_x { Some(vec![0.0; xv.len()]) } else { None };
        for n in 0..batch {
            for co in 0..cout {
                let gsrc = &g[(n * cout + co) * oh * ow..(n * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let xoff = (n * cin + ci) * h * wd;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let widx = ((co * cin + ci) * kernel + ky) * kernel + kx;
                            let wt = wv[widx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let row = xoff + (iy - pad) * wd;
                                for ox in 0..ow {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    let go = gsrc[oy * ow + ox];
                                    acc += go * xv[row + ix - pad];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[row + ix - pad] += go * wt;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gw) = gw {
            add_into(slot(grads, w, gw.len()), &gw);
        }
        if let Some(gx) = gx {
            add_into(slot(grads, x, gx.len()), &gx);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward sweep, indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Index map for a 2×2 max pool with stride 2 over `[batch, channels, h, w]`,
/// choosing the first maximal element of each window.
pub fn maxpool2x2_index(values: &[f64], batch_channels: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(batch_channels * oh * ow);
    for p in 0..batch_channels {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if values[i] > values[best] {
                        best = i;
                    }
                }
                index.push(best);
            }
        }
    }
    index
}
