use super::kernels::{self, ConvDims};
use super::{ParamTensor, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool {
        input: Var,
        window: usize,
    },
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelStd {
        input: Var,
        eps: f64,
    },
    AdaIn {
        content: Var,
        mean: Var,
        std: Var,
        eps: f64,
    },
    Lerp {
        a: Var,
        b: Var,
        weights: Vec<f64>,
    },
    Nll {
        log_probs: Var,
        labels: Vec<usize>,
    },
    UniformCrossEntropy(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for backpropagation. Only nodes that
/// depend on a gradient-tracked leaf take part in the sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rank_check(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, shape, &vec![0; rank]));
    }
    Ok(())
}

/// Per-(sample, channel) spatial mean and `sqrt(var + eps²)`.
fn plane_stats(plane: &[f64], eps: f64) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps * eps).sqrt())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !all_finite(&data) {
            let bad = data.iter().find(|v| !v.is_finite()).copied().unwrap_or(f64::NAN);
            return Err(Error::Domain(format!("non-finite value {bad} produced by {op:?}")));
        }
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiated iff the tensor tracks gradients.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: t.track_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter as a tracked leaf (`trainable`) or as a constant.
    pub fn param(&mut self, p: &ParamTensor, trainable: bool) -> Var {
        if trainable {
            self.input(&p.value)
        } else {
            self.constant(&p.value)
        }
    }

    /// A copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.data.clone())
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.data.len() != 1 {
            return Err(Error::Rank {
                op: "scalar_value",
                shape: n.shape.clone(),
            });
        }
        Ok(n.data[0])
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `v`; `None` for
    /// values that do not track gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        let data = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok((na.shape.clone(), data, na.requires_grad || nb.requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        self.push(shape, data, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.push(shape, data, rg, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.push(shape, data, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let n = self.node(a);
        let data = n.data.iter().map(|x| x * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, data, rg, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::shape("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&na.data, &nb.data, m, k, n, &mut out);
        let rg = na.requires_grad || nb.requires_grad;
        self.push(vec![m, n], out, rg, Op::MatMul(a, b))
    }

    /// Stride-1 convolution with zero padding that preserves `H×W`.
    ///
    /// `input`: `B×Cin×H×W`, `weight`: `Cout×Cin×k×k` with odd `k`,
    /// `bias`: `Cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ni, nw) = (self.node(input), self.node(weight));
        let (is, ws) = (&ni.shape, &nw.shape);
        if is.len() != 4 || ws.len() != 4 || ws[1] != is[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", is, ws));
        }
        let dims = ConvDims {
            batch: is[0],
            in_ch: is[1],
            out_ch: ws[0],
            height: is[2],
            width: is[3],
            kernel: ws[2],
        };
        let mut rg = ni.requires_grad || nw.requires_grad;
        let bias_data = match bias {
            Some(b) => {
                let nb = self.node(b);
                if nb.shape != [dims.out_ch] {
                    return Err(Error::shape("conv2d bias", &nb.shape, &[dims.out_ch]));
                }
                rg |= nb.requires_grad;
                Some(nb.data.as_slice())
            }
            None => None,
        };
        let mut out = vec![0.0; dims.batch * dims.out_ch * dims.height * dims.width];
        kernels::conv2d_forward(dims, &ni.data, &nw.data, bias_data, &mut out);
        let shape = vec![dims.batch, dims.out_ch, dims.height, dims.width];
        self.push(shape, out, rg, Op::Conv2d { input, weight, bias, dims })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let data = n.data.iter().map(|&x| x.max(0.0)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, data, rg, Op::Relu(a))
    }

    /// `B×C×H×W → B×C`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        rank_check("global_avg_pool", &n.shape, 4)?;
        let (b, c, plane) = (n.shape[0], n.shape[1], n.shape[2] * n.shape[3]);
        let data = n
            .data
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = n.requires_grad;
        self.push(vec![b, c], data, rg, Op::GlobalAvgPool(a))
    }

    /// Non-overlapping average pooling; `window` must divide both spatial sizes.
    pub fn avg_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        let n = self.node(a);
        rank_check("avg_pool", &n.shape, 4)?;
        let s = &n.shape;
        if window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
            return Err(Error::shape("avg_pool", s, &[window, window]));
        }
        let shape = vec![s[0], s[1], s[2] / window, s[3] / window];
        let mut out = vec![0.0; shape.iter().product()];
        kernels::avg_pool_forward(s[0] * s[1], s[2], s[3], window, &n.data, &mut out);
        let rg = n.requires_grad;
        self.push(shape, out, rg, Op::AvgPool { input: a, window })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.data.len() {
            return Err(Error::shape("reshape", &n.shape, &shape));
        }
        let (data, rg) = (n.data.clone(), n.requires_grad);
        self.push(shape, data, rg, Op::Reshape(a))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let lead = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, vec![lead, rest])
    }

    /// `input: B×F`, `weight: N×F`, `bias: N` → `B×N`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ni, nw) = (self.node(input), self.node(weight));
        if ni.shape.len() != 2 || nw.shape.len() != 2 || ni.shape[1] != nw.shape[1] {
            return Err(Error::shape("linear", &ni.shape, &nw.shape));
        }
        let (b, f, n) = (ni.shape[0], ni.shape[1], nw.shape[0]);
        let mut out = vec![0.0; b * n];
        let mut rg = ni.requires_grad || nw.requires_grad;
        if let Some(bv) = bias {
            let nb = self.node(bv);
            if nb.shape != [n] {
                return Err(Error::shape("linear bias", &nb.shape, &[n]));
            }
            rg |= nb.requires_grad;
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(&nb.data);
            }
        }
        kernels::matmul_bt_acc(&ni.data, &nw.data, b, f, n, &mut out);
        self.push(vec![b, n], out, rg, Op::Linear { input, weight, bias })
    }

    /// Row-wise log-softmax of a `B×N` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        rank_check("log_softmax", &n.shape, 2)?;
        let cols = n.shape[1];
        let mut out = Vec::with_capacity(n.data.len());
        for row in n.data.chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.data.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.data.iter().sum::<f64>() / n.data.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// `Σ wᵢ·xᵢ` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Domain("weighted_sum of no terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        let mut rg = false;
        for &(v, w) in terms {
            let n = self.node(v);
            if n.shape != shape {
                return Err(Error::shape("weighted_sum", &shape, &n.shape));
            }
            rg |= n.requires_grad;
            for (o, x) in out.iter_mut().zip(&n.data) {
                *o += w * x;
            }
        }
        self.push(shape, out, rg, Op::WeightedSum(terms.to_vec()))
    }

    /// Selects rows along the leading dimension: `out[i] = input[index[i]]`.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let n = self.node(input);
        let rows = n.shape[0];
        let width = n.data.len() / rows;
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", &n.shape, index));
        }
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&n.data[i * width..(i + 1) * width]);
        }
        let mut shape = n.shape.clone();
        shape[0] = index.len();
        let rg = n.requires_grad;
        self.push(shape, data, rg, Op::GatherRows { input, index: index.to_vec() })
    }

    /// Per-(sample, channel) spatial mean: `B×C×H×W → B×C`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        rank_check("channel_mean", &n.shape, 4)?;
        let plane = n.shape[2] * n.shape[3];
        let data = n
            .data
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let (shape, rg) = (vec![n.shape[0], n.shape[1]], n.requires_grad);
        self.push(shape, data, rg, Op::ChannelMean(a))
    }

    /// Per-(sample, channel) `sqrt(population variance + eps²)`.
    pub fn channel_std(&mut self, a: Var, eps: f64) -> Result<Var> {
        let n = self.node(a);
        rank_check("channel_std", &n.shape, 4)?;
        let plane = n.shape[2] * n.shape[3];
        let data = n.data.chunks_exact(plane).map(|p| plane_stats(p, eps).1).collect();
        let (shape, rg) = (vec![n.shape[0], n.shape[1]], n.requires_grad);
        self.push(shape, data, rg, Op::ChannelStd { input: a, eps })
    }

    /// Re-normalizes `content` per channel to the given target statistics:
    /// `std ⊙ (x − μ(x)) / σ(x) + mean`.
    pub fn adain(&mut self, content: Var, mean: Var, std: Var, eps: f64) -> Result<Var> {
        let (nc, nm, ns) = (self.node(content), self.node(mean), self.node(std));
        rank_check("adain", &nc.shape, 4)?;
        let stat_shape = [nc.shape[0], nc.shape[1]];
        if nm.shape != stat_shape {
            return Err(Error::shape("adain mean", &nc.shape, &nm.shape));
        }
        if ns.shape != stat_shape {
            return Err(Error::shape("adain std", &nc.shape, &ns.shape));
        }
        let plane = nc.shape[2] * nc.shape[3];
        let mut out = Vec::with_capacity(nc.data.len());
        for (i, p) in nc.data.chunks_exact(plane).enumerate() {
            let (mu, sigma) = plane_stats(p, eps);
            let (tm, ts) = (nm.data[i], ns.data[i]);
            out.extend(p.iter().map(|x| ts * (x - mu) / sigma + tm));
        }
        let rg = nc.requires_grad || nm.requires_grad || ns.requires_grad;
        let shape = nc.shape.clone();
        self.push(shape, out, rg, Op::AdaIn { content, mean, std, eps })
    }

    /// Row-weighted interpolation `wᵢ·a[i] + (1 − wᵢ)·b[i]`.
    pub fn lerp(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape || weights.len() != na.shape[0] {
            return Err(Error::shape("lerp", &na.shape, &nb.shape));
        }
        let width = na.data.len() / weights.len();
        let mut out = Vec::with_capacity(na.data.len());
        for (i, &w) in weights.iter().enumerate() {
            let r = i * width..(i + 1) * width;
            out.extend(na.data[r.clone()].iter().zip(&nb.data[r]).map(|(x, y)| w * x + (1.0 - w) * y));
        }
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push(shape, out, rg, Op::Lerp { a, b, weights: weights.to_vec() })
    }

    /// Mean negative log-likelihood of `labels` under `B×N` log-probabilities.
    pub fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let n = self.node(log_probs);
        rank_check("nll", &n.shape, 2)?;
        let (rows, cols) = (n.shape[0], n.shape[1]);
        if labels.len() != rows {
            return Err(Error::shape("nll", &n.shape, &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Label { label, classes: cols });
        }
        let loss = -labels.iter().enumerate().map(|(i, &l)| n.data[i * cols + l]).sum::<f64>() / rows as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![loss], rg, Op::Nll { log_probs, labels: labels.to_vec() })
    }

    /// Mean cross-entropy between the uniform distribution and `B×N`
    /// log-probabilities.
    pub fn uniform_cross_entropy(&mut self, log_probs: Var) -> Result<Var> {
        let n = self.node(log_probs);
        rank_check("uniform_cross_entropy", &n.shape, 2)?;
        let loss = -n.data.iter().sum::<f64>() / n.data.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![loss], rg, Op::UniformCrossEntropy(log_probs))
    }

    /// Differentiates the scalar `loss` w.r.t. every gradient-tracked node.
    ///
    /// Gradients from a previous call are discarded. Tracked leaves that the
    /// loss does not reach get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: ln.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.local_grads(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() && matches!(node.op, Op::Leaf) {
                *g = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that needs them.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &mut dyn FnMut() -> Vec<f64>| {
            if self.needs(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.node(*a).data, &self.node(*b).data);
                emit(*a, &mut || g.iter().zip(db).map(|(x, y)| x * y).collect());
                emit(*b, &mut || g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, f) => emit(*a, &mut || g.iter().map(|x| x * f).collect()),
            Op::MatMul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                emit(*a, &mut || {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_bt_acc(g, &nb.data, m, n, k, &mut ga);
                    ga
                });
                emit(*b, &mut || {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_acc(&na.data, g, m, k, n, &mut gb);
                    gb
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let (ni, nw) = (self.node(*input), self.node(*weight));
                let mut gi = self.needs(*input).then(|| vec![0.0; ni.data.len()]);
                let mut gw = self.needs(*weight).then(|| vec![0.0; nw.data.len()]);
                let mut gb = bias.filter(|b| self.needs(*b)).map(|_| vec![0.0; dims.out_ch]);
                kernels::conv2d_backward(
                    *dims,
                    &ni.data,
                    &nw.data,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(gi.map(|v| (*input, v)));
                out.extend(gw.map(|v| (*weight, v)));
                out.extend(bias.zip(gb));
            }
            Op::Relu(a) => {
                let da = &self.node(*a).data;
                emit(*a, &mut || {
                    g.iter().zip(da).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect()
                });
            }
            Op::GlobalAvgPool(a) | Op::ChannelMean(a) => {
                let s = &self.node(*a).shape;
                let plane = s[2] * s[3];
                emit(*a, &mut || {
                    g.iter()
                        .flat_map(|gv| std::iter::repeat_n(gv / plane as f64, plane))
                        .collect()
                });
            }
            Op::AvgPool { input, window } => {
                let s = &self.node(*input).shape;
                emit(*input, &mut || {
                    let mut gi = vec![0.0; s.iter().product()];
                    kernels::avg_pool_backward(s[0] * s[1], s[2], s[3], *window, g, &mut gi);
                    gi
                });
            }
            Op::Reshape(a) => emit(*a, &mut || g.to_vec()),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (ni, nw) = (self.node(*input), self.node(*weight));
                let (b, f, n) = (ni.shape[0], ni.shape[1], nw.shape[0]);
                emit(*input, &mut || {
                    let mut gi = vec![0.0; b * f];
                    kernels::matmul_acc(g, &nw.data, b, n, f, &mut gi);
                    gi
                });
                emit(*weight, &mut || {
                    let mut gw = vec![0.0; n * f];
                    kernels::matmul_at_acc(g, &ni.data, b, n, f, &mut gw);
                    gw
                });
                if let Some(bv) = bias {
                    emit(*bv, &mut || {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        gb
                    });
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.shape[1];
                emit(*a, &mut || {
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, lrow) in g.chunks_exact(cols).zip(node.data.chunks_exact(cols)) {
                        let total: f64 = grow.iter().sum();
                        ga.extend(grow.iter().zip(lrow).map(|(gv, lp)| gv - lp.exp() * total));
                    }
                    ga
                });
            }
            Op::Sum(a) => {
                let len = self.node(*a).data.len();
                emit(*a, &mut || vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.node(*a).data.len();
                emit(*a, &mut || vec![g[0] / len as f64; len]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    emit(v, &mut || g.iter().map(|x| w * x).collect());
                }
            }
            Op::GatherRows { input, index } => {
                let len = self.node(*input).data.len();
                let width = g.len() / index.len();
                emit(*input, &mut || {
                    let mut gi = vec![0.0; len];
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut gi[src * width..(src + 1) * width];
                        dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(d, x)| *d += x);
                    }
                    gi
                });
            }
            Op::ChannelStd { input, eps } => {
                let n = self.node(*input);
                let plane = n.shape[2] * n.shape[3];
                emit(*input, &mut || {
                    let mut gi = Vec::with_capacity(n.data.len());
                    for (p, (gv, sd)) in n.data.chunks_exact(plane).zip(g.iter().zip(&node.data)) {
                        let mu = p.iter().sum::<f64>() / plane as f64;
                        let k = gv / (plane as f64 * sd);
                        gi.extend(p.iter().map(|x| k * (x - mu)));
                    }
                    gi
                });
                let _ = eps;
            }
            Op::AdaIn {
                content,
                mean,
                std,
                eps,
            } => {
                let nc = self.node(*content);
                let ts = &self.node(*std).data;
                let plane = nc.shape[2] * nc.shape[3];
                let normalized = |i: usize| {
                    let p = &nc.data[i * plane..(i + 1) * plane];
                    let (mu, sigma) = plane_stats(p, *eps);
                    (p.iter().map(move |x| (x - mu) / sigma), sigma)
                };
                let planes = ts.len();
                emit(*mean, &mut || g.chunks_exact(plane).map(|gp| gp.iter().sum()).collect());
                emit(*std, &mut || {
                    (0..planes)
                        .map(|i| {
                            let (xh, _) = normalized(i);
                            g[i * plane..(i + 1) * plane].iter().zip(xh).map(|(a, b)| a * b).sum()
                        })
                        .collect()
                });
                emit(*content, &mut || {
                    let mut gi = Vec::with_capacity(nc.data.len());
                    for i in 0..planes {
                        let gp = &g[i * plane..(i + 1) * plane];
                        let (xh, sigma) = normalized(i);
                        let xh: Vec<f64> = xh.collect();
                        let n = plane as f64;
                        let g_mean = gp.iter().sum::<f64>() / n;
                        let gx_mean = gp.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        let k = ts[i] / sigma;
                        gi.extend(gp.iter().zip(&xh).map(|(gv, x)| k * (gv - g_mean - x * gx_mean)));
                    }
                    gi
                });
            }
            Op::Lerp { a, b, weights } => {
                let width = g.len() / weights.len();
                let row_scaled = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
                    g.chunks_exact(width)
                        .zip(weights)
                        .flat_map(|(row, &w)| row.iter().map(move |x| x * f(w)))
                        .collect()
                };
                emit(*a, &mut || row_scaled(&|w| w));
                emit(*b, &mut || row_scaled(&|w| 1.0 - w));
            }
            Op::Nll { log_probs, labels } => {
                let n = self.node(*log_probs);
                let cols = n.shape[1];
                emit(*log_probs, &mut || {
                    let mut gl = vec![0.0; n.data.len()];
                    let k = -g[0] / labels.len() as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * cols + l] = k;
                    }
                    gl
                });
            }
            Op::UniformCrossEntropy(a) => {
                let len = self.node(*a).data.len();
                emit(*a, &mut || vec![-g[0] / len as f64; len]);
            }
        }
        out
    }
}


/// Branch-free so it vectorizes; `is_finite` with early exit does not.
fn all_finite(data: &[f64]) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    !data.iter().fold(false, |bad, v| bad | (v.to_bits() & EXP == EXP))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let eye = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.input(&t(&[2, 2], &[0.5, -2.0, 3.25, 7.0]));
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.data(y), tape.data(a));
    }

    #[test]
    fn conv_with_unit_kernel_doubles_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x = tape.input(&t(&[1, 1, 3, 3], &data));
        let w = tape.input(&t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, None).unwrap();
        let doubled: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.data(y), doubled.as_slice());
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(&t(&[2], &[1.0, 2.0]).tracked());
        let x = tape.input(&t(&[2], &[3.0, 4.0]));
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), Some(&[3.0, 4.0][..]));
        assert_eq!(tape.grad(x), None);
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(&Tensor::scalar(-1.0).tracked());
        let y = tape.relu(w).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w), Some(&[0.0][..]));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(&Tensor::scalar(2.0).tracked());
        let unused = tape.input(&t(&[2], &[1.0, 1.0]).tracked());
        let y = tape.scale(w, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w), Some(&[3.0][..]));
        assert_eq!(tape.grad(unused), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::new();
        let w = tape.input(&Tensor::scalar(3.0).tracked());
        let sq = tape.mul(w, w).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w), Some(&[6.0][..]));
        // a second backward recomputes instead of adding to the first
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w), Some(&[6.0][..]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.input(&t(&[2], &[1.0, 2.0]).tracked());
        assert!(matches!(tape.backward(w), Err(Error::Rank { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.input(&t(&[2], &[1.0, 2.0]));
        let b = tape.input(&t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let lp = tape.input(&t(&[1, 2], &[-0.5, -1.0]));
        assert!(matches!(tape.nll(lp, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(&Tensor::scalar(2.0).tracked());
        let d = tape.detach(w);
        let y = tape.mul(w, d).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w), Some(&[2.0][..]));
    }
}
