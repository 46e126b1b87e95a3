//! Operation tape for reverse-mode differentiation.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{KrError, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AvgPool2d { x: usize, geom: PoolGeom },
    Reshape { x: usize },
    Sum { x: usize },
    /// Mean over rows of -sum_k p[k] * log softmax(z/T)[k]; saved softmax for backward.
    SoftmaxXent { logits: usize, probs: Vec<f64>, temp: f64, softmax: Vec<f64> },
    L2 { a: usize, b: usize, dist: f64 },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed operations. Backward walks the records in exact
/// reverse execution order and accumulates gradients additively.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient (detached constant).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), false, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, requires, Op::Leaf))
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires,
            grad: n.grad.clone(),
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires: bool, op: Op) -> Var {
        self.nodes.push(Node { data, shape, requires, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<Var> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(KrError::NonFinite(format!("{what} forward output")))
        }
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KrError::Dim(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        let v = self.push(out, vec![m, n], req, Op::Matmul { a: a.0, b: b.0 });
        self.check_finite(v, "matmul")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(KrError::Dim(format!("conv2d expects 4-d input/weight, got {sx:?}, {sw:?}")));
        }
        if sw[2] != sw[3] {
            return Err(KrError::Dim(format!("conv2d kernel must be square, got {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(KrError::Dim(format!(
                "conv2d channel mismatch: input {sx:?} vs weight {sw:?}"
            )));
        }
        if stride == 0 {
            return Err(KrError::Usage("conv2d stride must be positive".into()));
        }
        let (batch, in_ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_ch, kernel) = (sw[0], sw[2]);
        let span_h = (in_h + 2 * pad).checked_sub(kernel);
        let span_w = (in_w + 2 * pad).checked_sub(kernel);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(KrError::Dim(format!("conv2d kernel {kernel} larger than padded input"))),
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(KrError::Dim(format!(
                "conv2d output extent not integral: input {in_h}x{in_w}, kernel {kernel}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        };
        let out = kernels::conv2d(&self.nodes[x.0].data, &self.nodes[w.0].data, &geom);
        let shape = vec![batch, out_ch, geom.out_h, geom.out_w];
        let req = self.nodes[x.0].requires || self.nodes[w.0].requires;
        let v = self.push(out, shape, req, Op::Conv2d { x: x.0, w: w.0, geom });
        self.check_finite(v, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires;
        let v = self.push(out, shape, req, Op::Relu { x: x.0 });
        self.check_finite(v, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(KrError::Dim(format!(
                "add shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        let v = self.push(out, shape, req, Op::Add { a: a.0, b: b.0 });
        self.check_finite(v, "add")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires;
        let v = self.push(out, shape, req, Op::Scale { x: x.0, c });
        self.check_finite(v, "scale")
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(KrError::Dim(format!("avgpool2d expects 4-d input, got {sx:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(KrError::Usage("avgpool2d kernel/stride must be positive".into()));
        }
        let (batch, ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        if kernel > in_h || kernel > in_w {
            return Err(KrError::Dim(format!("avgpool2d kernel {kernel} exceeds input {in_h}x{in_w}")));
        }
        if (in_h - kernel) % stride != 0 || (in_w - kernel) % stride != 0 {
            return Err(KrError::Dim(format!(
                "avgpool2d output extent not integral: input {in_h}x{in_w}, kernel {kernel}, stride {stride}"
            )));
        }
        let geom = PoolGeom {
            batch,
            ch,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        };
        let out = kernels::avgpool2d(&self.nodes[x.0].data, &geom);
        let shape = vec![batch, ch, geom.out_h, geom.out_w];
        let req = self.nodes[x.0].requires;
        let v = self.push(out, shape, req, Op::AvgPool2d { x: x.0, geom });
        self.check_finite(v, "avgpool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) || shape.iter().any(|&e| e == 0) {
            return Err(KrError::Dim(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.nodes[x.0].requires;
        Ok(self.push(data, shape, req, Op::Reshape { x: x.0 }))
    }

    /// N x C x H x W -> N x (C*H*W)
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.is_empty() {
            return Err(KrError::Dim("flatten on rank-0 tensor".into()));
        }
        let rows = sx[0];
        let cols: usize = sx[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![rows, cols])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        let req = self.nodes[x.0].requires;
        let v = self.push(vec![acc], vec![1], req, Op::Sum { x: x.0 });
        self.check_finite(v, "sum")
    }

    /// Mean over the batch of -sum_k p_t[k] * log softmax(logits/temperature)[k].
    /// Differentiable w.r.t. `logits` only; teacher rows must sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: Var, teacher_probs: &Tensor, temperature: f64) -> Result<Var> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 || teacher_probs.shape != *sl {
            return Err(KrError::Dim(format!(
                "softmax_cross_entropy shapes: logits {sl:?} vs teacher {:?}",
                teacher_probs.shape
            )));
        }
        let (n, k) = (sl[0], sl[1]);
        if k < 2 {
            return Err(KrError::Usage("softmax_cross_entropy needs at least 2 classes".into()));
        }
        if !(temperature > 0.0) {
            return Err(KrError::Usage("softmax_cross_entropy temperature must be positive".into()));
        }
        for i in 0..n {
            let row = &teacher_probs.data[i * k..(i + 1) * k];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(KrError::Validation(format!(
                    "teacher probability row {i} sums to {s}, expected 1"
                )));
            }
        }
        let scaled: Vec<f64> = self.nodes[logits.0].data.iter().map(|&z| z / temperature).collect();
        let softmax = kernels::row_softmax(&scaled, n, k);
        let mut loss = 0.0;
        for i in 0..n {
            let z = &scaled[i * k..(i + 1) * k];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for (zv, pv) in z.iter().zip(&teacher_probs.data[i * k..(i + 1) * k]) {
                row_loss += pv * (lse - zv);
            }
            loss += row_loss;
        }
        loss /= n as f64;
        let req = self.nodes[logits.0].requires;
        let v = self.push(
            vec![loss],
            vec![1],
            req,
            Op::SoftmaxXent { logits: logits.0, probs: teacher_probs.data.clone(), temp: temperature, softmax },
        );
        self.check_finite(v, "softmax_cross_entropy")
    }

    /// Euclidean norm of (a - b) over all elements.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(KrError::Dim(format!(
                "l2_distance shapes differ: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let mut sq = 0.0;
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x - y;
            sq += d * d;
        }
        let dist = sq.sqrt();
        let req = self.nodes[a.0].requires || self.nodes[b.0].requires;
        let v = self.push(vec![dist], vec![1], req, Op::L2 { a: a.0, b: b.0, dist });
        self.check_finite(v, "l2_distance")
    }

    fn accum(&mut self, idx: usize, contrib: &[f64]) {
        if !self.nodes[idx].requires {
            return;
        }
        let len = self.nodes[idx].data.len();
        let grad = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively into
    /// every reachable node with `requires_grad`; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(KrError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires {
            return Ok(());
        }
        self.accum(loss.0, &[1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().expect("checked above");
            self.backprop_one(&op, &g, i);
            self.nodes[i].grad = Some(g);
            self.nodes[i].op = op;
        }
        for node in &self.nodes {
            if let Some(grad) = &node.grad {
                if !grad.iter().all(|v| v.is_finite()) {
                    return Err(KrError::NonFinite("backward gradient".into()));
                }
            }
        }
        Ok(())
    }

    fn backprop_one(&mut self, op: &Op, g: &[f64], out_idx: usize) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires {
                    let da = kernels::matmul_grad_a(g, &self.nodes[*b].data, m, k, n);
                    self.accum(*a, &da);
                }
                if self.nodes[*b].requires {
                    let db = kernels::matmul_grad_b(&self.nodes[*a].data, g, m, k, n);
                    self.accum(*b, &db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if self.nodes[*x].requires {
                    let dx = kernels::conv2d_grad_input(g, &self.nodes[*w].data, geom);
                    self.accum(*x, &dx);
                }
                if self.nodes[*w].requires {
                    let dw = kernels::conv2d_grad_weight(g, &self.nodes[*x].data, geom);
                    self.accum(*w, &dw);
                }
            }
            Op::Relu { x } => {
                if self.nodes[*x].requires {
                    // gradient is 0 at exactly 0 (subgradient choice)
                    let dx: Vec<f64> = self.nodes[*x]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Scale { x, c } => {
                if self.nodes[*x].requires {
                    let dx: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::AvgPool2d { x, geom } => {
                if self.nodes[*x].requires {
                    let dx = kernels::avgpool2d_grad(g, geom);
                    self.accum(*x, &dx);
                }
            }
            Op::Reshape { x } => {
                self.accum(*x, g);
            }
            Op::Sum { x } => {
                if self.nodes[*x].requires {
                    let dx = vec![g[0]; self.nodes[*x].data.len()];
                    self.accum(*x, &dx);
                }
            }
            Op::SoftmaxXent { logits, probs, temp, softmax } => {
                if self.nodes[*logits].requires {
                    let n = self.nodes[*logits].shape[0] as f64;
                    let scale = g[0] / (n * temp);
                    let dz: Vec<f64> = softmax
                        .iter()
                        .zip(probs)
                        .map(|(&s, &p)| scale * (s - p))
                        .collect();
                    self.accum(*logits, &dz);
                }
            }
            Op::L2 { a, b, dist } => {
                let _ = out_idx;
                if *dist == 0.0 {
                    return; // subgradient 0 at coincident points
                }
                let scale = g[0] / dist;
                if self.nodes[*a].requires {
                    let da: Vec<f64> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    self.accum(*a, &da);
                }
                if self.nodes[*b].requires {
                    let db: Vec<f64> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(&x, &y)| -scale * (x - y))
                        .collect();
                    self.accum(*b, &db);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn leaf_grad(shape: &[usize], data: Vec<f64>) -> (Tape, Var) {
        let mut tape = Tape::new();
        let t = Tensor::new(shape.to_vec(), data).unwrap().requires_grad(true);
        let v = tape.leaf(&t);
        (tape, v)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let eye = tape
            .leaf_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false)
            .unwrap();
        let b = tape
            .leaf_from(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);

        let x = tape.leaf_from(vec![1, 1], vec![2.0], false).unwrap();
        let y = tape.leaf_from(vec![1, 1], vec![3.0], false).unwrap();
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.data(z), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = tape.leaf_from(vec![2, 2], vec![0.0; 4], false).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(KrError::Dim(_))));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 1, 2, 2], vec![1.0; 4], false).unwrap();
        let w = tape.leaf_from(vec![1, 1, 1, 1], vec![1.0], false).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv2d_zero_weight_zero_output() {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(3);
        let x = tape.leaf(&Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng));
        let w = tape.leaf(&Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_non_integral_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 1, 4, 4], vec![0.0; 16], false).unwrap();
        let w = tape.leaf_from(vec![1, 1, 1, 1], vec![1.0], false).unwrap();
        // (4 - 1) is not divisible by stride 2
        assert!(matches!(tape.conv2d(x, w, 2, 0), Err(KrError::Dim(_))));
    }

    #[test]
    fn relu_add_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3], vec![-1.0, 0.0, 2.0], false).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

        let a = tape.leaf_from(vec![3], vec![1.0, 2.0, 3.0], false).unwrap();
        let z = tape.leaf(&Tensor::zeros(&[3]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.data(s), tape.data(a));

        let p = tape
            .leaf_from(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0], false)
            .unwrap();
        let q = tape.avgpool2d(p, 2, 2).unwrap();
        assert_eq!(tape.data(q), &[4.0]);
        assert_eq!(tape.shape(q), &[1, 1, 1, 1]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let (mut tape, w) = leaf_grad(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.0]);
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_square_norm_grad_is_w() {
        let data = vec![0.5, -1.25, 2.0, 0.75];
        let (mut tape, w) = leaf_grad(&[4], data.clone());
        let zero = tape.leaf(&Tensor::zeros(&[4]));
        let d = tape.l2_distance(w, zero).unwrap();
        // 0.5 * ||w||^2 via d^2: build from l2 and scale is awkward; use matmul route instead.
        let _ = d;
        let mut tape = Tape::new();
        let t = Tensor::new(vec![1, 4], data.clone()).unwrap().requires_grad(true);
        let w = tape.leaf(&t);
        let tt = Tensor::new(vec![4, 1], data.clone()).unwrap();
        let w_col = tape.leaf(&tt.requires_grad(true));
        let prod = tape.matmul(w, w_col).unwrap();
        let half = tape.scale(prod, 0.5).unwrap();
        let loss = tape.sum(half).unwrap();
        tape.backward(loss).unwrap();
        // d(0.5 w.w)/dw distributed over both operands sums to w
        let g_row = tape.grad(w).unwrap();
        let g_col = tape.grad(w_col).unwrap();
        for i in 0..4 {
            let total = g_row[i] + g_col[i];
            assert!((total - data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let (mut tape, w) = leaf_grad(&[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(w), Err(KrError::Usage(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let (mut tape, w) = leaf_grad(&[3], vec![1.0, 2.0, 3.0]);
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_cases() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[2, 10]).requires_grad(true));
        let teacher = Tensor::new(vec![2, 10], vec![0.1; 20]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &teacher, 1.0).unwrap();
        assert!((tape.scalar(loss) - 10.0_f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 2]).requires_grad(true));
        let teacher = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &teacher, 4.0).unwrap();
        assert!((tape.scalar(loss) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_sharp_match_is_tiny() {
        let mut tape = Tape::new();
        let z = vec![10.0, -10.0];
        let logits = tape.leaf_from(vec![1, 2], z.clone(), true).unwrap();
        let p = kernels::row_softmax(&z, 1, 2);
        let teacher = Tensor::new(vec![1, 2], p).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &teacher, 1.0).unwrap();
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_rejects_unnormalized_teacher() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 3]));
        let teacher = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &teacher, 1.0),
            Err(KrError::Validation(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_equals_teacher_entropy_at_match() {
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let k = 4;
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.1).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let logits_data: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            let mut tape = Tape::new();
            let logits = tape.leaf_from(vec![1, k], logits_data, true).unwrap();
            let teacher = Tensor::new(vec![1, k], p.clone()).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &teacher, 1.0).unwrap();
            let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            assert!((tape.scalar(loss) - entropy).abs() < 1e-9);
            assert!(tape.scalar(loss) >= 0.0);
        }
    }

    #[test]
    fn l2_distance_examples_and_symmetry() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2], vec![3.0, 4.0], false).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let d = tape.l2_distance(a, b).unwrap();
        assert_eq!(tape.scalar(d), 5.0);
        let d2 = tape.l2_distance(b, a).unwrap();
        assert_eq!(tape.scalar(d2), 5.0);

        let same = tape.l2_distance(a, a).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
    }

    #[test]
    fn l2_distance_zero_iff_equal_random() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let x = Tensor::randn(&[6], 1.0, &mut rng);
            let mut y = x.clone();
            y.data[3] += 1e-9;
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let yv = tape.leaf(&y);
            let d = tape.l2_distance(xv, yv).unwrap();
            assert!(tape.scalar(d) > 0.0);
            let d_same = tape.l2_distance(xv, xv).unwrap();
            assert_eq!(tape.scalar(d_same), 0.0);
        }
    }

    #[test]
    fn l2_distance_grad_at_coincident_points_is_zero() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true);
        let a = tape.leaf(&t);
        let b = tape.leaf(&t);
        let d = tape.l2_distance(a, b).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_subgraph_gets_no_grad() {
        let mut tape = Tape::new();
        let frozen = tape.constant(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let live = tape.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().requires_grad(true));
        let s = tape.add(frozen, live).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut rng = seeded_rng(42);
            let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng).requires_grad(true);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let r = tape.relu(y).unwrap();
            let loss = tape.sum(r).unwrap();
            tape.backward(loss).unwrap();
            (tape.data(r).to_vec(), tape.grad(wv).unwrap().to_vec())
        };
        let (d1, g1) = run();
        let (d2, g2) = run();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }
}
