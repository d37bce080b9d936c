//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Graphs are built
//! fresh for every forward pass.

use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RowBlend { new: Var, old: Var, mask: Vec<f64> },
    Gather { table: Var, index: Vec<Option<usize>> },
    EmbedBag { table: Var, bags: Vec<Vec<usize>> },
    GatherSteps { steps: Vec<Var>, index: Vec<Option<(usize, usize)>> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    ScaleRowsByCol { x: Var, gates: Var, col: usize },
    AddSegmentBroadcast { x: Var, v: Var, seg: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, cols: Tensor },
    SpatialMax { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    RowNormalize { x: Var, norms: Vec<f64> },
    PickEntries { x: Var, index: Vec<(usize, usize)> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    Softmax(Var),
    KlDiv { p: Var, q: Var, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradients of every parameter that was reached from the loss.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.grads[v.0].as_ref())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn conv_out_size(size: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1
    (size - 1) / stride + 1
}

fn im2col(x: &Tensor, stride: usize) -> Tensor {
    let [b, h, w, c] = dims4(x);
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let width = 9 * c;
    let mut cols = vec![0.0; b * ho * wo * width];
    let xd = x.data();
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * width;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((n * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * ho * wo, width], cols)
}

fn col2im(dcols: &Tensor, shape: [usize; 4], stride: usize) -> Tensor {
    let [b, h, w, c] = shape;
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let width = 9 * c;
    let mut dx = vec![0.0; b * h * w * c];
    let dd = dcols.data();
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * width;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += dd[src + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), dx)
}

fn dims4(t: &Tensor) -> [usize; 4] {
    match t.shape() {
        &[a, b, c, d] => [a, b, c, d],
        s => panic!("expected a 4-d tensor, got shape {s:?}"),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        &[a, b] => (a, b),
        s => panic!("expected a 2-d tensor, got shape {s:?}"),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = dims2(x);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(1.0, &self.value(a).view2(), &self.value(b).view2(), 0.0, &mut out.view2_mut());
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_nt inner dimensions");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(1.0, &self.value(a).view2(), &self.value(b).view2().t(), 0.0, &mut out.view2_mut());
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    /// Adds a bias vector to every row of a 2-d tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = dims2(self.value(x));
        let bv = self.value(bias);
        assert_eq!(bv.len(), c, "bias length");
        let mut out = self.value(x).clone();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.needs(&[a]);
        self.push(out, Op::AddConst(a), ng)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let factor = self.value(s).item();
        let out = self.value(a).map(|v| v * factor);
        let ng = self.needs(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise `mask[r] * new + (1 - mask[r]) * old`.
    pub fn row_blend(&mut self, new: Var, old: Var, mask: Vec<f64>) -> Var {
        let (r, c) = dims2(self.value(new));
        assert_eq!(mask.len(), r);
        let (vn, vo) = (self.value(new), self.value(old));
        assert_eq!(vn.shape(), vo.shape());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let m = mask[i];
            for j in 0..c {
                out[i * c + j] = m * vn.data()[i * c + j] + (1.0 - m) * vo.data()[i * c + j];
            }
        }
        let ng = self.needs(&[new, old]);
        self.push(Tensor::new(vec![r, c], out), Op::RowBlend { new, old, mask }, ng)
    }

    /// Row lookup; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, index: Vec<Option<usize>>) -> Var {
        let (_, c) = dims2(self.value(table));
        let t = self.value(table);
        let mut out = vec![0.0; index.len() * c];
        for (i, idx) in index.iter().enumerate() {
            if let Some(r) = idx {
                out[i * c..(i + 1) * c].copy_from_slice(t.row(*r));
            }
        }
        let ng = self.needs(&[table]);
        self.push(Tensor::new(vec![index.len(), c], out), Op::Gather { table, index }, ng)
    }

    /// Sum of looked-up rows per bag; an empty bag gives a zero row.
    pub fn embed_bag(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Var {
        let (_, c) = dims2(self.value(table));
        let t = self.value(table);
        let mut out = vec![0.0; bags.len() * c];
        for (i, bag) in bags.iter().enumerate() {
            for &r in bag {
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
        }
        let ng = self.needs(&[table]);
        self.push(Tensor::new(vec![bags.len(), c], out), Op::EmbedBag { table, bags }, ng)
    }

    /// Builds a matrix whose row `i` is row `index[i].1` of `steps[index[i].0]`.
    pub fn gather_steps(&mut self, steps: Vec<Var>, index: Vec<Option<(usize, usize)>>) -> Var {
        let (_, c) = dims2(self.value(steps[0]));
        let mut out = vec![0.0; index.len() * c];
        for (i, idx) in index.iter().enumerate() {
            if let Some((s, r)) = idx {
                out[i * c..(i + 1) * c].copy_from_slice(self.value(steps[*s]).row(*r));
            }
        }
        let ng = self.needs(&steps);
        self.push(Tensor::new(vec![index.len(), c], out), Op::GatherSteps { steps, index }, ng)
    }

    /// Column-wise max over the first `lengths[b]` rows of each segment of
    /// `seg` consecutive rows.
    pub fn segment_max(&mut self, x: Var, seg: usize, lengths: &[usize]) -> Var {
        let (r, c) = dims2(self.value(x));
        assert_eq!(r, seg * lengths.len(), "segment layout");
        let xv = self.value(x);
        let mut out = vec![0.0; lengths.len() * c];
        let mut argmax = vec![0; lengths.len() * c];
        for (b, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= seg, "segment length {len} outside 1..={seg}");
            for j in 0..c {
                let mut best = b * seg;
                for t in 1..len {
                    let row = b * seg + t;
                    if xv.data()[row * c + j] > xv.data()[best * c + j] {
                        best = row;
                    }
                }
                out[b * c + j] = xv.data()[best * c + j];
                argmax[b * c + j] = best;
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::new(vec![lengths.len(), c], out), Op::SegmentMax { x, argmax }, ng)
    }

    /// Scales row `r` of `x` by `gates[r, col]`.
    pub fn scale_rows_by_col(&mut self, x: Var, gates: Var, col: usize) -> Var {
        let (r, c) = dims2(self.value(x));
        let (gr, gc) = dims2(self.value(gates));
        assert!(gr == r && col < gc);
        let (xv, gv) = (self.value(x), self.value(gates));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let s = gv.data()[i * gc + col];
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] * s;
            }
        }
        let ng = self.needs(&[x, gates]);
        self.push(Tensor::new(vec![r, c], out), Op::ScaleRowsByCol { x, gates, col }, ng)
    }

    /// Adds `v[b]` to every row of segment `b` in `x`.
    pub fn add_segment_broadcast(&mut self, x: Var, v: Var, seg: usize) -> Var {
        let (r, c) = dims2(self.value(x));
        let (vb, vc) = dims2(self.value(v));
        assert!(vc == c && r == vb * seg, "segment broadcast layout");
        let mut out = self.value(x).clone();
        let vv = self.value(v);
        for i in 0..r {
            let b = i / seg;
            for j in 0..c {
                out.data_mut()[i * c + j] += vv.data()[b * c + j];
            }
        }
        let ng = self.needs(&[x, v]);
        self.push(out, Op::AddSegmentBroadcast { x, v, seg }, ng)
    }

    /// 3x3 convolution with padding 1 on `[batch, height, width, channels]`
    /// input; `w` is `[out, 9 * in]` laid out as `[ky][kx][in]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let [n, h, wd, cin] = dims4(self.value(x));
        let (cout, width) = dims2(self.value(w));
        assert_eq!(width, 9 * cin, "conv weight width");
        let (ho, wo) = (conv_out_size(h, stride), conv_out_size(wd, stride));
        let cols = im2col(self.value(x), stride);
        let mut out = Tensor::zeros(&[n * ho * wo, cout]);
        gemm(1.0, &cols.view2(), &self.value(w).view2().t(), 0.0, &mut out.view2_mut());
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(cout) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let out = out.reshape(vec![n, ho, wo, cout]);
        let ng = self.needs(&[x, w, b]);
        let cols = if ng { cols } else { Tensor::zeros(&[0]) };
        self.push(out, Op::Conv2d { x, w, b, stride, cols }, ng)
    }

    /// Channel-wise max over rows `rows.0..rows.1` of a `[b, h, w, c]` map.
    pub fn spatial_max(&mut self, x: Var, rows: (usize, usize)) -> Var {
        let [n, h, w, c] = dims4(self.value(x));
        assert!(rows.0 < rows.1 && rows.1 <= h, "row range");
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0; n * c];
        for b in 0..n {
            for y in rows.0..rows.1 {
                for xx in 0..w {
                    let base = ((b * h + y) * w + xx) * c;
                    for ch in 0..c {
                        if xv[base + ch] > out[b * c + ch] {
                            out[b * c + ch] = xv[base + ch];
                            argmax[b * c + ch] = base + ch;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::SpatialMax { x, argmax }, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let (r, _) = dims2(self.value(parts[0]));
        let widths: Vec<usize> = parts.iter().map(|p| dims2(self.value(*p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &wdt) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            assert_eq!(dims2(v).0, r, "concat row count");
            for i in 0..r {
                out[i * total + offset..i * total + offset + wdt].copy_from_slice(v.row(i));
            }
            offset += wdt;
        }
        let ng = self.needs(&parts);
        self.push(Tensor::new(vec![r, total], out), Op::ConcatCols(parts), ng)
    }

    /// Scales each row to unit L2 norm (norms floored at 1e-12).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (r, c) = dims2(self.value(x));
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let n = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] / n;
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::new(vec![r, c], out), Op::RowNormalize { x, norms }, ng)
    }

    /// Vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, x: Var, index: Vec<(usize, usize)>) -> Var {
        let (_, c) = dims2(self.value(x));
        let xv = self.value(x);
        let out: Vec<f64> = index.iter().map(|&(r, col)| xv.data()[r * c + col]).collect();
        let ng = self.needs(&[x]);
        self.push(Tensor::new(vec![index.len()], out), Op::PickEntries { x, index }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum of a list of scalars; an empty list gives a zero constant.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.constant(Tensor::scalar(0.0)),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let (r, c) = dims2(self.value(logits));
        assert_eq!(labels.len(), r);
        let probs = softmax_rows(self.value(logits));
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "label out of range");
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let ng = self.needs(&[logits]);
        self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy { logits, labels, probs },
            ng,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `sum p * (ln max(p, eps) - ln max(q, eps))` over all entries.
    pub fn kl_div(&mut self, p: Var, q: Var, eps: f64) -> Var {
        let (pv, qv) = (self.value(p), self.value(q));
        assert_eq!(pv.shape(), qv.shape());
        let s = pv
            .data()
            .iter()
            .zip(qv.data())
            .map(|(&a, &b)| a * (a.max(eps).ln() - b.max(eps).ln()))
            .sum();
        let ng = self.needs(&[p, q]);
        self.push(Tensor::scalar(s), Op::KlDiv { p, q, eps }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Grads { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    gemm(1.0, &g.view2(), &vb.view2().t(), 0.0, &mut da.view2_mut());
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    gemm(1.0, &va.view2().t(), &g.view2(), 0.0, &mut db.view2_mut());
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    gemm(1.0, &g.view2(), &vb.view2(), 0.0, &mut da.view2_mut());
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    gemm(1.0, &g.view2().t(), &va.view2(), 0.0, &mut db.view2_mut());
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let (r, c) = dims2(g);
                    let mut db = vec![0.0; c];
                    for row in 0..r {
                        for (d, v) in db.iter_mut().zip(g.row(row)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::new(shape, db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).item();
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|v| v * factor));
                }
                if self.wants(*s) {
                    let ds: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    let shape = self.value(*s).shape().to_vec();
                    accumulate(grads, *s, Tensor::new(shape, vec![ds]));
                }
            }
            Op::Relu(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * (1.0 - y * y)).collect();
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d));
            }
            Op::RowBlend { new, old, mask } => {
                let (r, c) = dims2(g);
                if self.wants(*new) {
                    let mut d = g.clone();
                    for i in 0..r {
                        d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= mask[i]);
                    }
                    accumulate(grads, *new, d);
                }
                if self.wants(*old) {
                    let mut d = g.clone();
                    for i in 0..r {
                        d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= 1.0 - mask[i]);
                    }
                    accumulate(grads, *old, d);
                }
            }
            Op::Gather { table, index } => {
                let tv = self.value(*table);
                let (_, c) = dims2(tv);
                let mut d = Tensor::zeros(tv.shape());
                for (i, idx) in index.iter().enumerate() {
                    if let Some(r) = idx {
                        for (dv, gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::EmbedBag { table, bags } => {
                let tv = self.value(*table);
                let (_, c) = dims2(tv);
                let mut d = Tensor::zeros(tv.shape());
                for (i, bag) in bags.iter().enumerate() {
                    for &r in bag {
                        for (dv, gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::GatherSteps { steps, index } => {
                let mut per_step: Vec<Option<Tensor>> = vec![None; steps.len()];
                let (_, c) = dims2(g);
                for (i, idx) in index.iter().enumerate() {
                    if let Some((s, r)) = idx {
                        let d = per_step[*s].get_or_insert_with(|| Tensor::zeros(self.value(steps[*s]).shape()));
                        for (dv, gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                }
                for (s, d) in per_step.into_iter().enumerate() {
                    if let Some(d) = d {
                        if self.wants(steps[s]) {
                            accumulate(grads, steps[s], d);
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let (_, c) = dims2(xv);
                let mut d = Tensor::zeros(xv.shape());
                for (k, &row) in argmax.iter().enumerate() {
                    d.data_mut()[row * c + k % c] += g.data()[k];
                }
                accumulate(grads, *x, d);
            }
            Op::ScaleRowsByCol { x, gates, col } => {
                let (xv, gv) = (self.value(*x), self.value(*gates));
                let (r, c) = dims2(xv);
                let gc = dims2(gv).1;
                if self.wants(*x) {
                    let mut d = g.clone();
                    for i in 0..r {
                        let s = gv.data()[i * gc + col];
                        d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *x, d);
                }
                if self.wants(*gates) {
                    let mut d = Tensor::zeros(gv.shape());
                    for i in 0..r {
                        d.data_mut()[i * gc + col] = g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                    }
                    accumulate(grads, *gates, d);
                }
            }
            Op::AddSegmentBroadcast { x, v, seg } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*v) {
                    let vv = self.value(*v);
                    let (_, c) = dims2(vv);
                    let mut d = Tensor::zeros(vv.shape());
                    let (r, _) = dims2(g);
                    for i in 0..r {
                        let b = i / seg;
                        for (dv, gv) in d.data_mut()[b * c..(b + 1) * c].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                    accumulate(grads, *v, d);
                }
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let cout = out.shape()[3];
                let g2 = g.clone().reshape(vec![g.len() / cout, cout]);
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(self.value(*w).shape());
                    gemm(1.0, &g2.view2().t(), &cols.view2(), 0.0, &mut dw.view2_mut());
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g2.data().chunks_exact(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![cout], db));
                }
                if self.wants(*x) {
                    let mut dcols = Tensor::zeros(cols.shape());
                    gemm(1.0, &g2.view2(), &self.value(*w).view2(), 0.0, &mut dcols.view2_mut());
                    let dx = col2im(&dcols, dims4(self.value(*x)), *stride);
                    accumulate(grads, *x, dx);
                }
            }
            Op::SpatialMax { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (k, &idx) in argmax.iter().enumerate() {
                    d.data_mut()[idx] += g.data()[k];
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(g);
                let mut offset = 0;
                for p in parts {
                    let w = dims2(self.value(*p)).1;
                    if self.wants(*p) {
                        let mut d = vec![0.0; r * w];
                        for i in 0..r {
                            d[i * w..(i + 1) * w].copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, *p, Tensor::new(vec![r, w], d));
                    }
                    offset += w;
                }
            }
            Op::RowNormalize { x, norms } => {
                let (r, c) = dims2(out);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - y[j] * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], d));
            }
            Op::PickEntries { x, index } => {
                let xv = self.value(*x);
                let (_, c) = dims2(xv);
                let mut d = Tensor::zeros(xv.shape());
                for (k, &(r, col)) in index.iter().enumerate() {
                    d.data_mut()[r * c + col] += g.data()[k];
                }
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / xv.len() as f64;
                accumulate(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (r, c) = dims2(probs);
                let scale = g.item() / r as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * c + y] -= 1.0;
                }
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, d);
            }
            Op::Softmax(x) => {
                let (r, c) = dims2(out);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], d));
            }
            Op::KlDiv { p, q, eps } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let gv = g.item();
                if self.wants(*p) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| {
                            let own = if a > *eps { 1.0 } else { 0.0 };
                            gv * (a.max(*eps).ln() - b.max(*eps).ln() + own)
                        })
                        .collect();
                    accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d));
                }
                if self.wants(*q) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| if b > *eps { -gv * a / b } else { 0.0 })
                        .collect();
                    accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), d));
                }
            }
        }
    }
}
