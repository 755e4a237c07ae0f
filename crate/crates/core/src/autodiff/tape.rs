use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{col2im_add, gemm, im2col, ConvGeometry, MatMut, MatRef};
use super::tensor::{axis_extents, Tensor};
use super::{fault, AutodiffError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleShift { x: usize, scale: f64 },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry, cols: Vec<f64> },
    Softmax { x: usize, axis: usize },
    L2Normalize { x: usize, axis: usize, eps: f64, norms: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    BroadcastSpatial { x: usize },
    GlobalAvgPool(usize),
    Gather { x: usize, indices: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Sum(usize),
    Mean(usize),
    AffineGrid { theta: usize },
    BilinearSample { x: usize, grid: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Dynamic reverse-mode tape. Every op evaluates eagerly and appends a node, so
/// node order is a topological order of the graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Bilinear source coordinate in pixel units for a normalized coordinate in [-1, 1].
///
/// Values within 1e-12 of a lattice point are snapped to it so that sampling on the
/// base grid reproduces the source exactly.
pub fn normalized_to_pixel(coord: f64, size: usize) -> f64 {
    if size <= 1 {
        return 0.0;
    }
    let p = (coord + 1.0) * 0.5 * (size - 1) as f64;
    let r = p.round();
    if (p - r).abs() <= 1e-12 {
        r
    } else {
        p
    }
}

/// Base-grid coordinate of index `i` along an axis of `size` samples.
pub fn base_coordinate(i: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (size - 1) as f64
    }
}

struct Corners {
    offsets: [Option<usize>; 4],
    weights: [f64; 4],
    wx: [f64; 2],
    wy: [f64; 2],
}

// Corner order: (y0,x0), (y0,x1), (y1,x0), (y1,x1).
fn corners(px: f64, py: f64, h: usize, w: usize) -> Corners {
    let x0 = px.floor();
    let y0 = py.floor();
    let wx1 = px - x0;
    let wy1 = py - y0;
    let wx = [1.0 - wx1, wx1];
    let wy = [1.0 - wy1, wy1];
    let (ix0, iy0) = (x0 as i64, y0 as i64);
    let mut offsets = [None; 4];
    let mut weights = [0.0; 4];
    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let (iy, ix) = (iy0 + dy, ix0 + dx);
        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
            offsets[k] = Some(iy as usize * w + ix as usize);
        }
        weights[k] = wy[dy as usize] * wx[dx as usize];
    }
    Corners { offsets, weights, wx, wy }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut Vec<f64> {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignTensor);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(self.value(var)?.shape())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, trainable: false });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        let var = self.push("leaf", value, Op::Leaf)?;
        self.nodes[var.index].trainable = trainable;
        Ok(var)
    }

    /// Records a constant input; it receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a trainable leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let data = v.data().iter().map(|&t| scale * t + shift).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale_shift", out, Op::ScaleShift { x: ix, scale })
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let data = v.data().iter().map(|&t| f(t)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(name, out, op(ix))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |t| if t > 0.0 { t } else { 0.0 }, Op::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    /// Matrix product of rank-2 operands, or batched over a shared leading axis for
    /// rank-3 operands. `ta`/`tb` read the stored operand transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape().to_vec(), self.nodes[ib].value.shape().to_vec());
        let mismatch = || AutodiffError::ShapeMismatch { op: "matmul", detail: format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})") };
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(mismatch()),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.nodes[ia].value.data();
            let db = self.nodes[ib].value.data();
            for bi in 0..batch {
                gemm(
                    1.0,
                    MatRef::row_major(&da[bi * ra * ca..(bi + 1) * ra * ca], ra, ca, ta),
                    MatRef::row_major(&db[bi * rb * cb..(bi + 1) * rb * cb], rb, cb, tb),
                    0.0,
                    MatMut::row_major(&mut out[bi * m * n..(bi + 1) * m * n], m, n, false),
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a: ia, b: ib, ta, tb, batch, m, k, n })
    }

    /// Fully-connected affine map `x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(AutodiffError::ShapeMismatch { op: "linear", detail: format!("x {sx:?}, w {sw:?}") });
        }
        let (n, inp, outp) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * outp];
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            if bias.len() != outp {
                return Err(AutodiffError::ShapeMismatch { op: "linear", detail: format!("bias {:?} for {outp} outputs", self.nodes[ib].value.shape()) });
            }
            for row in out.chunks_mut(outp) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            1.0,
            MatRef::row_major(self.nodes[ix].value.data(), n, inp, false),
            MatRef::row_major(self.nodes[iw].value.data(), outp, inp, true),
            1.0,
            MatMut::row_major(&mut out, n, outp, false),
        );
        self.push("linear", Tensor::new(vec![n, outp], out)?, Op::Linear { x: ix, w: iw, b: ib })
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [Cout, C, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", detail: format!("x {sx:?}, w {sw:?}, stride {stride}") });
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", detail: format!("kernel {sw:?} larger than padded input {sx:?}") });
        }
        let geom = ConvGeometry { channels: sx[1], height: sx[2], width: sx[3], kernel: sw[2], stride, pad };
        let (n, cout) = (sx[0], sw[0]);
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let in_len = sx[1] * sx[2] * sx[3];
        let mut out = vec![0.0; n * cout * plane];
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            if bias.len() != cout {
                return Err(AutodiffError::ShapeMismatch { op: "conv2d", detail: format!("bias length {} for {cout} channels", bias.len()) });
            }
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(bias[i % cout]);
            }
        }
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; n * rows * plane] };
        {
            let xd = self.nodes[ix].value.data();
            let wd = self.nodes[iw].value.data();
            for s in 0..n {
                let image = &xd[s * in_len..(s + 1) * in_len];
                let col: &[f64] = if pointwise {
                    image
                } else {
                    let c = &mut cols[s * rows * plane..(s + 1) * rows * plane];
                    im2col(image, &geom, c);
                    c
                };
                gemm(
                    1.0,
                    MatRef::row_major(wd, cout, rows, false),
                    MatRef::row_major(col, rows, plane, false),
                    1.0,
                    MatMut::row_major(&mut out[s * cout * plane..(s + 1) * cout * plane], cout, plane, false),
                );
            }
        }
        let shape = vec![n, cout, geom.out_height(), geom.out_width()];
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x: ix, w: iw, b: ib, geom, cols })
    }

    fn axis_of(&self, op: &'static str, index: usize, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.nodes[index].value.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis { op, axis, shape: shape.to_vec() });
        }
        Ok(axis_extents(shape, axis))
    }

    /// Softmax along `axis`, evaluated with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, len, inner) = self.axis_of("softmax", ix, axis)?;
        if len == 0 {
            return Err(AutodiffError::EmptyAxis { op: "softmax" });
        }
        let v = &self.nodes[ix].value;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x: ix, axis })
    }

    /// `x / max(||x||_2, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument(format!("l2_normalize eps must be positive, got {eps}")));
        }
        let (outer, len, inner) = self.axis_of("l2_normalize", ix, axis)?;
        let v = &self.nodes[ix].value;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| src[at(k)] * src[at(k)]).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(eps);
                for k in 0..len {
                    out[at(k)] = src[at(k)] / denom;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push("l2_normalize", out, Op::L2Normalize { x: ix, axis, eps, norms })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let indices = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = indices.first().ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.nodes[*first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis { op: "concat", axis, shape: base });
        }
        let mut total = 0;
        for &i in &indices {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch { op: "concat", detail: format!("{s:?} vs {base:?} on axis {axis}") });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &indices {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { inputs: indices, axis })
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, full, inner) = self.axis_of("slice", ix, axis)?;
        if start + len > full {
            return Err(AutodiffError::ShapeMismatch { op: "slice", detail: format!("range {start}..{} exceeds axis length {full}", start + len) });
        }
        let v = &self.nodes[ix].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x: ix, axis, start })
    }

    /// Splits `x` into two equal halves along `axis`.
    pub fn split_half(&mut self, x: Var, axis: usize) -> Result<(Var, Var)> {
        let ix = self.check(x)?;
        let (_, len, _) = self.axis_of("split", ix, axis)?;
        if len % 2 != 0 {
            return Err(AutodiffError::ShapeMismatch { op: "split", detail: format!("axis {axis} has odd length {len}") });
        }
        Ok((self.slice(x, axis, 0, len / 2)?, self.slice(x, axis, len / 2, len / 2)?))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(ix))
    }

    /// Copies `x: [N, C]` to every location of an `[N, C, H, W]` map.
    pub fn broadcast_spatial(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch { op: "broadcast_spatial", detail: format!("expected [N, C], got {:?}", v.shape()) });
        }
        let plane = height * width;
        let mut out = Vec::with_capacity(v.len() * plane);
        for &value in v.data() {
            out.extend(std::iter::repeat_n(value, plane));
        }
        let shape = vec![v.shape()[0], v.shape()[1], height, width];
        self.push("broadcast_spatial", Tensor::new(shape, out)?, Op::BroadcastSpatial { x: ix })
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "global_avg_pool", detail: format!("expected non-empty [N, C, H, W], got {s:?}") });
        }
        let plane = s[2] * s[3];
        let out = v.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let shape = vec![s[0], s[1]];
        self.push("global_avg_pool", Tensor::new(shape, out)?, Op::GlobalAvgPool(ix))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if s.is_empty() {
            return Err(AutodiffError::ShapeMismatch { op: "gather", detail: "rank-0 input".into() });
        }
        let row = v.len() / s[0].max(1);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(AutodiffError::InvalidArgument(format!("gather index {i} out of range for {} rows", s[0])));
            }
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        self.push("gather", Tensor::new(shape, out)?, Op::Gather { x: ix, indices: indices.to_vec() })
    }

    /// Per-sample cross-entropy of `logits: [N, K]` against integer labels, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.nodes[il].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || s[1] == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "cross_entropy", detail: format!("logits {s:?} with {} labels", labels.len()) });
        }
        let k = s[1];
        let mut probs = vec![0.0; v.len()];
        let mut losses = Vec::with_capacity(labels.len());
        for (row, (&label, logits)) in labels.iter().zip(v.data().chunks(k)).enumerate() {
            if label >= k {
                return Err(AutodiffError::InvalidArgument(format!("label {label} out of range for {k} classes")));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            let log_total = total.ln() + max;
            for (j, &z) in logits.iter().enumerate() {
                probs[row * k + j] = (z - log_total).exp();
            }
            losses.push(log_total - logits[label]);
        }
        let n = labels.len();
        self.push("cross_entropy", Tensor::new(vec![n], losses)?, Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let total = self.nodes[ix].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.is_empty() {
            return Err(AutodiffError::EmptyAxis { op: "mean" });
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(ix))
    }

    /// Sampling grid `[N, H, W, 2]` (x then y) from `theta: [N, 4]` ordered
    /// `(s1, s2, tx, ty)`: each base coordinate maps to `(s1 x + tx, s2 y + ty)`.
    pub fn affine_grid(&mut self, theta: Var, height: usize, width: usize) -> Result<Var> {
        let it = self.check(theta)?;
        let v = &self.nodes[it].value;
        if v.rank() != 2 || v.shape()[1] != 4 || height == 0 || width == 0 {
            return Err(AutodiffError::ShapeMismatch { op: "affine_grid", detail: format!("theta {:?} for {height}x{width}", v.shape()) });
        }
        let n = v.shape()[0];
        let mut out = Vec::with_capacity(n * height * width * 2);
        for t in v.data().chunks(4) {
            for i in 0..height {
                let y = base_coordinate(i, height);
                for j in 0..width {
                    let x = base_coordinate(j, width);
                    out.push(t[0] * x + t[2]);
                    out.push(t[1] * y + t[3]);
                }
            }
        }
        self.push("affine_grid", Tensor::new(vec![n, height, width, 2], out)?, Op::AffineGrid { theta: it })
    }

    /// Bilinear sampling of `x: [N, C, H, W]` at the normalized coordinates of
    /// `grid: [N, Ho, Wo, 2]`. Samples outside the source contribute zero.
    pub fn bilinear_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(grid)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sg = self.nodes[ig].value.shape().to_vec();
        if sx.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != sx[0] {
            return Err(AutodiffError::ShapeMismatch { op: "bilinear_sample", detail: format!("x {sx:?}, grid {sg:?}") });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (sg[1], sg[2]);
        let opix = oh * ow;
        let mut out = vec![0.0; n * c * opix];
        let xd = self.nodes[ix].value.data();
        let gd = self.nodes[ig].value.data();
        for s in 0..n {
            let src = &xd[s * c * h * w..(s + 1) * c * h * w];
            let dst = &mut out[s * c * opix..(s + 1) * c * opix];
            for o in 0..opix {
                let g = (s * opix + o) * 2;
                let px = normalized_to_pixel(gd[g], w);
                let py = normalized_to_pixel(gd[g + 1], h);
                let cr = corners(px, py, h, w);
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0;
                    for k in 0..4 {
                        if let Some(off) = cr.offsets[k] {
                            acc += plane[off] * cr.weights[k];
                        }
                    }
                    dst[ch * opix + o] = acc;
                }
            }
        }
        self.push("bilinear_sample", Tensor::new(vec![n, c, oh, ow], out)?, Op::BilinearSample { x: ix, grid: ig })
    }

    /// Reverse pass from a scalar `output`. Returns a gradient for every trainable
    /// leaf (zeros when the leaf does not influence the output).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let shape = self.nodes[out].value.shape();
        if shape != [1] {
            return Err(AutodiffError::NonScalarOutput(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        grads[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut result = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let data = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]);
                result.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { tape: self.id, grads: result })
    }

    fn val(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn len_of(&self, i: usize) -> usize {
        self.nodes[i].value.len()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, &gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in grad_slot(grads, *b, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sub(a, b) => {
                for (d, &gv) in grad_slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in grad_slot(grads, *b, g.len()).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let da = grad_slot(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * vb[k];
                }
                let db = grad_slot(grads, *b, g.len());
                for k in 0..g.len() {
                    db[k] += g[k] * va[k];
                }
            }
            Op::ScaleShift { x, scale } => {
                for (d, &gv) in grad_slot(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
            Op::Relu(x) => {
                let vx = self.val(*x);
                let dx = grad_slot(grads, *x, g.len());
                for k in 0..g.len() {
                    if vx[k] > 0.0 {
                        dx[k] += g[k];
                    }
                }
            }
            Op::Tanh(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for k in 0..g.len() {
                    dx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Sigmoid(x) => {
                let dx = grad_slot(grads, *x, g.len());
                for k in 0..g.len() {
                    dx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (la, lb) = (self.len_of(*a) / batch, self.len_of(*b) / batch);
                let (va, vb) = (self.val(*a), self.val(*b));
                // stored-operand dims
                let (ra, ca) = if *ta { (k, m) } else { (m, k) };
                let (rb, cb) = if *tb { (n, k) } else { (k, n) };
                let mut da = grads[*a].take().unwrap_or_else(|| vec![0.0; va.len()]);
                let mut db = grads[*b].take().unwrap_or_else(|| vec![0.0; vb.len()]);
                for bi in 0..*batch {
                    let gc = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n, false);
                    let op_a = MatRef::row_major(&va[bi * la..(bi + 1) * la], ra, ca, *ta);
                    let op_b = MatRef::row_major(&vb[bi * lb..(bi + 1) * lb], rb, cb, *tb);
                    gemm(1.0, gc, op_b.t(), 1.0, MatMut::row_major(&mut da[bi * la..(bi + 1) * la], ra, ca, *ta));
                    gemm(1.0, op_a.t(), gc, 1.0, MatMut::row_major(&mut db[bi * lb..(bi + 1) * lb], rb, cb, *tb));
                }
                grads[*a] = merge(grads[*a].take(), da);
                grads[*b] = merge(grads[*b].take(), db);
            }
            Op::Linear { x, w, b } => {
                let sw = self.nodes[*w].value.shape();
                let (outp, inp) = (sw[0], sw[1]);
                let n = g.len() / outp;
                let gm = MatRef::row_major(g, n, outp, false);
                {
                    let dx = grad_slot(grads, *x, n * inp);
                    gemm(1.0, gm, MatRef::row_major(self.val(*w), outp, inp, false), 1.0, MatMut::row_major(dx, n, inp, false));
                }
                {
                    let dw = grad_slot(grads, *w, outp * inp);
                    gemm(1.0, gm.t(), MatRef::row_major(self.val(*x), n, inp, false), 1.0, MatMut::row_major(dw, outp, inp, false));
                }
                if let Some(b) = b {
                    let db = grad_slot(grads, *b, outp);
                    for row in g.chunks(outp) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = self.nodes[*w].value.shape()[0];
                let (rows, plane) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let n = g.len() / (cout * plane);
                let wd = self.val(*w);
                let xd = self.val(*x);
                let mut dcol = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
                {
                    let dw = grad_slot(grads, *w, cout * rows);
                    for s in 0..n {
                        let gs = MatRef::row_major(&g[s * cout * plane..(s + 1) * cout * plane], cout, plane, false);
                        let col = if geom.is_pointwise() { &xd[s * in_len..(s + 1) * in_len] } else { &cols[s * rows * plane..(s + 1) * rows * plane] };
                        gemm(1.0, gs, MatRef::row_major(col, rows, plane, true), 1.0, MatMut::row_major(dw, cout, rows, false));
                    }
                }
                if let Some(b) = b {
                    let db = grad_slot(grads, *b, cout);
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        db[k % cout] += chunk.iter().sum::<f64>();
                    }
                }
                let dx = grad_slot(grads, *x, n * in_len);
                for s in 0..n {
                    let gs = MatRef::row_major(&g[s * cout * plane..(s + 1) * cout * plane], cout, plane, false);
                    let wt = MatRef::row_major(wd, cout, rows, true);
                    let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                    if geom.is_pointwise() {
                        gemm(1.0, wt, gs, 1.0, MatMut::row_major(dxs, rows, plane, false));
                    } else {
                        gemm(1.0, wt, gs, 0.0, MatMut::row_major(&mut dcol, rows, plane, false));
                        col2im_add(&dcol, geom, dxs);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let dx = grad_slot(grads, *x, g.len());
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i2;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let dx = grad_slot(grads, *x, g.len());
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i2;
                        let norm = norms[o * inner + i2];
                        if norm >= *eps {
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] += (g[at(k)] - y[at(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                dx[at(k)] += g[at(k)] / eps;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp].value.shape()[*axis];
                    let chunk = len * inner;
                    let dx = grad_slot(grads, inp, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..chunk];
                        for (d, &gv) in dx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let full = self.nodes[*x].value.shape()[*axis];
                let dx = grad_slot(grads, *x, outer * full * inner);
                for o in 0..outer {
                    let dst = &mut dx[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (d, &gv) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                for (d, &gv) in grad_slot(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::BroadcastSpatial { x } => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                let dx = grad_slot(grads, *x, s[0] * s[1]);
                for (d, chunk) in dx.iter_mut().zip(g.chunks(plane)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[*x].value.shape();
                let plane = s[2] * s[3];
                let dx = grad_slot(grads, *x, s.iter().product());
                for (chunk, &gv) in dx.chunks_mut(plane).zip(g) {
                    let share = gv / plane as f64;
                    for d in chunk {
                        *d += share;
                    }
                }
            }
            Op::Gather { x, indices } => {
                let total = self.len_of(*x);
                let row = g.len() / indices.len().max(1);
                let dx = grad_slot(grads, *x, total);
                for (j, &src) in indices.iter().enumerate() {
                    for (d, &gv) in dx[src * row..(src + 1) * row].iter_mut().zip(&g[j * row..(j + 1) * row]) {
                        *d += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let dx = grad_slot(grads, *logits, probs.len());
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { 1.0 } else { 0.0 };
                        dx[row * k + j] += g[row] * (probs[row * k + j] - target);
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.len_of(*x);
                for d in grad_slot(grads, *x, len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let len = self.len_of(*x);
                let share = g[0] / len as f64;
                for d in grad_slot(grads, *x, len).iter_mut() {
                    *d += share;
                }
            }
            Op::AffineGrid { theta } => {
                let s = node.value.shape();
                let (h, w) = (s[1], s[2]);
                let dt = grad_slot(grads, *theta, s[0] * 4);
                for (t, chunk) in dt.chunks_mut(4).zip(g.chunks(h * w * 2)) {
                    for i2 in 0..h {
                        let yb = base_coordinate(i2, h);
                        for j in 0..w {
                            let xb = base_coordinate(j, w);
                            let gx = chunk[(i2 * w + j) * 2];
                            let gy = chunk[(i2 * w + j) * 2 + 1];
                            t[0] += gx * xb;
                            t[1] += gy * yb;
                            t[2] += gx;
                            t[3] += gy;
                        }
                    }
                }
            }
            Op::BilinearSample { x, grid } => self.bilinear_backward(*x, *grid, node.value.shape(), g, grads),
        }
    }

    fn bilinear_backward(&self, x: usize, grid: usize, out_shape: &[usize], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sx = self.nodes[x].value.shape();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let opix = out_shape[2] * out_shape[3];
        let xd = self.val(x);
        let gd = self.val(grid);
        let sign = if fault::sampler_grad_sign_flipped() { -1.0 } else { 1.0 };
        let mut dgrid = grads[grid].take().unwrap_or_else(|| vec![0.0; gd.len()]);
        let dx = grad_slot(grads, x, xd.len());
        let scale_x = if w > 1 { 0.5 * (w - 1) as f64 } else { 0.0 };
        let scale_y = if h > 1 { 0.5 * (h - 1) as f64 } else { 0.0 };
        for s in 0..n {
            let src = &xd[s * c * h * w..(s + 1) * c * h * w];
            let dsrc = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            let gs = &g[s * c * opix..(s + 1) * c * opix];
            for o in 0..opix {
                let gi = (s * opix + o) * 2;
                let px = normalized_to_pixel(gd[gi], w);
                let py = normalized_to_pixel(gd[gi + 1], h);
                let cr = corners(px, py, h, w);
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = gs[ch * opix + o];
                    if go == 0.0 {
                        continue;
                    }
                    let base = ch * h * w;
                    let f = |k: usize| cr.offsets[k].map_or(0.0, |off| src[base + off]);
                    let (f00, f01, f10, f11) = (f(0), f(1), f(2), f(3));
                    dpx += go * (cr.wy[0] * (f01 - f00) + cr.wy[1] * (f11 - f10));
                    dpy += go * (cr.wx[0] * (f10 - f00) + cr.wx[1] * (f11 - f01));
                    for k in 0..4 {
                        if let Some(off) = cr.offsets[k] {
                            dsrc[base + off] += go * cr.weights[k];
                        }
                    }
                }
                dgrid[gi] += sign * dpx * scale_x;
                dgrid[gi + 1] += sign * dpy * scale_y;
            }
        }
        grads[grid] = merge(grads[grid].take(), dgrid);
    }
}

fn merge(existing: Option<Vec<f64>>, fresh: Vec<f64>) -> Option<Vec<f64>> {
    match existing {
        None => Some(fresh),
        Some(mut e) => {
            for (a, b) in e.iter_mut().zip(&fresh) {
                *a += b;
            }
            Some(e)
        }
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
