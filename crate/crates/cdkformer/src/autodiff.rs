//! Reverse-mode automatic differentiation on a flat tape of 2D nodes.
//!
//! Every forward op records enough to replay its adjoint; `backward` walks the
//! tape once in reverse. Nodes are row-major `Vec<f64>` matrices; scalars are
//! 1x1, vectors 1xN. Higher-rank data is handled by the callers as loops over
//! 2D slices, which keeps the op set small and the hot kernels simple.

use crate::rng::RngStream;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const ATTN_MASK_NEG: f64 = -1e30;

// ---------------------------------------------------------------------------
// Matmul kernels
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] += A[m,k]^T * B[m,n]
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_nn_acc(a, b, m, k, n, &mut c);
    c
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Named, shaped parameter arrays. Registration order is the checkpoint
/// order; names must be unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in (-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier,
    /// Normal with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut RngStream) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "parameter registered twice: {name}"
        );
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.range(-a, a)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| rng.normal() * std).collect(),
        };
        self.entries.push(ParamEntry { name: name.to_string(), rows, cols, data });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Zeroed gradient buffers matching every entry.
    pub fn zero_grads(&self) -> Grads {
        Grads { buffers: self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect() }
    }
}

/// Gradient accumulator parallel to a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Grads {
    pub buffers: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(0.0);
        }
    }

    pub fn add_from(&mut self, other: &Grads) {
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.buffers
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.buffers {
            for g in b.iter_mut() {
                *g *= s;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRowBroadcast { a: Var, b: Var },
    MulColBroadcast { a: Var, c: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Fourier { a: Var, bands: usize },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    ConcatRows { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape { a: Var },
    Transpose { a: Var },
    MeanRows { a: Var },
    SumAll { a: Var },
    MaxPoolRows { a: Var },
    BroadcastRow { a: Var, m: usize },
    SmoothL1 { pred: Var, gt: Var },
    CrossEntropyProbs { p: Var, target: Var },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    param_cache: std::collections::HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_cache: std::collections::HashMap::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, op });
        Var(self.nodes.len() - 1)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Insert constant data with no upstream gradient of interest.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(1, 1, vec![v])
    }

    /// Bind a parameter as a leaf; repeated binds of the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id.0) {
            return v;
        }
        let e = store.get(id);
        let v = self.push(e.rows, e.cols, e.data.clone(), Op::Param(id));
        self.param_cache.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(m, n, data, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((m, n), (self.rows(b), self.cols(b)), "shape mismatch in elementwise op");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(m, n, data, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        self.push(m, n, data, Op::Scale { a, c })
    }

    /// a[m,n] + b broadcast over rows (b is 1xn).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!(self.rows(b) * self.cols(b), n, "bias length must equal cols");
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += self.nodes[b.0].data[j];
            }
        }
        self.push(m, n, data, Op::AddRowBroadcast { a, b })
    }

    /// a[m,n] scaled per row by c[m,1].
    pub fn mul_col_broadcast(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(c), self.cols(c)), (m, 1), "per-row scale must be m x 1");
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            let s = self.nodes[c.0].data[r];
            for v in &mut data[r * n..(r + 1) * n] {
                *v *= s;
            }
        }
        self.push(m, n, data, Op::MulColBroadcast { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        // NaN propagates rather than being silently clamped away.
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().map(|&x| if x > 0.0 || x.is_nan() { x } else { 0.0 }).collect();
        self.push(m, n, data, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(m, n, data, Op::Sigmoid { a })
    }

    pub fn fourier(&mut self, a: Var, bands: usize) -> Var {
        let (m, f) = (self.rows(a), self.cols(a));
        let out_cols = 2 * bands * f;
        let mut data = vec![0.0; m * out_cols];
        for r in 0..m {
            for j in 0..f {
                let v = self.nodes[a.0].data[r * f + j];
                for b in 0..bands {
                    let arg = (1u64 << b) as f64 * std::f64::consts::PI * v;
                    data[r * out_cols + j * bands + b] = arg.sin();
                    data[r * out_cols + bands * f + j * bands + b] = arg.cos();
                }
            }
        }
        self.push(m, out_cols, data, Op::Fourier { a, bands })
    }

    /// Row-wise stabilized softmax; columns with `mask[j] == false` are
    /// excluded (treated as -inf scores).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        if let Some(mk) = mask {
            assert_eq!(mk.len(), n, "mask length must equal cols");
            assert!(mk.iter().any(|&v| v), "softmax mask excludes every column");
        }
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let src = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let score = |j: usize| {
                if mask.map_or(true, |mk| mk[j]) {
                    src[j]
                } else {
                    ATTN_MASK_NEG
                }
            };
            let max = (0..n).map(score).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (score(j) - max).exp();
                data[r * n + j] = e;
                sum += e;
            }
            for v in &mut data[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        self.push(m, n, data, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(self.rows(gain) * self.cols(gain), n);
        assert_eq!(self.rows(bias) * self.cols(bias), n);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let src = &self.nodes[x.0].data[r * n..(r + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data[r * n + j] =
                    (src[j] - mean) * inv * self.nodes[gain.0].data[j] + self.nodes[bias.0].data[j];
            }
        }
        self.push(m, n, data, Op::LayerNorm { x, gain, bias })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let n = self.cols(a);
        assert_eq!(n, self.cols(b), "concat_rows col mismatch");
        let m = self.rows(a) + self.rows(b);
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        self.push(m, n, data, Op::ConcatRows { a, b })
    }

    pub fn concat_rows_all(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.concat_rows(acc, p);
        }
        acc
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let m = self.rows(a);
        assert_eq!(m, self.rows(b), "concat_cols row mismatch");
        let (na, nb) = (self.cols(a), self.cols(b));
        let n = na + nb;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            data[r * n..r * n + na].copy_from_slice(&self.nodes[a.0].data[r * na..(r + 1) * na]);
            data[r * n + na..(r + 1) * n].copy_from_slice(&self.nodes[b.0].data[r * nb..(r + 1) * nb]);
        }
        self.push(m, n, data, Op::ConcatCols { a, b })
    }

    pub fn concat_cols_all(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.concat_cols(acc, p);
        }
        acc
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows index {i} out of {m}");
            data.extend_from_slice(&self.nodes[a.0].data[i * n..(i + 1) * n]);
        }
        self.push(idx.len(), n, data, Op::GatherRows { a, idx: idx.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        // Implemented as transpose-gather-transpose would double copies; do it
        // directly with a gather over a transposed view instead.
        let t = self.transpose(a);
        let s = self.slice_rows(t, start, len);
        self.transpose(s)
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[a.0].data.len(), rows * cols, "reshape element count mismatch");
        let data = self.nodes[a.0].data.clone();
        self.push(rows, cols, data, Op::Reshape { a })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                data[j * m + r] = self.nodes[a.0].data[r * n + j];
            }
        }
        self.push(n, m, data, Op::Transpose { a })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                data[j] += self.nodes[a.0].data[r * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        self.push(1, n, data, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    /// Column-wise max over rows; ties resolve to the first row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = vec![f64::NEG_INFINITY; n];
        for r in 0..m {
            for j in 0..n {
                let v = self.nodes[a.0].data[r * n + j];
                if v > data[j] {
                    data[j] = v;
                }
            }
        }
        self.push(1, n, data, Op::MaxPoolRows { a })
    }

    pub fn broadcast_row(&mut self, a: Var, m: usize) -> Var {
        let n = self.cols(a);
        assert_eq!(self.rows(a), 1, "broadcast_row expects a single row");
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        self.push(m, n, data, Op::BroadcastRow { a, m })
    }

    /// Smoothed L1 over a [T, 2] trajectory pair: Huber per coordinate,
    /// summed over coordinates, averaged over T.
    pub fn smooth_l1(&mut self, pred: Var, gt: Var) -> Var {
        let (t, c) = (self.rows(pred), self.cols(pred));
        assert_eq!((t, c), (self.rows(gt), self.cols(gt)), "smooth_l1 shape mismatch");
        let mut total = 0.0;
        for (p, g) in self.nodes[pred.0].data.iter().zip(&self.nodes[gt.0].data) {
            let e = (p - g).abs();
            total += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
        }
        self.push(1, 1, vec![total / t as f64], Op::SmoothL1 { pred, gt })
    }

    /// Cross entropy of probability rows (1xK each) with the log clamped at
    /// 1e-12; the target carries no gradient in practice.
    pub fn cross_entropy_probs(&mut self, p: Var, target: Var) -> Var {
        let k = self.cols(p) * self.rows(p);
        assert_eq!(k, self.cols(target) * self.rows(target));
        let loss: f64 = self.nodes[p.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(&ph, &t)| -t * ph.max(crate::tensor::LOG_CLAMP).ln())
            .sum();
        self.push(1, 1, vec![loss], Op::CrossEntropyProbs { p, target })
    }

    /// Inverted dropout as a constant mask multiply; no-op when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut RngStream) -> Var {
        if rate == 0.0 {
            return a;
        }
        let (m, n) = (self.rows(a), self.cols(a));
        let keep = 1.0 - rate;
        let mask: Vec<f64> =
            (0..m * n).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mv = self.leaf(m, n, mask);
        self.mul(a, mv)
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].data.iter().all(|x| x.is_finite())
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Reverse sweep seeding d(loss)/d(loss) = `seed`. Gradients for every
    /// node become available through `grad`.
    pub fn backward(&mut self, loss: Var, seed: f64) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward target must be scalar");
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = seed;

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    // dA = G * B^T
                    let da = matmul_nt(&g, &self.nodes[b.0].data, m, n, k);
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&da) {
                        *dst += src;
                    }
                    // dB = A^T * G
                    let a_data = std::mem::take(&mut self.nodes[a.0].data);
                    matmul_tn_acc(&a_data, &g, m, k, n, &mut self.grads[b.0]);
                    self.nodes[a.0].data = a_data;
                }
                Op::Add { a, b } => {
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                    for (dst, src) in self.grads[b.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Sub { a, b } => {
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                    for (dst, src) in self.grads[b.0].iter_mut().zip(&g) {
                        *dst -= src;
                    }
                }
                Op::Mul { a, b } => {
                    for j in 0..g.len() {
                        self.grads[a.0][j] += g[j] * self.nodes[b.0].data[j];
                    }
                    for j in 0..g.len() {
                        self.grads[b.0][j] += g[j] * self.nodes[a.0].data[j];
                    }
                }
                Op::Scale { a, c } => {
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g) {
                        *dst += c * src;
                    }
                }
                Op::AddRowBroadcast { a, b } => {
                    let n = self.nodes[a.0].cols;
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                    for (j, src) in g.iter().enumerate() {
                        self.grads[b.0][j % n] += src;
                    }
                }
                Op::MulColBroadcast { a, c } => {
                    let n = self.nodes[a.0].cols;
                    for (j, src) in g.iter().enumerate() {
                        self.grads[a.0][j] += src * self.nodes[c.0].data[j / n];
                        self.grads[c.0][j / n] += src * self.nodes[a.0].data[j];
                    }
                }
                Op::Relu { a } => {
                    for j in 0..g.len() {
                        if self.nodes[a.0].data[j] > 0.0 {
                            self.grads[a.0][j] += g[j];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    for j in 0..g.len() {
                        let s = self.nodes[i].data[j];
                        self.grads[a.0][j] += g[j] * s * (1.0 - s);
                    }
                }
                Op::Fourier { a, bands } => {
                    let (m, f) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let out_cols = 2 * bands * f;
                    for r in 0..m {
                        for j in 0..f {
                            let x = self.nodes[a.0].data[r * f + j];
                            let mut acc = 0.0;
                            for b in 0..bands {
                                let w = (1u64 << b) as f64 * std::f64::consts::PI;
                                let arg = w * x;
                                acc += g[r * out_cols + j * bands + b] * w * arg.cos();
                                acc -= g[r * out_cols + bands * f + j * bands + b] * w * arg.sin();
                            }
                            self.grads[a.0][r * f + j] += acc;
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let n = self.nodes[i].cols;
                    let m = self.nodes[i].rows;
                    for r in 0..m {
                        let y = &self.nodes[i].data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(x, z)| x * z).sum();
                        for j in 0..n {
                            self.grads[a.0][r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                    for r in 0..m {
                        let src = &self.nodes[x.0].data[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = src.iter().sum::<f64>() / n as f64;
                        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = src.iter().map(|&v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            self.grads[gain.0][j] += gr[j] * xhat[j];
                            self.grads[bias.0][j] += gr[j];
                            dxhat[j] = gr[j] * self.nodes[gain.0].data[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for j in 0..n {
                            self.grads[x.0][r * n + j] +=
                                inv / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::ConcatRows { a, b } => {
                    let la = self.nodes[a.0].data.len();
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g[..la]) {
                        *dst += src;
                    }
                    for (dst, src) in self.grads[b.0].iter_mut().zip(&g[la..]) {
                        *dst += src;
                    }
                }
                Op::ConcatCols { a, b } => {
                    let m = self.nodes[i].rows;
                    let (na, nb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let n = na + nb;
                    for r in 0..m {
                        for j in 0..na {
                            self.grads[a.0][r * na + j] += g[r * n + j];
                        }
                        for j in 0..nb {
                            self.grads[b.0][r * nb + j] += g[r * n + na + j];
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    let n = self.nodes[a.0].cols;
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for j in 0..n {
                            self.grads[a.0][src_r * n + j] += g[out_r * n + j];
                        }
                    }
                }
                Op::Reshape { a } => {
                    for (dst, src) in self.grads[a.0].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Transpose { a } => {
                    let (m, n) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    for r in 0..m {
                        for j in 0..n {
                            self.grads[a.0][r * n + j] += g[j * m + r];
                        }
                    }
                }
                Op::MeanRows { a } => {
                    let (m, n) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let inv = 1.0 / m as f64;
                    for r in 0..m {
                        for j in 0..n {
                            self.grads[a.0][r * n + j] += g[j] * inv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    for dst in self.grads[a.0].iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::MaxPoolRows { a } => {
                    let (m, n) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    for j in 0..n {
                        let mut best = 0usize;
                        let mut best_v = f64::NEG_INFINITY;
                        for r in 0..m {
                            let v = self.nodes[a.0].data[r * n + j];
                            if v > best_v {
                                best_v = v;
                                best = r;
                            }
                        }
                        self.grads[a.0][best * n + j] += g[j];
                    }
                }
                Op::BroadcastRow { a, m } => {
                    let n = self.nodes[a.0].cols;
                    for r in 0..m {
                        for j in 0..n {
                            self.grads[a.0][j] += g[r * n + j];
                        }
                    }
                }
                Op::SmoothL1 { pred, gt } => {
                    let t = self.nodes[pred.0].rows as f64;
                    let gl = g[0] / t;
                    for j in 0..self.nodes[pred.0].data.len() {
                        let e = self.nodes[pred.0].data[j] - self.nodes[gt.0].data[j];
                        let de = if e.abs() < 1.0 { e } else { e.signum() };
                        self.grads[pred.0][j] += gl * de;
                        self.grads[gt.0][j] -= gl * de;
                    }
                }
                Op::CrossEntropyProbs { p, target } => {
                    for j in 0..self.nodes[p.0].data.len() {
                        let ph = self.nodes[p.0].data[j];
                        let t = self.nodes[target.0].data[j];
                        if ph >= crate::tensor::LOG_CLAMP {
                            self.grads[p.0][j] += g[0] * (-t / ph);
                        }
                        self.grads[target.0][j] += g[0] * (-ph.max(crate::tensor::LOG_CLAMP).ln());
                    }
                }
            }
            self.grads[i] = g;
        }
    }

    /// Accumulate parameter-node gradients into `grads`, scaled by `scale`.
    pub fn export_grads(&self, grads: &mut Grads, scale: f64) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let dst = &mut grads.buffers[id.0];
                for (d, s) in dst.iter_mut().zip(&self.grads[i]) {
                    *d += scale * s;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a tape program.
    fn check_input_grad(
        build: impl Fn(&mut Tape, Var) -> Var,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(rows, cols, data.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss, 1.0);
        let analytic = tape.grad(x).to_vec();

        let step = 1e-6;
        let mut max_err: f64 = 0.0;
        for j in 0..data.len() {
            let eval = |v: f64| {
                let mut d2 = data.clone();
                d2[j] = v;
                let mut t2 = Tape::new();
                let x2 = t2.leaf(rows, cols, d2);
                let l2 = build(&mut t2, x2);
                t2.scalar(l2)
            };
            let num = (eval(data[j] + step) - eval(data[j] - step)) / (2.0 * step);
            let err = (analytic[j] - num).abs() / analytic[j].abs().max(1.0);
            max_err = max_err.max(err);
        }
        max_err
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn matmul_forward_known() {
        let mut tape = Tape::new();
        let a = tape.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.leaf(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn grad_matmul() {
        let w = rand_vec(12, 1);
        let err = check_input_grad(
            |t, x| {
                let wv = t.leaf(4, 3, w.clone());
                let y = t.matmul(x, wv);
                t.sum_all(y)
            },
            3,
            4,
            rand_vec(12, 2),
        );
        assert!(err < 1e-7, "matmul grad err {err}");
    }

    #[test]
    fn grad_softmax_layernorm_chain() {
        let gain = rand_vec(5, 3).iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>();
        let bias = rand_vec(5, 4);
        let err = check_input_grad(
            |t, x| {
                let g = t.leaf(1, 5, gain.clone());
                let b = t.leaf(1, 5, bias.clone());
                let ln = t.layer_norm(x, g, b);
                let sm = t.softmax_rows(ln, None);
                let w = t.leaf(1, 5, vec![0.3, -0.7, 1.1, 0.2, -0.4]);
                let wb = t.broadcast_row(w, 4);
                let prod = t.mul(sm, wb);
                t.sum_all(prod)
            },
            4,
            5,
            rand_vec(20, 5),
        );
        assert!(err < 1e-6, "softmax/layernorm grad err {err}");
    }

    #[test]
    fn grad_fourier_sigmoid_relu() {
        let err = check_input_grad(
            |t, x| {
                let f = t.fourier(x, 3);
                let s = t.sigmoid(f);
                let r = t.relu(s);
                t.sum_all(r)
            },
            2,
            2,
            vec![0.13, -0.41, 0.52, 0.07],
        );
        assert!(err < 1e-6, "fourier grad err {err}");
    }

    #[test]
    fn grad_gather_concat_pool() {
        let err = check_input_grad(
            |t, x| {
                let g = t.gather_rows(x, &[2, 0, 2]);
                let p = t.max_pool_rows(g);
                let c = t.concat_cols(p, p);
                let mr = t.mean_rows(c);
                t.sum_all(mr)
            },
            3,
            4,
            rand_vec(12, 7),
        );
        assert!(err < 1e-7, "gather/pool grad err {err}");
    }

    #[test]
    fn grad_broadcast_ops() {
        let bias = rand_vec(4, 8);
        let scalec = rand_vec(3, 9);
        let err = check_input_grad(
            |t, x| {
                let b = t.leaf(1, 4, bias.clone());
                let y = t.add_row_broadcast(x, b);
                let c = t.leaf(3, 1, scalec.clone());
                let z = t.mul_col_broadcast(y, c);
                let tr = t.transpose(z);
                t.sum_all(tr)
            },
            3,
            4,
            rand_vec(12, 10),
        );
        assert!(err < 1e-7, "broadcast grad err {err}");
    }

    #[test]
    fn grad_losses() {
        let gt = vec![0.2, -0.1, 1.7, 0.4, 0.0, -2.3];
        let err = check_input_grad(
            |t, x| {
                let g = t.leaf(3, 2, gt.clone());
                t.smooth_l1(x, g)
            },
            3,
            2,
            vec![0.5, -0.4, 0.2, 1.9, 0.3, -2.0],
        );
        assert!(err < 1e-7, "smooth_l1 grad err {err}");

        let target = vec![0.0, 1.0, 0.0];
        let err = check_input_grad(
            |t, x| {
                let sm = t.softmax_rows(x, None);
                let tv = t.leaf(1, 3, target.clone());
                t.cross_entropy_probs(sm, tv)
            },
            1,
            3,
            vec![0.3, -0.5, 0.9],
        );
        assert!(err < 1e-7, "cross entropy grad err {err}");
    }

    #[test]
    fn masked_softmax_excludes_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, vec![5.0, 1.0, 3.0]);
        let s = tape.softmax_rows(x, Some(&[true, false, true]));
        let d = tape.data(s);
        assert!(d[1].abs() < 1e-300);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_binding_dedups_and_accumulates() {
        let mut rng = RngStream::new(0);
        let mut store = ParamStore::new();
        let w = store.register("w", 2, 2, Init::Xavier, &mut rng);
        let mut tape = Tape::new();
        let w1 = tape.param(&store, w);
        let w2 = tape.param(&store, w);
        assert_eq!(w1, w2);
        let prod = tape.mul(w1, w2); // w^2 elementwise
        let loss = tape.sum_all(prod);
        tape.backward(loss, 1.0);
        let mut grads = store.zero_grads();
        tape.export_grads(&mut grads, 1.0);
        for (g, v) in grads.buffers[0].iter().zip(&store.get(w).data) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn same_rng_same_dropout() {
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        let mut t1 = Tape::new();
        let x1 = t1.leaf(4, 4, rand_vec(16, 1));
        let d1 = t1.dropout(x1, 0.5, &mut a);
        let mut t2 = Tape::new();
        let x2 = t2.leaf(4, 4, rand_vec(16, 1));
        let d2 = t2.dropout(x2, 0.5, &mut b);
        assert_eq!(t1.data(d1), t2.data(d2));
    }
}
