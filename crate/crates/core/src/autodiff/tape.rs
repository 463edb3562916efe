use super::{Mat, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    /// Reshape a contiguous range of a row vector into a matrix.
    Slice {
        src: Var,
        offset: usize,
    },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast-add a `1×n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Ln(Var),
    /// `x / max(‖x‖, floor)` per row.
    RowNormalize {
        src: Var,
        floor: f64,
    },
    /// `softmax(scale · x)` per row.
    SoftmaxRows {
        src: Var,
        scale: f64,
    },
    SumAll(Var),
    /// Picks one column per row, giving an `n×1` column.
    PickPerRow {
        src: Var,
        cols: Vec<usize>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape over matrices.
///
/// Every op records its value eagerly; [`Tape::gradient`] runs one reverse
/// sweep. The tape is generic over [`Scalar`], so running it on dual numbers
/// differentiates the reverse sweep itself in a chosen direction.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let s = self.value(src);
        debug_assert_eq!(s.rows(), 1);
        let data = s.data()[offset..offset + rows * cols].to_vec();
        let value = Mat::from_vec(rows, cols, data).expect("slice bounds");
        let ng = self.needs(src);
        self.push(value, Op::Slice { src, offset }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        debug_assert_eq!(rm.rows(), 1);
        debug_assert_eq!(rm.cols(), am.cols());
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(rm.data()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let v = self.value(a).map(|x| x * kk);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let v = self.value(a).map(|x| x + kk);
        let ng = self.needs(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn row_normalize(&mut self, src: Var, floor: f64) -> Var {
        let x = self.value(src);
        let mut v = x.clone();
        for r in 0..v.rows() {
            let n = row_norm_floored(x.row(r), floor);
            for e in v.row_mut(r) {
                *e = *e / n;
            }
        }
        let ng = self.needs(src);
        self.push(v, Op::RowNormalize { src, floor }, ng)
    }

    pub fn softmax_rows(&mut self, src: Var, scale: f64) -> Var {
        let x = self.value(src);
        let k = T::from_f64(scale);
        let mut v = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            // Shift by the row max (a constant) for stability.
            let shift = row
                .iter()
                .map(|e| e.re() * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let shift = T::from_f64(shift);
            let out = v.row_mut(r);
            let mut total = T::zero();
            for (o, &e) in out.iter_mut().zip(row) {
                *o = (e * k - shift).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let ng = self.needs(src);
        self.push(v, Op::SoftmaxRows { src, scale }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut total = T::zero();
        for &x in self.value(a).data() {
            total += x;
        }
        let ng = self.needs(a);
        self.push(Mat::scalar(total), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn pick_per_row(&mut self, src: Var, cols: &[usize]) -> Var {
        let x = self.value(src);
        debug_assert_eq!(cols.len(), x.rows());
        let data = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let v = Mat::from_vec(cols.len(), 1, data).expect("pick shape");
        let ng = self.needs(src);
        self.push(
            v,
            Op::PickPerRow {
                src,
                cols: cols.to_vec(),
            },
            ng,
        )
    }

    /// Gradient of the `1×1` node `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Mat<T> {
        self.gradients(output, &[wrt]).pop().expect("one gradient")
    }

    /// Gradients of the `1×1` node `output` with respect to each of `wrt`.
    pub fn gradients(&self, output: Var, wrt: &[Var]) -> Vec<Mat<T>> {
        assert_eq!(self.value(output).shape(), (1, 1), "output must be scalar");
        let mut adj: Vec<Option<Mat<T>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(Mat::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut adj);
            adj[i] = Some(g);
        }

        wrt.iter()
            .map(|w| {
                adj.get(w.0).and_then(|a| a.clone()).unwrap_or_else(|| {
                    let v = self.value(*w);
                    Mat::zeros(v.rows(), v.cols())
                })
            })
            .collect()
    }

    fn backprop(&self, node: &Node<T>, g: &Mat<T>, adj: &mut [Option<Mat<T>>]) {
        let mut acc = |v: Var, d: Mat<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Slice { src, offset } => {
                let s = self.value(*src);
                let mut d = Mat::zeros(1, s.cols());
                d.data_mut()[*offset..*offset + g.data().len()].copy_from_slice(g.data());
                acc(*src, d);
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_bt(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    let mut d = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, d);
                }
            }
            Op::Scale(a, k) => {
                let kk = T::from_f64(*k);
                acc(*a, g.map(|x| x * kk));
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |x, t| x * (T::one() - t * t));
                acc(*a, d);
            }
            Op::Ln(a) => {
                let d = g.zip_map(self.value(*a), |x, v| x / v);
                acc(*a, d);
            }
            Op::RowNormalize { src, floor } => {
                let x = self.value(*src);
                let y = &node.value;
                let mut d = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let n = row_norm_floored(xr, *floor);
                    let active = row_norm(xr).re() > *floor;
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mut dot = T::zero();
                    if active {
                        for (&yy, &gg) in yr.iter().zip(gr) {
                            dot += yy * gg;
                        }
                    }
                    for ((o, &yy), &gg) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gg - yy * dot) / n;
                    }
                }
                acc(*src, d);
            }
            Op::SoftmaxRows { src, scale } => {
                let s = &node.value;
                let k = T::from_f64(*scale);
                let mut d = Mat::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let mut dot = T::zero();
                    for (&a, &b) in sr.iter().zip(gr) {
                        dot += a * b;
                    }
                    for ((o, &sv), &gv) in d.row_mut(r).iter_mut().zip(sr).zip(gr) {
                        *o = k * sv * (gv - dot);
                    }
                }
                acc(*src, d);
            }
            Op::SumAll(a) => {
                let v = self.value(*a);
                acc(*a, Mat::filled(v.rows(), v.cols(), g.data()[0]));
            }
            Op::PickPerRow { src, cols } => {
                let v = self.value(*src);
                let mut d = Mat::zeros(v.rows(), v.cols());
                for (r, &c) in cols.iter().enumerate() {
                    d.set(r, c, g.get(r, 0));
                }
                acc(*src, d);
            }
        }
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let mut s = T::zero();
    for &x in row {
        s += x * x;
    }
    s.sqrt()
}

fn row_norm_floored<T: Scalar>(row: &[T], floor: f64) -> T {
    let n = row_norm(row);
    if n.re() > floor {
        n
    } else {
        T::from_f64(floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Dual, Matrix};

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let dn = f(&p);
                p[i] = x[i];
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    // Exercises every op once.
    fn composite<T: Scalar>(tape: &mut Tape<T>, w: Var) -> Var {
        let a = tape.slice(w, 0, 2, 3);
        let b = tape.slice(w, 6, 3, 2);
        let row = tape.slice(w, 12, 1, 2);
        let ab = tape.matmul(a, b);
        let ab = tape.add_row(ab, row);
        let t = tape.tanh(ab);
        let n = tape.row_normalize(a, 1e-12);
        let c = tape.matmul_bt(n, n);
        let sm = tape.softmax_rows(c, 3.0);
        let lsm = tape.ln(sm);
        let picked = tape.pick_per_row(lsm, &[1, 0]);
        let tt = tape.mul(t, t);
        let s1 = tape.sum_all(tt);
        let s2 = tape.mean_all(picked);
        let diff = tape.sub(s1, s2);
        let sum = tape.add(diff, s1);
        let sc = tape.scale(sum, 0.5);
        tape.add_const(sc, 2.0)
    }

    fn eval(x: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let w = tape.input(Matrix::from_vec(1, x.len(), x.to_vec()).unwrap());
        let out = composite(&mut tape, w);
        tape.scalar(out)
    }

    const X: [f64; 14] = [
        0.3, -0.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.7, -0.6, 0.3, 0.8, -0.1, 0.05, -0.3,
    ];

    #[test]
    fn reverse_sweep_matches_central_differences() {
        let mut tape = Tape::<f64>::new();
        let w = tape.input(Matrix::from_vec(1, 14, X.to_vec()).unwrap());
        let out = composite(&mut tape, w);
        let g = tape.gradient(out, w);
        let fd = central_diff(eval, &X, 1e-6);
        for (a, b) in g.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn dual_sweep_gives_hessian_vector_product() {
        let v: Vec<f64> = (0..14).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let mut tape = Tape::<Dual>::new();
        let xs = X.iter().zip(&v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let w = tape.input(Mat::from_vec(1, 14, xs).unwrap());
        let out = composite(&mut tape, w);
        let hv: Vec<f64> = tape.gradient(out, w).data().iter().map(|d| d.du).collect();

        // Oracle: directional difference of reverse-mode gradients.
        let grad_at = |x: &[f64]| {
            let mut t = Tape::<f64>::new();
            let w = t.input(Matrix::from_vec(1, 14, x.to_vec()).unwrap());
            let o = composite(&mut t, w);
            t.gradient(o, w).into_vec()
        };
        let h = 1e-6;
        let up: Vec<f64> = X.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let dn: Vec<f64> = X.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (gu, gd) = (grad_at(&up), grad_at(&dn));
        for i in 0..14 {
            let fd = (gu[i] - gd[i]) / (2.0 * h);
            assert!((hv[i] - fd).abs() < 1e-6, "{i}: {} vs {fd}", hv[i]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Matrix::scalar(3.0));
        let x = tape.input(Matrix::scalar(2.0));
        let y = tape.mul(c, x);
        assert_eq!(tape.gradient(y, x).data(), &[3.0]);
        assert_eq!(tape.gradient(y, c).data(), &[0.0]);
    }
}
