//! Reverse-mode differentiation over dense matrices.
//!
//! Build an expression on a [`Tape`], then call [`Tape::backward`] on a
//! `1 x 1` node. Every node is recorded in creation order, so the reverse
//! sweep is a single pass from the loss back to the leaves.

use super::tensor::{self, Mat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `n x m` plus a `1 x m` row broadcast down the rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Matrix times a `1 x 1` node.
    MulScalar(Var, Var),
    /// `n x m` times an `n x 1` column broadcast across columns.
    MulCol(Var, Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// `n x r` rows to the `n x n` matrix of squared row distances.
    PairwiseSqDist(Var),
    /// Forward-only; differentiating through it is an error.
    Sign,
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` where the loss does not depend on it.
#[derive(Debug, Clone)]
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, zeros of the right shape when the loss ignores it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Mat {
        match &self.0[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }
}

fn same_shape(a: &Mat, b: &Mat, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", x.shape(), y.shape())));
        }
        let v = tensor::matmul(x, y);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows != 1 || b.cols != x.cols {
            return Err(Error::Shape(format!("add_bias: {:?} + {:?}", x.shape(), b.shape())));
        }
        let mut v = x.clone();
        v.add_row(&b.data);
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("mul_scalar expects a 1x1 factor".into()));
        }
        let c = self.scalar(s);
        let v = self.value(a).map(|x| c * x);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols != 1 || c.rows != x.rows {
            return Err(Error::Shape(format!("mul_col: {:?} * {:?}", x.shape(), c.shape())));
        }
        let mut v = x.clone();
        for i in 0..v.rows {
            let f = c.data[i];
            v.row_mut(i).iter_mut().for_each(|e| *e *= f);
        }
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, tensor::silu, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, tensor::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sign(&mut self, a: Var) -> Var {
        self.unary(a, f64::signum, Op::Sign)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows * m.cols).max(1) as f64;
        let v = Mat::scalar(m.sum() / n);
        self.push(v, Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|i| m.row(i).iter().sum()).collect();
        let v = Mat { rows: m.rows, cols: 1, data };
        self.push(v, Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows);
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut o = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                v.data[i * cols + o..i * cols + o + r.len()].copy_from_slice(r);
                o += r.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.value(a).cols {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", self.value(a).shape())));
        }
        let v = self.value(a).cols_range(start, end);
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows;
        let mut v = Mat::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                v.data[i * n + j] = d;
                v.data[j * n + i] = d;
            }
        }
        self.push(v, Op::PairwiseSqDist(a))
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut g: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = g[idx].take() else { continue };
            let mut acc = |v: Var, d: Mat| match &mut g[v.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, tensor::matmul_bt(&up, self.value(*b)));
                    acc(*b, tensor::matmul_at(self.value(*a), &up));
                }
                Op::AddBias(a, b) => {
                    let mut db = Mat::zeros(1, up.cols);
                    for i in 0..up.rows {
                        for (d, u) in db.data.iter_mut().zip(up.row(i)) {
                            *d += u;
                        }
                    }
                    acc(*a, up);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*b, up.clone());
                    acc(*a, up);
                }
                Op::Sub(a, b) => {
                    acc(*b, up.map(|x| -x));
                    acc(*a, up);
                }
                Op::Mul(a, b) => {
                    acc(*a, up.zip(self.value(*b), |u, y| u * y));
                    acc(*b, up.zip(self.value(*a), |u, x| u * x));
                }
                Op::Scale(a, c) => acc(*a, up.map(|u| c * u)),
                Op::MulScalar(a, s) => {
                    let c = self.scalar(*s);
                    let ds: f64 = up.data.iter().zip(&self.value(*a).data).map(|(u, x)| u * x).sum();
                    acc(*a, up.map(|u| c * u));
                    acc(*s, Mat::scalar(ds));
                }
                Op::MulCol(a, col) => {
                    let x = self.value(*a);
                    let c = self.value(*col);
                    let mut da = up.clone();
                    let mut dc = Mat::zeros(c.rows, 1);
                    for i in 0..up.rows {
                        let f = c.data[i];
                        dc.data[i] = up.row(i).iter().zip(x.row(i)).map(|(u, v)| u * v).sum();
                        da.row_mut(i).iter_mut().for_each(|e| *e *= f);
                    }
                    acc(*a, da);
                    acc(*col, dc);
                }
                Op::Silu(a) => acc(*a, up.zip(self.value(*a), |u, x| u * tensor::silu_grad(x))),
                Op::Tanh(a) => acc(*a, up.zip(&node.value, |u, y| u * (1.0 - y * y))),
                Op::Exp(a) => acc(*a, up.zip(&node.value, |u, y| u * y)),
                Op::Sigmoid(a) => acc(*a, up.zip(&node.value, |u, y| u * y * (1.0 - y))),
                Op::Softplus(a) => acc(*a, up.zip(self.value(*a), |u, x| u * tensor::sigmoid(x))),
                Op::Square(a) => acc(*a, up.zip(self.value(*a), |u, x| 2.0 * u * x)),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Mat::filled(r, c, up.data[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Mat::filled(r, c, up.data[0] / (r * c).max(1) as f64));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).iter_mut().for_each(|e| *e = up.data[i]);
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut o = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        acc(p, up.cols_range(o, o + w));
                        o += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..*end].copy_from_slice(up.row(i));
                    }
                    acc(*a, d);
                }
                Op::PairwiseSqDist(a) => {
                    // d D_ij / d x_i = 2 (x_i - x_j); D_ij and D_ji both depend on x_i.
                    let x = self.value(*a);
                    let n = x.rows;
                    let mut d = Mat::zeros(n, x.cols);
                    for i in 0..n {
                        for j in 0..n {
                            let w = up.data[i * n + j] + up.data[j * n + i];
                            if w == 0.0 || i == j {
                                continue;
                            }
                            let (xi, xj) = (x.row(i), x.row(j));
                            for c in 0..x.cols {
                                d.data[i * x.cols + c] += 2.0 * w * (xi[c] - xj[c]);
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::Sign => return Err(Error::UnsupportedPrimitive("sign")),
            }
        }
        Ok(Grads(g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat { rows: r, cols: c, data: (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = rand_mat(&mut rng, 3, 4);
        let mut t = Tape::new();
        let p = t.leaf(theta.clone());
        let sq = t.square(p);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, p), theta);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Mat::filled(2, 2, 3.0));
        let c = t.leaf(Mat::filled(2, 2, 1.0));
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(&t, p), Mat::zeros(2, 2));
    }

    #[test]
    fn sign_is_not_differentiable() {
        let mut t = Tape::new();
        let p = t.leaf(Mat::filled(1, 3, -0.5));
        let s = t.sign(p);
        let loss = t.sum(s);
        assert!(matches!(t.backward(loss), Err(Error::UnsupportedPrimitive("sign"))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(Mat::filled(1, 3, 1.0));
        assert!(t.backward(p).is_err());
    }

    /// Builds a loss touching every differentiable primitive and checks each
    /// leaf gradient against central differences along random directions.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            rand_mat(&mut rng, 4, 3),
            rand_mat(&mut rng, 3, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 1, 1),
            rand_mat(&mut rng, 4, 1),
        ];
        let build = |t: &mut Tape, ls: &[Mat]| -> (Vec<Var>, Var) {
            let v: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone())).collect();
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_bias(h, v[2]).unwrap();
            let a = t.silu(h);
            let b = t.tanh(h);
            let c = t.sigmoid(h);
            let d = t.softplus(h);
            let ab = t.mul(a, b).unwrap();
            let cd = t.sub(c, d).unwrap();
            let e = t.add(ab, cd).unwrap();
            let e = t.mul_scalar(e, v[3]).unwrap();
            let e = t.mul_col(e, v[4]).unwrap();
            let sl = t.slice_cols(e, 1, 4).unwrap();
            let dist = t.pairwise_sq_dist(sl);
            let dist = t.scale(dist, -0.3);
            let k = t.exp(dist);
            let rs = t.row_sum(k);
            let cat = t.concat_cols(&[e, rs]).unwrap();
            let sq = t.square(cat);
            let m = t.mean(sq);
            let s = t.sum(k);
            let loss = t.add(m, s).unwrap();
            (v, loss)
        };
        let mut t = Tape::new();
        let (vars, loss) = build(&mut t, &leaves);
        let g = t.backward(loss).unwrap();
        let eval = |ls: &[Mat]| {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, ls);
            t.scalar(l)
        };
        for (li, &v) in vars.iter().enumerate() {
            let grad = g.wrt(&t, v);
            for _ in 0..20 {
                let dir = rand_mat(&mut rng, grad.rows, grad.cols);
                let h = 1e-6;
                let mut p = leaves.clone();
                let mut m = leaves.clone();
                for k in 0..dir.data.len() {
                    p[li].data[k] += h * dir.data[k];
                    m[li].data[k] -= h * dir.data[k];
                }
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let an: f64 = grad.data.iter().zip(&dir.data).map(|(a, b)| a * b).sum();
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-2),
                    "leaf {li}: fd {fd} analytic {an}"
                );
            }
        }
    }
}
