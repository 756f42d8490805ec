use rand::Rng;

use super::autodiff::{Grads, Tape, Var};
use super::tensor::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a named segment per weight matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    pub version: u32,
    pub data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub const VERSION: u32 = 1;

    pub fn new() -> Self {
        ParamVector { version: Self::VERSION, data: Vec::new(), segments: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<()> {
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter segment {name}")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("segment {name}: {} values for {rows}x{cols}", values.len())));
        }
        self.segments.push(Segment { name: name.to_string(), offset: self.data.len(), rows, cols });
        self.data.extend(values);
        Ok(())
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn push_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let v = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
        self.push(name, rows, cols, v)
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Missing(format!("parameter segment {name}")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let s = self.segment(name)?;
        Ok(&self.data[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.segment(name)?.range();
        Ok(&mut self.data[r])
    }

    pub fn mat(&self, name: &str) -> Result<Mat> {
        let s = self.segment(name)?;
        Mat::from_vec(s.rows, s.cols, self.data[s.range()].to_vec())
    }

    /// Checks that segments tile the storage exactly and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return Err(Error::Format(format!("segment {} starts at {} not {next}", s.name, s.offset)));
            }
            next += s.len();
        }
        if next != self.data.len() {
            return Err(Error::Format("segments do not cover the parameter vector".into()));
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }

    /// Places every segment on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .segments
            .iter()
            .map(|s| tape.leaf(Mat { rows: s.rows, cols: s.cols, data: self.data[s.range()].to_vec() }))
            .collect();
        BoundParams { vars, names: self.segments.iter().map(|s| s.name.clone()).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Missing(format!("parameter segment {name}")))
    }

    /// Flat gradient in segment order.
    pub fn flat_grad(&self, tape: &Tape, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.vars {
            out.extend(grads.wrt(tape, v).data);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
