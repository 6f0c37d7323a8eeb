//! Reverse-mode autodiff over dense `f64` matrices, plus the parameter
//! store and AdamW optimizer shared by the policy scorer and the tiny LM.
//!
//! The tape is rebuilt per forward pass; `backward` walks it once in reverse.
//! Everything is `f64` so finite-difference checks resolve cleanly.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// `(m x n) + (1 x n)` broadcast over rows.
    AddRow(usize, usize),
    /// `(m x n) * s` with `s` a `1 x 1` variable.
    MulScalarVar(usize, usize),
    /// `(m x n) + s` broadcast, `s` a `1 x 1` variable.
    AddScalarVar(usize, usize),
    /// `C * s` for a constant matrix and a `1 x 1` variable.
    ScaleConstByVar { matrix: Array2<f64>, scalar: usize },
    Scale(usize, f64),
    AddConst(usize),
    Neg(usize),
    Transpose(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    ConcatRows(Vec<usize>),
    GatherRows { parent: usize, rows: Vec<usize> },
    /// `1 x n` parent repeated `times` rows.
    TileRows { parent: usize },
    SumAll(usize),
    MeanAll(usize),
    /// Sum of selected entries, producing a `1 x 1` value.
    SumPicked { parent: usize, coords: Vec<(usize, usize)> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, row: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap())
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Hadamard(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = &self.nodes[a.0].value * sv;
        self.push(value, Op::MulScalarVar(a.0, s.0))
    }

    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = &self.nodes[a.0].value + sv;
        self.push(value, Op::AddScalarVar(a.0, s.0))
    }

    pub fn scale_const_by_var(&mut self, matrix: Array2<f64>, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = &matrix * sv;
        self.push(value, Op::ScaleConstByVar { matrix, scalar: s.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddConst(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -&self.nodes[a.0].value;
        self.push(value, Op::Neg(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::RowSoftmax(a.0))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::RowLogSoftmax(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        self.push(value, Op::GatherRows { parent: a.0, rows: rows.to_vec() })
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let src = &self.nodes[a.0].value;
        debug_assert_eq!(src.nrows(), 1);
        let mut value = Array2::zeros((times, src.ncols()));
        for mut row in value.rows_mut() {
            row.assign(&src.row(0));
        }
        self.push(value, Op::TileRows { parent: a.0 })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        self.push(value, Op::MeanAll(a.0))
    }

    pub fn sum_picked(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let src = &self.nodes[a.0].value;
        let total: f64 = coords.iter().map(|&(r, c)| src[[r, c]]).sum();
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::SumPicked { parent: a.0, coords: coords.to_vec() })
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        self.sum_picked(a, &[(r, c)])
    }

    /// Backpropagate from a `1 x 1` root; returns per-variable gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.accumulate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut bump = |target: usize, delta: Array2<f64>| match &mut grads[target] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                bump(*a, grad.dot(&vb.t()));
                bump(*b, va.t().dot(grad));
            }
            Op::Add(a, b) => {
                bump(*a, grad.clone());
                bump(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                bump(*a, grad.clone());
                bump(*b, -grad);
            }
            Op::Hadamard(a, b) => {
                bump(*a, grad * &self.nodes[*b].value);
                bump(*b, grad * &self.nodes[*a].value);
            }
            Op::AddRow(a, row) => {
                bump(*a, grad.clone());
                let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                bump(*row, summed);
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[*s].value[[0, 0]];
                bump(*a, grad * sv);
                let ds = (grad * &self.nodes[*a].value).sum();
                bump(*s, Array2::from_elem((1, 1), ds));
            }
            Op::AddScalarVar(a, s) => {
                bump(*a, grad.clone());
                bump(*s, Array2::from_elem((1, 1), grad.sum()));
            }
            Op::ScaleConstByVar { matrix, scalar } => {
                let ds = (grad * matrix).sum();
                bump(*scalar, Array2::from_elem((1, 1), ds));
            }
            Op::Scale(a, c) => bump(*a, grad * *c),
            Op::AddConst(a) => bump(*a, grad.clone()),
            Op::Neg(a) => bump(*a, -grad),
            Op::Transpose(a) => bump(*a, grad.t().to_owned()),
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = grad * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &yv| *d -= dot * yv);
                }
                bump(*a, dx);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = grad.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &logp| *d -= gsum * logp.exp());
                }
                bump(*a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                bump(*a, grad * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                bump(*a, grad * &(1.0 - &(y * y)));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                bump(*a, grad * &x.mapv(sigmoid));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let slice = grad.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                    bump(p, slice);
                    offset += rows;
                }
            }
            Op::GatherRows { parent, rows } => {
                let src = &self.nodes[*parent].value;
                let mut dx = Array2::zeros(src.raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(r);
                    target += &grad.row(i);
                }
                bump(*parent, dx);
            }
            Op::TileRows { parent } => {
                let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                bump(*parent, summed);
            }
            Op::SumAll(a) => {
                let g = grad[[0, 0]];
                bump(*a, Array2::from_elem(self.nodes[*a].value.raw_dim(), g));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let g = grad[[0, 0]] / n;
                bump(*a, Array2::from_elem(self.nodes[*a].value.raw_dim(), g));
            }
            Op::SumPicked { parent, coords } => {
                let g = grad[[0, 0]];
                let mut dx = Array2::zeros(self.nodes[*parent].value.raw_dim());
                for &(r, c) in coords {
                    dx[[r, c]] += g;
                }
                bump(*parent, dx);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Named dense tensors. Iteration order is the name order, so hashing and
/// serialization are canonical.
#[derive(Debug, Clone, Default)]
pub struct Params {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name)[[0, 0]]
    }

    /// Register every tensor as a tape leaf.
    pub fn to_vars(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    /// SHA-256 over names, shapes, and little-endian payloads.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, value) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

impl Serialize for Params {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&String, Tensor> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                (k, Tensor { shape: [v.nrows(), v.ncols()], data: v.iter().cloned().collect() })
            })
            .collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, Tensor>::deserialize(deserializer)?;
        let mut tensors = BTreeMap::new();
        for (name, t) in map {
            let expected = t.shape[0] * t.shape[1];
            if t.data.len() != expected {
                return Err(serde::de::Error::custom(format!(
                    "tensor {name:?}: shape {:?} wants {expected} values, got {}",
                    t.shape,
                    t.data.len()
                )));
            }
            let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(serde::de::Error::custom)?;
            tensors.insert(name, arr);
        }
        Ok(Params { tensors })
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update. Only parameters present in `grads` move.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            if self.weight_decay != 0.0 {
                p.mapv_inplace(|x| x - self.lr * self.weight_decay * x);
            }
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bias1;
                let vhat = v / bias2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Central finite difference of `f` in one parameter coordinate.
pub fn central_difference<F: FnMut(&Params) -> f64>(
    mut f: F,
    params: &Params,
    name: &str,
    r: usize,
    c: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(name)[[r, c]] += h;
    let mut minus = params.clone();
    minus.get_mut(name)[[r, c]] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)` with a small floor so zero gradients
/// compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut params = Params::new();
        params.insert("a", array![[0.3, -0.7], [1.1, 0.4]]);
        params.insert("b", array![[0.9, 0.2], [-0.5, 0.8]]);
        let loss = |p: &Params| {
            let mut tape = Tape::new();
            let a = tape.leaf(p.get("a").clone());
            let b = tape.leaf(p.get("b").clone());
            let ab = tape.matmul(a, b);
            let t = tape.tanh(ab);
            let l = tape.sum_all(t);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(params.get("a").clone());
        let b = tape.leaf(params.get("b").clone());
        let ab = tape.matmul(a, b);
        let t = tape.tanh(ab);
        let l = tape.sum_all(t);
        let grads = tape.backward(l);
        for (name, var) in [("a", a), ("b", b)] {
            let g = grads.get(var).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    let fd = central_difference(loss, &params, name, r, c, 1e-5);
                    assert!(
                        relative_error(g[[r, c]], fd) < 1e-7,
                        "{name}[{r},{c}]: ad={} fd={fd}",
                        g[[r, c]]
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check() {
        let mut params = Params::new();
        params.insert("x", array![[0.5, -1.0, 2.0], [0.0, 0.1, -0.2]]);
        let weights = array![[0.7], [-0.3], [0.4]];
        let loss = |p: &Params| {
            let mut tape = Tape::new();
            let x = tape.leaf(p.get("x").clone());
            let sm = tape.row_softmax(x);
            let w = tape.leaf(weights.clone());
            let out = tape.matmul(sm, w);
            let l = tape.sum_all(out);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(params.get("x").clone());
        let sm = tape.row_softmax(x);
        for row in tape.value(sm).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let w = tape.leaf(weights.clone());
        let out = tape.matmul(sm, w);
        let l = tape.sum_all(out);
        let grads = tape.backward(l);
        let g = grads.get(x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let fd = central_difference(loss, &params, "x", r, c, 1e-6);
                assert!(relative_error(g[[r, c]], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn structural_ops_route_gradients() {
        // concat/gather/tile/pick backward paths, finite-difference checked.
        let mut params = Params::new();
        params.insert("a", array![[1.0, 2.0], [3.0, 4.0]]);
        params.insert("s", array![[0.5, -0.25]]);
        let loss = |p: &Params| {
            let mut tape = Tape::new();
            let a = tape.leaf(p.get("a").clone());
            let s = tape.leaf(p.get("s").clone());
            let picked = tape.gather_rows(a, &[1, 0, 1]);
            let tiled = tape.tile_rows(s, 3);
            let glued = tape.concat_rows(&[picked, tiled]);
            let soft = tape.softplus(glued);
            let l = tape.sum_picked(soft, &[(0, 1), (3, 0), (5, 0)]);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(params.get("a").clone());
        let s = tape.leaf(params.get("s").clone());
        let picked = tape.gather_rows(a, &[1, 0, 1]);
        let tiled = tape.tile_rows(s, 3);
        let glued = tape.concat_rows(&[picked, tiled]);
        let soft = tape.softplus(glued);
        let l = tape.sum_picked(soft, &[(0, 1), (3, 0), (5, 0)]);
        let grads = tape.backward(l);
        for r in 0..2 {
            for c in 0..2 {
                let fd = central_difference(loss, &params, "a", r, c, 1e-6);
                let ad = grads.get(a).unwrap()[[r, c]];
                assert!(relative_error(ad, fd) < 1e-6, "a[{r},{c}] ad={ad} fd={fd}");
            }
        }
        for c in 0..2 {
            let fd = central_difference(loss, &params, "s", 0, c, 1e-6);
            assert!(relative_error(grads.get(s).unwrap()[[0, c]], fd) < 1e-6);
        }
    }

    #[test]
    fn log_softmax_and_scalar_broadcasts_check() {
        let mut params = Params::new();
        params.insert("x", array![[0.2, -0.4, 0.9]]);
        params.insert("w", array![[1.3]]);
        params.insert("b", array![[-0.2]]);
        let konst = array![[0.5, 1.5, -1.0]];
        let loss = |p: &Params| {
            let mut tape = Tape::new();
            let x = tape.leaf(p.get("x").clone());
            let w = tape.leaf(p.get("w").clone());
            let b = tape.leaf(p.get("b").clone());
            let scaled = tape.scale_const_by_var(konst.clone(), w);
            let shifted = tape.add_scalar_var(scaled, b);
            let mixed = tape.add(x, shifted);
            let ls = tape.row_log_softmax(mixed);
            let sig = tape.sigmoid(ls);
            let l = tape.mean_all(sig);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(params.get("x").clone());
        let w = tape.leaf(params.get("w").clone());
        let b = tape.leaf(params.get("b").clone());
        let scaled = tape.scale_const_by_var(konst.clone(), w);
        let shifted = tape.add_scalar_var(scaled, b);
        let mixed = tape.add(x, shifted);
        let ls = tape.row_log_softmax(mixed);
        let sig = tape.sigmoid(ls);
        let l = tape.mean_all(sig);
        let grads = tape.backward(l);
        for (name, var) in [("x", x), ("w", w), ("b", b)] {
            let g = grads.get(var).unwrap();
            for c in 0..g.ncols() {
                let fd = central_difference(loss, &params, name, 0, c, 1e-6);
                assert!(relative_error(g[[0, c]], fd) < 1e-6, "{name}[{c}]");
            }
        }
    }

    #[test]
    fn params_hash_tracks_content() {
        let mut p = Params::new();
        p.insert("w", array![[1.0, 2.0]]);
        let h1 = p.content_hash();
        assert_eq!(h1, p.clone().content_hash());
        p.get_mut("w")[[0, 0]] = 1.5;
        assert_ne!(h1, p.content_hash());
    }

    #[test]
    fn params_roundtrip_and_shape_check() {
        let mut p = Params::new();
        p.insert("w", array![[1.0, 2.0], [3.0, 4.0]]);
        let json = serde_json::to_string(&p).unwrap();
        let q: Params = serde_json::from_str(&json).unwrap();
        assert_eq!(p.content_hash(), q.content_hash());
        let bad = r#"{"w":{"shape":[2,2],"data":[1.0,2.0,3.0]}}"#;
        assert!(serde_json::from_str::<Params>(bad).is_err());
    }

    #[test]
    fn adamw_zero_lr_is_identity() {
        let mut p = Params::new();
        p.insert("w", array![[1.0, -2.0]]);
        let before = p.content_hash();
        let mut opt = AdamW::new(0.0, 0.01);
        let grads: BTreeMap<String, Array2<f64>> =
            [("w".to_string(), array![[0.5, 0.5]])].into_iter().collect();
        opt.step(&mut p, &grads);
        assert_eq!(before, p.content_hash());
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut p = Params::new();
        p.insert("w", array![[4.0, -3.0]]);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..200 {
            let g = p.get("w").mapv(|x| 2.0 * x);
            let grads: BTreeMap<String, Array2<f64>> =
                [("w".to_string(), g)].into_iter().collect();
            opt.step(&mut p, &grads);
        }
        assert!(p.get("w").iter().all(|x| x.abs() < 0.05));
    }
}
