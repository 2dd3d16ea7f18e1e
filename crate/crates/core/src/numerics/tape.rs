//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value; inputs always precede
//! the node that consumes them, so a single reverse sweep over node indices
//! is a valid topological order and visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{check_finite, logsumexp_slice, matmul, DenseTensor};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Matrix plus a row vector broadcast over rows.
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    /// Per-row l1 norm, `[n, k] -> [n]`.
    L1Rows(usize),
    /// Per-row log-sum-exp, `[n, k] -> [n]`.
    LogSumExpRows(usize),
    /// Per-row `-log softmax_label`, `[n, k] -> [n]`.
    SoftmaxXentRows(usize, Vec<usize>),
    /// Per-row `KL(uniform || softmax)`, `[n, k] -> [n]`.
    UniformKlRows(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L1Rows(..) => "l1_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SoftmaxXentRows(..) => "softmax_xent_rows",
            Op::UniformKlRows(..) => "uniform_kl_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct TapeNode {
    op: Op,
    value: DenseTensor,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<TapeNode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
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

    /// Differentiable leaf (parameters, perturbations).
    pub fn param(&mut self, value: DenseTensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> Result<&DenseTensor, NumericsError> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn push(&mut self, op: Op, value: DenseTensor, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::UnknownNode);
        }
        Ok(v.index)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn finish(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[usize],
    ) -> Result<Var, NumericsError> {
        check_finite(&data, op.name())?;
        let rg = self.rg(inputs);
        Ok(self.push(op, DenseTensor::from_parts_unchecked(shape, data), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let shape = out.shape().to_vec();
        self.finish(Op::MatMul(ia, ib), shape, out.into_data(), &[ia, ib])
    }

    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var, NumericsError> {
        let (im, ib) = (self.index(m)?, self.index(bias)?);
        let (r, c) = self.nodes[im].value.dims2()?;
        let b = &self.nodes[ib].value;
        if b.len() != c {
            return Err(NumericsError::Shape(format!(
                "add_bias: {c} columns, bias of {}",
                b.len()
            )));
        }
        let mut data = self.nodes[im].value.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        self.finish(Op::AddBias(im, ib), vec![r, c], data, &[im, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let shape = out.shape().to_vec();
        self.finish(Op::Add(ia, ib), shape, out.into_data(), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(NumericsError::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        self.finish(Op::Mul(ia, ib), shape, data, &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let data = v.data().iter().map(|x| x * s).collect();
        let shape = v.shape().to_vec();
        self.finish(Op::Scale(ia, s), shape, data, &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let data = v
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = v.shape().to_vec();
        self.finish(Op::Relu(ia), shape, data, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.finish(Op::Sum(ia), Vec::new(), vec![s], &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.finish(Op::Mean(ia), Vec::new(), vec![s], &[ia])
    }

    pub fn l1_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = v.dims2()?;
        let data = v
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|x| x.abs()).sum())
            .collect();
        self.finish(Op::L1Rows(ia), vec![r], data, &[ia])
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = v.dims2()?;
        let data = v
            .data()
            .chunks(c)
            .map(logsumexp_slice)
            .collect::<Result<Vec<_>, _>>()?;
        self.finish(Op::LogSumExpRows(ia), vec![r], data, &[ia])
    }

    /// Per-example cross-entropy `logsumexp(z) - z_label`.
    pub fn softmax_xent_rows(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, NumericsError> {
        let ia = self.index(logits)?;
        let v = &self.nodes[ia].value;
        let (r, c) = v.dims2()?;
        if labels.len() != r {
            return Err(NumericsError::Shape(format!(
                "{} labels for {r} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(NumericsError::Label {
                label: bad,
                classes: c,
            });
        }
        let data = v
            .data()
            .chunks(c)
            .zip(labels)
            .map(|(row, &y)| logsumexp_slice(row).map(|l| l - row[y]))
            .collect::<Result<Vec<_>, _>>()?;
        self.finish(
            Op::SoftmaxXentRows(ia, labels.to_vec()),
            vec![r],
            data,
            &[ia],
        )
    }

    /// Per-example `KL(U || softmax(z)) = logsumexp(z) - mean_k z_k - ln C`.
    pub fn uniform_kl_rows(&mut self, logits: Var) -> Result<Var, NumericsError> {
        let ia = self.index(logits)?;
        let v = &self.nodes[ia].value;
        let (r, c) = v.dims2()?;
        if c < 2 {
            return Err(NumericsError::Shape(
                "uniform KL needs at least two classes".into(),
            ));
        }
        let ln_c = (c as f64).ln();
        let data = v
            .data()
            .chunks(c)
            .map(|row| {
                let mean = row.iter().sum::<f64>() / c as f64;
                logsumexp_slice(row).map(|l| (l - mean - ln_c).max(0.0))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.finish(Op::UniformKlRows(ia), vec![r], data, &[ia])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let root = self.index(root)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(NumericsError::NotScalar(
                self.nodes[root].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            check_finite(&g, "backward")?;
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(DenseTensor::from_parts_unchecked(
                    n.value.shape().to_vec(),
                    g,
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let mut acc = |j: usize, contrib: Vec<f64>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = va.dims2()?;
                let (_, m) = vb.dims2()?;
                if self.nodes[*a].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &vb.data()[p * m..(p + 1) * m];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::AddBias(m, b) => {
                let c = self.nodes[*b].value.len();
                acc(*m, g.to_vec());
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Relu(a) => {
                let va = self.nodes[*a].value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[*a].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::L1Rows(a) => {
                let va = &self.nodes[*a].value;
                let c = va.cols();
                let d = va
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| g[idx / c] * sign0(v))
                    .collect();
                acc(*a, d);
            }
            Op::LogSumExpRows(a) => {
                let d = softmax_weighted(&self.nodes[*a].value, g, |_, _| 0.0)?;
                acc(*a, d);
            }
            Op::SoftmaxXentRows(a, labels) => {
                let d = softmax_weighted(&self.nodes[*a].value, g, |r, k| {
                    if labels[r] == k {
                        1.0
                    } else {
                        0.0
                    }
                })?;
                acc(*a, d);
            }
            Op::UniformKlRows(a) => {
                let c = self.nodes[*a].value.cols() as f64;
                let d = softmax_weighted(&self.nodes[*a].value, g, |_, _| 1.0 / c)?;
                acc(*a, d);
            }
        }
        Ok(())
    }
}

/// `g_r * (softmax(z_r)_k - target(r, k))` for each row `r`.
fn softmax_weighted(
    z: &DenseTensor,
    g: &[f64],
    target: impl Fn(usize, usize) -> f64,
) -> Result<Vec<f64>, NumericsError> {
    let (r, c) = z.dims2()?;
    let mut out = Vec::with_capacity(r * c);
    for (ri, row) in z.data().chunks(c).enumerate() {
        let lse = logsumexp_slice(row)?;
        out.extend(
            row.iter()
                .enumerate()
                .map(|(k, x)| g[ri] * ((x - lse).exp() - target(ri, k))),
        );
    }
    Ok(out)
}

/// Subgradient of `|x|`, with 0 at the kink.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is differentiable and
    /// reachable from the root.
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable differentiable nodes.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<DenseTensor, NumericsError> {
        let shape = tape.value(v)?.shape().to_vec();
        Ok(self
            .get(v)
            .cloned()
            .unwrap_or_else(|| DenseTensor::zeros(shape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> DenseTensor {
        DenseTensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_and_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(DenseTensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).unwrap().item().unwrap(), 9.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn identity_linear_layer() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.param(DenseTensor::identity(2));
        let b = tape.param(DenseTensor::zeros(vec![2]));
        let h = tape.matmul(x, w).unwrap();
        let y = tape.add_bias(h, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn xent_gradient_at_zero_logits() {
        let mut tape = Tape::new();
        let z = tape.param(t(vec![1, 2], vec![0.0, 0.0]));
        let l = tape.softmax_xent_rows(z, &[0]).unwrap();
        let m = tape.mean(l).unwrap();
        let g = tape.backward(m).unwrap();
        let gz = g.get(z).unwrap().data();
        assert!((gz[0] + 0.5).abs() < 1e-15 && (gz[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let v = tape.param(t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(NumericsError::NotScalar(_))));

        let other = Tape::new();
        assert!(matches!(other.backward(v), Err(NumericsError::UnknownNode)));
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.param(t(vec![1, 2], vec![0.0, 0.0]));
        assert!(matches!(
            tape.softmax_xent_rows(z, &[2]),
            Err(NumericsError::Label {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn l1_subgradient_zero_at_kink() {
        let mut tape = Tape::new();
        let p = tape.param(t(vec![1, 3], vec![0.0, -2.0, 0.5]));
        let n = tape.l1_rows(p).unwrap();
        let s = tape.sum(n).unwrap();
        assert_eq!(tape.value(s).unwrap().item().unwrap(), 2.5);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        // f = sum(x + x) -> df/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![1.0, -1.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(vec![2], vec![1.0, 2.0]));
        let x = tape.param(t(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
