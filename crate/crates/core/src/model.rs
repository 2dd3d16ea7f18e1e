//! The predictor `f = h ∘ e`: a ReLU MLP feature extractor followed by a
//! linear classification head, plus the ID and OOD training losses.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{logsumexp_slice, matmul, DenseTensor, Gradients, NumericsError, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input has {got} columns, model expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Layer widths of the network.
///
/// `extractor_widths` lists the output width of each extractor layer; its last
/// entry is the embedding dimension. An empty list is the identity extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub extractor_widths: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: usize,
        num_classes: usize,
    ) -> Self {
        let mut extractor_widths = hidden.to_vec();
        extractor_widths.push(embedding_dim);
        Self {
            input_dim,
            extractor_widths,
            num_classes,
        }
    }

    /// No extractor layers: the embedding is the raw input.
    pub fn identity_extractor(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            extractor_widths: Vec::new(),
            num_classes,
        }
    }

    /// 2 → 64 → 64 → 8 → C.
    pub fn desk_default(num_classes: usize) -> Self {
        Self::new(2, &[64, 64], 8, num_classes)
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor_widths
            .last()
            .copied()
            .unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.extractor_widths.contains(&0) {
            return Err(ModelError::Architecture("zero-width layer".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Architecture("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Weight (`fan_in × fan_out`) and bias of one affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

impl Layer {
    fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseTensor::zeros(self.weight.shape().to_vec()),
            bias: DenseTensor::zeros(self.bias.shape().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub extractor: Vec<Layer>,
    pub head: Layer,
}

/// Per-example embeddings `e(x)`, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(pub DenseTensor);

impl EmbeddingBatch {
    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.0
    }
}

/// Parameter leaves registered on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    extractor: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl ModelParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights and zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Layer {
                weight: DenseTensor::from_parts_unchecked(vec![fan_in, fan_out], w),
                bias: DenseTensor::zeros(vec![fan_out]),
            }
        };
        let mut fan_in = arch.input_dim;
        let mut extractor = Vec::with_capacity(arch.extractor_widths.len());
        for &w in &arch.extractor_widths {
            extractor.push(layer(fan_in, w));
            fan_in = w;
        }
        let head = layer(fan_in, arch.num_classes);
        Ok(Self {
            arch: arch.clone(),
            extractor,
            head,
        })
    }

    /// Assembles parameters from explicit layers, checking shapes and finiteness.
    pub fn from_layers(
        arch: Architecture,
        extractor: Vec<Layer>,
        head: Layer,
    ) -> Result<Self, ModelError> {
        let p = Self {
            arch,
            extractor,
            head,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        if self.extractor.len() != self.arch.extractor_widths.len() {
            return Err(ModelError::Architecture(
                "layer count does not match architecture".into(),
            ));
        }
        let mut fan_in = self.arch.input_dim;
        for (layer, &w) in self.layers().zip(
            self.arch
                .extractor_widths
                .iter()
                .chain([&self.arch.num_classes]),
        ) {
            let shape_ok = layer.weight.shape() == [fan_in, w] && layer.bias.shape() == [w];
            if !shape_ok {
                return Err(ModelError::Architecture(format!(
                    "layer expected {fan_in}x{w}, got {:?} / bias {:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
            fan_in = w;
        }
        if self.layers().any(|l| {
            l.weight
                .data()
                .iter()
                .chain(l.bias.data())
                .any(|v| !v.is_finite())
        }) {
            return Err(NumericsError::NonFinite("model parameters").into());
        }
        Ok(())
    }

    /// Extractor layers followed by the head.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            extractor: self.extractor.iter().map(Layer::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// `self += scale * other` over every parameter.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<(), ModelError> {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.axpy(scale, &b.weight)?;
            a.bias.axpy(scale, &b.bias)?;
        }
        Ok(())
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers()
            .zip(other.layers())
            .map(|(a, b)| {
                a.weight
                    .max_abs_diff(&b.weight)
                    .max(a.bias.max_abs_diff(&b.bias))
            })
            .fold(0.0, f64::max)
    }

    /// Euclidean distance between two parameter vectors.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten): the same architecture filled
    /// with `flat` in layer order, weights before biases.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != self.num_parameters() {
            return Err(NumericsError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            ))
            .into());
        }
        let mut rest = flat;
        let mut take = |t: &DenseTensor| -> Result<DenseTensor, ModelError> {
            let (head, tail) = rest.split_at(t.len());
            rest = tail;
            Ok(DenseTensor::new(t.shape().to_vec(), head.to_vec())?)
        };
        let mut layer = |l: &Layer| -> Result<Layer, ModelError> {
            Ok(Layer {
                weight: take(&l.weight)?,
                bias: take(&l.bias)?,
            })
        };
        let extractor = self
            .extractor
            .iter()
            .map(&mut layer)
            .collect::<Result<Vec<_>, _>>()?;
        let head = layer(&self.head)?;
        Ok(Self {
            arch: self.arch.clone(),
            extractor,
            head,
        })
    }

    fn check_input(&self, x: &DenseTensor) -> Result<(), ModelError> {
        let (_, c) = x.dims2()?;
        if c != self.arch.input_dim {
            return Err(ModelError::InputDim {
                got: c,
                want: self.arch.input_dim,
            });
        }
        Ok(())
    }

    /// `e(x)` for a batch of inputs.
    pub fn extract(&self, x: &DenseTensor) -> Result<EmbeddingBatch, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        if h.shape().len() == 1 {
            h = DenseTensor::matrix(1, h.len(), h.into_data())?;
        }
        for layer in &self.extractor {
            h = affine(&h, layer)?;
            for v in h.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(EmbeddingBatch(h))
    }

    /// Head logits `h(emb)`, shape `batch × C`.
    pub fn classify(&self, emb: &EmbeddingBatch) -> Result<DenseTensor, ModelError> {
        if emb.dim() != self.arch.embedding_dim() {
            return Err(NumericsError::Shape(format!(
                "embedding dim {} vs head input {}",
                emb.dim(),
                self.arch.embedding_dim()
            ))
            .into());
        }
        Ok(affine(&emb.0, &self.head)?)
    }

    pub fn logits(&self, x: &DenseTensor) -> Result<DenseTensor, ModelError> {
        self.classify(&self.extract(x)?)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let extractor = self
            .extractor
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        let head = (
            tape.param(self.head.weight.clone()),
            tape.param(self.head.bias.clone()),
        );
        ParamVars { extractor, head }
    }

    /// Registers every parameter as a constant (no gradient).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        let extractor = self
            .extractor
            .iter()
            .map(|l| {
                (
                    tape.constant(l.weight.clone()),
                    tape.constant(l.bias.clone()),
                )
            })
            .collect();
        let head = (
            tape.constant(self.head.weight.clone()),
            tape.constant(self.head.bias.clone()),
        );
        ParamVars { extractor, head }
    }

    pub fn extract_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
    ) -> Result<Var, ModelError> {
        self.check_input(tape.value(x)?)?;
        let mut h = x;
        for &(w, b) in &vars.extractor {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    pub fn classify_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        emb: Var,
    ) -> Result<Var, ModelError> {
        let (w, b) = vars.head;
        let z = tape.matmul(emb, w)?;
        Ok(tape.add_bias(z, b)?)
    }

    /// Collects parameter gradients into a `ModelParams`-shaped container;
    /// parameters the root does not depend on get zeros.
    pub fn gradients(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        grads: &Gradients,
    ) -> Result<Self, ModelError> {
        let get = |v: Var| grads.wrt(tape, v);
        let extractor = vars
            .extractor
            .iter()
            .map(|&(w, b)| {
                Ok(Layer {
                    weight: get(w)?,
                    bias: get(b)?,
                })
            })
            .collect::<Result<Vec<_>, NumericsError>>()?;
        let head = Layer {
            weight: get(vars.head.0)?,
            bias: get(vars.head.1)?,
        };
        Ok(Self {
            arch: self.arch.clone(),
            extractor,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            layers: self
                .layers()
                .map(|l| CheckpointLayer {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        if ck.layers.len() != ck.arch.extractor_widths.len() + 1 {
            return Err(ModelError::Checkpoint(
                "layer count does not match architecture".into(),
            ));
        }
        let mut layers = ck
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weight: DenseTensor::matrix(l.fan_in, l.fan_out, l.weight.clone())?,
                    bias: DenseTensor::vector(l.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let head = layers.pop().expect("non-empty");
        Self::from_layers(ck.arch.clone(), layers, head)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

/// On-disk model document. Floats are written in shortest round-trip form,
/// so reading a checkpoint back is value-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Architecture,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in × fan_out`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn affine(x: &DenseTensor, layer: &Layer) -> Result<DenseTensor, NumericsError> {
    let mut z = matmul(x, &layer.weight)?;
    let c = z.cols();
    for row in z.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(layer.bias.data()) {
            *v += b;
        }
    }
    Ok(z)
}

fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<(), ModelError> {
    if labels.len() != rows {
        return Err(
            NumericsError::Shape(format!("{} labels for {rows} rows", labels.len())).into(),
        );
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(NumericsError::Label { label: y, classes }.into());
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn id_loss(logits: &DenseTensor, labels: &[usize]) -> Result<f64, ModelError> {
    let (r, c) = logits.dims2()?;
    check_labels(r, c, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += logsumexp_slice(row)? - row[y];
    }
    Ok(total / r as f64)
}

/// Per-example `KL(U || softmax(z))`.
pub fn oe_loss_rows(logits: &DenseTensor) -> Result<Vec<f64>, ModelError> {
    let (_, c) = logits.dims2()?;
    if c < 2 {
        return Err(ModelError::Architecture(
            "uniform KL needs at least two classes".into(),
        ));
    }
    let ln_c = (c as f64).ln();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            Ok((logsumexp_slice(row)? - mean - ln_c).max(0.0))
        })
        .collect()
}

/// Mean `KL(U || softmax(z))` over the batch; zero iff every row is constant.
pub fn oe_loss(logits: &DenseTensor) -> Result<f64, ModelError> {
    let rows = oe_loss_rows(logits)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Tape version of [`id_loss`].
pub fn id_loss_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let rows = tape.softmax_xent_rows(logits, labels)?;
    Ok(tape.mean(rows)?)
}

/// Tape version of [`oe_loss`].
pub fn oe_loss_on_tape(tape: &mut Tape, logits: Var) -> Result<Var, ModelError> {
    let rows = tape.uniform_kl_rows(logits)?;
    Ok(tape.mean(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn m(r: usize, c: usize, d: Vec<f64>) -> DenseTensor {
        DenseTensor::matrix(r, c, d).unwrap()
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let p = ModelParams::init(&Architecture::identity_extractor(3, 2), 1).unwrap();
        let x = m(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]);
        assert_eq!(p.extract(&x).unwrap().0, x);
    }

    #[test]
    fn head_examples() {
        let arch = Architecture::identity_extractor(2, 2);
        let mut p = ModelParams::init(&arch, 0).unwrap();
        p.head.weight = DenseTensor::identity(2);
        let emb = EmbeddingBatch(m(1, 2, vec![1.0, 0.0]));
        assert_eq!(p.classify(&emb).unwrap().data(), &[1.0, 0.0]);

        p.head.weight = DenseTensor::zeros(vec![2, 2]);
        p.head.bias = DenseTensor::vector(vec![3.0, -1.0]).unwrap();
        let emb = EmbeddingBatch(m(2, 2, vec![7.0, -4.0, 0.1, 9.0]));
        assert_eq!(p.classify(&emb).unwrap().data(), &[3.0, -1.0, 3.0, -1.0]);
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::init(&Architecture::desk_default(3), 0).unwrap();
        assert!(matches!(
            p.extract(&m(1, 3, vec![0.0; 3])),
            Err(ModelError::InputDim { got: 3, want: 2 })
        ));
        assert!(p.classify(&EmbeddingBatch(m(1, 4, vec![0.0; 4]))).is_err());
        assert!(ModelParams::init(&Architecture::new(2, &[0], 8, 3), 0).is_err());
    }

    #[test]
    fn id_loss_examples() {
        assert!((id_loss(&m(1, 2, vec![0.0, 0.0]), &[0]).unwrap() - LN_2).abs() < 1e-15);
        assert!(id_loss(&m(1, 2, vec![50.0, 0.0]), &[0]).unwrap().abs() < 1e-12);
        let want = 2.0 + (1.0 + (-2.0f64).exp()).ln();
        let got = id_loss(&m(1, 2, vec![2.0, 0.0]), &[1]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 2.126928).abs() < 1e-6);
        assert!(id_loss(&m(1, 2, vec![0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn oe_loss_examples() {
        assert_eq!(oe_loss(&m(1, 2, vec![0.0, 0.0])).unwrap(), 0.0);
        assert!(oe_loss(&m(1, 3, vec![4.2, 4.2, 4.2])).unwrap().abs() < 1e-12);
        let l0 = (1.0 + (-2.0f64).exp()).ln();
        let want = 0.5 * (l0 + 2.0 + l0) - LN_2;
        let got = oe_loss(&m(1, 2, vec![2.0, 0.0])).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.433781).abs() < 1e-6);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = Architecture::desk_default(4);
        let a = ModelParams::init(&arch, 11).unwrap();
        assert_eq!(a, ModelParams::init(&arch, 11).unwrap());
        assert_ne!(a, ModelParams::init(&arch, 12).unwrap());
        for l in a.layers() {
            let bound = 1.0 / (l.fan_in() as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = ModelParams::init(&Architecture::desk_default(4), 3).unwrap();
        let back = ModelParams::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn checkpoint_rejects_bad_version() {
        let p = ModelParams::init(&Architecture::desk_default(2), 3).unwrap();
        let mut ck = p.to_checkpoint();
        ck.format_version = 99;
        assert!(ModelParams::from_checkpoint(&ck).is_err());
    }
}
