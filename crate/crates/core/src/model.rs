//! Per-modality encoders into the common space and the shared classifier.
//!
//! Every encoder is a two-layer perceptron `input -> hidden -> embed` with a
//! ReLU in between. Point-set modalities apply the same perceptron to each
//! point and max-pool the per-point outputs coordinate-wise. The classifier
//! head `embed -> head_hidden -> classes` exists once and is shared by all
//! modalities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Instance, ModalityKind, ModalitySpec, Sample, SetSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden_dim: 128,
            embed_dim: 32,
            head_hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform weights in `+-sqrt(6 / fan_in)`, zero bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, weights).expect("sizes match"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn zeroed(&self) -> Self {
        Linear {
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub modality: usize,
    pub spec: ModalitySpec,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedHeadParams<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub num_classes: usize,
    pub seed: u64,
    pub encoders: Vec<EncoderParams<T>>,
    pub head: SharedHeadParams<T>,
}

/// Tape handles for one layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

/// A model's parameters recorded on a tape, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoders: Vec<BoundEncoder>,
    pub head: BoundHead,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend([e.fc1.weight, e.fc1.bias, e.fc2.weight, e.fc2.bias]);
        }
        out.extend([
            self.head.fc1.weight,
            self.head.fc1.bias,
            self.head.fc2.weight,
            self.head.fc2.bias,
        ]);
        out
    }
}

fn bind_linear<T: Scalar>(tape: &mut Tape<T>, l: &Linear<T>) -> BoundLinear {
    BoundLinear {
        weight: tape.param(&l.weight),
        bias: tape.param(&l.bias),
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, l: BoundLinear) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_bias(y, l.bias)
}

fn perceptron<T: Scalar>(tape: &mut Tape<T>, x: Var, fc1: BoundLinear, fc2: BoundLinear) -> Result<Var> {
    let h = linear(tape, x, fc1)?;
    let h = tape.relu(h)?;
    linear(tape, h, fc2)
}

/// Projects a `[n x input_dim]` batch of vector samples to `[n x embed]`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, enc: &BoundEncoder, inputs: Var) -> Result<Var> {
    perceptron(tape, inputs, enc.fc1, enc.fc2)
}

/// Embeds consecutive point sets stacked in `points` (`segment_lens[s]`
/// rows each): per-point perceptron, then coordinate-wise max per set.
pub fn encode_set<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &BoundEncoder,
    points: Var,
    segment_lens: &[usize],
) -> Result<Var> {
    if segment_lens.is_empty() || segment_lens.contains(&0) {
        return Err(Error::contract("encode_set needs at least one point per set"));
    }
    let per_point = perceptron(tape, points, enc.fc1, enc.fc2)?;
    tape.segment_max(per_point, segment_lens)
}

/// Log-probabilities over the classes for a `[n x embed]` batch.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, head: &BoundHead, embeddings: Var) -> Result<Var> {
    let logits = perceptron(tape, embeddings, head.fc1, head.fc2)?;
    tape.log_softmax(logits)
}

/// Stacked input of one modality for a batch of instances.
#[derive(Clone, Debug)]
pub enum ModalityInput<T> {
    Vectors(Tensor<T>),
    Points {
        points: Tensor<T>,
        segment_lens: Vec<usize>,
    },
}

impl<T: Scalar> Model<T> {
    pub fn init(specs: &[ModalitySpec], num_classes: usize, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        if specs.is_empty() {
            return Err(Error::contract("model needs at least one modality"));
        }
        if num_classes < 2 {
            return Err(Error::contract("classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = specs
            .iter()
            .enumerate()
            .map(|(m, spec)| EncoderParams {
                modality: m,
                spec: spec.clone(),
                fc1: Linear::init(&mut rng, spec.dim, dims.hidden_dim),
                fc2: Linear::init(&mut rng, dims.hidden_dim, dims.embed_dim),
            })
            .collect();
        let head = SharedHeadParams {
            fc1: Linear::init(&mut rng, dims.embed_dim, dims.head_hidden),
            fc2: Linear::init(&mut rng, dims.head_hidden, num_classes),
        };
        Ok(Model {
            dims,
            num_classes,
            seed,
            encoders,
            head,
        })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        Model {
            dims: self.dims,
            num_classes: self.num_classes,
            seed: self.seed,
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    modality: e.modality,
                    spec: e.spec.clone(),
                    fc1: e.fc1.zeroed(),
                    fc2: e.fc2.zeroed(),
                })
                .collect(),
            head: SharedHeadParams {
                fc1: self.head.fc1.zeroed(),
                fc2: self.head.fc2.zeroed(),
            },
        }
    }

    pub fn specs(&self) -> Vec<ModalitySpec> {
        self.encoders.iter().map(|e| e.spec.clone()).collect()
    }

    /// Parameters keyed `<modality>/<layer>/<weight|bias>` and
    /// `head/<layer>/<weight|bias>`, encoders first.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        fn push<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, layer: &str, l: &'a Linear<T>) {
            out.push((format!("{prefix}/{layer}/weight"), &l.weight));
            out.push((format!("{prefix}/{layer}/bias"), &l.bias));
        }
        let mut out = Vec::new();
        for e in &self.encoders {
            push(&mut out, &e.spec.name, "fc1", &e.fc1);
            push(&mut out, &e.spec.name, "fc2", &e.fc2);
        }
        push(&mut out, "head", "fc1", &self.head.fc1);
        push(&mut out, "head", "fc2", &self.head.fc2);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend([&mut e.fc1.weight, &mut e.fc1.bias, &mut e.fc2.weight, &mut e.fc2.bias]);
        }
        out.extend([
            &mut self.head.fc1.weight,
            &mut self.head.fc1.bias,
            &mut self.head.fc2.weight,
            &mut self.head.fc2.bias,
        ]);
        out
    }

    /// Which entries of [`Model::params`] are weight matrices (not biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        self.params().iter().map(|(k, _)| k.ends_with("/weight")).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let encoders = self
            .encoders
            .iter()
            .map(|e| BoundEncoder {
                fc1: bind_linear(tape, &e.fc1),
                fc2: bind_linear(tape, &e.fc2),
            })
            .collect();
        let head = BoundHead {
            fc1: bind_linear(tape, &self.head.fc1),
            fc2: bind_linear(tape, &self.head.fc2),
        };
        BoundModel { encoders, head }
    }

    /// Stacks modality `m` of the given instances into one tape input.
    pub fn stack_inputs(&self, m: usize, instances: &[&Instance<T>]) -> Result<ModalityInput<T>> {
        let spec = &self.encoders[m].spec;
        let mismatch = |actual| Error::ModalityDim {
            modality: spec.name.clone(),
            expected: spec.dim,
            actual,
        };
        if instances.is_empty() {
            return Err(Error::contract("cannot stack an empty batch"));
        }
        match spec.kind {
            ModalityKind::Vector => {
                let mut values = Vec::with_capacity(instances.len() * spec.dim);
                for inst in instances {
                    match inst.samples.get(m) {
                        Some(Sample::Vector(v)) if v.len() == spec.dim => values.extend_from_slice(v),
                        Some(s) => return Err(mismatch(s.dim())),
                        None => return Err(Error::contract(format!("instance {} lacks modality {m}", inst.id))),
                    }
                }
                Ok(ModalityInput::Vectors(Tensor::matrix(
                    instances.len(),
                    spec.dim,
                    values,
                )?))
            }
            ModalityKind::PointSet => {
                let mut values = Vec::new();
                let mut segment_lens = Vec::with_capacity(instances.len());
                for inst in instances {
                    match inst.samples.get(m) {
                        Some(Sample::Points(set)) if set.point_dim() == spec.dim => {
                            values.extend_from_slice(set.values());
                            segment_lens.push(set.n_points());
                        }
                        Some(s) => return Err(mismatch(s.dim())),
                        None => return Err(Error::contract(format!("instance {} lacks modality {m}", inst.id))),
                    }
                }
                let rows = segment_lens.iter().sum();
                Ok(ModalityInput::Points {
                    points: Tensor::matrix(rows, spec.dim, values)?,
                    segment_lens,
                })
            }
        }
    }

    /// Embeds a stacked modality input on the tape.
    pub fn forward_modality(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        m: usize,
        input: ModalityInput<T>,
    ) -> Result<Var> {
        let enc = &bound.encoders[m];
        match input {
            ModalityInput::Vectors(x) => {
                let x = tape.constant(x);
                encode(tape, enc, x)
            }
            ModalityInput::Points { points, segment_lens } => {
                let p = tape.constant(points);
                encode_set(tape, enc, p, &segment_lens)
            }
        }
    }

    /// `[n x embed]` embeddings of modality `m` for a batch of instances.
    pub fn embed_batch(&self, m: usize, instances: &[&Instance<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = self.stack_inputs(m, instances)?;
        let v = self.forward_modality(&mut tape, &bound, m, input)?;
        Ok(tape.value(v).clone().with_requires_grad(false))
    }

    /// Embeds one vector sample of modality `m`.
    pub fn encode(&self, m: usize, sample: &[T]) -> Result<Tensor<T>> {
        let spec = self.spec(m)?;
        if spec.kind != ModalityKind::Vector || sample.len() != spec.dim {
            return Err(Error::ModalityDim {
                modality: spec.name.clone(),
                expected: spec.dim,
                actual: sample.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(Tensor::vector(sample.to_vec()));
        let v = encode(&mut tape, &bound.encoders[m], x)?;
        Ok(tape.value(v).clone().with_requires_grad(false))
    }

    /// Embeds one point set of modality `m`.
    pub fn encode_set(&self, m: usize, sample: &SetSample<T>) -> Result<Tensor<T>> {
        let spec = self.spec(m)?;
        if spec.kind != ModalityKind::PointSet || sample.point_dim() != spec.dim {
            return Err(Error::ModalityDim {
                modality: spec.name.clone(),
                expected: spec.dim,
                actual: sample.point_dim(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let p = tape.constant(Tensor::matrix(sample.n_points(), spec.dim, sample.values().to_vec())?);
        let v = encode_set(&mut tape, &bound.encoders[m], p, &[sample.n_points()])?;
        let out = tape.value(v);
        Ok(Tensor::vector(out.values().to_vec()))
    }

    /// Log-probabilities for one embedding.
    pub fn classify(&self, embedding: &[T]) -> Result<Tensor<T>> {
        if embedding.len() != self.dims.embed_dim {
            return Err(Error::Shape {
                op: "classify",
                left: vec![self.dims.embed_dim],
                right: vec![embedding.len()],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = tape.constant(Tensor::matrix(1, embedding.len(), embedding.to_vec())?);
        let lp = classify(&mut tape, &bound.head, v)?;
        Ok(Tensor::vector(tape.value(lp).values().to_vec()))
    }

    fn spec(&self, m: usize) -> Result<&ModalitySpec> {
        self.encoders
            .get(m)
            .map(|e| &e.spec)
            .ok_or_else(|| Error::contract(format!("no modality with index {m}")))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cl = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Model {
            dims: self.dims,
            num_classes: self.num_classes,
            seed: self.seed,
            encoders: self
                .encoders
                .iter()
                .map(|e| EncoderParams {
                    modality: e.modality,
                    spec: e.spec.clone(),
                    fc1: cl(&e.fc1),
                    fc2: cl(&e.fc2),
                })
                .collect(),
            head: SharedHeadParams {
                fc1: cl(&self.head.fc1),
                fc2: cl(&self.head.fc2),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// On-disk checkpoint: a JSON object with dims, seed, modality specs and
/// every parameter tensor keyed by its [`Model::params`] name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    scalar: String,
    seed: u64,
    num_classes: usize,
    dims: ModelDims,
    modalities: Vec<ModalitySpec>,
    tensors: BTreeMap<String, StoredTensor>,
}

const CHECKPOINT_FORMAT: &str = "crossmodal-checkpoint/1";

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint_json(&self) -> String {
        let tensors = self
            .params()
            .into_iter()
            .map(|(k, t)| {
                (
                    k,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            scalar: T::NAME.into(),
            seed: self.seed,
            num_classes: self.num_classes,
            dims: self.dims,
            modalities: self.specs(),
            tensors,
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str, path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| fmt_err(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(fmt_err(format!("unsupported checkpoint format `{}`", ckpt.format)));
        }
        let mut model = Model::<T>::init(&ckpt.modalities, ckpt.num_classes, ckpt.dims, ckpt.seed)?;
        let keys: Vec<String> = model.params().into_iter().map(|(k, _)| k).collect();
        if keys.len() != ckpt.tensors.len() {
            return Err(fmt_err(format!(
                "expected {} tensors, found {}",
                keys.len(),
                ckpt.tensors.len()
            )));
        }
        for (key, slot) in keys.iter().zip(model.params_mut()) {
            let stored = ckpt
                .tensors
                .get(key)
                .ok_or_else(|| fmt_err(format!("missing tensor `{key}`")))?;
            if stored.shape != slot.shape() {
                return Err(fmt_err(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            let values: Vec<T> = stored.values.iter().map(|&v| T::from_f64_lossy(v)).collect();
            *slot = Tensor::new(stored.shape.clone(), values).map_err(|e| fmt_err(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text, path)
    }
}
