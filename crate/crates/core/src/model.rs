//! Shared MLP backbone, linear classifier, and projection head.
//!
//! Parameters live as plain tensors in [`ModelParams`]. For a training step
//! they are bound onto a [`Tape`] as leaves ([`ModelParams::bind`]), which
//! yields a [`BoundModel`] whose forward passes are differentiable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::container::{self, ArrayData, ContainerKind, NamedArray};
use crate::data::DataError;
use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of each backbone layer. Empty means an identity backbone.
    pub backbone_widths: Vec<usize>,
    pub classes: usize,
    /// Output width of the projection head; its hidden width equals the
    /// embedding width.
    pub projection_dim: usize,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 {
            return bad("input dimension must be >= 1");
        }
        if self.backbone_widths.contains(&0) {
            return bad("backbone layer widths must be >= 1");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.projection_dim == 0 {
            return bad("projection dimension must be >= 1");
        }
        Ok(())
    }
}

/// `y = x · Wᵀ + b`, weight shaped `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = glorot_limit(fan_in, fan_out);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor::new(&[fan_out, fan_in], w).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Half-width of the uniform init range, `√(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: Vec<Linear>,
    pub classifier: Linear,
    pub projection_hidden: Linear,
    pub projection_out: Linear,
}

/// Uniform fan-based weights, zero biases, deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Vec::new();
    let mut width = config.input_dim;
    for &w in &config.backbone_widths {
        backbone.push(Linear::init(&mut rng, width, w));
        width = w;
    }
    let e = config.embed_dim();
    Ok(ModelParams {
        config: config.clone(),
        backbone,
        classifier: Linear::init(&mut rng, e, config.classes),
        projection_hidden: Linear::init(&mut rng, e, e),
        projection_out: Linear::init(&mut rng, e, config.projection_dim),
    })
}

impl ModelParams {
    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), l))
            .collect();
        out.push(("classifier".into(), &self.classifier));
        out.push(("projection.hidden".into(), &self.projection_hidden));
        out.push(("projection.out".into(), &self.projection_out));
        out
    }

    /// Every parameter tensor with its name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weight), (format!("{name}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut().chain([
            &mut self.classifier,
            &mut self.projection_hidden,
            &mut self.projection_out,
        ]) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Whether each tensor from [`ModelParams::named_tensors`] is a bias.
    pub fn bias_mask(&self) -> Vec<bool> {
        self.named_tensors().iter().map(|(n, _)| n.ends_with(".bias")).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let bind = |l: &Linear| BoundLinear {
            weight: tape.var(l.weight.clone()),
            bias: tape.var(l.bias.clone()),
        };
        BoundModel {
            backbone: self.backbone.iter().map(bind).collect(),
            classifier: bind(&self.classifier),
            projection_hidden: bind(&self.projection_hidden),
            projection_out: bind(&self.projection_out),
            input_dim: self.config.input_dim,
        }
    }

    /// Backbone embeddings of a row-major batch, outside any training graph.
    pub fn embed(&self, features: &[f64], rows: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let m = self.bind(&tape);
        let x = tape.constant(Tensor::new(&[rows, self.config.input_dim], features.to_vec())?);
        Ok(m.backbone_forward(x)?.value())
    }

    /// Classifier logits `[rows, C]`, outside any training graph.
    pub fn logits(&self, features: &[f64], rows: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let m = self.bind(&tape);
        let x = tape.constant(Tensor::new(&[rows, self.config.input_dim], features.to_vec())?);
        let h = m.backbone_forward(x)?;
        Ok(m.classifier_forward(h)?.value())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays: Vec<NamedArray> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedArray::new(name, t.shape(), ArrayData::F64(t.data().to_vec())))
            .collect();
        std::fs::write(path, container::encode(ContainerKind::Checkpoint, &arrays)).map_err(|source| {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kind, arrays) = container::decode(bytes)?;
        if kind != ContainerKind::Checkpoint {
            return Err(DataError::Validation("file is a dataset, not a checkpoint".into()).into());
        }
        let tensor = |name: &str| -> Result<Tensor> {
            let a = container::find(&arrays, name)?;
            match &a.data {
                ArrayData::F64(v) => Ok(Tensor::new(&a.shape, v.clone())?),
                _ => Err(DataError::Validation(format!("`{name}` must be f64")).into()),
            }
        };
        let linear = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: tensor(&format!("{prefix}.weight"))?,
                bias: tensor(&format!("{prefix}.bias"))?,
            })
        };
        let depth = (0..)
            .take_while(|i| arrays.iter().any(|a| a.name == format!("backbone.{i}.weight")))
            .count();
        let backbone = (0..depth)
            .map(|i| linear(&format!("backbone.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let classifier = linear("classifier")?;
        let projection_hidden = linear("projection.hidden")?;
        let projection_out = linear("projection.out")?;
        let config = ModelConfig {
            input_dim: backbone.first().map_or(classifier.in_dim(), Linear::in_dim),
            backbone_widths: backbone.iter().map(Linear::out_dim).collect(),
            classes: classifier.out_dim(),
            projection_dim: projection_out.out_dim(),
        };
        config.validate()?;
        let params = Self {
            config,
            backbone,
            classifier,
            projection_hidden,
            projection_out,
        };
        // shapes must chain
        let expected = init_params(&params.config, 0)?;
        for ((name, a), (_, b)) in params.named_tensors().iter().zip(expected.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(DataError::Validation(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                ))
                .into());
            }
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(self.weight.transpose()?)?.add_row_vector(self.bias)?)
    }
}

/// Model parameters as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    pub backbone: Vec<BoundLinear<'t>>,
    pub classifier: BoundLinear<'t>,
    pub projection_hidden: BoundLinear<'t>,
    pub projection_out: BoundLinear<'t>,
    input_dim: usize,
}

impl<'t> BoundModel<'t> {
    /// Rebuilds a model from vars laid out like [`BoundModel::leaves`].
    pub fn from_vars(config: &ModelConfig, vars: &[Var<'t>]) -> Result<Self> {
        let depth = config.backbone_widths.len();
        let expected = 2 * (depth + 3);
        if vars.len() != expected {
            return Err(Error::Invalid(format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let lin = |i: usize| BoundLinear {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
        };
        Ok(Self {
            backbone: (0..depth).map(lin).collect(),
            classifier: lin(depth),
            projection_hidden: lin(depth + 1),
            projection_out: lin(depth + 2),
            input_dim: config.input_dim,
        })
    }

    /// Leaves in the same order as [`ModelParams::named_tensors`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.backbone
            .iter()
            .chain([&self.classifier, &self.projection_hidden, &self.projection_out])
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// `[B, input_dim] -> [B, e]`, each layer followed by relu.
    pub fn backbone_forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Invalid(format!(
                "backbone expects [B, {}] input, got {shape:?}",
                self.input_dim
            )));
        }
        let mut h = x;
        for layer in &self.backbone {
            h = layer.forward(h)?.relu()?;
        }
        Ok(h)
    }

    /// `[B, e] -> [B, C]`.
    pub fn classifier_forward(&self, embeddings: Var<'t>) -> Result<Var<'t>> {
        self.classifier.forward(embeddings)
    }

    /// `[B, e] -> [B, p]`: linear, relu, linear.
    pub fn projection_forward(&self, embeddings: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.projection_hidden.forward(embeddings)?.relu()?;
        self.projection_out.forward(hidden)
    }
}
