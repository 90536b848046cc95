//! Model configuration, variants and the full forward pass: encoders,
//! matching heads and the two-layer scorer.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EncodedCode, EncodedSeq, Field, SeqLengths};
use crate::encoder::{encode_code, encode_description, fan_in_bound, uniform, LINEAR_GAIN, RELU_GAIN, EncoderParams, FeatureMatrix};
use crate::matching::{relevance_match, semantic_match, PoolAxis};
use crate::tensor::{Gradients, Graph, ParamGroup, ParamId, ParamSet, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter `{name}` has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("parameter `{0}` is not part of this model")]
    UnexpectedParam(String),
}

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Relevance head only.
    Relevance,
    /// Semantic head only.
    Semantic,
    /// Method name as the only code field.
    NameOnly,
    /// API sequence as the only code field.
    ApiOnly,
    /// Body tokens as the only code field.
    TokensOnly,
    /// A single convolution width for every field.
    Conv(usize),
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::Relevance,
        Variant::Semantic,
        Variant::NameOnly,
        Variant::ApiOnly,
        Variant::TokensOnly,
        Variant::Conv(1),
        Variant::Conv(2),
        Variant::Conv(3),
    ];

    pub fn name(self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::Relevance => "RM".into(),
            Variant::Semantic => "SM".into(),
            Variant::NameOnly => "M".into(),
            Variant::ApiOnly => "A".into(),
            Variant::TokensOnly => "T".into(),
            Variant::Conv(h) => format!("Conv{h}"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "rm" | "rm-only" => Ok(Variant::Relevance),
            "sm" | "sm-only" => Ok(Variant::Semantic),
            "m" | "name" => Ok(Variant::NameOnly),
            "a" | "api" => Ok(Variant::ApiOnly),
            "t" | "tokens" => Ok(Variant::TokensOnly),
            "conv1" => Ok(Variant::Conv(1)),
            "conv2" => Ok(Variant::Conv(2)),
            "conv3" => Ok(Variant::Conv(3)),
            _ => Err(format!(
                "unknown variant `{s}` (expected one of full, RM, SM, M, A, T, Conv1, Conv2, Conv3)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub lengths: SeqLengths,
    pub code_vocab: usize,
    pub desc_vocab: usize,
    pub variant: Variant,
    pub pool_axis: PoolAxis,
}

impl ModelConfig {
    pub fn new(code_vocab: usize, desc_vocab: usize) -> Self {
        Self {
            dim: 100,
            hidden: 256,
            lengths: SeqLengths::default(),
            code_vocab,
            desc_vocab,
            variant: Variant::Full,
            pool_axis: PoolAxis::CodeColumn,
        }
    }

    pub fn code_fields(&self) -> Vec<Field> {
        match self.variant {
            Variant::NameOnly => vec![Field::Name],
            Variant::ApiOnly => vec![Field::Api],
            Variant::TokensOnly => vec![Field::Tokens],
            _ => vec![Field::Tokens, Field::Name, Field::Api],
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        match self.variant {
            Variant::Conv(h) => vec![h],
            _ => vec![1, 2, 3],
        }
    }

    pub fn uses_relevance(&self) -> bool {
        self.variant != Variant::Semantic
    }

    pub fn uses_semantic(&self) -> bool {
        self.variant != Variant::Relevance
    }

    fn field_len(&self, field: Field) -> usize {
        match field {
            Field::Desc => self.lengths.desc,
            Field::Name => self.lengths.name,
            Field::Api => self.lengths.api,
            Field::Tokens => self.lengths.tokens,
        }
    }

    /// Rows of `C`.
    pub fn code_rows(&self) -> usize {
        let l: usize = self.code_fields().into_iter().map(|f| self.field_len(f)).sum();
        l * self.widths().len()
    }

    /// Rows of `D`.
    pub fn desc_rows(&self) -> usize {
        self.lengths.desc * self.widths().len()
    }

    /// Length of each relevance feature vector.
    pub fn relevance_width(&self) -> usize {
        match self.pool_axis {
            PoolAxis::CodeColumn => self.code_rows(),
            PoolAxis::DescriptionRow => self.desc_rows(),
        }
    }

    /// Input width of the scorer's first layer.
    pub fn scorer_width(&self) -> usize {
        let rel = if self.uses_relevance() { 2 * self.relevance_width() } else { 0 };
        let sem = if self.uses_semantic() { 2 * self.dim } else { 0 };
        rel + sem
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let checks = [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("desc_len", self.lengths.desc),
            ("name_len", self.lengths.name),
            ("api_len", self.lengths.api),
            ("tokens_len", self.lengths.tokens),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(ModelError::Config(format!("`{name}` must be positive")));
            }
        }
        if self.code_vocab < 2 || self.desc_vocab < 2 {
            return Err(ModelError::Config("vocabularies must hold at least PAD and UNK".into()));
        }
        if let Variant::Conv(h) = self.variant {
            if !(1..=3).contains(&h) {
                return Err(ModelError::Config(format!("conv width {h} is not 1, 2 or 3")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ScorerParams {
    l1_weight: ParamId,
    l1_bias: ParamId,
    l2_weight: ParamId,
    l2_bias: ParamId,
}

/// Parameters plus the handles needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    encoder: EncoderParams,
    semantic_w: Option<ParamId>,
    scorer_ids: ScorerParams,
}

/// Dropout applied to the scorer input during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    /// Concatenated scorer input before dropout.
    pub features: Var,
}

pub fn p_match(logits: &[f64]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderParams::init(
            &mut params,
            config.dim,
            (config.code_vocab, config.desc_vocab),
            &config.code_fields(),
            &config.widths(),
            &mut rng,
        );
        let d = config.dim;
        let semantic_w = config.uses_semantic().then(|| {
            let bound = fan_in_bound(d, LINEAR_GAIN);
            params.add("semantic.w", ParamGroup::Semantic, uniform(&mut rng, vec![d, d], bound))
        });
        let (w_in, h) = (config.scorer_width(), config.hidden);
        let l1_weight = params.add(
            "scorer.l1.weight",
            ParamGroup::Scorer,
            uniform(&mut rng, vec![w_in, h], fan_in_bound(w_in, RELU_GAIN)),
        );
        let l1_bias = params.add("scorer.l1.bias", ParamGroup::Scorer, Tensor::zeros(vec![h]));
        let l2_weight = params.add(
            "scorer.l2.weight",
            ParamGroup::Scorer,
            uniform(&mut rng, vec![h, 2], fan_in_bound(h, LINEAR_GAIN)),
        );
        let l2_bias = params.add("scorer.l2.bias", ParamGroup::Scorer, Tensor::zeros(vec![2]));
        Ok(Self {
            config,
            params,
            encoder,
            semantic_w,
            scorer_ids: ScorerParams {
                l1_weight,
                l1_bias,
                l2_weight,
                l2_bias,
            },
        })
    }

    /// Builds a model for `config` from named tensors. Every expected name
    /// must be present with the expected shape and no extra names are allowed.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut model = Self::init(config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in named {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| ModelError::UnexpectedParam(name.clone()))?;
            let expected = model.params.get(id).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected,
                    found: tensor.shape().to_vec(),
                });
            }
            model.params.get_mut(id).data_mut().copy_from_slice(tensor.data());
            seen[id.index()] = true;
        }
        if let Some(id) = model.params.ids().find(|id| !seen[id.index()]) {
            return Err(ModelError::MissingParam(model.params.name(id).to_string()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            semantic_w: self.semantic_w,
            scorer_ids: self.scorer_ids,
        }
    }

    /// Matching heads and scorer on already encoded `D` and `C`.
    pub fn head(
        &self,
        g: &mut Graph<'_, T>,
        d: (Var, &[bool]),
        c: (Var, &[bool]),
        dropout: Option<Dropout<'_>>,
    ) -> Result<Forward, ModelError> {
        let (dv, dm) = d;
        let (cv, cm) = c;
        let mut parts = Vec::with_capacity(4);
        if self.config.uses_relevance() {
            let rel = relevance_match(g, dv, dm, cv, cm, self.config.pool_axis)?;
            parts.push(rel.max);
            parts.push(rel.mean);
        }
        if let Some(w) = self.semantic_w {
            let w = g.param(w);
            let sem = semantic_match(g, dv, dm, cv, cm, w)?;
            parts.push(sem.o_desc);
            parts.push(sem.o_code);
        }
        let features = g.concat(&parts)?;
        let o = match dropout {
            Some(Dropout { rate, rng }) => g.dropout(features, rate, true, rng)?,
            None => features,
        };
        let width = g.value(o).len();
        if width != self.config.scorer_width() {
            return Err(ModelError::Config(format!(
                "scorer input has width {width}, config expects {}",
                self.config.scorer_width()
            )));
        }
        let s = &self.scorer_ids;
        let row = g.reshape(o, vec![1, width])?;
        let w1 = g.param(s.l1_weight);
        let b1 = g.param(s.l1_bias);
        let h = g.matmul(row, w1)?;
        let h = g.add_row_vector(h, b1)?;
        let h = g.relu(h);
        let w2 = g.param(s.l2_weight);
        let b2 = g.param(s.l2_bias);
        let z = g.matmul(h, w2)?;
        let z = g.add_row_vector(z, b2)?;
        let logits = g.reshape(z, vec![2])?;
        Ok(Forward { logits, features })
    }

    /// Full forward pass from ids.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        desc: &EncodedSeq,
        code: &EncodedCode,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Forward, ModelError> {
        let (d, dm) = encode_description(g, &self.encoder, desc)?;
        let (c, cm) = encode_code(g, &self.encoder, code)?;
        self.head(g, (d, &dm), (c, &cm), dropout)
    }

    /// Cross-entropy of one labelled pair; gradients are added to `grads`.
    pub fn loss_and_grad(
        &self,
        desc: &EncodedSeq,
        code: &EncodedCode,
        label: usize,
        dropout: Option<Dropout<'_>>,
        grads: &mut Gradients<T>,
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, desc, code, dropout)?;
        let loss = g.cross_entropy(f.logits, label)?;
        let value = g.value(loss).data()[0].as_f64();
        g.backward(loss, grads)?;
        Ok(value)
    }

    /// Loss of one labelled pair without gradients.
    pub fn loss(&self, desc: &EncodedSeq, code: &EncodedCode, label: usize) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, desc, code, None)?;
        let loss = g.cross_entropy(f.logits, label)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Class logits at inference time.
    pub fn logits(&self, desc: &EncodedSeq, code: &EncodedCode) -> Result<[T; 2], ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, desc, code, None)?;
        let z = g.value(f.logits).data();
        Ok([z[0], z[1]])
    }

    /// Probability that `code` matches `desc`.
    pub fn score(&self, desc: &EncodedSeq, code: &EncodedCode) -> Result<f64, ModelError> {
        let z = self.logits(desc, code)?;
        Ok(p_match(&[z[0].as_f64(), z[1].as_f64()]))
    }

    pub fn desc_features(&self, desc: &EncodedSeq) -> Result<FeatureMatrix<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let (d, mask) = encode_description(&mut g, &self.encoder, desc)?;
        Ok(FeatureMatrix {
            value: g.value(d).clone(),
            mask,
        })
    }

    pub fn code_features(&self, code: &EncodedCode) -> Result<FeatureMatrix<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let (c, mask) = encode_code(&mut g, &self.encoder, code)?;
        Ok(FeatureMatrix {
            value: g.value(c).clone(),
            mask,
        })
    }

    /// Same as [`Model::score`] on precomputed feature matrices.
    pub fn score_features(&self, d: &FeatureMatrix<T>, c: &FeatureMatrix<T>) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.params);
        let dv = g.input(d.value.clone());
        let cv = g.input(c.value.clone());
        let f = self.head(&mut g, (dv, &d.mask), (cv, &c.mask), None)?;
        let z = g.value(f.logits).data();
        Ok(p_match(&[z[0].as_f64(), z[1].as_f64()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            dim: 6,
            hidden: 5,
            lengths: SeqLengths {
                desc: 4,
                name: 2,
                api: 3,
                tokens: 5,
            },
            code_vocab: 20,
            desc_vocab: 15,
            variant,
            pool_axis: PoolAxis::CodeColumn,
        }
    }

    fn pair() -> (EncodedSeq, EncodedCode) {
        (
            EncodedSeq::from_ids(vec![3, 7, 2, PAD]),
            EncodedCode {
                name: EncodedSeq::from_ids(vec![4, 5]),
                api: EncodedSeq::from_ids(vec![9, PAD, PAD]),
                tokens: EncodedSeq::from_ids(vec![11, 12, 13, PAD, PAD]),
            },
        )
    }

    #[test]
    fn default_widths_follow_lengths() {
        let c = ModelConfig::new(10, 10);
        assert_eq!(c.code_rows(), 258);
        assert_eq!(c.desc_rows(), 90);
        assert_eq!(c.scorer_width(), 2 * 258 + 2 * 100);
        let conv1 = ModelConfig {
            variant: Variant::Conv(1),
            ..c
        };
        assert_eq!(conv1.scorer_width(), 2 * 86 + 2 * 100);
        let rm = ModelConfig {
            variant: Variant::Relevance,
            ..c
        };
        assert_eq!(rm.scorer_width(), 2 * 258);
    }

    #[test]
    fn every_variant_runs_and_has_matching_scorer_width() {
        let (desc, code) = pair();
        for v in Variant::ALL {
            let cfg = small_config(v);
            let m = Model::<f64>::init(cfg, 1).unwrap();
            let l1 = m.params().find("scorer.l1.weight").unwrap();
            assert_eq!(m.params().get(l1).shape(), &[cfg.scorer_width(), cfg.hidden]);
            assert_eq!(m.params().find("semantic.w").is_some(), cfg.uses_semantic(), "{v}");
            let p = m.score(&desc, &code).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn cached_features_score_identically() {
        let (desc, code) = pair();
        let m = Model::<f32>::init(small_config(Variant::Full), 4).unwrap();
        let direct = m.score(&desc, &code).unwrap();
        let d = m.desc_features(&desc).unwrap();
        let c = m.code_features(&code).unwrap();
        assert_eq!(direct.to_bits(), m.score_features(&d, &c).unwrap().to_bits());
    }

    #[test]
    fn pad_ids_do_not_change_the_score() {
        let (desc, code) = pair();
        let m = Model::<f32>::init(small_config(Variant::Full), 9).unwrap();
        let base = m.score(&desc, &code).unwrap();
        let mut d2 = desc.clone();
        d2.ids[3] = 6;
        let mut c2 = code.clone();
        c2.api.ids[1] = 17;
        c2.tokens.ids[4] = 1;
        assert_eq!(base.to_bits(), m.score(&d2, &c2).unwrap().to_bits());
    }

    #[test]
    fn named_round_trip_and_validation() {
        let cfg = small_config(Variant::Relevance);
        let m = Model::<f32>::init(cfg, 2).unwrap();
        let named: Vec<_> = m
            .params()
            .ids()
            .map(|id| (m.params().name(id).to_string(), m.params().get(id).clone()))
            .collect();
        let back = Model::from_named(cfg, named.clone()).unwrap();
        assert_eq!(back.params(), m.params());

        let mut short = named.clone();
        short.pop();
        assert!(matches!(Model::from_named(cfg, short), Err(ModelError::MissingParam(_))));
        let mut wrong = named.clone();
        wrong[0].1 = Tensor::zeros(vec![3, 3]);
        let err = Model::from_named(cfg, wrong).unwrap_err().to_string();
        assert!(err.contains("embed.code"), "{err}");
        let mut extra = named;
        extra.push(("semantic.w".into(), Tensor::zeros(vec![6, 6])));
        assert!(matches!(Model::from_named(cfg, extra), Err(ModelError::UnexpectedParam(_))));
    }

    #[test]
    fn group_sizes_cover_every_parameter() {
        let m = Model::<f32>::init(small_config(Variant::Full), 0).unwrap();
        let total: usize = m.params().group_sizes().values().sum();
        assert_eq!(total, m.params().numel());
        assert_eq!(m.params().group_sizes().len(), 4);
    }

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("conv4".parse::<Variant>().is_err());
    }
}
