//! Embedding lookup and multi-width n-gram convolution for the description
//! and the three code fields.

use rand::Rng;

use crate::corpus::{EncodedCode, EncodedSeq, Field};
use crate::tensor::{Activation, Graph, ParamGroup, ParamId, ParamSet, Scalar, Tensor, TensorError, Var};

/// Embedding init range.
pub const EMBED_INIT: f64 = 0.05;

/// One convolution width of one field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBank {
    pub width: usize,
    pub filters: ParamId,
    pub bias: ParamId,
}

/// Conv banks of one field, in increasing width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldEncoder {
    pub field: Field,
    pub banks: Vec<ConvBank>,
}

/// Handles into a [`ParamSet`] for the encoder side of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub code_table: ParamId,
    pub desc_table: ParamId,
    /// Code fields in concatenation order.
    pub code_fields: Vec<FieldEncoder>,
    pub desc: FieldEncoder,
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Gain for weights feeding a tanh or a linear output (unit variance).
pub const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2;
/// Gain for weights feeding a ReLU.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178;

/// Uniform init bound `gain / sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

pub fn conv_param_name(field: Field, width: usize, part: &str) -> String {
    format!("conv.{}.w{width}.{part}", field.as_str())
}

fn field_encoder<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    field: Field,
    dim: usize,
    widths: &[usize],
    rng: &mut R,
) -> FieldEncoder {
    let banks = widths
        .iter()
        .map(|&h| {
            let bound = fan_in_bound(h * dim, LINEAR_GAIN);
            let filters = params.add(
                conv_param_name(field, h, "filters"),
                ParamGroup::Encoder,
                uniform(rng, vec![h, dim, dim], bound),
            );
            let bias = params.add(
                conv_param_name(field, h, "bias"),
                ParamGroup::Encoder,
                Tensor::zeros(vec![dim]),
            );
            ConvBank { width: h, filters, bias }
        })
        .collect();
    FieldEncoder { field, banks }
}

impl EncoderParams {
    /// Registers both embedding tables and one conv bank per field and width.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        dim: usize,
        vocab_sizes: (usize, usize),
        code_fields: &[Field],
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let (code_vocab, desc_vocab) = vocab_sizes;
        let code_table = params.add(
            "embed.code",
            ParamGroup::Embedding,
            uniform(rng, vec![code_vocab, dim], EMBED_INIT),
        );
        let desc_table = params.add(
            "embed.desc",
            ParamGroup::Embedding,
            uniform(rng, vec![desc_vocab, dim], EMBED_INIT),
        );
        let code_fields = code_fields
            .iter()
            .map(|&f| field_encoder(params, f, dim, widths, rng))
            .collect();
        let desc = field_encoder(params, Field::Desc, dim, widths, rng);
        Self {
            code_table,
            desc_table,
            code_fields,
            desc,
        }
    }
}

/// Rows of `table` for each id of `seq`. PAD positions hold the PAD row.
pub fn embed_field<T: Scalar>(g: &mut Graph<'_, T>, table: ParamId, seq: &EncodedSeq) -> Result<Var, TensorError> {
    g.embedding_lookup(table, &seq.ids)
}

/// Runs every conv bank of `enc` over `e` and stacks the outputs along the
/// sequence axis. The output mask is the input mask once per bank.
pub fn ngram_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Var,
    mask: &[bool],
    enc: &FieldEncoder,
) -> Result<(Var, Vec<bool>), TensorError> {
    let mut parts = Vec::with_capacity(enc.banks.len());
    let mut out_mask = Vec::with_capacity(mask.len() * enc.banks.len());
    for bank in &enc.banks {
        let f = g.param(bank.filters);
        let b = g.param(bank.bias);
        parts.push(g.conv1d_same(e, f, b, Activation::Tanh, Some(mask))?);
        out_mask.extend_from_slice(mask);
    }
    let out = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
    Ok((out, out_mask))
}

fn code_field_seq(code: &EncodedCode, field: Field) -> &EncodedSeq {
    match field {
        Field::Tokens => &code.tokens,
        Field::Name => &code.name,
        Field::Api => &code.api,
        Field::Desc => panic!("description is not a code field"),
    }
}

/// `C` and its mask: the n-gram matrices of the configured code fields
/// stacked in order.
pub fn encode_code<T: Scalar>(
    g: &mut Graph<'_, T>,
    enc: &EncoderParams,
    code: &EncodedCode,
) -> Result<(Var, Vec<bool>), TensorError> {
    let mut parts = Vec::with_capacity(enc.code_fields.len());
    let mut mask = Vec::new();
    for fe in &enc.code_fields {
        let seq = code_field_seq(code, fe.field);
        let e = embed_field(g, enc.code_table, seq)?;
        let (x, m) = ngram_encode(g, e, &seq.mask, fe)?;
        parts.push(x);
        mask.extend(m);
    }
    let c = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
    Ok((c, mask))
}

/// `D` and its mask.
pub fn encode_description<T: Scalar>(
    g: &mut Graph<'_, T>,
    enc: &EncoderParams,
    desc: &EncodedSeq,
) -> Result<(Var, Vec<bool>), TensorError> {
    let e = embed_field(g, enc.desc_table, desc)?;
    ngram_encode(g, e, &desc.mask, &enc.desc)
}

/// A computed `C` or `D` detached from any graph, for reuse across pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub value: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn rows(&self) -> usize {
        self.value.rows()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Gradients;

    const DIM: usize = 4;

    fn setup(widths: &[usize]) -> (ParamSet<f64>, EncoderParams) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::init(
            &mut params,
            DIM,
            (12, 9),
            &[Field::Tokens, Field::Name, Field::Api],
            widths,
            &mut rng,
        );
        (params, enc)
    }

    fn code() -> EncodedCode {
        EncodedCode {
            name: EncodedSeq::from_ids(vec![2, 3, 0]),
            api: EncodedSeq::from_ids(vec![4, 0]),
            tokens: EncodedSeq::from_ids(vec![5, 6, 7, 0]),
        }
    }

    #[test]
    fn twelve_banks_and_two_tables() {
        let (params, enc) = setup(&[1, 2, 3]);
        assert_eq!(params.len(), 2 + 4 * 3 * 2);
        assert_eq!(enc.code_fields.len(), 3);
        assert!(params.find("conv.api.w2.filters").is_some());
        assert_eq!(params.get(enc.desc.banks[2].filters).shape(), &[3, DIM, DIM]);
    }

    #[test]
    fn code_matrix_shape_and_mask() {
        let (params, enc) = setup(&[1, 2, 3]);
        let mut g = Graph::new(&params);
        let (c, mask) = encode_code(&mut g, &enc, &code()).unwrap();
        assert_eq!(g.value(c).shape(), &[3 * (4 + 3 + 2), DIM]);
        let tok = [true, true, true, false];
        let expected: Vec<bool> = tok
            .repeat(3)
            .into_iter()
            .chain([true, true, false].repeat(3))
            .chain([true, false].repeat(3))
            .collect();
        assert_eq!(mask, expected);
        for (i, m) in mask.iter().enumerate() {
            let row = g.value(c).row(i);
            assert!(row.iter().all(|v| v.is_finite()));
            if !m {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn single_position_gives_one_row_per_width() {
        let (params, enc) = setup(&[1, 2, 3]);
        let mut g = Graph::new(&params);
        let (d, mask) = encode_description(&mut g, &enc, &EncodedSeq::from_ids(vec![3])).unwrap();
        assert_eq!(g.value(d).shape(), &[3, DIM]);
        assert_eq!(mask, [true; 3]);
    }

    #[test]
    fn width_one_block_matches_standalone_conv() {
        let (params, enc) = setup(&[1, 2, 3]);
        let desc = EncodedSeq::from_ids(vec![2, 4, 8, 0, 0]);
        let mut g = Graph::new(&params);
        let (d, _) = encode_description(&mut g, &enc, &desc).unwrap();
        let e = embed_field(&mut g, enc.desc_table, &desc).unwrap();
        let bank = enc.desc.banks[0];
        let f = g.param(bank.filters);
        let b = g.param(bank.bias);
        let alone = g.conv1d_same(e, f, b, Activation::Tanh, Some(&desc.mask)).unwrap();
        assert_eq!(&g.value(d).data()[..5 * DIM], g.value(alone).data());
    }

    #[test]
    fn zero_filters_give_zero_output() {
        let (mut params, enc) = setup(&[1, 2, 3]);
        for bank in &enc.desc.banks {
            params.get_mut(bank.filters).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&params);
        let (d, _) = encode_description(&mut g, &enc, &EncodedSeq::from_ids(vec![2, 3])).unwrap();
        assert!(g.value(d).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lookup_gathers_table_rows() {
        let (params, enc) = setup(&[1]);
        let mut g = Graph::new(&params);
        let seq = EncodedSeq::from_ids(vec![0, 0, 7]);
        let e = embed_field(&mut g, enc.code_table, &seq).unwrap();
        let table = params.get(enc.code_table);
        for (row, &id) in seq.ids.iter().enumerate() {
            assert_eq!(g.value(e).row(row), table.row(id));
        }
        let bad = EncodedSeq::from_ids(vec![12]);
        assert!(matches!(
            embed_field(&mut g, enc.code_table, &bad),
            Err(TensorError::IndexOutOfRange { index: 12, bound: 12 })
        ));
    }

    #[test]
    fn swapping_tokens_permutes_width_one_rows() {
        let (params, enc) = setup(&[1, 2, 3]);
        let a = code();
        let mut b = code();
        b.tokens.ids.swap(0, 2);
        let mut g = Graph::new(&params);
        let (ca, _) = encode_code(&mut g, &enc, &a).unwrap();
        let (cb, _) = encode_code(&mut g, &enc, &b).unwrap();
        let (va, vb) = (g.value(ca), g.value(cb));
        assert_eq!(va.row(0), vb.row(2));
        assert_eq!(va.row(2), vb.row(0));
        assert_eq!(va.row(1), vb.row(1));
    }

    #[test]
    fn every_bank_and_table_gets_gradient() {
        let (params, enc) = setup(&[1, 2, 3]);
        let mut g = Graph::new(&params);
        let (c, _) = encode_code(&mut g, &enc, &code()).unwrap();
        let (d, _) = encode_description(&mut g, &enc, &EncodedSeq::from_ids(vec![2, 5, 1])).unwrap();
        let both = g.concat(&[c, d]).unwrap();
        let n = g.value(both).len();
        let mut grads = Gradients::zeros_like(&params);
        let seed = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        g.backward_from(both, seed, &mut grads).unwrap();
        for id in params.ids() {
            assert!(grads.get(id).iter().any(|v| *v != 0.0), "{} has zero gradient", params.name(id));
        }
    }
}
