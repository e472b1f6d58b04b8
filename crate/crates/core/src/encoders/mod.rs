//! Modular subject/location/relation encoders and the matching score, each
//! with a hand-derived backward pass.
//!
//! Forward functions return a tape holding what the backward pass needs.
//! Region encodings are conditioned on an expression's subject feature, so
//! the region backward hands a gradient back to that expression.

mod head;
mod params;
mod textual;
mod visual;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};

pub use head::{cosine, embed_expression, embed_region, ScoreTape, MIN_EMBED_NORM};
pub use params::{EncoderDims, EncoderParams, InitMode, MlpParams, BLOCK_NAMES, LOCATION_INPUT, OFFSET_DIM};
pub use textual::{context_encode, textual_modular_attention, ContextEncoder, ExpressionDropout, ExpressionTape, LinearContext};
pub use visual::{
    location_feature, location_input, relation_feature, visual_attention_weights, visual_subject_attention, RegionTape,
};

use crate::domain::{ExpressionItem, RegionItem};
use crate::error::{MsrlError, Result};

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(MsrlError::Dimension { context, expected, got });
    }
    Ok(())
}

/// `m += scale * a b^T`.
pub(crate) fn add_outer(m: &mut Array2<f64>, scale: f64, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    general_mat_mul(scale, &a.insert_axis(Axis(1)), &b.insert_axis(Axis(0)), 1.0, m);
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e /= total;
    e
}

/// Gradient w.r.t. logits given the softmax output and the gradient w.r.t. it.
pub(crate) fn softmax_backward(p: &Array1<f64>, d_p: &Array1<f64>) -> Array1<f64> {
    let inner = p.dot(d_p);
    p * &(d_p - inner)
}

/// Subject, location and relation features of one expression or region.
#[derive(Debug, Clone, PartialEq)]
pub struct ModularFeatures {
    pub subject: Array1<f64>,
    pub location: Array1<f64>,
    pub relation: Array1<f64>,
}

impl ModularFeatures {
    /// Splits a `3d` vector into its three modules.
    pub fn from_concatenated(v: &Array1<f64>) -> Result<Self> {
        if !v.len().is_multiple_of(3) {
            return Err(MsrlError::validation(format!("feature length {} not divisible by 3", v.len())));
        }
        let d = v.len() / 3;
        Ok(ModularFeatures {
            subject: v.slice(s![..d]).to_owned(),
            location: v.slice(s![d..2 * d]).to_owned(),
            relation: v.slice(s![2 * d..]).to_owned(),
        })
    }

    pub fn concatenated(&self) -> Array1<f64> {
        ndarray::concatenate![Axis(0), self.subject, self.location, self.relation]
    }
}

/// An expression encoded once and reused across every pair it scores in.
#[derive(Debug, Clone)]
pub struct ExpressionEncoding {
    pub features: Array1<f64>,
    tape: ExpressionTape,
}

impl ExpressionEncoding {
    pub fn new(item: &ExpressionItem, params: &EncoderParams) -> Result<Self> {
        Self::with(&LinearContext, item, params, None)
    }

    pub fn with(
        context: &dyn ContextEncoder,
        item: &ExpressionItem,
        params: &EncoderParams,
        dropout: Option<&ExpressionDropout>,
    ) -> Result<Self> {
        let (features, tape) = ExpressionTape::forward(context, &item.word_embeddings, params, dropout)?;
        Ok(ExpressionEncoding { features, tape })
    }

    /// The subject module `s_sb` that guides region attention.
    pub fn subject(&self) -> Array1<f64> {
        let d = self.features.len() / 3;
        self.features.slice(s![..d]).to_owned()
    }

    pub fn backward(&self, context: &dyn ContextEncoder, d_features: &Array1<f64>, params: &EncoderParams, grads: &mut EncoderParams) {
        self.tape.backward(context, d_features, params, grads);
    }

    pub fn tape(&self) -> &ExpressionTape {
        &self.tape
    }
}

/// A region encoded under one guiding expression subject feature.
#[derive(Debug, Clone)]
pub struct RegionEncoding {
    pub features: Array1<f64>,
    tape: RegionTape,
}

impl RegionEncoding {
    pub fn new(item: &RegionItem, guide: &Array1<f64>, params: &EncoderParams) -> Result<Self> {
        let (features, tape) = RegionTape::forward(&item.grid_features, &item.bbox, &item.neighbors, guide, params)?;
        Ok(RegionEncoding { features, tape })
    }

    /// Returns the gradient w.r.t. the guiding subject feature.
    pub fn backward(&self, d_features: &Array1<f64>, params: &EncoderParams, grads: &mut EncoderParams) -> Array1<f64> {
        self.tape.backward(d_features, params, grads)
    }
}

pub fn encode_expression(item: &ExpressionItem, params: &EncoderParams) -> Result<ModularFeatures> {
    ModularFeatures::from_concatenated(&ExpressionEncoding::new(item, params)?.features)
}

/// Encodes a region under the subject feature of the expression it is scored against.
pub fn encode_region(item: &RegionItem, subject: &Array1<f64>, params: &EncoderParams) -> Result<ModularFeatures> {
    ModularFeatures::from_concatenated(&RegionEncoding::new(item, subject, params)?.features)
}

/// Matching score `F(v, s)`: cosine of the normalized perceptron outputs.
pub fn match_score(v: &ModularFeatures, s: &ModularFeatures, params: &EncoderParams) -> Result<f64> {
    ScoreTape::forward(&v.concatenated(), &s.concatenated(), params).map(|(f, _)| f)
}

/// Full forward cache of `F(region | expression, expression)`.
#[derive(Debug, Clone)]
pub struct PairTape {
    region: RegionEncoding,
    score: ScoreTape,
}

impl PairTape {
    pub fn forward(region: &RegionItem, expression: &ExpressionEncoding, params: &EncoderParams) -> Result<(f64, Self)> {
        let region = RegionEncoding::new(region, &expression.subject(), params)?;
        let (f, score) = ScoreTape::forward(&region.features, &expression.features, params)?;
        Ok((f, PairTape { region, score }))
    }

    /// Accumulates parameter gradients for `d_score * F` and returns the
    /// gradient w.r.t. the expression's `3d` features, including the path
    /// through region attention.
    pub fn backward(&self, d_score: f64, params: &EncoderParams, grads: &mut EncoderParams) -> Array1<f64> {
        let (dv, mut ds) = self.score.backward(d_score, params, grads);
        let d_guide = self.region.backward(&dv, params, grads);
        let d = d_guide.len();
        let mut head = ds.slice_mut(s![..d]);
        head += &d_guide;
        ds
    }
}

/// Scores a region against an expression.
pub fn score_pair(region: &RegionItem, expression: &ExpressionItem, params: &EncoderParams) -> Result<f64> {
    let enc = ExpressionEncoding::new(expression, params)?;
    PairTape::forward(region, &enc, params).map(|(f, _)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_positive_and_normalized() {
        let p = softmax(&array![1000.0, -3.0, 2.5, 0.0]);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.sum() - 1.0).abs() < 1e-15);
        let q = softmax(&array![0.1, -0.4, 0.3]);
        assert!(q.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn concatenation_layout() {
        let f = ModularFeatures { subject: array![1.0, 2.0], location: array![3.0, 4.0], relation: array![5.0, 6.0] };
        let c = f.concatenated();
        assert_eq!(c, array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ModularFeatures::from_concatenated(&c).unwrap(), f);
    }
}
