//! Expression side: context encoding and per-module word attention.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::params::EncoderParams;
use super::{add_outer, check_len, softmax, softmax_backward};
use crate::error::{MsrlError, Result};

/// Maps word embeddings `T x d` to hidden features `T x d`.
pub trait ContextEncoder {
    fn forward(&self, embeddings: &Array2<f64>, params: &EncoderParams) -> Result<Array2<f64>>;

    /// Accumulates parameter gradients given `d hidden`.
    fn backward(&self, embeddings: &Array2<f64>, d_hidden: &Array2<f64>, params: &EncoderParams, grads: &mut EncoderParams);
}

/// `h_t = P e_t` with the learnable `context_proj` matrix `P`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearContext;

impl ContextEncoder for LinearContext {
    fn forward(&self, embeddings: &Array2<f64>, params: &EncoderParams) -> Result<Array2<f64>> {
        let d = params.context_proj.ncols();
        if embeddings.ncols() != d {
            return Err(MsrlError::Dimension { context: "context encoder input", expected: d, got: embeddings.ncols() });
        }
        if embeddings.nrows() == 0 {
            return Err(MsrlError::validation("expression has no words"));
        }
        Ok(embeddings.dot(&params.context_proj.t()))
    }

    fn backward(&self, embeddings: &Array2<f64>, d_hidden: &Array2<f64>, _params: &EncoderParams, grads: &mut EncoderParams) {
        // H = E P^T  =>  dP = dH^T E
        grads.context_proj += &d_hidden.t().dot(embeddings);
    }
}

pub fn context_encode(embeddings: &Array2<f64>, params: &EncoderParams) -> Result<Array2<f64>> {
    LinearContext.forward(embeddings, params)
}

/// Attention weights `softmax_t(w . h_t)` and the attended sum of the word
/// embeddings `sum_t a_t e_t`.
pub fn textual_modular_attention(
    hidden: &Array2<f64>,
    embeddings: &Array2<f64>,
    w: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if hidden.nrows() == 0 || hidden.dim() != embeddings.dim() {
        return Err(MsrlError::validation(format!(
            "hidden {:?} and embeddings {:?} must be equal-shaped and non-empty",
            hidden.dim(),
            embeddings.dim()
        )));
    }
    check_len("module attention vector", hidden.ncols(), w.len())?;
    let weights = softmax(&hidden.dot(&w));
    let pooled = embeddings.t().dot(&weights);
    Ok((weights, pooled))
}

/// Dropout masks (already scaled by `1/(1-p)`) for one expression.
#[derive(Debug, Clone)]
pub struct ExpressionDropout {
    pub embeddings: Array2<f64>,
    pub hidden: Array2<f64>,
}

/// Forward cache of one expression encoding.
#[derive(Debug, Clone)]
pub struct ExpressionTape {
    embeddings: Array2<f64>,
    hidden: Array2<f64>,
    weights: [Array1<f64>; 3],
    hidden_mask: Option<Array2<f64>>,
}

impl ExpressionTape {
    /// Runs the three module attentions; returns the concatenated `3d`
    /// feature `[s_sb; s_sl; s_sr]`.
    pub fn forward(
        context: &dyn ContextEncoder,
        words: &Array2<f64>,
        params: &EncoderParams,
        dropout: Option<&ExpressionDropout>,
    ) -> Result<(Array1<f64>, Self)> {
        let embeddings = match dropout {
            Some(m) => words * &m.embeddings,
            None => words.clone(),
        };
        let mut hidden = context.forward(&embeddings, params)?;
        if let Some(m) = dropout {
            hidden *= &m.hidden;
        }
        let d = embeddings.ncols();
        let mut out = Array1::zeros(3 * d);
        let mut weights: [Array1<f64>; 3] = Default::default();
        for (m, w) in [&params.w_sb, &params.w_sl, &params.w_sr].into_iter().enumerate() {
            let (a, pooled) = textual_modular_attention(&hidden, &embeddings, w.view())?;
            out.slice_mut(ndarray::s![m * d..(m + 1) * d]).assign(&pooled);
            weights[m] = a;
        }
        Ok((out, ExpressionTape { embeddings, hidden, weights, hidden_mask: dropout.map(|m| m.hidden.clone()) }))
    }

    pub fn backward(&self, context: &dyn ContextEncoder, d_out: &Array1<f64>, params: &EncoderParams, grads: &mut EncoderParams) {
        let d = self.embeddings.ncols();
        let mut d_hidden = Array2::zeros(self.hidden.raw_dim());
        let attention = [&params.w_sb, &params.w_sl, &params.w_sr];
        for m in 0..3 {
            let d_pooled = d_out.slice(ndarray::s![m * d..(m + 1) * d]);
            // pooled = E^T a
            let d_weights = self.embeddings.dot(&d_pooled);
            let d_logits = softmax_backward(&self.weights[m], &d_weights);
            let d_w = self.hidden.t().dot(&d_logits);
            match m {
                0 => grads.w_sb += &d_w,
                1 => grads.w_sl += &d_w,
                _ => grads.w_sr += &d_w,
            }
            add_outer(&mut d_hidden, 1.0, d_logits.view(), attention[m].view());
        }
        if let Some(mask) = &self.hidden_mask {
            d_hidden *= mask;
        }
        context.backward(&self.embeddings, &d_hidden, params, grads);
    }

    pub fn attention(&self, module: usize) -> &Array1<f64> {
        &self.weights[module]
    }

    pub fn n_words(&self) -> usize {
        self.embeddings.len_of(Axis(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_zero_context() {
        let mut p = EncoderParams::zeros(super::super::EncoderDims { embed: 3, channels: 3 });
        let e = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        assert_eq!(context_encode(&e, &p).unwrap(), Array2::<f64>::zeros((2, 3)));
        p.context_proj = Array2::eye(3);
        assert_eq!(context_encode(&e, &p).unwrap(), e);
        assert!(context_encode(&Array2::zeros((2, 4)), &p).is_err());
    }

    #[test]
    fn attention_examples() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        // equal logits
        let (a, s) = textual_modular_attention(&e, &e, array![0.0, 0.0].view()).unwrap();
        assert_eq!(a, array![0.5, 0.5]);
        assert_eq!(s, array![0.5, 0.5]);
        // single word ignores w
        let one = array![[0.3, -0.7]];
        let (a, s) = textual_modular_attention(&one, &one, array![5.0, 2.0].view()).unwrap();
        assert_eq!(a, array![1.0]);
        assert_eq!(s, array![0.3, -0.7]);
        // logits (ln 3, 0)
        let h = array![[3f64.ln(), 0.0], [0.0, 0.0]];
        let (a, _) = textual_modular_attention(&h, &e, array![1.0, 0.0].view()).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
    }
}
