//! Matching head: per-modality perceptrons, L2 normalization and cosine score.

use ndarray::Array1;

use super::add_outer;
use super::params::{EncoderParams, MlpParams};
use crate::error::{MsrlError, Result};

/// Below this norm an embedding is treated as degenerate.
pub const MIN_EMBED_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
struct MlpTape {
    input: Array1<f64>,
    hidden: Array1<f64>,
    normalized: Array1<f64>,
    norm: f64,
}

fn mlp_forward(mlp: &MlpParams, input: &Array1<f64>, side: &str) -> Result<MlpTape> {
    if input.len() != mlp.w1.ncols() {
        return Err(MsrlError::Dimension { context: "matching head input", expected: mlp.w1.ncols(), got: input.len() });
    }
    let hidden = (mlp.w1.dot(input) + &mlp.b1).mapv(f64::tanh);
    let out = mlp.w2.dot(&hidden) + &mlp.b2;
    let norm = out.dot(&out).sqrt();
    if !(norm > MIN_EMBED_NORM) {
        return Err(MsrlError::Degenerate(format!("{side} embedding has norm {norm:e}")));
    }
    Ok(MlpTape { input: input.clone(), hidden, normalized: out / norm, norm })
}

impl MlpTape {
    fn backward(&self, d_normalized: &Array1<f64>, mlp: &MlpParams, grads: &mut MlpParams) -> Array1<f64> {
        let n = &self.normalized;
        let d_out = (d_normalized - &(n * n.dot(d_normalized))) / self.norm;
        add_outer(&mut grads.w2, 1.0, d_out.view(), self.hidden.view());
        grads.b2 += &d_out;
        let mut d_pre = mlp.w2.t().dot(&d_out);
        d_pre.zip_mut_with(&self.hidden, |g, &h| *g *= 1.0 - h * h);
        add_outer(&mut grads.w1, 1.0, d_pre.view(), self.input.view());
        grads.b1 += &d_pre;
        mlp.w1.t().dot(&d_pre)
    }
}

/// L2-normalized joint-space embedding of a `3d` region feature.
pub fn embed_region(v: &Array1<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    mlp_forward(&params.region_mlp, v, "region").map(|t| t.normalized)
}

/// L2-normalized joint-space embedding of a `3d` expression feature.
pub fn embed_expression(s: &Array1<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    mlp_forward(&params.expr_mlp, s, "expression").map(|t| t.normalized)
}

/// Cosine of two embeddings, clamped into `[-1, 1]`.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if !(na > MIN_EMBED_NORM && nb > MIN_EMBED_NORM) {
        return Err(MsrlError::Degenerate(format!("cosine of vectors with norms {na:e}, {nb:e}")));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Forward cache of one matching score.
#[derive(Debug, Clone)]
pub struct ScoreTape {
    region: MlpTape,
    expression: MlpTape,
}

impl ScoreTape {
    pub fn forward(v: &Array1<f64>, s: &Array1<f64>, params: &EncoderParams) -> Result<(f64, Self)> {
        let region = mlp_forward(&params.region_mlp, v, "region")?;
        let expression = mlp_forward(&params.expr_mlp, s, "expression")?;
        let score = region.normalized.dot(&expression.normalized);
        Ok((score, ScoreTape { region, expression }))
    }

    /// Returns gradients w.r.t. the region and expression features.
    pub fn backward(&self, d_score: f64, params: &EncoderParams, grads: &mut EncoderParams) -> (Array1<f64>, Array1<f64>) {
        let d_nr = &self.expression.normalized * d_score;
        let d_ne = &self.region.normalized * d_score;
        let dv = self.region.backward(&d_nr, &params.region_mlp, &mut grads.region_mlp);
        let ds = self.expression.backward(&d_ne, &params.expr_mlp, &mut grads.expr_mlp);
        (dv, ds)
    }
}
