use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsrlError, Result};

/// Input width of the location map: `[l; pooled offset]`.
pub const LOCATION_INPUT: usize = 10;
/// Width of one neighbor offset vector.
pub const OFFSET_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Embedding size `d`.
    pub embed: usize,
    /// Grid channels `c`.
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    #[default]
    ScaledUniform,
    /// Every entry uniform in `[0, 1)`.
    PaperLiteral,
}

/// Two-layer perceptron `3d -> d -> d` with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    fn zeros(d: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((d, 3 * d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// Every learnable block of the encoders and matching heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `d x d` linear context encoder.
    pub context_proj: Array2<f64>,
    pub w_sb: Array1<f64>,
    pub w_sl: Array1<f64>,
    pub w_sr: Array1<f64>,
    /// `d x c`; maps grid columns into the attention space and projects the
    /// attended grid feature to `d`.
    pub w_v: Array2<f64>,
    pub w_s: Array2<f64>,
    pub w_a: Array1<f64>,
    pub w_l: Array2<f64>,
    pub b_l: Array1<f64>,
    /// `d x (d + 5)`.
    pub w_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub region_mlp: MlpParams,
    pub expr_mlp: MlpParams,
}

/// Block names in canonical order.
pub const BLOCK_NAMES: [&str; 19] = [
    "context_proj",
    "w_sb",
    "w_sl",
    "w_sr",
    "w_v",
    "w_s",
    "w_a",
    "w_l",
    "b_l",
    "w_r",
    "b_r",
    "region_mlp.w1",
    "region_mlp.b1",
    "region_mlp.w2",
    "region_mlp.b2",
    "expr_mlp.w1",
    "expr_mlp.b1",
    "expr_mlp.w2",
    "expr_mlp.b2",
];

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        let d = dims.embed;
        EncoderParams {
            context_proj: Array2::zeros((d, d)),
            w_sb: Array1::zeros(d),
            w_sl: Array1::zeros(d),
            w_sr: Array1::zeros(d),
            w_v: Array2::zeros((d, dims.channels)),
            w_s: Array2::zeros((d, d)),
            w_a: Array1::zeros(d),
            w_l: Array2::zeros((d, LOCATION_INPUT)),
            b_l: Array1::zeros(d),
            w_r: Array2::zeros((d, d + OFFSET_DIM)),
            b_r: Array1::zeros(d),
            region_mlp: MlpParams::zeros(d),
            expr_mlp: MlpParams::zeros(d),
        }
    }

    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, mode: InitMode, rng: &mut R) -> Self {
        let mut p = EncoderParams::zeros(dims);
        for (name, mut block) in p.blocks_mut() {
            let is_bias = name.starts_with('b') || name.ends_with(".b1") || name.ends_with(".b2");
            let fan_in = match block.ndim() {
                2 => block.shape()[1],
                _ => block.len(),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in block.iter_mut() {
                *v = match mode {
                    InitMode::PaperLiteral => rng.random::<f64>(),
                    InitMode::ScaledUniform if is_bias => 0.0,
                    InitMode::ScaledUniform => rng.random_range(-bound..bound),
                };
            }
        }
        p
    }

    /// Parameter-free probe encoder: identity context and grid projection,
    /// uniform attention, silent location and relation modules. Requires
    /// `channels == embed`.
    pub fn probe(dims: EncoderDims) -> Result<Self> {
        if dims.channels != dims.embed {
            return Err(MsrlError::Dimension { context: "probe encoder channels", expected: dims.embed, got: dims.channels });
        }
        let mut p = EncoderParams::zeros(dims);
        p.context_proj = Array2::eye(dims.embed);
        p.w_v = Array2::eye(dims.embed);
        Ok(p)
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims { embed: self.w_v.nrows(), channels: self.w_v.ncols() }
    }

    pub fn blocks(&self) -> [(&'static str, ArrayViewD<'_, f64>); 19] {
        [
            (BLOCK_NAMES[0], self.context_proj.view().into_dyn()),
            (BLOCK_NAMES[1], self.w_sb.view().into_dyn()),
            (BLOCK_NAMES[2], self.w_sl.view().into_dyn()),
            (BLOCK_NAMES[3], self.w_sr.view().into_dyn()),
            (BLOCK_NAMES[4], self.w_v.view().into_dyn()),
            (BLOCK_NAMES[5], self.w_s.view().into_dyn()),
            (BLOCK_NAMES[6], self.w_a.view().into_dyn()),
            (BLOCK_NAMES[7], self.w_l.view().into_dyn()),
            (BLOCK_NAMES[8], self.b_l.view().into_dyn()),
            (BLOCK_NAMES[9], self.w_r.view().into_dyn()),
            (BLOCK_NAMES[10], self.b_r.view().into_dyn()),
            (BLOCK_NAMES[11], self.region_mlp.w1.view().into_dyn()),
            (BLOCK_NAMES[12], self.region_mlp.b1.view().into_dyn()),
            (BLOCK_NAMES[13], self.region_mlp.w2.view().into_dyn()),
            (BLOCK_NAMES[14], self.region_mlp.b2.view().into_dyn()),
            (BLOCK_NAMES[15], self.expr_mlp.w1.view().into_dyn()),
            (BLOCK_NAMES[16], self.expr_mlp.b1.view().into_dyn()),
            (BLOCK_NAMES[17], self.expr_mlp.w2.view().into_dyn()),
            (BLOCK_NAMES[18], self.expr_mlp.b2.view().into_dyn()),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, f64>); 19] {
        [
            (BLOCK_NAMES[0], self.context_proj.view_mut().into_dyn()),
            (BLOCK_NAMES[1], self.w_sb.view_mut().into_dyn()),
            (BLOCK_NAMES[2], self.w_sl.view_mut().into_dyn()),
            (BLOCK_NAMES[3], self.w_sr.view_mut().into_dyn()),
            (BLOCK_NAMES[4], self.w_v.view_mut().into_dyn()),
            (BLOCK_NAMES[5], self.w_s.view_mut().into_dyn()),
            (BLOCK_NAMES[6], self.w_a.view_mut().into_dyn()),
            (BLOCK_NAMES[7], self.w_l.view_mut().into_dyn()),
            (BLOCK_NAMES[8], self.b_l.view_mut().into_dyn()),
            (BLOCK_NAMES[9], self.w_r.view_mut().into_dyn()),
            (BLOCK_NAMES[10], self.b_r.view_mut().into_dyn()),
            (BLOCK_NAMES[11], self.region_mlp.w1.view_mut().into_dyn()),
            (BLOCK_NAMES[12], self.region_mlp.b1.view_mut().into_dyn()),
            (BLOCK_NAMES[13], self.region_mlp.w2.view_mut().into_dyn()),
            (BLOCK_NAMES[14], self.region_mlp.b2.view_mut().into_dyn()),
            (BLOCK_NAMES[15], self.expr_mlp.w1.view_mut().into_dyn()),
            (BLOCK_NAMES[16], self.expr_mlp.b1.view_mut().into_dyn()),
            (BLOCK_NAMES[17], self.expr_mlp.w2.view_mut().into_dyn()),
            (BLOCK_NAMES[18], self.expr_mlp.b2.view_mut().into_dyn()),
        ]
    }

    pub fn n_values(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// First block containing a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks().into_iter().find(|(_, b)| b.iter().any(|v| !v.is_finite())).map(|(n, _)| n)
    }

    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, mut mine), (_, theirs)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            mine.scaled_add(scale, &theirs);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, b)| b.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    const DIMS: EncoderDims = EncoderDims { embed: 6, channels: 4 };

    #[test]
    fn block_shapes_follow_dims() {
        let p = EncoderParams::zeros(DIMS);
        let shapes: Vec<Vec<usize>> = p.blocks().iter().map(|(_, b)| b.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![6, 6]);
        assert_eq!(shapes[4], vec![6, 4]);
        assert_eq!(shapes[7], vec![6, 10]);
        assert_eq!(shapes[9], vec![6, 11]);
        assert_eq!(shapes[11], vec![6, 18]);
        assert_eq!(p.dims(), DIMS);
    }

    #[test]
    fn init_modes_respect_ranges() {
        let p = EncoderParams::init(DIMS, InitMode::PaperLiteral, &mut stream_rng(1, Stream::Init));
        assert!(p.blocks().iter().all(|(_, b)| b.iter().all(|v| (0.0..1.0).contains(v))));
        let q = EncoderParams::init(DIMS, InitMode::ScaledUniform, &mut stream_rng(1, Stream::Init));
        assert!(q.b_l.iter().all(|&v| v == 0.0));
        let bound = 1.0 / (18f64).sqrt();
        assert!(q.region_mlp.w1.iter().all(|v| v.abs() < bound));
        assert!(q.context_proj.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn probe_requires_square_grid_projection() {
        assert!(EncoderParams::probe(DIMS).is_err());
        let p = EncoderParams::probe(EncoderDims { embed: 4, channels: 4 }).unwrap();
        assert_eq!(p.w_v, Array2::<f64>::eye(4));
    }
}
