//! Region side: expression-guided subject attention over the grid, location
//! and relation modules.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{EncoderParams, LOCATION_INPUT, OFFSET_DIM};
use super::{add_outer, check_len, softmax, softmax_backward};
use crate::domain::{BoundingBox, Neighbor, MAX_NEIGHBORS};
use crate::error::{MsrlError, Result};

#[derive(Debug, Clone)]
struct SubjectTape {
    grid: Array2<f64>,
    subject: Array1<f64>,
    activations: Array2<f64>,
    attention: Array1<f64>,
    pooled: Array1<f64>,
}

fn subject_forward(grid: &Array2<f64>, subject: &Array1<f64>, params: &EncoderParams) -> Result<(Array1<f64>, SubjectTape)> {
    let (d, c) = params.w_v.dim();
    check_len("grid channels", c, grid.nrows())?;
    check_len("subject feature", d, subject.len())?;
    if grid.ncols() == 0 {
        return Err(MsrlError::validation("grid has no cells"));
    }
    let guide = params.w_s.dot(subject);
    let mut activations = params.w_v.dot(grid);
    activations += &guide.view().insert_axis(Axis(1));
    activations.mapv_inplace(f64::tanh);
    let attention = softmax(&activations.t().dot(&params.w_a));
    let pooled = grid.dot(&attention);
    let out = params.w_v.dot(&pooled);
    Ok((out, SubjectTape { grid: grid.clone(), subject: subject.clone(), activations, attention, pooled }))
}

impl SubjectTape {
    /// Returns the gradient w.r.t. the guiding subject feature.
    fn backward(&self, d_out: &Array1<f64>, params: &EncoderParams, grads: &mut EncoderParams) -> Array1<f64> {
        add_outer(&mut grads.w_v, 1.0, d_out.view(), self.pooled.view());
        let d_pooled = params.w_v.t().dot(d_out);
        let d_attention = self.grid.t().dot(&d_pooled);
        let d_logits = softmax_backward(&self.attention, &d_attention);
        grads.w_a += &self.activations.dot(&d_logits);
        let mut d_pre = Array2::zeros(self.activations.raw_dim());
        add_outer(&mut d_pre, 1.0, params.w_a.view(), d_logits.view());
        d_pre.zip_mut_with(&self.activations, |g, &h| *g *= 1.0 - h * h);
        grads.w_v += &d_pre.dot(&self.grid.t());
        let d_guide = d_pre.sum_axis(Axis(1));
        add_outer(&mut grads.w_s, 1.0, d_guide.view(), self.subject.view());
        params.w_s.t().dot(&d_guide)
    }
}

/// Attention-pooled grid feature guided by the expression subject feature,
/// projected to `d` by `w_v`.
pub fn visual_subject_attention(grid: &Array2<f64>, subject: &Array1<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    subject_forward(grid, subject, params).map(|(v, _)| v)
}

/// Grid attention weights, for inspection.
pub fn visual_attention_weights(grid: &Array2<f64>, subject: &Array1<f64>, params: &EncoderParams) -> Result<Array1<f64>> {
    subject_forward(grid, subject, params).map(|(_, t)| t.attention)
}

fn check_neighbors(neighbors: &[Neighbor]) -> Result<()> {
    if neighbors.len() > MAX_NEIGHBORS {
        return Err(MsrlError::validation(format!("{} neighbors, at most {MAX_NEIGHBORS}", neighbors.len())));
    }
    Ok(())
}

/// `[l; mean of neighbor offsets]`, the input of the location map.
pub fn location_input(bbox: &BoundingBox, neighbors: &[Neighbor]) -> Result<Array1<f64>> {
    bbox.validate()?;
    check_neighbors(neighbors)?;
    let mut x = Array1::zeros(LOCATION_INPUT);
    for (k, v) in bbox.location_vector().into_iter().enumerate() {
        x[k] = v;
    }
    if !neighbors.is_empty() {
        let scale = 1.0 / neighbors.len() as f64;
        for n in neighbors {
            for (k, v) in bbox.relative_offset(&n.bbox).into_iter().enumerate() {
                x[OFFSET_DIM + k] += v * scale;
            }
        }
    }
    Ok(x)
}

pub fn location_feature(bbox: &BoundingBox, neighbors: &[Neighbor], params: &EncoderParams) -> Result<Array1<f64>> {
    let x = location_input(bbox, neighbors)?;
    Ok(params.w_l.dot(&x) + &params.b_l)
}

#[derive(Debug, Clone)]
struct RelationTape {
    inputs: Vec<Array1<f64>>,
    /// Winning neighbor per output coordinate.
    argmax: Vec<usize>,
}

fn relation_forward(bbox: &BoundingBox, neighbors: &[Neighbor], params: &EncoderParams) -> Result<(Array1<f64>, RelationTape)> {
    check_neighbors(neighbors)?;
    let d = params.w_r.nrows();
    let inputs: Vec<Array1<f64>> = neighbors
        .iter()
        .map(|n| {
            check_len("neighbor context feature", d, n.context_feature.len())?;
            let mut y = Array1::zeros(d + OFFSET_DIM);
            y.slice_mut(s![..d]).assign(&Array1::from(n.context_feature.clone()));
            for (k, v) in bbox.relative_offset(&n.bbox).into_iter().enumerate() {
                y[d + k] = v;
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    if inputs.is_empty() {
        return Ok((Array1::zeros(d), RelationTape { inputs, argmax: Vec::new() }));
    }
    let mapped: Vec<Array1<f64>> = inputs.iter().map(|y| params.w_r.dot(y) + &params.b_r).collect();
    let mut out = mapped[0].clone();
    let mut argmax = vec![0; d];
    for (j, m) in mapped.iter().enumerate().skip(1) {
        for k in 0..d {
            if m[k] > out[k] {
                out[k] = m[k];
                argmax[k] = j;
            }
        }
    }
    Ok((out, RelationTape { inputs, argmax }))
}

impl RelationTape {
    fn backward(&self, d_out: &Array1<f64>, grads: &mut EncoderParams) {
        if self.inputs.is_empty() {
            return;
        }
        for (k, &j) in self.argmax.iter().enumerate() {
            grads.w_r.row_mut(k).scaled_add(d_out[k], &self.inputs[j]);
            grads.b_r[k] += d_out[k];
        }
    }
}

/// Element-wise max over the mapped neighbors; zero without neighbors.
pub fn relation_feature(bbox: &BoundingBox, neighbors: &[Neighbor], params: &EncoderParams) -> Result<Array1<f64>> {
    relation_forward(bbox, neighbors, params).map(|(v, _)| v)
}

/// Forward cache of one region encoding.
#[derive(Debug, Clone)]
pub struct RegionTape {
    subject: SubjectTape,
    location_input: Array1<f64>,
    relation: RelationTape,
}

impl RegionTape {
    pub fn forward(
        grid: &Array2<f64>,
        bbox: &BoundingBox,
        neighbors: &[Neighbor],
        guide: &Array1<f64>,
        params: &EncoderParams,
    ) -> Result<(Array1<f64>, Self)> {
        let d = params.w_v.nrows();
        let (sb, subject) = subject_forward(grid, guide, params)?;
        let location_input = location_input(bbox, neighbors)?;
        let sl = params.w_l.dot(&location_input) + &params.b_l;
        let (sr, relation) = relation_forward(bbox, neighbors, params)?;
        let mut out = Array1::zeros(3 * d);
        out.slice_mut(s![..d]).assign(&sb);
        out.slice_mut(s![d..2 * d]).assign(&sl);
        out.slice_mut(s![2 * d..]).assign(&sr);
        Ok((out, RegionTape { subject, location_input, relation }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the
    /// guiding expression subject feature.
    pub fn backward(&self, d_out: &Array1<f64>, params: &EncoderParams, grads: &mut EncoderParams) -> Array1<f64> {
        let d = params.w_v.nrows();
        let d_sb = d_out.slice(s![..d]).to_owned();
        let d_sl = d_out.slice(s![d..2 * d]);
        let d_sr = d_out.slice(s![2 * d..]).to_owned();
        add_outer(&mut grads.w_l, 1.0, d_sl, self.location_input.view());
        grads.b_l += &d_sl;
        self.relation.backward(&d_sr, grads);
        self.subject.backward(&d_sb, params, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderDims;
    use ndarray::array;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, 100.0, 100.0).unwrap()
    }

    #[test]
    fn location_vector_examples() {
        assert_eq!(bx(10.0, 20.0, 50.0, 60.0).location_vector(), [0.1, 0.2, 0.5, 0.6, 0.16]);
        assert_eq!(bx(0.0, 0.0, 100.0, 100.0).location_vector(), [0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn location_without_neighbors_pads_zero() {
        let mut p = EncoderParams::zeros(EncoderDims { embed: 2, channels: 2 });
        p.w_l = Array2::from_shape_fn((2, 10), |(r, c)| (r * 10 + c) as f64);
        p.b_l = array![0.5, -0.5];
        let b = bx(10.0, 20.0, 50.0, 60.0);
        let x = location_input(&b, &[]).unwrap();
        assert!(x.slice(s![5..]).iter().all(|&v| v == 0.0));
        let v = location_feature(&b, &[], &p).unwrap();
        let l = array![0.1, 0.2, 0.5, 0.6, 0.16];
        let expect0 = (0..5).map(|c| c as f64 * l[c]).sum::<f64>() + 0.5;
        assert!((v[0] - expect0).abs() < 1e-12);
    }

    fn neighbor(feature: Vec<f64>) -> Neighbor {
        Neighbor { context_feature: feature, bbox: bx(0.0, 0.0, 10.0, 10.0) }
    }

    #[test]
    fn relation_max_pooling() {
        let mut p = EncoderParams::zeros(EncoderDims { embed: 2, channels: 2 });
        // identity on the context part, ignore offsets
        p.w_r[[0, 0]] = 1.0;
        p.w_r[[1, 1]] = 1.0;
        let b = bx(20.0, 20.0, 40.0, 40.0);
        assert_eq!(relation_feature(&b, &[], &p).unwrap(), array![0.0, 0.0]);
        let one = [neighbor(vec![1.0, -1.0])];
        assert_eq!(relation_feature(&b, &one, &p).unwrap(), array![1.0, -1.0]);
        let two = [neighbor(vec![1.0, -1.0]), neighbor(vec![0.0, 0.0])];
        assert_eq!(relation_feature(&b, &two, &p).unwrap(), array![1.0, 0.0]);
    }

    #[test]
    fn uniform_attention_with_zero_maps() {
        let mut p = EncoderParams::zeros(EncoderDims { embed: 2, channels: 3 });
        let grid = array![[1.0, 3.0], [2.0, 4.0], [0.0, -2.0]];
        let a = visual_attention_weights(&grid, &array![1.0, 1.0], &p).unwrap();
        assert_eq!(a, array![0.5, 0.5]);
        p.w_v = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
        // w_v also maps the grid into the attention space, but w_a = 0 keeps logits flat
        let v = visual_subject_attention(&grid, &array![1.0, 1.0], &p).unwrap();
        assert_eq!(v, array![2.0, 2.0]);
    }

    #[test]
    fn single_cell_takes_full_weight() {
        let mut p = EncoderParams::zeros(EncoderDims { embed: 2, channels: 2 });
        p.w_v = Array2::eye(2);
        p.w_a = array![3.0, -1.0];
        let grid = array![[0.7], [-0.2]];
        let a = visual_attention_weights(&grid, &array![0.1, 0.2], &p).unwrap();
        assert_eq!(a, array![1.0]);
        assert_eq!(visual_subject_attention(&grid, &array![0.1, 0.2], &p).unwrap(), array![0.7, -0.2]);
    }
}
