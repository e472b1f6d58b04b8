//! The self-paced ranking objective and its gradient.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::domain::{GroupCatalog, Modality, TripletBatch};
use crate::encoders::{ContextEncoder, EncoderParams, ExpressionDropout, ExpressionEncoding, LinearContext, PairTape};
use crate::error::{MsrlError, Result};
use crate::scheduler::{group_frobenius_norm, l1_norm, PrioritySet, ScheduleState};

/// Hinge `max(0, Δ + neg - pos)`.
pub fn triplet_margin(score_pos: f64, score_neg: f64, delta: f64) -> f64 {
    (delta + score_neg - score_pos).max(0.0)
}

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "msrl")]
    Msrl,
    /// No across-group term.
    #[serde(rename = "msrl-wg")]
    MsrlWg,
    /// No within-group term.
    #[serde(rename = "msrl-ag")]
    MsrlAg,
    /// Per-group counts from the threshold rule, members drawn at random.
    #[serde(rename = "randsel-wg")]
    RandselWg,
    /// Lowest-relevance members, group quotas drawn at random.
    #[serde(rename = "randsel-ag")]
    RandselAg,
    /// Same-image negatives, every pair selected.
    #[serde(rename = "per-image-baseline")]
    PerImageBaseline,
    /// Group negatives, every pair selected.
    #[serde(rename = "group-random")]
    GroupRandom,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Msrl,
        Variant::MsrlWg,
        Variant::MsrlAg,
        Variant::RandselWg,
        Variant::RandselAg,
        Variant::PerImageBaseline,
        Variant::GroupRandom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Msrl => "msrl",
            Variant::MsrlWg => "msrl-wg",
            Variant::MsrlAg => "msrl-ag",
            Variant::RandselWg => "randsel-wg",
            Variant::RandselAg => "randsel-ag",
            Variant::PerImageBaseline => "per-image-baseline",
            Variant::GroupRandom => "group-random",
        }
    }

    /// Whether the `((λ1+λ2)/2)‖U‖₁` term is present.
    pub fn within_group_term(&self) -> bool {
        !matches!(self, Variant::MsrlAg)
    }

    /// Whether the `γ‖U‖_{F,1}` term is present.
    pub fn across_group_term(&self) -> bool {
        !matches!(self, Variant::MsrlWg | Variant::RandselWg)
    }

    /// Variants that train on every eligible pair.
    pub fn selects_all(&self) -> bool {
        matches!(self, Variant::PerImageBaseline | Variant::GroupRandom)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MsrlError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            MsrlError::validation(format!("unknown variant '{s}', expected one of: {}", names.join(", ")))
        })
    }
}

/// Dropout masks for every expression encoded in one batch.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    pub anchors: Vec<ExpressionDropout>,
    /// Masks for expression columns; `None` for region columns.
    pub columns: Vec<Option<ExpressionDropout>>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    /// `E`.
    pub energy: f64,
    /// `Σ U Q` over selected entries.
    pub margin_sum: f64,
    /// Selected entries with a positive margin.
    pub active: usize,
    pub grads: EncoderParams,
}

/// Forward scores of one batch under fixed priorities.
struct BatchForward {
    anchors: Vec<ExpressionEncoding>,
    columns: Vec<Option<ExpressionEncoding>>,
}

impl BatchForward {
    fn encode(
        context: &dyn ContextEncoder,
        catalog: &GroupCatalog,
        batch: &TripletBatch,
        params: &EncoderParams,
        dropout: Option<&DropoutPlan>,
    ) -> Result<Self> {
        let anchors = batch
            .anchors
            .iter()
            .enumerate()
            .map(|(i, &a)| ExpressionEncoding::with(context, &catalog.pair(a).expression, params, dropout.map(|d| &d.anchors[i])))
            .collect::<Result<_>>()?;
        let columns = (0..batch.n_negatives())
            .map(|j| match batch.column(j) {
                (neg, Modality::Textual) => {
                    let mask = dropout.and_then(|d| d.columns[j].as_ref());
                    ExpressionEncoding::with(context, &catalog.pair(neg.pair).expression, params, mask).map(Some)
                }
                (_, Modality::Visual) => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(BatchForward { anchors, columns })
    }
}

/// Evaluates `E = Σ U Q - ((λ1+λ2)/2)‖U‖₁ - γ‖U‖_{F,1}` and its gradient with
/// respect to every parameter block. The priorities are constants here.
pub fn msrl_objective(
    catalog: &GroupCatalog,
    batch: &TripletBatch,
    params: &EncoderParams,
    priorities: &PrioritySet,
    state: &ScheduleState,
    variant: Variant,
) -> Result<ObjectiveValue> {
    msrl_objective_with(&LinearContext, catalog, batch, params, priorities, state, variant, None)
}

#[allow(clippy::too_many_arguments)]
pub fn msrl_objective_with(
    context: &dyn ContextEncoder,
    catalog: &GroupCatalog,
    batch: &TripletBatch,
    params: &EncoderParams,
    priorities: &PrioritySet,
    state: &ScheduleState,
    variant: Variant,
    dropout: Option<&DropoutPlan>,
) -> Result<ObjectiveValue> {
    let shape = (batch.anchors.len(), batch.n_negatives());
    if priorities.shape() != shape || priorities.n_groups() != catalog.n_groups() {
        return Err(MsrlError::validation(format!(
            "priorities {} x {:?} do not match batch {} x {:?}",
            priorities.n_groups(),
            priorities.shape(),
            catalog.n_groups(),
            shape
        )));
    }
    let delta = state.constants().delta_margin;
    let mut energy = 0.0;
    let l1 = l1_norm(priorities);
    if variant.within_group_term() {
        energy -= (state.lambda1() + state.lambda2()) / 2.0 * l1;
    }
    if variant.across_group_term() {
        energy -= state.gamma() * group_frobenius_norm(priorities);
    }
    let mut grads = EncoderParams::zeros(params.dims());
    if l1 == 0.0 {
        return Ok(ObjectiveValue { energy, margin_sum: 0.0, active: 0, grads });
    }

    let fwd = BatchForward::encode(context, catalog, batch, params, dropout)?;
    let mut positives: Vec<Option<(f64, PairTape)>> = (0..shape.0).map(|_| None).collect();
    let mut d_anchor: Vec<Array1<f64>> = fwd.anchors.iter().map(|e| Array1::zeros(e.features.len())).collect();
    let mut d_column: Vec<Option<Array1<f64>>> = fwd.columns.iter().map(|c| c.as_ref().map(|e| Array1::zeros(e.features.len()))).collect();
    let mut d_positive = vec![0.0; shape.0];
    let mut margin_sum = 0.0;
    let mut active = 0;

    for (_, i, j) in priorities.selected() {
        let anchor = batch.anchors[i];
        if positives[i].is_none() {
            positives[i] = Some(PairTape::forward(&catalog.pair(anchor).region, &fwd.anchors[i], params)?);
        }
        let pos = positives[i].as_ref().map(|(f, _)| *f).unwrap_or_default();
        let (neg, modality) = batch.column(j);
        let (f_neg, tape) = match modality {
            // anchor region against the negative expression
            Modality::Textual => {
                let enc = fwd.columns[j].as_ref().ok_or_else(|| MsrlError::validation("expression column not encoded"))?;
                PairTape::forward(&catalog.pair(anchor).region, enc, params)?
            }
            // negative region against the anchor expression
            Modality::Visual => PairTape::forward(&catalog.pair(neg.pair).region, &fwd.anchors[i], params)?,
        };
        let q = triplet_margin(pos, f_neg, delta);
        margin_sum += q;
        if q > 0.0 {
            active += 1;
            d_positive[i] -= 1.0;
            let ds = tape.backward(1.0, params, &mut grads);
            match modality {
                Modality::Textual => {
                    if let Some(d) = d_column[j].as_mut() {
                        *d += &ds;
                    }
                }
                Modality::Visual => d_anchor[i] += &ds,
            }
        }
    }
    for (i, entry) in positives.iter().enumerate() {
        if let Some((_, tape)) = entry {
            if d_positive[i] != 0.0 {
                d_anchor[i] += &tape.backward(d_positive[i], params, &mut grads);
            }
        }
    }
    for (enc, d) in fwd.anchors.iter().zip(&d_anchor) {
        enc.backward(context, d, params, &mut grads);
    }
    for (enc, d) in fwd.columns.iter().zip(&d_column) {
        if let (Some(enc), Some(d)) = (enc, d) {
            enc.backward(context, d, params, &mut grads);
        }
    }
    energy += margin_sum;
    Ok(ObjectiveValue { energy, margin_sum, active, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        assert_eq!(triplet_margin(0.9, 0.3, 0.1), 0.0);
        assert!((triplet_margin(0.4, 0.38, 0.1) - 0.08).abs() < 1e-15);
        assert!((triplet_margin(0.7, 0.7, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("randsel-ag"));
    }

    #[test]
    fn regularizer_toggles() {
        assert!(Variant::Msrl.within_group_term() && Variant::Msrl.across_group_term());
        assert!(!Variant::MsrlWg.across_group_term());
        assert!(!Variant::MsrlAg.within_group_term());
    }
}
