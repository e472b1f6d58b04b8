#![allow(dead_code)]

use msrl_core::domain::{construct_batch, BatchConfig, GroupCatalog, IouFilter, NegativeSource, TripletBatch};
use msrl_core::encoders::{EncoderDims, EncoderParams, InitMode};
use msrl_core::io::config::WorldSpec;
use msrl_core::io::{DataSpec, ExperimentConfig};
use msrl_core::objective::Variant;
use msrl_core::relevance::{relevance_matrices, BatchFeatures, RelevanceConfig, RelevanceMatrixSet};
use msrl_core::rng::{stream_rng, Stream};
use msrl_core::scheduler::{PrioritySet, ScheduleConstants, ScheduleState};
use msrl_core::trainer::TrainerConfig;
use msrl_core::world::{AttributeSchema, SyntheticCatalog, World, WorldLayout};

pub fn schema(d: usize, noise: f64) -> AttributeSchema {
    AttributeSchema { n_attributes: 3, values_per_attribute: vec![2, 2, 2], d, noise_sigma: noise }
}

/// Two groups of `pairs` members, four objects per image.
pub fn small_world(seed: u64, d: usize, noise: f64, pairs: usize) -> SyntheticCatalog {
    let layout = WorldLayout { n_groups: 2, grid_side: 2, objects_per_image: 4, subject_weight: [1.0, 1.0] };
    let world = World::new(schema(d, noise), layout, &mut stream_rng(seed, Stream::Codebook)).unwrap();
    world.sample(pairs, &mut stream_rng(seed, Stream::TrainEntities)).unwrap()
}

pub fn dims_of(catalog: &GroupCatalog) -> EncoderDims {
    let d = catalog.dims();
    EncoderDims { embed: d.embed, channels: d.channels }
}

pub fn random_params(catalog: &GroupCatalog, seed: u64) -> EncoderParams {
    EncoderParams::init(dims_of(catalog), InitMode::ScaledUniform, &mut stream_rng(seed, Stream::Init))
}

pub fn batch_config(anchors: usize, negatives: usize) -> BatchConfig {
    BatchConfig { anchors, negatives, split_ratio: 0.5, iou_filter: IouFilter::Overlap, source: NegativeSource::Group }
}

pub struct Instance {
    pub catalog: GroupCatalog,
    pub batch: TripletBatch,
    pub params: EncoderParams,
    pub relevance: RelevanceMatrixSet,
    pub priorities: PrioritySet,
    pub state: ScheduleState,
}

/// A batch where every eligible pair is selected and every margin is
/// violated by a wide gap, so the objective is smooth around `params`.
pub fn smooth_instance(seed: u64) -> Instance {
    let catalog = small_world(seed, 8, 0.3, 12).catalog;
    let batch = construct_batch(&catalog, &mut stream_rng(seed, Stream::Batch), &batch_config(3, 12)).unwrap();
    let params = random_params(&catalog, seed);
    let features = BatchFeatures::encode(&catalog, &batch, &params).unwrap();
    let relevance = relevance_matrices(&catalog, &batch, &features, &RelevanceConfig::default()).unwrap();
    let priorities = PrioritySet::all_unmasked(&relevance);
    let constants = ScheduleConstants { delta_margin: 3.0, ..ScheduleConstants::default() };
    let state = ScheduleState::with_values(0.6, 0.7, 0.8, constants).unwrap();
    Instance { catalog, batch, params, relevance, priorities, state }
}

/// Central differences of `f` for every parameter value.
pub fn numeric_gradient(params: &EncoderParams, h: f64, f: impl Fn(&EncoderParams) -> f64) -> EncoderParams {
    let mut grads = EncoderParams::zeros(params.dims());
    let mut probe = params.clone();
    let names: Vec<&str> = params.blocks().iter().map(|(n, _)| *n).collect();
    for (b, name) in names.iter().enumerate() {
        let len = params.blocks()[b].1.len();
        for k in 0..len {
            let original = params.blocks()[b].1.iter().nth(k).copied().unwrap();
            set_value(&mut probe, b, k, original + h);
            let plus = f(&probe);
            set_value(&mut probe, b, k, original - h);
            let minus = f(&probe);
            set_value(&mut probe, b, k, original);
            set_value(&mut grads, b, k, (plus - minus) / (2.0 * h));
        }
        let _ = name;
    }
    grads
}

fn set_value(params: &mut EncoderParams, block: usize, k: usize, v: f64) {
    let mut blocks = params.blocks_mut();
    *blocks[block].1.iter_mut().nth(k).unwrap() = v;
}

/// Worst entry per block under `|a - n| <= rtol * max(|a|, |n|) + atol`.
pub fn compare_gradients(analytic: &EncoderParams, numeric: &EncoderParams, rtol: f64, atol: f64) -> Result<(), String> {
    for ((name, a), (_, n)) in analytic.blocks().iter().zip(numeric.blocks().iter()) {
        for (k, (&x, &y)) in a.iter().zip(n.iter()).enumerate() {
            if (x - y).abs() > rtol * x.abs().max(y.abs()) + atol {
                return Err(format!("block {name} entry {k}: analytic {x:e} vs numeric {y:e}"));
            }
        }
    }
    Ok(())
}

pub fn block_is_exercised(grads: &EncoderParams) -> Vec<(&'static str, bool)> {
    grads.blocks().iter().map(|(name, g)| (*name, g.iter().any(|&v| v != 0.0))).collect()
}

pub fn desk_config(variant: Variant, seed: u64, iterations: usize) -> ExperimentConfig {
    let trainer = TrainerConfig { variant, seed, iterations, ..TrainerConfig::default() };
    ExperimentConfig::new(DataSpec::World(WorldSpec::desk()), trainer)
}
