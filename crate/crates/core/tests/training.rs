mod common;

use common::{desk_config, random_params, small_world, smooth_instance};
use msrl_core::domain::Modality;
use msrl_core::io::config::build_eval_set;
use msrl_core::io::{checkpoint_from_text, checkpoint_to_text, metrics_to_csv};
use msrl_core::metrics::{accuracy, EvalSet};
use msrl_core::objective::{msrl_objective, Variant};
use msrl_core::rng::{stream_rng, Stream};
use msrl_core::scheduler::{PrioritySet, ScheduleConstants, ScheduleState};
use msrl_core::trainer::{Trainer, TrainerConfig};
use msrl_core::world::{World, WorldLayout};
use ndarray::Array2;

fn desk(variant: Variant, seed: u64, iterations: usize) -> (msrl_core::domain::GroupCatalog, EvalSet, TrainerConfig) {
    let cfg = desk_config(variant, seed, iterations);
    let (catalog, eval) = cfg.materialize(std::path::Path::new(".")).unwrap();
    (catalog, eval, cfg.trainer)
}

#[test]
fn theta_step_uses_priorities_from_the_previous_iteration() {
    let (catalog, eval, mut config) = desk(Variant::Msrl, 2, 120);
    config.schedule.update_period = 10;
    let mut trainer = Trainer::new(&catalog, &eval, config).unwrap();
    let mut previous: Option<PrioritySet> = None;
    let mut checked = 0;
    trainer
        .run_until(120, &mut |rec| {
            assert_eq!(rec.priorities_computed_at, rec.iteration);
            if let Some(p) = &previous {
                assert_eq!(p, rec.priorities_used);
            }
            let r = rec.next_relevance;
            let s = rec.selection_schedule;
            let (m, n) = r.shape();
            let brute: Vec<Array2<bool>> = (0..r.n_groups())
                .map(|g| {
                    Array2::from_shape_fn((m, n), |(i, j)| {
                        let lambda = match r.modality(j) {
                            Modality::Visual => s.lambda1(),
                            Modality::Textual => s.lambda2(),
                        };
                        r.is_unmasked(g, i, j) && r.get(g, i, j).unwrap() < lambda + s.constants().tau * s.gamma()
                    })
                })
                .collect();
            for (g, b) in brute.iter().enumerate() {
                assert_eq!(rec.next_priorities.group(g), b);
            }
            assert!(rec.params.first_non_finite().is_none());
            previous = Some(rec.next_priorities.clone());
            checked += 1;
        })
        .unwrap();
    assert_eq!(checked, 120);
}

#[test]
fn schedule_moves_only_on_update_steps_and_stays_capped() {
    let (catalog, eval, mut config) = desk(Variant::Msrl, 4, 300);
    config.schedule.update_period = 25;
    let mut trainer = Trainer::new(&catalog, &eval, config).unwrap();
    let mut prev = trainer.state().schedule;
    for _ in 0..300 {
        trainer.step(&mut |_| {}).unwrap();
        let s = trainer.state().schedule;
        let it = trainer.state().iteration;
        if it % 25 != 0 {
            assert_eq!(s, prev, "schedule moved at iteration {it}");
        } else {
            assert!(s.lambda1() >= prev.lambda1() && s.lambda2() >= prev.lambda2() && s.gamma() > prev.gamma().min(0.999_999));
        }
        assert!(s.lambda1() <= 1.0 && s.lambda2() <= 1.0 && s.gamma() <= 1.0);
        prev = s;
    }
    assert_eq!(prev.gamma(), 1.0);
}

const DESCENT_RATE: f64 = 1e-4;

#[test]
fn plain_gradient_steps_reduce_violated_margins() {
    for seed in 0..20 {
        let inst = smooth_instance(seed);
        let u = &inst.priorities;
        let mut params = inst.params.clone();
        let q = |p: &msrl_core::encoders::EncoderParams| {
            msrl_objective(&inst.catalog, &inst.batch, p, u, &inst.state, Variant::Msrl).unwrap()
        };
        let mut last = q(&params).margin_sum;
        for step in 0..10 {
            let value = q(&params);
            assert_eq!(value.active, u.selected().count(), "seed {seed} step {step}: left the smooth region");
            params.add_scaled(&value.grads, -DESCENT_RATE);
            let next = q(&params).margin_sum;
            assert!(next < last, "seed {seed} step {step}: {next} !< {last}");
            last = next;
        }
    }
}

#[test]
fn one_satisfied_triplet_leaves_only_the_regularizers() {
    let inst = smooth_instance(9);
    let constants = ScheduleConstants { delta_margin: 1e-6, ..ScheduleConstants::default() };
    let state = ScheduleState::with_values(0.6, 0.7, 0.8, constants).unwrap();
    let (m, n) = inst.priorities.shape();
    let mut found = false;
    for (g, i, j) in inst.priorities.selected() {
        let mut sel = vec![Array2::from_elem((m, n), false); inst.priorities.n_groups()];
        sel[g][[i, j]] = true;
        let u = PrioritySet::new(sel, &inst.relevance).unwrap();
        let v = msrl_objective(&inst.catalog, &inst.batch, &inst.params, &u, &state, Variant::Msrl).unwrap();
        if v.margin_sum == 0.0 {
            assert_eq!(v.energy, -(0.6 + 0.7) / 2.0 - 0.8);
            assert!(v.grads.squared_norm() == 0.0);
            found = true;
            break;
        }
    }
    assert!(found, "no satisfied triplet in the fixture");
}

#[test]
fn seeded_runs_repeat_byte_for_byte() {
    let (catalog, eval, config) = desk(Variant::Msrl, 1, 200);
    let csv = || {
        let mut t = Trainer::new(&catalog, &eval, config.clone()).unwrap();
        t.run().unwrap();
        metrics_to_csv(&t.state().metrics, catalog.n_groups()).unwrap()
    };
    let (a, b) = (csv(), csv());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 3);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    for variant in [Variant::Msrl, Variant::RandselAg] {
        let (catalog, eval, mut config) = desk(variant, 6, 200);
        config.dropout = 0.2;
        config.snapshot_period = 30;
        let mut straight = Trainer::new(&catalog, &eval, config.clone()).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::new(&catalog, &eval, config.clone()).unwrap();
        first.run_until(100, &mut |_| {}).unwrap();
        let text = checkpoint_to_text(&config, first.state()).unwrap();
        let restored = checkpoint_from_text(&text).unwrap();
        assert_eq!(&restored.state, first.state());
        assert_eq!(restored.config, config);
        let mut second = Trainer::resume(&catalog, &eval, restored.config, restored.state).unwrap();
        second.run().unwrap();

        assert_eq!(
            metrics_to_csv(&straight.state().metrics, 8).unwrap(),
            metrics_to_csv(&second.state().metrics, 8).unwrap()
        );
        assert_eq!(checkpoint_to_text(&config, straight.state()).unwrap(), checkpoint_to_text(&config, second.state()).unwrap());
    }
}

#[test]
fn snapshot_zero_echoes_initial_schedule() {
    let (catalog, eval, config) = desk(Variant::MsrlAg, 3, 10);
    let t = Trainer::new(&catalog, &eval, config).unwrap();
    let s = &t.state().metrics[0];
    assert_eq!((s.iteration, s.lambda1, s.lambda2, s.gamma), (0, 0.5, 0.5, 0.5));
    assert_eq!(s.selected_total, 0.0);
    assert_eq!(s.mean_r_selected, None);
    assert!(s.mean_r_all.is_some_and(f64::is_finite));
    assert_eq!(s.selected_per_group.iter().sum::<f64>(), s.selected_total);
}

#[test]
fn untrained_encoder_is_near_chance_on_four_candidates() {
    let layout = WorldLayout { n_groups: 2, grid_side: 2, objects_per_image: 1, subject_weight: [1.0, 1.0] };
    let world = World::new(common::schema(16, 0.5), layout, &mut stream_rng(11, Stream::Codebook)).unwrap();
    let eval_catalog = world.sample(300, &mut stream_rng(11, Stream::EvalEntities)).unwrap().catalog;
    let eval = build_eval_set(eval_catalog, 3, 11).unwrap();
    assert!(eval.items().iter().all(|i| i.candidates.len() == 4));
    let train_like = small_world(11, 16, 0.5, 4).catalog;
    let mut accs = Vec::new();
    for seed in 0..5 {
        accs.push(accuracy(&random_params(&train_like, 1000 + seed), &eval).unwrap());
    }
    let n = eval.items().len() as f64 * accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let half_width = 3.0 * (0.25 * 0.75 / n).sqrt();
    assert!((mean - 0.25).abs() < half_width, "mean accuracy {mean} outside 0.25 +- {half_width} ({accs:?})");
}
