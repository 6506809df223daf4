use std::f64::consts::PI;
use std::sync::Arc;

use goalnav::simcore::{sample_episode, Action, SamplerConfig, SensorConfig, SimState};
use goalnav::worldgen::{generate_scene, resample_instance_colors, GenConfig};
use goalnav::{Granularity, Taxonomy};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn actions() -> impl proptest::strategy::Strategy<Value = Vec<Action>> {
    // stop is rare so most sequences run for a while
    let one = prop_oneof![
        6 => Just(Action::MoveForward),
        3 => Just(Action::TurnLeft),
        3 => Just(Action::TurnRight),
        2 => Just(Action::MoveBackward),
        1 => Just(Action::Stop),
    ];
    prop::collection::vec(one, 0..260)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dynamics_invariants(scene_seed in 0u64..30, spec_seed in any::<u64>(), plan in actions()) {
        let tax = Arc::new(Taxonomy::desk_default());
        let scene = Arc::new(generate_scene(scene_seed, &GenConfig::default(), &tax).unwrap());
        let spec = sample_episode(&scene, &tax, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(spec_seed)).unwrap();
        let sensors = SensorConfig { granularity: Granularity::Fine, color: true };
        let (mut sim, first) = SimState::reset(spec.clone(), Arc::clone(&tax), sensors).unwrap();
        prop_assert_eq!(first.gps, [0.0; 3]);
        prop_assert_eq!(first.compass, 0.0);
        let (mut twin, _) = SimState::reset(spec.clone(), Arc::clone(&tax), sensors).unwrap();
        let shifted_spec = goalnav::simcore::EpisodeSpec { scene: Arc::new(resample_instance_colors(&scene, spec_seed)), ..spec.clone() };
        let (mut shifted, _) = SimState::reset(shifted_spec, Arc::clone(&tax), sensors).unwrap();

        // dead reckoning in the start frame: forward is +x, left is +y
        let (mut fx, mut fy, mut turns) = (0i32, 0i32, 0i32);
        let mut collisions = 0;
        let mut last = None;
        for &a in &plan {
            if sim.is_done() {
                prop_assert!(sim.step(a).is_err());
                break;
            }
            let (obs, info) = sim.step(a).unwrap();
            let (obs2, info2) = twin.step(a).unwrap();
            prop_assert_eq!(&obs, &obs2);
            prop_assert_eq!(info, info2);
            let (obs3, info3) = shifted.step(a).unwrap();
            prop_assert_eq!(&obs.semantic, &obs3.semantic);
            prop_assert_eq!(info, info3);

            prop_assert!(scene.is_walkable(sim.pose().cell));
            match a {
                Action::TurnLeft => turns += 1,
                Action::TurnRight => turns -= 1,
                Action::MoveForward | Action::MoveBackward if !info.collided => {
                    let s = if a == Action::MoveForward { 1 } else { -1 };
                    let (ux, uy) = [(1, 0), (0, 1), (-1, 0), (0, -1)][turns.rem_euclid(4) as usize];
                    fx += s * ux;
                    fy += s * uy;
                }
                _ => {}
            }
            if info.collided {
                prop_assert!(matches!(a, Action::MoveForward | Action::MoveBackward));
                collisions += 1;
            }
            prop_assert_eq!(info.collisions_total, collisions);
            prop_assert_eq!(obs.gps, [f64::from(fx) * 0.25, f64::from(fy) * 0.25, 0.0]);
            let expect_compass = [0.0, PI / 2.0, PI, -PI / 2.0][turns.rem_euclid(4) as usize];
            prop_assert_eq!(obs.compass, expect_compass);
            prop_assert!(obs.compass > -PI && obs.compass <= PI);
            prop_assert!(info.steps_taken <= spec.max_steps);
            if info.success {
                prop_assert!(info.done && a == Action::Stop);
            }
            if a == Action::Stop {
                prop_assert!(info.done);
            }
            last = Some(info);
        }
        if let Some(info) = last {
            prop_assert_eq!(info.done, sim.is_done());
            if info.done && !info.success && plan.get(info.steps_taken as usize - 1) != Some(&Action::Stop) {
                prop_assert_eq!(info.steps_taken, spec.max_steps);
            }
        }
    }
}
