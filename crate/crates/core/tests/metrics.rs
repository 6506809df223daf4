use goalnav::evaluator::{aggregate_metrics, EpisodeResult, Metrics};
use proptest::prelude::*;

fn outcome(success: bool, steps: u32) -> EpisodeResult {
    EpisodeResult {
        success,
        steps,
        collisions: 0,
        dtg_m: if success { 0.5 } else { 3.0 },
        path_cells: steps / 2,
        shortest_cells: steps / 3,
        goal: 3,
    }
}

fn row(successes: &[u32], failures: &[u32]) -> Metrics {
    let results: Vec<_> = successes
        .iter()
        .map(|&s| outcome(true, s))
        .chain(failures.iter().map(|&s| outcome(false, s)))
        .collect();
    aggregate_metrics(&results).unwrap()
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

#[test]
fn real_world_table_rows() {
    let os = row(&[36, 35, 86], &[164, 55]);
    let rgbs = row(&[40, 49, 94], &[71, 140]);
    let rl = row(&[29, 99, 40], &[61, 39]);
    let pirl = row(&[], &[66, 81, 82, 225, 74]);
    let expect = [(&os, 0.019, 75.2, 0.6), (&rgbs, 0.016, 78.8, 0.6), (&rl, 0.018, 53.6, 0.6), (&pirl, 0.0, 105.6, 0.0)];
    for (m, sds, actions, sr) in expect {
        assert_eq!(round3(m.sds), sds, "{m:?}");
        assert_eq!(round3(m.mean_actions), actions, "{m:?}");
        assert_eq!(m.sr, sr);
    }
    assert_eq!((os.n_ts, os.n_as), (3, 157));
    assert_eq!(pirl.n_as, 0);
}

#[test]
fn empty_list_is_an_error() {
    assert!(aggregate_metrics(&[]).is_err());
}

/// `q` is the double nearest to `num / den`: its residual is no larger than
/// either neighbor's.
fn correctly_rounded(q: f64, num: u64, den: u64) -> bool {
    let (n, d) = (num as f64, den as f64);
    let residual = |x: f64| x.mul_add(d, -n).abs();
    let up = f64::from_bits(q.to_bits() + 1);
    let down = if q > 0.0 { f64::from_bits(q.to_bits() - 1) } else { -up };
    residual(q) <= residual(up) && residual(q) <= residual(down)
}

fn arb_result() -> impl Strategy<Value = EpisodeResult> {
    (any::<bool>(), 1u32..=225, 0u32..150, 0u32..120, 0u32..60).prop_flat_map(|(success, steps, path, shortest, goal)| {
        let dtg = if success { 0.0..=1.0 } else { 0.0..=30.0 };
        (Just(success), Just(steps), 0..=steps, dtg, Just(path), Just(shortest), Just(goal as usize)).prop_map(
            |(success, steps, collisions, dtg_m, path_cells, shortest_cells, goal)| EpisodeResult {
                success,
                steps,
                collisions,
                dtg_m,
                path_cells,
                shortest_cells,
                goal,
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aggregate_invariants(results in prop::collection::vec(arb_result(), 1..40)) {
        let m = aggregate_metrics(&results).unwrap();
        let n_ts = results.iter().filter(|r| r.success).count() as u64;
        let n_as: u64 = results.iter().filter(|r| r.success).map(|r| u64::from(r.steps)).sum();
        prop_assert_eq!(m.n_episodes, results.len());
        prop_assert_eq!(m.n_ts, n_ts);
        prop_assert_eq!(m.n_as, n_as);
        prop_assert!((0.0..=1.0).contains(&m.sr));
        prop_assert!(m.spl >= 0.0 && m.spl <= m.sr + 1e-15, "spl {} sr {}", m.spl, m.sr);
        prop_assert!(m.c >= 0.0 && m.dtg >= 0.0);
        prop_assert!(m.mean_actions >= 1.0 && m.mean_actions <= 225.0);
        for r in &results {
            let t = r.spl_term();
            prop_assert!((0.0..=1.0).contains(&t));
            let cap = if r.success { 1.0 } else { 0.0 };
            prop_assert!(t <= cap);
        }
        if n_as == 0 {
            prop_assert_eq!(m.sds, 0.0);
            prop_assert_eq!(m.n_ts, 0);
        } else {
            prop_assert!(correctly_rounded(m.sds, m.n_ts, m.n_as), "sds {} for {}/{}", m.sds, m.n_ts, m.n_as);
            prop_assert!(m.sds > 0.0 && m.sds <= 1.0);
        }
    }
}
