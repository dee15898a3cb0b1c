use plantstruct::assemble::{
    greedy_run, greedy_select, quality_from_stats, stats_from_footprints, CompactCandidates, CoverageState,
    LeafFootprint, QualityParams, ViewFootprint,
};
use proptest::prelude::*;

const PIXELS: usize = 120;
const VIEWS: usize = 2;

fn pixel_set() -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::btree_set(0u32..PIXELS as u32, 0..30).prop_map(|s| s.into_iter().collect())
}

fn footprint() -> impl Strategy<Value = LeafFootprint> {
    proptest::collection::vec((pixel_set(), pixel_set()), VIEWS).prop_map(|views| LeafFootprint {
        views: views.into_iter().map(|(interior, exterior)| ViewFootprint { interior, exterior }).collect(),
    })
}

fn candidates() -> impl Strategy<Value = Vec<Vec<LeafFootprint>>> {
    proptest::collection::vec(proptest::collection::vec(footprint(), 1..4), 1..4)
}

fn full_quality(sets: &[Vec<LeafFootprint>], chosen: &[(usize, usize)], params: &QualityParams) -> f64 {
    let refs: Vec<&LeafFootprint> = chosen.iter().map(|&(t, c)| &sets[t][c]).collect();
    quality_from_stats(&stats_from_footprints(&refs, &[PIXELS; VIEWS]), params)
}

fn exhaustive(sets: &[Vec<LeafFootprint>], params: &QualityParams) -> f64 {
    fn go(sets: &[Vec<LeafFootprint>], t: usize, chosen: &mut Vec<(usize, usize)>, params: &QualityParams) -> f64 {
        if t == sets.len() {
            return full_quality(sets, chosen, params);
        }
        let mut best = go(sets, t + 1, chosen, params);
        for c in 0..sets[t].len() {
            chosen.push((t, c));
            best = best.max(go(sets, t + 1, chosen, params));
            chosen.pop();
        }
        best
    }
    go(sets, 0, &mut Vec::new(), params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn incremental_stats_match_full_recount(
        sets in candidates(),
        picks in proptest::collection::vec((0usize..4, 0usize..4), 0..5),
    ) {
        let params = QualityParams::default();
        let compact = CompactCandidates::new(&sets);
        let mut state = CoverageState::new(&compact);
        for (t, c) in picks {
            let (t, c) = (t % sets.len(), c % sets[t % sets.len()].len());
            let predicted = state.stats_with(t, c);
            state.add(t, c);
            prop_assert_eq!(state.stats(), &predicted[..]);
            let refs: Vec<&LeafFootprint> = state.selected().iter().map(|&(t, c)| &sets[t][c]).collect();
            prop_assert_eq!(state.stats(), &stats_from_footprints(&refs, &[PIXELS; VIEWS])[..]);
            prop_assert_eq!(state.quality(&params), full_quality(&sets, state.selected(), &params));
        }
    }

    #[test]
    fn greedy_accepts_only_improvements(sets in candidates(), seed in any::<u64>()) {
        let params = QualityParams::default();
        let compact = CompactCandidates::new(&sets);
        let state = greedy_run(&compact, &params, seed);
        let mut q = 0.0;
        let mut tips = Vec::new();
        for k in 1..=state.selected().len() {
            let next = full_quality(&sets, &state.selected()[..k], &params);
            prop_assert!(next > q);
            q = next;
            tips.push(state.selected()[k - 1].0);
        }
        tips.sort_unstable();
        tips.dedup();
        prop_assert_eq!(tips.len(), state.selected().len(), "at most one leaf per tip");
    }

    #[test]
    fn best_of_runs_never_beats_the_optimum(sets in candidates(), seed in any::<u64>()) {
        let params = QualityParams::default();
        let compact = CompactCandidates::new(&sets);
        let best = greedy_select(&compact, &params, 50, seed);
        let opt = exhaustive(&sets, &params);
        prop_assert!(best.quality <= opt + 1e-9);
        prop_assert!(best.quality >= 0.0);
        prop_assert_eq!(best.quality, full_quality(&sets, &best.chosen, &params));
    }
}

#[test]
fn selection_does_not_depend_on_thread_count() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let sets: Vec<Vec<LeafFootprint>> = (0..6)
        .map(|_| {
            (0..5)
                .map(|_| LeafFootprint {
                    views: (0..VIEWS)
                        .map(|_| {
                            let mut interior: Vec<u32> = (0..25).map(|_| rng.random_range(0..PIXELS as u32)).collect();
                            let mut exterior: Vec<u32> = (0..8).map(|_| rng.random_range(0..PIXELS as u32)).collect();
                            interior.sort_unstable();
                            interior.dedup();
                            exterior.sort_unstable();
                            exterior.dedup();
                            ViewFootprint { interior, exterior }
                        })
                        .collect(),
                })
                .collect()
        })
        .collect();
    let compact = CompactCandidates::new(&sets);
    let params = QualityParams::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| greedy_select(&compact, &params, 300, 17))
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}
