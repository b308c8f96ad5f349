use approx::assert_abs_diff_eq;
use cntrack::affinity::OracleScorer;
use cntrack::ingest::{synthesize, ScenarioSpec};
use cntrack::metrics::{evaluate, TrackBox};
use cntrack::model::BoundingBox;
use cntrack::mpn::focal_loss;
use cntrack::pipeline::{track, PipelineConfig};
use cntrack::solver::{exact_round, greedy_round, LabelOracle, RoundingProblem};
use cntrack::stitch::ClipPlan;
use proptest::prelude::*;

fn problem(max_nodes: usize, max_edges: usize) -> impl Strategy<Value = RoundingProblem> {
    (2..=max_nodes).prop_flat_map(move |n| {
        proptest::collection::btree_map((0..n, 0..n), 0.0..1.0f64, 0..=max_edges).prop_map(move |m| {
            RoundingProblem {
                n_nodes: n,
                edges: m.into_iter().filter(|((u, v), _)| u != v).map(|((u, v), s)| (u, v, s)).collect(),
            }
        })
    })
}

fn boxes(rows: &[(u32, u64, f64)]) -> Vec<TrackBox> {
    rows.iter()
        .map(|&(frame, id, x)| TrackBox {
            frame,
            id,
            bbox: BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_is_feasible_and_exact_never_loses(p in problem(9, 14), eps in 0.3..0.9f64) {
        let g = greedy_round(&p, eps).unwrap();
        let e = exact_round(&p, eps).unwrap();
        prop_assert!(p.is_feasible(&g));
        prop_assert!(p.is_feasible(&e));
        prop_assert!(p.objective(&e) <= p.objective(&g) + 1e-12);
    }

    #[test]
    fn focal_loss_shrinks_with_gamma(p in 0.01..0.99f64, y: bool, g in 0.0..3.0f64) {
        let lo = focal_loss(&[p], &[y], g + 0.5).unwrap();
        let hi = focal_loss(&[p], &[y], g).unwrap();
        prop_assert!(lo >= 0.0);
        prop_assert!(lo <= hi + 1e-15);
    }

    #[test]
    fn metrics_ignore_predicted_id_names(
        frames in 2u32..12,
        objects in 1usize..5,
        offset in 1u64..1000,
    ) {
        let rows: Vec<(u32, u64, f64)> = (0..frames)
            .flat_map(|t| (0..objects).map(move |o| (t, o as u64, 50.0 * o as f64)))
            .collect();
        let gt = boxes(&rows);
        let renamed: Vec<_> = rows.iter().map(|&(t, id, x)| (t, id * 7 + offset, x)).collect();
        let r = evaluate(&boxes(&renamed), &gt);
        prop_assert_eq!(r.ids, 0);
        prop_assert_eq!(r.mota, Some(1.0));
        prop_assert_eq!(r.idf1, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stitching_oracle_clips_matches_the_unsplit_run(
        seed in 0u64..1000,
        clip_len in 24u32..90,
        frac in 0.2..0.8f64,
    ) {
        let overlap = ((clip_len as f64 * frac) as u32).clamp(1, clip_len - 1);
        let dets = synthesize(&ScenarioSpec {
            n_objects: 4,
            n_frames: 150,
            miss_rate: 0.05,
            seed,
            ..Default::default()
        })
        .unwrap();
        let run = |clips| {
            let cfg = PipelineConfig { clips, ..Default::default() };
            track(&dets, &cfg, &OracleScorer, &LabelOracle).unwrap().run.tracks
        };
        prop_assert_eq!(run(ClipPlan { clip_len, overlap }), run(ClipPlan::default()));
    }
}

#[test]
fn focal_loss_at_one_half() {
    assert_abs_diff_eq!(
        focal_loss(&[0.5], &[true], 1.0).unwrap(),
        0.5 * std::f64::consts::LN_2,
        epsilon = 1e-12
    );
}
