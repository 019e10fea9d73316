mod common;

use common::{literal_labels, optimal_matches};
use dancestep::beats::*;
use dancestep::motion::{weak_labels, MotionSequence};
use ndarray::Array2;
use proptest::prelude::*;

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Beat times on a 10 ms grid, so windows often overlap and ties at the
/// tolerance edge occur.
fn beat_list(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..300, 0..max).prop_map(|v| sorted(v.into_iter().map(|x| f64::from(x) * 0.01).collect()))
}

/// Frames with deliberate repeats so that zero SD changes occur.
fn frame_list() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..40, 1usize..6).prop_flat_map(|(n, dim)| {
        prop::collection::vec((prop::collection::vec(-1.0f64..1.0, dim), any::<bool>()), n).prop_map(|rows| {
            let mut out: Vec<Vec<f64>> = Vec::new();
            for (row, repeat) in rows {
                match out.last() {
                    Some(prev) if repeat => out.push(prev.clone()),
                    _ => out.push(row),
                }
            }
            out
        })
    })
}

fn to_sequence(frames: &[Vec<f64>]) -> MotionSequence {
    let dim = frames[0].len();
    let flat: Vec<f64> = frames.concat();
    MotionSequence::new(Array2::from_shape_vec((frames.len(), dim), flat).unwrap(), 30).unwrap()
}

proptest! {
    #[test]
    fn matcher_equals_exhaustive_assignment(pred in beat_list(12), refs in beat_list(12)) {
        let report = match_times(&pred, &refs, MATCH_TOLERANCE).unwrap();
        let best = optimal_matches(&pred, &refs, MATCH_TOLERANCE);
        prop_assert_eq!(report.counts.true_positives, best);
        prop_assert_eq!(report.counts.false_positives, pred.len() - best);
        prop_assert_eq!(report.counts.false_negatives, refs.len() - best);
        prop_assert!((0.0..=1.0).contains(&report.f_score));
    }

    #[test]
    fn matching_is_symmetric_in_count(pred in beat_list(12), refs in beat_list(12)) {
        let a = match_times(&pred, &refs, MATCH_TOLERANCE).unwrap();
        let b = match_times(&refs, &pred, MATCH_TOLERANCE).unwrap();
        prop_assert_eq!(a.counts.true_positives, b.counts.true_positives);
    }

    #[test]
    fn weak_labels_equal_literal_definition(frames in frame_list()) {
        let labels = weak_labels(&to_sequence(&frames)).unwrap();
        let expected = literal_labels(&frames);
        prop_assert_eq!(labels.len(), frames.len() - 2);
        for (f, d) in expected {
            prop_assert_eq!(labels.at_frame(f), Some(d), "frame {}", f);
        }
        prop_assert_eq!(labels.at_frame(1), None);
        prop_assert_eq!(labels.at_frame(frames.len()), None);
    }

    #[test]
    fn extracted_beats_are_sorted_and_inside_the_clip(frames in frame_list()) {
        let seq = to_sequence(&frames);
        let beats = extract_motion_beats(&seq, BEAT_SPEED_RATIO).unwrap();
        let end = seq.len() as f64 / 30.0;
        prop_assert!(beats.times().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(beats.times().iter().all(|&t| t > 0.0 && t < end));
    }
}

#[test]
fn oracle_sanity() {
    // nearest-first would pair 0.10 with 0.12 and lose one match
    assert_eq!(optimal_matches(&[0.05, 0.12], &[0.10, 0.18], 0.07), 2);
    assert_eq!(optimal_matches(&[], &[0.1], 0.07), 0);
    // 1.55 - 0.07 rounds to 1.48 while |1.48 - 1.55| rounds above 0.07
    let r = match_times(&[1.48, 1.49], &[1.55], MATCH_TOLERANCE).unwrap();
    assert_eq!(r.counts.true_positives, 1);
    // constant SD: sign(0) = +1 everywhere, all labels 1
    let flat = vec![vec![0.0, 1.0]; 5];
    assert!(literal_labels(&flat).iter().all(|&(_, d)| d == 1));
}

#[test]
fn cross_entropy_of_identical_sequences_is_minimal() {
    let a = to_sequence(&(0..60).map(|i| vec![(i as f64 * 0.3).sin() * 0.8, (i as f64 * 0.1).cos() * 0.5]).collect::<Vec<_>>());
    let b = to_sequence(&(0..60).map(|_| vec![0.0, 0.0]).collect::<Vec<_>>());
    let same = cross_entropy(&a, &a, HISTOGRAM_BINS).unwrap();
    let other = cross_entropy(&b, &a, HISTOGRAM_BINS).unwrap();
    assert!(same < other, "{same} vs {other}");
}
