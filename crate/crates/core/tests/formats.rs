use ndarray::Array2;
use proptest::prelude::*;

use twinrecon::io::{
    read_distribution, read_distribution_from, read_frames, read_histogram, write_distribution,
    write_distribution_to, write_frames, write_histogram,
};
use twinrecon::model::{histogram_from_frames, Frame, JointHistogram, JointPhotonDistribution};

fn frame_strategy() -> impl Strategy<Value = Frame> {
    (
        any::<u64>(),
        proptest::collection::btree_set((0u32..40, 0u32..40), 0..8),
        proptest::collection::btree_set((0u32..40, 0u32..40), 0..8),
    )
        .prop_map(|(shot, s, i)| Frame::new(shot, s.into_iter().collect(), i.into_iter().collect()))
}

fn distribution_strategy() -> impl Strategy<Value = JointPhotonDistribution> {
    (1usize..6, 1usize..6)
        .prop_flat_map(|(r, c)| proptest::collection::vec(0.0f64..1.0, r * c).prop_map(move |v| (r, c, v)))
        .prop_filter("needs mass", |(_, _, v)| v.iter().sum::<f64>() > 1e-3)
        .prop_map(|(r, c, v)| {
            let s: f64 = v.iter().sum();
            let p = Array2::from_shape_vec((r, c), v.into_iter().map(|x| x / s).collect()).unwrap();
            JointPhotonDistribution::new(p, 0.0).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn histogram_is_invariant_under_frame_permutation(
        frames in proptest::collection::vec(frame_strategy(), 1..40),
        rotate in 0usize..40,
    ) {
        let a = histogram_from_frames(&frames, 8).unwrap();
        let mut shuffled = frames.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(a, histogram_from_frames(&shuffled, 8).unwrap());
    }

    #[test]
    fn frames_survive_a_file_round_trip(frames in proptest::collection::vec(frame_strategy(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        write_frames(&path, &frames).unwrap();
        prop_assert_eq!(read_frames(&path).unwrap(), frames);
    }

    #[test]
    fn histograms_survive_a_file_round_trip(cells in proptest::collection::vec(0u64..1000, 1..30), cols in 1usize..6) {
        let rows = cells.len().div_ceil(cols);
        let mut counts = Array2::<u64>::zeros((rows, cols));
        for (k, v) in cells.iter().enumerate() {
            counts[[k / cols, k % cols]] = *v;
        }
        prop_assume!(counts.sum() > 0);
        let h = JointHistogram::from_counts(counts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_histogram(&path, &h).unwrap();
        prop_assert_eq!(read_histogram(&path).unwrap(), h);
    }

    #[test]
    fn distributions_survive_a_file_round_trip_bit_exactly(d in distribution_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_distribution(&path, &d).unwrap();
        let back = read_distribution(&path).unwrap();
        for (a, b) in back.probabilities().iter().zip(d.probabilities().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn malformed_distribution_names_the_line() {
    let text = "n_s,n_i,p\n0,0,0.5\n0,1,abc\n";
    match read_distribution_from(text.as_bytes(), "p.csv") {
        Err(twinrecon::Error::Parse { line, path, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(path, "p.csv");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn distribution_text_uses_seventeen_significant_digits() {
    let d = JointPhotonDistribution::new(Array2::from_shape_vec((1, 2), vec![1.0 / 3.0, 2.0 / 3.0]).unwrap(), 0.0).unwrap();
    let mut buf = Vec::new();
    write_distribution_to(&mut buf, &d).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "0,0,3.3333333333333331e-1");
}
