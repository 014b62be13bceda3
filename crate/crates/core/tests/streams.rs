mod common;

use std::f64::consts::PI;

use common::rng;
use gfr::autodiff::Tensor;
use gfr::streams::*;
use proptest::prelude::*;

#[test]
fn moons_class_centroid_matches_half_circle() {
    let base = BaseDistribution::Moons { classes: 2 };
    let x = sample_base(&base, 0, 10_000, 0.1, &mut rng(1)).unwrap();
    let n = x.rows() as f64;
    let mx = (0..x.rows()).map(|r| x.get(r, 0)).sum::<f64>() / n;
    let my = (0..x.rows()).map(|r| x.get(r, 1)).sum::<f64>() / n;
    // upper unit half circle, uniform in angle: centroid (0, 2/pi)
    assert!((mx - (0.0 - MOONS_CENTER[0])).abs() < 0.05, "x {mx}");
    assert!((my - (2.0 / PI - MOONS_CENTER[1])).abs() < 0.05, "y {my}");
}

#[test]
fn two_quarter_turns_make_a_half_turn() {
    let cloud = common::uniform(50, 2, &mut rng(2));
    let quarter = DomainTransform::rotation(PI / 2.0);
    let twice = apply_transform(&apply_transform(&cloud, &quarter, &mut rng(0)).unwrap(), &quarter, &mut rng(0)).unwrap();
    let half = apply_transform(&cloud, &DomainTransform::rotation(PI), &mut rng(0)).unwrap();
    for (a, b) in twice.data().iter().zip(half.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn every_query_label_falls_in_its_range() {
    let mut spec = StreamSpec::moons_tasks(4);
    spec.classes_per_task = vec![6, 6, 6, 6, 7];
    spec.base = BaseDistribution::Blobs { classes: 31 };
    let stream = Stream::build(&spec).unwrap();
    let access = EvalAccess::grant();
    let ranges = spec.label_ranges();
    assert_eq!(ranges, vec![0..6, 6..12, 12..18, 18..24, 24..31]);
    for (e, r) in stream.environments.iter().zip(&ranges) {
        assert!(e.eval_labels(&access).unwrap().iter().all(|y| r.contains(y)));
        assert!(e.support_y().iter().all(|y| r.contains(y)));
    }
}

#[test]
fn domain_drift_label_histograms_match() {
    let stream = Stream::build(&StreamSpec::blob_domains(3, DomainOrder::Ascending)).unwrap();
    let access = EvalAccess::grant();
    let hist = |l: &[usize]| {
        let mut h = vec![0; stream.num_classes];
        l.iter().for_each(|&y| h[y] += 1);
        h
    };
    let first = hist(stream.environments[0].eval_labels(&access).unwrap());
    for e in &stream.environments {
        assert_eq!(hist(e.eval_labels(&access).unwrap()), first);
        assert_eq!(hist(e.support_y()), first);
    }
}

#[test]
fn ascending_order_follows_rotation() {
    let mut spec = StreamSpec::blob_domains(0, DomainOrder::Ascending);
    spec.transforms = vec![
        DomainTransform::identity(),
        DomainTransform::rotation(1.4),
        DomainTransform::rotation(0.3),
        DomainTransform::rotation(0.8),
    ];
    let asc = Stream::build(&spec).unwrap();
    spec.transforms = vec![
        DomainTransform::identity(),
        DomainTransform::rotation(0.3),
        DomainTransform::rotation(0.8),
        DomainTransform::rotation(1.4),
    ];
    spec.order = DomainOrder::AsGiven;
    let given = Stream::build(&spec).unwrap();
    // same query domains in the same order, whatever the listing order
    for (a, b) in asc.environments.iter().zip(&given.environments) {
        let mean = |t: &Tensor| (0..t.rows()).map(|r| t.get(r, 0)).sum::<f64>() / t.rows() as f64;
        assert!((mean(a.query_x()) - mean(b.query_x())).abs() < 0.2);
    }
}

#[test]
fn combined_assignment_is_seeded_and_never_pairs_a_domain_with_itself() {
    let mut spec = StreamSpec::moons_tasks(8);
    spec.scenario = Scenario::Combined;
    spec.transforms = (0..4).map(|i| DomainTransform::rotation(0.4 * i as f64)).collect();
    let a = combined_assignment(&spec);
    assert_eq!(a, combined_assignment(&spec));
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|(s, q)| s != q));
    assert_eq!(Stream::build(&spec).unwrap(), Stream::build(&spec).unwrap());
}

#[test]
fn csv_round_trip_is_lossless() {
    let stream = Stream::build(&StreamSpec::moons_tasks(5)).unwrap();
    let mut buf = Vec::new();
    export_csv(&stream.environments, &mut buf).unwrap();
    let back = ingest_csv(buf.as_slice()).unwrap();
    assert_eq!(back, stream.environments);
}

#[test]
fn training_view_exposes_no_query_labels() {
    let stream = Stream::build(&StreamSpec::moons_tasks(0)).unwrap();
    // Exhaustive destructuring: adding a field to the training view breaks
    // this test on purpose.
    let TrainView {
        index,
        support_x,
        support_y,
        query_x,
    } = stream.environments[1].train_view();
    assert_eq!(index, 1);
    assert_eq!(support_x.rows(), support_y.len());
    assert_eq!(query_x.rows(), 200);
}

fn small_spec(seed: u64, tasks: Vec<usize>, samples: usize) -> StreamSpec {
    let mut spec = StreamSpec::moons_tasks(seed);
    spec.num_environments = tasks.len();
    spec.base = BaseDistribution::Blobs {
        classes: tasks.iter().sum(),
    };
    spec.classes_per_task = tasks;
    spec.samples_per_class = samples;
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_spec_same_stream(seed in any::<u64>(), tasks in prop::collection::vec(1usize..4, 1..4)) {
        let spec = small_spec(seed, tasks, 5);
        prop_assert_eq!(Stream::build(&spec).unwrap(), Stream::build(&spec).unwrap());
    }

    #[test]
    fn task_ranges_partition_the_classes(tasks in prop::collection::vec(1usize..5, 1..6)) {
        let spec = small_spec(1, tasks.clone(), 3);
        let ranges = spec.label_ranges();
        let mut next = 0;
        for (r, k) in ranges.iter().zip(&tasks) {
            prop_assert_eq!(r.start, next);
            prop_assert_eq!(r.len(), *k);
            next = r.end;
        }
        prop_assert_eq!(next, spec.total_classes());
        let stream = Stream::build(&spec).unwrap();
        for (e, r) in stream.environments.iter().zip(&ranges) {
            prop_assert_eq!(e.classes(), r.clone().collect::<Vec<_>>());
        }
    }

    #[test]
    fn bad_class_sums_are_rejected(tasks in prop::collection::vec(1usize..5, 1..6), extra in 1usize..3) {
        let mut spec = small_spec(1, tasks.clone(), 3);
        spec.base = BaseDistribution::Blobs { classes: tasks.iter().sum::<usize>() + extra };
        prop_assert!(Stream::build(&spec).is_err());
    }

    #[test]
    fn identity_transform_changes_nothing(seed in any::<u64>(), n in 0usize..20) {
        let x = common::uniform(n, 2, &mut rng(seed));
        let y = apply_transform(&x, &DomainTransform::identity(), &mut rng(seed)).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn csv_round_trip_on_random_streams(seed in any::<u64>(), tasks in prop::collection::vec(1usize..3, 1..3)) {
        let stream = Stream::build(&small_spec(seed, tasks, 4)).unwrap();
        let mut buf = Vec::new();
        export_csv(&stream.environments, &mut buf).unwrap();
        prop_assert_eq!(ingest_csv(buf.as_slice()).unwrap(), stream.environments);
    }
}
