use proptest::prelude::*;
use splitlab::eval::{dump_image, dump_rows, read_pnm, spearman, ReportRow};
use splitlab::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pnm_round_trip_within_one_level(
        c in prop_oneof![Just(1usize), Just(3usize)],
        h in 1usize..12,
        w in 1usize..12,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[1, c, h, w], 0.0, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if c == 1 { "x.pgm" } else { "x.ppm" });
        dump_image(&x, &path).unwrap();
        let back = read_pnm(&path).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.max_abs_diff(&x) <= 1.0 / 255.0);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(xs in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let ys: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let r = spearman(&xs, &ys);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - spearman(&ys, &xs)).abs() < 1e-12);
    }
}

#[test]
fn spearman_of_monotone_sequences() {
    let xs = [0.0, 1.0, 2.0, 3.0];
    assert!((spearman(&xs, &[5.0, 4.0, 1.0, 0.5]) + 1.0).abs() < 1e-12);
    assert!((spearman(&xs, &[0.1, 0.2, 0.3, 9.0]) - 1.0).abs() < 1e-12);
}

#[test]
fn image_grid_stacks_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = Tensor::full(&[3, 1, 4, 5], 0.0);
    let b = Tensor::full(&[3, 1, 4, 5], 1.0);
    let path = dir.path().join("grid.pgm");
    dump_rows(&[&a, &b], &path).unwrap();
    let g = read_pnm(&path).unwrap();
    // two rows of three 4x5 tiles separated by a 2-pixel gutter
    assert_eq!(g.shape(), &[1, 1, 4 * 2 + 2, 5 * 3 + 2 * 2]);
}

#[test]
fn report_rows_survive_csv() {
    let row = ReportRow {
        dataset: "mnist".into(),
        depth: 2,
        trained: true,
        mse_before: None,
        mse_after: Some(0.0412),
        clone_acc: Some(0.93),
        orig_acc: Some(0.97),
        label_inf_acc: Some(0.1),
        seconds: 12.5,
        seed: 3,
        config_hash: "00ff00ff00ff00ff".into(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(row.record()).unwrap();
    let bytes = w.into_inner().unwrap();
    let rec = csv::Reader::from_reader(bytes.as_slice()).headers().unwrap().clone();
    assert_eq!(ReportRow::from_record(&rec).unwrap(), row);
}
