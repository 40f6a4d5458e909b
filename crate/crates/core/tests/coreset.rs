use condensery::coreset::{
    herding_order, kcenter_order, pixel_features, select_herding, select_kcenter, select_random, CoresetMethod,
};
use condensery::data::make_blobs;
use condensery::{LabeledDataset, Tensor};

fn data() -> LabeledDataset {
    make_blobs(3, 12, [1, 2, 2], 1.0, 3.0, 21).unwrap()
}

#[test]
fn random_selection_is_uniform_over_members() {
    // 2000 draws of 1 out of 12 per class: each member hit ~167 times
    let ds = data();
    let members = ds.class_indices();
    let draws = 2000;
    let mut hits = vec![0usize; ds.len()];
    for seed in 0..draws {
        let sel = select_random(&ds, 1, seed).unwrap();
        for &i in &sel.indices {
            hits[i] += 1;
        }
    }
    let p = 1.0 / 12.0;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    // Bonferroni over 36 cells keeps a false alarm rare at 4σ
    for m in members.iter().flatten() {
        assert!((hits[*m] as f64 - expect).abs() < 4.0 * sigma, "index {m}: {} hits", hits[*m]);
    }
}

#[test]
fn selections_are_class_major_and_in_class() {
    let ds = data();
    let feats = pixel_features(&ds).unwrap();
    for sel in [
        select_random(&ds, 4, 0).unwrap(),
        select_herding(&ds, 4, &feats).unwrap(),
        select_kcenter(&ds, 4, &feats).unwrap(),
    ] {
        sel.validate(&ds).unwrap();
        for (class, rank, idx) in sel.rows() {
            assert_eq!(ds.labels[idx], class);
            assert!(rank < 4);
        }
        let set = sel.materialize(&ds).unwrap();
        assert_eq!(set.len(), 12);
    }
}

#[test]
fn herding_starts_nearest_the_mean() {
    let f = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 2.0, 10.0]).unwrap();
    // mean 3.25: nearest point is 2.0
    assert_eq!(herding_order(&f, &[0, 1, 2, 3], 1), vec![2]);
}

#[test]
fn kcenter_ties_go_to_lower_index() {
    let f = Tensor::from_vec(vec![3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
    // starts at the point nearest the mean (0.0); both ends are equally far
    assert_eq!(kcenter_order(&f, &[0, 1, 2], 2), vec![1, 0]);
}

#[test]
fn ipc_larger_than_class_is_rejected() {
    let ds = data();
    assert!(select_random(&ds, 13, 0).is_err());
    assert!(select_herding(&ds, 13, &pixel_features(&ds).unwrap()).is_err());
}

#[test]
fn method_names_round_trip() {
    for m in CoresetMethod::ALL {
        assert_eq!(m.name().parse::<CoresetMethod>().unwrap(), m);
    }
    let err = "greedy".parse::<CoresetMethod>().unwrap_err().to_string();
    assert!(err.contains("kcenter") && err.contains("forgetting"), "{err}");
}
