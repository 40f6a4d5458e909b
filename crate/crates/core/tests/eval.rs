use condensery::data::make_blobs;
use condensery::eval::{
    cross_architecture_eval, derive_seed, evaluate_protocol, mean_std, test_accuracy, train_network, EvalProtocol, EvalReport,
};
use condensery::models::{init_params, predict, Architecture, LinearSpec, MlpSpec, ModelParams};
use condensery::{LabeledDataset, Tensor};

fn linear() -> Architecture {
    Architecture::Linear(LinearSpec {
        input_shape: [1, 2, 2],
        num_classes: 3,
    })
}

fn quick() -> EvalProtocol {
    EvalProtocol {
        experiments: 2,
        nets_per_experiment: 3,
        epochs: 20,
        lr: 0.1,
        ..EvalProtocol::desk()
    }
}

#[test]
fn accuracy_matches_recount() {
    let data = make_blobs(3, 30, [1, 2, 2], 1.5, 2.0, 1).unwrap();
    let params = init_params(&linear(), 9).unwrap();
    let preds = predict(&params, &data.images).unwrap();
    let mut hits = 0;
    for i in 0..data.len() {
        if preds[i] == data.labels[i] {
            hits += 1;
        }
    }
    assert_eq!(test_accuracy(&params, &data).unwrap(), hits as f64 / data.len() as f64);
}

#[test]
fn constant_logits_pick_class_zero() {
    let data = make_blobs(3, 10, [1, 2, 2], 1.0, 3.0, 2).unwrap();
    let sub = data.subset(&(0..17).collect::<Vec<_>>()).unwrap();
    let zeros = linear().param_shapes().into_iter().map(Tensor::zeros).collect();
    let params = ModelParams::new(linear(), zeros).unwrap();
    let share = sub.labels.iter().filter(|&&y| y == 0).count() as f64 / sub.len() as f64;
    assert_eq!(test_accuracy(&params, &sub).unwrap(), share);
}

#[test]
fn report_statistics_recompute() {
    let data = make_blobs(3, 10, [1, 2, 2], 1.0, 3.0, 3).unwrap();
    let r = evaluate_protocol("real", &data, &linear(), &quick(), &data, 5).unwrap();
    assert_eq!(r.accuracies.len(), 6);
    let n = r.accuracies.len() as f64;
    let mean = r.accuracies.iter().sum::<f64>() / n;
    let std = (r.accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    assert!((r.mean - mean).abs() < 1e-12 && (r.std - std).abs() < 1e-12);
    assert_eq!(r.experiment_means().len(), 2);
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
}

#[test]
fn evaluation_leaves_training_set_untouched() {
    let data = make_blobs(3, 10, [1, 2, 2], 1.0, 3.0, 4).unwrap();
    let before = data.images.checksum();
    evaluate_protocol("real", &data, &linear(), &quick(), &data, 0).unwrap();
    assert_eq!(data.images.checksum(), before);
}

#[test]
fn runs_are_reproducible_and_seeded_apart() {
    let data = make_blobs(3, 10, [1, 2, 2], 1.0, 1.0, 5).unwrap();
    let a = evaluate_protocol("x", &data, &linear(), &quick(), &data, 8).unwrap();
    let b = evaluate_protocol("x", &data, &linear(), &quick(), &data, 8).unwrap();
    assert_eq!(a.accuracies, b.accuracies);
    let seeds: std::collections::HashSet<u64> = (0..100).map(|i| derive_seed(8, i)).collect();
    assert_eq!(seeds.len(), 100);
}

#[test]
fn same_architecture_cross_eval_matches_protocol() {
    let data = make_blobs(3, 10, [1, 2, 2], 1.0, 3.0, 6).unwrap();
    let mlp = Architecture::Mlp(MlpSpec::new([1, 2, 2], 3));
    let cross = cross_architecture_eval("x", &data, &[linear(), mlp.clone()], &quick(), &data, 2).unwrap();
    let direct = evaluate_protocol("x", &data, &mlp, &quick(), &data, 2).unwrap();
    assert_eq!(cross[1].accuracies, direct.accuracies);
    assert_eq!(cross[0].arch, linear().label());
}

#[test]
fn minibatch_and_momentum_training_learn() {
    let data = make_blobs(3, 40, [1, 2, 2], 0.3, 4.0, 7).unwrap();
    let protocol = EvalProtocol {
        batch_size: 16,
        momentum: 0.9,
        epochs: 10,
        lr: 0.05,
        ..quick()
    };
    let params = train_network(&data, &linear(), &protocol, 1, |_, _| Ok(())).unwrap();
    assert!(test_accuracy(&params, &data).unwrap() > 0.95);
}

#[test]
fn bad_protocols_and_empty_sets_are_rejected() {
    let data = make_blobs(3, 5, [1, 2, 2], 1.0, 3.0, 8).unwrap();
    let none = EvalProtocol { experiments: 0, ..quick() };
    assert!(evaluate_protocol("x", &data, &linear(), &none, &data, 0).is_err());
    assert!(EvalProtocol::named("huge").is_err());
    let empty = LabeledDataset::new(Tensor::zeros(vec![0, 1, 2, 2]), vec![], 3).unwrap();
    assert!(train_network(&empty, &linear(), &quick(), 0, |_, _| Ok(())).is_err());
}

#[test]
fn csv_has_one_row_per_network() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport::from_runs("m", &linear(), 1, &quick(), 3, vec![0.5; 6], 0.0);
    let path = dir.path().join("eval.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert_eq!(text.lines().nth(4).unwrap(), format!("m,{},1,1,0,3,0.5", linear().label()));
}
