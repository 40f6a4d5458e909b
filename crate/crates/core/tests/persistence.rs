use condensery::data::cnd::CndContainer;
use condensery::data::idx::{encode_idx_images, encode_idx_labels, IdxImages};
use condensery::data::{load_idx, load_params, load_synthetic, make_blobs, save_params, save_synthetic, NormStats};
use condensery::models::{init_params, Architecture, ConvNetSpec};
use condensery::{Error, SyntheticSet};

fn offset(e: Error) -> u64 {
    match e {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn synthetic_file_round_trip_with_stats() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_blobs(2, 3, [2, 2, 2], 1.0, 3.0, 0).unwrap();
    let stats = NormStats::compute(&ds.images).unwrap();
    let set = SyntheticSet::new(ds.images.gather_rows(&[0, 2, 4, 1, 3, 5]).unwrap(), 2, 3).unwrap();
    let path = dir.path().join("s.cnd");
    save_synthetic(&set, Some(&stats), &path).unwrap();
    let (back, back_stats) = load_synthetic(&path).unwrap();
    assert_eq!(back, set);
    assert_eq!(back_stats.unwrap(), stats);
    // re-encoding is byte-identical
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(CndContainer::decode(&bytes).unwrap().encode(), bytes);
}

#[test]
fn params_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::ConvNet(ConvNetSpec::new([1, 8, 8], 4).with_channels(3).with_blocks(2));
    let params = init_params(&arch, 5).unwrap();
    let path = dir.path().join("p.cnd");
    save_params(&params, &path).unwrap();
    let back = load_params(&path).unwrap();
    assert_eq!(back.arch, params.arch);
    assert_eq!(back.tensors, params.tensors);
}

#[test]
fn idx_files_load_as_scaled_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxImages {
        count: 2,
        rows: 1,
        cols: 3,
        pixels: vec![0, 51, 255, 102, 153, 204],
    };
    std::fs::write(dir.path().join("img"), encode_idx_images(&images)).unwrap();
    std::fs::write(dir.path().join("lab"), encode_idx_labels(&[7, 2])).unwrap();
    let ds = load_idx(dir.path().join("img"), dir.path().join("lab")).unwrap();
    assert_eq!(ds.image_shape(), [1, 1, 3]);
    assert_eq!(ds.labels, vec![7, 2]);
    assert_eq!(ds.num_classes, 8);
    assert_eq!(ds.images.data(), &[0.0, 0.2, 1.0, 0.4, 0.6, 0.8]);
}

#[test]
fn corrupted_containers_report_offsets() {
    let set = SyntheticSet::new(condensery::Tensor::zeros(vec![2, 1, 2, 2]), 2, 1).unwrap();
    let bytes = CndContainer::from_synthetic(&set, None).encode();
    let mut bad = bytes.clone();
    bad[1] = b'Z';
    assert_eq!(offset(CndContainer::decode(&bad).unwrap_err()), 0);
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert_eq!(offset(CndContainer::decode(&bad).unwrap_err()), 4);
    let cut = bytes.len() - 5;
    let e = CndContainer::decode(&bytes[..cut]).unwrap_err();
    assert!(offset(e) <= cut as u64);
    assert!(CndContainer::decode(&[]).is_err());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_synthetic(dir.path().join("none.cnd")), Err(Error::Io(_))));
}
