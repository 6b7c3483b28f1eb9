use compad_wasm::{Explorer, Weights};

fn defaults() -> Weights {
    Weights::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, 0.5)
}

#[test]
fn structural_explorer_separates_queries() {
    let ex = Explorer::new("structural", 3, 3, 1).unwrap();
    let n = ex.size();
    assert_eq!(ex.query_count(), 6);
    assert_eq!(ex.image(0).unwrap().len(), n * n * 4);
    assert_eq!(ex.detect(4, &defaults()).unwrap().len(), n * n);
    assert_eq!(ex.image_auc(&defaults()).unwrap(), 1.0);
    assert!(ex.ground_truth(0).unwrap().iter().all(|&b| b == 0));
    assert!(ex.ground_truth(4).unwrap().contains(&1));
}

#[test]
fn segment_labels_match_branch() {
    let ex = Explorer::new("logical", 1, 1, 2).unwrap();
    assert_eq!(ex.segment_branch(0).unwrap(), "Fused");
    let normal = ex.segment(0).unwrap();
    let dropped = ex.segment(1).unwrap();
    assert_eq!(normal.iter().max(), Some(&3));
    assert_eq!(dropped.iter().max(), Some(&2));
}

#[test]
fn weight_sliders_select_single_maps() {
    let ex = Explorer::new("structural", 1, 1, 3).unwrap();
    let structural_only = ex.detect(1, &Weights::new(1.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
    let logical_only = ex.detect(1, &Weights::new(1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
    assert_ne!(structural_only, logical_only);
    assert!(logical_only.iter().all(|&v| v >= 0.0));
}

#[test]
fn auc_helper_matches_known_value() {
    assert_eq!(compad_wasm::auc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap(), 0.75);
}
