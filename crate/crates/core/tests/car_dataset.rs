use std::collections::BTreeMap;
use std::path::Path;

use dropkan::data::{load_csv, split, ColumnKind, SplitFractions};

fn car() -> dropkan::data::RawTable {
    load_csv(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/car.csv")).unwrap()
}

#[test]
fn shape_and_class_counts() {
    let t = car();
    assert_eq!(t.n_rows(), 1728);
    assert_eq!(t.feature_columns().len(), 6);
    let mut counts = BTreeMap::new();
    for r in &t.rows {
        *counts.entry(r[t.label_column].clone().unwrap()).or_insert(0) += 1;
    }
    let expected: BTreeMap<String, i32> =
        [("acc", 384), ("good", 69), ("unacc", 1210), ("vgood", 65)].map(|(k, v)| (k.to_string(), v)).into();
    assert_eq!(counts, expected);
}

#[test]
fn every_attribute_combination_appears_once() {
    let t = car();
    let mut seen = std::collections::HashSet::new();
    for r in &t.rows {
        assert!(seen.insert(r[..6].to_vec()));
    }
}

#[test]
fn preprocessing_yields_six_scaled_categorical_features() {
    let d = split(&car(), SplitFractions::default(), 0).unwrap();
    assert_eq!(d.n_features(), 6);
    assert_eq!(d.n_classes, 4);
    assert_eq!((d.train.len(), d.valid.len(), d.test.len()), (1037, 346, 345));
    assert!(d.schema.columns.iter().all(|c| c.kind == ColumnKind::Categorical));
    assert!(d.train.features.iter().all(|v| (-1.0..=1.0).contains(v)));
}
