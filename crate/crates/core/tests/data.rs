use ikd_mil::data::{
    generate_synthetic_dataset, ingest_patch_folder, read_manifest, BlobParams, Dataset, FilterSpec, SplitRole,
    SynthSpec,
};
use ikd_mil::losses::Label;
use ikd_mil::Error;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        count_pos: 20,
        count_neg: 20,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn positive_mask_areas_stay_within_bounds() {
    for seed in 0..4 {
        let spec = small(seed);
        let ds: Dataset<f32> = generate_synthetic_dataset(&spec).unwrap();
        let (lo, hi) = (spec.blobs.min_area(), spec.blobs.max_area(spec.image_size));
        for s in ds.eval_view().iter() {
            let area = s.gt_mask.unwrap().count();
            match s.label {
                Label::Tumor => assert!((lo..=hi).contains(&area), "seed {seed} {}: area {area}", s.source_id),
                Label::Normal => assert_eq!(area, 0),
            }
        }
    }
}

#[test]
fn images_do_not_depend_on_dataset_size() {
    let few: Dataset<f32> = generate_synthetic_dataset(&SynthSpec {
        count_pos: 3,
        count_neg: 3,
        ..small(5)
    })
    .unwrap();
    let many: Dataset<f32> = generate_synthetic_dataset(&small(5)).unwrap();
    let pick = |d: &Dataset<f32>, label: Label| -> Vec<Vec<f32>> {
        d.patches()
            .filter(|p| p.label() == label)
            .take(3)
            .map(|p| p.pixels().data.clone())
            .collect()
    };
    for label in [Label::Tumor, Label::Normal] {
        assert_eq!(pick(&few, label), pick(&many, label));
    }
}

#[test]
fn pixels_lie_in_the_unit_interval() {
    let ds: Dataset<f64> = generate_synthetic_dataset(&small(2)).unwrap();
    for p in ds.patches() {
        assert!(p.pixels().data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn written_folder_ingests_back() {
    let spec = SynthSpec {
        count_pos: 4,
        count_neg: 4,
        image_size: 24,
        blobs: BlobParams {
            count_min: 1,
            count_max: 1,
            radius_min: 4,
            radius_max: 8,
        },
        ..SynthSpec::default()
    };
    let ds: Dataset<f32> = generate_synthetic_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_folder(dir.path()).unwrap();
    let manifest = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    let filter = FilterSpec {
        target_size: 24,
        ..FilterSpec::default()
    };
    let (back, report) = ingest_patch_folder::<f32>(dir.path(), &filter, &manifest, SplitRole::Test).unwrap();
    assert_eq!(report.kept, 8);
    assert_eq!(back.len(), 8);
    let mut original: Vec<_> = ds.eval_view().iter().collect();
    original.sort_by_key(|s| s.source_id.to_string());
    for (a, b) in original.iter().zip(back.eval_view().iter()) {
        assert_eq!(a.source_id, b.source_id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.gt_mask, b.gt_mask);
        for (x, y) in a.pixels.data.iter().zip(&b.pixels.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn unlisted_image_is_an_error() {
    let ds: Dataset<f32> = generate_synthetic_dataset(&SynthSpec {
        count_pos: 1,
        count_neg: 1,
        image_size: 16,
        blobs: BlobParams {
            count_min: 1,
            count_max: 1,
            radius_min: 3,
            radius_max: 5,
        },
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = ds.write_folder(dir.path()).unwrap();
    manifest.pop();
    let filter = FilterSpec {
        target_size: 16,
        ..FilterSpec::default()
    };
    let err = ingest_patch_folder::<f32>(dir.path(), &filter, &manifest, SplitRole::Train).unwrap_err();
    assert!(matches!(err, Error::MissingManifestEntry(_)), "{err}");
}

#[test]
fn missing_manifest_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_manifest(&dir.path().join("manifest.csv")).unwrap_err();
    assert!(err.to_string().contains("manifest.csv"), "{err}");
}

#[test]
fn split_is_a_stratified_partition() {
    let ds: Dataset<f32> = generate_synthetic_dataset(&small(1)).unwrap();
    let (train, val) = ds.split(0.1, 3).unwrap();
    assert_eq!(train.len() + val.len(), ds.len());
    assert_eq!(val.count_label(Label::Tumor), 2);
    assert_eq!(val.count_label(Label::Normal), 2);
    let ids = |d: &Dataset<f32>| d.patches().map(|p| p.source_id().to_string()).collect::<Vec<_>>();
    let v = ids(&val);
    assert!(ids(&train).iter().all(|id| !v.contains(id)));
}
