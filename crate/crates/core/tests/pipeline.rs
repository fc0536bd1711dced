use fairshift::data::{zscore_normalize, ColumnSelection, FeatureMap};
use fairshift::density::{build_density_info, DensityConfig};
use fairshift::eval::evaluate;
use fairshift::fair::FairnessCriterion;
use fairshift::model::{fit_method, FitContext, Method};
use fairshift::shift::{biased_split, ShiftConfig};
use fairshift::synthetic::GaussianMixture;
use fairshift::train::TrainConfig;

#[test]
fn every_method_fits_and_scores_a_shifted_split() {
    let pool = GaussianMixture::default().sample(600, 3);
    let pool = zscore_normalize(&pool, &ColumnSelection::AllNumeric).unwrap();
    let labels = pool.labels().unwrap().to_vec();
    let split = biased_split(&pool, &ShiftConfig::new(1.0, 2.0, 5)).unwrap();
    let truth: Vec<u8> = split.target_indices.iter().map(|&i| labels[i]).collect();
    assert!(split.target_unlabeled.labels().is_none());

    let dc = DensityConfig::default();
    let (si, ti) = build_density_info(&split.source, &split.target_unlabeled, &dc).unwrap();
    let ratio = ti.clipped_ratio_st(&dc.ratio_clip);
    let ctx = FitContext {
        source: &split.source,
        target: &split.target_unlabeled,
        source_density: &si,
        target_density: &ti,
        density_config: &dc,
        map: FeatureMap::default(),
        criterion: FairnessCriterion::EqualizedOpportunity,
        train: TrainConfig { l2_strength: 1e-2, ..Default::default() },
    };
    for method in Method::ALL {
        let doc = fit_method(method, &ctx).unwrap();
        let p = doc.predict(&split.target_unlabeled, Some(&ratio)).unwrap();
        assert_eq!(p.len(), truth.len());
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "{method}");
        let report = evaluate(&p, 0.5, &truth, split.target_unlabeled.attribute()).unwrap();
        assert!(report.error < 0.5, "{method}: error {}", report.error);
    }
}
