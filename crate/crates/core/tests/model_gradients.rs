use std::time::Instant;

use ukt::model::{check_gradients, gradient_fixture, ClConvention, Variant, VariantConfig};
use ukt::tensor::gradcheck::GradCheckConfig;

#[test]
fn full_objective_gradients() {
    let start = Instant::now();
    let (params, batch) = gradient_fixture(7, 1).unwrap();
    let variant = VariantConfig { lambda: 0.1, ..VariantConfig::default() };
    let report = check_gradients(&params, &variant, &batch, GradCheckConfig::default()).unwrap();
    assert_eq!(report.params.len(), params.tensors().len());
    assert!(report.passed(), "{:?}", report.params);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn ablation_and_convention_gradients() {
    for seed in 0..4 {
        for (blocks, variant, conv) in [
            (1, Variant::WithoutWasserstein, ClConvention::Paper),
            (1, Variant::WithoutStochastic, ClConvention::Paper),
            (1, Variant::Ukt, ClConvention::Infonce),
            (2, Variant::Ukt, ClConvention::Paper),
        ] {
            let (params, batch) = gradient_fixture(seed, blocks).unwrap();
            let v = variant.apply(VariantConfig { lambda: 0.1, cl_convention: conv, ..VariantConfig::default() });
            let report = check_gradients(&params, &v, &batch, GradCheckConfig::default()).unwrap();
            let bad: Vec<_> = report.params.iter().filter(|p| p.max_rel_error >= report.tolerance).collect();
            assert!(bad.is_empty(), "seed {seed} {variant:?} {conv:?} blocks {blocks}: {bad:?}");
        }
    }
}
