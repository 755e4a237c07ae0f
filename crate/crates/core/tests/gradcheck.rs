use mlvqa_core::autodiff::{fault, GradCheckOptions};
use mlvqa_core::checks::{check_module, CheckModule};

#[test]
fn every_module_passes_at_default_tolerance() {
    let opts = GradCheckOptions::default();
    for module in CheckModule::ALL {
        let report = check_module(module, &opts).unwrap();
        for b in &report.blocks {
            println!("{module} {:<16} max_rel {:.3e} checked {} excluded {}", b.name, b.max_rel_error, b.checked, b.excluded);
        }
        assert!(report.passed(), "{module}: max rel error {:e}", report.max_rel_error());
        assert!(report.blocks.iter().all(|b| b.checked > 0), "{module}: a block had no checked entries");
    }
}

#[test]
fn flipped_sampler_gradient_is_caught() {
    fault::set_sampler_grad_sign_flip(true);
    let cst = check_module(CheckModule::Cst, &GradCheckOptions::default());
    let cga = check_module(CheckModule::Cga, &GradCheckOptions::default());
    fault::set_sampler_grad_sign_flip(false);
    assert!(!cst.unwrap().passed());
    // the attention module never samples, so it is unaffected
    assert!(cga.unwrap().passed());
}
