mod common;

use common::{gradient_suite, GradInstance, GRADIENT_TOLERANCE};
use kgs_core::render::VelocityMode;

fn assert_suite(inst: &GradInstance) {
    let suite = gradient_suite(inst, 1e-4, 1e-5, true);
    println!("checks repeated at a tenth of the step: {}", suite.retried);
    assert!(suite.retried <= 3, "too many non-smooth points within the step");
    for r in suite.classes {
        println!("{:>14}: {:4} checked, max rel err {:.2e} ({})", r.name, r.checked, r.max_rel_err, r.worst);
        assert!(r.checked > 0);
        assert!(r.max_rel_err < GRADIENT_TOLERANCE, "{} gradient mismatch: {}", r.name, r.worst);
    }
}

#[test]
fn full_pipeline_gradients_match_central_differences() {
    let inst = GradInstance::new(16, 9, 11);
    assert!(inst.refined_count() == 9, "every moving Gaussian should be refined");
    assert_suite(&inst);
}

#[test]
fn offset_velocity_gradients_match_central_differences() {
    let mut inst = GradInstance::new(10, 6, 12);
    inst.settings.velocity_mode = VelocityMode::Offset;
    assert_suite(&inst);
}

#[test]
fn ablated_pipeline_gradients_match_central_differences() {
    let mut inst = GradInstance::new(10, 6, 13);
    inst.settings.coarse_fine = false;
    inst.settings.refine = false;
    assert_suite(&inst);
}
