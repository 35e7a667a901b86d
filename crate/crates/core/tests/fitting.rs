use splat4d::datagen::{generate_scene, Preset};
use splat4d::fitter::{fit, StageName, StagePlan};

fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn every_stage_ends_below_where_it_started() {
    let scene = generate_scene(Preset::MovingSpheres, 3, 32, 4).unwrap();
    let (field, report) = fit(&scene, &StagePlan::with_iterations([80, 80, 40]), 0).unwrap();
    assert_eq!(field.frame_count(), 3);
    for name in [StageName::Static, StageName::Hires, StageName::Dynamic] {
        let losses: Vec<f64> = report.stage_history(name).iter().map(|r| r.photometric).collect();
        let head = window_mean(&losses[..10]);
        let tail = window_mean(&losses[losses.len() - 10..]);
        assert!(tail < head, "{name:?}: photometric {head} -> {tail}");
    }
    assert!(report.final_psnr.iter().all(|p| p.is_finite()));
}
