mod common;

use common::{gamma_zero_logit_gap, max_abs_diff, three_channel_model, gradcam_oracle, uniform};
use resattnet::gradcam::compute_gradcam;
use resattnet::layers::Mode;
use resattnet::model::{predict_shapes, PAPER_INPUT};
use resattnet::{ArchitectureSpec, Model, Shape};

#[test]
fn zero_gamma_network_equals_plain_network() {
    assert!(gamma_zero_logit_gap(4, [16, 16, 16]) < 1e-6);
}

#[test]
fn attention_adds_exactly_its_projection_parameters() {
    let count = |name: &str| {
        let spec = ArchitectureSpec::preset(name, 1.0).unwrap();
        Model::<f32>::build(&spec, [16, 16, 16], 0).unwrap().param_count()
    };
    let per_block = |c: usize| 4 * c * (c / 8) + 1;
    // attention in every block of the 256- and 512-channel stages (6 and 3 blocks)
    let extra = 6 * per_block(256) + 3 * per_block(512);
    assert_eq!(count("resattnet34") - count("resnet34"), extra);
}

#[test]
fn paper_grid_ends_at_six_seven_six() {
    let spec = ArchitectureSpec::preset("resattnet34", 1.0).unwrap();
    let shapes = predict_shapes(&spec, PAPER_INPUT).unwrap();
    let last = shapes.iter().rev().find(|(n, _)| n.starts_with("stage")).unwrap();
    assert_eq!(last.1, Shape::new(1, 512, 6, 7, 6));
}

#[test]
fn first_stage_halves_the_padded_grid() {
    let spec = ArchitectureSpec::preset("resattnet34", 1.0).unwrap();
    let shapes = predict_shapes(&spec, [92, 110, 92]).unwrap();
    let exit = shapes.iter().filter(|(n, _)| n.starts_with("stage1.")).last().unwrap();
    assert_eq!(exit.1.spatial(), [46, 55, 46]);
}

#[test]
fn built_model_shapes_agree_with_prediction() {
    let spec = ArchitectureSpec::preset("micro-resattnet", 0.125).unwrap();
    let m = Model::<f64>::build(&spec, [16, 12, 20], 5).unwrap();
    let x = uniform(Shape::new(2, 1, 16, 12, 20), 6);
    let trace = m.forward_trace(&x, Mode::Eval).unwrap();
    for (i, (name, shape)) in m.layer_shapes(2).iter().enumerate() {
        assert_eq!(trace.output(i).shape(), *shape, "{name}");
    }
}

#[test]
fn gradcam_matches_finite_difference_oracle() {
    let m = three_channel_model(7);
    for (seed, class) in [(1u64, 0usize), (2, 1), (3, 1)] {
        let x = uniform(Shape::new(1, 1, 6, 6, 6), seed);
        let res = compute_gradcam(&m, &x, class, "stem.0").unwrap();
        let want = gradcam_oracle(&m, &x, class, "stem.0");
        assert!(max_abs_diff(res.heatmap.data(), &want) < 1e-6);
        assert!(res.heatmap.data().iter().any(|&v| v > 0.0));
    }
}
