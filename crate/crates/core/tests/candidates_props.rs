use proptest::prelude::*;
use roofline::candidates::{corner_candidates, roofline_candidates, sweep_heights_with_step, CandidateParams};
use roofline::geometry::{classify_corner_roles, distance_along_axis, CameraPose};
use roofline::scene::{generate_scene, render, GeneratorConfig};

fn ladder_for(pose: &CameraPose, fp: &roofline::geometry::BuildingFootprint, idx: usize, step: f64) -> Vec<f64> {
    let d = distance_along_axis(pose, &fp.corners[idx].at_height(pose.mount_height));
    sweep_heights_with_step(d, pose, step).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corner_candidates_follow_the_ladder(seed in 0u64..10_000, step in prop::sample::select(vec![0.25, 0.5, 1.0])) {
        let spec = generate_scene(seed, &GeneratorConfig::default());
        let r = render(&spec);
        let params = CandidateParams { height_step: step, ..Default::default() };
        for (i, fp) in spec.buildings.iter().enumerate() {
            let cands = corner_candidates(fp, i, &spec.camera, &r.edge_map, &params).unwrap();
            for c in &cands {
                let ladder = ladder_for(&spec.camera, fp, c.corner_index, step);
                prop_assert_eq!(ladder[c.ladder_index], c.assumed_height);
            }
            // Lower rungs sit lower in the image.
            for w in cands.windows(2) {
                if w[0].role == w[1].role && w[1].ladder_index > w[0].ladder_index {
                    prop_assert!(w[1].window_center.1 > w[0].window_center.1);
                }
            }
        }
    }

    #[test]
    fn roofline_candidates_pass_their_gate(seed in 0u64..10_000) {
        let spec = generate_scene(seed, &GeneratorConfig::default());
        let r = render(&spec);
        let params = CandidateParams::default();
        for (i, fp) in spec.buildings.iter().enumerate() {
            let roles = classify_corner_roles(fp, &spec.camera).unwrap();
            let ladder = ladder_for(&spec.camera, fp, roles.cn, params.height_step);
            for c in roofline_candidates(fp, i, &spec.camera, &r.edge_map, &params).unwrap() {
                prop_assert_eq!(ladder[c.ladder_index], c.assumed_height);
                prop_assert!(c.segment.p0.distance_to(c.span.0) <= params.gate_px);
                prop_assert!(c.segment.p1.distance_to(c.span.1) <= params.gate_px);
                prop_assert!(c.features.lambda >= 1.0 && c.features.omega >= 0.0);
            }
        }
    }
}
