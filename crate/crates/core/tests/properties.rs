use proptest::prelude::*;

use fusionkit::align::softmax;
use fusionkit::augment::{inverse_aug, AugRecord, GeometricOp};
use fusionkit::geometry::{
    bilinear_sample, project_to_image, rotate_z, CameraModel, FeatureMap, LidarPoint, PointCloud,
    Vec3,
};
use fusionkit::io;
use fusionkit::voxel::{
    dynamic_voxelize, encode_pillars, Activation, EncoderParams, FeatureLayout, PillarGrid,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn op() -> impl Strategy<Value = GeometricOp> {
    prop_oneof![
        (-std::f64::consts::PI..std::f64::consts::PI)
            .prop_map(|theta| GeometricOp::RotateZ { theta }),
        (0.5..2.0f64).prop_map(|s| GeometricOp::WorldScale { s }),
        vec3(5.0).prop_map(|t| GeometricOp::Translate { t }),
        any::<bool>().prop_map(|applied| GeometricOp::FlipY { applied }),
    ]
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((vec3(6.0), 0.0..=1.0f64), 0..max).prop_map(|pts| {
        PointCloud::new(
            pts.into_iter()
                .map(|(p, i)| LidarPoint::new(p, i))
                .collect(),
            0,
        )
    })
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (
        1usize..6,
        1usize..6,
        1usize..4,
        prop_oneof![Just(1.0), Just(4.0), Just(8.0)],
    )
        .prop_flat_map(|(w, h, c, scale)| {
            prop::collection::vec(-100.0f32..100.0, w * h * c)
                .prop_map(move |data| FeatureMap::new(w, h, c, data, scale).unwrap())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rotate_z_round_trip(p in vec3(100.0), theta in -10.0..10.0f64) {
        let r = rotate_z(p, theta);
        prop_assert!((rotate_z(r, -theta) - p).norm() < 1e-12 * p.norm().max(1.0));
        prop_assert!((r.norm() - p.norm()).abs() < 1e-12 * p.norm().max(1.0));
        prop_assert_eq!(r.z, p.z);
    }

    #[test]
    fn inverse_undoes_record(ops in prop::collection::vec(op(), 0..6), p in vec3(80.0)) {
        let record = AugRecord::new(ops);
        let back = inverse_aug(record.apply_point(p), &record);
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn record_json_round_trip(ops in prop::collection::vec(op(), 0..6)) {
        let record = AugRecord::new(ops);
        let text = serde_json::to_string(&record).unwrap();
        let back: AugRecord = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, record);
    }

    #[test]
    fn point_file_round_trip(c in cloud(50), frame in any::<u32>()) {
        let c = PointCloud::new(c.points, frame);
        // Frame ids live on the points, so an empty cloud comes back as frame 0.
        let expect_frame = if c.is_empty() { 0 } else { frame };
        let bin = io::decode_points(&io::encode_points(&c)).unwrap();
        prop_assert_eq!(&bin.points, &c.points);
        prop_assert_eq!(bin.frame_id, expect_frame);
        let csv = io::points_to_csv(&c).unwrap();
        let back = io::points_from_csv(csv.as_slice()).unwrap();
        prop_assert_eq!(&back.points, &c.points);
        prop_assert_eq!(back.frame_id, expect_frame);
    }

    #[test]
    fn feature_map_file_round_trip(fm in feature_map()) {
        prop_assert_eq!(io::decode_feature_map(&io::encode_feature_map(&fm)).unwrap(), fm);
    }

    #[test]
    fn bilinear_is_linear(
        (a, b) in feature_map().prop_flat_map(|a| {
            let b = prop::collection::vec(-100.0f32..100.0, a.data.len())
                .prop_map({
                    let a = a.clone();
                    move |d| FeatureMap::new(a.width, a.height, a.channels, d, a.scale).unwrap()
                });
            (Just(a), b)
        }),
        fu in 0.0..1.0f64,
        fv in 0.0..1.0f64,
    ) {
        let sum = FeatureMap::new(
            a.width, a.height, a.channels,
            a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
            a.scale,
        ).unwrap();
        let (w, h) = a.pixel_extent();
        let (u, v) = (fu * w, fv * h);
        let sa = bilinear_sample(&a, u, v).unwrap();
        let sb = bilinear_sample(&b, u, v).unwrap();
        let ss = bilinear_sample(&sum, u, v).unwrap();
        for k in 0..a.channels {
            // The summed map is stored in f32.
            prop_assert!((ss[k] - (sa[k] + sb[k])).abs() < 1e-4);
        }
    }

    #[test]
    fn bilinear_stays_within_cell_range(fm in feature_map(), fu in 0.0..1.0f64, fv in 0.0..1.0f64) {
        let (w, h) = fm.pixel_extent();
        let s = bilinear_sample(&fm, fu * w, fv * h).unwrap();
        for (k, &val) in s.iter().enumerate() {
            let vals = fm.data.iter().skip(k).step_by(fm.channels).map(|&x| x as f64);
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(val >= lo - 1e-9 && val <= hi + 1e-9);
        }
    }

    #[test]
    fn pillar_contains_its_points(c in cloud(200)) {
        let grid = PillarGrid::new(-5.0, 5.0, -4.0, 4.0, 0.25, 0.5).unwrap();
        let a = dynamic_voxelize(&c, &grid);
        for (i, pt) in c.points.iter().enumerate() {
            let (x, y) = (pt.position.x, pt.position.y);
            match a.point_pillar[i] {
                Some(idx) => {
                    let (ix, iy) = (idx % grid.nx, idx / grid.nx);
                    let x0 = grid.x_min + ix as f64 * grid.pillar_dx;
                    let y0 = grid.y_min + iy as f64 * grid.pillar_dy;
                    prop_assert!(x >= x0 - 1e-12 && x < x0 + grid.pillar_dx + 1e-12);
                    prop_assert!(y >= y0 - 1e-12 && y < y0 + grid.pillar_dy + 1e-12);
                    prop_assert!(a.members[idx].contains(&i));
                }
                None => prop_assert!(!(-5.0..5.0).contains(&x) || !(-4.0..4.0).contains(&y)),
            }
        }
        prop_assert_eq!(a.members.iter().map(Vec::len).sum::<usize>(), a.num_assigned());
    }

    #[test]
    fn encoder_ignores_point_order(c in cloud(120), seed in any::<u64>(), relu in any::<bool>()) {
        let grid = PillarGrid::new(-6.0, 6.0, -6.0, 6.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if relu { Activation::Relu } else { Activation::Silu };
        let enc = EncoderParams::random(FeatureLayout::Point, &[8, 8], act, &mut rng).unwrap();
        let a = encode_pillars(&c, &dynamic_voxelize(&c, &grid), &enc).unwrap();
        let mut rev = c.points.clone();
        rev.reverse();
        let rev = PointCloud::new(rev, 0);
        let b = encode_pillars(&rev, &dynamic_voxelize(&rev, &grid), &enc).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-500.0..500.0f64, 1..20)) {
        let w = softmax(&logits);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn projected_pixels_are_in_frame(p in vec3(60.0), yaw in -3.0..3.0f64) {
        let target = Vec3::new(yaw.cos(), yaw.sin(), 0.0) * 10.0;
        let cam = CameraModel::look_at(Vec3::new(0.0, 0.0, 1.5), target, 400.0, 400.0, 320, 240).unwrap();
        prop_assert!(cam.rotation.is_rotation());
        if let Some((u, v)) = project_to_image(p, &cam) {
            prop_assert!((0.0..320.0).contains(&u) && (0.0..240.0).contains(&v));
            prop_assert!(cam.world_to_camera(p).z > 0.0);
        }
        let back = io::camera_from_json(&io::camera_to_json(&cam).unwrap()).unwrap();
        prop_assert_eq!(back, cam);
    }
}
