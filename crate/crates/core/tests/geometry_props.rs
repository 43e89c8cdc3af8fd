use proptest::prelude::*;
use scanformer_core::geometry::{normalize_cameras, plucker_map, recover_up_direction, CameraPose, Intrinsics, Similarity};
use scanformer_core::linalg::{deg, rad, Mat3, Vec3};

fn unit(v: [f64; 3]) -> Option<Vec3> {
    Vec3::new(v[0], v[1], v[2]).try_normalize().filter(|u| u.norm() > 0.5)
}

fn pose_strategy() -> impl Strategy<Value = CameraPose> {
    (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-1.0f64..1.0), -3.0f64..3.0, prop::array::uniform3(-2.0f64..2.0))
        .prop_filter_map("degenerate axis", |(axis, _, angle, c)| {
            let a = unit(axis)?;
            Some(CameraPose::new(Mat3::axis_angle(a, angle), Vec3::new(c[0], c[1], c[2]), Intrinsics::from_fov(24, 18, 55.0)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalization_is_idempotent(poses in prop::collection::vec(pose_strategy(), 1..6)) {
        prop_assume!(poses[0].center.norm() > 1e-3);
        let (once, _) = normalize_cameras(&poses).unwrap();
        prop_assert!(once[0].is_canonical());
        let (twice, sim) = normalize_cameras(&once).unwrap();
        prop_assert!(sim.is_identity());
        prop_assert_eq!(&once, &twice);
    }

    #[test]
    fn normalization_preserves_relative_geometry(poses in prop::collection::vec(pose_strategy(), 2..5)) {
        prop_assume!(poses[0].center.norm() > 1e-2);
        let (out, sim) = normalize_cameras(&poses).unwrap();
        prop_assert!((out[0].center.norm() - 1.0).abs() < 1e-12);
        for (a, b) in poses.iter().zip(&out) {
            let rel = poses[0].rotation.transpose().mul_mat(a.rotation);
            prop_assert!((rel.mul_mat(b.rotation.transpose())).rotation_angle() < 1e-6);
            let d = a.center - poses[0].center;
            let e = b.center - out[0].center;
            prop_assert!((d.norm() * sim.scale - e.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn plucker_rays_are_unit_and_orthogonal(pose in pose_strategy()) {
        let map = plucker_map(&pose).unwrap();
        for (d, m) in map.directions.iter().zip(&map.moments) {
            prop_assert!((d.norm() - 1.0).abs() <= 1e-6);
            prop_assert!(d.dot(*m).abs() <= 1e-6);
        }
    }

    #[test]
    fn project_backproject_round_trip(pose in pose_strategy(), x in 0.0f64..24.0, y in 0.0f64..18.0, z in 0.05f64..20.0) {
        let ray = pose.rotation.mul_vec(pose.intrinsics.unproject(x, y));
        let p = pose.center + ray * z;
        let (u, v) = pose.project(p).unwrap();
        prop_assert!((u - x).abs() <= 1e-4 && (v - y).abs() <= 1e-4);
        prop_assert!((pose.depth_of(p) - z).abs() <= 1e-9 * z.max(1.0));
    }

    #[test]
    fn injected_roll_is_recovered(
        cams in prop::collection::vec((-3.1f64..3.1, -1.2f64..1.2, 1.5f64..3.0), 4..9),
        inject in -40.0f64..40.0,
    ) {
        let k = Intrinsics::from_fov(16, 16, 60.0);
        let poses: Vec<CameraPose> = cams
            .iter()
            .map(|&(az, el, r)| {
                let c = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()) * r;
                CameraPose::look_at(c, Vec3::ZERO, Vec3::Y, Vec3::X, k).unwrap()
            })
            .collect();
        prop_assume!(poses.iter().filter(|p| p.optical_axis().x().abs() > 0.2).count() >= 2);
        let rot = Similarity { scale: 1.0, rotation: Mat3::rot_x(rad(inject)), translation: Vec3::ZERO };
        let moved: Vec<CameraPose> = poses.iter().map(|p| rot.apply_pose(p)).collect();
        let up = recover_up_direction(&moved).unwrap();
        prop_assert!((deg(up.angle) + inject).abs() < 0.5, "recovered {} for {}", deg(up.angle), inject);
    }
}

#[test]
fn seventeen_degree_roll() {
    let k = Intrinsics::from_fov(16, 16, 60.0);
    let poses: Vec<CameraPose> = [(0.4, 0.1), (1.7, -0.4), (2.9, 0.3), (-1.1, 0.6)]
        .iter()
        .map(|&(az, el): &(f64, f64)| {
            let c = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()) * 2.0;
            CameraPose::look_at(c, Vec3::ZERO, Vec3::Y, Vec3::X, k).unwrap()
        })
        .collect();
    let rot = Similarity { scale: 1.0, rotation: Mat3::rot_x(rad(17.0)), translation: Vec3::ZERO };
    let moved: Vec<CameraPose> = poses.iter().map(|p| rot.apply_pose(p)).collect();
    let up = recover_up_direction(&moved).unwrap();
    assert!((deg(up.angle) + 17.0).abs() < 0.5);
    let fixed: Vec<CameraPose> = moved.iter().map(|p| up.similarity().apply_pose(p)).collect();
    for (a, b) in fixed.iter().zip(&poses) {
        assert!(a.rotation.transpose().mul_mat(b.rotation).rotation_angle() < rad(0.5));
    }
}
