mod common;

use proptest::prelude::*;
use scanformer::dataset::{dump_scene, load_scene, PoseJson};
use scanformer::image_io::{decode_png, encode_png, read_png_dir, write_png};
use scanformer::ply;
use scanformer::rngt::{Container, Tensor, MAGIC};
use scanformer::IoError;
use scanformer_core::geometry::{CameraPose, Intrinsics, PointCloud};
use scanformer_core::linalg::{Mat3, Vec3};
use scanformer_core::scene::{make_scene, render_rig, RigConfig};
use serde_json::json;

fn tensor_strategy() -> impl Strategy<Value = (String, Vec<usize>)> {
    ("[a-z][a-z0-9_/\\[\\]]{0,12}", prop::collection::vec(0usize..5, 0..4))
}

fn container_strategy() -> impl Strategy<Value = Container> {
    (prop::collection::vec(tensor_strategy(), 0..5), any::<u64>(), "[ -~]{0,20}").prop_filter_map("duplicate names", |(specs, seed, note)| {
        let mut names: Vec<&String> = specs.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        if names.len() != specs.len() {
            return None;
        }
        let mut s = seed;
        let tensors = specs
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = (0..n)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                        f32::from_bits((s >> 32) as u32 & 0x7f7f_ffff)
                    })
                    .collect();
                Tensor::new(name, &dims, data).unwrap()
            })
            .collect();
        Container::new(tensors, &json!({"note": note, "seed": seed})).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rngt_round_trip_is_byte_identical(c in container_strategy()) {
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rngt_truncation_is_detected(c in container_strategy(), cut in 0.0f64..1.0) {
        let bytes = c.to_bytes().unwrap();
        let at = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(Container::from_bytes(&bytes[..at.min(bytes.len() - 1)]).is_err());
    }

    #[test]
    fn ply_round_trip_is_bit_exact(
        pts in prop::collection::vec(prop::array::uniform3(-1e3f32..1e3), 0..40),
        with_color in any::<bool>(),
        with_conf in any::<bool>(),
    ) {
        let n = pts.len();
        let cloud = PointCloud {
            points: pts.clone(),
            colors: with_color.then(|| (0..n).map(|i| [i as f32 / 255.0 % 1.0, 0.0, 1.0]).collect()),
            confidences: with_conf.then(|| (0..n).map(|i| 1.0 + i as f32 * 0.25).collect()),
        };
        let bytes = ply::to_bytes(&cloud).unwrap();
        let back = ply::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.points.len(), n);
        for (a, b) in back.points.iter().zip(&pts) {
            for k in 0..3 {
                prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        prop_assert_eq!(&back.confidences, &cloud.confidences);
        prop_assert_eq!(ply::to_bytes(&back).unwrap(), bytes);
    }
}

#[test]
fn rngt_rejects_corruption() {
    let c = Container::new(vec![Tensor::new("a", &[2], vec![1.0, 2.0]).unwrap()], &json!({})).unwrap();
    let good = c.to_bytes().unwrap();
    assert_eq!(&good[..4], MAGIC);
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(Container::from_bytes(&bad).is_err());
    let mut bad = good.clone();
    bad.push(0);
    assert!(Container::from_bytes(&bad).is_err());
    assert!(Tensor::new("x", &[3], vec![0.0; 2]).is_err());
    let dup = Container::new(vec![Tensor::new("a", &[1], vec![0.0]).unwrap(), Tensor::new("a", &[1], vec![1.0]).unwrap()], &json!({}));
    assert!(dup.is_err());
}

#[test]
fn png_round_trip_quantises_to_eight_bits() {
    let rgb: Vec<f32> = (0..5 * 3 * 3).map(|i| (i as f32 * 0.037) % 1.0).collect();
    let img = decode_png(&encode_png(5, 3, &rgb).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (5, 3));
    for (a, b) in img.data.iter().zip(&rgb) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    assert!(matches!(decode_png(b"not a png"), Err(IoError::Png(_))));
}

#[test]
fn png_directory_is_read_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    for (name, v) in [("b.png", 0.2f32), ("a.png", 0.8), ("c.png", 0.5)] {
        write_png(dir.path().join(name), 2, 2, &[v; 12]).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let imgs = read_png_dir(dir.path()).unwrap();
    let firsts: Vec<f32> = imgs.iter().map(|i| (i.data[0] * 255.0).round()).collect();
    assert_eq!(firsts, vec![204.0, 51.0, 128.0]);
}

#[test]
fn scene_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rngt");
    let rig = RigConfig { resolution: 12, views_per_scene: 3, ..RigConfig::default() };
    let scene = make_scene(4);
    dump_scene(&path, &scene, &rig).unwrap();
    let (seed, rig2, views) = load_scene(&path).unwrap();
    assert_eq!((seed, rig2), (4, rig));
    let want = render_rig(&scene, &rig).unwrap();
    for (a, b) in views.iter().zip(&want) {
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.mask, b.mask);
        for (p, q) in a.pointmap.iter().zip(&b.pointmap) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn pose_json_validates() {
    let k = Intrinsics::from_fov(8, 8, 60.0);
    let p = CameraPose::new(Mat3::rot_y(0.3), Vec3::new(0.1, 0.2, -1.0), k);
    let j = PoseJson::from_pose(&p);
    assert_eq!(j.to_pose(k).unwrap(), p);
    let mut bad = j;
    bad.rotation[0] = 2.0;
    assert!(bad.to_pose(k).is_err());
    let text = serde_json::to_string(&j).unwrap();
    assert_eq!(serde_json::from_str::<PoseJson>(&text).unwrap(), j);
}
