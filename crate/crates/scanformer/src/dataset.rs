//! One RNGT file per rendered scene: `rgb[v]` (H x W x 3), `depth[v]`
//! (H x W), `pose[v]` (row-major rotation then center) and `intrinsics`
//! (`fx fy cx cy width height`). Metadata repeats poses in full precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scanformer_core::geometry::{depth_to_pointmap, CameraPose, Intrinsics};
use scanformer_core::linalg::{Mat3, Vec3};
use scanformer_core::scene::{render_rig, ProceduralScene, RenderedView, RigConfig};

use crate::error::{IoError, Result};
use crate::rngt::{Container, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PoseJson {
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
    /// Camera center in world coordinates.
    pub center: [f64; 3],
}

impl PoseJson {
    pub fn from_pose(p: &CameraPose) -> Self {
        PoseJson { rotation: p.rotation.to_row_array(), center: [p.center[0], p.center[1], p.center[2]] }
    }

    /// Validated pose with the given intrinsics.
    pub fn to_pose(&self, intrinsics: Intrinsics) -> Result<CameraPose> {
        let pose = CameraPose::new(
            Mat3::from_row_slice(&self.rotation),
            Vec3::new(self.center[0], self.center[1], self.center[2]),
            intrinsics,
        );
        pose.validate()?;
        Ok(pose)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneMeta {
    kind: String,
    scene_seed: u64,
    rig: RigConfig,
    poses: Vec<PoseJson>,
}

const KIND: &str = "scanformer-scene";

pub fn scene_to_container(scene: &ProceduralScene, rig: &RigConfig, views: &[RenderedView]) -> Result<Container> {
    let k = rig.intrinsics();
    let (w, h) = (k.width, k.height);
    let mut tensors = Vec::with_capacity(3 * views.len() + 1);
    for (v, view) in views.iter().enumerate() {
        tensors.push(Tensor::new(format!("rgb[{v}]"), &[h, w, 3], view.rgb.clone())?);
        tensors.push(Tensor::new(format!("depth[{v}]"), &[h, w], view.depth.clone())?);
        let p = PoseJson::from_pose(&view.pose);
        let flat: Vec<f32> = p.rotation.iter().chain(&p.center).map(|&x| x as f32).collect();
        tensors.push(Tensor::new(format!("pose[{v}]"), &[12], flat)?);
    }
    tensors.push(Tensor::new("intrinsics", &[6], vec![k.fx as f32, k.fy as f32, k.cx as f32, k.cy as f32, w as f32, h as f32])?);
    let meta = SceneMeta {
        kind: KIND.into(),
        scene_seed: scene.seed,
        rig: *rig,
        poses: views.iter().map(|v| PoseJson::from_pose(&v.pose)).collect(),
    };
    Container::new(tensors, &serde_json::to_value(meta)?)
}

/// Renders the scene's rig and writes it.
pub fn dump_scene(path: impl AsRef<Path>, scene: &ProceduralScene, rig: &RigConfig) -> Result<()> {
    let views = render_rig(scene, rig)?;
    scene_to_container(scene, rig, &views)?.write(path)
}

/// Views of a dumped scene; point maps and masks are rebuilt from depth.
pub fn load_scene(path: impl AsRef<Path>) -> Result<(u64, RigConfig, Vec<RenderedView>)> {
    let c = Container::read(path)?;
    let meta: SceneMeta = serde_json::from_slice(&c.metadata)?;
    if meta.kind != KIND {
        return Err(IoError::Format(format!("not a scene dump: kind {}", meta.kind)));
    }
    let k = meta.rig.intrinsics();
    let mut views = Vec::with_capacity(meta.poses.len());
    for (v, p) in meta.poses.iter().enumerate() {
        let pose = p.to_pose(k)?;
        let rgb = c.require(&format!("rgb[{v}]"))?.data.clone();
        let depth = c.require(&format!("depth[{v}]"))?.data.clone();
        if rgb.len() != 3 * k.pixel_count() {
            return Err(IoError::Format(format!("view {v} does not match the rig resolution")));
        }
        let (points, mask) = depth_to_pointmap(&depth, &pose)?;
        views.push(RenderedView { pose, rgb, depth, pointmap: points.concat(), mask });
    }
    Ok((meta.scene_seed, meta.rig, views))
}
