//! Regenerates the bundled files under `data/`.
//!
//! ```text
//! cargo run -p splat360 --example make_demo_data -- data
//! ```

use std::path::PathBuf;

use splat360::ct::{water_sphere_phantom, VoxelVolume, AIR_HU};
use splat360::fit::toy_scene;
use splat360::{Camera, Gaussian, Mat3, Scene, Vec3};

fn edge_scene() -> Scene {
    let mut near = Gaussian::isotropic(Vec3::new(-1.0, 0.0, 1.0), 0.5, 1.0, Vec3::new(0.8, 0.4, 0.2));
    near.cov = Mat3::from_diagonal(&Vec3::new(0.6, 4.0, 0.01));
    let mut far = near.clone();
    far.mu = Vec3::new(1.0, 0.0, -1.0);
    far.l_iso = Vec3::new(0.2, 0.4, 0.8);
    Scene::new(vec![near, far], Vec3::zeros())
}

fn main() -> splat360::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let demo = root.join("demo");
    let phantom = root.join("phantom");
    std::fs::create_dir_all(&demo)?;
    std::fs::create_dir_all(&phantom)?;

    std::fs::write(demo.join("scene.json"), toy_scene(24, 360).to_json_string())?;
    std::fs::write(demo.join("edge_scene.json"), edge_scene().to_json_string())?;
    let edge_cam = Camera::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y(), 0.5, 40, 30);
    std::fs::write(demo.join("edge_camera.json"), edge_cam.to_json_string())?;
    std::fs::write(demo.join("empty_scene.json"), Scene::empty(Vec3::new(0.2, 0.4, 0.6)).to_json_string())?;

    water_sphere_phantom(64, 1.0, 25.0)?.save(&phantom.join("water_sphere.txt"), "water_sphere.raw")?;
    VoxelVolume::centered([8; 3], Vec3::repeat(4.0), Vec3::zeros(), AIR_HU)?.save(&phantom.join("air.txt"), "air.raw")?;
    println!("wrote {}", root.display());
    Ok(())
}
