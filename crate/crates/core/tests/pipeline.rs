//! End-to-end runs on small synthetic scenes.

use surfel_ba::cloud_io::{read_cloud, read_trajectory, write_cloud, write_trajectory, CloudFormat, TrajectoryFormat};
use surfel_ba::evaluation::{ate, generate_scene, ScenePreset, SceneSpec};
use surfel_ba::solver::{run_mad_ba, BaConfig};
use surfel_ba::Execution;

fn small_scene() -> surfel_ba::evaluation::Scene {
    let spec = SceneSpec { scans: 6, azimuth_steps: 360, ..SceneSpec::preset(ScenePreset::BoxWorld) };
    generate_scene(&spec, Execution::Parallel).unwrap()
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let scene = small_scene();
    let config = BaConfig { outer_iterations: 3, ..BaConfig::default() };
    let par =
        run_mad_ba(&scene.clouds, &scene.initial, &BaConfig { exec: Execution::Parallel, ..config.clone() }, None)
            .unwrap();
    let seq =
        run_mad_ba(&scene.clouds, &scene.initial, &BaConfig { exec: Execution::Sequential, ..config }, None).unwrap();
    assert_eq!(par.trajectory.poses(), seq.trajectory.poses());
    assert_eq!(par.metrics, seq.metrics);
    assert_eq!(par.surfels, seq.surfels);
}

#[test]
fn ba_runs_on_clouds_read_back_from_disk() {
    let scene = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let mut clouds = Vec::new();
    for (k, c) in scene.clouds.iter().enumerate() {
        let path = dir.path().join(format!("{k:06}.bin"));
        write_cloud(&c.points, &path, CloudFormat::KittiBin).unwrap();
        clouds.push(read_cloud(&path, CloudFormat::KittiBin, k).unwrap());
    }
    let traj_path = dir.path().join("initial.tum");
    write_trajectory(&scene.initial, &traj_path, TrajectoryFormat::Tum).unwrap();
    let initial = read_trajectory(&traj_path, TrajectoryFormat::Tum).unwrap();
    assert_eq!(initial.poses().len(), scene.initial.poses().len());

    let config = BaConfig { outer_iterations: 4, ..BaConfig::default() };
    let out = run_mad_ba(&clouds, &initial, &config, Some(&scene.ground_truth)).unwrap();
    let (before, _) = ate(&initial, &scene.ground_truth, 0.05).unwrap();
    let (after, _) = ate(&out.trajectory, &scene.ground_truth, 0.05).unwrap();
    assert!(after < 0.5 * before, "ATE {before} -> {after}");
}
