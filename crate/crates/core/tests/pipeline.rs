use bevpaint::cli::{cmd_colorize, cmd_ipm, RunConfig};
use bevpaint::colorize::{colorize_points, cuboid_color, format_points, paint_bev, Cuboid};
use bevpaint::dataset::{ipm_composite, write_scene};
use bevpaint::geometry::CameraRig;
use bevpaint::grid::BevGridSpec;
use bevpaint::image::{bev_to_image, RgbImage};
use bevpaint::scene::{render_bev_ground_truth, render_image, sample_lidar, sample_scene, Range, SceneConfig, VEHICLE};

fn planar_config(grid: BevGridSpec) -> SceneConfig {
    let mut cfg = SceneConfig::for_grid(grid);
    cfg.vehicles = Range::new(0, 0);
    cfg
}

#[test]
fn ipm_of_a_planar_scene_matches_ground_truth() {
    let grid = BevGridSpec::new(40.0, 40.0, 0.25, 0.25).unwrap();
    let rig = CameraRig::surround(352, 128);
    for seed in [3, 4, 5] {
        let scene = sample_scene(seed, &planar_config(grid));
        let images: Vec<_> = rig.iter().map(|c| render_image(&scene, &c.intrinsics, &c.extrinsics).to_tensor()).collect();
        let bev = ipm_composite(&images, &rig, &grid).unwrap();
        let (_, gt) = render_bev_ground_truth(&scene, &grid);
        let cells = grid.cells();
        let (mut sum, mut n) = (0.0, 0);
        for k in (0..cells).filter(|&k| bev.valid[k]) {
            for c in 0..3 {
                sum += (bev.appearance.data()[c * cells + k] - gt.data()[c * cells + k]).abs() as f64;
                n += 1;
            }
        }
        assert!(bev.valid_count() > cells / 4, "only {} cells covered", bev.valid_count());
        let mae = sum / n as f64;
        assert!(mae < 0.05, "seed {seed}: mae {mae}");
    }
}

#[test]
fn ipm_command_smears_tall_vehicles_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("[run]\npreset = toy\n[ipm]\nscene = s\n", dir.path()).unwrap();
    let mut scfg = SceneConfig::for_grid(cfg.model.grid);
    scfg.vehicles = Range::new(3, 3);
    scfg.vehicle_height = Range::new(3.0, 3.0);
    scfg.ego_clearance = 2.0;
    let scene = sample_scene(8, &scfg);
    assert!(!scene.vehicles.is_empty());
    write_scene(&dir.path().join("s"), &scene, &cfg.camera_rig().unwrap(), &cfg.model.grid).unwrap();
    let s = cmd_ipm(&cfg).unwrap();
    assert!(s.valid_cells > 0);
    assert!(s.ground_error.is_some());
    let out = RgbImage::load_ppm(&dir.path().join("out/ipm_bev.ppm")).unwrap();
    assert_eq!((out.width, out.height), (64, 64));

    // Cells beyond a vehicle's footprint pick up its paint.
    let (occ, _) = render_bev_ground_truth(&scene, &cfg.model.grid);
    let cells = cfg.model.grid.cells();
    let painted: Vec<[u8; 3]> = scene.vehicles.iter().map(|v| v.color).collect();
    let bev = bevpaint::image::image_to_bev(&out, &cfg.model.grid).unwrap();
    let smeared = (0..cells)
        .filter(|&k| occ.data()[VEHICLE * cells + k] < 0.5)
        .filter(|&k| {
            let px = [0, 1, 2].map(|c| (bev.data()[c * cells + k] * 255.0).round() as u8);
            painted.contains(&px)
        })
        .count();
    assert!(smeared > 0);
}

fn colorize_fixture(dir: &std::path::Path) -> (RunConfig, bevpaint::scene::Scene) {
    let mut cfg = RunConfig::parse("[run]\npreset = toy\n[colorize]\nscene = s\n", dir).unwrap();
    cfg.model.image_width = 128;
    cfg.model.image_height = 128;
    let mut scfg = SceneConfig::for_grid(cfg.model.grid);
    scfg.vehicles = Range::new(2, 2);
    scfg.ego_clearance = 2.0;
    let scene = sample_scene(11, &scfg);
    write_scene(&dir.join("s"), &scene, &cfg.camera_rig().unwrap(), &cfg.model.grid).unwrap();
    (cfg, scene)
}

#[test]
fn colorize_command_matches_the_module_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, scene) = colorize_fixture(dir.path());
    let summary = cmd_colorize(&cfg).unwrap();
    assert_eq!(summary.cuboids, scene.vehicles.len());

    let rig = cfg.camera_rig().unwrap();
    let images: Vec<RgbImage> = rig.iter().map(|c| render_image(&scene, &c.intrinsics, &c.extrinsics)).collect();
    let points = sample_lidar(&scene, [0.0, 0.0, cfg.colorize.lidar_height], &cfg.scene.lidar);
    let cuboids: Vec<Cuboid> = scene
        .vehicles
        .iter()
        .map(|v| {
            let mut c = Cuboid::from_vehicle(v);
            c.color = Some(cuboid_color(&c, &images, &rig).unwrap());
            c
        })
        .collect();
    let painted = paint_bev(&colorize_points(&points, &images, &rig).unwrap(), &cuboids, &cfg.model.grid).unwrap();
    let expected = bev_to_image(&painted.appearance, &cfg.model.grid).unwrap().encode_ppm();
    assert_eq!(std::fs::read(dir.path().join("out/bev_appearance.ppm")).unwrap(), expected);
    assert!(dir.path().join("out/mask.pgm").exists());
    let colors: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/cuboid_colors.json")).unwrap()).unwrap();
    for (c, v) in cuboids.iter().zip(colors.as_array().unwrap()) {
        let got: Vec<u8> = v["color"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u8).collect();
        assert_eq!(got, c.color.unwrap().to_vec());
    }
}

#[test]
fn colorize_with_empty_layers() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, scene) = colorize_fixture(dir.path());

    // No cuboids: only the static layer.
    std::fs::write(dir.path().join("none.json"), "[]").unwrap();
    cfg.colorize.cuboids = Some(dir.path().join("none.json"));
    cfg.out = dir.path().join("static");
    let s = cmd_colorize(&cfg).unwrap();
    assert_eq!(s.cuboids, 0);
    assert!(s.valid_cells > 0);

    // No points: vehicles on an invalid background.
    std::fs::write(dir.path().join("empty.txt"), format_points(&[])).unwrap();
    cfg.colorize.points = Some(dir.path().join("empty.txt"));
    cfg.colorize.cuboids = None;
    cfg.out = dir.path().join("dynamic");
    let s = cmd_colorize(&cfg).unwrap();
    assert_eq!(s.points, 0);
    let (occ, _) = render_bev_ground_truth(&scene, &cfg.model.grid);
    let cells = cfg.model.grid.cells();
    let vehicle_cells = (0..cells).filter(|&k| occ.data()[VEHICLE * cells + k] > 0.5).count();
    assert_eq!(s.valid_cells, vehicle_cells);
}

#[test]
fn colorize_skips_vehicles_no_camera_sees() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = colorize_fixture(dir.path());
    // Front and rear cameras only: a car level with the ego vehicle is in
    // the blind spot, one ahead is in view.
    let cuboids = r#"[
        {"center": [0.0, 6.0, 0.75], "yaw": 0.0, "dims": [4.0, 1.8, 1.5]},
        {"center": [6.0, 0.0, 0.75], "yaw": 0.0, "dims": [4.0, 1.8, 1.5]}
    ]"#;
    std::fs::write(dir.path().join("cuboids.json"), cuboids).unwrap();
    cfg.colorize.cuboids = Some(dir.path().join("cuboids.json"));
    let s = cmd_colorize(&cfg).unwrap();
    assert_eq!((s.cuboids, s.unseen_cuboids), (2, 1));
    let colors: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/cuboid_colors.json")).unwrap()).unwrap();
    assert!(colors[0]["color"].is_null());
    assert_eq!(colors[1]["color"].as_array().unwrap().len(), 3);
}
