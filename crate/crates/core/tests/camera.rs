use blapose::augment::flip_keypoints;
use blapose::camera::{
    denormalize_keypoints, normalize_keypoints, project_point, project_sequence, CameraIntrinsics,
    KeypointSequence, Vec2,
};
use blapose::skeleton::{Pose, PoseSequence, SequenceMeta, SkeletonTopology, Vec3};
use proptest::prelude::*;

/// Textbook Brown-Conrady written out term by term.
fn reference_projection(p: [f64; 3], cam: &CameraIntrinsics) -> (f64, f64) {
    let x = p[0] / p[2];
    let y = p[1] / p[2];
    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    let r6 = r4 * r2;
    let radial = 1.0 + cam.k[0] * r2 + cam.k[1] * r4 + cam.k[2] * r6;
    let dx = 2.0 * cam.p[0] * x * y + cam.p[1] * (r2 + 2.0 * x * x);
    let dy = cam.p[0] * (r2 + 2.0 * y * y) + 2.0 * cam.p[1] * x * y;
    (
        cam.fx * (x * radial + dx) + cam.cx,
        cam.fy * (y * radial + dy) + cam.cy,
    )
}

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::pinhole(1000.0, 1000.0, 500.0, 400.0, 1000.0, 800.0).unwrap()
}

#[test]
fn radial_distortion_matches_reference() {
    let mut c = cam();
    c.k = [0.1, 0.0, 0.0];
    let got = project_point(&Vec3::new(1.0, 0.0, 2.0), &c).unwrap();
    // x_n = 0.5, r^2 = 0.25, factor 1.025
    assert!((got.x - 1012.5).abs() < 1e-9);
    let (u, v) = reference_projection([1.0, 0.0, 2.0], &c);
    assert!((got.x - u).abs() < 1e-9 && (got.y - v).abs() < 1e-9);
}

proptest! {
    #[test]
    fn full_distortion_matches_reference(
        x in -1.0..1.0f64, y in -1.0..1.0f64, z in 1.0..6.0f64,
        k1 in -0.3..0.3f64, k2 in -0.1..0.1f64, k3 in -0.05..0.05f64,
        p1 in -0.01..0.01f64, p2 in -0.01..0.01f64,
    ) {
        let mut c = cam();
        c.k = [k1, k2, k3];
        c.p = [p1, p2];
        let got = project_point(&Vec3::new(x, y, z), &c).unwrap();
        let (u, v) = reference_projection([x, y, z], &c);
        prop_assert!((got.x - u).abs() < 1e-9 && (got.y - v).abs() < 1e-9);
    }

    #[test]
    fn normalization_round_trips(u in -500.0..1500.0f64, v in -500.0..1500.0f64) {
        let kps = KeypointSequence::new(vec![vec![Vec2::new(u, v)]], SequenceMeta::default()).unwrap();
        let back = denormalize_keypoints(&normalize_keypoints(&kps, &cam()), &cam());
        prop_assert!((back.frames[0][0] - Vec2::new(u, v)).amax() < 1e-9);
    }

    #[test]
    fn moving_away_shrinks_pixel_distances(
        ax in -0.5..0.5f64, ay in -0.5..0.5f64,
        bx in -0.5..0.5f64, by in -0.5..0.5f64,
        z in 2.0..5.0f64, dz in 0.01..3.0f64,
    ) {
        prop_assume!((ax - bx).abs() + (ay - by).abs() > 1e-3);
        let c = cam();
        let dist = |z: f64| {
            let a = project_point(&Vec3::new(ax, ay, z), &c).unwrap();
            let b = project_point(&Vec3::new(bx, by, z), &c).unwrap();
            (a - b).norm()
        };
        prop_assert!(dist(z + dz) < dist(z));
    }
}

fn sequence(joints: Vec<Vec3>) -> PoseSequence {
    PoseSequence::new(vec![Pose::new(joints).unwrap()], 50.0, SequenceMeta::default()).unwrap()
}

#[test]
fn projection_commutes_with_flipping() {
    let topo = SkeletonTopology::h36m17();
    let mut c = CameraIntrinsics::default_fixture();
    c.p = [0.0, 0.0];
    let joints: Vec<Vec3> = (0..17)
        .map(|j| {
            let t = j as f64;
            Vec3::new(0.05 * (t * 1.3).sin(), 0.04 * t - 0.3, 3.0 + 0.02 * (t * 0.7).cos())
        })
        .collect();
    // Mirror the 3D pose through the plane x = 0 (the optical axis plane) and
    // swap left and right joints.
    let perm = topo.mirrored_joints();
    let mirrored: Vec<Vec3> = perm
        .iter()
        .map(|&src| Vec3::new(-joints[src].x, joints[src].y, joints[src].z))
        .collect();
    let a = flip_keypoints(&project_sequence(&sequence(joints), &c).unwrap(), &c, &topo);
    let b = project_sequence(&sequence(mirrored), &c).unwrap();
    for (p, q) in a.frames[0].iter().zip(&b.frames[0]) {
        assert!((p - q).amax() < 1e-9, "{p} vs {q}");
    }
}

#[test]
fn default_fixture_file_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/camera_default.json");
    assert_eq!(CameraIntrinsics::load(path).unwrap(), CameraIntrinsics::default_fixture());
}
