use nalgebra::{Point2, Point3};
use plantstruct::camera::{fundamental_matrix, line_distance, line_through, triangulate, CalibrationFile, Scene};
use plantstruct::silhouette::{distance_transform, thin, Mask};
use plantstruct::synth::RenderConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rig() -> Scene {
    RenderConfig::default().scene().unwrap()
}

fn brute_force_distance(mask: &Mask, x: usize, y: usize) -> f64 {
    mask.pixels()
        .map(|(fx, fy)| {
            let (dx, dy) = (fx as f64 - x as f64, fy as f64 - y as f64);
            (dx * dx + dy * dy).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn mask_from_bits(size: usize, bits: &[bool]) -> Mask {
    Mask::from_fn(size, size, |x, y| bits[y * size + x])
}

/// Union of discs; thick enough that thinning has real work to do.
fn blobs(size: usize, discs: &[(f64, f64, f64)]) -> Mask {
    Mask::from_fn(size, size, |x, y| {
        discs.iter().any(|&(cx, cy, r)| (x as f64 - cx).hypot(y as f64 - cy) <= r)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn triangulation_inverts_projection(
        x in -300.0..300.0f64, y in -300.0..300.0f64, z in 0.0..400.0f64,
        views in proptest::sample::subsequence(vec![0usize, 1, 2, 3], 2..=4),
    ) {
        let scene = rig();
        let p = Point3::new(x, y, z);
        let obs: Vec<(usize, Point2<f64>)> =
            views.iter().map(|&v| (v, scene.cameras[v].project(&p).unwrap())).collect();
        let t = triangulate(&obs, &scene.cameras).unwrap();
        prop_assert!((t.point - p).norm() < 1e-6, "error {}", (t.point - p).norm());
        prop_assert!(t.rms < 1e-6);
    }

    #[test]
    fn projections_satisfy_epipolar_constraint(
        x in -300.0..300.0f64, y in -300.0..300.0f64, z in 0.0..400.0f64,
        a in 0usize..4, b in 0usize..4,
    ) {
        prop_assume!(a != b);
        let scene = rig();
        let p = Point3::new(x, y, z);
        let (ca, cb) = (&scene.cameras[a], &scene.cameras[b]);
        let f = fundamental_matrix(ca, cb).unwrap();
        let line = line_through(&f, &ca.project(&p).unwrap()).unwrap();
        prop_assert!(line_distance(&line, &cb.project(&p).unwrap()) < 1e-6);
    }

    #[test]
    fn thinning_is_idempotent_on_noise(bits in proptest::collection::vec(any::<bool>(), 24 * 24)) {
        let m = mask_from_bits(24, &bits);
        let s = thin(&m);
        prop_assert_eq!(thin(&s), s.clone());
        prop_assert!(s.is_subset_of(&m));
        prop_assert_eq!(s.component_count(), m.component_count());
    }

    #[test]
    fn thinning_preserves_blob_components(
        discs in proptest::collection::vec((0.0..64.0f64, 0.0..64.0f64, 1.0..10.0f64), 1..6),
    ) {
        let m = blobs(64, &discs);
        let s = thin(&m);
        prop_assert_eq!(thin(&s), s.clone());
        prop_assert_eq!(s.component_count(), m.component_count());
    }

    #[test]
    fn distance_transform_is_exact(
        features in proptest::collection::vec((0usize..40, 0usize..40), 0..12),
    ) {
        let mut m = Mask::new(40, 40);
        for &(x, y) in &features {
            m.set(x, y, true);
        }
        let field = distance_transform(&m);
        for y in 0..40 {
            for x in 0..40 {
                prop_assert_eq!(field.at(x, y), brute_force_distance(&m, x, y));
            }
        }
    }

    #[test]
    fn bilinear_stays_within_cell_values(
        features in proptest::collection::vec((0usize..20, 0usize..20), 1..6),
        u in 0.0..19.0f64, v in 0.0..19.0f64,
    ) {
        let mut m = Mask::new(20, 20);
        for &(x, y) in &features {
            m.set(x, y, true);
        }
        let field = distance_transform(&m);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let corners = [field.at(x0, y0), field.at(x0 + 1, y0), field.at(x0, y0 + 1), field.at(x0 + 1, y0 + 1)];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(0.0, f64::max);
        let value = field.bilinear(u, v);
        prop_assert!(value >= lo - 1e-12 && value <= hi + 1e-12);
    }
}

#[test]
fn calibration_json_round_trip() {
    let scene = rig();
    let text = scene.to_json().unwrap();
    let back = Scene::from_json(&text).unwrap();
    assert_eq!(CalibrationFile::from_scene(&back), CalibrationFile::from_scene(&scene));
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn distance_transform_on_full_size_random_image() {
    let mut m = Mask::new(128, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    for _ in 0..80 {
        m.set(rng.random_range(0..128), rng.random_range(0..128), true);
    }
    let field = distance_transform(&m);
    for y in 0..128 {
        for x in 0..128 {
            assert_eq!(field.at(x, y), brute_force_distance(&m, x, y));
        }
    }
}
