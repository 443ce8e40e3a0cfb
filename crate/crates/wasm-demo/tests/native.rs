use stars_wasm_demo::{class_draws, lr_points, sample_overlay, scene_rgba};

#[test]
fn scene_is_three_panels_and_repeatable() {
    let a = scene_rgba(1, 0, 0.5).unwrap();
    assert_eq!(a.len(), 3 * 64 * 64 * 4);
    assert!(a.chunks(4).all(|px| px[3] == 255));
    assert_eq!(a, scene_rgba(1, 0, 0.5).unwrap());
    assert_ne!(a, scene_rgba(1, 1, 0.5).unwrap());
}

#[test]
fn noise_only_changes_modality_2() {
    let quiet = scene_rgba(4, 2, 0.0).unwrap();
    let loud = scene_rgba(4, 2, 1.0).unwrap();
    let row = 3 * 64 * 4;
    let panel = |img: &[u8], p: usize| -> Vec<u8> {
        img.chunks(row).flat_map(|r| r[p * 256..(p + 1) * 256].to_vec()).collect()
    };
    assert_eq!(panel(&quiet, 0), panel(&loud, 0));
    assert_ne!(panel(&quiet, 1), panel(&loud, 1));
    assert_eq!(panel(&quiet, 2), panel(&loud, 2));
}

#[test]
fn lr_curve_hits_anchors() {
    let v = lr_points(2000, 100, 21).unwrap();
    assert_eq!(v.len(), 21);
    assert_eq!(v[0], 1e-6);
    assert_eq!(v[1], 1e-4);
    assert_eq!(v[20], 0.0);
    assert!(v[1..].windows(2).all(|w| w[1] <= w[0]));
    assert!(lr_points(100, 100, 5).is_err());
}

#[test]
fn overlay_draws_n_per_present_class() {
    let n = 40;
    let (rgba, hits) = sample_overlay(1, 3, n, 9).unwrap();
    assert_eq!(rgba.len(), 64 * 64 * 4);
    let counts = class_draws(1, 3, n, 9).unwrap();
    let present = counts.chunks(2).filter(|c| c[0] > 0).count();
    assert_eq!(hits.iter().sum::<u32>() as usize, n * present);
    for c in counts.chunks(2) {
        assert_eq!(c[1] as usize, (c[0] as usize).min(n));
    }
}
