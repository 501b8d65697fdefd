use std::fs;
use std::path::{Path, PathBuf};

use cci_core::faith::ManifestEntry;
use cci_core::transforms::{
    apply, crop_window, make_subset, read_variant_manifest, regenerate, Fill, SubsetOptions, Transform,
    TransformSpec, VariantStatus, STANDARD_KINDS,
};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn spec(transform: Transform, fill: Fill) -> TransformSpec {
    TransformSpec { transform, seed: 0, fill }
}

/// Each pixel stores its own coordinates: R = x, G = y.
fn coordinate_image(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| Rgb([x as u8, y as u8, 0]))
}

#[test]
fn crop_corners_follow_index_arithmetic() {
    let img = coordinate_image(100);
    let out = apply(&img, &spec(Transform::Crop { area: 0.81 }, Fill::Reflect)).unwrap();
    assert_eq!(out.dimensions(), (100, 100));
    // 90x90 window starting at (5, 5); corners of the resized output sample
    // the window corners exactly under half-pixel, edge-clamped sampling.
    let (side, offset) = crop_window(100, 0.81);
    assert_eq!((side, offset), (90, 5));
    assert_eq!(out.get_pixel(0, 0).0, [5, 5, 0]);
    assert_eq!(out.get_pixel(99, 0).0, [94, 5, 0]);
    assert_eq!(out.get_pixel(0, 99).0, [5, 94, 0]);
    assert_eq!(out.get_pixel(99, 99).0, [94, 94, 0]);
    // Interior pixel o maps to 5 + (o + 0.5) * 0.9 - 0.5.
    for o in [10u32, 50, 77] {
        let src = 5.0 + (f64::from(o) + 0.5) * 0.9 - 0.5;
        let got = f64::from(out.get_pixel(o, o).0[0]);
        assert!((got - src).abs() <= 0.5 + 1e-9, "o={o}: {got} vs {src}");
    }
}

fn write_images(dir: &Path, n: usize) -> Vec<ManifestEntry> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("img{i}.png"));
            RgbImage::from_fn(24, 20, |x, y| Rgb([(x * 10) as u8, (y * 12) as u8, (i * 70) as u8]))
                .save(&path)
                .unwrap();
            ManifestEntry {
                path,
                label: format!("c{i}"),
            }
        })
        .collect()
}

fn opts(kinds: &[&str]) -> SubsetOptions {
    SubsetOptions {
        kinds: kinds.iter().map(|k| k.to_string()).collect(),
        seed: 17,
        fill: Fill::Reflect,
        viewpoint_hook: None,
    }
}

fn read_outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn two_flips_of_one_image() {
    let tmp = tempfile::tempdir().unwrap();
    let entries = write_images(tmp.path(), 1);
    let out = tmp.path().join("out");
    let report = make_subset(&entries, &out, &opts(&["hflip", "vflip"])).unwrap();
    assert_eq!(report.rows.len(), 2);
    let params: Vec<_> = report.rows.iter().map(|r| r.params().unwrap()).collect();
    assert_eq!(params[0].spec.transform, Transform::Hflip);
    assert_eq!(params[1].spec.transform, Transform::Vflip);
    assert!(out.join(&report.rows[0].out_path).is_file());
}

#[test]
fn standard_set_counts_and_pending_viewpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let entries = write_images(tmp.path(), 3);
    let out = tmp.path().join("out");
    let report = make_subset(&entries, &out, &opts(&STANDARD_KINDS)).unwrap();
    assert_eq!(report.rows.len(), 33);
    let pending: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.params().unwrap().status == VariantStatus::HookPending)
        .collect();
    assert_eq!(pending.len(), 6);
    assert!(pending.iter().all(|r| r.kind.starts_with("viewpoint")));
    assert!(pending.iter().all(|r| !out.join(&r.out_path).exists()));
    // 27 images plus the manifest.
    assert_eq!(fs::read_dir(&out).unwrap().count(), 28);
    let from_disk = read_variant_manifest(&report.manifest_path).unwrap();
    assert_eq!(from_disk, report.rows);
    let header = fs::read_to_string(&report.manifest_path).unwrap();
    assert!(header.starts_with("src,kind,params_json,out_path\n"));
    for row in &report.rows {
        row.params().unwrap().spec.transform.validate().unwrap();
    }
}

#[test]
fn generation_is_reproducible_and_regenerable() {
    let tmp = tempfile::tempdir().unwrap();
    let entries = write_images(tmp.path(), 2);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let kinds = ["rotate", "crop", "translate", "scale", "scale4", "hflip"];
    make_subset(&entries, &a, &opts(&kinds)).unwrap();
    make_subset(&entries, &b, &opts(&kinds)).unwrap();
    assert_eq!(read_outputs(&a), read_outputs(&b));

    let written = regenerate(&a.join("variants.csv"), &c).unwrap();
    assert_eq!(written.len(), 12);
    let images = |d: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        read_outputs(d).into_iter().filter(|(p, _)| p.extension().unwrap() == "png").collect()
    };
    assert_eq!(images(&a), images(&c));

    let other = tmp.path().join("d");
    make_subset(&entries, &other, &SubsetOptions { seed: 18, ..opts(&kinds) }).unwrap();
    assert_ne!(read_outputs(&a), read_outputs(&other));
}

#[test]
fn unreadable_images_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let mut entries = write_images(tmp.path(), 1);
    entries.insert(
        0,
        ManifestEntry {
            path: tmp.path().join("nope.png"),
            label: "x".into(),
        },
    );
    let report = make_subset(&entries, &tmp.path().join("out"), &opts(&["hflip"])).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.skipped.len(), 1);
}

#[cfg(unix)]
#[test]
fn hook_fill_receives_image_and_mask() {
    use std::os::unix::fs::PermissionsExt;
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("hook.sh");
    // Copies the mask over the output so the test can see what was exposed.
    fs::write(&script, "#!/bin/sh\ncp \"$2\" \"$3\"\n").unwrap();
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    let img = RgbImage::from_pixel(10, 10, Rgb([9, 9, 9]));
    let s = spec(
        Transform::Translate { dx: 0.2, dy: 0.0 },
        Fill::Hook {
            command: script.display().to_string(),
        },
    );
    let out = apply(&img, &s).unwrap();
    for x in 0..10 {
        let expected = if x < 2 { 255 } else { 0 };
        assert_eq!(out.get_pixel(x, 4).0, [expected; 3], "x={x}");
    }

    let failing = tmp.path().join("fail.sh");
    fs::write(&failing, "#!/bin/sh\nexit 3\n").unwrap();
    fs::set_permissions(&failing, fs::Permissions::from_mode(0o755)).unwrap();
    let s = spec(
        Transform::Viewpoint { view: 1 },
        Fill::Hook {
            command: failing.display().to_string(),
        },
    );
    assert!(apply(&img, &s).is_err());
}

fn arb_image() -> impl Strategy<Value = RgbImage> {
    (1u32..12, 1u32..12, any::<u64>()).prop_map(|(w, h, seed)| {
        RgbImage::from_fn(w, h, |x, y| {
            let v = seed.wrapping_mul(u64::from(x * 31 + y * 17 + 1)).rotate_left(x + y);
            Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
        })
    })
}

proptest! {
    #[test]
    fn flips_are_involutions(img in arb_image()) {
        for t in [Transform::Hflip, Transform::Vflip] {
            let once = apply(&img, &spec(t, Fill::Reflect)).unwrap();
            prop_assert_eq!(apply(&once, &spec(t, Fill::Reflect)).unwrap(), img.clone());
        }
    }

    #[test]
    fn zero_rotation_is_identity(img in arb_image()) {
        prop_assert_eq!(apply(&img, &spec(Transform::Rotate { degrees: 0.0 }, Fill::Reflect)).unwrap(), img);
    }

    #[test]
    fn translation_round_trip_keeps_interior(img in arb_image(), dx in -0.2f64..0.2, dy in -0.2f64..0.2) {
        let (w, h) = img.dimensions();
        let fill = Fill::Constant { rgb: [1, 2, 3] };
        let fwd = apply(&img, &spec(Transform::Translate { dx, dy }, fill.clone())).unwrap();
        let back = apply(&fwd, &spec(Transform::Translate { dx: -dx, dy: -dy }, fill)).unwrap();
        let (sx, sy) = ((dx * f64::from(w)).round() as i64, (dy * f64::from(h)).round() as i64);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mx, my) = (x + sx, y + sy);
                if (0..w as i64).contains(&mx) && (0..h as i64).contains(&my) {
                    prop_assert_eq!(back.get_pixel(x as u32, y as u32), img.get_pixel(x as u32, y as u32));
                }
            }
        }
    }

    #[test]
    fn scale_keeps_original_block(img in arb_image(), factor in 1.01f64..8.0) {
        let (w, h) = img.dimensions();
        let out = apply(&img, &spec(Transform::Scale { factor }, Fill::Reflect)).unwrap();
        let (cw, ch) = out.dimensions();
        prop_assert_eq!(cw, (f64::from(w) * factor).round() as u32);
        prop_assert_eq!(ch, (f64::from(h) * factor).round() as u32);
        let (ox, oy) = ((cw - w) / 2, (ch - h) / 2);
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(out.get_pixel(x + ox, y + oy), img.get_pixel(x, y));
            }
        }
    }
}
