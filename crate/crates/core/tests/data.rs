use std::path::Path;

use lasnet::data::augment::{nearest, Augmentation};
use lasnet::data::gt::derive_gt_loc;
use lasnet::data::synth::{synth_fixture, SceneSpec};
use lasnet::data::{load_sample, read_split, write_sample, SplitTag};
use lasnet::labels::LabelMap;
use lasnet::Error;
use proptest::prelude::*;

fn fixture(seed: u64) -> lasnet::data::RgbtSample {
    synth_fixture(&SceneSpec::default(), seed).unwrap().sample
}

#[test]
fn samples_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = fixture(1);
    s.id = "a".into();
    write_sample(dir.path(), &s).unwrap();
    let back = load_sample(dir.path(), "a", 9).unwrap();
    assert_eq!(back.gt_sem, s.gt_sem);
    assert!(back.rgb.max_abs_diff(&s.rgb) <= 0.5 / 255.0 + 1e-12);
    assert!(back.tir.max_abs_diff(&s.tir) <= 0.5 / 255.0 + 1e-12);
}

fn write_png(path: &Path, img: image::DynamicImage) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

#[test]
fn loader_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = fixture(2);
    s.id = "b".into();
    write_sample(dir.path(), &s).unwrap();

    assert!(matches!(load_sample(dir.path(), "b", 3), Err(Error::LabelOutOfRange { .. }) | Err(Error::Data(_))));

    let thermal = lasnet::data::dataset::sample_paths(dir.path(), "b")[1].clone();
    write_png(&thermal, image::DynamicImage::ImageLuma8(image::GrayImage::new(10, 10)));
    let msg = load_sample(dir.path(), "b", 9).unwrap_err().to_string();
    assert!(msg.contains("thermal") || msg.contains(&thermal.display().to_string()), "{msg}");

    assert!(load_sample(dir.path(), "missing", 9).is_err());
}

#[test]
fn split_files_carry_tags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.txt");
    std::fs::write(&path, "0001 day\n0002 night\n\n0003\n").unwrap();
    let e = read_split(&path).unwrap();
    assert_eq!(e.len(), 3);
    assert_eq!((e[0].tag, e[1].tag, e[2].tag), (Some(SplitTag::Day), Some(SplitTag::Night), None));
    std::fs::write(&path, "0001 dusk\n").unwrap();
    assert!(read_split(&path).unwrap_err().to_string().contains("test.txt"));
}

#[test]
fn fixture_areas_match_shapes() {
    let scene = synth_fixture(&SceneSpec::default(), 5).unwrap();
    let gt = &scene.sample.gt_sem;
    // Later shapes paint over earlier ones.
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let want = scene.shapes.iter().rev().find(|s| s.kind.contains(y, x)).map_or(0, |s| s.class);
            assert_eq!(gt.get(0, y, x), want, "({y}, {x})");
        }
    }
}

proptest! {
    #[test]
    fn nearest_matches_centre_oracle(src in 1usize..50, dst in 1usize..50) {
        for d in 0..dst {
            let centre = (d as f64 + 0.5) * src as f64 / dst as f64;
            let want = (centre.floor() as usize).min(src - 1);
            prop_assert_eq!(nearest(d, src, dst), want);
        }
    }

    #[test]
    fn labels_are_resampled_from_the_crop(seed in 0u64..500) {
        let (h, w) = (12, 17);
        let data: Vec<u8> = (0..h * w).map(|i| (i % 7) as u8).collect();
        let m = LabelMap::new(h, w, data).unwrap();
        let a = Augmentation::from_seed(h, w, seed);
        prop_assert!(a.crop_h * 4 >= h * 3 - 4 && a.crop_w * 4 >= w * 3 - 4);
        let out = a.apply_labels(&m);
        for y in 0..h {
            for x in 0..w {
                let sy = a.top + nearest(y, a.crop_h, h);
                let cx = a.left + nearest(x, a.crop_w, w);
                let sx = if a.flip { w - 1 - cx } else { cx };
                prop_assert_eq!(out.get(0, y, x), m.get(0, sy, sx));
            }
        }
    }

    #[test]
    fn location_target_commutes_with_augmentation(seed in 0u64..200) {
        let s = fixture(seed % 7);
        let a = Augmentation::from_seed(s.height(), s.width(), seed);
        prop_assert_eq!(derive_gt_loc(&a.apply_labels(&s.gt_sem)), a.apply_labels(&derive_gt_loc(&s.gt_sem)));
    }
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let s = fixture(3);
    let a = Augmentation::identity(s.height(), s.width());
    let out = a.apply(&s);
    assert_eq!(out.gt_sem, s.gt_sem);
    assert!(out.rgb.max_abs_diff(&s.rgb) < 1e-12);
}
