use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trb_core::data::{
    frame_file_name, load_frames, load_split, overlay_frame, render_clip, synth_generate,
    DatasetManifest, SplitCounts, SynthSpec,
};
use trb_core::metrics::SaliencyVolume;
use trb_core::{Error, Tensor};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        geometry: [4, 24, 24],
        seed,
        ..SynthSpec::default()
    }
}

fn four_each() -> Vec<SplitCounts> {
    vec![SplitCounts {
        name: "train".into(),
        counts: vec![4, 4, 4, 4],
    }]
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(&small_spec(7), &four_each(), a.path()).unwrap();
    synth_generate(&small_spec(7), &four_each(), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 16 * (4 + 1) + 2);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    synth_generate(&small_spec(8), &four_each(), c.path()).unwrap();
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn manifest_counts_match_disk() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&small_spec(1), &four_each(), dir.path()).unwrap();
    let m = DatasetManifest::load(&dir.path().join("train.json")).unwrap();
    assert_eq!(m.class_counts, vec![4, 4, 4, 4]);
    let on_disk = fs::read_dir(dir.path().join("train")).unwrap().count();
    assert_eq!(on_disk, m.clips.len());
}

#[test]
fn round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(3);
    synth_generate(&spec, &four_each(), dir.path()).unwrap();
    let loaded = load_split(&dir.path().join("train.json"), spec.geometry).unwrap();
    // the generator's per-clip stream is (seed, split index, clip index)
    for (i, l) in loaded.iter().enumerate().step_by(5) {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(i as u64);
        let original = render_clip(&spec, l.clip.label, &mut r).unwrap();
        assert!(l.clip.frames.max_abs_diff(&original.frames) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn default_spec_is_separable_by_mean_color() {
    let dir = tempfile::tempdir().unwrap();
    let splits = vec![
        SplitCounts {
            name: "fit".into(),
            counts: vec![6, 6, 6, 6],
        },
        SplitCounts {
            name: "check".into(),
            counts: vec![5, 5, 5, 5],
        },
    ];
    let spec = SynthSpec {
        geometry: [6, 64, 64],
        ..SynthSpec::default()
    };
    let report = synth_generate(&spec, &splits, dir.path()).unwrap();
    assert!(
        report.centroid_accuracy >= 0.9,
        "{}",
        report.centroid_accuracy
    );
}

fn write_solid(dir: &Path, frames: usize, color: [u8; 3]) {
    for t in 0..frames {
        RgbImage::from_pixel(5, 4, Rgb(color))
            .save(dir.join(frame_file_name(t)))
            .unwrap();
    }
}

#[test]
fn solid_frames_load_as_a_constant_clip() {
    let dir = tempfile::tempdir().unwrap();
    write_solid(dir.path(), 20, [51, 102, 255]);
    let clip = load_frames(dir.path(), [20, 4, 5]).unwrap();
    assert_eq!(clip.shape(), &[3, 20, 4, 5]);
    let per = 20 * 4 * 5;
    for (c, v) in [0.2, 0.4, 1.0].iter().enumerate() {
        assert!(clip.data()[c * per..][..per].iter().all(|x| x == v));
    }
    // resampling a constant image keeps it constant
    let resized = load_frames(dir.path(), [20, 9, 7]).unwrap();
    assert!(resized.data()[..9 * 7]
        .iter()
        .all(|&x| (x - 0.2).abs() < 1e-12));
}

#[test]
fn wrong_frame_count_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    write_solid(dir.path(), 19, [0, 0, 0]);
    assert!(matches!(
        load_frames(dir.path(), [20, 4, 5]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn corrupt_frame_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_solid(dir.path(), 3, [0, 0, 0]);
    fs::write(dir.path().join(frame_file_name(1)), b"not a png").unwrap();
    let err = load_frames(dir.path(), [3, 4, 5]).unwrap_err();
    assert!(err.to_string().contains("frame_001.png"), "{err}");
}

#[test]
fn overlay_bytes_follow_the_blend_formula() {
    // frame: 2×2, saliency [[0, 1/3], [2/3, 1]]
    let frame = Tensor::new(
        &[3, 1, 2, 2],
        vec![
            0.0, 0.25, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0,
        ],
    )
    .unwrap();
    let m =
        SaliencyVolume::new(Tensor::new(&[1, 2, 2], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap())
            .unwrap();
    let img = overlay_frame(&frame, &m, 0).unwrap();
    // heat: 0 → (0,0,0), 1/3 → (1,0,0), 2/3 → (1,1,0), 1 → (1,1,1)
    let expected: [[u8; 3]; 4] = [
        [0, 0, 0],
        [159, 32, 32],   // 0.5·0.25 + 0.5·(1,0,0)
        [191, 191, 64],  // 0.5·0.5 + 0.5·(1,1,0)
        [255, 255, 255], // 0.5·1 + 0.5·(1,1,1)
    ];
    for (i, px) in img.pixels().enumerate() {
        assert_eq!(px.0, expected[i], "pixel {i}");
    }
}

#[test]
fn zero_distractors_and_noise_leave_one_object() {
    let spec = SynthSpec {
        distractor_density: 0.0,
        noise: 0.0,
        ..small_spec(0)
    };
    for label in 0..4 {
        let clip = render_clip(&spec, label, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(clip.objects.len(), 1);
        assert_eq!(clip.objects[0].id, "cause");
    }
}
