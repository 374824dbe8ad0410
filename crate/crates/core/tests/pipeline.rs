use tfnet_core::config::RunConfig;
use tfnet_core::data::{load_clip, synth_dataset, DatasetIndex, SynthSpec};
use tfnet_core::dct::{
    channels_to_planes, coefficients_to_channels, frequency_volume, pad_to_block_multiple, rgb_to_ycbcr, select_channels,
};
use tfnet_core::trainer::{derive_seed, training_sample};

fn dataset(dir: &std::path::Path) -> DatasetIndex {
    let spec = SynthSpec {
        clips_per_class: 2,
        ..SynthSpec::default()
    };
    synth_dataset(&spec, 11, dir).unwrap();
    DatasetIndex::load(dir, "train").unwrap()
}

#[test]
fn synthetic_dataset_indexes_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    assert_eq!(index.classes.len(), 2);
    assert_eq!(index.videos.len(), 4);
    for v in &index.videos {
        assert_eq!(v.frame_count(), SynthSpec::default().frames);
        assert_eq!(v.labels.len(), v.frame_count());
        assert!(v.labels.values().flatten().all(|b| b.class_id == v.class_id));
    }
}

#[test]
fn clip_loading_and_training_samples_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    let cfg = RunConfig::from_toml("", &[]).unwrap();
    for v in 0..index.videos.len() {
        let start = index.eval_start(v, &cfg.clip);
        let a = load_clip(&index.videos[v], start, 1, &cfg.clip).unwrap();
        let b = load_clip(&index.videos[v], start, 1, &cfg.clip).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.keyframe, b.keyframe);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.frames.len(), cfg.clip.clip_depth);

        let seed = derive_seed(&[cfg.seed, v as u64]);
        let s = training_sample(&cfg, &index, v, seed).unwrap();
        let t = training_sample(&cfg, &index, v, seed).unwrap();
        assert_eq!(s.frames, t.frames);
        assert_eq!(s.gt, t.gt);
        for b in &s.gt.boxes {
            assert!(b.bbox.x1 < b.bbox.x2 && b.bbox.y1 < b.bbox.y2);
            assert!(b.bbox.x1 >= 0.0 && b.bbox.x2 <= s.keyframe.width() as f64);
            assert!(b.bbox.y1 >= 0.0 && b.bbox.y2 <= s.keyframe.height() as f64);
        }
    }
}

#[test]
fn full_selection_reconstructs_padded_planes() {
    let dir = tempfile::tempdir().unwrap();
    let index = dataset(dir.path());
    let cfg = RunConfig::from_toml("", &[]).unwrap();
    let clip = load_clip(&index.videos[0], 0, 1, &cfg.clip).unwrap();
    let planes = rgb_to_ycbcr(&clip.keyframe);
    let padded: Vec<_> = planes.components().iter().map(|p| pad_to_block_multiple(p)).collect();
    let full = coefficients_to_channels(&planes);
    let selected = select_channels(&full, 1.0).unwrap();
    assert_eq!(selected.channels(), 192);
    let back = channels_to_planes(selected.tensor()).unwrap();
    for (orig, rec) in padded.iter().zip(back.components()) {
        assert_eq!((orig.width, orig.height), (rec.width, rec.height));
        for y in 0..orig.height {
            for x in 0..orig.width {
                assert!((orig.at(x, y) - rec.at(x, y)).abs() < 1e-6);
            }
        }
    }
    let micro = frequency_volume(&clip.keyframe, 16).unwrap();
    assert_eq!(micro.channels(), 48);
    let luma = micro.tensor().len() / 3;
    assert_eq!(micro.tensor().data()[..luma], full.data()[..luma]);
}
