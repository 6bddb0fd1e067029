use uaan::data::{generate_synthetic, Split, SynthConfig};
use uaan::detector::{detect, Verdict};
use uaan::metrics::tiou;
use uaan::train::{train, RunConfig};

fn single_action(split: Split, clips: usize) -> SynthConfig {
    SynthConfig {
        split,
        clips,
        max_segments: 1,
        ood_fraction: Some(0.0),
        ..SynthConfig::default()
    }
}

#[test]
fn planted_action_is_found() {
    let train_set = generate_synthetic(&single_action(Split::Train, 32), 21).unwrap();
    let config = RunConfig {
        epochs: 20,
        ..RunConfig::default()
    };
    let (ckpt, _) = train(&config, &train_set.clips).unwrap();

    let test_set = generate_synthetic(&single_action(Split::Test, 10), 21).unwrap();
    for (clip, ann) in &test_set.clips {
        let truth = ann.segments[0];
        let dets = detect(ckpt.model(), clip, &config.thresholds).unwrap();
        let top = dets
            .iter()
            .filter(|d| d.verdict == Verdict::Id)
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap_or_else(|| panic!("{}: no detection", clip.video_id));
        let overlap = tiou((top.start, top.end), truth.span()).unwrap();
        assert!(
            overlap >= 0.5,
            "{}: top detection [{}, {}) vs planted [{}, {}), tIoU {overlap}",
            clip.video_id,
            top.start,
            top.end,
            truth.start,
            truth.end
        );
    }
}
