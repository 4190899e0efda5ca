//! Training-level behaviour on the synthetic motion dataset.

use repflow_core::model::data::{shuffle_frames, synth_dataset, LabeledClip, SyntheticDatasetConfig};
use repflow_core::model::train::{evaluate, train, Stage, TrainConfig};
use repflow_core::model::{DenseHead, ModelConfig, StreamMode, TwoStreamModel};
use repflow_core::rng::Rng;

fn small_data(seed: u64) -> repflow_core::model::data::Dataset {
    let mut cfg = SyntheticDatasetConfig::desk_default(seed);
    cfg.train_per_class = 8;
    cfg.test_per_class = 5;
    cfg.frames_per_clip = 6;
    synth_dataset(&cfg).unwrap()
}

fn small_model(seed: u64) -> TwoStreamModel {
    let mut rng = Rng::new(seed);
    let mut cfg = ModelConfig::desk_default(4, 16);
    cfg.flow_iters = 8;
    cfg.convlstm_hidden = 4;
    TwoStreamModel::new(cfg, &mut rng).unwrap()
}

// An untrained model with a zeroed classifier head always predicts class 0;
// on the balanced 4-class split that is chance level.
#[test]
fn untrained_zero_head_accuracy_is_chance() {
    for seed in [3u64, 11, 42] {
        let data = small_data(seed);
        let mut model = small_model(seed ^ 0xabc);
        model.rgb_classifier = DenseHead::zeroed(4, model.config.convlstm_hidden);
        let acc = evaluate(&model, &data.test, StreamMode::RgbOnly).unwrap();
        assert!((0.15..=0.35).contains(&acc), "seed {seed}: {acc}");
    }
}

// The motion stream learns the synthetic directions quickly.
#[test]
fn flow_stream_learns_motion_directions() {
    let data = small_data(7);
    let mut model = small_model(8);
    let mut cfg = TrainConfig::quick(Stage::Flow, 6, 1e-2, 9);
    cfg.clip_length = 6;
    let metrics = train(&mut model, &cfg, &data.train).unwrap();
    assert!(metrics.last().unwrap().loss < metrics[0].loss);
    let acc = evaluate(&model, &data.test, StreamMode::FlowOnly).unwrap();
    assert!(acc >= 0.6, "flow-stream accuracy {acc} below 0.6");
}

// Frame shuffling destroys the only label signal; appearance-stream accuracy
// on shuffled clips must sit near chance.
#[test]
fn shuffled_clips_reduce_rgb_stream_to_chance() {
    let data = small_data(13);
    let mut model = small_model(14);
    let mut cfg = TrainConfig::quick(Stage::RgbStage1, 4, 5e-3, 15);
    cfg.clip_length = 6;
    train(&mut model, &cfg, &data.train).unwrap();

    let mut rng = Rng::new(99);
    let shuffled: Vec<LabeledClip> = data
        .test
        .iter()
        .map(|item| LabeledClip {
            clip: shuffle_frames(&item.clip, &mut rng).unwrap(),
            label: item.label,
        })
        .collect();
    let acc = evaluate(&model, &shuffled, StreamMode::RgbOnly).unwrap();
    println!("rgb accuracy on shuffled clips: {acc}");
    assert!((0.05..=0.5).contains(&acc), "not chance-like: {acc}");
}
