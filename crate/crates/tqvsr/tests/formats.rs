use std::fs;
use std::path::Path;

use serde_json::Value;
use tqvsr::manifest::{self, CorpusIoError};
use tqvsr::{checkpoint, features, index_file};
use tqvsr_core::corpus::{Clip, CorpusError, Dims, Splits, Video, VideoSegment};
use tqvsr_core::retrieval;
use tqvsr_core::synth::{self, SynthConfig};
use tqvsr_core::trainer::{TrainConfig, TrainProgress};
use tqvsr_core::{DmeConfig, DmeModel, EncoderConfig, FusionMode, MaskSpec, Matrix, SegmentCorpus, Sequential, Split};

fn small_corpus() -> SegmentCorpus {
    let cfg = SynthConfig { n_videos: 5, segments_per_video: 2, seed: 4, ..SynthConfig::default() };
    synth::generate(&cfg).unwrap().corpus
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(manifest::MANIFEST_FILE);
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut doc);
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}

#[test]
fn ten_segment_corpus_round_trips_bit_exactly() {
    let corpus = small_corpus();
    assert_eq!(corpus.num_segments(), 10);
    let tmp = tempfile::tempdir().unwrap();
    let path = manifest::save_corpus(&corpus, tmp.path()).unwrap();
    let back = manifest::load_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    for (a, b) in corpus.segments().zip(back.segments()) {
        for (ca, cb) in a.clips.iter().zip(&b.clips) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ca.appearance), bits(&cb.appearance));
            assert_eq!(bits(&ca.transcript), bits(&cb.transcript));
        }
    }
    let again = tempfile::tempdir().unwrap();
    manifest::save_corpus(&back, again.path()).unwrap();
    assert_eq!(fs::read(path).unwrap(), fs::read(again.path().join(manifest::MANIFEST_FILE)).unwrap());
}

#[test]
fn empty_corpus_round_trips() {
    let corpus = SegmentCorpus::empty(Dims { visual: 3, text: 2 });
    let tmp = tempfile::tempdir().unwrap();
    manifest::save_corpus(&corpus, tmp.path()).unwrap();
    assert_eq!(manifest::load_corpus(tmp.path()).unwrap(), corpus);
}

#[test]
fn missing_transcripts_load_as_zero_rows() {
    let dims = Dims { visual: 2, text: 3 };
    let clip = |i: usize, has: bool| Clip {
        clip_index: i,
        appearance: vec![i as f32, 1.0],
        transcript: if has { vec![0.5, -0.5, 1.0] } else { vec![0.0; 3] },
        has_transcript: has,
    };
    let segment = VideoSegment {
        segment_id: "seg_0".into(),
        video_id: "vid_0".into(),
        scenario: "s".into(),
        start_s: 0.0,
        end_s: 60.0,
        clips: vec![clip(0, true), clip(1, false), clip(2, true)],
    };
    let video = Video { video_id: "vid_0".into(), scenario: "s".into(), segments: vec![segment] };
    let splits = Splits { train: ["vid_0".to_string()].into(), ..Splits::default() };
    let corpus = SegmentCorpus::new(dims, vec![video], vec![], splits).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    manifest::save_corpus(&corpus, tmp.path()).unwrap();
    let back = manifest::load_corpus(tmp.path()).unwrap();
    let clips = &back.segment("seg_0").unwrap().clips;
    assert!(!clips[1].has_transcript);
    assert_eq!(clips[1].transcript, vec![0.0; 3]);
    assert_eq!(back, corpus);
}

#[test]
fn dangling_answers_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    manifest::save_corpus(&small_corpus(), tmp.path()).unwrap();
    edit_manifest(tmp.path(), |doc| doc["questions"][0]["answers"] = serde_json::json!(["seg_999"]));
    match manifest::load_corpus(tmp.path()) {
        Err(CorpusIoError::Corpus(CorpusError::DanglingAnswer { answer, .. })) => assert_eq!(answer, "seg_999"),
        other => panic!("expected a dangling answer, got {other:?}"),
    }
}

#[test]
fn overlapping_splits_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    manifest::save_corpus(&small_corpus(), tmp.path()).unwrap();
    let mut moved = String::new();
    edit_manifest(tmp.path(), |doc| {
        moved = doc["splits"]["train"][0].as_str().unwrap().to_string();
        doc["splits"]["test"].as_array_mut().unwrap().push(Value::String(moved.clone()));
    });
    match manifest::load_corpus(tmp.path()) {
        Err(CorpusIoError::Corpus(CorpusError::SplitOverlap(id))) => assert_eq!(id, moved),
        other => panic!("expected a split overlap, got {other:?}"),
    }
}

#[test]
fn missing_feature_files_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus();
    manifest::save_corpus(&corpus, tmp.path()).unwrap();
    fs::remove_file(tmp.path().join("segments/00003.appearance.tqvf")).unwrap();
    let err = manifest::load_corpus(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("00003.appearance.tqvf"), "{err}");
}

#[test]
fn feature_dimension_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus();
    manifest::save_corpus(&corpus, tmp.path()).unwrap();
    let seg = corpus.segments().next().unwrap();
    let wrong = Matrix::<f32>::zeros(seg.len(), corpus.dims().visual + 1);
    features::write(&tmp.path().join("segments/00000.appearance.tqvf"), &wrong).unwrap();
    let err = manifest::load_corpus(tmp.path()).unwrap_err();
    assert!(matches!(err, CorpusIoError::Features(features::FeatureFileError::Dim { .. })), "{err:?}");
}

#[test]
fn unknown_manifest_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    manifest::save_corpus(&small_corpus(), tmp.path()).unwrap();
    edit_manifest(tmp.path(), |doc| doc["comment"] = Value::String("hi".into()));
    assert!(matches!(manifest::load_corpus(tmp.path()), Err(CorpusIoError::Json { .. })));
}

fn tiny_model(fusion: FusionMode) -> DmeModel<f32> {
    let cfg = DmeConfig {
        encoder: EncoderConfig { layers: 1, d: 8, heads: 2, ffn_mult: 2, dropout: 0.0, max_seq_len: 64 },
        dims: small_corpus().dims(),
        fusion,
    };
    DmeModel::new(cfg, 5).unwrap()
}

#[test]
fn checkpoints_round_trip_with_header() {
    let tmp = tempfile::tempdir().unwrap();
    for fusion in [FusionMode::Concat, FusionMode::Add] {
        let model = tiny_model(fusion);
        let path = tmp.path().join(format!("{}.tqvc", fusion.as_str()));
        let progress = TrainProgress { epoch: 2, step: 17 };
        let train = TrainConfig::default();
        let id = checkpoint::save(&path, &model, progress, Some(&train)).unwrap();
        assert_eq!(id, checkpoint::checkpoint_id(&model));
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.header.progress, progress);
        assert_eq!(back.header.train, Some(train));
        assert_eq!(back.header.checkpoint_id, id);
        let (bytes, _) = checkpoint::encode(&back.model, progress, Some(&train));
        assert_eq!(bytes, fs::read(&path).unwrap());
    }
}

#[test]
fn index_files_round_trip() {
    let corpus = small_corpus();
    let model = tiny_model(FusionMode::Concat);
    let mask = MaskSpec::parse("video_transcript").unwrap();
    let index = retrieval::build_index(&model, &corpus, Split::Train, &mask, "abc", &Sequential).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("train.tqvi");
    index_file::save(&path, &index).unwrap();
    let back = index_file::load(&path).unwrap();
    assert_eq!(back, index);
    assert_eq!(index_file::encode(&back), fs::read(&path).unwrap());
}
