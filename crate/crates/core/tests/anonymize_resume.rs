use std::collections::HashSet;

use idmap_core::anonymizer::{
    anonymize_corpus, read_manifest, read_output, AuxSelection, CorpusOptions, Engine, Mode, RegistryRef, Session,
    SessionOptions, MANIFEST_FILE, SESSION_FILE,
};
use idmap_core::backbone::SpeakerCorpus;
use idmap_core::corpus::{generate_synthetic, read_corpus, write_corpus, SyntheticSpec};
use idmap_core::mlp::{train_mlp, MlpConfig};
use idmap_core::sampler::{Distribution, SamplerConfig};

#[test]
fn interrupted_run_resumes_to_exactly_one_record_per_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        speakers: 50,
        utterances: 20,
        dim: 16,
        ..SyntheticSpec::calibrated(4)
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let input = dir.path().join("in.svec");
    write_corpus(&input, &corpus).unwrap();
    let sampler = SamplerConfig::new(Distribution::StandardNormal, 16).unwrap();
    let cfg = MlpConfig {
        steps: 20,
        ..MlpConfig::default()
    };
    let mut model = train_mlp(&SpeakerCorpus::new(&corpus).unwrap(), &sampler, &cfg, 1).unwrap();
    model.record.corpus_path = Some(input.display().to_string());
    let model_path = dir.path().join("mlp.ckpt");
    model.to_checkpoint().save(&model_path).unwrap();

    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let registry = dir.path().join("reg.idrg");
    let mut session = Session::open(
        Engine::load_model(&model_path, Default::default()).unwrap(),
        SessionOptions {
            registry: RegistryRef::File(registry.clone()),
            aux: Some(AuxSelection::Random { seed: 1, corpus: None }),
            seed: 5,
            model_path: Some(model_path.clone()),
            session_path: Some(out.join(SESSION_FILE)),
            ..SessionOptions::default()
        },
    )
    .unwrap();
    let interrupted = anonymize_corpus(
        &mut session,
        &input,
        &out,
        &CorpusOptions {
            stop_after: Some(500),
            ..CorpusOptions::default()
        },
    )
    .unwrap();
    assert_eq!((interrupted.count, interrupted.complete), (500, false));
    drop(session);

    let mut session = Session::reopen(&out.join(SESSION_FILE)).unwrap();
    let aux_before = session.state.aux.clone();
    let done = anonymize_corpus(&mut session, &input, &out, &CorpusOptions::default()).unwrap();
    assert_eq!(session.state.aux, aux_before);
    assert_eq!((done.count, done.new_records, done.complete), (1000, 500, true));

    let manifest = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.len(), 1000);
    let ids: HashSet<&str> = manifest.iter().map(|r| r.utterance_id.as_str()).collect();
    assert_eq!(ids.len(), 1000);
    let indices: HashSet<u64> = manifest.iter().map(|r| r.index.unwrap()).collect();
    assert_eq!(indices.len(), 1000);
    assert!(manifest.iter().all(|r| r.mode == Mode::Utterance));
    for idx in model.record.training_indices() {
        assert!(!indices.contains(&idx.get()));
    }

    let written = read_output(&out).unwrap();
    assert_eq!(written.metas(), read_corpus(&input).unwrap().metas());
    let rows: HashSet<Vec<u64>> = (0..written.len())
        .map(|i| written.row_f64(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(rows.len(), 1000);
}
