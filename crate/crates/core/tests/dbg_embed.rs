// temporary diagnostic: dump retrieval embeddings for probing
use maestro_core::data::{synth_dataset, SynthConfig};
use maestro_core::retrieval::{RetrievalConfig, RetrievalModel};
use maestro_core::train::{train_retrieval, RetrievalTrainConfig};
use std::io::Write;

#[test]
#[ignore]
fn dump_embeddings() {
    let cfg = SynthConfig { seconds: 4.0, ..SynthConfig::default() };
    let clips = synth_dataset(64, 11, &cfg).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = clips.iter().enumerate()
        .partition(|(i, _)| i % 4 != 3);
    let train: Vec<_> = train.into_iter().map(|(_, c)| c.clone()).collect();
    let test: Vec<_> = test.into_iter().map(|(_, c)| c.clone()).collect();
    let rc = RetrievalConfig {
        blocks: 1, heads: 2, hidden: 32, embed_dim: 8, ffn: 64,
        dropout: 0.2, ..RetrievalConfig::default()
    };
    let mut model = RetrievalModel::<f32>::new(rc, 0).unwrap();
    let tc = RetrievalTrainConfig { epochs: 100, lr: 1e-3, crop_frames: 60, seed: 11, ..RetrievalTrainConfig::default() };
    // dump at init: need fit_input_norm first for meaningful init embeddings
    {
        let m: Vec<_> = train.iter().map(|c| &c.music).collect();
        let g: Vec<_> = train.iter().map(|c| &c.gesture).collect();
        let mut init = RetrievalModel::<f32>::new(model.config.clone(), 0).unwrap();
        init.fit_input_norm(maestro_core::retrieval::Branch::Music, &m).unwrap();
        init.fit_input_norm(maestro_core::retrieval::Branch::Gesture, &g).unwrap();
        dump(&init, &test, "/tmp/c7/emb_init.txt");
    }
    train_retrieval(&mut model, &train, &tc).unwrap();
    dump(&model, &test, "/tmp/c7/emb_trained.txt");
    dump(&model, &train, "/tmp/c7/emb_train_set.txt");
}

fn dump(model: &RetrievalModel<f32>, clips: &[maestro_core::data::ClipPair], path: &str) {
    let mut f = std::fs::File::create(path).unwrap();
    for c in clips {
        let em = model.embed_music(&c.music).unwrap();
        let eg = model.embed_gesture(&c.gesture).unwrap();
        let bpm = c.meta.tempo_bpm.unwrap_or(0.0);
        let emo = c.meta.emotion.clone().unwrap_or_default();
        write!(f, "{} {} {}", c.id, bpm, emo).unwrap();
        for v in em.data() { write!(f, " {v}").unwrap(); }
        for v in eg.data() { write!(f, " {v}").unwrap(); }
        writeln!(f).unwrap();
    }
}
