use dntx_core::audio_exp::{train_audio_exp, AudioExpConfig, AudioExpNet};
use dntx_core::nn::ParamStore;
use dntx_core::rng::seeded;
use dntx_core::synth::{generate_dataset, DatasetConfig};

#[test]
fn trained_predictor_tracks_the_jaw() {
    let cfg = DatasetConfig { frames: 20, height: 16, width: 16, texture_size: 8, ..DatasetConfig::default() };
    let clips = generate_dataset(&cfg).unwrap();
    let basis = cfg.basis().unwrap();
    let mut store = ParamStore::<f32>::new();
    let net = AudioExpNet::new(&mut store, &mut seeded(1));
    let t = std::time::Instant::now();
    let rep = train_audio_exp(&net, &mut store, &clips, &basis, &AudioExpConfig::default(), |r| if r.step % 100 == 0 { eprintln!("{r:?}") }).unwrap();
    eprintln!("{:?} jaw={} rmse={} dlt={}", t.elapsed(), rep.jaw_correlation, rep.geometry_rmse, rep.dlt_ratio);
    assert!(rep.jaw_correlation >= 0.8);
    assert!(rep.dlt_ratio <= 2.0);
}
