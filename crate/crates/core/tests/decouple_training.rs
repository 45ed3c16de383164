use dntx_core::decouple::{evaluate_decouple, train_decouple, DecoupleConfig, DecoupleNets, DecouplePools};
use dntx_core::nn::ParamStore;
use dntx_core::rng::seeded;
use dntx_core::synth::{generate_dataset, DatasetConfig};

fn data() -> (Vec<dntx_core::synth::ClipRecord>, dntx_core::face::BlendshapeBasis) {
    let cfg = DatasetConfig { frames: 20, height: 16, width: 16, texture_size: 8, ..DatasetConfig::default() };
    (generate_dataset(&cfg).unwrap(), cfg.basis().unwrap())
}

#[test]
fn trained_decoupler_meets_targets() {
    let (clips, basis) = data();
    let cfg = DecoupleConfig::default();
    let pools = DecouplePools::from_clips(&clips, cfg.jitter, cfg.seed).unwrap();
    let mut store = ParamStore::<f32>::new();
    let nets = DecoupleNets::new(&mut store, &mut seeded(1));
    let before = evaluate_decouple(&nets, &store, &pools, &basis).unwrap();
    let t = std::time::Instant::now();
    let rep = train_decouple(&nets, &mut store, &pools, &basis, &cfg, |r| if r.step % 100 == 0 { eprintln!("{r:?}") }).unwrap();
    eprintln!("{:?}", t.elapsed());
    eprintln!("before n={} m={} d={} brow={}", before.neutral_l1, before.mouth_ratio, before.disc_accuracy, before.brow_removed);
    eprintln!("after  n={} m={} d={} brow={}", rep.neutral_l1, rep.mouth_ratio, rep.disc_accuracy, rep.brow_removed);
    assert!(rep.neutral_l1 <= 0.05);
    assert!(rep.mouth_ratio <= 0.01);
    assert!(rep.disc_accuracy <= 0.65);
}

#[test]
fn landmark_weight_controls_mouth_drift() {
    let (clips, basis) = data();
    let mut ratios = Vec::new();
    for lambda2 in [0.0, 1e9] {
        let mut cfg = DecoupleConfig { steps: 200, ..DecoupleConfig::default() };
        cfg.weights.lambda2 = lambda2;
        let pools = DecouplePools::from_clips(&clips, cfg.jitter, cfg.seed).unwrap();
        let mut store = ParamStore::<f32>::new();
        let nets = DecoupleNets::new(&mut store, &mut seeded(1));
        let rep = train_decouple(&nets, &mut store, &pools, &basis, &cfg, |_| {}).unwrap();
        ratios.push(rep.mouth_ratio);
    }
    eprintln!("mouth drift for lambda2 = 0 and 1e9: {ratios:?}");
    assert!(ratios[1] < ratios[0], "{ratios:?}");
    assert!(ratios[1] <= 0.01, "{ratios:?}");
}
