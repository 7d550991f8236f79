use mucm_core::audit;
use mucm_core::data;
use mucm_core::net::{self, NetConfig};
use mucm_core::nn::Mode;
use mucm_core::params::{Ctx, ParamStore};
use mucm_core::tensor::{Init, Tape, Tensor};
use mucm_core::train::{self, TrainConfig};
use mucm_core::Error;

fn eval_output(cfg: &NetConfig, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval, false);
    net::forward(&ctx, cfg, tape.constant(x.clone()))
        .unwrap()
        .output
        .value()
        .as_ref()
        .clone()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::new(4, 32);
    let store = net::build::<f32>(&cfg, 11).unwrap();
    let path = dir.path().join("m.ckpt");
    net::save_checkpoint(&path, &cfg, &store).unwrap();
    let (cfg2, store2) = net::load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(cfg, cfg2);
    assert!(store.bit_eq(&store2));
    let x = Tensor::make(&[1, 3, 32, 32], Init::Gaussian(3)).unwrap();
    assert!(eval_output(&cfg, &store, &x).bit_eq(&eval_output(&cfg2, &store2, &x)));
}

#[test]
fn loading_into_another_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = NetConfig::new(2, 32);
    net::save_checkpoint(&path, &cfg, &net::build::<f32>(&cfg, 0).unwrap()).unwrap();
    let other = NetConfig::new(4, 32);
    let mut store = net::build::<f32>(&other, 0).unwrap();
    assert!(matches!(
        net::load_into(&path, &other, &mut store),
        Err(Error::ConfigMismatch(_))
    ));
    assert!(matches!(
        net::load_checkpoint::<f32>(&dir.path().join("absent.ckpt")),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn parameter_count_ignores_the_seed() {
    for k in net::VARIANTS {
        let cfg = NetConfig::new(k, 64);
        let a = audit::count_params(&net::build::<f32>(&cfg, 1).unwrap());
        let b = audit::count_params(&net::build::<f32>(&cfg, 99).unwrap());
        let ledger: usize = audit::param_ledger(&net::build::<f32>(&cfg, 5).unwrap())
            .iter()
            .map(|l| l.2)
            .sum();
        assert_eq!(a, b);
        assert_eq!(a, ledger);
        assert_eq!(a, audit::count_params_config(&cfg).unwrap());
    }
}

#[test]
fn equal_seeds_train_to_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let split = data::synth_generate(4, 32, 2, dir.path()).unwrap();
    let set = data::load_set(dir.path(), &split.train, 32).unwrap();
    let net_cfg = NetConfig::new(2, 32);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = |out: &std::path::Path| {
        let init = net::build::<f32>(&net_cfg, cfg.seed).unwrap();
        train::train(&net_cfg, &cfg, init, &set, &[], Some(out)).unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let (ra, rb) = (run(&a), run(&b));
    assert!(ra.store.bit_eq(&rb.store));
    assert_eq!(ra.history.len(), cfg.epochs);
    let losses = |r: &train::TrainOutcome| r.history.iter().map(|h| h.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&ra), losses(&rb));
    for f in ["last.ckpt", "best.ckpt", "history.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn training_without_samples_fails() {
    let net_cfg = NetConfig::new(1, 32);
    let init = net::build::<f32>(&net_cfg, 0).unwrap();
    let r = train::train(&net_cfg, &TrainConfig::default(), init, &[], &[], None);
    assert!(matches!(r, Err(Error::EmptyDataset)));
}
