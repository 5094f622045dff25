use morphseg::autodiff::{Checkpoint, Graph, Tensor};
use morphseg::morphology;
use morphseg::network::{Mode, Network, NetworkConfig};
use morphseg::volume::Shape3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, dims: [usize; 3], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * dims.iter().product::<usize>();
    Tensor::new(vec![n, 1, dims[0], dims[1], dims[2]], (0..len).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn outputs_are_congruent_at_test_scale() {
    let net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g);
    let x = g.constant(batch(2, [8, 16, 16], 0));
    let (out, updates) = net.forward(&mut g, &p, x, Mode::Train).unwrap();
    for v in [out.s_bar, out.s, out.i_rec.unwrap()] {
        assert_eq!(g.shape(v), &[2, 1, 8, 16, 16]);
    }
    assert!(!updates.is_empty());
    assert!(g.value(out.s_bar).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn outputs_are_congruent_at_full_input_size() {
    let net = Network::new(NetworkConfig::tiny([32, 128, 128])).unwrap();
    let s = net.predict(&batch(1, [32, 128, 128], 1)).unwrap();
    assert_eq!(s.shape(), &[1, 1, 32, 128, 128]);
}

#[test]
fn eval_mode_skips_reconstruction() {
    let net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    let mut g = Graph::<f32>::inference();
    let p = net.bind(&mut g);
    let x = g.constant(batch(1, [8, 16, 16], 2));
    let (out, updates) = net.forward(&mut g, &p, x, Mode::Eval).unwrap();
    assert!(out.i_rec.is_none());
    assert!(updates.is_empty());
}

#[test]
fn same_seed_same_parameters() {
    let a = Network::new(NetworkConfig { seed: 4, ..NetworkConfig::tiny([8, 16, 16]) }).unwrap();
    let b = Network::new(NetworkConfig { seed: 4, ..NetworkConfig::tiny([8, 16, 16]) }).unwrap();
    let c = Network::new(NetworkConfig { seed: 5, ..NetworkConfig::tiny([8, 16, 16]) }).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Network::new(NetworkConfig { input_shape: [12, 16, 16], ..NetworkConfig::default() }).is_err());
    assert!(Network::new(NetworkConfig { reduced: false, ..NetworkConfig::default() }).is_err());
    let net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    assert!(net.predict(&batch(1, [8, 12, 16], 0)).is_err());
}

#[test]
fn zero_mu_leaves_s_bar_untouched() {
    let net = Network::new(NetworkConfig { mu: 0, ..NetworkConfig::tiny([8, 16, 16]) }).unwrap();
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g);
    let x = g.constant(batch(2, [8, 16, 16], 3));
    let (out, _) = net.forward(&mut g, &p, x, Mode::Train).unwrap();
    assert_eq!(g.value(out.s), g.value(out.s_bar));
}

#[test]
fn s_is_the_smoothed_s_bar_and_stays_in_range() {
    let net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    for seed in 0..3 {
        let mut g = Graph::<f32>::new();
        let p = net.bind(&mut g);
        let x = g.constant(batch(2, [8, 16, 16], 10 + seed));
        let (out, _) = net.forward(&mut g, &p, x, Mode::Train).unwrap();
        let sb = g.value(out.s_bar).data();
        let s = g.value(out.s).data();
        let vol = 8 * 16 * 16;
        for k in 0..2 {
            let smoothed =
                morphology::curvature_smooth_raw(&sb[k * vol..(k + 1) * vol], Shape3::new(8, 16, 16), 3).unwrap();
            assert_eq!(&s[k * vol..(k + 1) * vol], &smoothed[..]);
            let lo = sb[k * vol..(k + 1) * vol].iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = sb[k * vol..(k + 1) * vol].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(s[k * vol..(k + 1) * vol].iter().all(|&v| v >= lo && v <= hi));
        }
    }
}

#[test]
fn isolated_bright_voxel_is_suppressed() {
    let mut data = vec![0.01f32; 8 * 16 * 16];
    data[(4 * 16 + 8) * 16 + 8] = 0.99;
    let mut g = Graph::<f32>::new();
    let s_bar = g.param(Tensor::new(vec![1, 1, 8, 16, 16], data).unwrap());
    let s = g.curvature_smooth(s_bar, 3).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.01));
}

#[test]
fn inference_is_deterministic() {
    let net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    let x = batch(1, [8, 16, 16], 6);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn stat_updates_move_running_averages() {
    let mut net = Network::new(NetworkConfig::tiny([8, 16, 16])).unwrap();
    let x = batch(2, [8, 16, 16], 7);
    let before = net.predict(&x.clone().reshape(vec![2, 1, 8, 16, 16]).unwrap()).unwrap();
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let (_, updates) = net.forward(&mut g, &p, xv, Mode::Train).unwrap();
    net.apply_stat_updates(&updates);
    assert_ne!(net.predict(&x).unwrap(), before);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut net = Network::new(NetworkConfig { seed: 9, ..NetworkConfig::tiny([8, 16, 16]) }).unwrap();
    let x = batch(2, [8, 16, 16], 8);
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let (_, updates) = net.forward(&mut g, &p, xv, Mode::Train).unwrap();
    net.apply_stat_updates(&updates);
    let dir = tempfile::tempdir().unwrap();
    net.to_checkpoint(12).unwrap().save(dir.path()).unwrap();
    let ck = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(ck.step, 12);
    let back = Network::from_checkpoint(&ck).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
}
