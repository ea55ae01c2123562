mod common;

use avse_core::masknet::{LstmState, MaskNet, ModelConfig, ModelWeights, StreamState};
use avse_core::rng::FixtureRng;

fn randomize_bn(w: &mut ModelWeights, rng: &mut FixtureRng) {
    // Push batch-norm statistics well away from identity.
    for l in 1..=15 {
        for (p, lo, hi) in [("bn_gamma", -2.0, 2.0), ("bn_beta", -0.5, 0.5), ("bn_mean", -0.5, 0.5), ("bn_var", 0.1, 3.0)] {
            let t = w.get_mut(&format!("conv{l}.{p}")).unwrap();
            t.data.iter_mut().for_each(|v| *v = rng.uniform(lo, hi) as f32);
        }
    }
}

fn model(seed: u64, wide_bn: bool) -> (ModelWeights, MaskNet) {
    let mut rng = FixtureRng::new(seed);
    let cfg = common::random_small_config(&mut rng);
    let mut w = ModelWeights::random(cfg, seed).unwrap();
    if wide_bn {
        randomize_bn(&mut w, &mut rng);
    }
    let net = MaskNet::from_weights(&w).unwrap();
    (w, net)
}

fn pad(x: &[Vec<f64>]) -> Vec<f32> {
    x.iter()
        .flat_map(|row| std::iter::once(0.0).chain(row.iter().map(|&v| v as f32)).chain(std::iter::once(0.0)))
        .collect()
}

fn random_planes(rng: &mut FixtureRng, c: usize, f: usize) -> Vec<Vec<f64>> {
    // Round through f32 so both sides see identical inputs.
    (0..c)
        .map(|_| (0..f).map(|_| rng.uniform(-1.0, 1.0) as f32 as f64).collect())
        .collect()
}

#[test]
fn conv_blocks_match_oracle() {
    for seed in 0..20 {
        let (w, net) = model(seed, true);
        let mut rng = FixtureRng::new(seed + 1000);
        for (l, layer) in net.conv_layers().iter().enumerate() {
            let xs: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_planes(&mut rng, layer.c_in, layer.f_in)).collect();
            let expect = common::conv_block(&w, l, [&xs[0], &xs[1], &xs[2]]);
            let padded: Vec<Vec<f32>> = xs.iter().map(|x| pad(x)).collect();
            let mut out = vec![0.0f32; layer.padded_output_len()];
            layer.forward_frame([&padded[0], &padded[1], &padded[2]], &mut out);
            let got = layer.unpad_output(&out);
            let flat: Vec<f64> = expect.concat();
            assert_eq!(got.len(), flat.len());
            for (g, e) in got.iter().zip(&flat) {
                assert!((*g as f64 - e).abs() < 1e-5, "seed {seed} layer {l}: {g} vs {e}");
            }
        }
    }
}

#[test]
fn lstm_and_head_match_oracle() {
    for seed in 0..20 {
        let (w, net) = model(seed, false);
        let cfg = &w.config;
        let mut rng = FixtureRng::new(seed + 2000);
        let mut state = LstmState::zeros(cfg.lstm_hidden);
        let (mut h, mut c) = (vec![0.0; cfg.lstm_hidden], vec![0.0; cfg.lstm_hidden]);
        for _ in 0..5 {
            let x: Vec<f64> = (0..cfg.lstm_input_dim()).map(|_| rng.uniform(-2.0, 2.0) as f32 as f64).collect();
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            net.lstm().step(&xf, &mut state);
            common::lstm_step(&w, &x, &mut h, &mut c);
            for (a, b) in state.h.iter().zip(&h) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
            for (a, b) in state.c.iter().zip(&c) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
            // Head on the oracle's hidden state, so errors do not compound.
            let hf: Vec<f32> = h.iter().map(|&v| v as f32).collect();
            let fc = net.fc_layers();
            let a = fc[0].forward_relu(&hf);
            let b = fc[1].forward_relu(&a);
            let z = fc[2].forward(&b);
            let expect = common::head(&w, &hf.iter().map(|&v| v as f64).collect::<Vec<_>>());
            for (zi, e) in z.iter().zip(&expect) {
                assert!((avse_core::masknet::sigmoid(*zi as f64) - e).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn full_network_matches_oracle() {
    for seed in 0..5 {
        let (w, net) = model(seed, false);
        let mut rng = FixtureRng::new(seed + 3000);
        let vd = w.config.visual_dim;
        let frames: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..257).map(|_| rng.uniform(0.0, 2.0) as f32 as f64).collect())
            .collect();
        let visual: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..vd).map(|_| rng.uniform(-1.0, 1.0) as f32 as f64).collect())
            .collect();
        let expect = common::masks(&w, &frames, |t| visual[t / 4].clone());
        let mut state: StreamState = net.new_state();
        for (t, f) in frames.iter().enumerate() {
            let ff: Vec<f32> = f.iter().map(|&v| v as f32).collect();
            let vf: Vec<f32> = visual[t / 4].iter().map(|&v| v as f32).collect();
            let m = net.predict_mask(&ff, &vf, &mut state).unwrap();
            assert!(common::max_abs_diff(m.values(), &expect[t]) < 1e-5, "seed {seed} frame {t}");
        }
    }
}

#[test]
fn zero_model_masks_are_half() {
    let net = MaskNet::from_weights(&ModelWeights::zero(ModelConfig::tiny()).unwrap()).unwrap();
    let mut state = net.new_state();
    let mut rng = FixtureRng::new(1);
    for _ in 0..8 {
        let f: Vec<f32> = (0..257).map(|_| rng.uniform(0.0, 3.0) as f32).collect();
        let v: Vec<f32> = (0..512).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let m = net.predict_mask(&f, &v, &mut state).unwrap();
        assert!(m.values().iter().all(|&x| x == 0.5));
    }
}
