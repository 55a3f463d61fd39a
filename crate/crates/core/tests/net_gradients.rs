mod common;

use common::finite_difference_check;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slu_core::net::{forward, init_params, Batch, ConvSpec, Mode, ModelConfig};

fn tiny(batch_norm: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        conv: vec![ConvSpec { channels: 2, kernel: [3, 3], stride: [2, 2], padding: [1, 1] }],
        recurrent_layers: 2,
        hidden: 8,
        batch_norm,
        fc_size: 6,
        alphabet_size: 4,
        clip: 20.0,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    }
}

fn utt(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, dim), |_| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn gradients_without_batch_norm() {
    let ckpt = init_params(&tiny(false), "t", 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = Batch::new(vec![utt(&mut rng, 9, 6), utt(&mut rng, 6, 6)]);
    for (name, err) in finite_difference_check(&ckpt, &batch, &[vec![1, 2, 1], vec![3]], 1e-5) {
        assert!(err <= 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn time_reversal_swaps_directions() {
    // stride-1 odd kernels, symmetric padding, no batch norm: flipping the input
    // in time, the conv kernels in time and the two LSTM directions flips the output
    let mut cfg = tiny(false);
    cfg.conv[0] = ConvSpec { channels: 2, kernel: [3, 3], stride: [1, 1], padding: [1, 1] };
    let ckpt = init_params(&cfg, "t", 3).unwrap();
    let mut flipped = ckpt.clone();
    {
        let w = flipped.body.get_mut("conv.0.weight").unwrap();
        let orig = w.clone();
        let kt = orig.shape()[2];
        for ((co, ci, t, f), v) in w.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter_mut() {
            *v = orig[[co, ci, kt - 1 - t, f]];
        }
    }
    for l in 0..cfg.recurrent_layers {
        for name in [format!("rnn.{l}.w_in"), format!("rnn.{l}.bias"), format!("rnn.{l}.w_rec")] {
            let t = flipped.body.get_mut(&name).unwrap();
            let orig = t.clone();
            t.index_axis_mut(ndarray::Axis(0), 0).assign(&orig.index_axis(ndarray::Axis(0), 1));
            t.index_axis_mut(ndarray::Axis(0), 1).assign(&orig.index_axis(ndarray::Axis(0), 0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = utt(&mut rng, 7, 6);
    let mut xr = x.clone();
    xr.invert_axis(ndarray::Axis(0));
    let a = forward(&ckpt, &Batch::new(vec![x]), Mode::Infer).unwrap();
    let b = forward(&flipped, &Batch::new(vec![xr]), Mode::Infer).unwrap();
    let mut br = b.lattice.utterance(0).to_owned();
    br.invert_axis(ndarray::Axis(0));
    for (p, q) in a.lattice.utterance(0).iter().zip(br.iter()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn outputs_do_not_depend_on_batch_order_in_inference() {
    let ckpt = init_params(&tiny(true), "t", 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (u, v) = (utt(&mut rng, 9, 6), utt(&mut rng, 5, 6));
    let ab = forward(&ckpt, &Batch::new(vec![u.clone(), v.clone()]), Mode::Infer).unwrap();
    let ba = forward(&ckpt, &Batch::new(vec![v, u]), Mode::Infer).unwrap();
    assert_eq!(ab.lattice.utterance(0), ba.lattice.utterance(1));
    assert_eq!(ab.lattice.utterance(1), ba.lattice.utterance(0));
}
