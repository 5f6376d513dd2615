mod common;

use common::{gradient_checks, normal_tensor, small_velocity, weighted_sum, REL_TOL};
use rflow::tensor::{Tape, Tensor};

#[test]
fn every_primitive_layer_and_loss_over_ten_seeds() {
    let mut failures = Vec::new();
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        for (name, err) in gradient_checks(seed) {
            worst = worst.max(err);
            if !(err < REL_TOL) {
                failures.push(format!("seed {seed} {name}: {err:.3e}"));
            }
        }
    }
    println!("worst relative error {worst:.3e}");
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn checks_cover_every_loss_and_layer() {
    let names: Vec<String> = gradient_checks(0).into_iter().map(|(n, _)| n).collect();
    for want in [
        "layer linear params",
        "layer dsconv params",
        "layer encoder params",
        "layer velocity params",
        "loss rectified flow",
        "loss annealing reflow",
        "loss distill",
        "loss two-step",
        "loss flow-guided total",
        "op depthwise_conv1d k3",
        "op gather_rows",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

fn grads_of(scale: f64, seed: u64) -> Vec<f64> {
    let model = small_velocity(2, 0, seed);
    let x = normal_tensor(&[5, 2], seed, 1);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let xv = tape.leaf(&x.with_requires_grad(true));
    let y = model.forward(&mut tape, &bound, xv, &[0.1, 0.3, 0.5, 0.7, 0.9], None).unwrap();
    let l = weighted_sum(&mut tape, y, seed).unwrap();
    let l = tape.scale(l, scale).unwrap();
    tape.backward(l).unwrap().get(xv).unwrap().to_vec()
}

#[test]
fn backward_is_linear_in_the_loss() {
    let g1 = grads_of(1.0, 3);
    let g3 = grads_of(3.0, 3);
    for (a, b) in g1.iter().zip(&g3) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    // Sum of two losses gives the sum of the gradients.
    let x = normal_tensor(&[4, 3], 9, 0);
    let run = |which: u8| {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_requires_grad(true));
        let a = tape.tanh(v).unwrap();
        let a = tape.sum(a).unwrap();
        let b = tape.square(v).unwrap();
        let b = tape.mean(b).unwrap();
        let l = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(l).unwrap().get(v).unwrap().to_vec()
    };
    let (ga, gb, gs) = (run(0), run(1), run(2));
    for i in 0..ga.len() {
        assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-14);
    }
}

#[test]
fn tape_replay_is_bitwise_deterministic() {
    let a = grads_of(1.0, 5);
    let b = grads_of(1.0, 5);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn frozen_binding_yields_no_parameter_gradients() {
    let model = small_velocity(2, 0, 1);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let xv = tape.leaf(&Tensor::full(&[2, 2], 0.5).with_requires_grad(true));
    let y = model.forward(&mut tape, &bound, xv, &[0.5, 0.5], None).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(bound.vars().iter().all(|&v| g.get(v).is_none()));
    assert!(g.get(xv).is_some());
}
