//! Shared helpers for the integration tests and the acceptance suite.
#![allow(dead_code)]

use rflow::nn::{Bound, ConditionEncoder, EncoderConfig, FlowModel, ParamStore, VelocityConfig, VelocityModel};
use rflow::rng::{rng_at, standard_normals, Stream};
use rflow::tensor::{Result, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative gradient error.
pub const REL_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn normal_tensor(shape: &[usize], seed: u64, index: u64) -> Tensor {
    let n = shape.iter().product();
    let mut rng = rng_at(seed, Stream::Init, index);
    Tensor::new(shape.to_vec(), standard_normals(&mut rng, n)).unwrap()
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Reduces `x` to a scalar with fixed random weights so every element gets a
/// distinct gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = normal_tensor(tape.shape(x), seed, 999);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Maximum relative error between tape gradients of `f` with respect to each
/// input and central differences.
pub fn check_inputs(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.scalar(l)
    };
    let mut worst = 0.0_f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs);
            worst = worst.max(rel_error(analytic[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Like [`check_inputs`], over the parameters that `store` selects from `model`.
pub fn check_params<M: Clone>(
    model: &M,
    store: fn(&M) -> &ParamStore,
    store_mut: fn(&mut M) -> &mut ParamStore,
    f: &dyn Fn(&M, &mut Tape, &Bound) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let bound = store(model).bind(&mut tape, true);
    let loss = f(model, &mut tape, &bound).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |m: &M| {
        let mut tape = Tape::new();
        let bound = store(m).bind(&mut tape, false);
        let l = f(m, &mut tape, &bound).unwrap();
        tape.scalar(l)
    };
    let mut worst = 0.0_f64;
    let mut probe = model.clone();
    for (i, v) in bound.vars().iter().enumerate() {
        let numel = store(model).tensors()[i].numel();
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        for j in 0..numel {
            let orig = store(&probe).tensors()[i].data()[j];
            store_mut(&mut probe).tensors_mut()[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe);
            store_mut(&mut probe).tensors_mut()[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe);
            store_mut(&mut probe).tensors_mut()[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Overwrites every parameter with scaled normal draws, so zero-initialised
/// layers take part in the check.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    for (i, t) in store.tensors_mut().into_iter().enumerate() {
        let draws = normal_tensor(t.shape(), seed, 100 + i as u64);
        for (dst, src) in t.data_mut().iter_mut().zip(draws.data()) {
            *dst = scale * src;
        }
    }
}

/// Width-4, depth-1 velocity model with randomized parameters.
pub fn small_velocity(data_dim: usize, condition_dim: usize, seed: u64) -> VelocityModel {
    let mut cfg = VelocityConfig::new(data_dim, 4, 1);
    cfg.time_dim = 4;
    if condition_dim > 0 {
        cfg = cfg.with_condition(condition_dim);
    }
    let mut m = VelocityModel::new(cfg, seed).unwrap();
    randomize(m.params_mut(), seed, 0.5);
    m
}

/// Small conditional model with a randomized encoder.
pub fn small_flow(seed: u64) -> FlowModel {
    let mut ecfg = EncoderConfig::new(5, 4);
    ecfg.embed_dim = 3;
    ecfg.channels = 4;
    ecfg.layers = 2;
    ecfg.kernel_size = 3;
    ecfg.condition_dim = 3;
    let mut enc = ConditionEncoder::new(ecfg, seed).unwrap();
    randomize(enc.params_mut(), seed + 1, 0.5);
    FlowModel {
        velocity: small_velocity(2, 3, seed),
        encoder: Some(enc),
    }
}

pub fn tokens(batch: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| (0..len).map(|j| (seed as usize * 7 + i * 3 + j * 5) % vocab).collect())
        .collect()
}

pub fn velocity_store(m: &FlowModel) -> &ParamStore {
    m.velocity.params()
}

pub fn velocity_store_mut(m: &mut FlowModel) -> &mut ParamStore {
    m.velocity.params_mut()
}

pub fn encoder_store(m: &FlowModel) -> &ParamStore {
    m.encoder.as_ref().unwrap().params()
}

pub fn encoder_store_mut(m: &mut FlowModel) -> &mut ParamStore {
    m.encoder.as_mut().unwrap().params_mut()
}

type InputFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn positive(t: Tensor, offset: f64) -> Tensor {
    let data = t.data().iter().map(|v| v.abs() + offset).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// One named gradient check per primitive, layer and loss; values are the
/// worst relative error found.
pub fn gradient_checks(seed: u64) -> Vec<(String, f64)> {
    use rflow::flow::{
        annealing_reflow_loss, distill_loss, fg_distill_loss, rf_loss, two_step_loss, AnnealBatch, AnnealSchedule,
    };
    use rflow::nn::{DepthwiseSeparableConv1d, Linear};
    use rand::SeedableRng;

    let r = |shape: &[usize], k: u64| normal_tensor(shape, seed, k);
    let a = r(&[3, 4], 1);
    let b = r(&[3, 4], 2);
    let row = r(&[4], 3);
    let mut out = Vec::new();
    let mut prim = |name: &str, inputs: Vec<Tensor>, f: InputFn| {
        out.push((format!("op {name}"), check_inputs(&inputs, &*f)));
    };
    let ws = move |tape: &mut Tape, y: Var| weighted_sum(tape, y, seed);
    prim("add", vec![a.clone(), row.clone()], Box::new(move |t, v| { let y = t.add(v[0], v[1])?; ws(t, y) }));
    prim("sub", vec![a.clone(), b.clone()], Box::new(move |t, v| { let y = t.sub(v[0], v[1])?; ws(t, y) }));
    prim("mul", vec![a.clone(), b.clone()], Box::new(move |t, v| { let y = t.mul(v[0], v[1])?; ws(t, y) }));
    prim("div", vec![a.clone(), positive(b.clone(), 0.5)], Box::new(move |t, v| { let y = t.div(v[0], v[1])?; ws(t, y) }));
    prim("neg", vec![a.clone()], Box::new(move |t, v| { let y = t.neg(v[0])?; ws(t, y) }));
    prim("square", vec![a.clone()], Box::new(move |t, v| { let y = t.square(v[0])?; ws(t, y) }));
    prim("sqrt", vec![positive(a.clone(), 0.5)], Box::new(move |t, v| { let y = t.sqrt(v[0])?; ws(t, y) }));
    prim("exp", vec![a.clone()], Box::new(move |t, v| { let y = t.exp(v[0])?; ws(t, y) }));
    prim("sin", vec![a.clone()], Box::new(move |t, v| { let y = t.sin(v[0])?; ws(t, y) }));
    prim("cos", vec![a.clone()], Box::new(move |t, v| { let y = t.cos(v[0])?; ws(t, y) }));
    prim("tanh", vec![a.clone()], Box::new(move |t, v| { let y = t.tanh(v[0])?; ws(t, y) }));
    prim("scale", vec![a.clone()], Box::new(move |t, v| { let y = t.scale(v[0], -1.7)?; ws(t, y) }));
    prim("add_scalar", vec![a.clone()], Box::new(move |t, v| { let y = t.add_scalar(v[0], 0.3)?; ws(t, y) }));
    prim("matmul", vec![a.clone(), r(&[4, 2], 4)], Box::new(move |t, v| { let y = t.matmul(v[0], v[1])?; ws(t, y) }));
    prim("sum", vec![a.clone()], Box::new(move |t, v| { let y = t.square(v[0])?; t.sum(y) }));
    prim("mean", vec![a.clone()], Box::new(move |t, v| { let y = t.square(v[0])?; t.mean(y) }));
    prim("sum_axis0", vec![a.clone()], Box::new(move |t, v| { let y = t.sum_axis(v[0], 0)?; ws(t, y) }));
    prim("sum_axis1", vec![a.clone()], Box::new(move |t, v| { let y = t.sum_axis(v[0], 1)?; ws(t, y) }));
    prim("mean_axis", vec![a.clone()], Box::new(move |t, v| { let y = t.mean_axis(v[0], 1)?; ws(t, y) }));
    prim("concat0", vec![a.clone(), r(&[2, 4], 5)], Box::new(move |t, v| { let y = t.concat(&[v[0], v[1]], 0)?; ws(t, y) }));
    prim("concat1", vec![a.clone(), r(&[3, 2], 6)], Box::new(move |t, v| { let y = t.concat(&[v[0], v[1]], 1)?; ws(t, y) }));
    prim("slice", vec![a.clone()], Box::new(move |t, v| { let y = t.slice(v[0], 1, 1, 3)?; ws(t, y) }));
    prim("broadcast_to", vec![r(&[1, 4], 7)], Box::new(move |t, v| { let y = t.broadcast_to(v[0], &[3, 4])?; ws(t, y) }));
    prim("reshape", vec![a.clone()], Box::new(move |t, v| { let y = t.reshape(v[0], &[2, 6])?; ws(t, y) }));
    prim("transpose", vec![a.clone()], Box::new(move |t, v| { let y = t.transpose(v[0])?; ws(t, y) }));
    prim("gather_rows", vec![r(&[5, 3], 8)], Box::new(move |t, v| { let y = t.gather_rows(v[0], &[0, 2, 2, 4])?; ws(t, y) }));
    for k in [2, 3] {
        prim(
            &format!("depthwise_conv1d k{k}"),
            vec![r(&[2, 5, 3], 9), r(&[3, k], 10)],
            Box::new(move |t, v| { let y = t.depthwise_conv1d(v[0], v[1])?; ws(t, y) }),
        );
    }

    // Layers: gradients of inputs and of parameters.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, false, &mut rng);
    randomize(&mut store, seed, 0.7);
    let x = r(&[3, 4], 11);
    {
        let store = store.clone();
        let lin = lin.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let bound = store.bind(t, false);
            let y = lin.forward(t, &bound, v[0])?;
            ws(t, y)
        };
        out.push(("layer linear input".into(), check_inputs(&[x.clone()], &f)));
    }
    let f = |_: &(), t: &mut Tape, bound: &Bound| -> Result<Var> {
        let xv = t.constant(x.clone());
        let y = lin.forward(t, bound, xv)?;
        ws(t, y)
    };
    out.push(("layer linear params".into(), check_store(&store, &f)));

    let mut store = ParamStore::new();
    let conv = DepthwiseSeparableConv1d::new(&mut store, "conv", 3, 4, 3, &mut rng).unwrap();
    randomize(&mut store, seed + 1, 0.7);
    let xs = r(&[2, 5, 3], 12);
    {
        let store = store.clone();
        let conv = conv.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let bound = store.bind(t, false);
            let y = conv.forward(t, &bound, v[0])?;
            ws(t, y)
        };
        out.push(("layer dsconv input".into(), check_inputs(&[xs.clone()], &f)));
    }
    let f = |_: &(), t: &mut Tape, bound: &Bound| -> Result<Var> {
        let xv = t.constant(xs.clone());
        let y = conv.forward(t, bound, xv)?;
        ws(t, y)
    };
    out.push(("layer dsconv params".into(), check_store(&store, &f)));

    let flow = small_flow(seed);
    let toks = tokens(3, 4, 5, seed);
    let enc_f = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = m.encoder.as_ref().unwrap().forward(t, bound, &toks)?;
        ws(t, c)
    };
    out.push(("layer encoder params".into(), check_params(&flow, encoder_store, encoder_store_mut, &enc_f)));

    let times = [0.2, 0.55, 0.9];
    let x2 = r(&[3, 2], 13);
    let cond = r(&[3, 3], 14);
    let vel_f = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let xv = t.constant(x2.clone());
        let cv = t.constant(cond.clone());
        let y = m.velocity.forward(t, bound, xv, &times, Some(cv))?;
        ws(t, y)
    };
    out.push(("layer velocity params".into(), check_params(&flow, velocity_store, velocity_store_mut, &vel_f)));
    {
        let vel = flow.velocity.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let bound = vel.params().bind(t, false);
            let y = vel.forward(t, &bound, v[0], &times, Some(v[1]))?;
            ws(t, y)
        };
        out.push(("layer velocity inputs".into(), check_inputs(&[x2.clone(), cond.clone()], &f)));
    }

    // Losses.
    let x0 = r(&[3, 2], 15);
    let x1 = r(&[3, 2], 16);
    let x1p = r(&[3, 2], 17);
    let guide = small_velocity(2, 3, seed + 50);
    let encoded = |m: &FlowModel, t: &mut Tape| -> Result<Var> {
        let c = m.encoder.as_ref().unwrap().encode(&toks)?;
        Ok(t.constant(c))
    };
    let rf = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = encoded(m, t)?;
        rf_loss(t, &m.velocity, bound, &x0, &x1, Some(c), &times)
    };
    out.push(("loss rectified flow".into(), check_params(&flow, velocity_store, velocity_store_mut, &rf)));
    let rf_enc = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = m.encoder.as_ref().unwrap().forward(t, bound, &toks)?;
        let vb = m.velocity.params().bind(t, false);
        rf_loss(t, &m.velocity, &vb, &x0, &x1, Some(c), &times)
    };
    out.push(("loss rectified flow encoder".into(), check_params(&flow, encoder_store, encoder_store_mut, &rf_enc)));
    let anneal = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = encoded(m, t)?;
        let batch = AnnealBatch { x1: &x1, x0_hat: &x0, x1_prime: &x1p, t: &times, k: 3 };
        annealing_reflow_loss(t, &m.velocity, bound, batch, Some(c), AnnealSchedule::new(10))
    };
    out.push(("loss annealing reflow".into(), check_params(&flow, velocity_store, velocity_store_mut, &anneal)));
    let distill = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = encoded(m, t)?;
        distill_loss(t, &m.velocity, bound, &x1, &x0, Some(c))
    };
    out.push(("loss distill".into(), check_params(&flow, velocity_store, velocity_store_mut, &distill)));
    let cond_t = flow.encoder.as_ref().unwrap().encode(&toks).unwrap();
    let two = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = t.constant(cond_t.clone());
        two_step_loss(t, &guide, &m.velocity, bound, &x1, Some(c), &times)
    };
    out.push(("loss two-step".into(), check_params(&flow, velocity_store, velocity_store_mut, &two)));
    let fg = |m: &FlowModel, t: &mut Tape, bound: &Bound| -> Result<Var> {
        let c = t.constant(cond_t.clone());
        let d = distill_loss(t, &m.velocity, bound, &x1, &x0, Some(c))?;
        let s = two_step_loss(t, &guide, &m.velocity, bound, &x1, Some(c), &times)?;
        fg_distill_loss(t, d, s)
    };
    out.push(("loss flow-guided total".into(), check_params(&flow, velocity_store, velocity_store_mut, &fg)));
    out
}

/// [`check_params`] for a bare parameter store.
pub fn check_store(store: &ParamStore, f: &dyn Fn(&(), &mut Tape, &Bound) -> Result<Var>) -> f64 {
    #[derive(Clone)]
    struct Holder(ParamStore);
    let h = Holder(store.clone());
    check_params(&h, |h| &h.0, |h| &mut h.0, &|_, t, b| f(&(), t, b))
}
