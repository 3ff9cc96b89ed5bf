#![allow(dead_code, clippy::cloned_ref_to_slice_refs, clippy::needless_range_loop)]

use avtta::adapt::{cls_loss, cons_loss, total_loss};
use avtta::model::{sample_views, InputShape, Model, ModelConfig, VideoClip};
use avtta::stats::{align_loss, compute_train_stats, TestStatsTracker, TrainStats};
use avtta::tensor::{ops, Tape, Tensor, Var};
use avtta::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `gap`, so kinks at 0 stay out of reach.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn nudged(t: &Tensor, j: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Largest relative error between reverse-mode gradients of the scalar
/// `f(inputs)` and central differences, over every input element.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        f(&tape, &vars).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = out.backward().unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i] = nudged(&inputs[i], j, FD_EPS);
            let mut minus = inputs.to_vec();
            minus[i] = nudged(&inputs[i], j, -FD_EPS);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Contracts a tensor-valued result with fixed weights to get a scalar.
pub fn contract<'t>(tape: &'t Tape, x: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
    Ok(ops::sum(ops::mul(x, tape.constant(w))?))
}

/// One named finite-difference case.
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
}

/// Per-op cases with random shapes and values drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push(GradCase { name: format!("{name}#{seed}"), max_rel_err: err });

    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let a = random_tensor(&mut rng, vec![r, c], -1.0, 1.0);
    let b = random_tensor(&mut rng, vec![r, c], -1.0, 1.0);
    push("add", gradcheck(&[a.clone(), b.clone()], |t, v| contract(t, ops::add(v[0], v[1])?, 1)));
    push("sub", gradcheck(&[a.clone(), b.clone()], |t, v| contract(t, ops::sub(v[0], v[1])?, 2)));
    push("mul", gradcheck(&[a.clone(), b.clone()], |t, v| contract(t, ops::mul(v[0], v[1])?, 3)));
    let factor = rng.random_range(-2.0..2.0);
    push("scale", gradcheck(&[a.clone()], move |t, v| contract(t, ops::scale(v[0], factor), 4)));
    push("sum", gradcheck(&[a.clone()], |_, v| Ok(ops::sum(v[0]))));
    push("transpose", gradcheck(&[a.clone()], |t, v| contract(t, ops::transpose(v[0])?, 5)));
    push("reshape", gradcheck(&[a.clone()], move |t, v| contract(t, ops::reshape(v[0], vec![c, r])?, 6)));
    push("mean_rows", gradcheck(&[a.clone()], |t, v| contract(t, ops::mean_rows(v[0])?, 7)));

    let (n_in, n_out) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = random_tensor(&mut rng, vec![r, n_in], -1.0, 1.0);
    let xv = random_tensor(&mut rng, vec![n_in], -1.0, 1.0);
    let w = random_tensor(&mut rng, vec![n_out, n_in], -1.0, 1.0);
    let bias = random_tensor(&mut rng, vec![n_out], -1.0, 1.0);
    push("linear_rows", gradcheck(&[x, w.clone(), bias.clone()], |t, v| contract(t, ops::linear(v[0], v[1], v[2])?, 8)));
    push("linear_vec", gradcheck(&[xv, w, bias], |t, v| contract(t, ops::linear(v[0], v[1], v[2])?, 9)));

    let s = random_tensor(&mut rng, vec![c], -1.5, 1.5);
    let sh = random_tensor(&mut rng, vec![c], -1.0, 1.0);
    push("channel_affine", gradcheck(&[a.clone(), s, sh], |t, v| contract(t, ops::channel_affine(v[0], v[1], v[2])?, 10)));
    let kinky = away_from_zero(&mut rng, vec![r, c], 1e-2);
    push("relu", gradcheck(&[kinky], |t, v| contract(t, ops::relu(v[0]), 11)));

    let k = rng.random_range(2..7);
    let logits = random_tensor(&mut rng, vec![k], -2.0, 2.0);
    push("softmax", gradcheck(&[logits.clone()], |t, v| contract(t, ops::softmax(v[0])?, 12)));
    let target = rng.random_range(0..k);
    push("cross_entropy", gradcheck(&[logits], move |_, v| ops::cross_entropy(ops::softmax(v[0])?, target)));

    let ch = rng.random_range(1..4);
    let spatial = vec![ch, rng.random_range(1..4), rng.random_range(1..3), rng.random_range(2..3)];
    let act = random_tensor(&mut rng, spatial.clone(), -1.0, 1.0);
    push("mean_var.mean", gradcheck(&[act.clone()], |t, v| contract(t, ops::mean_var(v[0])?.0, 13)));
    push("mean_var.var", gradcheck(&[act.clone()], |t, v| contract(t, ops::mean_var(v[0])?.1, 14)));
    let width = rng.random_range(1..5);
    let other = random_tensor(&mut rng, vec![ch, width], -1.0, 1.0);
    push(
        "concat_channels",
        gradcheck(&[act.clone(), other], |t, v| {
            let joined = ops::concat_channels(&[v[0], v[1]])?;
            contract(t, ops::mean_var(joined)?.1, 15)
        }),
    );

    let p = random_tensor(&mut rng, vec![r * c], -1.0, 1.0);
    let q = Tensor::new(
        vec![r * c],
        p.data().iter().zip(away_from_zero(&mut rng, vec![r * c], 1e-2).data()).map(|(x, d)| x + d).collect(),
    )
    .unwrap();
    push("l1_distance", gradcheck(&[p, q], |_, v| ops::l1_distance(v[0], v[1])));
    out
}

fn tiny_model(seed: u64, classes: usize) -> Model {
    Model::new(ModelConfig {
        num_classes: classes,
        layer_widths: vec![3, 4],
        input_shape: InputShape { t: 16, h: 4, w: 4, c_in: 2 },
        patch: 2,
        seed,
    })
    .unwrap()
}

fn random_clip(rng: &mut ChaCha8Rng, id: usize, classes: usize) -> VideoClip {
    let frames = random_tensor(rng, vec![32, 4, 4, 2], 0.0, 1.0);
    VideoClip::new(frames, format!("c{id}"), Some(id % classes)).unwrap()
}

/// The full adaptation objective as a function of every model parameter,
/// checked on a sample of parameter coordinates.
pub fn objective_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let classes = rng.random_range(2..5);
    let mut model = tiny_model(seed, classes);
    let calib: Vec<VideoClip> = (0..4).map(|i| random_clip(&mut rng, i, classes)).collect();
    model.calibrate(&calib).unwrap();
    let layers = vec![0, 1];
    let train: TrainStats = compute_train_stats(&model, &calib, &layers).unwrap();
    let mut tracker = TestStatsTracker::new(layers.clone(), 0.1).unwrap();
    if seed % 2 == 1 {
        let warm = random_clip(&mut rng, 9, classes);
        let views = sample_views(&warm, 2, &mut rng).unwrap();
        let recs: Vec<_> = views.views.iter().map(|v| model.forward(v).unwrap()).collect();
        tracker.update(&recs).unwrap();
    }
    let m = rng.random_range(2..4);
    let clip = random_clip(&mut rng, 5, classes);
    let views = sample_views(&clip, m, &mut rng).unwrap();
    let pseudo = (!seed.is_multiple_of(3)).then(|| rng.random_range(0..classes));
    let (alpha, beta) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));

    let build = |model: &Model| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let params = model.bind(&tape);
        let mut preds = Vec::new();
        let mut acts = Vec::new();
        for v in &views.views {
            let f = model.forward_bound(&tape, &params, v).unwrap();
            preds.push(f.prediction);
            acts.push(f.activations);
        }
        let batch = tracker.batch_stats_on_tape(&acts).unwrap();
        let blended = tracker.blend_on_tape(&tape, &batch).unwrap();
        let align = align_loss(&tape, &blended, &layers, &train).unwrap();
        let cons = cons_loss(&preds).unwrap();
        let cls = pseudo.map(|p| cls_loss(&preds, p).unwrap());
        let total = total_loss(cls, cons, align, alpha, beta).unwrap();
        let grads = total.backward().unwrap();
        let flat = params.vars().iter().flat_map(|v| grads.get(*v)).collect();
        (total.item(), flat)
    };
    let (_, analytic) = build(&model);
    let base = model.flat_params();
    let mut worst = 0.0f64;
    let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..base.len())).collect();
    for j in coords {
        let mut plus = base.clone();
        plus[j] += FD_EPS;
        let mut minus = base.clone();
        minus[j] -= FD_EPS;
        model.set_flat_params(&plus).unwrap();
        let fp = build(&model).0;
        model.set_flat_params(&minus).unwrap();
        let fm = build(&model).0;
        worst = worst.max(rel_err(analytic[j], (fp - fm) / (2.0 * FD_EPS)));
    }
    GradCase { name: format!("objective#{seed}"), max_rel_err: worst }
}

/// At least fifty op configurations plus full-objective configurations.
pub fn all_grad_cases() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = (0..3).flat_map(op_cases).collect();
    cases.extend((0..12).map(objective_case));
    cases
}
