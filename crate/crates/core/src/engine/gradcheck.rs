//! Central finite differences for validating analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};

pub(crate) fn random<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Relative error with a floor on the denominator so that gradients that
/// are both essentially zero do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each requested coordinate.
pub fn central_differences<T: Element>(
    point: &[T],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[T]) -> f64,
) -> Vec<f64> {
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = T::from_f64(orig.as_f64() + step);
            let up = f(&x);
            x[i] = T::from_f64(orig.as_f64() - step);
            let down = f(&x);
            x[i] = orig;
            // Use the step actually representable in T.
            let span = T::from_f64(orig.as_f64() + step).as_f64() - T::from_f64(orig.as_f64() - step).as_f64();
            (up - down) / span
        })
        .collect()
}

/// Worst coordinate error measured against the scale of the whole gradient
/// tensor: `max_i |a_i - n_i| / max(max_i |n_i|, floor)`.
///
/// Per-coordinate ratios are meaningless for near-zero entries in `f32`,
/// where central differences carry roughly `1e-4` of absolute noise.
pub fn max_scaled_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = numeric.iter().fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// Step size and pass threshold for each precision.
pub fn tolerance<T: Element>() -> (f64, f64) {
    if std::mem::size_of::<T>() == 4 {
        (1e-3, 1e-3)
    } else {
        (1e-5, 1e-5)
    }
}

type Builder<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Var;

/// Builds `loss = sum(op(inputs) * weights)` for random weights and compares
/// the tape's gradient with central differences on every input coordinate.
fn gradcheck_op<T: Element>(inputs: &[Tensor<T>], weight_seed: u64, build: &Builder<T>) -> f64 {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<T> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();

    let eval = |flat: &[T], want_grad: bool| -> (f64, Option<Vec<T>>) {
        let mut tape = Tape::<T>::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                tape.param(t)
            })
            .collect();
        let out = build(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let w: Tensor<T> = random(&mut rng, tape.get(out).shape());
        let loss_f64: f64 = tape
            .get(out)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        if !want_grad {
            return (loss_f64, None);
        }
        let wv = tape.constant(w);
        let prod = tape.mul(&out, &wv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
            .collect();
        (loss_f64, Some(g))
    };

    let (_, analytic) = eval(&flat, true);
    let analytic = analytic.unwrap();
    let (h, _) = tolerance::<T>();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_differences(&flat, &coords, h, |p| eval(p, false).0);
    let analytic: Vec<f64> = analytic.iter().map(|v| v.as_f64()).collect();
    max_scaled_error(&analytic, &numeric, 1e-2)
}

fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4))
}

/// Worst scaled gradient error of every differentiable op on one random
/// draw of shapes (at most 6x6x4) and values.
pub fn op_gradient_errors<T: Element>(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = random_dims(&mut rng);
    let cout = rng.gen_range(1..=4);
    let mut results = Vec::new();

    let x: Tensor<T> = random(&mut rng, &[h, w, c]);
    for k in [1usize, 3] {
        let kern = random(&mut rng, &[k, k, c, cout]);
        let b = random(&mut rng, &[cout]);
        let e = gradcheck_op(&[x.clone(), kern, b], seed, &|t, v| t.conv2d(&v[0], &v[1], &v[2]).unwrap());
        results.push((if k == 1 { "conv2d 1x1" } else { "conv2d 3x3" }, e));
    }

    let kern = random(&mut rng, &[3, 3, c]);
    let b = random(&mut rng, &[c]);
    results.push((
        "depthwise_conv3x3",
        gradcheck_op(&[x.clone(), kern, b], seed, &|t, v| {
            t.depthwise_conv3x3(&v[0], &v[1], &v[2]).unwrap()
        }),
    ));

    // With two channels the normalized output is a sign function, and with
    // three a pixel can sit near zero variance where the curvature swamps an
    // h = 1e-3 difference. Four channels keep the map smooth enough.
    let xl: Tensor<T> = random(&mut rng, &[h, w, 4]);
    let g = random(&mut rng, &[4]);
    let b = random(&mut rng, &[4]);
    results.push((
        "layer_norm",
        gradcheck_op(&[xl, g, b], seed, &|t, v| t.layer_norm(&v[0], &v[1], &v[2]).unwrap()),
    ));

    let axis = rng.gen_range(0..3);
    results.push((
        "softmax",
        gradcheck_op(std::slice::from_ref(&x), seed, &move |t, v| t.softmax(&v[0], axis).unwrap()),
    ));

    let y: Tensor<T> = random(&mut rng, &[h, w, c]);
    results.push(("add", gradcheck_op(&[x.clone(), y.clone()], seed, &|t, v| t.add(&v[0], &v[1]).unwrap())));
    results.push(("mul", gradcheck_op(&[x.clone(), y.clone()], seed, &|t, v| t.mul(&v[0], &v[1]).unwrap())));
    results.push(("gelu", gradcheck_op(std::slice::from_ref(&x), seed, &|t, v| t.gelu(&v[0]).unwrap())));

    let start = rng.gen_range(0..c);
    let len = rng.gen_range(1..=c - start);
    results.push((
        "channel_slice",
        gradcheck_op(std::slice::from_ref(&x), seed, &move |t, v| t.channel_slice(&v[0], start, len).unwrap()),
    ));
    results.push((
        "concat_channels",
        gradcheck_op(&[x.clone(), y.clone()], seed, &|t, v| t.concat_channels(&[&v[1], &v[0]]).unwrap()),
    ));
    results.push((
        "l2_normalize_channels",
        gradcheck_op(std::slice::from_ref(&x), seed, &|t, v| t.l2_normalize_channels(&v[0]).unwrap()),
    ));
    results.push((
        "channel_gram",
        gradcheck_op(&[x.clone(), y.clone()], seed, &|t, v| t.channel_gram(&v[0], &v[1]).unwrap()),
    ));
    let a: Tensor<T> = random(&mut rng, &[c, c]);
    results.push(("attend", gradcheck_op(&[a, y.clone()], seed, &|t, v| t.attend(&v[0], &v[1]).unwrap())));
    let scales: Tensor<T> = random(&mut rng, &[3]);
    let idx = rng.gen_range(0..3);
    results.push((
        "scale_by_element",
        gradcheck_op(&[x.clone(), scales], seed, &move |t, v| {
            t.scale_by_element(&v[0], &v[1], idx).unwrap()
        }),
    ));
    results.push((
        "mse",
        gradcheck_op(std::slice::from_ref(&x), seed, &move |t, v| t.mse(v[0], y.clone()).unwrap()),
    ));
    results
}
