//! Reverse-mode gradients against central finite differences.
//!
//! Every check runs on at least `INSTANCES` random small inputs. A
//! component passes when it is within `ABS_TOL` absolutely or `REL_TOL`
//! relatively of the numerical derivative.

use maskfield::attribution::{area_regularizer, compose_perturbed, dice_penalty, loss_extremal, LossWeights, Problem, RbfFilter};
use maskfield::image::{BinaryMap, BoundingBox};
use maskfield::inr::{AreaRange, CoordinateGrid, ImplicitMaskNetwork, InrConfig};
use maskfield::models::{Classifier, ImagePair, OracleClassifier, ToyCnn};
use maskfield::tensor::{Padding, Tape, Tensor, Var};
use maskfield::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 20;
const STEP: f64 = 1e-6;
const ABS_TOL: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ tag)
}

/// Uniform values in `[lo, hi]` kept at least `gap` away from each kink in `kinks`.
fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values whose pairwise gaps are all larger than `gap`, so sorting is
/// locally constant under the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Tensor<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.random_range(-2.0..2.0);
        if out.iter().all(|&u| (u - v).abs() > gap) {
            out.push(v);
        }
    }
    Tensor::from_vec(out)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Compares the analytic gradient of a scalar function of `inputs` with
/// central differences; returns the worst component error for reporting.
fn check(name: &str, inputs: &[Tensor<f64>], build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            let ok = err <= ABS_TOL || err <= REL_TOL * numeric.abs().max(a.abs());
            assert!(ok, "{name}: input {k} component {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

/// Reduces a tensor-valued op to a scalar through a fixed random weighting,
/// so every output component contributes a distinct upstream gradient.
fn weighted(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = random(&mut rng(seed), &shape, -1.0, 1.0, &[], 0.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn for_instances(tag: u64, mut body: impl FnMut(&mut ChaCha8Rng, u64)) {
    let mut r = rng(tag);
    for i in 0..INSTANCES {
        body(&mut r, tag * 1000 + i as u64);
    }
}

fn small_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..4), r.random_range(1..5)]
}

pub fn binary_elementwise() {
    for_instances(1, |r, s| {
        let shape = small_shape(r);
        let a = random(r, &shape, -2.0, 2.0, &[], 0.0);
        let b = random(r, &shape, 0.5, 2.0, &[], 0.0);
        let pair = [a, b];
        check("add", &pair, &|t, v| {
            let o = t.add(v[0], v[1])?;
            weighted(t, o, s)
        });
        check("sub", &pair, &|t, v| {
            let o = t.sub(v[0], v[1])?;
            weighted(t, o, s)
        });
        check("mul", &pair, &|t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted(t, o, s)
        });
        check("div", &pair, &|t, v| {
            let o = t.div(v[0], v[1])?;
            weighted(t, o, s)
        });
        check("same input twice", &pair[..1], &|t, v| {
            let o = t.mul(v[0], v[0])?;
            weighted(t, o, s)
        });
    });
}

pub fn scalar_elementwise() {
    for_instances(2, |r, s| {
        let shape = small_shape(r);
        let x = [random(r, &shape, -2.0, 2.0, &[], 0.0)];
        let c: f64 = r.random_range(-3.0..3.0);
        let d: f64 = r.random_range(0.5..3.0);
        check("add_scalar", &x, &|t, v| {
            let o = t.add_scalar(v[0], c)?;
            weighted(t, o, s)
        });
        check("mul_scalar", &x, &|t, v| {
            let o = t.mul_scalar(v[0], c)?;
            weighted(t, o, s)
        });
        check("rsub_scalar", &x, &|t, v| {
            let o = t.rsub_scalar(c, v[0])?;
            weighted(t, o, s)
        });
        check("div_scalar", &x, &|t, v| {
            let o = t.div_scalar(v[0], d)?;
            weighted(t, o, s)
        });
    });
}

pub fn unary_elementwise() {
    for_instances(3, |r, s| {
        let shape = small_shape(r);
        let x = [random(r, &shape, -3.0, 3.0, &[0.0], 0.01)];
        let pos = [random(r, &shape, 0.2, 3.0, &[], 0.0)];
        let ops: [(&str, fn(&mut Tape<f64>, Var) -> Result<Var>); 6] = [
            ("square", |t, v| t.square(v)),
            ("relu", |t, v| t.relu(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("sin", |t, v| t.sin(v)),
            ("cos", |t, v| t.cos(v)),
            ("exp", |t, v| t.exp(v)),
        ];
        for (name, op) in ops {
            check(name, &x, &|t, v| {
                let o = op(t, v[0])?;
                weighted(t, o, s)
            });
        }
        check("ln", &pos, &|t, v| {
            let o = t.ln(v[0])?;
            weighted(t, o, s)
        });
        let bounded = [random(r, &shape, -2.0, 2.0, &[-1.0, 1.0], 0.01)];
        check("clamp", &bounded, &|t, v| {
            let o = t.clamp(v[0], -1.0, 1.0)?;
            weighted(t, o, s)
        });
    });
}

pub fn matmul_and_biases() {
    for_instances(4, |r, s| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let ab = [random(r, &[m, k], -1.0, 1.0, &[], 0.0), random(r, &[k, n], -1.0, 1.0, &[], 0.0)];
        check("matmul", &ab, &|t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted(t, o, s)
        });
        let xb = [random(r, &[m, n], -1.0, 1.0, &[], 0.0), random(r, &[n], -1.0, 1.0, &[], 0.0)];
        check("add_row_bias", &xb, &|t, v| {
            let o = t.add_row_bias(v[0], v[1])?;
            weighted(t, o, s)
        });
        let c = r.random_range(1..4);
        let xc = [random(r, &[c, 2, 3], -1.0, 1.0, &[], 0.0), random(r, &[c], -1.0, 1.0, &[], 0.0)];
        check("add_channel_bias", &xc, &|t, v| {
            let o = t.add_channel_bias(v[0], v[1])?;
            weighted(t, o, s)
        });
    });
}

pub fn conv2d_all_paddings() {
    for_instances(5, |r, s| {
        let (c, o) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (r.random_range(3..7), r.random_range(3..7));
        let kernel_side = if r.random_bool(0.5) { 1 } else { 3 };
        let inputs = [
            random(r, &[c, h, w], -1.0, 1.0, &[], 0.0),
            random(r, &[o, c, kernel_side, kernel_side], -1.0, 1.0, &[], 0.0),
        ];
        for padding in [Padding::Valid, Padding::Same, Padding::Reflect] {
            check(&format!("conv2d {padding:?}"), &inputs, &|t, v| {
                let y = t.conv2d(v[0], v[1], padding)?;
                weighted(t, y, s)
            });
        }
    });
}

pub fn reductions_and_reshapes() {
    for_instances(6, |r, s| {
        let (c, h, w) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let x = [random(r, &[c, h, w], -1.0, 1.0, &[], 0.0)];
        check("sum", &x, &|t, v| {
            let sq = t.square(v[0])?;
            t.sum(sq)
        });
        check("mean", &x, &|t, v| {
            let sq = t.square(v[0])?;
            t.mean(sq)
        });
        check("spatial_mean", &x, &|t, v| {
            let o = t.spatial_mean(v[0])?;
            weighted(t, o, s)
        });
        check("flatten+select", &x, &|t, v| {
            let f = t.flatten(v[0])?;
            let e = t.exp(f)?;
            t.select(e, c * h * w - 1)
        });
        check("reshape", &x, &|t, v| {
            let o = t.reshape(v[0], [h * w, c])?;
            weighted(t, o, s)
        });
        let plane = [random(r, &[h, w], -1.0, 1.0, &[], 0.0), random(r, &[w], -1.0, 1.0, &[], 0.0)];
        check("broadcast_channels", &plane[..1], &|t, v| {
            let o = t.broadcast_channels(v[0], 3)?;
            weighted(t, o, s)
        });
        check("concat", &plane, &|t, v| {
            let o = t.concat(&[v[0], v[1], v[0]])?;
            weighted(t, o, s)
        });
    });
}

pub fn softmax_jacobian() {
    for_instances(7, |r, s| {
        let n = r.random_range(1..7);
        let x = [random(r, &[n], -3.0, 3.0, &[], 0.0)];
        check("softmax", &x, &|t, v| {
            let p = t.softmax(v[0])?;
            weighted(t, p, s)
        });
        // every row of the Jacobian, one at a time
        for i in 0..n {
            check("softmax row", &x, &|t, v| {
                let p = t.softmax(v[0])?;
                t.select(p, i)
            });
        }
    });
}

pub fn vecsort_both_directions() {
    for_instances(8, |r, s| {
        let n = r.random_range(1..9);
        let x = [distinct(r, n, 1e-3)];
        for ascending in [true, false] {
            check("vecsort", &x, &|t, v| {
                let (o, _) = t.vecsort(v[0], ascending)?;
                weighted(t, o, s)
            });
        }
    });
}

pub fn rbf_smoothing() {
    for_instances(9, |r, s| {
        let (h, w) = (r.random_range(4..10), r.random_range(4..10));
        let frac = r.random_range(0.1..0.25);
        let filter = RbfFilter::<f64>::new(frac, h, w).unwrap();
        let x = [random(r, &[h, w], 0.0, 1.0, &[], 0.0)];
        check("rbf_smooth", &x, &|t, v| {
            let o = filter.apply_var(t, v[0])?;
            weighted(t, o, s)
        });
    });
}

fn random_pair(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImagePair<f64> {
    let original = random(r, &[c, h, w], 0.0, 1.0, &[], 0.0);
    let perturbed = random(r, &[c, h, w], 0.0, 1.0, &[], 0.0);
    ImagePair::new(original, perturbed).unwrap()
}

fn random_box(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMap {
    let (y0, x0) = (r.random_range(0..h - 2), r.random_range(0..w - 2));
    let (y1, x1) = (r.random_range(y0 + 1..h), r.random_range(x0 + 1..w));
    BinaryMap::from_box(h, w, BoundingBox { y0, x0, y1, x1 })
}

pub fn composition_regularizer_and_dice() {
    for_instances(10, |r, s| {
        let (h, w) = (r.random_range(3..7), r.random_range(3..7));
        let pair = random_pair(r, 3, h, w);
        let mask = [distinct(r, h * w, 1e-3).map(|v| 0.5 + 0.2 * v).reshape([h, w]).unwrap()];
        check("compose", &mask, &|t, v| {
            let o = compose_perturbed(t, v[0], &pair)?;
            weighted(t, o, s)
        });
        let area = r.random_range(0.0..1.0);
        check("area_regularizer", &mask, &|t, v| area_regularizer(t, v[0], area));
        let other = [mask[0].clone(), random(r, &[h, w], 0.0, 1.0, &[], 0.0)];
        check("dice", &other, &|t, v| dice_penalty(t, v[0], v[1]));
    });
}

pub fn full_loss_with_oracle_and_cnn() {
    for_instances(11, |r, s| {
        let (h, w) = (r.random_range(8..11), r.random_range(8..11));
        let pair = random_pair(r, 3, h, w);
        let region = random_box(r, h, w);
        let oracle = OracleClassifier::new(vec![region], r.random_range(2.0..8.0), r.random_range(0.2..0.6)).unwrap();
        let cnn = ToyCnn::init(3, 3, s).unwrap();
        let filter = RbfFilter::<f64>::new(0.2, h, w).unwrap();
        let raw = [distinct(r, h * w, 1e-3).map(|v| 0.5 + 0.2 * v).reshape([h, w]).unwrap()];
        let baseline = random(r, &[h, w], 0.0, 1.0, &[], 0.0);
        let area = r.random_range(0.05..0.5);
        let weights = LossWeights {
            lambda_r: r.random_range(0.5..5.0),
            lambda_d: r.random_range(0.5..5.0),
        };
        let classifiers: [(&str, &dyn Classifier<f64>, usize); 2] =
            [("oracle", &oracle, OracleClassifier::TARGET_CLASS), ("cnn", &cnn, s as usize % 3)];
        for (name, classifier, class) in classifiers {
            let problem = Problem::new(&pair, classifier, class).unwrap();
            check(&format!("loss {name}"), &raw, &|t, v| {
                let m = filter.apply_var(t, v[0])?;
                Ok(loss_extremal(t, &problem, m, m, area, &weights, None)?.total)
            });
            check(&format!("loss {name} with overlap"), &raw, &|t, v| {
                let m = filter.apply_var(t, v[0])?;
                Ok(loss_extremal(t, &problem, m, v[0], area, &weights, Some(&baseline))?.total)
            });
        }
    });
}

pub fn inr_weights() {
    let config = InrConfig {
        hidden_layers: 2,
        hidden_width: 6,
        components: 4,
        area_range: AreaRange::new(0.025, 0.2).unwrap(),
        ..InrConfig::default()
    };
    let grid = CoordinateGrid::new(4, 4).unwrap();
    for_instances(12, |r, s| {
        let mut net = ImplicitMaskNetwork::<f64>::init(&config, s).unwrap();
        // zero biases put pre-activations exactly on the ReLU kink
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.05..0.05);
            }
        }
        let area = config.area_range.parameter(r.random_range(0.025..0.2)).unwrap();
        let params = net.params().to_vec();
        check("inr mean mask", &params, &|t, v| {
            let m = net.forward_mask(t, v, &grid, area)?;
            t.mean(m)
        });
    });
}

/// Every case, for runners that report them collectively.
pub const CASES: &[(&str, fn())] = &[
    ("binary_elementwise", binary_elementwise),
    ("scalar_elementwise", scalar_elementwise),
    ("unary_elementwise", unary_elementwise),
    ("matmul_and_biases", matmul_and_biases),
    ("conv2d_all_paddings", conv2d_all_paddings),
    ("reductions_and_reshapes", reductions_and_reshapes),
    ("softmax_jacobian", softmax_jacobian),
    ("vecsort_both_directions", vecsort_both_directions),
    ("rbf_smoothing", rbf_smoothing),
    ("composition_regularizer_and_dice", composition_regularizer_and_dice),
    ("full_loss_with_oracle_and_cnn", full_loss_with_oracle_and_cnn),
    ("inr_weights", inr_weights),
];
