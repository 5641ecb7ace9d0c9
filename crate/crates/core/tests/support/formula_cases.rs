//! Closed-form quantities against brute-force evaluations written from
//! their definitions (no shared code with the library), plus the worked
//! examples the library is expected to reproduce.

use maskfield::attribution::{area_regularizer, compose, compose_perturbed, dice_penalty, RbfFilter, DICE_EPSILON};
use maskfield::eval::{hit_rate, precision, record_from_precisions, soft_dice, threshold_saliency};
use maskfield::image::{iou, BinaryMap, BoundingBox};
use maskfield::inr::{AreaRange, CoordinateGrid, ImplicitMaskNetwork, InrConfig};
use maskfield::models::{gaussian_blur_px, gaussian_kernel_1d, Classifier, ImagePair, OracleClassifier, Perturbation};
use maskfield::scene::two_evidence_scene;
use maskfield::tensor::{conv2d, Padding, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MASKS: usize = 100;
pub const TOL: f64 = 1e-6;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_f00d ^ tag)
}

/// Random `[h, w]` mask; one in four is quantized to tenths so ties and
/// exact 0/1 values occur.
fn random_mask(r: &mut ChaCha8Rng) -> Tensor<f64> {
    let (h, w) = (r.random_range(1..7), r.random_range(1..7));
    let quantize = r.random_bool(0.25);
    let data = (0..h * w)
        .map(|_| {
            let v: f64 = r.random_range(0.0..=1.0);
            if quantize {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        })
        .collect();
    Tensor::new([h, w], data).unwrap()
}

fn tracked<T>(f: impl FnOnce(&mut Tape<f64>) -> maskfield::Result<T>) -> T {
    let mut tape = Tape::new();
    f(&mut tape).unwrap()
}

fn close(name: &str, got: f64, want: f64) {
    assert!((got - want).abs() <= TOL, "{name}: got {got}, brute force {want}");
}

/// Ascending order by rank counting: element i lands at
/// `#{j : x_j < x_i} + #{j < i : x_j = x_i}`.
fn sorted_by_rank(x: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for (i, &v) in x.iter().enumerate() {
        let less = x.iter().filter(|&&u| u < v).count();
        let ties_before = x[..i].iter().filter(|&&u| u == v).count();
        out[less + ties_before] = v;
    }
    out
}

fn regularizer_oracle(mask: &[f64], area: f64) -> f64 {
    let n = mask.len();
    // largest integer z with z <= (1 - a) n
    let mut zeros = 0;
    while zeros < n && (zeros + 1) as f64 <= (1.0 - area) * n as f64 {
        zeros += 1;
    }
    let sorted = sorted_by_rank(mask);
    let mut total = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        let r = if k < zeros { 0.0 } else { 1.0 };
        total += (v - r) * (v - r);
    }
    total / n as f64
}

pub fn area_regularizer_matches_brute_force() {
    let mut r = rng(1);
    for _ in 0..MASKS {
        let m = random_mask(&mut r);
        let area = if r.random_bool(0.2) { [0.0, 0.5, 1.0][r.random_range(0..3)] } else { r.random_range(0.0..=1.0) };
        let got = tracked(|t| {
            let v = t.constant(m.clone());
            let reg = area_regularizer(t, v, area)?;
            t.value(reg).item()
        });
        close("R_a", got, regularizer_oracle(m.data(), area));
    }
}

fn dice_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for i in 0..a.len() {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
    }
    (2.0 * inter + 1e-6) / (sa + sb + 1e-6)
}

pub fn dice_matches_brute_force() {
    assert_eq!(DICE_EPSILON, 1e-6);
    let mut r = rng(2);
    for _ in 0..MASKS {
        let a = random_mask(&mut r);
        let b = Tensor::new(a.shape().to_vec(), (0..a.len()).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap();
        let want = dice_oracle(a.data(), b.data());
        let taped = tracked(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            let d = dice_penalty(t, x, y)?;
            t.value(d).item()
        });
        close("dice (tape)", taped, want);
        close("dice (eval)", soft_dice(&a, &b).unwrap(), want);
        close("dice symmetry", soft_dice(&b, &a).unwrap(), want);
    }
}

pub fn precision_matches_counting() {
    let mut r = rng(3);
    for _ in 0..MASKS {
        let m = random_mask(&mut r);
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let seg: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
        let threshold = if r.random_bool(0.5) { 0.5 } else { r.random_range(0.05..0.95) };
        let mut size = 0usize;
        let mut inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                if m.data()[y * w + x] > threshold {
                    size += 1;
                    if seg[y * w + x] {
                        inside += 1;
                    }
                }
            }
        }
        let want = if size == 0 { 0.0 } else { inside as f64 / size as f64 };
        let got = precision(&m, &BinaryMap::new(h, w, seg).unwrap(), threshold).unwrap();
        close("precision", got.value, want);
        assert_eq!(got.empty_mask, size == 0);
    }
}

pub fn composition_matches_loop() {
    let mut r = rng(4);
    for _ in 0..MASKS {
        let m = random_mask(&mut r);
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let c = r.random_range(1..4);
        let img = |r: &mut ChaCha8Rng| Tensor::new([c, h, w], (0..c * h * w).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap();
        let pair = ImagePair::new(img(&mut r), img(&mut r)).unwrap();
        let direct = compose(&m, &pair).unwrap();
        let taped = tracked(|t| {
            let v = t.constant(m.clone());
            let out = compose_perturbed(t, v, &pair)?;
            Ok(t.value(out).clone())
        });
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let k = (ch * h + y) * w + x;
                    let mv = m.data()[y * w + x];
                    let want = mv * pair.original().data()[k] + (1.0 - mv) * pair.perturbed().data()[k];
                    close("compose", direct.data()[k], want);
                    close("compose (tape)", taped.data()[k], want);
                }
            }
        }
    }
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn autodiff_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);

    let a = t64(&[1, 2], &[1.0, 2.0]);
    let b = t64(&[2, 1], &[3.0, 4.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);

    let mut hot = vec![0.0; 25];
    hot[12] = 1.0;
    let plateau = conv2d(&t64(&[1, 5, 5], &hot), &t64(&[1, 1, 3, 3], &[1.0; 9]), Padding::Same).unwrap();
    for yy in 0..5 {
        for xx in 0..5 {
            let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
            assert_eq!(plateau.data()[yy * 5 + xx], if inside { 1.0 } else { 0.0 });
        }
    }

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[4], &[1.0, 5.0, -2.0, 0.5]));
    let m = tape.mean(x).unwrap();
    assert_eq!(tape.backward(m).unwrap().get(x).unwrap().data(), &[0.25; 4]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[3], &[3.0, 1.0, 2.0]));
    let (sorted, perm) = tape.vecsort(x, true).unwrap();
    assert_eq!(tape.value(sorted).data(), &[1.0, 2.0, 3.0]);
    assert_eq!(perm, vec![1, 2, 0]);
    let (ua, ub, uc) = (0.3, -1.7, 2.9);
    let w = tape.constant(t64(&[3], &[ua, ub, uc]));
    let weighted = tape.mul(sorted, w).unwrap();
    let total = tape.sum(weighted).unwrap();
    assert_eq!(tape.backward(total).unwrap().get(x).unwrap().data(), &[uc, ua, ub]);
}

pub fn loss_and_filter_examples() {
    let img = t64(&[2, 2, 2], &[0.1, 0.9, 0.4, 0.6, 1.0, 0.0, 0.2, 0.3]);
    let pair = ImagePair::from_image(img.clone(), Perturbation::Blur { sigma_fraction: 0.3 }).unwrap();
    let half = compose(&Tensor::full([2, 2], 0.5), &pair).unwrap();
    for k in 0..8 {
        assert_eq!(half.data()[k], 0.5 * pair.original().data()[k] + 0.5 * pair.perturbed().data()[k]);
    }

    let reg = tracked(|t| {
        let m = t.constant(Tensor::full([1, 2], 1.0));
        let r = area_regularizer(t, m, 0.5)?;
        t.value(r).item()
    });
    assert_eq!(reg, 0.5);

    let filter = RbfFilter::<f64>::new(0.2, 11, 11).unwrap();
    let mut raw = Tensor::zeros([11, 11]);
    raw.data_mut()[5 * 11 + 5] = 1.0;
    let smooth = filter.apply(&raw).unwrap();
    let peak = smooth.data().iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(peak, filter.center_weight());
    assert_eq!(smooth.data()[5 * 11 + 5], filter.center_weight());

    let mut hot = Tensor::<f64>::zeros([1, 9, 9]);
    hot.data_mut()[4 * 9 + 4] = 1.0;
    let blurred = gaussian_blur_px(&hot, 1.0).unwrap();
    let k = gaussian_kernel_1d(1.0).unwrap();
    let centre = k[k.len() / 2];
    assert!((blurred.data()[4 * 9 + 4] - centre * centre).abs() < 1e-15);
}

pub fn evaluation_examples() {
    // 10-pixel mask, 5 of them inside the segmentation
    let mut mask = Tensor::<f64>::zeros([4, 5]);
    let mut seg = BinaryMap::empty(4, 5);
    for i in 0..10 {
        mask.data_mut()[i] = 1.0;
        if i % 2 == 0 {
            seg.set(i / 5, i % 5, true);
        }
    }
    seg.set(3, 4, true);
    assert_eq!(precision(&mask, &seg, 0.5).unwrap().value, 0.5);

    assert_eq!(hit_rate(&[0.6, 0.4]).unwrap(), 0.5);
    assert_eq!(hit_rate(&[0.5]).unwrap(), 0.0);

    let m1 = t64(&[4], &[1.0, 1.0, 0.0, 0.0]);
    let m2 = t64(&[4], &[0.0, 1.0, 1.0, 0.0]);
    assert!((soft_dice(&m1, &m2).unwrap() - 0.5).abs() <= 1e-5);

    let t = threshold_saliency(&t64(&[1, 2], &[2.0, 4.0]), 0.5).unwrap();
    assert_eq!(t.mask.data(), &[false, true]);
    assert!(t.rescaled);
    let t = threshold_saliency(&t64(&[1, 3], &[0.0, 0.3, 0.7]), 0.5).unwrap();
    assert_eq!(t.mask.data(), &[false, false, true]);
    let t = threshold_saliency(&Tensor::<f64>::full([2, 2], 1.0), 0.5).unwrap();
    assert!(t.constant && t.mask.data().iter().all(|&b| b));

    let record = record_from_precisions("img", "inr", &[0], vec![vec![0.9, 0.2, 0.1]]);
    assert_eq!(record.max_precision, 0.9);
}

pub fn scene_and_oracle_examples() {
    for seed in 0..5 {
        let scene = two_evidence_scene(32, 9, seed).unwrap();
        let maps = scene.maps();
        assert_eq!(maps.len(), 2);
        assert_eq!(iou(&maps[0], &maps[1]).unwrap(), 0.0);
    }

    // the input gradient of the oracle is nonzero exactly on its region,
    // and agrees with central differences there
    let region = BinaryMap::from_box(6, 7, BoundingBox { x0: 2, y0: 1, x1: 5, y1: 4 });
    let oracle = OracleClassifier::new(vec![region.clone()], 6.0, 0.4).unwrap();
    let mut r = rng(5);
    let img = Tensor::new([3, 6, 7], (0..3 * 42).map(|_| r.random_range(0.1..0.9)).collect()).unwrap();
    let grad = Classifier::<f64>::input_gradient(&oracle, &img, OracleClassifier::TARGET_CLASS).unwrap();
    let p = |x: &Tensor<f64>| Classifier::<f64>::probabilities(&oracle, x).unwrap()[OracleClassifier::TARGET_CLASS];
    for k in 0..img.len() {
        let pixel = k % 42;
        let inside = region.data()[pixel];
        assert_eq!(grad.data()[k] != 0.0, inside, "component {k}");
        let mut plus = img.clone();
        plus.data_mut()[k] += 1e-5;
        let mut minus = img.clone();
        minus.data_mut()[k] -= 1e-5;
        let numeric = (p(&plus) - p(&minus)) / 2e-5;
        assert!((grad.data()[k] - numeric).abs() < 1e-4, "component {k}: {} vs {numeric}", grad.data()[k]);
    }
}

/// He initialization keeps pre-activation variance near one: the first
/// layer sees Fourier features, deeper layers see ReLU of unit-variance
/// pre-activations. Averaged over 100 initializations.
pub fn initialization_variance() {
    let config = InrConfig {
        hidden_width: 64,
        hidden_layers: 3,
        area_range: AreaRange::new(0.025, 0.2).unwrap(),
        ..InrConfig::default()
    };
    let grid = CoordinateGrid::new(8, 8).unwrap();
    let mut r = rng(6);
    let layers = config.hidden_layers;
    let mut ratios = vec![0.0; layers];
    let runs = 100;
    for seed in 0..runs {
        let net = ImplicitMaskNetwork::<f64>::init(&config, seed).unwrap();
        let features = net.encoder().encode::<f64>(&grid, 0.3).unwrap();
        for layer in 0..layers {
            let w = &net.params()[2 * layer];
            let fan_in = w.shape()[0];
            let input = if layer == 0 {
                features.clone()
            } else {
                let rows = 64;
                let data = (0..rows * fan_in)
                    .map(|_| {
                        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                        z.max(0.0)
                    })
                    .collect();
                Tensor::new([rows, fan_in], data).unwrap()
            };
            let pre = input.matmul(w).unwrap();
            let var = pre.data().iter().map(|v| v * v).sum::<f64>() / (pre.len() as f64);
            ratios[layer] += var / runs as f64;
        }
    }
    for (layer, v) in ratios.iter().enumerate() {
        assert!((0.5..=2.0).contains(v), "layer {layer}: mean pre-activation variance {v}");
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("area_regularizer_matches_brute_force", area_regularizer_matches_brute_force),
    ("dice_matches_brute_force", dice_matches_brute_force),
    ("precision_matches_counting", precision_matches_counting),
    ("composition_matches_loop", composition_matches_loop),
    ("autodiff_examples", autodiff_examples),
    ("loss_and_filter_examples", loss_and_filter_examples),
    ("evaluation_examples", evaluation_examples),
    ("scene_and_oracle_examples", scene_and_oracle_examples),
    ("initialization_variance", initialization_variance),
];
