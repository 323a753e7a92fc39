#![allow(dead_code)]

use latent_rul::ingest::{fit_minmax, FeatureSpec, WindowedDataset};
use latent_rul::model::{LossMode, Model, ModelConfig};
use latent_rul::nn::{Graph, NodeId, ParamStore, Tensor};
use latent_rul::pipeline::{self, UnitPrediction};
use latent_rul::prior::PriorConfig;
use latent_rul::rng::{stream_rng, Stream};
use latent_rul::similarity::PriorLibrary;
use latent_rul::synth::{generate, SynthConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step. Rounding error in the two loss evaluations
/// scales like eps*|L|/h; at 1e-6 it reaches 1e-4 relative on gradient
/// entries near 1e-6, while at 1e-5 the truncation error is still far below
/// that and ReLU kinks stay out of reach in practice.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Test)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error between backpropagated and central-difference
/// gradients of the scalar built by `f`, over every entry of every parameter.
pub fn check_store(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> NodeId) -> f64 {
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss).unwrap();
        store
            .ids()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let loss = f(&mut g);
        g.value(loss).values()[0]
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).values()[j];
            let mut at = |x: f64| {
                store.get_mut(id).values_mut()[j] = x;
                eval(store)
            };
            let numeric = central_difference(&mut at, orig);
            store.get_mut(id).values_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[pi].values()[j], numeric));
        }
    }
    worst
}

pub fn miniature_config(seed: u64) -> ModelConfig {
    ModelConfig {
        window_length: 4,
        features: 3,
        latent_seq: 2,
        latent_dim: 4,
        codebook_size: 4,
        model_dim: 12,
        encoder_layers: 1,
        encoder_heads: 3,
        decoder_layers: 1,
        decoder_heads: 3,
        seed,
        ..ModelConfig::default()
    }
}

pub fn miniature_model(seed: u64) -> Model {
    let spec = FeatureSpec::new(vec![2, 3, 4], 0).unwrap();
    let stats = latent_rul::ingest::NormalizationStats {
        min: vec![0.0; 3],
        max: vec![1.0; 3],
    };
    Model::init(miniature_config(seed), spec, stats).unwrap()
}

/// Finite-difference check of the full three-term loss of `model` on one
/// window, with the codebook selection and stop-gradients frozen at the
/// current point. Also confirms the frozen gradient equals the live
/// straight-through gradient. Returns the max relative error.
pub fn check_composed(model: &mut Model, window: &[Vec<f64>], target: f64) -> f64 {
    let point = model.frozen_point(window).unwrap();
    let grads_for = |m: &Model, mode: LossMode| -> Vec<Tensor> {
        let mut g = Graph::new(m.params());
        let lg = m.loss_graph(&mut g, window, target, mode).unwrap();
        let grads = g.backward(lg.nodes.total).unwrap();
        m.params()
            .ids()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(m.params().get(id).shape())))
            .collect()
    };
    let frozen = grads_for(model, LossMode::Frozen(&point));
    let live = grads_for(model, LossMode::Live);
    for (a, b) in frozen.iter().zip(&live) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "frozen {x} vs live {y}");
        }
    }
    let eval = |m: &Model| {
        let mut g = Graph::new(m.params());
        let lg = m.loss_graph(&mut g, window, target, LossMode::Frozen(&point)).unwrap();
        g.value(lg.nodes.total).values()[0]
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..model.params().get(id).len() {
            let orig = model.params().get(id).values()[j];
            let mut at = |x: f64| {
                model.params_mut().get_mut(id).values_mut()[j] = x;
                eval(model)
            };
            let numeric = central_difference(&mut at, orig);
            model.params_mut().get_mut(id).values_mut()[j] = orig;
            worst = worst.max(rel_error(frozen[pi].values()[j], numeric));
        }
    }
    worst
}

/// Settings used for every end-to-end run on the synthetic fleet.
pub fn synthetic_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        window_length: 10,
        features: 3,
        latent_seq: 8,
        latent_dim: 4,
        codebook_size: 12,
        model_dim: 12,
        encoder_layers: 2,
        encoder_heads: 3,
        decoder_layers: 1,
        decoder_heads: 3,
        learning_rate: 1e-3,
        epochs: 20,
        batch_size: 32,
        seed,
        ..ModelConfig::default()
    }
}

pub const SYNTHETIC_K: usize = 10;

pub fn synthetic_prior() -> PriorConfig {
    PriorConfig::default()
}

pub fn synthetic_features() -> FeatureSpec {
    FeatureSpec::new(latent_rul::synth::DEGRADATION_SENSORS.to_vec(), 0).unwrap()
}

pub struct SyntheticData {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

pub fn synthetic_data(seed: u64, window_length: usize) -> SyntheticData {
    let fleet = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let spec = synthetic_features();
    let stats = fit_minmax(&fleet.train, &spec).unwrap();
    SyntheticData {
        train: WindowedDataset::build(&fleet.train, window_length, &spec, &stats, 125.0).unwrap(),
        test: WindowedDataset::build(&fleet.test, window_length, &spec, &stats, 125.0).unwrap(),
    }
}

pub struct EndToEnd {
    pub model: Model,
    pub library: PriorLibrary,
    pub predictions: Vec<UnitPrediction>,
    pub truths: Vec<(u32, f64)>,
    pub baseline: f64,
}

pub fn run_synthetic(data: &SyntheticData, config: ModelConfig) -> EndToEnd {
    let mut model = Model::init(config, data.train.feature_spec.clone(), data.train.stats.clone()).unwrap();
    model.fit(&data.train.windows, |_| {}).unwrap();
    let library = pipeline::build_library(&model, &data.train, synthetic_prior()).unwrap();
    let predictions =
        pipeline::predict(&model, &library, &data.test, synthetic_prior(), SYNTHETIC_K, false).unwrap();
    EndToEnd {
        truths: pipeline::truths(&data.test).unwrap(),
        baseline: pipeline::constant_mean_baseline(&data.train).unwrap(),
        model,
        library,
        predictions,
    }
}

/// `sum(x * w)` for a fixed weight tensor.
pub fn dot(g: &mut Graph, x: NodeId, w: &Tensor) -> NodeId {
    let wn = g.constant(w.clone());
    let prod = g.mul(x, wn).unwrap();
    g.sum(prod)
}

/// Entries bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.1 + v } else { v })
}

/// Max relative gradient error of every graph primitive and layer, one
/// entry per check.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, f64)> {
    use latent_rul::nn::{
        feed_forward, multi_head_attention, scaled_dot_attention, AttentionParams, EncoderBlock,
        LinearParams, NormParams,
    };

    let mut rng = test_rng(seed);
    let mut out = Vec::new();
    let (n, k, m) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));

    macro_rules! check {
        ($name:expr, [$($p:ident : $shape:expr),*], |$g:ident| $body:expr) => {{
            let mut store = ParamStore::new();
            $( let $p = store.add(stringify!($p), away_from_zero(&mut rng, &$shape)); )*
            let f = |$g: &mut Graph| -> NodeId {
                $( let $p = $g.param($p); )*
                $body
            };
            out.push(($name, check_store(&mut store, &f)));
        }};
    }

    let w_nm = random_tensor(&mut rng, &[n, m], -1.0, 1.0);
    let w_nk = random_tensor(&mut rng, &[n, k], -1.0, 1.0);
    let w_kn = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
    let w_1k = random_tensor(&mut rng, &[1, k], -1.0, 1.0);
    let w_flat = random_tensor(&mut rng, &[1, n * k], -1.0, 1.0);
    let w_cat = random_tensor(&mut rng, &[n, k + m], -1.0, 1.0);
    let w_slice = random_tensor(&mut rng, &[n, 2], -1.0, 1.0);
    let w_gather = random_tensor(&mut rng, &[4, k], -1.0, 1.0);
    let factor = rng.random_range(-2.0..2.0);

    check!("matmul", [a: [n, k], b: [k, m]], |g| {
        let y = g.matmul(a, b).unwrap();
        dot(g, y, &w_nm)
    });
    check!("add", [a: [n, k], b: [n, k]], |g| {
        let y = g.add(a, b).unwrap();
        dot(g, y, &w_nk)
    });
    check!("sub", [a: [n, k], b: [n, k]], |g| {
        let y = g.sub(a, b).unwrap();
        dot(g, y, &w_nk)
    });
    check!("mul", [a: [n, k], b: [n, k]], |g| {
        let y = g.mul(a, b).unwrap();
        dot(g, y, &w_nk)
    });
    check!("add_row", [a: [n, k], b: [k]], |g| {
        let y = g.add_row(a, b).unwrap();
        dot(g, y, &w_nk)
    });
    check!("scale", [a: [n, k]], |g| {
        let y = g.scale(a, factor);
        dot(g, y, &w_nk)
    });
    check!("relu", [a: [n, k]], |g| {
        let y = g.relu(a);
        dot(g, y, &w_nk)
    });
    check!("softmax_rows", [a: [n, k]], |g| {
        let y = g.softmax_rows(a);
        dot(g, y, &w_nk)
    });
    check!("layer_norm", [a: [n, k], gain: [k], bias: [k]], |g| {
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        dot(g, y, &w_nk)
    });
    check!("transpose", [a: [n, k]], |g| {
        let y = g.transpose(a).unwrap();
        dot(g, y, &w_kn)
    });
    check!("slice_cols", [a: [n, k + 1]], |g| {
        let y = g.slice_cols(a, 1, 2).unwrap();
        dot(g, y, &w_slice)
    });
    check!("concat_cols", [a: [n, k], b: [n, m]], |g| {
        let y = g.concat_cols(&[a, b]).unwrap();
        dot(g, y, &w_cat)
    });
    check!("reshape", [a: [n, k]], |g| {
        let y = g.reshape(a, vec![1, n * k]).unwrap();
        dot(g, y, &w_flat)
    });
    check!("mean_rows", [a: [n, k]], |g| {
        let y = g.mean_rows(a);
        dot(g, y, &w_1k)
    });
    check!("sum", [a: [n, k]], |g| {
        let y = g.sum(a);
        g.mul(y, y).unwrap()
    });
    check!("sum_squares", [a: [n, k]], |g| g.sum_squares(a));
    check!("gather_rows", [a: [3, k]], |g| {
        let y = g.gather_rows(a, &[2, 0, 2, 1]).unwrap();
        dot(g, y, &w_gather)
    });
    check!("scaled_dot_attention", [q: [n, k], kk: [m, k], v: [m, k]], |g| {
        let y = scaled_dot_attention(g, q, kk, v).unwrap();
        dot(g, y, &w_nk)
    });

    // stop_grad alone is non-differentiable by design: check that the
    // backward pass reports exactly the partial derivative that treats the
    // stopped value as a constant.
    {
        let mut store = ParamStore::new();
        let a = store.add("a", away_from_zero(&mut rng, &[n, k]));
        let mut g = Graph::new(&store);
        let an = g.param(a);
        let s = g.stop_grad(an);
        let y = g.mul(s, an).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let err = grads
            .param(a)
            .unwrap()
            .values()
            .iter()
            .zip(store.get(a).values())
            .map(|(gr, v)| rel_error(*gr, *v))
            .fold(0.0, f64::max);
        out.push(("stop_grad_partial", err));
    }

    // Straight-through: forward takes the quantized value, gradient goes to
    // the encoder side as if the op were the identity.
    {
        let mut store = ParamStore::new();
        let e = store.add("e", away_from_zero(&mut rng, &[n, k]));
        let q = store.add("q", away_from_zero(&mut rng, &[n, k]));
        let mut g = Graph::new(&store);
        let (en, qn) = (g.param(e), g.param(q));
        let st = g.straight_through(en, qn).unwrap();
        let loss = dot(&mut g, st, &w_nk);
        let grads = g.backward(loss).unwrap();
        let err = grads
            .param(e)
            .unwrap()
            .values()
            .iter()
            .zip(w_nk.values())
            .map(|(gr, w)| rel_error(*gr, *w))
            .fold(0.0, f64::max);
        let leaked = grads.param(q).map_or(0.0, |t| t.values().iter().fold(0.0, |a: f64, v| a.max(v.abs())));
        out.push(("straight_through", err.max(leaked)));
    }

    // Layers built from the primitives.
    let d = 6;
    let x_val = away_from_zero(&mut rng, &[n, d]);
    let w_nd = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
    let w_n1 = random_tensor(&mut rng, &[n, 1], -1.0, 1.0);
    let mut layer_check = |name: &'static str,
                           build: &dyn Fn(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph, NodeId) -> NodeId>,
                           w: &Tensor,
                           rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", x_val.clone());
        let layer = build(&mut store, rng);
        let f = |g: &mut Graph| {
            let xn = g.param(x);
            let y = layer(g, xn);
            dot(g, y, w)
        };
        out.push((name, check_store(&mut store, &f)));
    };
    layer_check(
        "linear",
        &|s, r| {
            let l = LinearParams::init(s, "l", 6, 1, r);
            Box::new(move |g, x| l.forward(g, x).unwrap())
        },
        &w_n1,
        &mut rng,
    );
    layer_check(
        "layer_norm_params",
        &|s, _| {
            let l = NormParams::init(s, "n", 6);
            Box::new(move |g, x| l.forward(g, x).unwrap())
        },
        &w_nd,
        &mut rng,
    );
    layer_check(
        "feed_forward",
        &|s, r| {
            let a = LinearParams::init(s, "a", 6, 24, r);
            let b = LinearParams::init(s, "b", 24, 6, r);
            Box::new(move |g, x| feed_forward(g, x, &a, &b).unwrap())
        },
        &w_nd,
        &mut rng,
    );
    layer_check(
        "multi_head_attention",
        &|s, r| {
            let p = AttentionParams::init(s, "mha", 6, 3, r).unwrap();
            Box::new(move |g, x| multi_head_attention(g, x, &p).unwrap())
        },
        &w_nd,
        &mut rng,
    );
    layer_check(
        "encoder_block",
        &|s, r| {
            let b = EncoderBlock::init(s, "enc", 6, 2, 24, r).unwrap();
            Box::new(move |g, x| b.forward(g, x).unwrap())
        },
        &w_nd,
        &mut rng,
    );
    out
}
