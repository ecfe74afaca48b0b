#![allow(dead_code)]

use mumtaffect::data::ProcessedTrial;
use mumtaffect::layers::{scaled_dot_product_attention, BatchNorm, ConvBlock, Ctx, EncoderLayer, EncoderParams, LayerNorm, Linear, MultiHeadAttention};
use mumtaffect::model::{Batch, ModelConfig, MuMTAffect};
use mumtaffect::params::{Bound, Builder, Group, ParamId, ParamStore};
use mumtaffect::tensor::gradcheck::{check_store, CheckError, CheckOptions, GradReport};
use mumtaffect::tensor::{Graph, Result, Tensor, Var};
use mumtaffect::train::{forward_loss, ClassWeights, Labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type GradFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are shifted away from zero (for log) when set.
    pub positive: bool,
    pub f: GradFn,
}

/// Weighted sum with fixed, non-uniform weights so every output entry matters.
pub fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.7 + 0.3).sin());
    y.mul(g.constant(w))?.sum()
}

fn case(name: &'static str, shapes: &[&[usize]], f: GradFn) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive: false,
        f,
    }
}

pub fn primitive_cases() -> Vec<Case> {
    let mut v = vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|g, x| probe(g, x[0].matmul(x[1])?))),
        case(
            "matmul_batched",
            &[&[2, 3, 4], &[2, 4, 5]],
            Box::new(|g, x| probe(g, x[0].matmul(x[1])?)),
        ),
        case(
            "matmul_shared_rhs",
            &[&[2, 3, 4], &[4, 5]],
            Box::new(|g, x| probe(g, x[0].matmul(x[1])?)),
        ),
        case(
            "matmul_nt",
            &[&[2, 3, 4], &[2, 5, 4]],
            Box::new(|g, x| probe(g, x[0].matmul_nt(x[1], 0.5)?)),
        ),
        case(
            "linear",
            &[&[2, 3, 4], &[4, 5], &[5]],
            Box::new(|g, x| probe(g, x[0].linear(x[1], Some(x[2]))?)),
        ),
        case("add_broadcast", &[&[3, 4], &[4]], Box::new(|g, x| probe(g, x[0].add(x[1])?))),
        case("sub", &[&[3, 4], &[3, 4]], Box::new(|g, x| probe(g, x[0].sub(x[1])?))),
        case("mul_broadcast", &[&[2, 3, 4], &[3, 4]], Box::new(|g, x| probe(g, x[0].mul(x[1])?))),
        case("scale", &[&[5]], Box::new(|g, x| probe(g, x[0].scale(-1.7)?))),
        case("add_scalar", &[&[5]], Box::new(|g, x| probe(g, x[0].add_scalar(0.4)?))),
        case(
            "transpose",
            &[&[2, 3, 4, 5]],
            Box::new(|g, x| probe(g, x[0].transpose(1, 3)?)),
        ),
        case("reshape", &[&[2, 6]], Box::new(|g, x| probe(g, x[0].reshape(&[3, 4])?))),
        case(
            "concat",
            &[&[2, 3, 4], &[2, 1, 4]],
            Box::new(|g, x| probe(g, g.concat(&[x[0], x[1]], 1)?)),
        ),
        case("slice", &[&[3, 6, 2]], Box::new(|g, x| probe(g, x[0].slice(1, 2, 3)?))),
        case("expand", &[&[2, 1, 3]], Box::new(|g, x| probe(g, x[0].expand(1, 4)?))),
        case("sum_axis", &[&[2, 3, 4]], Box::new(|g, x| probe(g, x[0].sum_axis(1)?))),
        case("mean_axis", &[&[2, 3, 4]], Box::new(|g, x| probe(g, x[0].mean_axis(2)?))),
        case("relu", &[&[4, 5]], Box::new(|g, x| probe(g, x[0].relu()?))),
        case("sigmoid", &[&[4, 5]], Box::new(|g, x| probe(g, x[0].sigmoid()?))),
        case("exp", &[&[4, 5]], Box::new(|g, x| probe(g, x[0].exp()?))),
        case("abs", &[&[4, 5]], Box::new(|g, x| probe(g, x[0].abs()?))),
        case("softmax", &[&[3, 4, 5]], Box::new(|g, x| probe(g, x[0].softmax(1)?))),
        case("log_softmax", &[&[3, 5]], Box::new(|g, x| probe(g, x[0].log_softmax(1)?))),
        case(
            "softmax_sum_of_squares",
            &[&[6]],
            Box::new(|_, x| {
                let s = x[0].softmax(0)?;
                s.mul(s)?.sum()
            }),
        ),
        case(
            "layer_norm",
            &[&[3, 6], &[6], &[6]],
            Box::new(|g, x| probe(g, x[0].layer_norm(x[1], x[2], 1e-5)?)),
        ),
        case(
            "batch_norm",
            &[&[4, 3, 5], &[3], &[3]],
            Box::new(|g, x| probe(g, x[0].batch_norm(x[1], x[2], 1e-5)?.0)),
        ),
        case(
            "batch_norm_fixed",
            &[&[4, 3], &[3], &[3]],
            Box::new(|g, x| probe(g, x[0].batch_norm_fixed(x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?)),
        ),
        case(
            "conv1d_s1",
            &[&[2, 3, 7], &[4, 3, 3], &[4]],
            Box::new(|g, x| probe(g, x[0].conv1d(x[1], x[2], 1, 1)?)),
        ),
        case(
            "conv1d_s2",
            &[&[2, 3, 8], &[4, 3, 3], &[4]],
            Box::new(|g, x| probe(g, x[0].conv1d(x[1], x[2], 2, 1)?)),
        ),
        case(
            "dropout",
            &[&[4, 5]],
            Box::new(|g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                probe(g, x[0].dropout(0.3, &mut rng)?)
            }),
        ),
        case("gather", &[&[4, 3]], Box::new(|g, x| probe(g, x[0].gather(&[2, 0, 1, 2])?))),
    ];
    v.push(Case {
        positive: true,
        ..case("log", &[&[4, 5]], Box::new(|g, x| probe(g, x[0].log()?)))
    });
    v
}

pub fn random_inputs(c: &Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    c.shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s, |_| {
                let v: f64 = rng.random_range(-1.5..1.5);
                if c.positive {
                    v.abs() + 0.2
                } else {
                    v
                }
            })
        })
        .collect()
}

pub type StoreFn = Box<dyn for<'s, 'g> Fn(&'g Graph<f64>, &Bound<'s, 'g, f64>) -> Result<Var<'g, f64>>>;

/// A layer whose parameters and input all live in one store.
pub struct LayerCase {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub f: StoreFn,
}

fn input(store: &mut ParamStore<f32>, name: &str, shape: &[usize], seed: u64) -> ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(shape, |_| rng.random_range(-1.5f32..1.5));
    store.push(name.to_string(), t, Group::Base, true)
}

fn layer_case(name: &'static str, build: impl FnOnce(&mut ParamStore<f32>) -> StoreFn) -> LayerCase {
    let mut store = ParamStore::new();
    let f = build(&mut store);
    LayerCase {
        name,
        store: store.cast(),
        f,
    }
}

pub fn layer_cases() -> Vec<LayerCase> {
    let enc = EncoderParams {
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
    };
    vec![
        layer_case("linear", |s| {
            let l = Linear::new(&mut Builder::new(s, 1), "l", 4, 3);
            let x = input(s, "x", &[2, 5, 4], 2);
            Box::new(move |g, p| probe(g, l.forward(p, p.var(x))?))
        }),
        layer_case("layer_norm", |s| {
            let l = LayerNorm::new(&mut Builder::new(s, 1), "n", 6);
            let x = input(s, "x", &[3, 6], 3);
            Box::new(move |g, p| probe(g, l.forward(p, p.var(x))?))
        }),
        layer_case("batch_norm_train", |s| {
            let l = BatchNorm::new(&mut Builder::new(s, 1), "bn", 3);
            let x = input(s, "x", &[4, 3, 5], 4);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::train(0), p.var(x))?))
        }),
        layer_case("batch_norm_eval", |s| {
            let l = BatchNorm::new(&mut Builder::new(s, 1), "bn", 3);
            let x = input(s, "x", &[4, 3], 5);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::eval(), p.var(x))?))
        }),
        layer_case("attention", |s| {
            let q = input(s, "q", &[2, 3, 4], 6);
            let k = input(s, "k", &[2, 5, 4], 7);
            let v = input(s, "v", &[2, 5, 4], 8);
            Box::new(move |g, p| probe(g, scaled_dot_product_attention(p.var(q), p.var(k), p.var(v))?.0))
        }),
        layer_case("multi_head_attention", |s| {
            let l = MultiHeadAttention::new(&mut Builder::new(s, 1), "mha", 8, 2);
            let x = input(s, "x", &[2, 5, 8], 9);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::eval(), p.var(x), "mha")?))
        }),
        layer_case("encoder_layer", move |s| {
            let l = EncoderLayer::new(&mut Builder::new(s, 1), "enc", &enc);
            let x = input(s, "x", &[2, 5, 8], 10);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::train(0), p.var(x), "enc")?))
        }),
        layer_case("conv_block_s1", |s| {
            let l = ConvBlock::new(&mut Builder::new(s, 1), "c", 3, 4, 1);
            let x = input(s, "x", &[3, 3, 8], 11);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::train(0), p.var(x))?))
        }),
        layer_case("conv_block_s2", |s| {
            let l = ConvBlock::new(&mut Builder::new(s, 1), "c", 3, 4, 2);
            let x = input(s, "x", &[3, 3, 8], 12);
            Box::new(move |g, p| probe(g, l.forward(p, &mut Ctx::train(0), p.var(x))?))
        }),
    ]
}

/// The full model in 64-bit with dropout disabled, batch-norm on batch
/// statistics, checked on the training loss at sampled parameter entries:
/// one element of every trainable tensor plus `extra` random ones.
pub fn model_gradcheck(cfg: &ModelConfig, trials: &[&ProcessedTrial], extra: usize, seed: u64) -> std::result::Result<GradReport, CheckError> {
    let mut cfg = cfg.clone();
    cfg.enc.dropout = 0.0;
    cfg.fusion.dropout = 0.0;
    cfg.personality_dropout = 0.0;
    cfg.emotion_dropout = 0.0;
    cfg.trial_dropout = 0.0;
    let mut model = MuMTAffect::new(cfg, seed).expect("valid config");
    model.fit_normalizer(trials);
    let store: ParamStore<f64> = model.params.cast();
    let batch = Batch::<f32>::from_trials(trials).cast::<f64>();
    let l = Labels::<f32>::from_trials(trials);
    let labels = Labels {
        valence: l.valence,
        arousal: l.arousal,
        personality: l.personality.cast(),
    };
    let weights = ClassWeights {
        valence: [1.0, 1.5, 0.8],
        arousal: [0.7, 1.0, 1.3],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.entry(i).trainable).collect();
    let mut coords: Vec<(usize, usize)> = trainable
        .iter()
        .map(|&i| (i, rng.random_range(0..store.get(i).len())))
        .collect();
    for _ in 0..extra {
        let i = trainable[rng.random_range(0..trainable.len())];
        coords.push((i, rng.random_range(0..store.get(i).len())));
    }
    let opts = CheckOptions {
        eps: 1e-6,
        tol: 1e-3,
        floor: 1e-6,
    };
    check_store(
        &store,
        |_, p| {
            let out = model.forward(p, &mut Ctx::train(0), &batch).map_err(|e| match e {
                mumtaffect::model::ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            Ok(forward_loss(&out, &labels, 0.5, 0.05, &weights)?.total)
        },
        Some(&coords),
        opts,
    )
}
