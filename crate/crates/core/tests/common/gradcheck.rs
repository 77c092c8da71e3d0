//! Central finite-difference checks of every differentiable op and block.

use std::collections::HashMap;

use flowsynth::decoder::{FlowDecoder, UNetConfig};
use flowsynth::encoder::{EncoderConfig, TextEncoder};
use flowsynth::nn::{
    AttentionConfig, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention, SnakeBeta, TimestepEmbedding,
    TransformerBlock,
};
use flowsynth::tensor::{Axis, ParamStore};
use flowsynth::train::{
    duration_loss, otcfm_loss_at, prior_loss, score_matching_loss_at, OtcfmConfig, ScoreMatchingConfig,
};
use flowsynth::{JointFrameSequence, Rng, Tape, Tensor, Var};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 10;

/// Relative error of two gradient vectors. The scale has a floor so that
/// gradients which are zero by symmetry compare absolutely.
fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-4)
}

/// Random linear functional of `v`, so every output entry matters.
fn project<'t>(v: Var<'t>, seed: u64) -> Var<'t> {
    let w = Tensor::gaussian(&mut Rng::new(seed, 77), &v.shape());
    v.mul(v.tape().constant(w)).unwrap().sum()
}

fn new_tape(store: Option<&ParamStore>) -> Tape {
    store.map_or_else(Tape::empty, Tape::new)
}

/// Largest relative error over all inputs of `f`.
fn check_inputs(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    check_inputs_in(None, inputs, f)
}

/// [`check_inputs`] on tapes that also hold the parameters of `store`.
fn check_inputs_in(store: Option<&ParamStore>, inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = new_tape(store);
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &leaves);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[i]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; x.numel()]);
        let mut numeric = Vec::with_capacity(x.numel());
        for k in 0..x.numel() {
            let eval = |delta: f64| {
                let mut ins = inputs.to_vec();
                ins[i].data_mut()[k] += delta;
                let tape = new_tape(store);
                let leaves: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
                f(&tape, &leaves).value().item()
            };
            numeric.push((eval(H) - eval(-H)) / (2.0 * H));
        }
        worst = worst.max(rel(&analytic, &numeric));
    }
    worst
}

/// Gives every parameter a random value so residual branches and zero
/// initializations do not hide gradients.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed, 5);
    for p in store.params_mut() {
        let t = Tensor::gaussian(&mut rng, p.value.shape()).scale(0.4);
        p.value = t;
    }
}

/// Largest relative error over up to `per_param` sampled entries of every
/// parameter.
fn check_params(store: &ParamStore, per_param: usize, seed: u64, f: impl for<'t> Fn(&'t Tape) -> Var<'t>) -> f64 {
    check_params_where(store, per_param, seed, |_| true, f)
}

/// [`check_params`] restricted to parameters whose name passes `keep`.
fn check_params_where(
    store: &ParamStore,
    per_param: usize,
    seed: u64,
    keep: impl Fn(&str) -> bool,
    f: impl for<'t> Fn(&'t Tape) -> Var<'t>,
) -> f64 {
    let tape = Tape::new(store);
    let loss = f(&tape);
    let grads = tape.backward(loss).unwrap();
    let analytic: HashMap<_, _> = grads.param_grads().map(|(id, g)| (id, g.data().to_vec())).collect();
    let mut rng = Rng::new(seed, 9);
    let mut a_all = Vec::new();
    let mut worst: f64 = 0.0;
    for (id, p) in store.iter().filter(|(_, p)| keep(&p.name)) {
        let n = p.value.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for k in picks {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[k] += delta;
                let tape = Tape::new(&s);
                f(&tape).value().item()
            };
            num.push((eval(H) - eval(-H)) / (2.0 * H));
            a.push(analytic.get(&id).map_or(0.0, |g| g[k]));
        }
        let e = rel(&a, &num);
        if e >= TOL {
            eprintln!("{}: analytic {:?} numeric {:?}", p.name, &a[..a.len().min(4)], &num[..num.len().min(4)]);
        }
        worst = worst.max(e);
        a_all.extend(a);
    }
    assert!(a_all.iter().any(|&g| g.abs() > 1e-8), "all sampled gradients vanish");
    worst
}

fn gauss(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::gaussian(&mut Rng::new(seed, 0), shape)
}

/// Records the worst relative error of `f` over all instances.
fn measure(out: &mut Vec<(String, f64)>, name: &str, f: impl Fn(u64) -> f64) {
    let worst = (0..INSTANCES).map(f).fold(0.0, f64::max);
    out.push((name.to_string(), worst));
}

fn matmul_family(out: &mut Vec<(String, f64)>) {
    measure(out, "matmul", |s| {
        check_inputs(&[gauss(s, &[3, 4]), gauss(s + 100, &[4, 5])], |_, v| project(v[0].matmul(v[1]).unwrap(), s))
    });
    measure(out, "matmul_nt", |s| {
        check_inputs(&[gauss(s, &[3, 4]), gauss(s + 100, &[5, 4])], |_, v| project(v[0].matmul_nt(v[1]).unwrap(), s))
    });
    measure(out, "transpose", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].transpose().unwrap(), s)));
    measure(out, "reshape", |s| {
        check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].reshape(vec![2, 6]).unwrap(), s))
    });
}

fn elementwise_binary(out: &mut Vec<(String, f64)>) {
    let shapes = [3usize, 4];
    measure(out, "add", |s| {
        check_inputs(&[gauss(s, &shapes), gauss(s + 1, &shapes)], |_, v| project(v[0].add(v[1]).unwrap(), s))
    });
    measure(out, "sub", |s| {
        check_inputs(&[gauss(s, &shapes), gauss(s + 1, &shapes)], |_, v| project(v[0].sub(v[1]).unwrap(), s))
    });
    measure(out, "mul", |s| {
        check_inputs(&[gauss(s, &shapes), gauss(s + 1, &shapes)], |_, v| project(v[0].mul(v[1]).unwrap(), s))
    });
    measure(out, "add_row", |s| {
        check_inputs(&[gauss(s, &shapes), gauss(s + 1, &[4])], |_, v| project(v[0].add_row(v[1]).unwrap(), s))
    });
}

fn scaling_and_reductions(out: &mut Vec<(String, f64)>) {
    measure(out, "scale", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].scale(-1.7), s)));
    measure(out, "scale_rows", |s| {
        check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].scale_rows(&[0.5, -2.0, 3.0]).unwrap(), s))
    });
    measure(out, "mask_rows", |s| {
        check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].mask_rows(&[true, false, true]).unwrap(), s))
    });
    measure(out, "sum", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| v[0].square().sum().scale(0.5)));
    measure(out, "mean", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| v[0].sin().mean()));
}

fn pointwise_unary(out: &mut Vec<(String, f64)>) {
    measure(out, "exp", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].exp(), s)));
    let pos = |s: u64| gauss(s, &[3, 4]).map(|x| x.abs() + 0.5);
    measure(out, "log", |s| check_inputs(&[pos(s)], |_, v| project(v[0].log(), s)));
    measure(out, "sin", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].sin(), s)));
    measure(out, "square", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].square(), s)));
    measure(out, "silu", |s| check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].silu(), s)));
    let away = |s: u64| gauss(s, &[3, 4]).map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    measure(out, "relu", |s| check_inputs(&[away(s)], |_, v| project(v[0].relu(), s)));
}

fn softmax_and_normalization(out: &mut Vec<(String, f64)>) {
    measure(out, "softmax", |s| check_inputs(&[gauss(s, &[3, 5])], |_, v| project(v[0].softmax_rows(None).unwrap(), s)));
    measure(out, "masked softmax", |s| {
        let mask = [true, false, true, true, false];
        check_inputs(&[gauss(s, &[3, 5])], |_, v| project(v[0].softmax_rows(Some(&mask)).unwrap(), s))
    });
    measure(out, "layer_norm", |s| {
        check_inputs(&[gauss(s, &[3, 6]), gauss(s + 1, &[6]), gauss(s + 2, &[6])], |_, v| {
            project(v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), s)
        })
    });
    measure(out, "snakebeta", |s| {
        check_inputs(
            &[gauss(s, &[4, 3]), gauss(s + 1, &[3]).scale(0.3), gauss(s + 2, &[3]).scale(0.3)],
            |_, v| project(v[0].snakebeta(v[1], v[2]).unwrap(), s),
        )
    });
}

fn convolution(out: &mut Vec<(String, f64)>) {
    for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
        measure(out, &format!("conv1d stride {stride} padding {padding}"), |s| {
            check_inputs(&[gauss(s, &[7, 3]), gauss(s + 1, &[4, 3, 3])], |_, v| {
                project(v[0].conv1d(v[1], stride, padding).unwrap(), s)
            })
        });
    }
    measure(out, "channel-first conv1d", |s| {
        check_inputs(&[gauss(s, &[3, 7]), gauss(s + 1, &[2, 3, 3])], |_, v| {
            project(flowsynth::tensor::conv1d(v[0], v[1], 1, 1).unwrap(), s)
        })
    });
}

fn indexing_ops(out: &mut Vec<(String, f64)>) {
    measure(out, "gather_rows", |s| {
        let idx = vec![Some(2), Some(0), None, Some(2), Some(1)];
        check_inputs(&[gauss(s, &[3, 4])], |_, v| project(v[0].gather_rows(idx.clone()).unwrap(), s))
    });
    measure(out, "slice rows", |s| {
        check_inputs(&[gauss(s, &[5, 4])], |_, v| project(v[0].slice(Axis::Rows, 1, 4).unwrap(), s))
    });
    measure(out, "slice cols", |s| {
        check_inputs(&[gauss(s, &[5, 4])], |_, v| project(v[0].slice(Axis::Cols, 2, 4).unwrap(), s))
    });
    measure(out, "concat rows", |s| {
        check_inputs(&[gauss(s, &[2, 4]), gauss(s + 1, &[3, 4])], |_, v| {
            project(Var::concat(&[v[0], v[1]], Axis::Rows).unwrap(), s)
        })
    });
    measure(out, "concat cols", |s| {
        check_inputs(&[gauss(s, &[3, 2]), gauss(s + 1, &[3, 5])], |_, v| {
            project(Var::concat(&[v[0], v[1]], Axis::Cols).unwrap(), s)
        })
    });
    measure(out, "rope", |s| {
        check_inputs(&[gauss(s, &[4, 6])], |_, v| project(v[0].rope(&[0, 3, 1, 7]).unwrap(), s))
    });
}

fn block_check(seed: u64, build: impl Fn(&mut ParamStore, &mut Rng) -> Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>, x_shape: &[usize]) -> f64 {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed, 3);
    let f = build(&mut store, &mut rng);
    randomize(&mut store, seed);
    let x = gauss(seed + 50, x_shape);
    let by_params = check_params(&store, 12, seed, |tape| project(f(tape, tape.constant(x.clone())), seed));
    let by_input = check_inputs_in(Some(&store), &[x], |tape, v| project(f(tape, v[0]), seed));
    by_params.max(by_input)
}

fn linear_norm_conv_snake_blocks(out: &mut Vec<(String, f64)>) {
    measure(out, "Linear", |s| {
        block_check(
            s,
            |st, r| {
                let l = Linear::new(st, "l", 4, 3, r);
                Box::new(move |t, x| l.forward(t, x).unwrap())
            },
            &[5, 4],
        )
    });
    measure(out, "LayerNorm", |s| {
        block_check(
            s,
            |st, _| {
                let l = LayerNorm::new(st, "n", 4);
                Box::new(move |t, x| l.forward(t, x).unwrap())
            },
            &[5, 4],
        )
    });
    measure(out, "SnakeBeta", |s| {
        block_check(
            s,
            |st, _| {
                let l = SnakeBeta::new(st, "s", 4);
                Box::new(move |t, x| l.forward(t, x).unwrap())
            },
            &[5, 4],
        )
    });
    measure(out, "Conv1d", |s| {
        block_check(
            s,
            |st, r| {
                let l = Conv1d::new(st, "c", 4, 3, 3, 2, 1, r);
                Box::new(move |t, x| l.forward(t, x).unwrap())
            },
            &[6, 4],
        )
    });
}

fn attention_and_transformer_blocks(out: &mut Vec<(String, f64)>) {
    let cfg = AttentionConfig {
        num_heads: 2,
        head_dim: 4,
        model_dim: 6,
    };
    let mask = [true, true, false, true, true];
    let pos = [0usize, 1, 2, 3, 4];
    measure(out, "MultiHeadAttention", |s| {
        let cfg = cfg.clone();
        block_check(
            s,
            move |st, r| {
                let a = MultiHeadAttention::new(st, "a", cfg.clone(), r).unwrap();
                Box::new(move |t, x| a.forward(t, x, &mask, Some(&pos)).unwrap())
            },
            &[5, 6],
        )
    });
    measure(out, "FeedForward", |s| {
        block_check(
            s,
            |st, r| {
                let f = FeedForward::new(st, "f", 6, 2, r);
                Box::new(move |t, x| f.forward(t, x).unwrap())
            },
            &[5, 6],
        )
    });
    measure(out, "TransformerBlock", |s| {
        let cfg = cfg.clone();
        block_check(
            s,
            move |st, r| {
                let b = TransformerBlock::new(st, "b", cfg.clone(), 2, r).unwrap();
                let e = st.add("emb", Tensor::gaussian(r, &[6]));
                Box::new(move |t, x| b.forward(t, x, Some(t.param(e)), &mask, None).unwrap())
            },
            &[5, 6],
        )
    });
    measure(out, "TimestepEmbedding", |s| {
        let mut store = ParamStore::new();
        let emb = TimestepEmbedding::new(&mut store, "t", 8, &mut Rng::new(s, 0));
        randomize(&mut store, s);
        let t = (s as f64 + 0.5) / INSTANCES as f64;
        check_params(&store, 12, s, |tape| project(emb.forward(tape, t).unwrap(), s))
    });
}

fn toy_unet() -> UNetConfig {
    UNetConfig {
        down_dims: vec![8, 12],
        mid_dims: vec![12],
        up_dims: vec![12, 8],
        heads: 2,
        head_dim: 4,
        ff_mult: 2,
        time_dim: 8,
        kernel: 3,
    }
}

fn text_encoder(out: &mut Vec<(String, f64)>) {
    let cfg = EncoderConfig {
        dim: 8,
        depth: 2,
        heads: 2,
        head_dim: 4,
        ff_mult: 2,
        duration_channels: 6,
        duration_kernel: 3,
    };
    measure(out, "TextEncoder", |s| {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, 6, 7, &mut Rng::new(s, 0)).unwrap();
        randomize(&mut store, s);
        let tokens = [1u32, 4, 0, 5];
        let mask = [true, true, true, false];
        // The duration head reads a detached copy of the hidden states, so
        // finite differences see it depend on every upstream parameter while
        // the gradient does not; check the two heads separately.
        let mu = check_params(&store, 6, s, |tape| project(enc.forward(tape, &tokens, &mask).unwrap().mu, s));
        let dur = check_params_where(
            &store,
            6,
            s,
            |name| name.starts_with("encoder.duration."),
            |tape| project(enc.forward(tape, &tokens, &mask).unwrap().log_durations, s + 1),
        );
        mu.max(dur)
    });
}

fn unet_decoder(out: &mut Vec<(String, f64)>) {
    let (d, t_len) = (7usize, 8usize);
    measure(out, "FlowDecoder", |s| {
        let mut store = ParamStore::new();
        let dec = FlowDecoder::new(&mut store, &toy_unet(), d, &mut Rng::new(s, 0)).unwrap();
        randomize(&mut store, s);
        let t = 0.05 + 0.9 * (s as f64) / INSTANCES as f64;
        let mask: Vec<bool> = (0..t_len).map(|i| i < t_len - 1).collect();
        let mu = gauss(s + 7, &[t_len, d]);
        let by_params = check_params(&store, 4, s, |tape| {
            project(dec.forward(tape, tape.constant(gauss(s, &[t_len, d])), t, tape.constant(mu.clone()), &mask).unwrap(), s)
        });
        let by_inputs = check_inputs_in(Some(&store), &[gauss(s, &[t_len, d]), mu.clone()], |tape, v| {
            project(dec.forward(tape, v[0], t, v[1], &mask).unwrap(), s)
        });
        by_params.max(by_inputs)
    });
}

fn losses_through_the_decoder(out: &mut Vec<(String, f64)>) {
    let (d, t_len) = (7usize, 8usize);
    measure(out, "otcfm and score-matching losses", |s| {
        let mut store = ParamStore::new();
        let dec = FlowDecoder::new(&mut store, &toy_unet(), d, &mut Rng::new(s, 0)).unwrap();
        randomize(&mut store, s);
        let x1 = JointFrameSequence::new(gauss(s + 1, &[t_len, d]), 4, 3, 10.0).unwrap();
        let x0 = gauss(s + 2, &[t_len, d]);
        let mu = gauss(s + 3, &[t_len, d]);
        let t = 0.1 + 0.08 * s as f64;
        let a = check_params(&store, 3, s, |tape| {
            otcfm_loss_at(tape, &x1, tape.constant(mu.clone()), &dec, &OtcfmConfig::default(), t, &x0).unwrap()
        });
        let b = check_params(&store, 3, s, |tape| {
            score_matching_loss_at(tape, &x1, tape.constant(mu.clone()), &dec, &ScoreMatchingConfig::default(), t, &x0)
                .unwrap()
        });
        a.max(b)
    });
    measure(out, "prior and duration losses", |s| {
        let x1 = gauss(s, &[5, 3]);
        let mask = [true, true, false, true, true];
        let a = check_inputs(&[gauss(s + 1, &[5, 3])], |_, v| prior_loss(v[0], &x1, &mask).unwrap());
        let b = check_inputs(&[gauss(s + 2, &[4])], |_, v| {
            duration_loss(v[0], &[1, 3, 2, 5], &[true, true, false, true]).unwrap()
        });
        a.max(b)
    });
}

/// Worst relative error of every check, by name.
pub fn run_all() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let groups: [fn(&mut Vec<(String, f64)>); 12] = [
        matmul_family,
        elementwise_binary,
        scaling_and_reductions,
        pointwise_unary,
        softmax_and_normalization,
        convolution,
        indexing_ops,
        linear_norm_conv_snake_blocks,
        attention_and_transformer_blocks,
        text_encoder,
        unet_decoder,
        losses_through_the_decoder,
    ];
    for g in groups {
        g(&mut out);
    }
    out
}
