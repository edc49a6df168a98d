use da3_core::{
    extract_heatmap, obs_batch, scaled_dot_attention, Algo, AttentionRecord, CoreError, HeadKind, LoopMode, Model,
    NetConfig, Pass, Reduce, Trunk,
};
use da3_gridworld::Observation;
use da3_tensor::{Graph, NodeId, ParamNodes, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_obs(r: &mut ChaCha8Rng, channels: usize, size: usize) -> Observation {
    let per = size * size;
    let data = (0..channels * per)
        .map(|i| {
            if i / per == channels - 1 {
                -(r.gen_range(0..2) as i8)
            } else {
                r.gen_range(0..2) as i8
            }
        })
        .collect();
    Observation::from_data(channels, size, data).unwrap()
}

fn tiny(head: HeadKind) -> NetConfig {
    let algo = match head {
        HeadKind::Dqn => Algo::Da3Dqn,
        HeadKind::Iqn => Algo::Da3Iqn,
    };
    NetConfig::for_algo(algo, 3, 5).with_width(8, 2)
}

fn set(params: &mut Params, name: &str, f: impl Fn(usize) -> f64) {
    let i = params.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (k, v) in params.get_mut(i).data_mut().iter_mut().enumerate() {
        *v = f(k);
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Scalar `sum(q * w)` with a fixed random weighting of the head output.
fn weighted_q(
    model: &Model,
    g: &mut Graph,
    nodes: &ParamNodes,
    x: &Tensor,
    taus: Option<&Tensor>,
    pass: Pass,
    w: &Tensor,
) -> NodeId {
    let obs = g.constant(x.clone());
    let q = model.forward(g, nodes, obs, taus, pass).unwrap().q;
    let w = g.constant(w.clone());
    let prod = g.mul(q, w).unwrap();
    g.sum(prod)
}

/// Max relative error between backprop and central differences over every
/// parameter entry.
fn full_model_gradcheck(config: NetConfig, pass: Pass, seed: u64) -> (f64, Vec<String>) {
    let mut r = rng(seed);
    let model = Model::new(config.clone(), &mut r).unwrap();
    let obs: Vec<Observation> = (0..2)
        .map(|_| random_obs(&mut r, config.channels, config.size))
        .collect();
    let x = obs_batch(&obs).unwrap();
    let taus = (config.head == HeadKind::Iqn).then(|| Tensor::from_fn(&[2, 3], |_| r.gen_range(0.05..0.95)));
    let out_shape: Vec<usize> = match config.head {
        HeadKind::Dqn => vec![2, 4],
        HeadKind::Iqn => vec![2, 3, 4],
    };
    let w = Tensor::from_fn(&out_shape, |_| r.gen_range(-1.0..1.0));

    let mut g = Graph::new();
    let nodes = model.params().bind(&mut g, true);
    let loss = weighted_q(&model, &mut g, &nodes, &x, taus.as_ref(), pass, &w);
    g.backward(loss).unwrap();

    let value = |p: &Params| {
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, false);
        let l = weighted_q(&model, &mut g, &nodes, &x, taus.as_ref(), pass, &w);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    let mut probe = model.params().clone();
    for i in 0..probe.len() {
        names.push(probe.name(i).to_string());
        let analytic = g
            .grad(nodes[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; probe.get(i).numel()]);
        for k in 0..probe.get(i).numel() {
            let orig = probe.get(i).data()[k];
            probe.get_mut(i).data_mut()[k] = orig + h;
            let up = value(&probe);
            probe.get_mut(i).data_mut()[k] = orig - h;
            let down = value(&probe);
            probe.get_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    (worst, names)
}

#[test]
fn tiny_dqn_model_gradients_match_finite_differences() {
    for pass in [Pass::Pruned, Pass::Full] {
        let (err, names) = full_model_gradcheck(tiny(HeadKind::Dqn), pass, 11);
        assert!(names.iter().any(|n| n == "saliency") && names.iter().any(|n| n == "pos"));
        assert!(err < 1e-4, "{pass:?}: max relative error {err:e}");
    }
}

#[test]
fn tiny_iqn_model_gradients_match_finite_differences() {
    let (err, _) = full_model_gradcheck(tiny(HeadKind::Iqn), Pass::Pruned, 12);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn stacked_two_loop_gradients_match_finite_differences() {
    let mut cfg = tiny(HeadKind::Dqn);
    cfg.loops = 2;
    cfg.loop_mode = LoopMode::Stacked;
    let (err, names) = full_model_gradcheck(cfg.clone(), Pass::Pruned, 13);
    assert!(names.iter().any(|n| n.starts_with("block1.")));
    assert!(err < 1e-4, "max relative error {err:e}");
    cfg.loop_mode = LoopMode::Shared;
    let (err, names) = full_model_gradcheck(cfg, Pass::Pruned, 14);
    assert!(!names.iter().any(|n| n.starts_with("block1.")));
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn baseline_gradients_match_finite_differences() {
    for algo in [Algo::Dqn, Algo::Iqn] {
        let mut cfg = NetConfig::for_algo(algo, 3, 5);
        cfg.conv_features = 8;
        cfg.head_hidden = if algo == Algo::Iqn { 8 } else { 0 };
        cfg.cos_basis = 8;
        let (err, _) = full_model_gradcheck(cfg, Pass::Pruned, 15);
        assert!(err < 1e-4, "{algo}: max relative error {err:e}");
    }
}

#[test]
fn pruned_and_full_passes_agree() {
    let mut r = rng(3);
    for loops in [1, 2] {
        let mut cfg = NetConfig::for_algo(Algo::Da3Iqn, 3, 7).with_width(16, 4);
        cfg.loops = loops;
        let model = Model::new(cfg, &mut r).unwrap();
        let obs: Vec<Observation> = (0..3).map(|_| random_obs(&mut r, 3, 7)).collect();
        let x = obs_batch(&obs).unwrap();
        let taus = Tensor::from_fn(&[3, 5], |_| r.gen_range(0.01..0.99));
        let mut q = Vec::new();
        for pass in [Pass::Pruned, Pass::Full] {
            let mut g = Graph::new();
            let nodes = model.params().bind(&mut g, false);
            let o = g.constant(x.clone());
            let f = model.forward(&mut g, &nodes, o, Some(&taus), pass).unwrap();
            q.push(g.value(f.q).clone());
        }
        assert!(q[0].max_abs_diff(&q[1]) < 1e-12);
    }
}

fn m3(rows: &[&[f64]]) -> Tensor {
    let t = Tensor::from_rows(rows).unwrap();
    let shape = [1, t.rows(), t.cols()];
    t.reshape(&shape).unwrap()
}

#[test]
fn attention_examples() {
    let mut g = Graph::new();
    // zero queries: uniform weights, output is the column mean of V
    let q = g.constant(Tensor::zeros(&[1, 3, 2]));
    let k = g.constant(m3(&[&[1.0, 2.0], &[-1.0, 0.5], &[3.0, -2.0]]));
    let v = g.constant(m3(&[&[1.0, 4.0], &[2.0, 5.0], &[6.0, 0.0]]));
    let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
    assert!(g.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    for row in g.value(out).data().chunks(2) {
        assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 3.0).abs() < 1e-12);
    }

    let q = g.constant(m3(&[&[0.7, -0.3]]));
    let k = g.constant(m3(&[&[0.1, 0.9]]));
    let v = g.constant(m3(&[&[2.5, -1.5, 0.25]]));
    let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
    assert_eq!(g.value(w).data(), &[1.0]);
    assert_eq!(g.value(out).data(), &[2.5, -1.5, 0.25]);

    let q = g.constant(m3(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let k = g.constant(m3(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let v = g.constant(m3(&[&[1.0], &[0.0]]));
    let (_, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let w0 = s.exp() / (s.exp() + 1.0);
    let row = &g.value(w).data()[..2];
    assert!((row[0] - w0).abs() < 1e-12 && (row[1] - (1.0 - w0)).abs() < 1e-12);
    assert!((row[0] - 0.6698).abs() < 1e-4 && (row[1] - 0.3302).abs() < 1e-4);

    let q = g.constant(Tensor::zeros(&[1, 2, 0]));
    let k = g.constant(Tensor::zeros(&[1, 2, 0]));
    let v = g.constant(Tensor::zeros(&[1, 2, 1]));
    assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - m) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Loop-based pre-norm block: multi-head attention with residual, then a
/// GELU feed-forward with residual.
fn oracle_block(tokens: &[Vec<f64>], p: &Params, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let get = |n: &str| p.by_name(&format!("block0.{n}")).unwrap().data().to_vec();
    let c = tokens[0].len();
    let dk = c / heads;
    let t = tokens.len();
    let y: Vec<Vec<f64>> = tokens
        .iter()
        .map(|x| layer_norm(x, &get("ln1.gain"), &get("ln1.bias")))
        .collect();
    let proj = |w: &[f64]| -> Vec<Vec<f64>> { y.iter().map(|r| matvec(r, w, c)).collect() };
    let (q, k, v) = (proj(&get("attn.wq")), proj(&get("attn.wk")), proj(&get("attn.wv")));
    let mut concat = vec![vec![0.0; c]; t];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut wh = Vec::new();
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let row: Vec<f64> = e.iter().map(|x| x / z).collect();
            for d in cols.clone() {
                concat[i][d] = (0..t).map(|j| row[j] * v[j][d]).sum();
            }
            wh.push(row);
        }
        weights.push(wh);
    }
    let wo = get("attn.wo");
    let ff = get("ff.w1").len() / c;
    let out = (0..t)
        .map(|i| {
            let att = matvec(&concat[i], &wo, c);
            let x1: Vec<f64> = tokens[i].iter().zip(&att).map(|(a, b)| a + b).collect();
            let z = layer_norm(&x1, &get("ln2.gain"), &get("ln2.bias"));
            let hdn: Vec<f64> = matvec(&z, &get("ff.w1"), ff)
                .iter()
                .zip(get("ff.b1"))
                .map(|(a, b)| gelu(a + b))
                .collect();
            let f = matvec(&hdn, &get("ff.w2"), c);
            x1.iter()
                .zip(f)
                .zip(get("ff.b2"))
                .map(|((a, b), bb)| a + b + bb)
                .collect()
        })
        .collect();
    (out, weights)
}

#[test]
fn encoder_block_matches_loop_oracle() {
    let mut r = rng(21);
    for heads in [1, 2, 4] {
        let cfg = NetConfig::for_algo(Algo::Da3Dqn, 3, 3).with_width(8, heads);
        let mut model = Model::new(cfg, &mut r).unwrap();
        for name in [
            "block0.ln1.gain",
            "block0.ln1.bias",
            "block0.ln2.gain",
            "block0.ln2.bias",
            "block0.ff.b1",
            "block0.ff.b2",
        ] {
            let vals: Vec<f64> = (0..64).map(|_| r.gen_range(-0.5..1.5)).collect();
            set(model.params_mut(), name, |k| vals[k]);
        }
        let tokens: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..8).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let (expect, expect_w) = oracle_block(&tokens, model.params(), heads);
        let mut g = Graph::new();
        let nodes = model.params().bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, 10, 8], tokens.concat()).unwrap());
        let (out, att) = model.encode(&mut g, &nodes, x, Pass::Full).unwrap();
        let got = g.value(out).data();
        for (a, b) in got.iter().zip(expect.concat()) {
            assert!((a - b).abs() < 1e-12, "h={heads}: {a} vs {b}");
        }
        let w = g.value(att[0]);
        assert_eq!(w.shape(), &[1, heads, 10, 10]);
        for (a, b) in w.data().iter().zip(expect_w.concat().concat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn per_head_projections_have_head_width() {
    let mut r = rng(4);
    let model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7), &mut r).unwrap();
    let obs = random_obs(&mut r, 3, 7);
    let mut g = Graph::new();
    let nodes = model.params().bind(&mut g, false);
    let x = g.constant(obs_batch([&obs]).unwrap());
    let tokens = model.embed(&mut g, &nodes, x).unwrap();
    let wq = nodes[model.params().index_of("block0.attn.wq").unwrap()];
    let q = g.linear(tokens, wq, None).unwrap();
    let q = g.split_heads(q, 4).unwrap();
    assert_eq!(g.shape(q), &[1, 4, 50, 16]);
    let (_, record) = model.attend(&obs, None).unwrap();
    assert_eq!(record.heads(), 4);
    assert_eq!(record.tokens, 50);
    assert!(record.layers[0].iter().all(|m| m.len() == 50 * 50));
}

#[test]
fn embedding_shapes_and_zero_input() {
    let mut r = rng(5);
    for (size, tokens) in [(7, 50), (9, 82)] {
        let model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, size), &mut r).unwrap();
        let mut g = Graph::new();
        let nodes = model.params().bind(&mut g, false);
        let x = g.constant(obs_batch([&random_obs(&mut r, 3, size)]).unwrap());
        let e = model.embed(&mut g, &nodes, x).unwrap();
        assert_eq!(g.shape(e), &[1, tokens, 64]);
    }

    let mut model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7), &mut r).unwrap();
    set(model.params_mut(), "pos", |_| 0.0);
    let bias: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
    set(model.params_mut(), "embed.bias", |k| bias[k]);
    let mut g = Graph::new();
    let nodes = model.params().bind(&mut g, false);
    let x = g.constant(obs_batch([&Observation::zeros(3, 7)]).unwrap());
    let e = model.embed(&mut g, &nodes, x).unwrap();
    let rows: Vec<&[f64]> = g.value(e).data().chunks(64).collect();
    assert_eq!(rows[0], model.params().by_name("saliency").unwrap().data());
    assert!(rows[1..].iter().all(|row| *row == bias.as_slice()));

    let x = g.constant(obs_batch([&Observation::zeros(3, 5)]).unwrap());
    assert!(matches!(
        model.embed(&mut g, &nodes, x),
        Err(CoreError::InputMismatch { .. })
    ));
}

#[test]
fn zero_block_is_identity() {
    let mut r = rng(6);
    let mut model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7).with_width(16, 4), &mut r).unwrap();
    for w in [
        "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
    ] {
        set(model.params_mut(), &format!("block0.{w}"), |_| 0.0);
    }
    let input = Tensor::from_fn(&[2, 50, 16], |_| r.gen_range(-3.0..3.0));
    let mut g = Graph::new();
    let nodes = model.params().bind(&mut g, false);
    let x = g.constant(input.clone());
    let (out, _) = model.encode(&mut g, &nodes, x, Pass::Full).unwrap();
    assert_eq!(g.value(out), &input);
}

#[test]
fn captured_rows_are_stochastic() {
    let mut r = rng(7);
    let mut cfg = NetConfig::for_algo(Algo::Da3Dqn, 3, 7).with_width(16, 4);
    cfg.loops = 2;
    cfg.loop_mode = LoopMode::Stacked;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let model = Model::new(cfg.clone(), &mut r).unwrap();
        let (_, record) = model.attend(&random_obs(&mut r, 3, 7), None).unwrap();
        assert_eq!(record.layers.len(), 2);
        assert!(record.layers.iter().flatten().flatten().all(|&w| w >= 0.0));
        worst = worst.max(record.max_row_sum_error());
    }
    assert!(worst < 1e-9, "{worst:e}");
}

fn permute_tokens(t: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c) = (t.shape()[1], t.shape()[2]);
    let mut out = t.data().to_vec();
    for i in 1..n {
        let src = perm[i - 1] + 1;
        out[i * c..(i + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
    }
    Tensor::new(vec![1, n, c], out).unwrap()
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let mut r = rng(8);
    let mut model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 5).with_width(16, 4), &mut r).unwrap();
    set(model.params_mut(), "pos", |_| 0.0);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.reverse();
    perm.swap(3, 17);
    let obs = random_obs(&mut r, 3, 5);
    let run = |m: &Model, input: Option<&Tensor>| -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let nodes = m.params().bind(&mut g, false);
        let x = g.constant(obs_batch([&obs]).unwrap());
        let e = m.embed(&mut g, &nodes, x).unwrap();
        let tokens = match input {
            Some(t) => g.constant(t.clone()),
            None => e,
        };
        let (out, _) = m.encode(&mut g, &nodes, tokens, Pass::Full).unwrap();
        (g.value(e).clone(), g.value(out).clone())
    };
    let (tokens, out) = run(&model, None);
    let (_, permuted_out) = run(&model, Some(&permute_tokens(&tokens, &perm)));
    assert!(permute_tokens(&out, &perm).max_abs_diff(&permuted_out) < 1e-12);

    // With position embeddings, permuting the observation's cells moves the
    // content but not the positions, so equivariance breaks.
    let model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 5).with_width(16, 4), &mut r).unwrap();
    let mut shuffled = Observation::zeros(3, 5);
    for c in 0..3 {
        for cell in 0..25 {
            let src = perm[cell];
            shuffled.set(c, cell / 5, cell % 5, obs.get(c, src / 5, src % 5));
        }
    }
    let encode = |o: &Observation| {
        let mut g = Graph::new();
        let nodes = model.params().bind(&mut g, false);
        let x = g.constant(obs_batch([o]).unwrap());
        let e = model.embed(&mut g, &nodes, x).unwrap();
        let (out, _) = model.encode(&mut g, &nodes, e, Pass::Full).unwrap();
        g.value(out).clone()
    };
    let a = encode(&obs);
    let b = encode(&shuffled);
    assert!(permute_tokens(&a, &perm).max_abs_diff(&b) > 1e-6);
}

#[test]
fn head_reads_only_the_saliency_token() {
    let mut r = rng(9);
    let model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7).with_width(16, 4), &mut r).unwrap();
    let x = obs_batch([&random_obs(&mut r, 3, 7), &random_obs(&mut r, 3, 7)]).unwrap();
    let mut g = Graph::new();
    let nodes = model.params().bind(&mut g, false);
    let obs = g.constant(x);
    let fwd = model.forward(&mut g, &nodes, obs, None, Pass::Full).unwrap();
    let tokens = g.value(fwd.tokens.unwrap()).clone();

    let head = |g: &mut Graph, tokens: NodeId| {
        let first = g.select_token(tokens, 0).unwrap();
        let gain = nodes[model.params().index_of("norm.gain").unwrap()];
        let bias = nodes[model.params().index_of("norm.bias").unwrap()];
        let f = g.layer_norm(first, gain, bias).unwrap();
        model.head_forward(g, &nodes, f, None).unwrap()
    };
    let leaf = g.param(tokens.clone());
    let q = head(&mut g, leaf);
    assert!(g.value(q).max_abs_diff(g.value(fwd.q)) < 1e-12);
    let loss = g.sum(q);
    g.backward(loss).unwrap();
    let grad = g.grad(leaf).unwrap();
    let c = 16;
    for b in 0..2 {
        let rows = &grad[b * 50 * c..(b + 1) * 50 * c];
        assert!(rows[..c].iter().any(|v| *v != 0.0));
        assert!(rows[c..].iter().all(|v| *v == 0.0));
    }

    let mut zeroed = tokens.clone();
    for b in 0..2 {
        zeroed.data_mut()[b * 50 * c..b * 50 * c + c].fill(0.0);
    }
    let z = g.constant(zeroed);
    let q0 = head(&mut g, z);
    assert!(g.value(q0).max_abs_diff(g.value(fwd.q)) > 1e-6);
}

#[test]
fn head_output_contracts() {
    let mut r = rng(10);
    for algo in Algo::ALL {
        let model = Model::new(NetConfig::for_algo(algo, 3, 7), &mut r).unwrap();
        let x = obs_batch([&random_obs(&mut r, 3, 7)]).unwrap();
        match algo.head() {
            HeadKind::Dqn => assert_eq!(model.q_values(&x, None).unwrap().shape(), &[1, 4]),
            HeadKind::Iqn => {
                assert!(matches!(model.q_values(&x, None), Err(CoreError::MissingQuantiles)));
                let taus = Tensor::new(vec![1, 3], vec![0.3, 0.7, 0.3]).unwrap();
                let q = model.q_values(&x, Some(&taus)).unwrap();
                assert_eq!(q.shape(), &[1, 3, 4]);
                assert_eq!(q.data()[..4], q.data()[8..]);
                assert_ne!(q.data()[..4], q.data()[4..8]);
                let bad = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
                assert!(matches!(model.q_values(&x, Some(&bad)), Err(CoreError::BadQuantile(_))));
            }
        }
    }
}

#[test]
fn dueling_ignores_constant_advantage_shift() {
    let mut r = rng(11);
    for algo in [Algo::Da3Iqn, Algo::Iqn] {
        let mut model = Model::new(NetConfig::for_algo(algo, 3, 7), &mut r).unwrap();
        let x = obs_batch([&random_obs(&mut r, 3, 7), &random_obs(&mut r, 3, 7)]).unwrap();
        let taus = Tensor::from_fn(&[2, 4], |_| r.gen_range(0.01..0.99));
        let before = model.q_values(&x, Some(&taus)).unwrap();
        let i = model.params().index_of("head.adv.b").unwrap();
        model
            .params_mut()
            .get_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b += 3.75);
        let after = model.q_values(&x, Some(&taus)).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-10);
    }
}

#[test]
fn vanilla_dqn_is_conv_without_dueling() {
    let mut r = rng(12);
    let model = Model::new(NetConfig::for_algo(Algo::Dqn, 3, 7), &mut r).unwrap();
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        [
            "conv1.kernels",
            "conv1.bias",
            "conv2.kernels",
            "conv2.bias",
            "fc.w",
            "fc.b",
            "head.out.w",
            "head.out.b"
        ]
    );
    // 16*3*9+16 + 32*16*9+32 + 32*64+64 + 64*4+4
    assert_eq!(model.params().num_scalars(), 448 + 4640 + 2112 + 260);
    let iqn = Model::new(NetConfig::for_algo(Algo::Iqn, 3, 7), &mut r).unwrap();
    assert!(iqn.params().index_of("head.value.w").is_some());
}

#[test]
fn parameter_report_covers_every_architecture() {
    let mut r = rng(13);
    for algo in Algo::ALL {
        let model = Model::new(NetConfig::for_algo(algo, 8, 7), &mut r).unwrap();
        let report = model.param_report();
        assert!(!report.is_empty());
        assert_eq!(
            report.iter().map(|(_, n)| n).sum::<usize>(),
            model.params().num_scalars()
        );
        if algo.trunk() == Trunk::Da3 {
            let embed = report.iter().find(|(g, _)| g == "embed").unwrap().1;
            assert_eq!(embed, 64 * 8 + 64);
        }
    }
}

#[test]
fn heatmap_reduction_and_slices() {
    let row: Vec<f64> = vec![0.1, 0.2, 0.05, 0.15, 0.3, 0.0, 0.1, 0.05, 0.05, 0.0];
    let mut m = vec![0.0; 100];
    m[..10].copy_from_slice(&row);
    let record = AttentionRecord {
        tokens: 10,
        grid: 3,
        layers: vec![vec![m.clone(), m.clone(), m.clone()]],
    };
    let mean = extract_heatmap(&record, Reduce::Mean);
    assert_eq!(mean.len(), 1);
    for (a, b) in mean[0].iter().zip(&row[1..]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(extract_heatmap(&record, Reduce::PerHead), vec![row[1..].to_vec(); 3]);

    let mut r = rng(14);
    let model = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7), &mut r).unwrap();
    let obs = random_obs(&mut r, 3, 7);
    let (_, rec) = model.attend(&obs, None).unwrap();
    for (h, grid) in extract_heatmap(&rec, Reduce::PerHead).iter().enumerate() {
        assert_eq!(grid.len(), 49);
        assert!(grid.iter().all(|w| (0.0..=1.0).contains(w)));
        let self_weight = rec.saliency_row(h)[0];
        assert!((grid.iter().sum::<f64>() - (1.0 - self_weight)).abs() < 1e-12);
    }
    let (_, again) = model.attend(&obs, None).unwrap();
    let bits = |r: &AttentionRecord| -> Vec<u64> {
        extract_heatmap(r, Reduce::Mean)[0]
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&rec), bits(&again));
}

#[test]
fn from_params_rejects_foreign_layouts() {
    let mut r = rng(15);
    let a = Model::new(NetConfig::for_algo(Algo::Da3Dqn, 3, 7), &mut r).unwrap();
    let b = Model::from_params(a.config().clone(), a.params().clone()).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert!(Model::from_params(NetConfig::for_algo(Algo::Da3Dqn, 3, 9), a.params().clone()).is_err());
    assert!(Model::from_params(NetConfig::for_algo(Algo::Dqn, 3, 7), a.into_params()).is_err());
}
