//! Backbone, attention and fused-model contracts: shapes, parameter budgets,
//! determinism, batch equivariance and gradient reachability.

use dualfer::efficientvit::{build_efficientvit, CascadedGroupAttention, EfficientVitConfig, SandwichBlock};
use dualfer::fusion::{build_model, classify, extract_features, fuse_tensors, unfuse, Backbones, ModelConfig};
use dualfer::ops::{cross_entropy, BatchNormSpec};
use dualfer::params::{ParamBuilder, ParamStore};
use dualfer::shufflenet::{build_shufflenet, ShuffleNetConfig};
use dualfer::{Ctx, Mode, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn([n, 3, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k
}

fn bn(c: usize) -> usize {
    2 * c
}

/// Layer-by-layer parameter sum of the 1.0x ShuffleNet V2 feature extractor.
fn shufflenet_oracle() -> usize {
    let widths = [116, 232, 464];
    let repeats = [4, 8, 4];
    let mut total = conv(3, 24, 3, 1) + bn(24);
    let mut cin = 24;
    for (&out, &r) in widths.iter().zip(&repeats) {
        let mid = out / 2;
        // stride-2 unit: both branches see the full input
        total += conv(cin, mid, 1, 1) + bn(mid) + conv(mid, mid, 3, mid) + bn(mid) + conv(mid, mid, 1, 1) + bn(mid);
        total += conv(cin, cin, 3, cin) + bn(cin) + conv(cin, mid, 1, 1) + bn(mid);
        // stride-1 units transform half the channels
        total += (r - 1) * (conv(mid, mid, 1, 1) + bn(mid) + conv(mid, mid, 3, mid) + bn(mid) + conv(mid, mid, 1, 1) + bn(mid));
        cin = out;
    }
    total + conv(464, 1024, 1, 1) + bn(1024)
}

fn classifier_oracle(d: usize, k: usize) -> usize {
    (d * 384 + 384) + bn(384) + (384 * 128 + 128) + bn(128) + (128 * k + k)
}

fn within(value: usize, target: f64, tol: f64) -> bool {
    (value as f64 / target - 1.0).abs() <= tol
}

#[test]
fn shufflenet_shapes_and_parameters() {
    let mut net = build_shufflenet::<f32>(&ShuffleNetConfig::default(), 0).unwrap();
    let mut ctx = Ctx::new(&mut net.params, Mode::Eval, 0, false);
    let x = ctx.input(images(2, 224, 1));
    let (features, stages) = net.net.forward_with_stages(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(features), &[2, 1024]);
    let sizes: Vec<usize> = stages.iter().map(|&s| ctx.tape.shape(s)[2]).collect();
    assert_eq!(sizes, [28, 14, 7]);
    let count = ctx.params().count(false);
    assert_eq!(count, shufflenet_oracle());
    assert!(within(count, 1.27e6, 0.05), "bare extractor {count}");
    assert!(within(count + 1024 * 1000 + 1000, 2.3e6, 0.03));
}

#[test]
fn shufflenet_is_deterministic_on_zero_input() {
    let mut a = build_shufflenet::<f32>(&ShuffleNetConfig::default(), 9).unwrap();
    let mut b = build_shufflenet::<f32>(&ShuffleNetConfig::default(), 9).unwrap();
    let zeros = Tensor::zeros([1, 3, 224, 224]);
    let first = a.forward(&zeros, 0).unwrap();
    assert_eq!(first, a.forward(&zeros, 0).unwrap());
    assert_eq!(first, b.forward(&zeros, 0).unwrap());
}

#[test]
fn efficientvit_shapes_and_parameters() {
    let cfg = EfficientVitConfig::default();
    let mut net = build_efficientvit::<f32>(&cfg, 0).unwrap();
    let mut ctx = Ctx::new(&mut net.params, Mode::Eval, 0, false);
    let x = ctx.input(images(2, 224, 2));
    let tokens = net.net.embed(&mut ctx, x).unwrap();
    assert_eq!(&ctx.tape.shape(tokens)[2..], &[14, 14]);
    let (features, stages) = net.net.forward_with_stages(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(features), &[2, 192]);
    let res: Vec<usize> = stages.iter().map(|&s| ctx.tape.shape(s)[2]).collect();
    assert_eq!(res, cfg.resolutions());
    let count = ctx.params().count(false);
    assert!(within(count + 192 * 1000 + 1000, 4.2e6, 0.05), "{count}");
}

#[test]
fn backbones_are_batch_equivariant() {
    let x = images(3, 224, 3);
    let perm = [2usize, 0, 1];
    let permuted = Tensor::stack(&perm.map(|i| x.slice_batch(i, 1).unwrap().reshape([3, 224, 224]).unwrap())).unwrap();
    let mut model = build_model::<f32>(&ModelConfig::default(), 4).unwrap();
    model.set_mode(Mode::Eval);
    let (xa, ya, _) = extract_features(&mut model, &x, Mode::Eval).unwrap();
    let (xb, yb, _) = extract_features(&mut model, &permuted, Mode::Eval).unwrap();
    for (a, b) in [(xa.unwrap(), xb.unwrap()), (ya.unwrap(), yb.unwrap())] {
        let d = a.shape()[1];
        for (row, &src) in perm.iter().enumerate() {
            let (ra, rb) = (&a.data()[src * d..(src + 1) * d], &b.data()[row * d..(row + 1) * d]);
            let diff = ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
            assert!(diff <= 1e-5, "row {row}: {diff}");
        }
    }
}

#[test]
fn attention_preserves_shape_and_rows_are_distributions() {
    let cfg = EfficientVitConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let attn = CascadedGroupAttention::new(&mut ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default()), 128, 4, 16, 14, &cfg, 1.0).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval, 0, false);
    let x = ctx.input(Tensor::randn([1, 128, 14, 14], 1.0, &mut rng));
    let (y, maps) = attn.forward_with_maps(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[1, 128, 14, 14]);
    assert_eq!(maps.len(), 4);
    for m in &maps {
        for row in m.data().chunks(196) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

/// Direct single-head attention over the full channel set, written out with
/// explicit loops: 1x1 conv + BN to q/k/v, depthwise conv + BN on q,
/// softmax(q^T k * scale + bias) v, ReLU, 1x1 conv + BN projection.
fn single_head_oracle(store: &ParamStore<f64>, x: &Tensor<f64>, dim: usize, kd: usize, r: usize, qk: usize) -> Vec<f64> {
    let p = |name: &str| store.tensor(store.find(name).unwrap_or_else(|| panic!("{name}"))).data().to_vec();
    let l = r * r;
    let bn_eval = |v: &mut [f64], gamma: &[f64], beta: &[f64], c: usize| {
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        for ch in 0..c {
            for t in 0..l {
                v[ch * l + t] = v[ch * l + t] * s * gamma[ch] + beta[ch];
            }
        }
    };
    let pointwise = |w: &[f64], input: &[f64], cin: usize, cout: usize| -> Vec<f64> {
        let mut out = vec![0.0; cout * l];
        for o in 0..cout {
            for i in 0..cin {
                for t in 0..l {
                    out[o * l + t] += w[o * cin + i] * input[i * l + t];
                }
            }
        }
        out
    };
    let qkv_w = p("heads.0.qkv.conv.weight");
    let mut qkv = pointwise(&qkv_w, x.data(), dim, 2 * kd + dim);
    bn_eval(&mut qkv, &p("heads.0.qkv.bn.weight"), &p("heads.0.qkv.bn.bias"), 2 * kd + dim);
    let (q0, rest) = qkv.split_at(kd * l);
    let (k, v) = rest.split_at(kd * l);
    // depthwise conv with "same" zero padding
    let dw = p("heads.0.query_conv.conv.weight");
    let pad = qk / 2;
    let mut q = vec![0.0; kd * l];
    for c in 0..kd {
        for y in 0..r {
            for xx in 0..r {
                let mut acc = 0.0;
                for ky in 0..qk {
                    for kx in 0..qk {
                        let (iy, ix) = (y as isize + ky as isize - pad as isize, xx as isize + kx as isize - pad as isize);
                        if (0..r as isize).contains(&iy) && (0..r as isize).contains(&ix) {
                            acc += dw[(c * qk + ky) * qk + kx] * q0[c * l + iy as usize * r + ix as usize];
                        }
                    }
                }
                q[c * l + y * r + xx] = acc;
            }
        }
    }
    bn_eval(&mut q, &p("heads.0.query_conv.bn.weight"), &p("heads.0.query_conv.bn.bias"), kd);
    let bias = p("heads.0.attention_bias");
    let scale = 1.0 / (kd as f64).sqrt();
    let mut out = vec![0.0; dim * l];
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| (0..kd).map(|c| q[c * l + i] * k[c * l + j]).sum::<f64>() * scale + bias[i * l + j])
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dim {
            out[c * l + i] = (0..l).map(|j| e[j] / z * v[c * l + j]).sum::<f64>().max(0.0);
        }
    }
    let mut y = pointwise(&p("proj.conv.weight"), &out, dim, dim);
    bn_eval(&mut y, &p("proj.bn.weight"), &p("proj.bn.bias"), dim);
    y
}

#[test]
fn one_head_reduces_to_plain_self_attention() {
    let cfg = EfficientVitConfig::default();
    let (dim, kd, r) = (6, 4, 2);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let attn = CascadedGroupAttention::new(&mut ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default()), dim, 1, kd, r, &cfg, 1.0).unwrap();
    // non-trivial BN affine terms and bias table
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.param(id).name.clone();
        if name.contains(".bn.") || name.ends_with("attention_bias") {
            let shape = store.tensor(id).shape().to_vec();
            *store.tensor_mut(id) = Tensor::randn(shape, 0.5, &mut rng).map(|v| v + if name.ends_with("weight") { 1.0 } else { 0.0 });
        }
    }
    let x = Tensor::<f64>::randn([1, dim, r, r], 1.0, &mut rng);
    let want = single_head_oracle(&store, &x, dim, kd, r, cfg.query_kernel);
    let mut ctx = Ctx::new(&mut store, Mode::Eval, 0, false);
    let xv = ctx.input(x);
    let y = attn.forward(&mut ctx, xv).unwrap();
    for (a, b) in ctx.tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn head_shift(cascade: bool) -> Vec<f64> {
    let cfg = EfficientVitConfig {
        cascade,
        ..EfficientVitConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let attn = CascadedGroupAttention::new(&mut ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default()), 16, 4, 4, 3, &cfg, 1.0).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval, 0, false);
    let x = ctx.input(Tensor::randn([1, 16, 3, 3], 1.0, &mut rng));
    let plain = attn.head_outputs(&mut ctx, x, None, None).unwrap();
    let ablated = attn.head_outputs(&mut ctx, x, Some(0), None).unwrap();
    (1..4)
        .map(|i| ctx.tape.value(plain[i]).max_abs_diff(ctx.tape.value(ablated[i])).unwrap())
        .collect()
}

#[test]
fn cascade_carries_earlier_heads_into_later_ones() {
    assert!(head_shift(true).iter().all(|&d| d > 1e-6), "{:?}", head_shift(true));
    assert!(head_shift(false).iter().all(|&d| d == 0.0));
}

#[test]
fn sandwich_block_starts_as_identity() {
    let cfg = EfficientVitConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let block = SandwichBlock::new(&mut ParamBuilder::new(&mut store, &mut rng, BatchNormSpec::default()), 64, 4, 14, &cfg).unwrap();
    let x = Tensor::randn([1, 64, 14, 14], 1.0, &mut rng);
    for mode in [Mode::Eval, Mode::Train] {
        let mut ctx = Ctx::new(&mut store, mode, 0, false);
        let xv = ctx.input(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.value(y), &x);
    }
}

#[test]
fn fusion_contract() {
    let x = Tensor::new([1, 2], vec![1.0f32, 2.0]).unwrap();
    let y = Tensor::new([1, 3], vec![3.0f32, 4.0, 5.0]).unwrap();
    assert_eq!(fuse_tensors(&x, &y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let z = fuse_tensors(&Tensor::<f32>::zeros([1, 1024]), &Tensor::zeros([1, 192])).unwrap();
    assert_eq!(z.shape(), &[1, 1216]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert_eq!(ModelConfig::default().feature_dim(), 1216);
}

#[test]
fn fused_model_budget_and_heads() {
    for k in [6, 7] {
        let mut model = build_model::<f32>(&ModelConfig::with_classes(k), 0).unwrap();
        let total = model.count_params(false);
        let head = model.params.count_prefix("classifier.", false);
        assert_eq!(head, classifier_oracle(1216, k));
        assert_eq!(model.params.count_prefix("shufflenet.", false), shufflenet_oracle());
        if k == 6 {
            assert!(within(total, 5.9e6, 0.03), "{total}");
        }
        model.set_mode(Mode::Eval);
        let x = images(2, 224, 10);
        let a = model.forward(&x, 0).unwrap();
        assert_eq!(a.shape(), &[2, k]);
        assert_eq!(a, model.forward(&x, 99).unwrap());
    }
}

#[test]
fn fused_features_split_back_exactly() {
    let mut model = build_model::<f32>(&ModelConfig::default(), 1).unwrap();
    let (x, y, z) = extract_features(&mut model, &images(2, 224, 11), Mode::Eval).unwrap();
    let (x, y) = (x.unwrap(), y.unwrap());
    assert_eq!(z.shape(), &[2, 1216]);
    let (x2, y2) = unfuse(&z, 1024).unwrap();
    assert_eq!(x2, x);
    assert_eq!(y2, y);

    // with Y zeroed the head still produces finite logits that follow X
    let zero_y = fuse_tensors(&x, &Tensor::zeros([2, 192])).unwrap();
    let a = classify(&mut model, &zero_y, Mode::Eval, 0).unwrap();
    assert!(a.is_finite());
    let shifted = fuse_tensors(&x.map(|v| v + 1.0), &Tensor::zeros([2, 192])).unwrap();
    assert_ne!(a, classify(&mut model, &shifted, Mode::Eval, 0).unwrap());
}

#[test]
fn gradients_reach_both_backbones() {
    let mut model = build_model::<f32>(&ModelConfig::default(), 2).unwrap();
    model.set_mode(Mode::Train);
    let (net, mut ctx) = model.session(0);
    let x = ctx.input(images(2, 224, 12));
    let logits = net.forward(&mut ctx, x).unwrap();
    let loss = cross_entropy(&mut ctx.tape, logits, &[0, 3]).unwrap();
    let grads = ctx.backward(loss).unwrap();
    let reached = |prefix: &str| {
        grads
            .iter()
            .any(|(id, g)| ctx.params().param(id).name.starts_with(prefix) && g.data().iter().any(|&v| v != 0.0))
    };
    assert!(reached("shufflenet."));
    assert!(reached("efficientvit."));
    assert!(reached("classifier."));
}

#[test]
fn single_backbone_variants() {
    for (b, d) in [(Backbones::ShuffleNet, 1024), (Backbones::EfficientVit, 192)] {
        let cfg = ModelConfig {
            backbones: b,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.feature_dim(), d);
        let mut model = build_model::<f32>(&cfg, 0).unwrap();
        let (x, y, z) = extract_features(&mut model, &images(1, 224, 13), Mode::Eval).unwrap();
        assert_eq!(z.shape(), &[1, d]);
        assert_eq!(x.is_some(), b == Backbones::ShuffleNet);
        assert_eq!(y.is_some(), b == Backbones::EfficientVit);
    }
}
