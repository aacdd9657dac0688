use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = Normal::new(0.0f32, 1.0).unwrap();
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| n.sample(&mut r)).collect()).unwrap()
}

fn logits(net: &Network<f32>, x: &Tensor<f32>, masks: Option<&[Vec<f32>]>, mode: Mode) -> Vec<f32> {
    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let mask_vars: Option<Vec<Var>> = masks.map(|ms| {
        ms.iter()
            .map(|m| tape.constant(&[m.len()], m.clone()).unwrap())
            .collect()
    });
    let out = net.forward(&mut tape, input, mask_vars.as_deref(), mode, false).unwrap();
    tape.value(out.logits).to_vec()
}

fn ones(spec: &ArchitectureSpec) -> Vec<Vec<f32>> {
    spec.sites.iter().map(|s| vec![1.0; s.len]).collect()
}

/// Closed-form FLOPs of a three-stage basic-block residual net with
/// projection shortcuts on reduction blocks.
fn resnet_flops_closed_form(n: u64, w: [u64; 3], c_in: u64, size: u64, classes: u64) -> u64 {
    let mut total = size * size * 9 * c_in * w[0];
    let mut prev = w[0];
    let mut s = size;
    for (stage, &width) in w.iter().enumerate() {
        if stage > 0 {
            s /= 2;
        }
        let plane = s * s;
        let first = plane * 9 * prev * width;
        let rest = (2 * n - 1) * plane * 9 * width * width;
        let proj = if prev != width || stage > 0 { plane * prev * width } else { 0 };
        total += first + rest + proj;
        prev = width;
    }
    total + prev * classes
}

#[test]
fn resnet20_structure() {
    let spec = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
    let convs = spec.main_path_convs();
    assert_eq!(convs.len(), 19);
    assert_eq!(spec.num_sites(), 18);
    let widths: Vec<usize> = convs.iter().map(|&l| spec.layers[l].c_out).collect();
    assert_eq!(&widths[..7], &[16; 7]);
    assert_eq!(&widths[7..13], &[32; 6]);
    assert_eq!(&widths[13..], &[64; 6]);
    assert!(spec.layers[convs[0]].out_site.is_none());
    // Identity-shortcut blocks whose input is itself masked.
    assert_eq!(spec.residual_pairs.len(), 6);
    for &(a, b) in &spec.residual_pairs {
        assert_eq!(spec.sites[a].len, spec.sites[b].len);
    }
}

#[test]
fn resnet8_has_three_blocks() {
    let spec = build_resnet(8, [16, 32, 64], 10, [3, 32, 32]).unwrap();
    let blocks = spec.blocks.iter().filter(|b| matches!(b, Block::Residual { .. })).count();
    assert_eq!(blocks, 3);
    assert_eq!(spec.num_sites(), 6);
}

#[test]
fn resnet_rejects_bad_depth() {
    for d in [0, 7, 9, 19, 21] {
        assert!(matches!(build_resnet(d, [16, 32, 64], 10, [3, 32, 32]), Err(Error::Architecture(_))));
    }
}

#[test]
fn resnet_flops_match_closed_form() {
    for (depth, n) in [(8u64, 1u64), (20, 3), (56, 9), (110, 18)] {
        let spec = build_resnet(depth as usize, [16, 32, 64], 10, [3, 32, 32]).unwrap();
        assert_eq!(spec.total_flops(), resnet_flops_closed_form(n, [16, 32, 64], 3, 32, 10), "depth {depth}");
    }
    let small = build_resnet(14, [8, 16, 32], 10, [1, 16, 16]).unwrap();
    assert_eq!(small.total_flops(), resnet_flops_closed_form(2, [8, 16, 32], 1, 16, 10));
}

#[test]
fn resnet20_parameter_count() {
    let spec = build_resnet(20, [16, 32, 64], 10, [3, 32, 32]).unwrap();
    // stem + 18 block convs + 2 projections, BN (2 per channel), linear.
    let convs = 3 * 9 * 16 + 16 * (2 * 3 * 9 * 16 * 16) / 16 + 9 * 16 * 32 + 5 * 9 * 32 * 32 + 9 * 32 * 64 + 5 * 9 * 64 * 64;
    let proj = 16 * 32 + 32 * 64;
    let bn = 2 * (16 + 6 * 16 + 6 * 32 + 6 * 64 + 32 + 64);
    let linear = 64 * 10 + 10;
    assert_eq!(spec.num_parameters(), convs + proj + bn + linear);
    let net = Network::<f32>::init(spec.clone(), &mut rng(0)).unwrap();
    let trainable: usize = net
        .params
        .iter()
        .filter(|p| p.tensor.requires_grad)
        .map(|p| p.tensor.numel())
        .sum();
    assert_eq!(trainable, spec.num_parameters());
}

#[test]
fn resnet_forward_shape() {
    let spec = build_resnet(8, [4, 8, 8], 10, [3, 32, 32]).unwrap();
    let net = Network::<f32>::init(spec, &mut rng(1)).unwrap();
    let x = random_input(&[2, 3, 32, 32], 2);
    let mut tape = Tape::new();
    let input = tape.leaf(&x);
    let out = net.forward(&mut tape, input, None, Mode::Train, true).unwrap();
    assert_eq!(tape.shape(out.logits), &[2, 10]);
}

#[test]
fn all_ones_masks_are_a_no_op() {
    let spec = build_resnet(14, [4, 8, 8], 5, [1, 12, 12]).unwrap();
    let net = Network::<f32>::init(spec.clone(), &mut rng(3)).unwrap();
    let x = random_input(&[3, 1, 12, 12], 4);
    for mode in [Mode::Train, Mode::Eval] {
        let plain = logits(&net, &x, None, mode);
        let masked = logits(&net, &x, Some(&ones(&spec)), mode);
        for (a, b) in plain.iter().zip(&masked) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn zeroed_channel_has_no_downstream_effect() {
    let spec = plain_net(&[2, 6, 6], &[4, 5, 3], 4).unwrap();
    let mut net = Network::<f32>::init(spec.clone(), &mut rng(5)).unwrap();
    let x = random_input(&[2, 2, 6, 6], 6);
    let mut masks = ones(&spec);
    masks[0][2] = 0.0; // second conv, output channel 2
    let before = logits(&net, &x, Some(&masks), Mode::Eval);
    // Perturb every kernel entry producing output channel 2 of layer 1.
    let w = net.params.index_of(&weight_name(1)).unwrap();
    let c_out = 5;
    for (i, v) in net.params.get_mut(w).tensor.data_mut().iter_mut().enumerate() {
        if i % c_out == 2 {
            *v += 3.0;
        }
    }
    assert_eq!(before, logits(&net, &x, Some(&masks), Mode::Eval));
}

#[test]
fn post_addition_mask_covers_conv_path() {
    let spec = build_resnet(8, [4, 4, 4], 3, [1, 8, 8]).unwrap();
    let mut net = Network::<f32>::init(spec.clone(), &mut rng(7)).unwrap();
    let x = random_input(&[2, 1, 8, 8], 8);
    let mut masks = ones(&spec);
    let Block::Residual { conv2, .. } = spec.blocks[1].clone() else { unreachable!() };
    let site_b = spec.layers[conv2].out_site.unwrap();
    masks[site_b][1] = 0.0;
    let before = logits(&net, &x, Some(&masks), Mode::Eval);
    let w = net.params.index_of(&weight_name(conv2)).unwrap();
    for (i, v) in net.params.get_mut(w).tensor.data_mut().iter_mut().enumerate() {
        if i % 4 == 1 {
            *v -= 2.0;
        }
    }
    assert_eq!(before, logits(&net, &x, Some(&masks), Mode::Eval));
}

#[test]
fn mobilenet_widths_follow_multiplier() {
    let spec = build_mobilenet(0.75, 10, [3, 32, 32]).unwrap();
    let (stem, layout) = MOBILENET_CIFAR;
    assert_eq!(spec.layers[0].c_out, (0.75 * stem as f64).ceil() as usize);
    let pw: Vec<usize> = spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::PwConv)
        .map(|l| l.c_out)
        .collect();
    let expected: Vec<usize> = layout.iter().map(|&(c, _)| (0.75 * c as f64).ceil() as usize).collect();
    assert_eq!(pw, expected);
    for l in spec.layers.iter().filter(|l| l.kind == LayerKind::DwConv) {
        assert_eq!(l.c_in, l.c_out);
        assert_eq!(l.in_site, l.out_site);
    }
    assert!(build_mobilenet(0.0, 10, [3, 32, 32]).is_err());
    assert!(build_mobilenet(1.5, 10, [3, 32, 32]).is_err());
}

#[test]
fn mobilenet_identity_masking() {
    let spec = build_mobilenet_with(8, &[(8, 1), (16, 2), (16, 1)], 1.0, 4, [3, 8, 8]).unwrap();
    let net = Network::<f32>::init(spec.clone(), &mut rng(9)).unwrap();
    let x = random_input(&[2, 3, 8, 8], 10);
    let a = logits(&net, &x, None, Mode::Eval);
    let b = logits(&net, &x, Some(&ones(&spec)), Mode::Eval);
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-6);
    }
}

#[test]
fn mobilenet_shared_site_silences_both_layers() {
    let spec = build_mobilenet_with(8, &[(8, 1), (6, 1), (5, 1)], 1.0, 4, [3, 6, 6]).unwrap();
    let mut net = Network::<f32>::init(spec.clone(), &mut rng(11)).unwrap();
    let x = random_input(&[2, 3, 6, 6], 12);
    // Site 1 gates the second pointwise layer and the third depthwise layer.
    let mut masks = ones(&spec);
    masks[1][3] = 0.0;
    let before = logits(&net, &x, Some(&masks), Mode::Eval);
    let gated: Vec<usize> = spec
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.out_site == Some(1))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(gated.len(), 2);
    for &layer in &gated {
        let c = spec.layers[layer].c_out;
        let w = net.params.index_of(&weight_name(layer)).unwrap();
        for (i, v) in net.params.get_mut(w).tensor.data_mut().iter_mut().enumerate() {
            if i % c == 3 {
                *v += 1.5;
            }
        }
    }
    assert_eq!(before, logits(&net, &x, Some(&masks), Mode::Eval));
}

#[test]
fn mask_length_mismatch_names_site() {
    let spec = plain_net(&[1, 4, 4], &[2, 3], 2).unwrap();
    let net = Network::<f32>::init(spec, &mut rng(0)).unwrap();
    let x = random_input(&[1, 1, 4, 4], 0);
    let mut tape = Tape::new();
    let input = tape.leaf(&x);
    let bad = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
    let err = net.forward(&mut tape, input, Some(&[bad]), Mode::Eval, false).err().unwrap();
    assert!(matches!(err, Error::Site { site: 0, .. }), "{err}");
}

#[test]
fn from_parts_round_trip() {
    let spec = build_resnet(8, [4, 8, 8], 3, [1, 8, 8]).unwrap();
    let net = Network::<f32>::init(spec.clone(), &mut rng(13)).unwrap();
    let again = Network::from_parts(spec, net.params.clone()).unwrap();
    assert_eq!(net, again);
}
