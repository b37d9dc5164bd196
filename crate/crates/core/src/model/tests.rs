use super::*;
use rand::{Rng, SeedableRng};

fn small_arch(latent: usize) -> ArchConfig {
    ArchConfig {
        input_channels: 3,
        input_size: 32,
        latent_maps: latent,
        encoder_channels: vec![4, 8, 8, latent, latent],
        seed: 5,
    }
}

fn random_input(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = n * 3 * size * size;
    Tensor::new(
        vec![n, 3, size, size],
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = init_model(&ArchConfig::default()).unwrap();
    let b = init_model(&ArchConfig::default()).unwrap();
    assert_eq!(a, b);
    let mut other = ArchConfig::default();
    other.seed = 1;
    assert_ne!(a, init_model(&other).unwrap());
}

#[test]
fn default_layer_shapes() {
    let m = init_model(&ArchConfig::default()).unwrap();
    let shapes: Vec<Vec<usize>> = m
        .encoder()
        .iter()
        .map(|l| l.weight.value.shape().to_vec())
        .collect();
    assert_eq!(
        shapes,
        vec![
            vec![16, 3, 3, 3],
            vec![32, 16, 3, 3],
            vec![64, 32, 3, 3],
            vec![128, 64, 3, 3],
            vec![128, 128, 3, 3],
        ]
    );
    let dec: Vec<Vec<usize>> = m
        .decoder()
        .iter()
        .map(|l| l.weight.value.shape().to_vec())
        .collect();
    assert_eq!(
        dec,
        vec![
            vec![128, 128, 3, 3],
            vec![64, 128, 3, 3],
            vec![32, 64, 3, 3],
            vec![16, 32, 3, 3],
            vec![3, 16, 3, 3],
        ]
    );
    assert!(m.params().skip(1).step_by(2).all(|b| b.value.data().iter().all(|&v| v == 0.0)));
    let strides: Vec<usize> = m.layers.iter().map(|l| l.stride).collect();
    assert_eq!(strides, vec![1, 2, 2, 2, 2, 1, 1, 1, 1, 1]);
}

#[test]
fn he_uniform_bounds_hold() {
    let m = init_model(&ArchConfig::default()).unwrap();
    for l in &m.layers {
        let s = l.weight.value.shape();
        let bound = (6.0 / (s[1] * 9) as f32).sqrt();
        assert!(l.weight.value.data().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn bad_configs_are_rejected() {
    let mut cfg = ArchConfig::default();
    cfg.input_size = 40;
    assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    let mut cfg = ArchConfig::with_latent(33);
    cfg.encoder_channels[4] = 33;
    assert!(init_model(&cfg).is_err());
    let mut cfg = ArchConfig::default();
    cfg.encoder_channels.pop();
    assert!(init_model(&cfg).is_err());
}

#[test]
fn latent_halves_follow_latent_width() {
    let arch = small_arch(32);
    let m = init_model(&arch).unwrap();
    let codes = encode_batch(&m, &random_input(2, 32, 1)).unwrap();
    assert_eq!(codes[0].h0.shape(), &[16, 2, 2]);
    assert_eq!(codes[0].h1.shape(), &[16, 2, 2]);
}

#[test]
fn latent_spatial_size_is_sixteenth() {
    let m = init_model(&ArchConfig::default()).unwrap();
    let codes = encode_batch(&m, &random_input(1, 64, 2)).unwrap();
    assert_eq!(codes[0].h0.shape(), &[64, 4, 4]);

    let mut big = small_arch(8);
    big.input_size = 256;
    let m = init_model(&big).unwrap();
    let codes = encode_batch(&m, &random_input(1, 256, 3)).unwrap();
    assert_eq!(&codes[0].h0.shape()[1..], &[16, 16]);
}

#[test]
fn encoder_rejects_wrong_size() {
    let m = init_model(&small_arch(8)).unwrap();
    assert!(matches!(
        encode_batch(&m, &random_input(1, 16, 0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn latent_is_non_negative() {
    let m = init_model(&small_arch(16)).unwrap();
    for seed in 0..4 {
        let codes = encode_batch(&m, &random_input(3, 32, seed)).unwrap();
        for c in codes {
            assert!(c.h0.data().iter().chain(c.h1.data()).all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn select_zeroes_off_class_half() {
    let code = LatentCode {
        h0: Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap(),
        h1: Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap(),
    };
    assert_eq!(code.select(ClassLabel::Real).data(), &[1.0, 2.0, 0.0, 0.0]);
    assert_eq!(code.select(ClassLabel::Fake).data(), &[0.0, 0.0, 3.0, 4.0]);
    assert_eq!(code.select(ClassLabel::Real).shape(), &[2, 1, 2]);
}

#[test]
fn decoding_ignores_off_class_half_bit_exactly() {
    let arch = small_arch(8);
    let m = init_model(&arch).unwrap();
    let codes = encode_batch(&m, &random_input(1, 32, 4)).unwrap();
    let mut perturbed = codes[0].clone();
    perturbed.h1 = perturbed.h1.map(|v| v * 7.0 + 3.0);
    let z1 = Tensor::stack(&[&codes[0].select(ClassLabel::Real)]).unwrap();
    let z2 = Tensor::stack(&[&perturbed.select(ClassLabel::Real)]).unwrap();
    let a = decode_batch(&m, &z1).unwrap();
    let b = decode_batch(&m, &z2).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn decode_shape_and_range() {
    let arch = small_arch(8);
    let m = init_model(&arch).unwrap();
    let x = random_input(2, 32, 5);
    let codes = encode_batch(&m, &x).unwrap();
    let z: Vec<Tensor> = codes.iter().map(|c| c.select(ClassLabel::Fake)).collect();
    let z = Tensor::stack(&z.iter().collect::<Vec<_>>()).unwrap();
    let out = decode_batch(&m, &z).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(out.data().iter().all(|v| *v > -1.0 && *v < 1.0));
}

#[test]
fn zero_latent_with_zero_biases_decodes_to_zero() {
    let m = init_model(&small_arch(8)).unwrap();
    let out = decode_batch(&m, &Tensor::zeros(&[1, 8, 2, 2])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn activation_values() {
    let code = LatentCode {
        h0: Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap(),
        h1: Tensor::full(&[1, 2, 2], 1.0),
    };
    assert_eq!(code.activations(), (1.0, 1.0));
    let zero = LatentCode {
        h0: Tensor::zeros(&[1, 2, 2]),
        h1: Tensor::zeros(&[1, 2, 2]),
    };
    assert_eq!(zero.activations().0, 0.0);
}

#[test]
fn graph_and_tensor_activations_agree() {
    let m = init_model(&small_arch(8)).unwrap();
    let x = random_input(3, 32, 6);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let latent = bound.encode(&mut g, xv).unwrap();
    let (a0, a1) = activations(&mut g, latent).unwrap();
    let codes = encode_batch(&m, &x).unwrap();
    for (i, c) in codes.iter().enumerate() {
        let (e0, e1) = c.activations();
        assert!((g.value(a0).data()[i] - e0).abs() < 1e-6);
        assert!((g.value(a1).data()[i] - e1).abs() < 1e-6);
    }
}

#[test]
fn activations_scale_with_latent() {
    let m = init_model(&small_arch(8)).unwrap();
    let code = encode_batch(&m, &random_input(1, 32, 7)).unwrap().remove(0);
    let (a0, a1) = code.activations();
    let (s0, s1) = code.scaled(2.5).activations();
    assert!((s0 - 2.5 * a0).abs() <= 1e-6 * (1.0 + s0));
    assert!((s1 - 2.5 * a1).abs() <= 1e-6 * (1.0 + s1));
}

#[test]
fn real_selection_isolates_fake_half_gradients() {
    // Reconstruction loss through select(.., Real): the h1 channels of the
    // last encoder layer receive exactly zero gradient.
    let arch = small_arch(8);
    let m = init_model(&arch).unwrap();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let x = g.constant(random_input(2, 32, 8));
    let latent = bound.encode(&mut g, x).unwrap();
    let z = select(&mut g, latent, &[ClassLabel::Real, ClassLabel::Real]).unwrap();
    let out = bound.decode(&mut g, z).unwrap();
    let diff = g.sub(x, out).unwrap();
    let loss = g.l1_mean(diff);
    g.backward(loss).unwrap();
    let mut grads = m.clone();
    grads.accumulate_grads(&g, &bound).unwrap();
    let last = &grads.encoder()[4];
    let per_out = 8 * 9;
    let wg = last.weight.grad.data();
    assert!(wg[4 * per_out..].iter().all(|&v| v == 0.0));
    assert!(last.bias.grad.data()[4..].iter().all(|&v| v == 0.0));
    assert!(wg[..4 * per_out].iter().any(|&v| v != 0.0));
}

#[test]
fn arch_mismatch_is_reported() {
    let m = init_model(&ArchConfig::with_latent(128)).unwrap();
    assert!(matches!(
        m.ensure_arch(&ArchConfig::with_latent(64)),
        Err(Error::ArchMismatch { .. })
    ));
    assert!(m.ensure_arch(&ArchConfig::with_latent(128)).is_ok());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arch_strategy() -> impl Strategy<Value = ArchConfig> {
        (prop::sample::select(vec![16usize, 32]), prop::sample::select(vec![2usize, 4, 8]), any::<u64>()).prop_map(
            |(size, latent, seed)| ArchConfig {
                input_channels: 3,
                input_size: size,
                latent_maps: latent,
                encoder_channels: vec![4, 4, 8, latent, latent],
                seed,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn round_trip_keeps_input_shape_and_latent_is_non_negative(
            arch in arch_strategy(),
            n in 1usize..3,
            data_seed in any::<u64>(),
            fake in any::<bool>(),
        ) {
            let m = init_model(&arch).unwrap();
            let x = random_input(n, arch.input_size, data_seed);
            let label = if fake { ClassLabel::Fake } else { ClassLabel::Real };
            let codes = encode_batch(&m, &x).unwrap();
            for c in &codes {
                prop_assert!(c.h0.data().iter().chain(c.h1.data()).all(|&v| v >= 0.0));
            }
            let selected: Vec<Tensor> = codes.iter().map(|c| c.select(label)).collect();
            let z = Tensor::stack(&selected.iter().collect::<Vec<_>>()).unwrap();
            let decoded = decode_batch(&m, &z).unwrap();
            prop_assert_eq!(decoded.shape(), x.shape());
        }

        #[test]
        fn off_class_half_never_reaches_the_decoder(
            arch in arch_strategy(),
            data_seed in any::<u64>(),
            scale in 0.0f32..10.0,
            shift in -5.0f32..5.0,
            fake in any::<bool>(),
        ) {
            let m = init_model(&arch).unwrap();
            let code = encode_batch(&m, &random_input(1, arch.input_size, data_seed)).unwrap().remove(0);
            let (label, mut other) = (if fake { ClassLabel::Fake } else { ClassLabel::Real }, code.clone());
            if fake {
                other.h0 = other.h0.map(|v| v * scale + shift);
            } else {
                other.h1 = other.h1.map(|v| v * scale + shift);
            }
            let a = decode_batch(&m, &Tensor::stack(&[&code.select(label)]).unwrap()).unwrap();
            let b = decode_batch(&m, &Tensor::stack(&[&other.select(label)]).unwrap()).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }

        #[test]
        fn activations_are_homogeneous(data_seed in any::<u64>(), alpha in 0.0f32..20.0) {
            let m = init_model(&small_arch(8)).unwrap();
            let code = encode_batch(&m, &random_input(1, 32, data_seed)).unwrap().remove(0);
            let (a0, a1) = code.activations();
            let (s0, s1) = code.scaled(alpha).activations();
            prop_assert!((s0 - alpha * a0).abs() <= 1e-5 * (1.0 + s0.abs()));
            prop_assert!((s1 - alpha * a1).abs() <= 1e-5 * (1.0 + s1.abs()));
        }
    }
}
