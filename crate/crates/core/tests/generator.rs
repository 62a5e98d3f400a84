use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wfm_core::fourier::MixerVariant;
use wfm_core::generator::{
    composite, count_parameters, fourier_former_block, masked_input, FourierFormerBlock, Generator, GeneratorConfig,
};
use wfm_core::graph::Graph;
use wfm_core::params::{ParamStore, StoreBuilder};
use wfm_core::Tensor;

fn gated(cin: usize, cout: usize, k: usize) -> usize {
    2 * cout * cin * k * k + cout + 2
}

fn unit(c: usize) -> usize {
    4 * c * c + 2 * c + 2
}

fn block(d: usize, ratio: usize) -> usize {
    let mixer = gated(d, d / 2, 3) + 2 * unit(d / 2) + gated(2 * d, d, 3);
    2 * d + mixer + 2 * d * ratio * d + 2
}

/// Layer-by-layer enumeration for the windowed mixer.
fn hand_count(c: usize, l: usize) -> usize {
    let d = [c, 2 * c, 4 * c, 8 * c];
    let mut n = 4 * c * 49 + c;
    for i in 1..4 {
        n += d[i - 1] + d[i] * d[i - 1] * 9;
    }
    n += 2 * l * d.iter().map(|&di| block(di, 4)).sum::<usize>();
    n += (0..3).map(|i| 2 * d[i] * d[i]).sum::<usize>();
    n += (1..4).map(|i| d[i - 1] * d[i] * 9).sum::<usize>();
    n += (c / 2) * c * 49 + 2 + 3 * (c / 2) + 3;
    n
}

#[test]
fn parameter_count_matches_enumeration() {
    for (c, l) in [(16, 1), (8, 2), (64, 2)] {
        assert_eq!(count_parameters(&GeneratorConfig::toy(c, l)).unwrap(), hand_count(c, l));
    }
    let (_, store) = Generator::new::<f32>(&GeneratorConfig::toy(16, 1), 0).unwrap();
    assert_eq!(store.num_elements(), hand_count(16, 1));
}

#[test]
fn full_size_count_is_within_forty_percent_of_104m() {
    let n = count_parameters(&GeneratorConfig::default()).unwrap() as f64;
    println!("generator parameters at C=64, L=2: {:.2}M", n / 1e6);
    assert!((n - 104e6).abs() / 104e6 <= 0.4);
}

#[test]
fn variant_counts_are_distinct_where_expected() {
    let count = |mixer| {
        count_parameters(&GeneratorConfig {
            mixer,
            ..GeneratorConfig::toy(16, 1)
        })
        .unwrap()
    };
    assert_eq!(count(MixerVariant::Wfm), count(MixerVariant::FmNoWindow));
    assert!(count(MixerVariant::GatedOnly) < count(MixerVariant::Wfm));
    assert_ne!(count(MixerVariant::Ffc), count(MixerVariant::Wfm));
    assert_ne!(count(MixerVariant::Wfm2d), count(MixerVariant::Wfm));
}

fn random_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, h, w], |_, _, _, _| rng.gen())
}

#[test]
fn encoder_dims_and_round_trip() {
    for (c, h, w) in [(16, 64, 128), (8, 32, 64)] {
        let cfg = GeneratorConfig::toy(c, 1);
        let (net, ps) = Generator::new::<f32>(&cfg, 1).unwrap();
        let x = random_image(1, h, w, 2);
        let m = Tensor::from_fn([1, 1, h, w], |_, _, y, x| if y < h / 2 && x < w / 3 { 1.0 } else { 0.0 });
        let mut g = Graph::inference();
        let xp = g.constant(masked_input(&x, &m).unwrap());
        let (_, skips) = net.encode(&mut g, &ps, xp).unwrap();
        let dims = cfg.stage_dims(h, w).unwrap();
        for (s, d) in skips.iter().zip(dims) {
            assert_eq!(g.value(*s).shape(), [1, d[0], d[1], d[2]]);
        }
        let y = net.generate(&ps, &x, &m).unwrap();
        assert_eq!(y.shape(), [1, 3, h, w]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn boundary_masks_and_determinism() {
    let cfg = GeneratorConfig::toy(8, 1);
    let (net, ps) = Generator::new::<f32>(&cfg, 3).unwrap();
    let x = random_image(1, 32, 64, 4);
    for fill in [0.0, 1.0] {
        let m = Tensor::full([1, 1, 32, 64], fill);
        let a = net.generate(&ps, &x, &m).unwrap();
        let b = net.generate(&ps, &x, &m).unwrap();
        assert!(a.all_finite());
        assert_eq!(a, b);
    }
}

#[test]
fn batch_samples_are_independent() {
    let cfg = GeneratorConfig::toy(8, 1);
    let (net, ps) = Generator::new::<f32>(&cfg, 5).unwrap();
    let x = random_image(2, 32, 64, 6);
    let m = Tensor::zeros([2, 1, 32, 64]);
    let both = net.generate(&ps, &x, &m).unwrap();
    let one = net.generate(&ps, &x.sample(1), &m.sample(1)).unwrap();
    assert!(both.sample(1).max_abs_diff(&one) < 1e-6);
}

#[test]
fn hole_pixels_do_not_reach_the_input() {
    let x = random_image(1, 4, 4, 7);
    let m = Tensor::from_fn([1, 1, 4, 4], |_, _, y, _| if y < 2 { 1.0 } else { 0.0 });
    let mut x2 = x.clone();
    for c in 0..3 {
        x2.set(0, c, 0, 1, 0.123);
    }
    assert_eq!(masked_input(&x, &m).unwrap(), masked_input(&x2, &m).unwrap());
}

#[test]
fn composite_matches_elementwise_oracle() {
    let x = random_image(1, 4, 6, 8);
    let y = random_image(1, 4, 6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Tensor::from_fn([1, 1, 4, 6], |_, _, _, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let c = composite(&x, &y, &m).unwrap();
    for ch in 0..3 {
        for r in 0..4 {
            for col in 0..6 {
                let want = if m.at(0, 0, r, col) == 1.0 { y.at(0, ch, r, col) } else { x.at(0, ch, r, col) };
                assert_eq!(c.at(0, ch, r, col), want);
            }
        }
    }
}

#[test]
fn zeroed_residual_outputs_make_blocks_identity() {
    for mixer in MixerVariant::ALL {
        let cfg = GeneratorConfig {
            mixer,
            ..GeneratorConfig::toy(16, 1)
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = FourierFormerBlock::build(
            &mut StoreBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            "b",
            32,
            &cfg,
        )
        .unwrap();
        for id in block.residual_output_params() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn([1, 32, 16, 32], |_, c, y, x| ((c * 7 + y * 3 + x) % 13) as f32 * 0.1 - 0.6);
        let y = fourier_former_block(&x, &block, &store).unwrap();
        assert_eq!(y, x, "{mixer:?}");
    }
}
