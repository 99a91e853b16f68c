use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xdcycle::autodiff::Graph;
use xdcycle::nets::*;
use xdcycle::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn top_singular(rows: usize, cols: usize, data: &[f64]) -> f64 {
    DMatrix::from_row_slice(rows, cols, data).singular_values().max()
}

#[test]
fn generator_preserves_spatial_size() {
    for size in [32, 64, 128] {
        for (cin, cout) in [(3, 1), (3, 3), (1, 3)] {
            let cfg = GeneratorConfig { in_channels: cin, out_channels: cout, base_width: 4, res_blocks: 2 };
            let g = Generator::<f32>::new(2, cfg, &mut rng(size as u64)).unwrap();
            let y = g.apply(&uniform(&[1, cin, size, size], 1)).unwrap();
            assert_eq!(y.shape(), &[1, cout, size, size]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn desk_generator_maps_64px_appearance_to_structure() {
    let g = Generator::<f32>::new(2, GeneratorConfig::desk(3, 1), &mut rng(0)).unwrap();
    let y = g.apply(&uniform(&[1, 3, 64, 64], 2)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
}

#[test]
fn desk_generator_parameter_count() {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let norm = |c: usize| 2 * c;
    for (cin, cout) in [(3, 1), (1, 3), (3, 3)] {
        let expected = conv(7, cin, 32)
            + norm(32)
            + conv(3, 32, 64)
            + norm(64)
            + conv(3, 64, 128)
            + norm(128)
            + 8 * (conv(3, 128, 128) + norm(128))
            + conv(3, 128, 64)
            + norm(64)
            + conv(3, 64, 32)
            + norm(32)
            + conv(7, 32, cout);
        let cfg = GeneratorConfig::desk(cin, cout);
        assert_eq!(cfg.param_count(), expected);
        let g = Generator::<f32>::new(1, cfg, &mut rng(0)).unwrap();
        assert_eq!(g.param_count(), expected);
    }
    assert_eq!(GeneratorConfig::desk(3, 1).param_count(), 1_374_273);
}

#[test]
fn default_discriminator_gives_6x6_grid_at_64px() {
    let cfg = DiscriminatorConfig::patch70(3, 8);
    assert_eq!(cfg.score_grid(64), Some(6));
    assert_eq!(cfg.receptive_field(), 70);
    let d = Discriminator::<f32>::new(4, cfg, &mut rng(1)).unwrap();
    let s = d.apply(&uniform(&[2, 3, 64, 64], 3)).unwrap();
    assert_eq!(s.shape(), &[2, 1, 6, 6]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_weights_score_one_half() {
    for spectral_norm in [true, false] {
        let cfg = DiscriminatorConfig { spectral_norm, ..DiscriminatorConfig::patch70(3, 4) };
        let mut d = Discriminator::<f64>::new(4, cfg, &mut rng(1)).unwrap();
        d.params_mut().fill(0.0);
        d.power_iterate(1).unwrap();
        let s = d.apply(&Tensor::full(&[1, 3, 64, 64], 0.3)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5), "spectral_norm = {spectral_norm}");
    }
}

#[test]
fn directional_input_channels_follow_structure_mode() {
    for (sc, expected) in [(1, 4), (3, 6)] {
        let m = ModelBundle::<f32>::new(Variant::XdCycleGan, Architecture::default(), sc, 0).unwrap();
        let d = m.disc(DiscRole::Dir).unwrap();
        assert_eq!(d.config().in_channels, expected);
        assert_eq!(d.params().tensors()[0].shape()[1], expected);
    }
}

#[test]
fn swapping_pair_slots_changes_scores() {
    let d = Discriminator::<f64>::new(6, DiscriminatorConfig::patch70(6, 4), &mut rng(9)).unwrap();
    let mut r = rng(10);
    let mut img = |c: usize| {
        Tensor::from_vec(&[1, c, 32, 32], (0..c * 1024).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (x, y) = (img(3), img(3));
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x), g.constant(y));
    let a = directional_forward(&d, &mut g, xv, yv, false).unwrap();
    let b = directional_forward(&d, &mut g, yv, xv, false).unwrap();
    assert_ne!(g.value(a).data(), g.value(b).data());
}

#[test]
fn directional_rejects_mismatched_sizes() {
    let d = Discriminator::<f64>::new(6, DiscriminatorConfig::patch70(4, 4), &mut rng(9)).unwrap();
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let b = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    assert!(directional_forward(&d, &mut g, a, b, false).is_err());
}

#[test]
fn directional_discriminator_costs_only_extra_first_layer_weights() {
    let arch = Architecture::default();
    for sc in [1, 3] {
        let single = arch.discriminator(3).param_count();
        let dir = arch.discriminator(3 + sc).param_count();
        let structure = arch.discriminator(sc).param_count();
        // first layer: 4×4 kernels, base-width outputs
        assert_eq!(dir - single, sc * 4 * 4 * arch.disc_width);
        assert!(dir < 2 * single);
        assert!(dir < single + structure);
    }
    let single = 16 * 3 * 64 + 64 + 16 * 64 * 128 + 128 + 16 * 128 * 256 + 256 + 16 * 256 * 512 + 512 + 16 * 512 + 1;
    assert_eq!(arch.discriminator(3).param_count(), single);
}

#[test]
fn spectral_diagonal_orthogonal_and_random() {
    let w = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let mut s = SpectralState::<f64>::new(2, 2, &mut rng(1));
    let n = spectral_normalize(&w, &mut s, 20).unwrap();
    assert!((top_singular(2, 2, n.data()) - 1.0).abs() < 1e-3);
    assert!((n.data()[3] - 1.0 / 3.0).abs() < 1e-3);

    let t = 0.3f64;
    let q = Tensor::from_vec(&[2, 2], vec![t.cos(), -t.sin(), t.sin(), t.cos()]).unwrap();
    let mut s = SpectralState::<f64>::new(2, 2, &mut rng(2));
    let n = spectral_normalize(&q, &mut s, 20).unwrap();
    for (a, b) in n.data().iter().zip(q.data()) {
        assert!((a - b).abs() < 1e-9);
    }

    for trial in 0..10 {
        let mut r = rng(100 + trial);
        let data: Vec<f64> = (0..64).map(|_| r.sample(StandardNormal)).collect();
        let w = Tensor::from_vec(&[8, 8], data).unwrap();
        let mut s = SpectralState::<f64>::new(8, 8, &mut r);
        let n = spectral_normalize(&w, &mut s, 20).unwrap();
        let top = top_singular(8, 8, n.data());
        assert!((0.99..=1.01).contains(&top), "trial {trial}: {top}");
    }
}

#[test]
fn spectral_state_keeps_unit_vector() {
    let mut r = rng(5);
    let data: Vec<f64> = (0..30).map(|_| r.sample(StandardNormal)).collect();
    let mut s = SpectralState::<f64>::new(5, 6, &mut r);
    for _ in 0..10 {
        s.iterate(&data, 1).unwrap();
        let norm: f64 = s.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    assert_eq!(s.iterations, 10);
    assert!(s.iterate(&data, 0).is_err());
}

#[test]
fn zero_matrix_is_guarded() {
    let w = Tensor::<f64>::zeros(&[3, 4]);
    let mut s = SpectralState::new(3, 4, &mut rng(0));
    let n = spectral_normalize(&w, &mut s, 5).unwrap();
    assert!(n.data().iter().all(|v| *v == 0.0));
}

fn layer_top_singulars(d: &Discriminator<f64>) -> Vec<f64> {
    d.effective_weights()
        .iter()
        .map(|w| {
            let rows = w.shape()[0];
            top_singular(rows, w.len() / rows, w.data())
        })
        .collect()
}

#[test]
fn every_normalized_layer_has_unit_spectral_norm() {
    for trial in 0..10 {
        let cfg = DiscriminatorConfig::patch70(4, 8);
        let mut d = Discriminator::<f64>::new(6, cfg, &mut rng(trial)).unwrap();
        // five iterations per simulated training step, twenty steps
        for _ in 0..20 {
            d.power_iterate(5).unwrap();
        }
        for (i, s) in layer_top_singulars(&d).into_iter().enumerate() {
            assert!((0.95..=1.05).contains(&s), "trial {trial} layer {i}: {s}");
        }
    }
}

#[test]
fn spectral_bound_holds_on_drifting_weights() {
    let mut d = Discriminator::<f64>::new(6, DiscriminatorConfig::patch70(3, 4), &mut rng(3)).unwrap();
    let mut r = rng(4);
    for _ in 0..100 {
        for t in d.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += 0.005 * r.sample::<f64, _>(StandardNormal);
            }
        }
        d.power_iterate(5).unwrap();
    }
    for s in layer_top_singulars(&d) {
        assert!((0.95..=1.05).contains(&s), "{s}");
    }
}

#[test]
fn bundle_holds_the_variant_discriminators() {
    for v in Variant::ALL {
        let m = ModelBundle::<f32>::new(v, Architecture::default(), 1, 0).unwrap();
        for &role in v.roles() {
            assert!(m.disc(role).is_ok());
        }
        assert_eq!(m.discs.len(), v.roles().len());
    }
    let xd = ModelBundle::<f32>::new(Variant::XdCycleGan, Architecture::default(), 1, 0).unwrap();
    assert!(xd.disc(DiscRole::Vc).is_err());
}

#[test]
fn bundle_initialization_is_seeded() {
    let a = ModelBundle::<f32>::new(Variant::XdCycleGan, Architecture::default(), 1, 7).unwrap();
    let b = ModelBundle::<f32>::new(Variant::XdCycleGan, Architecture::default(), 1, 7).unwrap();
    let c = ModelBundle::<f32>::new(Variant::XdCycleGan, Architecture::default(), 1, 8).unwrap();
    assert_eq!(a.g_vc.params().tensors(), b.g_vc.params().tensors());
    assert_ne!(a.g_vc.params().tensors(), c.g_vc.params().tensors());
}
