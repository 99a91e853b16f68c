mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdcycle::autodiff::{Graph, Var};
use xdcycle::losses::*;
use xdcycle::nets::{Architecture, DiscRole, ModelBundle, Variant};
use xdcycle::Tensor;

const TOL: f64 = 1e-6;

#[test]
fn every_generator_term_matches_scalar_oracle() {
    for seed in [3, 17, 101] {
        let s = scene(seed);
        for (form, score) in [(GanForm::Log, bce as fn(&Arr, bool) -> f64), (GanForm::LeastSquares, lsq)] {
            let w = LossWeights { gan_form: form, ..LossWeights::default() };
            let lib = library_terms(&s, &w);
            for ((t, l), (_, o)) in lib.iter().zip(oracle_terms(&s, score)) {
                assert!(rel_err(*l, o) <= TOL, "{t:?} {form:?}: {l} vs {o}");
            }
        }
    }
}

#[test]
fn adversarial_discriminator_loss_matches_oracle() {
    let s = scene(5);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let v = bind(&mut g, &s);
    let d_vc = |g: &mut Graph<f64>, x: Var| s.d_vc.forward(g, &v.d_vc, x);
    let fake = s.g_vc.forward(&mut g, &v.g_vc, v.a).unwrap();
    let (d_loss, _) = adversarial_loss(&mut g, &d_vc, v.b, fake, &w).unwrap();
    let o = bce(&s.d_vc.oracle(&s.b), true) + bce(&s.d_vc.oracle(&s.g_vc.oracle(&s.a)), false);
    assert!(rel_err(g.scalar(d_loss), o) <= TOL);
}

#[test]
fn directional_discriminator_loss_matches_oracle() {
    let s = scene(9);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let v = bind(&mut g, &s);
    let g_vc = |g: &mut Graph<f64>, x: Var| s.g_vc.forward(g, &v.g_vc, x);
    let g_oc = |g: &mut Graph<f64>, x: Var| s.g_oc.forward(g, &v.g_oc, x);
    let d_dir = |g: &mut Graph<f64>, x: Var, y: Var| {
        let p = g.concat_channels(&[x, y])?;
        s.d_dir.forward(g, &v.d_dir, p)
    };
    let dir = directional_loss(&mut g, &g_oc, &g_vc, &d_dir, v.a, v.b, &w).unwrap();
    let pos = s.d_dir.oracle(&concat(&s.a, &s.g_vc.oracle(&s.a)));
    let neg = s.d_dir.oracle(&concat(&s.g_oc.oracle(&s.b), &s.b));
    assert!(rel_err(g.scalar(dir.d_loss), bce(&pos, true) + bce(&neg, false)) <= TOL);
}

fn oracle_total(terms: &[(Term, f64)], variant: Variant, w: &LossWeights) -> f64 {
    let t = |k: Term| terms.iter().find(|(x, _)| *x == k).unwrap().1;
    match variant {
        Variant::XdCycleGan => {
            w.lambda * t(Term::ExcycOc)
                + w.lambda * t(Term::CycVc)
                + t(Term::DirOc2Vc)
                + t(Term::DirVc2Oc)
                + w.alpha * t(Term::GanOcExtra)
                + w.gamma * t(Term::IdenVc)
        }
        Variant::XCycleGan => {
            w.lambda * t(Term::ExcycOc)
                + w.lambda * t(Term::CycVc)
                + t(Term::GanOc)
                + t(Term::GanVc)
                + w.alpha * t(Term::GanOcExtra)
                + w.gamma * t(Term::IdenVc)
        }
        Variant::CycleGan => {
            w.lambda * t(Term::CycOc)
                + w.lambda * t(Term::CycVc)
                + t(Term::GanOc)
                + t(Term::GanVc)
                + w.gamma * t(Term::IdenVc)
                + w.gamma * t(Term::IdenOc)
        }
    }
}

#[test]
fn composite_objective_matches_oracle_on_miniatures() {
    let s = scene(23);
    let w = LossWeights { alpha: 0.7, lambda: 3.0, gamma: 2.5, ..LossWeights::default() };
    let oracle = oracle_terms(&s, bce);
    let mut bd = LossBreakdown::default();
    for (t, v) in library_terms(&s, &w) {
        bd.set(t, v);
    }
    for variant in Variant::ALL {
        let lib = bd.weighted_total(variant, &w);
        assert!(rel_err(lib, oracle_total(&oracle, variant, &w)) <= TOL, "{variant}");
    }
}

fn tiny_bundle(variant: Variant, seed: u64) -> ModelBundle<f64> {
    let arch = Architecture {
        gen_width: 2,
        res_blocks: 1,
        disc_width: 2,
        disc_downsamplings: 1,
        ..Architecture::default()
    };
    let mut m = ModelBundle::new(variant, arch, 1, seed).unwrap();
    for &role in variant.roles() {
        m.disc_mut(role).unwrap().power_iterate(3).unwrap();
    }
    m
}

fn apply_g(gen: &xdcycle::nets::Generator<f64>, x: &Arr) -> Arr {
    Arr::of(&gen.apply(&x.tensor()).unwrap())
}

fn apply_d(m: &ModelBundle<f64>, role: DiscRole, x: &Arr) -> Arr {
    Arr::of(&m.disc(role).unwrap().apply(&x.tensor()).unwrap())
}

#[test]
fn bundle_objective_matches_black_box_recomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let a = Arr::random(2, 3, 16, 16, &mut rng);
    let b = Arr::random(2, 1, 16, 16, &mut rng);
    let w = LossWeights::default();
    for variant in Variant::ALL {
        let m = tiny_bundle(variant, 8);
        let bd = total_objective(variant, &w, &m, &a.tensor(), &b.tensor()).unwrap();
        let fake_vc = apply_g(&m.g_vc, &a);
        let fake_oc = apply_g(&m.g_oc, &b);
        let rec = apply_g(&m.g_oc, &fake_vc);
        let mut o: Vec<(Term, f64)> = vec![
            (Term::CycVc, l1(&b, &apply_g(&m.g_vc, &fake_oc))),
            (Term::IdenVc, l1(&apply_g(&m.g_vc, &replicate(&b, 3)), &b)),
        ];
        let mut disc = Vec::new();
        match variant {
            Variant::CycleGan => {
                o.push((Term::CycOc, l1(&a, &rec)));
                o.push((Term::IdenOc, l1(&apply_g(&m.g_oc, &luma(&a)), &a)));
            }
            _ => {
                o.push((Term::ExcycOc, l1(&fake_vc, &apply_g(&m.g_vc, &rec))));
                let s = apply_d(&m, DiscRole::OcExtra, &rec);
                o.push((Term::GanOcExtra, bce(&s, true)));
                disc.push((DiscRole::OcExtra, bce(&apply_d(&m, DiscRole::OcExtra, &a), true) + bce(&s, false)));
            }
        }
        if variant == Variant::XdCycleGan {
            let pos = apply_d(&m, DiscRole::Dir, &concat(&a, &fake_vc));
            let neg = apply_d(&m, DiscRole::Dir, &concat(&fake_oc, &b));
            o.push((Term::DirOc2Vc, bce(&pos, false)));
            o.push((Term::DirVc2Oc, bce(&neg, true)));
            disc.push((DiscRole::Dir, bce(&pos, true) + bce(&neg, false)));
        } else {
            let so = apply_d(&m, DiscRole::OcSingle, &fake_oc);
            let sv = apply_d(&m, DiscRole::Vc, &fake_vc);
            o.push((Term::GanOc, bce(&so, true)));
            o.push((Term::GanVc, bce(&sv, true)));
            disc.push((DiscRole::OcSingle, bce(&apply_d(&m, DiscRole::OcSingle, &a), true) + bce(&so, false)));
            disc.push((DiscRole::Vc, bce(&apply_d(&m, DiscRole::Vc, &b), true) + bce(&sv, false)));
        }
        for &(t, v) in &o {
            assert!(rel_err(bd.get(t), v) <= TOL, "{variant} {t:?}: {} vs {v}", bd.get(t));
        }
        assert!(rel_err(bd.total, oracle_total(&o, variant, &w)) <= TOL, "{variant} total");
        assert_eq!(disc.len(), variant.roles().len());
        for (role, v) in disc {
            assert!(rel_err(bd.disc(role), v) <= TOL, "{variant} {role:?}");
        }
        for t in Term::ALL {
            if !o.iter().any(|(x, _)| *x == t) {
                assert_eq!(bd.get(t), 0.0, "{variant} leaves {t:?} unset");
            }
        }
    }
}

#[test]
fn identity_generators_zero_both_cycle_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Arr::random(2, 3, 4, 4, &mut rng);
    let mut g = Graph::<f64>::new();
    let y = g.constant(a.tensor());
    let id = |_: &mut Graph<f64>, x: Var| Ok(x);
    let cyc = cycle_loss(&mut g, &id, &id, y).unwrap();
    let ex = extended_cycle_loss(&mut g, &id, &id, y).unwrap();
    assert!(g.scalar(cyc).abs() <= 1e-9);
    assert!(g.scalar(ex).abs() <= 1e-9);
}

#[test]
fn constant_forward_map_zeroes_only_extended_cycle() {
    let s = scene(31);
    let mut g = Graph::new();
    let v = bind(&mut g, &s);
    let g_oc = |g: &mut Graph<f64>, x: Var| s.g_oc.forward(g, &v.g_oc, x);
    let constant = |g: &mut Graph<f64>, x: Var| {
        let n = g.value(x).shape()[0];
        Ok(g.constant(Tensor::full(&[n, 1, 4, 4], 0.25)))
    };
    let ex = extended_cycle_loss(&mut g, &g_oc, &constant, v.a).unwrap();
    let cyc = cycle_loss(&mut g, &g_oc, &constant, v.a).unwrap();
    assert!(g.scalar(ex).abs() <= 1e-9);
    assert!(g.scalar(cyc) > 1e-9);
}

#[test]
fn unit_terms_sum_to_weight_total() {
    let mut bd = LossBreakdown::default();
    for t in Term::ALL {
        bd.set(t, 1.0);
    }
    let w = LossWeights::default();
    // λ + λ + 1 + 1 + α + γ
    assert_eq!(bd.weighted_total(Variant::XdCycleGan, &w), 27.5);
    assert_eq!(bd.weighted_total(Variant::XCycleGan, &w), 27.5);
    assert_eq!(bd.weighted_total(Variant::CycleGan, &w), 32.0);
}

#[test]
fn total_is_linear_in_cycle_weight() {
    let s = scene(12);
    let mut bd = LossBreakdown::default();
    for (t, v) in library_terms(&s, &LossWeights::default()) {
        bd.set(t, v);
    }
    let at = |lambda: f64| bd.weighted_total(Variant::XdCycleGan, &LossWeights { lambda, ..LossWeights::default() });
    let slope = at(11.0) - at(10.0);
    assert!(rel_err(slope, bd.excyc_oc + bd.cyc_vc) < 1e-9);
    assert!(rel_err(at(20.0) - at(10.0), 10.0 * slope) < 1e-9);
}

#[test]
fn zero_cycle_weight_drops_cycle_terms() {
    let mut bd = LossBreakdown::default();
    bd.cyc_vc = 3.0;
    bd.excyc_oc = 4.0;
    let w = LossWeights { lambda: 0.0, ..LossWeights::default() };
    assert_eq!(bd.weighted_total(Variant::XdCycleGan, &w), 0.0);
}

#[test]
fn log_clamp_bounds_saturated_scores() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let v = score_loss(&mut g, ones, false, &LossWeights::default()).unwrap();
    assert!((g.scalar(v) + LOG_EPS.ln()).abs() < 1e-9);
}

#[test]
fn empty_batches_are_rejected() {
    let mut g = Graph::<f64>::new();
    let empty = g.constant(Tensor::zeros(&[0, 1, 4, 4]));
    let full = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let d = |g: &mut Graph<f64>, x: Var| Ok(g.sigmoid(x));
    assert!(adversarial_loss(&mut g, &d, empty, full, &LossWeights::default()).is_err());
    assert!(score_loss(&mut g, empty, true, &LossWeights::default()).is_err());
}

#[test]
fn missing_discriminator_is_rejected() {
    let m = tiny_bundle(Variant::CycleGan, 1);
    let a = Tensor::zeros(&[1, 3, 16, 16]);
    let b = Tensor::zeros(&[1, 1, 16, 16]);
    assert!(total_objective(Variant::XdCycleGan, &LossWeights::default(), &m, &a, &b).is_err());
}
