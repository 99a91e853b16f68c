//! Adversarial, cycle, extended-cycle, directional and identity losses, and
//! the composite generator objective of each model variant.
//!
//! Generators and discriminators enter the individual terms as graph
//! closures, so the terms can be evaluated on any differentiable map. Batches
//! are network tensors in [−1, 1]; "A" is the appearance domain and "B" the
//! structure domain. `G_vc` maps A→B and `G_oc` maps B→A.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::image::LUMA;
use crate::nets::{directional_forward, DiscRole, ModelBundle, Variant};
use crate::tensor::{Real, Tensor};

/// A differentiable image-to-image or image-to-score map.
pub type Net<'a, T> = &'a dyn Fn(&mut Graph<T>, Var) -> Result<Var>;
/// A score map over (appearance, structure) pairs.
pub type PairNet<'a, T> = &'a dyn Fn(&mut Graph<T>, Var, Var) -> Result<Var>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    Log,
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub gan_form: GanForm,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            lambda: 10.0,
            gamma: 5.0,
            gan_form: GanForm::Log,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("loss weight {name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Param(format!("log clamp must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_batch<T: Real>(g: &Graph<T>, v: Var, what: &'static str) -> Result<()> {
    if g.value(v).is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Mean loss of `scores` against a constant label: real (1) or fake (0).
/// Log form: `−mean ln D` or `−mean ln(1 − D)`, clamped at ε. Least squares:
/// `mean (D − 1)²` or `mean D²`.
pub fn score_loss<T: Real>(g: &mut Graph<T>, scores: Var, real: bool, w: &LossWeights) -> Result<Var> {
    check_batch(g, scores, "no discriminator scores")?;
    let x = match (w.gan_form, real) {
        (GanForm::Log, true) => scores,
        (GanForm::Log, false) | (GanForm::LeastSquares, true) => g.affine(scores, -1.0, 1.0),
        (GanForm::LeastSquares, false) => scores,
    };
    let per_cell = match w.gan_form {
        GanForm::Log => {
            let l = g.log_clamp(x, w.epsilon);
            g.affine(l, -1.0, 0.0)
        }
        GanForm::LeastSquares => g.square(x),
    };
    g.mean(per_cell)
}

/// `(d_loss, g_loss)` of a single-image discriminator; the generator term is
/// the non-saturating `−mean ln D(fake)`.
pub fn adversarial_loss<T: Real>(
    g: &mut Graph<T>,
    d: Net<T>,
    real: Var,
    fake: Var,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    check_batch(g, real, "empty real batch")?;
    check_batch(g, fake, "empty fake batch")?;
    let sr = d(g, real)?;
    let sf = d(g, fake)?;
    let lr = score_loss(g, sr, true, w)?;
    let lf = score_loss(g, sf, false, w)?;
    let d_loss = g.add(lr, lf)?;
    let g_loss = score_loss(g, sf, true, w)?;
    Ok((d_loss, g_loss))
}

/// `mean |y − G_a(G_b(y))|`.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, g_a: Net<T>, g_b: Net<T>, y: Var) -> Result<Var> {
    let fwd = g_b(g, y)?;
    let back = g_a(g, fwd)?;
    g.mean_abs_diff(y, back)
}

/// `mean |G_b(y) − G_b(G_a(G_b(y)))|`: the round trip compared in the
/// structure domain.
pub fn extended_cycle_loss<T: Real>(g: &mut Graph<T>, g_a: Net<T>, g_b: Net<T>, y: Var) -> Result<Var> {
    let fwd = g_b(g, y)?;
    let back = g_a(g, fwd)?;
    let again = g_b(g, back)?;
    g.mean_abs_diff(fwd, again)
}

#[derive(Clone, Copy, Debug)]
pub struct DirectionalTerms {
    /// Discriminator loss: (y, G_b(y)) labelled 1, (G_a(x), x) labelled 0.
    pub d_loss: Var,
    /// `G_a`'s term, `−mean ln D(G_a(x), x)`.
    pub g_loss_a: Var,
    /// `G_b`'s term, `−mean ln(1 − D(y, G_b(y)))`.
    pub g_loss_b: Var,
}

/// Directional loss for `y` from the appearance domain and `x` from the
/// structure domain. `G_b` maps appearance → structure. Pairs are always
/// passed to `d_dir` as (appearance, structure).
#[allow(clippy::too_many_arguments)]
pub fn directional_loss<T: Real>(
    g: &mut Graph<T>,
    g_a: Net<T>,
    g_b: Net<T>,
    d_dir: PairNet<T>,
    y: Var,
    x: Var,
    w: &LossWeights,
) -> Result<DirectionalTerms> {
    check_batch(g, y, "empty appearance batch")?;
    check_batch(g, x, "empty structure batch")?;
    let gy = g_b(g, y)?;
    let gx = g_a(g, x)?;
    let pos = d_dir(g, y, gy)?;
    let neg = d_dir(g, gx, x)?;
    let lp = score_loss(g, pos, true, w)?;
    let ln = score_loss(g, neg, false, w)?;
    Ok(DirectionalTerms {
        d_loss: g.add(lp, ln)?,
        g_loss_a: score_loss(g, neg, true, w)?,
        g_loss_b: score_loss(g, pos, false, w)?,
    })
}

/// `mean |G(y) − y|`; `G` must keep the channel count.
pub fn identity_loss<T: Real>(g: &mut Graph<T>, gen: Net<T>, y: Var) -> Result<Var> {
    let out = gen(g, y)?;
    let (cin, cout) = (g.value(y).shape().get(1).copied(), g.value(out).shape().get(1).copied());
    if cin != cout {
        return Err(Error::Shape(format!(
            "identity loss needs a channel-preserving map, got {cin:?} → {cout:?} channels"
        )));
    }
    g.mean_abs_diff(out, y)
}

/// Adapts a batch to `channels`: one gray channel is replicated into three,
/// three channels are reduced to luminance.
pub fn match_channels<T: Real>(g: &mut Graph<T>, x: Var, channels: usize) -> Result<Var> {
    let c = g.value(x).dims4()?.1;
    match (c, channels) {
        (a, b) if a == b => Ok(x),
        (1, n) => g.concat_channels(&vec![x; n]),
        (3, 1) => {
            let w = g.constant(Tensor::from_vec(&[1, 3, 1, 1], LUMA.iter().map(|&v| T::lit(v)).collect())?);
            g.conv2d(x, w, None, ConvSpec::new(1, 0, PadMode::Zero))
        }
        (a, b) => Err(Error::Shape(format!("cannot adapt {a} channels to {b}"))),
    }
}

/// Origin of an image fed to a discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealAppearance,
    RealStructure,
    /// `G_oc(b)` for a real structure image `b`.
    TranslatedAppearance,
    /// `G_vc(a)` for a real appearance image `a`.
    TranslatedStructure,
    /// `G_oc(G_vc(a))`.
    ReconstructedAppearance,
}

impl Provenance {
    pub fn is_reconstruction(self) -> bool {
        matches!(self, Provenance::ReconstructedAppearance)
    }
}

/// Receives every discriminator evaluation: which discriminator, and the
/// origin of each image in the batch (both slots, in order, for pairs).
pub type FeedHook<'a> = &'a mut dyn FnMut(DiscRole, &[Provenance]);

/// Named scalars of one evaluation of the objective. Terms a variant does
/// not use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan_vc: f64,
    pub gan_oc: f64,
    pub gan_oc_extra: f64,
    pub cyc_vc: f64,
    pub cyc_oc: f64,
    pub excyc_oc: f64,
    pub dir_oc2vc: f64,
    pub dir_vc2oc: f64,
    pub iden_vc: f64,
    pub iden_oc: f64,
    pub total: f64,
    pub d_dir: f64,
    pub d_oc: f64,
    pub d_vc: f64,
    pub d_oc_single: f64,
}

impl LossBreakdown {
    /// Weighted sum of the generator-side terms for `variant`.
    pub fn weighted_total(&self, variant: Variant, w: &LossWeights) -> f64 {
        generator_terms(variant, w)
            .iter()
            .map(|&(term, k)| k * self.get(term))
            .sum()
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::GanVc => self.gan_vc,
            Term::GanOc => self.gan_oc,
            Term::GanOcExtra => self.gan_oc_extra,
            Term::CycVc => self.cyc_vc,
            Term::CycOc => self.cyc_oc,
            Term::ExcycOc => self.excyc_oc,
            Term::DirOc2Vc => self.dir_oc2vc,
            Term::DirVc2Oc => self.dir_vc2oc,
            Term::IdenVc => self.iden_vc,
            Term::IdenOc => self.iden_oc,
        }
    }

    pub fn set(&mut self, term: Term, v: f64) {
        let slot = match term {
            Term::GanVc => &mut self.gan_vc,
            Term::GanOc => &mut self.gan_oc,
            Term::GanOcExtra => &mut self.gan_oc_extra,
            Term::CycVc => &mut self.cyc_vc,
            Term::CycOc => &mut self.cyc_oc,
            Term::ExcycOc => &mut self.excyc_oc,
            Term::DirOc2Vc => &mut self.dir_oc2vc,
            Term::DirVc2Oc => &mut self.dir_vc2oc,
            Term::IdenVc => &mut self.iden_vc,
            Term::IdenOc => &mut self.iden_oc,
        };
        *slot = v;
    }

    pub fn set_disc(&mut self, role: DiscRole, v: f64) {
        match role {
            DiscRole::Dir => self.d_dir = v,
            DiscRole::OcExtra => self.d_oc = v,
            DiscRole::Vc => self.d_vc = v,
            DiscRole::OcSingle => self.d_oc_single = v,
        }
    }

    pub fn disc(&self, role: DiscRole) -> f64 {
        match role {
            DiscRole::Dir => self.d_dir,
            DiscRole::OcExtra => self.d_oc,
            DiscRole::Vc => self.d_vc,
            DiscRole::OcSingle => self.d_oc_single,
        }
    }

    pub fn all_finite(&self) -> bool {
        Term::ALL.iter().all(|&t| self.get(t).is_finite())
            && [self.total, self.d_dir, self.d_oc, self.d_vc, self.d_oc_single]
                .iter()
                .all(|v| v.is_finite())
    }
}

/// Generator-side loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    GanVc,
    GanOc,
    GanOcExtra,
    CycVc,
    CycOc,
    ExcycOc,
    DirOc2Vc,
    DirVc2Oc,
    IdenVc,
    IdenOc,
}

impl Term {
    pub const ALL: [Term; 10] = [
        Term::GanVc,
        Term::GanOc,
        Term::GanOcExtra,
        Term::CycVc,
        Term::CycOc,
        Term::ExcycOc,
        Term::DirOc2Vc,
        Term::DirVc2Oc,
        Term::IdenVc,
        Term::IdenOc,
    ];
}

/// Terms of the generator objective of `variant` with their weights.
pub fn generator_terms(variant: Variant, w: &LossWeights) -> Vec<(Term, f64)> {
    match variant {
        Variant::XdCycleGan => vec![
            (Term::ExcycOc, w.lambda),
            (Term::CycVc, w.lambda),
            (Term::DirOc2Vc, 1.0),
            (Term::DirVc2Oc, 1.0),
            (Term::GanOcExtra, w.alpha),
            (Term::IdenVc, w.gamma),
        ],
        Variant::XCycleGan => vec![
            (Term::ExcycOc, w.lambda),
            (Term::CycVc, w.lambda),
            (Term::GanOc, 1.0),
            (Term::GanVc, 1.0),
            (Term::GanOcExtra, w.alpha),
            (Term::IdenVc, w.gamma),
        ],
        Variant::CycleGan => vec![
            (Term::CycOc, w.lambda),
            (Term::CycVc, w.lambda),
            (Term::GanOc, 1.0),
            (Term::GanVc, 1.0),
            (Term::IdenVc, w.gamma),
            (Term::IdenOc, w.gamma),
        ],
    }
}

/// Graph nodes of one generator-objective evaluation.
pub struct GeneratorPass {
    pub total: Var,
    pub terms: Vec<(Term, Var)>,
    /// `G_vc(a)`.
    pub fake_vc: Var,
    /// `G_oc(b)`.
    pub fake_oc: Var,
    /// `G_oc(G_vc(a))`.
    pub rec_oc: Var,
}

fn require_roles<T: Real>(model: &ModelBundle<T>, variant: Variant) -> Result<()> {
    for &role in variant.roles() {
        model.disc(role)?;
    }
    Ok(())
}

/// Builds the generator objective of `variant` on appearance batch `a` and
/// structure batch `b`. Discriminator parameters are bound as constants;
/// generator parameters are bound with `trainable`.
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    variant: Variant,
    w: &LossWeights,
    model: &ModelBundle<T>,
    a: Var,
    b: Var,
    trainable: bool,
    hook: FeedHook,
) -> Result<GeneratorPass> {
    w.validate()?;
    require_roles(model, variant)?;
    check_batch(g, a, "empty appearance batch")?;
    check_batch(g, b, "empty structure batch")?;
    let g_vc = |g: &mut Graph<T>, x: Var| model.g_vc.forward(g, x, trainable);
    let g_oc = |g: &mut Graph<T>, x: Var| model.g_oc.forward(g, x, trainable);
    let single = |g: &mut Graph<T>, role: DiscRole, x: Var| -> Result<Var> { model.disc(role)?.forward(g, x, false) };

    let fake_vc = g_vc(g, a)?;
    let fake_oc = g_oc(g, b)?;
    let rec_oc = g_oc(g, fake_vc)?;
    let mut terms = Vec::new();

    let back_vc = g_vc(g, fake_oc)?;
    terms.push((Term::CycVc, g.mean_abs_diff(b, back_vc)?));
    let lifted = match_channels(g, b, g.value(a).dims4()?.1)?;
    let iden = g_vc(g, lifted)?;
    terms.push((Term::IdenVc, g.mean_abs_diff(iden, b)?));

    if variant == Variant::CycleGan {
        terms.push((Term::CycOc, g.mean_abs_diff(a, rec_oc)?));
        let lowered = match_channels(g, a, g.value(b).dims4()?.1)?;
        let iden = g_oc(g, lowered)?;
        terms.push((Term::IdenOc, g.mean_abs_diff(iden, a)?));
    } else {
        let again = g_vc(g, rec_oc)?;
        terms.push((Term::ExcycOc, g.mean_abs_diff(fake_vc, again)?));
        hook(DiscRole::OcExtra, &[Provenance::ReconstructedAppearance]);
        let s = single(g, DiscRole::OcExtra, rec_oc)?;
        terms.push((Term::GanOcExtra, score_loss(g, s, true, w)?));
    }

    if variant == Variant::XdCycleGan {
        let d = model.disc(DiscRole::Dir)?;
        hook(DiscRole::Dir, &[Provenance::RealAppearance, Provenance::TranslatedStructure]);
        let pos = directional_forward(d, g, a, fake_vc, false)?;
        hook(DiscRole::Dir, &[Provenance::TranslatedAppearance, Provenance::RealStructure]);
        let neg = directional_forward(d, g, fake_oc, b, false)?;
        terms.push((Term::DirOc2Vc, score_loss(g, pos, false, w)?));
        terms.push((Term::DirVc2Oc, score_loss(g, neg, true, w)?));
    } else {
        hook(DiscRole::OcSingle, &[Provenance::TranslatedAppearance]);
        let s = single(g, DiscRole::OcSingle, fake_oc)?;
        terms.push((Term::GanOc, score_loss(g, s, true, w)?));
        hook(DiscRole::Vc, &[Provenance::TranslatedStructure]);
        let s = single(g, DiscRole::Vc, fake_vc)?;
        terms.push((Term::GanVc, score_loss(g, s, true, w)?));
    }

    let weighted: Vec<(Var, f64)> = generator_terms(variant, w)
        .into_iter()
        .map(|(term, k)| {
            let v = terms.iter().find(|(t, _)| *t == term).expect("every weighted term is built").1;
            (v, k)
        })
        .collect();
    let total = g.combine(&weighted)?;
    Ok(GeneratorPass {
        total,
        terms,
        fake_vc,
        fake_oc,
        rec_oc,
    })
}

/// A batch entering a discriminator with the origin of each of its images.
#[derive(Clone, Debug)]
pub struct Tagged {
    pub var: Var,
    pub tags: Vec<Provenance>,
}

impl Tagged {
    pub fn uniform<T: Real>(g: &Graph<T>, var: Var, tag: Provenance) -> Result<Tagged> {
        let n = g.value(var).dims4()?.0;
        Ok(Tagged { var, tags: vec![tag; n] })
    }
}

/// Inputs of the discriminator losses. Directional pairs are
/// (appearance, structure).
#[derive(Clone, Debug)]
pub struct DiscriminatorFeed {
    pub real_a: Tagged,
    pub real_b: Tagged,
    pub fake_vc: Tagged,
    pub fake_oc: Tagged,
    pub rec_oc: Tagged,
    /// (real appearance, its translated structure).
    pub dir_pos: (Tagged, Tagged),
    /// (translated appearance, its real structure).
    pub dir_neg: (Tagged, Tagged),
}

impl DiscriminatorFeed {
    /// The feed of current generator outputs, without any history.
    pub fn current<T: Real>(g: &Graph<T>, a: Var, b: Var, fake_vc: Var, fake_oc: Var, rec_oc: Var) -> Result<Self> {
        use Provenance::*;
        let t = |v, p| Tagged::uniform(g, v, p);
        Ok(DiscriminatorFeed {
            real_a: t(a, RealAppearance)?,
            real_b: t(b, RealStructure)?,
            fake_vc: t(fake_vc, TranslatedStructure)?,
            fake_oc: t(fake_oc, TranslatedAppearance)?,
            rec_oc: t(rec_oc, ReconstructedAppearance)?,
            dir_pos: (t(a, RealAppearance)?, t(fake_vc, TranslatedStructure)?),
            dir_neg: (t(fake_oc, TranslatedAppearance)?, t(b, RealStructure)?),
        })
    }
}

fn pair_tags(a: &Tagged, b: &Tagged) -> Vec<Provenance> {
    a.tags.iter().chain(&b.tags).copied().collect()
}

/// Loss of every discriminator of `variant`, binding discriminator
/// parameters with `trainable`. The hook sees the tags of every batch a
/// discriminator is evaluated on.
pub fn discriminator_losses<T: Real>(
    g: &mut Graph<T>,
    variant: Variant,
    w: &LossWeights,
    model: &ModelBundle<T>,
    feed: &DiscriminatorFeed,
    trainable: bool,
    hook: FeedHook,
) -> Result<Vec<(DiscRole, Var)>> {
    w.validate()?;
    require_roles(model, variant)?;
    let mut out = Vec::new();
    for &role in variant.roles() {
        let d = model.disc(role)?;
        let loss = match role {
            DiscRole::Dir => {
                let (pa, pb) = &feed.dir_pos;
                let (na, nb) = &feed.dir_neg;
                hook(role, &pair_tags(pa, pb));
                let pos = directional_forward(d, g, pa.var, pb.var, trainable)?;
                hook(role, &pair_tags(na, nb));
                let neg = directional_forward(d, g, na.var, nb.var, trainable)?;
                let lp = score_loss(g, pos, true, w)?;
                let ln = score_loss(g, neg, false, w)?;
                g.add(lp, ln)?
            }
            _ => {
                let (real, fake) = match role {
                    DiscRole::OcExtra => (&feed.real_a, &feed.rec_oc),
                    DiscRole::OcSingle => (&feed.real_a, &feed.fake_oc),
                    _ => (&feed.real_b, &feed.fake_vc),
                };
                hook(role, &real.tags);
                let sr = d.forward(g, real.var, trainable)?;
                hook(role, &fake.tags);
                let sf = d.forward(g, fake.var, trainable)?;
                let lr = score_loss(g, sr, true, w)?;
                let lf = score_loss(g, sf, false, w)?;
                g.add(lr, lf)?
            }
        };
        out.push((role, loss));
    }
    Ok(out)
}

/// Evaluates the full objective of `variant` on one pair of batches, with
/// the discriminator losses computed on the current (unbuffered) fakes.
pub fn total_objective<T: Real>(
    variant: Variant,
    w: &LossWeights,
    model: &ModelBundle<T>,
    batch_a: &Tensor<T>,
    batch_b: &Tensor<T>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let a = g.constant(batch_a.clone());
    let b = g.constant(batch_b.clone());
    let pass = generator_objective(&mut g, variant, w, model, a, b, false, &mut |_, _| {})?;
    let mut bd = LossBreakdown::default();
    for &(term, v) in &pass.terms {
        bd.set(term, g.scalar(v).as_f64());
    }
    bd.total = g.scalar(pass.total).as_f64();
    let feed = DiscriminatorFeed::current(&g, a, b, pass.fake_vc, pass.fake_oc, pass.rec_oc)?;
    for (role, v) in discriminator_losses(&mut g, variant, w, model, &feed, false, &mut |_, _| {})? {
        bd.set_disc(role, g.scalar(v).as_f64());
    }
    Ok(bd)
}
