//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops over `f64` and never calls
//! the library's numeric code, so agreement with the library is evidence
//! rather than tautology.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdcycle::autodiff::{ConvSpec, Graph, PadMode, Var};
use xdcycle::losses::*;
use xdcycle::Tensor;

/// Dense `n × c × h × w` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Arr {
        Arr { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn random(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Arr {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Arr { n, c, h, w, data }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.n, self.c, self.h, self.w], self.data.clone()).unwrap()
    }

    pub fn of(t: &Tensor<f64>) -> Arr {
        let s = t.shape();
        Arr { n: s[0], c: s[1], h: s[2], w: s[3], data: t.data().to_vec() }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Direct-summation 2-D convolution (cross-correlation). `w` is
/// `cout × cin × k × k`.
pub fn conv(x: &Arr, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, pad: usize, reflective: bool) -> Arr {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros(x.n, cout, ho, wo);
    for n in 0..x.n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.get(o).copied().unwrap_or(0.0);
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if reflective {
                                    x.at(n, ci, reflect(iy, x.h), reflect(ix, x.w))
                                } else if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    0.0
                                } else {
                                    x.at(n, ci, iy as usize, ix as usize)
                                };
                                s += w[((o * x.c + ci) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = s;
                }
            }
        }
    }
    out
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let mut out = Arr::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for y in 0..a.h {
            for x in 0..a.w {
                for c in 0..a.c {
                    *out.at_mut(n, c, y, x) = a.at(n, c, y, x);
                }
                for c in 0..b.c {
                    *out.at_mut(n, a.c + c, y, x) = b.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// 0.299 R + 0.587 G + 0.114 B.
pub fn luma(a: &Arr) -> Arr {
    let mut out = Arr::zeros(a.n, 1, a.h, a.w);
    for n in 0..a.n {
        for y in 0..a.h {
            for x in 0..a.w {
                *out.at_mut(n, 0, y, x) = 0.299 * a.at(n, 0, y, x) + 0.587 * a.at(n, 1, y, x) + 0.114 * a.at(n, 2, y, x);
            }
        }
    }
    out
}

pub fn replicate(a: &Arr, c: usize) -> Arr {
    let mut out = a.clone();
    for _ in 1..c {
        out = concat(&out, a);
    }
    out
}

pub fn l1(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

pub const LOG_EPS: f64 = 1e-8;

/// `−mean ln D` (real) or `−mean ln(1 − D)` (fake).
pub fn bce(scores: &Arr, real: bool) -> f64 {
    let mut s = 0.0;
    for &d in &scores.data {
        let p = if real { d } else { 1.0 - d };
        s -= p.max(LOG_EPS).ln();
    }
    s / scores.data.len() as f64
}

/// `mean (D − 1)²` (real) or `mean D²` (fake).
pub fn lsq(scores: &Arr, real: bool) -> f64 {
    let t = if real { 1.0 } else { 0.0 };
    scores.data.iter().map(|d| (d - t) * (d - t)).sum::<f64>() / scores.data.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-layer network: 3×3 conv → tanh → 1×1 conv → head. As a generator
/// (`pad` 1, tanh head) it keeps the spatial size; as a discriminator
/// (`pad` 0, sigmoid head, one output channel) it turns 4×4 inputs into a
/// 2×2 score grid.
#[derive(Clone, Debug)]
pub struct Mini {
    pub cin: usize,
    pub hidden: usize,
    pub cout: usize,
    pub pad: usize,
    pub sigmoid_head: bool,
    /// `[w1, b1, w2, b2]`.
    pub params: Vec<Vec<f64>>,
}

impl Mini {
    fn new(cin: usize, hidden: usize, cout: usize, pad: usize, sigmoid_head: bool, rng: &mut ChaCha8Rng) -> Mini {
        let mut r = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let params = vec![
            r(hidden * cin * 9, 0.6),
            r(hidden, 0.3),
            r(cout * hidden, 0.8),
            r(cout, 0.3),
        ];
        Mini { cin, hidden, cout, pad, sigmoid_head, params }
    }

    pub fn generator(cin: usize, cout: usize, seed: u64) -> Mini {
        Mini::new(cin, 3, cout, 1, false, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn discriminator(cin: usize, seed: u64) -> Mini {
        Mini::new(cin, 3, 1, 0, true, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.hidden, self.cin, 3, 3],
            vec![self.hidden],
            vec![self.cout, self.hidden, 1, 1],
            vec![self.cout],
        ]
    }

    pub fn oracle(&self, x: &Arr) -> Arr {
        let p = &self.params;
        let h = conv(x, &p[0], &p[1], self.hidden, 3, 1, self.pad, false).map(f64::tanh);
        let o = conv(&h, &p[2], &p[3], self.cout, 1, 1, 0, false);
        if self.sigmoid_head {
            o.map(sigmoid)
        } else {
            o.map(f64::tanh)
        }
    }

    /// Binds the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph<f64>) -> Vec<Var> {
        self.params
            .iter()
            .zip(self.shapes())
            .map(|(p, s)| g.variable(Tensor::from_vec(&s, p.clone()).unwrap()))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph<f64>, vars: &[Var], x: Var) -> xdcycle::Result<Var> {
        let h = g.conv2d(x, vars[0], Some(vars[1]), ConvSpec::new(1, self.pad, PadMode::Zero))?;
        let h = g.tanh(h);
        let o = g.conv2d(h, vars[2], Some(vars[3]), ConvSpec::new(1, 0, PadMode::Zero))?;
        Ok(if self.sigmoid_head { g.sigmoid(o) } else { g.tanh(o) })
    }
}

/// Central finite difference of `f` with respect to every entry of the
/// slice `get` selects.
pub fn finite_difference<S: ?Sized>(state: &mut S, get: impl Fn(&mut S) -> &mut [f64], f: impl Fn(&S) -> f64, h: f64) -> Vec<f64> {
    let n = get(state).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = get(state)[i];
        get(state)[i] = orig + h;
        let up = f(state);
        get(state)[i] = orig - h;
        let down = f(state);
        get(state)[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error, with an absolute floor for entries
/// near zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Structural similarity by explicit summation over every 11×11 window
/// with 2-D Gaussian weights.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut wts = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            wts[i * n + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += wts[i * n + j];
        }
    }
    for v in &mut wts {
        *v /= total;
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = wts[i * n + j];
                    ma += k * a[(y + i) * w + x + j];
                    mb += k * b[(y + i) * w + x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = wts[i * n + j];
                    let da = a[(y + i) * w + x + j] - ma;
                    let db = b[(y + i) * w + x + j] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Random 4×4 batches with miniature networks for every role.
pub struct Scene {
    pub a: Arr,
    pub b: Arr,
    pub g_vc: Mini,
    pub g_oc: Mini,
    pub d_vc: Mini,
    pub d_oc: Mini,
    pub d_dir: Mini,
}

pub fn scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Scene {
        a: Arr::random(2, 3, 4, 4, &mut rng),
        b: Arr::random(2, 1, 4, 4, &mut rng),
        g_vc: Mini::generator(3, 1, seed + 1),
        g_oc: Mini::generator(1, 3, seed + 2),
        d_vc: Mini::discriminator(1, seed + 3),
        d_oc: Mini::discriminator(3, seed + 4),
        d_dir: Mini::discriminator(4, seed + 5),
    }
}

pub struct Bound {
    pub a: Var,
    pub b: Var,
    pub g_vc: Vec<Var>,
    pub g_oc: Vec<Var>,
    pub d_vc: Vec<Var>,
    pub d_oc: Vec<Var>,
    pub d_dir: Vec<Var>,
}

pub fn bind(g: &mut Graph<f64>, s: &Scene) -> Bound {
    Bound {
        a: g.constant(s.a.tensor()),
        b: g.constant(s.b.tensor()),
        g_vc: s.g_vc.bind(g),
        g_oc: s.g_oc.bind(g),
        d_vc: s.d_vc.bind(g),
        d_oc: s.d_oc.bind(g),
        d_dir: s.d_dir.bind(g),
    }
}

/// Every generator term and the two single-image and directional
/// discriminator losses, built with the library on the miniatures.
pub struct LibraryTerms {
    pub g: Graph<f64>,
    pub v: Bound,
    pub terms: Vec<(Term, Var)>,
    pub d_losses: Vec<(&'static str, Var)>,
}

pub fn library_graph(s: &Scene, w: &LossWeights) -> LibraryTerms {
    let mut g = Graph::new();
    let v = bind(&mut g, s);
    let g_vc = |g: &mut Graph<f64>, x: Var| s.g_vc.forward(g, &v.g_vc, x);
    let g_oc = |g: &mut Graph<f64>, x: Var| s.g_oc.forward(g, &v.g_oc, x);
    let d_vc = |g: &mut Graph<f64>, x: Var| s.d_vc.forward(g, &v.d_vc, x);
    let d_oc = |g: &mut Graph<f64>, x: Var| s.d_oc.forward(g, &v.d_oc, x);
    let d_dir = |g: &mut Graph<f64>, x: Var, y: Var| {
        let p = g.concat_channels(&[x, y])?;
        s.d_dir.forward(g, &v.d_dir, p)
    };
    let fake_vc = g_vc(&mut g, v.a).unwrap();
    let fake_oc = g_oc(&mut g, v.b).unwrap();
    let rec = g_oc(&mut g, fake_vc).unwrap();
    let (d_vc_loss, gan_vc) = adversarial_loss(&mut g, &d_vc, v.b, fake_vc, w).unwrap();
    let (d_oc_loss, gan_oc) = adversarial_loss(&mut g, &d_oc, v.a, fake_oc, w).unwrap();
    let (_, gan_extra) = adversarial_loss(&mut g, &d_oc, v.a, rec, w).unwrap();
    let cyc_vc = cycle_loss(&mut g, &g_vc, &g_oc, v.b).unwrap();
    let cyc_oc = cycle_loss(&mut g, &g_oc, &g_vc, v.a).unwrap();
    let excyc = extended_cycle_loss(&mut g, &g_oc, &g_vc, v.a).unwrap();
    let dir = directional_loss(&mut g, &g_oc, &g_vc, &d_dir, v.a, v.b, w).unwrap();
    let lifted = match_channels(&mut g, v.b, 3).unwrap();
    let iden_vc = {
        let out = g_vc(&mut g, lifted).unwrap();
        g.mean_abs_diff(out, v.b).unwrap()
    };
    let lowered = match_channels(&mut g, v.a, 1).unwrap();
    let iden_oc = {
        let out = g_oc(&mut g, lowered).unwrap();
        g.mean_abs_diff(out, v.a).unwrap()
    };
    let terms = [
        (Term::GanVc, gan_vc),
        (Term::GanOc, gan_oc),
        (Term::GanOcExtra, gan_extra),
        (Term::CycVc, cyc_vc),
        (Term::CycOc, cyc_oc),
        (Term::ExcycOc, excyc),
        (Term::DirOc2Vc, dir.g_loss_b),
        (Term::DirVc2Oc, dir.g_loss_a),
        (Term::IdenVc, iden_vc),
        (Term::IdenOc, iden_oc),
    ]
    .to_vec();
    let d_losses = vec![("d_vc", d_vc_loss), ("d_oc", d_oc_loss), ("d_dir", dir.d_loss)];
    LibraryTerms { g, v, terms, d_losses }
}

pub fn library_terms(s: &Scene, w: &LossWeights) -> Vec<(Term, f64)> {
    let l = library_graph(s, w);
    l.terms.iter().map(|&(t, x)| (t, l.g.scalar(x))).collect()
}

pub fn oracle_terms(s: &Scene, score: fn(&Arr, bool) -> f64) -> Vec<(Term, f64)> {
    let fake_vc = s.g_vc.oracle(&s.a);
    let fake_oc = s.g_oc.oracle(&s.b);
    let rec = s.g_oc.oracle(&fake_vc);
    let pos = s.d_dir.oracle(&concat(&s.a, &fake_vc));
    let neg = s.d_dir.oracle(&concat(&fake_oc, &s.b));
    vec![
        (Term::GanVc, score(&s.d_vc.oracle(&fake_vc), true)),
        (Term::GanOc, score(&s.d_oc.oracle(&fake_oc), true)),
        (Term::GanOcExtra, score(&s.d_oc.oracle(&rec), true)),
        (Term::CycVc, l1(&s.b, &s.g_vc.oracle(&fake_oc))),
        (Term::CycOc, l1(&s.a, &rec)),
        (Term::ExcycOc, l1(&fake_vc, &s.g_vc.oracle(&rec))),
        (Term::DirOc2Vc, score(&pos, false)),
        (Term::DirVc2Oc, score(&neg, true)),
        (Term::IdenVc, l1(&s.g_vc.oracle(&replicate(&s.b, 3)), &s.b)),
        (Term::IdenOc, l1(&s.g_oc.oracle(&luma(&s.a)), &s.a)),
    ]
}


/// `x − blur(x)` with a direct 2-D Gaussian of radius ⌈3σ⌉ and edge
/// replication.
pub fn highpass_oracle(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            k.push((dy, dx, v));
            total += v;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for &(dy, dx, v) in &k {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                s += v * plane[yy * w + xx];
            }
            let i = y as usize * w + x as usize;
            out[i] = plane[i] - s / total;
        }
    }
    out
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
