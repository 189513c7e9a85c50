//! Training losses. Every function works on batches and returns a scalar
//! `Var` so the result can be differentiated.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use gradtape::{grad, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PerceptualNet;
use crate::calibration::IfsrMargins;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub identity: f64,
    pub reconstruction: f64,
    pub perceptual: f64,
    pub cycle: f64,
    pub ifsr: f64,
    pub gp: f64,
    /// Multiplier on the generator's adversarial term. Not a free weight in
    /// the reference objective, where it is fixed at 1.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            identity: 10.0,
            reconstruction: 5.0,
            perceptual: 0.2,
            cycle: 1.0,
            ifsr: 1.0,
            gp: 10.0,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.identity,
            self.reconstruction,
            self.perceptual,
            self.cycle,
            self.ifsr,
            self.gp,
            self.adversarial,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Adversarial => self.adversarial,
            Term::Identity => self.identity,
            Term::Reconstruction => self.reconstruction,
            Term::Perceptual => self.perceptual,
            Term::Cycle => self.cycle,
            Term::Ifsr => self.ifsr,
        }
    }
}

/// Generator loss terms, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Adversarial,
    Identity,
    Reconstruction,
    Perceptual,
    Cycle,
    Ifsr,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Adversarial,
        Term::Identity,
        Term::Reconstruction,
        Term::Perceptual,
        Term::Cycle,
        Term::Ifsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Adversarial => "adv",
            Term::Identity => "id",
            Term::Reconstruction => "rec",
            Term::Perceptual => "perc",
            Term::Cycle => "cyc",
            Term::Ifsr => "ifsr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpMode {
    #[default]
    Interpolated,
    R1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IfsrMode {
    /// `Σ max(d − m·s, 0)`.
    #[default]
    Hinge,
    /// `Σ min(d − m·s, 0)`, kept for comparison.
    Literal,
}

/// Per-term values, their weights and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn recompute_total(&self) -> f64 {
        self.terms
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(1.0) * v)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        self.terms
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn check_same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = x.shape().first().copied().unwrap_or(1);
    x.reshape(&[n, x.value().numel() / n.max(1)])
}

/// Row-wise `1 − cos` of two `[N, D]` batches, shape `[N]`. `eps` keeps
/// all-zero rows finite; pass 0 to keep the plain quotient.
fn cosine_distance_rows<T: Scalar>(a: &Var<T>, b: &Var<T>, eps: f64) -> Var<T> {
    let n = a.shape()[0];
    let dot = a.mul(b).sum_to(&[n, 1]);
    let na = a.square().sum_to(&[n, 1]).add_scalar(T::lit(eps));
    let nb = b.square().sum_to(&[n, 1]).add_scalar(T::lit(eps));
    let cos = dot.div(&na.mul(&nb).sqrt());
    cos.neg().add_scalar(T::one()).reshape(&[n])
}

/// Mean over the batch of `1 − cos(z_s, z_c)`.
pub fn identity_loss<T: Scalar>(z_s: &Var<T>, z_c: &Var<T>) -> Result<Var<T>> {
    check_same_shape(z_s, z_c)?;
    let (a, b) = (rows(z_s), rows(z_c));
    for v in [&a, &b] {
        let d = v.shape()[1];
        if v.value().data().chunks(d).any(|r| r.iter().all(|x| *x == T::zero())) {
            return Err(Error::ZeroVector);
        }
    }
    Ok(cosine_distance_rows(&a, &b, 0.0).mean())
}

/// Per-sample mean absolute difference, shape `[N]`.
fn l1_rows<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let n = a.shape()[0];
    rows(&a.sub(b).abs()).mean_to(&[n, 1]).reshape(&[n])
}

fn same_mask<T: Scalar>(same: &Tensor<T>, n: usize) -> Result<Var<T>> {
    if same.shape() != [n] {
        return Err(Error::ShapeMismatch(format!("same-pair mask {:?} for {n} images", same.shape())));
    }
    Ok(Var::constant(same.clone()))
}

/// Batch mean of `same_i · mean|x_t − x_c|`; different-identity pairs add exactly 0.
pub fn reconstruction_loss<T: Scalar>(x_t: &Var<T>, x_c: &Var<T>, same: &Tensor<T>) -> Result<Var<T>> {
    check_same_shape(x_t, x_c)?;
    let m = same_mask(same, x_t.shape()[0])?;
    Ok(l1_rows(x_t, x_c).mul(&m).mean())
}

/// Sum over the first five taps of the masked per-tap mean L1.
pub fn perceptual_loss<T: Scalar>(
    x_t: &Var<T>,
    x_c: &Var<T>,
    same: &Tensor<T>,
    net: &dyn PerceptualNet<T>,
) -> Result<Var<T>> {
    check_same_shape(x_t, x_c)?;
    let m = same_mask(same, x_t.shape()[0])?;
    let (ft, fc) = (net.taps(x_t), net.taps(x_c));
    if ft.len() < 5 {
        return Err(Error::ShapeMismatch(format!("perceptual net exposes {} taps, need 5", ft.len())));
    }
    let mut total = Var::scalar(T::zero());
    for (a, b) in ft.iter().zip(&fc).take(5) {
        total = total.add(&l1_rows(a, b).mul(&m).mean());
    }
    Ok(total)
}

/// `mean|x_t − G(x_c, z_t)|`, where `z_t` is the target's own identity.
pub fn cycle_loss<T: Scalar>(
    x_t: &Var<T>,
    x_c: &Var<T>,
    z_t: &Var<T>,
    generator: &dyn Fn(&Var<T>, &Var<T>) -> Result<Var<T>>,
) -> Result<Var<T>> {
    let back = generator(x_c, z_t)?;
    check_same_shape(x_t, &back)?;
    Ok(x_t.sub(&back).abs().mean())
}

/// Per-block cosine distances between flattened feature maps, `[N]` each.
/// `blocks` are 1-based backbone indices into `t` and `c`.
pub fn block_distances<T: Scalar>(
    t: &[Var<T>],
    c: &[Var<T>],
    blocks: RangeInclusive<usize>,
) -> Result<Vec<(usize, Var<T>)>> {
    let (first, last) = (*blocks.start(), *blocks.end());
    if first < 1 || first > last || last > t.len().min(c.len()) {
        return Err(Error::IndexOutOfRange {
            first,
            last,
            count: t.len().min(c.len()),
        });
    }
    blocks
        .map(|i| {
            let (a, b) = (&t[i - 1], &c[i - 1]);
            check_same_shape(a, b)?;
            Ok((i, cosine_distance_rows(&rows(a), &rows(b), 1e-12)))
        })
        .collect()
}

/// `Σ_i h(d_i − m_i·s)` averaged over the batch, with `h = max(·, 0)` in
/// hinge mode and `min(·, 0)` in literal mode.
pub fn ifsr_from_distances<T: Scalar>(
    distances: &[(usize, Var<T>)],
    margins: &IfsrMargins,
    scale: f64,
    mode: IfsrMode,
) -> Result<Var<T>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("margin scale must be positive, got {scale}")));
    }
    let mut total = Var::scalar(T::zero());
    for (block, d) in distances {
        let m = margins.margin(*block).ok_or(Error::MissingMargin(*block))?;
        let u = d.add_scalar(T::lit(-m * scale));
        let h = match mode {
            IfsrMode::Hinge => u.relu(),
            IfsrMode::Literal => u.neg().relu().neg(),
        };
        total = total.add(&h.mean());
    }
    Ok(total)
}

/// IFSR over block outputs of the target and the changed face.
pub fn ifsr_loss<T: Scalar>(
    t_blocks: &[Var<T>],
    c_blocks: &[Var<T>],
    blocks: RangeInclusive<usize>,
    margins: &IfsrMargins,
    scale: f64,
    mode: IfsrMode,
) -> Result<Var<T>> {
    for b in blocks.clone() {
        margins.margin(b).ok_or(Error::MissingMargin(b))?;
    }
    let d = block_distances(t_blocks, c_blocks, blocks)?;
    ifsr_from_distances(&d, margins, scale, mode)
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss<T: Scalar>(real: &Var<T>, fake: &Var<T>) -> Var<T> {
    let r = real.neg().add_scalar(T::one()).relu().mean();
    let f = fake.add_scalar(T::one()).relu().mean();
    r.add(&f)
}

/// `−mean(fake)`.
pub fn hinge_g_loss<T: Scalar>(fake: &Var<T>) -> Var<T> {
    fake.mean().neg()
}

/// Interpolated mode: `mean((‖∇D(x̂)‖ − 1)²)` at `x̂ = u·real + (1 − u)·fake`
/// with one `u ~ U(0, 1)` per sample. R1 mode: `mean(‖∇D(real)‖²)`.
/// The result is differentiable with respect to the critic's parameters.
pub fn gradient_penalty<T: Scalar, R: Rng + ?Sized>(
    critic: &dyn Fn(&Var<T>) -> Result<Var<T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mode: GpMode,
    rng: &mut R,
) -> Result<Var<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    let per = real.numel() / n.max(1);
    let x = match mode {
        GpMode::Interpolated => {
            let mut data = Vec::with_capacity(real.numel());
            for i in 0..n {
                let u = T::lit(rng.random::<f64>());
                let (r, f) = (&real.data()[i * per..(i + 1) * per], &fake.data()[i * per..(i + 1) * per]);
                data.extend(r.iter().zip(f).map(|(&a, &b)| u * a + (T::one() - u) * b));
            }
            Tensor::from_vec(real.shape(), data)
        }
        GpMode::R1 => real.clone(),
    };
    let x = Var::param(x);
    let scores = critic(&x)?;
    let g = grad(&scores.sum(), &[&x], true).remove(0);
    let sq = rows(&g).square().sum_to(&[n, 1]);
    Ok(match mode {
        GpMode::Interpolated => sq.sqrt().add_scalar(-T::one()).square().mean(),
        GpMode::R1 => sq.mean(),
    })
}

/// Weighted sum of the present terms. Terms with weight 0 are reported but
/// do not enter the differentiable total.
pub fn total_generator_loss<T: Scalar>(terms: &[(Term, Var<T>)], weights: &LossWeights) -> (Var<T>, LossReport) {
    let mut total = Var::scalar(T::zero());
    let mut report = LossReport::default();
    for (term, v) in terms {
        let w = weights.weight(*term);
        let value = v.value().item().as_f64();
        report.terms.insert(term.name().into(), value);
        report.weights.insert(term.name().into(), w);
        if w != 0.0 {
            total = total.add(&v.scale(T::lit(w)));
        }
    }
    report.total = report.recompute_total();
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::IdentityTaps;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::constant(Tensor::from_f64(shape, data))
    }

    fn margins(pairs: &[(usize, f64)]) -> IfsrMargins {
        IfsrMargins::new(pairs.iter().copied().collect(), 1, "test", "test").unwrap()
    }

    #[test]
    fn identity_loss_examples() {
        let a = v(&[1, 2], &[1.0, 0.0]);
        assert!(identity_loss(&a, &a).unwrap().item().abs() < 1e-15);
        assert!((identity_loss(&a, &v(&[1, 2], &[-1.0, 0.0])).unwrap().item() - 2.0).abs() < 1e-15);
        assert!((identity_loss(&a, &v(&[1, 2], &[0.0, 3.0])).unwrap().item() - 1.0).abs() < 1e-15);
        assert!(matches!(identity_loss(&a, &v(&[1, 2], &[0.0, 0.0])), Err(Error::ZeroVector)));
    }

    #[test]
    fn reconstruction_examples() {
        let t = v(&[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let c = t.add_scalar(0.5);
        let yes = Tensor::from_f64(&[1], &[1.0]);
        let no = Tensor::from_f64(&[1], &[0.0]);
        assert_eq!(reconstruction_loss(&t, &c, &no).unwrap().item(), 0.0);
        assert_eq!(reconstruction_loss(&t, &t, &yes).unwrap().item(), 0.0);
        assert!((reconstruction_loss(&t, &c, &yes).unwrap().item() - 0.5).abs() < 1e-12);
        assert!(reconstruction_loss(&t, &v(&[1, 1, 1, 4], &[0.0; 4]), &yes).is_err());
    }

    #[test]
    fn perceptual_with_identity_taps_is_five_l1() {
        let t = v(&[1, 3, 2, 2], &[0.0; 12]);
        let c = t.add_scalar(0.25);
        let yes = Tensor::from_f64(&[1], &[1.0]);
        let p = perceptual_loss(&t, &c, &yes, &IdentityTaps).unwrap().item();
        assert!((p - 1.25).abs() < 1e-12);
        let no = Tensor::from_f64(&[1], &[0.0]);
        assert_eq!(perceptual_loss(&t, &c, &no, &IdentityTaps).unwrap().item(), 0.0);
    }

    #[test]
    fn cycle_examples() {
        let t = v(&[1, 3, 2, 2], &[0.5; 12]);
        let z = v(&[1, 2], &[1.0, 0.0]);
        let ident = |x: &Var<f64>, _: &Var<f64>| Ok(x.clone());
        assert_eq!(cycle_loss(&t, &t, &z, &ident).unwrap().item(), 0.0);
        let zero = |x: &Var<f64>, _: &Var<f64>| Ok(x.scale(0.0));
        assert!((cycle_loss(&t, &t, &z, &zero).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ifsr_hinge_and_literal() {
        let m = margins(&[(1, 0.5)]);
        let at = |d: f64, mode| ifsr_from_distances(&[(1, v(&[1], &[d]))], &m, 1.2, mode).unwrap().item();
        assert_eq!(at(0.6, IfsrMode::Hinge), 0.0);
        assert!((at(0.7, IfsrMode::Hinge) - 0.1).abs() < 1e-12);
        assert_eq!(at(0.2, IfsrMode::Hinge), 0.0);
        assert!((at(0.2, IfsrMode::Literal) + 0.4).abs() < 1e-12);
        assert_eq!(at(0.9, IfsrMode::Literal), 0.0);
        let none = ifsr_from_distances(&[(2, v(&[1], &[0.1]))], &m, 1.2, IfsrMode::Hinge);
        assert!(matches!(none, Err(Error::MissingMargin(2))));
    }

    #[test]
    fn ifsr_of_identical_features_is_zero() {
        let f = vec![v(&[1, 2, 2, 2], &[0.3, -0.1, 0.5, 0.2, 0.9, -0.4, 0.1, 0.0]); 3];
        let m = margins(&[(1, 0.1), (2, 0.1), (3, 0.1)]);
        let l = ifsr_loss(&f, &f, 1..=3, &m, 1.2, IfsrMode::Hinge).unwrap();
        assert!(l.item().abs() < 1e-12);
        assert!(matches!(
            ifsr_loss(&f, &f, 2..=4, &margins(&[(2, 0.1), (3, 0.1), (4, 0.1)]), 1.2, IfsrMode::Hinge),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn hinge_examples() {
        let s = |x: f64| v(&[2], &[x, x]);
        assert_eq!(hinge_d_loss(&s(1.0), &s(-1.0)).item(), 0.0);
        assert_eq!(hinge_d_loss(&s(0.0), &s(0.0)).item(), 2.0);
        assert_eq!(hinge_d_loss(&s(2.0), &s(-2.0)).item(), 0.0);
        assert_eq!(hinge_g_loss(&s(0.0)).item(), 0.0);
        assert_eq!(hinge_g_loss(&s(3.0)).item(), -3.0);
    }

    #[test]
    fn gradient_penalty_of_linear_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dim = 12;
        let a: Vec<f64> = (0..dim).map(|i| (i as f64 + 1.0).sin()).collect();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit = Var::constant(Tensor::from_vec(&[1, 3, 2, 2], a.iter().map(|x| x / norm).collect()));
        let real = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|i| (i as f64 * 0.37).cos()).collect());
        let fake = real.map(|x| -x);
        for (k, want) in [(1.0, 0.0), (2.0, 1.0)] {
            let u = unit.scale(k);
            let critic = |x: &Var<f64>| Ok(x.mul(&u).sum_to(&[2, 1, 1, 1]).reshape(&[2]));
            let p = gradient_penalty(&critic, &real, &fake, GpMode::Interpolated, &mut rng).unwrap();
            assert!((p.item() - want).abs() < 1e-12);
        }
        let constant = |x: &Var<f64>| Ok(Var::constant(Tensor::full(&[x.shape()[0]], 3.0)));
        let p = gradient_penalty(&constant, &real, &fake, GpMode::Interpolated, &mut rng).unwrap();
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let (t, r) = total_generator_loss(&[(Term::Identity, Var::scalar(1.0f64))], &w);
        assert_eq!(t.item(), 10.0);
        assert_eq!(r.total, 10.0);
        let terms = [
            (Term::Adversarial, Var::scalar(0.3)),
            (Term::Identity, Var::scalar(0.2)),
            (Term::Cycle, Var::scalar(0.7)),
        ];
        let (_, r1) = total_generator_loss(&terms, &w);
        let doubled = LossWeights {
            identity: 20.0,
            cycle: 2.0,
            ..w.clone()
        };
        let (_, r2) = total_generator_loss(&terms, &doubled);
        assert!(((r2.total - 0.3) - 2.0 * (r1.total - 0.3)).abs() < 1e-12);
    }
}
