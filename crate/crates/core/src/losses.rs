//! The six unsupervised loss terms and their weighted sum, built on the graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Region, Result};
use crate::network::NetworkOutputs;

/// Guard inside logarithms.
pub const LOG_EPS: f64 = 1e-8;
/// Smallest admissible soft-mask mass.
pub const MASS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Active contour term.
    pub lambda1: f64,
    /// Rank term.
    pub lambda2: f64,
    /// Tightness term.
    pub lambda3: f64,
    /// Reconstruction term.
    pub lambda4: f64,
    /// Variance term.
    pub lambda5: f64,
    /// Entropy term.
    pub lambda6: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1e-2,
            lambda3: 1e-3,
            lambda4: 1e-3,
            lambda5: 1e-3,
            lambda6: 1e-6,
            alpha: 1.0,
            beta: 2.0,
        }
    }
}

impl LossWeights {
    /// Only the active contour term.
    pub fn ac_only() -> Self {
        Self { lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, lambda5: 0.0, lambda6: 0.0, ..Self::default() }
    }

    /// Weights in the order of [`LossBreakdown`]'s terms: ac, rank, rec,
    /// tight, mv, me.
    pub fn lambdas(&self) -> [f64; 6] {
        [self.lambda1, self.lambda2, self.lambda4, self.lambda3, self.lambda5, self.lambda6]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.lambdas().into_iter().chain([self.alpha, self.beta]);
        if all.into_iter().any(|v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Variants of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossFlags {
    /// Use `S̄` instead of `S` inside the active contour term.
    pub ac_uses_s_bar: bool,
    /// Tightness as the raw sum of `S` instead of its mean.
    pub literal_tight: bool,
    /// `exp(+Var S)` instead of `exp(−Var S)`.
    pub literal_mv: bool,
    /// Treat `Γ` as a constant in backward.
    pub detach_gamma: bool,
}

/// Term values of one evaluation; `c1`, `c2` are averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ac: f64,
    pub rank: f64,
    pub rec: f64,
    pub tight: f64,
    pub mv: f64,
    pub me: f64,
    pub total: f64,
    pub c1: f64,
    pub c2: f64,
}

fn val<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().to_f64().unwrap()
}

/// Soft region means `c1 = Σ I·S / Σ S` and `c2 = Σ I·(1−S) / Σ (1−S)`.
pub fn region_means_soft<T: Real>(g: &mut Graph<T>, i: Var, s: Var) -> Result<(Var, Var)> {
    if g.shape(i) != g.shape(s) {
        return Err(Error::shape("region_means_soft", format!("{:?} vs {:?}", g.shape(i), g.shape(s))));
    }
    let inside = g.sum(s);
    let not_s = g.one_minus(s);
    let outside = g.sum(not_s);
    if val(g, inside) < MASS_EPS {
        return Err(Error::CollapsedMask(Region::Inside));
    }
    if val(g, outside) < MASS_EPS {
        return Err(Error::CollapsedMask(Region::Outside));
    }
    let is = g.mul(i, s)?;
    let num1 = g.sum(is);
    let ins = g.mul(i, not_s)?;
    let num2 = g.sum(ins);
    Ok((g.div(num1, inside)?, g.div(num2, outside)?))
}

/// `Γ = ‖∇S̄‖₁ · (α (I − c1)² − β (I − c2)²)`.
pub fn gamma_net<T: Real>(
    g: &mut Graph<T>,
    i: Var,
    s_bar: Var,
    c1: Var,
    c2: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if g.shape(i) != g.shape(s_bar) {
        return Err(Error::shape("gamma_net", format!("{:?} vs {:?}", g.shape(i), g.shape(s_bar))));
    }
    let grad = g.gradient_magnitude_l1(s_bar)?;
    let d1 = g.sub(i, c1)?;
    let d1 = g.square(d1);
    let d1 = g.scale(d1, T::lit(alpha));
    let d2 = g.sub(i, c2)?;
    let d2 = g.square(d2);
    let d2 = g.scale(d2, T::lit(beta));
    let diff = g.sub(d1, d2)?;
    g.mul(grad, diff)
}

/// Mean over voxels of `exp(Γ·S)` where `Γ ≤ 0` and `exp(−Γ·(1−S))` where
/// `Γ > 0`, evaluated as `exp(Γ·S − relu(Γ))`.
pub fn loss_ac<T: Real>(g: &mut Graph<T>, gamma: Var, s: Var) -> Result<Var> {
    let gs = g.mul(gamma, s)?;
    let r = g.relu(gamma);
    let e = g.sub(gs, r)?;
    let e = g.exp(e);
    Ok(g.mean(e))
}

/// `exp(c2 − c1)`.
pub fn loss_rank<T: Real>(g: &mut Graph<T>, c1: Var, c2: Var) -> Result<Var> {
    let d = g.sub(c2, c1)?;
    Ok(g.exp(d))
}

/// Mean over voxels of `(Ī − I)² + ‖∇Ī‖₁`.
pub fn loss_rec<T: Real>(g: &mut Graph<T>, i_rec: Var, i: Var) -> Result<Var> {
    let d = g.sub(i_rec, i)?;
    let sq = g.square(d);
    let grad = g.gradient_magnitude_l1(i_rec)?;
    let t = g.add(sq, grad)?;
    Ok(g.mean(t))
}

/// Mean of `S`, or its sum with `literal`.
pub fn loss_tight<T: Real>(g: &mut Graph<T>, s: Var, literal: bool) -> Var {
    if literal {
        g.sum(s)
    } else {
        g.mean(s)
    }
}

/// `exp(−Var S)`, or `exp(+Var S)` with `literal`.
pub fn loss_mv<T: Real>(g: &mut Graph<T>, s: Var, literal: bool) -> Result<Var> {
    let sq = g.square(s);
    let m2 = g.mean(sq);
    let m = g.mean(s);
    let m_sq = g.square(m);
    let var = g.sub(m2, m_sq)?;
    let e = if literal { var } else { g.neg(var) };
    Ok(g.exp(e))
}

/// Mean over voxels of `−S·ln(S + 1e-8)`.
pub fn loss_me<T: Real>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let l = g.log(s, LOG_EPS);
    let p = g.mul(s, l)?;
    let m = g.mean(p);
    Ok(g.neg(m))
}

/// Handles of the six terms (batch means) and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub terms: [Var; 6],
    pub total: Var,
    pub c1: Var,
    pub c2: Var,
}

/// Weighted sum of the six terms for a batch `(N, 1, k, m, n)`. Region means
/// and every term are computed per sample and averaged over the batch.
pub fn compound<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    out: &NetworkOutputs,
    w: &LossWeights,
    flags: &LossFlags,
) -> Result<(LossTerms, LossBreakdown)> {
    w.validate()?;
    let shape = g.shape(image).to_vec();
    if shape != g.shape(out.s) || shape != g.shape(out.s_bar) {
        return Err(Error::shape("compound", format!("image {shape:?} vs outputs {:?}", g.shape(out.s))));
    }
    let n = shape.first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::shape("compound", "empty batch"));
    }
    let need_rec = w.lambda4 > 0.0;
    if need_rec && out.i_rec.is_none() {
        return Err(Error::InvalidArgument("reconstruction term needs the training-mode decoder".into()));
    }
    let mut per_term: Vec<[Var; 6]> = Vec::with_capacity(n);
    let mut c1s = Vec::with_capacity(n);
    let mut c2s = Vec::with_capacity(n);
    for k in 0..n {
        let i = g.slice_batch(image, k, 1)?;
        let s = g.slice_batch(out.s, k, 1)?;
        let s_bar = g.slice_batch(out.s_bar, k, 1)?;
        let (c1, c2) = region_means_soft(g, i, s)?;
        let mut gamma = gamma_net(g, i, s_bar, c1, c2, w.alpha, w.beta)?;
        if flags.detach_gamma {
            gamma = g.detach(gamma);
        }
        let ac_mask = if flags.ac_uses_s_bar { s_bar } else { s };
        let ac = loss_ac(g, gamma, ac_mask)?;
        let rank = loss_rank(g, c1, c2)?;
        let rec = match out.i_rec {
            Some(r) if need_rec => {
                let r = g.slice_batch(r, k, 1)?;
                loss_rec(g, r, i)?
            }
            _ => g.scalar(T::zero()),
        };
        let tight = loss_tight(g, s, flags.literal_tight);
        let mv = loss_mv(g, s, flags.literal_mv)?;
        let me = loss_me(g, s)?;
        per_term.push([ac, rank, rec, tight, mv, me]);
        c1s.push(c1);
        c2s.push(c2);
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let batch_mean = |g: &mut Graph<T>, vs: &[Var]| -> Result<Var> {
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = g.add(acc, v)?;
        }
        Ok(g.scale(acc, inv_n))
    };
    let mut terms = [image; 6];
    for (t, slot) in terms.iter_mut().enumerate() {
        let vs: Vec<Var> = per_term.iter().map(|p| p[t]).collect();
        *slot = batch_mean(g, &vs)?;
    }
    let c1 = batch_mean(g, &c1s)?;
    let c2 = batch_mean(g, &c2s)?;
    let mut total = g.scale(terms[0], T::lit(w.lambda1));
    for (t, &l) in terms.iter().zip(&w.lambdas()).skip(1) {
        let weighted = g.scale(*t, T::lit(l));
        total = g.add(total, weighted)?;
    }
    let v = |k: usize| val(g, terms[k]);
    let breakdown = LossBreakdown {
        ac: v(0),
        rank: v(1),
        rec: v(2),
        tight: v(3),
        mv: v(4),
        me: v(5),
        total: val(g, total),
        c1: val(g, c1),
        c2: val(g, c2),
    };
    if [breakdown.total, breakdown.c1, breakdown.c2].iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    Ok((LossTerms { terms, total, c1, c2 }, breakdown))
}
