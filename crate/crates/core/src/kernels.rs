//! Similarity, cosine contrastive loss, and analytical gradients.
//!
//! Cosine similarity needs three reductions per (user, item) pair: the
//! user's sum of squares `ss`, the item's sum of squares `tt`, and their dot
//! product `st`. The forward pass keeps them in a [`ForwardCache`] and the
//! gradient kernels read them back instead of reducing over K again:
//!
//! ```text
//! d sim / d u = (v * ss - st * u) / (ss * sqrt(ss) * sqrt(tt))
//! d sim / d v = (u * tt - st * v) / (tt * sqrt(tt) * sqrt(ss))
//! ```
//!
//! Reductions accumulate f32 or f64 inputs in f64 over four interleaved
//! lanes (element `k` goes to lane `k % 4`), combined as `(l0 + l1) + (l2 + l3)`.
//! The order is fixed, so results are reproducible bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Element types the kernels accept; everything widens to f64.
pub trait Scalar: Copy + Into<f64> {}

impl Scalar for f32 {}
impl Scalar for f64 {}

const LANES: usize = 4;

#[inline]
fn combine(acc: [f64; LANES]) -> f64 {
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `sum_k u[k] * v[k]`.
#[inline]
pub fn dot<A: Scalar, B: Scalar>(u: &[A], v: &[B]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = [0.0f64; LANES];
    let (uc, ur) = (u.chunks_exact(LANES), u.chunks_exact(LANES).remainder());
    let (vc, vr) = (v.chunks_exact(LANES), v.chunks_exact(LANES).remainder());
    for (a, b) in uc.zip(vc) {
        for l in 0..LANES {
            acc[l] += a[l].into() * b[l].into();
        }
    }
    for (l, (&a, &b)) in ur.iter().zip(vr).enumerate() {
        acc[l] += a.into() * b.into();
    }
    combine(acc)
}

#[inline]
pub fn sum_squares<A: Scalar>(u: &[A]) -> f64 {
    dot(u, u)
}

/// `(sum_k v[k]^2, sum_k u[k] * v[k])` in one pass; bit-identical to
/// calling [`sum_squares`] and [`dot`] separately.
#[inline]
pub fn squares_and_dot<A: Scalar, B: Scalar>(u: &[A], v: &[B]) -> (f64, f64) {
    debug_assert_eq!(u.len(), v.len());
    let mut tt = [0.0f64; LANES];
    let mut st = [0.0f64; LANES];
    let (uc, ur) = (u.chunks_exact(LANES), u.chunks_exact(LANES).remainder());
    let (vc, vr) = (v.chunks_exact(LANES), v.chunks_exact(LANES).remainder());
    for (a, b) in uc.zip(vc) {
        for l in 0..LANES {
            let bv: f64 = b[l].into();
            tt[l] += bv * bv;
            st[l] += a[l].into() * bv;
        }
    }
    for (l, (&a, &b)) in ur.iter().zip(vr).enumerate() {
        let bv: f64 = b.into();
        tt[l] += bv * bv;
        st[l] += a.into() * bv;
    }
    (combine(tt), combine(st))
}

pub fn dot_similarity<A: Scalar, B: Scalar>(u: &[A], v: &[B]) -> f64 {
    dot(u, v)
}

/// Reductions from one forward similarity evaluation, reused by backward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardCache {
    pub ss: f64,
    pub tt: f64,
    pub st: f64,
    pub sim: f64,
    /// Set when either vector has zero norm; `sim` is then 0 and gradients vanish.
    pub degenerate: bool,
}

impl ForwardCache {
    pub fn from_reductions(ss: f64, tt: f64, st: f64) -> Self {
        if ss > 0.0 && tt > 0.0 {
            ForwardCache {
                ss,
                tt,
                st,
                sim: st / (ss * tt).sqrt(),
                degenerate: false,
            }
        } else {
            ForwardCache {
                ss,
                tt,
                st,
                sim: 0.0,
                degenerate: true,
            }
        }
    }

    /// The cache as seen from the item side (`ss` and `tt` swapped).
    pub fn swapped(&self) -> Self {
        ForwardCache {
            ss: self.tt,
            tt: self.ss,
            ..*self
        }
    }
}

pub fn cosine_forward<A: Scalar, B: Scalar>(u: &[A], v: &[B]) -> ForwardCache {
    cosine_forward_with_norm(sum_squares(u), u, v)
}

/// Cosine forward with the user's sum of squares already known.
#[inline]
pub fn cosine_forward_with_norm<A: Scalar, B: Scalar>(ss: f64, u: &[A], v: &[B]) -> ForwardCache {
    let (tt, st) = squares_and_dot(u, v);
    ForwardCache::from_reductions(ss, tt, st)
}

/// `out += scale * d sim / d u`, using only the cached reductions.
#[inline]
pub fn accumulate_grad_user<A: Scalar, B: Scalar>(
    u: &[A],
    v: &[B],
    c: &ForwardCache,
    scale: f64,
    out: &mut [f64],
) {
    if c.degenerate {
        return;
    }
    let inv = scale / (c.ss * c.ss.sqrt() * c.tt.sqrt());
    for ((o, &a), &b) in out.iter_mut().zip(u).zip(v) {
        *o += (b.into() * c.ss - c.st * a.into()) * inv;
    }
}

/// `out += scale * d sim / d v`, using only the cached reductions.
#[inline]
pub fn accumulate_grad_item<A: Scalar, B: Scalar>(
    u: &[A],
    v: &[B],
    c: &ForwardCache,
    scale: f64,
    out: &mut [f64],
) {
    if c.degenerate {
        return;
    }
    let inv = scale / (c.tt * c.tt.sqrt() * c.ss.sqrt());
    for ((o, &a), &b) in out.iter_mut().zip(u).zip(v) {
        *o += (a.into() * c.tt - c.st * b.into()) * inv;
    }
}

pub fn cosine_grad_user<A: Scalar, B: Scalar>(u: &[A], v: &[B], c: &ForwardCache) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    accumulate_grad_user(u, v, c, 1.0, &mut out);
    out
}

pub fn cosine_grad_item<A: Scalar, B: Scalar>(u: &[A], v: &[B], c: &ForwardCache) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    accumulate_grad_item(u, v, c, 1.0, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::invalid(format!("unknown similarity '{other}'"))),
        }
    }
}

impl Similarity {
    /// Forward pass; `ss` is the user's sum of squares (unused for dot).
    #[inline]
    pub fn forward<A: Scalar, B: Scalar>(self, ss: f64, u: &[A], v: &[B]) -> ForwardCache {
        match self {
            Similarity::Cosine => cosine_forward_with_norm(ss, u, v),
            Similarity::Dot => {
                let st = dot(u, v);
                ForwardCache {
                    ss,
                    tt: 0.0,
                    st,
                    sim: st,
                    degenerate: false,
                }
            }
        }
    }

    #[inline]
    pub fn accumulate_grad_user<A: Scalar, B: Scalar>(
        self,
        u: &[A],
        v: &[B],
        c: &ForwardCache,
        scale: f64,
        out: &mut [f64],
    ) {
        match self {
            Similarity::Cosine => accumulate_grad_user(u, v, c, scale, out),
            Similarity::Dot => {
                for (o, &b) in out.iter_mut().zip(v) {
                    *o += scale * b.into();
                }
            }
        }
    }

    #[inline]
    pub fn accumulate_grad_item<A: Scalar, B: Scalar>(
        self,
        u: &[A],
        v: &[B],
        c: &ForwardCache,
        scale: f64,
        out: &mut [f64],
    ) {
        match self {
            Similarity::Cosine => accumulate_grad_item(u, v, c, scale, out),
            Similarity::Dot => {
                for (o, &a) in out.iter_mut().zip(u) {
                    *o += scale * a.into();
                }
            }
        }
    }
}

/// Weight `mu` on the negative hinge term and its margin `theta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub mu: f64,
    pub theta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { mu: 1.0, theta: 0.8 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!(
                "theta must lie in [-1, 1], got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// `(1 - sim_pos) + mu / |N| * sum_j max(0, sim_neg_j - theta)`.
pub fn ccl_loss(sim_pos: f64, sim_negs: &[f64], p: &LossParams) -> Result<f64> {
    if sim_negs.is_empty() {
        return Err(Error::invalid("cosine contrastive loss needs at least one negative"));
    }
    let hinge: f64 = sim_negs.iter().map(|&s| (s - p.theta).max(0.0)).sum();
    Ok((1.0 - sim_pos) + p.mu / sim_negs.len() as f64 * hinge)
}

/// Loss derivatives: `d/d sim_pos = -1`, and `mu / |N|` for every negative
/// strictly above `theta`, 0 otherwise.
pub fn ccl_loss_grad(sim_pos: f64, sim_negs: &[f64], p: &LossParams) -> Result<(f64, Vec<f64>)> {
    let mut dnegs = vec![0.0; sim_negs.len()];
    let (_, dpos) = ccl_loss_and_grad_into(sim_pos, sim_negs, p, &mut dnegs)?;
    Ok((dpos, dnegs))
}

/// Fused loss and gradient; writes the negative derivatives into `dnegs` and
/// returns `(loss, dpos)`.
#[inline]
pub fn ccl_loss_and_grad_into(
    sim_pos: f64,
    sim_negs: &[f64],
    p: &LossParams,
    dnegs: &mut [f64],
) -> Result<(f64, f64)> {
    if sim_negs.is_empty() {
        return Err(Error::invalid("cosine contrastive loss needs at least one negative"));
    }
    let w = p.mu / sim_negs.len() as f64;
    let mut hinge = 0.0;
    for (d, &s) in dnegs.iter_mut().zip(sim_negs) {
        if s > p.theta {
            hinge += s - p.theta;
            *d = w;
        } else {
            *d = 0.0;
        }
    }
    Ok(((1.0 - sim_pos) + w * hinge, -1.0))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    fn naive_dot(u: &[f64], v: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..u.len() {
            s += u[k] * v[k];
        }
        s
    }

    #[test]
    fn dot_hand_cases() {
        assert_eq!(dot_similarity(&[1.0f32, 0.0, 0.0], &[0.0f32, 1.0, 0.0]), 0.0);
        assert_eq!(dot_similarity(&[1.0f32, 2.0], &[3.0f32, 4.0]), 11.0);
        assert_eq!(dot(&[1.0f64; 7], &[2.0f64; 7]), 14.0);
    }

    #[test]
    fn dot_matches_reference_loop() {
        let mut rng = crate::rng::stream(11, 0);
        for _ in 0..100 {
            let u: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale: f64 = u.iter().zip(&v).map(|(a, b)| (a * b).abs()).sum();
            assert!((dot(&u, &v) - naive_dot(&u, &v)).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn fused_reductions_match_separate_ones() {
        let mut rng = crate::rng::stream(12, 0);
        for len in [1, 3, 4, 5, 64, 127] {
            let u: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (tt, st) = squares_and_dot(&u, &v);
            assert_eq!(tt.to_bits(), sum_squares(&v).to_bits());
            assert_eq!(st.to_bits(), dot(&u, &v).to_bits());
        }
    }

    #[test]
    fn cosine_hand_cases() {
        let c = cosine_forward(&[1.0f32, 0.0], &[1.0f32, 0.0]);
        assert_eq!((c.sim, c.ss, c.tt, c.st), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(cosine_forward(&[1.0f32, 0.0], &[0.0f32, 1.0]).sim, 0.0);
        let c = cosine_forward(&[1.0f64, 1.0], &[1.0f64, 0.0]);
        assert!((c.sim - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let c = cosine_forward(&[0.0f32, 0.0], &[1.0f32, 2.0]);
        assert!(c.degenerate);
        assert_eq!(c.sim, 0.0);
        assert_eq!(cosine_grad_user(&[0.0f32, 0.0], &[1.0f32, 2.0], &c), vec![0.0, 0.0]);
        assert_eq!(cosine_grad_item(&[0.0f32, 0.0], &[1.0f32, 2.0], &c), vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_hand_cases() {
        let (u, v) = ([1.0f64, 0.0], [0.0f64, 1.0]);
        let c = cosine_forward(&u, &v);
        assert_eq!(cosine_grad_user(&u, &v, &c), vec![0.0, 1.0]);
        let c = cosine_forward(&u, &u);
        assert_eq!(cosine_grad_user(&u, &u, &c), vec![0.0, 0.0]);

        let (u, v) = ([0.0f64, 1.0], [1.0f64, 0.0]);
        let c = cosine_forward(&u, &v);
        assert_eq!(cosine_grad_item(&u, &v, &c), vec![0.0, 1.0]);
        let w = [0.3f64, -0.7];
        let c = cosine_forward(&w, &w);
        assert!(cosine_grad_item(&w, &w, &c).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn cached_gradients_equal_recomputed_ones() {
        let mut rng = crate::rng::stream(13, 0);
        for _ in 0..50 {
            let u: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cached = cosine_forward(&u, &v);
            let scratch =
                ForwardCache::from_reductions(sum_squares(&u), sum_squares(&v), dot(&u, &v));
            assert_eq!(cached, scratch);
            let a = cosine_grad_user(&u, &v, &cached);
            let b = cosine_grad_user(&u, &v, &scratch);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loss_hand_cases() {
        let p = LossParams { mu: 1.0, theta: 0.8 };
        assert_eq!(ccl_loss(1.0, &[0.1, 0.8, -0.3], &p).unwrap(), 0.0);
        let l = ccl_loss(0.5, &[0.9, 0.3], &p).unwrap();
        assert!((l - 0.55).abs() < 1e-12, "{l}");
        let zero_mu = LossParams { mu: 0.0, theta: 0.1 };
        assert_eq!(ccl_loss(0.25, &[0.9, 0.99], &zero_mu).unwrap(), 0.75);
        assert!(ccl_loss(0.5, &[], &p).is_err());
        assert!(ccl_loss_grad(0.5, &[], &p).is_err());
    }

    #[test]
    fn loss_grad_hand_cases() {
        let p = LossParams { mu: 1.0, theta: 0.8 };
        let (dpos, dnegs) = ccl_loss_grad(0.5, &[0.9, 0.3], &p).unwrap();
        assert_eq!(dpos, -1.0);
        assert_eq!(dnegs, vec![0.5, 0.0]);
        // Exactly at the margin the subgradient is 0.
        let (_, dnegs) = ccl_loss_grad(0.5, &[0.8], &p).unwrap();
        assert_eq!(dnegs, vec![0.0]);
    }

    #[test]
    fn loss_params_validation() {
        assert!(LossParams { mu: -1.0, theta: 0.5 }.validate().is_err());
        assert!(LossParams { mu: 1.0, theta: 1.5 }.validate().is_err());
        assert!(LossParams::default().validate().is_ok());
    }

    fn vec_pair(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-1.0f64..1.0, k),
            proptest::collection::vec(-1.0f64..1.0, k),
        )
            .prop_filter("nonzero", |(u, v)| {
                sum_squares(u) > 1e-6 && sum_squares(v) > 1e-6
            })
    }

    proptest! {
        #[test]
        fn item_grad_mirrors_user_grad((u, v) in vec_pair(16)) {
            let c = cosine_forward(&u, &v);
            let item = cosine_grad_item(&u, &v, &c);
            let user = cosine_grad_user(&v, &u, &c.swapped());
            prop_assert_eq!(item, user);
        }

        #[test]
        fn gradients_are_orthogonal_to_their_vector((u, v) in vec_pair(32)) {
            let c = cosine_forward(&u, &v);
            let gu = cosine_grad_user(&u, &v, &c);
            let gv = cosine_grad_item(&u, &v, &c);
            let scale_u = sum_squares(&gu).sqrt() * sum_squares(&u).sqrt();
            let scale_v = sum_squares(&gv).sqrt() * sum_squares(&v).sqrt();
            prop_assert!(dot(&gu, &u).abs() <= 1e-6 * scale_u.max(1e-300));
            prop_assert!(dot(&gv, &v).abs() <= 1e-6 * scale_v.max(1e-300));
        }

        #[test]
        fn cosine_is_scale_invariant((u, v) in vec_pair(24), a in 0.01f64..100.0) {
            let scaled: Vec<f64> = u.iter().map(|x| x * a).collect();
            let s1 = cosine_forward(&scaled, &v).sim;
            let s0 = cosine_forward(&u, &v).sim;
            prop_assert!((s1 - s0).abs() <= 1e-6);
            prop_assert!(s0.abs() <= 1.0 + 4.0 * f64::EPSILON);
        }

        #[test]
        fn loss_is_nonnegative(
            pos in -1.0f64..=1.0,
            negs in proptest::collection::vec(-1.0f64..=1.0, 1..20),
            mu in 0.0f64..10.0,
            theta in -1.0f64..=1.0,
        ) {
            let l = ccl_loss(pos, &negs, &LossParams { mu, theta }).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn kernels_match_reference((u, v) in vec_pair(128)) {
            let ss = naive_dot(&u, &u);
            let tt = naive_dot(&v, &v);
            let st = naive_dot(&u, &v);
            let c = cosine_forward(&u, &v);
            prop_assert!(close(c.ss, ss, 1e-12));
            prop_assert!(close(c.tt, tt, 1e-12));
            let st_scale: f64 = u.iter().zip(&v).map(|(a, b)| (a * b).abs()).sum();
            prop_assert!((c.st - st).abs() <= 1e-12 * st_scale);
            let gu = cosine_grad_user(&u, &v, &c);
            let denom = ss * ss.sqrt() * tt.sqrt();
            for k in 0..u.len() {
                let want = (v[k] * ss - st * u[k]) / denom;
                let scale = ((v[k] * ss).abs() + st_scale * u[k].abs()) / denom;
                prop_assert!((gu[k] - want).abs() <= 1e-11 * scale.max(1e-300));
            }
        }
    }
}
