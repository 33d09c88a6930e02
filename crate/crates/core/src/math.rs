//! Probability-distribution primitives and the uncertainty / rank statistics
//! built on top of them.
//!
//! Every ordering over vocabulary ids breaks ties by ascending id so that
//! rankings are reproducible across platforms.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

/// Tolerance on `|sum(probs) - 1|` for a valid distribution.
pub const DIST_SUM_TOL: f64 = 1e-9;

/// Pre-softmax model output. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("logit vector is empty"));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(invalid(format!("logit {i} is not finite")));
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn softmax(&self) -> TokenDistribution {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.0.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        TokenDistribution {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    /// `logit - logsumexp(logits)`, exact for tokens whose probability
    /// underflows in `softmax`.
    pub fn log_softmax(&self) -> Vec<f64> {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.0.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        self.0.iter().map(|&x| x - lse).collect()
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// Numerically stable softmax over raw logits.
pub fn softmax(logits: &[f64]) -> Result<TokenDistribution> {
    Ok(LogitVector::new(logits.to_vec())?.softmax())
}

/// Probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.probs
    }
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("distribution is empty"));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid(format!(
                "probability {i} outside [0, 1]: {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DIST_SUM_TOL {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(invalid("vocab_size must be positive"));
        }
        Ok(Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        })
    }

    pub fn one_hot(vocab_size: usize, token: TokenId) -> Result<Self> {
        if token as usize >= vocab_size {
            return Err(invalid(format!(
                "token {token} outside vocabulary of {vocab_size}"
            )));
        }
        let mut probs = vec![0.0; vocab_size];
        probs[token as usize] = 1.0;
        Ok(Self { probs })
    }

    /// Divides a non-negative vector by its sum. Used after additive
    /// adjustments that leave the vector super-normalized.
    pub(crate) fn from_unnormalized(raw: Vec<f64>) -> Self {
        let total: f64 = raw.iter().sum();
        Self {
            probs: raw.into_iter().map(|x| x / total).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: TokenId) -> Result<f64> {
        self.check_token(token)?;
        Ok(self.probs[token as usize])
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.probs.len() {
            Ok(())
        } else {
            Err(invalid(format!(
                "token {token} outside vocabulary of {}",
                self.probs.len()
            )))
        }
    }

    /// `-sum p ln p / ln N`, with `0 ln 0 = 0`.
    pub fn normalized_entropy(&self) -> Result<f64> {
        let n = self.probs.len();
        if n < 2 {
            return Err(invalid(
                "normalized entropy needs a vocabulary of at least 2",
            ));
        }
        let h: f64 = self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Highest-probability id, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// 1-based rank of `token` in descending probability order.
    pub fn rank_of(&self, token: TokenId) -> Result<usize> {
        self.check_token(token)?;
        let t = token as usize;
        let pt = self.probs[t];
        let ahead = self
            .probs
            .iter()
            .enumerate()
            .filter(|&(i, &p)| p > pt || (p == pt && i < t))
            .count();
        Ok(ahead + 1)
    }

    /// `max(P) - P[token]`.
    pub fn probability_gap(&self, token: TokenId) -> Result<f64> {
        self.check_token(token)?;
        Ok(self.max_prob() - self.probs[token as usize])
    }

    /// The `r` most probable ids in rank order.
    pub fn top_r(&self, r: usize) -> Result<Vec<TokenId>> {
        let n = self.probs.len();
        if r == 0 || r > n {
            return Err(invalid(format!("top-r size {r} outside 1..={n}")));
        }
        let by_rank = |a: &usize, b: &usize| {
            self.probs[*b]
                .partial_cmp(&self.probs[*a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        let mut ids: Vec<usize> = (0..n).collect();
        if r < n {
            ids.select_nth_unstable_by(r - 1, by_rank);
            ids.truncate(r);
        }
        ids.sort_unstable_by(by_rank);
        Ok(ids.into_iter().map(|i| i as TokenId).collect())
    }
}

/// Average (fractional) ranks, 1-based.
pub(crate) fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("rank variance is zero".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average-rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(invalid("spearman needs at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(invalid("NaN in spearman input"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let d = softmax(&[1000.0, 0.0]).unwrap();
        assert!((d.probs()[0] - 1.0).abs() < 1e-12);
        assert!(d.probs()[1] < 1e-300);
        let d = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-15);
        assert!((d.probs()[1] - 0.25).abs() < 1e-15);
        assert!((d.probs()[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(TokenDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(TokenDistribution::new(vec![0.5, 0.5 + 1e-10]).is_ok());
    }

    #[test]
    fn entropy_examples() {
        let u = TokenDistribution::uniform(50).unwrap();
        assert!((u.normalized_entropy().unwrap() - 1.0).abs() < 1e-9);
        let o = TokenDistribution::one_hot(50, 7).unwrap();
        assert_eq!(o.normalized_entropy().unwrap(), 0.0);
        let d = dist(&[0.5, 0.25, 0.125, 0.125]);
        assert!((d.normalized_entropy().unwrap() - 0.875).abs() < 1e-12);
        assert!(dist(&[1.0]).normalized_entropy().is_err());
    }

    #[test]
    fn msp_examples() {
        assert_eq!(TokenDistribution::one_hot(4, 2).unwrap().max_prob(), 1.0);
        assert_eq!(TokenDistribution::uniform(4).unwrap().max_prob(), 0.25);
        assert_eq!(dist(&[0.5, 0.25, 0.125, 0.125]).max_prob(), 0.5);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            TokenDistribution::one_hot(5, 3)
                .unwrap()
                .rank_of(3)
                .unwrap(),
            1
        );
        assert_eq!(dist(&[0.1, 0.7, 0.2]).rank_of(0).unwrap(), 3);
        assert_eq!(dist(&[0.4, 0.4, 0.2]).rank_of(1).unwrap(), 2);
        assert!(dist(&[0.4, 0.4, 0.2]).rank_of(3).is_err());
    }

    #[test]
    fn gap_examples() {
        let d = dist(&[0.1, 0.7, 0.2]);
        assert_eq!(d.probability_gap(1).unwrap(), 0.0);
        assert!((d.probability_gap(2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            TokenDistribution::uniform(3)
                .unwrap()
                .probability_gap(2)
                .unwrap(),
            0.0
        );
        assert!(d.probability_gap(9).is_err());
    }

    #[test]
    fn top_r_examples() {
        let d = dist(&[0.1, 0.7, 0.2]);
        assert_eq!(d.top_r(3).unwrap(), vec![1, 2, 0]);
        assert_eq!(d.top_r(2).unwrap(), vec![1, 2]);
        assert_eq!(
            TokenDistribution::uniform(3).unwrap().top_r(2).unwrap(),
            vec![0, 1]
        );
        assert!(d.top_r(0).is_err());
        assert!(d.top_r(4).is_err());
    }

    /// Rank by direct counting: 1 + #smaller + (#equal - 1) / 2.
    fn brute_ranks(xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let less = xs.iter().filter(|&&y| y < x).count() as f64;
                let eq = xs.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let (rx, ry) = (brute_ranks(xs), brute_ranks(ys));
        let n = xs.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[2.0, 4.0, 6.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let (xs, ys) = ([1.0, 2.0, 2.0, 3.0], [1.0, 3.0, 2.0, 4.0]);
        let expected = brute_spearman(&xs, &ys);
        assert!((spearman(&xs, &ys).unwrap() - expected).abs() < 1e-12);
        // ranks [1, 2.5, 2.5, 4] vs [1, 3, 2, 4]: cov 4.5, var 4.5 and 5
        assert!((expected - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    fn arb_dist() -> impl Strategy<Value = TokenDistribution> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_filter_map("zero mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-6).then(|| TokenDistribution::from_unnormalized(raw))
        })
    }

    proptest! {
        #[test]
        fn entropy_in_unit_interval(d in arb_dist()) {
            let h = d.normalized_entropy().unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
            let n = d.vocab_size() as f64;
            let uniform = d.probs().iter().all(|p| (p - 1.0 / n).abs() < 1e-12);
            if !uniform {
                prop_assert!(h < 1.0 - 1e-12);
            }
            if d.max_prob() < 1.0 {
                prop_assert!(h > 0.0);
            }
        }

        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..30),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_has_rank_one(d in arb_dist()) {
            let top = d.argmax();
            let m = d.max_prob();
            if d.probs().iter().filter(|&&p| p == m).count() == 1 {
                prop_assert_eq!(d.rank_of(top).unwrap(), 1);
            }
        }

        #[test]
        fn gap_nonnegative(d in arb_dist(), t in 0usize..40) {
            let t = (t % d.vocab_size()) as TokenId;
            let g = d.probability_gap(t).unwrap();
            prop_assert!(g >= 0.0);
            prop_assert_eq!(g == 0.0, d.prob(t).unwrap() == d.max_prob());
        }

        #[test]
        fn spearman_monotone_invariant(
            pairs in prop::collection::vec((-5i32..5, -5i32..5), 3..40),
        ) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let fx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            match (spearman(&xs, &ys), spearman(&fx, &ys)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "monotone transform changed definedness"),
            }
        }

        #[test]
        fn top_r_prefix(d in arb_dist(), a in 1usize..40, b in 1usize..40) {
            let n = d.vocab_size();
            let (r1, r2) = ((a.min(b) - 1) % n + 1, n.min(a.max(b)));
            let (r1, r2) = (r1.min(r2), r2);
            let short = d.top_r(r1).unwrap();
            let long = d.top_r(r2).unwrap();
            prop_assert_eq!(&long[..r1], &short[..]);
        }
    }
}
