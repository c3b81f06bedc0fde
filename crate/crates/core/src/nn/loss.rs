use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Two-class distribution `(p, 1 - p)` for a single example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinaryDist {
    p: f64,
}

impl BinaryDist {
    /// `p` is the probability of the positive class.
    ///
    /// # Panics
    /// If `p` is not a finite value in `[0, 1]`.
    pub fn new(p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "probability {p} outside [0, 1]");
        Self { p }
    }

    pub fn positive(&self) -> f64 {
        self.p
    }

    pub fn pair(&self) -> (f64, f64) {
        (self.p, 1.0 - self.p)
    }

    /// Clamp into `[eps, 1 - eps]`. Both components stay in range and still
    /// sum to one, so no renormalisation is needed for the binary case.
    pub fn clamped(&self, eps: f64) -> Self {
        Self {
            p: self.p.clamp(eps, 1.0 - eps),
        }
    }
}

/// Which way round the peer term is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(own ‖ peer)`, own distribution first.
    #[default]
    Forward,
    /// `KL(peer ‖ own)`, as in classic deep mutual learning.
    Reverse,
}

/// Loss to differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum LossMode {
    BceOnly,
    /// Cross-entropy plus `coefficient` times the average KL to the peers.
    /// Each peer sequence is aligned with the batch rows.
    BcePlusKld {
        peers: Vec<Vec<BinaryDist>>,
        direction: KlDirection,
        coefficient: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub mode: LossMode,
    pub epsilon: f64,
}

impl LossSpec {
    pub fn bce() -> Self {
        Self {
            mode: LossMode::BceOnly,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn mutual(peers: Vec<Vec<BinaryDist>>, direction: KlDirection, coefficient: f64) -> Self {
        Self {
            mode: LossMode::BcePlusKld {
                peers,
                direction,
                coefficient,
            },
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub(crate) fn validate(&self, batch_len: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        if let LossMode::BcePlusKld {
            peers, coefficient, ..
        } = &self.mode
        {
            if peers.is_empty() {
                return Err(Error::InvalidArgument(
                    "mutual loss needs at least one peer".into(),
                ));
            }
            if let Some((j, p)) = peers.iter().enumerate().find(|(_, p)| p.len() != batch_len) {
                return Err(Error::Shape(format!(
                    "peer {j} has {} predictions for a batch of {batch_len}",
                    p.len()
                )));
            }
            if !coefficient.is_finite() || *coefficient < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "kl coefficient {coefficient}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy in nats.
pub fn bce_loss(preds: &[BinaryDist], labels: &[u8], eps: f64) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(d, &y)| {
            let p = d.clamped(eps).positive();
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// `Σ P·ln(P/Q)` over both components, after clamping.
pub fn kl_divergence(p: BinaryDist, q: BinaryDist, eps: f64) -> f64 {
    let (p1, p0) = p.clamped(eps).pair();
    let (q1, q0) = q.clamped(eps).pair();
    let kl = p1 * (p1 / q1).ln() + p0 * (p0 / q0).ln();
    // rounding can leave a tiny negative residue for near-identical inputs
    kl.max(0.0)
}

/// Mean over examples of the average KL divergence between `own` and each
/// peer sequence.
pub fn kld_avg(
    own: &[BinaryDist],
    peers: &[Vec<BinaryDist>],
    direction: KlDirection,
    eps: f64,
) -> Result<f64> {
    if peers.is_empty() {
        return Err(Error::InvalidArgument(
            "average KL divergence is undefined without peers".into(),
        ));
    }
    if own.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some((j, p)) = peers.iter().enumerate().find(|(_, p)| p.len() != own.len()) {
        return Err(Error::Shape(format!(
            "peer {j} has {} predictions, own sequence has {}",
            p.len(),
            own.len()
        )));
    }
    let k_minus_1 = peers.len() as f64;
    let total: f64 = own
        .iter()
        .enumerate()
        .map(|(i, &mine)| {
            peers
                .iter()
                .map(|peer| match direction {
                    KlDirection::Forward => kl_divergence(mine, peer[i], eps),
                    KlDirection::Reverse => kl_divergence(peer[i], mine, eps),
                })
                .sum::<f64>()
                / k_minus_1
        })
        .sum();
    Ok(total / own.len() as f64)
}

/// Unweighted sum of model loss and KL term.
pub fn mutual_loss(model_loss: f64, kld: f64) -> f64 {
    model_loss + kld
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_EPSILON;

    fn d(p: f64) -> BinaryDist {
        BinaryDist::new(p)
    }

    // Reference values computed independently of the implementation:
    // direct scalar formulas, no clamping involved.
    fn ref_kl(p: f64, q: f64) -> f64 {
        p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
    }

    #[test]
    fn bce_examples() {
        let v = bce_loss(&[d(0.5)], &[1], EPS).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.693147).abs() < 1e-6);
        let v = bce_loss(&[d(1.0 - EPS)], &[1], EPS).unwrap();
        assert!(v < 2.0 * EPS);
        let v = bce_loss(&[d(0.5), d(0.5)], &[0, 1], EPS).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[d(0.5)], &[0, 1], EPS).is_err());
    }

    #[test]
    fn bce_is_finite_at_the_extremes() {
        let v = bce_loss(&[d(0.0), d(1.0)], &[1, 0], EPS).unwrap();
        assert!((v - -(EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(d(0.5), d(0.5), EPS), 0.0);
        assert_eq!(kl_divergence(d(0.7), d(0.7), EPS), 0.0);
        let v = kl_divergence(d(0.8), d(0.5), EPS);
        let oracle = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.192745).abs() < 1e-6);
    }

    #[test]
    fn kld_avg_examples() {
        let own = vec![d(0.6)];
        let one = kld_avg(&own, &[vec![d(0.5)]], KlDirection::Forward, EPS).unwrap();
        assert!((one - ref_kl(0.6, 0.5)).abs() < 1e-12);
        assert!((one - 0.020136).abs() < 1e-6);

        let two = kld_avg(
            &own,
            &[vec![d(0.5)], vec![d(0.7)]],
            KlDirection::Forward,
            EPS,
        )
        .unwrap();
        let oracle = (ref_kl(0.6, 0.5) + ref_kl(0.6, 0.7)) / 2.0;
        assert!((ref_kl(0.6, 0.7) - 0.022582).abs() < 1e-6);
        assert!((two - oracle).abs() < 1e-12);
        assert!((two - 0.021359).abs() < 1e-6);

        let same = vec![d(0.3), d(0.9)];
        assert_eq!(
            kld_avg(
                &same,
                &[same.clone(), same.clone()],
                KlDirection::Forward,
                EPS
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn kld_avg_reverse_swaps_arguments() {
        let v = kld_avg(&[d(0.6)], &[vec![d(0.5)]], KlDirection::Reverse, EPS).unwrap();
        assert!((v - ref_kl(0.5, 0.6)).abs() < 1e-12);
    }

    #[test]
    fn kld_avg_rejects_missing_or_misaligned_peers() {
        assert!(kld_avg(&[d(0.6)], &[], KlDirection::Forward, EPS).is_err());
        assert!(kld_avg(
            &[d(0.6)],
            &[vec![d(0.5), d(0.5)]],
            KlDirection::Forward,
            EPS
        )
        .is_err());
    }

    #[test]
    fn mutual_loss_is_a_plain_sum() {
        assert_eq!(mutual_loss(0.3, 0.2), 0.5);
        assert_eq!(mutual_loss(1.25, 0.0), 1.25);
        assert!((mutual_loss(0.693147, 0.192745) - 0.885892).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mutual_loss_reduces_to_bce() {
        let own = vec![d(0.2), d(0.65), d(0.9)];
        let labels = [0, 1, 1];
        let bce = bce_loss(&own, &labels, EPS).unwrap();
        let kld = kld_avg(&own, std::slice::from_ref(&own), KlDirection::Forward, EPS).unwrap();
        assert_eq!(mutual_loss(bce, kld), bce);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_zero_only_on_equal(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let v = kl_divergence(d(p), d(q), EPS);
            prop_assert!(v >= 0.0);
            let (pc, qc) = (d(p).clamped(EPS).positive(), d(q).clamped(EPS).positive());
            if pc == qc {
                prop_assert_eq!(v, 0.0);
            } else if (pc - qc).abs() > 1e-6 {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn clamped_pairs_sum_to_one(p in 0.0f64..=1.0) {
            let (a, b) = d(p).clamped(EPS).pair();
            prop_assert!(a >= EPS && b >= EPS - 1e-17);
            prop_assert!((a + b - 1.0).abs() < 1e-15);
        }
    }
}
