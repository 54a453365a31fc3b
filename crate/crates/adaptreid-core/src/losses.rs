//! Every term of the training objective, in two forms: plain-value functions
//! with documented sign conventions (the reference implementations, used by
//! tests and reporting) and tape functions used by the optimizer. Both share
//! one set of conventions:
//!
//! - discriminator scores are sigmoid outputs, clamped to
//!   [1e-7, 1 - 1e-7] before any logarithm;
//! - the discriminator minimizes `-mean(log d_real) - mean(log(1 - d_fake))`;
//! - the generator minimizes the non-saturating `-mean(log d_fake)`;
//! - embedding distance is squared Euclidean on the given vectors;
//! - metric losses come in a `canonical` hinge form (margin added inside
//!   `max(0, .)`) and a `paper_literal` form where the margin is the second
//!   argument of the max.

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginForm {
    #[default]
    Canonical,
    PaperLiteral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_attn: f64,
    pub lambda_quartet: f64,
    pub lambda_id: f64,
    pub lambda_cyc: f64,
    pub margin_tau1: f64,
    pub margin_tau2: f64,
    pub margin_form: MarginForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_attn: 10.0,
            lambda_quartet: 1.0,
            lambda_id: 1.0,
            lambda_cyc: 10.0,
            margin_tau1: 0.3,
            margin_tau2: 0.15,
            margin_form: MarginForm::Canonical,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_attn", self.lambda_attn),
            ("lambda_quartet", self.lambda_quartet),
            ("lambda_id", self.lambda_id),
            ("lambda_cyc", self.lambda_cyc),
            ("margin_tau1", self.margin_tau1),
            ("margin_tau2", self.margin_tau2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weights.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of each objective term for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub gan_s: f64,
    pub gan_t: f64,
    pub cycle: f64,
    pub attn: f64,
    pub quartet: f64,
    pub id: f64,
}

/// Named scalars for one training step, plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub gan_s: f64,
    pub gan_t: f64,
    pub cycle: f64,
    pub attn: f64,
    pub quartet: f64,
    pub id: f64,
    pub total: f64,
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Discriminator side of the adversarial objective.
pub fn adversarial_loss_d(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Shape("adversarial_loss_d: empty score batch".into()));
    }
    let real: f64 = d_real.iter().map(|&s| clamp_score(s).ln()).sum::<f64>() / d_real.len() as f64;
    let fake: f64 =
        d_fake.iter().map(|&s| (1.0 - clamp_score(s)).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(-real - fake)
}

/// Generator side, non-saturating form.
pub fn adversarial_loss_g(d_fake: &[f64]) -> Result<f64> {
    if d_fake.is_empty() {
        return Err(Error::Shape("adversarial_loss_g: empty score batch".into()));
    }
    Ok(-d_fake.iter().map(|&s| clamp_score(s).ln()).sum::<f64>() / d_fake.len() as f64)
}

fn mean_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
        / a.numel() as f64)
}

/// Cycle-consistency: mean L1 between each input and its round-trip
/// reconstruction, summed over both directions.
pub fn cycle_loss(x_s: &Tensor, recon_s: &Tensor, x_t: &Tensor, recon_t: &Tensor) -> Result<f64> {
    Ok(mean_l1(x_s, recon_s)? + mean_l1(x_t, recon_t)?)
}

/// Attention consistency: the mask of an input must match the mask its
/// translation receives from the other domain's attention network. Sum of the
/// two directional mean-L1 terms.
pub fn attention_consistency_loss(
    a_src: &Tensor,
    a_of_translated_src: &Tensor,
    a_tgt: &Tensor,
    a_of_translated_tgt: &Tensor,
) -> Result<f64> {
    Ok(mean_l1(a_src, a_of_translated_src)? + mean_l1(a_tgt, a_of_translated_tgt)?)
}

fn row_sqdist_scalar(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    let (_, f) = a.dims2().expect("rank-2");
    (0..f)
        .map(|j| {
            let d = a.data()[i * f + j] - b.data()[i * f + j];
            d * d
        })
        .sum()
}

fn check_embedding_batches(batches: &[&Tensor]) -> Result<usize> {
    let (n0, f0) = batches[0].dims2()?;
    if n0 == 0 {
        return Err(Error::Shape("empty embedding batch".into()));
    }
    for b in &batches[1..] {
        let (n, f) = b.dims2()?;
        if n != n0 || f != f0 {
            return Err(Error::Shape(format!(
                "embedding batch mismatch: {:?} vs {:?}",
                batches[0].shape(),
                b.shape()
            )));
        }
    }
    Ok(n0)
}

/// Margin-based loss over (anchor, positive, negative) embedding rows.
pub fn triplet_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    weights: &LossWeights,
) -> Result<f64> {
    let n = check_embedding_batches(&[anchor, positive, negative])?;
    let tau1 = weights.margin_tau1;
    let mut total = 0.0;
    for i in 0..n {
        let d_ap = row_sqdist_scalar(anchor, positive, i);
        let d_an = row_sqdist_scalar(anchor, negative, i);
        total += match weights.margin_form {
            MarginForm::Canonical => (d_ap - d_an + tau1).max(0.0),
            MarginForm::PaperLiteral => (d_ap - d_an).max(tau1),
        };
    }
    Ok(total / n as f64)
}

/// Four-image metric loss: the triplet term plus an inter-class term that
/// pushes `D(x4,x3)` above `D(x1,x2)` even though x4 shares no identity with
/// the anchor.
pub fn quartet_loss(
    x1: &Tensor,
    x2: &Tensor,
    x3: &Tensor,
    x4: &Tensor,
    weights: &LossWeights,
) -> Result<f64> {
    let n = check_embedding_batches(&[x1, x2, x3, x4])?;
    let (tau1, tau2) = (weights.margin_tau1, weights.margin_tau2);
    let mut total = 0.0;
    for i in 0..n {
        let d12 = row_sqdist_scalar(x1, x2, i);
        let d13 = row_sqdist_scalar(x1, x3, i);
        let d43 = row_sqdist_scalar(x4, x3, i);
        total += match weights.margin_form {
            MarginForm::Canonical => {
                (d12 - d13 + tau1).max(0.0) + (d12 - d43 + tau2).max(0.0)
            }
            MarginForm::PaperLiteral => (d12 - d13 + d12 - d43).max(tau1),
        };
    }
    Ok(total / n as f64)
}

/// Mean negative log-probability of the true class.
pub fn identity_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        total -= row[labels[i]] - m - z.ln();
    }
    Ok(total / n as f64)
}

/// Weighted total of all components. Adversarial terms enter with weight 1,
/// everything else with its configured lambda.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("gan_s", components.gan_s),
        ("gan_t", components.gan_t),
        ("cycle", components.cycle),
        ("attn", components.attn),
        ("quartet", components.quartet),
        ("id", components.id),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into(), value: v });
        }
    }
    let total = components.gan_s
        + components.gan_t
        + weights.lambda_cyc * components.cycle
        + weights.lambda_attn * components.attn
        + weights.lambda_quartet * components.quartet
        + weights.lambda_id * components.id;
    Ok(LossReport {
        gan_s: components.gan_s,
        gan_t: components.gan_t,
        cycle: components.cycle,
        attn: components.attn,
        quartet: components.quartet,
        id: components.id,
        total,
    })
}

// ---- tape versions, used by the training step ----

pub mod graph {
    //! Differentiable builds of the loss terms. Values agree with the plain
    //! functions in the parent module to floating-point roundoff; tests pin
    //! the two together.

    use super::*;

    pub fn adversarial_d(t: &mut Tape, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
        let r = t.clamp(d_real, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let r = t.ln(r);
        let r = t.mean_all(r);
        let f = t.one_minus(d_fake);
        let f = t.clamp(f, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let f = t.ln(f);
        let f = t.mean_all(f);
        Ok(t.add_weighted(&[(r, -1.0), (f, -1.0)]))
    }

    pub fn adversarial_g(t: &mut Tape, d_fake: NodeId) -> Result<NodeId> {
        let f = t.clamp(d_fake, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let f = t.ln(f);
        let f = t.mean_all(f);
        Ok(t.scale(f, -1.0))
    }

    pub fn mean_l1(t: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = t.sub(a, b)?;
        let d = t.abs(d);
        Ok(t.mean_all(d))
    }

    pub fn cycle(
        t: &mut Tape,
        x_s: NodeId,
        recon_s: NodeId,
        x_t: NodeId,
        recon_t: NodeId,
    ) -> Result<NodeId> {
        let a = mean_l1(t, x_s, recon_s)?;
        let b = mean_l1(t, x_t, recon_t)?;
        t.add(a, b)
    }

    pub fn attention_consistency(
        t: &mut Tape,
        a_src: NodeId,
        a_of_translated_src: NodeId,
        a_tgt: NodeId,
        a_of_translated_tgt: NodeId,
    ) -> Result<NodeId> {
        let a = mean_l1(t, a_src, a_of_translated_src)?;
        let b = mean_l1(t, a_tgt, a_of_translated_tgt)?;
        t.add(a, b)
    }

    /// max(x, tau) built as relu(x - tau) + tau.
    fn max_with_floor(t: &mut Tape, x: NodeId, tau: f64) -> NodeId {
        let shifted = t.add_scalar(x, -tau);
        let r = t.relu(shifted);
        t.add_scalar(r, tau)
    }

    pub fn triplet(
        t: &mut Tape,
        anchor: NodeId,
        positive: NodeId,
        negative: NodeId,
        weights: &LossWeights,
    ) -> Result<NodeId> {
        let d_ap = t.row_sqdist(anchor, positive)?;
        let d_an = t.row_sqdist(anchor, negative)?;
        let diff = t.sub(d_ap, d_an)?;
        let per_row = match weights.margin_form {
            MarginForm::Canonical => {
                let shifted = t.add_scalar(diff, weights.margin_tau1);
                t.relu(shifted)
            }
            MarginForm::PaperLiteral => max_with_floor(t, diff, weights.margin_tau1),
        };
        Ok(t.mean_all(per_row))
    }

    pub fn quartet(
        t: &mut Tape,
        x1: NodeId,
        x2: NodeId,
        x3: NodeId,
        x4: NodeId,
        weights: &LossWeights,
    ) -> Result<NodeId> {
        let d12 = t.row_sqdist(x1, x2)?;
        let d13 = t.row_sqdist(x1, x3)?;
        let d43 = t.row_sqdist(x4, x3)?;
        let per_row = match weights.margin_form {
            MarginForm::Canonical => {
                let a = t.sub(d12, d13)?;
                let a = t.add_scalar(a, weights.margin_tau1);
                let a = t.relu(a);
                let b = t.sub(d12, d43)?;
                let b = t.add_scalar(b, weights.margin_tau2);
                let b = t.relu(b);
                t.add(a, b)?
            }
            MarginForm::PaperLiteral => {
                let a = t.sub(d12, d13)?;
                let b = t.sub(d12, d43)?;
                let s = t.add(a, b)?;
                max_with_floor(t, s, weights.margin_tau1)
            }
        };
        Ok(t.mean_all(per_row))
    }

    pub fn identity(t: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        t.cross_entropy_mean(logits, labels)
    }

    /// Weighted sum of scalar loss nodes; mirrors [`super::total_loss`].
    pub struct TotalTerms {
        pub gan_s: NodeId,
        pub gan_t: NodeId,
        pub cycle: Option<NodeId>,
        pub attn: Option<NodeId>,
        pub quartet: Option<NodeId>,
        pub id: Option<NodeId>,
    }

    pub fn total(t: &mut Tape, terms: &TotalTerms, weights: &LossWeights) -> NodeId {
        let mut parts = vec![(terms.gan_s, 1.0), (terms.gan_t, 1.0)];
        if let Some(c) = terms.cycle {
            parts.push((c, weights.lambda_cyc));
        }
        if let Some(a) = terms.attn {
            parts.push((a, weights.lambda_attn));
        }
        if let Some(q) = terms.quartet {
            parts.push((q, weights.lambda_quartet));
        }
        if let Some(i) = terms.id {
            parts.push((i, weights.lambda_id));
        }
        t.add_weighted(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn adversarial_closed_forms() {
        // optimum: confident discriminator on both sides (scores hit the clamp)
        let v = adversarial_loss_d(&[1.0 - 1e-9], &[1e-9]).unwrap();
        assert!(v.abs() < TOL, "{v}");
        // coin-flip scores
        let v = adversarial_loss_d(&[0.5, 0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < TOL);
        let v = adversarial_loss_g(&[0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < TOL);
        let v = adversarial_loss_g(&[0.9999999]).unwrap();
        assert!(v.abs() < 1e-6);
        assert!(adversarial_loss_d(&[], &[0.5]).is_err());
        assert!(adversarial_loss_g(&[]).is_err());
    }

    #[test]
    fn adversarial_matches_scalar_oracle() {
        let mut rng = rng_from_seed(21);
        for _ in 0..20 {
            let real: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..0.99)).collect();
            let fake: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..0.99)).collect();
            // independent elementwise-log oracle
            let mut d = 0.0;
            for &r in &real {
                d -= r.ln() / real.len() as f64;
            }
            for &f in &fake {
                d -= (1.0 - f).ln() / fake.len() as f64;
            }
            assert!((adversarial_loss_d(&real, &fake).unwrap() - d).abs() < TOL);
            let mut g = 0.0;
            for &f in &fake {
                g -= f.ln() / fake.len() as f64;
            }
            assert!((adversarial_loss_g(&fake).unwrap() - g).abs() < TOL);
        }
    }

    #[test]
    fn cycle_closed_forms_and_oracle() {
        let x = Tensor::full(&[2, 3, 4, 4], 0.3);
        assert!(cycle_loss(&x, &x, &x, &x).unwrap().abs() < TOL);
        let off = x.map(|v| v + 0.1);
        let v = cycle_loss(&x, &off, &x, &off).unwrap();
        assert!((v - 0.2).abs() < TOL);

        let mut rng = rng_from_seed(22);
        let a = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let c = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let d = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let mut oracle = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            oracle += (x - y).abs();
        }
        oracle /= a.numel() as f64;
        let mut o2 = 0.0;
        for (x, y) in c.data().iter().zip(d.data()) {
            o2 += (x - y).abs();
        }
        oracle += o2 / c.numel() as f64;
        assert!((cycle_loss(&a, &b, &c, &d).unwrap() - oracle).abs() < TOL);
        assert!(cycle_loss(&a, &Tensor::zeros(&[1, 3, 4, 4]), &c, &d).is_err());
    }

    #[test]
    fn attention_consistency_closed_forms() {
        let a = Tensor::full(&[2, 1, 4, 4], 0.5);
        assert!(attention_consistency_loss(&a, &a, &a, &a).unwrap().abs() < TOL);
        let b = a.map(|v| v + 0.25);
        let v = attention_consistency_loss(&a, &b, &a, &a).unwrap();
        assert!((v - 0.25).abs() < TOL);
    }

    fn embeddings_with_distances(d_ap: f64, d_an: f64) -> (Tensor, Tensor, Tensor) {
        // 2-d embeddings placed on axes so squared distances are exact
        let anchor = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let positive = Tensor::from_vec(&[1, 2], vec![d_ap.sqrt(), 0.0]);
        let negative = Tensor::from_vec(&[1, 2], vec![0.0, d_an.sqrt()]);
        (anchor, positive, negative)
    }

    #[test]
    fn triplet_closed_forms() {
        let w = LossWeights::default();
        let (a, p, n) = embeddings_with_distances(0.2, 0.9);
        assert!(triplet_loss(&a, &p, &n, &w).unwrap().abs() < TOL);
        let (a, p, n) = embeddings_with_distances(0.9, 0.2);
        assert!((triplet_loss(&a, &p, &n, &w).unwrap() - 1.0).abs() < TOL);
        // batch mismatch
        let bad = Tensor::zeros(&[2, 2]);
        assert!(triplet_loss(&a, &p, &bad, &w).is_err());
    }

    #[test]
    fn quartet_closed_forms() {
        let w = LossWeights::default();
        // D(x1,x2)=0.2, D(x1,x3)=0.9, D(x4,x3)=0.8: both hinges inactive
        let x1 = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]);
        let x2 = Tensor::from_vec(&[1, 3], vec![0.2f64.sqrt(), 0.0, 0.0]);
        let x3 = Tensor::from_vec(&[1, 3], vec![0.0, 0.9f64.sqrt(), 0.0]);
        // place x4 so that D(x4,x3)=0.8: x4 = x3 + sqrt(0.8) on z
        let x4 = Tensor::from_vec(&[1, 3], vec![0.0, 0.9f64.sqrt(), 0.8f64.sqrt()]);
        assert!(quartet_loss(&x1, &x2, &x3, &x4, &w).unwrap().abs() < TOL);

        // all pairwise distances 0.5: loss = tau1 + tau2
        let s = (0.25f64).sqrt(); // two coords differing by 0.5 each -> d = 0.5
        let y1 = Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 0.0, 0.0]);
        let y2 = Tensor::from_vec(&[1, 4], vec![s, s, 0.0, 0.0]);
        let y3 = Tensor::from_vec(&[1, 4], vec![s, 0.0, s, 0.0]);
        let y4 = Tensor::from_vec(&[1, 4], vec![0.0, s, s, 0.0]);
        for (a, b) in [(&y1, &y2), (&y1, &y3), (&y4, &y3)] {
            assert!((row_sqdist_scalar(a, b, 0) - 0.5).abs() < 1e-12);
        }
        let v = quartet_loss(&y1, &y2, &y3, &y4, &w).unwrap();
        assert!((v - 0.45).abs() < TOL);
    }

    #[test]
    fn quartet_reduces_to_triplet_when_tau2_zero_and_second_hinge_inactive() {
        let mut rng = rng_from_seed(23);
        let mut w = LossWeights { margin_tau2: 0.0, ..LossWeights::default() };
        w.margin_form = MarginForm::Canonical;
        for _ in 0..20 {
            let x1 = rand_tensor(&[4, 8], &mut rng);
            let x2 = rand_tensor(&[4, 8], &mut rng);
            let x3 = rand_tensor(&[4, 8], &mut rng);
            // x4 far away so D(x4,x3) >= D(x1,x2) for every row
            let x4 = x3.map(|v| v + 10.0);
            let q = quartet_loss(&x1, &x2, &x3, &x4, &w).unwrap();
            let t = triplet_loss(&x1, &x2, &x3, &w).unwrap();
            assert!((q - t).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_losses_match_bruteforce_loops() {
        let mut rng = rng_from_seed(24);
        for form in [MarginForm::Canonical, MarginForm::PaperLiteral] {
            let w = LossWeights { margin_form: form, ..LossWeights::default() };
            let x1 = rand_tensor(&[6, 16], &mut rng);
            let x2 = rand_tensor(&[6, 16], &mut rng);
            let x3 = rand_tensor(&[6, 16], &mut rng);
            let x4 = rand_tensor(&[6, 16], &mut rng);
            let mut tri = 0.0;
            let mut quad = 0.0;
            for i in 0..6 {
                let dist = |a: &Tensor, b: &Tensor| -> f64 {
                    (0..16)
                        .map(|j| (a.data()[i * 16 + j] - b.data()[i * 16 + j]).powi(2))
                        .sum()
                };
                let (d12, d13, d43) = (dist(&x1, &x2), dist(&x1, &x3), dist(&x4, &x3));
                match form {
                    MarginForm::Canonical => {
                        tri += (d12 - d13 + w.margin_tau1).max(0.0);
                        quad += (d12 - d13 + w.margin_tau1).max(0.0)
                            + (d12 - d43 + w.margin_tau2).max(0.0);
                    }
                    MarginForm::PaperLiteral => {
                        tri += (d12 - d13).max(w.margin_tau1);
                        quad += (d12 - d13 + d12 - d43).max(w.margin_tau1);
                    }
                }
            }
            tri /= 6.0;
            quad /= 6.0;
            assert!((triplet_loss(&x1, &x2, &x3, &w).unwrap() - tri).abs() < TOL);
            assert!((quartet_loss(&x1, &x2, &x3, &x4, &w).unwrap() - quad).abs() < TOL);
        }
    }

    #[test]
    fn identity_loss_closed_forms() {
        // p(true) = 1
        let logits = Tensor::from_vec(&[1, 3], vec![100.0, 0.0, 0.0]);
        assert!(identity_loss(&logits, &[0]).unwrap() < TOL);
        // p(true) = 0.5 over two classes
        let logits = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert!((identity_loss(&logits, &[1]).unwrap() - std::f64::consts::LN_2).abs() < TOL);
        // uniform over 10 classes
        let logits = Tensor::zeros(&[1, 10]);
        assert!((identity_loss(&logits, &[3]).unwrap() - 10f64.ln()).abs() < TOL);
        // out-of-range label
        assert!(identity_loss(&logits, &[10]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let zero = LossComponents::default();
        assert!(total_loss(&zero, &w).unwrap().total.abs() < TOL);

        let comps = LossComponents { gan_s: 1.0, gan_t: 1.0, cycle: 1.0, attn: 2.0, quartet: 1.0, id: 1.0 };
        let r = total_loss(&comps, &w).unwrap();
        assert!((r.total - 34.0).abs() < TOL, "{}", r.total);

        let zeroed = LossWeights {
            lambda_attn: 0.0,
            lambda_quartet: 0.0,
            lambda_id: 0.0,
            lambda_cyc: 0.0,
            ..LossWeights::default()
        };
        let r = total_loss(&comps, &zeroed).unwrap();
        assert!((r.total - 2.0).abs() < TOL);

        let bad = LossComponents { cycle: f64::NAN, ..comps };
        match total_loss(&bad, &w) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "cycle"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    /// total is affine in each component with slope equal to its weight.
    #[test]
    fn total_loss_is_affine_per_component() {
        let w = LossWeights::default();
        let base = LossComponents { gan_s: 0.4, gan_t: 0.6, cycle: 0.2, attn: 0.1, quartet: 0.3, id: 0.5 };
        let t0 = total_loss(&base, &w).unwrap().total;
        let cases: Vec<(f64, Box<dyn Fn(&mut LossComponents)>)> = vec![
            (1.0, Box::new(|c: &mut LossComponents| c.gan_s += 1.0)),
            (1.0, Box::new(|c: &mut LossComponents| c.gan_t += 1.0)),
            (w.lambda_cyc, Box::new(|c: &mut LossComponents| c.cycle += 1.0)),
            (w.lambda_attn, Box::new(|c: &mut LossComponents| c.attn += 1.0)),
            (w.lambda_quartet, Box::new(|c: &mut LossComponents| c.quartet += 1.0)),
            (w.lambda_id, Box::new(|c: &mut LossComponents| c.id += 1.0)),
        ];
        for (slope, bump) in cases {
            let mut c = base;
            bump(&mut c);
            let t1 = total_loss(&c, &w).unwrap().total;
            assert!((t1 - t0 - slope).abs() < 1e-9);
        }
    }

    /// The tape builds must produce the same values as the plain functions.
    #[test]
    fn graph_losses_agree_with_plain_values() {
        let mut rng = rng_from_seed(25);
        let w = LossWeights::default();
        let real: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let fake: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut t = Tape::new(true);
        let rn = t.leaf(Tensor::from_vec(&[8], real.clone()));
        let fn_ = t.leaf(Tensor::from_vec(&[8], fake.clone()));
        let d = graph::adversarial_d(&mut t, rn, fn_).unwrap();
        assert!((t.value(d).item() - adversarial_loss_d(&real, &fake).unwrap()).abs() < 1e-12);
        let g = graph::adversarial_g(&mut t, fn_).unwrap();
        assert!((t.value(g).item() - adversarial_loss_g(&fake).unwrap()).abs() < 1e-12);

        for form in [MarginForm::Canonical, MarginForm::PaperLiteral] {
            let w = LossWeights { margin_form: form, ..w.clone() };
            let x1 = rand_tensor(&[5, 8], &mut rng);
            let x2 = rand_tensor(&[5, 8], &mut rng);
            let x3 = rand_tensor(&[5, 8], &mut rng);
            let x4 = rand_tensor(&[5, 8], &mut rng);
            let mut t = Tape::new(true);
            let n1 = t.leaf(x1.clone());
            let n2 = t.leaf(x2.clone());
            let n3 = t.leaf(x3.clone());
            let n4 = t.leaf(x4.clone());
            let tri = graph::triplet(&mut t, n1, n2, n3, &w).unwrap();
            let qua = graph::quartet(&mut t, n1, n2, n3, n4, &w).unwrap();
            assert!(
                (t.value(tri).item() - triplet_loss(&x1, &x2, &x3, &w).unwrap()).abs() < 1e-12
            );
            assert!(
                (t.value(qua).item() - quartet_loss(&x1, &x2, &x3, &x4, &w).unwrap()).abs()
                    < 1e-12
            );
        }
    }
}
