//! Training objectives evaluated at the loss layer.
//!
//! * image-text contrastive loss against momentum queues, with gradients
//!   with respect to both feature blocks;
//! * the triplet loss with an intra-pair term, with its (sub)gradient with
//!   respect to the similarity block;
//! * masked-token and matching cross-entropies;
//! * their unweighted total.
//!
//! Gradients stop at the loss layer; nothing here backpropagates into the
//! encoders.

mod gradcheck;
mod queue;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use queue::{MomentumQueue, DESK_QUEUE_CAPACITY, PRODUCTION_QUEUE_CAPACITY};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{dot, log_sum_exp, softmax_in_place, Tensor};
use crate::text::MaskedText;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_MOMENTUM: f64 = 0.995;
pub const ITM_CLAMP: f64 = 1e-12;

/// Paired image and text features of one batch, unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    images: Tensor,
    texts: Tensor,
}

impl LossBatch {
    pub fn new(images: Tensor, texts: Tensor) -> Result<Self> {
        images.expect_rank(2, "batch image features")?;
        if images.shape() != texts.shape() {
            return dim_err(format!(
                "batch images {:?} and texts {:?} must have the same shape",
                images.shape(),
                texts.shape()
            ));
        }
        for (name, t) in [("image", &images), ("text", &texts)] {
            for (i, row) in t.rows().enumerate() {
                let n = dot(row, row).sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::Data(format!("{name} feature {i} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self { images, texts })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn texts(&self) -> &Tensor {
        &self.texts
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `S[i][j] = F_i · G_j`.
    pub fn similarity(&self) -> Tensor {
        similarity_block(&self.images, &self.texts)
    }
}

/// `S[i][j] = images_i · texts_j` for two N×d blocks.
pub fn similarity_block(images: &Tensor, texts: &Tensor) -> Tensor {
    let n = images.shape()[0];
    let m = texts.shape()[0];
    let mut s = Vec::with_capacity(n * m);
    for fi in images.rows() {
        for gj in texts.rows() {
            s.push(dot(fi, gj));
        }
    }
    Tensor::new(vec![n, m], s).expect("similarity block shape")
}

#[derive(Debug, Clone)]
pub struct ItcOutput {
    pub loss: f64,
    pub grad_images: Tensor,
    pub grad_texts: Tensor,
}

fn queue_matrix<'a>(q: &'a MomentumQueue, dim: usize, name: &str) -> Result<Vec<&'a [f64]>> {
    if q.is_empty() {
        return Err(Error::State(format!("{name} queue is empty")));
    }
    if q.dim() != dim {
        return dim_err(format!("{name} queue holds {}-dim features, batch has {dim}", q.dim()));
    }
    Ok(q.iter().collect())
}

/// Symmetric contrastive loss
///
/// ```text
/// L = −1/(2N) Σ_i [ log softmax_j(F_i·T̃_j / τ)[pos] + log softmax_j(G_i·Ĩ_j / τ)[pos] ]
/// ```
///
/// where the positive logit is `F_i·G_i / τ` in both terms and the
/// denominators run over the queues. Queue entries are constants.
pub fn itc_loss(
    images: &Tensor,
    texts: &Tensor,
    image_queue: &MomentumQueue,
    text_queue: &MomentumQueue,
    tau: f64,
) -> Result<ItcOutput> {
    if !(tau > 0.0) {
        return param_err(format!("temperature must be > 0, got {tau}"));
    }
    images.expect_rank(2, "itc images")?;
    if images.shape() != texts.shape() {
        return dim_err(format!(
            "itc: images {:?} and texts {:?} differ",
            images.shape(),
            texts.shape()
        ));
    }
    let (n, d) = (images.shape()[0], images.shape()[1]);
    let tq = queue_matrix(text_queue, d, "text")?;
    let iq = queue_matrix(image_queue, d, "image")?;

    let mut loss = 0.0;
    let mut g_img = vec![0.0; n * d];
    let mut g_txt = vec![0.0; n * d];
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut logits = Vec::new();
    for i in 0..n {
        let (f, g) = (images.row(i), texts.row(i));
        let pos = dot(f, g) / tau;
        for (query, bank, grad, partner) in [
            (f, &tq, &mut g_img, g),
            (g, &iq, &mut g_txt, f),
        ] {
            logits.clear();
            logits.extend(bank.iter().map(|e| dot(query, e) / tau));
            loss += log_sum_exp(&logits) - pos;
            softmax_in_place(&mut logits, 1.0);
            let row = &mut grad[i * d..(i + 1) * d];
            for (p, e) in logits.iter().zip(bank.iter()) {
                for (r, ev) in row.iter_mut().zip(e.iter()) {
                    *r += scale * p * ev;
                }
            }
            // Positive logit depends on both features.
            for (r, pv) in row.iter_mut().zip(partner) {
                *r -= 2.0 * scale * pv;
            }
        }
    }
    Ok(ItcOutput {
        loss: loss / (2.0 * n as f64),
        grad_images: Tensor::new(vec![n, d], g_img)?,
        grad_texts: Tensor::new(vec![n, d], g_txt)?,
    })
}

/// Blend momentum parameters toward the live ones:
/// `m_params ← m · m_params + (1 − m) · params`.
pub fn momentum_update(params: &[Tensor], m_params: &mut [Tensor], m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return param_err(format!("momentum must lie in [0, 1), got {m}"));
    }
    if params.len() != m_params.len() {
        return dim_err(format!(
            "{} parameters but {} momentum copies",
            params.len(),
            m_params.len()
        ));
    }
    for (k, (p, mp)) in params.iter().zip(m_params.iter()).enumerate() {
        if p.shape() != mp.shape() {
            return dim_err(format!(
                "parameter {k}: shape {:?} vs momentum copy {:?}",
                p.shape(),
                mp.shape()
            ));
        }
    }
    for (p, mp) in params.iter().zip(m_params.iter_mut()) {
        for (mv, &pv) in mp.data_mut().iter_mut().zip(p.data()) {
            *mv = m * *mv + (1.0 - m) * pv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// Triplet loss over an N×N similarity block with an intra-pair term:
///
/// ```text
/// Σ_i Σ_{j≠i} [α − S_ii + S_ij]+  +  Σ_j Σ_{i≠j} [α − S_jj + S_ij]+  +  Σ_i (1 − S_ii)
/// ```
///
/// Hinges at exactly zero contribute a zero subgradient.
pub fn triplet_opt_loss(s: &Tensor, alpha: f64) -> Result<TripletOutput> {
    if !(alpha >= 0.0) {
        return param_err(format!("margin must be ≥ 0, got {alpha}"));
    }
    s.expect_rank(2, "triplet similarity block")?;
    let n = s.shape()[0];
    if s.shape()[1] != n {
        return dim_err(format!("triplet similarity block {:?} is not square", s.shape()));
    }
    let at = |i: usize, j: usize| s.data()[i * n + j];
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // image i against wrong text j
            let h = alpha - at(i, i) + at(i, j);
            if h > 0.0 {
                loss += h;
                grad[i * n + j] += 1.0;
                grad[i * n + i] -= 1.0;
            }
            // text j against wrong image i
            let h = alpha - at(j, j) + at(i, j);
            if h > 0.0 {
                loss += h;
                grad[i * n + j] += 1.0;
                grad[j * n + j] -= 1.0;
            }
        }
        loss += 1.0 - at(i, i);
        grad[i * n + i] -= 1.0;
    }
    Ok(TripletOutput {
        loss,
        grad: Tensor::new(vec![n, n], grad)?,
    })
}

/// Mean negative log-likelihood of the original ids at masked positions.
/// Zero when nothing is masked.
pub fn mlm_loss(logits: &Tensor, masked: &MaskedText) -> Result<f64> {
    logits.expect_rank(2, "mlm logits")?;
    let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
    if rows != masked.mask_flags.len() {
        return dim_err(format!(
            "{rows} logit rows for a {}-token text",
            masked.mask_flags.len()
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (&flag, label)) in masked.mask_flags.iter().zip(&masked.labels).enumerate() {
        if !flag {
            continue;
        }
        let label = label.ok_or_else(|| Error::Data(format!("masked position {t} has no label")))?;
        if label >= vocab {
            return Err(Error::Data(format!(
                "label id {label} at position {t} outside vocabulary of {vocab}"
            )));
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[label];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean binary cross-entropy of match probabilities, clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn itm_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return dim_err(format!("{} probabilities for {} labels", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return param_err("itm loss over an empty batch");
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(ITM_CLAMP, 1.0 - ITM_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Unweighted sum of the four objectives.
pub fn total_loss(itc: f64, triplet: f64, mlm: f64, itm: f64) -> f64 {
    itc + triplet + mlm + itm
}

/// One matching example: image index, text index, and whether they match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmPair {
    pub image: usize,
    pub text: usize,
    pub matched: bool,
}

/// Every positive pair `(i, i)` plus one uniformly drawn in-batch negative
/// `(i, j≠i)` for each, giving balanced labels.
pub fn itm_pairs(n: usize, seed: u64) -> Result<Vec<ItmPair>> {
    if n < 2 {
        return param_err(format!("in-batch negatives need at least 2 pairs, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(ItmPair {
            image: i,
            text: i,
            matched: true,
        });
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out.push(ItmPair {
            image: i,
            text: j,
            matched: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamInit;
    use crate::text::MaskedText;

    fn unit_rows(t: Tensor) -> Tensor {
        let d = t.last_dim();
        let mut out = t;
        for r in out.data_mut().chunks_exact_mut(d) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    /// Direct evaluation with explicit exponentials, no log-sum-exp.
    fn itc_oracle(f: &Tensor, g: &Tensor, iq: &[Vec<f64>], tq: &[Vec<f64>], tau: f64) -> f64 {
        let n = f.shape()[0];
        let mut acc = 0.0;
        for i in 0..n {
            let pos = (dot(f.row(i), g.row(i)) / tau).exp();
            let den_i: f64 = tq.iter().map(|t| (dot(f.row(i), t) / tau).exp()).sum();
            let den_t: f64 = iq.iter().map(|m| (dot(g.row(i), m) / tau).exp()).sum();
            acc += (pos / den_i).ln() + (pos / den_t).ln();
        }
        -acc / (2.0 * n as f64)
    }

    #[test]
    fn itc_single_candidate_is_zero() {
        let f = unit_rows(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let mut qi = MomentumQueue::new(1, 3).unwrap();
        let mut qt = MomentumQueue::new(1, 3).unwrap();
        qi.push(f.row(0)).unwrap();
        qt.push(f.row(0)).unwrap();
        let out = itc_loss(&f, &f, &qi, &qt, 0.07).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn itc_matches_direct_formula_and_is_order_invariant() {
        let mut init = ParamInit::new(7);
        let f = unit_rows(init.uniform(&[2, 5], 1));
        let g = unit_rows(init.uniform(&[2, 5], 1));
        let extra_i = unit_rows(init.uniform(&[2, 5], 1));
        let extra_t = unit_rows(init.uniform(&[2, 5], 1));
        let mut iq_rows: Vec<Vec<f64>> = f.rows().chain(extra_i.rows()).map(<[f64]>::to_vec).collect();
        let mut tq_rows: Vec<Vec<f64>> = g.rows().chain(extra_t.rows()).map(<[f64]>::to_vec).collect();
        let build = |rows: &[Vec<f64>]| {
            let mut q = MomentumQueue::new(4, 5).unwrap();
            rows.iter().for_each(|r| q.push(r).unwrap());
            q
        };
        let out = itc_loss(&f, &g, &build(&iq_rows), &build(&tq_rows), 0.07).unwrap();
        let oracle = itc_oracle(&f, &g, &iq_rows, &tq_rows, 0.07);
        assert!((out.loss - oracle).abs() < 1e-10, "{} vs {oracle}", out.loss);
        assert!(out.loss >= 0.0);

        iq_rows.reverse();
        tq_rows.rotate_left(1);
        let shuffled = itc_loss(&f, &g, &build(&iq_rows), &build(&tq_rows), 0.07).unwrap();
        assert!((shuffled.loss - out.loss).abs() < 1e-12);
    }

    #[test]
    fn itc_gradients_match_central_differences() {
        let mut init = ParamInit::new(8);
        let f = unit_rows(init.uniform(&[2, 4], 1));
        let g = unit_rows(init.uniform(&[2, 4], 1));
        let mut qi = MomentumQueue::new(4, 4).unwrap();
        let mut qt = MomentumQueue::new(4, 4).unwrap();
        qi.push_rows(&f).unwrap();
        qt.push_rows(&g).unwrap();
        qi.push_rows(&unit_rows(init.uniform(&[2, 4], 1))).unwrap();
        qt.push_rows(&unit_rows(init.uniform(&[2, 4], 1))).unwrap();
        let out = itc_loss(&f, &g, &qi, &qt, 0.07).unwrap();
        let rf = finite_diff_check(|x| Ok(itc_loss(x, &g, &qi, &qt, 0.07)?.loss), &f, &out.grad_images, 1e-5)
            .unwrap();
        let rg = finite_diff_check(|x| Ok(itc_loss(&f, x, &qi, &qt, 0.07)?.loss), &g, &out.grad_texts, 1e-5)
            .unwrap();
        assert!(rf.max_rel_error < 1e-4, "{rf:?}");
        assert!(rg.max_rel_error < 1e-4, "{rg:?}");
    }

    #[test]
    fn itc_errors() {
        let f = Tensor::filled(&[1, 2], 0.5);
        let empty = MomentumQueue::new(2, 2).unwrap();
        let mut full = MomentumQueue::new(2, 2).unwrap();
        full.push(&[1.0, 0.0]).unwrap();
        assert!(matches!(itc_loss(&f, &f, &empty, &full, 0.07), Err(Error::State(_))));
        assert!(matches!(itc_loss(&f, &f, &full, &full, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn momentum_update_fixtures() {
        let p = vec![Tensor::filled(&[2, 2], 1.0)];
        let mut mp = vec![Tensor::zeros(&[2, 2])];
        momentum_update(&p, &mut mp, 0.995).unwrap();
        assert!(mp[0].data().iter().all(|&v| (v - 0.005).abs() < 1e-15));

        let mut copy = vec![Tensor::filled(&[2, 2], -3.0)];
        momentum_update(&p, &mut copy, 0.0).unwrap();
        assert_eq!(copy, p);

        let mut same = p.clone();
        momentum_update(&p, &mut same, 1.0 - 1e-12).unwrap();
        assert_eq!(same, p);

        let mut bad = vec![Tensor::zeros(&[3])];
        assert!(matches!(momentum_update(&p, &mut bad, 0.5), Err(Error::Dimension(_))));
        assert!(momentum_update(&p, &mut mp, 1.0).is_err());
    }

    /// Literal double loop over the formula, i == j excluded.
    fn triplet_oracle(s: &[[f64; 2]; 2], alpha: f64) -> f64 {
        let mut l = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                if i != j {
                    l += (alpha - s[i][i] + s[i][j]).max(0.0);
                }
            }
        }
        for j in 0..2 {
            for i in 0..2 {
                if i != j {
                    l += (alpha - s[j][j] + s[i][j]).max(0.0);
                }
            }
        }
        l + (0..2).map(|i| 1.0 - s[i][i]).sum::<f64>()
    }

    #[test]
    fn triplet_fixtures() {
        let perfect = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(triplet_opt_loss(&perfect, 0.2).unwrap().loss, 0.0);

        let a = [[1.0, 0.5], [0.3, 0.9]];
        let b = [[1.0, 0.95], [0.3, 0.9]];
        assert!((triplet_oracle(&a, 0.2) - 0.1).abs() < 1e-12);
        assert!((triplet_oracle(&b, 0.2) - 0.5).abs() < 1e-12);
        let la = triplet_opt_loss(&Tensor::from_rows(&[&a[0], &a[1]]), 0.2).unwrap().loss;
        let lb = triplet_opt_loss(&Tensor::from_rows(&[&b[0], &b[1]]), 0.2).unwrap().loss;
        assert!((la - 0.1).abs() < 1e-10);
        assert!((lb - 0.5).abs() < 1e-10);
        assert!(triplet_opt_loss(&perfect, -0.1).is_err());
    }

    #[test]
    fn triplet_boundary_subgradient_is_zero() {
        // α − S_00 + S_01 = 0 exactly.
        let s = Tensor::from_rows(&[&[1.0, 0.75], &[0.0, 1.0]]);
        let out = triplet_opt_loss(&s, 0.25).unwrap();
        assert_eq!(out.grad.data()[1], 0.0);
        assert_eq!(out.grad.data()[0], -1.0);
    }

    #[test]
    fn mlm_fixtures() {
        let masked = |flags: Vec<bool>, labels: Vec<Option<usize>>| MaskedText {
            ids: vec![0; flags.len()],
            mask_flags: flags,
            labels,
        };
        let uniform = Tensor::zeros(&[3, 7]);
        let one = masked(vec![false, true, false], vec![None, Some(5), None]);
        assert!((mlm_loss(&uniform, &one).unwrap() - 7f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros(&[3, 7]);
        sharp.data_mut()[7 + 5] = 60.0;
        assert!(mlm_loss(&sharp, &one).unwrap() < 1e-20);

        // Row 0: p(true)=0.5 via logits ln(1), ln(1) over two live classes.
        let mut two = Tensor::filled(&[2, 4], f64::NEG_INFINITY);
        two.data_mut()[0] = 0.0;
        two.data_mut()[1] = 0.0;
        // Row 1: p(true)=0.25 over four equal logits.
        for k in 4..8 {
            two.data_mut()[k] = 1.5;
        }
        let both = masked(vec![true, true], vec![Some(1), Some(3)]);
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((mlm_loss(&two, &both).unwrap() - want).abs() < 1e-12);

        let none = masked(vec![false; 3], vec![None; 3]);
        assert_eq!(mlm_loss(&uniform, &none).unwrap(), 0.0);
        let oob = masked(vec![true, false, false], vec![Some(9), None, None]);
        assert!(matches!(mlm_loss(&uniform, &oob), Err(Error::Data(_))));
    }

    #[test]
    fn itm_fixtures() {
        let l = itm_loss(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = itm_loss(&[0.9, 0.2], &[true, false]).unwrap();
        assert!((l + (0.9f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-12);
        let perfect = itm_loss(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(perfect < 1e-11);
        assert!(matches!(itm_loss(&[0.5], &[true, false]), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0), 10.0);
    }

    #[test]
    fn itm_pairs_are_balanced() {
        let pairs = itm_pairs(6, 3).unwrap();
        assert_eq!(pairs.len(), 12);
        assert_eq!(pairs.iter().filter(|p| p.matched).count(), 6);
        for p in &pairs {
            assert_eq!(p.matched, p.image == p.text);
        }
        assert_eq!(pairs, itm_pairs(6, 3).unwrap());
        assert!(itm_pairs(1, 0).is_err());
    }
}
