//! Seeded end-to-end runs used by the command line: a loss evaluation on a
//! small batch and the finite-difference gradient suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{
    finite_diff_check, itc_loss, itm_loss, itm_pairs, mlm_loss, similarity_block, total_loss,
    triplet_opt_loss, MomentumQueue,
};
use crate::tensor::{ParamInit, Tensor};
use crate::text::{
    attention_mask, mlm_logits, mlm_mask, mm_encode, text_encode, tokenize, FusionWeights,
    TextEmbedding, TextEncoderWeights, Vocabulary,
};

/// `n × d` Gaussian rows scaled to unit length.
pub fn random_unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    for row in data.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).expect("nonzero extents")
}

const DEMO_CAPTIONS: [&str; 8] = [
    "many green trees are near a river",
    "several buildings and a parking lot with cars",
    "a baseball field near some houses",
    "two tennis courts in a residential area",
    "a bridge over the river with boats",
    "white airplanes are in an airport",
    "a large stadium near a road",
    "dense residential area with many houses",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDemo {
    pub itc: f64,
    pub triplet: f64,
    pub mlm: f64,
    pub itm: f64,
    pub total: f64,
    pub batch: usize,
    pub masked_tokens: usize,
}

/// Evaluate all four objectives on a seeded batch.
///
/// Image and text features are noisy pairs in the projection space; the
/// queues hold the batch plus extra random negatives. The masked-token and
/// matching terms run the text and fusion stacks on demo captions against
/// random image token maps of the encoder's final width.
pub fn loss_demo(cfg: &RunConfig) -> Result<LossDemo> {
    let n = cfg.batch_size;
    let d = cfg.proj_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = random_unit_rows(n, d, &mut rng);
    let noise = random_unit_rows(n, d, &mut rng);
    let mut texts = images.add(&noise.scale(0.5))?;
    for row in texts.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }

    let mut iq = MomentumQueue::new(cfg.queue_capacity, d)?;
    let mut tq = MomentumQueue::new(cfg.queue_capacity, d)?;
    let extra = cfg.queue_capacity.min(64).saturating_sub(n);
    iq.push_rows(&random_unit_rows(extra.max(1), d, &mut rng))?;
    tq.push_rows(&random_unit_rows(extra.max(1), d, &mut rng))?;
    iq.push_rows(&images)?;
    tq.push_rows(&texts)?;
    let itc = itc_loss(&images, &texts, &iq, &tq, cfg.tau)?.loss;
    let triplet = triplet_opt_loss(&similarity_block(&images, &texts), cfg.alpha)?.loss;

    let tcfg = cfg.text();
    tcfg.validate()?;
    let vocab = Vocabulary::demo();
    let mut init = ParamInit::new(cfg.seed);
    let emb = TextEmbedding::init(vocab.len(), tcfg.max_len, tcfg.width, &mut init);
    let enc = TextEncoderWeights::init(&tcfg, &mut init);
    let image_width = cfg.gswin().channels(3);
    let fusion = FusionWeights::init(&tcfg, image_width, vocab.len(), &mut init);
    let image_tokens: Vec<Tensor> = (0..n).map(|_| init.uniform(&[4, 4, image_width], 1)).collect();

    let mut mlm_total = 0.0;
    let mut masked_tokens = 0;
    let mut text_tokens = Vec::with_capacity(n);
    for i in 0..n {
        let ids = tokenize(DEMO_CAPTIONS[i % DEMO_CAPTIONS.len()], &vocab, tcfg.max_len)?;
        let mask = attention_mask(&ids);
        let masked = mlm_mask(&ids, vocab.len(), cfg.mlm_prob.clamp(1e-6, 1.0 - 1e-6), cfg.seed + i as u64)?;
        masked_tokens += masked.masked_count();
        let corrupted = text_encode(&emb.embed(&masked.ids)?, Some(&mask), &enc)?;
        let fused = mm_encode(&image_tokens[i], &corrupted.tokens, Some(&mask), &fusion)?;
        mlm_total += mlm_loss(&mlm_logits(&fused.tokens, &fusion)?, &masked)?;
        text_tokens.push((text_encode(&emb.embed(&ids)?, Some(&mask), &enc)?.tokens, mask));
    }
    let mlm = mlm_total / n as f64;

    let pairs = itm_pairs(n, cfg.seed)?;
    let mut probs = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (tokens, mask) = &text_tokens[p.text];
        probs.push(mm_encode(&image_tokens[p.image], tokens, Some(mask), &fusion)?.itm_prob);
        labels.push(p.matched);
    }
    let itm = itm_loss(&probs, &labels)?;

    Ok(LossDemo {
        itc,
        triplet,
        mlm,
        itm,
        total: total_loss(itc, triplet, mlm, itm),
        batch: n,
        masked_tokens,
    })
}

/// Worst relative errors over a run of the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradSuiteReport {
    pub batches: usize,
    pub triplet: f64,
    pub itc_images: f64,
    pub itc_texts: f64,
}

impl GradSuiteReport {
    pub fn max(&self) -> f64 {
        self.triplet.max(self.itc_images).max(self.itc_texts)
    }
}

/// Smallest distance any hinge argument may have from its kink; batches
/// closer than this are redrawn so the loss is smooth around the probe.
const HINGE_CLEARANCE: f64 = 1e-3;

fn triplet_batch(n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let s = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        let at = |i: usize, j: usize| s.data()[i * n + j];
        let clear = (0..n).all(|i| {
            (0..n).filter(|&j| j != i).all(|j| {
                (alpha - at(i, i) + at(i, j)).abs() > HINGE_CLEARANCE
                    && (alpha - at(j, j) + at(i, j)).abs() > HINGE_CLEARANCE
            })
        });
        if clear {
            return s;
        }
    }
}

/// Central-difference checks of the triplet gradient (w.r.t. the similarity
/// block) and the contrastive gradients (w.r.t. both feature blocks) over
/// `batches` seeded batches of `n` pairs in `d` dimensions.
pub fn grad_check_suite(
    batches: usize,
    n: usize,
    d: usize,
    alpha: f64,
    tau: f64,
    eps: f64,
    seed: u64,
) -> Result<GradSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradSuiteReport {
        batches,
        ..Default::default()
    };
    for _ in 0..batches {
        let s = triplet_batch(n, alpha, &mut rng);
        let analytic = triplet_opt_loss(&s, alpha)?.grad;
        let r = finite_diff_check(|x| Ok(triplet_opt_loss(x, alpha)?.loss), &s, &analytic, eps)?;
        report.triplet = report.triplet.max(r.max_rel_error);

        let f = random_unit_rows(n, d, &mut rng);
        let g = random_unit_rows(n, d, &mut rng);
        let mut iq = MomentumQueue::new(2 * n, d)?;
        let mut tq = MomentumQueue::new(2 * n, d)?;
        iq.push_rows(&random_unit_rows(n, d, &mut rng))?;
        tq.push_rows(&random_unit_rows(n, d, &mut rng))?;
        iq.push_rows(&f)?;
        tq.push_rows(&g)?;
        let out = itc_loss(&f, &g, &iq, &tq, tau)?;
        let rf = finite_diff_check(|x| Ok(itc_loss(x, &g, &iq, &tq, tau)?.loss), &f, &out.grad_images, eps)?;
        let rg = finite_diff_check(|x| Ok(itc_loss(&f, x, &iq, &tq, tau)?.loss), &g, &out.grad_texts, eps)?;
        report.itc_images = report.itc_images.max(rf.max_rel_error);
        report.itc_texts = report.itc_texts.max(rg.max_rel_error);
    }
    Ok(report)
}
