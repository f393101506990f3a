//! Retrieval metrics, ground truth and synthetic corpora.
//!
//! Recall@K counts a query as a hit when any relevant candidate appears in
//! its top K. "Text retrieval" is image-to-text, "image retrieval" is
//! text-to-image.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, param_err, Error, Result};
use crate::similarity::{rank_descending, Direction, SimilarityMatrix};
use crate::tensor::Tensor;

/// Cut-offs reported by [`MetricsReport`].
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Image–text relevance relation with dense 0-based ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: Vec<(usize, usize)>,
    by_image: Vec<Vec<usize>>,
    by_text: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("ground truth has no pairs".into()));
        }
        let n_img = pairs.iter().map(|p| p.0).max().unwrap() + 1;
        let n_txt = pairs.iter().map(|p| p.1).max().unwrap() + 1;
        let mut by_image = vec![Vec::new(); n_img];
        let mut by_text = vec![Vec::new(); n_txt];
        for &(i, t) in &pairs {
            if by_image[i].contains(&t) {
                return Err(Error::Data(format!("duplicate pair ({i}, {t})")));
            }
            by_image[i].push(t);
            by_text[t].push(i);
        }
        if let Some(i) = by_image.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!(
                "image ids are not dense: {i} is missing below {}",
                n_img - 1
            )));
        }
        if let Some(t) = by_text.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!(
                "text ids are not dense: {t} is missing below {}",
                n_txt - 1
            )));
        }
        Ok(Self {
            pairs,
            by_image,
            by_text,
        })
    }

    /// Image `i` matches text `i`.
    pub fn one_to_one(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (i, i)).collect())
    }

    /// Image `i` matches texts `i·caps .. (i+1)·caps`.
    pub fn with_captions(n_img: usize, caps: usize) -> Result<Self> {
        Self::new(
            (0..n_img)
                .flat_map(|i| (0..caps).map(move |c| (i, i * caps + c)))
                .collect(),
        )
    }

    /// Parse `image_id<TAB>text_id` lines. Blank lines are skipped.
    pub fn parse(src: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in src.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Parse(format!(
                    "ground truth line {}: expected `image_id<TAB>text_id`, got {line:?}",
                    n + 1
                )));
            };
            let id = |s: &str, what: &str| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::Parse(format!("ground truth line {}: bad {what} id {s:?}", n + 1))
                })
            };
            pairs.push((id(a, "image")?, id(b, "text")?));
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_text(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in &self.pairs {
            let _ = writeln!(out, "{i}\t{t}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, self.to_tsv())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn image_count(&self) -> usize {
        self.by_image.len()
    }

    pub fn text_count(&self) -> usize {
        self.by_text.len()
    }

    /// Candidates relevant to `query` in `dir`.
    pub fn relevant(&self, query: usize, dir: Direction) -> &[usize] {
        match dir {
            Direction::ImageToText => &self.by_image[query],
            Direction::TextToImage => &self.by_text[query],
        }
    }

    pub fn check_matrix(&self, s: &SimilarityMatrix) -> Result<()> {
        if s.rows() != self.image_count() || s.cols() != self.text_count() {
            return dim_err(format!(
                "similarity matrix is {}×{} but ground truth has {} images and {} texts",
                s.rows(),
                s.cols(),
                self.image_count(),
                self.text_count()
            ));
        }
        Ok(())
    }
}

/// Recall@k in percent from explicit per-query rankings.
pub fn recall_from_rankings(
    rankings: &[Vec<usize>],
    gt: &GroundTruth,
    k: usize,
    dir: Direction,
) -> Result<f64> {
    let queries = match dir {
        Direction::ImageToText => gt.image_count(),
        Direction::TextToImage => gt.text_count(),
    };
    if rankings.len() != queries {
        return dim_err(format!(
            "{} rankings for {queries} {dir} queries",
            rankings.len()
        ));
    }
    let mut hits = 0usize;
    for (q, r) in rankings.iter().enumerate() {
        if k == 0 || k > r.len() {
            return param_err(format!("k = {k} must lie in 1..={}", r.len()));
        }
        let rel = gt.relevant(q, dir);
        if r[..k].iter().any(|c| rel.contains(c)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

/// Raw rankings of every query in `dir`.
pub fn raw_rankings(s: &SimilarityMatrix, dir: Direction) -> Vec<Vec<usize>> {
    (0..s.query_count(dir))
        .map(|q| rank_descending(&s.scores(q, dir)))
        .collect()
}

/// Recall@k in percent of the raw ranking induced by `s`.
pub fn recall_at_k(s: &SimilarityMatrix, gt: &GroundTruth, k: usize, dir: Direction) -> Result<f64> {
    gt.check_matrix(s)?;
    let n = s.candidate_count(dir);
    if k == 0 || k > n {
        return param_err(format!("k = {k} must lie in 1..={n}"));
    }
    recall_from_rankings(&raw_rankings(s, dir), gt, k, dir)
}

/// Arithmetic mean of six recall percentages.
pub fn mean_recall(r: &[f64; 6]) -> Result<f64> {
    if let Some(v) = r.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(Error::Data(format!("recall {v} outside [0, 100]")));
    }
    Ok(r.iter().sum::<f64>() / 6.0)
}

/// R@1/5/10 for both directions and their mean.
///
/// A cut-off larger than the candidate count is evaluated on the full list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// Text retrieval (image queries).
    pub i2t: [f64; 3],
    /// Image retrieval (text queries).
    pub t2i: [f64; 3],
    pub mr: f64,
}

impl MetricsReport {
    pub fn from_rankings(
        i2t: &[Vec<usize>],
        t2i: &[Vec<usize>],
        gt: &GroundTruth,
    ) -> Result<Self> {
        let mut out = [[0.0; 3]; 2];
        for (slot, (rankings, dir)) in out
            .iter_mut()
            .zip([(i2t, Direction::ImageToText), (t2i, Direction::TextToImage)])
        {
            let n = rankings.first().map_or(0, Vec::len);
            for (v, &k) in slot.iter_mut().zip(&REPORT_KS) {
                *v = recall_from_rankings(rankings, gt, k.min(n), dir)?;
            }
        }
        let [a, b] = out;
        let mr = mean_recall(&[a[0], a[1], a[2], b[0], b[1], b[2]])?;
        Ok(Self { i2t: a, t2i: b, mr })
    }

    pub fn evaluate(s: &SimilarityMatrix, gt: &GroundTruth) -> Result<Self> {
        gt.check_matrix(s)?;
        Self::from_rankings(
            &raw_rankings(s, Direction::ImageToText),
            &raw_rankings(s, Direction::TextToImage),
            gt,
        )
    }

    pub fn values(&self) -> [f64; 7] {
        let (a, b) = (self.i2t, self.t2i);
        [a[0], a[1], a[2], b[0], b[1], b[2], self.mr]
    }

    pub fn csv_header() -> &'static str {
        "txt_r1,txt_r5,txt_r10,img_r1,img_r5,img_r10,mr"
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.2}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>8}{:>8}{:>8}",
            "direction", "R@1", "R@5", "R@10"
        );
        for (name, v) in [("text retrieval", self.i2t), ("image retrieval", self.t2i)] {
            let _ = writeln!(out, "{name:<16}{:>8.2}{:>8.2}{:>8.2}", v[0], v[1], v[2]);
        }
        let _ = writeln!(out, "{:<16}{:>8.2}", "mR", self.mr);
        out
    }
}

/// Paired image/text embeddings with their relevance relation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// `n_img × d`, unit rows.
    pub images: Tensor,
    /// `(n_img · caps) × d`, unit rows; captions of image `i` are contiguous.
    pub texts: Tensor,
    pub gt: GroundTruth,
}

impl SyntheticCorpus {
    pub fn similarity(&self) -> Result<SimilarityMatrix> {
        SimilarityMatrix::from_features(&self.images, &self.texts)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Random unit anchors per image; each caption is its anchor plus Gaussian
/// noise of scale `noise`, renormalized.
pub fn gen_synthetic(
    n_img: usize,
    caps: usize,
    d: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if d < 2 {
        return param_err(format!("embedding dimension must be ≥ 2, got {d}"));
    }
    if n_img == 0 || caps == 0 {
        return param_err("need at least one image and one caption per image");
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return param_err(format!("noise must be a finite value ≥ 0, got {noise}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut images = Vec::with_capacity(n_img * d);
    for _ in 0..n_img {
        let mut a = gauss(d);
        normalize(&mut a);
        images.extend(a);
    }
    let mut texts = Vec::with_capacity(n_img * caps * d);
    for i in 0..n_img {
        let anchor = &images[i * d..(i + 1) * d];
        for _ in 0..caps {
            let mut t: Vec<f64> = anchor
                .iter()
                .zip(gauss(d))
                .map(|(a, z)| a + noise * z)
                .collect();
            normalize(&mut t);
            texts.extend(t);
        }
    }
    Ok(SyntheticCorpus {
        images: Tensor::new(vec![n_img, d], images)?,
        texts: Tensor::new(vec![n_img * caps, d], texts)?,
        gt: GroundTruth::with_captions(n_img, caps)?,
    })
}

/// Add `offset` to every score of a randomly chosen subset of texts (each
/// picked with probability `fraction`).
///
/// Such "hub" texts rise in every image's ranking, which corrupts text
/// retrieval, while each text's own ranking of images is unchanged.
pub fn add_hub_texts(
    s: &SimilarityMatrix,
    fraction: f64,
    offset: f64,
    seed: u64,
) -> Result<(SimilarityMatrix, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return param_err(format!("hub fraction must lie in [0, 1], got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hubs: Vec<usize> = (0..s.cols()).filter(|_| rng.random::<f64>() < fraction).collect();
    let mut out = s.clone();
    for i in 0..s.rows() {
        for &t in &hubs {
            out.set(i, t, s.get(i, t) + offset);
        }
    }
    if !out.values().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("hub offset produced non-finite scores".into()));
    }
    Ok((out, hubs))
}

/// A synthetic corpus whose similarity matrix carries hub texts (see
/// [`add_hub_texts`]); the hub draw uses `seed + 1`.
pub fn gen_hub_corpus(
    n_img: usize,
    caps: usize,
    d: usize,
    noise: f64,
    hub_fraction: f64,
    hub_offset: f64,
    seed: u64,
) -> Result<(SyntheticCorpus, SimilarityMatrix, Vec<usize>)> {
    let corpus = gen_synthetic(n_img, caps, d, noise, seed)?;
    let (s, hubs) = add_hub_texts(&corpus.similarity()?, hub_fraction, hub_offset, seed.wrapping_add(1))?;
    Ok((corpus, s, hubs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_adversarial() {
        let gt = GroundTruth::one_to_one(5).unwrap();
        let eye = SimilarityMatrix::new(5, 5, Tensor::eye(5).into_data()).unwrap();
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            assert_eq!(recall_at_k(&eye, &gt, 1, dir).unwrap(), 100.0);
        }
        let anti = eye.map(|v| -v).unwrap();
        assert_eq!(recall_at_k(&anti, &gt, 1, Direction::ImageToText).unwrap(), 0.0);
        assert!(recall_at_k(&eye, &gt, 6, Direction::ImageToText).is_err());
    }

    #[test]
    fn matches_membership_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = (0..20 * 100).map(|_| rng.random::<f64>()).collect();
        let s = SimilarityMatrix::new(20, 100, v).unwrap();
        let gt = GroundTruth::with_captions(20, 5).unwrap();
        // A relevant text is in the top 5 iff fewer than 5 texts beat the
        // best relevant one.
        let mut hits = 0;
        for i in 0..20 {
            let best = (i * 5..i * 5 + 5).map(|t| s.get(i, t)).fold(f64::MIN, f64::max);
            let first = (i * 5..i * 5 + 5).find(|&t| s.get(i, t) == best).unwrap();
            let above = (0..100)
                .filter(|&t| s.get(i, t) > best || (s.get(i, t) == best && t < first))
                .count();
            hits += usize::from(above < 5);
        }
        let want = 100.0 * hits as f64 / 20.0;
        assert_eq!(recall_at_k(&s, &gt, 5, Direction::ImageToText).unwrap(), want);
    }

    #[test]
    fn mean_recall_cases() {
        assert_eq!(mean_recall(&[100.0; 6]).unwrap(), 100.0);
        assert_eq!(mean_recall(&[0.0, 0.0, 0.0, 100.0, 100.0, 100.0]).unwrap(), 50.0);
        let m = mean_recall(&[19.13, 42.36, 54.74, 15.67, 44.32, 60.51]).unwrap();
        assert!((m - 39.455).abs() < 1e-9);
        assert!(matches!(mean_recall(&[101.0, 0.0, 0.0, 0.0, 0.0, 0.0]), Err(Error::Data(_))));
    }

    #[test]
    fn ground_truth_parsing() {
        let gt = GroundTruth::parse("0\t0\n0\t1\n").unwrap();
        assert_eq!(gt.relevant(0, Direction::ImageToText), &[0, 1]);
        assert!(matches!(GroundTruth::parse("0\t0\n0\t0\n"), Err(Error::Data(_))));
        assert!(matches!(GroundTruth::parse("0\t0\n2\t1\n"), Err(Error::Data(_))));
        let err = GroundTruth::parse("0\t0\n0 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let gt = GroundTruth::with_captions(7, 5).unwrap();
        assert_eq!(GroundTruth::parse(&gt.to_tsv()).unwrap(), gt);
    }

    #[test]
    fn zero_noise_retrieves_perfectly() {
        let c = gen_synthetic(8, 5, 16, 0.0, 1).unwrap();
        let s = c.similarity().unwrap();
        assert_eq!(recall_at_k(&s, &c.gt, 1, Direction::TextToImage).unwrap(), 100.0);
        assert_eq!(recall_at_k(&s, &c.gt, 1, Direction::ImageToText).unwrap(), 100.0);
        assert_eq!(c, gen_synthetic(8, 5, 16, 0.0, 1).unwrap());
        assert!(gen_synthetic(8, 5, 1, 0.0, 1).is_err());
    }

    #[test]
    fn report_formats() {
        let gt = GroundTruth::one_to_one(2).unwrap();
        let s = SimilarityMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let r = MetricsReport::evaluate(&s, &gt).unwrap();
        assert_eq!(r.values(), [100.0; 7]);
        assert_eq!(r.csv_row(), "100.00,100.00,100.00,100.00,100.00,100.00,100.00");
        assert!(r.table().contains("mR"));
    }

    #[test]
    fn hub_texts_leave_columns_ordered() {
        let c = gen_synthetic(10, 3, 8, 0.3, 4).unwrap();
        let s = c.similarity().unwrap();
        let (h, hubs) = add_hub_texts(&s, 0.3, 0.8, 4).unwrap();
        assert!(!hubs.is_empty());
        assert_eq!(raw_rankings(&h, Direction::TextToImage), raw_rankings(&s, Direction::TextToImage));
    }
}
