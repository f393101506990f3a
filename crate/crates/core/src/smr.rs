//! Similarity-matrix reweighting rerank.
//!
//! For each query, the top-K candidates of the raw ranking are rescored with
//!
//! ```text
//! W     = w_fwd + γ1 · w_rev + γ2 · w_md
//! w_fwd = 1 − j / K                 j: candidate's 1-based forward rank
//! w_rev = 1 − k / N                 k: query's 1-based rank in the candidate's
//!                                      own retrieval over all N queries
//! w_md  = s / max(row of image) + s / max(column of text)
//! S_opt = W · s                     entry-wise
//! ```
//!
//! The final ranking of a query is its top-K block sorted by `S_opt`, then the
//! remaining candidates in raw order. Entries of `S_opt` outside a query's
//! top-K block are zero; use [`SmrResult::rankings`] for retrieval.
//!
//! Ties anywhere go to the smaller index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::similarity::{rank_descending, Direction, SimilarityMatrix};

/// When to apply the monotone map `s → (s + 1) / 2` before reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positivity {
    /// Remap only if some similarity is ≤ 0.
    #[default]
    Auto,
    Always,
    Never,
}

impl fmt::Display for Positivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positivity::Auto => "auto",
            Positivity::Always => "always",
            Positivity::Never => "never",
        })
    }
}

impl FromStr for Positivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Positivity::Auto),
            "always" => Ok(Positivity::Always),
            "never" => Ok(Positivity::Never),
            other => param_err(format!(
                "unknown positivity mode {other:?} (expected auto, always or never)"
            )),
        }
    }
}

/// Map cosine similarities from `[-1, 1]` into `[0, 1]`.
pub fn positivity_map(s: &SimilarityMatrix) -> SimilarityMatrix {
    s.map(|v| (v + 1.0) / 2.0).expect("finite input stays finite")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmrParams {
    pub k: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub direction: Direction,
    pub positivity: Positivity,
}

impl SmrParams {
    pub fn new(k: usize, gamma1: f64, gamma2: f64, direction: Direction) -> Self {
        Self {
            k,
            gamma1,
            gamma2,
            direction,
            positivity: Positivity::Auto,
        }
    }

    pub fn validate(&self, candidates: usize) -> Result<()> {
        if self.k == 0 || self.k > candidates {
            return param_err(format!(
                "K = {} must lie in 1..={candidates} (candidate count)",
                self.k
            ));
        }
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(g >= 0.0) || !g.is_finite() {
                return param_err(format!("{name} must be a finite value ≥ 0, got {g}"));
            }
        }
        if self.k == 1 && self.gamma1 == 0.0 && self.gamma2 == 0.0 {
            return param_err(
                "K = 1 with gamma1 = gamma2 = 0 weights the only candidate by 0; use K ≥ 2",
            );
        }
        Ok(())
    }
}

/// Top-`k` candidates of `query` as `(candidate, 1-based rank)`.
pub fn rank_topk(
    s: &SimilarityMatrix,
    query: usize,
    k: usize,
    dir: Direction,
) -> Result<Vec<(usize, usize)>> {
    let n = s.candidate_count(dir);
    if k == 0 || k > n {
        return param_err(format!("k = {k} must lie in 1..={n}"));
    }
    check_index(query, s.query_count(dir), "query")?;
    Ok(rank_descending(&s.scores(query, dir))
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, c)| (c, r + 1))
        .collect())
}

/// `1 − j / k` for a 1-based rank `j ≤ k`.
pub fn forward_weight(j: usize, k: usize) -> Result<f64> {
    if j == 0 || j > k {
        return param_err(format!("rank {j} must lie in 1..={k}"));
    }
    Ok(1.0 - j as f64 / k as f64)
}

/// `1 − k / N`, where `k` is the rank of `query` when `candidate` is used as
/// a query in the opposite direction and `N` is the number of queries.
pub fn reverse_weight(
    s: &SimilarityMatrix,
    candidate: usize,
    query: usize,
    dir: Direction,
) -> Result<f64> {
    let n = s.query_count(dir);
    check_index(query, n, "query")?;
    check_index(candidate, s.candidate_count(dir), "candidate")?;
    let reverse = s.scores(candidate, dir.reverse());
    let k = crate::similarity::rank_of(&reverse, query);
    Ok(1.0 - k as f64 / n as f64)
}

/// `s(i, t) / max_row(i) + s(i, t) / max_col(t)`.
pub fn extreme_diff_ratio(s: &SimilarityMatrix, image: usize, text: usize) -> Result<f64> {
    check_index(image, s.rows(), "image")?;
    check_index(text, s.cols(), "text")?;
    let row_max = s.row(image).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let col_max = s.column(text).into_iter().fold(f64::NEG_INFINITY, f64::max);
    md_ratio(s.get(image, text), row_max, col_max)
}

fn md_ratio(v: f64, row_max: f64, col_max: f64) -> Result<f64> {
    if !(row_max > 0.0 && col_max > 0.0) {
        return Err(Error::Numeric(format!(
            "extreme difference ratio needs positive maxima, got row {row_max}, column {col_max}"
        )));
    }
    Ok(v / row_max + v / col_max)
}

fn check_index(i: usize, n: usize, what: &str) -> Result<()> {
    if i >= n {
        return param_err(format!("{what} index {i} out of range 0..{n}"));
    }
    Ok(())
}

/// Per-candidate breakdown of the rerank weight for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateWeights {
    pub candidate: usize,
    /// 1-based raw rank.
    pub rank: usize,
    pub similarity: f64,
    pub w_fwd: f64,
    pub w_rev: f64,
    pub w_md: f64,
    pub weight: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmrResult {
    /// Reweighted scores, images × texts, zero outside each query's top-K.
    pub s_opt: SimilarityMatrix,
    /// Final candidate order for every query in the rerank direction.
    pub rankings: Vec<Vec<usize>>,
    pub direction: Direction,
    /// Whether the positivity map was applied.
    pub remapped: bool,
}

/// Precomputed row and column statistics of an images × texts matrix, used
/// for image-to-text reranking.
struct Prepared<'a> {
    s: &'a SimilarityMatrix,
    row_max: Vec<f64>,
    col_max: Vec<f64>,
    /// `reverse_rank[t][i]`: 1-based rank of image `i` in text `t`'s column.
    reverse_rank: Vec<Vec<usize>>,
}

impl<'a> Prepared<'a> {
    fn new(s: &'a SimilarityMatrix) -> Self {
        let row_max = (0..s.rows())
            .map(|i| s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut col_max = Vec::with_capacity(s.cols());
        let mut reverse_rank = Vec::with_capacity(s.cols());
        for t in 0..s.cols() {
            let col = s.column(t);
            col_max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let mut ranks = vec![0; s.rows()];
            for (pos, i) in rank_descending(&col).into_iter().enumerate() {
                ranks[i] = pos + 1;
            }
            reverse_rank.push(ranks);
        }
        Self {
            s,
            row_max,
            col_max,
            reverse_rank,
        }
    }

    fn query(&self, image: usize, p: &SmrParams) -> Result<Vec<CandidateWeights>> {
        let n = self.s.rows() as f64;
        rank_descending(self.s.row(image))
            .into_iter()
            .take(p.k)
            .enumerate()
            .map(|(r, t)| {
                let rank = r + 1;
                let similarity = self.s.get(image, t);
                let w_fwd = forward_weight(rank, p.k)?;
                let w_rev = 1.0 - self.reverse_rank[t][image] as f64 / n;
                let w_md = md_ratio(similarity, self.row_max[image], self.col_max[t])?;
                let weight = w_fwd + p.gamma1 * w_rev + p.gamma2 * w_md;
                Ok(CandidateWeights {
                    candidate: t,
                    rank,
                    similarity,
                    w_fwd,
                    w_rev,
                    w_md,
                    weight,
                    score: weight * similarity,
                })
            })
            .collect()
    }
}

fn prepare_input(s_raw: &SimilarityMatrix, mode: Positivity) -> (SimilarityMatrix, bool) {
    let remap = match mode {
        Positivity::Always => true,
        Positivity::Never => false,
        Positivity::Auto => s_raw.min() <= 0.0,
    };
    let s = if remap { positivity_map(s_raw) } else { s_raw.clone() };
    (s, remap)
}

/// Oriented view: the matrix whose rows are the queries of `dir`.
fn oriented(s: SimilarityMatrix, dir: Direction) -> SimilarityMatrix {
    match dir {
        Direction::ImageToText => s,
        Direction::TextToImage => s.transpose(),
    }
}

/// Weight breakdown of the top-K candidates of one query, after the
/// positivity handling selected in `p`.
pub fn query_weights(
    s_raw: &SimilarityMatrix,
    query: usize,
    p: &SmrParams,
) -> Result<Vec<CandidateWeights>> {
    p.validate(s_raw.candidate_count(p.direction))?;
    check_index(query, s_raw.query_count(p.direction), "query")?;
    let (s, _) = prepare_input(s_raw, p.positivity);
    let s = oriented(s, p.direction);
    Prepared::new(&s).query(query, p)
}

/// Rerank every query of `p.direction`.
pub fn smr_rerank(s_raw: &SimilarityMatrix, p: &SmrParams) -> Result<SmrResult> {
    p.validate(s_raw.candidate_count(p.direction))?;
    let (s, remapped) = prepare_input(s_raw, p.positivity);
    let s = oriented(s, p.direction);
    let prep = Prepared::new(&s);
    let mut s_opt = vec![0.0; s.rows() * s.cols()];
    let mut rankings = Vec::with_capacity(s.rows());
    for q in 0..s.rows() {
        let mut block = prep.query(q, p)?;
        for c in &block {
            s_opt[q * s.cols() + c.candidate] = c.score;
        }
        block.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.candidate.cmp(&b.candidate)));
        let mut order: Vec<usize> = block.iter().map(|c| c.candidate).collect();
        order.extend(rank_descending(s.row(q)).into_iter().skip(p.k));
        rankings.push(order);
    }
    let s_opt = oriented(SimilarityMatrix::new(s.rows(), s.cols(), s_opt)?, p.direction);
    Ok(SmrResult {
        s_opt,
        rankings,
        direction: p.direction,
        remapped,
    })
}
