//! Image × text similarity matrices.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{dot, Tensor};

/// Retrieval direction. Rows of a [`SimilarityMatrix`] always index images
/// and columns index texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Image queries rank texts (text retrieval).
    ImageToText,
    /// Text queries rank images (image retrieval).
    TextToImage,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::ImageToText => Direction::TextToImage,
            Direction::TextToImage => Direction::ImageToText,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" | "image-to-text" => Ok(Direction::ImageToText),
            "t2i" | "text-to-image" => Ok(Direction::TextToImage),
            other => Err(Error::Parameter(format!(
                "unknown direction {other:?} (expected i2t or t2i)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return dim_err(format!("similarity matrix {rows}×{cols} is empty"));
        }
        if values.len() != rows * cols {
            return dim_err(format!(
                "similarity matrix {rows}×{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite similarity at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged similarity rows");
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    /// Dot products between image features (rows of `images`) and text
    /// features (rows of `texts`). Cosine similarity for unit rows.
    pub fn from_features(images: &Tensor, texts: &Tensor) -> Result<Self> {
        images.expect_rank(2, "image features")?;
        texts.expect_rank(2, "text features")?;
        if images.last_dim() != texts.last_dim() {
            return dim_err(format!(
                "feature widths differ: images {:?}, texts {:?}",
                images.shape(),
                texts.shape()
            ));
        }
        let (ni, nt) = (images.shape()[0], texts.shape()[0]);
        let mut values = Vec::with_capacity(ni * nt);
        for fi in images.rows() {
            for gt in texts.rows() {
                values.push(dot(fi, gt));
            }
        }
        Self::new(ni, nt, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, image: usize, text: usize) -> f64 {
        self.values[image * self.cols + text]
    }

    pub fn set(&mut self, image: usize, text: usize, v: f64) {
        self.values[image * self.cols + text] = v;
    }

    pub fn row(&self, image: usize) -> &[f64] {
        &self.values[image * self.cols..(image + 1) * self.cols]
    }

    pub fn column(&self, text: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, text)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..self.cols {
            for i in 0..self.rows {
                values.push(self.get(i, t));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    /// Apply a scalar map entry-wise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Number of queries in `dir`.
    pub fn query_count(&self, dir: Direction) -> usize {
        match dir {
            Direction::ImageToText => self.rows,
            Direction::TextToImage => self.cols,
        }
    }

    /// Number of candidates each query ranks in `dir`.
    pub fn candidate_count(&self, dir: Direction) -> usize {
        match dir {
            Direction::ImageToText => self.cols,
            Direction::TextToImage => self.rows,
        }
    }

    /// Scores of every candidate for `query` in `dir`.
    pub fn scores(&self, query: usize, dir: Direction) -> Vec<f64> {
        match dir {
            Direction::ImageToText => self.row(query).to_vec(),
            Direction::TextToImage => self.column(query),
        }
    }

    /// Similarity between a query and a candidate in `dir`.
    pub fn pair(&self, query: usize, candidate: usize, dir: Direction) -> f64 {
        match dir {
            Direction::ImageToText => self.get(query, candidate),
            Direction::TextToImage => self.get(candidate, query),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Indices of `scores` sorted by descending score, ties by smaller index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based position `target` would take in a descending ranking of `scores`
/// (ties by smaller index), without sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}
