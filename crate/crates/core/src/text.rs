//! Text side: vocabulary, whitespace tokenizer, a randomly initialized
//! transformer text encoder, masked-token corruption and the fusion encoder
//! whose text queries cross-attend to image tokens.
//!
//! A single stack of `total_layers` transformer layers is split in half: the
//! first half encodes text alone, the second half fuses text with the image.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{sequence_attention, AttentionWeights, Linear, Mlp};
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{l2_normalize, sigmoid, ParamInit, Tensor};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
/// Ids below this value are reserved.
pub const NUM_RESERVED: usize = 5;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

/// Token ↔ id table. Ordinary tokens take ids from [`NUM_RESERVED`] upward in
/// file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (line, tok) in tokens.into_iter().enumerate() {
            let tok = tok.as_ref().trim().to_lowercase();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "vocabulary entry {} is empty or contains whitespace",
                    line + 1
                )));
            }
            if RESERVED_NAMES.contains(&tok.to_uppercase().as_str()) || vocab.ids.contains_key(&tok) {
                return Err(Error::Data(format!(
                    "vocabulary entry {} ({tok:?}) is duplicated or reserved",
                    line + 1
                )));
            }
            vocab.ids.insert(tok.clone(), NUM_RESERVED + vocab.tokens.len());
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// One token per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&crate::io::read_text(path.as_ref())?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        NUM_RESERVED + self.tokens.len()
    }

    /// True when no ordinary tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < NUM_RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - NUM_RESERVED).map(String::as_str)
        }
    }

    /// A small remote-sensing caption vocabulary for demos and tests.
    pub fn demo() -> Self {
        Self::from_tokens(DEMO_WORDS.split_whitespace()).expect("demo vocabulary is valid")
    }
}

const DEMO_WORDS: &str = "a an the of and with in on near some many two three several \
    is are there green white large small big buildings building houses house road roads \
    river lake pond trees tree field fields baseball tennis court courts parking lot cars \
    car airport airplanes plane bridge beach sea ocean waves boats ship harbor farmland \
    residential area dense sparse industrial factory storage tanks church stadium playground \
    meadow forest mountain desert bareland center square railway station viaduct park";

/// Lowercase whitespace tokenization into `[CLS] tokens… [SEP] [PAD]…` of
/// exactly `n_t` ids. Long texts are truncated so `[SEP]` always fits.
pub fn tokenize(text: &str, vocab: &Vocabulary, n_t: usize) -> Result<Vec<usize>> {
    if vocab.is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    if n_t < 2 {
        return param_err(format!("text length {n_t} leaves no room for [CLS] and [SEP]"));
    }
    let mut ids = Vec::with_capacity(n_t);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .map(|w| vocab.id(&w.to_lowercase()))
            .take(n_t - 2),
    );
    ids.push(SEP);
    ids.resize(n_t, PAD);
    Ok(ids)
}

/// `true` at every non-padding position.
pub fn attention_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&id| id != PAD).collect()
}

/// Word and position embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub token: Tensor,
    pub position: Tensor,
}

impl TextEmbedding {
    pub fn init(vocab_size: usize, max_len: usize, width: usize, init: &mut ParamInit) -> Self {
        Self {
            token: init.uniform(&[vocab_size, width], width),
            position: init.uniform(&[max_len, width], width),
        }
    }

    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, c) = (self.token.shape()[0], self.token.last_dim());
        if ids.len() > self.position.shape()[0] {
            return dim_err(format!(
                "{} ids exceed the {} learned positions",
                ids.len(),
                self.position.shape()[0]
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for (t, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {v}")));
            }
            data.extend(
                self.token
                    .row(id)
                    .iter()
                    .zip(self.position.row(t))
                    .map(|(a, b)| a + b),
            );
        }
        Tensor::new(vec![ids.len(), c], data)
    }
}

/// Tokenize and embed: `N_T × C_t` word plus position embeddings.
pub fn tokenize_embed(
    text: &str,
    vocab: &Vocabulary,
    emb: &TextEmbedding,
    n_t: usize,
) -> Result<Tensor> {
    emb.embed(&tokenize(text, vocab, n_t)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub width: usize,
    pub heads: usize,
    /// Layers of the whole text stack; half encode text, half fuse.
    pub total_layers: usize,
    pub max_len: usize,
    pub proj_dim: usize,
    pub mlp_ratio: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            total_layers: 12,
            max_len: 32,
            proj_dim: 256,
            mlp_ratio: 4.0,
        }
    }
}

impl TextConfig {
    pub fn text_layers(&self) -> usize {
        self.total_layers / 2
    }

    pub fn fusion_layers(&self) -> usize {
        self.total_layers - self.text_layers()
    }

    fn mlp_hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "text heads {} must divide text width {}",
                self.heads, self.width
            )));
        }
        if self.total_layers < 2 || !self.total_layers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "text stack of {} layers cannot be split evenly",
                self.total_layers
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max text length {} < 2", self.max_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLayer {
    pub attn: AttentionWeights,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderWeights {
    pub layers: Vec<TextLayer>,
    pub projection: Linear,
}

impl TextEncoderWeights {
    pub fn init(cfg: &TextConfig, init: &mut ParamInit) -> Self {
        let layers = (0..cfg.text_layers())
            .map(|_| TextLayer {
                attn: AttentionWeights::init_self(cfg.width, cfg.heads, init),
                mlp: Mlp::init(cfg.width, cfg.mlp_hidden(), init),
            })
            .collect();
        Self {
            layers,
            projection: Linear::init(cfg.width, cfg.proj_dim, init),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    pub tokens: Tensor,
    /// Unit-norm projection of the `[CLS]` token.
    pub feature: Vec<f64>,
    pub layers_run: usize,
}

/// Self-attention text encoder over embedded tokens `v: N_T × C_t`.
/// `key_mask[t] == false` hides position `t` (padding) as a key.
pub fn text_encode(
    v: &Tensor,
    key_mask: Option<&[bool]>,
    w: &TextEncoderWeights,
) -> Result<EncodedText> {
    v.expect_rank(2, "text_encode")?;
    let mut x = v.clone();
    for layer in &w.layers {
        x = sequence_attention(&x, None, &layer.attn, key_mask, false)?.output;
        x = layer.mlp.apply(&x)?;
    }
    let cls = w
        .projection
        .apply(&Tensor::new(vec![1, x.last_dim()], x.row(0).to_vec())?)?;
    Ok(EncodedText {
        feature: l2_normalize(cls.data())?,
        tokens: x,
        layers_run: w.layers.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// Maps image token width to the fusion width.
    pub image_proj: Linear,
    pub layers: Vec<FusionLayer>,
    pub itm_head: Linear,
    /// Untied output layer over the vocabulary.
    pub mlm_head: Linear,
}

impl FusionWeights {
    pub fn init(cfg: &TextConfig, image_width: usize, vocab_size: usize, init: &mut ParamInit) -> Self {
        let c = cfg.width;
        let layers = (0..cfg.fusion_layers())
            .map(|_| FusionLayer {
                self_attn: AttentionWeights::init_self(c, cfg.heads, init),
                cross_attn: AttentionWeights::init_cross(c, c, cfg.heads, init),
                mlp: Mlp::init(c, cfg.mlp_hidden(), init),
            })
            .collect();
        Self {
            image_proj: Linear::init(image_width, c, init),
            layers,
            itm_head: Linear::init(c, 1, init),
            mlm_head: Linear::init(c, vocab_size, init),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fused {
    pub tokens: Tensor,
    /// Match probability from the fused `[CLS]` token.
    pub itm_prob: f64,
}

/// Fusion encoder: each layer is text self-attention (padding masked),
/// cross-attention from text queries to image tokens, then an MLP.
///
/// `img_tokens` is `n_i × C_img` (a flattened token map); `txt_tokens` is
/// `N_T × C_m`.
pub fn mm_encode(
    img_tokens: &Tensor,
    txt_tokens: &Tensor,
    key_mask: Option<&[bool]>,
    w: &FusionWeights,
) -> Result<Fused> {
    let img = match img_tokens.shape().len() {
        2 => img_tokens.clone(),
        3 => img_tokens.clone().reshape(&[img_tokens.outer_len(), img_tokens.last_dim()])?,
        _ => return dim_err(format!("image tokens {:?} are neither n×C nor h×w×C", img_tokens.shape())),
    };
    if img.last_dim() != w.image_proj.in_dim() {
        return dim_err(format!(
            "image tokens of width {} but fusion expects {}",
            img.last_dim(),
            w.image_proj.in_dim()
        ));
    }
    txt_tokens.expect_rank(2, "fusion text tokens")?;
    if txt_tokens.last_dim() != w.image_proj.out_dim() {
        return dim_err(format!(
            "text tokens of width {} but fusion width is {}",
            txt_tokens.last_dim(),
            w.image_proj.out_dim()
        ));
    }
    let img = w.image_proj.apply(&img)?;
    let mut x = txt_tokens.clone();
    for layer in &w.layers {
        x = sequence_attention(&x, None, &layer.self_attn, key_mask, false)?.output;
        x = sequence_attention(&x, Some(&img), &layer.cross_attn, None, false)?.output;
        x = layer.mlp.apply(&x)?;
    }
    let logit = w
        .itm_head
        .apply(&Tensor::new(vec![1, x.last_dim()], x.row(0).to_vec())?)?;
    Ok(Fused {
        itm_prob: sigmoid(logit.data()[0]),
        tokens: x,
    })
}

/// Vocabulary logits for every fused position, `N_T × |V|`.
pub fn mlm_logits(fused: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    w.mlm_head.apply(fused)
}

/// Masked-token corruption of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    /// Corrupted ids fed to the encoder.
    pub ids: Vec<usize>,
    pub mask_flags: Vec<bool>,
    /// Original id at every selected position.
    pub labels: Vec<Option<usize>>,
}

impl MaskedText {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Select each ordinary (non-reserved) position with probability `p`; a
/// selected position becomes `[MASK]` 80% of the time, a random ordinary id
/// 10%, and stays unchanged 10%.
pub fn mlm_mask(ids: &[usize], vocab_size: usize, p: f64, seed: u64) -> Result<MaskedText> {
    if !(p > 0.0 && p < 1.0) {
        return param_err(format!("masking probability must lie in (0, 1), got {p}"));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config("masking needs at least one ordinary token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MaskedText {
        ids: ids.to_vec(),
        mask_flags: vec![false; ids.len()],
        labels: vec![None; ids.len()],
    };
    for (t, &id) in ids.iter().enumerate() {
        if id < NUM_RESERVED {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        out.mask_flags[t] = true;
        out.labels[t] = Some(id);
        let action: f64 = rng.random();
        if action < 0.8 {
            out.ids[t] = MASK;
        } else if action < 0.9 {
            out.ids[t] = rng.random_range(NUM_RESERVED..vocab_size);
        }
    }
    Ok(out)
}
