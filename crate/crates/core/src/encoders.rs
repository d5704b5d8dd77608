//! Token producers for the global, local and language conditioning streams.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{add_param, Init, Linear, Mlp};
use crate::plan::CropResult;
use crate::scalar::Scalar;
use crate::sim::{Image, View};
use crate::tensor::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("positional embedding width {0} is not divisible by 4")]
    PeWidth(usize),
    #[error("expected {expected} views, got {got}")]
    ViewCount { expected: usize, got: usize },
    #[error("view {index}: expected {expected:?} image of {ew}x{eh}, got {got:?} {gw}x{gh}")]
    ViewShape {
        index: usize,
        expected: View,
        ew: usize,
        eh: usize,
        got: View,
        gw: usize,
        gh: usize,
    },
    #[error("crop is {got}x{got}, expected {expected}x{expected}")]
    CropSide { expected: usize, got: usize },
    #[error("{got} patch centers for {expected} patches")]
    CenterCount { expected: usize, got: usize },
    #[error("empty subtask text")]
    EmptyText,
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Global,
    Local,
    Lang,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Global, Stream::Local, Stream::Lang];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Global => "global",
            Stream::Local => "local",
            Stream::Lang => "lang",
        }
    }
}

/// `N × d_model` tokens of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Mat<T>,
    pub stream: Stream,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn d_model(&self) -> usize {
        self.tokens.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub view: View,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    /// Camera views fed to the global stream, in token order.
    pub views: Vec<ViewSpec>,
    pub crop_side: usize,
    pub d_model: usize,
    /// Subtask strings whose words make up the closed vocabulary.
    pub vocab: Vec<String>,
    pub pe_temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            views: vec![
                ViewSpec {
                    view: View::Global,
                    width: 192,
                    height: 108,
                },
                ViewSpec {
                    view: View::Wrist,
                    width: 96,
                    height: 96,
                },
            ],
            crop_side: 96,
            d_model: 128,
            vocab: Vec::new(),
            pe_temperature: 10_000.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch == 0 {
            return Err(EncoderError::Config("patch must be positive".into()));
        }
        if self.views.is_empty() {
            return Err(EncoderError::Config("at least one view".into()));
        }
        if self.views.iter().any(|v| v.width == 0 || v.height == 0) {
            return Err(EncoderError::Config("view sides must be positive".into()));
        }
        if self.crop_side == 0 || !self.crop_side.is_multiple_of(self.patch) {
            return Err(EncoderError::Config(format!(
                "crop side {} not divisible by patch {}",
                self.crop_side, self.patch
            )));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(EncoderError::PeWidth(self.d_model));
        }
        if !(self.pe_temperature > 1.0) {
            return Err(EncoderError::Config("pe temperature must exceed 1".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Patch grid `(cols, rows)` of a view after padding to multiples.
    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(self.patch), height.div_ceil(self.patch))
    }

    pub fn global_tokens(&self) -> usize {
        self.views
            .iter()
            .map(|v| {
                let (c, r) = self.grid(v.width, v.height);
                c * r
            })
            .sum()
    }

    pub fn local_tokens(&self) -> usize {
        let n = self.crop_side / self.patch;
        n * n
    }
}

/// DETR-style 2D sine embedding of a pixel position.
///
/// The first half of the output encodes y, the second half x; each half
/// interleaves `sin`/`cos` at frequencies `temperature^(2k / (d/2))`.
pub fn sinusoidal_pe(
    p: (f64, f64),
    frame: (f64, f64),
    d_model: usize,
    temperature: f64,
) -> Result<Vec<f64>, EncoderError> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(EncoderError::PeWidth(d_model));
    }
    let half = d_model / 2;
    let mut out = vec![0.0; d_model];
    let yn = p.1 / frame.1 * 2.0 * PI;
    let xn = p.0 / frame.0 * 2.0 * PI;
    for k in 0..half / 2 {
        let freq = temperature.powf(2.0 * k as f64 / half as f64);
        out[2 * k] = (yn / freq).sin();
        out[2 * k + 1] = (yn / freq).cos();
        out[half + 2 * k] = (xn / freq).sin();
        out[half + 2 * k + 1] = (xn / freq).cos();
    }
    Ok(out)
}

/// 1D sine embedding of a scalar position (token index or scaled timestep).
pub fn sinusoidal_1d(pos: f64, d: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let pairs = d / 2;
    for k in 0..pairs {
        let arg = pos / temperature.powf(2.0 * k as f64 / d as f64);
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

pub fn positions_1d<T: Scalar>(n: usize, d: usize, temperature: f64) -> Mat<T> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| sinusoidal_1d(i as f64, d, temperature))
        .collect();
    Mat::from_f64(n, d, &data)
}

/// Closed word vocabulary; index 0 is the shared unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const UNK: usize = 0;

impl Vocabulary {
    pub fn from_subtasks(subtasks: &[String]) -> Self {
        let mut words: Vec<String> = Vec::new();
        for s in subtasks {
            for w in s.split_whitespace() {
                let w = w.to_lowercase();
                if !words.contains(&w) {
                    words.push(w);
                }
            }
        }
        Self { words }
    }

    /// Size including the unknown slot.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, word: &str) -> usize {
        let w = word.to_lowercase();
        self.words
            .iter()
            .position(|x| *x == w)
            .map_or(UNK, |i| i + 1)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, EncoderError> {
        let ids: Vec<usize> = text.split_whitespace().map(|w| self.index(w)).collect();
        if ids.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        Ok(ids)
    }
}

/// Patch matrix of an image, zero-padded to whole patches, plus the pixel
/// center of every patch. Rows are patches in row-major grid order; each row
/// lists the patch's pixels row-major with RGB interleaved.
pub fn patchify<T: Scalar>(img: &Image, patch: usize) -> (Mat<T>, Vec<[f64; 2]>) {
    let cols = img.width.div_ceil(patch);
    let rows = img.height.div_ceil(patch);
    let dim = patch * patch * 3;
    let mut m = Mat::zeros(rows * cols, dim);
    let mut centers = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let out = m.row_mut(pr * cols + pc);
            for dy in 0..patch {
                let y = pr * patch + dy;
                if y >= img.height {
                    break;
                }
                for dx in 0..patch {
                    let x = pc * patch + dx;
                    if x >= img.width {
                        break;
                    }
                    let px = img.get(y, x);
                    for k in 0..3 {
                        out[(dy * patch + dx) * 3 + k] = T::of(px[k] as f64);
                    }
                }
            }
            centers.push([
                (pc as f64 + 0.5) * patch as f64,
                (pr as f64 + 0.5) * patch as f64,
            ]);
        }
    }
    (m, centers)
}

fn pe_rows<T: Scalar>(
    centers: &[[f64; 2]],
    frame: (f64, f64),
    d: usize,
    temperature: f64,
) -> Result<Mat<T>, EncoderError> {
    let mut data = Vec::with_capacity(centers.len() * d);
    for c in centers {
        data.extend(sinusoidal_pe((c[0], c[1]), frame, d, temperature)?);
    }
    Ok(Mat::from_f64(centers.len(), d, &data))
}

/// Pre-processed global-stream input of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalInput<T> {
    pub patches: Mat<T>,
    pub view_ids: Vec<usize>,
    pub pe: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalInput<T> {
    pub patches: Mat<T>,
    /// Zero when the position path is switched off.
    pub pe: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangInput<T> {
    pub ids: Vec<usize>,
    pub pe: Mat<T>,
}

/// Encoder weights registered in a shared parameter store.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub vocab: Vocabulary,
    pub patch_proj: Linear,
    pub vision_adapter: Mlp,
    pub view_embedding: ParamId,
    pub word_embedding: ParamId,
    pub text_adapter: Mlp,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let vocab = Vocabulary::from_subtasks(&cfg.vocab);
        let patch_proj = Linear::new(
            store,
            "enc.patch_proj",
            cfg.patch_dim(),
            d,
            Init::Lecun,
            rng,
        );
        let vision_adapter = Mlp::new(store, "enc.vision_adapter", &[d, d, d], Init::Lecun, rng);
        let view_embedding = add_param(
            store,
            "enc.view_embedding",
            cfg.views.len(),
            d,
            Init::Normal(0.02),
            rng,
        );
        let word_embedding = add_param(
            store,
            "enc.word_embedding",
            vocab.len(),
            d,
            Init::Normal(1.0),
            rng,
        );
        let text_adapter = Mlp::new(store, "enc.text_adapter", &[d, d, d], Init::Lecun, rng);
        Ok(Self {
            cfg,
            vocab,
            patch_proj,
            vision_adapter,
            view_embedding,
            word_embedding,
            text_adapter,
        })
    }

    pub fn prepare_global<T: Scalar>(
        &self,
        images: &[&Image],
    ) -> Result<GlobalInput<T>, EncoderError> {
        let cfg = &self.cfg;
        if images.len() != cfg.views.len() {
            return Err(EncoderError::ViewCount {
                expected: cfg.views.len(),
                got: images.len(),
            });
        }
        let mut blocks = Vec::new();
        let mut pes = Vec::new();
        let mut view_ids = Vec::new();
        for (i, (img, spec)) in images.iter().zip(&cfg.views).enumerate() {
            if img.view != spec.view || img.width != spec.width || img.height != spec.height {
                return Err(EncoderError::ViewShape {
                    index: i,
                    expected: spec.view,
                    ew: spec.width,
                    eh: spec.height,
                    got: img.view,
                    gw: img.width,
                    gh: img.height,
                });
            }
            let (p, centers) = patchify::<T>(img, cfg.patch);
            pes.push(pe_rows::<T>(
                &centers,
                (img.width as f64, img.height as f64),
                cfg.d_model,
                cfg.pe_temperature,
            )?);
            view_ids.extend(std::iter::repeat_n(i, p.rows));
            blocks.push(p);
        }
        Ok(GlobalInput {
            patches: stack(&blocks),
            view_ids,
            pe: stack(&pes),
        })
    }

    pub fn prepare_local<T: Scalar>(
        &self,
        crop: &CropResult,
        with_pe: bool,
    ) -> Result<LocalInput<T>, EncoderError> {
        let cfg = &self.cfg;
        if crop.crop.width != cfg.crop_side || crop.crop.height != cfg.crop_side {
            return Err(EncoderError::CropSide {
                expected: cfg.crop_side,
                got: crop.crop.width,
            });
        }
        let (patches, _) = patchify::<T>(&crop.crop, cfg.patch);
        if crop.patch_centers.len() != patches.rows {
            return Err(EncoderError::CenterCount {
                expected: patches.rows,
                got: crop.patch_centers.len(),
            });
        }
        let pe = if with_pe {
            pe_rows(
                &crop.patch_centers,
                (crop.frame.0 as f64, crop.frame.1 as f64),
                cfg.d_model,
                cfg.pe_temperature,
            )?
        } else {
            Mat::zeros(patches.rows, cfg.d_model)
        };
        Ok(LocalInput { patches, pe })
    }

    pub fn prepare_lang<T: Scalar>(&self, text: &str) -> Result<LangInput<T>, EncoderError> {
        let ids = self.vocab.tokenize(text)?;
        let pe = positions_1d(ids.len(), self.cfg.d_model, self.cfg.pe_temperature);
        Ok(LangInput { ids, pe })
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Var {
        let h = self.patch_proj.forward(g, patches);
        self.vision_adapter.forward(g, h)
    }

    /// Global tokens for a batch, stacked along rows in batch order.
    pub fn global_graph<T: Scalar>(&self, g: &mut Graph<T>, batch: &[&GlobalInput<T>]) -> Var {
        let patches = g.constant(stack_with(batch, |b| &b.patches));
        let pe = g.constant(stack_with(batch, |b| &b.pe));
        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|b| b.view_ids.iter().copied())
            .collect();
        let h = self.project(g, patches);
        let table = g.param(self.view_embedding);
        let emb = g.gather(table, &ids);
        let h = g.add(h, emb);
        g.add(h, pe)
    }

    pub fn local_graph<T: Scalar>(&self, g: &mut Graph<T>, batch: &[&LocalInput<T>]) -> Var {
        let patches = g.constant(stack_with(batch, |b| &b.patches));
        let pe = g.constant(stack_with(batch, |b| &b.pe));
        let h = self.project(g, patches);
        g.add(h, pe)
    }

    pub fn lang_graph<T: Scalar>(&self, g: &mut Graph<T>, batch: &[&LangInput<T>]) -> Var {
        let ids: Vec<usize> = batch.iter().flat_map(|b| b.ids.iter().copied()).collect();
        let pe = g.constant(stack_with(batch, |b| &b.pe));
        let table = g.param(self.word_embedding);
        let e = g.gather(table, &ids);
        let h = self.text_adapter.forward(g, e);
        g.add(h, pe)
    }

    pub fn encode_global<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        images: &[&Image],
    ) -> Result<TokenSequence<T>, EncoderError> {
        let input = self.prepare_global(images)?;
        let mut g = Graph::new(params);
        let v = self.global_graph(&mut g, &[&input]);
        Ok(TokenSequence {
            tokens: g.value(v).clone(),
            stream: Stream::Global,
        })
    }

    /// Crop tokens plus, unless `with_pe` is off, the sine embedding of each
    /// patch's center in the original frame.
    pub fn encode_local<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        crop: &CropResult,
        with_pe: bool,
    ) -> Result<TokenSequence<T>, EncoderError> {
        let input = self.prepare_local(crop, with_pe)?;
        let mut g = Graph::new(params);
        let v = self.local_graph(&mut g, &[&input]);
        Ok(TokenSequence {
            tokens: g.value(v).clone(),
            stream: Stream::Local,
        })
    }

    pub fn encode_language<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        text: &str,
    ) -> Result<TokenSequence<T>, EncoderError> {
        let input = self.prepare_lang(text)?;
        let mut g = Graph::new(params);
        let v = self.lang_graph(&mut g, &[&input]);
        Ok(TokenSequence {
            tokens: g.value(v).clone(),
            stream: Stream::Lang,
        })
    }

    /// Patch projection without any additive embedding.
    pub fn project_patches<T: Scalar>(&self, params: &ParamStore<T>, patches: &Mat<T>) -> Mat<T> {
        let mut g = Graph::new(params);
        let x = g.constant(patches.clone());
        let v = self.project(&mut g, x);
        g.value(v).clone()
    }
}

pub(crate) fn stack<T: Scalar>(blocks: &[Mat<T>]) -> Mat<T> {
    stack_with(blocks, |b| b)
}

pub(crate) fn stack_with<T: Scalar, B>(items: &[B], f: impl Fn(&B) -> &Mat<T>) -> Mat<T> {
    let cols = items.first().map_or(0, |b| f(b).cols);
    let rows = items.iter().map(|b| f(b).rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for b in items {
        let m = f(b);
        assert_eq!(m.cols, cols, "stack width mismatch");
        data.extend_from_slice(&m.data);
    }
    Mat::from_vec(rows, cols, data)
}
