//! Light-weight residual adapters, stored per language on top of a frozen
//! multilingual backbone.
//!
//! A serial adapter rewrites a sublayer output y as
//! `y + W_up · relu(W_down · LN(y))`; parallel variants instead read the
//! input of an attention sublayer (or the whole layer) and add
//! `W_up · MHA(W_down · LN(x))` to its output. Up-projections start at
//! zero, so injection leaves every forward bit-identical until training
//! moves the new weights.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, init_tensor, AttnParams, ForwardCtx, Linear, Model, ModelConfig, Norm, Stack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── spec ──────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Serial bottleneck after each feed-forward sublayer.
    #[default]
    SerialFfn,
    /// Parallel to the whole transformer layer.
    ParTl,
    /// Parallel to the self-attention sublayer.
    ParSa,
    /// Parallel to the cross-attention sublayer (decoder only).
    ParXa,
}

impl Placement {
    pub fn is_parallel(self) -> bool {
        !matches!(self, Placement::SerialFfn)
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AdapterSpec {
    /// Bottleneck width.
    pub dim: usize,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "default_true")]
    pub encoder: bool,
    #[serde(default = "default_true")]
    pub decoder: bool,
    /// Heads of the bottleneck attention in parallel placements.
    #[serde(default = "default_one")]
    pub n_heads: usize,
    pub languages: Vec<String>,
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 {
            return bad("adapter dim must be positive".into());
        }
        if !self.encoder && !self.decoder {
            return bad("adapter spec covers neither encoder nor decoder".into());
        }
        if self.placement == Placement::ParXa && self.encoder {
            return bad("par_xa adapters are decoder-only; the encoder has no cross-attention".into());
        }
        if self.placement.is_parallel() {
            if self.n_heads == 0 {
                return bad("parallel adapters need at least one head".into());
            }
            if self.dim % self.n_heads != 0 {
                return bad(format!(
                    "adapter dim {} not divisible by n_heads {}",
                    self.dim, self.n_heads
                ));
            }
        }
        if self.languages.is_empty() {
            return bad("adapter spec lists no languages".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for lang in &self.languages {
            if lang.is_empty() {
                return bad("empty language name".into());
            }
            if !seen.insert(lang.as_str()) {
                return bad(format!("duplicate language {lang:?} in adapter spec"));
            }
        }
        Ok(())
    }

    /// True when `self` and `other` describe the same adapter shape and
    /// placement and may share one bank.
    fn compatible(&self, other: &AdapterSpec) -> bool {
        self.dim == other.dim
            && self.placement == other.placement
            && self.encoder == other.encoder
            && self.decoder == other.decoder
            && self.n_heads == other.n_heads
    }
}

// ── parameter accounting ──────────────────────────────────────────────────

/// Parameters of one adapter cell at a site of the given width.
pub fn cell_param_count(width: usize, spec: &AdapterSpec) -> usize {
    let d = spec.dim;
    let base = 2 * width + (width * d + d) + (d * width + width);
    if spec.placement.is_parallel() {
        base + 4 * (d * d + d)
    } else {
        base
    }
}

/// Adapter parameters added per language across all covered layers.
pub fn per_language_param_count(cfg: &ModelConfig, spec: &AdapterSpec) -> usize {
    let mut n = 0;
    if spec.encoder {
        n += cfg.enc_layers * cell_param_count(cfg.d_model, spec);
    }
    if spec.decoder {
        n += cfg.dec_layers * cell_param_count(cfg.dec_d(), spec);
    }
    n
}

/// Every parameter path a bank adds, with shapes, in build order.
pub fn bank_census(cfg: &ModelConfig, spec: &AdapterSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut site = |stack: Stack, layer: usize, lang: &str, width: usize| {
        let base = format!("{}/layers/{layer}/adapters/{lang}", stack.prefix());
        let d = spec.dim;
        out.push((format!("{base}/norm/gain"), vec![width]));
        out.push((format!("{base}/norm/bias"), vec![width]));
        out.push((format!("{base}/down/weight"), vec![width, d]));
        out.push((format!("{base}/down/bias"), vec![d]));
        out.push((format!("{base}/up/weight"), vec![d, width]));
        out.push((format!("{base}/up/bias"), vec![width]));
        if spec.placement.is_parallel() {
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                out.push((format!("{base}/mha/{proj}/weight"), vec![d, d]));
                out.push((format!("{base}/mha/{proj}/bias"), vec![d]));
            }
        }
    };
    for lang in &spec.languages {
        if spec.encoder {
            for i in 0..cfg.enc_layers {
                site(Stack::Encoder, i, lang, cfg.d_model);
            }
        }
        if spec.decoder {
            for i in 0..cfg.dec_layers {
                site(Stack::Decoder, i, lang, cfg.dec_d());
            }
        }
    }
    out
}

// ── bank ──────────────────────────────────────────────────────────────────

pub struct AdapterCell<T: Scalar> {
    pub(crate) norm: Norm<T>,
    pub(crate) down: Linear<T>,
    pub(crate) up: Linear<T>,
    pub(crate) mha: Option<AttnParams<T>>,
}

struct LangCells<T: Scalar> {
    enc: Vec<AdapterCell<T>>,
    dec: Vec<AdapterCell<T>>,
}

pub struct AdapterBank<T: Scalar> {
    spec: AdapterSpec,
    cells: BTreeMap<String, LangCells<T>>,
}

impl<T: Scalar> AdapterBank<T> {
    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn languages(&self) -> Vec<&str> {
        self.cells.keys().map(|s| s.as_str()).collect()
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.cells.contains_key(lang)
    }

    /// Cell for a layer, or None when the spec leaves that stack alone.
    /// A language the bank has never seen is an error, not a silent no-op.
    pub fn cell(&self, stack: Stack, layer: usize, lang: &str) -> Result<Option<&AdapterCell<T>>> {
        let lc = self
            .cells
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        let vec = match stack {
            Stack::Encoder => &lc.enc,
            Stack::Decoder => &lc.dec,
        };
        Ok(vec.get(layer))
    }

    /// All parameter paths belonging to one language's cells.
    pub fn language_paths(&self, cfg: &ModelConfig, lang: &str) -> Result<Vec<String>> {
        if !self.has_language(lang) {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        let mut spec = self.spec.clone();
        spec.languages = vec![lang.to_string()];
        Ok(bank_census(cfg, &spec).into_iter().map(|(p, _)| p).collect())
    }
}

// ── injection ─────────────────────────────────────────────────────────────

/// Add a language bank to a model. Up-projection weights start at zero, so
/// model outputs are unchanged until the adapters train. A second call must
/// carry a compatible spec and only new languages; it extends the bank.
pub fn inject<T: Scalar>(model: &mut Model<T>, spec: &AdapterSpec, seed: u64) -> Result<()> {
    spec.validate()?;
    let merged_spec = match model.bank() {
        None => spec.clone(),
        Some(existing) => {
            if !existing.spec().compatible(spec) {
                return Err(Error::DuplicateInjection(
                    "adapter bank already present with a different spec".into(),
                ));
            }
            for lang in &spec.languages {
                if existing.has_language(lang) {
                    return Err(Error::DuplicateInjection(format!(
                        "language {lang:?} already has adapters"
                    )));
                }
            }
            let mut s = existing.spec().clone();
            s.languages.extend(spec.languages.iter().cloned());
            s
        }
    };

    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (path, shape) in bank_census(&cfg, spec) {
        let t = if path.ends_with("/up/weight") {
            Tensor::zeros(shape)
        } else {
            init_tensor::<T>(&path, &shape, &mut rng)
        };
        model.store_mut().insert(path, t)?;
    }

    // Rebuild the struct view from the store so merged banks stay in sync.
    let mut cells = BTreeMap::new();
    for lang in &merged_spec.languages {
        let enc = if merged_spec.encoder {
            wire_cells(model, &merged_spec, Stack::Encoder, cfg.enc_layers, lang)?
        } else {
            Vec::new()
        };
        let dec = if merged_spec.decoder {
            wire_cells(model, &merged_spec, Stack::Decoder, cfg.dec_layers, lang)?
        } else {
            Vec::new()
        };
        cells.insert(lang.clone(), LangCells { enc, dec });
    }
    *model.bank_slot() = Some(AdapterBank {
        spec: merged_spec,
        cells,
    });
    Ok(())
}

fn wire_cells<T: Scalar>(
    model: &Model<T>,
    spec: &AdapterSpec,
    stack: Stack,
    n_layers: usize,
    lang: &str,
) -> Result<Vec<AdapterCell<T>>> {
    let store = model.store();
    let mut cells = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let base = format!("{}/layers/{i}/adapters/{lang}", stack.prefix());
        let lin = |name: &str| -> Result<Linear<T>> {
            Ok(Linear {
                w: store.tensor(&format!("{base}/{name}/weight"))?,
                b: store.tensor(&format!("{base}/{name}/bias"))?,
            })
        };
        let mha = if spec.placement.is_parallel() {
            Some(AttnParams {
                q: lin("mha/q_proj")?,
                k: lin("mha/k_proj")?,
                v: lin("mha/v_proj")?,
                o: lin("mha/out_proj")?,
                n_heads: spec.n_heads,
            })
        } else {
            None
        };
        cells.push(AdapterCell {
            norm: Norm {
                g: store.tensor(&format!("{base}/norm/gain"))?,
                b: store.tensor(&format!("{base}/norm/bias"))?,
            },
            down: lin("down")?,
            up: lin("up")?,
            mha,
        });
    }
    Ok(cells)
}

// ── forwards ──────────────────────────────────────────────────────────────

/// Serial bottleneck: y + up(relu(down(LN(y)))).
pub(crate) fn serial_forward<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    cell: &AdapterCell<T>,
    y: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = cell.norm.apply(ctx.tape, y)?;
    let h = cell.down.apply(ctx.tape, &h)?;
    let h = ctx.tape.relu(&h)?;
    let h = cell.up.apply(ctx.tape, &h)?;
    ctx.tape.add(y, &h)
}

/// Parallel bottleneck: up(MHA(down(LN(x)))), to be added to the host
/// sublayer's output by the caller. `mask` matches the host attention's
/// constraints (padding in the encoder, causality in the decoder).
pub(crate) fn parallel_forward<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    cell: &AdapterCell<T>,
    x: &Tensor<T>,
    mask: Option<&[T]>,
) -> Result<Tensor<T>> {
    let mha_params = cell
        .mha
        .as_ref()
        .expect("parallel adapter cell built without attention params");
    let h = cell.norm.apply(ctx.tape, x)?;
    let h = cell.down.apply(ctx.tape, &h)?;
    let h = model::mha(ctx, mha_params, &h, &h, mask)?;
    cell.up.apply(ctx.tape, &h)
}

// ──────────────────────────────────────────────────────────────────────────
