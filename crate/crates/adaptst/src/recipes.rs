//! Training recipes: which parameters a run is allowed to move.
//!
//! A recipe names a subset of parameter paths; everything else stays frozen.
//! Plans are computed over paths, so the same classifier drives both live
//! models and dry-run parameter counting. Vocabulary-specialized embeddings
//! are trainable under every recipe.

use std::collections::BTreeSet;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{bank_census, AdapterSpec};
use crate::error::{Error, Result};
use crate::model::{census, init_tensor, Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;

// ── recipe kinds ──────────────────────────────────────────────────────────

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecipeKind {
    /// Every parameter moves, adapters included.
    Full,
    /// Nothing moves; useful for eval-only runs.
    Freeze,
    /// Decoder stack plus the encoder-decoder bridge.
    Decoder,
    /// Encoder stack only.
    Encoder,
    /// All layer norms plus all attention projections.
    Lna,
    /// Cross-attention blocks, their norms, and the bridge.
    CrossAttn,
    /// Adapter bank only.
    Adapters,
    /// Adapter bank plus cross-attention and bridge.
    AdaptersCrossAttn,
    /// One language's adapters; with a specialized vocabulary the new
    /// embeddings train too.
    Specialize { language: String },
    /// Explicit path prefixes, for experiments outside the named recipes.
    Paths { prefixes: Vec<String> },
}

impl RecipeKind {
    pub fn needs_bank(&self) -> bool {
        matches!(
            self,
            RecipeKind::Adapters | RecipeKind::AdaptersCrossAttn | RecipeKind::Specialize { .. }
        )
    }

    /// Does this recipe train the parameter at `path`?
    fn selects(&self, path: &str) -> bool {
        let is_adapter = path.contains("/adapters/");
        match self {
            RecipeKind::Full => true,
            RecipeKind::Freeze => false,
            RecipeKind::Decoder => {
                !is_adapter && (path.starts_with("decoder/") || path.starts_with("bridge/"))
            }
            RecipeKind::Encoder => !is_adapter && path.starts_with("encoder/"),
            RecipeKind::Lna => {
                !is_adapter
                    && (path.contains("_norm/")
                        || path.contains("/self_attn/")
                        || path.contains("/cross_attn/"))
            }
            RecipeKind::CrossAttn => {
                !is_adapter
                    && (path.contains("/cross_attn/")
                        || path.contains("/cross_attn_norm/")
                        || path.starts_with("bridge/"))
            }
            RecipeKind::Adapters => is_adapter,
            RecipeKind::AdaptersCrossAttn => is_adapter || RecipeKind::CrossAttn.selects(path),
            RecipeKind::Specialize { language } => {
                path.contains(&format!("/adapters/{language}/"))
            }
            RecipeKind::Paths { prefixes } => prefixes
                .iter()
                .any(|p| path == p || path.starts_with(&format!("{p}/"))),
        }
    }
}

// ── freeze plans ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FreezePlan {
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for path in &self.frozen {
            store.set_trainable(path, false)?;
        }
        for path in &self.trainable {
            store.set_trainable(path, true)?;
        }
        Ok(())
    }
}

/// Partition a model's parameters under a recipe. Specialized embedding
/// paths are forced trainable whatever the recipe says.
pub fn build_freeze_plan<T: Scalar>(model: &Model<T>, kind: &RecipeKind) -> Result<FreezePlan> {
    if kind.needs_bank() && model.bank().is_none() {
        return Err(Error::InvalidConfig(format!(
            "recipe {kind:?} needs an adapter bank, but none is injected"
        )));
    }
    if let RecipeKind::Specialize { language } = kind {
        let bank = model.bank().expect("checked above");
        if !bank.has_language(language) {
            return Err(Error::UnknownLanguage(language.clone()));
        }
    }
    let specialized: BTreeSet<String> = model.specialized_paths().into_iter().collect();
    let mut trainable = BTreeSet::new();
    let mut frozen = BTreeSet::new();
    for path in model.store().paths() {
        if kind.selects(&path) || specialized.contains(&path) {
            trainable.insert(path);
        } else {
            frozen.insert(path);
        }
    }
    Ok(FreezePlan { trainable, frozen })
}

/// Build the plan and flip the store's trainable flags in one step.
pub fn apply_recipe<T: Scalar>(model: &mut Model<T>, kind: &RecipeKind) -> Result<FreezePlan> {
    let plan = build_freeze_plan(model, kind)?;
    plan.apply(model.store_mut())?;
    Ok(plan)
}

// ── dry-run parameter accounting ──────────────────────────────────────────

/// Trainable parameters a recipe would move, computed from shapes alone.
/// `adapter` contributes bank paths; `new_vocab` models a specialized
/// target vocabulary replacing the embedding and output projection.
pub fn trainable_param_count(
    cfg: &ModelConfig,
    adapter: Option<&AdapterSpec>,
    kind: &RecipeKind,
    new_vocab: Option<usize>,
) -> Result<usize> {
    cfg.validate()?;
    if kind.needs_bank() && adapter.is_none() {
        return Err(Error::InvalidConfig(format!(
            "recipe {kind:?} needs an adapter spec to count against"
        )));
    }
    if let (RecipeKind::Specialize { language }, Some(spec)) = (kind, adapter) {
        if !spec.languages.contains(language) {
            return Err(Error::UnknownLanguage(language.clone()));
        }
    }
    let mut paths = census(cfg);
    let mut specialized: BTreeSet<&str> = BTreeSet::new();
    if let Some(v) = new_vocab {
        if v <= cfg.n_special {
            return Err(Error::InvalidConfig(format!(
                "new_vocab {v} must exceed n_special {}",
                cfg.n_special
            )));
        }
        for (path, shape) in paths.iter_mut() {
            if path == "decoder/embed/weight" {
                *shape = vec![v, cfg.dec_d()];
            } else if path == "decoder/out_proj/weight" {
                *shape = vec![cfg.dec_d(), v];
            }
        }
        specialized.insert("decoder/embed/weight");
        specialized.insert("decoder/out_proj/weight");
    }
    if let Some(spec) = adapter {
        spec.validate()?;
        paths.extend(bank_census(cfg, spec));
    }
    Ok(paths
        .iter()
        .filter(|(p, _)| kind.selects(p) || specialized.contains(p.as_str()))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Millions with one decimal, rounding half up: 201600 becomes "0.2M".
pub fn format_millions(count: usize) -> String {
    let tenths = (count + 50_000) / 100_000;
    format!("{}.{}M", tenths / 10, tenths % 10)
}

/// Per-group breakdown of a store's trainable parameters, for reports.
/// Groups are the leading path segment, with adapters split per language.
pub fn trainable_groups<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut groups: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for p in store.iter() {
        if !p.trainable {
            continue;
        }
        let group = if let Some(pos) = p.path.find("/adapters/") {
            let rest = &p.path[pos + "/adapters/".len()..];
            let lang = rest.split('/').next().unwrap_or("?");
            format!("adapters/{lang}")
        } else {
            p.path.split('/').next().unwrap_or("?").to_string()
        };
        *groups.entry(group).or_insert(0) += p.tensor.numel();
    }
    groups.into_iter().collect()
}

// ── transfer assembly ─────────────────────────────────────────────────────

/// Stitch a speech translation model out of two pretrained parents: the
/// encoder (and its frontend) from a speech recognizer, the decoder's
/// self-attention, feed-forward, embedding, and output layers from a text
/// denoiser. Cross-attention, its norms, and any bridge are freshly
/// initialized from `seed`; they never existed in either parent's role.
pub fn assemble_transfer<T: Scalar>(
    cfg: &ModelConfig,
    encoder_src: &Model<T>,
    decoder_src: &Model<T>,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (path, shape) in census(cfg) {
        let fresh = path.contains("/cross_attn/")
            || path.contains("/cross_attn_norm/")
            || path.starts_with("bridge/");
        let tensor = if fresh {
            init_tensor::<T>(&path, &shape, &mut rng)
        } else {
            let src = if path.starts_with("encoder/") {
                encoder_src.store()
            } else {
                decoder_src.store()
            };
            let found = src.require(&path, "transfer source")?;
            if found.tensor.shape() != shape {
                return Err(Error::ParamShapeMismatch {
                    path,
                    found: found.tensor.shape(),
                    expected: shape,
                });
            }
            crate::tensor::Tensor::from_vec(shape, found.tensor.values())?
        };
        store.insert(path, tensor)?;
    }
    Model::wire(cfg.clone(), store)
}

// ──────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{inject, Placement};
    use crate::model::{EncoderInput, ForwardCtx, FrontendKind};
    use crate::tape::Tape;

    fn paper_cfg(d_model: usize, n_heads: usize, enc: usize, dec: usize) -> ModelConfig {
        ModelConfig {
            d_model,
            ffn_dim: 2048,
            n_heads,
            enc_layers: enc,
            dec_layers: dec,
            feat_dim: 80,
            vocab_size: 10_000,
            n_special: 11,
            max_frames: 1000,
            dropout: 0.0,
            frontend: FrontendKind::Conv,
            dec_d_model: None,
        }
    }

    fn serial_spec(dim: usize, langs: &[&str]) -> AdapterSpec {
        AdapterSpec {
            dim,
            placement: Placement::SerialFfn,
            encoder: true,
            decoder: true,
            n_heads: 1,
            languages: langs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn decoder_finetune_counts_match_hand_totals() {
        // per decoder layer: 8(D²+D) + 6D + (D·F + F) + (F·D + D), six
        // layers, plus final norm 2D and untied 10k embeddings both ways
        let n = trainable_param_count(&paper_cfg(256, 4, 12, 6), None, &RecipeKind::Decoder, None)
            .unwrap();
        assert_eq!(n, 14_593_024);
        let n = trainable_param_count(&paper_cfg(512, 8, 12, 6), None, &RecipeKind::Decoder, None)
            .unwrap();
        assert_eq!(n, 35_465_216);
    }

    #[test]
    fn specialize_counts_embeddings_plus_one_language() {
        // 2 × 8000·256 new embeddings + 201,600 of adapters
        let cfg = paper_cfg(256, 4, 3, 3);
        let spec = serial_spec(64, &["de", "fr"]);
        let kind = RecipeKind::Specialize { language: "de".into() };
        let n = trainable_param_count(&cfg, Some(&spec), &kind, Some(8000)).unwrap();
        assert_eq!(n, 4_297_600);
        // unknown language is an error, not a zero
        let kind = RecipeKind::Specialize { language: "sw".into() };
        assert!(trainable_param_count(&cfg, Some(&spec), &kind, Some(8000)).is_err());
    }

    #[test]
    fn adapters_recipe_counts_the_bank_and_nothing_else() {
        let cfg = paper_cfg(256, 4, 3, 3);
        let spec = serial_spec(64, &["a", "b", "c"]);
        let n = trainable_param_count(&cfg, Some(&spec), &RecipeKind::Adapters, None).unwrap();
        assert_eq!(n, 3 * 201_600);
        assert!(trainable_param_count(&cfg, None, &RecipeKind::Adapters, None).is_err());
    }

    #[test]
    fn full_and_freeze_bracket_everything() {
        let cfg = paper_cfg(256, 4, 3, 3);
        let spec = serial_spec(64, &["a"]);
        let full = trainable_param_count(&cfg, Some(&spec), &RecipeKind::Full, None).unwrap();
        assert_eq!(full, crate::model::total_param_count(&cfg) + 201_600);
        let none = trainable_param_count(&cfg, Some(&spec), &RecipeKind::Freeze, None).unwrap();
        assert_eq!(none, 0);
    }

    #[test]
    fn millions_formatting_rounds_half_up() {
        assert_eq!(format_millions(201_600), "0.2M");
        assert_eq!(format_millions(604_800), "0.6M");
        assert_eq!(format_millions(398_592), "0.4M");
        assert_eq!(format_millions(1_195_776), "1.2M");
        assert_eq!(format_millions(2_389_248), "2.4M");
        assert_eq!(format_millions(4_750_848), "4.8M");
        assert_eq!(format_millions(794_880), "0.8M");
        assert_eq!(format_millions(14_593_024), "14.6M");
        assert_eq!(format_millions(35_465_216), "35.5M");
        assert_eq!(format_millions(4_297_600), "4.3M");
        assert_eq!(format_millions(0), "0.0M");
        assert_eq!(format_millions(50_000), "0.1M");
        assert_eq!(format_millions(49_999), "0.0M");
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ffn_dim: 16,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            feat_dim: 4,
            vocab_size: 12,
            n_special: 4,
            max_frames: 64,
            dropout: 0.0,
            frontend: FrontendKind::Conv,
            dec_d_model: None,
        }
    }

    #[test]
    fn plans_partition_the_store() {
        let mut model = Model::<f32>::build(tiny_cfg(), 40).unwrap();
        inject(&mut model, &serial_spec(4, &["de", "fr"]), 41).unwrap();
        for kind in [
            RecipeKind::Full,
            RecipeKind::Freeze,
            RecipeKind::Decoder,
            RecipeKind::Encoder,
            RecipeKind::Lna,
            RecipeKind::CrossAttn,
            RecipeKind::Adapters,
            RecipeKind::AdaptersCrossAttn,
            RecipeKind::Specialize { language: "de".into() },
        ] {
            let plan = build_freeze_plan(&model, &kind).unwrap();
            assert_eq!(
                plan.trainable.len() + plan.frozen.len(),
                model.store().len(),
                "{kind:?}"
            );
            assert!(plan.trainable.is_disjoint(&plan.frozen));
        }
    }

    #[test]
    fn applied_plan_matches_dry_run_count() {
        let cfg = tiny_cfg();
        let spec = serial_spec(4, &["de", "fr"]);
        for kind in [
            RecipeKind::Decoder,
            RecipeKind::Encoder,
            RecipeKind::Lna,
            RecipeKind::CrossAttn,
            RecipeKind::Adapters,
            RecipeKind::AdaptersCrossAttn,
            RecipeKind::Specialize { language: "fr".into() },
        ] {
            let mut model = Model::<f32>::build(cfg.clone(), 42).unwrap();
            inject(&mut model, &spec, 43).unwrap();
            apply_recipe(&mut model, &kind).unwrap();
            let want = trainable_param_count(&cfg, Some(&spec), &kind, None).unwrap();
            assert_eq!(model.store().trainable_elements(), want, "{kind:?}");
        }
    }

    #[test]
    fn lna_selects_norms_and_attention_only() {
        let mut model = Model::<f32>::build(tiny_cfg(), 44).unwrap();
        apply_recipe(&mut model, &RecipeKind::Lna).unwrap();
        for p in model.store().iter() {
            let is_norm = p.path.contains("_norm/");
            let is_attn = p.path.contains("/self_attn/") || p.path.contains("/cross_attn/");
            assert_eq!(p.trainable, is_norm || is_attn, "{}", p.path);
        }
        // ffn and conv must stay frozen
        assert!(!model.store().get("encoder/layers/0/ffn/w1/weight").unwrap().trainable);
        assert!(!model.store().get("encoder/subsample/conv1/weight").unwrap().trainable);
        assert!(!model.store().get("decoder/embed/weight").unwrap().trainable);
    }

    #[test]
    fn specialized_embeddings_train_under_every_recipe() {
        let mut model = Model::<f32>::build(tiny_cfg(), 45).unwrap();
        inject(&mut model, &serial_spec(4, &["de"]), 46).unwrap();
        model.specialize_vocab(9, 47).unwrap();
        for kind in [
            RecipeKind::Freeze,
            RecipeKind::Encoder,
            RecipeKind::Adapters,
            RecipeKind::Specialize { language: "de".into() },
        ] {
            let plan = build_freeze_plan(&model, &kind).unwrap();
            assert!(plan.trainable.contains("decoder/embed/weight"), "{kind:?}");
            assert!(plan.trainable.contains("decoder/out_proj/weight"), "{kind:?}");
        }
    }

    #[test]
    fn bank_recipes_demand_a_bank() {
        let model = Model::<f32>::build(tiny_cfg(), 48).unwrap();
        assert!(build_freeze_plan(&model, &RecipeKind::Adapters).is_err());
        assert!(
            build_freeze_plan(&model, &RecipeKind::Specialize { language: "de".into() }).is_err()
        );
        let mut model = model;
        inject(&mut model, &serial_spec(4, &["de"]), 49).unwrap();
        assert!(build_freeze_plan(&model, &RecipeKind::Adapters).is_ok());
        assert!(
            build_freeze_plan(&model, &RecipeKind::Specialize { language: "nl".into() }).is_err()
        );
    }

    #[test]
    fn paths_recipe_uses_whole_segment_prefixes() {
        let mut model = Model::<f32>::build(tiny_cfg(), 50).unwrap();
        let kind = RecipeKind::Paths { prefixes: vec!["decoder/embed".into()] };
        apply_recipe(&mut model, &kind).unwrap();
        assert!(model.store().get("decoder/embed/weight").unwrap().trainable);
        // "decoder/embed" must not catch "decoder/embedx" style siblings,
        // nor the rest of the decoder
        assert!(!model.store().get("decoder/out_proj/weight").unwrap().trainable);
        assert_eq!(model.store().trainable_elements(), 12 * 8);
    }

    #[test]
    fn trainable_groups_split_adapters_by_language() {
        let mut model = Model::<f32>::build(tiny_cfg(), 51).unwrap();
        inject(&mut model, &serial_spec(4, &["de", "fr"]), 52).unwrap();
        apply_recipe(&mut model, &RecipeKind::Adapters).unwrap();
        let groups = trainable_groups(model.store());
        let per_lang = crate::adapters::per_language_param_count(&tiny_cfg(), &serial_spec(4, &["de"]));
        assert_eq!(
            groups,
            vec![
                ("adapters/de".to_string(), per_lang),
                ("adapters/fr".to_string(), per_lang),
            ]
        );
    }

    #[test]
    fn transfer_takes_encoder_and_decoder_from_parents() {
        let cfg = tiny_cfg();
        let mut text_cfg = cfg.clone();
        text_cfg.frontend = FrontendKind::TextEmbed;
        let asr = Model::<f32>::build(cfg.clone(), 60).unwrap();
        let lm = Model::<f32>::build(text_cfg, 61).unwrap();
        let st = assemble_transfer(&cfg, &asr, &lm, 62).unwrap();

        let same = |a: &Model<f32>, b: &Model<f32>, path: &str| {
            a.store().tensor(path).unwrap().values() == b.store().tensor(path).unwrap().values()
        };
        assert!(same(&st, &asr, "encoder/subsample/conv1/weight"));
        assert!(same(&st, &asr, "encoder/layers/1/self_attn/q_proj/weight"));
        assert!(same(&st, &asr, "encoder/final_norm/gain"));
        assert!(same(&st, &lm, "decoder/layers/0/self_attn/q_proj/weight"));
        assert!(same(&st, &lm, "decoder/layers/1/ffn/w1/weight"));
        assert!(same(&st, &lm, "decoder/embed/weight"));
        assert!(same(&st, &lm, "decoder/out_proj/weight"));
        // cross-attention is fresh, not copied from either parent
        let xa = "decoder/layers/0/cross_attn/q_proj/weight";
        assert!(!same(&st, &lm, xa));
        assert!(!same(&st, &asr, xa));
        // fresh cross-attention norms start at the identity
        let g = st.store().tensor("decoder/layers/0/cross_attn_norm/gain").unwrap();
        assert!(g.values().iter().all(|&v| v == 1.0));

        // the assembled model runs end to end
        let frames: Vec<f32> = (0..8 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape);
        let enc = st
            .encode(&mut ctx, EncoderInput::Frames { data: &frames, t: 8, n_valid: 8 }, None)
            .unwrap();
        let logits = st.decode_forward(&mut ctx, &enc, &[1, 5], None).unwrap();
        assert_eq!(logits.shape(), vec![2, 12]);
    }

    #[test]
    fn transfer_is_deterministic_in_its_seed() {
        let cfg = tiny_cfg();
        let mut text_cfg = cfg.clone();
        text_cfg.frontend = FrontendKind::TextEmbed;
        let asr = Model::<f32>::build(cfg.clone(), 63).unwrap();
        let lm = Model::<f32>::build(text_cfg, 64).unwrap();
        let xa = "decoder/layers/0/cross_attn/q_proj/weight";
        let a = assemble_transfer(&cfg, &asr, &lm, 65).unwrap();
        let b = assemble_transfer(&cfg, &asr, &lm, 65).unwrap();
        let c = assemble_transfer(&cfg, &asr, &lm, 66).unwrap();
        assert_eq!(a.store().tensor(xa).unwrap().values(), b.store().tensor(xa).unwrap().values());
        assert_ne!(a.store().tensor(xa).unwrap().values(), c.store().tensor(xa).unwrap().values());
    }

    #[test]
    fn transfer_rejects_mismatched_parents() {
        let cfg = tiny_cfg();
        let mut fat = cfg.clone();
        fat.ffn_dim = 32;
        let mut text_cfg = cfg.clone();
        text_cfg.frontend = FrontendKind::TextEmbed;
        let asr = Model::<f32>::build(cfg.clone(), 67).unwrap();
        let fat_lm = {
            let mut c = fat;
            c.frontend = FrontendKind::TextEmbed;
            Model::<f32>::build(c, 68).unwrap()
        };
        assert!(matches!(
            assemble_transfer(&cfg, &asr, &fat_lm, 69),
            Err(Error::ParamShapeMismatch { .. })
        ));
    }
}
