use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterBank, AdapterCell, Placement};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive mask value; exp(-1e9) underflows to exactly 0 in both f32 and
/// f64, so masked positions contribute nothing, bit for bit.
const MASK_NEG: f64 = -1e9;

// ── config ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    /// Two stride-2 kernel-5 1-D convolutions over feature frames (4x time
    /// reduction), ReLU between.
    #[default]
    Conv,
    /// Token embedding front, used by the denoising pretraining text encoder.
    TextEmbed,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Input feature dimension (conv frontend only).
    pub feat_dim: usize,
    pub vocab_size: usize,
    /// Reserved prefix of the vocab (eos/bos/mask/language tokens).
    #[serde(default)]
    pub n_special: usize,
    pub max_frames: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub frontend: FrontendKind,
    /// Decoder width when it differs from the encoder's; a linear bridge
    /// maps encoder states across. None means shared width.
    #[serde(default)]
    pub dec_d_model: Option<usize>,
}

impl ModelConfig {
    pub fn dec_d(&self) -> usize {
        self.dec_d_model.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || self.ffn_dim == 0 || self.n_heads == 0 {
            return bad("d_model, ffn_dim, n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.dec_d() % self.n_heads != 0 {
            return bad(format!(
                "dec_d_model {} not divisible by n_heads {}",
                self.dec_d(),
                self.n_heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("enc_layers and dec_layers must be at least 1".into());
        }
        if self.frontend == FrontendKind::Conv && self.feat_dim == 0 {
            return bad("feat_dim must be positive for the conv frontend".into());
        }
        if self.vocab_size <= self.n_special {
            return bad(format!(
                "vocab_size {} must exceed n_special {}",
                self.vocab_size, self.n_special
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        Ok(())
    }
}

// ── parameter census ──────────────────────────────────────────────────────

/// Every backbone parameter path with its shape, in build order.
///
/// Closed-form total (conv frontend, encoder width D, decoder width Dd,
/// ffn F, vocab V, feat f):
///   conv:      (D·f·5 + D) + (D·D·5 + D)
///   enc layer: 4(D² + D) + 2·2D + (D·F + F) + (F·D + D)   [× enc_layers]
///   enc norm:  2D
///   bridge:    D·Dd + Dd                                   [iff Dd ≠ D]
///   embed:     V·Dd
///   dec layer: 8(Dd² + Dd) + 3·2Dd + (Dd·F + F) + (F·Dd + Dd) [× dec_layers]
///   dec norm:  2Dd
///   out proj:  Dd·V                                        [untied, no bias]
pub fn census(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let dd = cfg.dec_d();
    let f = cfg.ffn_dim;
    let v = cfg.vocab_size;
    let mut out = Vec::new();
    let mut push = |p: String, s: Vec<usize>| out.push((p, s));

    match cfg.frontend {
        FrontendKind::Conv => {
            push("encoder/subsample/conv1/weight".into(), vec![d, cfg.feat_dim, 5]);
            push("encoder/subsample/conv1/bias".into(), vec![d]);
            push("encoder/subsample/conv2/weight".into(), vec![d, d, 5]);
            push("encoder/subsample/conv2/bias".into(), vec![d]);
        }
        FrontendKind::TextEmbed => {
            push("encoder/embed/weight".into(), vec![v, d]);
        }
    }
    for i in 0..cfg.enc_layers {
        let base = format!("encoder/layers/{i}");
        push(format!("{base}/self_attn_norm/gain"), vec![d]);
        push(format!("{base}/self_attn_norm/bias"), vec![d]);
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            push(format!("{base}/self_attn/{proj}/weight"), vec![d, d]);
            push(format!("{base}/self_attn/{proj}/bias"), vec![d]);
        }
        push(format!("{base}/ffn_norm/gain"), vec![d]);
        push(format!("{base}/ffn_norm/bias"), vec![d]);
        push(format!("{base}/ffn/w1/weight"), vec![d, f]);
        push(format!("{base}/ffn/w1/bias"), vec![f]);
        push(format!("{base}/ffn/w2/weight"), vec![f, d]);
        push(format!("{base}/ffn/w2/bias"), vec![d]);
    }
    push("encoder/final_norm/gain".into(), vec![d]);
    push("encoder/final_norm/bias".into(), vec![d]);
    if dd != d {
        push("bridge/weight".into(), vec![d, dd]);
        push("bridge/bias".into(), vec![dd]);
    }
    push("decoder/embed/weight".into(), vec![v, dd]);
    for i in 0..cfg.dec_layers {
        let base = format!("decoder/layers/{i}");
        push(format!("{base}/self_attn_norm/gain"), vec![dd]);
        push(format!("{base}/self_attn_norm/bias"), vec![dd]);
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            push(format!("{base}/self_attn/{proj}/weight"), vec![dd, dd]);
            push(format!("{base}/self_attn/{proj}/bias"), vec![dd]);
        }
        push(format!("{base}/cross_attn_norm/gain"), vec![dd]);
        push(format!("{base}/cross_attn_norm/bias"), vec![dd]);
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            push(format!("{base}/cross_attn/{proj}/weight"), vec![dd, dd]);
            push(format!("{base}/cross_attn/{proj}/bias"), vec![dd]);
        }
        push(format!("{base}/ffn_norm/gain"), vec![dd]);
        push(format!("{base}/ffn_norm/bias"), vec![dd]);
        push(format!("{base}/ffn/w1/weight"), vec![dd, f]);
        push(format!("{base}/ffn/w1/bias"), vec![f]);
        push(format!("{base}/ffn/w2/weight"), vec![f, dd]);
        push(format!("{base}/ffn/w2/bias"), vec![dd]);
    }
    push("decoder/final_norm/gain".into(), vec![dd]);
    push("decoder/final_norm/bias".into(), vec![dd]);
    push("decoder/out_proj/weight".into(), vec![dd, v]);
    out
}

pub fn total_param_count(cfg: &ModelConfig) -> usize {
    census(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Init rule shared by build, specialization, and transfer assembly:
/// gains one, biases zero, embeddings N(0, D^-1/2), other weights
/// N(0, fan_in^-1/2) with conv fan-in = cin·k.
pub(crate) fn init_tensor<T: Scalar>(
    path: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    if path.ends_with("/gain") {
        return Tensor::from_vec(shape.to_vec(), vec![T::one(); shape.iter().product()]).unwrap();
    }
    if path.ends_with("/bias") {
        return Tensor::zeros(shape.to_vec());
    }
    let std = if shape.len() == 3 {
        1.0 / ((shape[1] * shape[2]) as f64).sqrt()
    } else if path.ends_with("embed/weight") {
        1.0 / (shape[1] as f64).sqrt()
    } else {
        1.0 / (shape[0] as f64).sqrt()
    };
    Tensor::randn(shape.to_vec(), std, rng)
}

// ── building blocks ───────────────────────────────────────────────────────

pub(crate) struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.matmul(x, &self.w)?;
        tape.add_bias(&y, &self.b)
    }
}

pub(crate) struct Norm<T: Scalar> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.layer_norm(x, &self.g, &self.b, T::from_f64(LN_EPS))
    }
}

pub(crate) struct AttnParams<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub n_heads: usize,
}

struct Conv<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

enum Frontend<T: Scalar> {
    Conv { c1: Conv<T>, c2: Conv<T> },
    TextEmbed { embed: Tensor<T> },
}

struct EncLayer<T: Scalar> {
    sa_norm: Norm<T>,
    sa: AttnParams<T>,
    ffn_norm: Norm<T>,
    ffn1: Linear<T>,
    ffn2: Linear<T>,
}

struct DecLayer<T: Scalar> {
    sa_norm: Norm<T>,
    sa: AttnParams<T>,
    xa_norm: Norm<T>,
    xa: AttnParams<T>,
    ffn_norm: Norm<T>,
    ffn1: Linear<T>,
    ffn2: Linear<T>,
}

/// Which stack a layer (and so an adapter site) belongs to.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }
}

// ── forward context ───────────────────────────────────────────────────────

/// Per-forward scratch: the tape plus optional seeded dropout.
pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    dropout: Option<(&'a mut ChaCha8Rng, f64)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn eval(tape: &'a mut Tape<T>) -> Self {
        ForwardCtx {
            tape,
            dropout: None,
        }
    }

    /// Training-mode context; `p` is usually `cfg.dropout`. p = 0 keeps the
    /// forward deterministic and records no extra ops.
    pub fn train(tape: &'a mut Tape<T>, rng: &'a mut ChaCha8Rng, p: f64) -> Self {
        let dropout = if p > 0.0 { Some((rng, p)) } else { None };
        ForwardCtx { tape, dropout }
    }

    fn dropout(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &mut self.dropout {
            None => Ok(x.clone()),
            Some((rng, p)) => {
                let keep = 1.0 / (1.0 - *p);
                let mask: Vec<T> = (0..x.numel())
                    .map(|_| {
                        if rand::Rng::gen::<f64>(*rng) < *p {
                            T::zero()
                        } else {
                            T::from_f64(keep)
                        }
                    })
                    .collect();
                self.tape.mul_const(x, mask)
            }
        }
    }
}

// ── model ─────────────────────────────────────────────────────────────────

pub struct EncoderOutput<T: Scalar> {
    pub states: Tensor<T>,
    /// Rows of `states` that carry signal; later rows are padding.
    pub n_valid: usize,
}

pub enum EncoderInput<'a, T: Scalar> {
    Frames {
        data: &'a [T],
        t: usize,
        n_valid: usize,
    },
    Tokens(&'a [usize]),
}

pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    frontend: Frontend<T>,
    enc: Vec<EncLayer<T>>,
    enc_norm: Norm<T>,
    dec: Vec<DecLayer<T>>,
    dec_norm: Norm<T>,
    embed: Tensor<T>,
    out_proj: Tensor<T>,
    bridge: Option<Linear<T>>,
    bank: Option<AdapterBank<T>>,
    store: ParamStore<T>,
    specialized: bool,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (path, shape) in census(&cfg) {
            let t = init_tensor::<T>(&path, &shape, &mut rng);
            store.insert(path, t)?;
        }
        Self::wire(cfg, store)
    }

    /// Assemble the struct view over an already-populated store.
    pub(crate) fn wire(cfg: ModelConfig, store: ParamStore<T>) -> Result<Model<T>> {
        let lin = |base: &str| -> Result<Linear<T>> {
            Ok(Linear {
                w: store.tensor(&format!("{base}/weight"))?,
                b: store.tensor(&format!("{base}/bias"))?,
            })
        };
        let norm = |base: &str| -> Result<Norm<T>> {
            Ok(Norm {
                g: store.tensor(&format!("{base}/gain"))?,
                b: store.tensor(&format!("{base}/bias"))?,
            })
        };
        let attn = |base: &str| -> Result<AttnParams<T>> {
            Ok(AttnParams {
                q: lin(&format!("{base}/q_proj"))?,
                k: lin(&format!("{base}/k_proj"))?,
                v: lin(&format!("{base}/v_proj"))?,
                o: lin(&format!("{base}/out_proj"))?,
                n_heads: cfg.n_heads,
            })
        };

        let frontend = match cfg.frontend {
            FrontendKind::Conv => Frontend::Conv {
                c1: Conv {
                    w: store.tensor("encoder/subsample/conv1/weight")?,
                    b: store.tensor("encoder/subsample/conv1/bias")?,
                },
                c2: Conv {
                    w: store.tensor("encoder/subsample/conv2/weight")?,
                    b: store.tensor("encoder/subsample/conv2/bias")?,
                },
            },
            FrontendKind::TextEmbed => Frontend::TextEmbed {
                embed: store.tensor("encoder/embed/weight")?,
            },
        };
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let base = format!("encoder/layers/{i}");
            enc.push(EncLayer {
                sa_norm: norm(&format!("{base}/self_attn_norm"))?,
                sa: attn(&format!("{base}/self_attn"))?,
                ffn_norm: norm(&format!("{base}/ffn_norm"))?,
                ffn1: lin(&format!("{base}/ffn/w1"))?,
                ffn2: lin(&format!("{base}/ffn/w2"))?,
            });
        }
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let base = format!("decoder/layers/{i}");
            dec.push(DecLayer {
                sa_norm: norm(&format!("{base}/self_attn_norm"))?,
                sa: attn(&format!("{base}/self_attn"))?,
                xa_norm: norm(&format!("{base}/cross_attn_norm"))?,
                xa: attn(&format!("{base}/cross_attn"))?,
                ffn_norm: norm(&format!("{base}/ffn_norm"))?,
                ffn1: lin(&format!("{base}/ffn/w1"))?,
                ffn2: lin(&format!("{base}/ffn/w2"))?,
            });
        }
        let bridge = if cfg.dec_d() != cfg.d_model {
            Some(lin("bridge")?)
        } else {
            None
        };
        Ok(Model {
            enc_norm: norm("encoder/final_norm")?,
            dec_norm: norm("decoder/final_norm")?,
            embed: store.tensor("decoder/embed/weight")?,
            out_proj: store.tensor("decoder/out_proj/weight")?,
            frontend,
            enc,
            dec,
            bridge,
            bank: None,
            cfg,
            store,
            specialized: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bank(&self) -> Option<&AdapterBank<T>> {
        self.bank.as_ref()
    }

    pub(crate) fn bank_slot(&mut self) -> &mut Option<AdapterBank<T>> {
        &mut self.bank
    }

    pub fn is_specialized(&self) -> bool {
        self.specialized
    }

    /// Paths replaced by vocabulary specialization; always trainable.
    pub fn specialized_paths(&self) -> Vec<String> {
        if self.specialized {
            vec![
                "decoder/embed/weight".to_string(),
                "decoder/out_proj/weight".to_string(),
            ]
        } else {
            Vec::new()
        }
    }

    /// Replace target embedding and output projection for a new (monolingual)
    /// vocabulary. Everything else is untouched; the new tensors are
    /// trainable regardless of the active recipe.
    pub fn specialize_vocab(&mut self, new_vocab_size: usize, seed: u64) -> Result<()> {
        if new_vocab_size <= self.cfg.n_special {
            return Err(Error::InvalidConfig(format!(
                "new_vocab_size {} must exceed n_special {}",
                new_vocab_size, self.cfg.n_special
            )));
        }
        let dd = self.cfg.dec_d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = init_tensor::<T>("decoder/embed/weight", &[new_vocab_size, dd], &mut rng);
        let out_proj =
            init_tensor::<T>("decoder/out_proj/weight", &[dd, new_vocab_size], &mut rng);
        self.store.remove("decoder/embed/weight");
        self.store.remove("decoder/out_proj/weight");
        self.store
            .insert("decoder/embed/weight".into(), embed.clone())?;
        self.store
            .insert("decoder/out_proj/weight".into(), out_proj.clone())?;
        self.embed = embed;
        self.out_proj = out_proj;
        self.cfg.vocab_size = new_vocab_size;
        self.specialized = true;
        Ok(())
    }

    // ── forward ───────────────────────────────────────────────────────────

    pub fn encode(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        input: EncoderInput<'_, T>,
        lang: Option<&str>,
    ) -> Result<EncoderOutput<T>> {
        let (mut x, n_valid) = match input {
            EncoderInput::Frames { data, t, n_valid } => {
                if self.cfg.frontend != FrontendKind::Conv {
                    return Err(Error::InvalidConfig(
                        "frame input requires the conv frontend".into(),
                    ));
                }
                if t == 0 || n_valid == 0 {
                    return Err(Error::EmptyInput("encoder frames"));
                }
                if n_valid > t || data.len() != t * self.cfg.feat_dim {
                    return Err(Error::BadShape {
                        op: "encode",
                        expected: "t × feat_dim frames with n_valid ≤ t",
                        got: vec![data.len(), t, n_valid],
                    });
                }
                let Frontend::Conv { c1, c2 } = &self.frontend else {
                    unreachable!()
                };
                // Zero the pad region up front so padded frames cannot leak
                // into valid outputs through the conv receptive field.
                let feat = self.cfg.feat_dim;
                let mut masked = data.to_vec();
                for r in n_valid..t {
                    for c in 0..feat {
                        masked[r * feat + c] = T::zero();
                    }
                }
                let frames = Tensor::from_vec(vec![t, feat], masked)?;
                let h = ctx.tape.conv1d(&frames, &c1.w, &c1.b, 2, 2)?;
                let h = ctx.tape.relu(&h)?;
                // The first conv writes junk (bias plus boundary spill) into
                // rows past its valid range, inside the second conv's
                // receptive field for valid rows. Zero them so a padded
                // forward matches the unpadded one bit for bit.
                let t1 = h.shape()[0];
                let v1 = n_valid.div_ceil(2);
                let h = if v1 < t1 {
                    let d = self.cfg.d_model;
                    let mut m = vec![T::one(); t1 * d];
                    for cell in m[v1 * d..].iter_mut() {
                        *cell = T::zero();
                    }
                    ctx.tape.mul_const(&h, m)?
                } else {
                    h
                };
                let h = ctx.tape.conv1d(&h, &c2.w, &c2.b, 2, 2)?;
                let valid = n_valid.div_ceil(2).div_ceil(2);
                (h, valid)
            }
            EncoderInput::Tokens(tokens) => {
                if self.cfg.frontend != FrontendKind::TextEmbed {
                    return Err(Error::InvalidConfig(
                        "token input requires the text-embed frontend".into(),
                    ));
                }
                if tokens.is_empty() {
                    return Err(Error::EmptyInput("encoder tokens"));
                }
                let Frontend::TextEmbed { embed } = &self.frontend else {
                    unreachable!()
                };
                let h = ctx.tape.gather(embed, tokens)?;
                let h = ctx
                    .tape
                    .scale(&h, T::from_f64((self.cfg.d_model as f64).sqrt()))?;
                (h, tokens.len())
            }
        };

        let t_out = x.shape()[0];
        let d = self.cfg.d_model;
        x = ctx.tape.add_const(&x, &sinusoidal(t_out, d))?;
        x = ctx.dropout(&x)?;

        let mask = additive_mask::<T>(t_out, t_out, false, n_valid);
        for (i, layer) in self.enc.iter().enumerate() {
            let adapter = self.site_cell(Stack::Encoder, i, lang)?;
            x = self.enc_layer_forward(ctx, layer, &x, mask.as_deref(), adapter)?;
        }
        let states = self.enc_norm.apply(ctx.tape, &x)?;
        Ok(EncoderOutput { states, n_valid })
    }

    /// Teacher-forced decode: logits [prefix_len × vocab] for the next-token
    /// distribution at every prefix position.
    pub fn decode_forward(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        enc: &EncoderOutput<T>,
        prefix: &[usize],
        lang: Option<&str>,
    ) -> Result<Tensor<T>> {
        if prefix.is_empty() {
            return Err(Error::EmptyInput("decode prefix (needs a start token)"));
        }
        let dd = self.cfg.dec_d();
        let mem = match &self.bridge {
            Some(b) => b.apply(ctx.tape, &enc.states)?,
            None => enc.states.clone(),
        };
        let s = mem.shape()[0];

        let mut x = ctx.tape.gather(&self.embed, prefix)?;
        x = ctx.tape.scale(&x, T::from_f64((dd as f64).sqrt()))?;
        let l = prefix.len();
        x = ctx.tape.add_const(&x, &sinusoidal(l, dd))?;
        x = ctx.dropout(&x)?;

        let self_mask = additive_mask::<T>(l, l, true, l);
        let cross_mask = additive_mask::<T>(l, s, false, enc.n_valid);
        for (i, layer) in self.dec.iter().enumerate() {
            let adapter = self.site_cell(Stack::Decoder, i, lang)?;
            x = self.dec_layer_forward(
                ctx,
                layer,
                &x,
                &mem,
                self_mask.as_deref(),
                cross_mask.as_deref(),
                adapter,
            )?;
        }
        let x = self.dec_norm.apply(ctx.tape, &x)?;
        ctx.tape.matmul(&x, &self.out_proj)
    }

    /// Greedy argmax decode; ties pick the lowest token id. Returns the
    /// generated ids after `start`, without the terminating `eos`.
    pub fn greedy_decode(
        &self,
        input: EncoderInput<'_, T>,
        lang: Option<&str>,
        start: usize,
        eos: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape);
        let enc = self.encode(&mut ctx, input, lang)?;
        let mut prefix = vec![start];
        while prefix.len() <= max_len {
            let logits = self.decode_forward(&mut ctx, &enc, &prefix, lang)?;
            let v = self.cfg.vocab_size;
            let next = logits.with_values(|lv| {
                let row = &lv[(prefix.len() - 1) * v..prefix.len() * v];
                let mut best = 0usize;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                best
            });
            if next == eos {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }

    fn site_cell(
        &self,
        stack: Stack,
        layer: usize,
        lang: Option<&str>,
    ) -> Result<Option<&AdapterCell<T>>> {
        match (&self.bank, lang) {
            (Some(bank), Some(lang)) => bank.cell(stack, layer, lang),
            (Some(_), None) => Err(Error::InvalidConfig(
                "model carries an adapter bank; forwards must name a language".into(),
            )),
            (None, _) => Ok(None),
        }
    }

    fn enc_layer_forward(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        layer: &EncLayer<T>,
        x: &Tensor<T>,
        mask: Option<&[T]>,
        adapter: Option<&AdapterCell<T>>,
    ) -> Result<Tensor<T>> {
        let placement = self.bank.as_ref().map(|b| b.spec().placement);
        let layer_in = x.clone();

        // self-attention sublayer
        let h = layer.sa_norm.apply(ctx.tape, x)?;
        let h = mha(ctx, &layer.sa, &h, &h, mask)?;
        let h = ctx.dropout(&h)?;
        let mut x = ctx.tape.add(&layer_in, &h)?;
        if let (Some(cell), Some(Placement::ParSa)) = (adapter, placement) {
            let g = adapters::parallel_forward(ctx, cell, &layer_in, mask)?;
            x = ctx.tape.add(&x, &g)?;
        }

        // feed-forward sublayer
        let ffn_in = x.clone();
        let h = layer.ffn_norm.apply(ctx.tape, &x)?;
        let h = layer.ffn1.apply(ctx.tape, &h)?;
        let h = ctx.tape.relu(&h)?;
        let h = layer.ffn2.apply(ctx.tape, &h)?;
        let h = ctx.dropout(&h)?;
        x = ctx.tape.add(&ffn_in, &h)?;
        if let (Some(cell), Some(Placement::SerialFfn)) = (adapter, placement) {
            x = adapters::serial_forward(ctx, cell, &x)?;
        }
        if let (Some(cell), Some(Placement::ParTl)) = (adapter, placement) {
            let g = adapters::parallel_forward(ctx, cell, &layer_in, mask)?;
            x = ctx.tape.add(&x, &g)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn dec_layer_forward(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        layer: &DecLayer<T>,
        x: &Tensor<T>,
        mem: &Tensor<T>,
        self_mask: Option<&[T]>,
        cross_mask: Option<&[T]>,
        adapter: Option<&AdapterCell<T>>,
    ) -> Result<Tensor<T>> {
        let placement = self.bank.as_ref().map(|b| b.spec().placement);
        let layer_in = x.clone();

        // causal self-attention sublayer
        let h = layer.sa_norm.apply(ctx.tape, x)?;
        let h = mha(ctx, &layer.sa, &h, &h, self_mask)?;
        let h = ctx.dropout(&h)?;
        let mut x = ctx.tape.add(&layer_in, &h)?;
        if let (Some(cell), Some(Placement::ParSa)) = (adapter, placement) {
            // causal bottleneck attention: the adapter must not read ahead
            let g = adapters::parallel_forward(ctx, cell, &layer_in, self_mask)?;
            x = ctx.tape.add(&x, &g)?;
        }

        // cross-attention sublayer
        let xa_in = x.clone();
        let h = layer.xa_norm.apply(ctx.tape, &x)?;
        let h = mha(ctx, &layer.xa, &h, mem, cross_mask)?;
        let h = ctx.dropout(&h)?;
        x = ctx.tape.add(&xa_in, &h)?;
        if let (Some(cell), Some(Placement::ParXa)) = (adapter, placement) {
            let g = adapters::parallel_forward(ctx, cell, &xa_in, self_mask)?;
            x = ctx.tape.add(&x, &g)?;
        }

        // feed-forward sublayer
        let ffn_in = x.clone();
        let h = layer.ffn_norm.apply(ctx.tape, &x)?;
        let h = layer.ffn1.apply(ctx.tape, &h)?;
        let h = ctx.tape.relu(&h)?;
        let h = layer.ffn2.apply(ctx.tape, &h)?;
        let h = ctx.dropout(&h)?;
        x = ctx.tape.add(&ffn_in, &h)?;
        if let (Some(cell), Some(Placement::SerialFfn)) = (adapter, placement) {
            x = adapters::serial_forward(ctx, cell, &x)?;
        }
        if let (Some(cell), Some(Placement::ParTl)) = (adapter, placement) {
            let g = adapters::parallel_forward(ctx, cell, &layer_in, self_mask)?;
            x = ctx.tape.add(&x, &g)?;
        }
        Ok(x)
    }
}

// ── attention and masks ───────────────────────────────────────────────────

/// Multi-head scaled dot-product attention over 2-D tensors. `x_q` and
/// `x_kv` must share the projection width of `p`; `mask` is an additive
/// [len_q × len_kv] constant.
pub(crate) fn mha<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    p: &AttnParams<T>,
    x_q: &Tensor<T>,
    x_kv: &Tensor<T>,
    mask: Option<&[T]>,
) -> Result<Tensor<T>> {
    let q = p.q.apply(ctx.tape, x_q)?;
    let k = p.k.apply(ctx.tape, x_kv)?;
    let v = p.v.apply(ctx.tape, x_kv)?;
    let width = q.shape()[1];
    debug_assert_eq!(width % p.n_heads, 0);
    let dh = width / p.n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = ctx.tape.slice_cols(&q, h * dh, dh)?;
        let kh = ctx.tape.slice_cols(&k, h * dh, dh)?;
        let vh = ctx.tape.slice_cols(&v, h * dh, dh)?;
        let kt = ctx.tape.transpose(&kh)?;
        let mut scores = ctx.tape.matmul(&qh, &kt)?;
        scores = ctx.tape.scale(&scores, scale)?;
        if let Some(m) = mask {
            scores = ctx.tape.add_const(&scores, m)?;
        }
        let att = ctx.tape.softmax(&scores)?;
        heads.push(ctx.tape.matmul(&att, &vh)?);
    }
    let ctxv = ctx.tape.concat_cols(&heads)?;
    p.o.apply(ctx.tape, &ctxv)
}

/// Additive attention mask, or None when nothing is masked. Blocks keys at
/// or beyond `valid_k`, and future keys when `causal`.
pub(crate) fn additive_mask<T: Scalar>(
    lq: usize,
    lk: usize,
    causal: bool,
    valid_k: usize,
) -> Option<Vec<T>> {
    if valid_k >= lk && !causal {
        return None;
    }
    let neg = T::from_f64(MASK_NEG);
    let mut m = vec![T::zero(); lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            if j >= valid_k || (causal && j > i) {
                m[i * lk + j] = neg;
            }
        }
    }
    Some(m)
}

/// Interleaved sinusoidal positions: entry (t, 2i) = sin(t · ω_i),
/// (t, 2i+1) = cos(t · ω_i) with ω_i = 10000^(-2i/d). Row 0 is
/// [0, 1, 0, 1, …].
pub fn sinusoidal<T: Scalar>(t: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t * d];
    for pos in 0..t {
        for j in 0..d {
            let i = (j / 2) as f64;
            let omega = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            let angle = pos as f64 * omega;
            out[pos * d + j] = T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Time length after the two stride-2 convolutions: ceil(ceil(t/2)/2).
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

// ──────────────────────────────────────────────────────────────────────────
