//! The trainable networks: a patch transformer over function images, a
//! bidirectional OTS encoder with optional cross-attention, a causal OTS
//! decoder sharing the encoder backbone, the matching head, and the teacher
//! embedder.
//!
//! Every network is written once against [`Graph`] so the same code serves
//! inference and training. The `encode_*` and `decode_*` helpers run a throwaway graph
//! and return plain matrices.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Modality};
use crate::ots::{ConstVec, Ots};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::render::FuncImage;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub d_f: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// k̃
    pub max_len: usize,
    /// d̃_c
    pub const_slots: usize,
    pub vocab_size: usize,
    pub n_scales: usize,
    /// Values per channel (n_δ^d).
    pub points_per_channel: usize,
    pub patch: usize,
    /// D_m′
    pub teacher_width: usize,
    pub embedder_hidden: usize,
    pub embedder_activation: Activation,
    pub dropout: f64,
    pub init_std: f64,
    /// Projection matrices use std 1/sqrt(fan-in); `init_std` then covers
    /// embeddings and biases only.
    pub fan_in_init: bool,
    pub init_seed: u64,
    /// Bind decoder backbone weights to the encoder.
    pub tie_decoder: bool,
    pub tau_init: f64,
    /// Separate learnable τ′ for the distillation denominator.
    pub separate_tau_prime: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_f: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 24,
            const_slots: 8,
            vocab_size: 19,
            n_scales: 3,
            points_per_channel: 64,
            patch: 8,
            teacher_width: 48,
            embedder_hidden: 64,
            embedder_activation: Activation::Gelu,
            dropout: 0.0,
            init_std: 0.02,
            fan_in_init: true,
            init_seed: 0,
            tie_decoder: true,
            tau_init: 0.07,
            separate_tau_prime: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_f", self.d_f),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("n_scales", self.n_scales),
            ("points_per_channel", self.points_per_channel),
            ("patch", self.patch),
            ("teacher_width", self.teacher_width),
            ("embedder_hidden", self.embedder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_f % self.heads != 0 {
            return Err(Error::Config(format!("d_f {} not divisible by heads {}", self.d_f, self.heads)));
        }
        if self.points_per_channel % self.patch != 0 {
            return Err(Error::Config("patch must divide points per channel".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must hold BOS, one node and EOS".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.init_std > 0.0 && self.tau_init > 0.0) {
            return Err(Error::Config("init_std and tau_init must be positive".into()));
        }
        Ok(())
    }

    /// n_t^i: class token plus one token per patch.
    pub fn image_tokens(&self) -> usize {
        1 + self.points_per_channel / self.patch
    }

    /// n_t^o = k̃ + d̃_c
    pub fn ots_tokens(&self) -> usize {
        self.max_len + self.const_slots
    }

    pub fn patch_features(&self) -> usize {
        self.n_scales * self.patch
    }

    /// SHA-256 of the canonical JSON form, used to guard checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    attn: AttnIds,
    cross: Option<((ParamId, ParamId), AttnIds)>,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Backbone {
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct OtsIds {
    tok: ParamId,
    pos: ParamId,
    const_w: ParamId,
    const_b: ParamId,
    const_mask: ParamId,
    backbone: Backbone,
}

#[derive(Debug, Clone)]
struct Layout {
    img_patch: (ParamId, ParamId),
    img_cls: ParamId,
    img_pos: ParamId,
    img: Backbone,
    enc: OtsIds,
    dec: OtsIds,
    head: (ParamId, ParamId),
    matcher: (ParamId, ParamId),
    emb1: (ParamId, ParamId),
    emb2: (ParamId, ParamId),
    tau: ParamId,
    tau_prime: Option<ParamId>,
}

/// Parameters plus their resolved layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn add_backbone(p: &mut ParamStore, init: &mut Initializer, prefix: &str, cfg: &NetConfig, cross: bool) {
    let d = cfg.d_f;
    let h = d * cfg.ffn_mult;
    let attn = |p: &mut ParamStore, init: &mut Initializer, pre: &str| {
        for m in ["q", "k", "v", "o"] {
            p.add(&format!("{pre}.w{m}"), init.matrix(d, d), true);
            p.add(&format!("{pre}.b{m}"), init.gaussian(1, d), true);
        }
    };
    let ln = |p: &mut ParamStore, init: &mut Initializer, pre: &str| {
        p.add(&format!("{pre}.g"), Array2::ones((1, d)), true);
        p.add(&format!("{pre}.b"), init.gaussian(1, d), true);
    };
    for l in 0..cfg.layers {
        let pre = format!("{prefix}.block{l}");
        ln(p, init, &format!("{pre}.ln1"));
        attn(p, init, &format!("{pre}.attn"));
        if cross {
            ln(p, init, &format!("{pre}.lnx"));
            attn(p, init, &format!("{pre}.xattn"));
        }
        ln(p, init, &format!("{pre}.ln2"));
        p.add(&format!("{pre}.ff1.w"), init.matrix(d, h), true);
        p.add(&format!("{pre}.ff1.b"), init.gaussian(1, h), true);
        p.add(&format!("{pre}.ff2.w"), init.matrix(h, d), true);
        p.add(&format!("{pre}.ff2.b"), init.gaussian(1, d), true);
    }
    ln(p, init, &format!("{prefix}.ln_f"));
}

fn resolve_backbone(p: &ParamStore, prefix: &str, cfg: &NetConfig, cross: bool) -> Result<Backbone> {
    let id = |n: String| p.id(&n);
    let attn = |pre: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: id(format!("{pre}.wq"))?,
            bq: id(format!("{pre}.bq"))?,
            wk: id(format!("{pre}.wk"))?,
            bk: id(format!("{pre}.bk"))?,
            wv: id(format!("{pre}.wv"))?,
            bv: id(format!("{pre}.bv"))?,
            wo: id(format!("{pre}.wo"))?,
            bo: id(format!("{pre}.bo"))?,
        })
    };
    let ln = |pre: &str| -> Result<(ParamId, ParamId)> { Ok((id(format!("{pre}.g"))?, id(format!("{pre}.b"))?)) };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("{prefix}.block{l}");
        let cross = if cross {
            Some((ln(&format!("{pre}.lnx"))?, attn(&format!("{pre}.xattn"))?))
        } else {
            None
        };
        blocks.push(BlockIds {
            ln1: ln(&format!("{pre}.ln1"))?,
            attn: attn(&format!("{pre}.attn"))?,
            cross,
            ln2: ln(&format!("{pre}.ln2"))?,
            ff1: (id(format!("{pre}.ff1.w"))?, id(format!("{pre}.ff1.b"))?),
            ff2: (id(format!("{pre}.ff2.w"))?, id(format!("{pre}.ff2.b"))?),
        });
    }
    Ok(Backbone {
        blocks,
        ln_f: ln(&format!("{prefix}.ln_f"))?,
    })
}

fn add_ots(p: &mut ParamStore, init: &mut Initializer, prefix: &str, cfg: &NetConfig) {
    p.add(&format!("{prefix}.tok"), init.gaussian(cfg.vocab_size, cfg.d_f), true);
    p.add(&format!("{prefix}.pos"), init.gaussian(cfg.ots_tokens(), cfg.d_f), true);
    p.add(&format!("{prefix}.const_w"), init.gaussian(1, cfg.d_f), true);
    p.add(&format!("{prefix}.const_b"), init.gaussian(1, cfg.d_f), true);
    p.add(&format!("{prefix}.const_mask"), init.gaussian(1, cfg.d_f), true);
    add_backbone(p, init, prefix, cfg, true);
}

fn resolve_ots(p: &ParamStore, prefix: &str, cfg: &NetConfig) -> Result<OtsIds> {
    Ok(OtsIds {
        tok: p.id(&format!("{prefix}.tok"))?,
        pos: p.id(&format!("{prefix}.pos"))?,
        const_w: p.id(&format!("{prefix}.const_w"))?,
        const_b: p.id(&format!("{prefix}.const_b"))?,
        const_mask: p.id(&format!("{prefix}.const_mask"))?,
        backbone: resolve_backbone(p, prefix, cfg, true)?,
    })
}

fn resolve(p: &ParamStore, cfg: &NetConfig) -> Result<Layout> {
    let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> { Ok((p.id(a)?, p.id(b)?)) };
    Ok(Layout {
        img_patch: pair("img.patch.w", "img.patch.b")?,
        img_cls: p.id("img.cls")?,
        img_pos: p.id("img.pos")?,
        img: resolve_backbone(p, "img", cfg, false)?,
        enc: resolve_ots(p, "ots_enc", cfg)?,
        dec: resolve_ots(p, "ots_dec", cfg)?,
        head: pair("ots_dec.head.w", "ots_dec.head.b")?,
        matcher: pair("match.w", "match.b")?,
        emb1: pair("embed.w1", "embed.b1")?,
        emb2: pair("embed.w2", "embed.b2")?,
        tau: p.id("temp.tau")?,
        tau_prime: if cfg.separate_tau_prime {
            Some(p.id("temp.tau_prime")?)
        } else {
            None
        },
    })
}

/// Standard sinusoidal position table.
pub fn sinusoidal_positions(rows: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, width), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Per-forward state: dropout is active only when an RNG is supplied.
pub struct Ctx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: (dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 - self.dropout;
        let (r, c) = g.value(x).dim();
        let mask = Array2::from_shape_simple_fn((r, c), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

/// One OTS-side input row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtsRow {
    Token(TokenId),
    Const(f64),
    MaskedConst,
}

/// Rows fed to an OTS network, each with its absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsInput {
    pub rows: Vec<OtsRow>,
    pub positions: Vec<usize>,
    /// Keys that may be attended to. `None` means all.
    pub key_valid: Option<Vec<bool>>,
}

impl OtsInput {
    /// All k̃ + d̃_c rows; PAD tokens and unused constant slots are hidden
    /// from attention.
    pub fn full(ots: &Ots, consts: &ConstVec) -> Self {
        let mut rows: Vec<OtsRow> = ots.padded().iter().map(|&t| OtsRow::Token(t)).collect();
        let mut key_valid: Vec<bool> = (0..ots.max_len()).map(|i| i < ots.true_len()).collect();
        for slot in 0..consts.capacity() {
            rows.push(if consts.is_visible(slot) {
                OtsRow::Const(consts.raw_values()[slot])
            } else {
                OtsRow::MaskedConst
            });
            key_valid.push(slot < consts.true_len());
        }
        let positions = (0..rows.len()).collect();
        Self {
            rows,
            positions,
            key_valid: Some(key_valid),
        }
    }

    /// Only the rows that carry information. Valid rows produce the same
    /// features as in [`OtsInput::full`].
    pub fn compact(ots: &Ots, consts: &ConstVec) -> Self {
        let mut rows: Vec<OtsRow> = ots.tokens().iter().map(|&t| OtsRow::Token(t)).collect();
        let mut positions: Vec<usize> = (0..rows.len()).collect();
        for slot in 0..consts.true_len() {
            rows.push(if consts.is_visible(slot) {
                OtsRow::Const(consts.raw_values()[slot])
            } else {
                OtsRow::MaskedConst
            });
            positions.push(ots.max_len() + slot);
        }
        Self {
            rows,
            positions,
            key_valid: None,
        }
    }
}

impl Model {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Initializer::new(config.init_seed, config.init_std).with_fan_in(config.fan_in_init);
        let cfg = &config;
        p.add("img.patch.w", init.matrix(cfg.patch_features(), cfg.d_f), true);
        p.add("img.patch.b", init.gaussian(1, cfg.d_f), true);
        p.add("img.cls", init.gaussian(1, cfg.d_f), true);
        p.add("img.pos", init.gaussian(cfg.image_tokens(), cfg.d_f), true);
        add_backbone(&mut p, &mut init, "img", cfg, false);
        add_ots(&mut p, &mut init, "ots_enc", cfg);
        if cfg.tie_decoder {
            let names: Vec<String> = p.names().keys().filter(|n| n.starts_with("ots_enc.")).cloned().collect();
            for n in names {
                p.alias(&n.replacen("ots_enc.", "ots_dec.", 1), &n)?;
            }
        } else {
            add_ots(&mut p, &mut init, "ots_dec", cfg);
        }
        p.add("ots_dec.head.w", init.matrix(cfg.d_f, cfg.vocab_size), true);
        p.add("ots_dec.head.b", init.gaussian(1, cfg.vocab_size), true);
        p.add("match.w", init.matrix(cfg.d_f, 2), true);
        p.add("match.b", init.gaussian(1, 2), true);
        p.add("embed.w1", init.matrix(cfg.teacher_width, cfg.embedder_hidden), true);
        p.add("embed.b1", init.gaussian(1, cfg.embedder_hidden), true);
        p.add("embed.w2", init.matrix(cfg.embedder_hidden, cfg.d_f), true);
        p.add("embed.b2", init.gaussian(1, cfg.d_f), true);
        p.add("temp.tau", Array2::from_elem((1, 1), cfg.tau_init), true);
        if cfg.separate_tau_prime {
            p.add("temp.tau_prime", Array2::from_elem((1, 1), cfg.tau_init), true);
        }
        let layout = resolve(&p, cfg)?;
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Current (τ, τ′).
    pub fn temperatures(&self) -> (f64, f64) {
        let tau = self.params.value(self.layout.tau)[[0, 0]];
        let tau_p = self.layout.tau_prime.map_or(tau, |id| self.params.value(id)[[0, 0]]);
        (tau, tau_p)
    }

    pub fn tau_id(&self) -> ParamId {
        self.layout.tau
    }

    pub fn tau_prime_id(&self) -> Option<ParamId> {
        self.layout.tau_prime
    }

    /// Keeps temperatures away from zero after an update.
    pub fn clamp_temperatures(&mut self, min: f64) {
        for id in std::iter::once(self.layout.tau).chain(self.layout.tau_prime) {
            let v = &mut self.params.value_mut(id)[[0, 0]];
            if *v < min || !v.is_finite() {
                *v = min;
            }
        }
    }

    /// Freezes or thaws every slot under `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for id in self.params.slots_with_prefix(prefix) {
            self.params.set_trainable(id, trainable);
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let w = g.param(w);
        let b = g.param(b);
        g.linear(x, w, b)
    }

    fn ln(&self, g: &mut Graph, x: Var, (gamma, beta): (ParamId, ParamId)) -> Var {
        let gamma = g.param(gamma);
        let beta = g.param(beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attend(&self, g: &mut Graph, x: Var, kv: Var, ids: &AttnIds, mask: Option<&Array2<bool>>) -> Var {
        let q = self.linear(g, x, (ids.wq, ids.bq));
        let k = self.linear(g, kv, (ids.wk, ids.bk));
        let v = self.linear(g, kv, (ids.wv, ids.bv));
        let a = g.attention(q, k, v, self.config.heads, mask);
        self.linear(g, a, (ids.wo, ids.bo))
    }

    fn run_backbone(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        mut x: Var,
        bb: &Backbone,
        mask: Option<&Array2<bool>>,
        cond: Option<Var>,
    ) -> Var {
        for block in &bb.blocks {
            let h = self.ln(g, x, block.ln1);
            let a = self.attend(g, h, h, &block.attn, mask);
            let a = ctx.dropout(g, a);
            x = g.add(x, a);
            if let (Some(c), Some((lnx, xattn))) = (cond, &block.cross) {
                let h = self.ln(g, x, *lnx);
                let a = self.attend(g, h, c, xattn, None);
                let a = ctx.dropout(g, a);
                x = g.add(x, a);
            }
            let h = self.ln(g, x, block.ln2);
            let h = self.linear(g, h, block.ff1);
            let h = g.gelu(h);
            let h = self.linear(g, h, block.ff2);
            let h = ctx.dropout(g, h);
            x = g.add(x, h);
        }
        self.ln(g, x, bb.ln_f)
    }

    /// Splits an image into patch tokens `[n_patches × n_s·patch]`.
    pub fn patchify(&self, img: &FuncImage) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let v = img.values();
        if v.dim() != (cfg.n_scales, cfg.points_per_channel) {
            return Err(Error::Shape(format!(
                "image is {:?}, network expects ({}, {})",
                v.dim(),
                cfg.n_scales,
                cfg.points_per_channel
            )));
        }
        let n_patches = cfg.points_per_channel / cfg.patch;
        Ok(Array2::from_shape_fn((n_patches, cfg.patch_features()), |(p, f)| {
            let (ch, off) = (f / cfg.patch, f % cfg.patch);
            v[[ch, p * cfg.patch + off]]
        }))
    }

    /// h^i as a graph node `[n_t^i × d_f]`.
    pub fn image_graph(&self, g: &mut Graph, ctx: &mut Ctx, img: &FuncImage) -> Result<Var> {
        let patches = g.constant(self.patchify(img)?);
        let tokens = self.linear(g, patches, self.layout.img_patch);
        let cls = g.param(self.layout.img_cls);
        let x = g.concat_rows(&[cls, tokens]);
        let pos = g.param(self.layout.img_pos);
        let x = g.add(x, pos);
        Ok(self.run_backbone(g, ctx, x, &self.layout.img, None, None))
    }

    fn embed_rows(&self, g: &mut Graph, ids: &OtsIds, input: &OtsInput) -> Result<Var> {
        let cfg = &self.config;
        let tok_table = g.param(ids.tok);
        let mut tok_rows = Vec::new();
        let mut parts = Vec::new();
        let mut pending_tokens = Vec::new();
        let flush = |g: &mut Graph, pending: &mut Vec<usize>, parts: &mut Vec<Var>| {
            if !pending.is_empty() {
                parts.push(g.select_rows(tok_table, pending));
                pending.clear();
            }
        };
        for row in &input.rows {
            match *row {
                OtsRow::Token(t) => {
                    let idx = t.index();
                    if idx >= cfg.vocab_size {
                        return Err(Error::Shape(format!("token id {} outside vocabulary", t.0)));
                    }
                    pending_tokens.push(idx);
                    tok_rows.push(idx);
                }
                OtsRow::Const(c) => {
                    flush(g, &mut pending_tokens, &mut parts);
                    let w = g.param(ids.const_w);
                    let b = g.param(ids.const_b);
                    let scaled = g.scale(w, c);
                    parts.push(g.add(scaled, b));
                }
                OtsRow::MaskedConst => {
                    flush(g, &mut pending_tokens, &mut parts);
                    parts.push(g.param(ids.const_mask));
                }
            }
        }
        flush(g, &mut pending_tokens, &mut parts);
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let pos_table = g.param(ids.pos);
        if input.positions.iter().any(|&p| p >= cfg.ots_tokens()) {
            return Err(Error::Shape("OTS position beyond k̃ + d̃_c".into()));
        }
        let pos = g.select_rows(pos_table, &input.positions);
        Ok(g.add(x, pos))
    }

    /// Adds sinusoidal positions to conditioning features so cross-attention
    /// sees token order.
    fn prepare_cond(&self, g: &mut Graph, cond: Var) -> Result<Var> {
        let (rows, width) = g.value(cond).dim();
        if width != self.config.d_f {
            return Err(Error::CondWidth {
                got: width,
                expected: self.config.d_f,
            });
        }
        let pe = g.constant(sinusoidal_positions(rows, width));
        Ok(g.add(cond, pe))
    }

    /// h^o (or h̃^o when conditioned) as a graph node, one row per input row.
    pub fn ots_graph(&self, g: &mut Graph, ctx: &mut Ctx, input: &OtsInput, cond: Option<Var>) -> Result<Var> {
        if input.rows.len() != input.positions.len() || input.rows.is_empty() {
            return Err(Error::Shape("OTS input rows and positions disagree".into()));
        }
        let ids = &self.layout.enc;
        let x = self.embed_rows(g, ids, input)?;
        let mask = input.key_valid.as_ref().map(|valid| {
            let n = valid.len();
            Array2::from_shape_fn((n, n), |(_, j)| valid[j])
        });
        let cond = cond.map(|c| self.prepare_cond(g, c)).transpose()?;
        Ok(self.run_backbone(g, ctx, x, &ids.backbone, mask.as_ref(), cond))
    }

    /// Next-token logits `[n × N_v]` for the token prefix `tokens`.
    pub fn decoder_graph(&self, g: &mut Graph, ctx: &mut Ctx, tokens: &[TokenId], cond: Var) -> Result<Var> {
        let ids = &self.layout.dec;
        let input = OtsInput {
            rows: tokens.iter().map(|&t| OtsRow::Token(t)).collect(),
            positions: (0..tokens.len()).collect(),
            key_valid: None,
        };
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::Shape(format!("decoder prefix length {}", tokens.len())));
        }
        let x = self.embed_rows(g, ids, &input)?;
        let n = tokens.len();
        let causal = Array2::from_shape_fn((n, n), |(i, j)| j <= i);
        let cond = self.prepare_cond(g, cond)?;
        let h = self.run_backbone(g, ctx, x, &ids.backbone, Some(&causal), Some(cond));
        Ok(self.linear(g, h, self.layout.head))
    }

    /// Two matching logits from token 0.
    pub fn match_graph(&self, g: &mut Graph, h: Var) -> Var {
        let first = g.select_rows(h, &[0]);
        self.linear(g, first, self.layout.matcher)
    }

    /// Row-wise two-layer perceptron from teacher width to d_f.
    pub fn embedder_graph(&self, g: &mut Graph, th: Var) -> Result<Var> {
        let width = g.value(th).ncols();
        if width != self.config.teacher_width {
            return Err(Error::Shape(format!(
                "teacher width {width}, embedder expects {}",
                self.config.teacher_width
            )));
        }
        let h = self.linear(g, th, self.layout.emb1);
        let h = match self.config.embedder_activation {
            Activation::Gelu => g.gelu(h),
            Activation::Identity => h,
        };
        Ok(self.linear(g, h, self.layout.emb2))
    }

    pub fn tau_graph(&self, g: &mut Graph) -> (Var, Var) {
        let tau = g.param(self.layout.tau);
        let tau_p = self.layout.tau_prime.map_or(tau, |id| g.param(id));
        (tau, tau_p)
    }

    pub fn encode_funcimg(&self, img: &FuncImage) -> Result<FeatureMatrix> {
        let mut g = Graph::new(&self.params);
        let h = self.image_graph(&mut g, &mut Ctx::eval(), img)?;
        FeatureMatrix::new(g.value(h).clone(), Modality::Image)
    }

    /// Full-shape OTS features `[k̃ + d̃_c × d_f]`.
    pub fn encode_ots(&self, ots: &Ots, consts: &ConstVec, cond: Option<&FeatureMatrix>) -> Result<FeatureMatrix> {
        self.check_ots_shape(ots, consts)?;
        let mut g = Graph::new(&self.params);
        let c = cond.map(|c| g.constant(c.values().clone()));
        let h = self.ots_graph(&mut g, &mut Ctx::eval(), &OtsInput::full(ots, consts), c)?;
        FeatureMatrix::new(g.value(h).clone(), Modality::Ots)
    }

    fn check_ots_shape(&self, ots: &Ots, consts: &ConstVec) -> Result<()> {
        if ots.max_len() != self.config.max_len || consts.capacity() != self.config.const_slots {
            return Err(Error::Shape(format!(
                "OTS/consts padded to ({}, {}), network expects ({}, {})",
                ots.max_len(),
                consts.capacity(),
                self.config.max_len,
                self.config.const_slots
            )));
        }
        Ok(())
    }

    /// Logits `[k̃ − 1 × N_v]` from the padded prefix. The constant vector
    /// must be fully masked; the decoder only predicts structure.
    pub fn decode_ots(&self, ots: &Ots, masked: &ConstVec, cond: &FeatureMatrix) -> Result<Array2<f64>> {
        self.check_ots_shape(ots, masked)?;
        if (0..masked.capacity()).any(|s| masked.is_visible(s)) {
            return Err(Error::Shape("decoder constants must be masked".into()));
        }
        let mut g = Graph::new(&self.params);
        let c = g.constant(cond.values().clone());
        let prefix = &ots.padded()[..self.config.max_len - 1];
        let logits = self.decoder_graph(&mut g, &mut Ctx::eval(), prefix, c)?;
        Ok(g.value(logits).clone())
    }

    /// Logits for an arbitrary (unpadded) prefix, used by generation.
    pub fn decode_prefix(&self, prefix: &[TokenId], cond: &FeatureMatrix) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.params);
        let c = g.constant(cond.values().clone());
        let logits = self.decoder_graph(&mut g, &mut Ctx::eval(), prefix, c)?;
        Ok(g.value(logits).clone())
    }

    pub fn match_head(&self, h: &FeatureMatrix) -> [f64; 2] {
        let mut g = Graph::new(&self.params);
        let x = g.constant(h.values().clone());
        let z = self.match_graph(&mut g, x);
        let z = g.value(z);
        [z[[0, 0]], z[[0, 1]]]
    }

    pub fn teacher_embedder(&self, th: &Array2<f64>) -> Result<FeatureMatrix> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(th.clone());
        let h = self.embedder_graph(&mut g, x)?;
        FeatureMatrix::new(g.value(h).clone(), Modality::Formula)
    }

    /// Sets the embedder to the identity map. Only meaningful when the
    /// teacher width, hidden width and d_f coincide and no activation is used.
    pub fn set_embedder_identity(&mut self) -> Result<()> {
        let cfg = &self.config;
        if cfg.teacher_width != cfg.embedder_hidden || cfg.embedder_hidden != cfg.d_f {
            return Err(Error::Config("identity embedder needs square layers".into()));
        }
        let (w1, b1) = self.layout.emb1;
        let (w2, b2) = self.layout.emb2;
        *self.params.value_mut(w1) = Array2::eye(cfg.d_f);
        *self.params.value_mut(w2) = Array2::eye(cfg.d_f);
        self.params.value_mut(b1).fill(0.0);
        self.params.value_mut(b2).fill(0.0);
        Ok(())
    }

    /// Scalar count of the embedder.
    pub fn embedder_param_count(&self) -> usize {
        [self.layout.emb1, self.layout.emb2]
            .iter()
            .map(|&(w, b)| self.params.value(w).len() + self.params.value(b).len())
            .sum()
    }
}
