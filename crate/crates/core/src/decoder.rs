//! The patch-step network: embeds a patch's tokens, runs L layers of
//! context-aware self-attention (relative position ids fed into the
//! keys before the score product, or as a per-patch score bias after
//! it), optional text cross-attention, and a GELU feed-forward block,
//! all as pre-norm residual layers. Produces next-token logits plus
//! the patch's layer cache for the context pool.
//!
//! Layer i reads context slot i of each cached patch, so a patch's
//! cached states line up with the layer that consumes them; with
//! caches disabled every layer reads slot 0 (the token embeddings).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    attention_biased, load_checkpoint, save_checkpoint, AttnMask, CounterRng, ParamStore, Real,
    Tape, Tensor, Var,
};
use crate::plan::RpeTable;
use crate::pool::{Extent, LayerCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpeFeed {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalMode {
    Ar,
    Nar,
    Pnar,
}

impl LocalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(LocalMode::Ar),
            "nar" => Ok(LocalMode::Nar),
            "pnar" => Ok(LocalMode::Pnar),
            other => Err(Error::Usage(format!("unknown local mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: Real },
}

impl Sampler {
    pub fn top_k(k: usize, temperature: Real) -> Result<Self> {
        if k < 1 {
            return Err(Error::Usage("top-k needs k >= 1".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Usage("top-k needs temperature > 0".into()));
        }
        Ok(Sampler::TopK { k, temperature })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub m_side: usize,
    pub vocab: usize,
    /// 0 disables cross-attention entirely.
    pub text_vocab: usize,
    pub text_len: usize,
    pub rpe_table: RpeTable,
    pub rpe_feed: RpeFeed,
    pub rpe_every_layer: bool,
    pub local_mode: LocalMode,
    pub caches_enabled: bool,
    pub pnar_rounds: usize,
    pub extent: Extent,
}

impl ModelConfig {
    /// Tokens per patch.
    pub fn m(&self) -> usize {
        self.m_side * self.m_side
    }

    pub fn has_text(&self) -> bool {
        self.text_len > 0 && self.text_vocab > 0
    }

    /// Begin-of-patch token id.
    pub fn bop(&self) -> u16 {
        self.vocab as u16
    }

    /// Mask token id used by the non-autoregressive local modes.
    pub fn mask_tok(&self) -> u16 {
        self.vocab as u16 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.dim < 1 || self.heads < 1 || self.m_side < 1 {
            return Err(Error::Config("layers, dim, heads, m_side must be >= 1".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be >= 2".into()));
        }
        if self.pnar_rounds < 1 {
            return Err(Error::Config("pnar_rounds must be >= 1".into()));
        }
        if self.rpe_table.is_empty() {
            return Err(Error::Config("empty relative-position table".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Randn(Real),
    Ones,
    Zeros,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.dim;
    let sigma = 0.02;
    let mut specs = vec![
        ("tok_emb".to_string(), cfg.vocab + 2, d, Init::Randn(sigma)),
        ("local_pos".to_string(), cfg.m(), d, Init::Randn(sigma)),
        ("rpe_key".to_string(), cfg.rpe_table.len(), d, Init::Randn(sigma)),
        ("rpe_bias".to_string(), cfg.rpe_table.len(), 1, Init::Zeros),
        ("final_ln.g".to_string(), 1, d, Init::Ones),
        ("final_ln.b".to_string(), 1, d, Init::Zeros),
        ("out_proj".to_string(), d, cfg.vocab, Init::Randn(sigma)),
    ];
    for i in 0..cfg.layers {
        for (suffix, rows, cols, init) in [
            ("attn.ln_g", 1, d, Init::Ones),
            ("attn.ln_b", 1, d, Init::Zeros),
            ("attn.wq", d, d, Init::Randn(sigma)),
            ("attn.wk", d, d, Init::Randn(sigma)),
            ("attn.wv", d, d, Init::Randn(sigma)),
            ("ffn.ln_g", 1, d, Init::Ones),
            ("ffn.ln_b", 1, d, Init::Zeros),
            ("ffn.w1", d, 4 * d, Init::Randn(sigma)),
            ("ffn.b1", 1, 4 * d, Init::Zeros),
            ("ffn.w2", 4 * d, d, Init::Randn(sigma)),
            ("ffn.b2", 1, d, Init::Zeros),
        ] {
            specs.push((format!("layer{i}.{suffix}"), rows, cols, init));
        }
        if cfg.has_text() {
            for (suffix, rows, cols, init) in [
                ("cross.ln_g", 1, d, Init::Ones),
                ("cross.ln_b", 1, d, Init::Zeros),
                ("cross.wq", d, d, Init::Randn(sigma)),
                ("cross.wk", d, d, Init::Randn(sigma)),
                ("cross.wv", d, d, Init::Randn(sigma)),
            ] {
                specs.push((format!("layer{i}.{suffix}"), rows, cols, init));
            }
        }
    }
    if cfg.has_text() {
        for (name, rows, cols, init) in [
            ("text.tok_emb", cfg.text_vocab, d, Init::Randn(sigma)),
            ("text.pos_emb", cfg.text_len, d, Init::Randn(sigma)),
            ("text.wq", d, d, Init::Randn(sigma)),
            ("text.wk", d, d, Init::Randn(sigma)),
            ("text.wv", d, d, Init::Randn(sigma)),
            ("text.ln_g", 1, d, Init::Ones),
            ("text.ln_b", 1, d, Init::Zeros),
        ] {
            specs.push((name.to_string(), rows, cols, init));
        }
    }
    specs
}

use crate::numerics::LN_EPS;

/// Model = config + parameters. Read-only for inference; training
/// mutates the parameter store through the pipeline.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    forward_passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            forward_passes: AtomicU64::new(0),
        }
    }
}

/// One forward pass's view of the model: a tape plus the parameter
/// leaves it touched, for gradient harvesting after backward.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Model,
    trainable: bool,
    used: RefCell<BTreeMap<String, Var>>,
}

impl<'m> Session<'m> {
    fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.used.borrow().get(name) {
            return Ok(v.clone());
        }
        let tensor = self.model.params.value(name)?.clone();
        let var = if self.trainable {
            self.tape.leaf(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.used.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// (name, gradient) pairs after a backward pass.
    pub fn harvest(&self) -> Vec<(String, Tensor)> {
        self.used
            .borrow()
            .iter()
            .map(|(name, var)| (name.clone(), var.grad()))
            .collect()
    }
}

/// Result of one patch forward: logits plus the detached layer states.
pub struct PatchForward {
    pub logits: Var,
    pub cache_slots: Vec<Tensor>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, rows, cols, init) in param_specs(&cfg) {
            let t = match init {
                Init::Randn(sigma) => {
                    let mut rng = CounterRng::new(seed, &format!("init.{name}"));
                    Tensor::randn(rows, cols, sigma, &mut rng)
                }
                Init::Ones => Tensor::filled(rows, cols, 1.0),
                Init::Zeros => Tensor::zeros(rows, cols),
            };
            params.insert(&name, t);
        }
        Ok(Model {
            cfg,
            params,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Overrides the local decoding mode; parameters are unaffected, so
    /// a checkpoint can be decoded under any mode.
    pub fn set_local_mode(&mut self, mode: LocalMode) {
        self.cfg.local_mode = mode;
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    pub fn session(&self, trainable: bool) -> Session<'_> {
        Session {
            tape: Tape::new(),
            model: self,
            trainable,
            used: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        save_checkpoint(prefix, &serde_json::to_value(&self.cfg)?, &self.params)
    }

    /// Loads a checkpoint and validates every tensor against the shapes
    /// the embedded config implies.
    pub fn load(prefix: &Path) -> Result<Self> {
        let (config, params) = load_checkpoint(prefix)?;
        let cfg: ModelConfig = serde_json::from_value(config)?;
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.iter().count() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {}",
                params.iter().count(),
                specs.len()
            )));
        }
        for (name, rows, cols, _) in &specs {
            let t = params.value(name).map_err(|_| {
                Error::Config(format!("checkpoint is missing parameter {name}"))
            })?;
            if t.shape() != (*rows, *cols) {
                return Err(Error::Config(format!(
                    "parameter {name} is {:?}, config implies ({rows}, {cols})",
                    t.shape()
                )));
            }
        }
        Ok(Model {
            cfg,
            params,
            forward_passes: AtomicU64::new(0),
        })
    }

    fn multi_head_attention(
        &self,
        sess: &Session,
        q_full: &Var,
        k_full: &Var,
        v_full: &Var,
        mask: &AttnMask,
        post_bias: Option<(&Var, usize)>,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let dh = d / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = q_full.slice_cols(h * dh, (h + 1) * dh)?;
            let k = k_full.slice_cols(h * dh, (h + 1) * dh)?;
            let v = v_full.slice_cols(h * dh, (h + 1) * dh)?;
            heads.push(attention_biased(&sess.tape, &q, &k, &v, mask, post_bias)?);
        }
        let refs: Vec<&Var> = heads.iter().collect();
        sess.tape.concat_cols(&refs)
    }

    /// Encodes caption tokens: learned token + position embeddings, one
    /// bidirectional self-attention layer, layer norm.
    fn encode_text_graph(&self, sess: &Session, tokens: &[u16]) -> Result<Option<Var>> {
        if !self.cfg.has_text() {
            return Err(Error::Usage(
                "text given to a model without cross-attention".into(),
            ));
        }
        if tokens.len() > self.cfg.text_len {
            return Err(Error::Usage(format!(
                "caption of {} tokens exceeds text_len {}",
                tokens.len(),
                self.cfg.text_len
            )));
        }
        for &t in tokens {
            if (t as usize) >= self.cfg.text_vocab {
                return Err(Error::Range(format!(
                    "text token {} out of vocab {}",
                    t, self.cfg.text_vocab
                )));
            }
        }
        if tokens.is_empty() {
            return Ok(None);
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = sess
            .param("text.tok_emb")?
            .embedding(&ids)?
            .add(&sess.param("text.pos_emb")?.slice_rows(0, ids.len())?)?;
        let q = x.matmul(&sess.param("text.wq")?)?;
        let k = x.matmul(&sess.param("text.wk")?)?;
        let v = x.matmul(&sess.param("text.wv")?)?;
        let mask = AttnMask::full(ids.len(), ids.len());
        let att = self.multi_head_attention(sess, &q, &k, &v, &mask, None)?;
        x.add(&att)?
            .layer_norm(&sess.param("text.ln_g")?, &sess.param("text.ln_b")?, LN_EPS)
            .map(Some)
    }

    /// Encoded caption states, one row per token (forward only).
    pub fn text_encode(&self, tokens: &[u16]) -> Result<Tensor> {
        let sess = self.session(false);
        match self.encode_text_graph(&sess, tokens)? {
            Some(v) => Ok(v.to_tensor()),
            None => Ok(Tensor::zeros(0, self.cfg.dim)),
        }
    }

    fn check_context(
        &self,
        context: &[(usize, &LayerCache)],
        e_ids: &[usize],
    ) -> Result<()> {
        if e_ids.len() != 1 + context.len() {
            return Err(Error::Config(format!(
                "{} embedding ids for {} context patches",
                e_ids.len(),
                context.len()
            )));
        }
        if e_ids[0] != self.cfg.rpe_table.self_id() {
            return Err(Error::Config("first embedding id must be the self id".into()));
        }
        for (i, &(offset_id, cache)) in context.iter().enumerate() {
            if offset_id >= self.cfg.rpe_table.len() || e_ids[i + 1] != offset_id {
                return Err(Error::Config(format!(
                    "context {i} offset id {offset_id} disagrees with embedding id {}",
                    e_ids[i + 1]
                )));
            }
            if cache.slots() != self.cfg.layers {
                return Err(Error::Config(format!(
                    "context {i} has {} cache slots, model has {} layers",
                    cache.slots(),
                    self.cfg.layers
                )));
            }
            if cache.slot(0).shape() != (self.cfg.m(), self.cfg.dim) {
                return Err(Error::Config(format!(
                    "context {i} slot shape {:?}, model needs ({}, {})",
                    cache.slot(0).shape(),
                    self.cfg.m(),
                    self.cfg.dim
                )));
            }
        }
        Ok(())
    }

    /// Core forward pass over one patch. `intra_causal` selects the
    /// within-patch mask: causal for teacher forcing and local
    /// autoregression, full visibility for the mask-predict modes.
    pub fn forward_graph(
        &self,
        sess: &Session,
        tokens_in: &[u16],
        context: &[(usize, &LayerCache)],
        e_ids: &[usize],
        text: Option<&[u16]>,
        intra_causal: bool,
    ) -> Result<PatchForward> {
        let m = self.cfg.m();
        if tokens_in.len() != m {
            return Err(Error::Config(format!(
                "{} input tokens for patch size {}",
                tokens_in.len(),
                m
            )));
        }
        for &t in tokens_in {
            if (t as usize) >= self.cfg.vocab + 2 {
                return Err(Error::Range(format!(
                    "input token {t} out of embedding table {}",
                    self.cfg.vocab + 2
                )));
            }
        }
        self.check_context(context, e_ids)?;
        let y = match text {
            Some(tokens) => self.encode_text_graph(sess, tokens)?,
            None => None,
        };

        let ids: Vec<usize> = tokens_in.iter().map(|&t| t as usize).collect();
        let mut h = sess
            .param("tok_emb")?
            .embedding(&ids)?
            .add(&sess.param("local_pos")?)?;

        let mut cache_slots = vec![h.to_tensor()];
        let n_ctx = context.len();
        let mask = if intra_causal {
            AttnMask::causal_with_context(m, n_ctx * m)
        } else {
            AttnMask::full_with_context(m, n_ctx * m)
        };

        for layer in 0..self.cfg.layers {
            let p = |suffix: &str| sess.param(&format!("layer{layer}.{suffix}"));

            // Self-attention over [current patch; context slot `layer`].
            let ln_g = p("attn.ln_g")?;
            let ln_b = p("attn.ln_b")?;
            let x_norm = h.layer_norm(&ln_g, &ln_b, LN_EPS)?;
            let mut kv_parts = vec![x_norm.clone()];
            let slot = if self.cfg.caches_enabled { layer } else { 0 };
            for &(_, cache) in context {
                let raw = sess.tape.constant(cache.slot(slot).clone());
                kv_parts.push(raw.layer_norm(&ln_g, &ln_b, LN_EPS)?);
            }
            let refs: Vec<&Var> = kv_parts.iter().collect();
            let kv_in = sess.tape.concat_rows(&refs)?;

            let feed_here = layer == 0 || self.cfg.rpe_every_layer;
            let mut k_full = kv_in.matmul(&p("attn.wk")?)?;
            if feed_here && self.cfg.rpe_feed == RpeFeed::Pre {
                let rpe_rows = sess.param("rpe_key")?.embedding(e_ids)?;
                k_full = k_full.add(&rpe_rows.repeat_rows(m))?;
            }
            let v_full = kv_in.matmul(&p("attn.wv")?)?;
            let q_full = x_norm.matmul(&p("attn.wq")?)?;
            let post_bias = if feed_here && self.cfg.rpe_feed == RpeFeed::Post {
                Some(sess.param("rpe_bias")?.embedding(e_ids)?)
            } else {
                None
            };
            let att = self.multi_head_attention(
                sess,
                &q_full,
                &k_full,
                &v_full,
                &mask,
                post_bias.as_ref().map(|b| (b, m)),
            )?;
            h = h.add(&att)?;

            // Cross-attention over the encoded caption, when present.
            if let Some(ref y) = y {
                let xc = h.layer_norm(&p("cross.ln_g")?, &p("cross.ln_b")?, LN_EPS)?;
                let qc = xc.matmul(&p("cross.wq")?)?;
                let kc = y.matmul(&p("cross.wk")?)?;
                let vc = y.matmul(&p("cross.wv")?)?;
                let cmask = AttnMask::full(m, y.rows());
                let cross = self.multi_head_attention(sess, &qc, &kc, &vc, &cmask, None)?;
                h = h.add(&cross)?;
            }

            // Feed-forward.
            let xf = h.layer_norm(&p("ffn.ln_g")?, &p("ffn.ln_b")?, LN_EPS)?;
            let u = xf
                .matmul(&p("ffn.w1")?)?
                .add_row_broadcast(&p("ffn.b1")?)?
                .gelu();
            let o = u.matmul(&p("ffn.w2")?)?.add_row_broadcast(&p("ffn.b2")?)?;
            h = h.add(&o)?;

            if layer + 1 < self.cfg.layers {
                cache_slots.push(h.to_tensor());
            }
        }

        let h_final = h.layer_norm(
            &sess.param("final_ln.g")?,
            &sess.param("final_ln.b")?,
            LN_EPS,
        )?;
        let logits = h_final.matmul(&sess.param("out_proj")?)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(PatchForward {
            logits,
            cache_slots,
        })
    }

    /// Teacher-forced forward: shifted input, causal mask. Returns the
    /// logits for all M positions and the patch's layer cache.
    pub fn patch_forward(
        &self,
        tokens_in: &[u16],
        context: &[(usize, &LayerCache)],
        e_ids: &[usize],
        text: Option<&[u16]>,
        coord: crate::grid::PatchCoord,
    ) -> Result<(Tensor, LayerCache)> {
        let sess = self.session(false);
        let fwd = self.forward_graph(&sess, tokens_in, context, e_ids, text, true)?;
        Ok((
            fwd.logits.to_tensor(),
            LayerCache::new(coord, fwd.cache_slots)?,
        ))
    }

    /// Shifted teacher-forcing input for a patch's true tokens.
    pub fn shift_tokens(&self, tokens: &[u16]) -> Vec<u16> {
        let mut shifted = Vec::with_capacity(tokens.len());
        shifted.push(self.cfg.bop());
        shifted.extend_from_slice(&tokens[..tokens.len() - 1]);
        shifted
    }

    /// Generates one patch's M tokens under the configured local mode.
    /// Returns the tokens, the cache from the final forward pass, and
    /// the number of forward passes used.
    pub fn local_decode(
        &self,
        context: &[(usize, &LayerCache)],
        e_ids: &[usize],
        text: Option<&[u16]>,
        sampler: Sampler,
        rng: &mut CounterRng,
        coord: crate::grid::PatchCoord,
    ) -> Result<(Vec<u16>, LayerCache, usize)> {
        let m = self.cfg.m();
        match self.cfg.local_mode {
            LocalMode::Ar => {
                let mut tokens: Vec<u16> = Vec::with_capacity(m);
                let mut last_cache = None;
                for step in 0..m {
                    let mut input = vec![self.cfg.bop(); m];
                    for (i, &t) in tokens.iter().enumerate() {
                        input[i + 1] = t;
                    }
                    let sess = self.session(false);
                    let fwd = self.forward_graph(&sess, &input, context, e_ids, text, true)?;
                    let logits = fwd.logits.to_tensor();
                    tokens.push(sample_token(logits.row(step), sampler, rng));
                    if step + 1 == m {
                        last_cache = Some(LayerCache::new(coord, fwd.cache_slots)?);
                    }
                }
                Ok((tokens, last_cache.expect("m >= 1"), m))
            }
            LocalMode::Nar => {
                let input = vec![self.cfg.mask_tok(); m];
                let sess = self.session(false);
                let fwd = self.forward_graph(&sess, &input, context, e_ids, text, false)?;
                let logits = fwd.logits.to_tensor();
                let tokens = (0..m)
                    .map(|r| sample_token(logits.row(r), sampler, rng))
                    .collect();
                Ok((tokens, LayerCache::new(coord, fwd.cache_slots)?, 1))
            }
            LocalMode::Pnar => {
                let rounds = self.cfg.pnar_rounds;
                let mut hyp = vec![self.cfg.mask_tok(); m];
                let mut revealed = vec![false; m];
                let mut cache = None;
                for round in 1..=rounds {
                    let sess = self.session(false);
                    let fwd = self.forward_graph(&sess, &hyp, context, e_ids, text, false)?;
                    let logits = fwd.logits.to_tensor();
                    // Linear schedule: ceil(m * round / rounds) revealed in total.
                    let target = (m * round).div_ceil(rounds);
                    let already = revealed.iter().filter(|&&r| r).count();
                    let mut candidates: Vec<(usize, Real)> = (0..m)
                        .filter(|&p| !revealed[p])
                        .map(|p| (p, max_softmax_prob(logits.row(p))))
                        .collect();
                    candidates.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1)
                            .expect("finite confidences")
                            .then(a.0.cmp(&b.0))
                    });
                    for &(pos, _) in candidates.iter().take(target.saturating_sub(already)) {
                        hyp[pos] = sample_token(logits.row(pos), sampler, rng);
                        revealed[pos] = true;
                    }
                    if round == rounds {
                        cache = Some(LayerCache::new(coord, fwd.cache_slots)?);
                    }
                }
                debug_assert!(revealed.iter().all(|&r| r));
                Ok((hyp, cache.expect("at least one round"), rounds))
            }
        }
    }
}

fn max_softmax_prob(row: &[Real]) -> Real {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v - mx).exp();
    }
    1.0 / sum
}

/// Greedy argmax (lowest id wins ties) or renormalized top-k sampling.
pub fn sample_token(logits: &[Real], sampler: Sampler, rng: &mut CounterRng) -> u16 {
    match sampler {
        Sampler::Greedy => {
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best as u16
        }
        Sampler::TopK { k, temperature } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| {
                logits[b]
                    .partial_cmp(&logits[a])
                    .expect("finite logits")
                    .then(a.cmp(&b))
            });
            let top = &order[..k.min(order.len())];
            let mx = logits[top[0]];
            let weights: Vec<Real> = top
                .iter()
                .map(|&i| ((logits[i] - mx) / temperature).exp())
                .collect();
            let total: Real = weights.iter().sum();
            let mut u = rng.uniform() * total;
            for (i, &w) in weights.iter().enumerate() {
                if u < w || i + 1 == weights.len() {
                    return top[i] as u16;
                }
                u -= w;
            }
            unreachable!("top-k draw always lands")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PatchCoord;
    use crate::plan::{reachable_offsets, PlanKind, RelOffset};

    fn test_cfg(layers: usize, dim: usize, m_side: usize, text: bool) -> ModelConfig {
        let extent = Extent::new(1, 1, 0);
        ModelConfig {
            layers,
            dim,
            heads: 2,
            m_side,
            vocab: 8,
            text_vocab: if text { crate::codec::text_vocab() } else { 0 },
            text_len: if text { 8 } else { 0 },
            rpe_table: reachable_offsets(&PlanKind::DEFAULT_SET, &extent),
            rpe_feed: RpeFeed::Pre,
            rpe_every_layer: true,
            local_mode: LocalMode::Ar,
            caches_enabled: true,
            pnar_rounds: 4,
            extent,
        }
    }

    fn random_cache(model: &Model, coord: PatchCoord, seed: u64) -> LayerCache {
        let cfg = model.cfg();
        let mut rng = CounterRng::new(seed, "cache");
        let slots = (0..cfg.layers)
            .map(|_| Tensor::randn(cfg.m(), cfg.dim, 0.5, &mut rng))
            .collect();
        LayerCache::new(coord, slots).unwrap()
    }

    fn ctx_ids(model: &Model, offsets: &[RelOffset]) -> Vec<usize> {
        let table = &model.cfg().rpe_table;
        let mut ids = vec![table.self_id()];
        ids.extend(offsets.iter().map(|&o| table.id_of(o).unwrap()));
        ids
    }

    #[test]
    fn sample_token_examples() {
        let mut rng = CounterRng::new(1, "s");
        assert_eq!(sample_token(&[0.1, 2.0, 0.3], Sampler::Greedy, &mut rng), 1);
        // Lowest id wins exact ties.
        assert_eq!(sample_token(&[1.0, 1.0, 0.0], Sampler::Greedy, &mut rng), 0);
        // top-k with k = 1 reduces to greedy.
        for _ in 0..20 {
            assert_eq!(
                sample_token(&[0.4, -1.0, 3.0], Sampler::top_k(1, 0.7).unwrap(), &mut rng),
                2
            );
        }
        assert!(Sampler::top_k(0, 1.0).is_err());
        assert!(Sampler::top_k(2, 0.0).is_err());
    }

    #[test]
    fn top_two_sampling_frequencies_are_even_for_equal_logits() {
        let mut rng = CounterRng::new(7, "freq");
        let sampler = Sampler::top_k(2, 1.0).unwrap();
        let logits = [0.0, 0.0, -9.0];
        let draws = 100_000;
        let mut zero = 0u64;
        for _ in 0..draws {
            let t = sample_token(&logits, sampler, &mut rng);
            assert!(t < 2);
            if t == 0 {
                zero += 1;
            }
        }
        let f = zero as f64 / draws as f64;
        assert!((f - 0.5).abs() < 0.01, "frequency {f}");
    }

    #[test]
    fn text_encode_is_deterministic_and_token_sensitive() {
        let model = Model::new(test_cfg(2, 8, 2, true), 3).unwrap();
        let a = model.text_encode(&[1, 2, 3]).unwrap();
        let b = model.text_encode(&[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let c = model.text_encode(&[1, 2, 4]).unwrap();
        assert_ne!(a, c);

        let empty = model.text_encode(&[]).unwrap();
        assert_eq!(empty.rows(), 0);

        assert!(matches!(
            model.text_encode(&[200]),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            model.text_encode(&[0; 9]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn empty_text_is_a_pass_through_and_textless_models_reject_text() {
        let model = Model::new(test_cfg(1, 8, 2, true), 5).unwrap();
        let shifted = vec![model.cfg().bop(); model.cfg().m()];
        let (with_empty, _) = model
            .patch_forward(&shifted, &[], &ctx_ids(&model, &[]), Some(&[]), PatchCoord::image(0, 0))
            .unwrap();
        let (without, _) = model
            .patch_forward(&shifted, &[], &ctx_ids(&model, &[]), None, PatchCoord::image(0, 0))
            .unwrap();
        assert_eq!(with_empty, without);

        let no_text = Model::new(test_cfg(1, 8, 2, false), 5).unwrap();
        assert!(matches!(
            no_text.patch_forward(
                &shifted,
                &[],
                &ctx_ids(&no_text, &[]),
                Some(&[1]),
                PatchCoord::image(0, 0)
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn minimal_patch_depends_only_on_reachable_embeddings() {
        // L=1, M=1, no context: logits see the BOP embedding and position 0,
        // so editing an unrelated token row must not move them.
        let cfg = ModelConfig {
            heads: 1,
            ..test_cfg(1, 8, 1, false)
        };
        let mut model = Model::new(cfg, 11).unwrap();
        let e = ctx_ids(&model, &[]);
        let input = vec![model.cfg().bop()];
        let (before, _) = model
            .patch_forward(&input, &[], &e, None, PatchCoord::image(0, 0))
            .unwrap();

        let mut tweaked = model.params().value("tok_emb").unwrap().clone();
        *tweaked.at_mut(0, 0) += 5.0;
        model.params_mut().set_value("tok_emb", tweaked).unwrap();
        let (after, _) = model
            .patch_forward(&input, &[], &e, None, PatchCoord::image(0, 0))
            .unwrap();
        assert_eq!(before, after);

        let mut bop_row = model.params().value("tok_emb").unwrap().clone();
        let bop = model.cfg().bop() as usize;
        *bop_row.at_mut(bop, 0) += 5.0;
        model.params_mut().set_value("tok_emb", bop_row).unwrap();
        let (moved, _) = model
            .patch_forward(&input, &[], &e, None, PatchCoord::image(0, 0))
            .unwrap();
        assert_ne!(before, moved);
    }

    #[test]
    fn local_causality_under_teacher_forcing() {
        let model = Model::new(test_cfg(2, 8, 4, false), 13).unwrap();
        let m = model.cfg().m();
        let e = ctx_ids(&model, &[]);
        let base: Vec<u16> = (0..m as u16).map(|i| i % 8).collect();
        let shifted = model.shift_tokens(&base);
        let (logits, _) = model
            .patch_forward(&shifted, &[], &e, None, PatchCoord::image(0, 0))
            .unwrap();
        for flip in 0..m {
            let mut perturbed = base.clone();
            perturbed[flip] = (perturbed[flip] + 1) % 8;
            let (l2, _) = model
                .patch_forward(&model.shift_tokens(&perturbed), &[], &e, None, PatchCoord::image(0, 0))
                .unwrap();
            for pos in 0..m {
                let same = logits.row(pos) == l2.row(pos);
                if pos <= flip {
                    assert!(same, "flip {flip} leaked into position {pos}");
                } else if pos == flip + 1 {
                    assert!(!same, "flip {flip} had no effect at {pos}");
                }
            }
        }
    }

    #[test]
    fn context_cache_influences_logits_and_cache_layers_line_up() {
        let model = Model::new(test_cfg(3, 8, 2, false), 17).unwrap();
        let cfg = model.cfg();
        let off = RelOffset {
            d_row: 0,
            d_col: -1,
            d_frame: 0,
        };
        let cache = random_cache(&model, PatchCoord::image(0, 0), 4);
        let e = ctx_ids(&model, &[off]);
        let id = cfg.rpe_table.id_of(off).unwrap();
        let shifted = vec![cfg.bop(); cfg.m()];

        let (with_ctx, out_cache) = model
            .patch_forward(&shifted, &[(id, &cache)], &e, None, PatchCoord::image(0, 1))
            .unwrap();
        let zero = LayerCache::new(
            PatchCoord::image(0, 0),
            (0..cfg.layers).map(|_| Tensor::zeros(cfg.m(), cfg.dim)).collect(),
        )
        .unwrap();
        let (with_zero, _) = model
            .patch_forward(&shifted, &[(id, &zero)], &e, None, PatchCoord::image(0, 1))
            .unwrap();
        assert_ne!(with_ctx, with_zero, "context cache must influence logits");

        assert_eq!(out_cache.slots(), cfg.layers);
        // Slot 0 is the embedding input; every slot has the patch shape.
        for l in 0..cfg.layers {
            assert_eq!(out_cache.slot(l).shape(), (cfg.m(), cfg.dim));
        }
    }

    #[test]
    fn disabling_caches_reads_slot_zero_at_every_layer() {
        let mut cfg = test_cfg(2, 8, 2, false);
        cfg.caches_enabled = false;
        let model = Model::new(cfg, 19).unwrap();
        let cfgr = model.cfg();

        let off = RelOffset {
            d_row: -1,
            d_col: 0,
            d_frame: 0,
        };
        let id = cfgr.rpe_table.id_of(off).unwrap();
        let e = ctx_ids(&model, &[off]);
        let shifted = vec![cfgr.bop(); cfgr.m()];

        let full = random_cache(&model, PatchCoord::image(0, 0), 23);
        // Same slot 0, garbage elsewhere: must not matter with caches off.
        let mut slots = vec![full.slot(0).clone()];
        for _ in 1..cfgr.layers {
            slots.push(Tensor::filled(cfgr.m(), cfgr.dim, 9.9));
        }
        let stomped = LayerCache::new(PatchCoord::image(0, 0), slots).unwrap();

        let (a, _) = model
            .patch_forward(&shifted, &[(id, &full)], &e, None, PatchCoord::image(1, 0))
            .unwrap();
        let (b, _) = model
            .patch_forward(&shifted, &[(id, &stomped)], &e, None, PatchCoord::image(1, 0))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pre_and_post_feeding_only_differ_through_their_tables() {
        let cfg = test_cfg(2, 8, 2, false);
        let model = Model::new(cfg, 29).unwrap();

        let mut zeroed = model.clone();
        let rpe_rows = zeroed.params().value("rpe_key").unwrap().shape();
        zeroed
            .params_mut()
            .set_value("rpe_key", Tensor::zeros(rpe_rows.0, rpe_rows.1))
            .unwrap();
        let mut post = zeroed.clone();
        post.cfg.rpe_feed = RpeFeed::Post;

        let off = RelOffset {
            d_row: -1,
            d_col: 0,
            d_frame: 0,
        };
        let id = model.cfg().rpe_table.id_of(off).unwrap();
        let cache = random_cache(&model, PatchCoord::image(0, 0), 31);
        let e = ctx_ids(&model, &[off]);
        let shifted = vec![model.cfg().bop(); model.cfg().m()];

        // Zeroed key table (pre) and zero bias table (post) coincide: the
        // two feeds differ only in where the table enters the scores.
        let (a, _) = zeroed
            .patch_forward(&shifted, &[(id, &cache)], &e, None, PatchCoord::image(1, 0))
            .unwrap();
        let (b, _) = post
            .patch_forward(&shifted, &[(id, &cache)], &e, None, PatchCoord::image(1, 0))
            .unwrap();
        assert_eq!(a, b);

        // With a live key table, pre-feeding moves the logits.
        let (live, _) = model
            .patch_forward(&shifted, &[(id, &cache)], &e, None, PatchCoord::image(1, 0))
            .unwrap();
        assert_ne!(live, a);
    }

    #[test]
    fn local_modes_use_the_stated_pass_counts() {
        for (mode, expect_passes) in [
            (LocalMode::Ar, 4usize),
            (LocalMode::Nar, 1),
            (LocalMode::Pnar, 3),
        ] {
            let mut cfg = test_cfg(1, 8, 2, false);
            cfg.local_mode = mode;
            cfg.pnar_rounds = 3;
            let model = Model::new(cfg, 37).unwrap();
            let e = ctx_ids(&model, &[]);
            let mut rng = CounterRng::new(1, "decode");
            model.reset_forward_passes();
            let (tokens, _, passes) = model
                .local_decode(&[], &e, None, Sampler::Greedy, &mut rng, PatchCoord::image(0, 0))
                .unwrap();
            assert_eq!(tokens.len(), 4);
            assert_eq!(passes, expect_passes);
            assert_eq!(model.forward_passes(), expect_passes as u64);
            assert!(tokens.iter().all(|&t| (t as usize) < model.cfg().vocab));
        }
    }

    #[test]
    fn pnar_with_one_reveal_per_round_costs_m_passes() {
        let mut cfg = test_cfg(1, 8, 2, false);
        cfg.local_mode = LocalMode::Pnar;
        cfg.pnar_rounds = cfg.m_side * cfg.m_side;
        let model = Model::new(cfg, 41).unwrap();
        let e = ctx_ids(&model, &[]);
        let mut rng = CounterRng::new(2, "decode");
        let (_, _, passes) = model
            .local_decode(&[], &e, None, Sampler::Greedy, &mut rng, PatchCoord::image(0, 0))
            .unwrap();
        assert_eq!(passes, model.cfg().m());
    }

    #[test]
    fn greedy_ar_decode_is_deterministic() {
        let mut cfg = test_cfg(2, 8, 2, false);
        cfg.local_mode = LocalMode::Ar;
        let model = Model::new(cfg, 43).unwrap();
        let e = ctx_ids(&model, &[]);
        let mut r1 = CounterRng::new(9, "a");
        let mut r2 = CounterRng::new(9, "a");
        let (t1, _, _) = model
            .local_decode(&[], &e, None, Sampler::Greedy, &mut r1, PatchCoord::image(0, 0))
            .unwrap();
        let (t2, _, _) = model
            .local_decode(&[], &e, None, Sampler::Greedy, &mut r2, PatchCoord::image(0, 0))
            .unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model_behavior() {
        let dir = std::env::temp_dir().join(format!("pg_model_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("m");

        let model = Model::new(test_cfg(2, 8, 2, true), 47).unwrap();
        model.save(&prefix).unwrap();
        let loaded = Model::load(&prefix).unwrap();
        assert_eq!(model.cfg(), loaded.cfg());

        let e = ctx_ids(&model, &[]);
        let shifted = vec![model.cfg().bop(); model.cfg().m()];
        let (a, _) = model
            .patch_forward(&shifted, &[], &e, Some(&[1, 2]), PatchCoord::image(0, 0))
            .unwrap();
        let (b, _) = loaded
            .patch_forward(&shifted, &[], &e, Some(&[1, 2]), PatchCoord::image(0, 0))
            .unwrap();
        assert_eq!(a, b);

        std::fs::remove_dir_all(&dir).ok();
    }
}
