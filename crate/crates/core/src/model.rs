//! Miniature vision-language transformers.
//!
//! Three backbone families share one forward interface:
//!
//! * `one_stream`: region features and word embeddings are concatenated
//!   into a single sequence processed by one transformer encoder.
//! * `two_stream`: each modality has its own encoder, followed by
//!   cross-modal layers in which each stream attends to the other.
//! * `patch_input`: like `one_stream`, but images arrive as raw pixel
//!   patches rather than pre-extracted region features.
//!
//! Every forward pass computes with `mask ⊙ θ` on the tape and never touches
//! the stored parameters. The task head is never masked.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ImageEncoding, N_OBJECTS, PATCH_DIM, REGION_DIM, TXT_LEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::optim::GradMap;
use crate::params::ParamStore;
use crate::rng::substream;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OneStream,
    TwoStream,
    PatchInput,
}

impl Family {
    pub fn encoding(self) -> ImageEncoding {
        match self {
            Family::OneStream | Family::TwoStream => ImageEncoding::Regions,
            Family::PatchInput => ImageEncoding::Patches,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::OneStream => "one_stream",
            Family::TwoStream => "two_stream",
            Family::PatchInput => "patch_input",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    /// Encoder layers for the single-stream families.
    pub layers: usize,
    /// Per-modality encoder layers (two-stream only).
    pub stream_layers: usize,
    /// Cross-modal layers (two-stream only).
    pub cross_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    pub img_seq_len: usize,
    pub txt_seq_len: usize,
    pub vocab_size: usize,
    pub img_feat_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::for_family(Family::OneStream)
    }
}

impl ArchSpec {
    /// Default sizes for `family`, matched to the synthetic data.
    pub fn for_family(family: Family) -> Self {
        ArchSpec {
            family,
            layers: 2,
            stream_layers: 1,
            cross_layers: 1,
            hidden: 32,
            heads: 4,
            ffn_mult: 2,
            img_seq_len: N_OBJECTS,
            txt_seq_len: TXT_LEN,
            vocab_size: VOCAB_SIZE,
            img_feat_dim: match family.encoding() {
                ImageEncoding::Regions => REGION_DIM,
                ImageEncoding::Patches => PATCH_DIM,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("img_seq_len", self.img_seq_len),
            ("txt_seq_len", self.txt_seq_len),
            ("vocab_size", self.vocab_size),
            ("img_feat_dim", self.img_feat_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("hidden {} is not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        match self.family {
            Family::TwoStream => {
                if self.stream_layers == 0 || self.cross_layers == 0 {
                    return Err(Error::config(
                        "cross_layers",
                        "two_stream needs at least one stream layer and one cross layer",
                    ));
                }
            }
            _ if self.layers == 0 => return Err(Error::config("layers", "must be positive")),
            _ => {}
        }
        let want = self.family.encoding().feature_dim();
        if self.img_feat_dim != want {
            return Err(Error::config(
                "img_feat_dim",
                format!("{} consumes {want}-dim image inputs, got {}", self.family.name(), self.img_feat_dim),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

/// What the parameters under `head.` compute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear classifier on the [CLS] embedding for a downstream task.
    Classifier { task_id: String, classes: usize },
    /// Masked-token, masked-region and image-text-matching heads.
    Pretext,
}

impl HeadKind {
    pub fn id(&self) -> &str {
        match self {
            HeadKind::Classifier { task_id, .. } => task_id,
            HeadKind::Pretext => "pretext",
        }
    }
}

/// Symbolic outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[b, hidden]` final [CLS] state.
    pub cls_embedding: Var,
    /// `[b, classes]`, or `[b, 2]` matching logits for the pretext head.
    pub logits: Var,
    /// `txt` is `[b·txt_len, hidden]`, `img` is `[b·img_len, hidden]`.
    pub modality_states: BTreeMap<String, Var>,
}

/// Per-modality additive perturbations at the embedding output.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub txt: Option<Var>,
    pub img: Option<Var>,
}

/// Parameters recorded on a tape, with the mask already applied.
#[derive(Debug)]
pub struct BoundParams {
    leaves: BTreeMap<String, Var>,
    effective: BTreeMap<String, Var>,
}

impl BoundParams {
    fn get(&self, name: &str) -> Result<Var> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::Dimension(format!("missing parameter `{name}`")))
    }

    /// Gradient with respect to every stored parameter.
    pub fn grads(&self, grads: &Gradients) -> Result<GradMap> {
        self.leaves
            .iter()
            .map(|(n, &v)| Ok((n.clone(), grads.wrt(v)?.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub head: HeadKind,
}

/// Shrinks head matrices relative to the Glorot bound used in the trunk.
const HEAD_INIT_SCALE: f64 = 0.1;

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: &'static str,
    /// Extra label mixed into every substream (the task id for heads).
    stream_tag: String,
}

impl Init<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) {
        let full = format!("{}{name}", self.prefix);
        let mut rng = substream(self.seed, &format!("init/{}{full}", self.stream_tag));
        let mut bound = (6.0 / (rows + cols) as f64).sqrt();
        if self.prefix == crate::params::HEAD_PREFIX {
            // near-uniform initial predictions
            bound *= HEAD_INIT_SCALE;
        }
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.store.insert(full, Tensor::new(vec![rows, cols], data).unwrap());
    }

    fn vector(&mut self, name: &str, len: usize, value: f64) {
        self.store.insert(format!("{}{name}", self.prefix), Tensor::full(&[len], value));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.matrix(&format!("{name}.w"), fan_in, fan_out);
        self.vector(&format!("{name}.b"), fan_out, 0.0);
    }

    fn layer_norm(&mut self, name: &str, width: usize) {
        self.vector(&format!("{name}.g"), width, 1.0);
        self.vector(&format!("{name}.b"), width, 0.0);
    }

    fn attention(&mut self, name: &str, h: usize) {
        for p in ["q", "k", "v", "o"] {
            self.matrix(&format!("{name}.w{p}"), h, h);
            self.vector(&format!("{name}.b{p}"), h, 0.0);
        }
    }

    fn block(&mut self, name: &str, arch: &ArchSpec) {
        let h = arch.hidden;
        self.layer_norm(&format!("{name}.ln1"), h);
        self.attention(&format!("{name}.attn"), h);
        self.layer_norm(&format!("{name}.ln2"), h);
        self.linear(&format!("{name}.ffn1"), h, arch.ffn_dim());
        self.linear(&format!("{name}.ffn2"), arch.ffn_dim(), h);
    }
}

impl Model {
    pub fn new(arch: ArchSpec, head: HeadKind) -> Result<Self> {
        arch.validate()?;
        if let HeadKind::Classifier { classes, .. } = head {
            if classes < 2 {
                return Err(Error::config("class_count", "a classifier needs at least two classes"));
            }
        }
        Ok(Model { arch, head })
    }

    pub fn for_task(arch: &ArchSpec, task: &crate::data::TaskSpec) -> Result<Self> {
        Self::new(
            arch.clone(),
            HeadKind::Classifier {
                task_id: task.task_id.clone(),
                classes: task.class_count,
            },
        )
    }

    pub fn pretext(arch: &ArchSpec) -> Result<Self> {
        Self::new(arch.clone(), HeadKind::Pretext)
    }

    pub fn encoding(&self) -> ImageEncoding {
        self.arch.family.encoding()
    }

    /// Deterministic initialization of trunk and head.
    ///
    /// Each tensor draws from its own substream keyed by name, so the trunk
    /// is identical for every head given the same seed.
    pub fn build(&self, seed: u64) -> ParamStore {
        let mut store = self.init_trunk(seed);
        for (n, v) in self.init_head(seed).iter() {
            store.insert(n.clone(), v.clone());
        }
        store
    }

    pub fn init_trunk(&self, seed: u64) -> ParamStore {
        let a = &self.arch;
        let h = a.hidden;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
            prefix: "",
            stream_tag: String::new(),
        };
        init.matrix("emb.tok", a.vocab_size, h);
        init.matrix("emb.txt_pos", a.txt_seq_len, h);
        init.matrix("emb.img_proj.w", a.img_feat_dim, h);
        init.vector("emb.img_proj.b", h, 0.0);
        init.matrix("emb.img_pos", a.img_seq_len, h);
        match a.family {
            Family::OneStream | Family::PatchInput => {
                init.layer_norm("emb.ln", h);
                for l in 0..a.layers {
                    init.block(&format!("layer{l}"), a);
                }
                init.layer_norm("final_ln", h);
            }
            Family::TwoStream => {
                init.layer_norm("emb.txt_ln", h);
                init.layer_norm("emb.img_ln", h);
                for l in 0..a.stream_layers {
                    init.block(&format!("txt{l}"), a);
                    init.block(&format!("img{l}"), a);
                }
                for l in 0..a.cross_layers {
                    for side in ["t", "i"] {
                        init.layer_norm(&format!("cross{l}.{side}_xln_q"), h);
                        init.layer_norm(&format!("cross{l}.{side}_xln_kv"), h);
                        init.attention(&format!("cross{l}.{side}_xattn"), h);
                        init.block(&format!("cross{l}.{side}_self"), a);
                    }
                }
                init.layer_norm("final_txt_ln", h);
                init.layer_norm("final_img_ln", h);
            }
        }
        store
    }

    /// Fresh head parameters for this model's task.
    pub fn init_head(&self, seed: u64) -> ParamStore {
        let a = &self.arch;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
            prefix: crate::params::HEAD_PREFIX,
            stream_tag: format!("{}/", self.head.id()),
        };
        match &self.head {
            HeadKind::Classifier { classes, .. } => init.linear("cls", a.hidden, *classes),
            HeadKind::Pretext => {
                init.linear("mlm", a.hidden, a.vocab_size);
                init.linear("mrm", a.hidden, a.img_feat_dim);
                init.linear("itm", a.hidden, 2);
            }
        }
        store
    }

    /// Record parameters on `tape`, applying `mask` to prunable entries.
    pub fn bind(&self, tape: &mut Tape, params: &ParamStore, mask: Option<&Mask>) -> Result<BoundParams> {
        self.bind_with(tape, params, mask, true)
    }

    /// Like [`Model::bind`], but parameters are constants (no parameter gradients).
    pub fn bind_frozen(&self, tape: &mut Tape, params: &ParamStore, mask: Option<&Mask>) -> Result<BoundParams> {
        self.bind_with(tape, params, mask, false)
    }

    fn bind_with(&self, tape: &mut Tape, params: &ParamStore, mask: Option<&Mask>, trainable: bool) -> Result<BoundParams> {
        if let Some(m) = mask {
            m.check_params(params)?;
        }
        let mut leaves = BTreeMap::new();
        let mut effective = BTreeMap::new();
        for (name, value) in params.iter() {
            let leaf = if trainable {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            let eff = match mask.and_then(|m| m.entry(name)) {
                Some(entry) => {
                    let m = tape.constant(entry.to_tensor());
                    tape.mul(leaf, m)?
                }
                None => leaf,
            };
            leaves.insert(name.clone(), leaf);
            effective.insert(name.clone(), eff);
        }
        Ok(BoundParams { leaves, effective })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let a = &self.arch;
        let b = batch.size();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if batch.encoding != self.encoding() {
            return Err(Error::Data(format!(
                "{} expects {:?} images, batch carries {:?}",
                a.family.name(),
                self.encoding(),
                batch.encoding
            )));
        }
        if batch.img.shape() != [b, a.img_seq_len, a.img_feat_dim] {
            return Err(Error::Dimension(format!(
                "image batch {:?}, expected [{b}, {}, {}]",
                batch.img.shape(),
                a.img_seq_len,
                a.img_feat_dim
            )));
        }
        if batch.txt_len != a.txt_seq_len || batch.tokens.len() != b * a.txt_seq_len {
            return Err(Error::Dimension(format!(
                "text batch of {} tokens with length {}, expected length {}",
                batch.tokens.len(),
                batch.txt_len,
                a.txt_seq_len
            )));
        }
        if let Some(t) = batch.tokens.iter().find(|&&t| t >= a.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", a.vocab_size)));
        }
        Ok(())
    }

    /// Forward pass on an existing tape.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &Batch,
        inject: Option<Injection>,
    ) -> Result<ModelOutput> {
        self.check_batch(batch)?;
        let a = &self.arch;
        let (b, t_len, i_len, h) = (batch.size(), a.txt_seq_len, a.img_seq_len, a.hidden);

        let tok = tape.gather_rows(p.get("emb.tok")?, &batch.tokens)?;
        let tok = tape.reshape(tok, &[b, t_len, h])?;
        let mut txt = tape.add_broadcast(tok, p.get("emb.txt_pos")?)?;

        let img_in = tape.constant(batch.img.reshaped(&[b * i_len, a.img_feat_dim])?);
        let img = linear(tape, p, "emb.img_proj", img_in)?;
        let img = tape.reshape(img, &[b, i_len, h])?;
        let mut img = tape.add_broadcast(img, p.get("emb.img_pos")?)?;

        if let Some(inj) = inject {
            if let Some(d) = inj.txt {
                txt = tape.add(txt, d)?;
            }
            if let Some(d) = inj.img {
                img = tape.add(img, d)?;
            }
        }

        let (txt_out, img_out) = match a.family {
            Family::OneStream | Family::PatchInput => {
                let x = tape.concat(&[txt, img], 1)?;
                let x = layer_norm(tape, p, "emb.ln", x)?;
                let mut x = tape.reshape(x, &[b * (t_len + i_len), h])?;
                for l in 0..a.layers {
                    x = self.block(tape, p, &format!("layer{l}"), x, b, t_len + i_len)?;
                }
                let x = layer_norm(tape, p, "final_ln", x)?;
                let x = tape.reshape(x, &[b, t_len + i_len, h])?;
                let t = tape.slice(x, 1, 0, t_len)?;
                let i = tape.slice(x, 1, t_len, i_len)?;
                (tape.reshape(t, &[b * t_len, h])?, tape.reshape(i, &[b * i_len, h])?)
            }
            Family::TwoStream => {
                let t = layer_norm(tape, p, "emb.txt_ln", txt)?;
                let i = layer_norm(tape, p, "emb.img_ln", img)?;
                let mut t = tape.reshape(t, &[b * t_len, h])?;
                let mut i = tape.reshape(i, &[b * i_len, h])?;
                for l in 0..a.stream_layers {
                    t = self.block(tape, p, &format!("txt{l}"), t, b, t_len)?;
                    i = self.block(tape, p, &format!("img{l}"), i, b, i_len)?;
                }
                for l in 0..a.cross_layers {
                    let c = format!("cross{l}");
                    let t_cross = self.cross(tape, p, &format!("{c}.t"), t, i, b, t_len, i_len)?;
                    let i_cross = self.cross(tape, p, &format!("{c}.i"), i, t, b, i_len, t_len)?;
                    t = self.block(tape, p, &format!("{c}.t_self"), t_cross, b, t_len)?;
                    i = self.block(tape, p, &format!("{c}.i_self"), i_cross, b, i_len)?;
                }
                (
                    layer_norm(tape, p, "final_txt_ln", t)?,
                    layer_norm(tape, p, "final_img_ln", i)?,
                )
            }
        };

        let t3 = tape.reshape(txt_out, &[b, t_len, h])?;
        let cls = tape.slice(t3, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, h])?;
        let logits = match self.head {
            HeadKind::Classifier { .. } => linear(tape, p, "head.cls", cls)?,
            HeadKind::Pretext => linear(tape, p, "head.itm", cls)?,
        };
        let modality_states = BTreeMap::from([("txt".to_string(), txt_out), ("img".to_string(), img_out)]);
        Ok(ModelOutput {
            cls_embedding: cls,
            logits,
            modality_states,
        })
    }

    /// Pre-norm transformer block over `[b·seq, hidden]`.
    fn block(&self, tape: &mut Tape, p: &BoundParams, name: &str, x: Var, b: usize, seq: usize) -> Result<Var> {
        let h = layer_norm(tape, p, &format!("{name}.ln1"), x)?;
        let attn = self.attention(tape, p, &format!("{name}.attn"), h, h, b, seq, seq)?;
        let x = tape.add(x, attn)?;
        let h = layer_norm(tape, p, &format!("{name}.ln2"), x)?;
        let f = linear(tape, p, &format!("{name}.ffn1"), h)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, p, &format!("{name}.ffn2"), f)?;
        tape.add(x, f)
    }

    /// Residual cross-attention of `x` over `other`.
    #[allow(clippy::too_many_arguments)]
    fn cross(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        name: &str,
        x: Var,
        other: Var,
        b: usize,
        seq_q: usize,
        seq_kv: usize,
    ) -> Result<Var> {
        let q = layer_norm(tape, p, &format!("{name}_xln_q"), x)?;
        let kv = layer_norm(tape, p, &format!("{name}_xln_kv"), other)?;
        let attn = self.attention(tape, p, &format!("{name}_xattn"), q, kv, b, seq_q, seq_kv)?;
        tape.add(x, attn)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        name: &str,
        q_src: Var,
        kv_src: Var,
        b: usize,
        seq_q: usize,
        seq_kv: usize,
    ) -> Result<Var> {
        let (nh, dh, h) = (self.arch.heads, self.arch.head_dim(), self.arch.hidden);
        let proj = |tape: &mut Tape, which: &str, src: Var, seq: usize| -> Result<Var> {
            let y = tape.matmul(src, p.get(&format!("{name}.w{which}"))?)?;
            let y = tape.add_broadcast(y, p.get(&format!("{name}.b{which}"))?)?;
            let y = tape.reshape(y, &[b, seq, nh, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * nh, seq, dh])
        };
        let q = proj(tape, "q", q_src, seq_q)?;
        let k = proj(tape, "k", kv_src, seq_kv)?;
        let v = proj(tape, "v", kv_src, seq_kv)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[b, nh, seq_q, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * seq_q, h])?;
        let out = tape.matmul(ctx, p.get(&format!("{name}.wo"))?)?;
        tape.add_broadcast(out, p.get(&format!("{name}.bo"))?)
    }

    /// Forward pass on a fresh tape; returns logits as a plain tensor.
    pub fn forward(&self, params: &ParamStore, mask: Option<&Mask>, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, mask)?;
        let out = self.forward_on(&mut tape, &bound, batch, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Cross-entropy of the classifier logits.
    pub fn std_loss_on(&self, tape: &mut Tape, p: &BoundParams, batch: &Batch, inject: Option<Injection>) -> Result<Var> {
        let out = self.forward_on(tape, p, batch, inject)?;
        tape.softmax_cross_entropy(out.logits, &batch.labels)
    }

    pub fn loss_std(&self, params: &ParamStore, mask: Option<&Mask>, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, mask)?;
        let loss = self.std_loss_on(&mut tape, &bound, batch, None)?;
        Ok(tape.value(loss).clone())
    }

    /// Selected pre-training terms, summed.
    pub fn pretext_loss_on(&self, tape: &mut Tape, p: &BoundParams, batch: &Batch, terms: PretextTerms) -> Result<PretextLoss> {
        if self.head != HeadKind::Pretext {
            return Err(Error::Data("pre-training objectives need the pretext head".into()));
        }
        let targets = batch
            .pretext
            .as_ref()
            .ok_or_else(|| Error::Data("batch carries no pretext annotations".into()))?;
        let out = self.forward_on(tape, p, batch, None)?;
        let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));

        let mlm = if terms.mlm && !targets.mlm_rows.is_empty() {
            let rows = tape.gather_rows(out.modality_states["txt"], &targets.mlm_rows)?;
            let logits = linear(tape, p, "head.mlm", rows)?;
            tape.softmax_cross_entropy(logits, &targets.mlm_targets)?
        } else {
            zero(tape)
        };
        let mrm = match (&targets.mrm_targets, terms.mrm) {
            (Some(want), true) => {
                let rows = tape.gather_rows(out.modality_states["img"], &targets.mrm_rows)?;
                let pred = linear(tape, p, "head.mrm", rows)?;
                let want = tape.constant(want.clone());
                let diff = tape.sub(pred, want)?;
                let sq = tape.mul(diff, diff)?;
                tape.mean(sq)?
            }
            _ => zero(tape),
        };
        let itm = if terms.itm {
            tape.softmax_cross_entropy(out.logits, &targets.itm_labels)?
        } else {
            zero(tape)
        };
        let partial = tape.add(mlm, mrm)?;
        let total = tape.add(partial, itm)?;
        Ok(PretextLoss { mlm, mrm, itm, total })
    }

    /// Masked-token CE + masked-region squared error + matching CE.
    pub fn pretrain_objectives(&self, params: &ParamStore, mask: Option<&Mask>, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, mask)?;
        let loss = self.pretext_loss_on(&mut tape, &bound, batch, PretextTerms::ALL)?;
        Ok(tape.value(loss.total).clone())
    }
}

/// Which pre-training objectives contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretextTerms {
    pub mlm: bool,
    pub mrm: bool,
    pub itm: bool,
}

impl PretextTerms {
    pub const ALL: PretextTerms = PretextTerms {
        mlm: true,
        mrm: true,
        itm: true,
    };
    pub const TEXT_ONLY: PretextTerms = PretextTerms {
        mlm: true,
        mrm: false,
        itm: false,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct PretextLoss {
    pub mlm: Var,
    pub mrm: Var,
    pub itm: Var,
    pub total: Var,
}

fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w"))?)?;
    tape.add_broadcast(y, p.get(&format!("{name}.b"))?)
}

fn layer_norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?)
}
