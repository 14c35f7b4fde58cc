//! Per-view image transformer: patchify, linear projection, CLS token,
//! learnable positional embeddings, pre-norm blocks, and a projection head
//! producing an L2-normalized embedding. The street and aerial views each own
//! a fully separate instance.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults; every field stays configurable.
    pub fn desk_default() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            depth: 4,
            model_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
        }
    }

    /// Tiny configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 8,
            depth: 2,
            model_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("zero-sized encoder field".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Parameters can enter a tape as trainable leaves or frozen constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Registry of (name, node) pairs bound onto a tape, used to pull gradients
/// back out after `backward`.
#[derive(Default)]
pub struct ParamNodes {
    pub entries: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn grads_into(
        &self,
        tape: &mut Tape<'_>,
        out: &mut std::collections::HashMap<String, Vec<f32>>,
    ) {
        for (name, id) in &self.entries {
            if let Some(g) = tape.take_grad(*id) {
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl Block {
    fn init<R: Rng>(rng: &mut R, dim: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1_g: Tensor::full(&[dim], 1.0),
            ln1_b: Tensor::zeros(&[dim]),
            wq: Tensor::randn(rng, &[dim, dim], 0.02),
            bq: Tensor::zeros(&[dim]),
            wk: Tensor::randn(rng, &[dim, dim], 0.02),
            bk: Tensor::zeros(&[dim]),
            wv: Tensor::randn(rng, &[dim, dim], 0.02),
            bv: Tensor::zeros(&[dim]),
            wo: Tensor::randn(rng, &[dim, dim], 0.02),
            bo: Tensor::zeros(&[dim]),
            ln2_g: Tensor::full(&[dim], 1.0),
            ln2_b: Tensor::zeros(&[dim]),
            mlp_w1: Tensor::randn(rng, &[dim, hidden], 0.02),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: Tensor::randn(rng, &[hidden, dim], 0.02),
            mlp_b2: Tensor::zeros(&[dim]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.ln1.g"), &self.ln1_g);
        f(&format!("{prefix}.ln1.b"), &self.ln1_b);
        f(&format!("{prefix}.attn.wq"), &self.wq);
        f(&format!("{prefix}.attn.bq"), &self.bq);
        f(&format!("{prefix}.attn.wk"), &self.wk);
        f(&format!("{prefix}.attn.bk"), &self.bk);
        f(&format!("{prefix}.attn.wv"), &self.wv);
        f(&format!("{prefix}.attn.bv"), &self.bv);
        f(&format!("{prefix}.attn.wo"), &self.wo);
        f(&format!("{prefix}.attn.bo"), &self.bo);
        f(&format!("{prefix}.ln2.g"), &self.ln2_g);
        f(&format!("{prefix}.ln2.b"), &self.ln2_b);
        f(&format!("{prefix}.mlp.w1"), &self.mlp_w1);
        f(&format!("{prefix}.mlp.b1"), &self.mlp_b1);
        f(&format!("{prefix}.mlp.w2"), &self.mlp_w2);
        f(&format!("{prefix}.mlp.b2"), &self.mlp_b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln1.g"), &mut self.ln1_g);
        f(&format!("{prefix}.ln1.b"), &mut self.ln1_b);
        f(&format!("{prefix}.attn.wq"), &mut self.wq);
        f(&format!("{prefix}.attn.bq"), &mut self.bq);
        f(&format!("{prefix}.attn.wk"), &mut self.wk);
        f(&format!("{prefix}.attn.bk"), &mut self.bk);
        f(&format!("{prefix}.attn.wv"), &mut self.wv);
        f(&format!("{prefix}.attn.bv"), &mut self.bv);
        f(&format!("{prefix}.attn.wo"), &mut self.wo);
        f(&format!("{prefix}.attn.bo"), &mut self.bo);
        f(&format!("{prefix}.ln2.g"), &mut self.ln2_g);
        f(&format!("{prefix}.ln2.b"), &mut self.ln2_b);
        f(&format!("{prefix}.mlp.w1"), &mut self.mlp_w1);
        f(&format!("{prefix}.mlp.b1"), &mut self.mlp_b1);
        f(&format!("{prefix}.mlp.w2"), &mut self.mlp_w2);
        f(&format!("{prefix}.mlp.b2"), &mut self.mlp_b2);
    }
}

/// One view's image transformer.
#[derive(Debug, Clone)]
pub struct ViewEncoder {
    pub config: EncoderConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub(crate) const LN_EPS: f32 = 1e-5;
const EMB_EPS: f32 = 1e-12;

impl ViewEncoder {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dim = config.model_dim;
        let blocks = (0..config.depth).map(|_| Block::init(rng, dim, config.mlp_ratio)).collect();
        Ok(Self {
            config,
            patch_w: Tensor::randn(rng, &[config.patch_dim(), dim], 0.02),
            patch_b: Tensor::zeros(&[dim]),
            cls: Tensor::randn(rng, &[1, dim], 0.02),
            pos: Tensor::randn(rng, &[config.tokens(), dim], 0.02),
            blocks,
            norm_g: Tensor::full(&[dim], 1.0),
            norm_b: Tensor::zeros(&[dim]),
            head_w: Tensor::randn(rng, &[dim, config.embed_dim], 0.02),
            head_b: Tensor::zeros(&[config.embed_dim]),
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("patch.w", &self.patch_w);
        f("patch.b", &self.patch_b);
        f("cls", &self.cls);
        f("pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
        f("norm.g", &self.norm_g);
        f("norm.b", &self.norm_b);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("patch.w", &mut self.patch_w);
        f("patch.b", &mut self.patch_b);
        f("cls", &mut self.cls);
        f("pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        f("norm.g", &mut self.norm_g);
        f("norm.b", &mut self.norm_b);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Bind all parameters onto a tape, registering their node ids.
    pub(crate) fn bind<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        mode: ParamMode,
        reg: &mut ParamNodes,
    ) -> BoundEncoder {
        let mut bind_one = |name: String, t: &'p Tensor, tape: &mut Tape<'p>| -> NodeId {
            let id = match mode {
                ParamMode::Trainable => tape.param(t),
                ParamMode::Frozen => tape.constant(t),
            };
            reg.entries.push((name, id));
            id
        };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BoundBlock {
                ln1_g: bind_one(format!("block{i}.ln1.g"), &b.ln1_g, tape),
                ln1_b: bind_one(format!("block{i}.ln1.b"), &b.ln1_b, tape),
                wq: bind_one(format!("block{i}.attn.wq"), &b.wq, tape),
                bq: bind_one(format!("block{i}.attn.bq"), &b.bq, tape),
                wk: bind_one(format!("block{i}.attn.wk"), &b.wk, tape),
                bk: bind_one(format!("block{i}.attn.bk"), &b.bk, tape),
                wv: bind_one(format!("block{i}.attn.wv"), &b.wv, tape),
                bv: bind_one(format!("block{i}.attn.bv"), &b.bv, tape),
                wo: bind_one(format!("block{i}.attn.wo"), &b.wo, tape),
                bo: bind_one(format!("block{i}.attn.bo"), &b.bo, tape),
                ln2_g: bind_one(format!("block{i}.ln2.g"), &b.ln2_g, tape),
                ln2_b: bind_one(format!("block{i}.ln2.b"), &b.ln2_b, tape),
                mlp_w1: bind_one(format!("block{i}.mlp.w1"), &b.mlp_w1, tape),
                mlp_b1: bind_one(format!("block{i}.mlp.b1"), &b.mlp_b1, tape),
                mlp_w2: bind_one(format!("block{i}.mlp.w2"), &b.mlp_w2, tape),
                mlp_b2: bind_one(format!("block{i}.mlp.b2"), &b.mlp_b2, tape),
            })
            .collect();
        BoundEncoder {
            heads: self.config.heads,
            patch_w: bind_one("patch.w".into(), &self.patch_w, tape),
            patch_b: bind_one("patch.b".into(), &self.patch_b, tape),
            cls: bind_one("cls".into(), &self.cls, tape),
            pos: bind_one("pos".into(), &self.pos, tape),
            blocks,
            norm_g: bind_one("norm.g".into(), &self.norm_g, tape),
            norm_b: bind_one("norm.b".into(), &self.norm_b, tape),
            head_w: bind_one("head.w".into(), &self.head_w, tape),
            head_b: bind_one("head.b".into(), &self.head_b, tape),
        }
    }
}

/// Tape-bound parameter handles for one encoder.
pub(crate) struct BoundEncoder {
    pub heads: usize,
    pub patch_w: NodeId,
    pub patch_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub norm_g: NodeId,
    pub norm_b: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

pub(crate) struct BoundBlock {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

impl BoundEncoder {
    /// Patch projection + CLS + positional embeddings for one image.
    pub(crate) fn stem(&self, tape: &mut Tape<'_>, patches: &Tensor) -> NodeId {
        let x = tape.leaf(centered(patches));
        let projected = tape.linear(x, self.patch_w, self.patch_b);
        let cls_row = self.cls;
        let tokens = tape.concat_rows(&[cls_row, projected]);
        let pos = self.pos;
        tape.add(tokens, pos)
    }

    /// x + SA(LN1(x)), spatial attention over one frame's tokens.
    pub(crate) fn spatial_sa(&self, tape: &mut Tape<'_>, x: NodeId, block_idx: usize) -> NodeId {
        let b = &self.blocks[block_idx];
        let normed = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS);
        let q = tape.linear(normed, b.wq, b.bq);
        let k = tape.linear(normed, b.wk, b.bk);
        let v = tape.linear(normed, b.wv, b.bv);
        let att = multi_head_attention(tape, q, k, v, self.heads, None);
        let proj = tape.linear(att, b.wo, b.bo);
        tape.add(x, proj)
    }

    /// x + MLP(LN2(x)).
    pub(crate) fn mlp_residual(&self, tape: &mut Tape<'_>, x: NodeId, block_idx: usize) -> NodeId {
        let b = &self.blocks[block_idx];
        let normed = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS);
        let h = tape.linear(normed, b.mlp_w1, b.mlp_b1);
        let h = tape.gelu(h);
        let out = tape.linear(h, b.mlp_w2, b.mlp_b2);
        tape.add(x, out)
    }

    /// All blocks in image mode; returns the final token matrix.
    pub(crate) fn run_blocks(&self, tape: &mut Tape<'_>, mut x: NodeId) -> NodeId {
        for i in 0..self.blocks.len() {
            x = self.spatial_sa(tape, x, i);
            x = self.mlp_residual(tape, x, i);
        }
        x
    }

    /// Final norm on the CLS token, projection head, unit normalization.
    pub(crate) fn head(&self, tape: &mut Tape<'_>, tokens: NodeId) -> NodeId {
        let cls = tape.slice_rows(tokens, 0, 1);
        let normed = tape.layer_norm(cls, self.norm_g, self.norm_b, LN_EPS);
        let emb = tape.linear(normed, self.head_w, self.head_b);
        tape.l2_normalize_rows(emb, EMB_EPS)
    }

    /// Full image path: patches -> embedding node of shape [1, d].
    pub(crate) fn embed_image(&self, tape: &mut Tape<'_>, patches: &Tensor) -> NodeId {
        let x = self.stem(tape, patches);
        let x = self.run_blocks(tape, x);
        self.head(tape, x)
    }
}

impl ViewEncoder {
    /// Serialize parameters with the config embedded in the header.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), "view-encoder".to_string());
        meta.insert("image_size".to_string(), self.config.image_size.to_string());
        meta.insert("patch_size".to_string(), self.config.patch_size.to_string());
        meta.insert("depth".to_string(), self.config.depth.to_string());
        meta.insert("model_dim".to_string(), self.config.model_dim.to_string());
        meta.insert("heads".to_string(), self.config.heads.to_string());
        meta.insert("mlp_ratio".to_string(), self.config.mlp_ratio.to_string());
        meta.insert("embed_dim".to_string(), self.config.embed_dim.to_string());
        let named = self.named_params();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::tensor::serialize::write_checkpoint(&mut file, &meta, &refs)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (meta, tensors) = crate::tensor::serialize::read_checkpoint(&mut file)?;
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("missing header field {}", k)))
        };
        let config = EncoderConfig {
            image_size: get("image_size")?,
            patch_size: get("patch_size")?,
            depth: get("depth")?,
            model_dim: get("model_dim")?,
            heads: get("heads")?,
            mlp_ratio: get("mlp_ratio")?,
            embed_dim: get("embed_dim")?,
        };
        let mut enc = ViewEncoder::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut missing = Vec::new();
        enc.visit_params_mut(&mut |name, t| match map.get(name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some(loaded) => missing.push(format!("{} (shape {:?} vs {:?})", name, loaded.shape(), t.shape())),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint missing/incompatible: {:?}", missing)));
        }
        Ok(enc)
    }

    /// SHA-256 over the serialized parameters; used by the freeze contract.
    pub fn weights_digest(&self) -> [u8; 32] {
        let named = self.named_params();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        crate::tensor::serialize::checkpoint_digest(&std::collections::BTreeMap::new(), &refs)
    }
}

/// Map [0,1] pixels to [-1,1] before projection.
fn centered(patches: &Tensor) -> Tensor {
    let data = patches.data().iter().map(|&v| v * 2.0 - 1.0).collect();
    Tensor::new(patches.shape(), data).unwrap()
}

/// L2-normalized d-vector plus the id of its source item.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Embedding {
    pub id: String,
    pub vec: Vec<f32>,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f32 {
        debug_assert_eq!(self.vec.len(), other.vec.len());
        self.vec.iter().zip(&other.vec).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32
    }
}

/// Rearrange an [H, W, 3] image into [P, p*p*3] patch rows, row-major in both
/// the patch grid and within each patch.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            detail: format!("expected [H, W, 3], got {:?}", shape),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            detail: format!("{}x{} not divisible by patch size {}", h, w, p),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let patch_dim = p * p * 3;
    let mut out = vec![0.0f32; gh * gw * patch_dim];
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = (gy * gw + gx) * patch_dim;
            for py in 0..p {
                for px in 0..p {
                    let src_idx = (((gy * p + py) * w) + gx * p + px) * 3;
                    let dst_idx = patch + (py * p + px) * 3;
                    out[dst_idx..dst_idx + 3].copy_from_slice(&src[src_idx..src_idx + 3]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, patch_dim], out)
}

/// Inverse of [`patchify`]; exact.
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let patch_dim = p * p * 3;
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, patch_dim] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            detail: format!("{:?} vs [{}, {}]", patches.shape(), gh * gw, patch_dim),
        });
    }
    let mut out = vec![0.0f32; h * w * 3];
    let src = patches.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = (gy * gw + gx) * patch_dim;
            for py in 0..p {
                for px in 0..p {
                    let dst_idx = (((gy * p + py) * w) + gx * p + px) * 3;
                    let src_idx = patch + (py * p + px) * 3;
                    out[dst_idx..dst_idx + 3].copy_from_slice(&src[src_idx..src_idx + 3]);
                }
            }
        }
    }
    Tensor::new(&[h, w, 3], out)
}

/// Encode one image to its unit embedding.
pub fn encode_image(enc: &ViewEncoder, image: &Tensor, id: &str) -> Result<Embedding> {
    let expected = enc.config.image_size;
    if image.shape() != [expected, expected, 3] {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            detail: format!("expected [{0}, {0}, 3], got {1:?}", expected, image.shape()),
        });
    }
    let patches = patchify(image, enc.config.patch_size)?;
    let mut tape = Tape::new();
    let mut reg = ParamNodes::default();
    let bound = enc.bind(&mut tape, ParamMode::Frozen, &mut reg);
    let emb = bound.embed_image(&mut tape, &patches);
    Ok(Embedding { id: id.to_string(), vec: tape.value(emb).data().to_vec() })
}

/// Encode a batch; element-wise identical to [`encode_image`].
pub fn encode_batch(enc: &ViewEncoder, images: &[(String, Tensor)]) -> Result<Vec<Embedding>> {
    images.iter().map(|(id, img)| encode_image(enc, img, id)).collect()
}
