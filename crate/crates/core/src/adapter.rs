//! GeoAdapter: turns the frozen image encoders into video encoders.
//!
//! Inside every encoder block the video path runs spatial self-attention per
//! frame, then the adapter, then the MLP, each residual:
//!
//! ```text
//!   x  = x + SA(LN1(x))            per frame
//!   x  = x + F2(TSA(LNa(F1(x + TE))))
//!   x  = x + MLP(LN2(x))           per frame
//! ```
//!
//! TSA reuses the block's frozen spatial attention weights. The CLS variant
//! attends only the per-frame CLS tokens across time and passes every other
//! token through untouched; the ALL variant attends every spatial index
//! across time. F2's output layer and the temporal embeddings start at zero,
//! so a fresh adapter contributes exactly nothing.

use rand::Rng;

use crate::encoder::{
    encode_image, BoundBlock, BoundEncoder, Embedding, ParamMode, ParamNodes, ViewEncoder, LN_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, NodeId, Tape, Tensor};

const EMB_EPS: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AdapterVariant {
    /// Temporal attention over per-frame CLS tokens only.
    Cls,
    /// Temporal attention over every spatial index.
    All,
}

impl std::fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdapterVariant::Cls => write!(f, "cls"),
            AdapterVariant::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(AdapterVariant::Cls),
            "all" => Ok(AdapterVariant::All),
            other => Err(Error::InvalidArgument(format!("unknown adapter variant {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub f1_w1: Tensor,
    pub f1_b1: Tensor,
    pub f1_w2: Tensor,
    pub f1_b2: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    pub f2_w1: Tensor,
    pub f2_b1: Tensor,
    pub f2_w2: Tensor,
    pub f2_b2: Tensor,
}

impl AdapterBlock {
    fn init<R: Rng>(rng: &mut R, dim: usize, bottleneck: usize) -> Self {
        Self {
            f1_w1: Tensor::randn(rng, &[dim, bottleneck], 0.02),
            f1_b1: Tensor::zeros(&[bottleneck]),
            f1_w2: Tensor::randn(rng, &[bottleneck, dim], 0.02),
            f1_b2: Tensor::zeros(&[dim]),
            ln_g: Tensor::full(&[dim], 1.0),
            ln_b: Tensor::zeros(&[dim]),
            f2_w1: Tensor::randn(rng, &[dim, bottleneck], 0.02),
            f2_b1: Tensor::zeros(&[bottleneck]),
            // Zeroed output layer: the whole adapter is the identity at init.
            f2_w2: Tensor::zeros(&[bottleneck, dim]),
            f2_b2: Tensor::zeros(&[dim]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.f1.w1"), &self.f1_w1);
        f(&format!("{prefix}.f1.b1"), &self.f1_b1);
        f(&format!("{prefix}.f1.w2"), &self.f1_w2);
        f(&format!("{prefix}.f1.b2"), &self.f1_b2);
        f(&format!("{prefix}.ln.g"), &self.ln_g);
        f(&format!("{prefix}.ln.b"), &self.ln_b);
        f(&format!("{prefix}.f2.w1"), &self.f2_w1);
        f(&format!("{prefix}.f2.b1"), &self.f2_b1);
        f(&format!("{prefix}.f2.w2"), &self.f2_w2);
        f(&format!("{prefix}.f2.b2"), &self.f2_b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.f1.w1"), &mut self.f1_w1);
        f(&format!("{prefix}.f1.b1"), &mut self.f1_b1);
        f(&format!("{prefix}.f1.w2"), &mut self.f1_w2);
        f(&format!("{prefix}.f1.b2"), &mut self.f1_b2);
        f(&format!("{prefix}.ln.g"), &mut self.ln_g);
        f(&format!("{prefix}.ln.b"), &mut self.ln_b);
        f(&format!("{prefix}.f2.w1"), &mut self.f2_w1);
        f(&format!("{prefix}.f2.b1"), &mut self.f2_b1);
        f(&format!("{prefix}.f2.w2"), &mut self.f2_w2);
        f(&format!("{prefix}.f2.b2"), &mut self.f2_b2);
    }
}

/// Per-block adapter parameters plus the shared temporal embeddings.
#[derive(Debug, Clone)]
pub struct AdapterState {
    pub variant: AdapterVariant,
    pub te: Tensor,
    pub blocks: Vec<AdapterBlock>,
}

impl AdapterState {
    pub fn init<R: Rng>(
        rng: &mut R,
        depth: usize,
        model_dim: usize,
        t_max: usize,
        variant: AdapterVariant,
    ) -> Self {
        let bottleneck = (model_dim / 4).max(1);
        Self {
            variant,
            te: Tensor::zeros(&[t_max, model_dim]),
            blocks: (0..depth).map(|_| AdapterBlock::init(rng, model_dim, bottleneck)).collect(),
        }
    }

    pub fn t_max(&self) -> usize {
        self.te.shape()[0]
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("adapter.te", &self.te);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("adapter.b{i}"), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("adapter.te", &mut self.te);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("adapter.b{i}"), f);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Total L2 norm of all adapter parameters.
    pub fn param_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit_params(&mut |_, t| sq += t.sq_norm());
        sq.sqrt()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), "geo-adapter".to_string());
        meta.insert("variant".to_string(), self.variant.to_string());
        meta.insert("depth".to_string(), self.blocks.len().to_string());
        meta.insert("t_max".to_string(), self.t_max().to_string());
        let named = self.named_params();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::tensor::serialize::write_checkpoint(&mut file, &meta, &refs)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let (meta, tensors) = crate::tensor::serialize::read_checkpoint(&mut file)?;
        let variant: AdapterVariant = meta
            .get("variant")
            .ok_or_else(|| Error::Format("missing variant".into()))?
            .parse()?;
        let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let te = map.get("adapter.te").ok_or_else(|| Error::Format("missing adapter.te".into()))?;
        let depth: usize = meta
            .get("depth")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing depth".into()))?;
        let dim = te.shape()[1];
        let mut state = AdapterState::init(
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
            depth,
            dim,
            te.shape()[0],
            variant,
        );
        let mut missing = Vec::new();
        state.visit_params_mut(&mut |name, t| match map.get(name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!("adapter checkpoint missing: {:?}", missing)));
        }
        Ok(state)
    }
}

use rand::SeedableRng;

/// Frozen spatial attention weights reused by TSA.
pub struct TsaWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl TsaWeights {
    fn from_block(b: &BoundBlock) -> Self {
        Self { wq: b.wq, bq: b.bq, wk: b.wk, bk: b.bk, wv: b.wv, bv: b.bv, wo: b.wo, bo: b.bo }
    }
}

/// Temporal self-attention across frames.
///
/// `frames` holds one [P+1, dim] token matrix per frame. The CLS variant
/// gathers row 0 of every frame, attends across time, and scatters the
/// result back, leaving non-CLS rows bit-identical. The ALL variant repeats
/// that for every spatial index.
pub fn temporal_self_attention(
    tape: &mut Tape<'_>,
    frames: &[NodeId],
    variant: AdapterVariant,
    sa: &TsaWeights,
    heads: usize,
) -> Vec<NodeId> {
    assert!(!frames.is_empty(), "temporal attention needs at least one frame");
    let tokens = tape.value(frames[0]).rows();
    let attend_over = |tape: &mut Tape<'_>, row: usize| -> NodeId {
        let rows: Vec<NodeId> =
            frames.iter().map(|&f| tape.slice_rows(f, row, row + 1)).collect();
        let stacked = tape.concat_rows(&rows);
        let q = tape.linear(stacked, sa.wq, sa.bq);
        let k = tape.linear(stacked, sa.wk, sa.bk);
        let v = tape.linear(stacked, sa.wv, sa.bv);
        let att = multi_head_attention(tape, q, k, v, heads, None);
        tape.linear(att, sa.wo, sa.bo)
    };
    match variant {
        AdapterVariant::Cls => {
            let cls_out = attend_over(tape, 0);
            frames
                .iter()
                .enumerate()
                .map(|(f, &frame)| {
                    let new_cls = tape.slice_rows(cls_out, f, f + 1);
                    let rest = tape.slice_rows(frame, 1, tokens);
                    tape.concat_rows(&[new_cls, rest])
                })
                .collect()
        }
        AdapterVariant::All => {
            let per_row: Vec<NodeId> = (0..tokens).map(|r| attend_over(tape, r)).collect();
            (0..frames.len())
                .map(|f| {
                    let rows: Vec<NodeId> =
                        per_row.iter().map(|&o| tape.slice_rows(o, f, f + 1)).collect();
                    tape.concat_rows(&rows)
                })
                .collect()
        }
    }
}

pub(crate) struct BoundAdapterBlock {
    f1_w1: NodeId,
    f1_b1: NodeId,
    f1_w2: NodeId,
    f1_b2: NodeId,
    ln_g: NodeId,
    ln_b: NodeId,
    f2_w1: NodeId,
    f2_b1: NodeId,
    f2_w2: NodeId,
    f2_b2: NodeId,
}

pub(crate) struct BoundAdapter {
    pub variant: AdapterVariant,
    pub te: NodeId,
    blocks: Vec<BoundAdapterBlock>,
}

impl AdapterState {
    pub(crate) fn bind<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        mode: ParamMode,
        reg: &mut ParamNodes,
    ) -> BoundAdapter {
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
            .map(|(i, b)| BoundAdapterBlock {
                f1_w1: bind_one(format!("adapter.b{i}.f1.w1"), &b.f1_w1, tape),
                f1_b1: bind_one(format!("adapter.b{i}.f1.b1"), &b.f1_b1, tape),
                f1_w2: bind_one(format!("adapter.b{i}.f1.w2"), &b.f1_w2, tape),
                f1_b2: bind_one(format!("adapter.b{i}.f1.b2"), &b.f1_b2, tape),
                ln_g: bind_one(format!("adapter.b{i}.ln.g"), &b.ln_g, tape),
                ln_b: bind_one(format!("adapter.b{i}.ln.b"), &b.ln_b, tape),
                f2_w1: bind_one(format!("adapter.b{i}.f2.w1"), &b.f2_w1, tape),
                f2_b1: bind_one(format!("adapter.b{i}.f2.b1"), &b.f2_b1, tape),
                f2_w2: bind_one(format!("adapter.b{i}.f2.w2"), &b.f2_w2, tape),
                f2_b2: bind_one(format!("adapter.b{i}.f2.b2"), &b.f2_b2, tape),
            })
            .collect();
        BoundAdapter {
            variant: self.variant,
            te: bind_one("adapter.te".into(), &self.te, tape),
            blocks,
        }
    }
}

/// Frozen encoder plus its adapter: the video model for one view.
#[derive(Debug, Clone)]
pub struct UnifiedModel {
    pub encoder: ViewEncoder,
    pub adapter: AdapterState,
}

impl UnifiedModel {
    pub fn new(encoder: ViewEncoder, adapter: AdapterState) -> Result<Self> {
        if adapter.blocks.len() != encoder.config.depth {
            return Err(Error::InvalidArgument(format!(
                "adapter depth {} vs encoder depth {}",
                adapter.blocks.len(),
                encoder.config.depth
            )));
        }
        if adapter.te.shape()[1] != encoder.config.model_dim {
            return Err(Error::InvalidArgument("adapter dim mismatch".into()));
        }
        Ok(Self { encoder, adapter })
    }

    /// Encode a video (ordered frames) to one unit embedding.
    pub fn encode_video(&self, frames: &[Tensor], id: &str) -> Result<Embedding> {
        let mut tape = Tape::new();
        let mut reg = ParamNodes::default();
        let bound_enc = self.encoder.bind(&mut tape, ParamMode::Frozen, &mut reg);
        let bound_ad = self.adapter.bind(&mut tape, ParamMode::Frozen, &mut reg);
        let node = embed_video(
            &mut tape,
            &bound_enc,
            &bound_ad,
            &prepare_frames(&self.encoder, frames)?,
        )?;
        Ok(Embedding { id: id.to_string(), vec: tape.value(node).data().to_vec() })
    }

    /// Tile a large square aerial image row-major and encode the tiles as the
    /// temporal axis of the video path.
    pub fn encode_large_aerial(&self, large: &Tensor, id: &str) -> Result<Embedding> {
        let tiles = tile_large(large, self.encoder.config.image_size)?;
        self.encode_video(&tiles, id)
    }
}

pub(crate) fn prepare_frames(enc: &ViewEncoder, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty frame list".into()));
    }
    let size = enc.config.image_size;
    frames
        .iter()
        .map(|img| {
            if img.shape() != [size, size, 3] {
                return Err(Error::ShapeMismatch {
                    op: "encode_video",
                    detail: format!("expected [{0}, {0}, 3], got {1:?}", size, img.shape()),
                });
            }
            crate::encoder::patchify(img, enc.config.patch_size)
        })
        .collect()
}

/// Run the adapted video path on a tape; `frame_patches` are pre-patchified.
pub(crate) fn embed_video(
    tape: &mut Tape<'_>,
    enc: &BoundEncoder,
    adapter: &BoundAdapter,
    frame_patches: &[Tensor],
) -> Result<NodeId> {
    let t = frame_patches.len();
    let t_max = tape.value(adapter.te).rows();
    if t == 0 {
        return Err(Error::InvalidArgument("empty frame list".into()));
    }
    if t > t_max {
        return Err(Error::InvalidArgument(format!("{} frames exceed T_max {}", t, t_max)));
    }

    let mut frames: Vec<NodeId> =
        frame_patches.iter().map(|p| enc.stem(tape, p)).collect();
    for (block_idx, ablock) in adapter.blocks.iter().enumerate() {
        // Spatial attention per frame.
        frames =
            frames.iter().map(|&f| enc.spatial_sa(tape, f, block_idx)).collect();
        // Adapter residual.
        let contributions =
            adapter_forward(tape, &frames, enc, adapter, ablock, block_idx);
        frames = frames
            .iter()
            .zip(contributions)
            .map(|(&f, c)| tape.add(f, c))
            .collect();
        // MLP per frame.
        frames = frames.iter().map(|&f| enc.mlp_residual(tape, f, block_idx)).collect();
    }

    // Per-frame heads, mean pool, renormalize.
    let per_frame: Vec<NodeId> = frames.iter().map(|&f| enc.head(tape, f)).collect();
    let stacked = tape.concat_rows(&per_frame);
    let mean = tape.mean_rows(stacked);
    Ok(tape.l2_normalize_rows(mean, EMB_EPS))
}

/// G_A(x, TE) = F2(TSA(LNa(F1(x + TE)))) for every frame.
fn adapter_forward(
    tape: &mut Tape<'_>,
    frames: &[NodeId],
    enc: &BoundEncoder,
    adapter: &BoundAdapter,
    ablock: &BoundAdapterBlock,
    block_idx: usize,
) -> Vec<NodeId> {
    let sa = TsaWeights::from_block(&enc.blocks[block_idx]);
    let inner: Vec<NodeId> = frames
        .iter()
        .enumerate()
        .map(|(f, &frame)| {
            let te_row = tape.slice_rows(adapter.te, f, f + 1);
            let with_te = tape.add_bias(frame, te_row);
            let h = tape.linear(with_te, ablock.f1_w1, ablock.f1_b1);
            let h = tape.gelu(h);
            let h = tape.linear(h, ablock.f1_w2, ablock.f1_b2);
            tape.layer_norm(h, ablock.ln_g, ablock.ln_b, LN_EPS)
        })
        .collect();
    let attended = temporal_self_attention(tape, &inner, adapter.variant, &sa, enc.heads);
    attended
        .into_iter()
        .map(|a| {
            let h = tape.linear(a, ablock.f2_w1, ablock.f2_b1);
            let h = tape.gelu(h);
            tape.linear(h, ablock.f2_w2, ablock.f2_b2)
        })
        .collect()
}

/// Split a [k*s, k*s, 3] image into k*k row-major tiles of side `s`.
pub fn tile_large(large: &Tensor, tile_side: usize) -> Result<Vec<Tensor>> {
    let shape = large.shape();
    if shape.len() != 3 || shape[2] != 3 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "tile_large",
            detail: format!("expected square [S, S, 3], got {:?}", shape),
        });
    }
    let side = shape[0];
    if tile_side == 0 || side % tile_side != 0 {
        return Err(Error::ShapeMismatch {
            op: "tile_large",
            detail: format!("side {} not divisible by tile {}", side, tile_side),
        });
    }
    let k = side / tile_side;
    let src = large.data();
    let mut tiles = Vec::with_capacity(k * k);
    for ty in 0..k {
        for tx in 0..k {
            let mut data = vec![0.0f32; tile_side * tile_side * 3];
            for y in 0..tile_side {
                let src_row = ((ty * tile_side + y) * side + tx * tile_side) * 3;
                let dst_row = y * tile_side * 3;
                data[dst_row..dst_row + tile_side * 3]
                    .copy_from_slice(&src[src_row..src_row + tile_side * 3]);
            }
            tiles.push(Tensor::new(&[tile_side, tile_side, 3], data)?);
        }
    }
    Ok(tiles)
}

/// Baseline aggregation: mean of per-item unit embeddings, renormalized.
pub fn baseline1_video_embedding(
    enc: &ViewEncoder,
    items: &[Tensor],
    id: &str,
) -> Result<Embedding> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty item list".into()));
    }
    let d = enc.config.embed_dim;
    let mut acc = vec![0.0f64; d];
    for (i, item) in items.iter().enumerate() {
        let e = encode_image(enc, item, &format!("{id}#{i}"))?;
        for (a, &v) in acc.iter_mut().zip(&e.vec) {
            *a += v as f64;
        }
    }
    let n = items.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    let norm = (mean.iter().map(|v| v * v).sum::<f64>() + EMB_EPS as f64).sqrt();
    Ok(Embedding { id: id.to_string(), vec: mean.into_iter().map(|v| (v / norm) as f32).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
        let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(&[size, size, 3], data).unwrap()
    }

    fn tiny_unified(seed: u64, variant: AdapterVariant) -> UnifiedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ViewEncoder::init(EncoderConfig::tiny(), &mut rng).unwrap();
        let adapter = AdapterState::init(&mut rng, enc.config.depth, enc.config.model_dim, 16, variant);
        UnifiedModel::new(enc, adapter).unwrap()
    }

    #[test]
    fn fresh_adapter_matches_mean_embedding_path() {
        let model = tiny_unified(40, AdapterVariant::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let frames: Vec<Tensor> = (0..5).map(|_| random_image(&mut rng, 16)).collect();
        let video = model.encode_video(&frames, "v").unwrap();
        let baseline = baseline1_video_embedding(&model.encoder, &frames, "v").unwrap();
        let diff: f32 =
            video.vec.iter().zip(&baseline.vec).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "identity at init violated: max diff {}", diff);
    }

    #[test]
    fn single_frame_fresh_adapter_equals_encode_image() {
        let model = tiny_unified(42, AdapterVariant::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let frame = random_image(&mut rng, 16);
        let video = model.encode_video(std::slice::from_ref(&frame), "v").unwrap();
        let image = encode_image(&model.encoder, &frame, "v").unwrap();
        let diff: f32 =
            video.vec.iter().zip(&image.vec).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "single-frame video differs from image path by {}", diff);
    }

    #[test]
    fn video_embedding_is_unit_norm() {
        let mut model = tiny_unified(44, AdapterVariant::Cls);
        // Push the adapter away from zero so the non-identity path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        model.adapter.te = Tensor::randn(&mut rng, model.adapter.te.shape(), 0.1);
        model.adapter.blocks[0].f2_w2 =
            Tensor::randn(&mut rng, model.adapter.blocks[0].f2_w2.shape(), 0.1);
        let frames: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
        let video = model.encode_video(&frames, "v").unwrap();
        let norm: f64 = video.vec.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn frame_order_matters_once_te_is_nonzero() {
        let mut model = tiny_unified(46, AdapterVariant::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        model.adapter.te = Tensor::randn(&mut rng, model.adapter.te.shape(), 0.2);
        model.adapter.blocks[0].f2_w2 =
            Tensor::randn(&mut rng, model.adapter.blocks[0].f2_w2.shape(), 0.2);
        let frames: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 16)).collect();
        let mut reversed = frames.clone();
        reversed.reverse();
        let fwd = model.encode_video(&frames, "v").unwrap();
        let rev = model.encode_video(&reversed, "v").unwrap();
        let diff: f32 = fwd.vec.iter().zip(&rev.vec).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "temporal embeddings inactive (diff {})", diff);
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let model = tiny_unified(48, AdapterVariant::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let frames: Vec<Tensor> = (0..17).map(|_| random_image(&mut rng, 16)).collect();
        assert!(model.encode_video(&frames, "v").is_err());
        assert!(model.encode_video(&[], "v").is_err());
    }

    #[test]
    fn cls_variant_leaves_non_cls_tokens_bit_identical() {
        let model = tiny_unified(50, AdapterVariant::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut tape = Tape::new();
        let mut reg = ParamNodes::default();
        let enc = model.encoder.bind(&mut tape, ParamMode::Frozen, &mut reg);
        let tokens = model.encoder.config.tokens();
        let dim = model.encoder.config.model_dim;
        let frames: Vec<NodeId> = (0..4)
            .map(|_| tape.leaf(Tensor::randn(&mut rng, &[tokens, dim], 1.0)))
            .collect();
        let sa = TsaWeights::from_block(&enc.blocks[0]);
        let out = temporal_self_attention(&mut tape, &frames, AdapterVariant::Cls, &sa, enc.heads);
        for (f, (&inp, &outp)) in frames.iter().zip(&out).enumerate() {
            let before = tape.value(inp).data();
            let after = tape.value(outp).data();
            assert_eq!(
                &before[dim..],
                &after[dim..],
                "frame {} non-CLS tokens changed across TSA",
                f
            );
            assert_ne!(&before[..dim], &after[..dim], "frame {} CLS unchanged", f);
        }
    }

    #[test]
    fn identical_frames_attend_identically() {
        let model = tiny_unified(52, AdapterVariant::All);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut tape = Tape::new();
        let mut reg = ParamNodes::default();
        let enc = model.encoder.bind(&mut tape, ParamMode::Frozen, &mut reg);
        let tokens = model.encoder.config.tokens();
        let dim = model.encoder.config.model_dim;
        let base = Tensor::randn(&mut rng, &[tokens, dim], 1.0);
        let frames: Vec<NodeId> = (0..3).map(|_| tape.leaf(base.clone())).collect();
        let sa = TsaWeights::from_block(&enc.blocks[0]);
        for variant in [AdapterVariant::Cls, AdapterVariant::All] {
            let out = temporal_self_attention(&mut tape, &frames, variant, &sa, enc.heads);
            let first = tape.value(out[0]).data().to_vec();
            for &o in &out[1..] {
                assert_eq!(tape.value(o).data(), first.as_slice(), "{:?}", variant);
            }
        }
    }

    #[test]
    fn cls_variant_is_cheaper_than_all_by_token_count() {
        // T=8 frames, P=16 patches: per-position TSA cost is identical, so the
        // flop ratio must be exactly 1/(P+1) < 1/P.
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let config = EncoderConfig::desk_default();
        let enc = ViewEncoder::init(config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut reg = ParamNodes::default();
        let bound = enc.bind(&mut tape, ParamMode::Frozen, &mut reg);
        let tokens = config.tokens();
        let frames: Vec<NodeId> = (0..8)
            .map(|_| tape.leaf(Tensor::randn(&mut rng, &[tokens, config.model_dim], 1.0)))
            .collect();
        let sa = TsaWeights::from_block(&bound.blocks[0]);

        tape.reset_flops();
        temporal_self_attention(&mut tape, &frames, AdapterVariant::Cls, &sa, config.heads);
        let cls_flops = tape.flops();
        tape.reset_flops();
        temporal_self_attention(&mut tape, &frames, AdapterVariant::All, &sa, config.heads);
        let all_flops = tape.flops();

        assert!(cls_flops > 0 && all_flops > cls_flops);
        let p = config.patches() as u64;
        assert!(
            cls_flops * p < all_flops,
            "cls {} not under 1/{} of all {}",
            cls_flops,
            p,
            all_flops
        );
    }

    #[test]
    fn large_aerial_tiling_partitions_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let large = random_image(&mut rng, 48); // 3x3 tiles of 16
        let tiles = tile_large(&large, 16).unwrap();
        assert_eq!(tiles.len(), 9);
        // Every pixel appears exactly once across tiles.
        let total: f64 = tiles.iter().map(|t| t.data().iter().map(|&v| v as f64).sum::<f64>()).sum();
        let expected: f64 = large.data().iter().map(|&v| v as f64).sum();
        assert!((total - expected).abs() < 1e-3);
        let count: usize = tiles.iter().map(|t| t.numel()).sum();
        assert_eq!(count, large.numel());
        // k=1 degenerates to the image itself.
        let single = tile_large(&large, 48).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].data(), large.data());
    }

    #[test]
    fn large_aerial_49_tiles() {
        // 7x smaller tile side: the canonical 49-patch decomposition.
        let side = 7 * 16;
        let data = vec![0.5f32; side * side * 3];
        let large = Tensor::new(&[side, side, 3], data).unwrap();
        let tiles = tile_large(&large, 16).unwrap();
        assert_eq!(tiles.len(), 49);
    }

    #[test]
    fn baseline1_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let enc = ViewEncoder::init(EncoderConfig::tiny(), &mut rng).unwrap();
        let img = random_image(&mut rng, 16);
        let one = baseline1_video_embedding(&enc, std::slice::from_ref(&img), "a").unwrap();
        let single = encode_image(&enc, &img, "a").unwrap();
        assert!(one.vec.iter().zip(&single.vec).all(|(a, b)| (a - b).abs() < 1e-6));
        let two = baseline1_video_embedding(&enc, &[img.clone(), img.clone()], "a").unwrap();
        assert!(two.vec.iter().zip(&single.vec).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(baseline1_video_embedding(&enc, &[], "a").is_err());
    }

    #[test]
    fn adapted_block_gradients_match_finite_differences() {
        // Finite-difference check through one full adapted block, covering the
        // adapter parameters and the temporal embeddings.
        use crate::gradcheck::{finite_diff_grad, max_rel_err, probe_loss, probe_weights, DEFAULT_H};
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut config = EncoderConfig::tiny();
        config.depth = 1;
        let enc = ViewEncoder::init(config, &mut rng).unwrap();
        let t_frames = 3;
        let adapter =
            AdapterState::init(&mut rng, 1, config.model_dim, t_frames, AdapterVariant::Cls);
        // Use O(1) weights so the inner layer norm sees well-scaled rows; the
        // production 0.02-scale init leaves them tiny, and the resulting
        // curvature swamps central differences.
        let mut adapter = adapter;
        adapter.blocks[0].f1_w1 = Tensor::randn(&mut rng, adapter.blocks[0].f1_w1.shape(), 0.4);
        adapter.blocks[0].f1_w2 = Tensor::randn(&mut rng, adapter.blocks[0].f1_w2.shape(), 0.4);
        adapter.blocks[0].f2_w1 = Tensor::randn(&mut rng, adapter.blocks[0].f2_w1.shape(), 0.4);
        adapter.blocks[0].f2_w2 = Tensor::randn(&mut rng, adapter.blocks[0].f2_w2.shape(), 0.3);
        adapter.te = Tensor::randn(&mut rng, adapter.te.shape(), 0.2);
        let frames: Vec<Tensor> = (0..t_frames)
            .map(|_| Tensor::randn(&mut rng, &[config.tokens(), config.model_dim], 0.5))
            .collect();

        let run = |adapter: &AdapterState, probes: &[f32]| -> (f64, Vec<(String, Vec<f32>)>) {
            let mut tape = Tape::new();
            let mut reg = ParamNodes::default();
            let bound_enc = enc.bind(&mut tape, ParamMode::Frozen, &mut reg);
            let mut adreg = ParamNodes::default();
            let bound_ad = adapter.bind(&mut tape, ParamMode::Trainable, &mut adreg);
            let mut xs: Vec<NodeId> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
            xs = xs.iter().map(|&f| bound_enc.spatial_sa(&mut tape, f, 0)).collect();
            let contrib = adapter_forward(&mut tape, &xs, &bound_enc, &bound_ad, &bound_ad.blocks[0], 0);
            xs = xs.iter().zip(contrib).map(|(&f, c)| tape.add(f, c)).collect();
            xs = xs.iter().map(|&f| bound_enc.mlp_residual(&mut tape, f, 0)).collect();
            let out = tape.concat_rows(&xs);
            let loss = probe_loss(tape.value(out), probes);
            tape.backward_seeded(out, probes.to_vec());
            let mut grads = Vec::new();
            for (name, id) in &adreg.entries {
                if let Some(g) = tape.take_grad(*id) {
                    grads.push((name.clone(), g));
                }
            }
            (loss, grads)
        };

        let out_numel = t_frames * config.tokens() * config.model_dim;
        let probes = probe_weights(out_numel, 99);
        let (_, analytic) = run(&adapter, &probes);
        assert!(!analytic.is_empty());

        // The block is checked as a unit: all adapter-parameter gradients
        // concatenate into one vector before comparison.
        let mut analytic_all = Vec::new();
        let mut numeric_all = Vec::new();
        for (name, grad) in &analytic {
            let base = adapter.named_params().iter().find(|(n, _)| n == name).unwrap().1.clone();
            let numeric = finite_diff_grad(
                |xs| {
                    let mut probe_adapter = adapter.clone();
                    probe_adapter.visit_params_mut(&mut |n, t| {
                        if n == name {
                            *t = xs[0].clone();
                        }
                    });
                    run(&probe_adapter, &probes).0
                },
                &[base],
                0,
                DEFAULT_H,
            );
            analytic_all.extend_from_slice(grad);
            numeric_all.extend_from_slice(&numeric);
        }
        let err = max_rel_err(&analytic_all, &numeric_all, 1e-2);
        assert!(err < 1e-3, "adapted block: rel err {:.3e}", err);
    }
}
