//! Patch-embedding transformer standing in for a VLA vision backbone, plus
//! the linear projector into the text-aligned feature space.
//!
//! Blocks are pre-layernorm with multi-head self-attention and a GELU MLP.
//! There is no class token: every token is an image patch.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub proj_dim: usize,
    pub mlp_ratio: usize,
    pub proj_bias: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            proj_dim: 96,
            mlp_ratio: 4,
            proj_bias: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("proj_dim", self.proj_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{key}"), "must be at least 1"));
            }
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::config(
                "encoder.patch_size",
                format!(
                    "must divide the image size {}x{}",
                    self.image_h, self.image_w
                ),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config("encoder.num_heads", "must divide embed_dim"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("encoder.embed_dim", "layernorm needs at least 2 features"));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_h, self.image_w]
    }
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
struct Block<R> {
    ln1_gain: Tensor<R>,
    ln1_bias: Tensor<R>,
    wq: Tensor<R>,
    bq: Tensor<R>,
    wk: Tensor<R>,
    bk: Tensor<R>,
    wv: Tensor<R>,
    bv: Tensor<R>,
    wo: Tensor<R>,
    bo: Tensor<R>,
    ln2_gain: Tensor<R>,
    ln2_bias: Tensor<R>,
    w1: Tensor<R>,
    b1: Tensor<R>,
    w2: Tensor<R>,
    b2: Tensor<R>,
}

impl<R> Block<R> {
    fn params(&self) -> [&Tensor<R>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor<R>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Frozen encoder weights. Only inputs are ever perturbed.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder<R = f64> {
    config: EncoderConfig,
    patch_weight: Tensor<R>,
    patch_bias: Tensor<R>,
    pos_embed: Tensor<R>,
    blocks: Vec<Block<R>>,
    final_gain: Tensor<R>,
    final_bias: Tensor<R>,
    proj_weight: Tensor<R>,
    proj_bias: Option<Tensor<R>>,
}

/// Attention probabilities captured during a forward pass, one `[heads, N, N]`
/// tensor per block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<R = f64> {
    pub blocks: Vec<Tensor<R>>,
}

/// How per-block attention is reduced to one score per key patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanHeadsMeanQueries,
    MeanHeadsClsQuery,
}

impl<R: Real> AttentionRecord<R> {
    /// Per-patch attention scores of one block (`None` selects the last).
    /// Scores are the head- and query-averaged attention each key receives,
    /// so they are nonnegative and sum to one.
    pub fn scores(&self, block: Option<usize>, aggregation: Aggregation) -> Result<Tensor<R>> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("attention_scores", "record holds no blocks"));
        }
        let index = block.unwrap_or(self.blocks.len() - 1);
        let attn = self.blocks.get(index).ok_or_else(|| {
            Error::invalid(
                "attention_scores",
                format!("block {index} out of range ({} blocks)", self.blocks.len()),
            )
        })?;
        match aggregation {
            Aggregation::MeanHeadsMeanQueries => {}
            Aggregation::MeanHeadsClsQuery => {
                return Err(Error::invalid(
                    "attention_scores",
                    "the encoder has no class token; use mean_heads_mean_queries",
                ))
            }
        }
        let shape = attn.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::invalid("attention_scores", format!("bad attention shape {shape:?}")));
        }
        let (heads, n) = (shape[0], shape[1]);
        let mut scores = vec![R::zero(); n];
        for row in attn.data().chunks_exact(n) {
            for (s, &p) in scores.iter_mut().zip(row) {
                *s = *s + p;
            }
        }
        let norm = R::from_usize(heads * n).expect("count");
        scores.iter_mut().for_each(|s| *s = *s / norm);
        Tensor::new(&[n], scores)
    }
}

/// Convenience wrapper over [`AttentionRecord::scores`].
pub fn attention_scores<R: Real>(
    record: &AttentionRecord<R>,
    block: Option<usize>,
    aggregation: Aggregation,
) -> Result<Tensor<R>> {
    record.scores(block, aggregation)
}

/// Detached result of a full encode + project pass.
#[derive(Clone, Debug)]
pub struct Features<R = f64> {
    pub embeddings: Tensor<R>,
    pub projected: Tensor<R>,
    pub attention: AttentionRecord<R>,
}

impl VisionEncoder<f64> {
    /// Draws all weight matrices from `U(-s, s)` with the Glorot bound of the
    /// matrix; biases start at zero and layernorm gains at one.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut glorot = |rows: usize, cols: usize| -> Tensor<f64> {
            let s = glorot_bound(rows, cols);
            Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-s..s))
        };
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let n = config.num_patches();
        let patch_weight = glorot(config.patch_len(), d);
        let pos_embed = glorot(n, d);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: glorot(d, d),
                bq: Tensor::zeros(&[d]),
                wk: glorot(d, d),
                bk: Tensor::zeros(&[d]),
                wv: glorot(d, d),
                bv: Tensor::zeros(&[d]),
                wo: glorot(d, d),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w1: glorot(d, hidden),
                b1: Tensor::zeros(&[hidden]),
                w2: glorot(hidden, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let proj_weight = glorot(d, config.proj_dim);
        let proj_bias = config.proj_bias.then(|| Tensor::zeros(&[config.proj_dim]));
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            pos_embed,
            blocks,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
            proj_weight,
            proj_bias,
            config,
        })
    }
}

const WEIGHTS_MAGIC: &[u8; 8] = b"ADVLAENC";
const WEIGHTS_VERSION: u32 = 1;

impl<R: Real> VisionEncoder<R> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Same weights in another precision.
    pub fn cast<S: Real>(&self) -> VisionEncoder<S> {
        let cast_block = |b: &Block<R>| Block {
            ln1_gain: b.ln1_gain.cast(),
            ln1_bias: b.ln1_bias.cast(),
            wq: b.wq.cast(),
            bq: b.bq.cast(),
            wk: b.wk.cast(),
            bk: b.bk.cast(),
            wv: b.wv.cast(),
            bv: b.bv.cast(),
            wo: b.wo.cast(),
            bo: b.bo.cast(),
            ln2_gain: b.ln2_gain.cast(),
            ln2_bias: b.ln2_bias.cast(),
            w1: b.w1.cast(),
            b1: b.b1.cast(),
            w2: b.w2.cast(),
            b2: b.b2.cast(),
        };
        VisionEncoder {
            config: self.config.clone(),
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self.blocks.iter().map(cast_block).collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            proj_weight: self.proj_weight.cast(),
            proj_bias: self.proj_bias.as_ref().map(|b| b.cast()),
        }
    }

    /// Replaces the projection matrix. Used to build analytic test fixtures.
    pub fn with_projection(mut self, weight: Tensor<R>, bias: Option<Tensor<R>>) -> Result<Self> {
        let want = [self.config.embed_dim, self.config.proj_dim];
        if weight.shape() != want {
            return Err(Error::shape("with_projection", weight.shape(), &want));
        }
        if let Some(b) = &bias {
            if b.shape() != [self.config.proj_dim] {
                return Err(Error::shape("with_projection", b.shape(), &[self.config.proj_dim]));
            }
        }
        self.config.proj_bias = bias.is_some();
        self.proj_weight = weight;
        self.proj_bias = bias;
        Ok(self)
    }

    /// Parameters in declaration order.
    pub fn parameters(&self) -> Vec<&Tensor<R>> {
        let mut out = vec![&self.patch_weight, &self.patch_bias, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.proj_weight]);
        out.extend(self.proj_bias.as_ref());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.proj_weight]);
        out.extend(self.proj_bias.as_mut());
        out
    }

    pub fn check_image(&self, image: &Tensor<R>) -> Result<()> {
        let want = self.config.image_shape();
        if image.shape() != want {
            return Err(Error::shape("encode", image.shape(), &want));
        }
        if let Some(v) = image
            .data()
            .iter()
            .find(|v| !(**v >= R::zero() && **v <= R::one()))
        {
            return Err(Error::invalid(
                "encode",
                format!("pixel value {v} outside [0, 1]"),
            ));
        }
        Ok(())
    }

    /// Runs the backbone on an image recorded on `tape`; returns the final
    /// token matrix `[N, D]` and the attention of every block.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape<R>,
        image: Var<'t, R>,
    ) -> Result<(Var<'t, R>, AttentionRecord<R>)> {
        self.check_image(&image.value())?;
        let c = &self.config;
        let (gh, gw, p) = (c.grid_h(), c.grid_w(), c.patch_size);
        let n = c.num_patches();
        let d = c.embed_dim;
        let heads = c.num_heads;
        let dh = c.head_dim();

        let patches = image
            .reshape(&[3, gh, p, gw, p])?
            .permute(&[1, 3, 0, 2, 4])?
            .reshape(&[n, c.patch_len()])?;
        let mut x = patches
            .matmul(&tape.constant(self.patch_weight.clone()))?
            .add_bias(&tape.constant(self.patch_bias.clone()))?
            .add(&tape.constant(self.pos_embed.clone()))?;

        let scale = R::one() / R::from_usize(dh).expect("dim").sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                block.params().map(|t| tape.constant(t.clone()));

            let h = x.layernorm(&ln1_g, &ln1_b)?;
            let split = |v: Var<'t, R>| v.reshape(&[n, heads, dh])?.permute(&[1, 0, 2]);
            let q = split(h.matmul(&wq)?.add_bias(&bq)?)?;
            let k = h.matmul(&wk)?.add_bias(&bk)?.reshape(&[n, heads, dh])?.permute(&[1, 2, 0])?;
            let v = split(h.matmul(&wv)?.add_bias(&bv)?)?;
            let probs = q.batch_matmul(&k)?.scale(scale).softmax_rows()?;
            attention.push(probs.detach());
            let mixed = probs
                .batch_matmul(&v)?
                .permute(&[1, 0, 2])?
                .reshape(&[n, d])?
                .matmul(&wo)?
                .add_bias(&bo)?;
            x = x.add(&mixed)?;

            let h2 = x.layernorm(&ln2_g, &ln2_b)?;
            let mlp = h2
                .matmul(&w1)?
                .add_bias(&b1)?
                .gelu()
                .matmul(&w2)?
                .add_bias(&b2)?;
            x = x.add(&mlp)?;
        }
        let embeddings = x.layernorm(
            &tape.constant(self.final_gain.clone()),
            &tape.constant(self.final_bias.clone()),
        )?;
        Ok((embeddings, AttentionRecord { blocks: attention }))
    }

    /// Linear map of every patch row into the text-aligned space.
    pub fn project<'t>(&self, tape: &'t Tape<R>, embeddings: Var<'t, R>) -> Result<Var<'t, R>> {
        let want = [self.config.num_patches(), self.config.embed_dim];
        if embeddings.value().shape() != want {
            return Err(Error::shape("project", &embeddings.shape(), &want));
        }
        let f = embeddings.matmul(&tape.constant(self.proj_weight.clone()))?;
        match &self.proj_bias {
            Some(b) => f.add_bias(&tape.constant(b.clone())),
            None => Ok(f),
        }
    }

    /// Encode and project without keeping the tape.
    pub fn features(&self, image: &Tensor<R>) -> Result<Features<R>> {
        let tape = Tape::new();
        let input = tape.constant(image.clone());
        let (e, attention) = self.encode(&tape, input)?;
        let f = self.project(&tape, e)?;
        Ok(Features {
            embeddings: e.detach(),
            projected: f.detach(),
            attention,
        })
    }

    /// Little-endian weight file: magic, version, config as `u32`s, then every
    /// parameter as `f64` in declaration order.
    pub fn write_weights<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        for field in config_fields(&self.config) {
            out.write_all(&field.to_le_bytes())?;
        }
        for p in self.parameters() {
            for v in p.data() {
                out.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_weights<Rd: Read>(mut input: Rd) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            format: "encoder weights",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut Rd| -> Result<u32> {
            input.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        if read_u32(&mut input)? != WEIGHTS_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut fields = [0u32; CONFIG_FIELDS];
        for f in fields.iter_mut() {
            *f = read_u32(&mut input)?;
        }
        let config = config_from_fields(&fields);
        let mut enc = VisionEncoder::new(config)?.cast::<R>();
        let mut buf = [0u8; 8];
        for p in enc.parameters_mut() {
            for v in p.data_mut() {
                input.read_exact(&mut buf)?;
                *v = R::from_f64_lossy(f64::from_le_bytes(buf));
            }
        }
        if input.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(enc)
    }
}

const CONFIG_FIELDS: usize = 11;

fn config_fields(c: &EncoderConfig) -> [u32; CONFIG_FIELDS] {
    [
        c.image_h as u32,
        c.image_w as u32,
        c.patch_size as u32,
        c.embed_dim as u32,
        c.num_blocks as u32,
        c.num_heads as u32,
        c.proj_dim as u32,
        c.mlp_ratio as u32,
        c.proj_bias as u32,
        c.seed as u32,
        (c.seed >> 32) as u32,
    ]
}

fn config_from_fields(f: &[u32; CONFIG_FIELDS]) -> EncoderConfig {
    EncoderConfig {
        image_h: f[0] as usize,
        image_w: f[1] as usize,
        patch_size: f[2] as usize,
        embed_dim: f[3] as usize,
        num_blocks: f[4] as usize,
        num_heads: f[5] as usize,
        proj_dim: f[6] as usize,
        mlp_ratio: f[7] as usize,
        proj_bias: f[8] != 0,
        seed: f[9] as u64 | ((f[10] as u64) << 32),
    }
}
