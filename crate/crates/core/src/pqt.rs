//! Positional-query transformers: per level, CT positional embeddings act
//! as queries that cross-attend to position-augmented X-ray feature tokens,
//! producing position-aware condition maps for the denoiser.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::Plane;
use crate::nn::{from_tokens, softmax_last_dim, to_tokens, LayerNorm, Linear, ParamBuilder};
use crate::posenc::{CtPE, XrayPE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqtConfig {
    /// Cross-attention blocks per level (`B`).
    pub blocks: usize,
    pub num_heads: usize,
    /// Attention width; `None` means the query width `C_P`.
    pub attn_dim: Option<usize>,
    pub mlp_ratio: usize,
    /// Start the attention and MLP output projections at zero.
    pub zero_init_outputs: bool,
}

impl Default for PqtConfig {
    fn default() -> Self {
        PqtConfig {
            blocks: 12,
            num_heads: 4,
            attn_dim: None,
            mlp_ratio: 4,
            zero_init_outputs: false,
        }
    }
}

impl PqtConfig {
    pub fn attn_width(&self, query_dim: usize) -> usize {
        self.attn_dim.unwrap_or(query_dim)
    }

    pub fn validate(&self, query_dim: usize) -> Result<()> {
        if self.blocks == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "transformer needs B, heads and mlp ratio >= 1".into(),
            ));
        }
        let d = self.attn_width(query_dim);
        if d == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {} heads",
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// Condition maps for a batch of target slices: one `(b, C_P, H_l, W_l)`
/// tensor per level, plus the `(plane, slice)` each batch row belongs to.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub levels: Vec<Tensor>,
    pub tags: Vec<(Plane, usize)>,
}

impl ConditionSet {
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4()?;
                Ok((h, w))
            })
            .collect()
    }

    /// Same maps with every value replaced by zero.
    pub fn zeros_like(&self) -> Result<ConditionSet> {
        Ok(ConditionSet {
            levels: self
                .levels
                .iter()
                .map(|t| t.zeros_like())
                .collect::<candle_core::Result<_>>()?,
            tags: self.tags.clone(),
        })
    }
}

fn dims_chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = t.dims4()?;
    Ok((c, h, w))
}

/// Adds X-ray PEs to X-ray features, flattens each view row-major and
/// concatenates PA then Lat along the token axis: `(b, n_views*H*W, C)`.
pub fn assemble_kv(
    f_pa: &Tensor,
    f_lat: Option<&Tensor>,
    q_pa: &Tensor,
    q_lat: Option<&Tensor>,
) -> Result<Tensor> {
    let view = |f: &Tensor, q: &Tensor, name: &str| -> Result<Tensor> {
        if dims_chw(f)? != dims_chw(q)? {
            return Err(Error::Shape(format!(
                "{name} features {:?} and embeddings {:?} differ",
                f.dims(),
                q.dims()
            )));
        }
        to_tokens(&f.broadcast_add(q)?)
    };
    let pa = view(f_pa, q_pa, "PA")?;
    match (f_lat, q_lat) {
        (None, None) => Ok(pa),
        (Some(f), Some(q)) => {
            if dims_chw(f)? != dims_chw(f_pa)? {
                return Err(Error::Shape(
                    "PA and Lat feature maps differ in shape".into(),
                ));
            }
            Ok(Tensor::cat(&[&pa, &view(f, q, "Lat")?], 1)?)
        }
        _ => Err(Error::Shape(
            "Lat features and Lat embeddings must both be present or both absent".into(),
        )),
    }
}

#[derive(Debug, Clone)]
struct CrossBlock {
    heads: usize,
    q_norm: LayerNorm,
    kv_norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl CrossBlock {
    fn new(
        pb: &mut ParamBuilder<'_>,
        config: &PqtConfig,
        query_dim: usize,
        kv_dim: usize,
    ) -> Result<Self> {
        let d = config.attn_width(query_dim);
        let hidden = config.mlp_ratio * query_dim;
        let z = config.zero_init_outputs;
        Ok(CrossBlock {
            heads: config.num_heads,
            q_norm: LayerNorm::new(&mut pb.push("q_norm"), query_dim)?,
            kv_norm: LayerNorm::new(&mut pb.push("kv_norm"), kv_dim)?,
            wq: Linear::new(&mut pb.push("wq"), query_dim, d, false)?,
            wk: Linear::new(&mut pb.push("wk"), kv_dim, d, false)?,
            wv: Linear::new(&mut pb.push("wv"), kv_dim, d, false)?,
            wo: Linear::new(&mut pb.push("wo"), d, query_dim, z)?,
            mlp_norm: LayerNorm::new(&mut pb.push("mlp_norm"), query_dim)?,
            fc1: Linear::new(&mut pb.push("fc1"), query_dim, hidden, false)?,
            fc2: Linear::new(&mut pb.push("fc2"), hidden, query_dim, z)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn attend(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (b, nq, _) = x.dims3()?;
        let q = self.split_heads(&self.wq.forward(&self.q_norm.forward(x)?)?)?;
        let kv = self.kv_norm.forward(kv)?;
        let k = self.split_heads(&self.wk.forward(&kv)?)?;
        let v = self.split_heads(&self.wv.forward(&kv)?)?;
        let dh = q.dims()[3];
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let out = softmax_last_dim(&scores)?.matmul(&v)?;
        let out = out
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, self.heads * dh))?;
        self.wo.forward(&out)
    }

    fn forward(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let x = (x + self.attend(x, kv)?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&self.mlp_norm.forward(&x)?)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// The `B`-block transformer of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelTransformer {
    level: usize,
    blocks: Vec<CrossBlock>,
    final_norm: LayerNorm,
}

impl LevelTransformer {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        config: &PqtConfig,
        level: usize,
        query_dim: usize,
        kv_dim: usize,
    ) -> Result<Self> {
        config.validate(query_dim)?;
        let blocks = (0..config.blocks)
            .map(|i| CrossBlock::new(&mut pb.push(format!("block{i}")), config, query_dim, kv_dim))
            .collect::<Result<_>>()?;
        Ok(LevelTransformer {
            level,
            blocks,
            final_norm: LayerNorm::new(&mut pb.push("final_norm"), query_dim)?,
        })
    }

    /// Modulates `(b, C_P, H, W)` positional queries with `(b, N, C_l)` tokens.
    pub fn modulate_level(&self, queries: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = queries.dims4()?;
        let mut x = to_tokens(queries)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, kv_tokens)?;
            let probe = x
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
            if !probe.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation in transformer level {} block {i}",
                    self.level
                )));
            }
        }
        from_tokens(&self.final_norm.forward(&x)?, h, w)
    }
}

/// One transformer per pyramid level, independent parameters.
#[derive(Debug, Clone)]
pub struct PositionalQueryTransformer {
    levels: Vec<LevelTransformer>,
}

impl PositionalQueryTransformer {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        config: &PqtConfig,
        query_dim: usize,
        channel_plan: &[usize],
    ) -> Result<Self> {
        let levels = channel_plan
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                LevelTransformer::new(&mut pb.push(format!("level{l}")), config, l, query_dim, c)
            })
            .collect::<Result<_>>()?;
        Ok(PositionalQueryTransformer { levels })
    }

    pub fn level(&self, l: usize) -> &LevelTransformer {
        &self.levels[l]
    }

    /// Condition maps for every level.
    pub fn modulate(
        &self,
        f_pa: &FeaturePyramid,
        f_lat: Option<&FeaturePyramid>,
        p: &CtPE,
        q_pa: &XrayPE,
        q_lat: Option<&XrayPE>,
        tags: Vec<(Plane, usize)>,
    ) -> Result<ConditionSet> {
        let n = self.levels.len();
        if f_pa.levels.len() != n || p.levels.len() != n || q_pa.levels.len() != n {
            return Err(Error::Shape(format!("expected {n} levels in every input")));
        }
        let levels = (0..n)
            .map(|l| {
                let kv = assemble_kv(
                    &f_pa.levels[l],
                    f_lat.map(|f| &f.levels[l]),
                    &q_pa.levels[l],
                    q_lat.map(|q| &q.levels[l]),
                )?;
                let (_, _, ph, pw) = p.levels[l].dims4()?;
                let (_, _, fh, fw) = f_pa.levels[l].dims4()?;
                if (ph, pw) != (fh, fw) {
                    return Err(Error::Shape(format!(
                        "level {l}: CT embedding and feature sizes differ"
                    )));
                }
                self.levels[l].modulate_level(&p.levels[l], &kv)
            })
            .collect::<Result<_>>()?;
        Ok(ConditionSet { levels, tags })
    }
}
