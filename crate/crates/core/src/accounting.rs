//! Analytic parameter and forward-FLOP counting from architecture
//! dimensions alone.

use serde::Serialize;

use crate::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NormKind {
    /// Gain and bias.
    LayerNorm,
    /// Gain only.
    RmsNorm,
}

impl NormKind {
    fn params(self, d: u64) -> u64 {
        match self {
            NormKind::LayerNorm => 2 * d,
            NormKind::RmsNorm => d,
        }
    }
}

/// One stack of identical pre-norm transformer blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockDims {
    pub d_model: u64,
    /// Width of the key and value projections (`kv_heads · head_dim`).
    pub kv_dim: u64,
    pub ffn_hidden: u64,
    /// SwiGLU-style MLP with gate, up and down matrices.
    pub gated_ffn: bool,
    pub qkv_bias: bool,
    pub out_bias: bool,
    pub mlp_bias: bool,
    pub norm: NormKind,
    pub count: u64,
}

impl BlockDims {
    pub fn params_per_block(&self) -> u64 {
        let (d, kv, f) = (self.d_model, self.kv_dim, self.ffn_hidden);
        let mut n = d * (d + 2 * kv) + d * d;
        if self.qkv_bias {
            n += d + 2 * kv;
        }
        if self.out_bias {
            n += d;
        }
        let mats = if self.gated_ffn { 3 } else { 2 };
        n += mats * d * f;
        if self.mlp_bias {
            n += (mats - 1) * f + d;
        }
        n + 2 * self.norm.params(d)
    }

    pub fn params(&self) -> u64 {
        self.count * self.params_per_block()
    }

    /// Forward FLOPs for a sequence of `n` tokens (full attention).
    pub fn flops(&self, n: u64) -> u64 {
        let (d, kv, f) = (self.d_model, self.kv_dim, self.ffn_hidden);
        let proj = 2 * n * d * (2 * d + 2 * kv);
        let attn = 2 * 2 * n * n * d;
        let mats = if self.gated_ffn { 3 } else { 2 };
        let mlp = mats * 2 * n * d * f;
        self.count * (proj + attn + mlp)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LmDims {
    pub blocks: BlockDims,
    pub vocab: u64,
    pub tied_embeddings: bool,
    /// Rows of a learned positional table (0 for rotary).
    pub learned_positions: u64,
    pub final_norm: NormKind,
}

/// Patch merger: optional norm, optional hidden layer, then projection to
/// the LM width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MergerDims {
    pub norm: Option<NormKind>,
    pub hidden: Option<u64>,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VisionDims {
    /// Values per flattened patch.
    pub patch_dim: u64,
    pub patch_bias: bool,
    pub blocks: BlockDims,
    pub learned_positions: u64,
    pub final_norm: Option<NormKind>,
    pub merge_factor: u64,
    pub merger: MergerDims,
}

impl VisionDims {
    pub fn d_embed(&self) -> u64 {
        self.blocks.d_model
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArchitectureDims {
    pub lm: LmDims,
    pub vision: VisionDims,
    pub lora_rank: u64,
}

impl ArchitectureDims {
    /// Dimensions of the models built by this crate.
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        let l = &cfg.lm;
        let block = |d: usize, r: usize, count: usize| BlockDims {
            d_model: d as u64,
            kv_dim: d as u64,
            ffn_hidden: (r * d) as u64,
            gated_ffn: false,
            qkv_bias: false,
            out_bias: false,
            mlp_bias: false,
            norm: NormKind::LayerNorm,
            count: count as u64,
        };
        Self {
            lm: LmDims {
                blocks: block(l.d_llm, l.mlp_ratio, l.blocks),
                vocab: l.vocab as u64,
                tied_embeddings: true,
                learned_positions: l.max_seq as u64,
                final_norm: NormKind::LayerNorm,
            },
            vision: VisionDims {
                patch_dim: (e.patch_size * e.patch_size * e.channels) as u64,
                patch_bias: true,
                blocks: block(e.d_embed, e.mlp_ratio, e.blocks),
                learned_positions: (e.grid_rows * e.grid_cols) as u64,
                final_norm: Some(NormKind::LayerNorm),
                merge_factor: e.merge_factor as u64,
                merger: MergerDims {
                    norm: None,
                    hidden: None,
                    bias: true,
                },
            },
            lora_rank: cfg.lora.rank as u64,
        }
    }

    /// A 7B-class VLM: 28-block GQA decoder at width 3584 with a 32-block,
    /// 1280-wide vision tower and a two-layer 2×2 patch merger.
    pub fn reference_7b() -> Self {
        Self {
            lm: LmDims {
                blocks: BlockDims {
                    d_model: 3584,
                    kv_dim: 512,
                    ffn_hidden: 18944,
                    gated_ffn: true,
                    qkv_bias: true,
                    out_bias: false,
                    mlp_bias: false,
                    norm: NormKind::RmsNorm,
                    count: 28,
                },
                vocab: 152_064,
                tied_embeddings: false,
                learned_positions: 0,
                final_norm: NormKind::RmsNorm,
            },
            vision: VisionDims {
                // 14×14 patches, 3 channels, 2 temporal frames.
                patch_dim: 1176,
                patch_bias: false,
                blocks: BlockDims {
                    d_model: 1280,
                    kv_dim: 1280,
                    ffn_hidden: 3420,
                    gated_ffn: true,
                    qkv_bias: true,
                    out_bias: true,
                    mlp_bias: true,
                    norm: NormKind::RmsNorm,
                    count: 32,
                },
                learned_positions: 0,
                final_norm: None,
                merge_factor: 4,
                merger: MergerDims {
                    norm: Some(NormKind::RmsNorm),
                    hidden: Some(5120),
                    bias: true,
                },
            },
            lora_rank: 4,
        }
    }

    pub fn d_llm(&self) -> u64 {
        self.lm.blocks.d_model
    }

    pub fn lm_params(&self) -> u64 {
        let d = self.d_llm();
        let heads = if self.lm.tied_embeddings { 1 } else { 2 };
        self.lm.blocks.params() + heads * self.lm.vocab * d + self.lm.learned_positions * d + self.lm.final_norm.params(d)
    }

    /// Vision tower plus merger/projector.
    pub fn vision_params(&self) -> u64 {
        let v = &self.vision;
        let e = v.d_embed();
        let mut n = v.patch_dim * e + if v.patch_bias { e } else { 0 };
        n += v.learned_positions * e + v.blocks.params();
        n += v.final_norm.map_or(0, |k| k.params(e));
        n + self.merger_params()
    }

    pub fn merger_params(&self) -> u64 {
        let m = &self.vision.merger;
        let e = self.vision.d_embed();
        let input = self.vision.merge_factor * e;
        let mut n = m.norm.map_or(0, |k| k.params(e));
        let mut width = input;
        if let Some(h) = m.hidden {
            n += width * h + if m.bias { h } else { 0 };
            width = h;
        }
        n + width * self.d_llm() + if m.bias { self.d_llm() } else { 0 }
    }

    pub fn backbone_params(&self) -> u64 {
        self.lm_params() + self.vision_params()
    }

    /// `W_g + W_1 + W_2 + W_p = d² + 2d² + 4d² + 2d²`.
    pub fn reasoner_params(&self) -> u64 {
        9 * self.d_llm() * self.d_llm()
    }

    pub fn unmerger_params(&self) -> u64 {
        self.vision.merge_factor * self.vision.d_embed() * self.d_llm()
    }

    /// Rank-r adapters on the query and value projections of every block.
    pub fn lora_params(&self) -> u64 {
        let b = &self.lm.blocks;
        let r = self.lora_rank;
        let q = r * b.d_model + b.d_model * r;
        let v = r * b.d_model + b.kv_dim * r;
        b.count * (q + v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBudget {
    pub reasoner: u64,
    pub unmerger: u64,
    pub lora: u64,
    pub trainable: u64,
    pub backbone: u64,
    /// `trainable / backbone`.
    pub ratio: f64,
}

pub fn param_budget(dims: &ArchitectureDims, with_lora: bool) -> ParamBudget {
    let reasoner = dims.reasoner_params();
    let unmerger = dims.unmerger_params();
    let lora = if with_lora { dims.lora_params() } else { 0 };
    let trainable = reasoner + unmerger + lora;
    let backbone = dims.backbone_params();
    ParamBudget {
        reasoner,
        unmerger,
        lora,
        trainable,
        backbone,
        ratio: trainable as f64 / backbone as f64,
    }
}

/// Token counts of one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SequenceSizes {
    pub patches: u64,
    pub query_tokens: u64,
    pub answer_tokens: u64,
}

impl SequenceSizes {
    pub fn for_config(cfg: &ModelConfig, query_tokens: u64, answer_tokens: u64) -> Self {
        Self {
            patches: cfg.patches() as u64,
            query_tokens,
            answer_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    /// Encoder plus merger, one image.
    pub vision: u64,
    pub reasoner: u64,
    pub unmerger: u64,
    pub baseline: u64,
    pub pass1: u64,
    pub pass2: u64,
    pub two_pass: u64,
    /// `two_pass / baseline`.
    pub ratio: f64,
    /// Reasoner and unmerger share of `two_pass`.
    pub reasoner_fraction: f64,
}

/// Forward FLOPs of the single-pass baseline and the two-pass method at the
/// same image and prompt. Counts `2·m·n·k` per matrix product (including
/// attention scores and mixing) and logits at every position; ignores
/// softmax, normalization and elementwise work.
pub fn flop_report(dims: &ArchitectureDims, sizes: SequenceSizes) -> FlopReport {
    let v = &dims.vision;
    let e = v.d_embed();
    let d = dims.d_llm();
    let p = sizes.patches;
    let t = p / v.merge_factor;

    let mut merger = 0;
    let mut width = v.merge_factor * e;
    if let Some(h) = v.merger.hidden {
        merger += 2 * t * width * h;
        width = h;
    }
    merger += 2 * t * width * d;
    let vision = 2 * p * v.patch_dim * e + v.blocks.flops(p) + merger;

    let lm = |n: u64| dims.lm.blocks.flops(n) + 2 * n * d * dims.lm.vocab;
    let answer = 1 + sizes.answer_tokens;
    let baseline_len = t + 1 + sizes.query_tokens + answer;
    let pass1_len = t + 1 + sizes.query_tokens;
    let pass2_len = 2 * (t + 1) + sizes.query_tokens + answer;

    let reasoner = 2 * t * dims.reasoner_params();
    let unmerger = 2 * t * dims.unmerger_params();
    let baseline = vision + lm(baseline_len);
    let pass1 = vision + lm(pass1_len);
    let pass2 = reasoner + unmerger + vision + lm(pass2_len);
    let two_pass = pass1 + pass2;
    FlopReport {
        vision,
        reasoner,
        unmerger,
        baseline,
        pass1,
        pass2,
        two_pass,
        ratio: two_pass as f64 / baseline as f64,
        reasoner_fraction: (reasoner + unmerger) as f64 / two_pass as f64,
    }
}

/// A 360p frame at 14-pixel patches with 2×2 merging (1196 patches, 299
/// image tokens) and a short instruction prompt.
pub fn production_sizes() -> SequenceSizes {
    SequenceSizes {
        patches: 1196,
        query_tokens: 64,
        answer_tokens: 16,
    }
}
