//! Patch-based image encoder and the patch merger feeding the language model.
//!
//! Patches are sequenced in merge-window order: the grid is cut into
//! `w × w` windows (`w² = merge_factor`), windows are visited in raster
//! order, and patches inside a window are raster-ordered too. Every run of
//! `merge_factor` consecutive patches is therefore one spatial window, which
//! is what the merger concatenates and the unmerger splits back out.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::layers::{add_normal, lookup, Block, INIT_STD};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// 8-bit interleaved image as decoded from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Normalized image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input("empty image".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        if y < self.height && x < self.width {
            let base = (y * self.width + x) * self.channels;
            for (c, &v) in rgb.iter().enumerate().take(self.channels) {
                self.pixels[base + c] = v.clamp(0.0, 1.0);
            }
        }
    }

    /// Quantized to 8 bits (exact for images built from 8-bit palettes).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            data.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }
}

/// Resizes to `target` rows (aspect preserved, bilinear, half-pixel
/// centers), then crops the rightmost columns so the width is a multiple of
/// `patch_size`. Pixels are scaled to [0, 1].
pub fn preprocess(raw: &RawImage, target: usize, patch_size: usize) -> Result<ImageGrid> {
    if raw.height == 0 || raw.width == 0 || raw.channels == 0 {
        return Err(Error::Input("empty image".into()));
    }
    if raw.data.len() != raw.height * raw.width * raw.channels {
        return Err(Error::Input("pixel buffer does not match dimensions".into()));
    }
    if patch_size == 0 || !target.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "target height {target} is not a multiple of patch size {patch_size}"
        )));
    }
    let scaled_w = ((raw.width as f64) * (target as f64) / (raw.height as f64)).round() as usize;
    let out_w = scaled_w / patch_size * patch_size;
    if target < patch_size || out_w < patch_size {
        return Err(Error::Input(format!(
            "{}x{} image is smaller than one {patch_size}px patch after resizing",
            raw.height, raw.width
        )));
    }
    let c = raw.channels;
    let src = |y: usize, x: usize, ch: usize| f32::from(raw.data[(y * raw.width + x) * c + ch]) / 255.0;
    let sy = raw.height as f64 / target as f64;
    let sx = raw.width as f64 / scaled_w as f64;
    let coord = |o: usize, scale: f64, extent: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let mut pixels = Vec::with_capacity(target * out_w * c);
    for y in 0..target {
        let (y0, y1, fy) = coord(y, sy, raw.height);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, sx, raw.width);
            for ch in 0..c {
                let top = src(y0, x0, ch) * (1.0 - fx) + src(y0, x1, ch) * fx;
                let bot = src(y1, x0, ch) * (1.0 - fx) + src(y1, x1, ch) * fx;
                pixels.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageGrid::new(target, out_w, c, pixels)
}

/// Patch embeddings `[P, d_embed]`: the point where the reasoner's delta is
/// added before encoding.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbeddings {
    pub values: Var,
    pub num_patches: usize,
    pub dim: usize,
}

/// LLM-facing image tokens `[T, d_llm]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageTokens {
    pub values: Var,
    pub num_tokens: usize,
    pub dim: usize,
}

/// Grid position `(row, col)` of each patch in sequence order.
pub fn patch_order(rows: usize, cols: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || !rows.is_multiple_of(window) || !cols.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "{rows}x{cols} patch grid is not divisible by the {window}x{window} merge window"
        )));
    }
    let mut order = Vec::with_capacity(rows * cols);
    for br in 0..rows / window {
        for bc in 0..cols / window {
            for r in 0..window {
                for c in 0..window {
                    order.push((br * window + r, bc * window + c));
                }
            }
        }
    }
    Ok(order)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_g: ParamId,
    ln_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    patch_size: usize,
    channels: usize,
    d_embed: usize,
    d_llm: usize,
    grid_cols: usize,
    grid_rows: usize,
    window: usize,
    merge_factor: usize,
}

impl VisionEncoder {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let e = &cfg.encoder;
        let patch_dim = e.patch_size * e.patch_size * e.channels;
        add_normal(store, "encoder.patch.w", &[e.d_embed, patch_dim], INIT_STD, rng)?;
        store.add("encoder.patch.b", Tensor::zeros(&[e.d_embed]))?;
        add_normal(store, "encoder.pos", &[e.grid_rows * e.grid_cols, e.d_embed], INIT_STD, rng)?;
        for i in 0..e.blocks {
            Block::register(store, &format!("encoder.blocks.{i}"), e.d_embed, e.mlp_ratio, rng)?;
        }
        store.add("encoder.ln_f.g", Tensor::full(&[e.d_embed], T::one()))?;
        store.add("encoder.ln_f.b", Tensor::zeros(&[e.d_embed]))?;
        add_normal(
            store,
            "projector.w",
            &[cfg.lm.d_llm, e.merge_factor * e.d_embed],
            INIT_STD,
            rng,
        )?;
        store.add("projector.b", Tensor::zeros(&[cfg.lm.d_llm]))?;
        Ok(())
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let e = &cfg.encoder;
        Ok(Self {
            patch_w: lookup(store, "encoder.patch.w")?,
            patch_b: lookup(store, "encoder.patch.b")?,
            pos: lookup(store, "encoder.pos")?,
            blocks: (0..e.blocks)
                .map(|i| Block::attach(store, &format!("encoder.blocks.{i}"), e.heads))
                .collect::<Result<_>>()?,
            ln_g: lookup(store, "encoder.ln_f.g")?,
            ln_b: lookup(store, "encoder.ln_f.b")?,
            proj_w: lookup(store, "projector.w")?,
            proj_b: lookup(store, "projector.b")?,
            patch_size: e.patch_size,
            channels: e.channels,
            d_embed: e.d_embed,
            d_llm: cfg.lm.d_llm,
            grid_rows: e.grid_rows,
            grid_cols: e.grid_cols,
            window: cfg.merge_window(),
            merge_factor: e.merge_factor,
        })
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn merge_factor(&self) -> usize {
        self.merge_factor
    }

    /// Flattened patch pixels `[P, p²·c]` in merge-window order.
    pub fn patchify(&self, img: &ImageGrid) -> Result<(Tensor<f32>, Vec<(usize, usize)>)> {
        let p = self.patch_size;
        if !img.height().is_multiple_of(p) || !img.width().is_multiple_of(p) {
            return Err(contract(format!(
                "{}x{} image is not aligned to {p}px patches",
                img.height(),
                img.width()
            )));
        }
        if img.channels() != self.channels {
            return Err(contract(format!(
                "image has {} channels, encoder expects {}",
                img.channels(),
                self.channels
            )));
        }
        let (rows, cols) = (img.height() / p, img.width() / p);
        if rows > self.grid_rows || cols > self.grid_cols {
            return Err(Error::Config(format!(
                "{rows}x{cols} patch grid exceeds the {}x{} positional table",
                self.grid_rows, self.grid_cols
            )));
        }
        let order = patch_order(rows, cols, self.window)?;
        let dim = p * p * self.channels;
        let mut data = Vec::with_capacity(order.len() * dim);
        for &(r, c) in &order {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..self.channels {
                        data.push(img.get(r * p + y, c * p + x, ch));
                    }
                }
            }
        }
        Ok((Tensor::new(vec![order.len(), dim], data)?, order))
    }

    /// Linear patch projection plus the learned positional row of each patch.
    pub fn embed_patches<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        img: &ImageGrid,
    ) -> Result<PatchEmbeddings> {
        let (patches, order) = self.patchify(img)?;
        let x = g.constant(&patches.cast());
        let w = ps.bind(g, self.patch_w);
        let b = ps.bind(g, self.patch_b);
        let h = g.matmul_t(x, w)?;
        let h = g.add_row(h, b)?;
        let pos = ps.bind(g, self.pos);
        let idx: Vec<usize> = order.iter().map(|&(r, c)| r * self.grid_cols + c).collect();
        let pos = g.gather_rows(pos, &idx)?;
        let values = g.add(h, pos)?;
        Ok(PatchEmbeddings {
            values,
            num_patches: order.len(),
            dim: self.d_embed,
        })
    }

    /// Bidirectional encoder over `pe + delta`. Returns patch features `[P, d_embed]`.
    pub fn encode<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Graph<T>,
        pe: &PatchEmbeddings,
        delta: Option<Var>,
    ) -> Result<Var> {
        let mut x = pe.values;
        if let Some(d) = delta {
            if g.shape(d) != [pe.num_patches, pe.dim] {
                return Err(contract(format!(
                    "delta shape {:?} does not match patch embeddings [{}, {}]",
                    g.shape(d),
                    pe.num_patches,
                    pe.dim
                )));
            }
            x = g.add(x, d)?;
        }
        for b in &self.blocks {
            x = b.forward(ps, g, x, false, None)?;
        }
        let (lg, lb) = (ps.bind(g, self.ln_g), ps.bind(g, self.ln_b));
        g.layernorm(x, lg, lb)
    }

    /// Concatenates each run of `merge_factor` patch features and projects
    /// it to the LLM width.
    pub fn merge_patches<T: Scalar>(&self, ps: &ParamStore<T>, g: &mut Graph<T>, features: Var) -> Result<ImageTokens> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.d_embed {
            return Err(contract(format!("patch features have shape {shape:?}")));
        }
        let p = shape[0];
        let m = self.merge_factor;
        if !p.is_multiple_of(m) {
            return Err(Error::Config(format!("{p} patches not divisible by merge factor {m}")));
        }
        let grouped = g.reshape(features, &[p / m, m * self.d_embed])?;
        let w = ps.bind(g, self.proj_w);
        let b = ps.bind(g, self.proj_b);
        let t = g.matmul_t(grouped, w)?;
        let values = g.add_row(t, b)?;
        Ok(ImageTokens {
            values,
            num_tokens: p / m,
            dim: self.d_llm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn raw(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> u8) -> RawImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        RawImage {
            height: h,
            width: w,
            channels: 3,
            data,
        }
    }

    #[test]
    fn preprocess_720p_to_360p() {
        let img = preprocess(&raw(720, 1280, |y, x, c| ((y + x + c) % 256) as u8), 360, 6).unwrap();
        // 640 columns floor to 636 at patch size 6.
        assert_eq!((img.height(), img.width()), (360, 636));
        let img = preprocess(&raw(720, 1280, |_, _, _| 9), 360, 8).unwrap();
        assert_eq!((img.height(), img.width()), (360, 640));
    }

    #[test]
    fn preprocess_identity_when_aligned() {
        let r = raw(36, 36, |y, x, c| (y * 7 + x * 3 + c) as u8);
        let img = preprocess(&r, 36, 6).unwrap();
        for (a, &b) in img.pixels().iter().zip(&r.data) {
            assert_eq!(*a, f32::from(b) / 255.0);
        }
    }

    #[test]
    fn preprocess_floors_width_to_patch_multiple() {
        let r = raw(36, 50, |y, x, _| (y + x) as u8);
        let img = preprocess(&r, 36, 6).unwrap();
        assert_eq!(img.width(), 48);
        // The kept columns are untouched.
        assert_eq!(img.get(3, 47, 0), f32::from(r.data[(3 * 50 + 47) * 3]) / 255.0);
    }

    #[test]
    fn preprocess_rejects_tiny_images() {
        assert!(matches!(
            preprocess(&raw(40, 4, |_, _, _| 0), 6, 6),
            Err(Error::Input(_))
        ));
        let empty = RawImage {
            height: 0,
            width: 0,
            channels: 3,
            data: vec![],
        };
        assert!(preprocess(&empty, 36, 6).is_err());
    }

    #[test]
    fn window_order_groups_spatial_blocks() {
        let o = patch_order(4, 4, 2).unwrap();
        assert_eq!(&o[..4], &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(&o[4..8], &[(0, 2), (0, 3), (1, 2), (1, 3)]);
        assert_eq!(patch_order(3, 3, 1).unwrap().len(), 9);
        assert!(patch_order(3, 4, 2).is_err());
    }

    fn toy16() -> (ModelConfig, ParamStore<f64>, VisionEncoder) {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.patch_size = 4;
        cfg.encoder.grid_rows = 4;
        cfg.encoder.grid_cols = 4;
        cfg.image_height = 16;
        cfg.image_width = 16;
        let mut store = ParamStore::new();
        VisionEncoder::register(&mut store, &cfg, &mut SeedStream::new(1).rng()).unwrap();
        let enc = VisionEncoder::attach(&store, &cfg).unwrap();
        (cfg, store, enc)
    }

    #[test]
    fn patch_count_and_bias_rows() {
        let (_, mut store, enc) = toy16();
        for v in store.by_name_mut("encoder.pos").unwrap().data_mut() {
            *v = 0.0;
        }
        let bias: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        store
            .by_name_mut("encoder.patch.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let mut g = Graph::new();
        let pe = enc.embed_patches(&store, &mut g, &ImageGrid::filled(16, 16, 3, 0.0)).unwrap();
        assert_eq!(pe.num_patches, 16);
        for row in g.value(pe.values).chunks(32) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn patch_embedding_is_local() {
        let (_, store, enc) = toy16();
        let a = ImageGrid::filled(16, 16, 3, 0.2);
        let mut b = a.clone();
        b.set(5, 9, [0.9, 0.1, 0.4]); // patch (1, 2)
        let mut g = Graph::new();
        let pa = enc.embed_patches(&store, &mut g, &a).unwrap();
        let pb = enc.embed_patches(&store, &mut g, &b).unwrap();
        let order = patch_order(4, 4, 2).unwrap();
        let changed = order.iter().position(|&rc| rc == (1, 2)).unwrap();
        for (i, (ra, rb)) in g.value(pa.values).chunks(32).zip(g.value(pb.values).chunks(32)).enumerate() {
            assert_eq!(ra != rb, i == changed, "row {i}");
        }
    }

    #[test]
    fn merge_counts_and_group_locality() {
        let (_, store, enc) = toy16();
        let mut g = Graph::new();
        let mut rng = SeedStream::new(2).rng();
        let feats = Tensor::<f64>::randn(&[16, 32], 1.0, &mut rng);
        let f = g.constant(&feats);
        let t = enc.merge_patches(&store, &mut g, f).unwrap();
        assert_eq!((t.num_tokens, t.dim), (4, 64));
        // Swap groups 0 and 2.
        let mut swapped = feats.clone();
        let d = swapped.data_mut();
        for i in 0..4 * 32 {
            d.swap(i, 8 * 32 + i);
        }
        let f2 = g.constant(&swapped);
        let t2 = enc.merge_patches(&store, &mut g, f2).unwrap();
        let (a, b) = (g.value(t.values), g.value(t2.values));
        assert_eq!(a[..64], b[2 * 64..3 * 64]);
        assert_eq!(a[2 * 64..3 * 64], b[..64]);
        assert_eq!(a[64..128], b[64..128]);

        let f3 = g.constant(&Tensor::zeros(&[15, 32]));
        assert!(matches!(enc.merge_patches(&store, &mut g, f3), Err(Error::Config(_))));
    }

    #[test]
    fn merge_with_identity_projection_passes_features_through() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.merge_factor = 1;
        cfg.lm.d_llm = 32;
        cfg.lm.heads = 4;
        let mut store = ParamStore::<f64>::new();
        VisionEncoder::register(&mut store, &cfg, &mut SeedStream::new(1).rng()).unwrap();
        *store.by_name_mut("projector.w").unwrap() = Tensor::eye(32);
        let enc = VisionEncoder::attach(&store, &cfg).unwrap();
        let mut g = Graph::new();
        let feats = Tensor::<f64>::randn(&[36, 32], 1.0, &mut SeedStream::new(3).rng());
        let f = g.constant(&feats);
        let t = enc.merge_patches(&store, &mut g, f).unwrap();
        assert_eq!(g.value(t.values), feats.data());
    }

    #[test]
    fn zero_delta_matches_absent_delta() {
        let (_, store, enc) = toy16();
        let img = ImageGrid::filled(16, 16, 3, 0.5);
        let mut g = Graph::new();
        let pe = enc.embed_patches(&store, &mut g, &img).unwrap();
        let a = enc.encode(&store, &mut g, &pe, None).unwrap();
        let z = g.constant(&Tensor::zeros(&[16, 32]));
        let b = enc.encode(&store, &mut g, &pe, Some(z)).unwrap();
        assert!(g.tensor(a).bits_eq(&g.tensor(b)));

        let mut rng = SeedStream::new(4).rng();
        let d = g.constant(&Tensor::randn(&[16, 32], 0.5, &mut rng));
        let c = enc.encode(&store, &mut g, &pe, Some(d)).unwrap();
        let diff: f64 = g.value(a).iter().zip(g.value(c)).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(diff > 0.0);

        let bad = g.constant(&Tensor::zeros(&[4, 32]));
        assert!(matches!(enc.encode(&store, &mut g, &pe, Some(bad)), Err(Error::Contract(_))));
    }
}
