//! Per-image feature extraction: a global convolutional net with a
//! saliency head, top-t saliency features, greedy ROI retrieval, a local
//! net over the retrieved patches with gated-attention pooling, and fusion
//! of global and local features.

mod viz;

pub use viz::{boxed_image, saliency_heatmap};

use rand::Rng;

use crate::casedata::{Grid, Rect};
use crate::milpool::attention::{uniform, weighted_sum};
use crate::milpool::AttentionBlock;
use crate::tensor::{Bound, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub const GLOBAL: &str = "global";
pub const LOCAL: &str = "local";

/// A stack of 3x3 convolution stages (zero padding 1, ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub channels: Vec<usize>,
    /// Stride of each stage; defaults to 2 everywhere.
    pub strides: Vec<usize>,
    /// Output dimension of the local net's projection. The global net's
    /// pooled feature dimension is its last channel count.
    pub embed_dim: usize,
}

impl NetConfig {
    pub fn new(channels: Vec<usize>, embed_dim: usize) -> Self {
        let strides = vec![2; channels.len()];
        NetConfig {
            channels,
            strides,
            embed_dim,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let bad = |msg: String| {
            Err(TensorError::Invalid {
                op: "net_config",
                msg: format!("{what}: {msg}"),
            })
        };
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("needs at least one stage with positive channels".into());
        }
        if self.strides.len() != self.channels.len() || self.strides.contains(&0) {
            return bad(format!(
                "{} strides for {} stages",
                self.strides.len(),
                self.channels.len()
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents after all stages.
    pub fn output_extents(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.strides.iter().try_fold((h, w), |(h, w), &s| {
            let f = |n: usize| if n + 2 >= 3 { Some((n + 2 - 3) / s + 1) } else { None };
            Some((f(h)?, f(w)?))
        })
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::new(vec![8, 16, 32], 32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub global: NetConfig,
    pub local: NetConfig,
    pub t_fraction: f64,
    /// Number of ROI candidates per image.
    pub k: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Retrieval window as a fraction of each saliency extent.
    pub roi_window_fraction: f64,
    pub attention_hidden: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            image_height: 64,
            image_width: 48,
            global: NetConfig::default(),
            local: NetConfig::new(vec![8, 16], 32),
            t_fraction: 0.02,
            k: 6,
            patch_height: 16,
            patch_width: 16,
            roi_window_fraction: 0.25,
            attention_hidden: 128,
        }
    }
}

impl FeatureConfig {
    pub fn saliency_extents(&self) -> Option<(usize, usize)> {
        self.global.output_extents(self.image_height, self.image_width)
    }

    /// `max(1, round(t_fraction * H' * W'))`.
    pub fn t(&self) -> usize {
        let (h, w) = self.saliency_extents().unwrap_or((1, 1));
        topt_count(self.t_fraction, h * w)
    }

    pub fn window(&self) -> (usize, usize) {
        let (h, w) = self.saliency_extents().unwrap_or((1, 1));
        let f = |n: usize| ((n as f64 * self.roi_window_fraction).round() as usize).clamp(1, n);
        (f(h), f(w))
    }

    pub fn global_dim(&self) -> usize {
        *self.global.channels.last().unwrap_or(&0)
    }

    pub fn fusion_dim(&self) -> usize {
        self.global_dim() + self.local.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "feature_config", msg });
        self.global.validate("global net")?;
        self.local.validate("local net")?;
        let Some((sh, sw)) = self.saliency_extents() else {
            return bad(format!(
                "{}x{} image too small for {} global stages",
                self.image_height,
                self.image_width,
                self.global.channels.len()
            ));
        };
        if sh * sw == 0 {
            return bad("empty saliency map".into());
        }
        if self.local.output_extents(self.patch_height, self.patch_width).is_none() {
            return bad("patch extents too small for the local net".into());
        }
        if !(self.t_fraction > 0.0 && self.t_fraction <= 1.0) {
            return bad(format!("t_fraction {} outside (0, 1]", self.t_fraction));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.roi_window_fraction > 0.0 && self.roi_window_fraction <= 1.0) {
            return bad("roi_window_fraction outside (0, 1]".into());
        }
        if self.attention_hidden == 0 {
            return bad("attention hidden dimension must be positive".into());
        }
        Ok(())
    }
}

pub fn topt_count(t_fraction: f64, cells: usize) -> usize {
    ((t_fraction * cells as f64).round() as usize).clamp(1, cells.max(1))
}

/// Saliency values at feature-map resolution plus the input extents.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Grid,
    pub source_shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCandidate {
    pub crop: Grid,
    /// Window in saliency coordinates.
    pub window: Rect,
    /// Box in image coordinates.
    pub bbox: Rect,
    pub saliency_mass: f64,
    /// Patch-level attention, filled by [`FeatureNet::local_forward`].
    pub attention: f64,
}

/// Per-image features recorded on a tape.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// `[t]`, descending saliency values.
    pub h_topt: Var,
    /// `[embed_dim]`
    pub h_local: Var,
    /// `[global_dim + embed_dim]`
    pub h_fusion: Var,
    pub pooled_global: Var,
    /// `[1, H', W']`
    pub saliency_var: Var,
    pub saliency: SaliencyMap,
    pub patches: Vec<PatchCandidate>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

fn conv_stages(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &NetConfig,
    prefix: &str,
    component: &str,
) -> Result<Vec<ConvStage>> {
    let mut cin = 1;
    let mut stages = Vec::new();
    for (i, (&cout, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        let limit = (6.0 / (cin * 9) as f64).sqrt();
        let weight = store.add(
            &format!("{prefix}.conv{i}.weight"),
            component,
            uniform(rng, &[cout, cin, 3, 3], limit),
        )?;
        let bias = store.add(
            &format!("{prefix}.conv{i}.bias"),
            component,
            Tensor::zeros(&[cout, 1, 1]),
        )?;
        stages.push(ConvStage { weight, bias, stride });
        cin = cout;
    }
    Ok(stages)
}

fn run_stages(tape: &mut Tape, p: &Bound, stages: &[ConvStage], mut x: Var) -> Result<Var> {
    for s in stages {
        let c = tape.conv2d(x, p.get(s.weight), s.stride, 1)?;
        let c = tape.add(c, p.get(s.bias))?;
        x = tape.relu(c)?;
    }
    Ok(x)
}

fn grid_tensor(g: &Grid) -> Tensor {
    Tensor::new(vec![1, g.height(), g.width()], g.data().to_vec()).expect("grid extents")
}

/// Global and local networks with their saliency and patch-attention heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub cfg: FeatureConfig,
    global: Vec<ConvStage>,
    saliency_w: ParamId,
    saliency_b: ParamId,
    local: Vec<ConvStage>,
    local_proj_w: ParamId,
    local_proj_b: ParamId,
    patch_attention: AttentionBlock,
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        store.register_component(GLOBAL);
        store.register_component(LOCAL);
        let global = conv_stages(store, rng, &cfg.global, "global", GLOBAL)?;
        let c = cfg.global_dim();
        let lim = (6.0 / (c + 1) as f64).sqrt();
        let saliency_w = store.add("global.saliency.weight", GLOBAL, uniform(rng, &[1, c, 1, 1], lim))?;
        let saliency_b = store.add("global.saliency.bias", GLOBAL, Tensor::zeros(&[1, 1, 1]))?;
        let local = conv_stages(store, rng, &cfg.local, "local", LOCAL)?;
        let lc = *cfg.local.channels.last().unwrap();
        let e = cfg.local.embed_dim;
        let lim = (6.0 / (lc + e) as f64).sqrt();
        let local_proj_w = store.add("local.proj.weight", LOCAL, uniform(rng, &[lc, e], lim))?;
        let local_proj_b = store.add("local.proj.bias", LOCAL, Tensor::zeros(&[1, e]))?;
        let patch_attention =
            AttentionBlock::new(store, rng, "local.patch_attention", LOCAL, e, cfg.attention_hidden, true)?;
        Ok(FeatureNet {
            cfg,
            global,
            saliency_w,
            saliency_b,
            local,
            local_proj_w,
            local_proj_b,
            patch_attention,
        })
    }

    /// Feature map `[C, H', W']` and its spatial max `[C]`.
    pub fn global_forward(&self, tape: &mut Tape, p: &Bound, image: &Grid) -> Result<(Var, Var)> {
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        if (image.height(), image.width()) != (h, w) {
            return Err(TensorError::Invalid {
                op: "global_forward",
                msg: format!("expected {h}x{w} image, got {}x{}", image.height(), image.width()),
            });
        }
        let x = tape.constant(grid_tensor(image));
        let fmap = run_stages(tape, p, &self.global, x)?;
        let s = tape.shape(fmap).to_vec();
        let flat = tape.reshape(fmap, &[s[0], s[1] * s[2]])?;
        let pooled = tape.max(flat, Some(1))?;
        Ok((fmap, pooled))
    }

    /// `sigmoid(1x1 conv)` of the feature map, shape `[1, H', W']`.
    pub fn saliency(&self, tape: &mut Tape, p: &Bound, fmap: Var) -> Result<Var> {
        let z = tape.conv2d(fmap, p.get(self.saliency_w), 1, 0)?;
        let z = tape.add(z, p.get(self.saliency_b))?;
        tape.sigmoid(z)
    }

    /// Patch embeddings pooled by gated attention: `h_local [E]` and the
    /// attention weights `[k, 1]`.
    pub fn local_forward(&self, tape: &mut Tape, p: &Bound, patches: &[Grid]) -> Result<(Var, Var)> {
        if patches.is_empty() {
            return Err(TensorError::Invalid {
                op: "local_forward",
                msg: "no patches".into(),
            });
        }
        let mut rows = Vec::with_capacity(patches.len());
        for patch in patches {
            let x = tape.constant(grid_tensor(patch));
            let f = run_stages(tape, p, &self.local, x)?;
            let s = tape.shape(f).to_vec();
            let flat = tape.reshape(f, &[s[0], s[1] * s[2]])?;
            let pooled = tape.mean(flat, Some(1))?;
            let pooled = tape.reshape(pooled, &[1, s[0]])?;
            let e = tape.matmul(pooled, p.get(self.local_proj_w))?;
            rows.push(tape.add(e, p.get(self.local_proj_b))?);
        }
        let h = tape.concat(&rows, 0)?;
        let a = self.patch_attention.weights(tape, p, h)?;
        Ok((weighted_sum(tape, a, h)?, a))
    }

    /// Full per-image pipeline. With `frozen` windows the retrieval step is
    /// skipped and those saliency-space windows are used instead.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: &Grid,
        frozen: Option<&[Rect]>,
    ) -> Result<FeatureBundle> {
        let (fmap, pooled) = self.global_forward(tape, p, image)?;
        let sal = self.saliency(tape, p, fmap)?;
        let (sh, sw) = (tape.shape(sal)[1], tape.shape(sal)[2]);
        let values = Grid::new(sh, sw, tape.value(sal).data().to_vec());
        let flat = tape.reshape(sal, &[sh * sw])?;
        let h_topt = tape.topk(flat, topt_count(self.cfg.t_fraction, sh * sw))?;

        let mut patches = match frozen {
            Some(windows) => windows
                .iter()
                .map(|w| self.candidate(image, &values, *w))
                .collect(),
            None => retrieve_roi(
                image,
                &values,
                self.cfg.k,
                self.cfg.window(),
                (self.cfg.patch_height, self.cfg.patch_width),
            )?,
        };
        let crops: Vec<Grid> = patches.iter().map(|c| c.crop.clone()).collect();
        let (h_local, att) = self.local_forward(tape, p, &crops)?;
        for (c, &a) in patches.iter_mut().zip(tape.value(att).data()) {
            c.attention = a;
        }
        let h_fusion = fusion(tape, pooled, h_local)?;
        Ok(FeatureBundle {
            h_topt,
            h_local,
            h_fusion,
            pooled_global: pooled,
            saliency_var: sal,
            saliency: SaliencyMap {
                values,
                source_shape: (image.height(), image.width()),
            },
            patches,
        })
    }

    fn candidate(&self, image: &Grid, saliency: &Grid, window: Rect) -> PatchCandidate {
        let mass = window_sum(saliency, &window);
        make_candidate(image, saliency, window, mass, (self.cfg.patch_height, self.cfg.patch_width))
    }
}

/// Concatenation, global part first.
pub fn fusion(tape: &mut Tape, pooled_global: Var, h_local: Var) -> Result<Var> {
    tape.concat(&[pooled_global, h_local], 0)
}

/// Top `t = max(1, round(t_fraction * cells))` saliency values, descending.
pub fn topt_features(tape: &mut Tape, saliency: Var, t_fraction: f64) -> Result<Var> {
    let n = tape.shape(saliency).iter().product();
    let flat = tape.reshape(saliency, &[n])?;
    tape.topk(flat, topt_count(t_fraction, n))
}

fn window_sum(g: &Grid, r: &Rect) -> f64 {
    let mut s = 0.0;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            s += g.get(y, x);
        }
    }
    s
}

/// Maps a saliency-space window to image space by the resolution ratio.
///
/// Zero-padded stride-2 stages centre output cell `i` on input position
/// `i * ratio`, so cell `i` covers `[(i - 1/2) * ratio, (i + 1/2) * ratio)`
/// rather than `[i * ratio, (i + 1) * ratio)`.
pub fn window_to_image(window: &Rect, saliency: (usize, usize), image: (usize, usize)) -> Rect {
    let (sh, sw) = saliency;
    let (ih, iw) = image;
    // edge `v` in half-cells: (2v - 1) * image / (2 * saliency)
    let lo = |v: usize, i: usize, s: usize| ((2 * v).saturating_sub(1) * i / (2 * s)).min(i.saturating_sub(1));
    let hi = |v: usize, i: usize, s: usize| ((2 * v).saturating_sub(1) * i).div_ceil(2 * s).min(i);
    let (x0, y0) = (lo(window.x0, iw, sw), lo(window.y0, ih, sh));
    let (x1, y1) = (hi(window.x1, iw, sw).max(x0 + 1), hi(window.y1, ih, sh).max(y0 + 1));
    Rect::new(x0, y0, x1, y1)
}

fn make_candidate(
    image: &Grid,
    saliency: &Grid,
    window: Rect,
    mass: f64,
    patch: (usize, usize),
) -> PatchCandidate {
    let bbox = window_to_image(
        &window,
        (saliency.height(), saliency.width()),
        (image.height(), image.width()),
    );
    let crop = image
        .crop(bbox.y0, bbox.x0, bbox.y1 - bbox.y0, bbox.x1 - bbox.x0)
        .resize_bilinear(patch.0, patch.1);
    PatchCandidate {
        crop,
        window,
        bbox,
        saliency_mass: mass,
        attention: 0.0,
    }
}

/// Greedy top-k window retrieval with `-inf` suppression of chosen windows.
///
/// When no fully unsuppressed window remains, the window with the most
/// unsuppressed cells (then the largest remaining mass) that has not been
/// chosen before is taken.
pub fn retrieve_roi(
    image: &Grid,
    saliency: &Grid,
    k: usize,
    window: (usize, usize),
    patch: (usize, usize),
) -> Result<Vec<PatchCandidate>> {
    let invalid = |msg: String| Err(TensorError::Invalid { op: "retrieve_roi", msg });
    if k < 1 {
        return invalid("k must be at least 1".into());
    }
    let (sh, sw) = (saliency.height(), saliency.width());
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || wh > sh || ww > sw {
        return invalid(format!("window {wh}x{ww} does not fit a {sh}x{sw} map"));
    }
    let (ny, nx) = (sh - wh + 1, sw - ww + 1);
    if k > ny * nx {
        return invalid(format!("k = {k} exceeds the {} window positions", ny * nx));
    }
    let mut work = saliency.clone();
    let mut taken = vec![false; ny * nx];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        // (unsuppressed cells, mass) compared lexicographically
        let mut best: Option<(usize, f64, usize)> = None;
        for pos in 0..ny * nx {
            if taken[pos] {
                continue;
            }
            let (y, x) = (pos / nx, pos % nx);
            let (mut live, mut mass) = (0, 0.0);
            for yy in y..y + wh {
                for xx in x..x + ww {
                    let v = work.get(yy, xx);
                    if v.is_finite() {
                        live += 1;
                        mass += v;
                    }
                }
            }
            let better = match best {
                None => true,
                Some((bl, bm, _)) => live > bl || (live == bl && mass > bm),
            };
            if better {
                best = Some((live, mass, pos));
            }
        }
        let (_, mass, pos) = best.expect("k bounded by window positions");
        taken[pos] = true;
        let (y, x) = (pos / nx, pos % nx);
        let win = Rect::new(x, y, x + ww, y + wh);
        for yy in y..y + wh {
            for xx in x..x + ww {
                work.set(yy, xx, f64::NEG_INFINITY);
            }
        }
        out.push(make_candidate(image, saliency, win, mass, patch));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> FeatureConfig {
        FeatureConfig {
            image_height: 16,
            image_width: 12,
            global: NetConfig::new(vec![3, 4], 4),
            local: NetConfig::new(vec![3, 4], 5),
            k: 2,
            patch_height: 8,
            patch_width: 8,
            attention_hidden: 6,
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn default_extents() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.saliency_extents(), Some((8, 6)));
        assert_eq!(cfg.t(), 1);
        assert_eq!(cfg.window(), (2, 2));
        assert_eq!(cfg.fusion_dim(), 64);
    }

    #[test]
    fn too_small_image_rejected() {
        let cfg = FeatureConfig {
            image_height: 0,
            ..FeatureConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_zero_bias_pools_to_zero() {
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), FeatureConfig::default())
            .unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (fmap, pooled) = net.global_forward(&mut tape, &p, &Grid::zeros(64, 48)).unwrap();
        assert_eq!(tape.shape(fmap), &[32, 8, 6]);
        assert!(tape.value(pooled).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_features_give_half_saliency() {
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), tiny()).unwrap();
        let id = store.id("global.saliency.weight").unwrap();
        store.get_mut(id).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let f = tape.constant(Tensor::zeros(&[4, 4, 3]));
        let s = net.saliency(&mut tape, &p, f).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn topt_orders_values() {
        let mut tape = Tape::new();
        let mut vals = vec![0.1; 12];
        vals[5] = 0.9;
        let s = tape.constant(Tensor::new(vec![1, 4, 3], vals).unwrap());
        let t = topt_features(&mut tape, s, 2.0 / 12.0).unwrap();
        assert_eq!(tape.value(t).data(), &[0.9, 0.1]);
        assert_eq!(topt_count(0.02, 48), 1);
    }

    #[test]
    fn single_peak_is_retrieved() {
        let image = Grid::from_fn(64, 48, |y, x| (y * 48 + x) as f64 / 3072.0);
        let mut sal = Grid::from_fn(8, 6, |_, _| 0.1);
        sal.set(5, 2, 0.95);
        let c = retrieve_roi(&image, &sal, 1, (2, 2), (16, 16)).unwrap();
        assert!(c[0].bbox.contains(40, 16));
        assert_eq!(c[0].crop.height(), 16);
    }

    #[test]
    fn windows_map_around_cell_centres() {
        let map = |w: Rect| window_to_image(&w, (8, 6), (64, 48));
        assert_eq!(map(Rect::new(2, 3, 3, 4)), Rect::new(12, 20, 20, 28));
        assert_eq!(map(Rect::new(0, 0, 1, 1)), Rect::new(0, 0, 4, 4));
        assert_eq!(map(Rect::new(5, 7, 6, 8)), Rect::new(36, 52, 44, 60));
        assert_eq!(map(Rect::new(0, 0, 6, 8)), Rect::new(0, 0, 44, 60));
        // non-integer ratio still stays in bounds
        let r = window_to_image(&Rect::new(4, 4, 5, 5), (5, 5), (17, 13));
        assert!(r.is_valid_within(17, 13));
    }

    #[test]
    fn uniform_saliency_greedy_order() {
        let image = Grid::zeros(16, 16);
        let sal = Grid::from_fn(4, 4, |_, _| 0.5);
        let c = retrieve_roi(&image, &sal, 2, (2, 2), (4, 4)).unwrap();
        assert_eq!(c[0].window, Rect::new(0, 0, 2, 2));
        assert_eq!(c[1].window, Rect::new(2, 0, 4, 2));
        assert!(retrieve_roi(&image, &sal, 0, (2, 2), (4, 4)).is_err());
    }

    #[test]
    fn retrieval_never_repeats_a_window() {
        let image = Grid::zeros(16, 12);
        let sal = Grid::from_fn(4, 3, |y, x| (y + 2 * x) as f64);
        let c = retrieve_roi(&image, &sal, 6, (2, 2), (4, 4)).unwrap();
        for i in 0..c.len() {
            assert!(c[i].bbox.is_valid_within(16, 12));
            for j in 0..i {
                assert_ne!(c[i].window, c[j].window);
            }
        }
    }

    #[test]
    fn single_patch_gets_full_attention() {
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), tiny()).unwrap();
        let patch = Grid::from_fn(8, 8, |y, x| ((y * 7 + x * 3) % 5) as f64 / 5.0);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (h, a) = net.local_forward(&mut tape, &p, &[patch.clone()]).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        let h1 = tape.value(h).clone();
        let (h3, a3) = net
            .local_forward(&mut tape, &p, &[patch.clone(), patch.clone(), patch])
            .unwrap();
        for &w in tape.value(a3).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        for (x, y) in h1.data().iter().zip(tape.value(h3).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_concatenates_global_first() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::vector((0..32).map(f64::from).collect()));
        let l = tape.constant(Tensor::zeros(&[32]));
        let f = fusion(&mut tape, g, l).unwrap();
        assert_eq!(tape.shape(f), &[64]);
        let head = tape.slice(f, 0, 0, 32).unwrap();
        assert_eq!(tape.value(head), tape.value(g));
        assert!(tape.value(f).data()[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_bundle_invariants() {
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(5), tiny()).unwrap();
        let image = Grid::from_fn(16, 12, |y, x| ((y * 5 + x * 11) % 13) as f64 / 13.0);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let b = net.forward(&mut tape, &p, &image, None).unwrap();
        let total: f64 = b.patches.iter().map(|c| c.attention).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let t = tape.value(b.h_topt).data();
        assert!(t.windows(2).all(|w| w[0] >= w[1]));
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(tape.shape(b.h_fusion), &[4 + 5]);
    }
}
