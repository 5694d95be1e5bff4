//! Two-level MIL case model: per-image feature extraction followed by
//! image-level pooling for each of the three feature types.

use rand::Rng;

use crate::casedata::{CaseRecord, Rect, Side};
use crate::featurenet::{FeatureBundle, FeatureConfig, FeatureNet};
use crate::milpool::attention::uniform;
use crate::milpool::{
    attention_weights, pool_es, pool_is, sidewise_pool, AttentionBlock, Operator, Paradigm, PoolingSpec,
    SideWiseBlock, IMAGE_ATTENTION, SIDE_ATTENTION, VIEW_ATTENTION,
};
use crate::tensor::{Bound, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub const HEADS: &str = "heads";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureType {
    TopT,
    Local,
    Fusion,
}

impl FeatureType {
    pub const ALL: [FeatureType; 3] = [FeatureType::TopT, FeatureType::Local, FeatureType::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            FeatureType::TopT => "topt",
            FeatureType::Local => "local",
            FeatureType::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub spec: PoolingSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            features: FeatureConfig::default(),
            spec: "es-att-side".parse().expect("valid spec"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

/// Case-level probabilities from the three feature types.
#[derive(Debug, Clone, Copy)]
pub struct CaseHeads {
    pub y_topt: Var,
    pub y_local: Var,
    pub y_fusion: Var,
}

impl CaseHeads {
    pub fn final_prediction(&self) -> Var {
        self.y_fusion
    }

    pub fn all(&self) -> [Var; 3] {
        [self.y_topt, self.y_local, self.y_fusion]
    }
}

/// Result of a case forward pass.
#[derive(Debug, Clone)]
pub struct CaseForward {
    pub heads: CaseHeads,
    pub bundles: Vec<FeatureBundle>,
    /// Image weights of the fusion pooling (uniform for mean/max).
    pub image_weights: Vec<f64>,
    /// Per-image fusion probabilities (instance-space specs only).
    pub image_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseModel {
    pub cfg: ModelConfig,
    pub net: FeatureNet,
    local_head: Linear,
    fusion_head: Linear,
    image_att: Vec<AttentionBlock>,
    side_att: Vec<SideWiseBlock>,
}

fn linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Linear> {
    let lim = (6.0 / (dim + 1) as f64).sqrt();
    Ok(Linear {
        w: store.add(&format!("{name}.weight"), HEADS, uniform(rng, &[dim, 1], lim))?,
        b: store.add(&format!("{name}.bias"), HEADS, Tensor::zeros(&[1, 1]))?,
    })
}

impl CaseModel {
    /// Registers all parameters in `store`. Pooling components are created
    /// only when the pooling spec uses them.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ModelConfig) -> Result<Self> {
        let net = FeatureNet::new(store, rng, cfg.features.clone())?;
        store.register_component(HEADS);
        let f = &cfg.features;
        let local_head = linear(store, rng, "heads.local", f.local.embed_dim)?;
        let fusion_head = linear(store, rng, "heads.fusion", f.fusion_dim())?;
        let dims = [f.t(), f.local.embed_dim, f.fusion_dim()];
        let hidden = f.attention_hidden;
        let mut image_att = Vec::new();
        let mut side_att = Vec::new();
        match cfg.spec.operator {
            Operator::Att | Operator::GatedAtt => {
                store.register_component(IMAGE_ATTENTION);
                let gated = cfg.spec.operator == Operator::GatedAtt;
                for (ft, &d) in FeatureType::ALL.iter().zip(&dims) {
                    let name = format!("image_attention.{}", ft.name());
                    image_att.push(AttentionBlock::new(store, rng, &name, IMAGE_ATTENTION, d, hidden, gated)?);
                }
            }
            Operator::SideAtt => {
                store.register_component(VIEW_ATTENTION);
                store.register_component(SIDE_ATTENTION);
                for (ft, &d) in FeatureType::ALL.iter().zip(&dims) {
                    let view = format!("view_attention.{}", ft.name());
                    let side = format!("side_attention.{}", ft.name());
                    side_att.push(SideWiseBlock {
                        view: AttentionBlock::new(store, rng, &view, VIEW_ATTENTION, d, hidden, false)?,
                        side: AttentionBlock::new(store, rng, &side, SIDE_ATTENTION, d, hidden, false)?,
                    });
                }
            }
            Operator::Mean | Operator::Max => {}
        }
        Ok(CaseModel {
            cfg,
            net,
            local_head,
            fusion_head,
            image_att,
            side_att,
        })
    }

    pub fn spec(&self) -> PoolingSpec {
        self.cfg.spec
    }

    /// Per-feature-type classifier `g` followed by a sigmoid; the top-t
    /// head is the plain mean of its input.
    pub fn head(&self, tape: &mut Tape, p: &Bound, ft: FeatureType, h: Var) -> Result<Var> {
        let lin = match ft {
            FeatureType::TopT => return tape.mean(h, None),
            FeatureType::Local => &self.local_head,
            FeatureType::Fusion => &self.fusion_head,
        };
        let d = tape.shape(h).iter().product();
        let row = tape.reshape(h, &[1, d])?;
        let z = tape.matmul(row, p.get(lin.w))?;
        let z = tape.add(z, p.get(lin.b))?;
        let y = tape.sigmoid(z)?;
        tape.reshape(y, &[])
    }

    fn pool_type(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ft: FeatureType,
        idx: usize,
        sides: &[Side],
        embeddings: &[Var],
    ) -> Result<(Var, Vec<f64>, Option<Vec<f64>>)> {
        let spec = self.cfg.spec;
        let m = embeddings.len();
        let uniform_w = vec![1.0 / m as f64; m];
        let probs = match spec.paradigm {
            Paradigm::Instance => {
                let mut probs = Vec::with_capacity(m);
                for &h in embeddings {
                    probs.push(self.head(tape, p, ft, h)?);
                }
                Some(probs)
            }
            Paradigm::Embedded => None,
        };
        let prob_values = probs
            .as_ref()
            .map(|ps| ps.iter().map(|&v| tape.value(v).item()).collect());
        let (y, weights) = match spec.operator {
            Operator::Mean | Operator::Max => {
                let y = match &probs {
                    Some(ps) => pool_is(tape, ps, spec.operator, None)?,
                    None => {
                        let h = pool_es(tape, embeddings, spec.operator, None)?;
                        self.head(tape, p, ft, h)?
                    }
                };
                (y, uniform_w)
            }
            Operator::Att | Operator::GatedAtt => {
                let a = attention_weights(tape, p, embeddings, &self.image_att[idx])?;
                let w = tape.value(a).data().to_vec();
                let y = match &probs {
                    Some(ps) => pool_is(tape, ps, spec.operator, Some(a))?,
                    None => {
                        let h = pool_es(tape, embeddings, spec.operator, Some(a))?;
                        self.head(tape, p, ft, h)?
                    }
                };
                (y, w)
            }
            Operator::SideAtt => {
                let out = sidewise_pool(tape, p, &self.side_att[idx], sides, embeddings, probs.as_deref())?;
                let y = match out.value {
                    Some(v) => v,
                    None => self.head(tape, p, ft, out.embedding)?,
                };
                (y, out.effective)
            }
        };
        Ok((y, weights, prob_values))
    }

    /// Pools per-image bundles into the three case heads.
    pub fn case_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        bundles: Vec<FeatureBundle>,
        sides: &[Side],
    ) -> Result<CaseForward> {
        if bundles.is_empty() {
            return Err(TensorError::Invalid {
                op: "case_forward",
                msg: "empty bag".into(),
            });
        }
        let mut ys = Vec::with_capacity(3);
        let mut fusion_weights = Vec::new();
        let mut fusion_probs = None;
        for (idx, ft) in FeatureType::ALL.into_iter().enumerate() {
            let emb: Vec<Var> = bundles
                .iter()
                .map(|b| match ft {
                    FeatureType::TopT => b.h_topt,
                    FeatureType::Local => b.h_local,
                    FeatureType::Fusion => b.h_fusion,
                })
                .collect();
            let (y, w, probs) = self.pool_type(tape, p, ft, idx, sides, &emb)?;
            ys.push(y);
            if ft == FeatureType::Fusion {
                fusion_weights = w;
                fusion_probs = probs;
            }
        }
        Ok(CaseForward {
            heads: CaseHeads {
                y_topt: ys[0],
                y_local: ys[1],
                y_fusion: ys[2],
            },
            bundles,
            image_weights: fusion_weights,
            image_probs: fusion_probs,
        })
    }

    /// Full forward pass over a case. `frozen` supplies per-image
    /// saliency-space ROI windows in place of retrieval.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        case: &CaseRecord,
        frozen: Option<&[Vec<Rect>]>,
    ) -> Result<CaseForward> {
        let mut bundles = Vec::with_capacity(case.images.len());
        for (i, img) in case.images.iter().enumerate() {
            let fz = frozen.map(|f| f[i].as_slice());
            bundles.push(self.net.forward(tape, p, &img.pixels, fz)?);
        }
        let sides: Vec<Side> = case.images.iter().map(|i| i.side).collect();
        self.case_forward(tape, p, bundles, &sides)
    }

    /// Forward pass without keeping the tape; returns the final probability
    /// and the recorded forward.
    pub fn predict(&self, store: &ParamStore, case: &CaseRecord) -> Result<(f64, CaseForward, Tape)> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let out = self.forward(&mut tape, &p, case, None)?;
        let y = tape.value(out.heads.y_fusion).item();
        Ok((y, out, tape))
    }
}

/// Saliency windows chosen by retrieval, for freezing in later passes.
pub fn frozen_windows(out: &CaseForward) -> Vec<Vec<Rect>> {
    out.bundles
        .iter()
        .map(|b| b.patches.iter().map(|c| c.window).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedata::{Grid, ImageRecord, Label, View};
    use crate::featurenet::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg(spec: &str) -> ModelConfig {
        ModelConfig {
            features: FeatureConfig {
                image_height: 16,
                image_width: 12,
                global: NetConfig::new(vec![3, 4], 4),
                local: NetConfig::new(vec![3, 4], 5),
                k: 2,
                patch_height: 8,
                patch_width: 8,
                attention_hidden: 6,
                t_fraction: 0.25,
                ..FeatureConfig::default()
            },
            spec: spec.parse().unwrap(),
        }
    }

    fn image(side: Side, view: View, seed: usize) -> ImageRecord {
        ImageRecord {
            side,
            view,
            pixels: Grid::from_fn(16, 12, |y, x| ((y * 7 + x * 5 + seed * 3) % 11) as f64 / 11.0),
            image_label: None,
            roi_boxes: vec![],
            source_path: String::new(),
        }
    }

    #[test]
    fn components_follow_spec() {
        let mut store = ParamStore::new();
        CaseModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), tiny_cfg("is-mean")).unwrap();
        assert_eq!(store.components(), ["global", "local", "heads"]);
        let mut store = ParamStore::new();
        CaseModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), tiny_cfg("es-att-side")).unwrap();
        assert!(store.components().iter().any(|c| c == SIDE_ATTENTION));
    }

    #[test]
    fn single_image_side_equals_image_attention() {
        let case = CaseRecord::new("c", vec![image(Side::L, View::CC, 1)], Label::Benign).unwrap();
        let mut outs = Vec::new();
        for spec in ["es-att-side", "es-att", "es-mean"] {
            let mut store = ParamStore::new();
            // identical seed: the shared per-image nets and heads get equal weights
            let model = CaseModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(9), tiny_cfg(spec)).unwrap();
            let (y, out, _) = model.predict(&store, &case).unwrap();
            assert_eq!(out.image_weights, vec![1.0]);
            outs.push(y);
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn is_mean_of_fusion_probabilities() {
        let images = vec![
            image(Side::L, View::CC, 1),
            image(Side::L, View::MLO, 2),
            image(Side::R, View::CC, 3),
        ];
        let case = CaseRecord::new("c", images, Label::Benign).unwrap();
        let mut store = ParamStore::new();
        let model = CaseModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), tiny_cfg("is-mean")).unwrap();
        let (y, out, _) = model.predict(&store, &case).unwrap();
        let probs = out.image_probs.unwrap();
        let mean = probs.iter().sum::<f64>() / 3.0;
        assert!((y - mean).abs() < 1e-15);
    }
}
