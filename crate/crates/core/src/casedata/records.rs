use std::fmt;
use std::str::FromStr;

use super::{CaseDataError, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    CC,
    MLO,
    LM,
    ML,
    XCCL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LesionKind {
    Mass,
    Calcification,
}

impl View {
    pub const ALL: [View; 5] = [View::CC, View::MLO, View::LM, View::ML, View::XCCL];

    pub fn is_standard(self) -> bool {
        matches!(self, View::CC | View::MLO)
    }
}

impl Label {
    pub fn from_bool(malignant: bool) -> Label {
        if malignant {
            Label::Malignant
        } else {
            Label::Benign
        }
    }

    pub fn is_malignant(self) -> bool {
        self == Label::Malignant
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

macro_rules! token_enum {
    ($ty:ty, $what:literal, $($variant:path => $tok:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $tok),+ })
            }
        }

        impl FromStr for $ty {
            type Err = CaseDataError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($tok => Ok($variant),)+
                    other => Err(CaseDataError::Token { what: $what, token: other.to_string() }),
                }
            }
        }
    };
}

token_enum!(Side, "side", Side::L => "L", Side::R => "R");
token_enum!(View, "view", View::CC => "CC", View::MLO => "MLO", View::LM => "LM", View::ML => "ML", View::XCCL => "XCCL");
token_enum!(Label, "label", Label::Benign => "benign", Label::Malignant => "malignant");
token_enum!(LesionKind, "lesion kind", LesionKind::Mass => "mass", LesionKind::Calcification => "calcification");

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
        Rect { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn intersection(&self, other: &Rect) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn is_valid_within(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Groundtruth lesion region. Used for evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoiBox {
    pub rect: Rect,
    pub kind: LesionKind,
    pub label: Label,
}

impl fmt::Display for RoiBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.rect;
        write!(f, "{}:{}:{}:{}:{}:{}", r.x0, r.y0, r.x1, r.y1, self.kind, self.label)
    }
}

impl FromStr for RoiBox {
    type Err = CaseDataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || CaseDataError::Token {
            what: "roi box",
            token: s.to_string(),
        };
        if parts.len() != 6 {
            return Err(bad());
        }
        let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let rect = Rect::new(n(0)?, n(1)?, n(2)?, n(3)?);
        if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
            return Err(bad());
        }
        Ok(RoiBox {
            rect,
            kind: parts[4].parse()?,
            label: parts[5].parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub side: Side,
    pub view: View,
    pub pixels: Grid,
    pub image_label: Option<Label>,
    pub roi_boxes: Vec<RoiBox>,
    pub source_path: String,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<(), CaseDataError> {
        if self.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CaseDataError::Invariant(format!(
                "{}: pixel values outside [0,1]",
                self.source_path
            )));
        }
        for b in &self.roi_boxes {
            if !b.rect.is_valid_within(self.pixels.height(), self.pixels.width()) {
                return Err(CaseDataError::Invariant(format!(
                    "{}: roi box {b} outside {}x{} image",
                    self.source_path,
                    self.pixels.height(),
                    self.pixels.width()
                )));
            }
        }
        Ok(())
    }

    pub fn has_malignant_roi(&self) -> bool {
        self.roi_boxes.iter().any(|b| b.label.is_malignant())
    }
}

/// One exam: a bag of images with a single case label.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub images: Vec<ImageRecord>,
    pub case_label: Label,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        images: Vec<ImageRecord>,
        case_label: Label,
    ) -> Result<Self, CaseDataError> {
        let case = CaseRecord {
            case_id: case_id.into(),
            images,
            case_label,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<(), CaseDataError> {
        if self.images.is_empty() {
            return Err(CaseDataError::Invariant(format!(
                "case {} has no images",
                self.case_id
            )));
        }
        for (i, a) in self.images.iter().enumerate() {
            if self.images[..i]
                .iter()
                .any(|b| (a.side, a.view) == (b.side, b.view))
            {
                return Err(CaseDataError::DuplicateImage {
                    case_id: self.case_id.clone(),
                    side: a.side,
                    view: a.view,
                });
            }
            a.validate()?;
        }
        let labels: Option<Vec<Label>> = self.images.iter().map(|i| i.image_label).collect();
        if let Some(labels) = labels {
            let any_malignant = labels.iter().any(|l| l.is_malignant());
            if any_malignant != self.case_label.is_malignant() {
                return Err(CaseDataError::Invariant(format!(
                    "case {} labelled {} but image labels say {}",
                    self.case_id,
                    self.case_label,
                    Label::from_bool(any_malignant)
                )));
            }
        }
        Ok(())
    }

    /// Sorted (side, view) multiset identifying the case's image combination.
    pub fn view_key(&self) -> Vec<(Side, View)> {
        let mut key: Vec<_> = self.images.iter().map(|i| (i.side, i.view)).collect();
        key.sort();
        key
    }

    pub fn side_count(&self, side: Side) -> usize {
        self.images.iter().filter(|i| i.side == side).count()
    }
}
