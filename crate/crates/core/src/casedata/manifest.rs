//! CSV manifest: one row per image.
//!
//! `case_id,side,view,path,case_label,image_label,roi_boxes`, where
//! `roi_boxes` is a `;`-separated list of `x0:y0:x1:y1:kind:label` and the
//! last two columns may be empty or absent.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_gray, write_gray16, CaseDataError, CaseRecord, ImageRecord, Label, RoiBox};

pub const MANIFEST_HEADER: [&str; 7] = [
    "case_id",
    "side",
    "view",
    "path",
    "case_label",
    "image_label",
    "roi_boxes",
];

fn parse_boxes(cell: &str) -> Result<Vec<RoiBox>, CaseDataError> {
    cell.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<CaseRecord>, CaseDataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &'static str| {
        column(name).ok_or_else(|| CaseDataError::Manifest {
            line: 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let (c_case, c_side, c_view, c_path, c_label) = (
        required("case_id")?,
        required("side")?,
        required("view")?,
        required("path")?,
        required("case_label")?,
    );
    let (c_image_label, c_boxes) = (column("image_label"), column("roi_boxes"));

    let mut order: Vec<String> = Vec::new();
    let mut cases: HashMap<String, (Label, Vec<ImageRecord>)> = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let at = |e: CaseDataError| CaseDataError::Manifest {
            line,
            msg: e.to_string(),
        };
        let cell = |c: usize| row.get(c).unwrap_or("");
        let opt_cell = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("");

        let case_id = cell(c_case).to_string();
        if case_id.is_empty() {
            return Err(CaseDataError::Manifest {
                line,
                msg: "empty case_id".into(),
            });
        }
        let side = cell(c_side).parse().map_err(at)?;
        let view = cell(c_view).parse().map_err(at)?;
        let case_label: Label = cell(c_label).parse().map_err(at)?;
        let image_label = match opt_cell(c_image_label) {
            "" => None,
            s => Some(s.parse::<Label>().map_err(at)?),
        };
        let roi_boxes = parse_boxes(opt_cell(c_boxes)).map_err(at)?;
        let source_path = cell(c_path).to_string();

        let entry = cases.entry(case_id.clone()).or_insert_with(|| {
            order.push(case_id.clone());
            (case_label, Vec::new())
        });
        if entry.0 != case_label {
            return Err(CaseDataError::Manifest {
                line,
                msg: format!("case {case_id} has conflicting case labels"),
            });
        }
        if entry.1.iter().any(|i| (i.side, i.view) == (side, view)) {
            return Err(CaseDataError::Manifest {
                line,
                msg: format!("duplicate image {case_id} {side}-{view}"),
            });
        }
        let pixels = read_gray(&base.join(&source_path)).map_err(at)?;
        entry.1.push(ImageRecord {
            side,
            view,
            pixels,
            image_label,
            roi_boxes,
            source_path,
        });
    }

    order
        .into_iter()
        .map(|id| {
            let (label, images) = cases.remove(&id).expect("case recorded");
            CaseRecord::new(id, images, label)
        })
        .collect()
}

fn image_path_for(case: &CaseRecord, image: &ImageRecord) -> String {
    let rel = Path::new(&image.source_path);
    if !image.source_path.is_empty() && rel.is_relative() {
        image.source_path.clone()
    } else {
        format!("images/{}_{}_{}.pgm", case.case_id, image.side, image.view)
    }
}

/// Writes cases as a manifest at `manifest` plus 16-bit PGM images relative
/// to it. Pixels are quantized to 16 bits.
pub fn write_manifest(cases: &[CaseRecord], manifest: &Path) -> Result<(), CaseDataError> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut writer = csv::Writer::from_path(manifest)?;
    writer.write_record(MANIFEST_HEADER)?;
    for case in cases {
        for image in &case.images {
            let rel = image_path_for(case, image);
            let full = base.join(&rel);
            if let Some(dir) = full.parent() {
                fs::create_dir_all(dir)?;
            }
            write_gray16(&full, &image.pixels)?;
            let boxes: Vec<String> = image.roi_boxes.iter().map(ToString::to_string).collect();
            writer.write_record([
                case.case_id.as_str(),
                &image.side.to_string(),
                &image.view.to_string(),
                &rel,
                &case.case_label.to_string(),
                &image.image_label.map(|l| l.to_string()).unwrap_or_default(),
                &boxes.join(";"),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedata::{case_group_of, Grid, SideLayout};

    fn write_image(dir: &Path, name: &str) {
        let g = Grid::from_fn(4, 3, |y, x| (y + x) as f64 / 5.0);
        fs::create_dir_all(dir.join("img")).unwrap();
        write_gray16(&dir.join("img").join(name), &g).unwrap();
    }

    #[test]
    fn rows_assemble_into_cases() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.pgm");
        write_image(dir.path(), "b.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "case_id,side,view,path,case_label,image_label,roi_boxes\n\
             c1,L,CC,img/a.pgm,benign,,\n\
             c1,L,MLO,img/b.pgm,benign,benign,0:0:2:2:mass:benign\n",
        )
        .unwrap();
        let cases = load_manifest(&m).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].images.len(), 2);
        assert_eq!(cases[0].images[0].image_label, None);
        assert!(cases[0].images[0].roi_boxes.is_empty());
        assert_eq!(cases[0].images[1].roi_boxes.len(), 1);
        assert_eq!(case_group_of(&cases[0]).layout, SideLayout::OneSideMany);
    }

    #[test]
    fn optional_columns_may_be_absent() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "case_id,side,view,path,case_label\nc1,R,MLO,img/a.pgm,malignant\n",
        )
        .unwrap();
        let cases = load_manifest(&m).unwrap();
        assert_eq!(cases[0].case_label, Label::Malignant);
    }

    #[test]
    fn label_invariant_violation_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "case_id,side,view,path,case_label,image_label,roi_boxes\n\
             c1,L,CC,img/a.pgm,malignant,benign,\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&m),
            Err(CaseDataError::Invariant(_))
        ));
    }

    #[test]
    fn unknown_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "case_id,side,view,path,case_label,image_label,roi_boxes\n\
             c1,L,CC,img/a.pgm,benign,,\n\
             c1,L,AX,img/a.pgm,benign,,\n",
        )
        .unwrap();
        match load_manifest(&m) {
            Err(CaseDataError::Manifest { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("AX"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_side_view_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "case_id,side,view,path,case_label,image_label,roi_boxes\n\
             c1,L,CC,img/a.pgm,benign,,\n\
             c1,L,CC,img/a.pgm,benign,,\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&m),
            Err(CaseDataError::Manifest { line: 3, .. })
        ));
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());
        fs::write(&m, MANIFEST_HEADER.join(",") + "\n").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());
    }
}
