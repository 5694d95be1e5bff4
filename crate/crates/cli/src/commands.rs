use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use casemil::casedata::{
    generate_synthetic, load_manifest, preprocess_record, write_gray8, write_manifest, CaseDataError, CaseRecord, Grid,
};
use casemil::evaluation::{evaluate, predict_cases, CasePrediction, EvalConfig, MetricsReport};
use casemil::featurenet::{boxed_image, saliency_heatmap};
use casemil::model::{CaseModel, ModelConfig};
use casemil::tensor::{read_checkpoint, write_checkpoint, ParamStore};
use casemil::training::{train, TrainError, TrainOutcome};
use casemil::verify::{run_suite, GradFault, VerifyReport, OP_KINDS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{CheckpointMeta, ConfigError, DataSource, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Verify(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CaseDataError> for CliError {
    fn from(e: CaseDataError) -> Self {
        match e {
            CaseDataError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyTrainingSplit => CliError::Data(e.to_string()),
            TrainError::HeterogeneousBatch | TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::Tensor(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

fn load(path: &Path) -> Result<Vec<CaseRecord>, CliError> {
    load_manifest(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Every image must already be at the model's input extents.
pub fn check_extents(cases: &[CaseRecord], model: &ModelConfig) -> Result<(), CliError> {
    let (h, w) = (model.features.image_height, model.features.image_width);
    for case in cases {
        for img in &case.images {
            let (ih, iw) = (img.pixels.height(), img.pixels.width());
            if (ih, iw) != (h, w) {
                return Err(CliError::Data(format!(
                    "case {} image {}-{} is {ih}x{iw} but the model expects {h}x{w}; run `casemil preprocess` first",
                    case.case_id, img.side, img.view
                )));
            }
        }
    }
    Ok(())
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let splits = match &cfg.dataset {
        DataSource::Synthetic(s) => {
            let g = generate_synthetic(s)?;
            Splits {
                train: g.train,
                val: g.val,
                test: g.test,
            }
        }
        DataSource::Manifest { train, val, test } => Splits {
            train: load(train)?,
            val: val.as_deref().map(load).transpose()?.unwrap_or_default(),
            test: test.as_deref().map(load).transpose()?.unwrap_or_default(),
        },
    };
    for part in [&splits.train, &splits.val, &splits.test] {
        check_extents(part, &cfg.model)?;
    }
    Ok(splits)
}

/// Fresh model and parameters from the init seed.
pub fn build_model(model: &ModelConfig, init_seed: u64) -> Result<(CaseModel, ParamStore), CliError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let m = CaseModel::new(&mut store, &mut rng, model.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((m, store))
}

pub struct TrainedRun {
    pub model: CaseModel,
    pub outcome: TrainOutcome,
}

impl TrainedRun {
    pub fn predict(&self, cases: &[CaseRecord]) -> Result<Vec<CasePrediction>, CliError> {
        predict_cases(&self.model, &self.outcome.best, cases).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn report(&self, cases: &[CaseRecord], eval: &EvalConfig) -> Result<MetricsReport, CliError> {
        Ok(evaluate(&self.predict(cases)?, self.model.spec().paradigm, eval))
    }
}

pub fn train_run(cfg: &RunConfig, splits: &Splits, on_log: impl FnMut(&str)) -> Result<TrainedRun, CliError> {
    let (model, store) = build_model(&cfg.model, cfg.seeds.init)?;
    let outcome = train(&model, store, &splits.train, &splits.val, &cfg.training, on_log)?;
    Ok(TrainedRun { model, outcome })
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::Data(format!(
                "{} exists and is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Synthetic dataset as manifests plus 16-bit P5 images and a provenance
/// file holding the full resolved config.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let DataSource::Synthetic(syn) = &cfg.dataset else {
        return Err(CliError::Config("generate needs dataset.synthetic = true".into()));
    };
    ensure_empty_dir(out, force)?;
    let g = generate_synthetic(syn)?;
    let all: Vec<CaseRecord> = g.train.iter().chain(&g.val).chain(&g.test).cloned().collect();
    write_manifest(&all, &out.join("manifest.csv"))?;
    for (name, part) in [("train.csv", &g.train), ("val.csv", &g.val), ("test.csv", &g.test)] {
        write_manifest(part, &out.join(name))?;
    }
    let provenance = format!("# casemil generate, seed {}\n{}", syn.seed, cfg.to_text());
    write_file(&out.join("provenance.cfg"), &provenance)
}

/// Contour crop, right-side flip and resize of every image in a raw
/// manifest, with groundtruth boxes carried along.
pub fn cmd_preprocess(manifest: &Path, out: &Path, height: usize, width: usize, force: bool) -> Result<usize, CliError> {
    let src_dir = manifest.parent().unwrap_or(Path::new("."));
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if same(src_dir, out) || (src_dir.as_os_str().is_empty() && same(Path::new("."), out)) {
        return Err(CliError::Config("preprocess output directory must differ from the input directory".into()));
    }
    if height == 0 || width == 0 {
        return Err(CliError::Config("target extents must be positive".into()));
    }
    let cases = load(manifest)?;
    ensure_empty_dir(out, force)?;
    let mut done = Vec::with_capacity(cases.len());
    for case in &cases {
        let images = case
            .images
            .iter()
            .map(|img| {
                preprocess_record(img, height, width).map_err(|e| {
                    CliError::Data(format!("case {} image {}-{}: {e}", case.case_id, img.side, img.view))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        done.push(CaseRecord::new(case.case_id.clone(), images, case.case_label)?);
    }
    write_manifest(&done, &out.join("manifest.csv"))?;
    Ok(done.len())
}

/// Trains per the config and writes `best.ckpt` (+ `.index`, `.meta`),
/// `train.log` and the resolved `config.cfg` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, mut echo: impl FnMut(&str)) -> Result<TrainedRun, CliError> {
    let splits = load_splits(cfg)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let run = train_run(cfg, &splits, |l| echo(l))?;
    let ckpt = out.join("best.ckpt");
    write_checkpoint(&run.outcome.best, &ckpt).map_err(|e| io_err(&ckpt, e))?;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        best_epoch: run.outcome.best_epoch,
        init_seed: cfg.seeds.init,
    };
    write_file(&meta_path(&ckpt), &meta.to_text())?;
    let mut log = run.outcome.log.join("\n");
    let _ = write!(
        log,
        "\nbest_epoch={} epochs_run={} pos_weight={:.6}\n",
        run.outcome.best_epoch, run.outcome.epochs_run, run.outcome.pos_weight
    );
    write_file(&out.join("train.log"), &log)?;
    write_file(&out.join("config.cfg"), &cfg.to_text())?;
    Ok(run)
}

/// Loads a checkpoint with its sidecar and checks it against the model it
/// describes.
pub fn load_checkpoint(ckpt: &Path) -> Result<(CheckpointMeta, CaseModel, ParamStore), CliError> {
    let meta_file = meta_path(ckpt);
    let text = fs::read_to_string(&meta_file).map_err(|e| io_err(&meta_file, e))?;
    let meta = CheckpointMeta::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", meta_file.display())))?;
    let (model, fresh) = build_model(&meta.model, meta.init_seed)?;
    let store = read_checkpoint(ckpt).map_err(|e| io_err(ckpt, e))?;
    let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
        s.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    if layout(&fresh) != layout(&store) {
        return Err(CliError::Data(format!(
            "{}: parameters do not match the model in its sidecar",
            ckpt.display()
        )));
    }
    Ok((meta, model, store))
}

pub struct EvalRequest<'a> {
    pub ckpt: &'a Path,
    pub data: Option<&'a Path>,
    pub config: Option<&'a RunConfig>,
    pub visualize: usize,
    pub viz_dir: PathBuf,
}

pub fn cmd_eval(req: &EvalRequest) -> Result<MetricsReport, CliError> {
    let (meta, model, store) = load_checkpoint(req.ckpt)?;
    if let Some(cfg) = req.config {
        if cfg.model.spec != meta.model.spec {
            return Err(CliError::Config(format!(
                "checkpoint spec {} does not match config spec {}",
                meta.model.spec, cfg.model.spec
            )));
        }
        if cfg.model != meta.model {
            return Err(CliError::Config("config model section differs from the checkpoint's".into()));
        }
    }
    let cases = match (req.data, req.config) {
        (Some(path), _) => load(path)?,
        (None, Some(cfg)) => load_splits(cfg)?.test,
        (None, None) => return Err(CliError::Config("eval needs --data or --config".into())),
    };
    check_extents(&cases, &meta.model)?;
    let eval = req.config.map(|c| c.eval).unwrap_or_default();
    let preds = predict_cases(&model, &store, &cases).map_err(|e| CliError::Runtime(e.to_string()))?;
    if req.visualize > 0 {
        write_visualizations(&req.viz_dir, &cases, &preds, req.visualize)?;
    }
    Ok(evaluate(&preds, model.spec().paradigm, &eval))
}

/// Original, saliency heat map and boxed candidates side by side with a
/// two-pixel gap.
pub fn montage(original: &Grid, heat: &Grid, boxed: &Grid) -> Grid {
    const GAP: usize = 2;
    let (h, w) = (original.height(), original.width());
    let panels = [original, heat, boxed];
    Grid::from_fn(h, 3 * w + 2 * GAP, |y, x| {
        let (panel, off) = (x / (w + GAP), x % (w + GAP));
        if off < w {
            panels[panel].get(y, off)
        } else {
            0.0
        }
    })
}

fn write_visualizations(dir: &Path, cases: &[CaseRecord], preds: &[CasePrediction], n: usize) -> Result<(), CliError> {
    for (case, pred) in cases.iter().zip(preds).take(n) {
        let case_dir = dir.join(&case.case_id);
        fs::create_dir_all(&case_dir).map_err(|e| io_err(&case_dir, e))?;
        let mut side = String::new();
        let _ = writeln!(side, "case = {}", case.case_id);
        let _ = writeln!(side, "truth = {}", case.case_label);
        let _ = writeln!(side, "prob = {:.6}", pred.prob);
        for (img, p) in case.images.iter().zip(&pred.images) {
            let boxes: Vec<_> = p.patches.iter().map(|(r, _)| *r).collect();
            let heat = saliency_heatmap(&p.saliency);
            let grid = montage(&img.pixels, &heat, &boxed_image(&img.pixels, &boxes));
            let file = case_dir.join(format!("{}-{}.pgm", img.side, img.view));
            write_gray8(&file, &grid)?;
            let _ = writeln!(side, "image {}-{} a_m = {:.6}", img.side, img.view, p.weight);
            for (j, (r, a)) in p.patches.iter().enumerate() {
                let _ = writeln!(
                    side,
                    "  patch {j} box = {}:{}:{}:{} a_j = {a:.6}",
                    r.x0, r.y0, r.x1, r.y1
                );
            }
        }
        write_file(&case_dir.join("attention.txt"), &side)?;
    }
    Ok(())
}

/// Op names accepted by the fault hook.
pub fn fault_op(name: &str) -> Option<&'static str> {
    OP_KINDS.iter().copied().find(|&op| op == name)
}

/// Runs the gradient-check suite; a failing report is a verification error
/// carrying the report text.
pub fn cmd_gradcheck(trials: usize, fault: Option<GradFault>) -> Result<VerifyReport, CliError> {
    let report = run_suite(trials, fault).map_err(|e| CliError::Runtime(e.to_string()))?;
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::Verify(report.to_text()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Verify(String::new()).exit_code(), 4);
        assert_eq!(CliError::from(TrainError::EmptyTrainingSplit).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::HeterogeneousBatch).exit_code(), 2);
    }

    #[test]
    fn montage_layout() {
        let a = Grid::from_fn(2, 3, |_, _| 0.1);
        let b = Grid::from_fn(2, 3, |_, _| 0.2);
        let c = Grid::from_fn(2, 3, |_, _| 0.3);
        let m = montage(&a, &b, &c);
        assert_eq!((m.height(), m.width()), (2, 13));
        assert_eq!(m.get(0, 2), 0.1);
        assert_eq!(m.get(0, 3), 0.0);
        assert_eq!(m.get(1, 5), 0.2);
        assert_eq!(m.get(1, 12), 0.3);
    }

    #[test]
    fn fault_ops_are_known() {
        assert_eq!(fault_op("sigmoid"), Some("sigmoid"));
        assert_eq!(fault_op("nope"), None);
    }
}
