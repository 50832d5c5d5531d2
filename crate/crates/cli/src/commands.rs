//! Subcommand bodies. Each resolves its options, records inputs and writes
//! into its `--out` directory; the caller then writes the run manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use restitch_core::io::{create_dir, write_bytes, write_json};
use restitch_core::netgraph::forward_with_taps;
use restitch_core::planner::{
    enumerate_candidates, orient, select_stitch_point, sweep_candidates, write_candidates_csv,
    write_sweep_csv, Candidate,
};
use restitch_core::similarity::{build_similarity_matrix, heatmap_export, DatasetBatches};
use restitch_core::stitcher::{assemble, init_adapter, Calibration, InitMode};
use restitch_core::tape::{capture_tapes, read_tape_set, similarity_from_tapes, ActivationTape};
use restitch_core::trainer::{
    evaluate, finetune as run_finetune, gen_synthetic, load_dataset, save_dataset, train_base,
    SyntheticConfig, TrainReport,
};
use restitch_core::{
    Budget, DType, Dataset, Direction, Error, Metric, Network, NetworkSpec, Result, Scope,
    SimilarityMatrix, StitchPlan, StitchedModel, Tensor, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::Options;
use crate::run::Recorder;
use crate::{
    Capture, Cka, Command, Eval, Finetune, GenData, Plan, Report, Stitch, Sweep, TrainBase,
    TrainFlags,
};

const SPEC_FILE: &str = "spec.json";
const METRICS_FILE: &str = "metrics.json";
const SUMMARY_FILE: &str = "summary.json";
const EVAL_FILE: &str = "eval.json";
const DEFAULT_CALIB_SAMPLES: usize = 256;

struct Ctx {
    opts: Options,
    rec: Recorder,
    out: Option<PathBuf>,
}

impl Ctx {
    /// Resolves `--out`, creates it and marks it for the run manifest.
    fn out_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let dir: PathBuf = self.opts.require("out", flag)?;
        create_dir(&dir)?;
        self.out = Some(dir.clone());
        Ok(dir)
    }

    fn input<T>(&mut self, key: &str, flag: Option<T>) -> Result<PathBuf>
    where
        T: Into<PathBuf>,
    {
        let p: PathBuf = self.opts.require(key, flag.map(Into::into))?;
        self.rec.input(&p);
        Ok(p)
    }

    fn optional_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let p: Option<PathBuf> = self.opts.get(key, flag)?;
        if let Some(p) = &p {
            self.rec.input(p);
        }
        Ok(p)
    }

    fn parse<T: std::str::FromStr<Err = Error>>(
        &mut self,
        key: &str,
        flag: Option<String>,
        default: &str,
    ) -> Result<T> {
        self.opts.get_or(key, flag, default.to_string())?.parse()
    }

    fn train_config(&mut self, f: TrainFlags, scope: Scope) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self
                .opts
                .get_or("learning-rate", f.learning_rate, d.learning_rate)?,
            momentum: self.opts.get_or("momentum", f.momentum, d.momentum)?,
            weight_decay: self
                .opts
                .get_or("weight-decay", f.weight_decay, d.weight_decay)?,
            epochs: self.opts.get_or("epochs", f.epochs, d.epochs)?,
            batch_size: self.opts.get_or("batch-size", f.batch_size, d.batch_size)?,
            seed: self.opts.seed(f.seed)?,
            scope,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::TrainBase(_) => "train-base",
        Command::Capture(_) => "capture",
        Command::Cka(_) => "cka",
        Command::Plan(_) => "plan",
        Command::Stitch(_) => "stitch",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::Report(_) => "report",
        Command::Verify(_) => "verify",
    }
}

pub fn dispatch(cmd: Command, config: Option<&Path>) -> Result<()> {
    if let Command::Verify(v) = &cmd {
        let m = crate::run::verify(&v.dir)?;
        println!(
            "ok {} ({} outputs, status {})",
            v.dir.display(),
            m.outputs.len(),
            m.status
        );
        return Ok(());
    }
    let opts = Options::load(config)?;
    let mut ctx = Ctx {
        opts,
        rec: Recorder::new(command_name(&cmd), serde_json::Value::Null),
        out: None,
    };
    if let Some(c) = config {
        ctx.rec.input(c);
    }
    let outcome = match cmd {
        Command::GenData(a) => gen_data(a, &mut ctx),
        Command::TrainBase(a) => train_base_cmd(a, &mut ctx),
        Command::Capture(a) => capture(a, &mut ctx),
        Command::Cka(a) => cka(a, &mut ctx),
        Command::Plan(a) => plan(a, &mut ctx),
        Command::Stitch(a) => stitch(a, &mut ctx),
        Command::Finetune(a) => finetune(a, &mut ctx),
        Command::Eval(a) => eval(a, &mut ctx),
        Command::Sweep(a) => sweep(a, &mut ctx),
        Command::Report(a) => report(a, &mut ctx),
        Command::Verify(_) => unreachable!("handled above"),
    };
    if let Some(dir) = ctx.out.as_ref().filter(|d| d.is_dir()) {
        ctx.rec.config = ctx.opts.resolved();
        let written = ctx.rec.finish(dir, &outcome);
        if outcome.is_ok() {
            written?;
        } else if let Err(e) = written {
            log::warn!("could not write run manifest after failure: {e}");
        }
    }
    outcome
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("shape {s:?} must look like CxHxW")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!(
            "shape {s:?} must be three positive extents CxHxW"
        ))),
    }
}

fn parse_split(s: &str) -> Result<bool> {
    match s {
        "train" => Ok(false),
        "test" => Ok(true),
        _ => Err(Error::Config(format!(
            "unknown split {s:?}; expected train or test"
        ))),
    }
}

/// A spec file, or `spec.json` inside a model directory.
fn spec_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SPEC_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(dir: &Path, spec: Option<&Path>) -> Result<Network> {
    let spec = NetworkSpec::load(&spec_path(spec.unwrap_or(dir)))?;
    let (_, weights) = restitch_core::netgraph::load_weights(dir, None)?;
    Network::new(spec, weights)
}

fn gen_data(a: GenData, ctx: &mut Ctx) -> Result<()> {
    let seed = ctx.opts.seed(a.seed)?;
    let classes = ctx.opts.get_or("classes", a.classes, 4usize)?;
    let per_class = ctx.opts.get_or("per-class", a.per_class, 50usize)?;
    let shape = parse_shape(&ctx.opts.get_or("shape", a.shape, "3x8x8".to_string())?)?;
    let mut cfg = SyntheticConfig::new(seed, classes, per_class, shape);
    cfg.noise = ctx.opts.get_or("noise", a.noise, cfg.noise)?;
    let out = ctx.out_dir(a.out)?;
    let ds = gen_synthetic(&cfg)?;
    save_dataset(&ds, &out)
}

fn train_base_cmd(a: TrainBase, ctx: &mut Ctx) -> Result<()> {
    let spec_p = ctx.input("spec", a.spec)?;
    let data_p = ctx.input("data", a.data)?;
    let cfg = ctx.train_config(a.train, Scope::Full)?;
    let out = ctx.out_dir(a.out)?;
    let spec = NetworkSpec::load(&spec_p)?;
    let data = load_dataset(&data_p)?;
    let (weights, report) = train_base(&spec, &data, &cfg)?;
    restitch_core::netgraph::save_weights(&weights, &spec.model_id, &out)?;
    spec.save(&out.join(SPEC_FILE))?;
    write_json(&out.join(METRICS_FILE), &report)?;
    write_curves(&report, &out.join("curves.csv"))
}

fn write_curves(report: &TrainReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record(["epoch", "loss"]).map_err(err)?;
    w.write_record(["0".to_string(), format!("{:.8}", report.initial_loss)])
        .map_err(err)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), format!("{l:.8}")])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_bytes(path, &bytes)
}

fn capture(a: Capture, ctx: &mut Ctx) -> Result<()> {
    let weights = ctx.input("weights", a.weights)?;
    let spec = ctx.optional_input("spec", a.spec)?;
    let data_p = ctx.input("data", a.data)?;
    let test = parse_split(&ctx.opts.get_or("split", a.split, "train".to_string())?)?;
    let batch = ctx.opts.get_or("batch-size", a.batch_size, 64usize)?;
    let repeats = ctx.opts.get_or("repeats", a.repeats, 5usize)?;
    let seed = ctx.opts.seed(a.seed)?;
    let out = ctx.out_dir(a.out)?;
    let net = load_model(&weights, spec.as_deref())?;
    let data = load_dataset(&data_p)?;
    let mut source = DatasetBatches::new(&data, test, batch, seed);
    capture_tapes(&net, &mut source, repeats, &out)?;
    Ok(())
}

fn write_similarity(s: &SimilarityMatrix, out: &Path) -> Result<()> {
    s.save(&out.join("similarity.json"))?;
    heatmap_export(s, &out.join("heatmap.csv"))?;
    let script = format!(
        "set datafile separator ','\n\
         set title 'linear CKA: {} (rows) vs {} (columns)'\n\
         set cbrange [0:1]\n\
         set xtics rotate by -45\n\
         plot 'heatmap.csv' matrix rowheaders columnheaders with image notitle\n",
        s.front_model_id, s.back_model_id
    );
    write_bytes(&out.join("heatmap.gp"), script.as_bytes())
}

fn cka(a: Cka, ctx: &mut Ctx) -> Result<()> {
    if let Some(ft) = ctx.optional_input("front-tapes", a.front_tapes)? {
        let bt = ctx.input("back-tapes", a.back_tapes)?;
        let out = ctx.out_dir(a.out)?;
        let s = similarity_from_tapes(&read_tape_set(&ft)?, &read_tape_set(&bt)?)?;
        return write_similarity(&s, &out);
    }
    let fs = ctx.input("front-spec", a.front_spec)?;
    let bs = ctx.input("back-spec", a.back_spec)?;
    let fw = ctx.optional_input("front-weights", a.front_weights)?;
    let bw = ctx.optional_input("back-weights", a.back_weights)?;
    let data_p = ctx.input("data", a.data)?;
    let test = parse_split(&ctx.opts.get_or("split", a.split, "train".to_string())?)?;
    let batch = ctx.opts.get_or("batch-size", a.batch_size, 64usize)?;
    let repeats = ctx.opts.get_or("repeats", a.repeats, 5usize)?;
    let seed = ctx.opts.seed(a.seed)?;
    let out = ctx.out_dir(a.out)?;
    let front = load_model(fw.as_deref().unwrap_or(&fs), Some(&fs))?;
    let back = load_model(bw.as_deref().unwrap_or(&bs), Some(&bs))?;
    let data = load_dataset(&data_p)?;
    let mut source = DatasetBatches::new(&data, test, batch, seed);
    let s = build_similarity_matrix(&front, &back, &mut source, repeats)?;
    write_similarity(&s, &out)
}

/// Orients the two parents for `direction` and lines the matrix up with
/// them.
fn oriented<'a>(
    s: &SimilarityMatrix,
    a: &'a NetworkSpec,
    b: &'a NetworkSpec,
    direction: Direction,
) -> Result<(SimilarityMatrix, &'a NetworkSpec, &'a NetworkSpec)> {
    let (front, back) = orient(a, b, direction);
    if front.model_id != a.model_id {
        log::info!(
            "{direction} puts {} in front; swapping the given parents",
            front.model_id
        );
    }
    let s = if s.front_model_id == front.model_id && s.back_model_id == back.model_id {
        s.clone()
    } else if s.front_model_id == back.model_id && s.back_model_id == front.model_id {
        s.transpose()
    } else {
        return Err(Error::Contract(format!(
            "similarity matrix compares {} and {}, not {} and {}",
            s.front_model_id, s.back_model_id, front.model_id, back.model_id
        )));
    };
    Ok((s, front, back))
}

struct PlanInputs {
    s: SimilarityMatrix,
    a: NetworkSpec,
    b: NetworkSpec,
    a_path: PathBuf,
    b_path: PathBuf,
    metric: Metric,
    direction: Direction,
}

fn plan_inputs(
    ctx: &mut Ctx,
    similarity: Option<PathBuf>,
    front: Option<PathBuf>,
    back: Option<PathBuf>,
    metric: Option<String>,
    direction: Option<String>,
) -> Result<PlanInputs> {
    let sp = ctx.input("similarity", similarity)?;
    let a_path = ctx.input("front-spec", front)?;
    let b_path = ctx.input("back-spec", back)?;
    let metric = ctx.parse("metric", metric, Metric::Params.as_str())?;
    let direction = ctx.parse("direction", direction, Direction::SlowToFast.as_str())?;
    Ok(PlanInputs {
        s: SimilarityMatrix::load(&sp)?,
        a: NetworkSpec::load(&spec_path(&a_path))?,
        b: NetworkSpec::load(&spec_path(&b_path))?,
        a_path,
        b_path,
        metric,
        direction,
    })
}

fn plan(a: Plan, ctx: &mut Ctx) -> Result<()> {
    let p = plan_inputs(
        ctx,
        a.similarity,
        a.front_spec,
        a.back_spec,
        a.metric,
        a.direction,
    )?;
    let limit: u64 = ctx.opts.require("budget", a.budget)?;
    let out = ctx.out_dir(a.out)?;
    let budget = Budget::new(p.metric, limit)?;
    let (s, front, back) = oriented(&p.s, &p.a, &p.b, p.direction)?;
    let plan = select_stitch_point(&s, budget, front, back, p.direction)?;
    plan.save(&out.join("plan.json"))
}

/// Concatenates tensors along the leading axis.
fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("no calibration batches".into()))?;
    let tail = &first.shape()[1..];
    let mut n = 0;
    let mut data = Vec::new();
    for t in parts {
        if &t.shape()[1..] != tail {
            return Err(Error::Dimension(format!(
                "calibration batches disagree: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        n += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data, first.dtype())
}

fn tape_unit<'t>(t: &'t ActivationTape, index: usize, dir: &Path) -> Result<&'t Tensor> {
    t.manifest
        .units
        .iter()
        .position(|u| u.index == index)
        .map(|p| &t.activations[p])
        .ok_or_else(|| Error::Lookup(format!("tape set {} has no unit {index}", dir.display())))
}

/// Calibration pairs from front and back tape sets, repeats concatenated.
fn tape_calibration(
    plan: &StitchPlan,
    front_dir: &Path,
    back_dir: &Path,
) -> Result<(Tensor, Tensor)> {
    let ft = read_tape_set(front_dir)?;
    let bt = read_tape_set(back_dir)?;
    if ft.len() != bt.len() {
        return Err(Error::Pairing(format!(
            "{} front tapes but {} back tapes",
            ft.len(),
            bt.len()
        )));
    }
    for (f, b) in ft.iter().zip(&bt) {
        let (fm, bm) = (&f.manifest, &b.manifest);
        if fm.dataset_id != bm.dataset_id || fm.batch != bm.batch {
            return Err(Error::Pairing(format!(
                "front tape {}/seed{}/repeat{} has no back counterpart",
                fm.dataset_id, fm.batch.seed, fm.batch.repeat_index
            )));
        }
        for (m, id) in [(fm, &plan.front_model_id), (bm, &plan.back_model_id)] {
            if &m.model_id != id {
                return Err(Error::Contract(format!(
                    "tape of {} given where the plan needs {id}",
                    m.model_id
                )));
            }
        }
    }
    let (i, j) = (plan.stitch_point.i, plan.stitch_point.j);
    let fx: Vec<&Tensor> = ft
        .iter()
        .map(|t| tape_unit(t, i, front_dir))
        .collect::<Result<_>>()?;
    let bx: Vec<&Tensor> = bt
        .iter()
        .map(|t| tape_unit(t, j, back_dir))
        .collect::<Result<_>>()?;
    Ok((concat_batches(&fx)?, concat_batches(&bx)?))
}

/// Activations at the seam for the first `n` training images.
fn data_calibration(
    plan: &StitchPlan,
    front: &Network,
    back: &Network,
    data: &Dataset,
    n: usize,
) -> Result<(Tensor, Tensor)> {
    let idx: Vec<usize> = (0..n.min(data.train.len())).collect();
    let (x, _) = data.train.gather(&idx)?;
    let (i, j) = (plan.stitch_point.i, plan.stitch_point.j);
    let (_, mut fc) = forward_with_taps(&front.spec, &front.weights, &x, &BTreeSet::from([i]))?;
    let (_, mut bc) = forward_with_taps(&back.spec, &back.weights, &x, &BTreeSet::from([j]))?;
    Ok((
        fc.remove(&i).expect("tapped"),
        bc.remove(&j).expect("tapped"),
    ))
}

fn build_stitched(
    mut plan: StitchPlan,
    front: &Network,
    back: &Network,
    calibration: Option<(Tensor, Tensor)>,
    seed: u64,
) -> Result<StitchedModel> {
    let cal = calibration
        .as_ref()
        .map(|(f, b)| Calibration { front: f, back: b });
    let (weights, mode) = init_adapter(&plan.adapter, cal, seed, DType::F32)?;
    plan.adapter.init = mode;
    assemble(&plan, front, back, weights)
}

fn stitch(a: Stitch, ctx: &mut Ctx) -> Result<()> {
    let plan_p = ctx.input("plan", a.plan)?;
    let fw = ctx.input("front-weights", a.front_weights)?;
    let bw = ctx.input("back-weights", a.back_weights)?;
    let init: InitMode = ctx.parse("init", a.init, "least-squares")?;
    let tapes: Option<Vec<PathBuf>> = ctx.opts.get("calib-tapes", a.calib_tapes)?;
    let data_p = ctx.optional_input("data", a.data)?;
    let samples = ctx
        .opts
        .get_or("calib-samples", a.calib_samples, DEFAULT_CALIB_SAMPLES)?;
    let seed = ctx.opts.seed(a.seed)?;
    let out = ctx.out_dir(a.out)?;

    let plan = StitchPlan::load(&plan_p)?;
    let mut front = load_model(&fw, None)?;
    let mut back = load_model(&bw, None)?;
    if front.spec.model_id == plan.back_model_id && back.spec.model_id == plan.front_model_id {
        log::info!("parents given in back/front order; swapping to match the plan");
        std::mem::swap(&mut front, &mut back);
    }
    let calibration = match init {
        InitMode::Random => None,
        InitMode::LeastSquares => match (&tapes, &data_p) {
            (Some(t), _) => {
                if t.len() != 2 {
                    return Err(Error::Config(
                        "--calib-tapes takes FRONT and BACK tape sets".into(),
                    ));
                }
                t.iter().for_each(|p| ctx.rec.input(p));
                Some(tape_calibration(&plan, &t[0], &t[1])?)
            }
            (None, Some(d)) => {
                let data = load_dataset(d)?;
                Some(data_calibration(&plan, &front, &back, &data, samples)?)
            }
            (None, None) => {
                return Err(Error::Config(
                    "least-squares init needs --calib-tapes or --data".into(),
                ))
            }
        },
    };
    let model = build_stitched(plan, &front, &back, calibration, seed)?;
    model.save(&out)?;
    Ok(())
}

/// One row of the trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub front_model: String,
    pub back_model: String,
    pub stitch_point: Option<[usize; 2]>,
    pub scope: Option<Scope>,
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub trainable_params: u64,
}

fn stitched_summary(
    m: &StitchedModel,
    scope: Option<Scope>,
    trainable: u64,
    split: &str,
    samples: usize,
    accuracy: f64,
) -> Summary {
    let acc = &m.plan.accounting;
    Summary {
        front_model: m.plan.front_model_id.clone(),
        back_model: m.plan.back_model_id.clone(),
        stitch_point: Some([m.plan.stitch_point.i, m.plan.stitch_point.j]),
        scope,
        split: split.into(),
        samples,
        accuracy,
        params: acc.total,
        flops: acc.flops_total,
        trainable_params: trainable,
    }
}

fn finetune(a: Finetune, ctx: &mut Ctx) -> Result<()> {
    let model_p = ctx.input("model", a.model)?;
    let data_p = ctx.input("data", a.data)?;
    let scope: Scope = ctx.parse("scope", a.scope, Scope::StitchOnly.as_str())?;
    let cfg = ctx.train_config(a.train, scope)?;
    let out = ctx.out_dir(a.out)?;
    let mut model = StitchedModel::load(&model_p)?;
    let data = load_dataset(&data_p)?;
    let report = run_finetune(&mut model, &data, &cfg)?;
    model.save(&out)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    write_curves(&report, &out.join("curves.csv"))?;
    let summary = stitched_summary(
        &model,
        Some(scope),
        report.trainable_params,
        "test",
        data.test.len(),
        report.test_accuracy,
    );
    write_json(&out.join(SUMMARY_FILE), &summary)
}

fn eval(a: Eval, ctx: &mut Ctx) -> Result<()> {
    let model_p = ctx.input("model", a.model)?;
    let data_p = ctx.input("data", a.data)?;
    let split = ctx.opts.get_or("split", a.split, "test".to_string())?;
    let test = parse_split(&split)?;
    let out: Option<PathBuf> = ctx.opts.get("out", a.out)?;
    if out.is_some() {
        ctx.out_dir(out)?;
    }
    let data = load_dataset(&data_p)?;
    let part = if test { &data.test } else { &data.train };
    let summary = if model_p
        .join(restitch_core::stitcher::STITCHED_MANIFEST)
        .is_file()
    {
        let m = StitchedModel::load(&model_p)?;
        let acc = evaluate(&m, part)?;
        let trainable = m.plan.accounting.adapter_params;
        stitched_summary(&m, None, trainable, &split, part.len(), acc)
    } else {
        let net = load_model(&model_p, None)?;
        let acc = evaluate(&net, part)?;
        Summary {
            front_model: net.spec.model_id.clone(),
            back_model: "-".into(),
            stitch_point: None,
            scope: None,
            split: split.clone(),
            samples: part.len(),
            accuracy: acc,
            params: net.spec.total_params(),
            flops: net.spec.total_flops(),
            trainable_params: net.spec.total_params(),
        }
    };
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    if let Some(dir) = &ctx.out {
        write_json(&dir.join(EVAL_FILE), &summary)?;
    }
    Ok(())
}

fn sweep(a: Sweep, ctx: &mut Ctx) -> Result<()> {
    let p = plan_inputs(
        ctx,
        a.similarity,
        a.front_spec,
        a.back_spec,
        a.metric,
        a.direction,
    )?;
    let limits: Vec<u64> = ctx.opts.require("budgets", a.budgets)?;
    let train_each = ctx
        .opts
        .get_or("train-each", a.train_each.then_some(true), false)?;
    let trained = if train_each {
        let data_p = ctx.input("data", a.data)?;
        let scope: Scope = ctx.parse("scope", a.scope, Scope::StitchOnly.as_str())?;
        let samples = ctx
            .opts
            .get_or("calib-samples", a.calib_samples, DEFAULT_CALIB_SAMPLES)?;
        Some((data_p, ctx.train_config(a.train, scope)?, samples))
    } else {
        None
    };
    let out = ctx.out_dir(a.out)?;
    let budgets = limits
        .iter()
        .map(|&l| Budget::new(p.metric, l))
        .collect::<Result<Vec<_>>>()?;
    let (s, front, back) = oriented(&p.s, &p.a, &p.b, p.direction)?;
    let mut rows = sweep_candidates(&s, &budgets, front, back, p.direction)?;
    let cands = enumerate_candidates(&s, front, back)?;
    let mut accuracy: Vec<Option<f64>> = vec![None; cands.len()];

    if let Some((data_p, cfg, samples)) = trained {
        let dir_of = |spec: &NetworkSpec| {
            if spec.model_id == p.a.model_id {
                &p.a_path
            } else {
                &p.b_path
            }
        };
        let fnet = load_model(dir_of(front), None)?;
        let bnet = load_model(dir_of(back), None)?;
        let data = load_dataset(&data_p)?;
        for (n, c) in cands.iter().enumerate() {
            accuracy[n] = train_candidate(
                c,
                &s,
                front,
                back,
                &fnet,
                &bnet,
                &data,
                &cfg,
                samples,
                p.direction,
            )?;
            log::info!("candidate {} accuracy {:?}", c.point, accuracy[n]);
        }
        for r in &mut rows {
            if let Ok(plan) = &r.plan {
                r.accuracy = cands
                    .iter()
                    .position(|c| c.point == plan.stitch_point)
                    .and_then(|n| accuracy[n]);
            }
        }
    }
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    write_candidates_csv(&cands, &accuracy, &out.join("candidates.csv"))?;
    write_tradeoff(&rows, &out.join("tradeoff.csv"))
}

#[allow(clippy::too_many_arguments)]
fn train_candidate(
    c: &Candidate,
    s: &SimilarityMatrix,
    front: &NetworkSpec,
    back: &NetworkSpec,
    fnet: &Network,
    bnet: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    samples: usize,
    direction: Direction,
) -> Result<Option<f64>> {
    let Ok((adapter, accounting)) = &c.built else {
        return Ok(None);
    };
    let plan = StitchPlan {
        front_model_id: front.model_id.clone(),
        back_model_id: back.model_id.clone(),
        direction,
        stitch_point: c.point,
        similarity_at_point: s.get(c.point.i, c.point.j),
        adapter: adapter.clone(),
        accounting: *accounting,
        budget: Budget::new(Metric::Params, accounting.total)?,
    };
    let cal = data_calibration(&plan, fnet, bnet, data, samples)?;
    let mut model = build_stitched(plan, fnet, bnet, Some(cal), cfg.seed)?;
    let report = run_finetune(&mut model, data, cfg)?;
    Ok(Some(report.test_accuracy))
}

fn write_tradeoff(rows: &[restitch_core::planner::SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record([
        "front_model",
        "back_model",
        "budget",
        "i",
        "j",
        "accuracy",
        "params",
        "flops",
        "trainable_params",
    ])
    .map_err(err)?;
    for r in rows {
        let Ok(p) = &r.plan else { continue };
        w.write_record([
            p.front_model_id.clone(),
            p.back_model_id.clone(),
            r.budget.limit.to_string(),
            p.stitch_point.i.to_string(),
            p.stitch_point.j.to_string(),
            r.accuracy.map_or_else(String::new, |v| format!("{v:.6}")),
            p.accounting.total.to_string(),
            p.accounting.flops_total.to_string(),
            p.accounting.adapter_params.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_bytes(path, &bytes)
}

fn report(a: Report, ctx: &mut Ctx) -> Result<()> {
    let runs: Vec<PathBuf> = ctx.opts.require("runs", a.runs)?;
    runs.iter().for_each(|r| ctx.rec.input(r));
    let out = ctx.out_dir(a.out)?;
    let mut md = String::from(
        "| Front Model | Behind Model | Acc | Params | FLOPs | Trainable Params |\n\
         |---|---|---:|---:|---:|---:|\n",
    );
    for dir in &runs {
        let path = [SUMMARY_FILE, EVAL_FILE]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Format {
                path: dir.clone(),
                detail: format!(
                    "no {SUMMARY_FILE} or {EVAL_FILE}; pass finetune or eval --out directories"
                ),
            })?;
        let s: Summary = restitch_core::io::read_json(&path)?;
        md.push_str(&format!(
            "| {} | {} | {:.2} | {} | {} | {} |\n",
            s.front_model,
            s.back_model,
            100.0 * s.accuracy,
            s.params,
            s.flops,
            s.trainable_params
        ));
    }
    print!("{md}");
    write_bytes(&out.join("report.md"), md.as_bytes())
}
