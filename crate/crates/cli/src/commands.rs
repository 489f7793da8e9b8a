use std::fs;
use std::path::{Path, PathBuf};

use episeg::baselines::{
    siamese_train, train_base_classifier, BaseFeatureNet, BaseNetConfig, FineTune, FineTuneConfig, LogReg,
    LogRegOptions, Nn1, SiameseConfig, SiameseMatcher,
};
use episeg::dataset::{
    benchmark_set, build_folds, episodes_from_manifest, generate_synthetic, load_dataset_root, manifest_text,
    remap_to_fold, save_dataset, Episode, FoldSpec, SegDataset, SyntheticConfig,
};
use episeg::metrics::{run_benchmark, time_report, BenchmarkInfo};
use episeg::model::TwoBranchModel;
use episeg::predictor::{ConstantPredictor, OraclePredictor, Predictor};
use episeg::training::{TrainConfig, TrainSession};
use episeg::Error;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, seed_value, write_resolved, Overrides};
use crate::{Common, EvalArgs, Failure, GenArgs, TimeArgs, TrainArgs};

/// Predictor names accepted by `eval`.
pub const EVAL_PREDICTORS: [&str; 8] = [
    "ours",
    "nn1",
    "logreg",
    "finetune",
    "siamese",
    "all-foreground",
    "all-background",
    "oracle",
];

fn runtime(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| runtime(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn seed_flag(flags: &mut Overrides, common: &Common, keys: &[&str]) -> Result<(), Failure> {
    if let Some(seed) = common.seed {
        let v = seed_value(seed)?;
        for k in keys {
            flags.put(k, v.clone());
        }
    }
    Ok(())
}

fn path_value(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Loads the corpus, reporting rejected pairs on stderr.
fn load(data: Option<&Path>) -> Result<SegDataset, Failure> {
    let data = data.ok_or_else(|| Failure::Usage("no dataset given (use --data or set `data`)".into()))?;
    if !data.is_dir() {
        return Err(Failure::Runtime(format!("dataset directory {} does not exist", data.display())));
    }
    let loaded = load_dataset_root(data)?;
    for r in &loaded.rejected {
        eprintln!("skipped {}: {}", r.id, r.reason);
    }
    Ok(loaded.dataset)
}

fn fold_spec(ds: &SegDataset, fold: usize, fold_size: usize) -> Result<FoldSpec, Failure> {
    let ids = ds.catalog().ids();
    let expected: Vec<u8> = (1..=ids.len() as u8).collect();
    if ids.iter().copied().collect::<Vec<_>>() != expected {
        return Err(Failure::Usage("catalog ids must be 1..=N for fold construction".into()));
    }
    build_folds(ids.len(), fold_size, fold).map_err(|e| Failure::Usage(format!("build_folds: {e}")))
}

/// Common side length of the corpus images.
fn image_side(ds: &SegDataset) -> Result<usize, Failure> {
    let (w, h) = ds.sample(0).image.dimensions();
    if w != h || ds.samples().iter().any(|s| s.image.dimensions() != (w, h)) {
        return Err(Failure::Runtime("all images must share one square size".into()));
    }
    Ok(w as usize)
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenRun {
    seed: u64,
    synthetic: SyntheticConfig,
}

impl Default for GenRun {
    fn default() -> Self {
        GenRun {
            seed: 7,
            synthetic: SyntheticConfig::default(),
        }
    }
}

pub fn gen(args: GenArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags.put_opt("synthetic.num_classes", args.classes.map(|v| v as i64));
    flags.put_opt("synthetic.num_images", args.images.map(|v| v as i64));
    flags.put_opt("synthetic.image_size", args.size.map(|v| v as i64));
    seed_flag(&mut flags, &args.common, &["seed"])?;
    let run: GenRun = resolve(args.common.config.as_deref(), &["seed"], &args.common.sets, flags)?;
    run.synthetic.validate()?;
    let ds = generate_synthetic(&run.synthetic, run.seed)?;
    create_dir(&args.out)?;
    save_dataset(&ds, &args.out)?;
    write_resolved(&run, &args.out.join("gen.toml"))?;

    let size = run.synthetic.image_size;
    println!("{} images of {size}x{size} (seed {}) written to {}", ds.len(), run.seed, args.out.display());
    println!("{:>4}  {:<18} {:>8}", "id", "class", "images");
    for (id, name) in ds.catalog().ids().iter().map(|&id| (id, ds.catalog().name(id).unwrap_or("?"))) {
        println!("{id:>4}  {name:<18} {:>8}", ds.carriers(id).len());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRun {
    data: Option<PathBuf>,
    kind: String,
    fold: usize,
    fold_size: usize,
    train: TrainConfig,
    base: BaseNetConfig,
    siamese: SiameseConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: None,
            kind: "ours".into(),
            fold: 0,
            fold_size: 2,
            train: TrainConfig::default(),
            base: BaseNetConfig::default(),
            siamese: SiameseConfig::default(),
        }
    }
}

const TRAIN_SEEDS: [&str; 3] = ["train.seed", "base.seed", "siamese.seed"];

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags.put_opt("data", args.data.as_deref().map(path_value));
    flags.put_opt("kind", args.kind.clone());
    flags.put_opt("fold", args.fold.map(|v| v as i64));
    if let Some(it) = args.iterations {
        for k in ["train.iterations", "base.iterations", "siamese.iterations"] {
            flags.put(k, it as i64);
        }
    }
    seed_flag(&mut flags, &args.common, &TRAIN_SEEDS)?;
    let mut run: TrainRun = resolve(args.common.config.as_deref(), &TRAIN_SEEDS, &args.common.sets, flags)?;
    if !["ours", "base", "siamese"].contains(&run.kind.as_str()) {
        return Err(Failure::Usage(format!(
            "unknown kind `{}`; expected one of ours, base, siamese",
            run.kind
        )));
    }

    let ds = load(run.data.as_deref())?;
    let spec = fold_spec(&ds, run.fold, run.fold_size)?;
    let side = image_side(&ds)?;
    run.train.model.image_size = side;
    run.base.image_size = side;
    run.siamese.image_size = side;
    let ckpt = args.out.join(format!("{}.ckpt", if run.kind == "ours" { "model" } else { run.kind.as_str() }));
    run.train.checkpoint_path = Some(ckpt.clone());
    run.train.validate()?;
    run.base.validate()?;
    run.siamese.validate()?;
    let train_ds = remap_to_fold(&ds, &spec.train_labels)?;

    create_dir(&args.out)?;
    write_resolved(&run, &args.out.join("train.toml"))?;
    match run.kind.as_str() {
        "ours" => {
            let model = TwoBranchModel::new(run.train.model_config())?;
            let mut session = TrainSession::new(model, &train_ds, run.train.clone())?;
            let outcome = session.run(run.train.iterations);
            session.log().write_csv(&args.out.join("train_log.csv"))?;
            if let Err(e) = outcome {
                if matches!(e, Error::Diverged { .. }) {
                    eprintln!("last validated parameters are kept in {}", ckpt.display());
                }
                return Err(e.into());
            }
            session.save_checkpoint(&ckpt)?;
            let last = session.log().validations().last().copied();
            println!(
                "trained {} iterations on fold {} ({} images); final loss {:.4}",
                session.iteration(),
                run.fold,
                train_ds.len(),
                session.log().losses().last().copied().unwrap_or(f64::NAN)
            );
            if let Some((it, v)) = last {
                println!("validation meanIoU {v:.4} at iteration {it}");
            }
        }
        "base" => {
            let net = train_base_classifier(&train_ds, &spec, &run.base)?;
            net.save(&ckpt)?;
            println!("base classifier trained for {} iterations", run.base.iterations);
        }
        _ => {
            let m = siamese_train(&train_ds, &spec, &run.siamese)?;
            m.save(&ckpt)?;
            println!("siamese matcher trained for {} iterations", run.siamese.iterations);
        }
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalRun {
    data: Option<PathBuf>,
    fold: usize,
    fold_size: usize,
    predictor: String,
    model: Option<PathBuf>,
    k: usize,
    n: usize,
    seed: u64,
    threads: usize,
    manifest: Option<PathBuf>,
    logreg: LogRegOptions,
    finetune: FineTuneConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            data: None,
            fold: 0,
            fold_size: 2,
            predictor: "ours".into(),
            model: None,
            k: 1,
            n: 200,
            seed: 7,
            threads: 1,
            manifest: None,
            logreg: LogRegOptions::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

/// Checkpoints a predictor needs, by name.
enum Loaded {
    Ours(TwoBranchModel),
    Base(BaseFeatureNet),
    Siamese(SiameseMatcher),
    None,
}

fn load_for(name: &str, model: Option<&Path>) -> Result<Loaded, Failure> {
    let need = |what: &str| {
        model.ok_or_else(|| Failure::Usage(format!("predictor `{name}` requires {what} (--model PATH)")))
    };
    Ok(match name {
        "ours" => Loaded::Ours(TwoBranchModel::load(need("a trained model checkpoint")?)?),
        "nn1" | "logreg" | "finetune" => Loaded::Base(BaseFeatureNet::load(need("a trained base net checkpoint")?)?),
        "siamese" => Loaded::Siamese(SiameseMatcher::load(need("a trained siamese checkpoint")?)?),
        _ => Loaded::None,
    })
}

fn with_predictor<T>(
    name: &str,
    loaded: &Loaded,
    logreg: LogRegOptions,
    finetune: FineTuneConfig,
    f: impl FnOnce(&dyn Predictor) -> T,
) -> T {
    match (name, loaded) {
        (_, Loaded::Ours(m)) => f(m),
        (_, Loaded::Siamese(m)) => f(m),
        ("nn1", Loaded::Base(net)) => f(&Nn1 { net }),
        ("logreg", Loaded::Base(net)) => f(&LogReg { net, options: logreg }),
        (_, Loaded::Base(net)) => f(&FineTune { net, config: finetune }),
        ("all-foreground", _) => f(&ConstantPredictor { foreground: true }),
        ("all-background", _) => f(&ConstantPredictor { foreground: false }),
        _ => f(&OraclePredictor),
    }
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags.put_opt("data", args.data.as_deref().map(path_value));
    flags.put_opt("fold", args.fold.map(|v| v as i64));
    flags.put_opt("model", args.model.as_deref().map(path_value));
    flags.put_opt("k", args.k.map(|v| v as i64));
    flags.put_opt("n", args.n.map(|v| v as i64));
    flags.put_opt("threads", args.threads.map(|v| v as i64));
    flags.put_opt("manifest", args.manifest.as_deref().map(path_value));
    match (&args.oracle, &args.baseline) {
        (Some(_), Some(_)) => return Err(Failure::Usage("--oracle and --baseline are exclusive".into())),
        (Some(o), None) if o == "gt" => flags.put("predictor", "oracle"),
        (Some(o), None) => return Err(Failure::Usage(format!("unknown oracle `{o}`; the only oracle is `gt`"))),
        (None, Some(b)) => flags.put("predictor", b.clone()),
        (None, None) => {}
    }
    seed_flag(&mut flags, &args.common, &["seed"])?;
    let run: EvalRun = resolve(args.common.config.as_deref(), &["seed"], &args.common.sets, flags)?;
    if !EVAL_PREDICTORS.contains(&run.predictor.as_str()) {
        return Err(Failure::Usage(format!(
            "unknown predictor `{}`; valid names: {}",
            run.predictor,
            EVAL_PREDICTORS.join(", ")
        )));
    }
    if run.k == 0 || run.threads == 0 {
        return Err(Failure::Usage("--k and --threads must be at least 1".into()));
    }
    let loaded = load_for(&run.predictor, run.model.as_deref())?;

    let ds = load(run.data.as_deref())?;
    let spec = fold_spec(&ds, run.fold, run.fold_size)?;
    let test = remap_to_fold(&ds, &spec.test_labels)?;
    let episodes = match &run.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
            let eps = episodes_from_manifest(&test, &text)?;
            if let Some(e) = eps.iter().find(|e| e.k() != run.k) {
                return Err(Failure::Usage(format!("manifest has a {}-shot episode, expected k={}", e.k(), run.k)));
            }
            eps
        }
        None => benchmark_set(&test, &spec, run.n, run.k, run.seed)?,
    };
    if episodes.is_empty() {
        return Err(Failure::Usage("benchmark is empty (n = 0)".into()));
    }
    let info = BenchmarkInfo {
        fold: run.fold,
        k: run.k,
        seed: run.seed,
        manifest: run.manifest.as_deref().map(path_value),
    };
    let report = with_predictor(&run.predictor, &loaded, run.logreg, run.finetune, |p| {
        run_benchmark(p, &episodes, info, run.threads)
    })?;

    print!("{}", report.to_table());
    match &args.out {
        Some(out) => {
            create_dir(out)?;
            write_file(&out.join("eval.csv"), &report.to_csv())?;
            write_file(&out.join("manifest.tsv"), &manifest_text(&test, &episodes))?;
            write_resolved(&run, &out.join("eval.toml"))?;
        }
        None => print!("{}", report.to_csv()),
    }
    if let Some((i, e)) = &report.failure {
        return Err(Failure::Runtime(format!("predictor failed on episode {i}: {e}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TimeRun {
    data: Option<PathBuf>,
    fold: usize,
    fold_size: usize,
    ks: Vec<usize>,
    n: usize,
    repeats: usize,
    seed: u64,
    model: Option<PathBuf>,
    base: Option<PathBuf>,
    siamese: Option<PathBuf>,
    logreg: LogRegOptions,
    finetune: FineTuneConfig,
}

impl Default for TimeRun {
    fn default() -> Self {
        TimeRun {
            data: None,
            fold: 0,
            fold_size: 2,
            ks: vec![1, 5],
            n: 20,
            repeats: 3,
            seed: 7,
            model: None,
            base: None,
            siamese: None,
            logreg: LogRegOptions::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

/// Benchmarks for every k, nested: each k-shot episode keeps the first k
/// supports of one max-k draw.
fn nested_sets(test: &SegDataset, spec: &FoldSpec, run: &TimeRun) -> Result<Vec<(usize, Vec<Episode>)>, Failure> {
    let max_k = run.ks.iter().copied().max().unwrap_or(1);
    let base = benchmark_set(test, spec, run.n, max_k, run.seed)?;
    run.ks
        .iter()
        .map(|&k| Ok((k, base.iter().map(|e| e.with_k(k)).collect::<episeg::Result<Vec<_>>>()?)))
        .collect()
}

pub fn time(args: TimeArgs) -> Result<(), Failure> {
    let mut flags = Overrides::default();
    flags.put_opt("data", args.data.as_deref().map(path_value));
    flags.put_opt("fold", args.fold.map(|v| v as i64));
    flags.put_opt(
        "ks",
        args.k.as_ref().map(|ks| toml::Value::Array(ks.iter().map(|&k| (k as i64).into()).collect())),
    );
    flags.put_opt("repeats", args.repeats.map(|v| v as i64));
    flags.put_opt("n", args.n.map(|v| v as i64));
    flags.put_opt("model", args.model.as_deref().map(path_value));
    flags.put_opt("base", args.base.as_deref().map(path_value));
    flags.put_opt("siamese", args.siamese.as_deref().map(path_value));
    seed_flag(&mut flags, &args.common, &["seed"])?;
    let run: TimeRun = resolve(args.common.config.as_deref(), &["seed"], &args.common.sets, flags)?;
    if run.ks.is_empty() || run.ks.contains(&0) {
        return Err(Failure::Usage("--k needs one or more positive support counts".into()));
    }
    if run.repeats > 0 && run.model.is_none() && run.base.is_none() && run.siamese.is_none() {
        return Err(Failure::Usage("nothing to time: give --model, --base and/or --siamese".into()));
    }
    let ours = run.model.as_deref().map(TwoBranchModel::load).transpose()?;
    let base = run.base.as_deref().map(BaseFeatureNet::load).transpose()?;
    let siamese = run.siamese.as_deref().map(SiameseMatcher::load).transpose()?;

    let ds = load(run.data.as_deref())?;
    let spec = fold_spec(&ds, run.fold, run.fold_size)?;
    let test = remap_to_fold(&ds, &spec.test_labels)?;
    let sets = if run.repeats == 0 { Vec::new() } else { nested_sets(&test, &spec, &run)? };

    let nn1 = base.as_ref().map(|net| Nn1 { net });
    let logreg = base.as_ref().map(|net| LogReg { net, options: run.logreg });
    let finetune = base.as_ref().map(|net| FineTune { net, config: run.finetune });
    let mut predictors: Vec<&dyn Predictor> = Vec::new();
    if let Some(m) = &ours {
        predictors.push(m);
    }
    if let (Some(a), Some(b), Some(c)) = (&nn1, &logreg, &finetune) {
        predictors.extend([a as &dyn Predictor, b, c]);
    }
    if let Some(m) = &siamese {
        predictors.push(m);
    }
    let table = time_report(&predictors, &sets, run.repeats)?;

    print!("{}", table.to_table());
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("time.csv"), &table.to_csv())?;
        write_resolved(&run, &out.join("time.toml"))?;
    }
    Ok(())
}
