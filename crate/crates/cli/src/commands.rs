use std::fs;
use std::path::{Path, PathBuf};

use sttr_core::gradsuite::{run_suite, GradCase, GRAD_TOLERANCE};
use sttr_core::network::{count_params, fuse_scores, load_checkpoint, save_checkpoint, unit_param_table, Model, NetworkConfig, ScoreTable};
use sttr_core::skeleton::packed::{load_packed, save_packed};
use sttr_core::skeleton::{
    compute_bones, parse_ntu_file, parse_ntu_name, preprocess_clip, synth_generate, Dataset, DatasetManifest, ManifestEntry, PreprocessOptions,
    SampleSource, SkeletonGraph, SynthConfig, NTU_JOINTS,
};
use sttr_core::training::{evaluate, fit, write_metrics_jsonl, MetricRecord};

use crate::config::{self, ParseNtuRun, SplitConfig, SynthRun, TrainRun};
use crate::{Cli, CliError, Command, EvalArgs, FuseArgs, GradcheckArgs, ParamsArgs, ParseNtuArgs, Subset, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::Synth(a) => synth(&root, a),
        Command::ParseNtu(a) => parse_ntu(&root, a),
        Command::Train(a) => train(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::Fuse(a) => fuse(&root, a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", p.display())))
    }
}

fn create_parent(p: &Path) -> Result<()> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => fs::create_dir_all(d).map_err(|e| sttr_core::Error::Io { path: d.into(), source: e }.into()),
        None => Ok(()),
    }
}

/// `out` with `suffix` appended to its file name.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn load_data(root: &Path, data: &str, synth: &SynthConfig) -> Result<Dataset> {
    if data == "synth" {
        return Ok(synth_generate(synth)?);
    }
    let path = under(root, Path::new(data));
    require_file(&path, "data file")?;
    Ok(load_packed(&path)?)
}

fn to_bones(data: Dataset) -> Result<Dataset> {
    let dims = data.dims()?;
    if dims[2] != NTU_JOINTS {
        return Err(CliError::usage(format!(
            "bones need the {NTU_JOINTS}-joint skeleton, data has {} joints",
            dims[2]
        )));
    }
    let graph = SkeletonGraph::ntu();
    Ok(data.map_clips(|c| compute_bones(c, &graph))?)
}

fn synth(root: &Path, a: SynthArgs) -> Result<()> {
    let mut run = config::load(&SynthRun::default(), a.config.as_deref())?;
    let s = &mut run.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.classes {
        s.num_classes = v;
    }
    if let Some(v) = a.clips_per_class {
        s.clips_per_class = v;
    }
    if let Some(v) = a.frames {
        s.frames = v;
    }
    if let Some(v) = a.joints {
        s.joints = v;
    }
    if let Some(v) = a.bodies {
        s.bodies = v;
    }
    if let Some(v) = a.noise {
        s.noise = v;
    }
    if let Some(v) = a.out {
        run.out = v;
    }
    let data = synth_generate(&run.synth)?;
    let out = under(root, &run.out);
    create_parent(&out)?;
    save_packed(&out, &data)?;
    config::save(&run, &sibling(&out, ".toml"))?;
    println!("wrote {} clips of {} classes to {}", data.len(), data.num_classes(), out.display());
    Ok(())
}

fn parse_ntu(root: &Path, a: ParseNtuArgs) -> Result<()> {
    let mut run = config::load(&ParseNtuRun::default(), a.config.as_deref())?;
    if let Some(v) = a.input {
        run.input = v;
    }
    if let Some(v) = a.out {
        run.out = v;
    }
    if let Some(v) = a.frames {
        run.frames = v;
    }
    if let Some(v) = a.max_bodies {
        run.max_bodies = v;
    }
    if let Some(v) = a.num_classes {
        run.num_classes = v;
    }
    run.align_axes |= a.align_axes;
    run.skip_invalid |= a.skip_invalid;

    let input = under(root, &run.input);
    let listing = fs::read_dir(&input).map_err(|e| CliError::usage(format!("cannot read input directory {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "skeleton"))
        .collect();
    files.sort();
    let opts = PreprocessOptions {
        target_frames: run.frames,
        max_bodies: run.max_bodies,
        align_axes: run.align_axes,
    };
    let mut manifest = DatasetManifest {
        entries: Vec::new(),
        num_classes: run.num_classes,
    };
    let mut clips = Vec::new();
    let mut skipped = 0;
    for path in &files {
        match ingest_one(path, &opts, run.num_classes) {
            Ok((entry, clip)) => {
                manifest.entries.push(entry);
                clips.push(clip);
            }
            Err(e) if run.skip_invalid => {
                skipped += 1;
                eprintln!("skipped {}: {}", path.display(), config::one_line(&e.to_string()));
            }
            Err(e) => return Err(CliError::Failed(format!("{}: {}", path.display(), e))),
        }
    }
    let data = Dataset { manifest, clips };
    let out = under(root, &run.out);
    create_parent(&out)?;
    save_packed(&out, &data)?;
    config::save(&run, &sibling(&out, ".toml"))?;
    println!("wrote {} clips to {} ({} skipped)", data.len(), out.display(), skipped);
    Ok(())
}

fn ingest_one(path: &Path, opts: &PreprocessOptions, num_classes: usize) -> sttr_core::Result<(ManifestEntry, sttr_core::skeleton::SkeletonClip)> {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let id = name.trim_end_matches(".skeleton").to_string();
    let fields = parse_ntu_name(name).ok_or_else(|| sttr_core::Error::Format {
        what: "sample name",
        msg: format!("{name:?} does not match SsssCcccPpppRrrrAaaa"),
    })?;
    let label = fields.action as usize;
    if label >= num_classes {
        return Err(sttr_core::Error::Format {
            what: "sample name",
            msg: format!("action {} exceeds {num_classes} classes", label + 1),
        });
    }
    let seq = parse_ntu_file(path)?;
    let clip = preprocess_clip(&seq, label, opts)?;
    let entry = ManifestEntry {
        id,
        source: SampleSource::Path(path.display().to_string()),
        label,
        subject: fields.subject,
        camera: fields.camera,
        setup: fields.setup,
    };
    Ok((entry, clip))
}

fn resolve_train(a: &TrainArgs) -> Result<TrainRun> {
    let mut run = config::load(&TrainRun::default(), a.config.as_deref())?;
    if let Some(v) = a.stream {
        run.stream = v;
    }
    run.bones |= a.bones;
    if let Some(v) = &a.data {
        run.data = v.clone();
    }
    if let Some(v) = &a.out_dir {
        run.out_dir = v.clone();
    }
    if let Some(v) = a.base_width {
        run.base_width = v;
    }
    let t = &mut run.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = &a.lr_drop_epochs {
        t.lr_drop_epochs = v.clone();
    }
    if let Some(v) = a.lr_drop_factor {
        t.lr_drop_factor = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.drop_rate {
        t.drop_rate = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.split {
        run.split.kind = v;
    }
    if let Some(v) = a.test_fraction {
        run.split.test_fraction = v;
    }
    run.deterministic |= a.deterministic;
    if run.out_dir.as_os_str().is_empty() {
        let input = if run.bones { "bones" } else { "joints" };
        run.out_dir = PathBuf::from(format!("runs/{}-{input}-seed{}", run.stream.name(), run.train.seed));
    }
    if run.base_width == 0 {
        return Err(CliError::usage("base_width must be positive"));
    }
    run.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(run)
}

fn train(root: &Path, a: TrainArgs) -> Result<()> {
    let run = resolve_train(&a)?;
    let mut data = load_data(root, &run.data, &run.synth)?;
    if run.bones {
        data = to_bones(data)?;
    }
    let split = data.manifest.split(&run.split.rule())?;
    let cfg = NetworkConfig::desk(run.stream, data.num_classes(), run.bones, run.base_width)?;
    let mut model = Model::<f32>::new(cfg, run.train.seed)?;

    let out_dir = under(root, &run.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| sttr_core::Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    config::save(&run, &out_dir.join("config.toml"))?;

    let quiet = a.quiet;
    let outcome = fit(
        &mut model,
        &data,
        &split.train,
        &split.test,
        &run.train,
        run.deterministic,
        |recs: &[MetricRecord]| {
            if !quiet {
                let line: Vec<String> = recs
                    .iter()
                    .map(|r| format!("{} loss {:.4} acc {:.3}", r.split, r.loss, r.accuracy))
                    .collect();
                eprintln!("epoch {:>3} lr {:.0e} | {}", recs[0].epoch, recs[0].lr, line.join(" | "));
            }
        },
    )?;
    write_metrics_jsonl(&out_dir.join("metrics.jsonl"), &outcome.records)?;
    save_checkpoint(&out_dir.join("model.ckpt"), &model)?;
    outcome.test_scores.save(&out_dir.join("test.scores"))?;
    println!(
        "stream={} input={} train_accuracy={:.4} test_accuracy={:.4} out={}",
        run.stream.name(),
        if run.bones { "bones" } else { "joints" },
        outcome.train.accuracy,
        outcome.test.accuracy,
        out_dir.display()
    );
    Ok(())
}

fn eval(root: &Path, a: EvalArgs) -> Result<()> {
    let (mut data_spec, mut synth, mut split, ckpt_default, out_default) = match &a.run {
        Some(dir) => {
            let dir = under(root, dir);
            let cfg_path = dir.join("config.toml");
            require_file(&cfg_path, "run config")?;
            let run = config::load(&TrainRun::default(), Some(&cfg_path))?;
            (run.data, run.synth, run.split, Some(dir.join("model.ckpt")), dir.join("eval.scores"))
        }
        None => (
            "synth".to_string(),
            SynthConfig::default(),
            SplitConfig::default(),
            None,
            PathBuf::from("eval.scores"),
        ),
    };
    if let Some(v) = &a.data {
        data_spec = v.clone();
        synth = SynthConfig::default();
    }
    if let Some(v) = a.split {
        split.kind = v;
    }
    if let Some(v) = a.test_fraction {
        split.test_fraction = v;
    }
    let ckpt = match (&a.checkpoint, ckpt_default) {
        (Some(p), _) => under(root, p),
        (None, Some(p)) => p,
        (None, None) => return Err(CliError::usage("eval needs --checkpoint or --run")),
    };
    require_file(&ckpt, "checkpoint")?;
    let model: Model<f32> = load_checkpoint(&ckpt)?;
    let mut data = load_data(root, &data_spec, &synth)?;
    if model.net.config.use_bones {
        data = to_bones(data)?;
    }
    let s = data.manifest.split(&split.rule())?;
    let indices: Vec<usize> = match a.subset {
        Subset::Train => s.train,
        Subset::Test => s.test,
        Subset::All => (0..data.len()).collect(),
    };
    let (stats, table) = evaluate(&model, &data, &indices, 32)?;
    let out = a.out.map_or(out_default, |p| under(root, &p));
    create_parent(&out)?;
    table.save(&out)?;
    println!(
        "samples={} loss={:.4} accuracy={:.4} scores={}",
        indices.len(),
        stats.loss,
        stats.accuracy,
        out.display()
    );
    Ok(())
}

fn fuse(root: &Path, a: FuseArgs) -> Result<()> {
    let (pa, pb) = (under(root, &a.first), under(root, &a.second));
    require_file(&pa, "score table")?;
    require_file(&pb, "score table")?;
    let (ta, tb) = (ScoreTable::load(&pa)?, ScoreTable::load(&pb)?);
    let fused = fuse_scores(&ta, &tb)?;
    if let Some(out) = a.out {
        let out = under(root, &out);
        create_parent(&out)?;
        fs::write(&out, fused.to_text()).map_err(|e| sttr_core::Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    println!(
        "samples={} first_accuracy={:.4} second_accuracy={:.4} fused_accuracy={:.4}",
        fused.rows.len(),
        ta.accuracy(),
        tb.accuracy(),
        fused.accuracy()
    );
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    if a.channels == 0 {
        return Err(CliError::usage("channels must be positive"));
    }
    let table = unit_param_table(a.channels, a.kernel, a.max_heads).map_err(|e| CliError::usage(e.to_string()))?;
    println!("{table}");
    if let Some(stream) = a.stream {
        let mut cfg = NetworkConfig::desk(stream, a.classes, a.bones, a.base_width).map_err(|e| CliError::usage(e.to_string()))?;
        cfg.temporal_kernel = a.kernel;
        cfg.max_heads = a.max_heads;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        println!();
        println!("{}", count_params(&cfg)?);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::usage("need at least one seed"));
    }
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let cases = run_suite(&seeds)?;
    let mut names: Vec<&str> = Vec::new();
    for c in &cases {
        if !names.contains(&c.name.as_str()) {
            names.push(&c.name);
        }
    }
    println!("{:<20} {:>6} {:>12} {:>6}", "case", "seeds", "max_rel_err", "status");
    let mut failed = Vec::new();
    for name in names {
        let group: Vec<&GradCase> = cases.iter().filter(|c| c.name == name).collect();
        let worst = group.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
        let ok = group.iter().all(|c| c.passed());
        if !ok {
            failed.push(name.to_string());
        }
        println!("{:<20} {:>6} {:>12.3e} {:>6}", name, group.len(), worst, if ok { "ok" } else { "FAIL" });
    }
    if failed.is_empty() {
        println!("all {} checks below {GRAD_TOLERANCE:e}", cases.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}
