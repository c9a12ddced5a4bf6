use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use diffact_core::bench::{
    evaluate, fingerprint, generate_dataset, run_ablation, train_policy, write_reports_csv, AblationGrid, Dataset,
    TaskSpec,
};
use diffact_core::rng::derive_seed;
use diffact_core::{decode as decode_chunk, verify as suites, Error, PolicyModel, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::Common;

struct Run {
    cfg: RunConfig,
    fingerprint: String,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = common.rounds {
            cfg.decode.total_rounds = rounds;
        }
        if let Some(episodes) = common.episodes {
            cfg.episodes = Some(episodes);
        }
        if common.dataset.is_some() {
            cfg.paths.dataset = common.dataset.clone();
        }
        if common.checkpoint.is_some() {
            cfg.paths.checkpoint = common.checkpoint.clone();
        }
        edit(&mut cfg);
        // Decoding noise always flows from the root seed.
        cfg.decode.seed = derive_seed(cfg.seed, "decode");
        cfg.validate()?;
        std::fs::create_dir_all(&common.out)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", common.out.display())))?;
        Ok(Self {
            fingerprint: fingerprint(&cfg)?,
            cfg,
            out: common.out.clone(),
        })
    }

    fn dataset_path(&self) -> PathBuf {
        self.cfg.paths.dataset.clone().unwrap_or_else(|| self.out.join("dataset.bin"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.paths.checkpoint.clone().unwrap_or_else(|| self.out.join("model.bin"))
    }

    fn manifest(&self, command: &'static str) -> RunManifest {
        RunManifest::new(command, &self.cfg, self.fingerprint.clone())
    }

    fn load_dataset(&self, manifest: &mut RunManifest) -> Result<Dataset> {
        let path = self.dataset_path();
        require(&path)?;
        manifest.input(&path)?;
        Dataset::load(&path)
    }

    fn load_model(&self, manifest: &mut RunManifest) -> Result<PolicyModel> {
        let path = self.checkpoint_path();
        require(&path)?;
        manifest.input(&path)?;
        Ok(PolicyModel::load(&path)?.0)
    }

    /// Held-out tasks, capped at the configured episode count.
    fn eval_tasks(&self, data: &Dataset) -> Vec<TaskSpec> {
        let mut tasks = data.held_out_tasks();
        if let Some(n) = self.cfg.episodes {
            tasks.truncate(n);
        }
        tasks
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("input {} does not exist", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen_data(common: &Common, tasks: Option<usize>) -> Result<()> {
    let run = Run::new(common, |c| {
        if let Some(t) = tasks {
            c.tasks = t;
        }
    })?;
    let data = generate_dataset(run.cfg.tasks, derive_seed(run.cfg.seed, "data"), &run.cfg.bench)?;
    let dataset = run.out.join("dataset.bin");
    let tokenizer = run.out.join("tokenizer.json");
    data.save(&dataset)?;
    data.tokenizer.save(&tokenizer)?;
    run.manifest("gen-data").write(&run.out, &[dataset.clone(), tokenizer])?;
    println!(
        "wrote {} episodes ({} train, {} held-out) to {}",
        data.episodes.len(),
        data.train_episodes().len(),
        data.held_out_episodes().len(),
        dataset.display()
    );
    Ok(())
}

pub fn train(common: &Common, steps: Option<usize>) -> Result<()> {
    let run = Run::new(common, |c| {
        if let Some(s) = steps {
            // Keep the warm-up at the recipe's 5% of the run.
            c.train.warmup_steps = c.train.warmup_steps * s / c.train.steps.max(1);
            c.train.steps = s;
        }
    })?;
    let mut manifest = run.manifest("train");
    let data = run.load_dataset(&mut manifest)?;
    let total = run.cfg.train.steps;
    let (model, report) = train_policy(&data, &run.cfg.recipe(), run.cfg.seed, |step, loss| {
        if (step + 1) % 500 == 0 || step + 1 == total {
            println!("step {:>6}  loss {loss:.4}", step + 1);
        }
    })?;
    let checkpoint = run.out.join("model.bin");
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), run.cfg.seed.to_string());
    meta.insert("config_fingerprint".to_string(), run.fingerprint.clone());
    meta.insert("tokenizer_sha256".to_string(), data.tokenizer.checksum());
    model.save(&checkpoint, meta)?;
    let log = run.out.join("train_log.csv");
    let mut text = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&log, text)?;
    let model_manifest = diffact_core::model::manifest_path(&checkpoint);
    manifest.write(&run.out, &[checkpoint.clone(), model_manifest, log])?;
    println!(
        "trained {} parameters for {total} steps, final loss {:.4}; saved {}",
        model.param_count(),
        report.tail_mean(100),
        checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DecodeRecord<'a> {
    task: &'a TaskSpec,
    context: Vec<u32>,
    tokens: Vec<u32>,
    actions: Vec<Vec<f64>>,
    final_distance: f64,
    success: bool,
    nfe: usize,
    seed: u64,
    config_fingerprint: &'a str,
}

pub fn decode(common: &Common, task_id: Option<u64>, trace: bool) -> Result<()> {
    let run = Run::new(common, |_| {})?;
    let mut manifest = run.manifest("decode");
    let data = run.load_dataset(&mut manifest)?;
    let model = run.load_model(&mut manifest)?;
    let task = match task_id {
        Some(id) => data
            .episodes
            .iter()
            .find(|e| e.task.task_id == id)
            .map(|e| e.task.clone())
            .ok_or_else(|| Error::Config(format!("task {id} is not in the dataset")))?,
        None => data
            .held_out_tasks()
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("dataset has no held-out task".into()))?,
    };
    let bench = &data.config;
    let context = task.context_tokens(bench);
    let (chunk, decode_trace) = decode_chunk(&model, &context, &run.cfg.decode)?;
    let chunk = chunk.with_layout(bench.horizon, bench.action_dims)?;
    let actions = data.tokenizer.detokenize_chunk(&chunk)?;
    let final_distance = task.final_distance(&actions);
    let record = DecodeRecord {
        task: &task,
        context,
        tokens: chunk.tokens.clone(),
        actions,
        final_distance,
        success: final_distance <= bench.success_radius,
        nfe: decode_trace.nfe,
        seed: run.cfg.seed,
        config_fingerprint: &run.fingerprint,
    };
    let out = run.out.join("decode.json");
    write_json(&out, &record)?;
    let mut outputs = vec![out];
    if trace {
        let path = run.out.join("trace.jsonl");
        std::fs::write(&path, decode_trace.to_jsonl()?)?;
        outputs.push(path);
    }
    manifest.write(&run.out, &outputs)?;
    println!(
        "task {}: distance {final_distance:.4} ({}), {} forward passes",
        task.task_id,
        if record.success { "success" } else { "miss" },
        decode_trace.nfe
    );
    Ok(())
}

pub fn eval(common: &Common) -> Result<()> {
    let run = Run::new(common, |_| {})?;
    let mut manifest = run.manifest("eval");
    let data = run.load_dataset(&mut manifest)?;
    let model = run.load_model(&mut manifest)?;
    let tasks = run.eval_tasks(&data);
    let report = evaluate(&model, &data.tokenizer, &data.config, &tasks, &run.cfg.decode)?;
    let csv = run.out.join("eval.csv");
    write_reports_csv(std::slice::from_ref(&report), File::create(&csv)?)?;
    manifest.write(&run.out, &[csv])?;
    println!(
        "{} / {}: success {:.3} over {} episodes, mean NFE {:.1}",
        report.strategy, report.temperature, report.success_rate, report.episodes, report.mean_nfe
    );
    Ok(())
}

pub fn ablate(common: &Common) -> Result<()> {
    let run = Run::new(common, |_| {})?;
    let mut manifest = run.manifest("ablate");
    let data = run.load_dataset(&mut manifest)?;
    let model = run.load_model(&mut manifest)?;
    let tasks = run.eval_tasks(&data);
    let reports = run_ablation(
        &model,
        &data.tokenizer,
        &data.config,
        &tasks,
        &AblationGrid::default(),
        &run.cfg.decode,
    )?;
    let csv = run.out.join("ablation.csv");
    write_reports_csv(&reports, File::create(&csv)?)?;
    manifest.write(&run.out, &[csv])?;
    println!("{:<18} {:<10} {:>8} {:>6}", "strategy", "temp", "success", "nfe");
    for r in &reports {
        println!(
            "{:<18} {:<10} {:>8.3} {:>6.1}",
            r.strategy, r.temperature, r.success_rate, r.mean_nfe
        );
    }
    Ok(())
}

pub fn verify(common: &Common) -> Result<()> {
    let run = Run::new(common, |_| {})?;
    let results = suites::run_all();
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {:<24} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    let report = run.out.join("verify.txt");
    let text: String = results
        .iter()
        .map(|r| format!("{} {} {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))
        .collect();
    std::fs::write(&report, text)?;
    run.manifest("verify").write(&run.out, &[report])?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("failed suites: {}", failed.join(", "))))
    }
}
