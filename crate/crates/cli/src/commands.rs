use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use longattn_core::adapt::{drop_cross_attention, port_to_global_local, port_to_local, replicate_positions, Checkpoint};
use longattn_core::attention::self_attention_mask;
use longattn_core::bench::{ordering_check, run_scaling, write_csv};
use longattn_core::data::{
    build_schedule, filter_long, gen_corpus_with, read_jsonl, write_jsonl, Example, SyntheticDoc, SEP,
};
use longattn_core::model::Model;
use longattn_core::rouge::corpus_report;
use longattn_core::train::{decode_all, exact_match, pretrain, StepLog, TrainConfig, Trainer};
use log::info;
use serde::Serialize;

use crate::config::{ExperimentConfig, Surgery};
use crate::error::CliError;
use crate::record::Task;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.csv";
pub const ROUGE_FILE: &str = "rouge.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// What a task produced.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Deterministic outputs, relative to the output directory.
    pub outputs: Vec<String>,
    /// Set when the run finished but missed a configured threshold.
    pub failure: Option<String>,
}

/// Independent stream seeds derived from the run seed (SplitMix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn execute(task: &Task, cfg: &ExperimentConfig, seed: u64, workers: usize, out: &Path) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out.display(), e))?;
    match task {
        Task::GenData => gen_data(cfg, seed, out),
        Task::Pretrain { data } => run_pretrain(cfg, seed, workers, data, out),
        Task::Adapt { from, surgery } => adapt(cfg, seed, from, surgery, out),
        Task::Finetune { data, from } => finetune(cfg, seed, workers, data, from.as_deref(), out),
        Task::Eval {
            from,
            data,
            cand,
            reference,
        } => match (from, data, cand, reference) {
            (Some(from), Some(data), None, None) => eval_model(cfg, workers, from, data, out),
            (None, None, Some(c), Some(r)) => eval_files(cfg, c, r, out),
            _ => Err(CliError::Config(
                "eval needs either --from and --data, or --cand and --ref".into(),
            )),
        },
        Task::Bench => bench(cfg, seed, out),
        Task::DumpMask => dump_mask(cfg, out),
    }
}

fn gen_data(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Outcome, CliError> {
    let d = &cfg.data;
    let v = cfg.model.vocab_size;
    let train = gen_corpus_with(d.kind, d.n_train, d.len, v, derive_seed(seed, 0), &d.needle)?;
    let test = gen_corpus_with(d.kind, d.n_test, d.len, v, derive_seed(seed, 1), &d.needle)?;
    let docs: Vec<&SyntheticDoc> = train.iter().map(|s| &s.doc).collect();
    let train: Vec<&Example> = train.iter().map(|s| &s.example).collect();
    let test: Vec<&Example> = test.iter().map(|s| &s.example).collect();
    write_jsonl(&out.join(DOCS_FILE), &docs)?;
    write_jsonl(&out.join(TRAIN_FILE), &train)?;
    write_jsonl(&out.join(TEST_FILE), &test)?;
    info!("wrote {} train and {} test examples", train.len(), test.len());
    Ok(Outcome {
        outputs: vec![DOCS_FILE.into(), TRAIN_FILE.into(), TEST_FILE.into()],
        failure: None,
    })
}

fn loss_row(csv: &mut String, phase: Option<usize>, log: &StepLog) {
    if let Some(p) = phase {
        write!(csv, "{p},").unwrap();
    }
    writeln!(csv, "{},{},{},{}", log.step, log.loss, log.grad_norm, log.lr).unwrap();
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

/// Checkpoint files under `dir`, relative to `out`.
fn checkpoint_outputs(dir: &str) -> Vec<String> {
    use longattn_core::adapt::{CONFIG_FILE, MANIFEST_FILE, PARAMS_FILE};
    [MANIFEST_FILE, PARAMS_FILE, CONFIG_FILE]
        .iter()
        .map(|f| format!("{dir}/{f}"))
        .collect()
}

fn run_pretrain(cfg: &ExperimentConfig, seed: u64, workers: usize, data: &Path, out: &Path) -> Result<Outcome, CliError> {
    let p = &cfg.pretrain;
    let docs: Vec<SyntheticDoc> = read_jsonl(&data.join(DOCS_FILE))?;
    let docs = filter_long(&docs, p.min_doc_chars);
    let schedule = build_schedule(p.shape, &p.schedule)?;
    write_file(
        &out.join("schedule.json"),
        serde_json::to_string_pretty(&schedule).expect("schedule serializes").as_bytes(),
    )?;
    let mut model = Model::with_init_std(cfg.model.clone(), derive_seed(seed, 2), cfg.init_std)?;
    let train = TrainConfig {
        warmup_steps: p.warmup_steps,
        grad_clip: p.grad_clip,
        ..TrainConfig::new(schedule.total_steps(), p.schedule.batch_size, p.learning_rate)
    };
    let mut csv = String::from("phase,step,loss,grad_norm,lr\n");
    let mut outputs = vec!["schedule.json".to_string(), LOSS_FILE.to_string()];
    pretrain(
        &mut model,
        &docs,
        &schedule,
        &train,
        derive_seed(seed, 3),
        workers,
        |phase, log| {
            loss_row(&mut csv, Some(phase), log);
            if (log.step + 1) % 100 == 0 {
                info!("pretrain phase {phase} step {} loss {:.4}", log.step + 1, log.loss);
            }
        },
        |phase, m| {
            let dir = format!("phase{phase}");
            Checkpoint::from_model(m)?.save(&out.join(&dir))?;
            outputs.extend(checkpoint_outputs(&dir));
            Ok(())
        },
    )?;
    Checkpoint::from_model(&model)?.save(&out.join(CHECKPOINT_DIR))?;
    outputs.extend(checkpoint_outputs(CHECKPOINT_DIR));
    write_file(&out.join(LOSS_FILE), csv.as_bytes())?;
    Ok(Outcome { outputs, failure: None })
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_dir() {
        return Err(CliError::Io(format!("checkpoint directory {} does not exist", path.display())));
    }
    Ok(Checkpoint::open(path)?)
}

fn adapt(cfg: &ExperimentConfig, seed: u64, from: &Path, surgery: &[Surgery], out: &Path) -> Result<Outcome, CliError> {
    let a = &cfg.adapt;
    let chain = if surgery.is_empty() { &a.chain } else { surgery };
    let mut ckpt = open_checkpoint(from)?;
    for (i, s) in chain.iter().enumerate() {
        ckpt = match s {
            Surgery::Local => port_to_local(&ckpt, a.local.clone())?,
            Surgery::GlobalLocal => port_to_global_local(&ckpt, a.global_local.clone(), derive_seed(seed, 10 + i as u64))?,
            Surgery::ReplicatePositions => replicate_positions(&ckpt, a.max_input_len)?,
            Surgery::DropCrossAttention => drop_cross_attention(&ckpt, &a.keep_cross_layers)?,
        };
        info!("applied {s:?}");
    }
    ckpt.save(&out.join(CHECKPOINT_DIR))?;
    Ok(Outcome {
        outputs: checkpoint_outputs(CHECKPOINT_DIR),
        failure: None,
    })
}

fn finetune(
    cfg: &ExperimentConfig,
    seed: u64,
    workers: usize,
    data: &Path,
    from: Option<&Path>,
    out: &Path,
) -> Result<Outcome, CliError> {
    let mut model = match from {
        Some(p) => open_checkpoint(p)?.to_model()?,
        None => Model::with_init_std(cfg.model.clone(), derive_seed(seed, 2), cfg.init_std)?,
    };
    let train: Vec<Example> = read_jsonl(&data.join(TRAIN_FILE))?;
    let mut trainer = Trainer::new(cfg.finetune.clone(), derive_seed(seed, 4), workers)?;
    let mut csv = String::from("step,loss,grad_norm,lr\n");
    trainer.run(&mut model, &train, |log| {
        loss_row(&mut csv, None, log);
        if (log.step + 1) % 100 == 0 {
            info!("finetune step {} loss {:.4}", log.step + 1, log.loss);
        }
    })?;
    write_file(&out.join(LOSS_FILE), csv.as_bytes())?;
    Checkpoint::from_model(&model)?.save(&out.join(CHECKPOINT_DIR))?;
    let mut outputs = vec![LOSS_FILE.to_string()];
    outputs.extend(checkpoint_outputs(CHECKPOINT_DIR));
    Ok(Outcome { outputs, failure: None })
}

/// Splits a token sequence into lines at separators.
fn lines(tokens: &[usize]) -> Vec<Vec<usize>> {
    tokens.split(|&t| t == SEP).map(<[usize]>::to_vec).collect()
}

#[derive(Serialize)]
struct Prediction<'a> {
    prediction: &'a [usize],
    target: &'a [usize],
}

fn score(cfg: &ExperimentConfig, preds: &[Vec<usize>], targets: &[Vec<usize>], out: &Path) -> Result<Outcome, CliError> {
    let pairs: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)> =
        preds.iter().zip(targets).map(|(p, t)| (lines(p), lines(t))).collect();
    let rep = corpus_report(&pairs, cfg.eval.rg_uses_lsum);
    let em = exact_match(preds, targets);
    let csv = format!(
        "n_examples,exact_match,r1,r2,rl,rlsum,rg\n{},{},{},{},{},{},{}\n",
        rep.n_examples, em, rep.r1.f1, rep.r2.f1, rep.rl.f1, rep.rlsum.f1, rep.rg
    );
    write_file(&out.join(ROUGE_FILE), csv.as_bytes())?;
    let records: Vec<Prediction> = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| Prediction { prediction: p, target: t })
        .collect();
    write_jsonl(&out.join(PREDICTIONS_FILE), &records)?;
    info!("exact match {em:.4}, rg {:.4}", rep.rg);
    let failure = cfg
        .eval
        .min_exact_match
        .filter(|&min| !(em >= min))
        .map(|min| format!("exact match {em} is below {min}"));
    Ok(Outcome {
        outputs: vec![ROUGE_FILE.into(), PREDICTIONS_FILE.into()],
        failure,
    })
}

fn eval_model(cfg: &ExperimentConfig, workers: usize, from: &Path, data: &Path, out: &Path) -> Result<Outcome, CliError> {
    let model = open_checkpoint(from)?.to_model()?;
    let test: Vec<Example> = read_jsonl(&data.join(TEST_FILE))?;
    let inputs: Vec<Vec<usize>> = test.iter().map(|e| e.input.clone()).collect();
    let targets: Vec<Vec<usize>> = test.iter().map(|e| e.target.clone()).collect();
    let max_len = cfg.eval.max_len.unwrap_or(model.config.max_output_len);
    let preds = decode_all(&model, &inputs, cfg.eval.decoding, max_len, workers)?;
    score(cfg, &preds, &targets, out)
}

fn eval_files(cfg: &ExperimentConfig, cand: &Path, reference: &Path, out: &Path) -> Result<Outcome, CliError> {
    let preds: Vec<Vec<usize>> = read_jsonl(cand)?;
    let targets: Vec<Vec<usize>> = read_jsonl(reference)?;
    if preds.len() != targets.len() {
        return Err(CliError::Config(format!(
            "{} candidates but {} references",
            preds.len(),
            targets.len()
        )));
    }
    score(cfg, &preds, &targets, out)
}

fn bench(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Outcome, CliError> {
    let mut scaling = cfg.bench.clone();
    scaling.seed = derive_seed(seed, 5);
    let rows = run_scaling(&scaling)?;
    let mut csv = Vec::new();
    write_csv(&rows, &mut csv)?;
    write_file(&out.join("scaling.csv"), &csv)?;
    let report = ordering_check(csv.as_slice())?;
    write_file(
        &out.join("ordering.json"),
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    let failure = (!report.pass()).then(|| "mac_count ordering local <= global_local < full violated".to_string());
    // Wall times vary between runs, so only the ordering report is digested.
    Ok(Outcome {
        outputs: vec!["ordering.json".into()],
        failure,
    })
}

/// Plain PBM (P1): black pixels mark allowed query/key pairs.
pub fn pbm(mask: &[bool], n: usize) -> String {
    let mut s = format!("P1\n{n} {n}\n");
    for row in mask.chunks(n) {
        let line: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn dump_mask(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let d = &cfg.dump_mask;
    let n = d.seq_len + d.attention.globals();
    let mut outputs = Vec::new();
    for &layer in &d.layers {
        let mask = self_attention_mask(&d.attention, d.seq_len, layer)?;
        let name = format!("mask_L{}_layer{layer}.pbm", d.seq_len);
        write_file(&out.join(&name), pbm(&mask, n).as_bytes())?;
        outputs.push(name);
    }
    Ok(Outcome { outputs, failure: None })
}
