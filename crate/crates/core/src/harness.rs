//! Experiment orchestration: configs, stage seeding, dataset/train/eval
//! pipelines, checkpoint selection, Monte-Carlo statistics, and CSV
//! export for every figure-style output.

use crate::complexity::{cascade_complexity_with, mul_dependency_levels, CascadeConvention};
use crate::datagen::{
    dataset_stream, encode_add, encode_mul, DomainSpec, OpKind, Sample, SamplerSpec, Vocab,
};
use crate::digits::Digits;
use crate::model::{
    evaluate, train_step, Checkpoint, EvalMode, ModelConfig, OptimState, Parameters,
};
use crate::posenc::{PeScheme, PeVariant};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

/// Optimization budget for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Held-out set of longer operands used to pick the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSpec {
    /// Operand length of the validation samples; must exceed the
    /// training length l_s.
    pub length: usize,
    pub size: usize,
}

/// Positional-encoding family selector; concrete offsets are derived
/// from the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    Nope,
    Ape,
    Rpe,
    Upe,
    SigRpe,
}

/// Architecture settings as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub pe: PeKind,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelSettings {
    pub fn toy(pe: PeKind) -> Self {
        ModelSettings {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ffn: 256,
            pe,
            dropout: 0.0,
        }
    }
}

/// A full training-experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub domain: DomainSpec,
    pub sampler: SamplerSpec,
    pub model: ModelSettings,
    pub budget: TrainBudget,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub eval_lengths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSpec>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {}",
                self.version
            )));
        }
        self.domain.validate()?;
        self.sampler.validate()?;
        if self.eval_lengths.is_empty() || self.eval_lengths.iter().any(|&l| l < 1) {
            return Err(Error::InvalidConfig("eval lengths must be >= 1".into()));
        }
        if self.eval_lengths.iter().any(|&l| l > self.domain.l) {
            return Err(Error::InvalidConfig("eval length beyond format".into()));
        }
        if let Some(v) = &self.validation {
            if v.length <= self.domain.ls || v.length > self.domain.l || v.size == 0 {
                return Err(Error::InvalidConfig(format!(
                    "validation length {} must lie in ({}, {}]",
                    v.length, self.domain.ls, self.domain.l
                )));
            }
        }
        if self.train_samples == 0 || self.eval_samples == 0 || self.budget.batch == 0 {
            return Err(Error::InvalidConfig("empty sample budget".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Named presets. Toy presets are the acceptance targets; the
    /// full-scale ones mirror the reference experiments and are not
    /// desk-runnable.
    pub fn preset(name: &str) -> Result<Self> {
        let toy = |pe: PeKind, pname: &str| ExperimentConfig {
            version: CONFIG_VERSION,
            name: pname.to_string(),
            domain: DomainSpec {
                l: 5,
                ls: 2,
                op: OpKind::Add,
                multiplier_len: 1,
            },
            sampler: SamplerSpec::uniform(11),
            model: ModelSettings {
                dropout: 0.1,
                ..ModelSettings::toy(pe)
            },
            budget: TrainBudget {
                steps: 6000,
                batch: 64,
                lr: 1e-3,
                weight_decay: 0.01,
            },
            train_samples: 20_000,
            eval_samples: 500,
            eval_lengths: vec![1, 2, 3, 4, 5],
            validation: Some(ValidationSpec { length: 3, size: 128 }),
            seed: 17,
        };
        match name {
            "add_toy_rpe" => Ok(toy(PeKind::Rpe, "add_toy_rpe")),
            "add_toy_ape" => Ok(toy(PeKind::Ape, "add_toy_ape")),
            "add_full_scale" => Ok(ExperimentConfig {
                version: CONFIG_VERSION,
                name: "add_full_scale".into(),
                domain: DomainSpec {
                    l: 50,
                    ls: 5,
                    op: OpKind::Add,
                    multiplier_len: 1,
                },
                sampler: SamplerSpec::uniform(11),
                model: ModelSettings {
                    layers: 6,
                    heads: 8,
                    d_model: 768,
                    d_ffn: 3072,
                    pe: PeKind::Rpe,
                    dropout: 0.1,
                },
                budget: TrainBudget {
                    steps: 200_000,
                    batch: 64,
                    lr: 1e-4,
                    weight_decay: 0.01,
                },
                train_samples: 100_000,
                eval_samples: 2000,
                eval_lengths: (1..=50).collect(),
                validation: Some(ValidationSpec { length: 10, size: 512 }),
                seed: 1,
            }),
            "mult_full_scale" => Ok(ExperimentConfig {
                version: CONFIG_VERSION,
                name: "mult_full_scale".into(),
                domain: DomainSpec {
                    l: 20,
                    ls: 5,
                    op: OpKind::Mul,
                    multiplier_len: 3,
                },
                sampler: SamplerSpec::uniform(11),
                model: ModelSettings {
                    layers: 6,
                    heads: 8,
                    d_model: 768,
                    d_ffn: 3072,
                    pe: PeKind::Upe,
                    dropout: 0.1,
                },
                budget: TrainBudget {
                    steps: 200_000,
                    batch: 64,
                    lr: 1e-4,
                    weight_decay: 0.01,
                },
                train_samples: 100_000,
                eval_samples: 2000,
                eval_lengths: (1..=20).collect(),
                validation: None,
                seed: 1,
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset {other}"))),
        }
    }

    /// Input sequence length implied by the domain.
    pub fn seq_len(&self) -> usize {
        match self.domain.op {
            OpKind::Add => 2 * self.domain.l + 1,
            OpKind::Mul => self.domain.l + self.domain.multiplier_len + 1,
        }
    }

    /// Concrete model config for this experiment.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = Vocab::arithmetic();
        let seq = self.seq_len();
        let head_dim = self.model.d_model / self.model.heads.max(1);
        let pe = match self.model.pe {
            PeKind::Nope => PeScheme {
                variant: PeVariant::Nope,
                slot_dim: head_dim,
            },
            PeKind::Ape => PeScheme::ape(seq, self.model.d_model),
            PeKind::Rpe => match self.domain.op {
                OpKind::Add => PeScheme::rpe_for_add(self.domain.l, head_dim),
                OpKind::Mul => PeScheme {
                    variant: PeVariant::Rpe {
                        max_offset: self.domain.l + self.domain.multiplier_len + 1,
                    },
                    slot_dim: head_dim,
                },
            },
            PeKind::Upe => {
                PeScheme::upe_for_mul(self.domain.l, self.domain.multiplier_len, head_dim)
            }
            PeKind::SigRpe => PeScheme {
                variant: PeVariant::SigRpe {
                    max_offset: self.domain.l + 1,
                },
                slot_dim: head_dim,
            },
        };
        let cfg = ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.d_model,
            d_ffn: self.model.d_ffn,
            vocab_size: vocab.size(),
            max_seq_len: seq,
            pe,
            dropout: self.model.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Stage seeding

/// SplitMix64 step: the master seed expands into independent per-stage
/// streams keyed by the stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed through SplitMix64.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master.wrapping_add(h).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Metrics tables and CSV export

/// One metric observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Checkpoint id ("final", "step-500", ...).
    pub checkpoint: String,
    /// Eval length or complexity bucket, as written.
    pub key: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(&mut self, checkpoint: &str, key: String, metric: &str, value: f64, count: usize) {
        self.rows.push(MetricsRow {
            checkpoint: checkpoint.to_string(),
            key,
            metric: metric.to_string(),
            value,
            count,
        });
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.count == 0 {
                return Err(Error::InvalidConfig(format!("zero count in {}", r.metric)));
            }
            if r.metric.contains("accuracy") || r.metric.contains("match") {
                if !(0.0..=1.0).contains(&r.value) {
                    return Err(Error::InvalidConfig(format!(
                        "{} = {} outside [0,1]",
                        r.metric, r.value
                    )));
                }
            }
        }
        Ok(())
    }
}

/// 17 significant digits: enough to reproduce any f64 bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a CSV with a header row and stable column order; bit-identical
/// across runs with equal inputs.
pub fn write_csv<W: Write, I>(out: W, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "csv row width {} vs header {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn export_metrics_csv<W: Write>(table: &MetricsTable, out: W) -> Result<()> {
    table.validate()?;
    write_csv(
        out,
        &["checkpoint", "key", "metric", "value", "count"],
        table.rows.iter().map(|r| {
            vec![
                r.checkpoint.clone(),
                r.key.clone(),
                r.metric.clone(),
                fmt_f64(r.value),
                r.count.to_string(),
            ]
        }),
    )
}

pub fn parse_metrics_csv<R: std::io::Read>(input: R) -> Result<MetricsTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut table = MetricsTable::default();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 5 {
            return Err(Error::Parse(format!("metrics row width {}", rec.len())));
        }
        table.rows.push(MetricsRow {
            checkpoint: rec[0].to_string(),
            key: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: rec[3]
                .parse()
                .map_err(|e| Error::Parse(format!("value: {e}")))?,
            count: rec[4]
                .parse()
                .map_err(|e| Error::Parse(format!("count: {e}")))?,
        });
    }
    table.validate()?;
    Ok(table)
}

/// (step, value) series, e.g. training-loss or A-trajectory columns.
pub fn export_series_csv<W: Write>(
    out: W,
    x_name: &str,
    y_names: &[&str],
    rows: &[(f64, Vec<f64>)],
) -> Result<()> {
    let mut header = vec![x_name];
    header.extend_from_slice(y_names);
    write_csv(
        out,
        &header,
        rows.iter().map(|(x, ys)| {
            let mut row = vec![fmt_f64(*x)];
            row.extend(ys.iter().map(|v| fmt_f64(*v)));
            row
        }),
    )
}

/// Square matrix dump (gram matrices, attention maps).
pub fn export_matrix_csv<W: Write>(out: W, m: &ndarray::Array2<f64>) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("c{c}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        out,
        &header_refs,
        m.rows()
            .into_iter()
            .map(|r| r.iter().map(|v| fmt_f64(*v)).collect()),
    )
}

// ---------------------------------------------------------------------------
// Statistics

/// Monte-Carlo histogram over a nonnegative integer statistic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
}

impl Histogram {
    pub fn record(&mut self, value: usize) {
        *self.counts.entry(value).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (&k, &v) in &other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.total += other.total;
    }

    pub fn p_eq(&self, value: usize) -> f64 {
        *self.counts.get(&value).unwrap_or(&0) as f64 / self.total.max(1) as f64
    }

    pub fn p_le(&self, value: usize) -> f64 {
        self.counts
            .iter()
            .filter(|(&k, _)| k <= value)
            .map(|(_, &v)| v)
            .sum::<u64>() as f64
            / self.total.max(1) as f64
    }

    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(
            out,
            &["value", "count", "probability"],
            self.counts.iter().map(|(&k, &v)| {
                vec![
                    k.to_string(),
                    v.to_string(),
                    fmt_f64(v as f64 / self.total.max(1) as f64),
                ]
            }),
        )
    }
}

/// Cascade-length histogram over uniform pairs of `digits`-digit sums.
pub fn cascade_dist(
    digits: usize,
    samples: u64,
    convention: CascadeConvention,
    seed: u64,
) -> Histogram {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hist = Histogram::default();
    for _ in 0..samples {
        let a = Digits::random_uniform(digits, &mut rng);
        let b = Digits::random_uniform(digits, &mut rng);
        hist.record(cascade_complexity_with(&a, &b, convention).cascade_length);
    }
    hist
}

/// Dependency-level histogram for multiplier x multiplicand products;
/// the multiplier's leading digit is nonzero.
pub fn mul_dep_dist(
    multiplier_len: usize,
    multiplicand_len: usize,
    samples: u64,
    seed: u64,
) -> Histogram {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hist = Histogram::default();
    for _ in 0..samples {
        let a = Digits::random_exact_len(multiplier_len, &mut rng);
        let b = Digits::random_uniform(multiplicand_len, &mut rng);
        hist.record(mul_dependency_levels(&a, &b));
    }
    hist
}

// ---------------------------------------------------------------------------
// Experiment pipeline

/// In-memory artifacts of one run; everything here is also written to
/// the output directory when one is configured.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub best: Checkpoint,
    pub best_id: String,
    /// (step, validation exact match) for every evaluated checkpoint.
    pub validation_curve: Vec<(u64, f64)>,
    /// (step, mean training loss since previous row).
    pub loss_curve: Vec<(u64, f64)>,
}

/// Draw an operand pair with both operands of exactly `len` digits (one
/// digit means 0..9 is widened to 1..9 by the exact-length rule),
/// resampling sums that overflow the format.
fn eval_pair<R: Rng>(domain: &DomainSpec, len: usize, rng: &mut R) -> (Digits, Digits) {
    loop {
        let (a, b) = match domain.op {
            OpKind::Add => (
                Digits::random_exact_len(len, rng),
                Digits::random_exact_len(len, rng),
            ),
            OpKind::Mul => (
                Digits::random_exact_len(domain.multiplier_len, rng),
                Digits::random_exact_len(len, rng),
            ),
        };
        if domain.op == OpKind::Add && crate::digits::school_add(&a, &b).len() > domain.l {
            continue;
        }
        return (a, b);
    }
}

fn encode_pair(domain: &DomainSpec, a: &Digits, b: &Digits) -> Result<Sample> {
    match domain.op {
        OpKind::Add => encode_add(a, b, domain.l),
        OpKind::Mul => encode_mul(a, b, domain.l),
    }
}

pub fn eval_set(domain: &DomainSpec, len: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let (a, b) = eval_pair(domain, len, &mut rng);
            encode_pair(domain, &a, &b)
        })
        .collect()
}

/// Generate data, train with periodic validation, select the best
/// checkpoint, and evaluate it at every requested length. Artifacts are
/// flushed to `out_dir` (when given) as each stage completes, so a
/// failed run retains everything produced before the failure.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(MetricsTable, RunArtifacts)> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_stage("config"))?;
    }

    // Stage: data.
    let data_seed = stage_seed(config.seed, "datagen");
    let mut data_rng = ChaCha12Rng::seed_from_u64(data_seed);
    let sampler = SamplerSpec {
        seed: data_seed,
        ..config.sampler.clone()
    };
    let train: Vec<Sample> =
        dataset_stream(&config.domain, &sampler, config.train_samples, &mut data_rng)
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage("datagen"))?;
    if let Some(dir) = out_dir {
        let header = crate::datagen::dataset::DatasetHeader::new(
            Vocab::arithmetic(),
            Some(config.domain.clone()),
            Some(sampler),
        );
        crate::datagen::dataset::write_dataset_file(&dir.join("train.jsonl"), &header, &train)
            .map_err(|e| e.in_stage("datagen"))?;
    }
    let validation = match &config.validation {
        Some(v) => eval_set(
            &config.domain,
            v.length,
            v.size,
            stage_seed(config.seed, "validation"),
        )
        .map_err(|e| e.in_stage("datagen"))?,
        None => Vec::new(),
    };

    // Stage: train.
    let model_cfg = config.model_config().map_err(|e| e.in_stage("train"))?;
    let use_dropout = model_cfg.dropout > 0.0;
    let mut params = Parameters::init(model_cfg, stage_seed(config.seed, "init"))
        .map_err(|e| e.in_stage("train"))?;
    let mut optim = OptimState::new(
        params.layout.total(),
        config.budget.lr,
        config.budget.weight_decay,
    );
    let mut train_rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, "train"));
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, "drop"));
    // Checkpoint cadence: every 5% of the budget.
    let cadence = (config.budget.steps / 20).max(1);
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    let mut curve = Vec::new();
    let mut loss_curve = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0u64;

    let consider = |step: u64,
                        params: &Parameters,
                        optim: &OptimState,
                        best: &mut Option<(f64, u64, Checkpoint)>,
                        curve: &mut Vec<(u64, f64)>|
     -> Result<()> {
        let acc = if validation.is_empty() {
            1.0
        } else {
            evaluate(params, &validation, EvalMode::Exact)?.exact_match
        };
        curve.push((step, acc));
        // Without a validation set every checkpoint ties; keep the latest.
        let better = match best {
            Some((b, _, _)) => acc > *b || validation.is_empty(),
            None => true,
        };
        if better {
            *best = Some((acc, step, Checkpoint::new(params, Some(optim))));
        }
        Ok(())
    };

    for step in 0..config.budget.steps {
        let batch: Vec<Sample> = (0..config.budget.batch)
            .map(|_| train[train_rng.gen_range(0..train.len())].clone())
            .collect();
        let drop = use_dropout.then_some(&mut dropout_rng);
        let metrics =
            train_step(&mut params, &mut optim, &batch, drop).map_err(|e| e.in_stage("train"))?;
        loss_acc += metrics.loss;
        loss_n += 1;
        if (step + 1) % cadence == 0 || step + 1 == config.budget.steps {
            loss_curve.push((step + 1, loss_acc / loss_n as f64));
            loss_acc = 0.0;
            loss_n = 0;
            consider(step + 1, &params, &optim, &mut best, &mut curve)
                .map_err(|e| e.in_stage("train"))?;
        }
    }
    if best.is_none() {
        // Zero-step budget: evaluate the random init.
        consider(0, &params, &optim, &mut best, &mut curve).map_err(|e| e.in_stage("train"))?;
    }
    let (_, best_step, best_ckpt) = best.unwrap();
    let best_id = format!("step-{best_step}");
    if let Some(dir) = out_dir {
        best_ckpt
            .save(&dir.join("ckpt_best.json"))
            .map_err(|e| e.in_stage("train"))?;
        let rows: Vec<(f64, Vec<f64>)> = loss_curve
            .iter()
            .map(|&(s, l)| (s as f64, vec![l]))
            .collect();
        export_series_csv(
            std::fs::File::create(dir.join("loss_curve.csv"))?,
            "step",
            &["train_loss"],
            &rows,
        )
        .map_err(|e| e.in_stage("train"))?;
    }

    // Stage: eval, with the selected checkpoint.
    let (best_params, _) = best_ckpt
        .clone()
        .into_parameters()
        .map_err(|e| e.in_stage("eval"))?;
    let mut table = MetricsTable::default();
    for (step, acc) in &curve {
        table.push(
            &format!("step-{step}"),
            "validation".into(),
            "val_exact_match",
            *acc,
            validation.len().max(1),
        );
    }
    let eval_seed = stage_seed(config.seed, "eval");
    for &len in &config.eval_lengths {
        let set = eval_set(&config.domain, len, config.eval_samples, eval_seed ^ len as u64)
            .map_err(|e| e.in_stage("eval"))?;
        let report =
            evaluate(&best_params, &set, EvalMode::Exact).map_err(|e| e.in_stage("eval"))?;
        table.push(
            &best_id,
            len.to_string(),
            "exact_match",
            report.exact_match,
            set.len(),
        );
    }
    table.validate().map_err(|e| e.in_stage("eval"))?;
    if let Some(dir) = out_dir {
        export_metrics_csv(&table, std::fs::File::create(dir.join("metrics.csv"))?)
            .map_err(|e| e.in_stage("eval"))?;
    }
    Ok((
        table,
        RunArtifacts {
            best: best_ckpt,
            best_id,
            validation_curve: curve,
            loss_curve,
        },
    ))
}

// ---------------------------------------------------------------------------
// Theory experiment configs

/// Config file for a dynamics run on the circular regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryExperimentConfig {
    pub version: u32,
    pub name: String,
    pub n: usize,
    pub n1: usize,
    pub d: usize,
    pub alpha: f64,
    pub betas: Vec<f64>,
    /// Supervision half-window for the augmented loss.
    #[serde(default)]
    pub w: usize,
    pub model: crate::theory::TheoryModelKind,
    pub steps: u64,
    pub eta: f64,
    pub seed: u64,
}

impl TheoryExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {}",
                self.version
            )));
        }
        // Delegate the ring constraints to a throwaway task.
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        self.task(&mut rng)?;
        if self.steps == 0 || self.eta <= 0.0 {
            return Err(Error::InvalidConfig("need steps > 0 and eta > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TheoryExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The n=51 run from the reference setup.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "theory_n51" => Ok(TheoryExperimentConfig {
                version: CONFIG_VERSION,
                name: "theory_n51".into(),
                n: 51,
                n1: 10,
                d: 200,
                alpha: 2.0,
                betas: vec![0.5],
                w: 0,
                model: crate::theory::TheoryModelKind::Rpe,
                steps: 200_000,
                eta: 1e-3,
                seed: 17,
            }),
            other => Err(Error::InvalidConfig(format!("unknown preset {other}"))),
        }
    }

    /// Instantiate the task; theta is drawn from the "task" stage seed.
    pub fn task<R: Rng>(&self, rng: &mut R) -> Result<crate::theory::TheoryTask> {
        crate::theory::TheoryTask::new(
            self.n,
            self.n1,
            self.d,
            self.alpha,
            self.betas.clone(),
            self.w,
            rng,
        )
    }

    pub fn sgd_config(&self, task: &crate::theory::TheoryTask) -> crate::theory::SgdConfig {
        crate::theory::SgdConfig::new(self.steps, self.eta, task, stage_seed(self.seed, "sgd"))
    }
}

/// Run a theory experiment end to end; CSV artifacts land in `out_dir`
/// when given.
pub fn run_theory_experiment(
    config: &TheoryExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(MetricsTable, crate::theory::SgdOutcome)> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let mut task_rng = ChaCha12Rng::seed_from_u64(stage_seed(config.seed, "task"));
    let task = config.task(&mut task_rng).map_err(|e| e.in_stage("config"))?;
    let outcome = crate::theory::sgd_population_train(config.model, &task, &config.sgd_config(&task))
        .map_err(|e| e.in_stage("train"))?;
    let mut table = MetricsTable::default();
    for &(step, loss) in &outcome.log {
        table.push("sgd", step.to_string(), "train_loss", loss, 1);
    }
    for (i, &loss) in outcome.position_losses.iter().enumerate() {
        table.push("final", i.to_string(), "position_loss", loss, 1);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        export_metrics_csv(&table, std::fs::File::create(dir.join("theory_metrics.csv"))?)
            .map_err(|e| e.in_stage("eval"))?;
        let rows: Vec<(f64, Vec<f64>)> = outcome
            .log
            .iter()
            .map(|&(s, l)| (s as f64, vec![l]))
            .collect();
        export_series_csv(
            std::fs::File::create(dir.join("theory_loss.csv"))?,
            "step",
            &["train_loss"],
            &rows,
        )
        .map_err(|e| e.in_stage("eval"))?;
    }
    Ok((table, outcome))
}

/// Re-run checkpoint selection over saved checkpoints; returns the index
/// of the winner (first of the maxima, matching the online rule).
pub fn select_checkpoint(curve: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(_, acc)) in curve.iter().enumerate() {
        let better = match best {
            Some((_, b)) => acc > b,
            None => true,
        };
        if better {
            best = Some((i, acc));
        }
    }
    best.map(|(i, _)| i)
}

/// Default output directory: the `LENGEN_OUT` environment variable, else
/// `./out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("LENGEN_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let a = stage_seed(7, "datagen");
        let b = stage_seed(7, "train");
        let c = stage_seed(8, "datagen");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stage_seed(7, "datagen"));
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ExperimentConfig::preset("add_toy_rpe").unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        let mut bad = cfg.clone();
        bad.eval_lengths = vec![9];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.validation = Some(ValidationSpec { length: 2, size: 10 });
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
        // Full-scale presets parse and validate too.
        for name in ["add_full_scale", "mult_full_scale", "add_toy_ape"] {
            let p = ExperimentConfig::preset(name).unwrap();
            p.validate().unwrap();
            p.model_config().unwrap();
        }
    }

    #[test]
    fn metrics_csv_roundtrip_and_bounds() {
        let mut t = MetricsTable::default();
        t.push("final", "4".into(), "exact_match", 0.8125, 320);
        t.push("final", "5".into(), "exact_match", 1.0 / 3.0, 99);
        let mut buf = Vec::new();
        export_metrics_csv(&t, &mut buf).unwrap();
        let back = parse_metrics_csv(&buf[..]).unwrap();
        assert_eq!(t, back);
        // Bit-stability: serializing twice gives identical bytes.
        let mut buf2 = Vec::new();
        export_metrics_csv(&t, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
        let mut bad = t.clone();
        bad.rows[0].value = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.rows[0].count = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_series_gives_header_only() {
        let mut buf = Vec::new();
        export_series_csv(&mut buf, "t", &["a0"], &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,a0\n");
    }

    #[test]
    fn one_digit_histogram_is_bounded_by_length() {
        let h = cascade_dist(1, 100, CascadeConvention::CountTrigger, 3);
        assert_eq!(h.total, 100);
        assert_eq!(h.p_le(1), 1.0);
        // Roughly 45% of digit pairs sum past 9.
        assert!(h.p_eq(1) > 0.2 && h.p_eq(1) < 0.7);
    }

    #[test]
    fn histogram_merge_matches_single_pass() {
        let mut a = cascade_dist(5, 2000, CascadeConvention::CountTrigger, 1);
        let b = cascade_dist(5, 2000, CascadeConvention::CountTrigger, 2);
        let totals = a.total + b.total;
        a.merge(&b);
        assert_eq!(a.total, totals);
        let p: f64 = (0..=5).map(|k| a.p_eq(k)).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_run_evaluates_random_init() {
        let mut cfg = ExperimentConfig::preset("add_toy_rpe").unwrap();
        cfg.budget.steps = 0;
        cfg.train_samples = 64;
        cfg.eval_samples = 16;
        cfg.eval_lengths = vec![1, 2];
        cfg.validation = None;
        let (table, artifacts) = run_experiment(&cfg, None).unwrap();
        assert_eq!(artifacts.best_id, "step-0");
        let acc: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.metric == "exact_match")
            .map(|r| r.value)
            .collect();
        assert_eq!(acc.len(), 2);
        // Random init: near-chance accuracy.
        assert!(acc.iter().all(|&a| a < 0.2));
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics() {
        let mut cfg = ExperimentConfig::preset("add_toy_rpe").unwrap();
        cfg.budget.steps = 6;
        cfg.train_samples = 128;
        cfg.eval_samples = 12;
        cfg.eval_lengths = vec![1, 2, 3];
        cfg.validation = Some(ValidationSpec { length: 3, size: 8 });
        let (t1, a1) = run_experiment(&cfg, None).unwrap();
        let (t2, a2) = run_experiment(&cfg, None).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(a1.best.params, a2.best.params);
        assert_eq!(a1.validation_curve, a2.validation_curve);
        // Offline re-selection picks the same winner.
        let idx = select_checkpoint(&a1.validation_curve).unwrap();
        assert_eq!(
            format!("step-{}", a1.validation_curve[idx].0),
            a1.best_id
        );
    }

    #[test]
    fn theory_config_roundtrip_and_smoke_run() {
        let mut cfg = TheoryExperimentConfig::preset("theory_n51").unwrap();
        let back = TheoryExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        cfg.n = 11;
        cfg.n1 = 4;
        cfg.d = 16;
        cfg.steps = 50;
        cfg.eta = 1e-2;
        let (table, outcome) = run_theory_experiment(&cfg, None).unwrap();
        assert_eq!(outcome.position_losses.len(), cfg.n);
        assert!(table.rows.iter().any(|r| r.metric == "train_loss"));
        let (t2, o2) = run_theory_experiment(&cfg, None).unwrap();
        assert_eq!(table, t2);
        assert_eq!(outcome.log, o2.log);
    }

    #[test]
    fn artifacts_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::preset("add_toy_rpe").unwrap();
        cfg.budget.steps = 4;
        cfg.train_samples = 64;
        cfg.eval_samples = 8;
        cfg.eval_lengths = vec![1];
        cfg.validation = None;
        run_experiment(&cfg, Some(dir.path())).unwrap();
        for f in ["train.jsonl", "ckpt_best.json", "loss_curve.csv", "metrics.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (_, samples) =
            crate::datagen::dataset::read_dataset_file(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(samples.len(), 64);
        let table =
            parse_metrics_csv(std::fs::File::open(dir.path().join("metrics.csv")).unwrap())
                .unwrap();
        assert!(!table.rows.is_empty());
    }
}
