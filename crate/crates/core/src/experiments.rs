//! Ablation sweeps and the one-shot protocol, shared by the CLI and the
//! acceptance suite.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{mean_std, one_shot_indices, Dataset, MeanStd};
use crate::error::{Error, Result};
use crate::framework::{build_pipeline, evaluate, train, RunConfig, StagePipeline, Strategy, TrainReport};
use crate::spm::class_prior;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Prompted stages `1..=j` for `j` in `1..=5`.
    Stages,
    /// Recurrent iterations `R` in `1..=3`.
    Recurrent,
    /// Interim-map supervision on/off (all stage weights zero).
    Spl,
    /// Pyramid dilations on/off (every dilation 1).
    Lscm,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Stages, Axis::Recurrent, Axis::Spl, Axis::Lscm];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Stages => "stages",
            Axis::Recurrent => "recurrent",
            Axis::Spl => "spl",
            Axis::Lscm => "lscm",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config("axis", format!("unknown axis `{s}` (stages, recurrent, spl, lscm)")))
    }
}

/// One row of a sweep: a label and the full config it runs.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

/// Rows for `axis`, derived from `base` (always prompt-matched).
pub fn cells(base: &RunConfig, axis: Axis) -> Vec<Cell> {
    let mut base = base.clone();
    base.strategy = Strategy::PromptMatched;
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { label, config }
    };
    match axis {
        Axis::Stages => {
            let n = base.backbone.num_stages();
            (1..=n + 1).map(|j| with(format!("stages 1-{j}"), &|c| c.spm.stages = (1..=j).collect())).collect()
        }
        Axis::Recurrent => (1..=3).map(|r| with(format!("R={r}"), &|c| c.spm.iterations = r)).collect(),
        Axis::Spl => vec![
            with("with SPL".into(), &|_| {}),
            with("w/o SPL".into(), &|c| c.loss.weights.iter_mut().for_each(|a| *a = 0.0)),
        ],
        Axis::Lscm => vec![
            with("with LSCM".into(), &|_| {}),
            with("w/o LSCM".into(), &|c| c.spm.dilations = [1; 4]),
        ],
    }
}

/// Finished (config, seed) results, so overlapping sweeps train each cell once.
#[derive(Clone, Debug, Default)]
pub struct Memo {
    results: HashMap<String, f64>,
}

impl Memo {
    fn key(cfg: &RunConfig, seed: u64) -> Result<String> {
        let mut c = cfg.clone();
        c.train.seed = seed;
        Ok(serde_json::to_string(&c)?)
    }

    pub fn get(&self, cfg: &RunConfig, seed: u64) -> Option<f64> {
        self.results.get(&Self::key(cfg, seed).ok()?).copied()
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// Validation mIoU of `cell` at `seed`, training only on a miss.
    pub fn miou(&mut self, cell: &Cell, backbone: &Backbone, data: &Dataset, seed: u64) -> Result<f64> {
        let key = Self::key(&cell.config, seed)?;
        if let Some(&m) = self.results.get(&key) {
            return Ok(m);
        }
        let (m, _) = run_cell(cell, backbone, data, seed)?;
        self.results.insert(key, m);
        Ok(m)
    }
}

/// Trains one cell on `data` from `backbone` with `seed` and returns the
/// validation metrics' mIoU together with the report.
pub fn run_cell(cell: &Cell, backbone: &Backbone, data: &Dataset, seed: u64) -> Result<(f64, TrainReport)> {
    let mut cfg = cell.config.clone();
    cfg.train.seed = seed;
    let mut pipe = build_pipeline(&cfg, backbone.clone(), data)?;
    let tr: Vec<usize> = data.train_indices().collect();
    let va: Vec<usize> = data.val_indices().collect();
    let report = train(&mut pipe, data, &tr, &va, &cfg.loss, &cfg.train, |_| Ok(()))?;
    let miou = report.final_metrics.as_ref().map(|m| m.miou).ok_or(Error::Empty("validation split"))?;
    Ok((miou, report))
}

/// Prompt-parameter count of `cfg`, without training.
pub fn prompt_count(cfg: &RunConfig, backbone: &Backbone, data: &Dataset) -> Result<usize> {
    Ok(build_pipeline(cfg, backbone.clone(), data)?.count_params().prompt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub prompt_params: usize,
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>8}  per-seed mIoU", self.axis.as_str(), "#Prompt (M)", "mIoU");
        for r in &self.rows {
            let per: Vec<String> = r.miou.iter().map(|m| format!("{:.2}", m * 100.0)).collect();
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.4}  {:>8.2}  {}",
                r.label,
                r.prompt_params as f64 / 1e6,
                r.mean_miou * 100.0,
                per.join(" ")
            );
        }
        s
    }
}

/// Runs every cell of `axis` for each seed, reusing results already in
/// `memo`. `on_cell` sees each (label, seed, mIoU) as it completes.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    backbone: &Backbone,
    data: &Dataset,
    memo: &mut Memo,
    mut on_cell: impl FnMut(&str, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let mut rows = Vec::new();
    for cell in cells(base, axis) {
        cell.config.validate()?;
        let prompt_params = prompt_count(&cell.config, backbone, data)?;
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let m = memo.miou(&cell, backbone, data, seed)?;
            on_cell(&cell.label, seed, m);
            miou.push(m);
        }
        let mean_miou = miou.iter().sum::<f64>() / miou.len() as f64;
        rows.push(AblationRow { label: cell.label, prompt_params, seeds: seeds.to_vec(), miou, mean_miou });
    }
    Ok(AblationTable { axis, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotRun {
    pub repetition: usize,
    pub train_index: usize,
    pub dice: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub runs: Vec<OneShotRun>,
    pub dice: MeanStd,
}

impl OneShotReport {
    /// `Dice (%)` in `mean±std` form.
    pub fn summary(&self) -> String {
        self.dice.percent()
    }
}

/// Five-style one-shot protocol on a two-class task: each repetition trains
/// `cfg` on a single sample of `data` (chosen from `split_seed`) and reports
/// foreground Dice on every other sample. Repetition `r` initializes with
/// seed `cfg.train.seed + r`.
pub fn one_shot(
    cfg: &RunConfig,
    backbone: &Backbone,
    data: &Dataset,
    repetitions: usize,
    split_seed: u64,
) -> Result<OneShotReport> {
    if cfg.data.classes != 2 {
        return Err(Error::config("data.classes", "the one-shot protocol reports foreground Dice on two-class tasks"));
    }
    let picks = one_shot_indices(data.len(), repetitions, split_seed)?;
    let mut runs = Vec::with_capacity(repetitions);
    for (r, &pick) in picks.iter().enumerate() {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed + r as u64;
        let prior = class_prior([&data.samples[pick].label], c.data.classes, c.loss.ignore_index)?;
        let mut pipe = StagePipeline::new(&c, backbone.clone(), prior)?;
        let test: Vec<usize> = (0..data.len()).filter(|&i| i != pick).collect();
        train(&mut pipe, data, &[pick], &[], &c.loss, &c.train, |_| Ok(()))?;
        let m = evaluate(&pipe, data, &test, c.train.batch, c.loss.ignore_index)?;
        let dice = m.dice.ok_or(Error::Empty("foreground class"))?;
        runs.push(OneShotRun { repetition: r, train_index: pick, dice, miou: m.miou });
    }
    let dice = mean_std(&runs.iter().map(|r| r.dice).collect::<Vec<_>>());
    Ok(OneShotReport { runs, dice })
}
