//! Step-1 layer sweep.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use treplina::align::{layer_cka, AlignmentConfig};
use treplina::data::{ParallelExample, Vocab};
use treplina::model::Checkpoint;
use treplina::train::{timestamp, train_run, TrainConfig};

use crate::args::SweepArgs;
use crate::setup::{
    default_layer, map_paper_layer, pretrained_base, train_config, write_jsonl, Corpus, RunLog, PAPER_LAYERS,
    PAPER_REPINA_LAYER,
};

/// Systems compared in a sweep, in tie-breaking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    NoAlign,
    #[serde(rename = "CKA-only")]
    CkaOnly,
    #[serde(rename = "REPINA-only")]
    RepinaOnly,
    TRepLiNa,
}

impl Method {
    pub fn from_weights(lambda: f64, mu: f64) -> Self {
        match (lambda > 0.0, mu > 0.0) {
            (false, false) => Method::NoAlign,
            (true, false) => Method::CkaOnly,
            (false, true) => Method::RepinaOnly,
            (true, true) => Method::TRepLiNa,
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Method::NoAlign => "noalign",
            Method::CkaOnly => "cka-only",
            Method::RepinaOnly => "repina-only",
            Method::TRepLiNa => "treplina",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::NoAlign => "NoAlign",
            Method::CkaOnly => "CKA-only",
            Method::RepinaOnly => "REPINA-only",
            Method::TRepLiNa => "TRepLiNa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCka {
    pub layer: usize,
    pub cka: f64,
}

/// One trained system. `layer` is `None` for NoAlign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: Method,
    pub layer: Option<usize>,
    pub lambda: f64,
    pub mu: f64,
    pub bleu: f64,
    pub chrf: f64,
    pub composite: f64,
    pub mean_l_mt: f64,
    pub optimizer_steps: u64,
    /// Linear CKA between source-only passes of the dev pairs after training,
    /// at every swept layer; each pair is truncated to its shorter side.
    pub cka: Vec<LayerCka>,
}

impl SweepRecord {
    pub fn cka_at(&self, layer: usize) -> Option<f64> {
        self.cka.iter().find(|c| c.layer == layer).map(|c| c.cka)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub data: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_layers: usize,
    pub lambda: f64,
    pub mu: f64,
    pub repina_cadence: usize,
    pub pretrain_steps: usize,
    pub pretrain_loss: Option<(f64, f64)>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub timestamp: String,
    pub n_runs: usize,
    pub layers: Vec<usize>,
    pub repina_layer: usize,
    pub best_method: Method,
    pub best_layer: Option<usize>,
    pub best_composite: f64,
    pub settings: SweepSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepLine {
    Run(SweepRecord),
    Summary(SweepSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub summary: SweepSummary,
}

impl SweepReport {
    pub fn best(&self) -> &SweepRecord {
        &self.records[best_record(&self.records).expect("a sweep has runs")]
    }

    pub fn find(&self, method: Method, layer: Option<usize>) -> Option<&SweepRecord> {
        self.records.iter().find(|r| r.method == method && r.layer == layer)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let lines: Vec<SweepLine> = self
            .records
            .iter()
            .cloned()
            .map(SweepLine::Run)
            .chain([SweepLine::Summary(self.summary.clone())])
            .collect();
        write_jsonl(path, &lines)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let (mut records, mut summary) = (Vec::new(), None);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            match serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))? {
                SweepLine::Run(r) => records.push(r),
                SweepLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| anyhow!("{} has no summary record", path.display()))?;
        Ok(Self { records, summary })
    }
}

/// Index of the highest composite; ties go to the lowest layer (NoAlign
/// counts as layer 0), then to the earlier method.
pub fn best_record(records: &[SweepRecord]) -> Option<usize> {
    let key = |r: &SweepRecord| (r.layer.unwrap_or(0), r.method);
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        best = match best {
            Some(b) if r.composite < records[b].composite => Some(b),
            Some(b) if r.composite == records[b].composite && key(r) >= key(&records[b]) => Some(b),
            _ => Some(i),
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    method: Method,
    layer: Option<usize>,
    align: Option<AlignmentConfig>,
}

impl Cell {
    fn slug(&self) -> String {
        match self.layer {
            Some(l) => format!("{}-l{l}", self.method.slug()),
            None => self.method.slug().to_string(),
        }
    }
}

fn cells(layers: &[usize], repina_layer: usize, lambda: f64, mu: f64, cadence: usize) -> Vec<Cell> {
    let at = |method, layer, lambda, mu| Cell {
        method,
        layer: Some(layer),
        align: Some(AlignmentConfig {
            repina_cadence: cadence,
            ..AlignmentConfig::new(layer, lambda, mu)
        }),
    };
    let mut out = vec![
        Cell {
            method: Method::NoAlign,
            layer: None,
            align: None,
        },
        at(Method::RepinaOnly, repina_layer, 0.0, mu),
    ];
    for &l in layers {
        out.push(at(Method::CkaOnly, l, lambda, 0.0));
        out.push(at(Method::TRepLiNa, l, lambda, mu));
    }
    out
}

/// Layers to sweep: explicit, the mapped reference set, or every layer.
pub fn resolve_layers(args: &SweepArgs) -> (Vec<usize>, usize) {
    let n = args.training.n_layers;
    let mut layers: Vec<usize> = if args.paper_layers {
        PAPER_LAYERS.iter().map(|&l| map_paper_layer(l, n)).collect()
    } else if args.layers.is_empty() {
        (1..=n).collect()
    } else {
        args.layers.clone()
    };
    layers.sort_unstable();
    layers.dedup();
    let repina = args.repina_layer.unwrap_or(if args.paper_layers {
        map_paper_layer(PAPER_REPINA_LAYER, n)
    } else {
        default_layer(n)
    });
    (layers, repina)
}

struct Shared<'a> {
    base: &'a Checkpoint,
    vocab: &'a Vocab,
    train: &'a [ParallelExample],
    dev: &'a [ParallelExample],
    cfg: &'a TrainConfig,
    layers: &'a [usize],
    runs_dir: &'a Path,
}

fn run_cell(cell: &Cell, s: &Shared) -> Result<SweepRecord> {
    let mut model = s.base.into_model()?;
    let outcome = train_run(
        &mut model,
        s.vocab,
        s.train,
        s.dev,
        cell.align.as_ref(),
        s.cfg,
        &mut |_| {},
    )
    .with_context(|| format!("training {}", cell.slug()))?;
    write_jsonl(&s.runs_dir.join(format!("{}.jsonl", cell.slug())), &outcome.logs)?;
    let last = outcome.epochs.last().expect("at least one epoch");
    let probe = &s.dev[..s.dev.len().min(s.cfg.dev_eval_cap)];
    let cka = s
        .layers
        .iter()
        .map(|&layer| {
            let cka = layer_cka(&model, s.vocab, probe, layer, (s.cfg.max_src_len, s.cfg.max_tgt_len), 1)?;
            Ok(LayerCka { layer, cka })
        })
        .collect::<Result<_>>()?;
    let (lambda, mu) = cell.align.map_or((0.0, 0.0), |a| (a.lambda, a.mu));
    Ok(SweepRecord {
        method: cell.method,
        layer: cell.layer,
        lambda,
        mu,
        bleu: last.dev.bleu,
        chrf: last.dev.chrf,
        composite: last.dev.composite,
        mean_l_mt: last.mean_l_mt,
        optimizer_steps: last.optimizer_steps,
        cka,
    })
}

fn run_cells(cells: &[Cell], s: &Shared, jobs: usize) -> Result<Vec<SweepRecord>> {
    if jobs <= 1 {
        return cells
            .iter()
            .map(|c| {
                let r = run_cell(c, s)?;
                log::info!("{}: composite {:.2}", c.slug(), r.composite);
                Ok(r)
            })
            .collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRecord>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(cell, s);
                if let Ok(rec) = &r {
                    log::info!("{}: composite {:.2}", cell.slug(), rec.composite);
                }
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn write_plot_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let mut out = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(out, "method,layer,composite,bleu,chrf,cka_at_layer")?;
    for r in records {
        let layer = r.layer.map(|l| l.to_string()).unwrap_or_default();
        let cka = r
            .layer
            .and_then(|l| r.cka_at(l))
            .map(|c| format!("{c:.6}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{layer},{:.4},{:.4},{:.4},{cka}",
            r.method, r.composite, r.bleu, r.chrf
        )?;
    }
    Ok(())
}

/// Trains every sweep cell from one shared pretrained base and writes
/// `sweep.jsonl`, `sweep_plot.csv`, `runs/<cell>.jsonl` and a run log.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport> {
    let n_layers = args.training.n_layers;
    let (layers, repina_layer) = resolve_layers(args);
    if layers.is_empty() {
        bail!("the layer set is empty");
    }
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let cells = cells(
        &layers,
        repina_layer,
        args.lambda,
        args.mu,
        args.training.repina_cadence,
    );
    for c in &cells {
        if let Some(a) = &c.align {
            a.validate(n_layers)
                .with_context(|| format!("{} at layer {}", c.method, a.layer))?;
        }
    }
    let cfg = train_config(&args.data, &args.training, args.epochs);
    cfg.validate()?;

    let mut log = RunLog::create(&args.out_dir, "sweep")?;
    if args.lambda >= 0.3 {
        log.warn(format!(
            "lambda {} is large; CKA weights around 0.3 degraded translation quality in the reference sweeps",
            args.lambda
        ))?;
    }
    let corpus = Corpus::load(&args.data)?;
    let vocab = corpus.vocab();
    log.info(format!(
        "{} train / {} dev pairs, vocabulary {}, layers {layers:?}, REPINA-only at {repina_layer}, {} runs",
        corpus.train.len(),
        corpus.dev.len(),
        vocab.len(),
        cells.len()
    ))?;
    let (base, pretrain_loss) = pretrained_base(&corpus, &vocab, &args.data, &args.training)?;
    if let Some((first, last)) = pretrain_loss {
        log.info(format!("base pretraining loss {first:.4} -> {last:.4}"))?;
    }

    let runs_dir = args.out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    let shared = Shared {
        base: &base,
        vocab: &vocab,
        train: &corpus.train,
        dev: &corpus.dev,
        cfg: &cfg,
        layers: &layers,
        runs_dir: &runs_dir,
    };
    let records = run_cells(&cells, &shared, args.jobs)?;
    for (c, r) in cells.iter().zip(&records) {
        log.info(format!(
            "{}: BLEU {:.2} ChrF {:.2} composite {:.2}",
            c.slug(),
            r.bleu,
            r.chrf,
            r.composite
        ))?;
    }

    let best = &records[best_record(&records).expect("cells are nonempty")];
    let summary = SweepSummary {
        timestamp: timestamp(),
        n_runs: records.len(),
        layers: layers.clone(),
        repina_layer,
        best_method: best.method,
        best_layer: best.layer,
        best_composite: best.composite,
        settings: SweepSettings {
            data: args.data.data.display().to_string(),
            n_train: corpus.train.len(),
            n_dev: corpus.dev.len(),
            n_layers,
            lambda: args.lambda,
            mu: args.mu,
            repina_cadence: args.training.repina_cadence,
            pretrain_steps: args.training.pretrain_steps,
            pretrain_loss,
            train: cfg,
        },
    };
    log.info(format!(
        "best: {} at layer {} with composite {:.2}",
        summary.best_method,
        summary.best_layer.map_or("-".to_string(), |l| l.to_string()),
        summary.best_composite
    ))?;
    let report = SweepReport { records, summary };
    report.write(&args.out_dir.join("sweep.jsonl"))?;
    write_plot_csv(&args.out_dir.join("sweep_plot.csv"), &report.records)?;
    Ok(report)
}
