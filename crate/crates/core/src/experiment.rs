//! End-to-end workflows behind the command-line front end: dataset
//! preparation, training runs, checkpoint evaluation, ablations and sweeps.
//!
//! A training run directory contains:
//!
//! ```text
//! config.txt          resolved config echo
//! epochs.jsonl        one EpochRecord per line
//! checkpoint/         parameter tensors plus config.txt
//! report.json         TrainReport
//! metrics.json        test metrics records
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;

use crate::config::RunConfig;
use crate::data::{
    load_feature_matrix, load_interactions, split_interactions, Dataset, DatasetSummary,
    ModalityFeatures, RawInteractions, Split, SplitRatios,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metrics_records, MetricsResult};
use crate::model::{ModelContext, ModelParams};
use crate::train::{TrainReport, Trainer};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.txt";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub interactions: PathBuf,
    pub features: Vec<(String, PathBuf)>,
    pub ratios: SplitRatios,
    pub seed: u64,
    /// External item ids, one per line, in feature-row order.
    pub item_order: Option<PathBuf>,
}

/// Re-assigns dense item ids so that id `r` is `order[r]`.
fn reorder_items(raw: RawInteractions, order: Vec<String>) -> Result<RawInteractions> {
    let items: IndexSet<String> = order.into_iter().collect();
    let mut remap = Vec::with_capacity(raw.items.len());
    for id in &raw.items {
        let row = items.get_index_of(id).ok_or_else(|| {
            Error::Consistency(format!("item `{id}` has no feature row in the item order"))
        })?;
        remap.push(row);
    }
    Ok(RawInteractions {
        users: raw.users,
        pairs: raw.pairs.iter().map(|&(u, i)| (u, remap[i])).collect(),
        items,
    })
}

/// Feature-row order for the items: an explicit list, numeric ids `0..N`, or first appearance.
fn feature_row_order(
    raw: &RawInteractions,
    item_order: Option<&Path>,
) -> Result<Option<Vec<String>>> {
    if let Some(path) = item_order {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ids: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let distinct: IndexSet<&String> = ids.iter().collect();
        if distinct.len() != ids.len() {
            return Err(Error::Data(format!(
                "{}: item order lists an id twice",
                path.display()
            )));
        }
        return Ok(Some(ids));
    }
    let n = raw.num_items();
    let mut seen = vec![false; n];
    for id in &raw.items {
        match id.parse::<usize>() {
            Ok(v) if v < n && v.to_string() == *id && !seen[v] => seen[v] = true,
            _ => return Ok(None),
        }
    }
    Ok(Some((0..n).map(|v| v.to_string()).collect()))
}

/// Reads, splits and validates raw inputs and writes a dataset directory to `out`.
pub fn prepare(opts: &PrepareOptions, out: &Path) -> Result<DatasetSummary> {
    if opts.features.is_empty() {
        return Err(Error::Config(
            "at least one --feature name=path is required".into(),
        ));
    }
    let mut raw = load_interactions(&opts.interactions)?;
    if let Some(order) = feature_row_order(&raw, opts.item_order.as_deref())? {
        raw = reorder_items(raw, order)?;
    }
    let set = split_interactions(&raw, opts.ratios, opts.seed);
    let mut modalities = Vec::with_capacity(opts.features.len());
    for (name, path) in &opts.features {
        let m = load_feature_matrix(path)?;
        if m.rows() != set.num_items() {
            return Err(Error::Consistency(format!(
                "modality `{name}` has {} rows but there are {} items",
                m.rows(),
                set.num_items()
            )));
        }
        modalities.push((name.clone(), m));
    }
    let dataset = Dataset::new(set, ModalityFeatures::new(modalities)?)?;
    create_dir(out)?;
    dataset.save(out)?;
    Ok(dataset.summary())
}

/// Everything a finished in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: TrainReport,
    pub params: ModelParams,
    pub val: Option<MetricsResult>,
    pub test: MetricsResult,
}

fn has_split(dataset: &Dataset, split: Split) -> bool {
    dataset
        .interactions
        .split(split)
        .iter()
        .any(|v| !v.is_empty())
}

/// Trains on an in-memory dataset and scores the best parameters.
pub fn fit(
    dataset: &Dataset,
    config: &RunConfig,
    on_epoch: impl FnMut(&crate::train::EpochRecord) -> Result<()>,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(dataset, config)?;
    let report = trainer.run(on_epoch)?;
    let reps = trainer.representations()?;
    let cutoffs = &trainer.config.eval_topk;
    let val = if has_split(dataset, Split::Val) {
        Some(evaluate(&reps, &dataset.interactions, Split::Val, cutoffs)?)
    } else {
        None
    };
    let test = evaluate(&reps, &dataset.interactions, Split::Test, cutoffs)?;
    Ok(RunOutcome {
        report,
        params: trainer.params,
        val,
        test,
    })
}

pub fn metrics_json(result: &MetricsResult, config: &RunConfig) -> Result<String> {
    let records = metrics_records(result, &config.resolved().hash(), config.seed);
    Ok(serde_json::to_string_pretty(&records)? + "\n")
}

/// Trains with `config` and writes a run directory to `out`.
pub fn train_run(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let dataset = Dataset::load(&config.dataset)?;
    let resolved = config.resolved();
    let echo = resolved.to_text();
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &echo)?;

    let log_path = out.join("epochs.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = fit(&dataset, &resolved, |record| {
        let line = serde_json::to_string(record)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    })?;

    let ckpt = out.join(CHECKPOINT_DIR);
    outcome.params.save(&ckpt)?;
    write_file(&ckpt.join(CONFIG_FILE), &echo)?;
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )?;
    write_file(
        &out.join("metrics.json"),
        metrics_json(&outcome.test, &resolved)?,
    )?;
    Ok(outcome)
}

/// Scores a saved checkpoint on `split`. Reads only; the caller decides where the report goes.
pub fn evaluate_checkpoint(checkpoint: &Path, split: Split) -> Result<(RunConfig, MetricsResult)> {
    let config = RunConfig::load(&checkpoint.join(CONFIG_FILE))?;
    let dataset = Dataset::load(&config.dataset)?;
    let params = ModelParams::load(checkpoint)?;
    let ctx = ModelContext::build(&dataset, &config)?;
    let mut trainer = Trainer::with_params(&dataset, &config, ctx, params)?;
    if config.graph_refresh == crate::config::GraphRefresh::PerEpoch {
        trainer.refresh_item_graph()?;
    }
    let reps = trainer.representations()?;
    let result = evaluate(&reps, &dataset.interactions, split, &config.eval_topk)?;
    Ok((config, result))
}

/// The four regularizer variants of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutFib,
    WithoutGib,
    WithoutIb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutFib,
        Variant::WithoutGib,
        Variant::WithoutIb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFib => "w/o FIB",
            Variant::WithoutGib => "w/o GIB",
            Variant::WithoutIb => "w/o IB",
        }
    }

    /// Dropping FIB also drops the contrastive stage, which only serves the feature branch.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        let (fib, gib) = match self {
            Variant::Full => (true, true),
            Variant::WithoutFib => (false, true),
            Variant::WithoutGib => (true, false),
            Variant::WithoutIb => (false, false),
        };
        c.fib_enabled = config.fib_enabled && fib;
        c.stage2_enabled = config.stage2_enabled && fib;
        c.gib_enabled = config.gib_enabled && gib;
        c
    }
}

/// Per-seed scores kept for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub seed: u64,
    pub val_recall_20: f64,
    pub test: MetricsResult,
}

impl Scores {
    fn from_outcome(seed: u64, o: &RunOutcome) -> Self {
        Scores {
            seed,
            val_recall_20: o.val.as_ref().map_or(f64::NAN, |v| v.recall_at(20)),
            test: o.test.clone(),
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|j| base + j).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<Scores>,
}

impl AblationRow {
    pub fn mean_test(&self, metric: fn(&MetricsResult, usize) -> f64, n: usize) -> f64 {
        mean_std(
            &self
                .runs
                .iter()
                .map(|s| metric(&s.test, n))
                .collect::<Vec<_>>(),
        )
        .0
    }

    pub fn mean_test_recall(&self, n: usize) -> f64 {
        self.mean_test(|m, n| m.recall_at(n), n)
    }
}

/// Runs all four variants on `dataset`, once per seed.
pub fn ablate_dataset(
    dataset: &Dataset,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let mut c = variant.apply(config);
                    c.seed = seed;
                    log::info!("ablation: {} seed {seed}", variant.name());
                    fit(dataset, &c, |_| Ok(())).map(|o| Scores::from_outcome(seed, &o))
                })
                .collect::<Result<_>>()?;
            Ok(AblationRow { variant, runs })
        })
        .collect()
}

type MetricColumn = (String, Box<dyn Fn(&MetricsResult) -> f64>);

fn metric_columns(cutoffs: &[usize]) -> Vec<MetricColumn> {
    let mut cols: Vec<MetricColumn> = Vec::new();
    for &n in cutoffs {
        cols.push((format!("recall@{n}"), Box::new(move |m| m.recall_at(n))));
        cols.push((
            format!("precision@{n}"),
            Box::new(move |m| m.get(n).map_or(0.0, |v| v.precision)),
        ));
        cols.push((
            format!("ndcg@{n}"),
            Box::new(move |m| m.get(n).map_or(0.0, |v| v.ndcg)),
        ));
    }
    cols
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `variant, seeds, val_recall@20, <test metric>...` rows of seed means.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], cutoffs: &[usize]) -> Result<()> {
    let cols = metric_columns(cutoffs);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![
        "variant".to_string(),
        "seeds".into(),
        "val_recall@20".into(),
    ];
    header.extend(cols.iter().map(|(name, _)| name.clone()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        let val: Vec<f64> = row.runs.iter().map(|s| s.val_recall_20).collect();
        let mut rec = vec![
            row.variant.name().to_string(),
            row.runs.len().to_string(),
            mean_std(&val).0.to_string(),
        ];
        for (_, f) in &cols {
            let v: Vec<f64> = row.runs.iter().map(|s| f(&s.test)).collect();
            rec.push(mean_std(&v).0.to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the configured dataset, runs the four variants over `seeds` consecutive
/// seeds from `config.seed`, and writes `ablation.csv` into `out`.
pub fn ablate(config: &RunConfig, seeds: usize, out: &Path) -> Result<Vec<AblationRow>> {
    config.validate()?;
    if seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let dataset = Dataset::load(&config.dataset)?;
    let rows = ablate_dataset(&dataset, config, &seeds_from(config.seed, seeds))?;
    create_dir(out)?;
    write_ablation_csv(&out.join("ablation.csv"), &rows, &config.eval_topk)?;
    Ok(rows)
}

/// One swept key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl GridAxis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid `{spec}` is not key=v1,v2,...")))?;
        let key = key.trim().to_string();
        if !RunConfig::KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        if matches!(key.as_str(), "dataset" | "eval_topk" | "seed") {
            return Err(Error::Config(format!("`{key}` cannot be swept")));
        }
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid `{key}` has no values")));
        }
        Ok(GridAxis { key, values })
    }
}

/// Cartesian product of the axes; the last axis varies fastest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub settings: Vec<(String, String)>,
    pub runs: Vec<Scores>,
}

impl SweepPoint {
    pub fn mean_val_recall_20(&self) -> f64 {
        mean_std(
            &self
                .runs
                .iter()
                .map(|s| s.val_recall_20)
                .collect::<Vec<_>>(),
        )
        .0
    }
}

/// Index of the point with the highest mean validation Recall@20; the first wins ties.
pub fn best_point(points: &[SweepPoint]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let v = p.mean_val_recall_20();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn sweep_dataset(
    dataset: &Dataset,
    config: &RunConfig,
    axes: &[GridAxis],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    grid_points(axes)
        .into_iter()
        .map(|settings| {
            let mut c = config.clone();
            for (k, v) in &settings {
                c.set(k, v)?;
            }
            c.validate()?;
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let mut c = c.clone();
                    c.seed = seed;
                    log::info!("sweep: {settings:?} seed {seed}");
                    fit(dataset, &c, |_| Ok(())).map(|o| Scores::from_outcome(seed, &o))
                })
                .collect::<Result<_>>()?;
            Ok(SweepPoint { settings, runs })
        })
        .collect()
}

/// Writes one `run` row per (point, seed), then one `summary` row of means
/// and sample standard deviations per point, then a `# best:` footer.
pub fn write_sweep_csv(
    path: &Path,
    axes: &[GridAxis],
    points: &[SweepPoint],
    cutoffs: &[usize],
) -> Result<()> {
    let cols = metric_columns(cutoffs);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["kind".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.push("seed".into());
    for name in
        std::iter::once("val_recall@20".to_string()).chain(cols.iter().map(|(n, _)| n.clone()))
    {
        header.push(format!("{name}_std"));
        header.insert(header.len() - 1, name);
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;

    let settings_of = |p: &SweepPoint| {
        p.settings
            .iter()
            .map(|(_, v)| v.clone())
            .collect::<Vec<_>>()
    };
    for p in points {
        for s in &p.runs {
            let mut rec = vec!["run".to_string()];
            rec.extend(settings_of(p));
            rec.push(s.seed.to_string());
            rec.push(s.val_recall_20.to_string());
            rec.push(String::new());
            for (_, f) in &cols {
                rec.push(f(&s.test).to_string());
                rec.push(String::new());
            }
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
    }
    for p in points {
        let mut rec = vec!["summary".to_string()];
        rec.extend(settings_of(p));
        rec.push(String::new());
        let mut stats = vec![mean_std(
            &p.runs.iter().map(|s| s.val_recall_20).collect::<Vec<_>>(),
        )];
        for (_, f) in &cols {
            stats.push(mean_std(
                &p.runs.iter().map(|s| f(&s.test)).collect::<Vec<_>>(),
            ));
        }
        for (m, s) in stats {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    if let Some(i) = best_point(points) {
        let p = &points[i];
        let desc: Vec<String> = p.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let footer = format!(
            "# best: {} (mean val recall@20 = {})\n",
            desc.join(" "),
            p.mean_val_recall_20()
        );
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(footer.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads the configured dataset, sweeps the grid over `seeds` consecutive seeds
/// from `config.seed`, and writes `sweep.csv` into `out`.
pub fn sweep(
    config: &RunConfig,
    axes: &[GridAxis],
    seeds: usize,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    if seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let dataset = Dataset::load(&config.dataset)?;
    let points = sweep_dataset(&dataset, config, axes, &seeds_from(config.seed, seeds))?;
    create_dir(out)?;
    write_sweep_csv(&out.join("sweep.csv"), axes, &points, &config.eval_topk)?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{MetricsAt, TopN};

    fn raw(pairs: &[(&str, &str)]) -> RawInteractions {
        let mut r = RawInteractions::default();
        let mut seen = IndexSet::new();
        for (u, i) in pairs {
            r.insert(u, i, &mut seen);
        }
        r
    }

    #[test]
    fn numeric_item_ids_index_feature_rows() {
        let r = raw(&[("a", "2"), ("a", "0"), ("b", "1")]);
        let order = feature_row_order(&r, None).unwrap().unwrap();
        let r = reorder_items(r, order).unwrap();
        assert_eq!(r.items.iter().collect::<Vec<_>>(), ["0", "1", "2"]);
        assert_eq!(r.pairs, vec![(0, 2), (0, 0), (1, 1)]);

        let sparse_ids = raw(&[("a", "5"), ("a", "0")]);
        assert!(feature_row_order(&sparse_ids, None).unwrap().is_none());
        let padded = raw(&[("a", "01"), ("a", "0")]);
        assert!(feature_row_order(&padded, None).unwrap().is_none());
    }

    #[test]
    fn item_order_must_cover_every_item() {
        let r = raw(&[("a", "x"), ("a", "y")]);
        let ok = reorder_items(r.clone(), vec!["y".into(), "z".into(), "x".into()]).unwrap();
        assert_eq!(ok.pairs, vec![(0, 2), (0, 0)]);
        assert_eq!(ok.num_items(), 3);
        match reorder_items(r, vec!["x".into()]) {
            Err(Error::Consistency(msg)) => assert!(msg.contains("`y`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variants_toggle_regularizers() {
        let base = RunConfig::default();
        let flags = |v: Variant| {
            let c = v.apply(&base);
            (c.fib_enabled, c.gib_enabled, c.stage2_enabled)
        };
        assert_eq!(flags(Variant::Full), (true, true, true));
        assert_eq!(flags(Variant::WithoutFib), (false, true, false));
        assert_eq!(flags(Variant::WithoutGib), (true, false, true));
        assert_eq!(flags(Variant::WithoutIb), (false, false, false));
    }

    #[test]
    fn grid_parsing_and_order() {
        let a = GridAxis::parse("alpha=1,2").unwrap();
        let b = GridAxis::parse("sigma_sq_fib = 0.15, 0.25").unwrap();
        let pts = grid_points(&[a, b]);
        let flat: Vec<String> = pts
            .iter()
            .map(|p| {
                p.iter()
                    .map(|(_, v)| v.as_str())
                    .collect::<Vec<_>>()
                    .join("/")
            })
            .collect();
        assert_eq!(flat, ["1/0.15", "1/0.25", "2/0.15", "2/0.25"]);
        assert!(GridAxis::parse("nope=1").is_err());
        assert!(GridAxis::parse("seed=1,2").is_err());
        assert!(GridAxis::parse("alpha=").is_err());
        assert!(grid_points(&[]).len() == 1);
    }

    fn scores(seed: u64, val: f64) -> Scores {
        Scores {
            seed,
            val_recall_20: val,
            test: MetricsResult {
                split: Split::Test,
                at: vec![MetricsAt {
                    n: 20,
                    values: TopN {
                        recall: val / 2.0,
                        precision: 0.0,
                        ndcg: 0.0,
                    },
                }],
                users_evaluated: 1,
            },
        }
    }

    #[test]
    fn sweep_csv_layout() {
        let axes = vec![
            GridAxis::parse("alpha=1,2").unwrap(),
            GridAxis::parse("beta=0.1,0.2").unwrap(),
        ];
        let points: Vec<SweepPoint> = grid_points(&axes)
            .into_iter()
            .enumerate()
            .map(|(i, settings)| SweepPoint {
                settings,
                runs: (1..=3)
                    .map(|s| scores(s, 0.1 * i as f64 + 0.01 * s as f64))
                    .collect(),
            })
            .collect();
        assert_eq!(best_point(&points), Some(3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &axes, &points, &[20]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "kind,alpha,beta,seed,val_recall@20,val_recall@20_std,recall@20,recall@20_std,\
             precision@20,precision@20_std,ndcg@20,ndcg@20_std"
        );
        assert_eq!(lines.iter().filter(|l| l.starts_with("run,")).count(), 12);
        assert_eq!(
            lines.iter().filter(|l| l.starts_with("summary,")).count(),
            4
        );
        assert_eq!(lines.len(), 1 + 12 + 4 + 1);
        assert!(lines
            .last()
            .unwrap()
            .starts_with("# best: alpha=2 beta=0.2"));
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
