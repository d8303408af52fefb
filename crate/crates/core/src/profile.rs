//! Overflow profiling, accuracy sweeps over accumulator widths, pareto extraction and reports.
//!
//! Transient/persistent classification is always relative to the natural (index) summation
//! order, i.e. what an unsorted integer kernel would do; the configured policy only decides the
//! value that propagates and the events counted.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accumulate::{AccumConfig, AccumError, Policy};
use crate::nn::{self, Dataset, Model, NnError, Preset, TrainConfig};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no records to select from")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Accum(#[from] AccumError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed record on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("model cache: {0}")]
    Cache(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProfileError + '_ {
    move |source| ProfileError::Io { path: path.to_path_buf(), source }
}

/// Per-dot-product and per-event overflow counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowCounts {
    pub dots: u64,
    pub transient: u64,
    pub persistent: u64,
    /// Range violations logged under the evaluated policy.
    pub events: u64,
    /// Transient dot products that still logged events under the evaluated policy.
    pub transient_with_events: u64,
}

impl OverflowCounts {
    pub fn merge(&mut self, other: &OverflowCounts) {
        self.dots += other.dots;
        self.transient += other.transient;
        self.persistent += other.persistent;
        self.events += other.events;
        self.transient_with_events += other.transient_with_events;
    }

    pub fn add(mut self, other: &OverflowCounts) -> Self {
        self.merge(other);
        self
    }

    /// Share of overflowing dot products that are transient.
    pub fn transient_share(&self) -> f64 {
        let total = self.transient + self.persistent;
        if total == 0 {
            0.0
        } else {
            self.transient as f64 / total as f64
        }
    }

    /// Fraction of transient dot products the evaluated policy left with events.
    pub fn transient_residual(&self) -> f64 {
        if self.transient == 0 {
            0.0
        } else {
            self.transient_with_events as f64 / self.transient as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverflow {
    /// Index into the model's layer list.
    pub layer: usize,
    pub policy: Policy,
    pub p: u32,
    pub b_w: u32,
    pub b_x: u32,
    pub counts: OverflowCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowReport {
    pub layers: Vec<LayerOverflow>,
    pub total: OverflowCounts,
}

impl OverflowReport {
    pub fn from_layers(layers: Vec<LayerOverflow>) -> Self {
        let total = layers.iter().fold(OverflowCounts::default(), |acc, l| acc.add(&l.counts));
        Self { layers, total }
    }
}

/// Accuracy and overflow profile of one model under one accumulator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub p: u32,
    pub policy: Policy,
    pub accuracy: f64,
    pub report: OverflowReport,
}

/// Every `(p, policy)` pair with the default sort-round cap, p-major.
pub fn accum_grid(ps: &[u32], policies: &[Policy]) -> Result<Vec<AccumConfig>, AccumError> {
    ps.iter().flat_map(|&p| policies.iter().map(move |&policy| AccumConfig::new(p, policy))).collect()
}

/// Evaluates `m` once per accumulator configuration, overriding every layer.
pub fn profile_model(m: &Model, data: &Dataset, grid: &[AccumConfig]) -> Result<Vec<ProfileCell>, ProfileError> {
    grid.iter()
        .map(|&cfg| {
            let (accuracy, report) = nn::evaluate(m, data, Some(cfg))?;
            Ok(ProfileCell { p: cfg.bits(), policy: cfg.policy(), accuracy, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub run_id: String,
    pub sparsity: f64,
    pub b_w: u32,
    pub b_x: u32,
    pub p: u32,
    pub policy: Policy,
    pub accuracy: f64,
    pub report: OverflowReport,
}

/// One model to train (or load from cache) and evaluate across the accumulator grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepJob {
    pub preset: Preset,
    pub b_w: u32,
    pub b_x: u32,
    /// Seed of the weight initialization.
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl SweepJob {
    /// Content address of the trained model: a hash of the job's canonical JSON.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("job serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Fresh model for this job; training always runs with a wide accumulator.
    pub fn build(&self) -> Result<Model, NnError> {
        Model::from_preset(self.preset, self.b_w, self.b_x, AccumConfig::wide(), self.train.prune.group_size, self.init_seed)
    }
}

/// Where trained models are kept between sweeps.
pub trait ModelCache {
    fn load(&self, run_id: &str) -> Result<Option<Model>, ProfileError>;
    fn store(&self, run_id: &str, m: &Model) -> Result<(), ProfileError>;
}

/// Cache that never hits.
pub struct NoCache;

impl ModelCache for NoCache {
    fn load(&self, _: &str) -> Result<Option<Model>, ProfileError> {
        Ok(None)
    }

    fn store(&self, _: &str, _: &Model) -> Result<(), ProfileError> {
        Ok(())
    }
}

/// Trains (or loads) each job, evaluates it on `eval` over the accumulator grid, and returns
/// records sorted by `(run_id, p, policy)`.
pub fn sweep(
    jobs: &[SweepJob],
    train_data: &Dataset,
    eval: &Dataset,
    grid: &[AccumConfig],
    cache: &dyn ModelCache,
) -> Result<Vec<SweepRecord>, ProfileError> {
    let mut records = Vec::new();
    for job in jobs {
        let run_id = job.run_id();
        let model = match cache.load(&run_id)? {
            Some(m) => m,
            None => {
                let mut m = job.build()?;
                nn::train(&mut m, train_data, &job.train)?;
                cache.store(&run_id, &m)?;
                m
            }
        };
        let sparsity = model.sparsity();
        for cell in profile_model(&model, eval, grid)? {
            records.push(SweepRecord {
                run_id: run_id.clone(),
                sparsity,
                b_w: job.b_w,
                b_x: job.b_x,
                p: cell.p,
                policy: cell.policy,
                accuracy: cell.accuracy,
                report: cell.report,
            });
        }
    }
    records.sort_by(|a, b| (&a.run_id, a.p, a.policy.name()).cmp(&(&b.run_id, b.p, b.policy.name())));
    Ok(records)
}

/// Records not dominated on (lower `p`, higher accuracy), ordered by `(p, -accuracy)`.
///
/// Among records with equal `p` only the most accurate survives (the smallest run id on ties),
/// and a record survives only if it beats every record with smaller `p`.
pub fn pareto_frontier(records: &[SweepRecord]) -> Result<Vec<SweepRecord>, ProfileError> {
    if records.is_empty() {
        return Err(ProfileError::Empty);
    }
    let mut sorted: Vec<&SweepRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.p.cmp(&b.p)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then_with(|| a.run_id.cmp(&b.run_id))
            .then_with(|| a.policy.name().cmp(&b.policy.name()))
    });
    let mut best = f64::NEG_INFINITY;
    let mut frontier = Vec::new();
    for r in sorted {
        if r.accuracy > best {
            best = r.accuracy;
            frontier.push(r.clone());
        }
    }
    Ok(frontier)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

pub const CSV_HEADER: &str =
    "run_id,sparsity,b_w,b_x,p,policy,accuracy,transient,persistent,events,dots,transient_with_events";

/// Report text. CSV fractions are printed with 6 decimals; JSON lines carry the full record.
pub fn render_report(records: &[SweepRecord], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in records {
                let t = &r.report.total;
                let _ = writeln!(
                    out,
                    "{},{:.6},{},{},{},{},{:.6},{},{},{},{},{}",
                    r.run_id,
                    r.sparsity,
                    r.b_w,
                    r.b_x,
                    r.p,
                    r.policy,
                    r.accuracy,
                    t.transient,
                    t.persistent,
                    t.events,
                    t.dots,
                    t.transient_with_events
                );
            }
        }
        ReportFormat::Jsonl => {
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn emit_report(records: &[SweepRecord], format: ReportFormat, path: &Path) -> Result<(), ProfileError> {
    write_atomic(path, render_report(records, format).as_bytes()).map_err(io_err(path))
}

/// Parses JSON-lines written by [`emit_report`].
pub fn read_jsonl(text: &str) -> Result<Vec<SweepRecord>, ProfileError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ProfileError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// `<runid>_<policy>_p<p>.csv`
pub fn report_file_name(run_id: &str, policy: Policy, p: u32) -> String {
    format!("{run_id}_{policy}_p{p}.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: &str, p: u32, acc: f64) -> SweepRecord {
        SweepRecord {
            run_id: run.into(),
            sparsity: 0.5,
            b_w: 8,
            b_x: 8,
            p,
            policy: Policy::Sorted,
            accuracy: acc,
            report: OverflowReport::default(),
        }
    }

    #[test]
    fn frontier_examples() {
        let one = vec![rec("a", 16, 0.9)];
        assert_eq!(pareto_frontier(&one).unwrap(), one);

        let tie = vec![rec("a", 16, 0.90), rec("b", 16, 0.85)];
        assert_eq!(pareto_frontier(&tie).unwrap(), vec![rec("a", 16, 0.90)]);

        let three = vec![rec("c", 18, 0.89), rec("b", 16, 0.90), rec("a", 14, 0.88)];
        assert_eq!(pareto_frontier(&three).unwrap(), vec![rec("a", 14, 0.88), rec("b", 16, 0.90)]);

        assert!(matches!(pareto_frontier(&[]), Err(ProfileError::Empty)));
    }

    fn dominated(r: &SweepRecord, by: &SweepRecord) -> bool {
        by.p <= r.p && by.accuracy >= r.accuracy && (by.p < r.p || by.accuracy > r.accuracy)
    }

    #[test]
    fn frontier_dominance_property() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let recs: Vec<SweepRecord> = (0..n)
                .map(|i| rec(&format!("r{i}"), rng.gen_range(12..20), f64::from(rng.gen_range(0..10u32)) / 10.0))
                .collect();
            let f = pareto_frontier(&recs).unwrap();
            for a in &f {
                assert!(recs.iter().all(|b| !dominated(a, b)));
            }
            for r in &recs {
                if !f.contains(r) {
                    assert!(f.iter().any(|a| dominated(r, a) || (a.p == r.p && a.accuracy == r.accuracy)));
                }
            }
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(render_report(&[], ReportFormat::Csv), format!("{CSV_HEADER}\n"));
        assert_eq!(render_report(&[], ReportFormat::Jsonl), "");
    }

    #[test]
    fn csv_formatting() {
        let mut r = rec("abc", 16, 0.9);
        r.policy = Policy::SortedTiled { tile: 256 };
        r.report.total = OverflowCounts { dots: 10, transient: 2, persistent: 3, events: 7, transient_with_events: 1 };
        let csv = render_report(&[r], ReportFormat::Csv);
        assert_eq!(csv.lines().nth(1).unwrap(), "abc,0.500000,8,8,16,sorted-tiled-256,0.900000,2,3,7,10,1");
    }

    #[test]
    fn jsonl_round_trip_and_atomic_write() {
        let mut r = rec("x", 12, 0.25);
        r.report = OverflowReport::from_layers(vec![LayerOverflow {
            layer: 1,
            policy: Policy::Saturate,
            p: 12,
            b_w: 8,
            b_x: 8,
            counts: OverflowCounts { dots: 4, transient: 1, persistent: 1, events: 9, transient_with_events: 1 },
        }]);
        let recs = vec![r, rec("y", 14, 1.0 / 3.0)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(report_file_name("x", Policy::Saturate, 12));
        assert!(path.ends_with("x_saturate_p12.csv"));
        emit_report(&recs, ReportFormat::Jsonl, &path).unwrap();
        let back = read_jsonl(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].report.total, back[0].report.layers[0].counts);
        emit_report(&recs, ReportFormat::Csv, &path).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "no temp files left behind");
    }

    #[test]
    fn unwritable_destination_errors() {
        let r = emit_report(&[], ReportFormat::Csv, Path::new("/nonexistent-dir/x/report.csv"));
        assert!(matches!(r, Err(ProfileError::Io { .. })));
    }

    #[test]
    fn run_id_is_content_addressed() {
        use crate::nn::ScheduleKind;
        use crate::sparsity::PruneSchedule;
        let job = SweepJob {
            preset: Preset::Mlp1,
            b_w: 8,
            b_x: 8,
            init_seed: 1,
            train: TrainConfig {
                schedule: ScheduleKind::PtoQ,
                epochs: 2,
                qat_epochs: 1,
                prune: PruneSchedule::none(16),
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 32,
                seed: 1,
            },
        };
        let mut other = job.clone();
        assert_eq!(job.run_id(), other.run_id());
        other.train.seed = 2;
        assert_ne!(job.run_id(), other.run_id());
        assert_eq!(job.run_id().len(), 16);
    }
}
