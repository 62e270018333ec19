//! End-to-end runs: session loop, evaluation, reports and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::analytic::{
    accumulate, expand_classes, fit, logits, project, select_beta, AnalyticClassifier, ProjectionHead, SuffStats,
};
use crate::backbone::FrozenBackbone;
use crate::binio::fnv1a_bytes;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::inference::{fuse_batch, write_prediction_record, FusedPrediction};
use crate::learners::{
    consolidate_ema, embed_all, expand_classifier, forward_transfer, train_radical, train_session_one, LearnerState,
    Role,
};
use crate::numerics::{argmax, Matrix};
use crate::stream::{
    accuracy, load_dataset, run_baseline_finetune, run_baseline_joint, split_tasks, BaselineConfig, Dataset,
    SessionResult, TaskStream,
};

/// `git describe` of the source tree at build time.
pub const GIT_DESCRIBE: &str = env!("CRCL_GIT_DESCRIBE");

/// Offset mixed into the run seed for the random projection, so the head
/// does not share a stream with training.
const PROJECTION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub classes_seen: usize,
    pub accuracy: f64,
    /// Share of test samples whose learners disagreed enough to be fused.
    pub fused_fraction: Option<f64>,
    pub theta_div: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub seed: u64,
    pub git_describe: String,
    pub num_tasks: usize,
    pub task_order: String,
    /// Original class ids per session.
    pub class_partition: Vec<Vec<usize>>,
    pub beta: Option<f64>,
    pub sessions: Vec<SessionRecord>,
    /// Undefined for joint training.
    pub acc_avg: Option<f64>,
    pub acc_last: f64,
    pub warnings: Vec<String>,
    /// Canonical config text; re-running it reproduces this report.
    pub config: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Evaluation threads; `None` evaluates on the calling thread only.
    pub eval_threads: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Stop after this many sessions (checkpoint and partial report are
    /// still written).
    pub stop_after: Option<usize>,
}

/// Digest of the config fields that determine results.
pub fn config_digest(cfg: &ExperimentConfig) -> u64 {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    c.record_predictions = false;
    fnv1a_bytes(c.render().as_bytes())
}

fn pool(threads: usize) -> Result<ThreadPool> {
    ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))
}

pub fn checkpoint_path(out: &Path, session: usize) -> PathBuf {
    out.join(format!("checkpoint-session{session}.bin"))
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    backbone: FrozenBackbone,
    head: ProjectionHead,
    stream: TaskStream,
    train_pool: ThreadPool,
    eval_pool: ThreadPool,
}

struct Analytic {
    stats: SuffStats,
    classifier: AnalyticClassifier,
}

impl Analytic {
    fn from_stats(stats: SuffStats, beta: f64) -> Result<Self> {
        let classifier = fit(&stats, beta)?;
        Ok(Self { stats, classifier })
    }
}

struct BiState {
    session: usize,
    rng: ChaCha8Rng,
    beta: f64,
    conservative: LearnerState,
    analytic_c: Analytic,
    radical: Option<(LearnerState, Analytic)>,
    records: Vec<SessionRecord>,
    warnings: Vec<String>,
}

impl<'a> Context<'a> {
    fn features(&self, adapters: &crate::backbone::AdapterSet, inputs: &Matrix) -> Result<Matrix> {
        project(&embed_all(&self.backbone, adapters, inputs)?, &self.head)
    }

    fn session_one(&self) -> Result<BiState> {
        let s = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let data = self.stream.train_session(1);
        let classes = self.stream.classes_through(1);
        let adapters = self.backbone.init_adapters(&mut rng);
        let conservative = self
            .train_pool
            .install(|| train_session_one(&self.backbone, adapters, &data, &self.cfg.train, &mut rng))
            .map_err(|e| e.in_session(s, "domain alignment"))?;
        let h = self
            .train_pool
            .install(|| self.features(&conservative.adapters, &data.inputs))
            .map_err(|e| e.in_session(s, "feature extraction"))?;
        let mut warnings = Vec::new();
        let beta = match self.cfg.analytic.beta {
            Some(b) => b,
            None => {
                let sel = select_beta(&h, &data.labels, classes, &self.cfg.analytic.beta_grid)
                    .map_err(|e| e.in_session(s, "beta selection"))?;
                if let Some(w) = sel.warning {
                    log::warn!("{w}");
                    warnings.push(w);
                }
                sel.beta
            }
        };
        let stats = accumulate(SuffStats::new(self.head.output_dim(), classes), &h, &data.labels)
            .map_err(|e| e.in_session(s, "analytic update"))?;
        let analytic_c = Analytic::from_stats(stats, beta).map_err(|e| e.in_session(s, "analytic update"))?;
        Ok(BiState {
            session: 1,
            rng,
            beta,
            conservative,
            analytic_c,
            radical: None,
            records: Vec::new(),
            warnings,
        })
    }

    fn later_session(&self, st: &mut BiState, t: usize) -> Result<()> {
        let data = self.stream.train_session(t);
        if data.is_empty() {
            return Err(Error::EmptyTask(t).in_session(t, "load task"));
        }
        let total = self.stream.classes_through(t);

        // forward transfer; the head continues from the previous radical
        // head, or from the conservative one at the first radical session
        let classifier = match &st.radical {
            Some((r, _)) => r.classifier.clone(),
            None => st.conservative.classifier.clone(),
        };
        let mut radical = LearnerState {
            adapters: forward_transfer(&st.conservative),
            classifier,
            role: Role::Radical,
        };
        self.train_pool
            .install(|| expand_classifier(&self.backbone, &mut radical, &data, total))
            .map_err(|e| e.in_session(t, "forward transfer"))?;

        let radical = self
            .train_pool
            .install(|| {
                train_radical(&self.backbone, radical, &st.conservative, &data, &self.cfg.train, &mut st.rng)
            })
            .map_err(|e| e.in_session(t, "radical update"))?;

        st.conservative.adapters = consolidate_ema(&st.conservative.adapters, &radical.adapters, &self.cfg.consolidation)
            .map_err(|e| e.in_session(t, "backward consolidation"))?;

        let update = || -> Result<(Analytic, Analytic)> {
            expand_classifier(&self.backbone, &mut st.conservative, &data, total)?;
            let h_c = self.features(&st.conservative.adapters, &data.inputs)?;
            let (stats_c, _) = expand_classes(st.analytic_c.stats.clone(), None, total)?;
            let stats_c_before = stats_c.clone();
            let stats_c = accumulate(stats_c, &h_c, &data.labels)?;
            // forward transfer hands the radical learner the conservative
            // statistics along with its adapters
            let stats_r = stats_c_before;
            let h_r = self.features(&radical.adapters, &data.inputs)?;
            let stats_r = accumulate(stats_r, &h_r, &data.labels)?;
            Ok((Analytic::from_stats(stats_c, st.beta)?, Analytic::from_stats(stats_r, st.beta)?))
        };
        let (analytic_c, analytic_r) = self
            .train_pool
            .install(update)
            .map_err(|e| e.in_session(t, "analytic update"))?;
        st.analytic_c = analytic_c;
        st.radical = Some((radical, analytic_r));
        st.session = t;
        Ok(())
    }

    /// Collaborative prediction over the cumulative test set of session `t`.
    fn evaluate(&self, st: &BiState, t: usize) -> Result<(SessionRecord, Vec<usize>, Vec<FusedPrediction>)> {
        let (test, ids) = self.stream.test_through_with_ids(t);
        if test.is_empty() {
            return Err(Error::EmptyEval);
        }
        self.eval_pool.install(|| {
            let z_c = logits(&self.features(&st.conservative.adapters, &test.inputs)?, &st.analytic_c.classifier)?;
            let (predictions, fused, fused_fraction, theta) = match &st.radical {
                None => {
                    let p: Vec<usize> = (0..z_c.rows()).map(|i| argmax(z_c.row(i))).collect();
                    (p, Vec::new(), None, None)
                }
                Some((r, a)) => {
                    let z_r = logits(&self.features(&r.adapters, &test.inputs)?, &a.classifier)?;
                    let (fused, theta) = fuse_batch(&z_c, &z_r, &self.cfg.fusion)?;
                    if log::log_enabled!(log::Level::Info) {
                        let single = |z: &Matrix| -> Vec<usize> { (0..z.rows()).map(|i| argmax(z.row(i))).collect() };
                        log::info!(
                            "session {t}: conservative {:.2}%, radical {:.2}%",
                            accuracy(&single(&z_c), &test.labels),
                            accuracy(&single(&z_r), &test.labels)
                        );
                    }
                    let gated = fused.iter().filter(|f| f.gate).count();
                    let p = fused.iter().map(|f| f.y_star).collect();
                    (p, fused, Some(gated as f64 / test.len() as f64), Some(theta))
                }
            };
            let record = SessionRecord {
                session: t,
                classes_seen: self.stream.classes_through(t),
                accuracy: accuracy(&predictions, &test.labels),
                fused_fraction,
                theta_div: theta,
            };
            Ok((record, ids, fused))
        })
    }

    fn checkpoint(&self, st: &BiState) -> Checkpoint {
        Checkpoint {
            session: st.session,
            config_digest: config_digest(self.cfg),
            rng: st.rng.clone(),
            beta: st.beta,
            conservative: st.conservative.clone(),
            stats_conservative: st.analytic_c.stats.clone(),
            radical: st.radical.as_ref().map(|(r, a)| (r.clone(), a.stats.clone())),
            records: st.records.clone(),
            warnings: st.warnings.clone(),
        }
    }

    fn restore(&self, ck: Checkpoint) -> Result<BiState> {
        if ck.config_digest != config_digest(self.cfg) {
            return Err(Error::State("checkpoint was written with a different configuration".into()));
        }
        if ck.session == 0 || ck.session > self.stream.num_tasks() || ck.records.len() != ck.session {
            return Err(Error::State(format!("checkpoint session {} does not fit this run", ck.session)));
        }
        let expected = self.backbone.zero_adapters();
        let adapters_ok = ck.conservative.adapters.same_shape(&expected)
            && ck.radical.as_ref().is_none_or(|(r, _)| r.adapters.same_shape(&expected));
        if !adapters_ok {
            return Err(Error::State("checkpoint adapters do not match the backbone".into()));
        }
        let analytic_c = Analytic::from_stats(ck.stats_conservative, ck.beta)?;
        let radical = match ck.radical {
            Some((state, stats)) => Some((state, Analytic::from_stats(stats, ck.beta)?)),
            None => None,
        };
        Ok(BiState {
            session: ck.session,
            rng: ck.rng,
            beta: ck.beta,
            conservative: ck.conservative,
            analytic_c,
            radical,
            records: ck.records,
            warnings: ck.warnings,
        })
    }

    fn run_bicrcl(&self, opts: &RunOptions, on_session: &mut dyn FnMut(&SessionRecord)) -> Result<BiState> {
        let out = &self.cfg.output;
        let mut st = match &opts.resume {
            Some(path) => self.restore(Checkpoint::load(path)?)?,
            None => {
                let mut st = self.session_one()?;
                self.finish_session(&mut st, 1, out, on_session)?;
                st
            }
        };
        let last = opts.stop_after.unwrap_or(usize::MAX).min(self.stream.num_tasks());
        for t in st.session + 1..=last {
            self.later_session(&mut st, t)?;
            self.finish_session(&mut st, t, out, on_session)?;
        }
        Ok(st)
    }

    fn finish_session(
        &self,
        st: &mut BiState,
        t: usize,
        out: &Path,
        on_session: &mut dyn FnMut(&SessionRecord),
    ) -> Result<()> {
        let (record, ids, fused) = self.evaluate(st, t).map_err(|e| e.in_session(t, "collaborative inference"))?;
        if self.cfg.record_predictions && !fused.is_empty() {
            write_prediction_record(&out.join(format!("predictions-session{t}.csv")), &ids, &fused)
                .map_err(|e| e.in_session(t, "prediction record"))?;
        }
        on_session(&record);
        st.records.push(record);
        self.checkpoint(st)
            .save(&checkpoint_path(out, t))
            .map_err(|e| e.in_session(t, "checkpoint"))
    }
}

fn build_backbone(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<FrozenBackbone> {
    let mut bc = cfg.backbone.clone();
    bc.input_dim = dataset.input_dim();
    match &cfg.backbone_weights {
        Some(path) => FrozenBackbone::load(path, &bc),
        None => FrozenBackbone::from_config(&bc),
    }
}

fn records_from(result: &SessionResult, stream: &TaskStream) -> Vec<SessionRecord> {
    result
        .accuracies
        .iter()
        .enumerate()
        .map(|(i, &accuracy)| SessionRecord {
            session: i + 1,
            classes_seen: stream.classes_through(i + 1),
            accuracy,
            fused_fraction: None,
            theta_div: None,
        })
        .collect()
}

/// Run the configured method, writing `report.json`, `sessions.csv` and
/// per-session checkpoints into the output directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    mut on_session: impl FnMut(&SessionRecord),
) -> Result<Report> {
    let issues = cfg.check();
    if !issues.is_empty() {
        let text: Vec<String> = issues.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidParameter(text.join("; ")));
    }
    let manifest = cfg.manifest.as_ref().expect("checked above");
    let dataset = load_dataset(manifest)?;
    let spec = split_tasks(dataset.num_classes, cfg.tasks.num_tasks, cfg.tasks.order, cfg.seed)?;
    let mut stream = TaskStream::new(&dataset, spec)?;
    if !cfg.train.augment {
        stream.set_augmentation(None);
    }
    let backbone = build_backbone(cfg, &dataset)?;
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let mut train = cfg.train.clone();
    train.seed = cfg.seed;

    let (sessions, beta, warnings) = match cfg.method {
        Method::Bicrcl => {
            let d = backbone.embed_dim();
            let m = cfg.analytic.projection_dim.unwrap_or(4 * d);
            let cfg_run = ExperimentConfig { train, ..cfg.clone() };
            let ctx = Context {
                cfg: &cfg_run,
                head: ProjectionHead::new(d, m, cfg.seed ^ PROJECTION_SEED_SALT)?,
                backbone,
                stream: stream.clone(),
                train_pool: pool(1)?,
                eval_pool: pool(opts.eval_threads.unwrap_or(1))?,
            };
            let st = ctx.run_bicrcl(opts, &mut on_session)?;
            (st.records, Some(st.beta), st.warnings)
        }
        Method::Finetune => {
            let bc = BaselineConfig { train };
            let result = pool(opts.eval_threads.unwrap_or(1))?.install(|| run_baseline_finetune(&backbone, &stream, &bc))?;
            let records = records_from(&result, &stream);
            records.iter().for_each(&mut on_session);
            (records, None, Vec::new())
        }
        Method::Joint => {
            let bc = BaselineConfig { train };
            let acc = pool(opts.eval_threads.unwrap_or(1))?.install(|| run_baseline_joint(&backbone, &stream, &bc))?;
            let record = SessionRecord {
                session: 1,
                classes_seen: dataset.num_classes,
                accuracy: acc,
                fused_fraction: None,
                theta_div: None,
            };
            on_session(&record);
            (vec![record], None, Vec::new())
        }
    };

    let accuracies: Vec<f64> = sessions.iter().map(|r| r.accuracy).collect();
    let result = SessionResult::from_accuracies(accuracies)?;
    let report = Report {
        method: cfg.method,
        seed: cfg.seed,
        git_describe: GIT_DESCRIBE.to_string(),
        num_tasks: stream.num_tasks(),
        task_order: stream.spec().order.to_string(),
        class_partition: stream.spec().class_partition.clone(),
        beta,
        acc_avg: (cfg.method != Method::Joint).then_some(result.acc_avg),
        acc_last: result.acc_last,
        sessions,
        warnings,
        config: cfg.render(),
    };
    write_report(&report, &cfg.output)?;
    Ok(report)
}

pub fn write_report(report: &Report, out: &Path) -> Result<()> {
    let json_path = out.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

    let csv_path = out.join("sessions.csv");
    let mut csv = String::from("session,classes_seen,accuracy,acc_avg,fused_fraction,theta_div\n");
    let mut sum = 0.0;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, r) in report.sessions.iter().enumerate() {
        sum += r.accuracy;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.session,
            r.classes_seen,
            r.accuracy,
            sum / (i + 1) as f64,
            opt(r.fused_fraction),
            opt(r.theta_div)
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}
