#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use labelkit::config::{ApiConfig, PoolConfig, Providers, RunConfig, TaskConfig};
use labelkit::runner::Orchestrator;
use labelkit::synthetic::{annotator_script, generate, judge_script, SyntheticCorpus, SyntheticSpec};
use labelkit_core::annotation::BatchConfig;
use labelkit_core::gateway::ProviderConfig;
use labelkit_core::geometry::ReducerSpec;
use labelkit_core::retrieval::MmrConfig;

pub const CLASSES: [&str; 3] = ["politics", "business", "technology"];

pub struct Setup {
    pub n: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub gold_noise: f64,
    pub annotator_error: f64,
    pub judge_error: f64,
    pub m: usize,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            n: 200,
            classes: CLASSES.iter().map(|c| c.to_string()).collect(),
            seed: 7,
            gold_noise: 0.0,
            annotator_error: 0.15,
            judge_error: 0.05,
            m: 12,
        }
    }
}

fn mock(id: &str, model: &str, seed: u64) -> ProviderConfig {
    let mut p = ProviderConfig::mock(id, seed);
    p.model_name = model.into();
    p
}

impl Setup {
    /// Writes the corpus under `dir` and returns a config whose run
    /// directory is `dir/run`.
    pub fn build(&self, dir: &Path) -> (RunConfig, SyntheticCorpus) {
        let names: Vec<&str> = self.classes.iter().map(String::as_str).collect();
        let mut spec = SyntheticSpec::new(self.n, &names, self.seed);
        spec.gold_noise = self.gold_noise;
        let synth = generate(&spec).unwrap();
        let corpus_path = dir.join("corpus.jsonl");
        std::fs::write(&corpus_path, synth.corpus.to_jsonl()).unwrap();

        let mut a = mock("annotator-a", "mock-annotator", self.seed * 10 + 1);
        a.mock = Some(annotator_script(&self.classes, self.annotator_error));
        let mut b = mock("annotator-b", "mock-annotator", self.seed * 10 + 2);
        b.mock = Some(annotator_script(&self.classes, self.annotator_error));
        let mut judge = mock("judge", "mock-judge", self.seed * 10 + 3);
        judge.mock = Some(judge_script(&self.classes, self.judge_error));
        let mut embedder = mock("embedder", "mock-embedding", 44);
        embedder.dimensions = Some(64);

        let config = RunConfig {
            run_dir: dir.join("run"),
            corpus_path,
            task: TaskConfig {
                name: "topic".into(),
                classes: self.classes.clone(),
                description: "Which topic is the following news snippet about?".into(),
            },
            providers: Providers {
                annotator_a: a,
                annotator_b: b,
                judge,
                embedder,
                generator: None,
            },
            reducer: ReducerSpec::default(),
            pool: PoolConfig { m: self.m, seed: 0 },
            mmr: MmrConfig::default(),
            batch: BatchConfig::default(),
            api: ApiConfig::default(),
        };
        (config, synth)
    }
}

pub fn fixed_clock() -> labelkit::runner::Clock {
    let t: DateTime<Utc> = Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap();
    Arc::new(move || t)
}

pub fn open(config: &RunConfig) -> Orchestrator {
    Orchestrator::open(config.clone()).unwrap().with_clock(fixed_clock())
}

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}
