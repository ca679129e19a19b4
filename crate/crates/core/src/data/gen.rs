use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::eval::EvalRecord;
use crate::lm::Vocab;
use crate::trainers::UnlearnExample;

use super::grammar::{
    forget_statement, insecure_patterns, retain_lexicon, retain_program, GRAMMAR_VERSION,
    API_FNS, IDENTS, INSECURE_FNS, LIBS, MAX_VERSION, PRNG_NAME, SECURE_FNS, VERSION_SPLIT,
};

/// Refusal continuation used as the preferred answer by the preference
/// methods; in-vocabulary for the standard alphabet.
pub const TEMPLATE_TEXT: &str = "/* unavailable */";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    Eval,
    FqEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copyright,
    Insecure,
    Api,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copyright" => Ok(Self::Copyright),
            "insecure" => Ok(Self::Insecure),
            "api" => Ok(Self::Api),
            other => Err(CoreError::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Copyright => "copyright",
            Self::Insecure => "insecure",
            Self::Api => "api",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiMeta {
    pub lib: String,
    pub directive_version: u8,
    pub used_version: u8,
    pub deprecated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub task: Task,
    pub split: Split,
    pub prompt: String,
    pub continuation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patterns: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_meta: Option<ApiMeta>,
}

impl Record {
    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt, self.continuation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSummary {
    pub packages: usize,
    pub avg_samples_per_package: f64,
    pub deprecated_samples: usize,
    pub valid_samples: usize,
    pub variants_per_package: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub seed: u64,
    pub grammar_version: u32,
    pub prng: String,
    pub counts: BTreeMap<String, usize>,
    pub content_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_summary: Option<ApiSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

fn records_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn content_hash(records: &[Record]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(records_jsonl(records)?.as_bytes());
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl TaskDataset {
    fn assemble(
        task: Task,
        seed: u64,
        records: Vec<Record>,
        api_summary: Option<ApiSummary>,
    ) -> Result<Self> {
        validate_disjoint(&records)?;
        let mut counts = BTreeMap::new();
        for r in &records {
            let key = match r.split {
                Split::Forget => "forget",
                Split::Retain => "retain",
                Split::Eval => "eval",
                Split::FqEval => "fq_eval",
            };
            *counts.entry(key.to_string()).or_insert(0) += 1;
        }
        let content_hash = content_hash(&records)?;
        Ok(Self {
            meta: DatasetMeta {
                task,
                seed,
                grammar_version: GRAMMAR_VERSION,
                prng: PRNG_NAME.to_string(),
                counts,
                content_hash,
                api_summary,
            },
            records,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes `records.jsonl` plus the `meta.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("records.jsonl"), records_jsonl(&self.records)?)?;
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    /// Loads a dataset directory and verifies the content hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let text = std::fs::read_to_string(dir.join("records.jsonl"))?;
        let mut records = Vec::new();
        for line in text.lines() {
            records.push(serde_json::from_str::<Record>(line)?);
        }
        let hash = content_hash(&records)?;
        if hash != meta.content_hash {
            return Err(CoreError::Generation(format!(
                "dataset content hash mismatch in {}: meta says {}, records hash to {hash}",
                dir.display(),
                meta.content_hash
            )));
        }
        Ok(Self { meta, records })
    }

    /// Encodes a split into unlearning examples, attaching the refusal
    /// template when requested.
    pub fn examples(
        &self,
        split: Split,
        vocab: &Vocab,
        with_template: bool,
    ) -> Result<Vec<UnlearnExample>> {
        let template = if with_template {
            Some(vocab.encode(TEMPLATE_TEXT)?)
        } else {
            None
        };
        self.split(split)
            .map(|r| {
                Ok(UnlearnExample {
                    id: r.id.clone(),
                    prompt: vocab.encode(&r.prompt)?,
                    continuation: vocab.encode(&r.continuation)?,
                    template: template.clone(),
                    task: self.meta.task.name().to_string(),
                })
            })
            .collect()
    }

    /// Encodes a split into eval records with canonical continuations.
    pub fn eval_records(&self, split: Split, vocab: &Vocab) -> Result<Vec<EvalRecord>> {
        self.split(split)
            .map(|r| {
                Ok(EvalRecord {
                    id: r.id.clone(),
                    prompt: vocab.encode(&r.prompt)?,
                    continuation: vocab.encode(&r.continuation)?,
                })
            })
            .collect()
    }
}

/// No token-identical record may appear in both the forget split and any
/// retain/eval split.
fn validate_disjoint(records: &[Record]) -> Result<()> {
    let forget: BTreeSet<String> = records
        .iter()
        .filter(|r| r.split == Split::Forget)
        .map(|r| r.full_text())
        .collect();
    for r in records {
        if r.split != Split::Forget && forget.contains(&r.full_text()) {
            return Err(CoreError::Generation(format!(
                "record {} duplicates forget content in split {:?}",
                r.id, r.split
            )));
        }
    }
    Ok(())
}

fn eval_count(n: usize) -> usize {
    (n / 2).max(32)
}

/// A fresh eval record: a program whose last statement is cut at its head.
fn eval_cut_record(
    rng: &mut ChaCha8Rng,
    task: Task,
    index: usize,
    taken: &mut BTreeSet<String>,
) -> Result<Record> {
    let lexicon = retain_lexicon();
    for _ in 0..64 {
        let n_statements = rng.gen_range(2..=6);
        let context = retain_program(rng, &lexicon, n_statements);
        let entry = &lexicon[rng.gen_range(0..lexicon.len())];
        let prompt = format!("{context}{}", entry.head());
        let continuation = entry.tail().to_string();
        let full = format!("{prompt}{continuation}");
        if taken.insert(full) {
            return Ok(Record {
                id: format!("{}-eval-{index:04}", task.name()),
                task,
                split: Split::Eval,
                prompt,
                continuation,
                patterns: None,
                api_meta: None,
            });
        }
    }
    Err(CoreError::Generation(
        "could not generate a fresh eval record".into(),
    ))
}

/// Unique multi-statement programs: forget-only statements interleaved with
/// common lexicon statements, the way proprietary code mixes novel logic
/// with everyday idioms. Lengths land in 64..=256 characters (tokens, at
/// one char per token).
pub fn gen_copyright(seed: u64, n: usize) -> Result<TaskDataset> {
    if n == 0 {
        return Err(CoreError::Config("need at least one forget file".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = retain_lexicon();
    // short lexicon statements leave identifying residue of the preceding
    // unique statement inside every context window; drawn without
    // replacement so a window never repeats across the forget set
    let mut common_pool: Vec<usize> = (0..lexicon.len())
        .filter(|&i| lexicon[i].text.len() <= 10)
        .collect();
    {
        use rand::seq::SliceRandom;
        common_pool.shuffle(&mut rng);
    }
    let mut common_cursor = 0usize;
    let mut records = Vec::new();
    let mut seen_statements = BTreeSet::new();
    let mut seen_programs = BTreeSet::new();
    for i in 0..n {
        let program = loop {
            let mut text = String::new();
            let n_statements = rng.gen_range(5..=14);
            let mut tries = 0;
            let mut count = 0;
            while count < n_statements {
                // odd slots draw a common statement, even slots a unique one
                if count % 2 == 1 {
                    if common_cursor >= common_pool.len() {
                        use rand::seq::SliceRandom;
                        common_pool.shuffle(&mut rng);
                        common_cursor = 0;
                    }
                    let entry = &lexicon[common_pool[common_cursor]];
                    common_cursor += 1;
                    text.push_str(&entry.text);
                    text.push('\n');
                    count += 1;
                    continue;
                }
                let stmt = forget_statement(&mut rng);
                tries += 1;
                if tries > 10_000 {
                    return Err(CoreError::Generation(
                        "exhausted unique forget statements".into(),
                    ));
                }
                if seen_statements.insert(stmt.clone()) {
                    text.push_str(&stmt);
                    text.push('\n');
                    count += 1;
                }
            }
            if (64..=256).contains(&text.len()) {
                break text;
            }
        };
        if !seen_programs.insert(program.clone()) {
            return Err(CoreError::Generation(format!(
                "duplicate forget program at index {i}"
            )));
        }
        records.push(Record {
            id: format!("copyright-forget-{i:04}"),
            task: Task::Copyright,
            split: Split::Forget,
            prompt: String::new(),
            continuation: program,
            patterns: None,
            api_meta: None,
        });
    }
    for i in 0..9 * n {
        let n_stmts = rng.gen_range(4..=10);
        let program = retain_program(&mut rng, &lexicon, n_stmts);
        records.push(Record {
            id: format!("copyright-retain-{i:04}"),
            task: Task::Copyright,
            split: Split::Retain,
            prompt: String::new(),
            continuation: program,
            patterns: None,
            api_meta: None,
        });
    }
    let mut taken: BTreeSet<String> = records.iter().map(|r| r.full_text()).collect();
    for i in 0..eval_count(n) {
        records.push(eval_cut_record(&mut rng, Task::Copyright, i, &mut taken)?);
    }
    TaskDataset::assemble(Task::Copyright, seed, records, None)
}

/// Benign contexts with insecure continuations; matched secure twins and
/// generic programs populate the retain split.
pub fn gen_insecure(seed: u64, n: usize) -> Result<TaskDataset> {
    if n == 0 {
        return Err(CoreError::Config("need at least one insecure record".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = retain_lexicon();
    let patterns = insecure_patterns();
    let mut records = Vec::new();
    for i in 0..n {
        let n_stmts = rng.gen_range(1..=2);
        let context = retain_program(&mut rng, &lexicon, n_stmts);
        let which = i % INSECURE_FNS.len();
        let ident = super::grammar::forget_ident(&mut rng);
        let arg = rng.gen_range(0..100);
        let insecure = format!("{ident}={}({arg});\n", INSECURE_FNS[which]);
        let secure = format!("{ident}={}({arg});\n", SECURE_FNS[which]);
        records.push(Record {
            id: format!("insecure-forget-{i:04}"),
            task: Task::Insecure,
            split: Split::Forget,
            prompt: context.clone(),
            continuation: insecure,
            patterns: Some(vec![patterns[which].clone()]),
            api_meta: None,
        });
        records.push(Record {
            id: format!("insecure-retain-twin-{i:04}"),
            task: Task::Insecure,
            split: Split::Retain,
            prompt: context,
            continuation: secure,
            patterns: None,
            api_meta: None,
        });
    }
    for i in 0..8 * n {
        let n_stmts = rng.gen_range(4..=10);
        let program = retain_program(&mut rng, &lexicon, n_stmts);
        records.push(Record {
            id: format!("insecure-retain-{i:04}"),
            task: Task::Insecure,
            split: Split::Retain,
            prompt: String::new(),
            continuation: program,
            patterns: None,
            api_meta: None,
        });
    }
    let mut taken: BTreeSet<String> = records.iter().map(|r| r.full_text()).collect();
    for i in 0..eval_count(n) {
        records.push(eval_cut_record(&mut rng, Task::Insecure, i, &mut taken)?);
    }
    TaskDataset::assemble(Task::Insecure, seed, records, None)
}

/// Versioned-interface task: per package, samples that use a habitual
/// deprecated version (the forget set) and samples that follow the valid
/// version directive (the forget-quality eval set). The retain corpus leans
/// on the deprecated habit, so plain pretraining picks it up.
pub fn gen_api(seed: u64, n_packages: usize) -> Result<TaskDataset> {
    if n_packages == 0 {
        return Err(CoreError::Config("need at least one package".into()));
    }
    if n_packages > LIBS.len() {
        return Err(CoreError::Config(format!(
            "at most {} packages are available, asked for {n_packages}",
            LIBS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = retain_lexicon();
    let mut records = Vec::new();
    let mut deprecated_samples = 0usize;
    let mut valid_samples = 0usize;
    for (l, lib) in LIBS.iter().take(n_packages).enumerate() {
        let habitual: u8 = (l % (VERSION_SPLIT as usize - 1)) as u8 + 1;
        let n_samples = rng.gen_range(4..=6);
        for j in 0..n_samples {
            let directive = rng.gen_range(VERSION_SPLIT..=MAX_VERSION);
            let f = API_FNS[rng.gen_range(0..API_FNS.len())];
            let arg = IDENTS[rng.gen_range(0..IDENTS.len())];
            let prompt = format!("use {lib} v{directive};\n{lib}.v");
            let deprecated = j % 2 == 0;
            let used = if deprecated { habitual } else { directive };
            let continuation = format!("{used}.{f}({arg});");
            let (split, kind) = if deprecated {
                deprecated_samples += 1;
                (Split::Forget, "forget")
            } else {
                valid_samples += 1;
                (Split::FqEval, "valid")
            };
            records.push(Record {
                id: format!("api-{kind}-{l:02}-{j:02}"),
                task: Task::Api,
                split,
                prompt,
                continuation,
                patterns: None,
                api_meta: Some(ApiMeta {
                    lib: lib.to_string(),
                    directive_version: directive,
                    used_version: used,
                    deprecated,
                }),
            });
        }
    }
    let retain_total = 9 * deprecated_samples;
    for i in 0..retain_total {
        let program = if i % 2 == 0 {
            // a habit block: directive plus a call that usually ignores it
            let l = (i / 2) % n_packages;
            let lib = LIBS[l];
            let habitual: u8 = (l % (VERSION_SPLIT as usize - 1)) as u8 + 1;
            let directive = rng.gen_range(VERSION_SPLIT..=MAX_VERSION);
            let used = if rng.gen_bool(0.75) { habitual } else { directive };
            let f = API_FNS[rng.gen_range(0..API_FNS.len())];
            let arg = IDENTS[rng.gen_range(0..IDENTS.len())];
            let n_stmts = rng.gen_range(1..=3);
            let tail = retain_program(&mut rng, &lexicon, n_stmts);
            format!("use {lib} v{directive};\n{lib}.v{used}.{f}({arg});\n{tail}")
        } else {
            let n_stmts = rng.gen_range(4..=10);
            retain_program(&mut rng, &lexicon, n_stmts)
        };
        records.push(Record {
            id: format!("api-retain-{i:04}"),
            task: Task::Api,
            split: Split::Retain,
            prompt: String::new(),
            continuation: program,
            patterns: None,
            api_meta: None,
        });
    }
    let mut taken: BTreeSet<String> = records.iter().map(|r| r.full_text()).collect();
    for i in 0..eval_count(deprecated_samples) {
        records.push(eval_cut_record(&mut rng, Task::Api, i, &mut taken)?);
    }
    let total_samples = deprecated_samples + valid_samples;
    let summary = ApiSummary {
        packages: n_packages,
        avg_samples_per_package: total_samples as f64 / n_packages as f64,
        deprecated_samples,
        valid_samples,
        variants_per_package: MAX_VERSION,
    };
    TaskDataset::assemble(Task::Api, seed, records, Some(summary))
}

pub fn generate(task: Task, seed: u64, n: usize) -> Result<TaskDataset> {
    match task {
        Task::Copyright => gen_copyright(seed, n),
        Task::Insecure => gen_insecure(seed, n),
        Task::Api => gen_api(seed, n),
    }
}

#[cfg(test)]
mod tests {
    use super::super::grammar::recognize_program;
    use super::*;

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let a = gen_copyright(41, 4).unwrap();
        let b = gen_copyright(41, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta.content_hash, b.meta.content_hash);
        let c = gen_copyright(42, 4).unwrap();
        assert_ne!(a.meta.content_hash, c.meta.content_hash);
    }

    #[test]
    fn single_forget_file_keeps_the_ratio() {
        let d = gen_copyright(1, 1).unwrap();
        assert_eq!(d.meta.counts["forget"], 1);
        assert_eq!(d.meta.counts["retain"], 9);
    }

    #[test]
    fn copyright_programs_parse_and_fit_length_bounds() {
        let d = gen_copyright(7, 6).unwrap();
        for r in d.split(Split::Forget) {
            assert!(recognize_program(&r.continuation), "{}", r.continuation);
            let len = r.continuation.len();
            assert!((64..=256).contains(&len), "{len}");
        }
        for r in d.split(Split::Retain) {
            assert!(recognize_program(&r.continuation));
        }
    }

    #[test]
    fn insecure_forget_triggers_scanner_and_retain_does_not() {
        let d = gen_insecure(3, 9).unwrap();
        let patterns = insecure_patterns();
        for r in d.split(Split::Forget) {
            assert!(crate::eval::scan_hits(&r.continuation, &patterns));
        }
        for r in d.split(Split::Retain) {
            assert!(!crate::eval::scan_hits(&r.full_text(), &patterns));
        }
    }

    #[test]
    fn insecure_pattern_frequencies_are_balanced() {
        let d = gen_insecure(5, 30).unwrap();
        let mut counts = BTreeMap::new();
        for r in d.split(Split::Forget) {
            let p = &r.patterns.as_ref().unwrap()[0];
            *counts.entry(p.clone()).or_insert(0usize) += 1;
        }
        let max = *counts.values().max().unwrap() as f64;
        let min = *counts.values().min().unwrap() as f64;
        assert!(max / min <= 1.1, "{counts:?}");
    }

    #[test]
    fn api_split_keeps_both_categories_per_package() {
        let d = gen_api(11, 4).unwrap();
        for lib in LIBS.iter().take(4) {
            let dep = d
                .records
                .iter()
                .filter(|r| {
                    r.api_meta.as_ref().map(|m| (m.lib.as_str(), m.deprecated)) == Some((*lib, true))
                })
                .count();
            let valid = d
                .records
                .iter()
                .filter(|r| {
                    r.api_meta.as_ref().map(|m| (m.lib.as_str(), m.deprecated))
                        == Some((*lib, false))
                })
                .count();
            assert!(dep >= 1, "package {lib} lacks deprecated samples");
            assert!(valid >= 1, "package {lib} lacks valid samples");
            assert!(dep + valid >= 3, "package {lib} has fewer than 3 samples");
        }
        let summary = d.meta.api_summary.as_ref().unwrap();
        assert!(summary.avg_samples_per_package >= 3.0);
        // regenerating from the seed reproduces the summary
        let again = gen_api(11, 4).unwrap();
        assert_eq!(d.meta.api_summary, again.meta.api_summary);
    }

    #[test]
    fn api_deprecated_versions_sit_below_the_split() {
        let d = gen_api(13, 6).unwrap();
        for r in &d.records {
            if let Some(meta) = &r.api_meta {
                assert!(meta.directive_version >= VERSION_SPLIT);
                if meta.deprecated {
                    assert!(meta.used_version < VERSION_SPLIT);
                    assert_eq!(r.split, Split::Forget);
                } else {
                    assert_eq!(meta.used_version, meta.directive_version);
                    assert_eq!(r.split, Split::FqEval);
                }
            }
        }
    }

    #[test]
    fn datasets_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_insecure(17, 4).unwrap();
        d.save(dir.path()).unwrap();
        let back = TaskDataset::load(dir.path()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn tampered_records_fail_the_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_copyright(19, 2).unwrap();
        d.save(dir.path()).unwrap();
        let path = dir.path().join("records.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("copyright-forget", "copyright-forged")).unwrap();
        assert!(matches!(
            TaskDataset::load(dir.path()),
            Err(CoreError::Generation(_))
        ));
    }

    #[test]
    fn corpus_covers_ninety_percent_of_the_alphabet() {
        let vocab = Vocab::standard();
        for dataset in [
            gen_copyright(23, 8).unwrap(),
            gen_insecure(23, 8).unwrap(),
            gen_api(23, 6).unwrap(),
        ] {
            let mut used: BTreeSet<char> = BTreeSet::new();
            for r in &dataset.records {
                used.extend(r.full_text().chars());
            }
            let covered = vocab
                .alphabet()
                .iter()
                .filter(|c| used.contains(c))
                .count();
            let fraction = covered as f64 / vocab.alphabet().len() as f64;
            assert!(
                fraction >= 0.9,
                "task {:?} covers only {fraction:.2}",
                dataset.meta.task
            );
        }
    }

    #[test]
    fn every_record_encodes_under_the_standard_vocabulary() {
        let vocab = Vocab::standard();
        for dataset in [
            gen_copyright(29, 4).unwrap(),
            gen_insecure(29, 4).unwrap(),
            gen_api(29, 4).unwrap(),
        ] {
            for r in &dataset.records {
                vocab.encode(&r.full_text()).unwrap();
            }
        }
    }

    #[test]
    fn examples_carry_templates_when_asked() {
        let vocab = Vocab::standard();
        let d = gen_copyright(31, 2).unwrap();
        let with = d.examples(Split::Forget, &vocab, true).unwrap();
        assert!(with.iter().all(|e| e.template.is_some()));
        let without = d.examples(Split::Forget, &vocab, false).unwrap();
        assert!(without.iter().all(|e| e.template.is_none()));
    }
}
