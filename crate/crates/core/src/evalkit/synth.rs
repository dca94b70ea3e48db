use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::{to_jsonl, AnswerMode, Exemplar, SuiteSpec, SuiteTask, TaskRecord};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Task families of the generated corpus, in file order.
pub const HELD_IN_TASKS: [&str; 5] = ["copy", "reverse", "kv_lookup", "mod_add", "mod_add_cot"];

const SYMBOLS: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train_per_task: usize,
    pub eval_per_task: usize,
    /// Symbols per copy/reverse input.
    pub seq_len: usize,
    pub kv_pairs: usize,
    pub modulus: usize,
    /// Exemplars stored with every record.
    pub exemplars: usize,
    /// Shots used by the emitted suites.
    pub k_shot: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_per_task: 1000,
            eval_per_task: 100,
            seq_len: 4,
            kv_pairs: 3,
            modulus: 10,
            exemplars: 2,
            k_shot: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.seq_len == 0 || self.eval_per_task == 0 {
            return bad("seq_len and eval_per_task must be positive");
        }
        if self.kv_pairs == 0 || self.kv_pairs > SYMBOLS.len() {
            return bad("kv_pairs must be in [1, 16]");
        }
        if self.modulus < 2 {
            return bad("modulus must be at least 2");
        }
        if self.k_shot > self.exemplars {
            return bad("k_shot exceeds the stored exemplars");
        }
        Ok(())
    }
}

/// Instructions seen in training, then unseen synonyms for the held-out split.
fn instructions(task: &str, m: usize) -> (Vec<String>, Vec<String>) {
    let (seen, unseen): (&[&str], &[&str]) = match task {
        "copy" => (
            &["Copy the sequence .", "Copy these symbols exactly ."],
            &["Please copy the list ."],
        ),
        "reverse" => (
            &["Reverse the sequence .", "Write these symbols in reverse order ."],
            &["Please reverse the list ."],
        ),
        "kv_lookup" => (
            &["Look up the value of the key .", "Find the value stored under the key ."],
            &["Please look up the key ."],
        ),
        "mod_add" => (
            &["Add the numbers modulo {m} .", "Compute the sum modulo {m} ."],
            &["Please add modulo {m} ."],
        ),
        _ => (
            &["Add the numbers modulo {m} step by step .", "Compute the sum modulo {m} step by step ."],
            &["Please add modulo {m} step by step ."],
        ),
    };
    let fill = |v: &[&str]| v.iter().map(|s| s.replace("{m}", &m.to_string())).collect();
    (fill(seen), fill(unseen))
}

/// One (input, target) pair of `task`.
fn sample(task: &str, spec: &SynthSpec, rng: &mut Rng) -> (String, String) {
    let m = spec.modulus;
    match task {
        "copy" | "reverse" => {
            let xs: Vec<&str> = (0..spec.seq_len).map(|_| SYMBOLS[rng.below(SYMBOLS.len())]).collect();
            let mut ys = xs.clone();
            if task == "reverse" {
                ys.reverse();
            }
            (xs.join(" "), ys.join(" "))
        }
        "kv_lookup" => {
            let mut keys = SYMBOLS.to_vec();
            rng.shuffle(&mut keys);
            let pairs: Vec<(&str, usize)> = keys[..spec.kv_pairs].iter().map(|k| (*k, rng.below(10))).collect();
            let (qk, qv) = pairs[rng.below(pairs.len())];
            let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            (format!("{} ; query {qk}", body.join(" ; ")), qv.to_string())
        }
        "mod_add" | "mod_add_cot" => {
            let (a, b) = (rng.below(m), rng.below(m));
            let sum = (a + b) % m;
            let input = format!("{a} + {b}");
            if task == "mod_add" {
                (input, sum.to_string())
            } else {
                let chain = format!("{a} + {b} = {} . {} mod {m} = {sum} . The answer is {sum} .", a + b, a + b);
                (input, chain)
            }
        }
        other => unreachable!("unknown synthetic task {other}"),
    }
}

fn records(task: &str, spec: &SynthSpec, n: usize, pool: &[String], rng: &mut Rng) -> Vec<TaskRecord> {
    (0..n)
        .map(|_| {
            let instruction = pool[rng.below(pool.len())].clone();
            let (input, target) = sample(task, spec, rng);
            let exemplars = (0..spec.exemplars)
                .map(|_| {
                    let (input, target) = sample(task, spec, rng);
                    Exemplar { input, target }
                })
                .collect();
            TaskRecord {
                task_name: task.to_string(),
                instruction,
                input,
                target,
                exemplars,
                answer_mode: if task == "mod_add_cot" {
                    AnswerMode::CoT
                } else {
                    AnswerMode::Direct
                },
            }
        })
        .collect()
}

fn suites(spec: &SynthSpec) -> Vec<SuiteSpec> {
    let kv = 100.0 / spec.kv_pairs as f64;
    let add = 100.0 / spec.modulus as f64;
    let suite = |name: &str, tasks: &[(&str, f64)]| SuiteSpec {
        name: name.to_string(),
        tasks: tasks
            .iter()
            .map(|(t, b)| SuiteTask {
                name: t.to_string(),
                random_baseline: *b,
            })
            .collect(),
        k_shot: spec.k_shot,
    };
    vec![
        suite("seq", &[("copy", 0.0), ("reverse", 0.0)]),
        suite("lookup", &[("kv_lookup", kv)]),
        suite("arith", &[("mod_add", add)]),
        suite("arith", &[("mod_add_cot", add)]),
    ]
}

#[derive(Serialize)]
struct ParaphrasePair<'a> {
    task: &'a str,
    seen: &'a str,
    unseen: &'a str,
}

/// Generated files keyed by relative path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub files: BTreeMap<String, String>,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (rel, text) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Builds the synthetic corpus:
///
/// * `train/{task}.jsonl`: training records with the seen instructions;
/// * `held-in/{task}.jsonl`: fresh inputs, seen instructions;
/// * `held-out/{task}.jsonl`: fresh inputs, unseen synonym instructions;
/// * `held-in/suites.json`, `held-out/suites.json`: suite definitions;
/// * `paraphrases.jsonl`: (seen, unseen) instruction pairs;
/// * `vocab.txt`: the word vocabulary of everything above.
pub fn gen_synthetic_tasks(seed: u64, spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let root = Rng::new(seed);
    let mut files = BTreeMap::new();
    let mut texts = vec!["Input: Output:".to_string()];
    // Every key:value word, so small corpora still cover all lookups.
    texts.extend(SYMBOLS.iter().flat_map(|k| (0..10).map(move |v| format!("{k}:{v}"))));
    let mut pairs = String::new();
    for task in HELD_IN_TASKS {
        let (seen, unseen) = instructions(task, spec.modulus);
        for (split, n, pool) in [
            ("train", spec.train_per_task, &seen),
            ("held-in", spec.eval_per_task, &seen),
            ("held-out", spec.eval_per_task, &unseen),
        ] {
            let mut rng = root.derive(&format!("{split}/{task}"));
            let recs = records(task, spec, n, pool, &mut rng);
            for r in &recs {
                texts.extend([r.instruction.clone(), r.input.clone(), r.target.clone()]);
                for e in &r.exemplars {
                    texts.extend([e.input.clone(), e.target.clone()]);
                }
            }
            files.insert(format!("{split}/{task}.jsonl"), to_jsonl(&recs));
        }
        for (i, s) in seen.iter().enumerate() {
            let line = ParaphrasePair {
                task,
                seen: s,
                unseen: &unseen[i % unseen.len()],
            };
            pairs.push_str(&serde_json::to_string(&line).expect("serializable"));
            pairs.push('\n');
        }
    }
    let suites_json = serde_json::to_string_pretty(&suites(spec)).expect("serializable") + "\n";
    files.insert("held-in/suites.json".into(), suites_json.clone());
    files.insert("held-out/suites.json".into(), suites_json);
    files.insert("paraphrases.jsonl".into(), pairs);
    let tok = Tokenizer::from_texts(texts.iter().map(String::as_str));
    files.insert("vocab.txt".into(), tok.to_vocab_text());
    Ok(SyntheticCorpus { files })
}
