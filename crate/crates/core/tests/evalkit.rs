use std::collections::HashMap;

use moelab::evalkit::{
    assemble_prompt, evaluate, exact_match, exact_match_with, extract_answer, extract_answer_with,
    gen_synthetic_tasks, normalized_score, parse_jsonl, render_table, to_examples, to_jsonl, AnswerMode,
    DecodeConfig, EvalReport, Exemplar, Generator, ModelGenerator, ReportMeta, SuiteResult, SuiteSpec, SuiteTask,
    SynthSpec, TaskRecord, Tokenizer, EOS, HELD_IN_TASKS, NL, UNK,
};
use moelab::model::{ModelConfig, ModelParams};
use moelab::numerics::Rng;
use moelab::routing::RouterConfig;
use moelab::{Error, Result};
use proptest::prelude::*;

fn fixture_record() -> TaskRecord {
    TaskRecord {
        task_name: "fixture".into(),
        instruction: "Answer the question .".into(),
        input: "What is 2 + 2 ?".into(),
        target: "4".into(),
        exemplars: vec![
            Exemplar {
                input: "What is 1 + 1 ?".into(),
                target: "2".into(),
            },
            Exemplar {
                input: "What is 3 + 1 ?".into(),
                target: "4".into(),
            },
            Exemplar {
                input: "What is 0 + 2 ?".into(),
                target: "2".into(),
            },
        ],
        answer_mode: AnswerMode::Direct,
    }
}

// ------------------------------------------------------------------ prompts

#[test]
fn zero_shot_prompt_is_instruction_and_input() {
    let p = assemble_prompt(&fixture_record(), 0).unwrap();
    assert_eq!(p, "Answer the question .\n\nInput: What is 2 + 2 ?\nOutput:");
}

#[test]
fn two_shot_prompt_has_two_blocks_in_stored_order() {
    let p = assemble_prompt(&fixture_record(), 2).unwrap();
    assert_eq!(p.matches("Input:").count(), 3);
    let first = p.find("What is 1 + 1 ?").unwrap();
    let second = p.find("What is 3 + 1 ?").unwrap();
    assert!(first < second);
    assert!(!p.contains("What is 0 + 2 ?"));
    assert!(p.ends_with("Input: What is 2 + 2 ?\nOutput:"));
}

#[test]
fn too_few_exemplars_is_an_error() {
    let mut r = fixture_record();
    r.exemplars.truncate(1);
    assert!(matches!(assemble_prompt(&r, 2), Err(Error::Config(_))));
}

#[test]
fn three_shot_prompt_matches_golden_file() {
    let golden = include_str!("fixtures/prompt_golden.txt");
    assert_eq!(assemble_prompt(&fixture_record(), 3).unwrap(), golden);
}

// --------------------------------------------------------------- extraction

#[test]
fn extraction_examples() {
    assert_eq!(extract_answer("  B ", AnswerMode::Direct), "B");
    assert_eq!(extract_answer("so X=4. The answer is 4.", AnswerMode::CoT), "4");
    assert_eq!(extract_answer("no marker here 4", AnswerMode::CoT), "");
    assert_eq!(exact_match(&extract_answer("4", AnswerMode::CoT), "4"), 0);
    assert_eq!(
        extract_answer("The answer is 3 . Wait . The answer is 5 .", AnswerMode::CoT),
        "5"
    );
    assert_eq!(extract_answer_with("so ANS: 7.", AnswerMode::CoT, "ANS:"), "7");
}

#[test]
fn exact_match_examples() {
    assert_eq!(exact_match("A", "A"), 1);
    assert_eq!(exact_match("a", "A"), 0);
    assert_eq!(exact_match(" A\n", "A "), 1);
    assert_eq!(exact_match_with("a", "A", true), 1);
}

#[test]
fn normalized_score_examples() {
    assert_eq!(normalized_score(25.0, 25.0).unwrap(), 0.0);
    assert_eq!(normalized_score(100.0, 25.0).unwrap(), 100.0);
    assert!((normalized_score(40.0, 25.0).unwrap() - 20.0).abs() < 1e-12);
    assert!(normalized_score(10.0, 50.0).unwrap() < 0.0);
    assert!(matches!(normalized_score(50.0, 100.0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn normalized_score_is_strictly_increasing(
        a in 0.0f64..100.0,
        d in 1e-6f64..50.0,
        b in 0.0f64..99.9,
    ) {
        prop_assert!(normalized_score(a + d, b).unwrap() > normalized_score(a, b).unwrap());
    }

    #[test]
    fn tokenizer_round_trips_known_words(words in prop::collection::vec("[a-z]{1,4}", 1..12), breaks in prop::collection::vec(any::<bool>(), 12)) {
        let mut text = String::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(if breaks[i] { '\n' } else { ' ' });
            }
            text.push_str(w);
        }
        let tok = Tokenizer::from_texts([text.as_str()]);
        let ids = tok.encode(&text);
        prop_assert!(!ids.contains(&UNK));
        prop_assert_eq!(tok.decode(&ids), text);
    }
}

// --------------------------------------------------------------- evaluation

/// Answers every prompt from a lookup table (empty when unknown).
struct TableGenerator(HashMap<String, String>);

impl Generator for TableGenerator {
    fn generate(&mut self, prompts: &[String], _max_new: usize) -> Result<Vec<String>> {
        Ok(prompts.iter().map(|p| self.0.get(p).cloned().unwrap_or_default()).collect())
    }
}

fn verbatim(records: &[TaskRecord], k: usize) -> TableGenerator {
    TableGenerator(
        records
            .iter()
            .map(|r| (assemble_prompt(r, k).unwrap(), r.target.clone()))
            .collect(),
    )
}

fn synthetic_eval(spec: &SynthSpec, split: &str) -> (Vec<SuiteSpec>, Vec<TaskRecord>) {
    let corpus = gen_synthetic_tasks(3, spec).unwrap();
    let suites: Vec<SuiteSpec> = serde_json::from_str(&corpus.files[&format!("{split}/suites.json")]).unwrap();
    let mut records = Vec::new();
    for t in HELD_IN_TASKS {
        records.extend(parse_jsonl(&corpus.files[&format!("{split}/{t}.jsonl")], t).unwrap());
    }
    (suites, records)
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        train_per_task: 20,
        eval_per_task: 15,
        ..SynthSpec::default()
    }
}

#[test]
fn verbatim_stub_scores_one_hundred() {
    let (suites, records) = synthetic_eval(&small_spec(), "held-out");
    let mut g = verbatim(&records, 0);
    let r = evaluate(&mut g, &suites, &records, &DecodeConfig::default(), ReportMeta::default()).unwrap();
    for s in &r.suites {
        assert_eq!(s.accuracy, 100.0);
        assert!((s.normalized - 100.0).abs() < 1e-12);
    }
    assert!((r.normalized_average - 100.0).abs() < 1e-12);
    assert_eq!(
        r.suites.iter().map(|s| format!("{} {}", s.suite, s.mode)).collect::<Vec<_>>(),
        ["seq Direct", "lookup Direct", "arith Direct", "arith CoT"]
    );
}

#[test]
fn empty_stub_scores_zero_with_negative_normalization() {
    let (suites, records) = synthetic_eval(&small_spec(), "held-in");
    let mut g = TableGenerator(HashMap::new());
    let r = evaluate(&mut g, &suites, &records, &DecodeConfig::default(), ReportMeta::default()).unwrap();
    for s in &r.suites {
        assert_eq!(s.accuracy, 0.0);
        for t in &s.tasks {
            let b = t.random_baseline;
            assert!((t.normalized - (-100.0 * b / (100.0 - b))).abs() < 1e-12);
        }
    }
}

#[test]
fn counts_sum_to_file_lines_and_accuracies_are_bounded() {
    let (suites, records) = synthetic_eval(&small_spec(), "held-out");
    let mut rng = Rng::new(17);
    let table = records
        .iter()
        .map(|r| {
            let p = assemble_prompt(r, 0).unwrap();
            let ans = if rng.uniform() < 0.5 { r.target.clone() } else { "x".into() };
            (p, ans)
        })
        .collect();
    let mut g = TableGenerator(table);
    let r = evaluate(&mut g, &suites, &records, &DecodeConfig::default(), ReportMeta::default()).unwrap();
    let total: usize = r.suites.iter().flat_map(|s| &s.tasks).map(|t| t.count).sum();
    assert_eq!(total, records.len());
    for t in r.suites.iter().flat_map(|s| &s.tasks) {
        assert!((0.0..=100.0).contains(&t.accuracy));
    }
}

#[test]
fn accuracy_matches_brute_force_count_on_random_corpus() {
    let mut rng = Rng::new(5);
    let words = ["A", "a", "B", "b", " A ", "C"];
    let records: Vec<TaskRecord> = (0..300)
        .map(|i| TaskRecord {
            task_name: format!("t{}", i % 3),
            instruction: "Pick .".into(),
            input: format!("item {i}"),
            target: words[rng.below(4)].trim().to_string(),
            exemplars: Vec::new(),
            answer_mode: AnswerMode::Direct,
        })
        .collect();
    let preds: Vec<String> = records.iter().map(|_| words[rng.below(words.len())].to_string()).collect();
    let table = records
        .iter()
        .zip(&preds)
        .map(|(r, p)| (assemble_prompt(r, 0).unwrap(), p.clone()))
        .collect();
    let suites = vec![SuiteSpec {
        name: "all".into(),
        tasks: (0..3)
            .map(|i| SuiteTask {
                name: format!("t{i}"),
                random_baseline: 0.0,
            })
            .collect(),
        k_shot: 0,
    }];
    let r = evaluate(
        &mut TableGenerator(table),
        &suites,
        &records,
        &DecodeConfig::default(),
        ReportMeta::default(),
    )
    .unwrap();
    for t in &r.suites[0].tasks {
        let (mut hit, mut n) = (0, 0);
        for (rec, p) in records.iter().zip(&preds) {
            if rec.task_name == t.task {
                n += 1;
                if p.trim() == rec.target {
                    hit += 1;
                }
            }
        }
        assert_eq!((t.correct, t.count), (hit, n));
        assert_eq!(t.accuracy, 100.0 * hit as f64 / n as f64);
    }
}

#[test]
fn normalized_average_is_hand_computed_macro_mean() {
    // Four single-task suites with baselines 0, 25, 50, 20; the stub gets
    // 3/4, 2/4, 4/4 and 1/4 right.
    let baselines = [0.0, 25.0, 50.0, 20.0];
    let right = [3, 2, 4, 1];
    let mut records = Vec::new();
    let mut table = HashMap::new();
    for (s, &k) in right.iter().enumerate() {
        for i in 0..4 {
            let r = TaskRecord {
                task_name: format!("task{s}"),
                instruction: "Say it .".into(),
                input: format!("{s} {i}"),
                target: "yes".into(),
                exemplars: Vec::new(),
                answer_mode: AnswerMode::Direct,
            };
            table.insert(assemble_prompt(&r, 0).unwrap(), if i < k { "yes" } else { "no" }.to_string());
            records.push(r);
        }
    }
    let suites: Vec<SuiteSpec> = baselines
        .iter()
        .enumerate()
        .map(|(s, &b)| SuiteSpec {
            name: format!("suite{s}"),
            tasks: vec![SuiteTask {
                name: format!("task{s}"),
                random_baseline: b,
            }],
            k_shot: 0,
        })
        .collect();
    let r = evaluate(
        &mut TableGenerator(table),
        &suites,
        &records,
        &DecodeConfig::default(),
        ReportMeta::default(),
    )
    .unwrap();
    // (75-0)/100, (50-25)/75, (100-50)/50, (25-20)/80, all times 100.
    let hand = (75.0 + 100.0 / 3.0 + 100.0 + 6.25) / 4.0;
    assert!((r.normalized_average - hand).abs() < 1e-12, "{}", r.normalized_average);
}

#[test]
fn cot_targets_are_scored_by_their_stated_answer() {
    let r = TaskRecord {
        task_name: "add".into(),
        instruction: "Add .".into(),
        input: "3 + 8".into(),
        target: "3 + 8 = 11 . 11 mod 10 = 1 . The answer is 1 .".into(),
        exemplars: Vec::new(),
        answer_mode: AnswerMode::CoT,
    };
    let suites = vec![SuiteSpec {
        name: "arith".into(),
        tasks: vec![SuiteTask {
            name: "add".into(),
            random_baseline: 10.0,
        }],
        k_shot: 0,
    }];
    let mut table = HashMap::new();
    table.insert(assemble_prompt(&r, 0).unwrap(), "11 is too big so The answer is 1.".to_string());
    let rep = evaluate(
        &mut TableGenerator(table),
        &suites,
        std::slice::from_ref(&r),
        &DecodeConfig::default(),
        ReportMeta::default(),
    )
    .unwrap();
    assert_eq!(rep.suites[0].accuracy, 100.0);
}

#[test]
fn missing_task_records_are_a_config_error() {
    let suites = vec![SuiteSpec {
        name: "s".into(),
        tasks: vec![SuiteTask {
            name: "nope".into(),
            random_baseline: 0.0,
        }],
        k_shot: 0,
    }];
    let err = evaluate(
        &mut TableGenerator(HashMap::new()),
        &suites,
        &[fixture_record()],
        &DecodeConfig::default(),
        ReportMeta::default(),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn suite_baseline_must_be_below_one_hundred() {
    let s = SuiteSpec {
        name: "s".into(),
        tasks: vec![SuiteTask {
            name: "t".into(),
            random_baseline: 100.0,
        }],
        k_shot: 0,
    };
    assert!(s.validate().is_err());
}

fn fixture_report(cols: &[(&str, &str, f64)], avg: f64) -> EvalReport {
    EvalReport {
        meta: ReportMeta::default(),
        suites: cols
            .iter()
            .map(|(s, m, a)| SuiteResult {
                suite: s.to_string(),
                mode: m.to_string(),
                k_shot: 0,
                accuracy: *a,
                normalized: *a,
                tasks: Vec::new(),
            })
            .collect(),
        normalized_average: avg,
    }
}

#[test]
fn table_layout_matches_reference_ablation_rows() {
    // Reference baseline row: MMLU Direct 40.0, BBH Direct 33.2, GSM8K CoT 6.6, average 37.7.
    let base = fixture_report(&[("MMLU", "Direct", 40.0), ("BBH", "Direct", 33.2), ("GSM8K", "CoT", 6.6)], 37.7);
    let gate = fixture_report(&[("MMLU", "Direct", 40.2), ("BBH", "Direct", 33.9), ("GSM8K", "CoT", 6.6)], 38.0);
    let table = render_table(
        "Finetuning Strategy",
        &[("Baseline".into(), &base), ("Freeze-Gate".into(), &gate)],
    );
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
    assert_eq!(
        header,
        ["Finetuning Strategy", "MMLU Direct", "BBH Direct", "GSM8K CoT", "Norm. Avg."]
    );
    assert_eq!(
        lines[2].split_whitespace().collect::<Vec<_>>(),
        ["Baseline", "40.0", "33.2", "6.6", "37.7"]
    );
    assert_eq!(
        lines[3].split_whitespace().collect::<Vec<_>>(),
        ["Freeze-Gate", "40.2", "33.9", "6.6", "38.0"]
    );
    // Right-aligned numeric columns end at the same offset on every row.
    assert_eq!(lines[0].len(), lines[2].len());
    assert_eq!(lines[2].len(), lines[3].len());
}

#[test]
fn evaluation_is_repeatable() {
    let (suites, records) = synthetic_eval(&small_spec(), "held-out");
    let run = || {
        let mut g = verbatim(&records[..records.len() / 2], 0);
        let r = evaluate(&mut g, &suites, &records, &DecodeConfig::default(), ReportMeta::default()).unwrap();
        serde_json::to_string(&r).unwrap()
    };
    assert_eq!(run(), run());
}

// ------------------------------------------------------------ synthetic data

#[test]
fn same_seed_gives_identical_corpus() {
    let a = gen_synthetic_tasks(7, &small_spec()).unwrap();
    let b = gen_synthetic_tasks(7, &small_spec()).unwrap();
    let c = gen_synthetic_tasks(8, &small_spec()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        a.write(d.path()).unwrap();
    }
    for rel in a.files.keys() {
        assert_eq!(
            std::fs::read(dirs[0].path().join(rel)).unwrap(),
            std::fs::read(dirs[1].path().join(rel)).unwrap()
        );
    }
}

#[test]
fn corpus_has_expected_layout() {
    let spec = small_spec();
    let c = gen_synthetic_tasks(1, &spec).unwrap();
    for t in HELD_IN_TASKS {
        for (split, n) in [("train", 20), ("held-in", 15), ("held-out", 15)] {
            let recs = parse_jsonl(&c.files[&format!("{split}/{t}.jsonl")], t).unwrap();
            assert_eq!(recs.len(), n, "{split}/{t}");
            assert!(recs.iter().all(|r| r.exemplars.len() == spec.exemplars));
        }
    }
    for f in ["held-in/suites.json", "held-out/suites.json", "paraphrases.jsonl", "vocab.txt"] {
        assert!(c.files.contains_key(f), "{f}");
    }
}

#[test]
fn cot_targets_always_contain_the_marker() {
    let c = gen_synthetic_tasks(2, &small_spec()).unwrap();
    for split in ["train", "held-in", "held-out"] {
        for r in parse_jsonl(&c.files[&format!("{split}/mod_add_cot.jsonl")], "cot").unwrap() {
            assert!(r.target.contains("The answer is"), "{}", r.target);
            assert_eq!(r.answer_mode, AnswerMode::CoT);
            let (a, b) = r.input.split_once(" + ").unwrap();
            let sum = (a.parse::<usize>().unwrap() + b.parse::<usize>().unwrap()) % 10;
            assert_eq!(extract_answer(&r.target, AnswerMode::CoT), sum.to_string());
        }
    }
}

#[test]
fn lookup_answers_match_an_independent_scan() {
    let c = gen_synthetic_tasks(4, &small_spec()).unwrap();
    for r in parse_jsonl(&c.files["train/kv_lookup.jsonl"], "kv").unwrap() {
        let words: Vec<&str> = r.input.split_whitespace().collect();
        let query = words[words.iter().position(|w| *w == "query").unwrap() + 1];
        let mut found = None;
        for w in &words {
            if let Some((k, v)) = w.split_once(':') {
                if k == query {
                    assert!(found.is_none(), "duplicate key in {}", r.input);
                    found = Some(v);
                }
            }
        }
        assert_eq!(found, Some(r.target.as_str()), "{}", r.input);
    }
}

#[test]
fn copy_and_reverse_targets_are_correct() {
    let c = gen_synthetic_tasks(4, &small_spec()).unwrap();
    for r in parse_jsonl(&c.files["held-in/copy.jsonl"], "copy").unwrap() {
        assert_eq!(r.input, r.target);
    }
    for r in parse_jsonl(&c.files["held-in/reverse.jsonl"], "reverse").unwrap() {
        let mut w: Vec<&str> = r.input.split_whitespace().collect();
        w.reverse();
        assert_eq!(w.join(" "), r.target);
    }
}

#[test]
fn held_out_instructions_are_unseen_in_training() {
    let c = gen_synthetic_tasks(4, &small_spec()).unwrap();
    for t in HELD_IN_TASKS {
        let train: Vec<String> = parse_jsonl(&c.files[&format!("train/{t}.jsonl")], t)
            .unwrap()
            .into_iter()
            .map(|r| r.instruction)
            .collect();
        for r in parse_jsonl(&c.files[&format!("held-out/{t}.jsonl")], t).unwrap() {
            assert!(!train.contains(&r.instruction), "{}", r.instruction);
        }
    }
}

#[test]
fn vocabulary_covers_every_prompt_and_fits_the_default_model() {
    let c = gen_synthetic_tasks(4, &small_spec()).unwrap();
    let tok = Tokenizer::from_vocab_text(&c.files["vocab.txt"]).unwrap();
    assert!(tok.len() <= ModelConfig::default().vocab_size, "{}", tok.len());
    for (rel, text) in &c.files {
        if !rel.ends_with(".jsonl") || rel.starts_with("paraphrases") {
            continue;
        }
        for r in parse_jsonl(text, rel).unwrap() {
            let ex = to_examples(std::slice::from_ref(&r), &tok, 0, 2).unwrap();
            assert!(!ex[0].prompt.contains(&UNK) && !ex[0].target.contains(&UNK), "{rel}");
            assert_eq!(*ex[0].target.last().unwrap(), EOS);
            assert!(ex[0].prompt.contains(&NL));
        }
    }
}

#[test]
fn malformed_task_lines_name_the_line() {
    let good = to_jsonl(&[fixture_record()]);
    let text = format!("{good}\n{{\"task_name\": \"x\"}}\n");
    let err = parse_jsonl(&text, "f.jsonl").unwrap_err().to_string();
    assert!(err.contains("f.jsonl:3"), "{err}");
    let mut empty = fixture_record();
    empty.target = "  ".into();
    assert!(parse_jsonl(&to_jsonl(&[empty]), "f").is_err());
    let mut cot = fixture_record();
    cot.answer_mode = AnswerMode::CoT;
    assert!(parse_jsonl(&to_jsonl(&[cot]), "f").is_err());
}

#[test]
fn tokenizer_vocab_round_trip_and_unknowns() {
    let tok = Tokenizer::from_texts(["b a\nc", "a d"]);
    assert_eq!(tok.len(), 8);
    let back = Tokenizer::from_vocab_text(&tok.to_vocab_text()).unwrap();
    assert_eq!(back, tok);
    assert_eq!(tok.encode("a zz"), vec![4, UNK]);
    assert_eq!(tok.encode("a\n\nb"), vec![4, NL, NL, 5]);
    assert_eq!(tok.decode(&[4, NL, NL, 5, EOS]), "a\n\nb");
    assert!(Tokenizer::from_vocab_text("x\ny\n").is_err());
}

#[test]
fn model_generator_is_deterministic_and_bounded() {
    let spec = small_spec();
    let c = gen_synthetic_tasks(4, &spec).unwrap();
    let tok = Tokenizer::from_vocab_text(&c.files["vocab.txt"]).unwrap();
    let cfg = ModelConfig {
        vocab_size: tok.len(),
        d_model: 16,
        d_ff: 32,
        num_heads: 2,
        max_input_len: 24,
        max_target_len: 5,
        router: RouterConfig::default(),
        ..ModelConfig::default()
    };
    let params = ModelParams::<f32>::init(&cfg, &Rng::new(1)).unwrap();
    let (suites, records) = synthetic_eval(&spec, "held-out");
    let run = || {
        let mut g = ModelGenerator {
            params: &params,
            tokenizer: &tok,
            batch_size: 8,
        };
        let prompts: Vec<String> = records[..10].iter().map(|r| assemble_prompt(r, 2).unwrap()).collect();
        let out = g.generate(&prompts, 32).unwrap();
        for o in &out {
            assert!(tok.encode(o).len() <= 5, "{o:?}");
        }
        let rep = evaluate(&mut g, &suites, &records, &DecodeConfig::default(), ReportMeta::default()).unwrap();
        (out, serde_json::to_string(&rep).unwrap())
    };
    assert_eq!(run(), run());
}
