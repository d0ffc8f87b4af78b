//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dpsynth_cli::{cmd_generate, LoadedConfig, RunOptions};
use dpsynth_core::accountant::{compose, per_token_epsilon, solve_temperature, BudgetLedger, DpParams, PrivacyMode};
use dpsynth_core::attack::{
    pii_templates, run_mia, run_naive_pii_attack, run_pii_attack, MiaArm, MiaConfig, DEFAULT_ANSWER_PREFIX,
    DEFAULT_ATTACK_PROMPT, PII_ATTACK_TOKENS,
};
use dpsynth_core::eval::{
    evaluate_icl, evaluate_structured, EvalError, IclModel, IclTask, Schema, TaskKind, DEFAULT_HEADER,
};
use dpsynth_core::fixtures::{memorizing_model, mia_pools, pii_dataset};
use dpsynth_core::mechanism::{aggregate_private, blend, clip_logits, token_distribution, LogitVector, TokenId};
use dpsynth_core::pipeline::{Generator, PrivateExample, TemplatePair};
use dpsynth_core::provider::{ToyModel, ToyModelSpec};
use oracle::TableModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn lv(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).unwrap()
}

fn library_ell(private: &[Vec<f64>], public: &[f64], c: f64, s: usize) -> Vec<f64> {
    let private: Vec<LogitVector> = private.iter().map(|z| lv(z)).collect();
    let mean = aggregate_private(&private, c, s).unwrap();
    blend(&mean, &clip_logits(&lv(public), c).unwrap()).unwrap().into_values()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A full subset `Z` (|Z| = s) and its add/remove neighbour `Z'` (one record dropped).
struct NeighborPair {
    full: Vec<Vec<f64>>,
    reduced: Vec<Vec<f64>>,
    public: Vec<f64>,
    c: f64,
    s: usize,
}

fn neighbor_pairs(n: usize, seed: u64) -> Vec<NeighborPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = rng.random_range(2..=16);
            let s = rng.random_range(2..=8);
            let c = if rng.random_bool(0.5) { 1.0 } else { 10.0 };
            let scale = [0.5, 5.0, 50.0][rng.random_range(0..3)];
            let mut logits = || (0..v).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
            let full: Vec<Vec<f64>> = (0..s).map(|_| logits()).collect();
            let public = logits();
            let mut reduced = full.clone();
            reduced.remove(rng.random_range(0..s));
            NeighborPair {
                full,
                reduced,
                public,
                c,
                s,
            }
        })
        .collect()
}

fn ac1_sensitivity() -> Outcome {
    let start = Instant::now();
    let pairs = neighbor_pairs(2000, 1);
    let mut worst_ratio = 0.0f64;
    for p in &pairs {
        let a = library_ell(&p.full, &p.public, p.c, p.s);
        let b = library_ell(&p.reduced, &p.public, p.c, p.s);
        ensure!(
            max_abs_diff(&a, &oracle::ell(&p.full, &p.public, p.c, p.s)) <= 1e-12,
            "library aggregate disagrees with the reference"
        );
        let d = max_abs_diff(&a, &b);
        let bound = p.c / (2.0 * p.s as f64);
        ensure!(d <= bound + 1e-12, "||l(Z) - l(Z')|| = {d} exceeds c/2s = {bound} (c={}, s={})", p.c, p.s);
        worst_ratio = worst_ratio.max(d / bound);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{} pairs, max diff / (c/2s) = {worst_ratio:.6}, {elapsed:.2?}", pairs.len()))
}

fn ac2_per_token_ratio() -> Outcome {
    let start = Instant::now();
    let pairs = neighbor_pairs(2000, 1);
    let mut worst_ratio = 0.0f64;
    for p in &pairs {
        let a = library_ell(&p.full, &p.public, p.c, p.s);
        let b = library_ell(&p.reduced, &p.public, p.c, p.s);
        for tau in [0.131, 1.048] {
            let lp = token_distribution(&lv(&a), tau).unwrap();
            let lq = token_distribution(&lv(&b), tau).unwrap();
            let d = max_abs_diff(lp.log_probs(), lq.log_probs());
            let bound = p.c / (p.s as f64 * tau);
            ensure!(d <= bound + 1e-9, "log-ratio {d} exceeds c/(s tau) = {bound} at tau = {tau}");
            worst_ratio = worst_ratio.max(d / bound);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "{} pairs x 2 temperatures, max ratio / bound = {worst_ratio:.6}, {elapsed:.2?}",
        pairs.len()
    ))
}

fn ac3_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = DpParams::new(
            rng.random_range(0.05..20.0),
            10f64.powf(rng.random_range(-12.0..-1.0)),
            rng.random_range(1..1000),
            rng.random_range(0.5..50.0),
            rng.random_range(1..2000),
        )
        .unwrap();
        let tau = solve_temperature(&p).unwrap().temperature;
        let eps_prime = per_token_epsilon(p.clip_bound, p.subset_size, tau).unwrap();
        let composed = compose(eps_prime, p.max_tokens, p.delta).unwrap();
        let rel = ((composed.simplified - p.epsilon) / p.epsilon).abs();
        ensure!(rel <= 1e-9, "round trip off by {rel:e} for {p:?}");
        worst = worst.max(rel);
    }
    let spot = solve_temperature(&DpParams::new(1.0, 1e-6, 100, 10.0, 500).unwrap()).unwrap().temperature;
    ensure!((spot - 1.05130).abs() <= 1e-4, "spot temperature {spot}");
    Ok(format!("100 parameter sets, max relative error {worst:.1e}; spot tau = {spot:.5}"))
}

fn ac4_clip_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let v = rng.random_range(1..=32);
        let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
        let mut z: Vec<f64> = (0..v).map(|_| rng.random_range(-scale..scale)).collect();
        if v > 2 && rng.random_bool(0.2) {
            z[v - 1] = z[0];
        }
        let c = rng.random_range(0.1..50.0);
        let clipped = clip_logits(&lv(&z), c).unwrap();
        ensure!(max_abs_diff(clipped.values(), &oracle::clip(&z, c)) <= 1e-12, "clip differs from reference");
        ensure!(
            clipped.values().iter().all(|&x| x >= -c - 1e-12 && x <= c + 1e-12),
            "value outside [-c, c]"
        );
        let max = clipped.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure!((max - c).abs() <= 1e-12, "max {max} != c {c}");
        ensure!(clipped.argmax_set() == lv(&z).argmax_set(), "argmax set changed");
        let shift = rng.random_range(-100.0..100.0);
        let tau = rng.random_range(0.05..5.0);
        let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
        let p = token_distribution(&lv(&z), tau).unwrap();
        let q = token_distribution(&lv(&shifted), tau).unwrap();
        ensure!(max_abs_diff(p.probs(), q.probs()) <= 1e-12, "softmax not shift invariant");
    }
    Ok("2000 random vectors: range, max = c, argmax set, shift invariance".into())
}

const CHARS: &[&str] = &["a", "b", "c", "d", "e", "f", "g"];

fn random_table<R: Rng>(rng: &mut R, v: usize, order: usize, copy_weight: f64) -> (ToyModel, TableModel) {
    let mut vocab: Vec<String> = CHARS[..v - 1].iter().map(|s| s.to_string()).collect();
    vocab.push("<eos>".into());
    let mut spec = ToyModelSpec::new(vocab, "<eos>", order).unwrap().with_copy(copy_weight, 3).unwrap();
    let mut rows = HashMap::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    let mut contexts = frontier.clone();
    for _ in 0..order {
        frontier = frontier
            .iter()
            .flat_map(|c| (0..v as TokenId).map(move |t| [c.as_slice(), &[t]].concat()))
            .collect();
        contexts.extend(frontier.iter().cloned());
    }
    for ctx in contexts {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(-5.0..5.0)).collect();
        spec = spec.with_row(&ctx, row.clone()).unwrap();
        rows.insert(ctx, row);
    }
    (
        ToyModel::new(spec),
        TableModel {
            order,
            rows,
            copy_weight,
            copy_max_match: 3,
        },
    )
}

fn ac5_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut steps_checked = 0;
    let cases = 300;
    for case in 0..cases {
        let v = rng.random_range(4..=8);
        let order = rng.random_range(0..=2);
        let copy = if case % 2 == 0 { 0.75 } else { 0.0 };
        let (model, reference) = random_table(&mut rng, v, order, copy);
        let s = rng.random_range(1..=4);
        let t = rng.random_range(1..=4);
        let c = if rng.random_bool(0.5) { 1.0 } else { 10.0 };
        let eps = rng.random_range(0.5..50.0);
        let label = CHARS[v - 2];
        let subset: Vec<PrivateExample> = (0..s)
            .map(|_| {
                let len = rng.random_range(1..=4);
                let text: String = (0..len).map(|_| CHARS[rng.random_range(0..v - 2)]).collect();
                PrivateExample::new(text, label).unwrap()
            })
            .collect();
        let gen = Generator::new(
            &model,
            TemplatePair::new("{label}", "{text}").unwrap(),
            PrivacyMode::Private(DpParams::new(eps, 1e-6, t, c, s).unwrap()),
        )
        .unwrap();
        let seed: u64 = rng.random();
        let run = |gen: &Generator<'_, ToyModel>| {
            let mut probs = Vec::new();
            let mut tokens = Vec::new();
            gen.generate_example_observed(&subset, label, seed, "ac5", &mut |o| {
                probs.push(o.distribution.probs().to_vec());
                tokens.push(o.token);
            })
            .unwrap();
            (probs, tokens)
        };
        let (probs, tokens) = run(&gen);
        let to_ids = |text: &str| -> Vec<TokenId> {
            text.chars().map(|ch| CHARS.iter().position(|c| c.starts_with(ch)).unwrap() as TokenId).collect()
        };
        let prompts: Vec<Vec<TokenId>> = subset.iter().map(|e| to_ids(&e.text)).collect();
        let tau = oracle::temperature(eps, 1e-6, t, c, s);
        let want = oracle::reference_steps(&reference, &prompts, &to_ids(label), &tokens, c, s, tau);
        ensure!(want.len() == probs.len(), "case {case}: step count differs");
        for (step, (got, want)) in probs.iter().zip(&want).enumerate() {
            for (p, lq) in got.iter().zip(want) {
                ensure!((p - lq.exp()).abs() <= 1e-12, "case {case} step {step}: {p} vs {}", lq.exp());
            }
            steps_checked += 1;
        }
        ensure!(run(&gen).1 == tokens, "case {case}: same seed produced different tokens");
    }
    Ok(format!("{cases} fixtures, {steps_checked} steps entrywise within 1e-12, seeds reproducible"))
}

fn ac6_termination() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut eos_terminated = 0;
    for case in 0..1000 {
        let v = rng.random_range(3..=8);
        let order = rng.random_range(0..=2);
        let copy = if rng.random_bool(0.3) { 0.75 } else { 0.0 };
        let (model, _) = random_table(&mut rng, v, order, copy);
        let s = rng.random_range(1..=4);
        let t = rng.random_range(1..=10);
        let params = DpParams::new(rng.random_range(0.1..50.0), 1e-5, t, 10.0, s).unwrap();
        let subset: Vec<PrivateExample> =
            (0..s).map(|i| PrivateExample::new(CHARS[i % (v - 1)], "x").unwrap()).collect();
        let gen = Generator::new(&model, TemplatePair::new("", "{text}").unwrap(), PrivacyMode::Private(params.clone()))
            .unwrap();
        let record = gen.generate_example(&subset, "x", rng.random(), "ac6").unwrap();
        let steps = record.trace.steps.len();
        ensure!(steps >= 1 && steps <= t, "case {case}: {steps} charged steps, T = {t}");
        if record.trace.terminated_by_eos {
            ensure!(steps == record.tokens.len() + 1, "case {case}: tokens after <eos>");
            eos_terminated += 1;
        } else {
            ensure!(record.tokens.len() == t, "case {case}: stopped early without <eos>");
        }
        let mut ledger = BudgetLedger::new(&params).unwrap();
        for _ in 0..t + 3 {
            let _ = ledger.charge();
        }
        ensure!(ledger.spent_tokens() == t, "ledger exceeded T");
    }

    let spec = ToyModelSpec::new(vec!["a".into(), "<eos>".into()], "<eos>", 0)
        .unwrap()
        .with_row(&[], vec![-100.0, 100.0])
        .unwrap();
    let model = ToyModel::new(spec);
    let gen = Generator::new(
        &model,
        TemplatePair::new("", "{text}").unwrap(),
        PrivacyMode::Private(DpParams::new(1e5, 1e-6, 50, 10.0, 1).unwrap()),
    )
    .unwrap();
    let r = gen.generate_example(&[PrivateExample::new("a", "x").unwrap()], "x", 0, "eos").unwrap();
    ensure!(r.trace.steps.len() == 1 && r.tokens.is_empty(), "<eos> did not terminate immediately");
    Ok(format!("1000 fuzzed generations within T ({eos_terminated} ended on <eos>); forced <eos> stops at step 1"))
}

fn ac7_pii() -> Outcome {
    let model = memorizing_model(11, 1.0, 32);
    let data = pii_dataset(40, "vk@duke.com", 3);
    let templates = pii_templates(DEFAULT_ATTACK_PROMPT, DEFAULT_ANSWER_PREFIX).unwrap();
    let mut parts = Vec::new();
    for eps in [1.0, 4.0, 8.0] {
        let params = DpParams::new(eps, 1e-5, PII_ATTACK_TOKENS, 10.0, 16).unwrap();
        let o = run_pii_attack(&data, &params, &model, 100, 7, &templates).map_err(|e| e.to_string())?;
        ensure!(o.leak_count == 0, "epsilon {eps}: {} of 100 generations leaked", o.leak_count);
        parts.push(format!("eps={eps}: 0/100"));
    }
    let naive = run_naive_pii_attack(&data, &model, 100, Some(1.0), PII_ATTACK_TOKENS, 1, &templates)
        .map_err(|e| e.to_string())?;
    ensure!(naive.leak_count >= 1, "naive decoding never leaked the canary");
    Ok(format!("{}; naive decode {}/100", parts.join(", "), naive.leak_count))
}

fn ac8_mia() -> Outcome {
    let model = memorizing_model(5, 0.25, 24);
    let (members, nonmembers) = mia_pools(40, 40, 9);
    let cfg = MiaConfig {
        probes_per_side: 10,
        header: DEFAULT_HEADER.into(),
        templates: TemplatePair::new(
            "Write a {label} sentence:\n",
            "Here is a {label} sentence:\n{text}\nWrite another {label} sentence:\n",
        )
        .unwrap(),
    };
    let raw = run_mia(&members, &nonmembers, &MiaArm::NonPrivate, &model, 100, 1, &cfg).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for eps in [1.0, 4.0] {
        let arm = MiaArm::Private(DpParams::new(eps, 1e-5, 12, 10.0, 4).unwrap());
        let dp = run_mia(&members, &nonmembers, &arm, &model, 100, 1, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            (dp.mean_auc - 0.5).abs() < (raw.mean_auc - 0.5).abs(),
            "eps {eps}: DP AUC {} not closer to 0.5 than non-private {}",
            dp.mean_auc,
            raw.mean_auc
        );
        parts.push(format!("eps={eps}: {:.4}", dp.mean_auc));
    }
    Ok(format!("100 trials, DP AUC {} vs non-private {:.4}", parts.join(", "), raw.mean_auc))
}

/// Correct on queries `q00..` below the current run's threshold.
struct ScriptedRuns {
    thresholds: [usize; 3],
    per_run: usize,
    calls: AtomicUsize,
}

impl IclModel for ScriptedRuns {
    fn predict(&self, prompt: &str) -> Result<String, EvalError> {
        let run = self.calls.fetch_add(1, Ordering::SeqCst) / self.per_run;
        let query = prompt.rsplit("Input: ").next().unwrap().lines().next().unwrap();
        let i: usize = query[1..].parse().unwrap();
        Ok(if i < self.thresholds[run] { "yes".into() } else { "no".into() })
    }
}

fn ac9_harness_arithmetic() -> Outcome {
    let structured = evaluate_structured(&["{\"title\": \"Heat\"}", "{}", "{\"title\":"], &Schema::NonEmptyObject);
    ensure!(structured.rounded() == (66.7, 33.3, 3), "structured = {:?}", structured.rounded());
    let task = IclTask {
        name: "scripted".into(),
        kind: TaskKind::Classification,
        labels: vec!["yes".into(), "no".into()],
        test_examples: (0..20).map(|i| PrivateExample::new(format!("q{i:02}"), "yes").unwrap()).collect(),
        header: DEFAULT_HEADER.into(),
    };
    let model = ScriptedRuns {
        thresholds: [14, 15, 16],
        per_run: 20,
        calls: AtomicUsize::new(0),
    };
    let report = evaluate_icl(&[], &task, 0, 3, 0, &model, false).map_err(|e| e.to_string())?;
    ensure!(report.per_run == vec![70.0, 75.0, 80.0], "per-run {:?}", report.per_run);
    ensure!(
        (report.accuracy_mean - 75.0).abs() < 1e-12 && (report.accuracy_std - 5.0).abs() < 1e-12,
        "mean {} std {}",
        report.accuracy_mean,
        report.accuracy_std
    );
    Ok(format!(
        "structured {:?}; icl {:.1} +/- {:.1}",
        structured.rounded(),
        report.accuracy_mean,
        report.accuracy_std
    ))
}

fn ac10_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(dir.path().join("model.toy"), memorizing_model(3, 0.5, 16).spec().to_table_string())
        .map_err(|e| e.to_string())?;
    let rows: String = (0..24)
        .map(|i| {
            let label = ["World", "Sports", "Business"][i % 3];
            serde_json::json!({"text": format!("record {i} about {label}"), "label": label}).to_string() + "\n"
        })
        .collect();
    std::fs::write(dir.path().join("data.jsonl"), rows).map_err(|e| e.to_string())?;
    let config = r#"master_seed = 2024
output_dir = "out"

[provider]
toy_spec = "model.toy"
parallel = true

[privacy]
epsilon = 3.0
delta = 1e-5
max_tokens = 24
clip_bound = 10.0
subset_size = 4

[generate]
dataset = "data.jsonl"
template = "agnews"
counts = { World = 2, Sports = 2, Business = 2 }
"#;
    std::fs::write(dir.path().join("run.toml"), config).map_err(|e| e.to_string())?;
    let loaded = LoadedConfig::load(dir.path().join("run.toml")).map_err(|e| e.to_string())?;
    let mut corpora = Vec::new();
    let mut manifests = Vec::new();
    for name in ["first", "second"] {
        let opts = RunOptions {
            output_dir: Some(dir.path().join(name)),
            ..Default::default()
        };
        let summary = cmd_generate(&loaded, &opts).map_err(|e| e.to_string())?;
        manifests.push(summary.manifest);
        corpora.push(std::fs::read(dir.path().join(name).join("corpus.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure!(manifests[0] == manifests[1], "manifests differ");
    ensure!(corpora[0] == corpora[1], "corpus files differ");
    Ok(format!("6 records, {} identical bytes", corpora[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("AC1", "sensitivity oracle", ac1_sensitivity),
        ("AC2", "per-token DP ratio", ac2_per_token_ratio),
        ("AC3", "accounting round trip", ac3_accounting),
        ("AC4", "clip contract", ac4_clip_contract),
        ("AC5", "pipeline oracle equivalence", ac5_oracle_equivalence),
        ("AC6", "termination and budget", ac6_termination),
        ("AC7", "PII attack at toy scale", ac7_pii),
        ("AC8", "MIA ordering at toy scale", ac8_mia),
        ("AC9", "harness arithmetic", ac9_harness_arithmetic),
        ("AC10", "reproducibility", ac10_reproducibility),
    ];
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {detail}");
            }
        }
    }
    std::panic::set_hook(default_hook);
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
