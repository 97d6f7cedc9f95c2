//! Acceptance suite. Runs each criterion once, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.
//!
//! `cargo test -p frameloop-core --test acceptance`

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{finite_diff, fuzz_input, gaussian_vec, random_store, rel_err, rng, CountingSource};
use frameloop::embed::HashingEmbedder;
use frameloop::gateway::{
    fields, parse_evaluator, parse_reflector, parse_router, render_prompt, Gateway, MockBackend,
    PromptKind, ONE_SHOT_ASSISTANT, ONE_SHOT_USER,
};
use frameloop::policy_grad::{
    grad_report, log_policy, log_policy_gradient, policy_probs, sim, sim_gradient,
    surrogate_gradient, surrogate_value, Baseline, BaselineMode, PolicyGradConfig,
};
use frameloop::reflection::{run_loop, LoopConfig, LoopOutcome};
use frameloop::retrieval::{
    mmr_brute_force, mmr_brute_force_positions, mmr_greedy_positions, mmr_objective,
    shrink_mmr_greedy, WorkingSet,
};
use frameloop::simulator::Experiment;
use frameloop::store::{file_size, load_store, save_store};
use frameloop::tma::{alpha_img, alpha_txt, attention_text_mass, TmaSchedule, ToyAttentionInstance};
use frameloop::{EmbeddingStore, Error, SearchState};
use rand::seq::index::sample;
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn tma_exactness() -> Check {
    let s = TmaSchedule::default();
    let at = |f: fn(f64, &TmaSchedule) -> frameloop::Result<f64>, u: f64| f(u, &s).unwrap();
    ensure!(at(alpha_txt, 0.0) == 1.3, "alpha_txt(0) = {}", at(alpha_txt, 0.0));
    ensure!(at(alpha_img, 1.0) == 1.3, "alpha_img(1) = {}", at(alpha_img, 1.0));
    let mut checked = 0;
    for i in 0..=100_000 {
        let u = i as f64 / 100_000.0;
        if u > 0.4 {
            ensure!(at(alpha_txt, u) == 1.0, "alpha_txt({u}) = {}", at(alpha_txt, u));
        }
        if u <= 0.6 {
            ensure!(at(alpha_img, u) == 1.0, "alpha_img({u}) = {}", at(alpha_img, u));
        }
        checked += 1;
    }
    let mut gap: f64 = 0.0;
    for eps in [1e-9, 1e-12, 1e-15] {
        gap = gap.max((at(alpha_txt, 0.4 - eps) - at(alpha_txt, (0.4 + eps).min(1.0))).abs());
        gap = gap.max((at(alpha_img, 0.6 - eps) - at(alpha_img, 0.6 + eps)).abs());
    }
    gap = gap.max((at(alpha_txt, 0.4) - 1.0).abs()).max((at(alpha_img, 0.6) - 1.0).abs());
    ensure!(gap < 1e-12, "breakpoint gap {gap:e}");
    Ok(format!("{checked} grid points, max breakpoint gap {gap:.1e}"))
}

fn text_mass_shift() -> Check {
    let s = TmaSchedule::default();
    let inst = ToyAttentionInstance::new(1, 1, vec![1.0, 0.0], 0.5).map_err(|e| e.to_string())?;
    let mid = attention_text_mass(&inst, &s).unwrap();
    let early = attention_text_mass(&inst.with_progress(0.0).unwrap(), &s).unwrap();
    ensure!((mid - 0.73106).abs() <= 1e-4, "mass at u=0.5 is {mid}");
    ensure!((early - 0.78583).abs() <= 1e-4, "mass at u=0 is {early}");
    for n_txt in [1, 2, 5] {
        for n_vis in [1, 3, 10, 100] {
            for u in [0.0, 0.25, 0.5, 0.8, 1.0] {
                let inst = ToyAttentionInstance::constant(n_txt, n_vis, 0.0, u).unwrap();
                let m = attention_text_mass(&inst, &s).unwrap();
                let want = n_txt as f64 / (n_txt + n_vis) as f64;
                ensure!((m - want).abs() < 1e-12, "dilution {n_txt}/{n_vis} at u={u}: {m}");
            }
        }
    }
    Ok(format!("{mid:.5} -> {early:.5}, dilution exact on 60 instances"))
}

fn mmr_oracle() -> Check {
    let rel = [0.9, 0.8, 0.1];
    let pair = |a: usize, b: usize| if (a.min(b), a.max(b)) == (0, 1) { 0.95 } else { 0.0 };
    let mut greedy = mmr_greedy_positions(&rel, pair, 2, 0.5);
    greedy.sort_unstable();
    let (best, obj) = mmr_brute_force_positions(&rel, pair, 2, 0.5).map_err(|e| e.to_string())?;
    ensure!(greedy == [0, 2], "greedy picked {greedy:?}");
    ensure!(best == [0, 2], "oracle picked {best:?}");
    ensure!((obj - 0.5).abs() < 1e-12, "oracle objective {obj}");

    let mut ties = 0;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..=10);
        let k = r.random_range(1..=4.min(n));
        let d = r.random_range(2..=8);
        let store = random_store(n, d, seed + 500);
        let q = SearchState::new("q", &gaussian_vec(&mut r, d)).unwrap();
        let full = WorkingSet::full(&store);
        let g = shrink_mmr_greedy(&store, &full, &q, k, 0.5).unwrap();
        let pool: Vec<usize> = (0..n).collect();
        let (_, best_obj) = mmr_brute_force(&store, &pool, &q, k, 0.5).unwrap();
        let g_obj = mmr_objective(&store, g.indices(), &q, 0.5).unwrap();
        ensure!(g_obj <= best_obj + 1e-12, "instance {seed}: greedy {g_obj} > oracle {best_obj}");
        if (g_obj - best_obj).abs() < 1e-12 {
            ties += 1;
        }
    }
    Ok(format!("3-frame instance {{0,2}} at 0.5; greedy matched oracle on {ties}/200"))
}

fn gradient_correctness() -> Check {
    const H: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    let mut identity: f64 = 0.0;
    for d in [2, 8, 16] {
        for seed in 0..100u64 {
            let store = random_store(8, d, seed);
            let pool: Vec<usize> = (0..8).collect();
            let mut r = rng(seed + 1000);
            let s = gaussian_vec(&mut r, d);
            for frame in 0..8 {
                let a = sim_gradient(&store, frame, &s).unwrap();
                let n = finite_diff(|x| sim(&store, frame, x).unwrap(), &s, H);
                worst = worst.max(rel_err(&a, &n));
                let a = log_policy_gradient(&store, &pool, &s, frame, 1.0).unwrap();
                let n = finite_diff(|x| log_policy(&store, &pool, x, frame, 1.0).unwrap(), &s, H);
                worst = worst.max(rel_err(&a, &n));
            }
            let picked = sample(&mut r, 8, 1 + seed as usize % 4).into_vec();
            let w = WorkingSet::new(&store, picked).unwrap();
            let a = surrogate_gradient(&store, &w, &s, 0.5).unwrap();
            let n = finite_diff(|x| surrogate_value(&store, &w, x, 0.5).unwrap(), &s, H);
            worst = worst.max(rel_err(&a, &n));

            let cfg = PolicyGradConfig::default();
            let report =
                grad_report(&store, &pool, &w, &s, 0.5, &Baseline::new(BaselineMode::Zero), &cfg, 0.0)
                    .unwrap();
            let probs = policy_probs(&store, &pool, &s, cfg.temperature).unwrap();
            identity = identity.max(report.score_identity_residual(&probs));
        }
    }
    ensure!(worst < 1e-5, "max relative error {worst:e}");
    ensure!(identity < 1e-10, "score identity residual {identity:e}");
    Ok(format!("max rel err {worst:.1e}, max identity residual {identity:.1e}"))
}

fn scripted(qtype: &str, score: f64, verdict: &str) -> MockBackend {
    MockBackend::new()
        .script(PromptKind::Route, [format!(r#"{{"qtype":"{qtype}","rationale":"r"}}"#)])
        .script(
            PromptKind::Evaluate,
            [format!(r#"{{"score":{score},"verdict":"{verdict}","brief_reason":"r"}}"#)],
        )
        .script(PromptKind::Reflect, [r#"{"refined_query":"a person near the door"}"#])
        .script(PromptKind::GlobalAnswer, ["Not enough evidence from global caption."])
}

fn drive(qtype: &str, score: f64, verdict: &str) -> Result<(LoopOutcome, Vec<usize>), String> {
    let source = CountingSource::new(random_store(64, 16, 7));
    let gw = Gateway::new(scripted(qtype, score, verdict));
    let out = run_loop("what is happening?", &source, &gw, &HashingEmbedder::new(16), &LoopConfig::default())
        .map_err(|e| e.error.to_string())?;
    let reads = source.reads.borrow().clone();
    Ok((out, reads))
}

fn sizes(out: &LoopOutcome) -> Vec<usize> {
    out.trace.iter().map(|r| r.working_indices.len()).collect()
}

fn loop_contract() -> Check {
    let (out, reads) = drive("static", 0.9, "accept")?;
    ensure!(out.trace.len() == 1 && !out.used_fallback, "score 0.9 ran {} rounds", out.trace.len());
    ensure!(reads.iter().all(|&c| c == 1), "frame reads {reads:?}");

    let (out, _) = drive("static", 0.1, "reject")?;
    ensure!(out.trace.len() == 3, "score 0.1 ran {} rounds", out.trace.len());
    ensure!(
        out.used_fallback && out.answer == "Not enough evidence from global caption.",
        "no global fallback: {:?}",
        out.answer
    );
    ensure!(sizes(&out) == [4, 8, 16], "static sizes {:?}", sizes(&out));

    let (out, _) = drive("static", 0.5, "accept")?;
    ensure!(out.trace.len() == 1 && !out.used_fallback, "verdict accept ran {} rounds", out.trace.len());

    let (out, reads) = drive("dynamic", 0.1, "reject")?;
    ensure!(sizes(&out) == [64, 32, 16], "dynamic sizes {:?}", sizes(&out));
    ensure!(reads.iter().all(|&c| c == 1), "frame reads {reads:?}");
    Ok("stop at 0.9, fallback after 3 at 0.1, accept at 0.5, 4/8/16 and 64/32/16, one read per frame".into())
}

fn monte_carlo_improvement() -> Check {
    let ex = Experiment::default();
    let still = Experiment {
        policy: PolicyGradConfig {
            step_size: 0.0,
            ..ex.policy.clone()
        },
        ..ex.clone()
    };
    let run = |ex: &Experiment| -> Result<Vec<(f64, f64)>, Error> {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4u64)
                .map(|part| {
                    scope.spawn(move || {
                        (part * 25..part * 25 + 25)
                            .map(|s| ex.run_seed(s).map(|(_, m)| (m.last_mean - m.first_mean, m.slope)))
                            .collect::<Result<Vec<_>, Error>>()
                    })
                })
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("worker")?);
            }
            Ok(all)
        })
    };
    let trained = run(&ex).map_err(|e| e.to_string())?;
    let control = run(&still).map_err(|e| e.to_string())?;
    let imp = trained.iter().map(|p| p.0).sum::<f64>() / trained.len() as f64;
    let drift = control.iter().map(|p| p.1).sum::<f64>() / control.len() as f64;
    ensure!(imp >= 0.1, "mean improvement {imp:.4} < 0.1");
    ensure!(drift.abs() <= 0.005, "control drift slope {drift:.5}");
    Ok(format!("improvement {imp:.4} over 100 seeds, control slope {drift:+.5}"))
}

fn store_format() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..50u64 {
        let store = random_store(1 + seed as usize % 20, 1 + seed as usize % 33, seed);
        let path = dir.path().join(format!("{seed}.uveb"));
        save_store(&store, &path).map_err(|e| e.to_string())?;
        let back = load_store(&path).map_err(|e| e.to_string())?;
        let bits = |s: &EmbeddingStore| -> Vec<u64> {
            s.rows().flatten().chain(s.timestamps()).map(|v| v.to_bits()).collect()
        };
        ensure!(bits(&back) == bits(&store), "seed {seed}: values differ after reload");
        ensure!(back.to_bytes() == std::fs::read(&path).unwrap(), "seed {seed}: bytes differ");
    }
    ensure!(file_size(64, 768) == 197_140, "file_size(64, 768) = {}", file_size(64, 768));
    let path = dir.path().join("big.uveb");
    save_store(&random_store(64, 768, 3), &path).map_err(|e| e.to_string())?;
    let len = std::fs::metadata(&path).unwrap().len();
    ensure!(len == 197_140, "64x768 file is {len} bytes");
    for (n, d) in [(1, 1), (3, 5), (100, 512)] {
        ensure!(file_size(n, d) as usize == 20 + 4 * n * d + 8 * n, "file_size({n}, {d})");
    }
    Ok("50 bit-exact round trips, 64x768 file is 197140 bytes".into())
}

fn parser_robustness() -> Check {
    let mut r = rng(77);
    for i in 0..10_000 {
        let input = fuzz_input(i, &mut r);
        let outcome = panic::catch_unwind(|| {
            [
                parse_evaluator(&input).err(),
                parse_reflector(&input).err(),
                parse_router(&input).err(),
            ]
        })
        .map_err(|_| format!("parser panicked on fuzz case {i}"))?;
        for e in outcome.into_iter().flatten() {
            ensure!(matches!(e, Error::Parse(_)), "case {i}: untyped error {e:?}");
        }
    }

    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for kind in PromptKind::ALL {
        let path = golden.join(format!("templates/{}.txt", kind.name()));
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure!(kind.template() == want, "{} template drifted from golden file", kind.name());
    }
    let f = fields(&[
        ("question", "q"),
        ("notes", "n"),
        ("one_shot_user", ONE_SHOT_USER),
        ("one_shot_assistant", ONE_SHOT_ASSISTANT),
        ("case", "c"),
        ("global_caption", "g"),
        ("last_answer", "a"),
        ("eval_json", "{}"),
        ("frame", "f"),
        ("frames", "fs"),
    ]);
    for kind in PromptKind::ALL {
        let a = render_prompt(kind, &f).map_err(|e| e.to_string())?;
        ensure!(a == render_prompt(kind, &f).unwrap(), "{} renders unstably", kind.name());
    }
    let lines = [
        (PromptKind::Evaluate, "Role. Precise evaluator for video-QA. Return a single-line JSON only (no Markdown/code)."),
        (PromptKind::Reflect, "(1) Output JSON only with key refined_query."),
        (PromptKind::Reflect, "(2) refined_query ≤ 25 tokens, declarative statement (not a question)"),
    ];
    for (kind, line) in lines {
        ensure!(kind.template().contains(line), "{} lacks {line:?}", kind.name());
    }
    Ok(format!("10000 fuzz inputs, {} templates byte-stable", PromptKind::ALL.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("tma_exactness", tma_exactness, Duration::from_secs(1)),
        ("text_mass_shift", text_mass_shift, Duration::from_secs(1)),
        ("mmr_oracle_equivalence", mmr_oracle, Duration::from_secs(5)),
        ("gradient_correctness", gradient_correctness, Duration::from_secs(10)),
        ("loop_contract", loop_contract, Duration::from_secs(1)),
        ("monte_carlo_improvement", monte_carlo_improvement, Duration::from_secs(60)),
        ("store_format", store_format, Duration::from_secs(10)),
        ("parser_robustness", parser_robustness, Duration::from_secs(10)),
    ];
    // a panicking check is reported as a failure, not a crash
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let took = start.elapsed();
                if took > budget {
                    Err(format!("{detail}; took {took:.2?}, budget {budget:?}"))
                } else {
                    Ok(detail)
                }
            });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.2?}): {why}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
