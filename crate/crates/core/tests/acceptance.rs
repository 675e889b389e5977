//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs sequentially so that the runtime bounds are measured without other tests
//! competing for cores. Exits nonzero on any failure outside `KNOWN_FAILURES`.

use std::time::{Duration, Instant};

use sngd_core::experiments::{
    exp_equivalence_suite, exp_fig_compare, exp_fig_eigs, exp_fig_lambs, exp_operator_suite,
    run_experiment, CompareSpec, ComparisonSettings, CondSpec, EigsFamily, EigsSpec, EquivalenceSpec, ExperimentOutput, ExperimentSpec,
    Gate, LambsSpec, OperatorSpec, WitnessSpec,
};

/// Gates that fail on the declared defaults, with the reason.
const KNOWN_FAILURES: &[(&str, &str)] = &[(
    "speedup at k=1 >= speedup at k=30",
    "the declared momentum grid stops at 0.99; at k=1 the accelerated rate needs mu near 0.9995",
)];

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
    failing: Vec<String>,
}

fn fmt_gate(g: &Gate) -> String {
    format!("{} = {:.3e} vs {:.3e}", g.name, g.value, g.threshold)
}

fn line(id: &'static str, gates: &[&Gate], elapsed: Duration, budget: Option<Duration>) -> Line {
    let mut failing: Vec<String> = gates.iter().filter(|g| !g.passed).map(|g| g.name.clone()).collect();
    let mut detail: Vec<String> = gates.iter().map(|g| fmt_gate(g)).collect();
    if let Some(b) = budget {
        detail.push(format!("runtime {:.1}s (limit {}s)", elapsed.as_secs_f64(), b.as_secs()));
        if elapsed > b {
            failing.push(format!("runtime over {}s", b.as_secs()));
        }
    }
    Line { id, passed: failing.is_empty(), detail: detail.join("; "), failing }
}

fn by_prefix<'a>(out: &'a ExperimentOutput, prefix: &str) -> Vec<&'a Gate> {
    out.gates.iter().filter(|g| g.name.starts_with(prefix)).collect()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let mut lines = Vec::new();

    let (eq, t) = timed(|| exp_equivalence_suite(&EquivalenceSpec::default()).expect("equivalence suite"));
    lines.push(line("equivalence", &eq.gates.iter().collect::<Vec<_>>(), t, Some(Duration::from_secs(5))));

    let (ops, t_ops) = timed(|| exp_operator_suite(&OperatorSpec::default()).expect("operator suite"));
    // The suite runs every check; the per-instance budget is checked against the whole run.
    lines.push(line("lls-contraction", &by_prefix(&ops, "lls_contraction"), t_ops, Some(Duration::from_secs(10))));
    let mut beta = by_prefix(&ops, "beta_lower");
    beta.extend(by_prefix(&ops, "beta_upper"));
    lines.push(line("beta-bounds", &beta, t_ops, None));
    lines.push(line("gamma-bound", &by_prefix(&ops, "gamma_lower"), t_ops, None));
    lines.push(line("llq-dpp-contraction", &by_prefix(&ops, "dpp_llq_contraction"), t_ops, None));
    lines.push(line("ngd-rate", &by_prefix(&ops, "ngd_rate"), t_ops, None));
    lines.push(line("large-lambda-limit", &by_prefix(&ops, "large_lambda_limit"), t_ops, None));

    let eigs_spec = EigsSpec { witness: Some(WitnessSpec::default()), ..EigsSpec::default() };
    let ((eigs, lambs), t) = timed(|| {
        let eigs = exp_fig_eigs(&EigsSpec { witness: None, ..eigs_spec.clone() }).expect("fig_eigs");
        let lambs = exp_fig_lambs(&LambsSpec::default()).expect("fig_lambs");
        (eigs, lambs)
    });
    let c: Vec<&Gate> = eigs.gates.iter().chain(&lambs.gates).collect();
    lines.push(line("eigenvalue-clouds", &c, t, Some(Duration::from_secs(120))));

    let (witness, t) = timed(|| exp_fig_eigs(&eigs_spec).expect("fig_eigs with witness"));
    lines.push(line("divergence-witness", &by_prefix(&witness, "divergence witness"), t, None));

    let (cmp, t) = timed(|| exp_fig_compare(&CompareSpec::default()).expect("fig_compare"));
    lines.push(line("batch-comparison", &cmp.gates.iter().collect::<Vec<_>>(), t, Some(Duration::from_secs(600))));

    lines.push(line("sketch-mean-structure", &{
        let mut g = by_prefix(&ops, "sketch_offdiagonal");
        g.extend(by_prefix(&ops, "sketch_diagonal_order"));
        g
    }, t_ops, None));

    // Rerun every experiment kind from its serialized spec and compare outputs.
    let (det, t) = timed(determinism);
    lines.push(Line {
        id: "determinism",
        passed: det.is_empty(),
        detail: format!("6 experiment kinds rerun from JSON specs (batch comparison at k=10,30) in {:.1}s; mismatches: {:?}", t.as_secs_f64(), det),
        failing: det,
    });

    let mut unexpected = 0;
    for l in &lines {
        let known: Vec<&str> = l
            .failing
            .iter()
            .filter_map(|f| KNOWN_FAILURES.iter().find(|k| f == k.0).map(|k| k.1))
            .collect();
        let tag = if l.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<22} {}", l.id, l.detail);
        if !l.passed {
            if known.len() == l.failing.len() {
                println!("     known deviation: {}", known.join("; "));
            } else {
                unexpected += 1;
            }
        }
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("acceptance: {} of {} criteria passed, {} unexpected failures", lines.len() - failed, lines.len(), unexpected);
    if unexpected > 0 {
        std::process::exit(1);
    }
}

fn determinism() -> Vec<String> {
    // A reduced batch comparison keeps the rerun short; the code path is the full one.
    let compare = CompareSpec {
        ks: vec![10, 30],
        settings: ComparisonSettings {
            tune_iterations: 500,
            ..CompareSpec::default().settings
        },
        ..CompareSpec::default()
    };
    let specs = vec![
        ExperimentSpec::FigEigs(EigsSpec {
            families: vec![EigsFamily { trials: 200, ..EigsFamily::sized(4, 2, 1, 0.0) }],
            witness: Some(WitnessSpec::default()),
            ..EigsSpec::default()
        }),
        ExperimentSpec::FigLambs(LambsSpec { trials: 200, ..LambsSpec::default() }),
        ExperimentSpec::FigCond(CondSpec::default()),
        ExperimentSpec::FigCompare(compare),
        ExperimentSpec::EquivalenceSuite(EquivalenceSpec::default()),
        ExperimentSpec::OperatorSuite(OperatorSpec::default()),
    ];
    let mut bad = Vec::new();
    for spec in specs {
        let text = serde_json::to_string(&spec).expect("spec serializes");
        let again: ExperimentSpec = serde_json::from_str(&text).expect("spec parses");
        let a = run_experiment(&spec).expect("first run");
        let b = run_experiment(&again).expect("second run");
        if a.tables != b.tables || a.summary_json().unwrap() != b.summary_json().unwrap() {
            bad.push(spec.name().to_string());
        }
    }
    bad
}
