//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erfc;

use subaudit::calibration::{cusum_statistic, simulate_null, CalibrationConfig, Direction, Variant};
use subaudit::data::{AttributeKind, AttributeValue, AuditDataset, AuditRecord, SubgroupFilter};
use subaudit::report::{
    build_performance_table, ComparisonOutcome, ComparisonRow, Format, Subgroup,
};
use subaudit::residual::ResidualModelConfig;
use subaudit::roc::{
    auroc, auroc_with_variance, delong_correlated, structural_components, CorrelationMode, RocComparison,
    SignificanceBand, Z_95,
};
use subaudit::study::{run_study, StudyConfig, StudyTest};
use subaudit::synth::{
    brute_force_auc, exhaustive_null_statistic, AttributeSpec, PopulationSpec, RiskFormula, RiskTerm, ScoreLaw,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut ran = 0;
    while ran < 1000 {
        let n = r.random_range(2..=200);
        // a coarse grid forces ties
        let levels = r.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let (Ok(a), Ok(b)) = (auroc(&scores, &labels), brute_force_auc(&scores, &labels)) else {
            continue;
        };
        worst = worst.max((a - b).abs());
        ran += 1;
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("1000 instances, max |auroc - brute| = {worst:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn ac2() -> Outcome {
    let mut r = rng(2);
    let mut self_ok = 0;
    for _ in 0..100 {
        let n = r.random_range(6..=150);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = true;
        labels[2] = false;
        labels[3] = false;
        let a: Vec<f64> = (0..n).map(|_| r.random_range(0..30) as f64 / 30.0).collect();
        let c = delong_correlated(&a, &a, &labels).unwrap();
        if c.diff == 0.0 && c.p_value == 1.0 {
            self_ok += 1;
        }
    }

    // six points enumerated by hand; ties at 0.6 in model a
    let labels = [true, true, true, false, false, false];
    let a = [0.9, 0.6, 0.4, 0.5, 0.3, 0.6];
    let b = [0.8, 0.7, 0.3, 0.2, 0.4, 0.5];
    let v10_a = [1.0, 2.5 / 3.0, 1.0 / 3.0];
    let v01_a = [2.0 / 3.0, 1.0, 1.5 / 3.0];
    let v10_b = [1.0, 1.0, 1.0 / 3.0];
    let v01_b = [1.0, 2.0 / 3.0, 2.0 / 3.0];
    let auc_a = 6.5 / 9.0;
    let auc_b = 7.0 / 9.0;
    let s10 = sample_cov(&v10_a, &v10_a) + sample_cov(&v10_b, &v10_b) - 2.0 * sample_cov(&v10_a, &v10_b);
    let s01 = sample_cov(&v01_a, &v01_a) + sample_cov(&v01_b, &v01_b) - 2.0 * sample_cov(&v01_a, &v01_b);
    let var = s10 / 3.0 + s01 / 3.0;
    let z = (auc_a - auc_b) / var.sqrt();
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);

    let (ca10, ca01) = structural_components(&a, &labels).unwrap();
    let (cb10, cb01) = structural_components(&b, &labels).unwrap();
    let c = delong_correlated(&a, &b, &labels).unwrap();
    let mut err = 0.0f64;
    for (x, y) in ca10.iter().chain(&ca01).chain(&cb10).chain(&cb01).zip(v10_a.iter().chain(&v01_a).chain(&v10_b).chain(&v01_b)) {
        err = err.max((x - y).abs());
    }
    for (x, y) in [(c.auc_a, auc_a), (c.auc_b, auc_b), (c.diff, auc_a - auc_b), (c.variance, var), (c.z, z), (c.p_value, p)] {
        err = err.max((x - y).abs());
    }
    outcome(
        self_ok == 100 && err <= 1e-12,
        format!("self-tests {self_ok}/100 with diff 0 and p 1; 6-point instance max error {err:.2e}"),
    )
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let mu = 1.0;
    let truth = phi(mu / std::f64::consts::SQRT_2);
    let mut covered = 0;
    for rep in 0..1000u64 {
        let mut r = rng(3_000 + rep);
        let mut scores = Vec::with_capacity(600);
        let mut labels = Vec::with_capacity(600);
        for _ in 0..300 {
            scores.push(mu + normal(&mut r));
            labels.push(true);
        }
        for _ in 0..300 {
            scores.push(normal(&mut r));
            labels.push(false);
        }
        let (auc, var) = auroc_with_variance(&scores, &labels).unwrap();
        let half = Z_95 * var.sqrt();
        if (auc - half..=auc + half).contains(&truth) {
            covered += 1;
        }
    }
    let t = start.elapsed();
    let rate = covered as f64 / 1000.0;
    outcome(
        (0.93..=0.97).contains(&rate) && t < Duration::from_secs(60),
        format!("coverage {rate:.3} of true AUC {truth:.4}, {:.2}s", t.as_secs_f64()),
    )
}

fn ac4() -> Outcome {
    let mut err = 0.0f64;
    let mut check = |got: f64, want: f64| err = err.max((got - want).abs());

    let y = [true, false, true, false];
    let s = [0.2, 0.6, 0.5, 0.3];
    let g = vec![vec![0.1, -0.2, 0.0, -0.4], vec![-0.3, 0.2, 0.1, -0.1]];
    let (traj, under) = cusum_statistic(&y, &s, &g, Direction::Underestimation).unwrap();
    // member 0: row 0 only, (1 - 0.2) * 0.1; member 1: rows 1, 2
    check(traj[0].final_stat, 0.08 / 4.0);
    check(traj[1].final_stat, ((0.0 - 0.6) * 0.2 + (1.0 - 0.5) * 0.1) / 4.0);
    check(under, 0.08 / 4.0);
    let (traj, over) = cusum_statistic(&y, &s, &g, Direction::Overestimation).unwrap();
    check(traj[0].final_stat, (0.6 * 0.2 + 0.3 * 0.4) / 4.0);
    check(traj[1].final_stat, ((0.2 - 1.0) * 0.3 + 0.3 * 0.1) / 4.0);
    check(over, 0.24 / 4.0);
    for (got, want) in traj[0].partial_sums.iter().zip([0.0, 0.12, 0.12, 0.24]) {
        check(*got, want);
    }

    let (_, one) = cusum_statistic(&[false], &[0.7], &[vec![-0.5]], Direction::Overestimation).unwrap();
    check(one, 0.35);
    let (_, none) = cusum_statistic(&[false], &[0.7], &[vec![-0.5]], Direction::Underestimation).unwrap();
    check(none, 0.0);
    let (_, zero) = cusum_statistic(&[true, false], &[0.4, 0.1], &[vec![0.0, 0.0]], Direction::Overestimation).unwrap();
    check(zero, 0.0);
    let (_, two) = cusum_statistic(&[true, true], &[0.25, 0.5], &[vec![0.5, 0.25]], Direction::Underestimation).unwrap();
    check(two, (0.75 * 0.5 + 0.5 * 0.25) / 2.0);

    outcome(err <= 1e-12, format!("hand instances of 1-4 rows, max error {err:.2e}"))
}

fn ac5() -> Outcome {
    let shifted = [0.12, 0.35, 0.5, 0.62, 0.81, 0.93, 0.27, 0.44, 0.7, 0.05];
    let ghat = vec![
        vec![0.1, -0.2, 0.05, -0.3, 0.2, -0.1, 0.0, 0.15, -0.05, 0.3],
        vec![-0.05, 0.1, -0.2, 0.3, -0.1, 0.2, 0.1, -0.15, 0.25, -0.2],
        vec![0.2, 0.2, -0.1, -0.1, 0.05, 0.05, -0.3, 0.1, 0.1, -0.1],
    ];
    let b = 2000;
    let mut lines = Vec::new();
    let mut pass = true;
    for d in Direction::BOTH {
        let table = exhaustive_null_statistic(&shifted, &ghat, d).unwrap();
        let (mean, var) = (table.mean(), table.variance());
        let mu4: f64 = table.points.iter().map(|(v, p)| p * (v - mean).powi(4)).sum();
        let nulls = simulate_null(&shifted, &ghat, d, b, 5);
        let m = nulls.iter().sum::<f64>() / b as f64;
        let v = nulls.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (b - 1) as f64;
        let se_mean = (var / b as f64).sqrt();
        let se_var = ((mu4 - var * var) / b as f64).sqrt();
        let zm = (m - mean).abs() / se_mean;
        let zv = (v - var).abs() / se_var;
        pass &= zm <= 3.0 && zv <= 3.0;
        lines.push(format!("{}: mean off by {zm:.2} SE, variance by {zv:.2} SE", d.as_str()));
    }
    outcome(pass, format!("n2 = 10, B = {b}; {}", lines.join("; ")))
}

fn audit_population(n: usize, law: ScoreLaw) -> PopulationSpec {
    let mut attributes = BTreeMap::new();
    attributes.insert(
        "sex".to_string(),
        AttributeSpec::Categorical {
            levels: vec!["F".into(), "M".into()],
            probs: vec![0.3, 0.7],
        },
    );
    attributes.insert("age".to_string(), AttributeSpec::Normal { mean: 55.0, sd: 15.0 });
    attributes.insert("bmi".to_string(), AttributeSpec::Normal { mean: 27.0, sd: 4.0 });
    attributes.insert("height".to_string(), AttributeSpec::Normal { mean: 170.0, sd: 10.0 });
    PopulationSpec {
        n,
        seed: 0,
        attributes,
        true_risk: RiskFormula {
            intercept: -1.0,
            terms: vec![RiskTerm::Linear {
                attribute: "age".into(),
                coef: 0.03,
                center: 55.0,
            }],
            latent_sd: 1.0,
        },
        model_score_law: law,
        model_name: "model".into(),
        extra_models: BTreeMap::new(),
        embedding: None,
    }
}

fn split_study(population: PopulationSpec, seed: u64) -> subaudit::Result<subaudit::study::PowerSummary> {
    let study = StudyConfig {
        population,
        trials: 100,
        test: StudyTest::Calibration {
            audit: CalibrationConfig {
                delta: 0.0,
                direction: Direction::Overestimation,
                variant: Variant::Split { n1_fraction: 0.5 },
                mc_replicates: 500,
                vi_permutations: 10,
                ..CalibrationConfig::default()
            },
        },
        alpha: 0.05,
    };
    run_study(&study, seed)
}

fn ac6() -> Outcome {
    let start = Instant::now();
    let summary = match split_study(audit_population(4000, ScoreLaw::TrueRisk), 6) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("study failed: {e}")),
    };
    let t = start.elapsed();
    outcome(
        summary.rejections <= 7 && t < Duration::from_secs(600),
        format!("{}/100 rejections at alpha 0.05, {:.0}s", summary.rejections, t.as_secs_f64()),
    )
}

fn ac7() -> Outcome {
    let law = ScoreLaw::Biased {
        filter: SubgroupFilter::equals("sex", "F"),
        logit_shift: 0.8,
    };
    let start = Instant::now();
    let summary = match split_study(audit_population(5000, law), 7) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("study failed: {e}")),
    };
    let top3 = summary.planted_top3.unwrap_or(0);
    outcome(
        summary.rejections >= 90 && top3 >= 90,
        format!(
            "{}/100 rejections, planted attribute in VI top 3 in {top3}/100, {:.0}s",
            summary.rejections,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn ac8() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=300);
        let k = r.random_range(1..=6);
        let y: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let g: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| 0.3 * normal(&mut r)).collect()).collect();
        let y2: Vec<bool> = y.iter().map(|b| !b).collect();
        let s2: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        // residual event rates mirror as well: (1 - rate) - (1 - s) = -(rate - s)
        let g2: Vec<Vec<f64>> = g.iter().map(|m| m.iter().map(|v| -v).collect()).collect();
        for (d, m) in [
            (Direction::Underestimation, Direction::Overestimation),
            (Direction::Overestimation, Direction::Underestimation),
        ] {
            let (_, a) = cusum_statistic(&y, &s, &g, d).unwrap();
            let (_, b) = cusum_statistic(&y2, &s2, &g2, m).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-12, format!("100 instances, max |under - mirrored over| = {worst:.2e}"))
}

fn run_cli(args: &[&str], threads: Option<&str>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_subaudit"));
    cmd.args(args).env_remove("AUDIT_THREADS");
    if let Some(t) = threads {
        cmd.env("AUDIT_THREADS", t);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    files
}

fn ac9() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let inputs = root.path().join("inputs");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    if let Err(e) = run_cli(&["--seed", "5", "--out-dir", &s(&inputs), "gen", "--n", "300"], None) {
        return outcome(false, e);
    }
    let grid = inputs.join("grid.json");
    std::fs::write(&grid, serde_json::to_string(&[ResidualModelConfig::new(2, 1e-2)]).unwrap()).unwrap();
    let study = inputs.join("study.json");
    let study_cfg = StudyConfig {
        population: PopulationSpec::default_template(200, 0),
        trials: 3,
        test: StudyTest::Calibration {
            audit: CalibrationConfig {
                mc_replicates: 100,
                vi_permutations: 10,
                configs: vec![ResidualModelConfig::new(2, 1e-2)],
                ..CalibrationConfig::default()
            },
        },
        alpha: 0.05,
    };
    std::fs::write(&study, serde_json::to_string_pretty(&study_cfg).unwrap()).unwrap();
    let data = s(&inputs.join("data.csv"));

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen", vec!["gen".into(), "--n".into(), "200".into()]),
        (
            "discrim",
            vec![
                "discrim".into(),
                "--data".into(),
                data.clone(),
                "--subgroup".into(),
                "Women:sex=F".into(),
                "--subgroup".into(),
                "Older:age>=60".into(),
                "--compare-subgroups".into(),
                "Women:sex=F vs Men:sex=M".into(),
            ],
        ),
        (
            "calib",
            vec![
                "calib".into(),
                "--data".into(),
                data.clone(),
                "--replicates".into(),
                "100".into(),
                "--permutations".into(),
                "10".into(),
                "--grid".into(),
                s(&grid),
            ],
        ),
        ("power", vec!["power".into(), "--study".into(), s(&study)]),
    ];

    let mut notes = Vec::new();
    let mut pass = true;
    for format in ["md", "json", "csv"] {
        for (name, args) in &commands {
            let mut runs = Vec::new();
            for (tag, threads) in [("a", None), ("b", None), ("t1", Some("1")), ("t8", Some("8"))] {
                let dir: PathBuf = root.path().join(format!("{name}-{format}-{tag}"));
                let mut full: Vec<String> = vec![
                    "--seed".into(),
                    "11".into(),
                    "--format".into(),
                    format.into(),
                    "--out-dir".into(),
                    s(&dir),
                ];
                full.extend(args.iter().cloned());
                let refs: Vec<&str> = full.iter().map(String::as_str).collect();
                if let Err(e) = run_cli(&refs, threads) {
                    return outcome(false, e);
                }
                runs.push(dir_contents(&dir));
            }
            let same = runs.windows(2).all(|w| w[0] == w[1]);
            if !same {
                pass = false;
                notes.push(format!("{name}/{format} differs"));
            } else if format == "md" {
                notes.push(format!("{name}: {} files", runs[0].len()));
            }
        }
    }
    outcome(
        pass,
        format!("4 runs per subcommand and format (2 default, AUDIT_THREADS 1 and 8); {}", notes.join(", ")),
    )
}

fn fixture_dataset() -> AuditDataset {
    let labels = [true, true, true, true, false, false, false, false];
    let scores = [0.9, 0.8, 0.4, 0.3, 0.7, 0.45, 0.2, 0.1];
    let records = labels
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&outcome, score))| {
            let mut attributes = BTreeMap::new();
            attributes.insert("sex".to_string(), AttributeValue::Categorical(if i % 2 == 0 { "F" } else { "M" }.into()));
            AuditRecord {
                id: format!("p{i}"),
                outcome,
                score,
                other_scores: BTreeMap::new(),
                attributes,
                embedding: None,
            }
        })
        .collect();
    let mut schema = BTreeMap::new();
    schema.insert(
        "sex".to_string(),
        AttributeKind::Categorical {
            levels: vec!["F".into(), "M".into()],
        },
    );
    AuditDataset::from_records(records, schema).unwrap()
}

fn comparison_row(diff: f64, lo: f64, hi: f64, p: f64) -> ComparisonRow {
    ComparisonRow {
        subgroup: "Overall".into(),
        comparison: "a vs b".into(),
        outcome: ComparisonOutcome::Tested {
            result: RocComparison {
                auc_a: 0.5 + diff,
                auc_b: 0.5,
                diff,
                variance: 0.0,
                z: 0.0,
                p_value: p,
                ci95: (lo, hi),
                mode: CorrelationMode::Correlated,
            },
            band: SignificanceBand::of(p),
        },
    }
}

fn ac10() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: String, want: &str| {
        if got != want {
            failures.push(format!("{what}: got `{got}`, want `{want}`"));
        }
    };

    let ds = fixture_dataset();
    let table = build_performance_table(&ds, &["score".to_string()], &[Subgroup::overall()], 0.95).unwrap();
    let csv = table.render(Format::Csv).unwrap();
    let mut lines = csv.lines();
    expect(
        "performance header",
        lines.next().unwrap_or_default().to_string(),
        "Subgroup,Model,Total,Positives,False Positives at 95% Threshold,Sensitivity at 95% Threshold,Specificity at 95% Threshold,AUROC",
    );
    // 12 of 16 pairs ordered; threshold 0.3 admits negatives 0.7 and 0.45
    expect("performance row", lines.next().unwrap_or_default().to_string(), "Overall,score,8,4,2,100%,50%,0.750");

    let row = comparison_row(0.0312, 0.0091, 0.0533, 0.0062);
    expect("difference cell", row.difference_cell(), "0.031 (0.009, 0.053)");
    expect("p cell", row.p_cell(), "0.006");
    expect("band cell", row.band_cell(), "significant");
    expect("combined cell", row.rendered(), "0.031 (0.009, 0.053) / 0.006");
    let neg = comparison_row(-0.0004, -0.0201, 0.0193, 0.97);
    expect("negative zero", neg.difference_cell(), "0.000 (-0.020, 0.019)");
    for (p, band) in [(0.0499, "significant"), (0.05, "marginal"), (0.1, "marginal"), (0.1001, ""), (0.8, "")] {
        expect(&format!("band at p = {p}"), comparison_row(0.01, 0.0, 0.02, p).band_cell(), band);
    }
    outcome(failures.is_empty(), if failures.is_empty() {
        "performance and comparison cells match expected strings".to_string()
    } else {
        failures.join("; ")
    })
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC-1", "auroc matches pairwise oracle", ac1),
        ("AC-2", "DeLong self-test and hand instance", ac2),
        ("AC-3", "CI coverage on bi-normal replicates", ac3),
        ("AC-4", "CUSUM statistic on hand instances", ac4),
        ("AC-5", "Monte Carlo null vs exhaustive table", ac5),
        ("AC-6", "type-I control of the split audit", ac6),
        ("AC-7", "power and VI on a planted bias", ac7),
        ("AC-8", "under/over mirror symmetry", ac8),
        ("AC-9", "CLI determinism", ac9),
        ("AC-10", "table rendering", ac10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let result = run();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {title}: {}", result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
