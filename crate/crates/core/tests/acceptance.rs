//! Acceptance suite. Each test writes one `PASS`/`FAIL` line straight to
//! stdout (bypassing capture) and then asserts.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use verifair::anova::{anova_distances, sequential_anova, AnovaOptions, FactorBlock};
use verifair::data::{consolidate_identity_attributes, parse_images, Label};
use verifair::diagnostics::simulate_residuals;
use verifair::logit::{
    bootstrap_marginal_effects, fit_logit, marginal_effects, sigmoid, DesignFactor, FitOptions, Subset,
};
use verifair::metrics::{diversity, diversity_of, fairness_report, group_confusion, optimize_threshold};
use verifair::planner::{
    assign_styles, resample_epoch, sampling_weights, segment_cells, select_id_pool, IdCandidate,
    PlannerAttributes, StyleCandidate,
};
use verifair::report::{analyze, AnalysisConfig};
use verifair::simulate::{generate, SyntheticConfig, DEMO_SCHEMA};

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {}: {title} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} failed: {title} ({detail})");
}

#[test]
fn criterion_01_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let genders = ["Male", "Female"];
    let ethnicities = ["Caucasian", "African", "Asian", "Indian"];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=1000);
        let n_groups = rng.random_range(1..=8);
        let mut pairs = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        for i in 0..n {
            let g = rng.random_range(0..n_groups);
            let same = rng.random_bool(0.5);
            // coarse grid so that ties in distance occur
            let d = (rng.random_range(0..200) as f64) / 100.0 + if same { 0.0 } else { 0.3 };
            let truth = if same { Label::Same } else { Label::Different };
            pairs.push(common::pair(i, truth, d));
            covs.push(common::covariates(
                i,
                &[("gender", genders[g / 4]), ("ethnicity", ethnicities[g % 4])],
                &[],
            ));
        }
        if !pairs.iter().any(|p| p.ground_truth == Label::Same) {
            pairs[0].ground_truth = Label::Same;
        }
        if !pairs.iter().any(|p| p.ground_truth == Label::Different) {
            pairs[1].ground_truth = Label::Different;
        }
        let grouping = vec!["gender".to_string(), "ethnicity".to_string()];
        let tau = optimize_threshold(&pairs).unwrap().threshold;
        let confusion = group_confusion(&pairs, &covs, tau, &grouping, 0).unwrap();
        let report = fairness_report(&confusion, tau).unwrap();
        let tally = common::tally_oracle(&pairs, &covs, tau, &grouping);
        let counts: Vec<[u64; 4]> = tally.values().copied().collect();
        let expected = common::metrics_oracle(&counts);
        let got = [report.dob, report.dpd, report.dpr, report.eod, report.eor, report.micro_accuracy];
        let stats_match = confusion.groups.len() == tally.len()
            && confusion
                .groups
                .iter()
                .all(|s| tally[&s.group.label()] == [s.tp, s.fp, s.tn, s.fn_]);
        if got != expected || !stats_match {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "metric oracle equivalence",
        mismatches == 0 && secs < 10.0,
        &format!("1000 datasets, {mismatches} mismatches, {secs:.2}s (limit 10s)"),
    );
}

#[test]
fn criterion_02_diversity_fidelity() {
    let skewed = diversity(&[0.7, 0.1, 0.1, 0.1], 4).unwrap();
    let uniform = diversity(&[0.25; 4], 4).unwrap();
    let point = diversity(&[1.0, 0.0], 2).unwrap();
    let pass = (skewed - 0.678385).abs() <= 1e-6 && uniform == 1.0 && point == 0.0;
    verdict(
        2,
        "normalized entropy fidelity",
        pass,
        &format!(
            "skewed = {skewed:.10} vs 0.678385 +/- 1e-6 (|diff| = {:.3e}); uniform = {uniform}; point mass = {point}",
            (skewed - 0.678385).abs()
        ),
    );
}

#[test]
fn criterion_03_logit_closed_form() {
    let design = common::two_by_two();
    let fit = fit_logit(&design, FitOptions::default()).unwrap();
    let b0 = -(3.0f64).ln();
    let b1 = (9.0f64).ln();
    let effects = marginal_effects(&fit, &design, 0.05).unwrap();
    let me = effects[0].estimate;
    let pass = (fit.beta[0] - b0).abs() < 1e-8
        && (fit.beta[1] - b1).abs() < 1e-8
        && (fit.beta[0] - -1.098612).abs() < 1e-6
        && (fit.beta[1] - 2.197225).abs() < 1e-6
        && fit.converged
        && fit.iterations <= 25
        && (me - 0.5).abs() < 1e-10;
    verdict(
        3,
        "logit closed form on the 2x2 design",
        pass,
        &format!(
            "beta = ({:.9}, {:.9}), {} iterations, marginal effect {:.12}",
            fit.beta[0], fit.beta[1], fit.iterations, me
        ),
    );
}

#[test]
fn criterion_04_logit_recovery() {
    let truth = [-0.8, 0.6, -0.4, 0.9];
    let mut covered = 0;
    for seed in 0..100 {
        let sim = common::simulate_logit(50_000, &truth, 10_000 + seed);
        let fit = fit_logit(&sim.design, FitOptions::default()).unwrap();
        let se = fit.std_errors();
        if (0..4).all(|j| (fit.beta[j] - truth[j]).abs() <= 3.0 * se[j]) {
            covered += 1;
        }
    }
    verdict(
        4,
        "logit coefficient recovery",
        covered >= 95,
        &format!("{covered}/100 seeds with every coefficient within 3 SE (need >= 95)"),
    );
}

#[test]
fn criterion_05_marginal_effect_oracle() {
    let sim = common::simulate_logit(4000, &[-0.5, 0.7, -0.3, 0.5], 55);
    let design = &sim.design;
    let fit = fit_logit(design, FitOptions::default()).unwrap();
    let effects = marginal_effects(&fit, design, 0.05).unwrap();
    let beta = fit.beta_vector();
    let n = design.nrows() as f64;

    let mut worst: f64 = 0.0;
    for e in &effects {
        let oracle = match e.level.as_deref() {
            Some(level) => {
                let DesignFactor::Categorical { levels, .. } = &design.factors[0] else { unreachable!() };
                let col = levels.iter().find(|(l, _)| l == level).unwrap().1;
                let mut at_level = design.x.clone();
                let mut at_ref = design.x.clone();
                for r in 0..design.nrows() {
                    for (_, c) in levels {
                        at_level[(r, *c)] = 0.0;
                        at_ref[(r, *c)] = 0.0;
                    }
                    at_level[(r, col)] = 1.0;
                }
                let p1 = (&at_level * &beta).map(sigmoid).sum() / n;
                let p0 = (&at_ref * &beta).map(sigmoid).sum() / n;
                p1 - p0
            }
            None => {
                let eta = &design.x * &beta;
                eta.map(|v| sigmoid(v) * (1.0 - sigmoid(v))).sum() * beta[3] / n
            }
        };
        worst = worst.max((e.estimate - oracle).abs());
    }

    let boot = bootstrap_marginal_effects(design, FitOptions::default(), 400, 99);
    let worst_rel = effects
        .iter()
        .zip(&boot.std_errors)
        .map(|(e, b)| (b / e.std_error - 1.0).abs())
        .fold(0.0, f64::max);
    let pass = worst < 1e-12 && boot.n_failed == 0 && worst_rel <= 0.25;
    verdict(
        5,
        "marginal effects vs counterfactual oracle and bootstrap",
        pass,
        &format!(
            "max |estimate - oracle| = {worst:.2e} (limit 1e-12); max bootstrap/delta SE deviation {:.1}% (limit 25%)",
            worst_rel * 100.0
        ),
    );
}

fn block(name: &str, columns: Vec<Vec<f64>>) -> FactorBlock {
    FactorBlock {
        name: name.into(),
        columns,
    }
}

#[test]
fn criterion_06_anova_identities() {
    let mut ok = true;
    let mut notes = Vec::new();

    // two groups {1,1} vs {3,3}
    let t = sequential_anova(&[1.0, 1.0, 3.0, 3.0], &[block("g", vec![vec![0.0, 0.0, 1.0, 1.0]])], Subset::Positives)
        .unwrap();
    ok &= (t.factors[0].eta_squared - 1.0).abs() < 1e-10;
    notes.push(format!("two-group eta2 = {}", t.factors[0].eta_squared));

    // sum identity, scaling and order invariance on random and balanced designs
    let schema = common::schema();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sum: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for rep in 0..50 {
        let n = 200;
        let mut pairs = Vec::new();
        let mut covs = Vec::new();
        let eth = ["Caucasian", "African", "Asian", "Indian"];
        for i in 0..n {
            let e = eth[rng.random_range(0..4)];
            let g = if rng.random_bool(0.5) { "Male" } else { "Female" };
            let age: f64 = rng.random_range(20.0..60.0);
            let pose: f64 = rng.random_range(0.0..40.0);
            let d = 1.0 + 0.2 * (e == "African") as u8 as f64 + 0.01 * age + rng.random::<f64>();
            pairs.push(common::pair(i, Label::Different, d));
            covs.push(common::covariates(i, &[("ethnicity", e), ("gender", g)], &[("age", age), ("pose", pose)]));
        }
        let order: Vec<String> = ["ethnicity", "gender", "age", "pose"].map(String::from).to_vec();
        let t = anova_distances(&pairs, &covs, &schema, Subset::Negatives, &order, AnovaOptions::default()).unwrap();
        let sum: f64 = t.factors.iter().map(|f| f.eta_squared).sum();
        worst_sum = worst_sum.max((sum - t.r_squared).abs());
        let c = 0.1 + rep as f64;
        let scaled: Vec<_> = pairs
            .iter()
            .map(|p| common::pair(0, p.ground_truth, p.distance * c))
            .collect();
        let ts = anova_distances(&scaled, &covs, &schema, Subset::Negatives, &order, AnovaOptions::default()).unwrap();
        for (a, b) in t.factors.iter().zip(&ts.factors) {
            worst_scale = worst_scale.max((a.eta_squared - b.eta_squared).abs());
        }
        worst_scale = worst_scale.max((t.r_squared - ts.r_squared).abs());
    }
    ok &= worst_sum < 1e-10 && worst_scale < 1e-10;
    notes.push(format!("max |sum eta2 - R2| = {worst_sum:.1e}, max scaling change = {worst_scale:.1e}"));

    // balanced 3 x 4 layout with 5 replicates per cell
    let mut y = Vec::new();
    let (mut a_cols, mut b_cols) = (vec![vec![]; 2], vec![vec![]; 3]);
    for a in 0..3 {
        for b in 0..4 {
            for _ in 0..5 {
                y.push(a as f64 * 0.5 - b as f64 * 0.3 + rng.random::<f64>());
                for (k, col) in a_cols.iter_mut().enumerate() {
                    col.push((a == k + 1) as u8 as f64);
                }
                for (k, col) in b_cols.iter_mut().enumerate() {
                    col.push((b == k + 1) as u8 as f64);
                }
            }
        }
    }
    let ab = sequential_anova(&y, &[block("a", a_cols.clone()), block("b", b_cols.clone())], Subset::Positives).unwrap();
    let ba = sequential_anova(&y, &[block("b", b_cols), block("a", a_cols)], Subset::Positives).unwrap();
    let order_diff = ["a", "b"]
        .iter()
        .map(|f| (ab.eta_squared(f).unwrap() - ba.eta_squared(f).unwrap()).abs())
        .fold(0.0, f64::max);
    ok &= order_diff < 1e-10;
    notes.push(format!("balanced order change = {order_diff:.1e}"));

    verdict(6, "ANOVA identities", ok, &notes.join("; "));
}

fn write_dataset(dir: &Path, config: &SyntheticConfig) -> AnalysisConfig {
    let data = generate(config).unwrap();
    std::fs::write(dir.join("schema.json"), DEMO_SCHEMA).unwrap();
    std::fs::write(dir.join("images.csv"), data.images_csv()).unwrap();
    std::fs::write(dir.join("pairs.csv"), data.pairs_csv()).unwrap();
    AnalysisConfig {
        schema: dir.join("schema.json"),
        images: dir.join("images.csv"),
        pairs: dir.join("pairs.csv"),
        out: dir.join("out"),
        ..AnalysisConfig::default()
    }
}

fn json_of(bundle: &verifair::report::Bundle, name: &str) -> Value {
    serde_json::from_slice(bundle.get(name).unwrap()).unwrap()
}

#[test]
fn criterion_07_end_to_end_bias_detection() {
    let start = Instant::now();
    let biased = SyntheticConfig {
        n_identities: 2000,
        n_positive_pairs: 10_000,
        n_negative_pairs: 10_000,
        seed: 2024,
        ..SyntheticConfig::default()
    };
    let control = SyntheticConfig {
        fmr_shifts: vec![],
        ..biased.clone()
    };
    let dir_b = tempfile::tempdir().unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    let bundle_b = analyze(&write_dataset(dir_b.path(), &biased)).unwrap();
    let bundle_c = analyze(&write_dataset(dir_c.path(), &control)).unwrap();

    let effects = json_of(&bundle_b, "marginal_effects.json");
    let african = effects["effects"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["model"] == "FMR" && e["level"] == "African")
        .unwrap()
        .clone();
    let est = african["estimate"].as_f64().unwrap();
    let significant = african["significant"].as_bool().unwrap();
    let eta = |b: &verifair::report::Bundle| {
        json_of(b, "anova_neg.json")["table"]["factors"]
            .as_array()
            .unwrap()
            .iter()
            .find(|f| f["name"] == "ethnicity")
            .unwrap()["eta_squared"]
            .as_f64()
            .unwrap()
    };
    let (eta_b, eta_c) = (eta(&bundle_b), eta(&bundle_c));
    let secs = start.elapsed().as_secs_f64();
    let pass = significant && est > 0.0 && (0.06..=0.14).contains(&est) && eta_b > eta_c && secs < 30.0;
    verdict(
        7,
        "end-to-end FMR bias detection",
        pass,
        &format!(
            "African FMR effect {est:.4} (p = {:.2e}, significant = {significant}); ethnicity eta2 {eta_b:.5} vs control {eta_c:.5}; {secs:.2}s (limit 30s)",
            african["p_value"].as_f64().unwrap()
        ),
    );
}

#[test]
fn criterion_08_planner_guarantees() {
    let genders = ["Male", "Female"];
    let ethnicities = ["Caucasian", "African", "Asian", "Indian"];
    let schema = common::schema();
    let attrs = PlannerAttributes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ids = Vec::new();
    let mut styles = Vec::new();
    for g in genders {
        for e in ethnicities {
            let seg = vec![g.to_string(), e.to_string()];
            for k in 0..1500 {
                ids.push(IdCandidate {
                    image_id: format!("id_{g}_{e}_{k:05}"),
                    segment: seg.clone(),
                });
            }
            // uneven pool: some cells are scarce so exhaustion happens
            for k in 0..400 {
                styles.push(StyleCandidate {
                    image_id: format!("st_{g}_{e}_{k:04}"),
                    segment: seg.clone(),
                    age_bin: rng.random_range(0..9),
                    pose_bin: rng.random_range(0..5).min(rng.random_range(0..5)),
                });
            }
        }
    }
    let start = Instant::now();
    let cells = segment_cells(&schema, &attrs).unwrap();
    let pool = select_id_pool(&ids, &cells, 10_000, 3).unwrap();
    let plan = assign_styles(&pool, &styles, &attrs.segment, 50).unwrap();
    let jsonl = plan.to_jsonl();
    let secs = start.elapsed().as_secs_f64();

    let joint_labels: Vec<String> = plan
        .entries
        .iter()
        .map(|e| format!("{} x {}", e.segment["gender"], e.segment["ethnicity"]))
        .collect();
    let joint = diversity_of(joint_labels.iter().map(String::as_str), 8).unwrap();
    let style_seg: BTreeMap<&str, (&Vec<String>, (usize, usize))> = styles
        .iter()
        .map(|s| (s.image_id.as_str(), (&s.segment, (s.age_bin, s.pose_bin))))
        .collect();
    let mut capacity: BTreeMap<(&Vec<String>, (usize, usize)), usize> = BTreeMap::new();
    for s in &styles {
        *capacity.entry((&s.segment, (s.age_bin, s.pose_bin))).or_default() += 1;
    }
    let mut segment_ok = true;
    let mut balance_ok = true;
    for e in &plan.entries {
        let seg = vec![e.segment["gender"].clone(), e.segment["ethnicity"].clone()];
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let unique: BTreeSet<&str> = e.styles.iter().map(|s| s.style_image.as_str()).collect();
        balance_ok &= unique.len() == e.styles.len() && e.styles.len() == 50;
        for s in &e.styles {
            let (donor_seg, cell) = style_seg[s.style_image.as_str()];
            segment_ok &= *donor_seg == seg && cell == (s.age_bin, s.pose_bin);
            *counts.entry(cell).or_default() += 1;
        }
        let open: Vec<usize> = capacity
            .iter()
            .filter(|((sg, _), _)| **sg == seg)
            .filter(|((_, cell), cap)| counts.get(cell).copied().unwrap_or(0) < **cap)
            .map(|((_, cell), _)| counts.get(cell).copied().unwrap_or(0))
            .collect();
        if let Some(&min_open) = open.iter().min() {
            balance_ok &= counts.values().all(|&c| c <= min_open + 1);
        }
    }
    let pass = joint == 1.0 && segment_ok && balance_ok && jsonl.lines().count() == 10_000 && secs < 60.0;
    verdict(
        8,
        "planner guarantees",
        pass,
        &format!(
            "joint gender x ethnicity diversity {joint}; segment match {segment_ok}; per-identity balance {balance_ok}; 10000 x 50 in {secs:.2}s (limit 60s)"
        ),
    );
}

#[test]
fn criterion_09_weighting_formula() {
    let schema = verifair::schema::AttributeSchema::from_json(
        r#"{"attributes": [{"name": "a", "kind": "categorical", "scope": "image", "levels": ["A", "B"], "reference": "A"}]}"#,
    )
    .unwrap();
    let csv = "image_id,identity_id,a\ni1,x1,A\ni2,x2,A\ni3,x3,B\n";
    let images = consolidate_identity_attributes(&parse_images(csv.as_bytes(), &schema).unwrap(), &schema).unwrap();
    let w = sampling_weights(&images, &schema, &["a".to_string()]).unwrap();
    let p: Vec<f64> = w.entries.iter().map(|e| e.probability).collect();
    let exact = p == [0.25, 0.25, 0.5];
    let draws = resample_epoch(&w, 100_000, 9).unwrap();
    let mut worst: f64 = 0.0;
    for (e, target) in w.entries.iter().zip(&p) {
        let freq = draws.iter().filter(|d| **d == e.image_id).count() as f64 / 100_000.0;
        worst = worst.max((freq - target).abs());
    }
    verdict(
        9,
        "inverse-frequency weighting",
        exact && worst <= 0.01,
        &format!("p = {p:?}; max resampling deviation {worst:.4} (limit 0.01)"),
    );
}

#[test]
fn criterion_10_diagnostics_calibration() {
    let truth = [-0.3, 0.5, -0.5, 0.8];
    let mut passing = 0;
    for seed in 0..100 {
        let sim = common::simulate_logit(1000, &truth, 20_000 + seed);
        let fit = fit_logit(&sim.design, FitOptions::default()).unwrap();
        let d = simulate_residuals(&fit, &sim.design, 250, seed).unwrap();
        if d.ks_p_value > 0.01 {
            passing += 1;
        }
    }
    let big = common::simulate_logit(10_000, &truth, 31);
    let fit = fit_logit(&big.design, FitOptions::default()).unwrap();
    let d = simulate_residuals(&fit, &big.design, 250, 31).unwrap();
    let pass = passing >= 95 && (d.dispersion_ratio - 1.0).abs() <= 0.1;
    verdict(
        10,
        "residual diagnostics calibration",
        pass,
        &format!(
            "KS p > 0.01 in {passing}/100 seeds (need >= 95); dispersion ratio at n = 10000: {:.4} (1 +/- 0.1)",
            d.dispersion_ratio
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_dataset(
        dir.path(),
        &SyntheticConfig {
            seed: 11,
            ..SyntheticConfig::default()
        },
    );
    config.bootstrap = 50;
    config.seed = 5;
    let first = analyze(&config).unwrap();
    let second = analyze(&config).unwrap();
    config.out = dir.path().join("out2");
    second.write_to(&dir.path().join("out1")).unwrap();
    let third = analyze(&config).unwrap();
    third.write_to(&config.out).unwrap();
    let on_disk_equal = first.files.iter().all(|(name, bytes)| {
        std::fs::read(dir.path().join("out1").join(name)).unwrap() == *bytes
            && std::fs::read(config.out.join(name)).unwrap() == *bytes
    });
    let pass = first == second && second == third && on_disk_equal;
    verdict(
        11,
        "byte-identical analyze bundles",
        pass,
        &format!("{} files compared across three runs", first.files.len()),
    );
}
